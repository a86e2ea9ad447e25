//! End-to-end orchestration: simulate → supervise → insertion model →
//! reward model → deletion model → completion model → arbitration (learned
//! and rules) → downstream responders → evaluation, all under one seeded
//! config with a digest manifest. Stages with unchanged outputs are skipped
//! on re-runs.

use crate::cascade::{
    arbitrate, infer_by_dialog, load_traces, parse_order, rule_arbitrate, save_traces,
    ArbitrationTrace, Stage, StageModels,
};
use crate::config::RunConfig;
use crate::data::{consistency_judge, Corpus, Dialog, KnowledgeBase, Ontology};
use crate::manifest::{digest_outputs, save_timings, RunManifest, StageRecord};
use crate::metrics::{
    bleu, entity_f1, rc_accuracy, rd_f1, response_dialog_accuracy, ri_f1, set_sizes,
    MetricReport, PredictedResponse,
};
use crate::models::*;
use crate::nn::params::{seeded_rng, sub_seed};
use crate::nn::Vocab;
use crate::sim::{
    load_gold_dir, simulate, write_output, SimInputs, SimStats, TemplateSet,
};
use crate::supervision::{build_ri_dataset, RiDataset};
use crate::{CoreError, Real, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Runner {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub config_hash: String,
    prev: Option<RunManifest>,
    manifest: RunManifest,
    timings: BTreeMap<String, f64>,
}

impl Runner {
    pub fn new(cfg: RunConfig, run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| CoreError::io(format!("creating {}", run_dir.display()), e))?;
        let config_hash = cfg.hash();
        let prev = {
            let p = run_dir.join("manifest.json");
            if p.exists() {
                RunManifest::load(&p)
                    .ok()
                    .filter(|m| m.config_hash == config_hash)
            } else {
                None
            }
        };
        cfg.save(&run_dir.join("config.json"))?;
        let manifest = RunManifest::new(&config_hash);
        Ok(Runner {
            cfg,
            run_dir: run_dir.to_path_buf(),
            config_hash,
            prev,
            manifest,
            timings: BTreeMap::new(),
        })
    }

    /// Runs (or skips) one stage. A stage is skipped when the previous
    /// manifest under the same config hash lists identical digests for all
    /// of its outputs and the files still match.
    fn stage(
        &mut self,
        name: &str,
        outputs: &[&str],
        compute: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<()> {
        let rels: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
        let cached = self
            .prev
            .as_ref()
            .and_then(|m| m.stage(name))
            .map(|record| {
                digest_outputs(&self.run_dir, &rels)
                    .map(|now| now == record.outputs)
                    .unwrap_or(false)
            })
            .unwrap_or(false);
        let start = std::time::Instant::now();
        if !cached {
            compute(self)?;
        }
        let outputs = digest_outputs(&self.run_dir, &rels)?;
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            outputs,
        });
        self.timings
            .insert(name.to_string(), start.elapsed().as_secs_f64());
        eprintln!(
            "[stage {name}] {} in {:.1}s",
            if cached { "cached" } else { "done" },
            start.elapsed().as_secs_f64()
        );
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn finish(mut self) -> Result<RunManifest> {
        let inputs = [
            ("ontology", &self.cfg.paths.ontology),
            ("base_kb", &self.cfg.paths.base_kb),
            ("templates", &self.cfg.paths.templates),
            ("checkin_profile", &self.cfg.paths.checkin_profile),
        ];
        for (label, path) in inputs {
            self.manifest
                .inputs
                .insert(label.to_string(), crate::manifest::sha256_file(path)?);
        }
        self.manifest.save(&self.run_dir.join("manifest.json"))?;
        save_timings(&self.timings, &self.run_dir.join("timings.json"))?;
        Ok(self.manifest)
    }
}

pub fn sim_inputs_from(cfg: &RunConfig, config_hash: &str) -> Result<SimInputs> {
    let ontology = Ontology::load(&cfg.paths.ontology)?;
    let base_kb = KnowledgeBase::load(&cfg.paths.base_kb)?;
    let templates = TemplateSet::load(&cfg.paths.templates)?;
    let profile = crate::sim::CheckinProfile::load(&cfg.paths.checkin_profile)?;
    let processes = cfg
        .sim
        .processes
        .iter()
        .map(|(domain, spec)| (domain.clone(), spec.resolve(&profile)))
        .collect();
    Ok(SimInputs {
        ontology,
        base_kb,
        templates,
        processes,
        train_n: cfg.sim.train,
        test_n: cfg.sim.test,
        horizon: cfg.sim.horizon,
        seed: sub_seed(cfg.seed, "simulate"),
        ordering_key: cfg.sim.ordering_key.clone(),
        config_hash: config_hash.to_string(),
    })
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(format!("creating {}", path.display()), e))?;
    writeln!(file, "{header}").map_err(|e| CoreError::io("writing csv", e))?;
    for row in rows {
        let line = row
            .iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(file, "{line}").map_err(|e| CoreError::io("writing csv", e))?;
    }
    Ok(())
}

/// Loads per-dialog KBs from a directory keyed by dialog id, aligned with
/// the corpus records.
pub fn load_dialog_kbs(dir: &Path, corpus: &Corpus) -> Result<Vec<KnowledgeBase>> {
    corpus
        .records
        .iter()
        .map(|r| KnowledgeBase::load(&dir.join(format!("{}.json", r.dialog.id))))
        .collect()
}

/// Evaluates a responder on the test split against the training KB; every
/// agent turn is generated from the gold history prefix.
pub fn eval_responder(
    model: &TodModel<Real>,
    test: &Corpus,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<Vec<PredictedResponse>> {
    use rayon::prelude::*;
    let per_dialog: Result<Vec<Vec<PredictedResponse>>> = test
        .records
        .par_iter()
        .map(|record| {
            let mut preds = Vec::new();
            for (i, _) in record.dialog.agent_utterances() {
                let tokens = generate(model, &record.dialog.utterances[..i], kb, ontology)?;
                preds.push(PredictedResponse {
                    dialog_id: record.dialog.id.clone(),
                    turn: i,
                    text: tokens.join(" "),
                });
            }
            Ok(preds)
        })
        .collect();
    Ok(per_dialog?.into_iter().flatten().collect())
}

pub struct ResponderScores {
    pub response_accuracy: f64,
    pub dialog_accuracy: f64,
    pub bleu: f64,
    pub entity_f1: f64,
    pub kb_entity_f1: f64,
}

pub fn score_responder(
    preds: &[PredictedResponse],
    test: &Corpus,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<ResponderScores> {
    let (response_accuracy, dialog_accuracy) = response_dialog_accuracy(preds, test)?;
    let mut pairs = Vec::new();
    let mut by_key: BTreeMap<(&str, usize), &PredictedResponse> = BTreeMap::new();
    for p in preds {
        by_key.insert((p.dialog_id.as_str(), p.turn), p);
    }
    for record in &test.records {
        for (i, utt) in record.dialog.agent_utterances() {
            if let Some(p) = by_key.get(&(record.dialog.id.as_str(), i)) {
                pairs.push((
                    p.text.split_whitespace().map(str::to_owned).collect(),
                    utt.tokens.clone(),
                ));
            }
        }
    }
    let bleu_score = bleu(&pairs)?;
    let (f1, kb_f1) = entity_f1(preds, test, kb, ontology)?;
    Ok(ResponderScores {
        response_accuracy,
        dialog_accuracy,
        bleu: bleu_score,
        entity_f1: f1,
        kb_entity_f1: kb_f1,
    })
}

/// Post-arbitration inconsistency rate: every trace's repaired KB judged
/// against the dialog's contemporary snapshot.
pub fn post_rate(
    corpus: &Corpus,
    traces: &[ArbitrationTrace],
    gold: &BTreeMap<String, KnowledgeBase>,
    ontology: &Ontology,
    cfg: &RunConfig,
) -> Result<f64> {
    let by_id: BTreeMap<&str, &ArbitrationTrace> =
        traces.iter().map(|t| (t.dialog_id.as_str(), t)).collect();
    let mut bad = 0usize;
    for record in &corpus.records {
        let gold_id = record
            .gold_kb_id
            .as_ref()
            .ok_or_else(|| CoreError::JudgeUnavailable(record.dialog.id.clone()))?;
        let trace = by_id.get(record.dialog.id.as_str()).ok_or_else(|| {
            CoreError::Evaluation(format!("no trace for dialog {}", record.dialog.id))
        })?;
        if !consistency_judge(
            &record.dialog,
            &trace.result_kb,
            &gold[gold_id],
            ontology,
            &cfg.sim.ordering_key,
        ) {
            bad += 1;
        }
    }
    Ok(bad as f64 / corpus.records.len().max(1) as f64)
}

fn train_mem_for(
    cfg: &RunConfig,
    vocab: &Vocab,
    ontology: &Ontology,
    pairs: &[(&Dialog, &KnowledgeBase)],
    label: &str,
) -> Result<(MemModel<Real>, Vec<(usize, f64)>)> {
    let mut mem = MemModel::new(
        cfg.model_dims(),
        vocab.clone(),
        ontology.relation_types.len(),
        sub_seed(cfg.seed, &format!("{label}:init")),
    );
    let records = prepare_mem_training(&mem, pairs, ontology);
    let curve = train_mem(
        &mut mem,
        &records,
        &TrainCfg {
            epochs: cfg.epochs.mem,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: sub_seed(cfg.seed, &format!("{label}:train")),
        },
    )?;
    Ok((mem, curve))
}

fn train_rd_for(
    cfg: &RunConfig,
    vocab: &Vocab,
    ontology: &Ontology,
    mem: &MemModel<Real>,
    pairs: &[(&Dialog, &KnowledgeBase)],
    label: &str,
) -> Result<(RdModel<Real>, Vec<(usize, f64)>)> {
    let mut rd = RdModel::new(
        cfg.model_dims(),
        vocab.clone(),
        ontology.relation_types.len(),
        sub_seed(cfg.seed, &format!("{label}:init")),
    );
    let records = prepare_rd_records(&rd, mem, pairs, ontology)?;
    let curve = train_rd(
        &mut rd,
        &records,
        &TrainCfg {
            epochs: cfg.epochs.rd,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: sub_seed(cfg.seed, &format!("{label}:train")),
        },
        cfg.mapo_w_floor,
    )?;
    Ok((rd, curve))
}

fn train_rc_for(
    cfg: &RunConfig,
    vocab: &Vocab,
    ontology: &Ontology,
    mem: &MemModel<Real>,
    pairs: &[(&Dialog, &KnowledgeBase)],
    label: &str,
) -> Result<(RcModel<Real>, Vec<(usize, f64)>)> {
    let specs = rc_relation_specs(ontology);
    let mut rc = RcModel::new(
        cfg.model_dims(),
        vocab.clone(),
        specs.clone(),
        ontology.relation_types.len(),
        sub_seed(cfg.seed, &format!("{label}:init")),
    );
    let states = build_rc_states(pairs, &specs, ontology);
    let dialogs: Vec<&Dialog> = pairs.iter().map(|(d, _)| *d).collect();
    let train_states = prepare_rc_states(mem, &dialogs, states, &specs, ontology)?;
    let curve = train_rc(
        &mut rc,
        &dialogs,
        &train_states,
        ontology,
        &TrainCfg {
            epochs: cfg.epochs.rc,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: sub_seed(cfg.seed, &format!("{label}:train")),
        },
        cfg.mapo_w_floor,
    )?;
    Ok((rc, curve))
}

fn train_tod_for(
    cfg: &RunConfig,
    vocab: &Vocab,
    ontology: &Ontology,
    pairs: &[(&Dialog, &KnowledgeBase)],
    label: &str,
) -> Result<(TodModel<Real>, Vec<TodEpochStats>)> {
    let mut tod = TodModel::new(
        cfg.model_dims(),
        vocab.clone(),
        ontology.relation_types.len(),
        cfg.tod_max_len,
        sub_seed(cfg.seed, &format!("{label}:init")),
    );
    let records = prepare_tod_records(&tod, pairs, ontology);
    let curve = train_tod(
        &mut tod,
        &records,
        &TrainCfg {
            epochs: cfg.epochs.tod,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: sub_seed(cfg.seed, &format!("{label}:train")),
        },
    )?;
    Ok((tod, curve))
}

fn train_ri_stage(
    cfg: &RunConfig,
    vocab: &Vocab,
    ontology: &Ontology,
    corpus: &Corpus,
    dataset: &RiDataset,
) -> Result<(RiModel<Real>, Vec<RiEpochStats>)> {
    let relations: Vec<String> = ontology
        .relation_types
        .iter()
        .map(|r| r.name.clone())
        .collect();
    let mut ri = RiModel::new(
        cfg.model_dims(),
        vocab.clone(),
        relations,
        sub_seed(cfg.seed, "ri:init"),
    );
    let mut examples = prepare_ri_examples(&ri, corpus, &dataset.labeled)?;
    if let Some(cap) = cfg.ri_max_examples {
        if examples.len() > cap {
            let mut rng = seeded_rng(sub_seed(cfg.seed, "ri:subsample"));
            examples.shuffle(&mut rng);
            examples.truncate(cap);
        }
    }
    let curve = train_ri(
        &mut ri,
        &examples,
        &TrainCfg {
            epochs: cfg.epochs.ri,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: sub_seed(cfg.seed, "ri:train"),
        },
        cfg.ri_val_fraction,
    )?;
    Ok((ri, curve))
}

/// Downstream accuracies per stage order, for the ordering study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderOutcome {
    pub order: String,
    pub response_accuracy: f64,
    pub dialog_accuracy: f64,
    pub inconsistency_post: f64,
}

/// The full pipeline. Returns the manifest; artifacts land under `run_dir`.
pub fn run_pipeline(cfg: &RunConfig, run_dir: &Path) -> Result<RunManifest> {
    let order = parse_order(&cfg.stage_order)?;
    if order.len() != 3 {
        return Err(CoreError::InvalidStageOrder(format!(
            "pipeline needs all three stages, got `{}`",
            cfg.stage_order
        )));
    }
    let mut runner = Runner::new(cfg.clone(), run_dir)?;
    let hash = runner.config_hash.clone();

    // simulate
    runner.stage("simulate", &["corpus"], |r| {
        let inputs = sim_inputs_from(&r.cfg, &r.config_hash)?;
        let out = simulate(&inputs)?;
        std::fs::create_dir_all(r.path("corpus"))
            .map_err(|e| CoreError::io("creating corpus dir", e))?;
        write_output(&r.path("corpus"), &out)
    })?;
    let ontology = Ontology::load(&cfg.paths.ontology)?;
    let train = Corpus::load(&runner.path("corpus/train.jsonl"))?;
    let test = Corpus::load(&runner.path("corpus/test.jsonl"))?;
    let train_kb = KnowledgeBase::load(&runner.path("corpus/kb_train.json"))?;
    let stats = SimStats::load(&runner.path("corpus/stats.json"))?;
    let gold = load_gold_dir(&runner.path("corpus/kb_gold"))?;
    let vocab = Vocab::build(&ontology, &[&train, &test]);

    // supervise
    runner.stage("supervise", &["ri_data.jsonl"], |r| {
        let ds = build_ri_dataset(&train, &train_kb, &ontology);
        ds.save(&r.path("ri_data.jsonl"))
    })?;
    let dataset = RiDataset::load(&runner.path("ri_data.jsonl"))?;
    let infer = infer_by_dialog(&dataset);

    // train-ri
    std::fs::create_dir_all(runner.path("ckpt")).ok();
    std::fs::create_dir_all(runner.path("curves")).ok();
    runner.stage("train-ri", &["ckpt/ri.ckpt", "ckpt/ri.ckpt.json", "curves/ri.csv"], |r| {
        let (ri, curve) = train_ri_stage(&r.cfg, &vocab, &ontology, &train, &dataset)?;
        ri.save(&r.path("ckpt/ri.ckpt"), &hash)?;
        write_csv(
            &r.path("curves/ri.csv"),
            "epoch,loss,train_acc,val_acc",
            &curve
                .iter()
                .map(|s| vec![s.epoch as f64, s.loss, s.train_acc, s.val_acc])
                .collect::<Vec<_>>(),
        )
    })?;
    let ri = RiModel::<Real>::load(&runner.path("ckpt/ri.ckpt"))?;

    // apply-ri
    runner.stage("apply-ri", &["traces_ri.jsonl", "stage_kb/ri"], |r| {
        let models = StageModels {
            ri: Some((&ri, r.cfg.ri_threshold)),
            rd: None,
            rc: None,
        };
        let traces = arbitrate(&train.records, &train_kb, &infer, &models, &[Stage::Ri], &ontology)?;
        save_traces(&traces, &r.path("traces_ri.jsonl"), &r.path("stage_kb/ri"))
    })?;
    let kb_ri = load_dialog_kbs(&runner.path("stage_kb/ri"), &train)?;
    let pairs_ri: Vec<(&Dialog, &KnowledgeBase)> = train
        .records
        .iter()
        .zip(kb_ri.iter())
        .map(|(r, k)| (&r.dialog, k))
        .collect();

    // train-mem (on post-insertion KBs)
    runner.stage(
        "train-mem",
        &["ckpt/mem.ckpt", "ckpt/mem.ckpt.json", "curves/mem.csv"],
        |r| {
            let (mem, curve) = train_mem_for(&r.cfg, &vocab, &ontology, &pairs_ri, "mem")?;
            mem.save(&r.path("ckpt/mem.ckpt"), &hash)?;
            write_csv(
                &r.path("curves/mem.csv"),
                "epoch,loss",
                &curve.iter().map(|(e, l)| vec![*e as f64, *l]).collect::<Vec<_>>(),
            )
        },
    )?;
    let mem = MemModel::<Real>::load(&runner.path("ckpt/mem.ckpt"))?;

    // train-rd
    runner.stage(
        "train-rd",
        &["ckpt/rd.ckpt", "ckpt/rd.ckpt.json", "curves/rd.csv"],
        |r| {
            let (rd, curve) = train_rd_for(&r.cfg, &vocab, &ontology, &mem, &pairs_ri, "rd")?;
            rd.save(&r.path("ckpt/rd.ckpt"), &hash)?;
            write_csv(
                &r.path("curves/rd.csv"),
                "epoch,avg_reward",
                &curve.iter().map(|(e, v)| vec![*e as f64, *v]).collect::<Vec<_>>(),
            )
        },
    )?;
    let rd = RdModel::<Real>::load(&runner.path("ckpt/rd.ckpt"))?;

    // apply ri,rd
    runner.stage("apply-rd", &["traces_rd.jsonl", "stage_kb/rd"], |r| {
        let models = StageModels {
            ri: Some((&ri, r.cfg.ri_threshold)),
            rd: Some(&rd),
            rc: None,
        };
        let traces = arbitrate(
            &train.records,
            &train_kb,
            &infer,
            &models,
            &[Stage::Ri, Stage::Rd],
            &ontology,
        )?;
        save_traces(&traces, &r.path("traces_rd.jsonl"), &r.path("stage_kb/rd"))
    })?;
    let kb_rd = load_dialog_kbs(&runner.path("stage_kb/rd"), &train)?;
    let pairs_rd: Vec<(&Dialog, &KnowledgeBase)> = train
        .records
        .iter()
        .zip(kb_rd.iter())
        .map(|(r, k)| (&r.dialog, k))
        .collect();

    // train-rc
    runner.stage(
        "train-rc",
        &["ckpt/rc.ckpt", "ckpt/rc.ckpt.json", "curves/rc.csv"],
        |r| {
            let (rc, curve) = train_rc_for(&r.cfg, &vocab, &ontology, &mem, &pairs_rd, "rc")?;
            rc.save(&r.path("ckpt/rc.ckpt"), &hash)?;
            write_csv(
                &r.path("curves/rc.csv"),
                "epoch,avg_reward",
                &curve.iter().map(|(e, v)| vec![*e as f64, *v]).collect::<Vec<_>>(),
            )
        },
    )?;
    let rc = RcModel::<Real>::load(&runner.path("ckpt/rc.ckpt"))?;

    // arbitrate (learned, canonical order)
    runner.stage("arbitrate", &["traces/traces.jsonl", "traces/kb_hat"], |r| {
        let models = StageModels {
            ri: Some((&ri, r.cfg.ri_threshold)),
            rd: Some(&rd),
            rc: Some(&rc),
        };
        let traces = arbitrate(&train.records, &train_kb, &infer, &models, &order, &ontology)?;
        save_traces(&traces, &r.path("traces/traces.jsonl"), &r.path("traces/kb_hat"))
    })?;
    let traces = load_traces(&runner.path("traces/traces.jsonl"))?;

    // arbitrate (rules)
    runner.stage("rules", &["rules/traces.jsonl", "rules/kb_hat"], |r| {
        let traces = rule_arbitrate(&train.records, &train_kb, &ontology, &r.cfg.sim.ordering_key)?;
        save_traces(&traces, &r.path("rules/traces.jsonl"), &r.path("rules/kb_hat"))
    })?;
    let rule_traces = load_traces(&runner.path("rules/traces.jsonl"))?;

    // train-tod on raw and arbitrated KBs
    let kb_hat = load_dialog_kbs(&runner.path("traces/kb_hat"), &train)?;
    runner.stage(
        "train-tod-raw",
        &["ckpt/tod_raw.ckpt", "ckpt/tod_raw.ckpt.json", "curves/tod_raw.csv"],
        |r| {
            let pairs: Vec<(&Dialog, &KnowledgeBase)> = train
                .records
                .iter()
                .map(|rec| (&rec.dialog, &train_kb))
                .collect();
            let (tod, curve) = train_tod_for(&r.cfg, &vocab, &ontology, &pairs, "tod_raw")?;
            tod.save(&r.path("ckpt/tod_raw.ckpt"), &hash)?;
            write_csv(
                &r.path("curves/tod_raw.csv"),
                "epoch,loss,token_acc",
                &curve
                    .iter()
                    .map(|s| vec![s.epoch as f64, s.loss, s.token_acc])
                    .collect::<Vec<_>>(),
            )
        },
    )?;
    runner.stage(
        "train-tod-arb",
        &["ckpt/tod_arb.ckpt", "ckpt/tod_arb.ckpt.json", "curves/tod_arb.csv"],
        |r| {
            let pairs: Vec<(&Dialog, &KnowledgeBase)> = train
                .records
                .iter()
                .zip(kb_hat.iter())
                .map(|(rec, k)| (&rec.dialog, k))
                .collect();
            let (tod, curve) = train_tod_for(&r.cfg, &vocab, &ontology, &pairs, "tod_arb")?;
            tod.save(&r.path("ckpt/tod_arb.ckpt"), &hash)?;
            write_csv(
                &r.path("curves/tod_arb.csv"),
                "epoch,loss,token_acc",
                &curve
                    .iter()
                    .map(|s| vec![s.epoch as f64, s.loss, s.token_acc])
                    .collect::<Vec<_>>(),
            )
        },
    )?;

    // evaluate
    std::fs::create_dir_all(runner.path("eval")).ok();
    std::fs::create_dir_all(runner.path("preds")).ok();
    runner.stage(
        "evaluate",
        &[
            "preds/tod_raw.jsonl",
            "preds/tod_arb.jsonl",
            "eval/report.json",
            "eval/report_raw.json",
            "eval/rules.json",
        ],
        |r| {
            let tod_raw = TodModel::<Real>::load(&r.path("ckpt/tod_raw.ckpt"))?;
            let tod_arb = TodModel::<Real>::load(&r.path("ckpt/tod_arb.ckpt"))?;
            let preds_raw = eval_responder(&tod_raw, &test, &train_kb, &ontology)?;
            let preds_arb = eval_responder(&tod_arb, &test, &train_kb, &ontology)?;
            crate::metrics::save_predictions(&preds_raw, &r.path("preds/tod_raw.jsonl"))?;
            crate::metrics::save_predictions(&preds_arb, &r.path("preds/tod_arb.jsonl"))?;

            let raw_scores = score_responder(&preds_raw, &test, &train_kb, &ontology)?;
            let arb_scores = score_responder(&preds_arb, &test, &train_kb, &ontology)?;

            let mut report = MetricReport::new(&hash, "test");
            report.response_accuracy = Some(arb_scores.response_accuracy);
            report.dialog_accuracy = Some(arb_scores.dialog_accuracy);
            report.bleu = Some(arb_scores.bleu);
            report.entity_f1 = Some(arb_scores.entity_f1);
            report.kb_entity_f1 = Some(arb_scores.kb_entity_f1);
            report.ri_f1 = Some(ri_f1(&traces, &stats)?);
            report.rd_f1 = Some(rd_f1(&traces, &stats)?);
            report.rc_accuracy = rc_accuracy(&traces, &train, &ontology, &r.cfg.sim.ordering_key)?;
            report.inconsistency_rate_pre = Some(stats.inconsistency_rate);
            report.inconsistency_rate_post =
                Some(post_rate(&train, &traces, &gold, &ontology, &r.cfg)?);
            report.insertion_count =
                Some(traces.iter().map(|t| t.inserted_heads().len()).sum());
            report.deletion_count = Some(traces.iter().map(|t| t.deleted.len()).sum());
            report.insert_set_sizes = Some(set_sizes(&traces, &stats, false)?);
            report.delete_set_sizes = Some(set_sizes(&traces, &stats, true)?);
            report.save(&r.path("eval/report.json"))?;

            let mut raw_report = MetricReport::new(&hash, "test");
            raw_report.response_accuracy = Some(raw_scores.response_accuracy);
            raw_report.dialog_accuracy = Some(raw_scores.dialog_accuracy);
            raw_report.bleu = Some(raw_scores.bleu);
            raw_report.entity_f1 = Some(raw_scores.entity_f1);
            raw_report.kb_entity_f1 = Some(raw_scores.kb_entity_f1);
            raw_report.inconsistency_rate_pre = Some(stats.inconsistency_rate);
            raw_report.save(&r.path("eval/report_raw.json"))?;

            let mut rules_report = MetricReport::new(&hash, "train");
            rules_report.inconsistency_rate_pre = Some(stats.inconsistency_rate);
            rules_report.inconsistency_rate_post =
                Some(post_rate(&train, &rule_traces, &gold, &ontology, &r.cfg)?);
            rules_report.insertion_count =
                Some(rule_traces.iter().map(|t| t.inserted_heads().len()).sum());
            rules_report.deletion_count =
                Some(rule_traces.iter().map(|t| t.deleted.len()).sum());
            rules_report.ri_f1 = Some(ri_f1(&rule_traces, &stats)?);
            rules_report.rd_f1 = Some(rd_f1(&rule_traces, &stats)?);
            rules_report.rc_accuracy =
                rc_accuracy(&rule_traces, &train, &ontology, &r.cfg.sim.ordering_key)?;
            rules_report.save(&r.path("eval/rules.json"))
        },
    )?;

    // ordering ablation
    if cfg.ablate_orders {
        runner.stage("orders", &["eval/orders.json"], |r| {
            let mut outcomes = Vec::new();
            let canonical = MetricReport::load(&r.path("eval/report.json"))?;
            outcomes.push(OrderOutcome {
                order: "ri,rd,rc".into(),
                response_accuracy: canonical.response_accuracy.unwrap_or(0.0),
                dialog_accuracy: canonical.dialog_accuracy.unwrap_or(0.0),
                inconsistency_post: canonical.inconsistency_rate_post.unwrap_or(1.0),
            });
            for label in ["ri,rc,rd", "rd,ri,rc"] {
                let outcome = run_order_variant(
                    r, label, &ontology, &vocab, &train, &test, &train_kb, &gold, &infer, &ri,
                    &mem,
                )?;
                outcomes.push(outcome);
            }
            let text = serde_json::to_string_pretty(&outcomes)
                .map_err(|e| CoreError::json("serializing order outcomes", e))?;
            std::fs::write(r.path("eval/orders.json"), text)
                .map_err(|e| CoreError::io("writing order outcomes", e))
        })?;
    }

    // rendered report
    runner.stage("report", &["eval/report.md"], |r| {
        crate::report::render_run(&r.run_dir)
    })?;

    runner.finish()
}

/// Retrains the order-dependent models for a non-canonical stage order and
/// scores its downstream responder. The reward model is (re)trained on the
/// KB state preceding the first reward-consuming stage.
#[allow(clippy::too_many_arguments)]
fn run_order_variant(
    r: &Runner,
    label: &str,
    ontology: &Ontology,
    vocab: &Vocab,
    train: &Corpus,
    test: &Corpus,
    train_kb: &KnowledgeBase,
    gold: &BTreeMap<String, KnowledgeBase>,
    infer: &BTreeMap<String, Vec<crate::supervision::LabeledCandidate>>,
    ri: &RiModel<Real>,
    mem_canonical: &MemModel<Real>,
) -> Result<OrderOutcome> {
    let cfg = &r.cfg;
    let order = parse_order(label)?;
    let tag = label.replace(',', "_");

    let raw_pairs: Vec<(&Dialog, &KnowledgeBase)> = train
        .records
        .iter()
        .map(|rec| (&rec.dialog, train_kb))
        .collect();

    let (rd, rc, mem_owned);
    let mem: &MemModel<Real>;
    match order.as_slice() {
        [Stage::Ri, Stage::Rc, Stage::Rd] => {
            // Completion trains on post-insertion states; deletion trains on
            // the post-completion KBs. The canonical reward model (trained
            // on post-insertion KBs) is reused.
            mem = mem_canonical;
            let ri_traces = arbitrate(
                &train.records,
                train_kb,
                infer,
                &StageModels { ri: Some((ri, cfg.ri_threshold)), rd: None, rc: None },
                &[Stage::Ri],
                ontology,
            )?;
            let kbs: Vec<KnowledgeBase> = ri_traces.into_iter().map(|t| t.result_kb).collect();
            let pairs: Vec<(&Dialog, &KnowledgeBase)> = train
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(rec, k)| (&rec.dialog, k))
                .collect();
            let (rc_model, _) = train_rc_for(cfg, vocab, ontology, mem, &pairs, &format!("rc:{tag}"))?;
            let rc_traces = arbitrate(
                &train.records,
                train_kb,
                infer,
                &StageModels {
                    ri: Some((ri, cfg.ri_threshold)),
                    rd: None,
                    rc: Some(&rc_model),
                },
                &[Stage::Ri, Stage::Rc],
                ontology,
            )?;
            let kbs_rc: Vec<KnowledgeBase> = rc_traces.into_iter().map(|t| t.result_kb).collect();
            let pairs_rc: Vec<(&Dialog, &KnowledgeBase)> = train
                .records
                .iter()
                .zip(kbs_rc.iter())
                .map(|(rec, k)| (&rec.dialog, k))
                .collect();
            let (rd_model, _) =
                train_rd_for(cfg, vocab, ontology, mem, &pairs_rc, &format!("rd:{tag}"))?;
            rd = rd_model;
            rc = rc_model;
        }
        [Stage::Rd, Stage::Ri, Stage::Rc] => {
            // Deletion acts first, so its reward model sees the raw training
            // KB (dialogs referencing missing rows get floored likelihoods).
            let (m, _) = train_mem_for(cfg, vocab, ontology, &raw_pairs, &format!("mem:{tag}"))?;
            mem_owned = m;
            mem = &mem_owned;
            let (rd_model, _) =
                train_rd_for(cfg, vocab, ontology, mem, &raw_pairs, &format!("rd:{tag}"))?;
            let mid_traces = arbitrate(
                &train.records,
                train_kb,
                infer,
                &StageModels {
                    ri: Some((ri, cfg.ri_threshold)),
                    rd: Some(&rd_model),
                    rc: None,
                },
                &[Stage::Rd, Stage::Ri],
                ontology,
            )?;
            let kbs: Vec<KnowledgeBase> = mid_traces.into_iter().map(|t| t.result_kb).collect();
            let pairs: Vec<(&Dialog, &KnowledgeBase)> = train
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(rec, k)| (&rec.dialog, k))
                .collect();
            let (rc_model, _) = train_rc_for(cfg, vocab, ontology, mem, &pairs, &format!("rc:{tag}"))?;
            rd = rd_model;
            rc = rc_model;
        }
        _ => {
            return Err(CoreError::InvalidStageOrder(label.into()));
        }
    }

    let models = StageModels {
        ri: Some((ri, cfg.ri_threshold)),
        rd: Some(&rd),
        rc: Some(&rc),
    };
    let traces = arbitrate(&train.records, train_kb, infer, &models, &order, ontology)?;
    save_traces(
        &traces,
        &r.path(&format!("orders/{tag}/traces.jsonl")),
        &r.path(&format!("orders/{tag}/kb_hat")),
    )?;
    let pairs: Vec<(&Dialog, &KnowledgeBase)> = train
        .records
        .iter()
        .zip(traces.iter())
        .map(|(rec, t)| (&rec.dialog, &t.result_kb))
        .collect();
    let (tod, _) = train_tod_for(cfg, vocab, ontology, &pairs, &format!("tod:{tag}"))?;
    let preds = eval_responder(&tod, test, train_kb, ontology)?;
    let scores = score_responder(&preds, test, train_kb, ontology)?;
    let post = post_rate(train, &traces, gold, ontology, cfg)?;
    Ok(OrderOutcome {
        order: label.to_string(),
        response_accuracy: scores.response_accuracy,
        dialog_accuracy: scores.dialog_accuracy,
        inconsistency_post: post,
    })
}

/// Sweep over injected-inconsistency levels: each level scales the
/// availability processes and runs the full pipeline into its own
/// subdirectory, collecting raw-vs-repaired downstream accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    pub injected_rate: f64,
    pub raw_dialog_accuracy: f64,
    pub arb_dialog_accuracy: f64,
}

pub fn run_sweep(cfg: &RunConfig, run_root: &Path, levels: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::new();
    for (i, &level) in levels.iter().enumerate() {
        let mut level_cfg = cfg.clone();
        level_cfg.ablate_orders = false;
        for spec in level_cfg.sim.processes.values_mut() {
            *spec = spec.scaled(level);
        }
        let dir = run_root.join(format!("level_{i}"));
        run_pipeline(&level_cfg, &dir)?;
        let report = MetricReport::load(&dir.join("eval/report.json"))?;
        let raw = MetricReport::load(&dir.join("eval/report_raw.json"))?;
        points.push(SweepPoint {
            level,
            injected_rate: report.inconsistency_rate_pre.unwrap_or(0.0),
            raw_dialog_accuracy: raw.dialog_accuracy.unwrap_or(0.0),
            arb_dialog_accuracy: report.dialog_accuracy.unwrap_or(0.0),
        });
    }
    let text = serde_json::to_string_pretty(&points)
        .map_err(|e| CoreError::json("serializing sweep", e))?;
    std::fs::write(run_root.join("sweep.json"), text)
        .map_err(|e| CoreError::io("writing sweep summary", e))?;
    Ok(points)
}
