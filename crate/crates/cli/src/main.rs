//! Command-line front end for the arbitration pipeline.

use clap::{Parser, Subcommand};
use kbarb_core::cascade::{
    arbitrate, infer_by_dialog, load_traces, parse_order, rule_arbitrate, save_traces,
    StageModels,
};
use kbarb_core::config::RunConfig;
use kbarb_core::data::{Corpus, KnowledgeBase, Ontology, Speaker};
use kbarb_core::metrics::{
    load_predictions, rc_accuracy, rd_f1, response_dialog_accuracy, ri_f1, MetricReport,
};
use kbarb_core::models::*;
use kbarb_core::nn::params::sub_seed;
use kbarb_core::nn::Vocab;
use kbarb_core::pipeline::{
    load_dialog_kbs, run_pipeline, run_sweep, score_responder, sim_inputs_from,
};
use kbarb_core::sim::{simulate, write_output, SimStats};
use kbarb_core::supervision::{build_ri_dataset, RiDataset};
use kbarb_core::Real;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kbarb", version, about = "Dialog/KB arbitration at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch-count override for the trained model of this command.
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> kbarb_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an inconsistent training corpus from an evolving KB.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        base_kb: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label candidate triples against the training KB.
    Supervise {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the masked-entity reward model on per-dialog KBs.
    TrainMem {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb_dir: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the insertion classifier on distantly supervised labels.
    TrainRi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        ri_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the deletion policy against reward-model likelihoods.
    TrainRd {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb_dir: PathBuf,
        #[arg(long)]
        mem: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the completion policy against reward-model likelihoods.
    TrainRc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb_dir: PathBuf,
        #[arg(long)]
        mem: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the cascade (learned models or rules) to a corpus.
    Arbitrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        ri: Option<PathBuf>,
        #[arg(long)]
        rd: Option<PathBuf>,
        #[arg(long)]
        rc: Option<PathBuf>,
        #[arg(long)]
        ri_data: Option<PathBuf>,
        #[arg(long, default_value = "ri,rd,rc")]
        order: String,
        #[arg(long, default_value = "learned")]
        mode: String,
        /// Traces file; repaired KBs land in a sibling `kb_hat/` directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the downstream responder on raw or arbitrated KBs.
    TrainTod {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long, default_value = "raw")]
        kb_source: String,
        /// Per-dialog KB directory (required with --kb-source arbitrated).
        #[arg(long)]
        kb_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one agent response for a dialog history.
    Respond {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        /// JSON file: [{"speaker": "user"|"agent", "text": "..."}, ...]
        #[arg(long)]
        history: PathBuf,
    },
    /// Score predictions and/or arbitration traces.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Simulator output dir holding stats.json and kb_gold/.
        #[arg(long)]
        ground_truth_dir: Option<PathBuf>,
        /// Train corpus (needed for completion-order accuracy).
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a run directory's report to markdown and SVG plots.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the full pipeline under a run directory.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `$KBARB_RUN_ROOT/<config-hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline across increasing inconsistency levels.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated availability scale levels.
        #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0")]
        levels: String,
    },
}

fn run_root(out: Option<PathBuf>, hash: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        let root = std::env::var("KBARB_RUN_ROOT").unwrap_or_else(|_| "runs".into());
        Path::new(&root).join(hash)
    })
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run() -> kbarb_core::Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            cfg,
            ontology,
            base_kb,
            templates,
            train,
            test,
            horizon,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(p) = ontology {
                config.paths.ontology = p;
            }
            if let Some(p) = base_kb {
                config.paths.base_kb = p;
            }
            if let Some(p) = templates {
                config.paths.templates = p;
            }
            if let Some(n) = train {
                config.sim.train = n;
            }
            if let Some(n) = test {
                config.sim.test = n;
            }
            if let Some(h) = horizon {
                config.sim.horizon = h;
            }
            let hash = config.hash();
            let inputs = sim_inputs_from(&config, &hash)?;
            let output = simulate(&inputs)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| kbarb_core::CoreError::io("creating output dir", e))?;
            write_output(&out, &output)?;
            println!(
                "wrote {} train / {} test dialogs (inconsistency rate {:.3}, {} skipped)",
                output.stats.train_dialogs,
                output.stats.test_dialogs,
                output.stats.inconsistency_rate,
                output.stats.skipped_train + output.stats.skipped_test
            );
            Ok(())
        }
        Command::Supervise {
            corpus,
            kb,
            ontology,
            out,
        } => {
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kb = KnowledgeBase::load(&kb)?;
            let ds = build_ri_dataset(&corpus, &kb, &ontology);
            ds.save(&out)?;
            println!(
                "labeled {} candidates ({} train, {} infer)",
                ds.labeled.len(),
                ds.train_set().count(),
                ds.infer_set().count()
            );
            Ok(())
        }
        Command::TrainMem {
            cfg,
            corpus,
            kb_dir,
            ontology,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(e) = cfg.epochs {
                config.epochs.mem = e;
            }
            let hash = config.hash();
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kbs = load_dialog_kbs(&kb_dir, &corpus)?;
            let vocab = Vocab::build(&ontology, &[&corpus]);
            let mut mem: MemModel<Real> = MemModel::new(
                config.model_dims(),
                vocab,
                ontology.relation_types.len(),
                sub_seed(config.seed, "mem:init"),
            );
            let pairs: Vec<_> = corpus
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(r, k)| (&r.dialog, k))
                .collect();
            let records = prepare_mem_training(&mem, &pairs, &ontology);
            let curve = train_mem(
                &mut mem,
                &records,
                &TrainCfg {
                    epochs: config.epochs.mem,
                    lr: config.lr,
                    batch: config.batch,
                    seed: sub_seed(config.seed, "mem:train"),
                },
            )?;
            mem.save(&out, &hash)?;
            println!(
                "trained reward model: loss {:.4} -> {:.4}",
                curve.first().map(|x| x.1).unwrap_or(f64::NAN),
                curve.last().map(|x| x.1).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::TrainRi {
            cfg,
            corpus,
            kb,
            ontology,
            ri_data,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(e) = cfg.epochs {
                config.epochs.ri = e;
            }
            let hash = config.hash();
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let _kb = KnowledgeBase::load(&kb)?;
            let dataset = RiDataset::load(&ri_data)?;
            let vocab = Vocab::build(&ontology, &[&corpus]);
            let relations: Vec<String> = ontology
                .relation_types
                .iter()
                .map(|r| r.name.clone())
                .collect();
            let mut ri: RiModel<Real> = RiModel::new(
                config.model_dims(),
                vocab,
                relations,
                sub_seed(config.seed, "ri:init"),
            );
            let examples = prepare_ri_examples(&ri, &corpus, &dataset.labeled)?;
            let curve = train_ri(
                &mut ri,
                &examples,
                &TrainCfg {
                    epochs: config.epochs.ri,
                    lr: config.lr,
                    batch: config.batch,
                    seed: sub_seed(config.seed, "ri:train"),
                },
                config.ri_val_fraction,
            )?;
            ri.save(&out, &hash)?;
            let last = curve.last().unwrap();
            println!(
                "trained insertion classifier: train acc {:.3}, val acc {:.3}",
                last.train_acc, last.val_acc
            );
            Ok(())
        }
        Command::TrainRd {
            cfg,
            corpus,
            kb_dir,
            mem,
            ontology,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(e) = cfg.epochs {
                config.epochs.rd = e;
            }
            let hash = config.hash();
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kbs = load_dialog_kbs(&kb_dir, &corpus)?;
            let mem: MemModel<Real> = MemModel::load(&mem)?;
            let mut rd: RdModel<Real> = RdModel::new(
                config.model_dims(),
                mem.vocab.clone(),
                ontology.relation_types.len(),
                sub_seed(config.seed, "rd:init"),
            );
            let pairs: Vec<_> = corpus
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(r, k)| (&r.dialog, k))
                .collect();
            let records = prepare_rd_records(&rd, &mem, &pairs, &ontology)?;
            let curve = train_rd(
                &mut rd,
                &records,
                &TrainCfg {
                    epochs: config.epochs.rd,
                    lr: config.lr,
                    batch: config.batch,
                    seed: sub_seed(config.seed, "rd:train"),
                },
                config.mapo_w_floor,
            )?;
            rd.save(&out, &hash)?;
            println!(
                "trained deletion policy: avg reward {:.3} -> {:.3}",
                curve.first().map(|x| x.1).unwrap_or(f64::NAN),
                curve.last().map(|x| x.1).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::TrainRc {
            cfg,
            corpus,
            kb_dir,
            mem,
            ontology,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(e) = cfg.epochs {
                config.epochs.rc = e;
            }
            let hash = config.hash();
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kbs = load_dialog_kbs(&kb_dir, &corpus)?;
            let mem: MemModel<Real> = MemModel::load(&mem)?;
            let specs = rc_relation_specs(&ontology);
            let mut rc: RcModel<Real> = RcModel::new(
                config.model_dims(),
                mem.vocab.clone(),
                specs.clone(),
                ontology.relation_types.len(),
                sub_seed(config.seed, "rc:init"),
            );
            let pairs: Vec<_> = corpus
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(r, k)| (&r.dialog, k))
                .collect();
            let states = build_rc_states(&pairs, &specs, &ontology);
            let dialogs: Vec<_> = corpus.records.iter().map(|r| &r.dialog).collect();
            let train_states = prepare_rc_states(&mem, &dialogs, states, &specs, &ontology)?;
            let curve = train_rc(
                &mut rc,
                &dialogs,
                &train_states,
                &ontology,
                &TrainCfg {
                    epochs: config.epochs.rc,
                    lr: config.lr,
                    batch: config.batch,
                    seed: sub_seed(config.seed, "rc:train"),
                },
                config.mapo_w_floor,
            )?;
            rc.save(&out, &hash)?;
            println!(
                "trained completion policy: avg reward {:.3} -> {:.3}",
                curve.first().map(|x| x.1).unwrap_or(f64::NAN),
                curve.last().map(|x| x.1).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Arbitrate {
            cfg,
            corpus,
            kb,
            ontology,
            ri,
            rd,
            rc,
            ri_data,
            order,
            mode,
            out,
        } => {
            let config = cfg.load()?;
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kb = KnowledgeBase::load(&kb)?;
            let order = parse_order(&order)?;
            let kb_dir = out
                .parent()
                .unwrap_or(Path::new("."))
                .join("kb_hat");
            let traces = match mode.as_str() {
                "rules" => rule_arbitrate(&corpus.records, &kb, &ontology, &config.sim.ordering_key)?,
                "learned" => {
                    let ri_model = ri.map(|p| RiModel::<Real>::load(&p)).transpose()?;
                    let rd_model = rd.map(|p| RdModel::<Real>::load(&p)).transpose()?;
                    let rc_model = rc.map(|p| RcModel::<Real>::load(&p)).transpose()?;
                    let infer = match &ri_data {
                        Some(p) => infer_by_dialog(&RiDataset::load(p)?),
                        None => Default::default(),
                    };
                    let models = StageModels {
                        ri: ri_model.as_ref().map(|m| (m, config.ri_threshold)),
                        rd: rd_model.as_ref(),
                        rc: rc_model.as_ref(),
                    };
                    arbitrate(&corpus.records, &kb, &infer, &models, &order, &ontology)?
                }
                other => {
                    return Err(kbarb_core::CoreError::Evaluation(format!(
                        "unknown mode `{other}` (use learned|rules)"
                    )))
                }
            };
            save_traces(&traces, &out, &kb_dir)?;
            let ins: usize = traces.iter().map(|t| t.inserted_heads().len()).sum();
            let del: usize = traces.iter().map(|t| t.deleted.len()).sum();
            println!("arbitrated {} dialogs: {ins} insertions, {del} deletions", traces.len());
            Ok(())
        }
        Command::TrainTod {
            cfg,
            corpus,
            kb,
            ontology,
            kb_source,
            kb_dir,
            out,
        } => {
            let mut config = cfg.load()?;
            if let Some(e) = cfg.epochs {
                config.epochs.tod = e;
            }
            let hash = config.hash();
            let ontology = Ontology::load(&ontology)?;
            let corpus = Corpus::load(&corpus)?;
            let kb = KnowledgeBase::load(&kb)?;
            let kbs: Vec<KnowledgeBase> = match kb_source.as_str() {
                "raw" => corpus.records.iter().map(|_| kb.clone()).collect(),
                "arbitrated" => {
                    let dir = kb_dir.ok_or_else(|| {
                        kbarb_core::CoreError::Evaluation(
                            "--kb-dir required with --kb-source arbitrated".into(),
                        )
                    })?;
                    load_dialog_kbs(&dir, &corpus)?
                }
                other => {
                    return Err(kbarb_core::CoreError::Evaluation(format!(
                        "unknown kb source `{other}` (use raw|arbitrated)"
                    )))
                }
            };
            let vocab = Vocab::build(&ontology, &[&corpus]);
            let mut tod: TodModel<Real> = TodModel::new(
                config.model_dims(),
                vocab,
                ontology.relation_types.len(),
                config.tod_max_len,
                sub_seed(config.seed, "tod:init"),
            );
            let pairs: Vec<_> = corpus
                .records
                .iter()
                .zip(kbs.iter())
                .map(|(r, k)| (&r.dialog, k))
                .collect();
            let records = prepare_tod_records(&tod, &pairs, &ontology);
            let curve = train_tod(
                &mut tod,
                &records,
                &TrainCfg {
                    epochs: config.epochs.tod,
                    lr: config.lr,
                    batch: config.batch,
                    seed: sub_seed(config.seed, "tod:train"),
                },
            )?;
            tod.save(&out, &hash)?;
            println!(
                "trained responder: loss {:.4}, token acc {:.3}",
                curve.last().map(|s| s.loss).unwrap_or(f64::NAN),
                curve.last().map(|s| s.token_acc).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Respond {
            model,
            kb,
            ontology,
            history,
        } => {
            let ontology = Ontology::load(&ontology)?;
            let kb = KnowledgeBase::load(&kb)?;
            let tod: TodModel<Real> = TodModel::load(&model)?;
            let text = std::fs::read_to_string(&history)
                .map_err(|e| kbarb_core::CoreError::io("reading history", e))?;
            #[derive(serde::Deserialize)]
            struct Turn {
                speaker: Speaker,
                text: String,
            }
            let turns: Vec<Turn> = serde_json::from_str(&text)
                .map_err(|e| kbarb_core::CoreError::json("parsing history", e))?;
            let turns: Vec<(Speaker, String)> =
                turns.into_iter().map(|t| (t.speaker, t.text)).collect();
            let utterances = annotate_utterances(&turns, &ontology);
            let tokens = generate(&tod, &utterances, &kb, &ontology)?;
            println!("{}", tokens.join(" "));
            Ok(())
        }
        Command::Evaluate {
            predictions,
            gold,
            kb,
            ontology,
            traces,
            ground_truth_dir,
            train_corpus,
            out,
        } => {
            let ontology = Ontology::load(&ontology)?;
            let gold_corpus = Corpus::load(&gold)?;
            let kb = KnowledgeBase::load(&kb)?;
            let mut report = MetricReport::new("standalone", "eval");
            if let Some(p) = predictions {
                let preds = load_predictions(&p)?;
                let (ra, da) = response_dialog_accuracy(&preds, &gold_corpus)?;
                report.response_accuracy = Some(ra);
                report.dialog_accuracy = Some(da);
                let scores = score_responder(&preds, &gold_corpus, &kb, &ontology)?;
                report.bleu = Some(scores.bleu);
                report.entity_f1 = Some(scores.entity_f1);
                report.kb_entity_f1 = Some(scores.kb_entity_f1);
            }
            if let (Some(tp), Some(gt)) = (&traces, &ground_truth_dir) {
                let traces = load_traces(tp)?;
                let stats = SimStats::load(&gt.join("stats.json"))?;
                report.ri_f1 = Some(ri_f1(&traces, &stats)?);
                report.rd_f1 = Some(rd_f1(&traces, &stats)?);
                report.inconsistency_rate_pre = Some(stats.inconsistency_rate);
                report.insertion_count =
                    Some(traces.iter().map(|t| t.inserted_heads().len()).sum());
                report.deletion_count = Some(traces.iter().map(|t| t.deleted.len()).sum());
                if let Some(tc) = &train_corpus {
                    let train = Corpus::load(tc)?;
                    report.rc_accuracy = rc_accuracy(
                        &traces,
                        &train,
                        &ontology,
                        &kbarb_core::data::OrderingKey::default(),
                    )?;
                }
            }
            report.save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { run } => {
            kbarb_core::report::render_run(&run)?;
            println!("rendered {}", run.join("eval/report.md").display());
            Ok(())
        }
        Command::Pipeline { cfg, out } => {
            let config = cfg.load()?;
            let dir = run_root(out, &config.hash());
            let manifest = run_pipeline(&config, &dir)?;
            println!(
                "pipeline complete: {} stages under {}",
                manifest.stages.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Sweep { cfg, out, levels } => {
            let config = cfg.load()?;
            let dir = run_root(out, &format!("sweep_{}", config.hash()));
            let levels: Vec<f64> = levels
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| kbarb_core::CoreError::Evaluation(format!("bad levels: {e}")))?;
            let points = run_sweep(&config, &dir, &levels)?;
            for p in &points {
                println!(
                    "level {:.2}: injected {:.3}, raw dialog acc {:.3}, repaired {:.3}",
                    p.level, p.injected_rate, p.raw_dialog_accuracy, p.arb_dialog_accuracy
                );
            }
            Ok(())
        }
    }
}
