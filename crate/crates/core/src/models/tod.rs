//! Desk-scale dialog responder: an autoregressive decoder whose per-step
//! output mixes vocabulary generation, copy-from-history and copy-from-KB
//! through a learned three-way gate. Used to measure the downstream effect
//! of KB repair; it is deliberately small.

use super::common::{ModelDims, TrainCfg, LIKELIHOOD_FLOOR};
use crate::data::{Dialog, KnowledgeBase, Mention, Ontology, Speaker, Utterance};
use crate::nn::checkpoint::{load_checkpoint_meta, load_checkpoint_params, save_checkpoint, CheckpointMeta};
use crate::nn::params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet};
use crate::nn::tape::gru_step;
use crate::nn::vocab::{EOS, SOS};
use crate::nn::{
    encode_dialog, encode_kb, entity_embeddings, memory_read, prepare_dialog, score_rows,
    DialogEncoderWeights, EncoderConfig, GruWeights, KbEncoderWeights, KbGraph, MemNetWeights,
    NodeId, Tape, Vocab,
};
use crate::scalar::{lit, Scalar};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;

pub struct TodModel<S: Scalar> {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub n_relations: usize,
    pub max_len: usize,
    pub seed: u64,
    pub params: ParamSet<S>,
    enc: DialogEncoderWeights,
    kb_enc: KbEncoderWeights,
    memnet: MemNetWeights,
    dec: GruWeights,
    w_vocab: ParamId,
    b_vocab: ParamId,
    att_ctx: ParamId,
    att_kb: ParamId,
    w_gate: ParamId,
    b_gate: ParamId,
}

impl<S: Scalar> TodModel<S> {
    pub fn new(dims: ModelDims, vocab: Vocab, n_relations: usize, max_len: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let rng = &mut seeded_rng(seed);
        let e = dims.emb;
        let enc = DialogEncoderWeights::new(
            &mut params,
            EncoderConfig {
                emb: e,
                pos_dim: dims.pos_dim,
                markers: 0,
                pos_clip: dims.pos_clip,
            },
            &vocab,
            "enc",
            rng,
        );
        let kb_enc = KbEncoderWeights::new(
            &mut params,
            e,
            dims.rgcn_layers,
            n_relations,
            dims.rgcn_init_scale,
            "kb",
            rng,
        );
        let memnet = MemNetWeights::new(&mut params, e, dims.hops, dims.mlp_hidden, "mem", rng);
        let g = Init::Glorot { scale: 1.0 };
        let dec = {
            let prefix = "dec";
            GruWeights {
                w_r: params.add_matrix(format!("{prefix}.w_r"), e, e, g, rng),
                u_r: params.add_matrix(format!("{prefix}.u_r"), e, e, g, rng),
                b_r: params.add_vector(format!("{prefix}.b_r"), e, Init::Zeros, rng),
                w_z: params.add_matrix(format!("{prefix}.w_z"), e, e, g, rng),
                u_z: params.add_matrix(format!("{prefix}.u_z"), e, e, g, rng),
                b_z: params.add_vector(format!("{prefix}.b_z"), e, Init::Zeros, rng),
                w_n: params.add_matrix(format!("{prefix}.w_n"), e, e, g, rng),
                u_n: params.add_matrix(format!("{prefix}.u_n"), e, e, g, rng),
                b_n: params.add_vector(format!("{prefix}.b_n"), e, Init::Zeros, rng),
            }
        };
        let w_vocab = params.add_matrix("out.vocab", vocab.n_tokens(), e, g, rng);
        let b_vocab = params.add_vector("out.vocab_b", vocab.n_tokens(), Init::Zeros, rng);
        let att_ctx = params.add_matrix("out.att_ctx", e, e, g, rng);
        let att_kb = params.add_matrix("out.att_kb", e, e, g, rng);
        let w_gate = params.add_matrix("out.gate", 3, e, g, rng);
        let b_gate = params.add_vector("out.gate_b", 3, Init::Zeros, rng);
        TodModel {
            dims,
            vocab,
            n_relations,
            max_len,
            seed,
            params,
            enc,
            kb_enc,
            memnet,
            dec,
            w_vocab,
            b_vocab,
            att_ctx,
            att_kb,
            w_gate,
            b_gate,
        }
    }

    fn encode_kb_graph(&self, tape: &mut Tape<S>, graph: &KbGraph) -> Result<Option<NodeId>> {
        if graph.n_entities() == 0 {
            return Ok(None);
        }
        let z0 = entity_embeddings(
            tape,
            &self.params,
            self.enc.tok_emb,
            self.enc.tag_emb,
            graph,
            &self.vocab,
        )?;
        Ok(Some(encode_kb(tape, &self.params, &self.kb_enc, graph, z0)))
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            model_kind: "tod".into(),
            config_hash: config_hash.into(),
            seed: self.seed,
            vocab_digest: self.vocab.digest(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_tags: self.vocab.tags().to_vec(),
            dims: serde_json::json!({
                "dims": self.dims,
                "n_relations": self.n_relations,
                "max_len": self.max_len,
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_checkpoint_meta(path)?;
        if meta.model_kind != "tod" {
            return Err(CoreError::Checkpoint(format!(
                "expected a tod checkpoint, found `{}`",
                meta.model_kind
            )));
        }
        let dims: ModelDims = serde_json::from_value(meta.dims["dims"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint dims", e))?;
        let n_relations = meta.dims["n_relations"].as_u64().unwrap_or(0) as usize;
        let max_len = meta.dims["max_len"].as_u64().unwrap_or(40) as usize;
        let mut vocab = meta.vocab();
        vocab.reindex();
        let mut model = TodModel::new(dims, vocab, n_relations, max_len, meta.seed);
        load_checkpoint_params(path, &mut model.params)?;
        Ok(model)
    }
}

/// Per-step output pieces for one decoding step.
struct StepHeads {
    p_vocab: NodeId,
    p_ctx: NodeId,
    p_kb: Option<NodeId>,
    gates: NodeId,
}

fn step_heads<S: Scalar>(
    model: &TodModel<S>,
    tape: &mut Tape<S>,
    s_t: NodeId,
    ctx: NodeId,
    z: Option<NodeId>,
) -> StepHeads {
    let vocab_logits = tape.affine(&model.params, model.w_vocab, Some(model.b_vocab), s_t);
    let p_vocab = tape.softmax(vocab_logits);
    let v_ctx = tape.affine(&model.params, model.att_ctx, None, s_t);
    let ctx_scores = tape.matvec(ctx, v_ctx);
    let p_ctx = tape.softmax(ctx_scores);
    let p_kb = z.map(|z| {
        let v_kb = tape.affine(&model.params, model.att_kb, None, s_t);
        let kb_scores = tape.matvec(z, v_kb);
        tape.softmax(kb_scores)
    });
    let gate_logits = tape.affine(&model.params, model.w_gate, Some(model.b_gate), s_t);
    let gates = tape.softmax(gate_logits);
    StepHeads {
        p_vocab,
        p_ctx,
        p_kb,
        gates,
    }
}

/// Probability of a specific token under the mixed output distribution.
fn token_probability<S: Scalar>(
    tape: &mut Tape<S>,
    heads: &StepHeads,
    token_id: usize,
    ctx_token_ids: &[usize],
    kb_token_ids: &[usize],
) -> NodeId {
    let g0 = tape.pick(heads.gates, 0);
    let g1 = tape.pick(heads.gates, 1);
    let g2 = tape.pick(heads.gates, 2);
    let pv = tape.pick(heads.p_vocab, token_id);
    let mut total = tape.mul(g0, pv);
    let ctx_positions: Vec<usize> = ctx_token_ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == token_id)
        .map(|(i, _)| i)
        .collect();
    if !ctx_positions.is_empty() {
        let mass = tape.pick_sum(heads.p_ctx, ctx_positions);
        let part = tape.mul(g1, mass);
        total = tape.add(total, part);
    }
    if let Some(p_kb) = heads.p_kb {
        let kb_positions: Vec<usize> = kb_token_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == token_id)
            .map(|(i, _)| i)
            .collect();
        if !kb_positions.is_empty() {
            let mass = tape.pick_sum(p_kb, kb_positions);
            let part = tape.mul(g2, mass);
            total = tape.add(total, part);
        }
    }
    total
}

/// The full mixed distribution as plain numbers (for greedy decoding and
/// token-accuracy checks).
fn mixed_distribution<S: Scalar>(
    tape: &Tape<S>,
    heads: &StepHeads,
    vocab_len: usize,
    ctx_token_ids: &[usize],
    kb_token_ids: &[usize],
) -> Vec<f64> {
    let gates = tape.value_v(heads.gates);
    let g0 = gates[0].to_f64_lossy();
    let g1 = gates[1].to_f64_lossy();
    let g2 = gates[2].to_f64_lossy();
    let mut mixed: Vec<f64> = tape
        .value_v(heads.p_vocab)
        .iter()
        .map(|x| x.to_f64_lossy() * g0)
        .collect();
    debug_assert_eq!(mixed.len(), vocab_len);
    let p_ctx = tape.value_v(heads.p_ctx);
    for (pos, &tok) in ctx_token_ids.iter().enumerate() {
        mixed[tok] += g1 * p_ctx[pos].to_f64_lossy();
    }
    if let Some(pkb) = heads.p_kb {
        let p_kb = tape.value_v(pkb);
        for (pos, &tok) in kb_token_ids.iter().enumerate() {
            mixed[tok] += g2 * p_kb[pos].to_f64_lossy();
        }
    }
    mixed
}

pub struct TodRecord {
    pub dialog: Dialog,
    pub graph: KbGraph,
    pub kb_token_ids: Vec<usize>,
}

pub fn prepare_tod_records<S: Scalar>(
    model: &TodModel<S>,
    pairs: &[(&Dialog, &KnowledgeBase)],
    ontology: &Ontology,
) -> Vec<TodRecord> {
    pairs
        .iter()
        .map(|(dialog, kb)| {
            let graph = KbGraph::build(kb, ontology);
            let kb_token_ids = graph
                .entities
                .iter()
                .map(|e| model.vocab.token_id(&e.value))
                .collect();
            TodRecord {
                dialog: (*dialog).clone(),
                graph,
                kb_token_ids,
            }
        })
        .collect()
}

/// Teacher-forced loss over every agent turn of one dialog, plus token
/// accuracy of the greedy mixture.
fn dialog_loss<S: Scalar>(
    model: &TodModel<S>,
    tape: &mut Tape<S>,
    record: &TodRecord,
    track_accuracy: bool,
) -> Result<(Option<NodeId>, f64, usize, usize)> {
    let prepared = prepare_dialog(&record.dialog.utterances, &[], &model.vocab);
    let enc = encode_dialog(tape, &model.params, &model.enc, &prepared);
    let z = model.encode_kb_graph(tape, &record.graph)?;
    let mut loss: Option<NodeId> = None;
    let mut loss_val = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, utt) in record.dialog.utterances.iter().enumerate() {
        if utt.speaker != Speaker::Agent {
            continue;
        }
        // Prefix features: pooled dialog state over utterances before i.
        let prefix_states: Vec<NodeId> = enc.dlg_states[..i].to_vec();
        let prefix_mat = tape.stack_rows(prefix_states);
        let scores = score_rows(tape, &model.params, &model.enc.dlg_pool, prefix_mat);
        let beta = tape.softmax(scores);
        let c = tape.rows_weighted_sum(prefix_mat, beta);
        let q = match z {
            Some(z) => memory_read(tape, &model.params, &model.memnet, z, c).q,
            None => c,
        };
        let ctx = tape.concat_rows(enc.token_mats[..i].to_vec());
        let ctx_token_ids: Vec<usize> = prepared
            .flat_index
            .iter()
            .filter(|(u, _, _)| *u < i)
            .map(|(_, _, t)| *t)
            .collect();

        let gold_ids: Vec<usize> = utt
            .tokens
            .iter()
            .map(|t| model.vocab.token_id(t))
            .chain(std::iter::once(model.vocab.token_id(EOS)))
            .collect();
        let mut s_t = q;
        let mut prev = model.vocab.token_id(SOS);
        for &gold in &gold_ids {
            let x = tape.embed_row(&model.params, model.enc.tok_emb, prev);
            s_t = gru_step(tape, &model.params, &model.dec, x, s_t);
            let heads = step_heads(model, tape, s_t, ctx, z);
            let p = token_probability(tape, &heads, gold, &ctx_token_ids, &record.kb_token_ids);
            let floored = tape.max_const(p, lit::<S>(LIKELIHOOD_FLOOR));
            let lp = tape.ln(floored);
            let term = tape.scale_const(lp, lit::<S>(-1.0));
            loss_val += tape.scalar(term).to_f64_lossy();
            loss = Some(match loss {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
            if track_accuracy {
                let mixed = mixed_distribution(
                    tape,
                    &heads,
                    model.vocab.n_tokens(),
                    &ctx_token_ids,
                    &record.kb_token_ids,
                );
                if super::mapo::argmax(&mixed) == gold {
                    correct += 1;
                }
            }
            total += 1;
            prev = gold;
        }
    }
    Ok((loss, loss_val, correct, total))
}

#[derive(Debug, Clone, Copy)]
pub struct TodEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub token_acc: f64,
}

pub fn train_tod<S: Scalar>(
    model: &mut TodModel<S>,
    records: &[TodRecord],
    cfg: &TrainCfg,
) -> Result<Vec<TodEpochStats>> {
    if records.is_empty() {
        return Err(CoreError::Diverged {
            stage: "train-tod".into(),
            reason: "no training dialogs".into(),
        });
    }
    let mut optimizer = Adam::new(cfg.lr, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut seeded_rng(sub_seed(cfg.seed, &format!("tod-epoch:{epoch}"))));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut pending = Grads::new(&model.params);
        let mut pending_n = 0usize;
        let track = epoch + 1 == cfg.epochs;
        for chunk in order.chunks(8) {
            let results: Result<Vec<(Grads<S>, f64, usize, usize)>> = chunk
                .par_iter()
                .map(|&ri| {
                    let mut tape = Tape::new();
                    let mut grads = Grads::new(&model.params);
                    let (loss, loss_val, ok, n) =
                        dialog_loss(model, &mut tape, &records[ri], track)?;
                    if let Some(loss) = loss {
                        tape.backward(
                            loss,
                            &model.params,
                            &mut grads,
                            lit::<S>(1.0 / (cfg.batch as f64 * 8.0)),
                        );
                    }
                    Ok((grads, loss_val, ok, n))
                })
                .collect();
            for (grads, loss_val, ok, n) in results? {
                epoch_loss += loss_val;
                correct += ok;
                total += n;
                pending.merge(grads);
                pending_n += 1;
                if pending_n >= cfg.batch {
                    optimizer.step(&mut model.params, &pending);
                    pending = Grads::new(&model.params);
                    pending_n = 0;
                }
            }
        }
        if pending_n > 0 {
            optimizer.step(&mut model.params, &pending);
        }
        let mean = epoch_loss / total.max(1) as f64;
        if !mean.is_finite() {
            return Err(CoreError::Diverged {
                stage: "train-tod".into(),
                reason: format!("mean loss {mean} at epoch {epoch}"),
            });
        }
        curve.push(TodEpochStats {
            epoch,
            loss: mean,
            token_acc: if track && total > 0 {
                correct as f64 / total as f64
            } else {
                f64::NAN
            },
        });
    }
    Ok(curve)
}

/// Greedy token accuracy over all agent turns (teacher-forced).
pub fn token_accuracy<S: Scalar>(model: &TodModel<S>, records: &[TodRecord]) -> Result<f64> {
    let counts: Result<Vec<(usize, usize)>> = records
        .par_iter()
        .map(|r| {
            let mut tape = Tape::new();
            let (_, _, ok, n) = dialog_loss(model, &mut tape, r, true)?;
            Ok((ok, n))
        })
        .collect();
    let counts = counts?;
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    let ok: usize = counts.iter().map(|(o, _)| o).sum();
    Ok(if total == 0 { 0.0 } else { ok as f64 / total as f64 })
}

/// Greedy generation of the next agent utterance given the history so far.
pub fn generate<S: Scalar>(
    model: &TodModel<S>,
    history: &[Utterance],
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<Vec<String>> {
    if history.is_empty() {
        return Err(CoreError::Evaluation("empty history".into()));
    }
    let graph = KbGraph::build(kb, ontology);
    let kb_token_ids: Vec<usize> = graph
        .entities
        .iter()
        .map(|e| model.vocab.token_id(&e.value))
        .collect();
    let prepared = prepare_dialog(history, &[], &model.vocab);
    let mut tape = Tape::new();
    let enc = encode_dialog(&mut tape, &model.params, &model.enc, &prepared);
    let z = model.encode_kb_graph(&mut tape, &graph)?;
    let q = match z {
        Some(z) => memory_read(&mut tape, &model.params, &model.memnet, z, enc.c).q,
        None => enc.c,
    };
    let ctx = enc.flat_tokens;
    let ctx_token_ids: Vec<usize> = prepared.flat_index.iter().map(|(_, _, t)| *t).collect();
    let mut s_t = q;
    let mut prev = model.vocab.token_id(SOS);
    let eos = model.vocab.token_id(EOS);
    let mut out = Vec::new();
    for _ in 0..model.max_len {
        let x = tape.embed_row(&model.params, model.enc.tok_emb, prev);
        s_t = gru_step(&mut tape, &model.params, &model.dec, x, s_t);
        let heads = step_heads(model, &mut tape, s_t, ctx, z);
        let mixed = mixed_distribution(
            &tape,
            &heads,
            model.vocab.n_tokens(),
            &ctx_token_ids,
            &kb_token_ids,
        );
        let next = super::mapo::argmax(&mixed);
        if next == eos {
            break;
        }
        out.push(model.vocab.token(next).to_string());
        prev = next;
    }
    Ok(out)
}

/// Tags tokens of raw text against the ontology's entity vocabulary so the
/// single-shot responder can run without mention annotations.
pub fn annotate_utterances(turns: &[(Speaker, String)], ontology: &Ontology) -> Vec<Utterance> {
    let by_value: std::collections::BTreeMap<&str, &str> = ontology
        .entities
        .iter()
        .map(|e| (e.value.as_str(), e.etype.as_str()))
        .collect();
    turns
        .iter()
        .map(|(speaker, text)| {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
            let mentions = tokens
                .iter()
                .enumerate()
                .filter_map(|(i, t)| {
                    by_value.get(t.as_str()).map(|etype| Mention {
                        start: i,
                        end: i + 1,
                        entity: crate::data::Entity::new(t.clone(), *etype),
                    })
                })
                .collect();
            Utterance::new(*speaker, tokens, mentions)
        })
        .collect()
}
