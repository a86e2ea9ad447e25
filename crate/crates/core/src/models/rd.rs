//! Row deletion: a binary policy over `(dialog, KB, row)` states, trained
//! with MAPO against likelihood-difference rewards from the masked entity
//! model. Action 0 deletes the row, action 1 keeps it.

use super::common::{sum_rows, ModelDims, TrainCfg};
use super::mapo::{argmax, mapo_loss, MapoState};
use super::mem::{MemModel, PreparedInstance};
use crate::data::{Dialog, Entity, KnowledgeBase, Ontology};
use crate::nn::checkpoint::{load_checkpoint_meta, load_checkpoint_params, save_checkpoint, CheckpointMeta};
use crate::nn::params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet};
use crate::nn::{
    encode_dialog, encode_kb, entity_embeddings, memory_read, prepare_dialog,
    DialogEncoderWeights, EncoderConfig, KbEncoderWeights, KbGraph, MemNetWeights, NodeId,
    PreparedDialog, Tape, Vocab,
};
use crate::scalar::{lit, Scalar};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;

/// Reward of deleting a row: the sign of the log-likelihood change, with
/// `sgn(0) = 0` so task-irrelevant rows are reward-neutral. Keeping earns
/// the negated reward.
pub fn rd_reward<S: Scalar>(
    mem: &MemModel<S>,
    frozen: &crate::models::mem::FrozenDialog,
    kb: &KnowledgeBase,
    row_head: &Entity,
    ontology: &Ontology,
) -> Result<[f64; 2]> {
    let base = mem.frozen_log_likelihood(frozen, kb, ontology)?;
    let without = kb.without_row(row_head);
    let deleted = mem.frozen_log_likelihood(frozen, &without, ontology)?;
    let diff = deleted - base;
    let r0 = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok([r0, -r0])
}

/// Enumerates both actions' rewards for every row of the KB (row order).
pub fn rd_rewards_for_dialog<S: Scalar>(
    mem: &MemModel<S>,
    frozen: &crate::models::mem::FrozenDialog,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<Vec<MapoState>> {
    let base = mem.frozen_log_likelihood(frozen, kb, ontology)?;
    let diffs: Result<Vec<f64>> = kb
        .rows
        .par_iter()
        .map(|row| {
            let without = kb.without_row(&row.head);
            Ok(mem.frozen_log_likelihood(frozen, &without, ontology)? - base)
        })
        .collect();
    Ok(diffs?
        .into_iter()
        .map(|diff| {
            let r0 = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            MapoState::from_rewards(vec![r0, -r0])
        })
        .collect())
}

pub struct RdModel<S: Scalar> {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub n_relations: usize,
    pub seed: u64,
    pub params: ParamSet<S>,
    enc: DialogEncoderWeights,
    kb_enc: KbEncoderWeights,
    memnet: MemNetWeights,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

impl<S: Scalar> RdModel<S> {
    pub fn new(dims: ModelDims, vocab: Vocab, n_relations: usize, seed: u64) -> Self {
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
        let head_w1 = params.add_matrix("head.w1", dims.mlp_hidden, 2 * e, g, rng);
        let head_b1 = params.add_vector("head.b1", dims.mlp_hidden, Init::Zeros, rng);
        let head_w2 = params.add_matrix("head.w2", 1, dims.mlp_hidden, g, rng);
        let head_b2 = params.add_vector("head.b2", 1, Init::Zeros, rng);
        RdModel {
            dims,
            vocab,
            n_relations,
            seed,
            params,
            enc,
            kb_enc,
            memnet,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        }
    }

    fn encode_kb_graph(&self, tape: &mut Tape<S>, graph: &KbGraph) -> Result<NodeId> {
        let z0 = entity_embeddings(
            tape,
            &self.params,
            self.enc.tok_emb,
            self.enc.tag_emb,
            graph,
            &self.vocab,
        )?;
        Ok(encode_kb(tape, &self.params, &self.kb_enc, graph, z0))
    }

    /// Forward for one dialog: shared encodings plus a per-row action
    /// distribution `[π(delete), π(keep)]`.
    pub fn forward_dialog(
        &self,
        tape: &mut Tape<S>,
        record: &RdRecord,
    ) -> Result<Vec<RowPolicy>> {
        let enc = encode_dialog(tape, &self.params, &self.enc, &record.prepared);
        let z = self.encode_kb_graph(tape, &record.graph)?;
        let read = memory_read(tape, &self.params, &self.memnet, z, enc.c);
        let mut out = Vec::with_capacity(record.graph.row_entities.len());
        for row_idx in record.graph.row_entities.iter() {
            let z_row = sum_rows(tape, z, row_idx);
            let h = tape.concat(read.q, z_row);
            let h1 = tape.affine(&self.params, self.head_w1, Some(self.head_b1), h);
            let h1 = tape.relu(h1);
            let score = tape.affine(&self.params, self.head_w2, Some(self.head_b2), h1);
            let keep = tape.sigmoid(score);
            // Clamp both sides away from 0 so log π stays finite.
            let del = tape.one_minus(keep);
            let del = tape.max_const(del, lit::<S>(1e-12));
            let keep = tape.one_minus(del);
            let keep = tape.max_const(keep, lit::<S>(1e-12));
            let probs = tape.concat(del, keep);
            let log_probs = tape.ln(probs);
            let values = tape.value_v(probs).to_vec();
            out.push(RowPolicy {
                probs: values.iter().map(|x| x.to_f64_lossy()).collect(),
                log_probs,
            });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            model_kind: "rd".into(),
            config_hash: config_hash.into(),
            seed: self.seed,
            vocab_digest: self.vocab.digest(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_tags: self.vocab.tags().to_vec(),
            dims: serde_json::json!({
                "dims": self.dims,
                "n_relations": self.n_relations,
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_checkpoint_meta(path)?;
        if meta.model_kind != "rd" {
            return Err(CoreError::Checkpoint(format!(
                "expected an rd checkpoint, found `{}`",
                meta.model_kind
            )));
        }
        let dims: ModelDims = serde_json::from_value(meta.dims["dims"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint dims", e))?;
        let n_relations = meta.dims["n_relations"].as_u64().unwrap_or(0) as usize;
        let mut vocab = meta.vocab();
        vocab.reindex();
        let mut model = RdModel::new(dims, vocab, n_relations, meta.seed);
        load_checkpoint_params(path, &mut model.params)?;
        Ok(model)
    }
}

pub struct RowPolicy {
    pub probs: Vec<f64>,
    pub log_probs: NodeId,
}

/// One dialog's deletion states: the prepared (unmarked) dialog, its KB
/// graph, and the enumerated per-row rewards.
pub struct RdRecord {
    pub dialog_id: String,
    pub prepared: PreparedDialog,
    pub kb: KnowledgeBase,
    pub graph: KbGraph,
    pub states: Vec<MapoState>,
}

pub fn prepare_rd_records<S: Scalar>(
    model: &RdModel<S>,
    mem: &MemModel<S>,
    pairs: &[(&Dialog, &KnowledgeBase)],
    ontology: &Ontology,
) -> Result<Vec<RdRecord>> {
    pairs
        .iter()
        .map(|(dialog, kb)| {
            let instances: Vec<PreparedInstance> = super::mem::mask_instances(dialog)
                .iter()
                .map(|i| mem.prepare_instance(i))
                .collect();
            let frozen = mem.freeze(&instances);
            let states = rd_rewards_for_dialog(mem, &frozen, kb, ontology)?;
            Ok(RdRecord {
                dialog_id: dialog.id.clone(),
                prepared: prepare_dialog(&dialog.utterances, &[], &model.vocab),
                kb: (*kb).clone(),
                graph: KbGraph::build(kb, ontology),
                states,
            })
        })
        .collect()
}

/// Mean greedy reward over all states under the current policy.
pub fn rd_average_reward<S: Scalar>(model: &RdModel<S>, records: &[RdRecord]) -> Result<f64> {
    let per_dialog: Result<Vec<(f64, usize)>> = records
        .par_iter()
        .map(|record| {
            let mut tape = Tape::new();
            let policies = model.forward_dialog(&mut tape, record)?;
            let mut total = 0.0;
            for (policy, state) in policies.iter().zip(record.states.iter()) {
                total += state.rewards[argmax(&policy.probs)];
            }
            Ok((total, record.states.len()))
        })
        .collect();
    let per_dialog = per_dialog?;
    let n: usize = per_dialog.iter().map(|(_, n)| n).sum();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(per_dialog.iter().map(|(t, _)| t).sum::<f64>() / n as f64)
}

/// MAPO training. The returned curve holds the greedy average reward at the
/// start of each epoch plus a final entry after the last update.
pub fn train_rd<S: Scalar>(
    model: &mut RdModel<S>,
    records: &[RdRecord],
    cfg: &TrainCfg,
    w_floor: f64,
) -> Result<Vec<(usize, f64)>> {
    let mut optimizer = Adam::new(cfg.lr, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let total_states: usize = records.iter().map(|r| r.states.len()).sum();
    if total_states == 0 {
        return Err(CoreError::Diverged {
            stage: "train-rd".into(),
            reason: "no deletion states".into(),
        });
    }
    for epoch in 0..cfg.epochs {
        curve.push((epoch, rd_average_reward(model, records)?));
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut seeded_rng(sub_seed(cfg.seed, &format!("rd-epoch:{epoch}"))));
        let mut pending = Grads::new(&model.params);
        let mut pending_n = 0usize;
        for chunk in order.chunks(8) {
            let results: Result<Vec<(Grads<S>, usize)>> = chunk
                .par_iter()
                .map(|&ri| {
                    let record = &records[ri];
                    let mut tape = Tape::new();
                    let mut grads = Grads::new(&model.params);
                    let policies = model.forward_dialog(&mut tape, record)?;
                    let mut loss: Option<NodeId> = None;
                    for (policy, state) in policies.iter().zip(record.states.iter()) {
                        let term =
                            mapo_loss(&mut tape, policy.log_probs, &policy.probs, state, w_floor);
                        loss = Some(match loss {
                            Some(acc) => tape.add(acc, term),
                            None => term,
                        });
                    }
                    if let Some(loss) = loss {
                        tape.backward(
                            loss,
                            &model.params,
                            &mut grads,
                            lit::<S>(1.0 / cfg.batch as f64),
                        );
                    }
                    Ok((grads, record.states.len()))
                })
                .collect();
            for (grads, n) in results? {
                pending.merge(grads);
                pending_n += n;
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
    }
    curve.push((cfg.epochs, rd_average_reward(model, records)?));
    Ok(curve)
}

/// Greedy application: returns the heads of rows the policy deletes.
pub fn apply_rd<S: Scalar>(
    model: &RdModel<S>,
    dialog: &Dialog,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<Vec<Entity>> {
    let record = RdRecord {
        dialog_id: dialog.id.clone(),
        prepared: prepare_dialog(&dialog.utterances, &[], &model.vocab),
        kb: kb.clone(),
        graph: KbGraph::build(kb, ontology),
        states: Vec::new(),
    };
    let mut tape = Tape::new();
    let policies = model.forward_dialog(&mut tape, &record)?;
    Ok(policies
        .iter()
        .zip(kb.rows.iter())
        .filter(|(p, _)| p.probs[0] > 0.5)
        .map(|(_, row)| row.head.clone())
        .collect())
}
