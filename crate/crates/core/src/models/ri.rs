//! Row insertion: per-relation binary classifiers over dialog encodings
//! with two-entity position markers, trained on the distantly supervised
//! positive/negative sets and applied to each dialog's infer set.

use super::common::{ModelDims, TrainCfg};
use crate::data::{Corpus, Dialog, Entity, KnowledgeBase, Row, Triple};
use crate::nn::checkpoint::{load_checkpoint_meta, load_checkpoint_params, save_checkpoint, CheckpointMeta};
use crate::nn::params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet};
use crate::nn::{
    encode_dialog, prepare_dialog, DialogEncoderWeights, EncoderConfig, NodeId, PreparedDialog,
    Tape, Vocab,
};
use crate::scalar::{lit, Scalar};
use crate::supervision::{Label, LabeledCandidate};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

pub struct RiModel<S: Scalar> {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub relations: Vec<String>,
    pub seed: u64,
    pub params: ParamSet<S>,
    enc: DialogEncoderWeights,
    heads: Vec<HeadWeights>,
}

struct HeadWeights {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<S: Scalar> RiModel<S> {
    pub fn new(dims: ModelDims, vocab: Vocab, relations: Vec<String>, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let rng = &mut seeded_rng(seed);
        let e = dims.emb;
        let enc = DialogEncoderWeights::new(
            &mut params,
            EncoderConfig {
                emb: e,
                pos_dim: dims.pos_dim,
                markers: 2,
                pos_clip: dims.pos_clip,
            },
            &vocab,
            "enc",
            rng,
        );
        let g = Init::Glorot { scale: 1.0 };
        let heads = relations
            .iter()
            .enumerate()
            .map(|(i, _)| HeadWeights {
                w1: params.add_matrix(format!("head{i}.w1"), dims.mlp_hidden, 3 * e, g, rng),
                b1: params.add_vector(format!("head{i}.b1"), dims.mlp_hidden, Init::Zeros, rng),
                w2: params.add_matrix(format!("head{i}.w2"), 1, dims.mlp_hidden, g, rng),
                b2: params.add_vector(format!("head{i}.b2"), 1, Init::Zeros, rng),
            })
            .collect();
        RiModel {
            dims,
            vocab,
            relations,
            seed,
            params,
            enc,
            heads,
        }
    }

    /// Probability that the candidate relation holds, from the dialog
    /// marked with both endpoints.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        prepared: &PreparedDialog,
        relation_idx: usize,
    ) -> NodeId {
        let enc = encode_dialog(tape, &self.params, &self.enc, prepared);
        let h1 = self.marked_feature(tape, &enc, prepared, 0);
        let h2 = self.marked_feature(tape, &enc, prepared, 1);
        let feats = tape.concat3(enc.c, h1, h2);
        let head = &self.heads[relation_idx];
        let hidden = tape.affine(&self.params, head.w1, Some(head.b1), feats);
        let hidden = tape.relu(hidden);
        let score = tape.affine(&self.params, head.w2, Some(head.b2), hidden);
        tape.sigmoid(score)
    }

    fn marked_feature(
        &self,
        tape: &mut Tape<S>,
        enc: &crate::nn::DialogEncoding,
        prepared: &PreparedDialog,
        marker: usize,
    ) -> NodeId {
        if prepared.marker_pos[marker].0 != usize::MAX {
            enc.token_feature(tape, prepared.marker_pos[marker])
        } else {
            tape.leaf_v(ndarray::Array1::zeros(self.dims.emb))
        }
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            model_kind: "ri".into(),
            config_hash: config_hash.into(),
            seed: self.seed,
            vocab_digest: self.vocab.digest(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_tags: self.vocab.tags().to_vec(),
            dims: serde_json::json!({
                "dims": self.dims,
                "relations": self.relations,
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_checkpoint_meta(path)?;
        if meta.model_kind != "ri" {
            return Err(CoreError::Checkpoint(format!(
                "expected an ri checkpoint, found `{}`",
                meta.model_kind
            )));
        }
        let dims: ModelDims = serde_json::from_value(meta.dims["dims"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint dims", e))?;
        let relations: Vec<String> = serde_json::from_value(meta.dims["relations"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint relations", e))?;
        let mut vocab = meta.vocab();
        vocab.reindex();
        let mut model = RiModel::new(dims, vocab, relations, meta.seed);
        load_checkpoint_params(path, &mut model.params)?;
        Ok(model)
    }
}

/// One prepared training example.
pub struct RiExample {
    pub prepared: PreparedDialog,
    pub relation_idx: usize,
    pub positive: bool,
    pub dialog_id: String,
}

pub fn prepare_examples<S: Scalar>(
    model: &RiModel<S>,
    corpus: &Corpus,
    candidates: &[LabeledCandidate],
) -> Result<Vec<RiExample>> {
    let by_id: BTreeMap<&str, &Dialog> = corpus
        .records
        .iter()
        .map(|r| (r.dialog.id.as_str(), &r.dialog))
        .collect();
    candidates
        .iter()
        .filter(|c| c.label != Label::Infer)
        .map(|c| {
            let dialog = by_id.get(c.dialog_id.as_str()).ok_or_else(|| {
                CoreError::Evaluation(format!("candidate references unknown dialog {}", c.dialog_id))
            })?;
            let relation_idx = model.relation_index(&c.triple.relation).ok_or_else(|| {
                CoreError::Evaluation(format!("unknown relation {}", c.triple.relation))
            })?;
            Ok(RiExample {
                prepared: prepare_dialog(
                    &dialog.utterances,
                    &[&c.triple.head, &c.triple.tail],
                    &model.vocab,
                ),
                relation_idx,
                positive: c.label == Label::Positive,
                dialog_id: c.dialog_id.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct RiEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Binary cross-entropy training with a held-out validation split by dialog
/// (deterministic hash of the dialog id).
pub fn train_ri<S: Scalar>(
    model: &mut RiModel<S>,
    examples: &[RiExample],
    cfg: &TrainCfg,
    val_fraction: f64,
) -> Result<Vec<RiEpochStats>> {
    if examples.is_empty() {
        return Err(CoreError::Diverged {
            stage: "train-ri".into(),
            reason: "empty training set".into(),
        });
    }
    let is_val: Vec<bool> = examples
        .iter()
        .map(|ex| {
            let h = crate::nn::params::sub_seed(0x52495f56, &ex.dialog_id);
            (h % 1000) as f64 / 1000.0 < val_fraction
        })
        .collect();
    let train_idx: Vec<usize> = (0..examples.len()).filter(|&i| !is_val[i]).collect();
    let val_idx: Vec<usize> = (0..examples.len()).filter(|&i| is_val[i]).collect();
    let mut optimizer = Adam::new(cfg.lr, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seeded_rng(sub_seed(cfg.seed, &format!("ri-epoch:{epoch}"))));
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut pending = Grads::new(&model.params);
        let mut pending_n = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let results: Vec<(Grads<S>, f64, bool)> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut tape = Tape::new();
                    let mut grads = Grads::new(&model.params);
                    let prob = model.forward(&mut tape, &ex.prepared, ex.relation_idx);
                    // Clamped BCE.
                    let p = tape.max_const(prob, lit::<S>(1e-12));
                    let q_raw = tape.one_minus(prob);
                    let q = tape.max_const(q_raw, lit::<S>(1e-12));
                    let lp = tape.ln(p);
                    let lq = tape.ln(q);
                    let loss = if ex.positive {
                        tape.scale_const(lp, lit::<S>(-1.0))
                    } else {
                        tape.scale_const(lq, lit::<S>(-1.0))
                    };
                    let loss_val = tape.scalar(loss).to_f64_lossy();
                    tape.backward(loss, &model.params, &mut grads, lit::<S>(1.0 / cfg.batch as f64));
                    let predicted = tape.scalar(prob).to_f64_lossy() > 0.5;
                    (grads, loss_val, predicted == ex.positive)
                })
                .collect();
            for (grads, loss, ok) in results {
                epoch_loss += loss;
                correct += ok as usize;
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
        let mean_loss = epoch_loss / train_idx.len().max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(CoreError::Diverged {
                stage: "train-ri".into(),
                reason: format!("mean loss {mean_loss} at epoch {epoch}"),
            });
        }
        let val_acc = accuracy(model, examples, &val_idx);
        curve.push(RiEpochStats {
            epoch,
            loss: mean_loss,
            train_acc: correct as f64 / train_idx.len().max(1) as f64,
            val_acc,
        });
    }
    Ok(curve)
}

pub fn accuracy<S: Scalar>(model: &RiModel<S>, examples: &[RiExample], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    let correct: usize = idx
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let mut tape = Tape::new();
            let prob = model.forward(&mut tape, &ex.prepared, ex.relation_idx);
            ((tape.scalar(prob).to_f64_lossy() > 0.5) == ex.positive) as usize
        })
        .sum();
    correct as f64 / idx.len() as f64
}

/// Scores the infer set of one dialog, returning accepted triples with
/// their scores (score strictly above the threshold).
pub fn score_infer_candidates<S: Scalar>(
    model: &RiModel<S>,
    dialog: &Dialog,
    infer: &[&LabeledCandidate],
    threshold: f64,
) -> Vec<(Triple, f64)> {
    infer
        .par_iter()
        .filter_map(|c| {
            let relation_idx = model.relation_index(&c.triple.relation)?;
            let prepared =
                prepare_dialog(&dialog.utterances, &[&c.triple.head, &c.triple.tail], &model.vocab);
            let mut tape = Tape::new();
            let prob = model.forward(&mut tape, &prepared, relation_idx);
            let score = tape.scalar(prob).to_f64_lossy();
            (score > threshold).then(|| (c.triple.clone(), score))
        })
        .collect()
}

/// Groups accepted triples into new rows and merges them into the KB.
///
/// Rules: the training KB's own rows are never modified; a tail value bound
/// to exactly one existing row is never attached to a new row; conflicting
/// values for one field resolve toward the higher score.
pub fn apply_insertions(
    kb: &KnowledgeBase,
    accepted: &[(Triple, f64)],
    dialog_id: &str,
) -> Result<KnowledgeBase> {
    let mut sorted: Vec<&(Triple, f64)> = accepted.iter().collect();
    sorted.sort_by(|a, b| {
        a.0.head
            .cmp(&b.0.head)
            .then(a.0.relation.cmp(&b.0.relation))
            .then(b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.0.tail.cmp(&b.0.tail))
    });
    let mut new_rows: BTreeMap<Entity, Row> = BTreeMap::new();
    for (triple, _score) in sorted {
        if kb.contains_head(&triple.head) {
            continue;
        }
        if kb.value_occurrence_count(&triple.tail.value) == 1 {
            continue;
        }
        let row = new_rows
            .entry(triple.head.clone())
            .or_insert_with(|| Row::new(triple.head.clone()));
        row.fields
            .entry(triple.relation.clone())
            .or_insert_with(|| triple.tail.clone());
    }
    let mut rows = kb.rows.clone();
    rows.extend(new_rows.into_values());
    KnowledgeBase::new(format!("{}~ri~{dialog_id}", kb.id), rows)
}
