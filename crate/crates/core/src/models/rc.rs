//! Row completion: predicts values for latent fields (fields that steer
//! agent behaviour without being uttered, e.g. rating) of rows whose head
//! the dialog mentions. Trained with MAPO; an action is rewarded when it
//! attains the maximum dialog likelihood over the relation's target set.

use super::common::{ModelDims, TrainCfg};
use super::mapo::{argmax, mapo_loss, MapoState};
use super::mem::{mask_instances, MemModel, PreparedInstance};
use crate::data::{Dialog, Entity, KnowledgeBase, Ontology};
use crate::nn::checkpoint::{load_checkpoint_meta, load_checkpoint_params, save_checkpoint, CheckpointMeta};
use crate::nn::params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet};
use crate::nn::{
    encode_dialog, encode_kb, entity_embeddings, memory_read, prepare_dialog,
    DialogEncoderWeights, EncoderConfig, KbEncoderWeights, KbGraph, MemNetWeights, NodeId, Tape,
    Vocab,
};
use crate::scalar::{lit, Scalar};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A latent relation with its admissible target entities `E_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcRelationSpec {
    pub name: String,
    pub targets: Vec<Entity>,
}

/// Latent relations from the ontology, targets in vocabulary order.
pub fn rc_relation_specs(ontology: &Ontology) -> Vec<RcRelationSpec> {
    ontology
        .latent_relations()
        .map(|r| RcRelationSpec {
            name: r.name.clone(),
            targets: ontology.target_set(&r.name).into_iter().cloned().collect(),
        })
        .collect()
}

/// A completion state `(dialog, e_s, r, K̃)`.
pub struct RcState {
    pub dialog_id: String,
    pub head: Entity,
    pub relation_idx: usize,
    /// `K^rd` with any `(e_s, r, ·)` dropped.
    pub kb: KnowledgeBase,
    /// The dropped value, when the row had one (training states re-derive
    /// known fields; application states never have one).
    pub dropped: Option<Entity>,
}

/// Builds the training state space: every latent relation paired with every
/// dialog-mentioned head entity that heads a row in the dialog's KB.
pub fn build_rc_states(
    pairs: &[(&Dialog, &KnowledgeBase)],
    specs: &[RcRelationSpec],
    ontology: &Ontology,
) -> Vec<RcState> {
    let mut out = Vec::new();
    for (dialog, kb) in pairs {
        let mentions = dialog.mentioned_entities();
        for (relation_idx, spec) in specs.iter().enumerate() {
            let head_type = match ontology.relation(&spec.name) {
                Some(r) => r.head_type.clone(),
                None => continue,
            };
            for entity in &mentions {
                if entity.etype != head_type {
                    continue;
                }
                let Some(row) = kb.row(entity) else {
                    continue;
                };
                let dropped = row.fields.get(&spec.name).cloned();
                let mut kb_tilde = (*kb).clone();
                if dropped.is_some() {
                    for r in kb_tilde.rows.iter_mut() {
                        if &r.head == *entity {
                            r.fields.remove(&spec.name);
                        }
                    }
                }
                kb_tilde.id = format!("{}~rc~{}~{}", kb.id, spec.name, entity.value);
                out.push(RcState {
                    dialog_id: dialog.id.clone(),
                    head: (*entity).clone(),
                    relation_idx,
                    kb: kb_tilde,
                    dropped,
                });
            }
        }
    }
    out
}

/// Rewards every candidate completion: 1 for the likelihood argmax (all
/// maximizers on ties), 0 otherwise.
pub fn rc_rewards<S: Scalar>(
    mem: &MemModel<S>,
    frozen: &crate::models::mem::FrozenDialog,
    state: &RcState,
    spec: &RcRelationSpec,
    ontology: &Ontology,
) -> Result<MapoState> {
    let scores: Result<Vec<f64>> = spec
        .targets
        .par_iter()
        .map(|target| {
            let mut kb = state.kb.clone();
            kb.id = format!("{}~set~{}", state.kb.id, target.value);
            for row in kb.rows.iter_mut() {
                if row.head == state.head {
                    row.fields.insert(spec.name.clone(), target.clone());
                }
            }
            mem.frozen_log_likelihood(frozen, &kb, ontology)
        })
        .collect();
    let scores = scores?;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(MapoState::from_rewards(
        scores
            .iter()
            .map(|&s| if s == max { 1.0 } else { 0.0 })
            .collect(),
    ))
}

pub struct RcModel<S: Scalar> {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub specs: Vec<RcRelationSpec>,
    pub n_relations: usize,
    pub seed: u64,
    pub params: ParamSet<S>,
    enc: DialogEncoderWeights,
    kb_enc: KbEncoderWeights,
    memnet: MemNetWeights,
    q0_w: ParamId,
    q0_b: ParamId,
    heads: Vec<HeadWeights>,
}

struct HeadWeights {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<S: Scalar> RcModel<S> {
    pub fn new(
        dims: ModelDims,
        vocab: Vocab,
        specs: Vec<RcRelationSpec>,
        n_relations: usize,
        seed: u64,
    ) -> Self {
        let mut params = ParamSet::new();
        let rng = &mut seeded_rng(seed);
        let e = dims.emb;
        let enc = DialogEncoderWeights::new(
            &mut params,
            EncoderConfig {
                emb: e,
                pos_dim: dims.pos_dim,
                markers: 1,
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
        let q0_w = params.add_matrix("q0.w", e, 2 * e, g, rng);
        let q0_b = params.add_vector("q0.b", e, Init::Zeros, rng);
        let heads = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| HeadWeights {
                w1: params.add_matrix(format!("head{i}.w1"), dims.mlp_hidden, 2 * e, g, rng),
                b1: params.add_vector(format!("head{i}.b1"), dims.mlp_hidden, Init::Zeros, rng),
                w2: params.add_matrix(
                    format!("head{i}.w2"),
                    spec.targets.len(),
                    dims.mlp_hidden,
                    g,
                    rng,
                ),
                b2: params.add_vector(format!("head{i}.b2"), spec.targets.len(), Init::Zeros, rng),
            })
            .collect();
        RcModel {
            dims,
            vocab,
            specs,
            n_relations,
            seed,
            params,
            enc,
            kb_enc,
            memnet,
            q0_w,
            q0_b,
            heads,
        }
    }

    /// Action distribution over `E_r` for one state.
    pub fn forward_state(
        &self,
        tape: &mut Tape<S>,
        dialog: &Dialog,
        state: &RcState,
        graph: &KbGraph,
        ontology: &Ontology,
    ) -> Result<StatePolicy> {
        let _ = ontology;
        let prepared = prepare_dialog(&dialog.utterances, &[&state.head], &self.vocab);
        let enc = encode_dialog(tape, &self.params, &self.enc, &prepared);
        let h_es = if prepared.marker_pos[0].0 != usize::MAX {
            enc.token_feature(tape, prepared.marker_pos[0])
        } else {
            // The head never occurs in the dialog text; fall back to its
            // entity embedding through the featurizer.
            let tok = self.vocab.token_id(&state.head.value);
            let te = tape.embed_row(&self.params, self.enc.tok_emb, tok);
            let ge = tape.embed_row(
                &self.params,
                self.enc.tag_emb,
                self.vocab.tag_id(Some(&state.head.etype)),
            );
            tape.add(te, ge)
        };
        let z0 = entity_embeddings(
            tape,
            &self.params,
            self.enc.tok_emb,
            self.enc.tag_emb,
            graph,
            &self.vocab,
        )?;
        let z = encode_kb(tape, &self.params, &self.kb_enc, graph, z0);
        let c_h = tape.concat(enc.c, h_es);
        let q0 = tape.affine(&self.params, self.q0_w, Some(self.q0_b), c_h);
        let read = memory_read(tape, &self.params, &self.memnet, z, q0);
        let z_es = match graph.entity_index(&state.head) {
            Some(idx) => tape.pick_row(z, idx),
            None => {
                return Err(CoreError::InvalidKb(format!(
                    "completion head `{}` missing from its KB",
                    state.head.value
                )))
            }
        };
        let h = tape.concat(read.q, z_es);
        let head = &self.heads[state.relation_idx];
        let h1 = tape.affine(&self.params, head.w1, Some(head.b1), h);
        let h1 = tape.relu(h1);
        let logits = tape.affine(&self.params, head.w2, Some(head.b2), h1);
        let probs = tape.softmax(logits);
        let floored = tape.max_const(probs, lit::<S>(1e-30));
        let log_probs = tape.ln(floored);
        Ok(StatePolicy {
            probs: tape.value_v(probs).iter().map(|x| x.to_f64_lossy()).collect(),
            probs_node: probs,
            log_probs,
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            model_kind: "rc".into(),
            config_hash: config_hash.into(),
            seed: self.seed,
            vocab_digest: self.vocab.digest(),
            vocab_tokens: self.vocab.tokens().to_vec(),
            vocab_tags: self.vocab.tags().to_vec(),
            dims: serde_json::json!({
                "dims": self.dims,
                "n_relations": self.n_relations,
                "specs": self.specs,
            }),
        };
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = load_checkpoint_meta(path)?;
        if meta.model_kind != "rc" {
            return Err(CoreError::Checkpoint(format!(
                "expected an rc checkpoint, found `{}`",
                meta.model_kind
            )));
        }
        let dims: ModelDims = serde_json::from_value(meta.dims["dims"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint dims", e))?;
        let n_relations = meta.dims["n_relations"].as_u64().unwrap_or(0) as usize;
        let specs: Vec<RcRelationSpec> = serde_json::from_value(meta.dims["specs"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint specs", e))?;
        let mut vocab = meta.vocab();
        vocab.reindex();
        let mut model = RcModel::new(dims, vocab, specs, n_relations, meta.seed);
        load_checkpoint_params(path, &mut model.params)?;
        Ok(model)
    }
}

pub struct StatePolicy {
    pub probs: Vec<f64>,
    pub probs_node: NodeId,
    pub log_probs: NodeId,
}

/// A fully prepared training state: rewards enumerated, graph built.
pub struct RcTrainState {
    pub state: RcState,
    pub dialog_idx: usize,
    pub graph: KbGraph,
    pub mapo: MapoState,
}

pub fn prepare_rc_states<S: Scalar>(
    mem: &MemModel<S>,
    dialogs: &[&Dialog],
    states: Vec<RcState>,
    specs: &[RcRelationSpec],
    ontology: &Ontology,
) -> Result<Vec<RcTrainState>> {
    let frozen_cache: Vec<crate::models::mem::FrozenDialog> = dialogs
        .par_iter()
        .map(|d| {
            let instances: Vec<PreparedInstance> = mask_instances(d)
                .iter()
                .map(|i| mem.prepare_instance(i))
                .collect();
            mem.freeze(&instances)
        })
        .collect();
    let by_id: std::collections::BTreeMap<&str, usize> = dialogs
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.as_str(), i))
        .collect();
    states
        .into_iter()
        .map(|state| {
            let dialog_idx = *by_id.get(state.dialog_id.as_str()).ok_or_else(|| {
                CoreError::Evaluation(format!("state references unknown dialog {}", state.dialog_id))
            })?;
            let mapo = rc_rewards(
                mem,
                &frozen_cache[dialog_idx],
                &state,
                &specs[state.relation_idx],
                ontology,
            )?;
            let graph = KbGraph::build(&state.kb, ontology);
            Ok(RcTrainState {
                state,
                dialog_idx,
                graph,
                mapo,
            })
        })
        .collect()
}

pub fn rc_average_reward<S: Scalar>(
    model: &RcModel<S>,
    dialogs: &[&Dialog],
    states: &[RcTrainState],
    ontology: &Ontology,
) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let rewards: Result<Vec<f64>> = states
        .par_iter()
        .map(|ts| {
            let mut tape = Tape::new();
            let policy = model.forward_state(
                &mut tape,
                dialogs[ts.dialog_idx],
                &ts.state,
                &ts.graph,
                ontology,
            )?;
            Ok(ts.mapo.rewards[argmax(&policy.probs)])
        })
        .collect();
    Ok(rewards?.iter().sum::<f64>() / states.len() as f64)
}

pub fn train_rc<S: Scalar>(
    model: &mut RcModel<S>,
    dialogs: &[&Dialog],
    states: &[RcTrainState],
    ontology: &Ontology,
    cfg: &TrainCfg,
    w_floor: f64,
) -> Result<Vec<(usize, f64)>> {
    if states.is_empty() {
        return Err(CoreError::Diverged {
            stage: "train-rc".into(),
            reason: "no completion states".into(),
        });
    }
    let mut optimizer = Adam::new(cfg.lr, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        curve.push((epoch, rc_average_reward(model, dialogs, states, ontology)?));
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.shuffle(&mut seeded_rng(sub_seed(cfg.seed, &format!("rc-epoch:{epoch}"))));
        let mut pending = Grads::new(&model.params);
        let mut pending_n = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let results: Result<Vec<Grads<S>>> = chunk
                .par_iter()
                .map(|&si| {
                    let ts = &states[si];
                    let mut tape = Tape::new();
                    let mut grads = Grads::new(&model.params);
                    let policy = model.forward_state(
                        &mut tape,
                        dialogs[ts.dialog_idx],
                        &ts.state,
                        &ts.graph,
                        ontology,
                    )?;
                    let loss = mapo_loss(&mut tape, policy.log_probs, &policy.probs, &ts.mapo, w_floor);
                    tape.backward(
                        loss,
                        &model.params,
                        &mut grads,
                        lit::<S>(1.0 / cfg.batch as f64),
                    );
                    Ok(grads)
                })
                .collect();
            for grads in results? {
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
    }
    curve.push((cfg.epochs, rc_average_reward(model, dialogs, states, ontology)?));
    Ok(curve)
}

/// Greedy application: fills only missing latent fields of rows whose head
/// the dialog mentions. Ties break toward the earlier target.
pub fn apply_rc<S: Scalar>(
    model: &RcModel<S>,
    dialog: &Dialog,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<Vec<(Entity, String, Entity)>> {
    let mentions = dialog.mention_values();
    let mut completions = Vec::new();
    for (relation_idx, spec) in model.specs.iter().enumerate() {
        let head_type = match ontology.relation(&spec.name) {
            Some(r) => r.head_type.clone(),
            None => continue,
        };
        for row in &kb.rows {
            if row.head.etype != head_type
                || row.fields.contains_key(&spec.name)
                || !mentions.contains(row.head.value.as_str())
            {
                continue;
            }
            let state = RcState {
                dialog_id: dialog.id.clone(),
                head: row.head.clone(),
                relation_idx,
                kb: kb.clone(),
                dropped: None,
            };
            let graph = KbGraph::build(&state.kb, ontology);
            let mut tape = Tape::new();
            let policy = model.forward_state(&mut tape, dialog, &state, &graph, ontology)?;
            let choice = argmax(&policy.probs);
            completions.push((
                row.head.clone(),
                spec.name.clone(),
                spec.targets[choice].clone(),
            ));
        }
    }
    Ok(completions)
}
