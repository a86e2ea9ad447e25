//! Masked entity model: a dual pointer network scoring the probability of a
//! masked agent-utterance entity given the dialog history and a KB.
//!
//! `P(e|H_e, K) = λ·P_kb(e) + (1-λ)·P_ctx(e)` where `P_kb` points into KB
//! entities (queried by the memory-refined vector) and `P_ctx` points into
//! history tokens (queried from dialog features only, so the context head's
//! distribution never depends on KB contents). The product of these
//! probabilities over agent-mentioned entities is the dialog likelihood that
//! rewards the deletion and completion stages.

use super::common::{ModelDims, TrainCfg, LIKELIHOOD_FLOOR};
use crate::data::{Dialog, Entity, KnowledgeBase, Mention, Ontology, Utterance};
use crate::nn::checkpoint::{load_checkpoint_meta, load_checkpoint_params, save_checkpoint, CheckpointMeta};
use crate::nn::encoder::add_scorer;
use crate::nn::params::{seeded_rng, sub_seed, Adam, Grads, Init, ParamId, ParamSet};
use crate::nn::{
    encode_dialog, encode_kb, entity_embeddings, memory_read, prepare_dialog, score_vec,
    DialogEncoderWeights, EncoderConfig, KbEncoderWeights, KbGraph, MemNetWeights, MlpScorer,
    NodeId, PreparedDialog, Tape, Vocab,
};
use crate::scalar::{lit, Scalar};
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;

/// One masked instance: the dialog history up to and including the masked
/// utterance, with the target mention replaced by `<mask>`.
#[derive(Debug, Clone)]
pub struct MaskedInstance {
    pub history: Vec<Utterance>,
    pub gold: Entity,
    pub utterance_index: usize,
}

/// One instance per agent-utterance entity occurrence.
pub fn mask_instances(dialog: &Dialog) -> Vec<MaskedInstance> {
    let mut out = Vec::new();
    for (i, utt) in dialog.agent_utterances() {
        for (mi, mention) in utt.mentions.iter().enumerate() {
            let mut history: Vec<Utterance> = dialog.utterances[..=i].to_vec();
            let masked = &mut history[i];
            let pseudo = Entity::new(crate::nn::vocab::MASK, mention.entity.etype.clone());
            for t in mention.start..mention.end {
                masked.tokens[t] = crate::nn::vocab::MASK.to_string();
            }
            // Collapse multi-token spans to a single mask token.
            if mention.end - mention.start > 1 {
                masked.tokens.drain(mention.start + 1..mention.end);
            }
            let shift = mention.end - mention.start - 1;
            masked.mentions = utt
                .mentions
                .iter()
                .enumerate()
                .map(|(mj, m)| {
                    let mut m = m.clone();
                    if mj == mi {
                        m = Mention {
                            start: mention.start,
                            end: mention.start + 1,
                            entity: pseudo.clone(),
                        };
                    } else if m.start > mention.start {
                        m.start -= shift;
                        m.end -= shift;
                    }
                    m
                })
                .collect();
            out.push(MaskedInstance {
                history,
                gold: mention.entity.clone(),
                utterance_index: i,
            });
        }
    }
    out
}

/// A masked instance prepared for encoding (markers inserted, ids resolved).
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub prepared: PreparedDialog,
    pub gold: Entity,
}

pub struct MemModel<S: Scalar> {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub n_relations: usize,
    pub seed: u64,
    pub params: ParamSet<S>,
    enc: DialogEncoderWeights,
    kb_enc: KbEncoderWeights,
    memnet: MemNetWeights,
    q0_w: ParamId,
    q0_b: ParamId,
    att_kb: ParamId,
    att_ctx: ParamId,
    gate: MlpScorer,
}

pub struct MemForward {
    pub prob: NodeId,
    pub floored: NodeId,
    pub p_kb: NodeId,
    pub p_ctx: NodeId,
    pub lambda: NodeId,
}

impl<S: Scalar> MemModel<S> {
    pub fn new(dims: ModelDims, vocab: Vocab, n_relations: usize, seed: u64) -> Self {
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
        let att_kb = params.add_matrix("att_kb.w", e, 2 * e, g, rng);
        let att_ctx = params.add_matrix("att_ctx.w", e, 2 * e, g, rng);
        let gate = add_scorer(&mut params, "gate", e, dims.mlp_hidden, rng);
        MemModel {
            dims,
            vocab,
            n_relations,
            seed,
            params,
            enc,
            kb_enc,
            memnet,
            q0_w,
            q0_b,
            att_kb,
            att_ctx,
            gate,
        }
    }

    pub fn prepare_instance(&self, inst: &MaskedInstance) -> PreparedInstance {
        let pseudo = Entity::new(crate::nn::vocab::MASK, inst.gold.etype.clone());
        PreparedInstance {
            prepared: prepare_dialog(&inst.history, &[&pseudo], &self.vocab),
            gold: inst.gold.clone(),
        }
    }

    pub fn encode_kb_graph(
        &self,
        tape: &mut Tape<S>,
        graph: &KbGraph,
    ) -> Result<NodeId> {
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

    /// Forward pass for one instance against an already-encoded KB.
    pub fn instance_forward(
        &self,
        tape: &mut Tape<S>,
        graph: &KbGraph,
        z: NodeId,
        inst: &PreparedInstance,
    ) -> MemForward {
        let enc = encode_dialog(tape, &self.params, &self.enc, &inst.prepared);
        let h_m = enc.token_feature(tape, inst.prepared.marker_pos[0]);
        let c_hm = tape.concat(enc.c, h_m);
        let q0 = tape.affine(&self.params, self.q0_w, Some(self.q0_b), c_hm);
        let read = memory_read(tape, &self.params, &self.memnet, z, q0);

        // KB pointer, queried by (q ∥ h_mask).
        let q_hm = tape.concat(read.q, h_m);
        let v_kb = tape.affine(&self.params, self.att_kb, None, q_hm);
        let kb_scores = tape.matvec(z, v_kb);
        let p_kb = tape.softmax(kb_scores);

        // Context pointer over history tokens, queried from dialog features
        // only (KB-independent by construction).
        let v_ctx = tape.affine(&self.params, self.att_ctx, None, c_hm);
        let ctx_scores = tape.matvec(enc.flat_tokens, v_ctx);
        let p_ctx = tape.softmax(ctx_scores);

        let gate_score = score_vec(tape, &self.params, &self.gate, read.q);
        let lambda = tape.sigmoid(gate_score);

        // P = λ·P_kb(gold) + (1-λ)·Σ_{tokens == gold} P_ctx.
        let kb_mass = match graph.entity_index(&inst.gold) {
            Some(idx) => tape.pick(p_kb, idx),
            None => tape.constant(S::zero()),
        };
        let gold_tok = self.vocab.known_token_id(&inst.gold.value);
        let ctx_positions: Vec<usize> = match gold_tok {
            Some(id) => inst
                .prepared
                .flat_index
                .iter()
                .enumerate()
                .filter(|(_, (_, _, tok))| *tok == id)
                .map(|(row, _)| row)
                .collect(),
            None => Vec::new(),
        };
        let ctx_mass = if ctx_positions.is_empty() {
            tape.constant(S::zero())
        } else {
            tape.pick_sum(p_ctx, ctx_positions)
        };
        let one_minus = tape.one_minus(lambda);
        let kb_part = tape.mul(lambda, kb_mass);
        let ctx_part = tape.mul(one_minus, ctx_mass);
        let prob = tape.add(kb_part, ctx_part);
        let floored = tape.max_const(prob, lit::<S>(LIKELIHOOD_FLOOR));
        MemForward {
            prob,
            floored,
            p_kb,
            p_ctx,
            lambda,
        }
    }

    /// Probability of the gold entity for a single instance and KB.
    pub fn mem_prob(&self, inst: &MaskedInstance, kb: &KnowledgeBase, ontology: &Ontology) -> Result<f64> {
        let graph = KbGraph::build(kb, ontology);
        let prepared = self.prepare_instance(inst);
        let mut tape = Tape::new();
        let z = self.encode_kb_graph(&mut tape, &graph)?;
        let fwd = self.instance_forward(&mut tape, &graph, z, &prepared);
        Ok(tape.scalar(fwd.prob).to_f64_lossy())
    }

    /// Log of the dialog likelihood `Σ_e log max(P(e|H_e,K), ε)`; the empty
    /// product is 0 in log space.
    pub fn dialog_log_likelihood(
        &self,
        instances: &[PreparedInstance],
        kb: &KnowledgeBase,
        ontology: &Ontology,
    ) -> Result<f64> {
        if instances.is_empty() {
            return Ok(0.0);
        }
        let graph = KbGraph::build(kb, ontology);
        let mut tape = Tape::new();
        let z = self.encode_kb_graph(&mut tape, &graph)?;
        let mut total = 0.0;
        for inst in instances {
            let fwd = self.instance_forward(&mut tape, &graph, z, inst);
            total += tape.scalar(fwd.floored).to_f64_lossy().ln();
        }
        Ok(total)
    }

    /// Likelihood (not log) for contract-level callers.
    pub fn dialog_likelihood(
        &self,
        instances: &[PreparedInstance],
        kb: &KnowledgeBase,
        ontology: &Ontology,
    ) -> Result<f64> {
        Ok(self.dialog_log_likelihood(instances, kb, ontology)?.exp())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            model_kind: "mem".into(),
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
        if meta.model_kind != "mem" {
            return Err(CoreError::Checkpoint(format!(
                "expected a mem checkpoint, found `{}`",
                meta.model_kind
            )));
        }
        let dims: ModelDims = serde_json::from_value(meta.dims["dims"].clone())
            .map_err(|e| CoreError::json("parsing checkpoint dims", e))?;
        let n_relations = meta.dims["n_relations"].as_u64().unwrap_or(0) as usize;
        let mut vocab = meta.vocab();
        vocab.reindex();
        let mut model = MemModel::new(dims, vocab, n_relations, meta.seed);
        load_checkpoint_params(path, &mut model.params)?;
        Ok(model)
    }
}

/// Dialog-side values of one instance under frozen weights: everything the
/// likelihood needs that does not depend on the KB.
#[derive(Debug, Clone)]
pub struct FrozenInstance {
    pub c: ndarray::Array1<f64>,
    pub h_m: ndarray::Array1<f64>,
    /// Context-copy mass already aggregated onto the gold surface form.
    pub ctx_gold_mass: f64,
    pub gold: Entity,
}

/// A dialog frozen for fast likelihood evaluation across KB variants.
#[derive(Debug, Clone)]
pub struct FrozenDialog {
    pub instances: Vec<FrozenInstance>,
}

impl<S: Scalar> MemModel<S> {
    /// Runs the dialog-side forward once per instance and records the
    /// KB-independent values.
    pub fn freeze(&self, instances: &[PreparedInstance]) -> FrozenDialog {
        let frozen = instances
            .iter()
            .map(|inst| {
                let mut tape = Tape::new();
                let enc = encode_dialog(&mut tape, &self.params, &self.enc, &inst.prepared);
                let h_m = enc.token_feature(&mut tape, inst.prepared.marker_pos[0]);
                let c_hm = tape.concat(enc.c, h_m);
                let v_ctx = tape.affine(&self.params, self.att_ctx, None, c_hm);
                let ctx_scores = tape.matvec(enc.flat_tokens, v_ctx);
                let p_ctx = tape.softmax(ctx_scores);
                let gold_tok = self.vocab.known_token_id(&inst.gold.value);
                let ctx_gold_mass = match gold_tok {
                    Some(id) => inst
                        .prepared
                        .flat_index
                        .iter()
                        .enumerate()
                        .filter(|(_, (_, _, tok))| *tok == id)
                        .map(|(row, _)| tape.value_v(p_ctx)[row].to_f64_lossy())
                        .sum(),
                    None => 0.0,
                };
                FrozenInstance {
                    c: tape.value_v(enc.c).mapv(|x| x.to_f64_lossy()),
                    h_m: tape.value_v(h_m).mapv(|x| x.to_f64_lossy()),
                    ctx_gold_mass,
                    gold: inst.gold.clone(),
                }
            })
            .collect();
        FrozenDialog { instances: frozen }
    }

    fn mat_f64(&self, id: ParamId) -> ndarray::Array2<f64> {
        self.params.matrix(id).mapv(|x| x.to_f64_lossy())
    }

    fn vec_f64(&self, id: ParamId) -> ndarray::Array1<f64> {
        self.params.vector(id).mapv(|x| x.to_f64_lossy())
    }

    /// Plain-ndarray KB encoding under frozen weights; mirrors the tape
    /// path op for op (a parity test pins them together).
    fn frozen_kb_features(&self, graph: &KbGraph) -> Result<ndarray::Array2<f64>> {
        let e = self.dims.emb;
        let tok_emb = self.mat_f64(self.enc.tok_emb);
        let tag_emb = self.mat_f64(self.enc.tag_emb);
        let mut z = ndarray::Array2::<f64>::zeros((graph.n_entities(), e));
        for (i, ent) in graph.entities.iter().enumerate() {
            let tok = self
                .vocab
                .known_token_id(&ent.value)
                .ok_or_else(|| CoreError::KbEntityOutOfVocab {
                    value: ent.value.clone(),
                    etype: ent.etype.clone(),
                })?;
            let mut row = z.row_mut(i);
            row += &tok_emb.row(tok);
            row += &tag_emb.row(self.vocab.tag_id(Some(&ent.etype)));
        }
        for layer in &self.kb_enc.layers {
            let w_self = self.mat_f64(layer.w_self);
            let mut acc = z.dot(&w_self.t());
            for (r, (dst, src)) in graph.edges.iter().enumerate() {
                if dst.is_empty() {
                    continue;
                }
                let w = self.mat_f64(layer.w_rel[r]);
                let mut gathered = ndarray::Array2::<f64>::zeros((src.len(), e));
                for (k, &s) in src.iter().enumerate() {
                    gathered.row_mut(k).assign(&z.row(s));
                }
                let messages = gathered.dot(&w.t());
                for (k, &d) in dst.iter().enumerate() {
                    let mut row = acc.row_mut(d);
                    row += &messages.row(k);
                }
            }
            z = acc.mapv(|x| x.max(0.0));
        }
        Ok(z)
    }

    /// Fast log-likelihood of a frozen dialog against an arbitrary KB.
    /// Matches the tape path bit for bit: same formulas, same weights.
    pub fn frozen_log_likelihood(
        &self,
        frozen: &FrozenDialog,
        kb: &KnowledgeBase,
        ontology: &Ontology,
    ) -> Result<f64> {
        if frozen.instances.is_empty() {
            return Ok(0.0);
        }
        let graph = KbGraph::build(kb, ontology);
        let z = self.frozen_kb_features(&graph)?;
        let q0_w = self.mat_f64(self.q0_w);
        let q0_b = self.vec_f64(self.q0_b);
        let att_kb = self.mat_f64(self.att_kb);
        let gate_w1 = self.mat_f64(self.gate.w1);
        let gate_b1 = self.vec_f64(self.gate.b1);
        let gate_w2 = self.vec_f64(self.gate.w2);
        let gate_b2 = self.vec_f64(self.gate.b2)[0];
        // Per-hop slot-side projections shared across instances.
        let hop_zs: Vec<ndarray::Array2<f64>> = self
            .memnet
            .hops
            .iter()
            .map(|h| z.dot(&self.mat_f64(h.w1z).t()))
            .collect();
        let mut total = 0.0;
        for inst in &frozen.instances {
            let c_hm = concat1(&inst.c, &inst.h_m);
            let mut q = q0_w.dot(&c_hm) + &q0_b;
            for (hop, zs) in self.memnet.hops.iter().zip(hop_zs.iter()) {
                let w1q = self.mat_f64(hop.w1q);
                let b1 = self.vec_f64(hop.b1);
                let qs = w1q.dot(&q) + &b1;
                let mut pre = zs.clone();
                for mut row in pre.rows_mut() {
                    row += &qs;
                }
                let h = pre.mapv(|x| x.max(0.0));
                let w2 = self.vec_f64(hop.w2);
                let b2 = self.vec_f64(hop.b2)[0];
                let scores = h.dot(&w2) + b2;
                let gamma = crate::nn::tape::softmax_stable(&scores);
                let o = z.t().dot(&gamma);
                q += &o;
            }
            let p_kb_gold = match graph.entity_index(&inst.gold) {
                Some(idx) => {
                    let q_hm = concat1(&q, &inst.h_m);
                    let v = att_kb.dot(&q_hm);
                    let scores = z.dot(&v);
                    let p = crate::nn::tape::softmax_stable(&scores);
                    p[idx]
                }
                None => 0.0,
            };
            let gate_hidden = (gate_w1.dot(&q) + &gate_b1).mapv(|x| x.max(0.0));
            let lambda = crate::nn::tape::sigmoid_scalar(gate_hidden.dot(&gate_w2) + gate_b2);
            let p = lambda * p_kb_gold + (1.0 - lambda) * inst.ctx_gold_mass;
            total += p.max(LIKELIHOOD_FLOOR).ln();
        }
        Ok(total)
    }
}

fn concat1(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
    let mut out = ndarray::Array1::zeros(a.len() + b.len());
    out.slice_mut(ndarray::s![..a.len()]).assign(a);
    out.slice_mut(ndarray::s![a.len()..]).assign(b);
    out
}

/// A training record: the per-dialog instances plus the KB graph of the
/// dialog's (post-insertion) snapshot.
pub struct MemTrainRecord {
    pub dialog_id: String,
    pub instances: Vec<PreparedInstance>,
    pub graph: KbGraph,
}

pub fn prepare_training<S: Scalar>(
    model: &MemModel<S>,
    pairs: &[(&Dialog, &KnowledgeBase)],
    ontology: &Ontology,
) -> Vec<MemTrainRecord> {
    pairs
        .iter()
        .map(|(dialog, kb)| MemTrainRecord {
            dialog_id: dialog.id.clone(),
            instances: mask_instances(dialog)
                .iter()
                .map(|i| model.prepare_instance(i))
                .collect(),
            graph: KbGraph::build(kb, ontology),
        })
        .collect()
}

/// Maximizes `Σ log P(gold)` with Adam. Returns per-epoch mean negative
/// log-probability; aborts if the loss turns non-finite.
pub fn train_mem<S: Scalar>(
    model: &mut MemModel<S>,
    records: &[MemTrainRecord],
    cfg: &TrainCfg,
) -> Result<Vec<(usize, f64)>> {
    let mut optimizer = Adam::new(cfg.lr, &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n_instances: usize = records.iter().map(|r| r.instances.len()).sum();
    if n_instances == 0 {
        return Err(CoreError::Diverged {
            stage: "train-mem".into(),
            reason: "no masked instances in the corpus".into(),
        });
    }
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut seeded_rng(sub_seed(cfg.seed, &format!("mem-epoch:{epoch}"))));
        let mut epoch_loss = 0.0;
        let mut pending = Grads::new(&model.params);
        let mut pending_n = 0usize;
        for chunk in order.chunks(8) {
            let results: Vec<(Grads<S>, f64, usize)> = chunk
                .par_iter()
                .map(|&ri| {
                    let record = &records[ri];
                    let mut tape = Tape::new();
                    let mut grads = Grads::new(&model.params);
                    let mut loss_sum = 0.0;
                    if record.instances.is_empty() {
                        return (grads, 0.0, 0);
                    }
                    let z = model
                        .encode_kb_graph(&mut tape, &record.graph)
                        .expect("training KBs are in-vocabulary");
                    for inst in &record.instances {
                        let fwd = model.instance_forward(&mut tape, &record.graph, z, inst);
                        let logp = tape.ln(fwd.floored);
                        let loss = tape.scale_const(logp, lit::<S>(-1.0));
                        loss_sum += tape.scalar(loss).to_f64_lossy();
                        tape.backward(loss, &model.params, &mut grads, lit::<S>(1.0 / cfg.batch as f64));
                    }
                    (grads, loss_sum, record.instances.len())
                })
                .collect();
            for (grads, loss, n) in results {
                epoch_loss += loss;
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
        let mean = epoch_loss / n_instances as f64;
        if !mean.is_finite() {
            return Err(CoreError::Diverged {
                stage: "train-mem".into(),
                reason: format!("mean loss {mean} at epoch {epoch}"),
            });
        }
        curve.push((epoch, mean));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Speaker;

    fn utt(speaker: Speaker, text: &str, mentions: Vec<(usize, &str, &str)>) -> Utterance {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let mentions = mentions
            .into_iter()
            .map(|(start, value, etype)| Mention {
                start,
                end: start + 1,
                entity: Entity::new(value, etype),
            })
            .collect();
        Utterance::new(speaker, tokens, mentions)
    }

    #[test]
    fn instance_per_agent_mention() {
        let d = Dialog {
            id: "d".into(),
            timestamp: 0,
            utterances: vec![
                utt(Speaker::User, "hi", vec![]),
                utt(
                    Speaker::Agent,
                    "try sala_thong rated 3_star",
                    vec![(1, "sala_thong", "restaurant"), (3, "3_star", "rating")],
                ),
            ],
        };
        let instances = mask_instances(&d);
        assert_eq!(instances.len(), 2);
        assert_eq!(instances[0].gold.value, "sala_thong");
        assert_eq!(instances[0].history.len(), 2);
        assert_eq!(instances[0].history[1].tokens[1], "<mask>");
        // The second instance masks the rating and keeps the name.
        assert_eq!(instances[1].history[1].tokens[1], "sala_thong");
        assert_eq!(instances[1].history[1].tokens[3], "<mask>");
    }

    #[test]
    fn user_only_mentions_yield_no_instances() {
        let d = Dialog {
            id: "d".into(),
            timestamp: 0,
            utterances: vec![
                utt(Speaker::User, "i want thai", vec![(2, "thai", "cuisine")]),
                utt(Speaker::Agent, "ok", vec![]),
            ],
        };
        assert!(mask_instances(&d).is_empty());
    }
}
