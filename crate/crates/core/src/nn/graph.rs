//! Relational-graph KB encoder.
//!
//! The KB is viewed as a typed graph over its distinct entities; `L` graph
//! convolution layers propagate features along relations (and their
//! inverses, with separate weights) plus a self-loop:
//!
//! `z^l_e = relu( Σ_r Σ_{e'∈𝒩^r_e} W^l_r z^{l-1}_{e'} + W^l_0 z^{l-1}_e )`
//!
//! with no degree normalization and no bias, exactly the form the naive
//! per-node oracle in the test suite recomputes.

use super::params::{Init, ParamId, ParamSet};
use super::tape::{NodeId, Tape};
use super::vocab::Vocab;
use crate::data::{Entity, KnowledgeBase, Ontology};
use crate::scalar::Scalar;
use crate::{CoreError, Result};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Index structure of a KB snapshot's relational graph.
#[derive(Debug, Clone)]
pub struct KbGraph {
    pub entities: Vec<Entity>,
    pub index: BTreeMap<Entity, usize>,
    /// Per directed relation id (forward relations first, then inverses):
    /// parallel `(dst, src)` edge lists.
    pub edges: Vec<(Vec<usize>, Vec<usize>)>,
    /// Entity indices of each row (head plus field values), row order
    /// matching `kb.rows`.
    pub row_entities: Vec<Vec<usize>>,
    pub n_relations: usize,
}

impl KbGraph {
    pub fn build(kb: &KnowledgeBase, ontology: &Ontology) -> KbGraph {
        let mut entities: Vec<Entity> = kb.entities().into_iter().cloned().collect();
        entities.sort();
        let index: BTreeMap<Entity, usize> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        let n_rel = ontology.relation_types.len();
        let rel_id: BTreeMap<&str, usize> = ontology
            .relation_types
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.as_str(), i))
            .collect();
        let mut edges: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); 2 * n_rel];
        let mut row_entities = Vec::with_capacity(kb.rows.len());
        for row in &kb.rows {
            let h = index[&row.head];
            let mut row_idx = vec![h];
            for (rel, tail) in &row.fields {
                let t = index[tail];
                row_idx.push(t);
                if let Some(&r) = rel_id.get(rel.as_str()) {
                    // Head receives from tail under the forward relation,
                    // tail receives from head under the inverse.
                    edges[r].0.push(h);
                    edges[r].1.push(t);
                    edges[n_rel + r].0.push(t);
                    edges[n_rel + r].1.push(h);
                }
            }
            row_entities.push(row_idx);
        }
        KbGraph {
            entities,
            index,
            edges,
            row_entities,
            n_relations: n_rel,
        }
    }

    pub fn entity_index(&self, e: &Entity) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }
}

#[derive(Debug, Clone)]
pub struct KbEncoderWeights {
    pub layers: Vec<RgcnLayerWeights>,
    pub emb: usize,
}

#[derive(Debug, Clone)]
pub struct RgcnLayerWeights {
    pub w_self: ParamId,
    /// One weight per directed relation (forward then inverse).
    pub w_rel: Vec<ParamId>,
}

impl KbEncoderWeights {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        emb: usize,
        layers: usize,
        n_relations: usize,
        init_scale: f64,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = Init::Glorot { scale: init_scale };
        let layers = (0..layers)
            .map(|l| RgcnLayerWeights {
                w_self: params.add_matrix(format!("{prefix}.l{l}.self"), emb, emb, init, rng),
                w_rel: (0..2 * n_relations)
                    .map(|r| {
                        params.add_matrix(format!("{prefix}.l{l}.rel{r}"), emb, emb, init, rng)
                    })
                    .collect(),
            })
            .collect();
        KbEncoderWeights { layers, emb }
    }
}

/// Produces the initial embedding matrix for the graph's entities (token
/// embedding plus type tag embedding, matching the dialog featurizer).
///
/// Fails if a KB value is outside the vocabulary; the vocabulary is built
/// from ontology plus corpus, so this indicates a KB/ontology mismatch.
pub fn entity_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    tok_emb: ParamId,
    tag_emb: ParamId,
    graph: &KbGraph,
    vocab: &Vocab,
) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(graph.entities.len());
    for e in &graph.entities {
        let token = vocab
            .known_token_id(&e.value)
            .ok_or_else(|| CoreError::KbEntityOutOfVocab {
                value: e.value.clone(),
                etype: e.etype.clone(),
            })?;
        let te = tape.embed_row(params, tok_emb, token);
        let ge = tape.embed_row(params, tag_emb, vocab.tag_id(Some(&e.etype)));
        rows.push(tape.add(te, ge));
    }
    Ok(tape.stack_rows(rows))
}

/// Runs the graph convolution stack and returns the final entity features
/// (one row per graph entity).
pub fn encode_kb<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    w: &KbEncoderWeights,
    graph: &KbGraph,
    z0: NodeId,
) -> NodeId {
    let mut z = z0;
    for layer in &w.layers {
        let mut acc = tape.matmul_p(params, z, layer.w_self);
        for (r, (dst, src)) in graph.edges.iter().enumerate() {
            if dst.is_empty() {
                continue;
            }
            let gathered = tape.gather_rows(z, src.clone());
            let messages = tape.matmul_p(params, gathered, layer.w_rel[r]);
            acc = tape.scatter_add_rows(acc, messages, dst.clone());
        }
        z = tape.relu(acc);
    }
    z
}
