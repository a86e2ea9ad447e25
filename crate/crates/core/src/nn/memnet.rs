//! Multi-hop memory reader over KB entity features.
//!
//! Each hop scores every memory slot with a hop-specific feed-forward
//! scorer applied to `(z_k ∥ q)`, pools the slots with the softmax weights,
//! and updates the query residually: `q^l = q^{l-1} + o^l`.

use super::params::{Init, ParamId, ParamSet};
use super::tape::{NodeId, Tape};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct MemNetWeights {
    pub hops: Vec<HopWeights>,
}

/// The concat scorer `w2ᵀ relu(W1z z_k + W1q q + b1) + b2` is the split form
/// of a two-layer MLP on `(z_k ∥ q)`; splitting lets the slot side run as
/// one matrix product per hop.
#[derive(Debug, Clone)]
pub struct HopWeights {
    pub w1z: ParamId,
    pub w1q: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MemNetWeights {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        emb: usize,
        hops: usize,
        hidden: usize,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = Init::Glorot { scale: 1.0 };
        let hops = (0..hops)
            .map(|l| HopWeights {
                w1z: params.add_matrix(format!("{prefix}.h{l}.w1z"), hidden, emb, g, rng),
                w1q: params.add_matrix(format!("{prefix}.h{l}.w1q"), hidden, emb, g, rng),
                b1: params.add_vector(format!("{prefix}.h{l}.b1"), hidden, Init::Zeros, rng),
                w2: params.add_vector(format!("{prefix}.h{l}.w2"), hidden, g, rng),
                b2: params.add_vector(format!("{prefix}.h{l}.b2"), 1, Init::Zeros, rng),
            })
            .collect();
        MemNetWeights { hops }
    }
}

pub struct MemoryRead {
    pub q: NodeId,
    /// Per-hop attention over the memory slots.
    pub attentions: Vec<NodeId>,
}

pub fn memory_read<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    w: &MemNetWeights,
    memory: NodeId,
    q0: NodeId,
) -> MemoryRead {
    assert!(
        tape.value_m(memory).nrows() > 0,
        "memory read over an empty memory"
    );
    let mut q = q0;
    let mut attentions = Vec::with_capacity(w.hops.len());
    for hop in &w.hops {
        let zs = tape.matmul_p(params, memory, hop.w1z);
        let qs = tape.affine(params, hop.w1q, Some(hop.b1), q);
        let pre = tape.add_broadcast_row(zs, qs);
        let h = tape.relu(pre);
        let w2 = tape.param_v(params, hop.w2);
        let scores = tape.matvec(h, w2);
        let b2 = tape.param_v(params, hop.b2);
        let ones = tape.leaf_v(ndarray::Array1::from_elem(
            tape.value_v(scores).len(),
            S::one(),
        ));
        let b2b = tape.mul_scalar(b2, ones);
        let scores = tape.add(scores, b2b);
        let gamma = tape.softmax(scores);
        let o = tape.rows_weighted_sum(memory, gamma);
        q = tape.add(q, o);
        attentions.push(gamma);
    }
    MemoryRead { q, attentions }
}
