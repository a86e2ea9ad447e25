//! Shapes and helpers shared by the trainable models.

use crate::nn::{NodeId, Tape};
use crate::scalar::Scalar;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// Widths and depths common to every model of a run; serialized into each
/// checkpoint sidecar so models reload without the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub emb: usize,
    pub pos_dim: usize,
    pub pos_clip: i64,
    pub rgcn_layers: usize,
    pub rgcn_init_scale: f64,
    pub hops: usize,
    pub mlp_hidden: usize,
}

/// Sum of the given rows of a feature matrix (row encodings are the sum of
/// their entities' features).
pub fn sum_rows<S: Scalar>(tape: &mut Tape<S>, m: NodeId, idx: &[usize]) -> NodeId {
    let gathered = tape.gather_rows(m, idx.to_vec());
    let ones = tape.leaf_v(Array1::from_elem(idx.len(), S::one()));
    tape.rows_weighted_sum(gathered, ones)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Likelihood floor: a gold entity missing from both copy supports scores
/// zero probability; flooring keeps log-likelihoods finite and reward signs
/// well defined.
pub const LIKELIHOOD_FLOOR: f64 = 1e-8;
