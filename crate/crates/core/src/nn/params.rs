//! Named parameter storage, initialization, gradients, and Adam.

use crate::scalar::{lit, Scalar};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Tensor<S: Scalar> {
    V(Array1<S>),
    M(Array2<S>),
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros_like(&self) -> Tensor<S> {
        match self {
            Tensor::V(v) => Tensor::V(Array1::zeros(v.len())),
            Tensor::M(m) => Tensor::M(Array2::zeros(m.dim())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::V(v) => v.len(),
            Tensor::M(m) => m.len(),
        }
    }
}

/// Initialization schemes. Embeddings use the flat uniform range; dense maps
/// use fan-based scaling with an optional multiplier for graph layers whose
/// effective fan-in grows with node degree.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Uniform(f64),
    Glorot { scale: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    tensors: Vec<Tensor<S>>,
    names: Vec<String>,
    by_name: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            names: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add_matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = match init {
            Init::Zeros => 0.0,
            Init::Uniform(a) => a,
            Init::Glorot { scale } => scale * (6.0 / (rows + cols) as f64).sqrt(),
        };
        let m = Array2::from_shape_fn((rows, cols), |_| lit::<S>(rng.gen_range(-a..=a)));
        self.push(name.into(), Tensor::M(m))
    }

    pub fn add_vector(
        &mut self,
        name: impl Into<String>,
        len: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = match init {
            Init::Zeros => 0.0,
            Init::Uniform(a) => a,
            Init::Glorot { scale } => scale * (6.0 / (len + 1) as f64).sqrt(),
        };
        let v = if a == 0.0 {
            Array1::zeros(len)
        } else {
            Array1::from_shape_fn(len, |_| lit::<S>(rng.gen_range(-a..=a)))
        };
        self.push(name.into(), Tensor::V(v))
    }

    fn push(&mut self, name: String, t: Tensor<S>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.tensors.push(t);
        self.names.push(name.clone());
        let id = ParamId(self.tensors.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn matrix(&self, id: ParamId) -> &Array2<S> {
        match &self.tensors[id.0] {
            Tensor::M(m) => m,
            Tensor::V(_) => panic!("parameter {} is not a matrix", self.names[id.0]),
        }
    }

    pub fn vector(&self, id: ParamId) -> &Array1<S> {
        match &self.tensors[id.0] {
            Tensor::V(v) => v,
            Tensor::M(_) => panic!("parameter {} is not a vector", self.names[id.0]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat f64 view in declaration order, used by checkpoints and the
    /// finite-difference checks.
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            match t {
                Tensor::V(v) => out.extend(v.iter().map(|x| x.to_f64_lossy())),
                Tensor::M(m) => out.extend(m.iter().map(|x| x.to_f64_lossy())),
            }
        }
        out
    }

    pub fn load_flat_f64(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in &mut self.tensors {
            match t {
                Tensor::V(v) => {
                    for x in v.iter_mut() {
                        *x = S::from_f64_lossy(flat[at]);
                        at += 1;
                    }
                }
                Tensor::M(m) => {
                    for x in m.iter_mut() {
                        *x = S::from_f64_lossy(flat[at]);
                        at += 1;
                    }
                }
            }
        }
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }
}

/// Per-parameter gradient accumulator, lazily allocated.
pub struct Grads<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        Grads {
            slots: (0..params.len()).map(|_| None).collect(),
        }
    }

    pub fn matrix_mut(&mut self, params: &ParamSet<S>, id: ParamId) -> &mut Array2<S> {
        let slot = &mut self.slots[id.0];
        if slot.is_none() {
            *slot = Some(params.tensor(id).zeros_like());
        }
        match slot.as_mut().unwrap() {
            Tensor::M(m) => m,
            Tensor::V(_) => panic!("gradient shape mismatch"),
        }
    }

    pub fn vector_mut(&mut self, params: &ParamSet<S>, id: ParamId) -> &mut Array1<S> {
        let slot = &mut self.slots[id.0];
        if slot.is_none() {
            *slot = Some(params.tensor(id).zeros_like());
        }
        match slot.as_mut().unwrap() {
            Tensor::V(v) => v,
            Tensor::M(_) => panic!("gradient shape mismatch"),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    /// Adds another accumulator into this one (fixed order for determinism).
    pub fn merge(&mut self, other: Grads<S>) {
        for (mine, theirs) in self.slots.iter_mut().zip(other.slots.into_iter()) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (Some(a), Some(b)) => match (a, b) {
                    (Tensor::V(x), Tensor::V(y)) => *x += &y,
                    (Tensor::M(x), Tensor::M(y)) => *x += &y,
                    _ => panic!("gradient shape mismatch in merge"),
                },
                (None, some) => *mine = some,
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for slot in self.slots.iter().flatten() {
            match slot {
                Tensor::V(v) => acc += v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>(),
                Tensor::M(m) => acc += m.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>(),
            }
        }
        acc.sqrt()
    }
}

/// Adam with the usual defaults; learning rate comes from the run config.
pub struct Adam<S: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, params: &ParamSet<S>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..params.len()).map(|_| None).collect(),
            v: (0..params.len()).map(|_| None).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &Grads<S>) {
        self.t += 1;
        let b1 = lit::<S>(self.beta1);
        let b2 = lit::<S>(self.beta2);
        let one = S::one();
        let bc1 = lit::<S>(1.0 - self.beta1.powi(self.t));
        let bc2 = lit::<S>(1.0 - self.beta2.powi(self.t));
        let lr = lit::<S>(self.lr);
        let eps = lit::<S>(self.eps);

        for idx in 0..params.len() {
            let Some(g) = grads.slots[idx].as_ref() else {
                continue;
            };
            if self.m[idx].is_none() {
                self.m[idx] = Some(g.zeros_like());
                self.v[idx] = Some(g.zeros_like());
            }
            let m = self.m[idx].as_mut().unwrap();
            let v = self.v[idx].as_mut().unwrap();
            let p = &mut params.tensors[idx];
            match (p, g, m, v) {
                (Tensor::V(p), Tensor::V(g), Tensor::V(m), Tensor::V(v)) => {
                    for ((pi, &gi), (mi, vi)) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                (Tensor::M(p), Tensor::M(g), Tensor::M(m), Tensor::M(v)) => {
                    for ((pi, &gi), (mi, vi)) in
                        p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                _ => panic!("optimizer state shape mismatch"),
            }
        }
    }
}

/// ChaCha RNG from a bare seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable named sub-seed derivation: every stage draws its randomness from
/// `sub_seed(root, "stage-name")` so stages are reproducible in isolation.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
