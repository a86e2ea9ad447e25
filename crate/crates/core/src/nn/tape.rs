//! Reverse-mode autodiff over small dense vectors and matrices.
//!
//! Values are computed eagerly as nodes are appended; `backward` replays the
//! tape in reverse, accumulating gradients for intermediate nodes and for
//! parameters (referenced by id, never copied for matrices). One tape per
//! training instance keeps the memory profile flat and lets instances run on
//! worker threads against a shared immutable [`ParamSet`].

use super::params::{Grads, ParamId, ParamSet};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum Value<S: Scalar> {
    V(Array1<S>),
    M(Array2<S>),
}

impl<S: Scalar> Value<S> {
    pub fn as_v(&self) -> &Array1<S> {
        match self {
            Value::V(v) => v,
            Value::M(_) => panic!("expected vector value"),
        }
    }

    pub fn as_m(&self) -> &Array2<S> {
        match self {
            Value::M(m) => m,
            Value::V(_) => panic!("expected matrix value"),
        }
    }

    fn add_assign(&mut self, other: &Value<S>) {
        match (self, other) {
            (Value::V(a), Value::V(b)) => *a += b,
            (Value::M(a), Value::M(b)) => *a += b,
            _ => panic!("gradient shape mismatch"),
        }
    }
}

pub(crate) enum Op<S: Scalar> {
    /// Constant input; no gradient flows out.
    Leaf,
    /// Copy of a vector parameter.
    ParamV(ParamId),
    /// Embedding row lookup.
    EmbedRow { table: ParamId, row: usize },
    /// `W x (+ b)` with a matrix parameter.
    AffineV {
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    },
    /// `X · Wᵀ` for a batch of row vectors.
    MatMulP { x: NodeId, w: ParamId },
    /// `m · v` (matrix node × vector node).
    MatVec { m: NodeId, v: NodeId },
    /// `mᵀ w`: weighted sum of the rows of `m`.
    RowsWeightedSum { m: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    OneMinus { a: NodeId },
    Concat { a: NodeId, b: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    Ln { a: NodeId },
    MaxConst { a: NodeId, c: S },
    ScaleConst { a: NodeId, c: S },
    MulScalar { s: NodeId, v: NodeId },
    StackRows { rows: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    /// Fused GRU step; gate activations are cached for the backward pass.
    GruStep {
        w: GruWeights,
        x: NodeId,
        h: NodeId,
        r: Array1<S>,
        z: Array1<S>,
        n: Array1<S>,
    },
    GatherRows { m: NodeId, idx: Vec<usize> },
    ScatterAddRows {
        base: NodeId,
        add: NodeId,
        idx: Vec<usize>,
    },
    PickRow { m: NodeId, row: usize },
    Pick { v: NodeId, i: usize },
    PickSum { v: NodeId, idx: Vec<usize> },
    AddBroadcastRow { m: NodeId, v: NodeId },
}

struct Node<S: Scalar> {
    value: Value<S>,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: Value<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value<S> {
        &self.nodes[id.0].value
    }

    pub fn value_v(&self, id: NodeId) -> &Array1<S> {
        self.nodes[id.0].value.as_v()
    }

    pub fn value_m(&self, id: NodeId) -> &Array2<S> {
        self.nodes[id.0].value.as_m()
    }

    pub fn scalar(&self, id: NodeId) -> S {
        let v = self.value_v(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn leaf_v(&mut self, v: Array1<S>) -> NodeId {
        self.push(Value::V(v), Op::Leaf)
    }

    pub fn leaf_m(&mut self, m: Array2<S>) -> NodeId {
        self.push(Value::M(m), Op::Leaf)
    }

    pub fn param_v(&mut self, params: &ParamSet<S>, p: ParamId) -> NodeId {
        let v = params.vector(p).clone();
        self.push(Value::V(v), Op::ParamV(p))
    }

    pub fn embed_row(&mut self, params: &ParamSet<S>, table: ParamId, row: usize) -> NodeId {
        let v = params.matrix(table).row(row).to_owned();
        self.push(Value::V(v), Op::EmbedRow { table, row })
    }

    pub fn affine(
        &mut self,
        params: &ParamSet<S>,
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    ) -> NodeId {
        let mut y = params.matrix(w).dot(self.value_v(x));
        if let Some(b) = b {
            y += params.vector(b);
        }
        self.push(Value::V(y), Op::AffineV { w, b, x })
    }

    pub fn matmul_p(&mut self, params: &ParamSet<S>, x: NodeId, w: ParamId) -> NodeId {
        let y = self.value_m(x).dot(&params.matrix(w).t());
        self.push(Value::M(y), Op::MatMulP { x, w })
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let y = self.value_m(m).dot(self.value_v(v));
        self.push(Value::V(y), Op::MatVec { m, v })
    }

    pub fn rows_weighted_sum(&mut self, m: NodeId, w: NodeId) -> NodeId {
        let y = self.value_m(m).t().dot(self.value_v(w));
        self.push(Value::V(y), Op::RowsWeightedSum { m, w })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = match (self.value(a), self.value(b)) {
            (Value::V(x), Value::V(z)) => Value::V(x + z),
            (Value::M(x), Value::M(z)) => Value::M(x + z),
            _ => panic!("add shape mismatch"),
        };
        self.push(y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = Value::V(self.value_v(a) * self.value_v(b));
        self.push(y, Op::Mul { a, b })
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let y = self.value_v(a).mapv(|x| S::one() - x);
        self.push(Value::V(y), Op::OneMinus { a })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let x = self.value_v(a);
        let z = self.value_v(b);
        let mut y = Array1::zeros(x.len() + z.len());
        y.slice_mut(ndarray::s![..x.len()]).assign(x);
        y.slice_mut(ndarray::s![x.len()..]).assign(z);
        self.push(Value::V(y), Op::Concat { a, b })
    }

    pub fn concat3(&mut self, a: NodeId, b: NodeId, c: NodeId) -> NodeId {
        let ab = self.concat(a, b);
        self.concat(ab, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let y = self.map_value(a, |x| S::one() / (S::one() + (-x).exp()));
        self.push(y, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let y = self.map_value(a, |x| x.tanh());
        self.push(y, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let y = self.map_value(a, |x| if x > S::zero() { x } else { S::zero() });
        self.push(y, Op::Relu { a })
    }

    fn map_value(&self, a: NodeId, f: impl Fn(S) -> S) -> Value<S> {
        match self.value(a) {
            Value::V(v) => Value::V(v.mapv(&f)),
            Value::M(m) => Value::M(m.mapv(&f)),
        }
    }

    /// Numerically stable softmax over a vector node.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value_v(a);
        let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
        let exps = x.mapv(|v| (v - max).exp());
        let sum = exps.sum();
        let y = exps.mapv(|v| v / sum);
        self.push(Value::V(y), Op::Softmax { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let y = self.value_v(a).mapv(|x| x.ln());
        self.push(Value::V(y), Op::Ln { a })
    }

    pub fn max_const(&mut self, a: NodeId, c: S) -> NodeId {
        let y = self.value_v(a).mapv(|x| x.max(c));
        self.push(Value::V(y), Op::MaxConst { a, c })
    }

    pub fn scale_const(&mut self, a: NodeId, c: S) -> NodeId {
        let y = match self.value(a) {
            Value::V(v) => Value::V(v.mapv(|x| x * c)),
            Value::M(m) => Value::M(m.mapv(|x| x * c)),
        };
        self.push(y, Op::ScaleConst { a, c })
    }

    /// `s[0] * v` with a length-1 scalar node.
    pub fn mul_scalar(&mut self, s: NodeId, v: NodeId) -> NodeId {
        let c = self.scalar(s);
        let y = self.value_v(v).mapv(|x| x * c);
        self.push(Value::V(y), Op::MulScalar { s, v })
    }

    pub fn stack_rows(&mut self, rows: Vec<NodeId>) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows on empty list");
        let d = self.value_v(rows[0]).len();
        let mut m = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).assign(self.value_v(*r));
        }
        self.push(Value::M(m), Op::StackRows { rows })
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows on empty list");
        let d = self.value_m(parts[0]).ncols();
        let n: usize = parts.iter().map(|p| self.value_m(*p).nrows()).sum();
        let mut m = Array2::zeros((n, d));
        let mut at = 0;
        for p in &parts {
            let pm = self.value_m(*p);
            m.slice_mut(ndarray::s![at..at + pm.nrows(), ..]).assign(pm);
            at += pm.nrows();
        }
        self.push(Value::M(m), Op::ConcatRows { parts })
    }

    pub fn gather_rows(&mut self, m: NodeId, idx: Vec<usize>) -> NodeId {
        let src = self.value_m(m);
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&src.row(r));
        }
        self.push(Value::M(out), Op::GatherRows { m, idx })
    }

    pub fn scatter_add_rows(&mut self, base: NodeId, add: NodeId, idx: Vec<usize>) -> NodeId {
        let mut out = self.value_m(base).clone();
        let add_m = self.value_m(add);
        for (i, &r) in idx.iter().enumerate() {
            let mut row = out.row_mut(r);
            row += &add_m.row(i);
        }
        self.push(Value::M(out), Op::ScatterAddRows { base, add, idx })
    }

    pub fn pick_row(&mut self, m: NodeId, row: usize) -> NodeId {
        let v = self.value_m(m).row(row).to_owned();
        self.push(Value::V(v), Op::PickRow { m, row })
    }

    pub fn pick(&mut self, v: NodeId, i: usize) -> NodeId {
        let y = Array1::from_elem(1, self.value_v(v)[i]);
        self.push(Value::V(y), Op::Pick { v, i })
    }

    pub fn pick_sum(&mut self, v: NodeId, idx: Vec<usize>) -> NodeId {
        let src = self.value_v(v);
        let mut acc = S::zero();
        for &i in &idx {
            acc += src[i];
        }
        self.push(Value::V(Array1::from_elem(1, acc)), Op::PickSum { v, idx })
    }

    pub fn add_broadcast_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let mm = self.value_m(m);
        let vv = self.value_v(v);
        let mut out = mm.clone();
        for mut row in out.rows_mut() {
            row += vv;
        }
        self.push(Value::M(out), Op::AddBroadcastRow { m, v })
    }

    /// Constant scalar node, convenient when assembling losses.
    pub fn constant(&mut self, c: S) -> NodeId {
        self.leaf_v(Array1::from_elem(1, c))
    }

    /// Runs reverse accumulation from `loss` (a length-1 node) with the given
    /// seed, writing parameter gradients into `grads`.
    pub fn backward(&mut self, loss: NodeId, params: &ParamSet<S>, grads: &mut Grads<S>, seed: S) {
        let n = self.nodes.len();
        let mut node_grads: Vec<Option<Value<S>>> = (0..n).map(|_| None).collect();
        node_grads[loss.0] = Some(Value::V(Array1::from_elem(1, seed)));

        for i in (0..n).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            // Split borrows: read this node, write upstream grads.
            let (value, op) = {
                let node = &self.nodes[i];
                (&node.value, &node.op)
            };
            let mut bump = |id: NodeId, delta: Value<S>| {
                match &mut node_grads[id.0] {
                    Some(slot) => slot.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match op {
                Op::Leaf => {}
                Op::ParamV(p) => *grads.vector_mut(params, *p) += g.as_v(),
                Op::EmbedRow { table, row } => {
                    let mut gm = grads.matrix_mut(params, *table).row_mut(*row);
                    gm += g.as_v();
                }
                Op::AffineV { w, b, x } => {
                    let gv = g.as_v();
                    let xv = self.nodes[x.0].value.as_v();
                    {
                        let gw = grads.matrix_mut(params, *w);
                        for (r, &gr) in gv.iter().enumerate() {
                            gw.row_mut(r).scaled_add(gr, xv);
                        }
                    }
                    if let Some(b) = b {
                        *grads.vector_mut(params, *b) += gv;
                    }
                    let gx = params.matrix(*w).t().dot(gv);
                    bump(*x, Value::V(gx));
                }
                Op::MatMulP { x, w } => {
                    let gm = g.as_m();
                    let xm = self.nodes[x.0].value.as_m();
                    {
                        let mut gw = grads.matrix_mut(params, *w);
                        general_mat_mul(S::one(), &gm.t(), xm, S::one(), &mut gw);
                    }
                    let gx = gm.dot(params.matrix(*w));
                    bump(*x, Value::M(gx));
                }
                Op::MatVec { m, v } => {
                    let gv = g.as_v();
                    let mv = self.nodes[m.0].value.as_m();
                    let vv = self.nodes[v.0].value.as_v();
                    let mut gm = Array2::zeros(mv.dim());
                    for (r, &gr) in gv.iter().enumerate() {
                        gm.row_mut(r).scaled_add(gr, vv);
                    }
                    bump(*m, Value::M(gm));
                    bump(*v, Value::V(mv.t().dot(gv)));
                }
                Op::RowsWeightedSum { m, w } => {
                    let gv = g.as_v();
                    let mv = self.nodes[m.0].value.as_m();
                    let wv = self.nodes[w.0].value.as_v();
                    let mut gm = Array2::zeros(mv.dim());
                    for (r, &wr) in wv.iter().enumerate() {
                        gm.row_mut(r).scaled_add(wr, gv);
                    }
                    bump(*m, Value::M(gm));
                    bump(*w, Value::V(mv.dot(gv)));
                }
                Op::Add { a, b } => {
                    bump(*a, g.clone());
                    bump(*b, g);
                }
                Op::Mul { a, b } => {
                    let gv = g.as_v();
                    let av = self.nodes[a.0].value.as_v();
                    let bv = self.nodes[b.0].value.as_v();
                    bump(*a, Value::V(gv * bv));
                    bump(*b, Value::V(gv * av));
                }
                Op::OneMinus { a } => {
                    bump(*a, Value::V(g.as_v().mapv(|x| -x)));
                }
                Op::Concat { a, b } => {
                    let gv = g.as_v();
                    let na = self.nodes[a.0].value.as_v().len();
                    bump(*a, Value::V(gv.slice(ndarray::s![..na]).to_owned()));
                    bump(*b, Value::V(gv.slice(ndarray::s![na..]).to_owned()));
                }
                Op::Sigmoid { a } => {
                    bump(*a, elementwise_grad(&g, value, |y| y * (S::one() - y)));
                }
                Op::Tanh { a } => {
                    bump(*a, elementwise_grad(&g, value, |y| S::one() - y * y));
                }
                Op::Relu { a } => {
                    bump(
                        *a,
                        elementwise_grad(&g, value, |y| if y > S::zero() { S::one() } else { S::zero() }),
                    );
                }
                Op::Softmax { a } => {
                    let gv = g.as_v();
                    let y = value.as_v();
                    let dot = gv.dot(y);
                    let gx = Array1::from_iter(
                        y.iter().zip(gv.iter()).map(|(&yi, &gi)| yi * (gi - dot)),
                    );
                    bump(*a, Value::V(gx));
                }
                Op::Ln { a } => {
                    let gv = g.as_v();
                    let xv = self.nodes[a.0].value.as_v();
                    bump(*a, Value::V(gv / xv));
                }
                Op::MaxConst { a, c } => {
                    let gv = g.as_v();
                    let xv = self.nodes[a.0].value.as_v();
                    let gx = Array1::from_iter(
                        xv.iter()
                            .zip(gv.iter())
                            .map(|(&x, &gi)| if x > *c { gi } else { S::zero() }),
                    );
                    bump(*a, Value::V(gx));
                }
                Op::ScaleConst { a, c } => {
                    let gx = match &g {
                        Value::V(v) => Value::V(v.mapv(|x| x * *c)),
                        Value::M(m) => Value::M(m.mapv(|x| x * *c)),
                    };
                    bump(*a, gx);
                }
                Op::MulScalar { s, v } => {
                    let gv = g.as_v();
                    let sv = self.nodes[s.0].value.as_v()[0];
                    let vv = self.nodes[v.0].value.as_v();
                    bump(*s, Value::V(Array1::from_elem(1, gv.dot(vv))));
                    bump(*v, Value::V(gv.mapv(|x| x * sv)));
                }
                Op::StackRows { rows } => {
                    let gm = g.as_m();
                    for (r, id) in rows.iter().enumerate() {
                        bump(*id, Value::V(gm.row(r).to_owned()));
                    }
                }
                Op::ConcatRows { parts } => {
                    let gm = g.as_m();
                    let mut at = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.as_m().nrows();
                        bump(
                            *p,
                            Value::M(gm.slice(ndarray::s![at..at + rows, ..]).to_owned()),
                        );
                        at += rows;
                    }
                }
                Op::GruStep { w, x, h, r, z, n } => {
                    let gv = g.as_v();
                    let xv = self.nodes[x.0].value.as_v();
                    let hv = self.nodes[h.0].value.as_v();
                    let one = S::one();
                    // h' = (1-z)∘n + z∘h
                    let dz = Array1::from_iter(
                        gv.iter()
                            .zip(hv.iter().zip(n.iter()))
                            .map(|(&gi, (&hi, &ni))| gi * (hi - ni)),
                    );
                    let dn = Array1::from_iter(
                        gv.iter().zip(z.iter()).map(|(&gi, &zi)| gi * (one - zi)),
                    );
                    let mut dh = Array1::from_iter(
                        gv.iter().zip(z.iter()).map(|(&gi, &zi)| gi * zi),
                    );
                    let mut dx = Array1::zeros(xv.len());

                    // n = tanh(Wn x + Un (r∘h) + bn)
                    let dn_pre =
                        Array1::from_iter(dn.iter().zip(n.iter()).map(|(&d, &ni)| d * (one - ni * ni)));
                    accumulate_affine_grads(params, grads, w.w_n, Some(w.b_n), &dn_pre, xv, &mut dx);
                    let rh = Array1::from_iter(r.iter().zip(hv.iter()).map(|(&ri, &hi)| ri * hi));
                    let mut d_rh = Array1::zeros(hv.len());
                    accumulate_affine_grads(params, grads, w.u_n, None, &dn_pre, &rh, &mut d_rh);
                    let dr = Array1::from_iter(
                        d_rh.iter().zip(hv.iter()).map(|(&d, &hi)| d * hi),
                    );
                    for ((dhi, &d), &ri) in dh.iter_mut().zip(d_rh.iter()).zip(r.iter()) {
                        *dhi += d * ri;
                    }

                    // z = σ(Wz x + Uz h + bz)
                    let dz_pre = Array1::from_iter(
                        dz.iter().zip(z.iter()).map(|(&d, &zi)| d * zi * (one - zi)),
                    );
                    accumulate_affine_grads(params, grads, w.w_z, Some(w.b_z), &dz_pre, xv, &mut dx);
                    accumulate_affine_grads(params, grads, w.u_z, None, &dz_pre, hv, &mut dh);

                    // r = σ(Wr x + Ur h + br)
                    let dr_pre = Array1::from_iter(
                        dr.iter().zip(r.iter()).map(|(&d, &ri)| d * ri * (one - ri)),
                    );
                    accumulate_affine_grads(params, grads, w.w_r, Some(w.b_r), &dr_pre, xv, &mut dx);
                    accumulate_affine_grads(params, grads, w.u_r, None, &dr_pre, hv, &mut dh);

                    bump(*x, Value::V(dx));
                    bump(*h, Value::V(dh));
                }
                Op::GatherRows { m, idx } => {
                    let gm = g.as_m();
                    let src_dim = self.nodes[m.0].value.as_m().dim();
                    let mut gsrc = Array2::zeros(src_dim);
                    for (i, &r) in idx.iter().enumerate() {
                        let mut row = gsrc.row_mut(r);
                        row += &gm.row(i);
                    }
                    bump(*m, Value::M(gsrc));
                }
                Op::ScatterAddRows { base, add, idx } => {
                    let gm = g.as_m();
                    bump(*base, Value::M(gm.clone()));
                    let mut gadd = Array2::zeros(self.nodes[add.0].value.as_m().dim());
                    for (i, &r) in idx.iter().enumerate() {
                        gadd.row_mut(i).assign(&gm.row(r));
                    }
                    bump(*add, Value::M(gadd));
                }
                Op::PickRow { m, row } => {
                    let gv = g.as_v();
                    let dim = self.nodes[m.0].value.as_m().dim();
                    let mut gm = Array2::zeros(dim);
                    gm.row_mut(*row).assign(gv);
                    bump(*m, Value::M(gm));
                }
                Op::Pick { v, i } => {
                    let n = self.nodes[v.0].value.as_v().len();
                    let mut gv = Array1::zeros(n);
                    gv[*i] = g.as_v()[0];
                    bump(*v, Value::V(gv));
                }
                Op::PickSum { v, idx } => {
                    let n = self.nodes[v.0].value.as_v().len();
                    let gs = g.as_v()[0];
                    let mut gv = Array1::zeros(n);
                    for &i in idx {
                        gv[i] += gs;
                    }
                    bump(*v, Value::V(gv));
                }
                Op::AddBroadcastRow { m, v } => {
                    let gm = g.as_m();
                    let mut gv = Array1::zeros(self.nodes[v.0].value.as_v().len());
                    for row in gm.rows() {
                        gv += &row;
                    }
                    bump(*m, Value::M(gm.clone()));
                    bump(*v, Value::V(gv));
                }
            }
        }
    }
}

fn elementwise_grad<S: Scalar>(
    g: &Value<S>,
    out: &Value<S>,
    dydx_from_y: impl Fn(S) -> S,
) -> Value<S> {
    match (g, out) {
        (Value::V(gv), Value::V(y)) => Value::V(Array1::from_iter(
            gv.iter().zip(y.iter()).map(|(&gi, &yi)| gi * dydx_from_y(yi)),
        )),
        (Value::M(gm), Value::M(y)) => {
            let mut out = gm.clone();
            out.zip_mut_with(y, |gi, &yi| *gi *= dydx_from_y(yi));
            Value::M(out)
        }
        _ => panic!("activation gradient shape mismatch"),
    }
}

/// A GRU cell over tape nodes: weights are six matrices and three biases.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
}

/// One GRU step, fused into a single tape node:
/// `r = σ(Wr x + Ur h + br)`, `z = σ(Wz x + Uz h + bz)`,
/// `n = tanh(Wn x + Un (r∘h) + bn)`, `h' = (1 - z)∘n + z∘h`.
pub fn gru_step<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    w: &GruWeights,
    x: NodeId,
    h: NodeId,
) -> NodeId {
    let xv = tape.value_v(x);
    let hv = tape.value_v(h);
    let one = S::one();
    let sig = |v: Array1<S>| v.mapv(|a| one / (one + (-a).exp()));
    let r = {
        let mut pre = params.matrix(w.w_r).dot(xv);
        pre += &params.matrix(w.u_r).dot(hv);
        pre += params.vector(w.b_r);
        sig(pre)
    };
    let z = {
        let mut pre = params.matrix(w.w_z).dot(xv);
        pre += &params.matrix(w.u_z).dot(hv);
        pre += params.vector(w.b_z);
        sig(pre)
    };
    let rh = Array1::from_iter(r.iter().zip(hv.iter()).map(|(&ri, &hi)| ri * hi));
    let n = {
        let mut pre = params.matrix(w.w_n).dot(xv);
        pre += &params.matrix(w.u_n).dot(&rh);
        pre += params.vector(w.b_n);
        pre.mapv(|a| a.tanh())
    };
    let h_new = Array1::from_iter(
        z.iter()
            .zip(n.iter().zip(hv.iter()))
            .map(|(&zi, (&ni, &hi))| (one - zi) * ni + zi * hi),
    );
    tape.push(
        Value::V(h_new),
        Op::GruStep {
            w: *w,
            x,
            h,
            r,
            z,
            n,
        },
    )
}

fn accumulate_affine_grads<S: Scalar>(
    params: &ParamSet<S>,
    grads: &mut Grads<S>,
    w: ParamId,
    b: Option<ParamId>,
    d_out: &Array1<S>,
    input: &Array1<S>,
    d_in: &mut Array1<S>,
) {
    {
        let gw = grads.matrix_mut(params, w);
        for (row, &d) in d_out.iter().enumerate() {
            gw.row_mut(row).scaled_add(d, input);
        }
    }
    if let Some(b) = b {
        *grads.vector_mut(params, b) += d_out;
    }
    *d_in += &params.matrix(w).t().dot(d_out);
}

/// Two-layer scorer `w2ᵀ relu(X·W1ᵀ + b1) + b2` applied to each row of a
/// matrix node, returning one score per row.
#[derive(Debug, Clone, Copy)]
pub struct MlpScorer {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn score_rows<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    scorer: &MlpScorer,
    rows: NodeId,
) -> NodeId {
    let h = tape.matmul_p(params, rows, scorer.w1);
    let b1 = tape.param_v(params, scorer.b1);
    let h = tape.add_broadcast_row(h, b1);
    let h = tape.relu(h);
    let w2 = tape.param_v(params, scorer.w2);
    let s = tape.matvec(h, w2);
    let b2 = tape.param_v(params, scorer.b2);
    // Broadcast the scalar bias over the score vector.
    let ones = tape.leaf_v(Array1::from_elem(tape.value_v(s).len(), S::one()));
    let b2b = tape.mul_scalar(b2, ones);
    tape.add(s, b2b)
}

/// Same scorer applied to a single vector node.
pub fn score_vec<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    scorer: &MlpScorer,
    x: NodeId,
) -> NodeId {
    let h = tape.affine(params, scorer.w1, Some(scorer.b1), x);
    let h = tape.relu(h);
    let w2 = tape.param_v(params, scorer.w2);
    let s = tape.mul(h, w2);
    let total = tape.pick_sum(s, (0..tape.value_v(s).len()).collect());
    let b2 = tape.param_v(params, scorer.b2);
    tape.add(total, b2)
}

pub fn softmax_stable<S: Scalar>(x: &Array1<S>) -> Array1<S> {
    let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps = x.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps.mapv(|v| v / sum)
}

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Mean-subtracted uniform check used by fixed-weight unit tests.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamSet};
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf_v(array![0.3, -1.2, 2.0, 0.0]);
        let y = tape.softmax(x);
        let sum: f64 = tape.value_v(y).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_backward_matches_manual() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = crate::nn::params::seeded_rng(3);
        let w = params.add_matrix("w", 2, 3, Init::Glorot { scale: 1.0 }, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf_v(array![1.0, -2.0, 0.5]);
        let y = tape.affine(&params, w, None, x);
        let loss = tape.pick(y, 0);
        let mut grads = Grads::new(&params);
        tape.backward(loss, &params, &mut grads, 1.0);
        // dL/dW row 0 = x, row 1 = 0.
        let gw = grads.matrix_mut(&params, w).to_owned();
        assert!((gw[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((gw[[0, 1]] + 2.0).abs() < 1e-12);
        assert!((gw[[1, 0]]).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_roundtrip_grad() {
        let mut tape: Tape<f64> = Tape::new();
        let m = tape.leaf_m(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let g = tape.gather_rows(m, vec![2, 0]);
        let picked = tape.pick_row(g, 0);
        let loss = tape.pick(picked, 1);
        assert!((tape.scalar(loss) - 6.0).abs() < 1e-12);
    }
}
