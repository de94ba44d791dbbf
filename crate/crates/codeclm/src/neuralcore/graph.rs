//! Reverse-mode differentiation over a per-example op graph.
//!
//! A [`Graph`] is built forward (node ids are already a topological order),
//! holds every intermediate value, and [`Graph::backward`] walks it once in
//! reverse, accumulating gradients per node and folding them into parameter
//! slots. Graphs are cheap and short-lived: one per example per step.

use super::kernels as kn;
use super::kernels::AttnMask;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Named, ordered parameter set. Order is creation order and fixes the
/// reduction and update order everywhere else.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.map(&f) })
                .collect(),
        }
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(param_count: usize) -> Self {
        Self { by_param: (0..param_count).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn set(&mut self, id: ParamId, g: Tensor<F>) {
        if self.by_param.len() <= id.0 {
            self.by_param.resize_with(id.0 + 1, || None);
        }
        self.by_param[id.0] = Some(g);
    }

    /// Adds `other` into `self` (fixed order: caller iterates examples in
    /// index order, keeping reductions reproducible).
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize_with(other.by_param.len(), || None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for slot in self.by_param.iter_mut().flatten() {
            for v in slot.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sum = 0.0f64;
        for slot in self.by_param.iter().flatten() {
            for &v in slot.data() {
                let v = v.to_f64();
                sum += v * v;
            }
        }
        sum.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<F> {
    Input,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: F },
    Silu { x: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<F> },
    Rope { x: NodeId, positions: Vec<usize>, heads: usize, base: f64 },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<F> },
    Gather { table: NodeId, ids: Vec<u32> },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    BroadcastRows { row: NodeId },
    Sum { x: NodeId },
    MaskedCrossEntropy { logits: NodeId, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<F> },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

pub struct Graph<'s, F> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::with_capacity(64) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id).clone();
        self.push(Op::Param(id), value)
    }

    fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
        Error::ShapeMismatch { expected: expected.to_vec(), actual: actual.to_vec() }
    }

    /// `a[m,k] × b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, ka) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if ka != kb {
            return Err(Self::shape_err(ta.shape(), tb.shape()));
        }
        let data = kn::matmul(ta.data(), tb.data(), m, ka, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let value = Tensor::from_vec(vec![c, r], kn::transpose(t.data(), r, c))?;
        Ok(self.push(Op::Transpose { x }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, value)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(kn::silu);
        self.push(Op::Silu { x }, value)
    }

    /// `gain ⊙ x / rms(x)` row-wise; `gain` is a 1-D tensor of the row width.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.len() != d {
            return Err(Self::shape_err(&[d], tg.shape()));
        }
        let rows = tx.rows();
        let (y, inv_rms) = kn::rmsnorm_rows(tx.data(), tg.data(), rows, d);
        let value = Tensor::from_vec(tx.shape().to_vec(), y)?;
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, value))
    }

    pub fn rope(&mut self, x: NodeId, positions: &[usize], heads: usize, base: f64) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rows() != positions.len() {
            return Err(Self::shape_err(&[positions.len()], tx.shape()));
        }
        let head_dim = tx.cols() / heads;
        if head_dim % 2 != 0 || tx.cols() % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "rope needs an even head dimension, got {head_dim}"
            )));
        }
        let y = kn::rope_rows(tx.data(), positions, heads, base, 1.0);
        let value = Tensor::from_vec(tx.shape().to_vec(), y)?;
        Ok(self.push(Op::Rope { x, positions: positions.to_vec(), heads, base }, value))
    }

    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: &AttnMask,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Self::shape_err(tq.shape(), tk.shape()));
        }
        let (rows, d) = (tq.rows(), tq.cols());
        if d % heads != 0 {
            return Err(Error::InvalidConfig(format!("dim {d} not divisible by {heads} heads")));
        }
        if let AttnMask::Explicit { rows: mr, cols: mc, allow } = mask {
            if *mr != rows || *mc != rows || allow.len() != rows * rows {
                return Err(Self::shape_err(&[rows, rows], &[*mr, *mc]));
            }
        }
        let (out, probs) = kn::attention_forward(tq.data(), tk.data(), tv.data(), rows, d, heads, mask);
        let value = Tensor::from_vec(vec![rows, d], out)?;
        Ok(self.push(Op::Attention { q, k, v, heads, probs }, value))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::VocabRange { id, vocab: "embedding table", size: v as u32 });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, value))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Self::shape_err(ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::from_vec(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        Ok(self.push(Op::ConcatRows { a, b }, value))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        let d = t.cols();
        if start + len > t.rows() {
            return Err(Self::shape_err(&[start + len, d], t.shape()));
        }
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::from_vec(vec![len, d], data)?;
        Ok(self.push(Op::SliceRows { x, start }, value))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        let t = self.value(row);
        let d = t.len();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![rows, d], data)?;
        Ok(self.push(Op::BroadcastRows { row }, value))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    /// Mean cross-entropy over the positions where `mask` is true.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Self::shape_err(&[rows], &[targets.len(), mask.len()]));
        }
        let active = mask.iter().filter(|&&b| b).count();
        if active == 0 {
            return Err(Error::EmptyLossMask);
        }
        let mut probs = vec![F::zero(); rows * v];
        let mut loss = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let y = targets[r] as usize;
            if y >= v {
                return Err(Error::VocabRange { id: targets[r], vocab: "logits", size: v as u32 });
            }
            let row = t.row(r);
            let p_row = &mut probs[r * v..(r + 1) * v];
            p_row.copy_from_slice(row);
            kn::softmax_in_place(p_row);
            loss += kn::logsumexp(row) - row[y];
        }
        loss /= F::from_f64(active as f64);
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::MaskedCrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            value,
        ))
    }

    /// Reverse pass from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        let mut out = Gradients::zeros(self.store.len());

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(pid) => match &mut out.by_param[pid.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(dy.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(dy),
                },
                Op::Matmul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = kn::matmul_nt(dy.data(), tb.data(), m, n, k);
                    let db = kn::matmul_tn(ta.data(), dy.data(), m, k, n);
                    accumulate(&mut grads, *a, Tensor::from_vec(vec![m, k], da).unwrap());
                    accumulate(&mut grads, *b, Tensor::from_vec(vec![k, n], db).unwrap());
                }
                Op::Transpose { x } => {
                    let (r, c) = (dy.rows(), dy.cols());
                    let dx = kn::transpose(dy.data(), r, c);
                    accumulate(&mut grads, *x, Tensor::from_vec(vec![c, r], dx).unwrap());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = dy.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                    let db = dy.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(ta.shape().to_vec(), da).unwrap());
                    accumulate(&mut grads, *b, Tensor::from_vec(tb.shape().to_vec(), db).unwrap());
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, dy.map(|g| g * *c));
                }
                Op::Silu { x } => {
                    let tx = self.value(*x);
                    let dx = dy
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(&g, &t)| g * kn::silu_prime(t))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx).unwrap());
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (tx, tg) = (self.value(*x), self.value(*gain));
                    let (rows, d) = (tx.rows(), tx.cols());
                    let (dx, dg) =
                        kn::rmsnorm_backward(tx.data(), tg.data(), inv_rms, dy.data(), rows, d);
                    accumulate(&mut grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx).unwrap());
                    accumulate(&mut grads, *gain, Tensor::from_vec(tg.shape().to_vec(), dg).unwrap());
                }
                Op::Rope { x, positions, heads, base } => {
                    let tx = self.value(*x);
                    let dx = kn::rope_rows(dy.data(), positions, *heads, *base, -1.0);
                    accumulate(&mut grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx).unwrap());
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = (tq.rows(), tq.cols());
                    let (dq, dk, dv) = kn::attention_backward(
                        tq.data(),
                        tk.data(),
                        tv.data(),
                        probs,
                        dy.data(),
                        rows,
                        d,
                        *heads,
                    );
                    accumulate(&mut grads, *q, Tensor::from_vec(vec![rows, d], dq).unwrap());
                    accumulate(&mut grads, *k, Tensor::from_vec(vec![rows, d], dk).unwrap());
                    accumulate(&mut grads, *v, Tensor::from_vec(vec![rows, d], dv).unwrap());
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut dt = Tensor::zeros(t.shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        let row = &dy.data()[r * d..(r + 1) * d];
                        let acc = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (a, &g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatRows { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let d = ta.cols();
                    let split = ta.rows() * d;
                    let da = Tensor::from_vec(ta.shape().to_vec(), dy.data()[..split].to_vec())
                        .unwrap();
                    let db = Tensor::from_vec(tb.shape().to_vec(), dy.data()[split..].to_vec())
                        .unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let d = tx.cols();
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    dx.data_mut()[start * d..start * d + dy.len()].copy_from_slice(dy.data());
                    accumulate(&mut grads, *x, dx);
                }
                Op::BroadcastRows { row } => {
                    let tr = self.value(*row);
                    let d = tr.len();
                    let mut dr = Tensor::zeros(tr.shape().to_vec());
                    for chunk in dy.data().chunks(d) {
                        for (a, &g) in dr.data_mut().iter_mut().zip(chunk) {
                            *a += g;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                }
                Op::Sum { x } => {
                    let g = dy.item();
                    let dx = self.value(*x).map(|_| g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedCrossEntropy { logits, targets, mask, probs } => {
                    let t = self.value(*logits);
                    let (rows, v) = (t.rows(), t.cols());
                    let active = mask.iter().filter(|&&b| b).count();
                    let scale = dy.item() / F::from_f64(active as f64);
                    let mut dz = Tensor::zeros(t.shape().to_vec());
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let p_row = &probs[r * v..(r + 1) * v];
                        let dz_row = &mut dz.data_mut()[r * v..(r + 1) * v];
                        for (o, &p) in dz_row.iter_mut().zip(p_row) {
                            *o = p * scale;
                        }
                        dz_row[targets[r] as usize] -= scale;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        out
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
