//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Trainable values live in a
//! [`ParamStore`] that the tape borrows, so recording a parameter never copies it.
//! [`Tape::backward`] walks the nodes in reverse and accumulates parameter
//! gradients into a caller-owned [`Gradients`] buffer.

use serde::{Deserialize, Serialize};

use crate::error::{IhanError, Result};
use crate::tensor::Tensor;

/// Clamp applied to predicted probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Dense gradient buffers, one per parameter, shaped like the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    ParamColumn(ParamId, usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddScalar(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Transpose(Var),
    HStack(Vec<Var>),
    MaskedSoftmax(Var, Vec<bool>),
    Sum(Var),
    Bce(Var, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` only for `Op::Param`, whose value lives in the store.
    value: Option<Tensor>,
    shape: (usize, usize),
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let shape = value.shape();
        self.nodes.push(Node {
            op,
            value: Some(value),
            shape,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant. No gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            shape,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Column `col` of a parameter matrix; the gradient touches only that column.
    pub fn param_column(&mut self, id: ParamId, col: usize) -> Var {
        let value = self.params.get(id).column_at(col);
        self.push(Op::ParamColumn(id, col), value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Adds a 1×1 `bias` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.shape() != (1, 1) {
            return Err(IhanError::dim("add_scalar", b.shape(), (1, 1)));
        }
        let bv = b.item();
        let value = self.value(a).map(|x| x + bv);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddScalar(a, bias), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(Op::OneMinus(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    /// Stacks column vectors of equal height side by side.
    pub fn hstack(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| IhanError::Degenerate("hstack of zero columns".into()))?;
        let rows = self.shape(first).0;
        let mut out = Tensor::zeros(rows, cols.len());
        for (c, &v) in cols.iter().enumerate() {
            let t = self.value(v);
            if t.shape() != (rows, 1) {
                return Err(IhanError::dim("hstack", (rows, 1), t.shape()));
            }
            for r in 0..rows {
                out.set(r, c, t.data()[r]);
            }
        }
        let rg = cols.iter().any(|&v| self.rg(v));
        Ok(self.push(Op::HStack(cols.to_vec()), out, rg))
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let value = masked_softmax(self.value(scores), mask)?;
        let rg = self.rg(scores);
        Ok(self.push(Op::MaskedSoftmax(scores, mask.to_vec()), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Binary cross-entropy of a 1×1 probability against a 0/1 target.
    pub fn bce(&mut self, y_hat: Var, target: f64) -> Result<Var> {
        let t = self.value(y_hat);
        if t.shape() != (1, 1) {
            return Err(IhanError::dim("bce", t.shape(), (1, 1)));
        }
        let value = Tensor::scalar(bce_loss(t.item(), target));
        let rg = self.rg(y_hat);
        Ok(self.push(Op::Bce(y_hat, target), value, rg))
    }

    /// Backpropagates from a 1×1 root and returns fresh parameter gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(root, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Backpropagates from a 1×1 root, adding `seed ×` the parameter gradients into `out`.
    pub fn backward_into(&self, root: Var, seed: f64, out: &mut Gradients) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(IhanError::dim("backward root", self.shape(root), (1, 1)));
        }
        if out.len() != self.params.len() {
            return Err(IhanError::Config(format!(
                "gradient buffer holds {} tensors, store holds {}",
                out.len(),
                self.params.len()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = out.get_mut(*id).data_mut();
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::ParamColumn(id, col) => {
                    let dst = out.get_mut(*id);
                    let cols = dst.cols();
                    let data = dst.data_mut();
                    for (r, gv) in g.iter().enumerate() {
                        data[r * cols + col] += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if self.rg(*a) {
                        // dA = dC · Bᵀ
                        let bv = self.value(*b).data();
                        let ga = accum(&mut adj, *a, m * k);
                        for r in 0..m {
                            for c in 0..n {
                                let gc = g[r * n + c];
                                if gc == 0.0 {
                                    continue;
                                }
                                let row = &mut ga[r * k..(r + 1) * k];
                                for (p, x) in row.iter_mut().enumerate() {
                                    *x += gc * bv[p * n + c];
                                }
                            }
                        }
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · dC
                        let av = self.value(*a).data();
                        let gb = accum(&mut adj, *b, k * n);
                        for r in 0..m {
                            let a_row = &av[r * k..(r + 1) * k];
                            let g_row = &g[r * n..(r + 1) * n];
                            for (p, &ap) in a_row.iter().enumerate() {
                                if ap == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[p * n..(p + 1) * n];
                                for (d, gv) in dst.iter_mut().zip(g_row) {
                                    *d += ap * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut adj, *a, &g, |x| x);
                    self.send(&mut adj, *b, &g, |x| x);
                }
                Op::AddScalar(a, bias) => {
                    self.send(&mut adj, *a, &g, |x| x);
                    if self.rg(*bias) {
                        let total: f64 = g.iter().sum();
                        accum(&mut adj, *bias, 1)[0] += total;
                    }
                }
                Op::Sub(a, b) => {
                    self.send(&mut adj, *a, &g, |x| x);
                    self.send(&mut adj, *b, &g, |x| -x);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        let ga = accum(&mut adj, *a, g.len());
                        for ((d, gv), x) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv * x;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        let gb = accum(&mut adj, *b, g.len());
                        for ((d, gv), x) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
                Op::Scale(a, f) => self.send(&mut adj, *a, &g, |x| x * f),
                Op::OneMinus(a) => self.send(&mut adj, *a, &g, |x| -x),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = accum(&mut adj, *a, g.len());
                    for ((d, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    let ga = accum(&mut adj, *a, g.len());
                    for ((d, gv), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = node.shape;
                    let ga = accum(&mut adj, *a, g.len());
                    // node is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::HStack(cols) => {
                    let (rows, ncols) = node.shape;
                    for (c, &v) in cols.iter().enumerate() {
                        if !self.rg(v) {
                            continue;
                        }
                        let gv = accum(&mut adj, v, rows);
                        for r in 0..rows {
                            gv[r] += g[r * ncols + c];
                        }
                    }
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = node.value.as_ref().unwrap().data();
                    let inner: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    let ga = accum(&mut adj, *a, g.len());
                    for k in 0..g.len() {
                        if mask[k] {
                            ga[k] += y[k] * (g[k] - inner);
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let ga = accum(&mut adj, *a, n);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Bce(a, y) => {
                    let p = self.value(*a).item();
                    let ga = accum(&mut adj, *a, 1);
                    ga[0] += g[0] * bce_grad(p, *y);
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<f64>>], to: Var, g: &[f64], f: impl Fn(f64) -> f64) {
        if !self.rg(to) {
            return;
        }
        let dst = accum(adj, to, g.len());
        for (d, gv) in dst.iter_mut().zip(g) {
            *d += f(*gv);
        }
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Softmax over a 1×n row restricted to `mask`; masked-out positions are exactly 0.
pub fn masked_softmax(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if scores.rows() != 1 || scores.cols() != mask.len() {
        return Err(IhanError::dim(
            "masked_softmax",
            scores.shape(),
            (1, mask.len()),
        ));
    }
    let max = scores
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(IhanError::Degenerate(
            "masked_softmax with every position masked out".into(),
        ));
    }
    let mut out: Vec<f64> = scores
        .data()
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(Tensor::row(out))
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(y_hat: f64, y: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(y_hat: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat) {
        return 0.0;
    }
    -y / y_hat + (1.0 - y) / (1.0 - y_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_and_symmetric() {
        let one = masked_softmax(&Tensor::row(vec![-3.7]), &[true]).unwrap();
        assert_eq!(one.data(), &[1.0]);
        for c in [-50.0, 0.0, 1e4] {
            let two = masked_softmax(&Tensor::row(vec![c, c]), &[true, true]).unwrap();
            assert_eq!(two.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3), k = 1..3
        let s = masked_softmax(&Tensor::row(vec![1.0, 2.0, 3.0]), &[true; 3]).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_masks_and_rejects_all_false() {
        let s = masked_softmax(&Tensor::row(vec![5.0, 1.0, 2.0]), &[false, true, true]).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-12);
        assert!(matches!(
            masked_softmax(&Tensor::row(vec![1.0, 2.0]), &[false, false]),
            Err(IhanError::Degenerate(_))
        ));
    }

    #[test]
    fn softmax_extreme_scores() {
        let s = masked_softmax(&Tensor::row(vec![1e4, -1e4, 9999.0]), &[true; 3]).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_values() {
        assert!(bce_loss(1.0, 1.0) < 1e-11);
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn param_column_gradient_is_sparse() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let mut tape = Tape::new(&store);
        let col = tape.param_column(id, 1);
        assert_eq!(tape.value(col).data(), &[2.0, 5.0]);
        let s = tape.sum(col);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(id).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(2, 1));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(1, 2));
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(g.clip_global_norm(1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let before = g.clone();
        g.clip_global_norm(10.0);
        assert_eq!(g, before);
    }
}
