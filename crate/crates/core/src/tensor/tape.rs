//! Reverse-mode gradient tape.
//!
//! Operations append nodes in evaluation order, so every node's inputs have
//! smaller indices than the node itself. `backward` walks the node list once in
//! reverse and accumulates vector-Jacobian products into the inputs.

use rand::Rng;

use super::{
    axis_layout, check_dropout_p, dropout_mask, gelu_grad_scalar, gemm_nn, gemm_nt, gemm_tn,
    layer_norm_with_stats, softmax, NormStats, Tensor,
};
use crate::error::{Error, Result};

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats },
    Gelu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    MeanRows { x: Var, start: usize, end: usize },
    Reshape(Var),
    Bce { p: Var, labels: Vec<f64>, weights: Vec<f64> },
    Mse { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) =
            layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = super::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = super::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout. In eval mode (or with `p == 0`) no node is recorded.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        check_dropout_p(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = dropout_mask(xv.len(), p, rng)?;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocab(format!("id {id} out of range for table of {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() || xv.shape().len() != 2 {
            return Err(Error::contract(format!(
                "row slice {start}..{end} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let c = xv.cols();
        let out = Tensor::new(vec![end - start, c], xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c || xv.shape().len() != 2 {
            return Err(Error::contract(format!(
                "column slice {start}..{end} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![r, end - start], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if axis > 1 {
            return Err(Error::contract(format!("concat axis {axis} unsupported")));
        }
        for &v in inputs {
            let s = self.value(v).shape();
            let f = self.value(first).shape();
            if s.len() != 2 || s[1 - axis] != f[1 - axis] {
                return Err(self.shape_err("concat", first, v));
            }
        }
        let out = if axis == 0 {
            let c = self.value(first).cols();
            let mut data = Vec::new();
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            let rows = data.len() / c;
            Tensor::new(vec![rows, c], data)?
        } else {
            let r = self.value(first).rows();
            let total: usize = inputs.iter().map(|&v| self.value(v).cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(vec![r, total], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Mean of matrix rows `start..end`, as a `[1×c]` row.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(Error::contract(format!(
                "mean over empty or out-of-range span {start}..{end}"
            )));
        }
        let c = xv.cols();
        let mut acc = vec![0.0; c];
        for r in start..end {
            for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v;
            }
        }
        let n = (end - start) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::new(vec![1, c], acc)?;
        Ok(self.push(out, Op::MeanRows { x, start, end }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Weighted binary cross-entropy, mean-reduced over the batch:
    /// `-(1/N) Σ w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]`, with `p` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.len() != weights.len() {
            return Err(Error::Shape {
                op: "bce",
                left: pv.shape().to_vec(),
                right: vec![labels.len(), weights.len()],
            });
        }
        let n = labels.len() as f64;
        let mut total = 0.0;
        for ((&pi, &y), &w) in pv.data().iter().zip(labels).zip(weights) {
            let q = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total += w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
        let out = Tensor::scalar(-total / n);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            &[p],
        ))
    }

    pub fn mse(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() {
            return Err(Error::Shape {
                op: "mse",
                left: pv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(a, t)| (a - t) * (a - t))
            .sum();
        let out = Tensor::scalar(s / n);
        Ok(self.push(
            out,
            Op::Mse {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient (zeros when unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, node.requires_grad) {
                (Some(g), true) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                (None, true) if matches!(node.op, Op::Leaf) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    gemm_nt(g, bv.data(), self.slot(grads, *a), m, n, k);
                }
                if self.requires_grad(*b) {
                    gemm_tn(av.data(), g, self.slot(grads, *b), k, m, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.requires_grad(*a) {
                    gemm_nn(g, bv.data(), self.slot(grads, *a), m, n, k);
                }
                if self.requires_grad(*b) {
                    gemm_tn(g, av.data(), self.slot(grads, *b), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        axpy(self.slot(grads, *v), g, 1.0);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.requires_grad(*x) {
                    axpy(self.slot(grads, *x), g, 1.0);
                }
                if self.requires_grad(*bias) {
                    let c = self.value(*bias).len();
                    let gb = self.slot(grads, *bias);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => axpy(self.slot(grads, *x), g, *c),
            Op::Sum(x) => {
                let gx = self.slot(grads, *x);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let gx = self.slot(grads, *x);
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += s);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_layout(node.value.shape(), *axis).expect("validated in forward");
                let gx = self.slot(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = node.value.cols();
                let rows = g.len() / d;
                let gam = self.value(*gamma).data().to_vec();
                if self.requires_grad(*x) {
                    let gx = self.slot(grads, *x);
                    for r in 0..rows {
                        let xh = &stats.normalized[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            s1 += dxh;
                            s2 += dxh * xh[c];
                        }
                        let inv = stats.inv_std[r];
                        let nd = d as f64;
                        for c in 0..d {
                            let dxh = gr[c] * gam[c];
                            gx[r * d + c] += inv * (dxh - s1 / nd - xh[c] * s2 / nd);
                        }
                    }
                }
                if self.requires_grad(*gamma) {
                    let gg = self.slot(grads, *gamma);
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * stats.normalized[i];
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = self.slot(grads, *beta);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = self.slot(grads, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad_scalar(xv[i]);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = self.slot(grads, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = self.slot(grads, *x);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::Gather { table, ids } => {
                let c = node.value.cols();
                let gt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let gx = self.slot(grads, *x);
                axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let c = self.value(*x).cols();
                let gx = self.slot(grads, *x);
                for r in 0..node.value.rows() {
                    axpy(
                        &mut gx[r * c + start..r * c + start + w],
                        &g[r * w..(r + 1) * w],
                        1.0,
                    );
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for v in inputs {
                        let n = self.value(*v).len();
                        if self.requires_grad(*v) {
                            axpy(self.slot(grads, *v), &g[off..off + n], 1.0);
                        }
                        off += n;
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut col = 0;
                    for v in inputs {
                        let w = self.value(*v).cols();
                        if self.requires_grad(*v) {
                            let gv = self.slot(grads, *v);
                            for r in 0..rows {
                                axpy(
                                    &mut gv[r * w..(r + 1) * w],
                                    &g[r * total + col..r * total + col + w],
                                    1.0,
                                );
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::MeanRows { x, start, end } => {
                let c = node.value.cols();
                let n = (end - start) as f64;
                let gx = self.slot(grads, *x);
                for r in *start..*end {
                    axpy(&mut gx[r * c..(r + 1) * c], g, 1.0 / n);
                }
            }
            Op::Reshape(x) => axpy(self.slot(grads, *x), g, 1.0),
            Op::Bce { p, labels, weights } => {
                let pv = self.value(*p).data();
                let n = labels.len() as f64;
                let gp = self.slot(grads, *p);
                for i in 0..labels.len() {
                    let raw = pv[i];
                    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&raw) {
                        continue;
                    }
                    let (y, w) = (labels[i], weights[i]);
                    gp[i] += g[0] * (-w / n) * (y / raw - (1.0 - y) / (1.0 - raw));
                }
            }
            Op::Mse { p, targets } => {
                let pv = self.value(*p).data();
                let n = targets.len() as f64;
                let gp = self.slot(grads, *p);
                for i in 0..targets.len() {
                    gp[i] += g[0] * 2.0 * (pv[i] - targets[i]) / n;
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
