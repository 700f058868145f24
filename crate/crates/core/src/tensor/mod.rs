//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

mod tape;

pub use tape::{Gradients, Tape, Var, BCE_EPS};

use rand::Rng;

use crate::error::{Error, Result};

/// `sqrt(2 / pi)`, the scale inside the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn random_uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_rank2("matmul")?;
    let (k2, n) = b.require_rank2("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_rank2("matmul_nt")?;
    let (n, k2) = b.require_rank2("matmul_nt")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm_nt(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Per-row statistics produced by [`layer_norm`], kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes over the last dimension, then applies `gamma * x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    let rows = x.len() / d;
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            let xh = (row[c] - mean) * inv;
            normalized[r * d + c] = xh;
            out[r * d + c] = gamma.data[c] * xh + beta.data[c];
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), out)?,
        NormStats {
            normalized,
            inv_std,
        },
    ))
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Logistic sigmoid, clamped so the result is always inside the open unit interval.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_dropout_p(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Dropout on a plain tensor. Identity when `training` is false.
pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data[i * k + p] * b.data[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_x() {
        let mut rng = stream(3, Domain::Test, 0, 0);
        let x = Tensor::random_uniform(&[3, 5], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn zero_times_x() {
        let mut rng = stream(3, Domain::Test, 1, 0);
        let x = Tensor::random_uniform(&[3, 4], 1.0, &mut rng);
        let out = matmul(&Tensor::zeros(&[2, 3]), &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[2, 4]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = stream(3, Domain::Test, 2, 0);
        let a = Tensor::random_uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::random_uniform(&[4, 2], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let x = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let b = Tensor::vector(vec![100.3, 98.8, 102.5]);
        let (sa, sb) = (softmax(&a, 0).unwrap(), softmax(&b, 0).unwrap());
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let s = softmax(&x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for c in 0..3 {
            let col = s.data()[c] + s.data()[3 + c];
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        let out = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-12).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gamma_zero_collapses_to_beta() {
        let x = Tensor::matrix(1, 3, vec![1.0, -4.0, 7.0]).unwrap();
        let out = layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::full(&[3], 0.7), 1e-12).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn layer_norm_matches_two_pass_statistics() {
        let mut rng = stream(9, Domain::Test, 0, 0);
        let x = Tensor::random_uniform(&[3, 8], 2.0, &mut rng);
        let eps = 1e-12;
        let out = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), eps).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for (c, v) in row.iter().enumerate() {
                let want = (v - mean) / (var + eps).sqrt();
                assert!((out.row(r)[c] - want).abs() < 1e-10);
            }
            let o = out.row(r);
            let m = o.iter().sum::<f64>() / 8.0;
            let v = o.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for x in [-800.0, -40.0, 40.0, 800.0] {
            let s = sigmoid_scalar(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // tanh-form GELU(1) to 1e-12
        let want = 0.5 * (1.0 + (GELU_C * (1.0 + GELU_A)).tanh());
        assert!((gelu_scalar(1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = stream(0, Domain::Test, 0, 0);
        let x = Tensor::random_uniform(&[4, 4], 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.2, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = stream(0, Domain::Test, 0, 0);
        let x = Tensor::zeros(&[2]);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(dropout(&x, -0.1, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_survival_rate() {
        let mut rng = stream(11, Domain::Test, 0, 0);
        let mask = dropout_mask(1_000_000, 0.2, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.8).abs() < 0.01, "survival {kept}");
        assert!(mask.iter().all(|&m| m == 0.0 || m == 1.25));
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
