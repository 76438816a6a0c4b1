//! Dense row-major tensors and the numeric kernels shared by the tape and
//! the inference paths.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows. An empty row list yields a
    /// `0 x cols` matrix.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[row.len()], &[cols]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| normal.sample(rng)).collect(),
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix view; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`; the transposes are expressed
/// through strides so no copies are made.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // element regions checked by the debug assertion.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided variant used for per-head attention blocks that live inside wider
/// matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices that start at the block origin and whose
    // strides stay within the slice for the given extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), 0.0);
    Ok(out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank().max(1) {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let shape = if x.rank() == 0 { vec![1] } else { x.shape.clone() };
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(out[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (out[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Per-row normalization followed by the `gamma`/`beta` affine map.
/// Also returns the normalized rows and reciprocal standard deviations for
/// the backward pass.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d || x.rank() == 0 {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = if d == 0 { 0 } else { x.numel() / d };
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape.clone(), out)?, xhat, rstd))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _, _)| y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

pub(crate) fn check_targets(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<(usize, usize)> {
    let (t, v) = logits.require_matrix("cross_entropy")?;
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len(), mask.len()]));
    }
    for (pos, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m && target >= v {
            return Err(Error::contract(format!(
                "target {target} at position {pos} is outside a vocabulary of {v}"
            )));
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyLoss);
    }
    Ok((t, v))
}

/// Mean negative log-likelihood over the unmasked positions.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (_, v) = check_targets(logits, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        total += -log_softmax_at(&logits.data[r * v..(r + 1) * v], target);
        count += 1;
    }
    Ok(total / count as f64)
}

pub(crate) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (m, k, n) in [(3, 3, 3), (5, 7, 2), (1, 9, 4), (17, 33, 65)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let fast = matmul(&a, &b).unwrap();
            assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&Tensor::full(&[4], 3.0), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = Tensor::vector(vec![0.0, 2f64.ln()]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 7.5).collect())
            .unwrap();
        assert!(softmax(&x, 1).unwrap().max_abs_diff(&softmax(&shifted, 1).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_along_leading_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[4, 3], 3.0, &mut rng);
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let col: f64 = (0..4).map(|i| s.at(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::from_rows(&[vec![1.0, 1.0, 1.0]], 3).unwrap(), &ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let y = layer_norm(&Tensor::from_rows(&[vec![4.0, -2.0, 9.0]], 3).unwrap(), &zeros, &beta, LAYER_NORM_EPS)
            .unwrap();
        assert_eq!(y.data(), beta.data());

        // Direct evaluation: mean 2, variance 2/3.
        let y = layer_norm(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]], 3).unwrap(), &ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        let sd = (2.0f64 / 3.0 + 1e-5).sqrt();
        let expected = [-1.0 / sd, 0.0, 1.0 / sd];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        for x in [6.0, 7.5, 10.0] {
            assert!((gelu_scalar(x) - x).abs() < 1e-6);
        }
        let direct = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
        assert!((gelu_scalar(1.0) - direct).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::zeros(&[3, 10]);
        let ce = cross_entropy(&logits, &[1, 4, 9], &[true; 3]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(&[1, 5]);
        sat.data_mut()[2] = 30.0;
        assert!(cross_entropy(&sat, &[2], &[true]).unwrap() < 1e-9);

        // Hand computation: row 0 = [ln 1, ln 3] -> p(target 1) = 3/4;
        // row 1 = [ln 2, ln 2] -> p = 1/2; masked row contributes nothing.
        let logits = Tensor::from_rows(
            &[vec![0.0, 3f64.ln()], vec![2f64.ln(), 2f64.ln()], vec![100.0, -100.0]],
            2,
        )
        .unwrap();
        let ce = cross_entropy(&logits, &[1, 0, 1], &[true, true, false]).unwrap();
        let hand = -((0.75f64).ln() + (0.5f64).ln()) / 2.0;
        assert!((ce - hand).abs() < 1e-12);

        assert!(matches!(cross_entropy(&logits, &[0, 0, 0], &[false; 3]), Err(Error::EmptyLoss)));
        assert!(cross_entropy(&logits, &[5, 0, 0], &[true; 3]).is_err());
    }
}
