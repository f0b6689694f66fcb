//! Dense row-major 2-D kernels: matmul, normalization, activations, slicing.
//!
//! The deterministic `matmul` fixes the summation order (k-major accumulation)
//! so verified paths reproduce bit-for-bit run to run. `matmul_fast` delegates
//! to a blocked gemm and is only used by the benchmark harness.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix, tokens x channels in most call sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix2D<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix2D {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix2D { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::Dimension("ragged row lengths".into()));
        }
        Ok(Matrix2D {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Matrix2D<T> {
        Matrix2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| T::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Relative Frobenius distance ||a - b||_F / ||b||_F (absolute when b is ~0).
pub fn rel_frobenius_diff<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> f64 {
    let mut num = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x.as_f64() - y.as_f64();
        num += d * d;
    }
    let den = b.frobenius_norm();
    if den > 0.0 {
        num.sqrt() / den
    } else {
        num.sqrt()
    }
}

fn check_mul_shapes<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Deterministic product: i-k-j loops, accumulation over k in index order.
pub fn matmul<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<Matrix2D<S>> {
    check_mul_shapes(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix2D::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Blocked gemm; may reorder summation, so it is excluded from the verified
/// equivalence paths and only engaged by the benchmark harness.
pub fn matmul_fast<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<Matrix2D<S>> {
    check_mul_shapes(a, b)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix2D::zeros(m, n);
    S::gemm_fast(m, k, n, &a.data, &b.data, &mut out.data);
    Ok(out)
}

/// GELU with the exact erf formulation: x * Phi(x).
pub fn gelu<S: Scalar>(x: &Matrix2D<S>) -> Matrix2D<S> {
    x.map(|v| v * normal_cdf(v))
}

/// d/dx gelu = Phi(x) + x * phi(x).
pub fn gelu_grad<S: Scalar>(x: &Matrix2D<S>) -> Matrix2D<S> {
    x.map(|v| normal_cdf(v) + v * normal_pdf(v))
}

fn normal_cdf<S: Scalar>(v: S) -> S {
    let half = S::of_f64(0.5);
    let inv_sqrt2 = S::of_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (v * inv_sqrt2).erf())
}

fn normal_pdf<S: Scalar>(v: S) -> S {
    let inv_sqrt_2pi = S::of_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-v * v * S::of_f64(0.5)).exp()
}

/// Per-channel BatchNorm parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub eps: S,
    pub frozen: bool,
}

impl<S: Scalar> BatchNormParams<S> {
    /// Identity-initialized BN: gamma 1, beta 0, mean 0, var 1.
    pub fn identity_init(channels: usize, eps: S) -> Self {
        BatchNormParams {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            eps,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel scale gamma / sqrt(running_var + eps).
    pub fn scale(&self) -> Vec<S> {
        self.gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }
}

/// Normalize with stored running statistics (inference mode).
pub fn batchnorm_eval<S: Scalar>(x: &Matrix2D<S>, bn: &BatchNormParams<S>) -> Result<Matrix2D<S>> {
    if x.cols != bn.channels() {
        return Err(Error::Dimension(format!(
            "batchnorm_eval: input has {} cols, bn has {} channels",
            x.cols,
            bn.channels()
        )));
    }
    let s = bn.scale();
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for c in 0..row.len() {
            row[c] = s[c] * (row[c] - bn.running_mean[c]) + bn.beta[c];
        }
    }
    Ok(out)
}

/// Batch statistics over the rows of `x`: (mean, biased variance) per column.
pub fn batch_stats<S: Scalar>(x: &Matrix2D<S>) -> (Vec<S>, Vec<S>) {
    let n = S::of_f64(x.rows as f64);
    let mut mean = vec![S::zero(); x.cols];
    for r in 0..x.rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![S::zero(); x.cols];
    for r in 0..x.rows {
        for (c, (vv, &v)) in var.iter_mut().zip(x.row(r)).enumerate() {
            let d = v - mean[c];
            *vv += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Normalize with batch statistics without touching running stats.
/// Used by the backward pass and the gradient-check closures.
pub fn batchnorm_apply_batch<S: Scalar>(
    x: &Matrix2D<S>,
    bn: &BatchNormParams<S>,
) -> Result<Matrix2D<S>> {
    if x.cols != bn.channels() {
        return Err(Error::Dimension(format!(
            "batchnorm: input has {} cols, bn has {} channels",
            x.cols,
            bn.channels()
        )));
    }
    if x.rows < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch statistics need >= 2 rows, got {}",
            x.rows
        )));
    }
    let (mean, var) = batch_stats(x);
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        for c in 0..row.len() {
            let s = bn.gamma[c] / (var[c] + bn.eps).sqrt();
            row[c] = s * (row[c] - mean[c]) + bn.beta[c];
        }
    }
    Ok(out)
}

/// Train-mode BatchNorm: normalize with batch stats and update running stats
/// via EMA: running = (1 - momentum) * running + momentum * batch.
/// Running variance uses the unbiased estimator.
pub fn batchnorm_train_step<S: Scalar>(
    x: &Matrix2D<S>,
    bn: &mut BatchNormParams<S>,
    momentum: S,
) -> Result<Matrix2D<S>> {
    if bn.frozen {
        return Err(Error::State(
            "batchnorm_train_step on a frozen BatchNorm".into(),
        ));
    }
    let out = batchnorm_apply_batch(x, bn)?;
    let (mean, var) = batch_stats(x);
    let n = x.rows as f64;
    let unbias = S::of_f64(n / (n - 1.0));
    let one_m = S::one() - momentum;
    for c in 0..bn.channels() {
        bn.running_mean[c] = one_m * bn.running_mean[c] + momentum * mean[c];
        bn.running_var[c] = one_m * bn.running_var[c] + momentum * var[c] * unbias;
    }
    Ok(out)
}

/// Per-row normalization then affine.
pub fn layernorm<S: Scalar>(
    x: &Matrix2D<S>,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> Result<Matrix2D<S>> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(Error::Dimension(format!(
            "layernorm: gamma/beta length {}/{} != {} cols",
            gamma.len(),
            beta.len(),
            x.cols
        )));
    }
    let n = S::of_f64(x.cols as f64);
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let inv = (var + eps).sqrt().recip();
        for c in 0..row.len() {
            row[c] = gamma[c] * (row[c] - mean) * inv + beta[c];
        }
    }
    Ok(out)
}

pub fn slice_cols<S: Scalar>(x: &Matrix2D<S>, lo: usize, hi: usize) -> Result<Matrix2D<S>> {
    if lo >= hi || hi > x.cols {
        return Err(Error::Bounds(format!(
            "slice_cols [{lo}, {hi}) on {} cols",
            x.cols
        )));
    }
    let w = hi - lo;
    let mut out = Matrix2D::zeros(x.rows, w);
    for r in 0..x.rows {
        out.data[r * w..(r + 1) * w].copy_from_slice(&x.row(r)[lo..hi]);
    }
    Ok(out)
}

pub fn concat_cols<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<Matrix2D<S>> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "concat_cols: {} vs {} rows",
            a.rows, b.rows
        )));
    }
    let w = a.cols + b.cols;
    let mut out = Matrix2D::zeros(a.rows, w);
    for r in 0..a.rows {
        out.data[r * w..r * w + a.cols].copy_from_slice(a.row(r));
        out.data[r * w + a.cols..(r + 1) * w].copy_from_slice(b.row(r));
    }
    Ok(out)
}

pub fn add<S: Scalar>(a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<Matrix2D<S>> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "add: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = a.clone();
    for (x, &y) in out.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(out)
}

/// Broadcast a length-cols vector over every row.
pub fn add_bias<S: Scalar>(x: &Matrix2D<S>, bias: &[S]) -> Result<Matrix2D<S>> {
    if bias.len() != x.cols {
        return Err(Error::Dimension(format!(
            "add_bias: bias length {} != {} cols",
            bias.len(),
            x.cols
        )));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        for (v, &b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn softmax_rows<S: Scalar>(x: &Matrix2D<S>) -> Matrix2D<S> {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Column means: a 1 x cols matrix.
pub fn mean_over_rows<S: Scalar>(x: &Matrix2D<S>) -> Matrix2D<S> {
    let n = S::of_f64(x.rows as f64);
    let mut out = Matrix2D::zeros(1, x.cols);
    for r in 0..x.rows {
        for (m, &v) in out.data.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut out.data {
        *m /= n;
    }
    out
}

/// Column sums as a plain vector (bias gradients).
pub fn col_sums<S: Scalar>(x: &Matrix2D<S>) -> Vec<S> {
    let mut out = vec![S::zero(); x.cols];
    for r in 0..x.rows {
        for (s, &v) in out.iter_mut().zip(x.row(r)) {
            *s += v;
        }
    }
    out
}
