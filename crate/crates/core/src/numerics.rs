//! Dense f64 array substrate shared by every other module.
//!
//! Everything here is deterministic: reductions run left to right in index
//! order so that parity tests between two code paths can be bit-stable.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major shaped array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array, rejecting a length/shape mismatch or non-finite data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Array::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        let a = Array { shape: shape.to_vec(), data };
        a.check_finite("Array::new")?;
        Ok(a)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Array::from_rows", "ragged rows"));
        }
        Array::new(&[rows.len(), cols], rows.concat())
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Array { shape: shape.to_vec(), data }
    }

    pub fn zeros_like(&self) -> Self {
        Array::zeros(&self.shape)
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

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "Array::reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Array { shape: vec![n, m], data: out })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Array, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, format!("expected 2-D array, got {s:?}"))),
        }
    }
}

/// `a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    let out = Array { shape: vec![m, n], data: out };
    out.check_finite("matmul")?;
    Ok(out)
}

/// `aᵀ · b` for `a[r×m]`, `b[r×n]`; used for weight gradients.
pub fn matmul_tn(a: &Array, b: &Array) -> Result<Array> {
    let (r, m) = a.dims2("matmul_tn")?;
    let (r2, n) = b.dims2("matmul_tn")?;
    if r != r2 {
        return Err(Error::shape("matmul_tn", format!("({r}x{m})ᵀ · {r2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..r {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = Array { shape: vec![m, n], data: out };
    out.check_finite("matmul_tn")?;
    Ok(out)
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`; used for input gradients.
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b.data[j * k..(j + 1) * k]);
        }
    }
    let out = Array { shape: vec![m, n], data: out };
    out.check_finite("matmul_nt")?;
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d silu / dx.
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Max-shifted softmax.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { op: "softmax_stable" });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_stable" });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

pub const RMS_EPS: f64 = 1e-5;

/// `y_i = w_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f64], weight: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty { op: "rms_norm" });
    }
    if x.len() != weight.len() {
        return Err(Error::shape(
            "rms_norm",
            format!("x has {} elements, weight {}", x.len(), weight.len()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("rms_norm", "eps must be positive"));
    }
    let inv = inv_rms(x, eps);
    let y: Vec<f64> = x.iter().zip(weight).map(|(a, w)| w * a * inv).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "rms_norm" });
    }
    Ok(y)
}

#[inline]
pub fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Backward of [`rms_norm`] for one row. Accumulates into `dx` and `dweight`.
pub fn rms_norm_backward(
    x: &[f64],
    weight: &[f64],
    eps: f64,
    dy: &[f64],
    dx: &mut [f64],
    dweight: &mut [f64],
) {
    let n = x.len() as f64;
    let r = inv_rms(x, eps);
    // y = w ⊙ x r, dr/dx_j = -r³ x_j / n
    let mut s = 0.0;
    for i in 0..x.len() {
        dweight[i] += dy[i] * x[i] * r;
        s += dy[i] * weight[i] * x[i];
    }
    let r3 = r * r * r / n;
    for i in 0..x.len() {
        dx[i] += dy[i] * weight[i] * r - r3 * x[i] * s;
    }
}

/// Rotary encoding parameters. `enabled == false` is NoPE mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeParams {
    pub base: f64,
    pub head_dim: usize,
    pub enabled: bool,
}

impl RopeParams {
    pub fn new(head_dim: usize) -> Self {
        RopeParams { base: 10_000.0, head_dim, enabled: true }
    }

    pub fn nope(head_dim: usize) -> Self {
        RopeParams { base: 10_000.0, head_dim, enabled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "rope",
                format!("head_dim must be even and positive, got {}", self.head_dim),
            ));
        }
        if !(self.base > 1.0) {
            return Err(Error::invalid("rope", format!("base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    /// Rotates one head vector in place by the angle for `pos`.
    /// `inverse` applies the transpose rotation (used by the backward pass).
    pub fn rotate(&self, row: &mut [f64], pos: usize, inverse: bool) {
        if !self.enabled {
            return;
        }
        let hd = row.len();
        let sign = if inverse { -1.0 } else { 1.0 };
        for i in 0..hd / 2 {
            let freq = self.base.powf(-(2.0 * i as f64) / hd as f64);
            let (s, c) = (pos as f64 * freq).sin_cos();
            let s = sign * s;
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Applies interleaved-pair rotary encoding to `x[T×head_dim]` at the given
/// absolute positions.
pub fn rope_apply(x: &Array, positions: &[usize], params: &RopeParams) -> Result<Array> {
    params.validate()?;
    if x.shape().len() != 2 || x.cols() != params.head_dim {
        return Err(Error::shape(
            "rope_apply",
            format!("expected [T×{}], got {:?}", params.head_dim, x.shape()),
        ));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for {} rows", positions.len(), x.rows()),
        ));
    }
    let mut out = x.clone();
    if !params.enabled {
        return Ok(out);
    }
    for (t, &pos) in positions.iter().enumerate() {
        params.rotate(out.row_mut(t), pos, false);
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Array, h: f64) -> Result<Array>
where
    F: FnMut(&Array) -> f64,
{
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
