//! Dense row-major tensors over f32/f64 plus the raw numeric kernels used by
//! the tape. Only the trailing-axis operations the models need; no general
//! broadcasting.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar element type. Training runs in f32; gradient checks in f64.
pub trait Elem:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Draw from a standard normal using the given RNG.
    fn sample_normal<R: Rng>(rng: &mut R) -> Self;
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::ZERO; n],
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Gaussian-initialized parameter tensor with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let s = E::from_f64(std);
        let data = (0..n).map(|_| E::sample_normal(rng) * s).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: true,
        }
    }

    /// Zero-initialized parameter tensor (requires_grad set).
    pub fn param_zeros(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.requires_grad = true;
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[E] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy conversion to f32 storage (for checkpoints).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f64() as f32).collect()
    }

    /// Replace contents from an f32 blob of matching length.
    pub fn load_f32(&mut self, blob: &[f32]) -> Result<()> {
        if blob.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "load_f32",
                lhs: self.shape.clone(),
                rhs: vec![blob.len()],
            });
        }
        for (dst, &src) in self.data.iter_mut().zip(blob) {
            *dst = E::from_f64(src as f64);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. `out` is accumulated into; callers zero it first when needed.
// ---------------------------------------------------------------------------

/// out (m x n) += a (m x k) @ b (k x n)
pub fn matmul_into<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out (k x n) += a^T (a: m x k) @ b (m x n)
pub fn matmul_ta_into<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out (m x n) += a (m x k) @ b^T (b: n x k)
pub fn matmul_tb_into<E: Elem>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Numerically stable in-place softmax of one row (max-shifted).
pub fn softmax_row_in_place<E: Elem>(row: &mut [E]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = E::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = E::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Index of the row maximum; ties broken by lowest index.
pub fn argmax<E: Elem>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu_value<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let scale = E::from_f64(GELU_SCALE);
    let coef = E::from_f64(GELU_COEF);
    let inner = scale * (x + coef * x * x * x);
    half * x * (E::ONE + inner.tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad<E: Elem>(x: E) -> E {
    let half = E::from_f64(0.5);
    let scale = E::from_f64(GELU_SCALE);
    let coef = E::from_f64(GELU_COEF);
    let three = E::from_f64(3.0);
    let inner = scale * (x + coef * x * x * x);
    let t = inner.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * scale * (E::ONE + three * coef * x * x)
}
