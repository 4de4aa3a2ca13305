use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Real;

/// Dense row-major tensor.
///
/// A tensor of shape `[]` is a scalar holding one element. All dimensions of
/// a non-scalar tensor are positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
pub(crate) const GELU_CUBIC: f64 = 0.044715;

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Builds a tensor whose shape is known to be consistent with `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    /// Row-major matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = Arc::new(rows.iter().flat_map(|r| r.iter().copied()).collect());
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = Arc::new((0..n).map(|_| T::lit(normal.sample(rng))).collect());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::contract(format!("reshape {:?} to {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        // v - v is NaN exactly when v is infinite or NaN; lane sums keep this vectorizable.
        let mut acc = [T::zero(); 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for l in 0..8 {
                acc[l] += c[l] - c[l];
            }
        }
        acc.iter().all(|a| *a == T::zero()) && tail.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect::<Vec<_>>()
                .into(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", &self.shape, &other.shape));
        }
        kernels::axpy(alpha, &other.data, Arc::<Vec<T>>::make_mut(&mut self.data).as_mut_slice());
        Ok(())
    }

    /// Adds `other` tiled along the leading rows: `other` must have the same
    /// number of columns and a row count dividing ours (a bias vector is the
    /// one-row case).
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        let c = self.cols();
        if other.cols() != c || !self.rows().is_multiple_of(other.rows()) {
            return Err(Error::shape("add_broadcast", &self.shape, &other.shape));
        }
        let block = other.len();
        let mut out = self.clone();
        for chunk in out.data_mut().chunks_mut(block) {
            kernels::axpy(T::one(), &other.data, chunk);
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.len() as f64)
    }

    pub fn sq_norm(&self) -> T {
        kernels::dot(&self.data, &self.data)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(kernels::dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Standard matrix product `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&self) -> Self {
        let c = self.cols();
        let mut out = (*self.data).clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    /// Per-vector normalization over the last dimension followed by
    /// `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let d = self.cols();
        if d < 2 {
            return Err(Error::contract("layer_norm needs a last dimension of at least 2"));
        }
        if gamma.len() != d {
            return Err(Error::shape("layer_norm gamma", &self.shape, &gamma.shape));
        }
        if beta.len() != d {
            return Err(Error::shape("layer_norm beta", &self.shape, &beta.shape));
        }
        if eps <= T::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let mut out = vec![T::zero(); self.len()];
        for (src, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = row_stats(src, eps);
            for i in 0..d {
                dst[i] = gamma.data[i] * ((src[i] - mean) * rstd) + beta.data[i];
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Rows `[start, start+count)` of the matrix view.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        let c = self.cols();
        if start + count > self.rows() || count == 0 {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of range for {} rows",
                start + count,
                self.rows()
            )));
        }
        Ok(Tensor::from_parts(
            vec![count, c],
            self.data[start * c..(start + count) * c].to_vec(),
        ))
    }

    /// Mean over rows of the matrix view: `[r×c] → [c]`.
    pub fn mean_rows(&self) -> Self {
        let c = self.cols();
        let r = self.rows();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            kernels::axpy(T::one(), row, &mut out);
        }
        let inv = T::one() / T::lit(r as f64);
        for v in &mut out {
            *v *= inv;
        }
        Tensor::from_parts(vec![c], out)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    // 0.5·(1 + tanh u) = 1 / (1 + e^(-2u))
    x / (T::one() + (T::lit(-2.0) * c * (x + a * x * x * x)).exp())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let s = T::one() / (T::one() + (T::lit(-2.0) * c * (x + a * x * x * x)).exp());
    s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Mean and reciprocal standard deviation (biased variance) of one vector.
pub(crate) fn row_stats<T: Real>(x: &[T], eps: T) -> (T, T) {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_zero_and_reference() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::zeros(&[2, 2])).unwrap(), Tensor::zeros(&[2, 2]));
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax_lastdim();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[2f64.ln(), 0.0]).softmax_lastdim();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = t(&[2], &[1000.0, 0.0]).softmax_lastdim();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let c = t(&[3], &[2.0, 2.0, 2.0]);
        assert_eq!(c.layer_norm(&ones, &zeros, 1e-5).unwrap(), zeros);

        let x = t(&[2], &[1.0, -1.0]);
        let y = x
            .layer_norm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let x = t(&[2, 3], &[1.0, 5.0, -2.0, 0.5, 0.1, 9.0]);
        let beta = t(&[3], &[0.1, 0.2, 0.3]);
        let y = x.layer_norm(&Tensor::zeros(&[3]), &beta, 1e-5).unwrap();
        assert_eq!(y.row(0), beta.data());
        assert_eq!(y.row(1), beta.data());
    }

    #[test]
    fn activations() {
        let g = t(&[3], &[0.0, 10.0, -3.0]).gelu();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 10.0).abs() < 1e-6);
        let r = t(&[2], &[-3.0, 3.0]).relu();
        assert_eq!(r.data(), &[0.0, 3.0]);
    }

    #[test]
    fn broadcast_add_tiles_rows() {
        let a = Tensor::<f64>::zeros(&[4, 2]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = a.add_broadcast(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(a.add_broadcast(&Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
