use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Coordinate-format tensor with sorted flat indices into a dense shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor<T> {
    shape: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Real> SparseTensor<T> {
    pub fn new(shape: Vec<usize>, indices: Vec<u32>, values: Vec<T>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::contract(format!(
                "sparse tensor has {} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel > u32::MAX as usize + 1 {
            return Err(Error::contract(format!(
                "dense shape {shape:?} exceeds 32-bit flat indexing"
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract("sparse indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= numel {
                return Err(Error::IndexOutOfRange {
                    index: last as usize,
                    len: numel,
                });
            }
        }
        Ok(SparseTensor {
            shape,
            indices,
            values,
        })
    }

    pub fn empty(shape: &[usize]) -> Self {
        SparseTensor {
            shape: shape.to_vec(),
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Keeps every entry of `dense` (including zeros).
    pub fn from_dense(dense: &Tensor<T>) -> Self {
        SparseTensor {
            shape: dense.shape().to_vec(),
            indices: (0..dense.len() as u32).collect(),
            values: dense.data().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn dense_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&self.shape);
        let data = out.data_mut();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            data[i as usize] = v;
        }
        out
    }

    pub fn cast<U: Real>(&self) -> SparseTensor<U> {
        SparseTensor {
            shape: self.shape.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// `dest[idx] += coeff · value` for each stored pair.
    pub(crate) fn axpy_into(&self, coeff: T, dest: &mut [T]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dest[i as usize] += coeff * v;
        }
    }

    /// Inner product with a dense buffer of the full shape.
    pub(crate) fn dot_dense(&self, dense: &[T]) -> T {
        let mut acc = T::zero();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            acc += dense[i as usize] * v;
        }
        acc
    }

    /// `out[n×c] += x[n×r] · S` where this tensor is viewed as an `r×c` matrix.
    pub fn left_matmul_into(&self, x: &Tensor<T>, out: &mut Tensor<T>) -> Result<()> {
        let c = *self.shape.last().unwrap_or(&1);
        let r = self.dense_len() / c;
        if x.cols() != r || out.cols() != c || out.rows() != x.rows() {
            return Err(Error::shape("sparse left_matmul", x.shape(), &self.shape));
        }
        let n = x.rows();
        let xd = x.data();
        let od = out.data_mut();
        for (&flat, &v) in self.indices.iter().zip(&self.values) {
            let (row, col) = (flat as usize / c, flat as usize % c);
            for s in 0..n {
                od[s * c + col] += xd[s * r + row] * v;
            }
        }
        Ok(())
    }
}

/// `dest + coeff · sparse`, leaving entries without a stored value untouched.
pub fn sparse_axpy<T: Real>(dest: &Tensor<T>, coeff: T, sparse: &SparseTensor<T>) -> Result<Tensor<T>> {
    if dest.shape() != sparse.shape() {
        return Err(Error::shape("sparse_axpy", dest.shape(), sparse.shape()));
    }
    if let Some(&last) = sparse.indices.last() {
        if last as usize >= dest.len() {
            return Err(Error::IndexOutOfRange {
                index: last as usize,
                len: dest.len(),
            });
        }
    }
    let mut out = dest.clone();
    sparse.axpy_into(coeff, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validates_indices() {
        assert!(SparseTensor::new(vec![4], vec![2, 1], vec![1.0f32, 2.0]).is_err());
        assert!(SparseTensor::new(vec![4], vec![1, 1], vec![1.0f32, 2.0]).is_err());
        assert!(matches!(
            SparseTensor::new(vec![4], vec![4], vec![1.0f32]),
            Err(Error::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert!(SparseTensor::new(vec![4], vec![0], vec![1.0f32, 2.0]).is_err());
    }

    #[test]
    fn axpy_edge_cases() {
        let dest = Tensor::vector(vec![1.0f64, 2.0, 3.0]);
        let sv = SparseTensor::new(vec![3], vec![1], vec![5.0]).unwrap();
        assert_eq!(sparse_axpy(&dest, 0.0, &sv).unwrap(), dest);
        assert_eq!(sparse_axpy(&dest, 1.0, &SparseTensor::empty(&[3])).unwrap(), dest);
        assert_eq!(sparse_axpy(&dest, 2.0, &sv).unwrap().data(), &[1.0, 12.0, 3.0]);
        assert!(sparse_axpy(&Tensor::<f64>::zeros(&[4]), 1.0, &sv).is_err());
    }

    proptest! {
        #[test]
        fn sparse_axpy_matches_densified(
            dense in prop::collection::vec(-5.0f64..5.0, 12),
            mask in prop::collection::vec(any::<bool>(), 12),
            coeff in -3.0f64..3.0,
        ) {
            let dest = Tensor::new(vec![3, 4], dense.clone()).unwrap();
            let idx: Vec<u32> = (0..12u32).filter(|&i| mask[i as usize]).collect();
            let vals: Vec<f64> = idx.iter().map(|&i| (i as f64 * 0.7).sin()).collect();
            let sv = SparseTensor::new(vec![3, 4], idx, vals).unwrap();
            let mut want = dest.clone();
            want.axpy(coeff, &sv.to_dense()).unwrap();
            let got = sparse_axpy(&dest, coeff, &sv).unwrap();
            prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-7);
        }

        #[test]
        fn left_matmul_matches_dense(
            xs in prop::collection::vec(-2.0f64..2.0, 6),
            mask in prop::collection::vec(any::<bool>(), 12),
        ) {
            let x = Tensor::new(vec![2, 3], xs).unwrap();
            let idx: Vec<u32> = (0..12u32).filter(|&i| mask[i as usize]).collect();
            let vals: Vec<f64> = idx.iter().map(|&i| i as f64 - 5.5).collect();
            let s = SparseTensor::new(vec![3, 4], idx, vals).unwrap();
            let want = x.matmul(&s.to_dense()).unwrap();
            let mut got = Tensor::zeros(&[2, 4]);
            s.left_matmul_into(&x, &mut got).unwrap();
            prop_assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        }
    }
}
