//! Dense row-major tensors over `f32`/`f64`, the value carrier for the
//! whole pipeline.

use std::fmt;

use num_traits::Float;

/// Element type tag, mirrored in the on-disk container format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Scalar types the engine runs on. Training uses `f32`; the
/// finite-difference verification paths instantiate everything at `f64`.
pub trait Real: Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar_tensor(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> T {
        assert_eq!(self.len(), 1, "scalar() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    /// Row-major element access by multi-index. Cold-path helper; kernels
    /// compute offsets directly.
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        let mut o = 0;
        for (i, (&ix, &d)) in idx.iter().zip(self.dims.iter()).enumerate() {
            assert!(ix < d, "index {} out of bounds at axis {} (dim {})", ix, i, d);
            o = o * d + ix;
        }
        o
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(n, self.data.len(), "reshape to {:?} changes element count", dims);
        self.dims = dims;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().fold(T::infinity(), |a, &b| a.min(b))
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_f64(src: &Tensor<f64>) -> Self {
        Self {
            dims: src.dims.clone(),
            data: src.data.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    #[should_panic(expected = "does not match dims")]
    fn length_mismatch_panics() {
        let _ = Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::<f64>::zeros(&[4]);
        assert!(t.all_finite());
        t.data_mut()[2] = f64::NAN;
        assert!(!t.all_finite());
    }

    #[test]
    fn dtype_round_trip() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.25, 0.125]);
        let d = t.to_f64();
        let back = Tensor::<f32>::from_f64(&d);
        assert_eq!(t, back);
    }
}
