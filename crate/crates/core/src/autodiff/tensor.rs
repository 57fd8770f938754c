//! Dense 4-D tensors in (batch, channel, height, width) layout.

use crate::error::{Error, Result};
use num_traits::{Float, NumAssign, NumCast};
use std::fmt::Debug;

/// Element type of the engine: f32 in production, f64 in gradient-check mode.
pub trait Scalar: Float + NumAssign + Send + Sync + Debug + 'static {
    #[inline]
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to scalar")
    }

    #[inline]
    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// (batch, channels, rows, cols) shape tuple.
pub type Dims = (usize, usize, usize, usize);

/// Row-major dense tensor over [`Dims`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Validating constructor: dims positive, length consistent, all values
    /// finite.
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        let (n, c, h, w) = dims;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("tensor dims must be positive, got {dims:?}")));
        }
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {:?} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for op outputs whose finiteness follows from the
    /// inputs; skips the elementwise scan.
    pub(crate) fn from_raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.0 * dims.1 * dims.2 * dims.3);
        Self { dims, data }
    }

    pub fn zeros(dims: Dims) -> Self {
        let (n, c, h, w) = dims;
        Self::from_raw(dims, vec![T::zero(); n * c * h * w])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims.0
    }

    pub fn channels(&self) -> usize {
        self.dims.1
    }

    pub fn height(&self) -> usize {
        self.dims.2
    }

    pub fn width(&self) -> usize {
        self.dims.3
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.1 + c) * self.dims.2 + y) * self.dims.3 + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Convert elementwise to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4::from_raw(
            self.dims,
            self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        )
    }
}
