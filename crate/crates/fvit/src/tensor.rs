//! Dense n-dimensional arrays in row-major order.
//!
//! `Tensor` is the universal value type of the crate: feature maps are
//! `[N, C, H, W]`, weights are `[O, I, K, K]`, Gabor parameter vectors are
//! `[C]`, losses are `[1]`. Data is reference counted so cloning a tensor
//! (which the tape does constantly) is O(1); the optimizer uses
//! [`Tensor::data_mut`] to update parameters in place when it holds the only
//! reference.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from raw parts. The element count must equal the
    /// product of `shape` and every dimension must be at least 1.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "axis {axis} of shape {shape:?} is zero; all dimensions must be >= 1"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the elements, copying only if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Reinterpret the same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// The single element of a `[1]` tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Accumulate `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "accumulation on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + s;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Cast elementwise through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Offset of `[n, c, h, w]` in a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx4(n, c, h, w)]
    }

    /// Expect an exact rank, naming the tensor in the error.
    pub fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.ndim() != ndim {
            return Err(Error::Dimension(format!(
                "{} must have rank {}, got shape {:?}",
                what, ndim, self.shape
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> std::ops::Index<usize> for Tensor<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

/// Largest relative difference, normalized by `max(1, |a|, |b|)` so that
/// near-zero entries are compared absolutely.
pub fn max_rel_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}
