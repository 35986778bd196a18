use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;

use super::alloc;
use super::scalar::Scalar;
use crate::error::{shape_err, Result};

/// Heap buffer whose lifetime is reported to the allocation counter.
pub struct Storage<T: Scalar> {
    buf: Vec<T>,
}

impl<T: Scalar> Storage<T> {
    fn new(buf: Vec<T>) -> Self {
        alloc::on_alloc(buf.len() * std::mem::size_of::<T>());
        Self { buf }
    }

    pub fn bytes(&self) -> usize {
        self.buf.len() * std::mem::size_of::<T>()
    }
}

impl<T: Scalar> Drop for Storage<T> {
    fn drop(&mut self) {
        alloc::on_free(self.bytes());
    }
}

impl<T: Scalar> Clone for Storage<T> {
    fn clone(&self) -> Self {
        Self::new(self.buf.clone())
    }
}

impl<T: Scalar> Deref for Storage<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.buf
    }
}

impl<T: Scalar> DerefMut for Storage<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.buf
    }
}

/// Dense row-major array.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Storage<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.data.len().min(8);
        write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..n])?;
        if self.data.len() > n {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data[..] == other.data[..]
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Storage::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Storage::new(vec![value; n]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[], v)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Storage::new((0..n).map(&mut f).collect()),
        }
    }

    /// Standard normal draws, consumed from `rng` in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.bytes()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Storage::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Storage::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(format!("expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    pub fn sum_f64(&self) -> f64 {
        super::scalar::sum_f64(&self.data)
    }

    pub fn mean_f64(&self) -> f64 {
        if self.numel() == 0 {
            0.0
        } else {
            self.sum_f64() / self.numel() as f64
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Storage::new(
                self.data
                    .iter()
                    .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                    .collect(),
            ),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::NAN))
            .fold(0.0, f64::max)
    }

    /// Leading dims folded into one: `(prod(shape[..rank-2]), H, W)`.
    pub fn planes(&self) -> Result<(usize, usize, usize)> {
        let r = self.rank();
        if r < 2 {
            return Err(shape_err(format!(
                "expected an image-shaped tensor, got {:?}",
                self.shape
            )));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        Ok((self.numel() / (h * w).max(1), h, w))
    }
}
