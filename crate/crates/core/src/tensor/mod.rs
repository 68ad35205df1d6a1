//! Dense row-major tensors with tracked buffers, the op suite the transformer
//! blocks are built from, and a counter-based RNG.

pub mod heap;
pub mod ops;
mod rng;
pub mod tracker;

use std::fmt::Debug;
use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

pub use rng::Rng;
pub use tracker::{track_scope, Category, ScopeReport};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

/// Force sequential kernels. Row-parallel kernels keep a fixed per-row
/// reduction order, so this only removes threading, never changes results.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}

/// Scalar types a [`Tensor`] can hold. `f32` is the working precision; `f64`
/// exists for verification oracles.
pub trait Element:
    Float + Default + Debug + Send + Sync + 'static + std::iter::Sum + std::ops::AddAssign
{
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn write_le(self, out: &mut [u8]);
    fn read_le(bytes: &[u8]) -> Self;
    /// Move an `f32` tensor into this element type (no copy for `f32`).
    fn from_f32_tensor(t: Tensor<f32>) -> Tensor<Self>;
}

impl Element for f32 {
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn write_le(self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn from_f32_tensor(t: Tensor<f32>) -> Tensor<f32> {
        t
    }
}

impl Element for f64 {
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn write_le(self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn from_f32_tensor(t: Tensor<f32>) -> Tensor<f64> {
        t.cast()
    }
}

/// Row-major tensor whose buffer is accounted in the allocation tracker for
/// as long as it lives.
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    category: Category,
}

impl<F: Element> Tensor<F> {
    fn register(shape: Vec<usize>, data: Vec<F>, category: Category) -> Self {
        tracker::on_alloc((data.len() * F::BYTES) as u64, category);
        Tensor {
            shape,
            data,
            category,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::register(shape.to_vec(), vec![F::zero(); n], Category::General)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::register(shape.to_vec(), vec![value; n], Category::General)
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self::register(shape.to_vec(), data, Category::General))
    }

    pub fn scalar(value: F) -> Self {
        Self::register(vec![1], vec![value], Category::General)
    }

    /// Re-tag the buffer for accounting purposes.
    pub fn with_category(mut self, category: Category) -> Self {
        let bytes = self.bytes();
        tracker::on_free(bytes, self.category);
        tracker::on_alloc(bytes, category);
        self.category = category;
        self
    }

    pub fn category(&self) -> Category {
        self.category
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * F::BYTES) as u64
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<F> {
        tracker::on_free(self.bytes(), self.category);
        std::mem::take(&mut self.data)
    }

    /// Leading dimension of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension (the whole length for rank 1).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        let data = self.data.iter().map(|v| G::from_f64(v.as_f64())).collect();
        Tensor::<G>::register(self.shape.clone(), data, self.category)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Surface NaN/Inf as an error attributed to `op`.
    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Bitwise equality of shape and contents.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<F: Element> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Self::register(self.shape.clone(), self.data.clone(), self.category)
    }
}

impl<F: Element> Drop for Tensor<F> {
    fn drop(&mut self) {
        tracker::on_free(self.bytes(), self.category);
    }
}

impl<F: Element> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<F: Element> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Norm-wise relative error `‖a − b‖₂ / ‖b‖₂` (absolute when `b` is zero).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn ensure_finite_rejects_nan() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            t.ensure_finite("test"),
            Err(Error::NonFinite { op: "test" })
        ));
    }

    #[test]
    fn into_vec_releases_tracking() {
        let before = tracker::live_bytes();
        let v = Tensor::<f64>::zeros(&[10]).into_vec();
        assert_eq!(v.len(), 10);
        assert_eq!(tracker::live_bytes(), before);
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.1, -2.5, 3.0e-7]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(back.bitwise_eq(&t));
    }
}
