//! Dense row-major tensors with an optional gradient accumulator.
//!
//! Values live behind an `Arc` so that leasing a tensor onto a [`Tape`] is a
//! reference-count bump, not a copy; the optimizer mutates values in place
//! via copy-on-write once all tapes referencing them are dropped.
//!
//! [`Tape`]: crate::nd::Tape

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nd::scalar::Scalar;

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    /// When true, [`Tape::backward`](crate::nd::Tape::backward) accumulates
    /// d(loss)/d(this tensor) into leaves leased from it.
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Number of elements implied by a shape (empty shape = scalar = 1).
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from existing data. Extents must be positive and their
    /// product must equal `data.len()`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n = element_count(shape);
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// Convenience constructor from `f64` literals (handy in tests).
    pub fn from_f64s(values: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(values.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, T::ONE)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "zero extent in shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; element_count(shape)]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian-initialized tensor: `mean + std * N(0,1)`. Draws are made in
    /// `f64` and converted, so a given seed yields the same value stream in
    /// both precisions.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], mean: f64, std: f64) -> Self {
        let n = element_count(shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(mean + std * z)
            })
            .collect();
        Tensor::from_vec(data, shape).expect("randn shape")
    }

    /// Uniform-initialized tensor on `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = element_count(shape);
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::from_vec(data, shape).expect("rand_uniform shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // zero extents are rejected at construction
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    /// Shared handle to the value storage (used by the tape to lease leaves
    /// without copying).
    pub fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to values. Copy-on-write: cheap when no tape holds a
    /// lease on this tensor, otherwise the storage is cloned first.
    pub fn values_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Replace the whole value vector (shape must be preserved).
    pub fn set_values(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::dim(format!(
                "set_values: expected {} elements, got {}",
                self.len(),
                values.len()
            )));
        }
        self.data = Arc::new(values);
        Ok(())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient accumulator, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.len()]);
        }
        self.grad.as_mut().unwrap()
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.len());
        let g = self.grad_mut();
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::ZERO);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any value is non-finite. `context` names the tensor in the
    /// message.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite value {v} at flat index {i} in {context}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Convert elementwise to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|v| U::from_f64(v.to_f64())).collect();
        let mut t = Tensor::from_vec(data, &self.shape).expect("cast shape");
        t.requires_grad = self.requires_grad;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2, 0]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.len(), 4);
    }

    #[test]
    fn scalar_tensor_is_rank_zero_with_one_element() {
        let t = Tensor::<f32>::scalar(7.0);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.values(), &[7.0]);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(&[3]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn randn_is_seed_deterministic_and_precision_consistent() {
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::randn(&mut r1, &[8], 0.0, 1.0);
        let b = Tensor::<f32>::randn(&mut r2, &[8], 0.0, 1.0);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(*x as f32, *y, "f32 stream must be the cast f64 stream");
        }
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let t = Tensor::<f64>::from_vec(vec![1.0, f64::NAN], &[2]).unwrap();
        assert!(t.ensure_finite("unit").is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[5]), vec![1]);
        assert!(strides_for(&[]).is_empty());
    }
}
