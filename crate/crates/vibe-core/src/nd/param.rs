//! Named parameter collections shared between model structs, tapes, and
//! optimizers.
//!
//! A [`ParamSet`] owns the authoritative copy of each parameter tensor. A
//! tape leases the storage (cheap `Arc` clone) and tags the leaf with this
//! set's unique id, which is how [`crate::nd::Tape::apply_param_grads`]
//! routes gradients back to the right slots even when several sets (e.g. a
//! frozen encoder and a trainable head) appear in one graph.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nd::scalar::Scalar;
use crate::nd::tensor::Tensor;

static NEXT_SET_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered, named collection of parameter tensors.
#[derive(Debug)]
pub struct ParamSet<T: Scalar> {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            uid: NEXT_SET_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Identity used to match tape leaves back to this set.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Register a tensor under a unique name; it becomes trainable.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub(crate) fn tensor_mut_by_index(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(&mut self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Clear accumulated gradients on every tensor.
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Turn gradient participation on or off for the whole set. Frozen
    /// parameters keep their values but no longer receive gradients.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in &mut self.tensors {
            t.requires_grad = trainable;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.tensors.iter().any(|t| t.requires_grad)
    }

    /// Order-sensitive digest of names, shapes, and exact value bits. Two
    /// calls agree iff no parameter changed; used to prove a frozen module
    /// stayed frozen across a training run.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the serialized content; stable across platforms
        // because values are hashed through their little-endian bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            eat(name.as_bytes());
            eat(&[0xff]);
            for &e in t.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            eat(&[0xfe]);
            let mut buf = Vec::new();
            for &v in t.values() {
                buf.clear();
                v.write_le(&mut buf);
                eat(&buf);
            }
        }
        h
    }
}

/// Scale all gradients in the set so their joint L2 norm is at most
/// `max_norm`; returns the pre-clip norm. Tensors without gradients
/// contribute zero.
pub fn clip_global_norm<T: Scalar>(ps: &mut ParamSet<T>, max_norm: f64) -> Result<f64> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(Error::config(format!(
            "gradient clip threshold must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0f64;
    for (_, _, t) in ps.iter() {
        if let Some(g) = t.grad() {
            for &v in g {
                sq += v.to_f64() * v.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient norm {norm} before clipping"
        )));
    }
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for t in &mut ps.tensors {
            if t.grad().is_some() {
                for v in t.grad_mut() {
                    *v *= s;
                }
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tape;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradients_route_back_to_the_owning_set_only() {
        let mut trainable = ParamSet::<f64>::new();
        let w = trainable
            .add("w", Tensor::from_f64s(&[2.0, 3.0], &[2]).unwrap())
            .unwrap();
        let mut frozen = ParamSet::<f64>::new();
        let c = frozen
            .add("c", Tensor::from_f64s(&[5.0, 7.0], &[2]).unwrap())
            .unwrap();
        frozen.set_trainable(false);

        let mut tape = Tape::new();
        let wv = tape.param(&trainable, w);
        let cv = tape.param(&frozen, c);
        let prod = tape.mul(wv, cv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        tape.apply_param_grads(&mut trainable);
        tape.apply_param_grads(&mut frozen);

        assert_eq!(trainable.get(w).grad().unwrap(), &[5.0, 7.0]);
        assert!(frozen.get(c).grad().is_none());
    }

    #[test]
    fn fingerprint_changes_with_values_and_not_otherwise() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps
            .add("w", Tensor::from_f64s(&[1.0, 2.0], &[2]).unwrap())
            .unwrap();
        let before = ps.fingerprint();
        assert_eq!(before, ps.fingerprint(), "fingerprint must be a pure function");
        ps.get_mut(id).values_mut()[0] = 1.5;
        assert_ne!(before, ps.fingerprint());
        ps.get_mut(id).values_mut()[0] = 1.0;
        assert_eq!(before, ps.fingerprint());
    }

    #[test]
    fn clip_scales_only_when_above_threshold() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::zeros(&[2])).unwrap();
        ps.get_mut(id).accumulate_grad(&[3.0, 4.0]); // norm 5
        let norm = clip_global_norm(&mut ps, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let g = ps.get(id).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);

        ps.zero_grads();
        ps.get_mut(id).accumulate_grad(&[0.3, 0.4]); // norm 0.5, below max
        let norm = clip_global_norm(&mut ps, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(ps.get(id).grad().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_rejects_non_positive_threshold() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(clip_global_norm(&mut ps, 0.0).is_err());
    }
}
