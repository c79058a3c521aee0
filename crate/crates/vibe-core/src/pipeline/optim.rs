//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule shared by both training stages.
//!
//! Moments are accumulated in `f64` regardless of the parameter dtype so
//! that `f32` training does not lose update mass at small learning rates.
//! The schedule is linear warmup to the base rate followed by cosine decay
//! to zero: the first post-warmup epoch gets exactly the base rate and the
//! final epoch lands at the floor. Stage I uses `warmup = 0`; Stage II
//! warms up over 5 epochs.

use crate::error::{Error, Result};
use crate::nd::{ParamSet, Scalar};

/// Optimizer constants, recorded verbatim in every checkpoint manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// AdamW state bound to one [`ParamSet`]: first/second moments shaped like
/// their parameters, plus the shared step count.
#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    set_uid: u64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Ok(AdamW {
            cfg,
            set_uid: params.uid(),
            step: 0,
            m,
            v,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with the given learning rate:
    ///
    /// ```text
    /// m ← β₁ m + (1−β₁) g          v ← β₂ v + (1−β₂) g²
    /// w ← w − lr·wd·w − lr·(m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε)
    /// ```
    ///
    /// The decay is decoupled: it multiplies the weight, not the gradient.
    /// Parameters without a gradient are skipped entirely — no decay either
    /// — so frozen tensors stay bit-identical.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if params.uid() != self.set_uid {
            return Err(Error::contract(
                "optimizer is bound to a different parameter set".to_string(),
            ));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (index, (_, tensor)) in params.iter_mut().enumerate() {
            let Some(grad) = tensor.grad() else {
                continue;
            };
            if grad.len() != self.m[index].len() {
                return Err(Error::contract(format!(
                    "moment {index} has {} elements but the parameter has {}",
                    self.m[index].len(),
                    grad.len()
                )));
            }
            let (m, v) = (&mut self.m[index], &mut self.v[index]);
            for (j, g) in grad.iter().enumerate() {
                let g = g.to_f64();
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
            }
            let values = tensor.values_mut();
            for (j, w) in values.iter_mut().enumerate() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let old = w.to_f64();
                let new = old
                    - lr * self.cfg.weight_decay * old
                    - lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                *w = T::from_f64(new);
            }
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch` of `total`: linear warmup to `base`
/// over `warmup` epochs, then cosine decay so the first post-warmup epoch
/// gets exactly `base` and the final epoch lands at the cosine floor (zero
/// whenever `total > warmup + 1`).
pub fn cosine_lr(epoch: usize, total: usize, base: f64, warmup: usize) -> Result<f64> {
    if !base.is_finite() || base <= 0.0 {
        return Err(Error::config(format!(
            "base learning rate must be positive, got {base}"
        )));
    }
    if epoch == 0 || total == 0 || epoch > total {
        return Err(Error::config(format!(
            "schedule needs 1 <= epoch <= total, got epoch={epoch} total={total}"
        )));
    }
    if warmup >= total {
        return Err(Error::config(format!(
            "warmup ({warmup}) must be shorter than the run ({total} epochs)"
        )));
    }
    if epoch <= warmup {
        return Ok(base * epoch as f64 / warmup as f64);
    }
    let span = (total - 1 - warmup).max(1) as f64;
    let progress = (epoch - 1 - warmup) as f64 / span;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::Tensor;

    fn single_param(w: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![w], &[1]).unwrap()).unwrap();
        ps
    }

    fn set_grad(ps: &mut ParamSet<f64>, g: f64) {
        let id = ps.id_of("w").unwrap();
        ps.get_mut(id).zero_grad();
        ps.get_mut(id).accumulate_grad(&[g]);
    }

    #[test]
    fn first_step_matches_the_hand_computed_update() {
        // Quadratic f(w) = (w − 1)², w₀ = 0.5, so g = 2(w − 1) = −1.
        // m = 0.1·(−1), v = 0.001·1; bias correction at t=1 restores them to
        // m̂ = −1, v̂ = 1. With lr = 0.1, wd = 0.01, ε = 1e-8:
        //   w₁ = 0.5 − 0.1·0.01·0.5 + 0.1·1/(1 + 1e-8)
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut ps = single_param(0.5);
        let mut opt = AdamW::new(cfg, &ps).unwrap();
        set_grad(&mut ps, -1.0);
        opt.step(&mut ps, 0.1).unwrap();
        let expected = 0.5 - 0.1 * 0.01 * 0.5 + 0.1 * 1.0 / (1.0 + 1e-8);
        let got = ps.get(ps.id_of("w").unwrap()).values()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, want {expected}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn second_step_applies_bias_correction_at_t_2() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut ps = single_param(0.0);
        let mut opt = AdamW::new(cfg, &ps).unwrap();
        // Two steps with constant gradient 2.0, lr 0.5.
        let mut w = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            set_grad(&mut ps, 2.0);
            opt.step(&mut ps, 0.5).unwrap();
            m = 0.9 * m + 0.1 * 2.0;
            v = 0.999 * v + 0.001 * 4.0;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.5 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        let got = ps.get(ps.id_of("w").unwrap()).values()[0];
        assert!((got - w).abs() < 1e-15, "got {got}, want {w}");
    }

    #[test]
    fn descends_a_scalar_quadratic_to_its_minimum() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut ps = single_param(5.0);
        let mut opt = AdamW::new(cfg, &ps).unwrap();
        let id = ps.id_of("w").unwrap();
        for _ in 0..400 {
            let w = ps.get(id).values()[0];
            set_grad(&mut ps, 2.0 * (w - 1.0));
            opt.step(&mut ps, 0.05).unwrap();
        }
        let w = ps.get(id).values()[0];
        assert!((w - 1.0).abs() < 1e-3, "did not converge: w = {w}");
    }

    #[test]
    fn parameters_without_gradients_stay_bit_identical() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::<f64>::from_vec(vec![0.25], &[1]).unwrap()).unwrap();
        ps.add("b", Tensor::<f64>::from_vec(vec![0.75], &[1]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &ps).unwrap();
        let a = ps.id_of("a").unwrap();
        ps.get_mut(a).accumulate_grad(&[1.0]);
        opt.step(&mut ps, 0.1).unwrap();
        let b = ps.id_of("b").unwrap();
        assert_eq!(ps.get(b).values()[0].to_bits(), 0.75f64.to_bits());
        assert_ne!(ps.get(a).values()[0], 0.25);
    }

    #[test]
    fn optimizer_rejects_a_foreign_parameter_set() {
        let ps_a = single_param(0.0);
        let mut ps_b = single_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps_a).unwrap();
        assert!(matches!(
            opt.step(&mut ps_b, 0.1),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn warmup_ramps_linearly_then_hands_over_at_exactly_base() {
        let base = 3e-4;
        for k in 1..=5 {
            let lr = cosine_lr(k, 50, base, 5).unwrap();
            assert!((lr - base * k as f64 / 5.0).abs() < 1e-18);
        }
        // First post-warmup epoch sits at the cosine peak.
        assert_eq!(cosine_lr(6, 50, base, 5).unwrap(), base);
    }

    #[test]
    fn final_epoch_reaches_the_floor() {
        let base = 1e-4;
        // No warmup (Stage I): first epoch is already the peak.
        assert_eq!(cosine_lr(1, 100, base, 0).unwrap(), base);
        let last = cosine_lr(100, 100, base, 0).unwrap();
        assert!(last <= 0.01 * base, "final lr {last} above 1% of base");
        let last = cosine_lr(60, 60, base, 5).unwrap();
        assert!(last <= 0.01 * base, "final lr {last} above 1% of base");
    }

    #[test]
    fn schedule_never_goes_negative_and_rejects_misuse() {
        for epoch in 1..=60 {
            let lr = cosine_lr(epoch, 60, 1e-4, 5).unwrap();
            assert!(lr >= 0.0);
        }
        assert!(cosine_lr(0, 10, 1e-4, 0).is_err());
        assert!(cosine_lr(11, 10, 1e-4, 0).is_err());
        assert!(cosine_lr(1, 10, 0.0, 0).is_err());
        assert!(cosine_lr(1, 10, 1e-4, 10).is_err());
    }
}
