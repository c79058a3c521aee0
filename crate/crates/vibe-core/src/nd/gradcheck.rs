//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the graph from scratch for every probe, so it
//! exercises the same code path users run, not a cached forward. Probes use
//! central differences with a step scaled to the magnitude of the element
//! being perturbed, and errors are measured relatively:
//! `|a - n| / max(1, |a|, |n|)`.
//!
//! Checks run in `f64` only; single-precision forward kernels are covered
//! separately by comparing their outputs against the `f64` path.

use crate::error::{Error, Result};
use crate::nd::tape::{Tape, Var};
use crate::nd::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Number of scalar elements probed.
    pub probes: usize,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst probe.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Verify the gradient of a scalar-valued graph with central differences.
///
/// `build` receives a fresh tape plus one leaf per input tensor and returns
/// the scalar loss node. Inputs with `requires_grad == false` are treated as
/// constants and skipped. Fails with a numeric error when any probe's
/// relative error exceeds `tol`.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "gradient check '{name}': build must return a scalar loss"
            )));
        }
        Ok((tape, vars, loss))
    };

    // Analytic pass.
    let (mut tape, vars, loss) = eval(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    // Numeric probes.
    let mut report = GradCheckReport {
        name: name.to_string(),
        probes: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        for (ei, &x) in input.values().iter().enumerate() {
            let h = eps * x.abs().max(1.0);

            work[ti].values_mut()[ei] = x + h;
            let (tape_p, _, loss_p) = eval(&work)?;
            let fp = tape_p.value(loss_p)[0];

            work[ti].values_mut()[ei] = x - h;
            let (tape_m, _, loss_m) = eval(&work)?;
            let fm = tape_m.value(loss_m)[0];

            work[ti].values_mut()[ei] = x;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::numeric(format!(
                    "gradient check '{name}': non-finite derivative at input {ti} element {ei} \
                     (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }

    if report.max_rel_err > tol {
        return Err(Error::numeric(format!(
            "gradient check '{name}' failed: rel err {:.3e} > tol {tol:.1e} at input {} element {} \
             (analytic {:.6e}, numeric {:.6e}; {} probes)",
            report.max_rel_err,
            report.worst.0,
            report.worst.1,
            report.worst_analytic,
            report.worst_numeric,
            report.probes,
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn passes_on_a_correct_composite_graph() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&mut rng, &[3, 4], 0.0, 1.0).with_requires_grad(true);
        let w = Tensor::<f64>::randn(&mut rng, &[4, 2], 0.0, 1.0).with_requires_grad(true);
        let report = check_gradients("affine-gelu-mean", &[x, w], 1e-6, 1e-8, |tape, vars| {
            let h = tape.matmul(vars[0], vars[1])?;
            let a = tape.gelu(h);
            tape.mean_all(a)
        })
        .unwrap();
        assert_eq!(report.probes, 12 + 8);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn catches_a_deliberately_wrong_gradient() {
        // exp's true derivative is exp(x); a graph computing mean(exp(x)) but
        // probed against a scaled loss would disagree. Simulate a wrong
        // gradient by checking mean(2*exp(x)) while building mean(exp(x))
        // only on the analytic pass via a sign flag... simpler: verify the
        // checker flags a non-differentiable kink probed exactly at zero.
        let x = Tensor::<f64>::from_f64s(&[0.0], &[1])
            .unwrap()
            .with_requires_grad(true);
        // |x| at x=0: analytic rule gives 0, central difference gives 0 too
        // (symmetric), so that passes; instead probe relu-like clamp edge
        // with an offset loss that shifts the kink into the probe interval.
        let err = check_gradients("kinked", &[x], 1e-3, 1e-10, |tape, vars| {
            let shifted = tape.shift(vars[0], 0.5e-3); // kink inside [x-h, x+h]
            let a = tape.abs(shifted);
            tape.mean_all(a)
        });
        assert!(err.is_err(), "kink inside the probe window must be caught");
    }

    #[test]
    fn constant_inputs_are_skipped() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0], &[2])
            .unwrap()
            .with_requires_grad(true);
        let c = Tensor::<f64>::from_f64s(&[3.0, 4.0], &[2]).unwrap();
        let report = check_gradients("skip-constant", &[x, c], 1e-6, 1e-8, |tape, vars| {
            let p = tape.mul(vars[0], vars[1])?;
            tape.mean_all(p)
        })
        .unwrap();
        assert_eq!(report.probes, 2);
    }
}
