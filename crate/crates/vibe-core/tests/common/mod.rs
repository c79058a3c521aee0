//! Shared drivers for the integration suites. The gradient sweep lives here
//! so the per-op diagnostics and the acceptance run execute the exact same
//! instances.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vibe_core::align::{swd, ProjectionSampler};
use vibe_core::error::Result;
use vibe_core::nd::{check_gradients, GradCheckReport, PadMode, Tape, Tensor, Var};
use vibe_core::qformer::{QFormer, QFormerConfig};
use vibe_core::vae::{elbo_loss, reparameterize, TscVae, VaeConfig};

/// Probe step for central differences (scaled per element inside the checker).
pub const FD_EPS: f64 = 1e-5;
/// Relative tolerance for a single op.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for composed graphs (losses, full model forwards).
pub const COMPOSED_TOL: f64 = 1e-3;
/// Random instances per op.
pub const INSTANCES: usize = 20;

/// Aggregate of one op's instances.
#[derive(Debug, Clone)]
pub struct OpSweep {
    pub name: &'static str,
    pub instances: usize,
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Every differentiable tape op, one entry per public method.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "ln",
    "abs",
    "gelu",
    "scale",
    "shift",
    "clamp",
    "matmul",
    "permute",
    "reshape",
    "narrow",
    "concat",
    "softmax",
    "layer_norm",
    "sum_axes",
    "mean_axes",
    "sum_all",
    "mean_all",
    "mse",
    "sort",
    "conv2d",
    "upsample_nearest_2x",
    "resize_bilinear",
];

fn seed_for(name: &str, instance: usize) -> u64 {
    // FNV-1a over the name, mixed with the instance index.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h ^ ((instance as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15))
}

fn rand_shape(rng: &mut ChaCha8Rng, rank_lo: usize, rank_hi: usize, ext_hi: usize) -> Vec<usize> {
    let rank = rng.gen_range(rank_lo..=rank_hi);
    (0..rank).map(|_| rng.gen_range(1..=ext_hi)).collect()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::<f64>::randn(rng, shape, 0.0, 1.0).with_requires_grad(true)
}

/// Signed uniform magnitude in `[lo, hi]` — keeps values away from zero for
/// ops with a kink or a pole there.
fn signed_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64s(&vals, shape).unwrap().with_requires_grad(true)
}

/// A same-rank broadcast partner: each extent is kept or squashed to 1.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .map(|&e| if rng.gen_bool(0.5) { e } else { 1 })
        .collect();
    // Avoid the degenerate everything-1 partner half the time to keep the
    // reduce-over-broadcast-axes path mixed with the plain path.
    if s.iter().all(|&e| e == 1) && rng.gen_bool(0.5) {
        s = shape.to_vec();
    }
    s
}

/// Scalarize an arbitrary-shape output with fixed random weights so permuted
/// or re-routed elements change the loss.
fn weighted_mean(tape: &mut Tape<f64>, out: Var, w: Var) -> Result<Var> {
    let prod = tape.mul(out, w)?;
    tape.mean_all(prod)
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    // requires_grad stays false: the checker treats this input as a constant.
    Tensor::<f64>::randn(rng, shape, 0.0, 1.0)
}

/// Run one op instance; the match arms double as a catalog of the shapes and
/// parameter ranges each op is exercised with.
fn run_instance(name: &str, i: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(name, i));
    let r = &mut rng;
    let check_name = format!("{name}[{i}]");

    match name {
        "add" | "sub" | "mul" => {
            let sa = rand_shape(r, 1, 3, 4);
            let sb = if i % 2 == 0 { sa.clone() } else { broadcast_partner(r, &sa) };
            let a = randn(r, &sa);
            let b = randn(r, &sb);
            let out_shape = if sa.len() >= sb.len() { sa.clone() } else { sb.clone() };
            let w = weights_for(r, &out_shape);
            let op = name.to_string();
            check_gradients(&check_name, &[a, b, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = match op.as_str() {
                    "add" => tape.add(v[0], v[1])?,
                    "sub" => tape.sub(v[0], v[1])?,
                    _ => tape.mul(v[0], v[1])?,
                };
                weighted_mean(tape, o, v[2])
            })
        }
        "div" => {
            let sa = rand_shape(r, 1, 3, 4);
            let sb = if i % 2 == 0 { sa.clone() } else { broadcast_partner(r, &sa) };
            let a = randn(r, &sa);
            let b = signed_uniform(r, &sb, 0.4, 1.6); // denominator away from 0
            let out_shape = if sa.len() >= sb.len() { sa.clone() } else { sb.clone() };
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[a, b, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.div(v[0], v[1])?;
                weighted_mean(tape, o, v[2])
            })
        }
        "neg" | "gelu" => {
            let s = rand_shape(r, 1, 3, 4);
            let x = randn(r, &s);
            let w = weights_for(r, &s);
            let op = name.to_string();
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = if op == "neg" { tape.neg(v[0]) } else { tape.gelu(v[0]) };
                weighted_mean(tape, o, v[1])
            })
        }
        "exp" => {
            let s = rand_shape(r, 1, 3, 4);
            let n: usize = s.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
            let x = Tensor::from_f64s(&vals, &s).unwrap().with_requires_grad(true);
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.exp(v[0]);
                weighted_mean(tape, o, v[1])
            })
        }
        "ln" => {
            let s = rand_shape(r, 1, 3, 4);
            let n: usize = s.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..3.0)).collect();
            let x = Tensor::from_f64s(&vals, &s).unwrap().with_requires_grad(true);
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.ln(v[0]);
                weighted_mean(tape, o, v[1])
            })
        }
        "abs" => {
            let s = rand_shape(r, 1, 3, 4);
            let x = signed_uniform(r, &s, 0.2, 1.5); // kink at 0 stays outside probes
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.abs(v[0]);
                weighted_mean(tape, o, v[1])
            })
        }
        "scale" | "shift" => {
            let s = rand_shape(r, 1, 3, 4);
            let x = randn(r, &s);
            let c = {
                let m = r.gen_range(0.3..2.0);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            };
            let w = weights_for(r, &s);
            let op = name.to_string();
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = if op == "scale" { tape.scale(v[0], c) } else { tape.shift(v[0], c) };
                weighted_mean(tape, o, v[1])
            })
        }
        "clamp" => {
            let (lo, hi) = (-0.7, 0.7);
            let s = rand_shape(r, 1, 3, 4);
            let n: usize = s.iter().product();
            // Keep every element clear of the clamp edges so the probe window
            // never straddles a kink.
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let mut v: f64 = r.gen_range(-1.2..1.2);
                    if (v.abs() - 0.7).abs() < 5e-3 {
                        v = 0.5 * v.signum();
                    }
                    v
                })
                .collect();
            let x = Tensor::from_f64s(&vals, &s).unwrap().with_requires_grad(true);
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.clamp(v[0], lo, hi);
                weighted_mean(tape, o, v[1])
            })
        }
        "matmul" => {
            let (m, k, n) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
            let (a, b, out_shape) = if i % 2 == 0 {
                (
                    randn(r, &[m, k]),
                    randn(r, &[k, n]),
                    vec![m, n],
                )
            } else {
                // Broadcast batched: [2, 1, m, k] @ [c, k, n] -> [2, c, m, n].
                let c = r.gen_range(1..=2);
                (
                    randn(r, &[2, 1, m, k]),
                    randn(r, &[c, k, n]),
                    vec![2, c, m, n],
                )
            };
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[a, b, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.matmul(v[0], v[1])?;
                weighted_mean(tape, o, v[2])
            })
        }
        "permute" => {
            let s = rand_shape(r, 2, 4, 3);
            let mut axes: Vec<usize> = (0..s.len()).collect();
            for j in (1..axes.len()).rev() {
                axes.swap(j, r.gen_range(0..=j));
            }
            let x = randn(r, &s);
            let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.permute(v[0], &axes)?;
                weighted_mean(tape, o, v[1])
            })
        }
        "reshape" => {
            let s = rand_shape(r, 2, 3, 4);
            let n: usize = s.iter().product();
            let new_shape = match i % 3 {
                0 => vec![n],
                1 => vec![1, n],
                _ => {
                    let mut v = s.clone();
                    v.reverse(); // same element count, different grouping
                    v
                }
            };
            let x = randn(r, &s);
            let w = weights_for(r, &new_shape);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.reshape(v[0], &new_shape)?;
                weighted_mean(tape, o, v[1])
            })
        }
        "narrow" => {
            let s = rand_shape(r, 2, 3, 5);
            let axis = r.gen_range(0..s.len());
            let len = r.gen_range(1..=s[axis]);
            let start = r.gen_range(0..=s[axis] - len);
            let x = randn(r, &s);
            let mut out_shape = s.clone();
            out_shape[axis] = len;
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.narrow(v[0], axis, start, len)?;
                weighted_mean(tape, o, v[1])
            })
        }
        "concat" => {
            let base = rand_shape(r, 2, 3, 3);
            let axis = r.gen_range(0..base.len());
            let parts = r.gen_range(2..=3);
            let mut tensors = Vec::new();
            let mut total = 0;
            for _ in 0..parts {
                let mut s = base.clone();
                s[axis] = r.gen_range(1..=3);
                total += s[axis];
                tensors.push(randn(r, &s));
            }
            let mut out_shape = base.clone();
            out_shape[axis] = total;
            tensors.push(weights_for(r, &out_shape));
            check_gradients(&check_name, &tensors, FD_EPS, OP_TOL, move |tape, v| {
                let xs = &v[..v.len() - 1];
                let o = tape.concat(xs, axis)?;
                weighted_mean(tape, o, v[v.len() - 1])
            })
        }
        "softmax" => {
            let s = rand_shape(r, 1, 3, 4);
            let x = randn(r, &s);
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.softmax(v[0])?;
                weighted_mean(tape, o, v[1])
            })
        }
        "layer_norm" => {
            let mut s = rand_shape(r, 1, 3, 4);
            *s.last_mut().unwrap() = r.gen_range(2..=5); // rows of length >= 2
            let x = randn(r, &s);
            let w = weights_for(r, &s);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.layer_norm(v[0], 1e-5)?;
                weighted_mean(tape, o, v[1])
            })
        }
        "sum_axes" | "mean_axes" => {
            let s = rand_shape(r, 2, 3, 4);
            let mut axes: Vec<usize> = (0..s.len()).filter(|_| r.gen_bool(0.5)).collect();
            if axes.is_empty() {
                axes.push(r.gen_range(0..s.len()));
            }
            let keepdim = i % 2 == 0;
            let out_shape: Vec<usize> = if keepdim {
                s.iter()
                    .enumerate()
                    .map(|(k, &e)| if axes.contains(&k) { 1 } else { e })
                    .collect()
            } else {
                s.iter()
                    .enumerate()
                    .filter(|(k, _)| !axes.contains(k))
                    .map(|(_, &e)| e)
                    .collect()
            };
            let x = randn(r, &s);
            let w = weights_for(r, &out_shape);
            let op = name.to_string();
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = if op == "sum_axes" {
                    tape.sum_axes(v[0], &axes, keepdim)?
                } else {
                    tape.mean_axes(v[0], &axes, keepdim)?
                };
                weighted_mean(tape, o, v[1])
            })
        }
        "sum_all" | "mean_all" => {
            let s = rand_shape(r, 1, 3, 4);
            let x = randn(r, &s);
            let op = name.to_string();
            check_gradients(&check_name, &[x], FD_EPS, OP_TOL, move |tape, v| {
                if op == "sum_all" {
                    tape.sum_all(v[0])
                } else {
                    tape.mean_all(v[0])
                }
            })
        }
        "mse" => {
            let s = rand_shape(r, 1, 3, 4);
            let a = randn(r, &s);
            let b = randn(r, &s);
            check_gradients(&check_name, &[a, b], FD_EPS, OP_TOL, |tape, v| {
                tape.mse(v[0], v[1])
            })
        }
        "sort" => {
            let rows = r.gen_range(1..=3);
            let cols = r.gen_range(2..=5);
            // Enforce a per-row gap so no probe can cross a permutation
            // boundary (sort is only piecewise differentiable).
            let mut vals = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                loop {
                    let row: Vec<f64> = (0..cols).map(|_| r.gen_range(-2.0..2.0)).collect();
                    let mut sorted = row.clone();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    if sorted.windows(2).all(|p| p[1] - p[0] > 1e-3) {
                        vals.extend(row);
                        break;
                    }
                }
            }
            let x = Tensor::from_f64s(&vals, &[rows, cols])
                .unwrap()
                .with_requires_grad(true);
            let w = weights_for(r, &[rows, cols]);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.sort(v[0])?;
                weighted_mean(tape, o, v[1])
            })
        }
        "conv2d" => {
            let (b, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
            let (h, w_ext) = (r.gen_range(3..=5), r.gen_range(3..=5));
            let (kh, kw) = (r.gen_range(1..=3), r.gen_range(1..=3));
            let stride = [(1, 1), (2, 1), (1, 2), (2, 2)][i % 4];
            let pad = if i % 2 == 0 { PadMode::Same } else { PadMode::Valid };
            let x = randn(r, &[b, cin, h, w_ext]);
            let k = randn(r, &[cout, cin, kh, kw]);
            check_gradients(&check_name, &[x, k], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.conv2d(v[0], v[1], stride, pad)?;
                tape.mean_all(o)
            })
        }
        "upsample_nearest_2x" => {
            let s = [
                r.gen_range(1..=2),
                r.gen_range(1..=2),
                r.gen_range(1..=3),
                r.gen_range(1..=3),
            ];
            let out_shape = [s[0], s[1], 2 * s[2], 2 * s[3]];
            let x = randn(r, &s);
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, |tape, v| {
                let o = tape.upsample_nearest_2x(v[0])?;
                weighted_mean(tape, o, v[1])
            })
        }
        "resize_bilinear" => {
            let s = [
                r.gen_range(1..=2),
                r.gen_range(1..=2),
                r.gen_range(2..=4),
                r.gen_range(2..=4),
            ];
            let (oh, ow) = (r.gen_range(1..=5), r.gen_range(1..=5));
            let out_shape = [s[0], s[1], oh, ow];
            let x = randn(r, &s);
            let w = weights_for(r, &out_shape);
            check_gradients(&check_name, &[x, w], FD_EPS, OP_TOL, move |tape, v| {
                let o = tape.resize_bilinear(v[0], oh, ow)?;
                weighted_mean(tape, o, v[1])
            })
        }
        other => panic!("no gradient instances defined for op '{other}'"),
    }
}

/// Run `INSTANCES` random instances of one op and aggregate.
pub fn sweep_op(name: &'static str) -> Result<OpSweep> {
    let mut out = OpSweep {
        name,
        instances: INSTANCES,
        probes: 0,
        max_rel_err: 0.0,
    };
    for i in 0..INSTANCES {
        let rep = run_instance(name, i)?;
        out.probes += rep.probes;
        out.max_rel_err = out.max_rel_err.max(rep.max_rel_err);
    }
    Ok(out)
}

/// Sweep every op; returns per-op aggregates (errors abort with the failing
/// probe's diagnostics).
pub fn sweep_all_ops() -> Result<Vec<OpSweep>> {
    OP_NAMES.iter().map(|n| sweep_op(n)).collect()
}

/// Composed check: the full Stage-I objective through a real (toy-sized)
/// model — encoder, reparameterization, decoder, reconstruction + KL — with
/// gradients probed at the input signal.
pub fn sweep_elbo_composed(instances: usize) -> Result<OpSweep> {
    let mut out = OpSweep {
        name: "elbo-through-model",
        instances,
        probes: 0,
        max_rel_err: 0.0,
    };
    for i in 0..instances {
        let seed = seed_for("elbo", i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = VaeConfig::toy();
        let (c, t) = (cfg.channels, cfg.timepoints);
        let model = TscVae::<f64>::new(cfg, &mut rng)?;
        let x = Tensor::<f64>::randn(&mut rng, &[1, 1, c, t], 0.0, 1.0).with_requires_grad(true);
        let rep = check_gradients(
            &format!("elbo-through-model[{i}]"),
            &[x],
            FD_EPS,
            COMPOSED_TOL,
            move |tape, v| {
                let lat = model.encode_batch(tape, v[0])?;
                // Fixed noise stream: every probe re-evaluation must see the
                // same draw or the difference quotient measures the noise.
                let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                let z = reparameterize(tape, lat, &mut noise)?;
                let x_hat = model.decode_batch(tape, z)?;
                elbo_loss(tape, x_hat, v[0], lat, 0.5)
            },
        )?;
        out.probes += rep.probes;
        out.max_rel_err = out.max_rel_err.max(rep.max_rel_err);
    }
    Ok(out)
}

/// Composed check: the Stage-II objective `mse + lambda * swd` probed at both
/// the predicted and the target latents.
pub fn sweep_alignment_composed(instances: usize) -> Result<OpSweep> {
    let mut out = OpSweep {
        name: "alignment-loss",
        instances,
        probes: 0,
        max_rel_err: 0.0,
    };
    for i in 0..instances {
        let seed = seed_for("alignment", i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3, 2, 2];
        let z_hat = Tensor::<f64>::randn(&mut rng, &shape, 0.0, 1.0).with_requires_grad(true);
        let z = Tensor::<f64>::randn(&mut rng, &shape, 0.0, 1.0).with_requires_grad(true);
        let lambda = 0.7;
        let rep = check_gradients(
            &format!("alignment-loss[{i}]"),
            &[z_hat, z],
            FD_EPS,
            COMPOSED_TOL,
            move |tape, v| {
                let mse = tape.mse(v[0], v[1])?;
                // Same projections on every re-evaluation.
                let mut sampler = ProjectionSampler::new(seed ^ 0x5117);
                let sw = swd(tape, v[0], v[1], 5, &mut sampler)?;
                let weighted = tape.scale(sw, lambda);
                tape.add(mse, weighted)
            },
        )?;
        out.probes += rep.probes;
        out.max_rel_err = out.max_rel_err.max(rep.max_rel_err);
    }
    Ok(out)
}

/// Composed check: the full mapper (trunk + projection head) probed at the
/// visual-embedding input.
pub fn sweep_mapper_composed(instances: usize) -> Result<OpSweep> {
    let mut out = OpSweep {
        name: "mapper-forward",
        instances,
        probes: 0,
        max_rel_err: 0.0,
    };
    for i in 0..instances {
        let seed = seed_for("mapper", i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = QFormerConfig::toy([2, 2, 3]);
        let input_dim = cfg.input_dim;
        let mapper = QFormer::<f64>::new(cfg, &mut rng)?;
        let e_v = Tensor::<f64>::randn(&mut rng, &[2, 4, input_dim], 0.0, 1.0)
            .with_requires_grad(true);
        let w = Tensor::<f64>::randn(&mut rng, &[2, 2, 2, 3], 0.0, 1.0);
        let rep = check_gradients(
            &format!("mapper-forward[{i}]"),
            &[e_v, w],
            FD_EPS,
            COMPOSED_TOL,
            move |tape, v| {
                let z = mapper.map_embeddings(tape, v[0])?;
                let prod = tape.mul(z, v[1])?;
                tape.mean_all(prod)
            },
        )?;
        out.probes += rep.probes;
        out.max_rel_err = out.max_rel_err.max(rep.max_rel_err);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transport oracles: the tape SWD pinned against a from-scratch scalar
// re-implementation, and the 1-D cost against exhaustive assignment.

/// SWD value through the tape, in f64.
pub fn tape_swd(z_hat: &Tensor<f64>, z: &Tensor<f64>, m: usize, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(z_hat);
    let b = tape.leaf(z);
    let mut sampler = ProjectionSampler::new(seed);
    let v = swd(&mut tape, a, b, m, &mut sampler).unwrap();
    tape.item(v).unwrap()
}

/// Scalar re-implementation: same definition, none of the tape machinery.
/// Directions are drawn from the same seeded stream (normal draws normalized
/// to unit length, zero-norm draws rejected); each slice projects the
/// `B*H*W` channel vectors of both clouds, sorts, and pays the mean absolute
/// difference of paired order statistics.
pub fn scalar_swd(z_hat: &Tensor<f64>, z: &Tensor<f64>, m: usize, seed: u64) -> f64 {
    use rand_distr::StandardNormal;

    let shape = z_hat.shape();
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(m);
    while dirs.len() < m {
        let draw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = draw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            dirs.push(draw.iter().map(|v| v / norm).collect());
        }
    }

    // Channel vector of sample (bi, hi, wi), projected onto one direction.
    let project = |vals: &[f64], dir: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let mut dot = 0.0;
                    for (c, dc) in dir.iter().enumerate() {
                        dot += vals[((bi * d + c) * h + hi) * w + wi] * dc;
                    }
                    out.push(dot);
                }
            }
        }
        out
    };

    let mut total = 0.0;
    for dir in &dirs {
        let mut pa = project(z_hat.values(), dir);
        let mut pb = project(z.values(), dir);
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = pa.len() as f64;
        total += pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
    }
    total / m as f64
}

/// Minimum mean |a_i - b_sigma(i)| over every permutation sigma, by
/// exhaustive enumeration (Heap's algorithm).
pub fn brute_force_assignment(a: &[f64], b: &[f64]) -> f64 {
    fn cost(a: &[f64], b: &[f64], perm: &[usize]) -> f64 {
        a.iter()
            .zip(perm)
            .map(|(x, &j)| (x - b[j]).abs())
            .sum::<f64>()
            / a.len() as f64
    }
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = cost(a, b, &perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(a, b, &perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// 1-D transport cost through the tape.
pub fn tape_w1(a: &[f64], b: &[f64]) -> f64 {
    use vibe_core::align::w1_1d;

    let mut tape = Tape::<f64>::new();
    let av = tape.from_values(a.to_vec(), &[a.len()], false).unwrap();
    let bv = tape.from_values(b.to_vec(), &[b.len()], false).unwrap();
    let d = w1_1d(&mut tape, av, bv).unwrap();
    tape.item(d).unwrap()
}

// ---------------------------------------------------------------------------
// KL oracle: the closed form and a Monte-Carlo estimate of the same
// divergence.

/// Closed-form KL through the tape.
pub fn kl_closed_form(mu: &Tensor<f64>, lv: &Tensor<f64>) -> f64 {
    use vibe_core::vae::{kl_gaussian, LatentGaussian};

    let mut tape = Tape::new();
    let lat = LatentGaussian {
        mu: tape.leaf(mu),
        log_var: tape.leaf(lv),
    };
    let kl = kl_gaussian(&mut tape, lat).unwrap();
    tape.item(kl).unwrap()
}

/// MC estimate plus its standard error. The integrand per draw is
/// `sum_dims(log q - log p) / B`, matching the closed form's batch mean:
/// with `z = mu + sigma * eps`, each dimension contributes
/// `-lv/2 - eps^2/2 + z^2/2`.
pub fn kl_monte_carlo(mu: &[f64], lv: &[f64], batch: usize, n: usize, seed: u64) -> (f64, f64) {
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut integrand = 0.0;
        for (&m, &l) in mu.iter().zip(lv) {
            let eps: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * l).exp() * eps;
            integrand += -0.5 * l - 0.5 * eps * eps + 0.5 * z * z;
        }
        integrand /= batch as f64;
        sum += integrand;
        sum_sq += integrand * integrand;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}
