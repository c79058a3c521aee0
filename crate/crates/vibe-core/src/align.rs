//! Stage-II alignment objective: pointwise MSE plus a sliced 1-Wasserstein
//! term over random unit-sphere projections.
//!
//! The latent `[B, d, H, W]` is read as `B*H*W` samples of dimension `d`
//! (the channel axis is the projected dimension), pooled across the batch
//! into one empirical distribution per call. Each slice projects both
//! clouds onto a random direction and pays the 1-D optimal transport cost,
//! which for equal-size samples is just the mean absolute difference after
//! sorting both sides.
//!
//! Projections are drawn from a caller-owned seeded stream so every
//! training step sees fresh directions while runs stay reproducible;
//! sorting ties break by original index and gradients follow the chosen
//! permutation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nd::{Scalar, Tape, Tensor, Var};

/// Mixing weights and projection-stream settings for [`alignment_loss`].
#[derive(Debug, Clone)]
pub struct AlignmentLossConfig {
    /// Weight of the sliced-Wasserstein term; 0 disables it.
    pub lambda: f64,
    /// Number of random projections per evaluation.
    pub num_projections: usize,
    /// Seed of the projection stream.
    pub projection_seed: u64,
}

impl Default for AlignmentLossConfig {
    fn default() -> Self {
        AlignmentLossConfig {
            lambda: 1.0,
            num_projections: 50,
            projection_seed: 0,
        }
    }
}

impl AlignmentLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_projections == 0 {
            return Err(Error::config(
                "need at least one projection".to_string(),
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// 1-D 1-Wasserstein distance between two equal-length samples: sort both
/// ascending and average the absolute differences of the paired order
/// statistics. Differentiable through the sorting permutations.
pub fn w1_1d<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 1 || sb.len() != 1 {
        return Err(Error::contract(format!(
            "w1_1d expects rank-1 samples, got {sa:?} and {sb:?}"
        )));
    }
    if sa != sb {
        return Err(Error::contract(format!(
            "w1_1d sample sizes differ: {} vs {} (no interpolation fallback)",
            sa[0], sb[0]
        )));
    }
    let a_sorted = tape.sort(a)?;
    let b_sorted = tape.sort(b)?;
    let diff = tape.sub(a_sorted, b_sorted)?;
    let dist = tape.abs(diff);
    tape.mean_all(dist)
}

/// Draw `m` directions uniformly on the unit sphere in `R^dim`: standard
/// normal vectors normalized to unit L2 norm (the measure-zero zero-norm
/// draw is rejected and redrawn). Returned as a `[dim, m]` matrix whose
/// columns are the directions, ready to right-multiply a `[S, dim]` sample
/// matrix.
pub fn sample_projections<T: Scalar, R: Rng>(
    dim: usize,
    m: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if dim == 0 || m == 0 {
        return Err(Error::config(format!(
            "projections need dim >= 1 and m >= 1, got dim={dim}, m={m}"
        )));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    while cols.len() < m {
        let draw = Tensor::<f64>::randn(rng, &[dim], 0.0, 1.0);
        let norm = draw.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            cols.push(draw.values().iter().map(|v| v / norm).collect());
        }
    }
    let mut data = Vec::with_capacity(dim * m);
    for row in 0..dim {
        for col in &cols {
            data.push(col[row]);
        }
    }
    Tensor::from_f64s(&data, &[dim, m])
}

/// Seeded stream of projection sets: one training run owns one sampler, so
/// every loss evaluation sees fresh directions while the whole sequence is
/// reproducible from the seed.
#[derive(Debug, Clone)]
pub struct ProjectionSampler {
    rng: ChaCha8Rng,
}

impl ProjectionSampler {
    pub fn new(seed: u64) -> Self {
        ProjectionSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_config(cfg: &AlignmentLossConfig) -> Self {
        Self::new(cfg.projection_seed)
    }

    pub fn sample<T: Scalar>(&mut self, dim: usize, m: usize) -> Result<Tensor<T>> {
        sample_projections(dim, m, &mut self.rng)
    }
}

/// Sliced 1-Wasserstein distance between two latent batches `[B, d, H, W]`:
/// the mean over `m` random slices of the 1-D transport cost between the
/// projected channel-vector clouds.
pub fn swd<T: Scalar>(
    tape: &mut Tape<T>,
    z_hat: Var,
    z: Var,
    m: usize,
    sampler: &mut ProjectionSampler,
) -> Result<Var> {
    let shape = tape.shape(z_hat).to_vec();
    if shape != tape.shape(z) {
        return Err(Error::contract(format!(
            "swd shapes differ: {shape:?} vs {:?}",
            tape.shape(z)
        )));
    }
    if shape.len() != 4 {
        return Err(Error::contract(format!(
            "swd expects [B, d, H, W] latents, got {shape:?}"
        )));
    }
    if m == 0 {
        return Err(Error::config("swd needs at least one projection".to_string()));
    }
    let (b, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let samples = b * h * w;
    let theta = sampler.sample::<T>(d, m)?;
    let theta = tape.constant(&theta);

    // [B,d,H,W] -> [S,d] sample matrix, project, then one sorted row per slice.
    let mut project = |x: Var| -> Result<Var> {
        let moved = tape.permute(x, &[0, 2, 3, 1])?;
        let flat = tape.reshape(moved, &[samples, d])?;
        let proj = tape.matmul(flat, theta)?;
        let sliced = tape.permute(proj, &[1, 0])?;
        tape.sort(sliced)
    };
    let a = project(z_hat)?;
    let bb = project(z)?;
    let diff = tape.sub(a, bb)?;
    let dist = tape.abs(diff);
    tape.mean_all(dist)
}

/// Eq.-style combined objective: `mse(z_hat, z) + lambda * swd(z_hat, z)`.
/// With `lambda == 0` the SWD term is skipped entirely and the result is
/// exactly the MSE.
pub fn alignment_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z_hat: Var,
    z: Var,
    cfg: &AlignmentLossConfig,
    sampler: &mut ProjectionSampler,
) -> Result<Var> {
    cfg.validate()?;
    let mse = tape.mse(z_hat, z)?;
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    let sw = swd(tape, z_hat, z, cfg.num_projections, sampler)?;
    let weighted = tape.scale(sw, T::from_f64(cfg.lambda));
    tape.add(mse, weighted)
}
