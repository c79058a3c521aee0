//! Stage I: spatio-temporal convolutional VAE over M/EEG recordings.
//!
//! The encoder views a recording as a 1-channel image `[1, C, T]` (sensor
//! channels x timepoints) and compresses it through separable
//! temporal-then-spatial residual conv blocks and two stride-2 reductions
//! into a Gaussian latent `(d, H, W)` with `H = ceil(ceil(C/2)/2)` and
//! `W = ceil(ceil(T/2)/2)`. The decoder mirrors the encoder with
//! nearest-neighbor upsampling and a final bilinear resize back to exactly
//! `(C, T)`.
//!
//! Architecture notes (recorded in checkpoint manifests so alternates stay
//! comparable): GELU nonlinearity; group normalization over feature
//! channels inside blocks; log-variance clamped to `[-30, 20]`; fan-in
//! scaled uniform init for conv weights, zero biases, and a zero-initialized
//! log-variance head so the posterior starts near unit variance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nd::{ParamId, ParamSet, PadMode, Scalar, Tape, Tensor, Var};

/// Log-variance clamp bounds applied before any exponentiation.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

const NORM_EPS: f64 = 1e-5;

/// One separable conv block: temporal kernel `(1, k_t)` then spatial kernel
/// `(k_s, 1)`, with `k_s` strictly smaller than the spatial extent it runs
/// at (this is what distinguishes the block from a full-height spatial
/// convolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsConvPlusConfig {
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    /// Spatial extent (sensor-channel axis) at the block's input resolution.
    pub channel_count: usize,
}

impl TsConvPlusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel == 0 || self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "temporal kernel must be odd and positive, got {}",
                self.temporal_kernel
            )));
        }
        if self.spatial_kernel == 0 || self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "spatial kernel must be odd and positive, got {}",
                self.spatial_kernel
            )));
        }
        if self.spatial_kernel >= self.channel_count {
            return Err(Error::config(format!(
                "spatial kernel {} must be strictly smaller than the spatial extent {}",
                self.spatial_kernel, self.channel_count
            )));
        }
        Ok(())
    }
}

/// Model shape. `latent_hw` derives from `channels`/`timepoints`; presets
/// reproduce the published latent shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeConfig {
    /// Sensor channels C.
    pub channels: usize,
    /// Timepoints T.
    pub timepoints: usize,
    /// Latent feature channels d.
    pub latent_channels: usize,
    /// Feature width of the conv trunk.
    pub width: usize,
    /// Temporal kernels of the three residual blocks, outermost first.
    pub temporal_kernels: [usize; 3],
    /// Spatial kernel shared by all residual blocks.
    pub spatial_kernel: usize,
    /// Temporal extent of the stem / output head kernel `(1, k)`.
    pub stem_kernel: usize,
}

impl VaeConfig {
    /// 63-channel, 250-sample EEG windows; latent (4, 16, 63).
    pub fn eeg() -> Self {
        VaeConfig {
            channels: 63,
            timepoints: 250,
            latent_channels: 4,
            width: 32,
            temporal_kernels: [15, 11, 7],
            spatial_kernel: 3,
            stem_kernel: 25,
        }
    }

    /// 271-channel, 200-sample MEG windows; latent (4, 68, 50).
    pub fn meg() -> Self {
        VaeConfig {
            channels: 271,
            timepoints: 200,
            ..Self::eeg()
        }
    }

    /// Tiny shape for fast tests; latent (4, 2, 3). The spatial extent
    /// shrinks to 2 after both reductions, so the spatial kernel is 1.
    pub fn toy() -> Self {
        VaeConfig {
            channels: 8,
            timepoints: 12,
            latent_channels: 4,
            width: 6,
            temporal_kernels: [5, 3, 3],
            spatial_kernel: 1,
            stem_kernel: 5,
        }
    }

    /// Spatial extents seen by the three residual blocks (before each
    /// reduction and at the bottleneck).
    fn block_extents(&self) -> [usize; 3] {
        let c1 = ceil_div2(self.channels);
        [self.channels, c1, ceil_div2(c1)]
    }

    /// Latent spatial shape (H, W) after the two stride-2 stages.
    pub fn latent_hw(&self) -> (usize, usize) {
        (
            ceil_div2(ceil_div2(self.channels)),
            ceil_div2(ceil_div2(self.timepoints)),
        )
    }

    /// Full latent shape (d, H, W).
    pub fn latent_shape(&self) -> [usize; 3] {
        let (h, w) = self.latent_hw();
        [self.latent_channels, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("timepoints", self.timepoints),
            ("latent_channels", self.latent_channels),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.stem_kernel == 0 || self.stem_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "stem kernel must be odd and positive, got {}",
                self.stem_kernel
            )));
        }
        for (kt, extent) in self.temporal_kernels.iter().zip(self.block_extents()) {
            TsConvPlusConfig {
                temporal_kernel: *kt,
                spatial_kernel: self.spatial_kernel,
                channel_count: extent,
            }
            .validate()?;
        }
        Ok(())
    }
}

fn ceil_div2(n: usize) -> usize {
    n.div_ceil(2)
}

/// Training hyperparameters for Stage I.
#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    /// KL weight after warmup.
    pub beta: f64,
    /// Epochs over which beta ramps linearly from beta/E_w to beta.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl VaeTrainConfig {
    pub fn eeg() -> Self {
        VaeTrainConfig {
            beta: 1e-4,
            warmup_epochs: 10,
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 64,
        }
    }

    pub fn meg() -> Self {
        VaeTrainConfig {
            batch_size: 16,
            ..Self::eeg()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup epochs must satisfy 0 < E_w <= E, got E_w={} E={}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::config(
                "learning rate and batch size must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// KL weight for a 1-based epoch: `beta * min(1, epoch / E_w)`.
pub fn kl_warmup(epoch: usize, cfg: &VaeTrainConfig) -> f64 {
    cfg.beta * (epoch as f64 / cfg.warmup_epochs as f64).min(1.0)
}

/// Gaussian posterior of one batch of recordings: `mu` and `log_var` nodes
/// of shape `[B, d, H, W]` on the tape that produced them.
#[derive(Debug, Clone, Copy)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_var: Var,
}

// ---- Parameter bundles ------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockP {
    tconv: ConvP,
    tnorm: NormP,
    sconv: ConvP,
    snorm: NormP,
    /// 1x1 conv on the residual path when in/out feature counts differ.
    skip: Option<ConvP>,
}

/// The full two-sided model. Parameters live in a [`ParamSet`] so the same
/// struct serves training (leased trainable) and frozen inference.
pub struct TscVae<T: Scalar> {
    cfg: VaeConfig,
    params: ParamSet<T>,
    stem: ConvP,
    enc_blocks: [BlockP; 3],
    enc_downs: [(ConvP, NormP); 2],
    enc_head: ConvP,
    dec_in: ConvP,
    dec_blocks: [BlockP; 3],
    dec_head: ConvP,
}

impl<T: Scalar> TscVae<T> {
    /// Build with fan-in-scaled uniform conv weights from `rng`. Fails on an
    /// invalid config.
    pub fn new<R: Rng>(cfg: VaeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let d = cfg.latent_channels;
        let mut ps = ParamSet::new();

        let conv = |ps: &mut ParamSet<T>, rng: &mut R, name: &str, co: usize, ci: usize, kh: usize, kw: usize| -> Result<ConvP> {
            let fan_in = (ci * kh * kw) as f64;
            let limit = 1.0 / fan_in.sqrt();
            let wt = Tensor::rand_uniform(rng, &[co, ci, kh, kw], -limit, limit);
            Ok(ConvP {
                w: ps.add(format!("{name}.w"), wt)?,
                b: ps.add(format!("{name}.b"), Tensor::zeros(&[co, 1, 1]))?,
            })
        };
        let norm = |ps: &mut ParamSet<T>, name: &str, f: usize| -> Result<NormP> {
            Ok(NormP {
                scale: ps.add(format!("{name}.scale"), Tensor::ones(&[f, 1, 1]))?,
                shift: ps.add(format!("{name}.shift"), Tensor::zeros(&[f, 1, 1]))?,
            })
        };
        let block = |ps: &mut ParamSet<T>, rng: &mut R, name: &str, fi: usize, fo: usize, kt: usize, ks: usize| -> Result<BlockP> {
            Ok(BlockP {
                tconv: conv(ps, rng, &format!("{name}.tconv"), fo, fi, 1, kt)?,
                tnorm: norm(ps, &format!("{name}.tnorm"), fo)?,
                sconv: conv(ps, rng, &format!("{name}.sconv"), fo, fo, ks, 1)?,
                snorm: norm(ps, &format!("{name}.snorm"), fo)?,
                skip: if fi == fo {
                    None
                } else {
                    Some(conv(ps, rng, &format!("{name}.skip"), fo, fi, 1, 1)?)
                },
            })
        };

        let ks = cfg.spatial_kernel;
        let [kt0, kt1, kt2] = cfg.temporal_kernels;
        let stem = conv(&mut ps, rng, "enc.stem", w, 1, 1, cfg.stem_kernel)?;
        let enc_blocks = [
            block(&mut ps, rng, "enc.block0", w, w, kt0, ks)?,
            block(&mut ps, rng, "enc.block1", w, w, kt1, ks)?,
            block(&mut ps, rng, "enc.block2", w, w, kt2, ks)?,
        ];
        let enc_downs = [
            (
                conv(&mut ps, rng, "enc.down0.conv", w, w, 3, 3)?,
                norm(&mut ps, "enc.down0.norm", w)?,
            ),
            (
                conv(&mut ps, rng, "enc.down1.conv", w, w, 3, 3)?,
                norm(&mut ps, "enc.down1.norm", w)?,
            ),
        ];
        // Head emits [mu | log_var]; its bias starts at zero so the initial
        // posterior sits near N(mu, 1) and the KL term engages gently.
        let enc_head = conv(&mut ps, rng, "enc.head", 2 * d, w, 1, 1)?;

        let dec_in = conv(&mut ps, rng, "dec.in", w, d, 1, 1)?;
        let dec_blocks = [
            block(&mut ps, rng, "dec.block0", w, w, kt2, ks)?,
            block(&mut ps, rng, "dec.block1", w, w, kt1, ks)?,
            block(&mut ps, rng, "dec.block2", w, w, kt0, ks)?,
        ];
        let dec_head = conv(&mut ps, rng, "dec.head", 1, w, 1, cfg.stem_kernel)?;

        Ok(TscVae {
            cfg,
            params: ps,
            stem,
            enc_blocks,
            enc_downs,
            enc_head,
            dec_in,
            dec_blocks,
            dec_head,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Stop all parameters from receiving gradients (Stage II contract).
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, p: ConvP, stride: (usize, usize)) -> Result<Var> {
        let w = tape.param(&self.params, p.w);
        let b = tape.param(&self.params, p.b);
        let y = tape.conv2d(x, w, stride, PadMode::Same)?;
        tape.add(y, b)
    }

    fn group_norm(&self, tape: &mut Tape<T>, x: Var, p: NormP) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, f, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let groups = norm_groups(f);
        let grouped = tape.reshape(x, &[b * groups, (f / groups) * h * w])?;
        let normed = tape.layer_norm(grouped, NORM_EPS)?;
        let back = tape.reshape(normed, &shape)?;
        let scale = tape.param(&self.params, p.scale);
        let shift = tape.param(&self.params, p.shift);
        let scaled = tape.mul(back, scale)?;
        tape.add(scaled, shift)
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, p: BlockP) -> Result<Var> {
        let t = self.conv(tape, x, p.tconv, (1, 1))?;
        let t = self.group_norm(tape, t, p.tnorm)?;
        let t = tape.gelu(t);
        let s = self.conv(tape, t, p.sconv, (1, 1))?;
        let s = self.group_norm(tape, s, p.snorm)?;
        let s = tape.gelu(s);
        let skip = match p.skip {
            Some(sp) => self.conv(tape, x, sp, (1, 1))?,
            None => x,
        };
        tape.add(s, skip)
    }

    fn down(&self, tape: &mut Tape<T>, x: Var, p: (ConvP, NormP)) -> Result<Var> {
        let y = self.conv(tape, x, p.0, (2, 2))?;
        let y = self.group_norm(tape, y, p.1)?;
        Ok(tape.gelu(y))
    }

    /// Encode a batch `[B, 1, C, T]` into posterior parameters, each
    /// `[B, d, H, W]`. Deterministic given parameters.
    pub fn encode_batch(&self, tape: &mut Tape<T>, x: Var) -> Result<LatentGaussian> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.channels || shape[3] != self.cfg.timepoints {
            return Err(Error::dim(format!(
                "encoder expects [B, 1, {}, {}], got {shape:?}",
                self.cfg.channels, self.cfg.timepoints
            )));
        }
        let mut h = self.conv(tape, x, self.stem, (1, 1))?;
        h = self.block(tape, h, self.enc_blocks[0])?;
        h = self.down(tape, h, self.enc_downs[0])?;
        h = self.block(tape, h, self.enc_blocks[1])?;
        h = self.down(tape, h, self.enc_downs[1])?;
        h = self.block(tape, h, self.enc_blocks[2])?;
        let head = self.conv(tape, h, self.enc_head, (1, 1))?;
        let d = self.cfg.latent_channels;
        let mu = tape.narrow(head, 1, 0, d)?;
        let lv_raw = tape.narrow(head, 1, d, d)?;
        let log_var = tape.clamp(lv_raw, T::from_f64(LOG_VAR_MIN), T::from_f64(LOG_VAR_MAX));
        Ok(LatentGaussian { mu, log_var })
    }

    /// Decode a latent batch `[B, d, H, W]` back to recordings
    /// `[B, 1, C, T]`.
    pub fn decode_batch(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        let (lh, lw) = self.cfg.latent_hw();
        if shape.len() != 4
            || shape[1] != self.cfg.latent_channels
            || shape[2] != lh
            || shape[3] != lw
        {
            return Err(Error::dim(format!(
                "decoder expects [B, {}, {lh}, {lw}], got {shape:?}",
                self.cfg.latent_channels
            )));
        }
        let mut h = self.conv(tape, z, self.dec_in, (1, 1))?;
        h = self.block(tape, h, self.dec_blocks[0])?;
        h = tape.upsample_nearest_2x(h)?;
        h = self.block(tape, h, self.dec_blocks[1])?;
        h = tape.upsample_nearest_2x(h)?;
        h = self.block(tape, h, self.dec_blocks[2])?;
        let y = self.conv(tape, h, self.dec_head, (1, 1))?;
        tape.resize_bilinear(y, self.cfg.channels, self.cfg.timepoints)
    }

    /// Posterior for one recording `(1, C, T)`; returned tensors are
    /// `(d, H, W)`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.shape() != [1, self.cfg.channels, self.cfg.timepoints] {
            return Err(Error::dim(format!(
                "encode expects (1, {}, {}), got {:?}",
                self.cfg.channels,
                self.cfg.timepoints,
                x.shape()
            )));
        }
        let mut tape = Tape::new();
        let xb = tape.from_values(
            x.values().to_vec(),
            &[1, 1, self.cfg.channels, self.cfg.timepoints],
            false,
        )?;
        let lat = self.encode_batch(&mut tape, xb)?;
        let ls = self.cfg.latent_shape();
        Ok((
            Tensor::from_vec(tape.value(lat.mu).to_vec(), &ls)?,
            Tensor::from_vec(tape.value(lat.log_var).to_vec(), &ls)?,
        ))
    }

    /// Reconstruction for one latent `(d, H, W)`; returns `(1, C, T)`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let ls = self.cfg.latent_shape();
        if z.shape() != ls {
            return Err(Error::dim(format!(
                "decode expects {:?}, got {:?}",
                ls,
                z.shape()
            )));
        }
        let mut tape = Tape::new();
        let zb = tape.from_values(z.values().to_vec(), &[1, ls[0], ls[1], ls[2]], false)?;
        let y = self.decode_batch(&mut tape, zb)?;
        Tensor::from_vec(
            tape.value(y).to_vec(),
            &[1, self.cfg.channels, self.cfg.timepoints],
        )
    }
}

/// Largest group count <= 8 that divides the feature width (so tiny test
/// widths still normalize sensibly).
fn norm_groups(features: usize) -> usize {
    (1..=features.min(8)).rev().find(|g| features.is_multiple_of(*g)).unwrap_or(1)
}

/// Draw `z = mu + eps * exp(0.5 log_var)` with `eps ~ N(0, I)` from `rng`.
/// Gradients flow to `mu` and `log_var`; the noise is a constant.
pub fn reparameterize<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    lat: LatentGaussian,
    rng: &mut R,
) -> Result<Var> {
    let shape = tape.shape(lat.mu).to_vec();
    let eps = Tensor::<T>::randn(rng, &shape, 0.0, 1.0);
    let eps = tape.constant(&eps);
    let half = tape.scale(lat.log_var, T::from_f64(0.5));
    let std = tape.exp(half);
    let noise = tape.mul(eps, std)?;
    tape.add(lat.mu, noise)
}

/// KL(q || N(0, I)) in closed form: `0.5 * sum(mu^2 + exp(lv) - 1 - lv)`
/// summed over latent elements and averaged over the batch (axis 0).
pub fn kl_gaussian<T: Scalar>(tape: &mut Tape<T>, lat: LatentGaussian) -> Result<Var> {
    let mu2 = tape.mul(lat.mu, lat.mu)?;
    let var = tape.exp(lat.log_var);
    let sum = tape.add(mu2, var)?;
    let shifted = tape.shift(sum, T::from_f64(-1.0));
    let integrand = tape.sub(shifted, lat.log_var)?;
    let rank = tape.shape(integrand).len();
    let per_sample = if rank > 1 {
        let axes: Vec<usize> = (1..rank).collect();
        tape.sum_axes(integrand, &axes, false)?
    } else {
        integrand
    };
    let mean = tape.mean_all(per_sample)?;
    Ok(tape.scale(mean, T::from_f64(0.5)))
}

/// Training objective: element-mean reconstruction MSE plus
/// `beta_cur * kl_gaussian`.
pub fn elbo_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x_hat: Var,
    x: Var,
    lat: LatentGaussian,
    beta_cur: f64,
) -> Result<Var> {
    let recon = tape.mse(x_hat, x)?;
    let kl = kl_gaussian(tape, lat)?;
    let weighted = tape.scale(kl, T::from_f64(beta_cur));
    tape.add(recon, weighted)
}
