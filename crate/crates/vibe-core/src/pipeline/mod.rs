//! End-to-end orchestration: run configuration, the optimizer and its
//! schedule, checkpointing, the two training stages, inference, protocol
//! evaluation, embedding statistics, and the region-ablation sweep.
//!
//! Everything here is deterministic given `(seed, config, data)`: random
//! streams are derived from the run seed per purpose, file contents carry
//! no timestamps, and parallel evaluation merges results in a fixed order.
//! One training run owns one process; there is no shared mutable global
//! state.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod infer;
pub mod optim;
pub mod stage1;
pub mod stage2;
pub mod stats;

pub use ablate::{ablate_regions, AblateOptions, ConditionResult};
pub use checkpoint::{load_stage1, load_stage2};
pub use config::KvConfig;
pub use evaluate::{evaluate, load_predictions, thread_cap, Predictions};
pub use infer::{infer_end_to_end, infer_reconstruction};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use stage1::{train_stage1, Stage1Options, Stage1Summary};
pub use stage2::{train_stage2, Stage2Options, Stage2Summary};
pub use stats::{stats_table, FamilyStats};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::synth::splitmix64;
use crate::data::Recording;
use crate::error::Result;
use crate::nd::{Tape, Tensor};
use crate::vae::TscVae;

/// Purpose tags for deriving independent random streams from one run seed.
pub(crate) const TAG_MODEL_INIT: u64 = 0x01;
pub(crate) const TAG_VAL_SPLIT: u64 = 0x02;
pub(crate) const TAG_EPOCH_ORDER: u64 = 0x03;
pub(crate) const TAG_REPARAM: u64 = 0x04;
pub(crate) const TAG_MAPPER_INIT: u64 = 0x05;
pub(crate) const TAG_PROJECTIONS: u64 = 0x06;

/// A reproducible sub-seed for one purpose within one run.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// A reproducible stream for one purpose within one run.
pub(crate) fn derive_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Encoder pass over a recording list without gradients: posterior means,
/// one `(d, H, W)` tensor per recording, computed in fixed-size chunks.
pub fn encode_means(
    model: &TscVae<f32>,
    recordings: &[&Recording],
    chunk: usize,
) -> Result<Vec<Tensor<f32>>> {
    let latent = model.config().latent_shape();
    let mut out = Vec::with_capacity(recordings.len());
    for group in recordings.chunks(chunk.max(1)) {
        let x = crate::data::stack_recordings(group)?;
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let posterior = model.encode_batch(&mut tape, xv)?;
        let values = tape.value(posterior.mu);
        let per = latent.iter().product::<usize>();
        for i in 0..group.len() {
            out.push(Tensor::from_vec(values[i * per..(i + 1) * per].to_vec(), &latent)?);
        }
    }
    Ok(out)
}

/// Decoder pass over a latent list without gradients: one `(C, T)` signal
/// per latent, computed in fixed-size chunks.
pub fn decode_latents(
    model: &TscVae<f32>,
    latents: &[Tensor<f32>],
    chunk: usize,
) -> Result<Vec<Tensor<f32>>> {
    let latent = model.config().latent_shape();
    let cfg = model.config();
    let per_out = cfg.channels * cfg.timepoints;
    let mut out = Vec::with_capacity(latents.len());
    for group in latents.chunks(chunk.max(1)) {
        let mut data = Vec::with_capacity(group.len() * latent.iter().product::<usize>());
        for z in group {
            if z.shape() != latent {
                return Err(crate::error::Error::dim(format!(
                    "latent has shape {:?}, decoder expects {:?}",
                    z.shape(),
                    latent
                )));
            }
            data.extend_from_slice(z.values());
        }
        let zt = Tensor::from_vec(data, &[group.len(), latent[0], latent[1], latent[2]])?;
        let mut tape = Tape::new();
        let zv = tape.constant(&zt);
        let y = model.decode_batch(&mut tape, zv)?;
        let values = tape.value(y);
        for i in 0..group.len() {
            out.push(Tensor::from_vec(
                values[i * per_out..(i + 1) * per_out].to_vec(),
                &[cfg.channels, cfg.timepoints],
            )?);
        }
    }
    Ok(out)
}
