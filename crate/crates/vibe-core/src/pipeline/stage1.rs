//! Stage I: train the reconstruction VAE on neural recordings.
//!
//! Per epoch the KL weight follows the linear warmup; per batch the loop
//! runs encode → reparameterize → decode → loss → backward → AdamW. The
//! learning rate follows cosine decay with no warmup. A held-out slice of
//! the training recordings (5% by default) scores a best-checkpoint
//! snapshot by posterior-mean reconstruction MSE; when the slice is empty
//! the best checkpoint is the final one, and the manifest says which.
//!
//! Everything derives from the run seed: model init, the validation split,
//! per-epoch batch order, and the reparameterization noise. Two runs with
//! the same seed, config, and data write byte-identical artifacts.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{
    apply_repetition_mode, stack_recordings, Dataset, PresetName, Recording, RepetitionMode,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nd::Tape;
use crate::pipeline::checkpoint::{self, STAGE1_BEST, STAGE1_FINAL};
use crate::pipeline::config::KvConfig;
use crate::pipeline::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::pipeline::{
    decode_latents, derive_rng, encode_means, TAG_EPOCH_ORDER, TAG_MODEL_INIT, TAG_REPARAM,
    TAG_VAL_SPLIT,
};
use crate::vae::{kl_gaussian, kl_warmup, reparameterize, TscVae, VaeConfig, VaeTrainConfig};

/// Batch size used for gradient-free encode/decode passes.
const EVAL_CHUNK: usize = 32;

/// Everything `train_stage1` needs besides the dataset itself.
#[derive(Debug, Clone)]
pub struct Stage1Options {
    pub arch: VaeConfig,
    pub train: VaeTrainConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Fraction of training recordings held out for best-checkpoint
    /// selection; 0 disables validation.
    pub val_fraction: f64,
    pub repetition_mode: RepetitionMode,
    /// Optional cap on total optimizer steps (for short calibration runs);
    /// the run stops at the end of the epoch that reaches it.
    pub max_steps: Option<usize>,
}

impl Stage1Options {
    /// Defaults for a dataset: the preset's published architecture and
    /// training constants, with the dataset's effective channel count (which
    /// an ablated dataset shrinks).
    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        let preset = dataset.preset();
        let mut arch = match preset.name {
            PresetName::Eeg => VaeConfig::eeg(),
            PresetName::Meg => VaeConfig::meg(),
            PresetName::Toy => VaeConfig::toy(),
        };
        arch.channels = preset.channels;
        arch.timepoints = preset.timepoints;
        let train = match preset.name {
            PresetName::Meg => VaeTrainConfig::meg(),
            _ => VaeTrainConfig::eeg(),
        };
        Ok(Stage1Options {
            arch,
            train,
            optimizer: AdamWConfig::default(),
            seed: 0,
            val_fraction: 0.05,
            repetition_mode: RepetitionMode::Individual,
            max_steps: None,
        })
    }

    /// Apply `key=value` overrides on top of the defaults.
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(v) = kv.parse("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse("epochs")? {
            self.train.epochs = v;
        }
        if let Some(v) = kv.parse("batch")? {
            self.train.batch_size = v;
        }
        if let Some(v) = kv.parse("learning_rate")? {
            self.train.learning_rate = v;
        }
        if let Some(v) = kv.parse("weight_decay")? {
            self.train.weight_decay = v;
            self.optimizer.weight_decay = v;
        }
        if let Some(v) = kv.parse("beta")? {
            self.train.beta = v;
        }
        if let Some(v) = kv.parse("kl_warmup_epochs")? {
            self.train.warmup_epochs = v;
        }
        if let Some(v) = kv.parse("width")? {
            self.arch.width = v;
        }
        if let Some(v) = kv.parse("latent_channels")? {
            self.arch.latent_channels = v;
        }
        if let Some(v) = kv.parse("val_fraction")? {
            self.val_fraction = v;
        }
        if let Some(v) = kv.parse::<RepetitionMode>("repetition_mode")? {
            self.repetition_mode = v;
        }
        if let Some(v) = kv.parse("max_steps")? {
            self.max_steps = Some(v);
        }
        Ok(())
    }

    fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.optimizer.validate()?;
        let preset = dataset.preset();
        if self.arch.channels != preset.channels || self.arch.timepoints != preset.timepoints {
            return Err(Error::config(format!(
                "architecture expects ({}, {}) recordings but the dataset provides ({}, {})",
                self.arch.channels, self.arch.timepoints, preset.channels, preset.timepoints
            )));
        }
        if !self.val_fraction.is_finite() || !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction must lie in [0, 0.5], got {}",
                self.val_fraction
            )));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// What a Stage-I run produced.
#[derive(Debug, Clone)]
pub struct Stage1Summary {
    pub epochs_run: usize,
    pub steps: usize,
    /// Mean training loss / MSE over the last epoch.
    pub train_loss: f64,
    pub train_mse: f64,
    pub best_val_mse: Option<f64>,
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub loss_log: PathBuf,
}

/// Train a Stage-I model on every training recording in the dataset and
/// write `stage1_final.vibe`, `stage1_best.vibe`, and `stage1_loss.csv`
/// into `out_dir`.
pub fn train_stage1(
    dataset: &Dataset,
    opts: &Stage1Options,
    out_dir: &Path,
) -> Result<Stage1Summary> {
    opts.validate(dataset)?;
    std::fs::create_dir_all(out_dir)?;

    let mut recordings = Vec::new();
    for &subject in dataset.subjects() {
        recordings.extend(dataset.load_train(subject)?);
    }
    let recordings = apply_repetition_mode(recordings, opts.repetition_mode)?;
    if recordings.is_empty() {
        return Err(Error::data("no training recordings in dataset".to_string()));
    }

    // Deterministic validation split: shuffle once, peel off the front.
    let mut indices: Vec<usize> = (0..recordings.len()).collect();
    indices.shuffle(&mut derive_rng(opts.seed, TAG_VAL_SPLIT));
    let n_val = (recordings.len() as f64 * opts.val_fraction).floor() as usize;
    let (val_idx, train_idx) = indices.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::config(
            "validation split left no training recordings".to_string(),
        ));
    }

    let mut model: TscVae<f32> =
        TscVae::new(opts.arch.clone(), &mut derive_rng(opts.seed, TAG_MODEL_INIT))?;
    let mut optimizer = AdamW::new(opts.optimizer, model.params())?;
    let mut reparam_rng = derive_rng(opts.seed, TAG_REPARAM);

    let mut log = String::from("epoch,beta,lr,train_loss,train_mse,train_kl,val_mse\n");
    let mut steps = 0usize;
    let mut epochs_run = 0usize;
    let (mut last_loss, mut last_mse) = (0.0f64, 0.0f64);
    let mut best: Option<(f64, usize)> = None;
    let best_path = out_dir.join(STAGE1_BEST);

    'epochs: for epoch in 1..=opts.train.epochs {
        let beta_cur = kl_warmup(epoch, &opts.train);
        let lr = cosine_lr(epoch, opts.train.epochs, opts.train.learning_rate, 0)?;

        let mut order = train_idx.to_vec();
        order.shuffle(&mut derive_rng(
            opts.seed,
            TAG_EPOCH_ORDER.wrapping_add((epoch as u64) << 8),
        ));

        let (mut loss_sum, mut mse_sum, mut kl_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        let mut capped = false;
        for (batch_id, chunk) in order.chunks(opts.train.batch_size).enumerate() {
            let refs: Vec<&Recording> = chunk.iter().map(|&i| &recordings[i]).collect();
            let x = stack_recordings(&refs)?;

            let mut tape: Tape<f32> = Tape::new();
            let xv = tape.constant(&x);
            let posterior = model.encode_batch(&mut tape, xv)?;
            let z = reparameterize(&mut tape, posterior, &mut reparam_rng)?;
            let x_hat = model.decode_batch(&mut tape, z)?;
            let recon = tape.mse(x_hat, xv)?;
            let kl = kl_gaussian(&mut tape, posterior)?;
            let kl_weighted = tape.scale(kl, beta_cur as f32);
            let loss = tape.add(recon, kl_weighted)?;

            let loss_v = tape.item(loss)? as f64;
            let recon_v = tape.item(recon)? as f64;
            let kl_v = tape.item(kl)? as f64;
            if !loss_v.is_finite() {
                let first = refs[0];
                return Err(Error::numeric(format!(
                    "non-finite loss {loss_v} at epoch {epoch}, batch {batch_id} \
                     (first trial: subject {}, concept {}, image {}, repetition {})",
                    first.subject_id, first.concept_id, first.image_id, first.repetition
                )));
            }

            model.params_mut().zero_grads();
            tape.backward(loss)?;
            tape.apply_param_grads(model.params_mut());
            optimizer.step(model.params_mut(), lr)?;

            loss_sum += loss_v;
            mse_sum += recon_v;
            kl_sum += kl_v;
            batches += 1;
            steps += 1;
            if opts.max_steps == Some(steps) {
                capped = true;
                break;
            }
        }

        let denom = batches.max(1) as f64;
        last_loss = loss_sum / denom;
        last_mse = mse_sum / denom;
        epochs_run = epoch;

        let val_mse = if val_idx.is_empty() {
            None
        } else {
            let val_refs: Vec<&Recording> = val_idx.iter().map(|&i| &recordings[i]).collect();
            Some(reconstruction_mse(&model, &val_refs)?)
        };

        log.push_str(&format!(
            "{epoch},{beta_cur},{lr},{last_loss},{last_mse},{},{}\n",
            kl_sum / denom,
            metrics::csv_value(val_mse),
        ));

        if let Some(v) = val_mse {
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, epoch));
                save(
                    &best_path,
                    &model,
                    opts,
                    dataset,
                    epoch,
                    steps,
                    "val",
                    Some((v, epoch)),
                )?;
            }
        }
        if capped {
            break 'epochs;
        }
    }

    let final_path = out_dir.join(STAGE1_FINAL);
    save(
        &final_path, &model, opts, dataset, epochs_run, steps, "final", best,
    )?;
    if best.is_none() {
        // No validation slice: the best checkpoint is the final one.
        save(
            &best_path, &model, opts, dataset, epochs_run, steps, "final", None,
        )?;
    }

    let loss_log = out_dir.join("stage1_loss.csv");
    std::fs::write(&loss_log, &log)?;

    Ok(Stage1Summary {
        epochs_run,
        steps,
        train_loss: last_loss,
        train_mse: last_mse,
        best_val_mse: best.map(|(v, _)| v),
        final_path,
        best_path,
        loss_log,
    })
}

/// Posterior-mean reconstruction MSE averaged over recordings (equal
/// weight per recording; gradient-free).
pub fn reconstruction_mse(model: &TscVae<f32>, recordings: &[&Recording]) -> Result<f64> {
    let means = encode_means(model, recordings, EVAL_CHUNK)?;
    let decoded = decode_latents(model, &means, EVAL_CHUNK)?;
    let mut total = 0.0f64;
    for (rec, hat) in recordings.iter().zip(&decoded) {
        total += metrics::mse_metric(hat.values(), rec.signal.values())?;
    }
    Ok(total / recordings.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn save(
    path: &Path,
    model: &TscVae<f32>,
    opts: &Stage1Options,
    dataset: &Dataset,
    epoch: usize,
    steps: usize,
    best_source: &str,
    best: Option<(f64, usize)>,
) -> Result<()> {
    let mut extra = vec![
        ("stage".to_string(), "stage1".to_string()),
        ("preset".to_string(), dataset.preset().name.to_string()),
        ("seed".to_string(), opts.seed.to_string()),
        ("epochs".to_string(), opts.train.epochs.to_string()),
        ("epochs_run".to_string(), epoch.to_string()),
        ("steps".to_string(), steps.to_string()),
        ("beta".to_string(), opts.train.beta.to_string()),
        (
            "kl_warmup_epochs".to_string(),
            opts.train.warmup_epochs.to_string(),
        ),
        (
            "learning_rate".to_string(),
            opts.train.learning_rate.to_string(),
        ),
        (
            "weight_decay".to_string(),
            opts.train.weight_decay.to_string(),
        ),
        ("batch_size".to_string(), opts.train.batch_size.to_string()),
        ("adamw.beta1".to_string(), opts.optimizer.beta1.to_string()),
        ("adamw.beta2".to_string(), opts.optimizer.beta2.to_string()),
        (
            "adamw.epsilon".to_string(),
            opts.optimizer.epsilon.to_string(),
        ),
        (
            "repetition_mode".to_string(),
            opts.repetition_mode.to_string(),
        ),
        // The validation split is an artifact convention, not part of the
        // published method; flag it so downstream readers know.
        (
            "val_convention".to_string(),
            format!(
                "held-out {} of training recordings, best by posterior-mean reconstruction mse",
                opts.val_fraction
            ),
        ),
        ("best_source".to_string(), best_source.to_string()),
    ];
    if let Some((v, e)) = best {
        extra.push(("best_val_mse".to_string(), v.to_string()));
        extra.push(("best_epoch".to_string(), e.to_string()));
    }
    checkpoint::save_stage1(path, model, &extra)
}
