//! Stage II: train the query-transformer mapper to place visual embeddings
//! into the frozen Stage-I latent space.
//!
//! Targets are the frozen encoder's posterior means, precomputed once. The
//! loss is point-wise MSE plus λ times the sliced-Wasserstein distance,
//! with fresh random projections per step from a seeded stream. Gradients
//! are clipped to a global norm of 1.0 and the learning rate follows a
//! 5-epoch linear warmup into cosine decay.
//!
//! The encoder is frozen in the strict sense: its parameter fingerprint is
//! taken before training and re-checked after, and the run fails if a
//! single bit moved or any encoder tensor accumulated a gradient.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::align::{swd, AlignmentLossConfig, ProjectionSampler};
use crate::data::{
    apply_repetition_mode, Dataset, EmbeddingTable, PresetName, Recording, RepetitionMode,
};
use crate::error::{Error, Result};
use crate::nd::{clip_global_norm, Tape, Tensor};
use crate::pipeline::checkpoint::{self, STAGE2_BEST, STAGE2_FINAL};
use crate::pipeline::config::KvConfig;
use crate::pipeline::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::pipeline::{
    derive_rng, derive_seed, encode_means, TAG_EPOCH_ORDER, TAG_MAPPER_INIT, TAG_PROJECTIONS,
    TAG_VAL_SPLIT,
};
use crate::qformer::{QFormer, QFormerConfig};

const EVAL_CHUNK: usize = 32;

/// Mapper-shape overrides; unset fields keep the preset default
/// (the published configuration for eeg/meg, the toy one otherwise).
#[derive(Debug, Clone, Copy, Default)]
pub struct MapperOverrides {
    pub queries: Option<usize>,
    pub hidden: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub cross_every: Option<usize>,
    pub head_hidden: Option<usize>,
}

/// Everything `train_stage2` needs besides the dataset and the Stage-I
/// checkpoint.
#[derive(Debug, Clone)]
pub struct Stage2Options {
    pub mapper: MapperOverrides,
    /// λ and the projection count M; the projection stream seed is derived
    /// from `seed`, not taken from this struct.
    pub align: AlignmentLossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warmup epochs before cosine decay.
    pub warmup_epochs: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub val_fraction: f64,
    pub repetition_mode: RepetitionMode,
    pub max_steps: Option<usize>,
}

impl Stage2Options {
    /// Published training constants: 100 epochs, lr 1e-4, weight decay
    /// 1e-5, batch 64 (EEG) / 16 (MEG), λ=1 with M=50 projections, 5-epoch
    /// warmup, gradient clip 1.0.
    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        let batch_size = match dataset.preset().name {
            PresetName::Meg => 16,
            _ => 64,
        };
        Ok(Stage2Options {
            mapper: MapperOverrides::default(),
            align: AlignmentLossConfig::default(),
            epochs: 100,
            batch_size,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            warmup_epochs: 5,
            grad_clip: 1.0,
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
            self.epochs = v;
        }
        if let Some(v) = kv.parse("batch")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.parse("weight_decay")? {
            self.weight_decay = v;
            self.optimizer.weight_decay = v;
        }
        if let Some(v) = kv.parse("lambda")? {
            self.align.lambda = v;
        }
        if let Some(v) = kv.parse("projections")? {
            self.align.num_projections = v;
        }
        if let Some(v) = kv.parse("warmup_epochs")? {
            self.warmup_epochs = v;
        }
        if let Some(v) = kv.parse("grad_clip")? {
            self.grad_clip = v;
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
        self.mapper.queries = kv.parse("qf_queries")?.or(self.mapper.queries);
        self.mapper.hidden = kv.parse("qf_hidden")?.or(self.mapper.hidden);
        self.mapper.layers = kv.parse("qf_layers")?.or(self.mapper.layers);
        self.mapper.heads = kv.parse("qf_heads")?.or(self.mapper.heads);
        self.mapper.mlp_ratio = kv.parse("qf_mlp_ratio")?.or(self.mapper.mlp_ratio);
        self.mapper.cross_every = kv.parse("qf_cross_every")?.or(self.mapper.cross_every);
        self.mapper.head_hidden = kv.parse("qf_head_hidden")?.or(self.mapper.head_hidden);
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "epochs and batch size must be positive".to_string(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !self.grad_clip.is_finite() || self.grad_clip <= 0.0 {
            return Err(Error::config(format!(
                "gradient clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.epochs
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

    /// Mapper configuration for a concrete latent shape and embedding
    /// width: preset base, reconciled input width, then overrides.
    fn mapper_config(
        &self,
        preset: PresetName,
        latent_shape: [usize; 3],
        embedding_dim: usize,
    ) -> QFormerConfig {
        let mut cfg = match preset {
            PresetName::Toy => QFormerConfig::toy(latent_shape),
            _ => QFormerConfig::published(latent_shape),
        };
        cfg.input_dim = embedding_dim;
        if let Some(v) = self.mapper.queries {
            cfg.num_queries = v;
        }
        if let Some(v) = self.mapper.hidden {
            cfg.hidden_dim = v;
        }
        if let Some(v) = self.mapper.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.mapper.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.mapper.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        if let Some(v) = self.mapper.cross_every {
            cfg.cross_attn_every = v;
        }
        if let Some(v) = self.mapper.head_hidden {
            cfg.head_hidden = v;
        }
        cfg
    }
}

/// What a Stage-II run produced.
#[derive(Debug, Clone)]
pub struct Stage2Summary {
    pub epochs_run: usize,
    pub steps: usize,
    /// Mean loss components over the last epoch.
    pub train_mse: f64,
    pub train_swd: f64,
    pub train_total: f64,
    pub best_val_mse: Option<f64>,
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub loss_log: PathBuf,
}

/// Train the Stage-II mapper against a frozen Stage-I checkpoint and write
/// `stage2_final.vibe`, `stage2_best.vibe`, and `stage2_loss.csv` into
/// `out_dir`.
pub fn train_stage2(
    dataset: &Dataset,
    stage1_ckpt: &Path,
    opts: &Stage2Options,
    out_dir: &Path,
) -> Result<Stage2Summary> {
    opts.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let (mut vae, _) = checkpoint::load_stage1(stage1_ckpt)?;
    let preset = dataset.preset();
    if vae.config().channels != preset.channels || vae.config().timepoints != preset.timepoints {
        // Different recording geometry means a different latent shape; the
        // mapper would be trained against the wrong space.
        let mut expected = vae.config().clone();
        expected.channels = preset.channels;
        expected.timepoints = preset.timepoints;
        return Err(Error::config(format!(
            "stage-1 checkpoint latent shape {:?} does not match the dataset's {:?} \
             (checkpoint was trained on ({}, {}) recordings, dataset holds ({}, {}))",
            vae.config().latent_shape(),
            expected.latent_shape(),
            vae.config().channels,
            vae.config().timepoints,
            preset.channels,
            preset.timepoints
        )));
    }
    let latent_shape = vae.config().latent_shape();

    vae.freeze();
    let encoder_fingerprint = vae.params().fingerprint();

    // Training pairs: one (embedding, posterior-mean latent) per recording.
    let mut recordings = Vec::new();
    for &subject in dataset.subjects() {
        recordings.extend(dataset.load_train(subject)?);
    }
    let recordings = apply_repetition_mode(recordings, opts.repetition_mode)?;
    if recordings.is_empty() {
        return Err(Error::data("no training recordings in dataset".to_string()));
    }
    let table = dataset.load_embeddings("train")?;
    let keys: Vec<(u32, u32)> = recordings
        .iter()
        .map(|r| (r.concept_id, r.image_id))
        .collect();
    for key in &keys {
        table.require(key.0, key.1)?;
    }
    let (_, embedding_dim) = table.token_shape();

    let refs: Vec<&Recording> = recordings.iter().collect();
    let targets = encode_means(&vae, &refs, EVAL_CHUNK)?;

    let mapper_cfg = opts.mapper_config(preset.name, latent_shape, embedding_dim);
    if let Some(shape) = mapper_cfg.output_latent_shape {
        if shape != latent_shape {
            return Err(Error::config(format!(
                "mapper projects onto {shape:?} but the checkpoint's latent space is {latent_shape:?}"
            )));
        }
    }
    let mut mapper: QFormer<f32> =
        QFormer::new(mapper_cfg, &mut derive_rng(opts.seed, TAG_MAPPER_INIT))?;
    let mut optimizer = AdamW::new(opts.optimizer, mapper.params())?;
    let mut sampler = ProjectionSampler::new(derive_seed(opts.seed, TAG_PROJECTIONS));

    // Deterministic validation split over pairs.
    let mut indices: Vec<usize> = (0..recordings.len()).collect();
    indices.shuffle(&mut derive_rng(opts.seed, TAG_VAL_SPLIT));
    let n_val = (recordings.len() as f64 * opts.val_fraction).floor() as usize;
    let (val_idx, train_idx) = indices.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::config(
            "validation split left no training pairs".to_string(),
        ));
    }

    let mut log = String::from("step,epoch,lr,mse,swd,total\n");
    let mut steps = 0usize;
    let mut epochs_run = 0usize;
    let (mut last_mse, mut last_swd, mut last_total) = (0.0f64, 0.0f64, 0.0f64);
    let mut best: Option<(f64, usize)> = None;
    let best_path = out_dir.join(STAGE2_BEST);

    'epochs: for epoch in 1..=opts.epochs {
        let lr = cosine_lr(epoch, opts.epochs, opts.learning_rate, opts.warmup_epochs)?;
        let mut order = train_idx.to_vec();
        order.shuffle(&mut derive_rng(
            opts.seed,
            TAG_EPOCH_ORDER.wrapping_add((epoch as u64) << 8),
        ));

        let (mut mse_sum, mut swd_sum, mut total_sum) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        let mut capped = false;
        for (batch_id, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch_keys: Vec<(u32, u32)> = chunk.iter().map(|&i| keys[i]).collect();
            let e_v = table.stack(&batch_keys)?;
            let target_refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &targets[i]).collect();
            let z = stack_latents(&target_refs, latent_shape)?;

            let mut tape: Tape<f32> = Tape::new();
            let ev = tape.constant(&e_v);
            let zv = tape.constant(&z);
            let z_hat = mapper.map_embeddings(&mut tape, ev)?;
            let mse = tape.mse(z_hat, zv)?;
            let (loss, mse_v, swd_v) = if opts.align.lambda == 0.0 {
                // The distribution term is skipped entirely; its logged
                // value is zero by definition, keeping the total = mse +
                // λ·swd identity trivially true.
                (mse, tape.item(mse)? as f64, 0.0)
            } else {
                let sw = swd(
                    &mut tape,
                    z_hat,
                    zv,
                    opts.align.num_projections,
                    &mut sampler,
                )?;
                let weighted = tape.scale(sw, opts.align.lambda as f32);
                let total = tape.add(mse, weighted)?;
                (total, tape.item(mse)? as f64, tape.item(sw)? as f64)
            };
            let total_v = tape.item(loss)? as f64;
            if !total_v.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {total_v} at epoch {epoch}, batch {batch_id} \
                     (first pair: concept {}, image {})",
                    batch_keys[0].0, batch_keys[0].1
                )));
            }

            mapper.params_mut().zero_grads();
            tape.backward(loss)?;
            tape.apply_param_grads(mapper.params_mut());
            clip_global_norm(mapper.params_mut(), opts.grad_clip)?;
            optimizer.step(mapper.params_mut(), lr)?;

            steps += 1;
            log.push_str(&format!(
                "{steps},{epoch},{lr},{mse_v},{swd_v},{total_v}\n"
            ));
            mse_sum += mse_v;
            swd_sum += swd_v;
            total_sum += total_v;
            batches += 1;
            if opts.max_steps == Some(steps) {
                capped = true;
                break;
            }
        }

        let denom = batches.max(1) as f64;
        last_mse = mse_sum / denom;
        last_swd = swd_sum / denom;
        last_total = total_sum / denom;
        epochs_run = epoch;

        let val_mse = if val_idx.is_empty() {
            None
        } else {
            Some(latent_mse(
                &mapper,
                &table,
                &keys,
                &targets,
                val_idx,
                latent_shape,
            )?)
        };
        if let Some(v) = val_mse {
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, epoch));
                save(
                    &best_path,
                    &mapper,
                    opts,
                    encoder_fingerprint,
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

    // The frozen contract, verified rather than assumed.
    if vae.params().fingerprint() != encoder_fingerprint {
        return Err(Error::contract(
            "frozen Stage-I parameters changed during Stage-II training".to_string(),
        ));
    }
    if vae.params().iter().any(|(_, _, t)| t.grad().is_some()) {
        return Err(Error::contract(
            "frozen Stage-I parameters accumulated gradients".to_string(),
        ));
    }

    let final_path = out_dir.join(STAGE2_FINAL);
    save(
        &final_path,
        &mapper,
        opts,
        encoder_fingerprint,
        epochs_run,
        steps,
        "final",
        best,
    )?;
    if best.is_none() {
        save(
            &best_path,
            &mapper,
            opts,
            encoder_fingerprint,
            epochs_run,
            steps,
            "final",
            None,
        )?;
    }

    let loss_log = out_dir.join("stage2_loss.csv");
    std::fs::write(&loss_log, &log)?;

    Ok(Stage2Summary {
        epochs_run,
        steps,
        train_mse: last_mse,
        train_swd: last_swd,
        train_total: last_total,
        best_val_mse: best.map(|(v, _)| v),
        final_path,
        best_path,
        loss_log,
    })
}

/// Stack per-pair latent tensors into one `[B, d, H, W]` batch.
fn stack_latents(latents: &[&Tensor<f32>], shape: [usize; 3]) -> Result<Tensor<f32>> {
    if latents.is_empty() {
        return Err(Error::contract("cannot stack an empty latent batch".to_string()));
    }
    let mut data = Vec::with_capacity(latents.len() * shape.iter().product::<usize>());
    for z in latents {
        if z.shape() != shape {
            return Err(Error::dim(format!(
                "latent has shape {:?}, expected {shape:?}",
                z.shape()
            )));
        }
        data.extend_from_slice(z.values());
    }
    Tensor::from_vec(data, &[latents.len(), shape[0], shape[1], shape[2]])
}

/// Gradient-free mean latent MSE of the mapper over the given pair indices.
fn latent_mse(
    mapper: &QFormer<f32>,
    table: &EmbeddingTable,
    keys: &[(u32, u32)],
    targets: &[Tensor<f32>],
    indices: &[usize],
    latent_shape: [usize; 3],
) -> Result<f64> {
    let mut total = 0.0f64;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch_keys: Vec<(u32, u32)> = chunk.iter().map(|&i| keys[i]).collect();
        let e_v = table.stack(&batch_keys)?;
        let target_refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &targets[i]).collect();
        let z = stack_latents(&target_refs, latent_shape)?;
        let mut tape: Tape<f32> = Tape::new();
        let ev = tape.constant(&e_v);
        let zv = tape.constant(&z);
        let z_hat = mapper.map_embeddings(&mut tape, ev)?;
        let mse = tape.mse(z_hat, zv)?;
        total += tape.item(mse)? as f64 * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn save(
    path: &Path,
    mapper: &QFormer<f32>,
    opts: &Stage2Options,
    encoder_fingerprint: u64,
    epoch: usize,
    steps: usize,
    best_source: &str,
    best: Option<(f64, usize)>,
) -> Result<()> {
    let mut extra = vec![
        ("stage".to_string(), "stage2".to_string()),
        ("seed".to_string(), opts.seed.to_string()),
        ("epochs".to_string(), opts.epochs.to_string()),
        ("epochs_run".to_string(), epoch.to_string()),
        ("steps".to_string(), steps.to_string()),
        ("lambda".to_string(), opts.align.lambda.to_string()),
        (
            "projections".to_string(),
            opts.align.num_projections.to_string(),
        ),
        ("learning_rate".to_string(), opts.learning_rate.to_string()),
        ("weight_decay".to_string(), opts.weight_decay.to_string()),
        ("warmup_epochs".to_string(), opts.warmup_epochs.to_string()),
        ("grad_clip".to_string(), opts.grad_clip.to_string()),
        ("batch_size".to_string(), opts.batch_size.to_string()),
        ("adamw.beta1".to_string(), opts.optimizer.beta1.to_string()),
        ("adamw.beta2".to_string(), opts.optimizer.beta2.to_string()),
        (
            "adamw.epsilon".to_string(),
            opts.optimizer.epsilon.to_string(),
        ),
        (
            "stage1_fingerprint".to_string(),
            format!("{encoder_fingerprint:016x}"),
        ),
        (
            "val_convention".to_string(),
            format!(
                "held-out {} of training pairs, best by latent mse",
                opts.val_fraction
            ),
        ),
        ("best_source".to_string(), best_source.to_string()),
    ];
    if let Some((v, e)) = best {
        extra.push(("best_val_mse".to_string(), v.to_string()));
        extra.push(("best_epoch".to_string(), e.to_string()));
    }
    checkpoint::save_stage2(path, mapper, &extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, DatasetPreset, SynthSpec};
    use crate::pipeline::stage1::{train_stage1, Stage1Options};

    fn toy_run(root: &Path, seed: u64) -> (Dataset, PathBuf) {
        let data_dir = root.join("data");
        let spec = SynthSpec::new(DatasetPreset::toy(), 2, seed);
        synth_dataset(&spec, &data_dir).unwrap();
        let dataset = Dataset::open(&data_dir).unwrap();
        let mut opts = Stage1Options::for_dataset(&dataset).unwrap();
        opts.train.epochs = 2;
        opts.train.warmup_epochs = 2;
        opts.train.batch_size = 16;
        opts.seed = seed;
        let summary = train_stage1(&dataset, &opts, &root.join("s1")).unwrap();
        (dataset, summary.final_path)
    }

    fn quick_opts(dataset: &Dataset, seed: u64) -> Stage2Options {
        let mut opts = Stage2Options::for_dataset(dataset).unwrap();
        opts.epochs = 2;
        opts.warmup_epochs = 1;
        opts.batch_size = 16;
        opts.align.num_projections = 8;
        opts.seed = seed;
        opts
    }

    #[test]
    fn logged_components_satisfy_the_total_identity_per_step() {
        let root = tempfile::tempdir().unwrap();
        let (dataset, ckpt) = toy_run(root.path(), 21);
        let opts = quick_opts(&dataset, 21);
        let summary = train_stage2(&dataset, &ckpt, &opts, &root.path().join("s2")).unwrap();

        let log = std::fs::read_to_string(&summary.loss_log).unwrap();
        let mut rows = 0;
        for line in log.lines().skip(1) {
            let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
            let (mse, swd, total) = (fields[3], fields[4], fields[5]);
            assert!(
                (total - (mse + opts.align.lambda * swd)).abs() < 1e-6,
                "identity violated: {line}"
            );
            rows += 1;
        }
        assert_eq!(rows, summary.steps);
    }

    #[test]
    fn encoder_fingerprint_is_identical_before_and_after() {
        let root = tempfile::tempdir().unwrap();
        let (dataset, ckpt) = toy_run(root.path(), 22);
        let (frozen_before, _) = checkpoint::load_stage1(&ckpt).unwrap();
        let fp_before = frozen_before.params().fingerprint();

        let opts = quick_opts(&dataset, 22);
        let summary = train_stage2(&dataset, &ckpt, &opts, &root.path().join("s2")).unwrap();

        // The checkpoint on disk still carries the identical encoder hash,
        // and the mapper checkpoint records that hash as its provenance.
        let (frozen_after, _) = checkpoint::load_stage1(&ckpt).unwrap();
        assert_eq!(frozen_after.params().fingerprint(), fp_before);
        let c2 = crate::data::Container::read(&summary.final_path).unwrap();
        assert_eq!(
            c2.manifest_get("stage1_fingerprint"),
            Some(format!("{fp_before:016x}").as_str())
        );
    }

    #[test]
    fn lambda_zero_and_one_diverge_after_the_first_step() {
        let root = tempfile::tempdir().unwrap();
        let (dataset, ckpt) = toy_run(root.path(), 23);

        let mut with = quick_opts(&dataset, 23);
        with.max_steps = Some(2);
        let mut without = with.clone();
        without.align.lambda = 0.0;

        let a = train_stage2(&dataset, &ckpt, &with, &root.path().join("a")).unwrap();
        let b = train_stage2(&dataset, &ckpt, &without, &root.path().join("b")).unwrap();
        let (ma, _) = checkpoint::load_stage2(&a.final_path).unwrap();
        let (mb, _) = checkpoint::load_stage2(&b.final_path).unwrap();
        assert_ne!(
            ma.params().fingerprint(),
            mb.params().fingerprint(),
            "λ=0 and λ=1 runs should move parameters differently once swd > 0"
        );
        // And the λ=0 log really shows a zero swd column.
        let log = std::fs::read_to_string(&b.loss_log).unwrap();
        let row = log.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(4).unwrap(), "0");
    }

    #[test]
    fn geometry_mismatch_fails_before_training() {
        let root = tempfile::tempdir().unwrap();
        let (_, ckpt) = toy_run(root.path(), 24);

        // A second dataset with different geometry (one channel less).
        let mut preset = DatasetPreset::toy();
        preset.channels = 7;
        let spec = SynthSpec::new(preset, 2, 1);
        let other_dir = root.path().join("other");
        synth_dataset(&spec, &other_dir).unwrap();
        let other = Dataset::open(&other_dir).unwrap();

        let opts = quick_opts(&other, 24);
        let err = train_stage2(&other, &ckpt, &opts, &root.path().join("s2")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("latent shape"), "got {err}");
        // Nothing was written: the error fired before training started.
        assert!(!root.path().join("s2").join(STAGE2_FINAL).exists());
    }
}
