//! Synthetic dataset generation.
//!
//! Stands in for real recordings paired with image embeddings. Every
//! quantity is drawn from its own counter-seeded stream, so the generator is
//! pure random-access: any recording or embedding can be produced in any
//! order and the output depends only on `(spec, seed)`.
//!
//! Construction:
//! - each concept gets a latent factor vector; each image of the concept
//!   jitters it;
//! - a recording is a per-subject linear mixing of smooth temporal templates
//!   driven by the image's factor, plus Gaussian sensor noise, re-drawn per
//!   repetition;
//! - an image's embedding is a fixed affine map of the same factor plus
//!   per-token noise, globally rescaled so the pooled element standard
//!   deviation matches the scale of real image-encoder embeddings
//!   (0.0247 by default).
//!
//! Test recordings are emitted repetition-averaged: the mean of
//! `test_repetitions` independently drawn repetitions of the trial.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{regions, DatasetPreset, PresetName, Recording};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Fraction of a factor's scale re-drawn per image within a concept.
const IMAGE_JITTER: f64 = 0.3;
/// Fraction of embedding *standard deviation* carried by the factor map;
/// the rest is independent token noise.
const EMBED_MIX: f64 = 0.5;

// Stream tags: one per random quantity, so draws never alias.
const TAG_CONCEPT: u64 = 1;
const TAG_IMAGE: u64 = 2;
const TAG_SUBJECT: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_EMBED_MAP: u64 = 5;
const TAG_EMBED_NOISE: u64 = 6;

/// Everything that determines a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub preset: DatasetPreset,
    pub n_subjects: usize,
    pub seed: u64,
    /// Dimension of the per-concept latent factor.
    pub concept_factor_dim: usize,
    /// Sensor noise standard deviation added to each training repetition.
    pub noise_std: f64,
    /// Embedding shape per image: (tokens, dimension).
    pub embedding_tokens: usize,
    pub embedding_dim: usize,
    /// Target pooled element standard deviation of emitted embeddings.
    pub embedding_std: f64,
    /// Optional `(region, gain)`: multiply that region's mixing rows, so the
    /// region carries more (gain > 1) or less (gain < 1) of the stimulus
    /// signal. Requires a preset with a region table.
    pub region_gain: Option<(String, f64)>,
}

impl SynthSpec {
    /// Defaults for a preset: factor dim 8, noise 0.3, embeddings (257, 768)
    /// for the full presets and (17, 24) for toy, pooled std 0.0247.
    pub fn new(preset: DatasetPreset, n_subjects: usize, seed: u64) -> Self {
        let (tokens, dim) = match preset.name {
            PresetName::Toy => (17, 24),
            _ => (257, 768),
        };
        SynthSpec {
            preset,
            n_subjects,
            seed,
            concept_factor_dim: 8,
            noise_std: 0.3,
            embedding_tokens: tokens,
            embedding_dim: dim,
            embedding_std: 0.0247,
            region_gain: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        if self.n_subjects == 0 {
            return Err(Error::config("n_subjects must be ≥ 1".to_string()));
        }
        if self.concept_factor_dim == 0 {
            return Err(Error::config("concept_factor_dim must be ≥ 1".to_string()));
        }
        if self.embedding_tokens == 0 || self.embedding_dim == 0 {
            return Err(Error::config("embedding shape must be positive".to_string()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be finite and ≥ 0".to_string()));
        }
        if !(self.embedding_std.is_finite() && self.embedding_std > 0.0) {
            return Err(Error::config("embedding_std must be positive".to_string()));
        }
        if let Some((region, gain)) = &self.region_gain {
            regions::region_mask(&self.preset, region)?;
            if !(gain.is_finite() && *gain >= 0.0) {
                return Err(Error::config("region gain must be finite and ≥ 0".to_string()));
            }
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random-access synthetic data source. See the module docs for the
/// construction.
pub struct SynthGenerator {
    spec: SynthSpec,
    /// Smooth unit-RMS temporal templates, `[factor_dim][timepoints]`.
    templates: Vec<Vec<f64>>,
    /// Per-subject channel mixing, row-major `[channels × factor_dim]`.
    mixing: Vec<Vec<f64>>,
    /// Fixed factor→token map, row-major `[tokens × dim × factor_dim]`.
    embed_map: Vec<f64>,
    /// 1/√(mean squared factor norm over all images): normalizes the mapped
    /// factor to unit pooled variance before mixing with token noise.
    factor_norm_scale: f64,
}

impl SynthGenerator {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let p = &spec.preset;
        let f_dim = spec.concept_factor_dim;

        let templates = (0..f_dim)
            .map(|f| temporal_template(f, p.timepoints))
            .collect();

        // Per-subject mixing W ~ N(0, 1/factor_dim), optionally re-weighted
        // per region.
        let mut mixing = Vec::with_capacity(spec.n_subjects);
        let w_std = 1.0 / (f_dim as f64).sqrt();
        let row_gains = region_row_gains(&spec)?;
        for s in 0..spec.n_subjects as u64 {
            let mut rng = stream(spec.seed, &[TAG_SUBJECT, s]);
            let mut w = vec![0.0f64; p.channels * f_dim];
            for (c, chunk) in w.chunks_mut(f_dim).enumerate() {
                let gain = row_gains.as_ref().map_or(1.0, |g| g[c]);
                for v in chunk {
                    *v = gain * w_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            mixing.push(w);
        }

        let mut rng = stream(spec.seed, &[TAG_EMBED_MAP]);
        let embed_map: Vec<f64> = (0..spec.embedding_tokens * spec.embedding_dim * f_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut gen = SynthGenerator {
            spec,
            templates,
            mixing,
            embed_map,
            factor_norm_scale: 1.0,
        };
        gen.factor_norm_scale = gen.calibrate_factor_scale();
        Ok(gen)
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Mean squared factor norm over every image of the dataset, inverted:
    /// the factor map's pooled output variance equals that mean (the map has
    /// unit-variance entries), so dividing by its square root makes emitted
    /// embeddings hit the pooled-std target regardless of the realized
    /// factor draws.
    fn calibrate_factor_scale(&self) -> f64 {
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for (concept, image) in self.all_pairs() {
            let g = self.image_factor(concept, image);
            sum_sq += g.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
        let mean_sq_norm = sum_sq / count as f64;
        if mean_sq_norm <= f64::EPSILON {
            return 1.0;
        }
        1.0 / mean_sq_norm.sqrt()
    }

    /// All (concept_id, image_id) stimulus pairs: train pairs then test
    /// pairs, lexicographic.
    pub fn all_pairs(&self) -> Vec<(u32, u32)> {
        let p = &self.spec.preset;
        let mut pairs = Vec::with_capacity(
            p.train_trials_per_subject() + p.test_trials_per_subject(),
        );
        for c in 0..p.train_concepts as u32 {
            for i in 0..p.train_images_per_concept as u32 {
                pairs.push((c, i));
            }
        }
        let base = p.test_concept_base();
        for c in 0..p.test_concepts as u32 {
            for i in 0..p.test_images_per_concept as u32 {
                pairs.push((base + c, i));
            }
        }
        pairs
    }

    /// Total training recordings across subjects (trials × repetitions).
    pub fn train_recording_count(&self) -> usize {
        self.spec.n_subjects * self.spec.preset.train_recordings_per_subject()
    }

    fn concept_factor(&self, concept: u32) -> Vec<f64> {
        let mut rng = stream(self.spec.seed, &[TAG_CONCEPT, concept as u64]);
        (0..self.spec.concept_factor_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn image_factor(&self, concept: u32, image: u32) -> Vec<f64> {
        let mut g = self.concept_factor(concept);
        let mut rng = stream(self.spec.seed, &[TAG_IMAGE, concept as u64, image as u64]);
        for v in &mut g {
            *v += IMAGE_JITTER * rng.sample::<f64, _>(StandardNormal);
        }
        g
    }

    fn check_subject(&self, subject: u32) -> Result<()> {
        if (subject as usize) < self.spec.n_subjects {
            Ok(())
        } else {
            Err(Error::config(format!(
                "subject {subject} out of range (spec has {})",
                self.spec.n_subjects
            )))
        }
    }

    /// Noise-free signal for one stimulus and subject, row-major `(C, T)`.
    fn clean_signal(&self, subject: u32, concept: u32, image: u32) -> Vec<f64> {
        let p = &self.spec.preset;
        let f_dim = self.spec.concept_factor_dim;
        let g = self.image_factor(concept, image);
        let w = &self.mixing[subject as usize];
        let mut out = vec![0.0f64; p.channels * p.timepoints];
        for c in 0..p.channels {
            // drive[f] = W[c,f] · g[f], then mix the templates
            for f in 0..f_dim {
                let drive = w[c * f_dim + f] * g[f];
                let template = &self.templates[f];
                let row = &mut out[c * p.timepoints..(c + 1) * p.timepoints];
                for (o, tv) in row.iter_mut().zip(template) {
                    *o += drive * tv;
                }
            }
        }
        out
    }

    /// One training repetition of a trial.
    pub fn train_recording(
        &self,
        subject: u32,
        concept: u32,
        image: u32,
        repetition: u32,
    ) -> Result<Recording> {
        self.check_subject(subject)?;
        let p = &self.spec.preset;
        if concept as usize >= p.train_concepts
            || image as usize >= p.train_images_per_concept
            || repetition as usize >= p.train_repetitions
        {
            return Err(Error::config(format!(
                "train trial (concept {concept}, image {image}, repetition {repetition}) \
                 outside preset counts"
            )));
        }
        let mut signal = self.clean_signal(subject, concept, image);
        let mut rng = stream(
            self.spec.seed,
            &[
                TAG_NOISE,
                subject as u64,
                concept as u64,
                image as u64,
                repetition as u64,
            ],
        );
        for v in &mut signal {
            *v += self.spec.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Recording {
            subject_id: subject,
            concept_id: concept,
            image_id: image,
            repetition,
            signal: Tensor::from_f64s(&signal, &[p.channels, p.timepoints])?,
        })
    }

    /// One test trial: the average of `test_repetitions` drawn repetitions.
    pub fn test_recording(&self, subject: u32, test_index: usize) -> Result<Recording> {
        self.check_subject(subject)?;
        let p = &self.spec.preset;
        if test_index >= p.test_trials_per_subject() {
            return Err(Error::config(format!(
                "test index {test_index} out of range ({} test trials)",
                p.test_trials_per_subject()
            )));
        }
        let concept = p.test_concept_base() + (test_index / p.test_images_per_concept) as u32;
        let image = (test_index % p.test_images_per_concept) as u32;
        let mut signal = self.clean_signal(subject, concept, image);
        let inv_reps = 1.0 / p.test_repetitions as f64;
        for rep in 0..p.test_repetitions as u64 {
            let mut rng = stream(
                self.spec.seed,
                &[TAG_NOISE, subject as u64, concept as u64, image as u64, rep],
            );
            for v in signal.iter_mut() {
                *v += self.spec.noise_std * inv_reps * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Recording {
            subject_id: subject,
            concept_id: concept,
            image_id: image,
            repetition: 0,
            signal: Tensor::from_f64s(&signal, &[p.channels, p.timepoints])?,
        })
    }

    /// The `(tokens, dim)` embedding of one stimulus. Valid for train
    /// concept/image pairs and for test pairs (concept ids past the train
    /// range).
    pub fn embedding(&self, concept: u32, image: u32) -> Result<Tensor<f32>> {
        let p = &self.spec.preset;
        let in_train = (concept as usize) < p.train_concepts
            && (image as usize) < p.train_images_per_concept;
        let in_test = (concept as usize) >= p.train_concepts
            && (concept as usize) < p.train_concepts + p.test_concepts
            && (image as usize) < p.test_images_per_concept;
        if !in_train && !in_test {
            return Err(Error::config(format!(
                "no stimulus with concept {concept}, image {image} in this spec"
            )));
        }
        let f_dim = self.spec.concept_factor_dim;
        let g = self.image_factor(concept, image);
        let mix = EMBED_MIX;
        let noise_w = (1.0 - mix * mix).sqrt();
        let sig_scale = mix * self.factor_norm_scale;
        let mut rng = stream(
            self.spec.seed,
            &[TAG_EMBED_NOISE, concept as u64, image as u64],
        );
        let n_el = self.spec.embedding_tokens * self.spec.embedding_dim;
        let mut out = Vec::with_capacity(n_el);
        for cell in 0..n_el {
            let map_row = &self.embed_map[cell * f_dim..(cell + 1) * f_dim];
            let mapped: f64 = map_row.iter().zip(&g).map(|(a, b)| a * b).sum();
            let noise: f64 = rng.sample(StandardNormal);
            out.push(self.spec.embedding_std * (sig_scale * mapped + noise_w * noise));
        }
        Tensor::from_f64s(
            &out,
            &[self.spec.embedding_tokens, self.spec.embedding_dim],
        )
    }
}

/// Counter-seeded stream: every random quantity gets its own generator,
/// derived from the dataset seed and the entity's coordinates.
fn stream(seed: u64, words: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &w in words {
        h = splitmix64(h ^ w);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Smooth unit-RMS template: a half-sine envelope over the window times a
/// factor-specific carrier, mimicking an evoked response.
fn temporal_template(factor: usize, timepoints: usize) -> Vec<f64> {
    let freq = 1.0 + 0.5 * factor as f64;
    let phase = 0.61 * factor as f64;
    let mut wave: Vec<f64> = (0..timepoints)
        .map(|t| {
            let u = (t as f64 + 0.5) / timepoints as f64;
            let envelope = (std::f64::consts::PI * u).sin();
            envelope * (2.0 * std::f64::consts::PI * freq * u + phase).sin()
        })
        .collect();
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / timepoints as f64).sqrt();
    if rms > 1e-9 {
        for v in &mut wave {
            *v /= rms;
        }
    } else {
        wave.iter_mut().for_each(|v| *v = 1.0);
    }
    wave
}

/// Per-channel mixing gains for a region-emphasis spec, if any.
fn region_row_gains(spec: &SynthSpec) -> Result<Option<Vec<f64>>> {
    let Some((region, gain)) = &spec.region_gain else {
        return Ok(None);
    };
    let mask = regions::region_mask(&spec.preset, region)?;
    let mut gains = vec![1.0f64; spec.preset.channels];
    for i in mask {
        gains[i] = *gain;
    }
    Ok(Some(gains))
}
