//! Datasets: the binary tensor container, dataset presets, synthetic data
//! generation, brain-region channel masks, evaluation-protocol splits, and
//! the on-disk dataset directory layout.
//!
//! The system boundary for stimuli is the visual *embedding*: raw images are
//! never handled. A dataset is a set of neural recordings (per subject,
//! concept, image, repetition) plus one embedding table per split, stored
//! under one directory:
//!
//! ```text
//! dataset/
//!   manifest.txt        key=value description (written last; commit marker)
//!   train/*.vibe        per-subject training recordings
//!   test/*.vibe         per-subject test recordings (repetition-averaged)
//!   embeddings/*.vibe   token embeddings per split
//! ```

pub mod container;
pub mod regions;
pub mod splits;
pub mod store;
pub mod synth;

pub use container::{AnyTensor, Container};
pub use regions::{
    ablated_channel_count, apply_ablation, region_mask, AblationMode, RegionConfig,
};
pub use splits::{make_splits, EvalSplit, Fold, Protocol, SplitPlan, TrialKey};
pub use store::{synth_dataset, Dataset, DatasetWriter, EmbeddingTable};
pub use synth::{SynthGenerator, SynthSpec};

use crate::error::{Error, Result};
use crate::nd::Tensor;

/// One neural recording: a single presentation of one image to one subject.
#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: u32,
    pub concept_id: u32,
    pub image_id: u32,
    pub repetition: u32,
    /// Preprocessed signal, shape `(C, T)`.
    pub signal: Tensor<f32>,
}

impl Recording {
    /// Check the signal against a preset's `(C, T)` and require finite values.
    pub fn validate(&self, preset: &DatasetPreset) -> Result<()> {
        let shape = self.signal.shape();
        if shape != [preset.channels, preset.timepoints] {
            return Err(Error::dim(format!(
                "recording (subject {}, concept {}, image {}) has shape {:?}, preset {} wants ({}, {})",
                self.subject_id,
                self.concept_id,
                self.image_id,
                shape,
                preset.name,
                preset.channels,
                preset.timepoints
            )));
        }
        self.signal.ensure_finite("recording signal")
    }
}

/// Which capture rig a dataset mimics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Eeg,
    Meg,
    Toy,
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PresetName::Eeg => write!(f, "eeg"),
            PresetName::Meg => write!(f, "meg"),
            PresetName::Toy => write!(f, "toy"),
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eeg" => Ok(PresetName::Eeg),
            "meg" => Ok(PresetName::Meg),
            "toy" => Ok(PresetName::Toy),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected eeg, meg, or toy)"
            ))),
        }
    }
}

/// Signal geometry and trial counts for one dataset family.
///
/// The `eeg` and `meg` presets carry the published trial structure; counts
/// are plain fields so tests and demo runs can shrink them while keeping the
/// signal geometry (shrunken presets round-trip through dataset manifests).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPreset {
    pub name: PresetName,
    pub channels: usize,
    pub timepoints: usize,
    /// Samples per second of the (already epoched) signal window.
    pub sample_rate: f64,
    pub train_concepts: usize,
    pub train_images_per_concept: usize,
    pub train_repetitions: usize,
    pub test_concepts: usize,
    pub test_images_per_concept: usize,
    /// Repetitions averaged into each test-set recording.
    pub test_repetitions: usize,
    /// Subject count of the study this preset mimics.
    pub default_subjects: usize,
}

impl DatasetPreset {
    /// 63-channel scalp recordings: 1654 training concepts × 10 images ×
    /// 4 repetitions, 200 held-out test concepts × 1 image × 80 repetitions,
    /// 10 subjects.
    pub fn eeg() -> Self {
        DatasetPreset {
            name: PresetName::Eeg,
            channels: 63,
            timepoints: 250,
            sample_rate: 250.0,
            train_concepts: 1654,
            train_images_per_concept: 10,
            train_repetitions: 4,
            test_concepts: 200,
            test_images_per_concept: 1,
            test_repetitions: 80,
            default_subjects: 10,
        }
    }

    /// 271-channel magnetometer recordings: 1854 training concepts ×
    /// 12 images × 1 repetition, 200 test concepts × 1 image ×
    /// 12 repetitions, 4 subjects.
    pub fn meg() -> Self {
        DatasetPreset {
            name: PresetName::Meg,
            channels: 271,
            timepoints: 200,
            sample_rate: 200.0,
            train_concepts: 1854,
            train_images_per_concept: 12,
            train_repetitions: 1,
            test_concepts: 200,
            test_images_per_concept: 1,
            test_repetitions: 12,
            default_subjects: 4,
        }
    }

    /// Miniature preset for fast tests and demos.
    pub fn toy() -> Self {
        DatasetPreset {
            name: PresetName::Toy,
            channels: 8,
            timepoints: 12,
            sample_rate: 12.0,
            train_concepts: 12,
            train_images_per_concept: 2,
            train_repetitions: 2,
            test_concepts: 4,
            test_images_per_concept: 1,
            test_repetitions: 3,
            default_subjects: 2,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name.parse::<PresetName>()? {
            PresetName::Eeg => Self::eeg(),
            PresetName::Meg => Self::meg(),
            PresetName::Toy => Self::toy(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("channels", self.channels),
            ("timepoints", self.timepoints),
            ("train_concepts", self.train_concepts),
            ("train_images_per_concept", self.train_images_per_concept),
            ("train_repetitions", self.train_repetitions),
            ("test_concepts", self.test_concepts),
            ("test_images_per_concept", self.test_images_per_concept),
            ("test_repetitions", self.test_repetitions),
            ("default_subjects", self.default_subjects),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::config(format!("preset {}: {name} must be ≥ 1", self.name)));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::config(format!(
                "preset {}: sample_rate must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Trials per subject in the training split, where a trial is one
    /// (concept, image) pair; repetitions are recordings within a trial.
    pub fn train_trials_per_subject(&self) -> usize {
        self.train_concepts * self.train_images_per_concept
    }

    /// Recordings per subject in the training split (trials × repetitions).
    pub fn train_recordings_per_subject(&self) -> usize {
        self.train_trials_per_subject() * self.train_repetitions
    }

    /// Trials (= recordings, already repetition-averaged) per subject in the
    /// test split.
    pub fn test_trials_per_subject(&self) -> usize {
        self.test_concepts * self.test_images_per_concept
    }

    /// Test concepts are held out from training; their ids start here.
    pub fn test_concept_base(&self) -> u32 {
        self.train_concepts as u32
    }
}

/// How a loader treats the repeated presentations of one (concept, image)
/// trial: keep every repetition as its own training example, or collapse
/// each trial to the mean of its repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepetitionMode {
    #[default]
    Individual,
    Average,
}

impl std::fmt::Display for RepetitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RepetitionMode::Individual => "individual",
            RepetitionMode::Average => "average",
        })
    }
}

impl std::str::FromStr for RepetitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(RepetitionMode::Individual),
            "average" => Ok(RepetitionMode::Average),
            other => Err(Error::config(format!(
                "unknown repetition mode '{other}' (expected individual|average)"
            ))),
        }
    }
}

/// Apply a [`RepetitionMode`] to a loaded recording list.
pub fn apply_repetition_mode(
    recordings: Vec<Recording>,
    mode: RepetitionMode,
) -> Result<Vec<Recording>> {
    match mode {
        RepetitionMode::Individual => Ok(recordings),
        RepetitionMode::Average => average_repetitions(&recordings),
    }
}

/// Average repetitions of each (concept, image) trial into one recording.
///
/// The output keeps the first-seen order of trials; the `repetition` field of
/// an averaged recording is 0 and each group must cover the same subject.
pub fn average_repetitions(recordings: &[Recording]) -> Result<Vec<Recording>> {
    let mut order: Vec<(u32, u32, u32)> = Vec::new();
    let mut groups: std::collections::HashMap<(u32, u32, u32), Vec<&Recording>> =
        std::collections::HashMap::new();
    for r in recordings {
        let key = (r.subject_id, r.concept_id, r.image_id);
        let slot = groups.entry(key).or_default();
        if slot.is_empty() {
            order.push(key);
        }
        slot.push(r);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let group = &groups[&key];
        let shape = group[0].signal.shape().to_vec();
        for r in group {
            if r.signal.shape() != shape {
                return Err(Error::dim(format!(
                    "repetitions of trial (subject {}, concept {}, image {}) disagree on shape",
                    key.0, key.1, key.2
                )));
            }
        }
        let mut sum = vec![0.0f32; group[0].signal.len()];
        for r in group {
            for (acc, v) in sum.iter_mut().zip(r.signal.values()) {
                *acc += *v;
            }
        }
        let n = group.len() as f32;
        for v in &mut sum {
            *v /= n;
        }
        out.push(Recording {
            subject_id: key.0,
            concept_id: key.1,
            image_id: key.2,
            repetition: 0,
            signal: Tensor::from_vec(sum, &shape)?,
        });
    }
    Ok(out)
}

/// Stack recordings into a `(B, 1, C, T)` batch for the encoder.
pub fn stack_recordings(recordings: &[&Recording]) -> Result<Tensor<f32>> {
    if recordings.is_empty() {
        return Err(Error::contract("cannot stack an empty recording batch".to_string()));
    }
    let shape = recordings[0].signal.shape();
    if shape.len() != 2 {
        return Err(Error::dim(format!(
            "recording signals must be rank 2, got {shape:?}"
        )));
    }
    let (c, t) = (shape[0], shape[1]);
    let mut data = Vec::with_capacity(recordings.len() * c * t);
    for r in recordings {
        if r.signal.shape() != [c, t] {
            return Err(Error::dim(format!(
                "cannot stack recordings of shapes ({c}, {t}) and {:?}",
                r.signal.shape()
            )));
        }
        data.extend_from_slice(r.signal.values());
    }
    Tensor::from_vec(data, &[recordings.len(), 1, c, t])
}
