//! Evaluation-protocol splits.
//!
//! A *trial* is one (subject, concept, image) triple. Training consumes each
//! repetition of a trial as its own sample, while test-set trials are single
//! repetition-averaged recordings, so split plans are built at trial grain
//! and loaders expand repetitions.
//!
//! Three protocols:
//! - **subject-specific** — one fold per subject, trained and tested on that
//!   subject alone;
//! - **cross-subject** — one fold per subject, trained on that subject and
//!   tested on every *other* subject's test set;
//! - **leave-one-subject-out** — one fold per held-out subject, trained on
//!   the pooled training sets of the others, with a "within" evaluation on
//!   the training subjects' test sets and a "cross" evaluation on the
//!   held-out subject's test set.

use crate::data::DatasetPreset;
use crate::error::{Error, Result};

/// How train and test sets are assigned across subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    SubjectSpecific,
    CrossSubject,
    LeaveOneSubjectOut,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::SubjectSpecific => write!(f, "subject-specific"),
            Protocol::CrossSubject => write!(f, "cross-subject"),
            Protocol::LeaveOneSubjectOut => write!(f, "loso"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subject" | "subject-specific" => Ok(Protocol::SubjectSpecific),
            "cross" | "cross-subject" => Ok(Protocol::CrossSubject),
            "loso" | "leave-one-subject-out" => Ok(Protocol::LeaveOneSubjectOut),
            other => Err(Error::config(format!(
                "unknown protocol '{other}' (expected subject, cross, or loso)"
            ))),
        }
    }
}

/// One (subject, concept, image) trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialKey {
    pub subject: u32,
    pub concept: u32,
    pub image: u32,
}

/// A labeled set of test trials within a fold.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    /// "test" (subject-specific), "subject_NN" (cross-subject), or
    /// "within"/"cross" (leave-one-subject-out).
    pub label: String,
    pub trials: Vec<TrialKey>,
}

/// One train/evaluate unit of a protocol.
#[derive(Debug, Clone)]
pub struct Fold {
    pub label: String,
    pub train: Vec<TrialKey>,
    pub eval: Vec<EvalSplit>,
}

/// The full schedule of folds for one protocol over one dataset.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

fn train_trials(preset: &DatasetPreset, subject: u32) -> Vec<TrialKey> {
    let mut out = Vec::with_capacity(preset.train_trials_per_subject());
    for concept in 0..preset.train_concepts as u32 {
        for image in 0..preset.train_images_per_concept as u32 {
            out.push(TrialKey {
                subject,
                concept,
                image,
            });
        }
    }
    out
}

fn test_trials(preset: &DatasetPreset, subject: u32) -> Vec<TrialKey> {
    let base = preset.test_concept_base();
    let mut out = Vec::with_capacity(preset.test_trials_per_subject());
    for concept in 0..preset.test_concepts as u32 {
        for image in 0..preset.test_images_per_concept as u32 {
            out.push(TrialKey {
                subject,
                concept: base + concept,
                image,
            });
        }
    }
    out
}

/// Build the fold schedule for `protocol` over `n_subjects` subjects.
///
/// Cross-subject and leave-one-subject-out need at least two subjects.
/// Test concepts are disjoint from training concepts by construction, so
/// train and eval sets never share a trial key within a fold.
pub fn make_splits(
    preset: &DatasetPreset,
    n_subjects: usize,
    protocol: Protocol,
) -> Result<SplitPlan> {
    preset.validate()?;
    if n_subjects == 0 {
        return Err(Error::config("need at least one subject".to_string()));
    }
    if n_subjects < 2 && protocol != Protocol::SubjectSpecific {
        return Err(Error::config(format!(
            "protocol {protocol} needs ≥ 2 subjects, got {n_subjects}"
        )));
    }
    let subjects: Vec<u32> = (0..n_subjects as u32).collect();
    let folds = match protocol {
        Protocol::SubjectSpecific => subjects
            .iter()
            .map(|&s| Fold {
                label: format!("subject_{s:02}"),
                train: train_trials(preset, s),
                eval: vec![EvalSplit {
                    label: "test".to_string(),
                    trials: test_trials(preset, s),
                }],
            })
            .collect(),
        Protocol::CrossSubject => subjects
            .iter()
            .map(|&s| Fold {
                label: format!("subject_{s:02}"),
                train: train_trials(preset, s),
                eval: subjects
                    .iter()
                    .filter(|&&j| j != s)
                    .map(|&j| EvalSplit {
                        label: format!("subject_{j:02}"),
                        trials: test_trials(preset, j),
                    })
                    .collect(),
            })
            .collect(),
        Protocol::LeaveOneSubjectOut => subjects
            .iter()
            .map(|&held_out| {
                let training: Vec<u32> =
                    subjects.iter().copied().filter(|&j| j != held_out).collect();
                let mut train = Vec::with_capacity(
                    training.len() * preset.train_trials_per_subject(),
                );
                let mut within = Vec::with_capacity(
                    training.len() * preset.test_trials_per_subject(),
                );
                for &j in &training {
                    train.extend(train_trials(preset, j));
                    within.extend(test_trials(preset, j));
                }
                Fold {
                    label: format!("fold_{held_out:02}"),
                    train,
                    eval: vec![
                        EvalSplit {
                            label: "within".to_string(),
                            trials: within,
                        },
                        EvalSplit {
                            label: "cross".to_string(),
                            trials: test_trials(preset, held_out),
                        },
                    ],
                }
            })
            .collect(),
    };
    Ok(SplitPlan { protocol, folds })
}
