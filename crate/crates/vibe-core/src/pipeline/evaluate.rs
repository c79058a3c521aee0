//! Protocol evaluation: score a predictions file against a dataset's test
//! recordings and write a per-row metric report.
//!
//! Rows follow the protocol's fold schedule. A fold with a single eval
//! split contributes one row named after the fold; a fold with several
//! contributes one row per split, named `fold_split`. Every row's triple is
//! the mean over its subjects of that subject's trial-mean triple, and an
//! `average` row closes the report.
//!
//! Scoring may fan out across threads (capped by `VIBE_THREADS`), but rows
//! are merged back in schedule order, so the report is identical at any
//! thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::data::{Container, Dataset, Protocol, Recording, SplitPlan, TrialKey};
use crate::error::{Error, Result};
use crate::metrics::{box_plot_svg, embedding_stats, EvalReport, MetricTriple};
use crate::nd::Tensor;
use crate::pipeline::infer::PREDICTIONS_KIND;

/// One scored row: its metric triple plus the per-trial correlation
/// samples kept for plotting.
type ScoredRow = (MetricTriple, Vec<f64>);

/// What a predictions container holds one signal per.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    /// One prediction per test image, decoded from its embedding; shared
    /// across subjects.
    Embedding,
    /// One prediction per test trial, reconstructed from the recording
    /// itself.
    Reconstruction,
}

/// A loaded predictions file, indexed for trial lookup.
#[derive(Debug)]
pub struct Predictions {
    mode: PredictionMode,
    channels: usize,
    timepoints: usize,
    signals: Tensor<f32>,
    /// Embedding mode: (concept, image) → row.
    by_image: HashMap<(u32, u32), usize>,
    /// Reconstruction mode: (subject, concept, image, repetition) → row.
    by_trial: HashMap<(u32, u32, u32, u32), usize>,
    subjects: BTreeSet<u32>,
}

impl Predictions {
    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.signals.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn signal(&self, row: usize) -> &[f32] {
        let per = self.channels * self.timepoints;
        &self.signals.values()[row * per..(row + 1) * per]
    }

    fn lookup(&self, r: &Recording) -> Option<usize> {
        match self.mode {
            PredictionMode::Embedding => {
                self.by_image.get(&(r.concept_id, r.image_id)).copied()
            }
            PredictionMode::Reconstruction => self
                .by_trial
                .get(&(r.subject_id, r.concept_id, r.image_id, r.repetition))
                .copied(),
        }
    }
}

/// Read and index a predictions container written by the inference step.
pub fn load_predictions(path: &Path) -> Result<Predictions> {
    let c = Container::read(path)?;
    match c.manifest_get("kind") {
        Some(k) if k == PREDICTIONS_KIND => {}
        other => {
            return Err(Error::data(format!(
                "{} holds kind {:?}, expected {PREDICTIONS_KIND}",
                path.display(),
                other.unwrap_or("<missing>")
            )))
        }
    }
    let mode = match c.manifest_get("mode") {
        Some("embedding") => PredictionMode::Embedding,
        Some("reconstruction") => PredictionMode::Reconstruction,
        other => {
            return Err(Error::data(format!(
                "unknown prediction mode {:?}",
                other.unwrap_or("<missing>")
            )))
        }
    };
    let signals = c.require("signals")?.to_f32();
    if signals.shape().len() != 3 {
        return Err(Error::data(format!(
            "signals must be rank-3 (count, channels, timepoints), got {:?}",
            signals.shape()
        )));
    }
    let count = signals.shape()[0];
    let ids = |name: &str| -> Result<Vec<u32>> {
        let t = c.require(name)?.to_f32();
        if t.len() != count {
            return Err(Error::data(format!(
                "{name} has {} entries for {count} signals",
                t.len()
            )));
        }
        Ok(t.values().iter().map(|&v| v as u32).collect())
    };
    let concepts = ids("concept_ids")?;
    let images = ids("image_ids")?;

    let mut by_image = HashMap::new();
    let mut by_trial = HashMap::new();
    let mut subjects = BTreeSet::new();
    match mode {
        PredictionMode::Embedding => {
            for row in 0..count {
                let key = (concepts[row], images[row]);
                if by_image.insert(key, row).is_some() {
                    return Err(Error::data(format!(
                        "duplicate prediction for concept {}, image {}",
                        key.0, key.1
                    )));
                }
            }
        }
        PredictionMode::Reconstruction => {
            let subject_ids = ids("subject_ids")?;
            let repetitions = ids("repetition_ids")?;
            for row in 0..count {
                let key = (subject_ids[row], concepts[row], images[row], repetitions[row]);
                if by_trial.insert(key, row).is_some() {
                    return Err(Error::data(format!(
                        "duplicate prediction for subject {}, concept {}, image {}, repetition {}",
                        key.0, key.1, key.2, key.3
                    )));
                }
                subjects.insert(subject_ids[row]);
            }
        }
    }

    Ok(Predictions {
        mode,
        channels: signals.shape()[1],
        timepoints: signals.shape()[2],
        signals,
        by_image,
        by_trial,
        subjects,
    })
}

/// Evaluation-thread cap: `VIBE_THREADS` when set (rejecting garbage),
/// otherwise the machine's available parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("VIBE_THREADS") {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!(
                "VIBE_THREADS must be a positive integer, got '{raw}'"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// Score `predictions` against `dataset` under `protocol`, write the CSV
/// report to `out_csv` (plus an optional per-row correlation box plot),
/// and return the report.
pub fn evaluate(
    dataset: &Dataset,
    predictions: &Predictions,
    protocol: Protocol,
    threads: usize,
    out_csv: &Path,
    svg: Option<&Path>,
) -> Result<EvalReport> {
    let preset = dataset.preset();
    if predictions.channels != preset.channels || predictions.timepoints != preset.timepoints {
        return Err(Error::data(format!(
            "predictions hold ({}, {}) signals, dataset preset {} wants ({}, {})",
            predictions.channels,
            predictions.timepoints,
            preset.name,
            preset.channels,
            preset.timepoints
        )));
    }
    let plan = crate::data::make_splits(preset, dataset.subjects().len(), protocol)?;

    // Test recordings, loaded once per subject.
    let mut test_recordings: BTreeMap<u32, Vec<Recording>> = BTreeMap::new();
    for &s in dataset.subjects() {
        test_recordings.insert(s, dataset.load_test(s)?);
    }
    check_coverage(&plan, &test_recordings, predictions)?;

    // Row schedule: (fold, split, row id), fixed before any scoring.
    let rows_spec: Vec<(usize, usize, String)> = plan
        .folds
        .iter()
        .enumerate()
        .flat_map(|(fi, fold)| {
            fold.eval.iter().enumerate().map(move |(si, split)| {
                let id = if fold.eval.len() == 1 {
                    fold.label.clone()
                } else {
                    format!("{}_{}", fold.label, split.label)
                };
                (fi, si, id)
            })
        })
        .collect();

    let workers = threads.max(1).min(rows_spec.len().max(1));
    let mut scored: Vec<Option<ScoredRow>> = vec![None; rows_spec.len()];
    if workers <= 1 {
        for (i, (fi, si, _)) in rows_spec.iter().enumerate() {
            scored[i] = Some(score_row(
                &plan.folds[*fi].eval[*si].trials,
                &test_recordings,
                predictions,
            )?);
        }
    } else {
        let results: Vec<Result<Vec<(usize, ScoredRow)>>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let rows_spec = &rows_spec;
                        let plan = &plan;
                        let test_recordings = &test_recordings;
                        scope.spawn(move || {
                            let mut out = Vec::new();
                            for (i, (fi, si, _)) in rows_spec.iter().enumerate() {
                                if i % workers != w {
                                    continue;
                                }
                                let row = score_row(
                                    &plan.folds[*fi].eval[*si].trials,
                                    test_recordings,
                                    predictions,
                                )?;
                                out.push((i, row));
                            }
                            Ok(out)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scoring thread panicked"))
                    .collect()
            });
        for batch in results {
            for (i, row) in batch? {
                scored[i] = Some(row);
            }
        }
    }

    let stage = match predictions.mode {
        PredictionMode::Embedding => "stage2",
        PredictionMode::Reconstruction => "stage1",
    };
    let mut subject_rows = Vec::with_capacity(rows_spec.len());
    let mut pearson_families = Vec::new();
    for ((_, _, id), row) in rows_spec.iter().zip(scored) {
        let (triple, samples) = row.expect("every row scored");
        subject_rows.push((id.clone(), triple));
        if !samples.is_empty() {
            pearson_families.push((id.clone(), embedding_stats(&samples)?));
        }
    }
    let report = EvalReport::from_subject_rows(&plan.protocol.to_string(), stage, subject_rows)?;
    report.write_csv(out_csv)?;
    if let Some(svg_path) = svg {
        // Correlations live in [-1, 1]; a unit linear threshold makes the
        // symlog axis plainly linear here.
        let doc = box_plot_svg(&pearson_families, 1.0)?;
        if let Some(dir) = svg_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(svg_path, doc)?;
    }
    Ok(report)
}

/// Verify that every subject and every trial the plan needs has a
/// prediction, listing what is absent.
fn check_coverage(
    plan: &SplitPlan,
    test_recordings: &BTreeMap<u32, Vec<Recording>>,
    predictions: &Predictions,
) -> Result<()> {
    let mut needed_subjects = BTreeSet::new();
    for fold in &plan.folds {
        for split in &fold.eval {
            for t in &split.trials {
                needed_subjects.insert(t.subject);
            }
        }
    }
    if predictions.mode == PredictionMode::Reconstruction {
        let missing: Vec<String> = needed_subjects
            .iter()
            .filter(|s| !predictions.subjects.contains(s))
            .map(|s| s.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "predictions are missing subjects: {}",
                missing.join(", ")
            )));
        }
    }
    let mut missing = BTreeSet::new();
    for &subject in &needed_subjects {
        let recs = test_recordings.get(&subject).ok_or_else(|| {
            Error::data(format!("dataset has no test recordings for subject {subject}"))
        })?;
        for r in recs {
            if predictions.lookup(r).is_none() {
                missing.insert(match predictions.mode {
                    PredictionMode::Embedding => {
                        format!("concept {} image {}", r.concept_id, r.image_id)
                    }
                    PredictionMode::Reconstruction => format!(
                        "subject {} concept {} image {} repetition {}",
                        r.subject_id, r.concept_id, r.image_id, r.repetition
                    ),
                });
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(8).cloned().collect();
        let suffix = if missing.len() > shown.len() {
            format!(" … ({} total)", missing.len())
        } else {
            String::new()
        };
        return Err(Error::data(format!(
            "predictions are missing trials: {}{suffix}",
            shown.join("; ")
        )));
    }
    Ok(())
}

/// One row: mean over subjects of per-subject trial-mean triples, plus the
/// raw per-trial correlation samples for plotting.
fn score_row(
    trials: &[TrialKey],
    test_recordings: &BTreeMap<u32, Vec<Recording>>,
    predictions: &Predictions,
) -> Result<ScoredRow> {
    let mut by_subject: BTreeMap<u32, BTreeSet<(u32, u32)>> = BTreeMap::new();
    for t in trials {
        by_subject
            .entry(t.subject)
            .or_default()
            .insert((t.concept, t.image));
    }
    let mut subject_triples = Vec::with_capacity(by_subject.len());
    let mut samples = Vec::new();
    for (subject, wanted) in by_subject {
        let recs = &test_recordings[&subject];
        let mut trial_triples = Vec::new();
        for r in recs {
            if !wanted.contains(&(r.concept_id, r.image_id)) {
                continue;
            }
            let row = predictions
                .lookup(r)
                .expect("coverage was checked before scoring");
            let triple = MetricTriple::compare(predictions.signal(row), r.signal.values())?;
            if let Some(p) = triple.pearson {
                samples.push(p);
            }
            trial_triples.push(triple);
        }
        let mean = MetricTriple::mean(&trial_triples).ok_or_else(|| {
            Error::data(format!("no test trials matched for subject {subject}"))
        })?;
        subject_triples.push(mean);
    }
    let triple = MetricTriple::mean(&subject_triples)
        .ok_or_else(|| Error::data("evaluation row had no subjects".to_string()))?;
    Ok((triple, samples))
}
