//! Region-ablation sweep: how much does each sensor group matter?
//!
//! Six conditions run the full two-stage pipeline end to end on derived
//! datasets — each of the five scalp regions removed in turn, plus the
//! complementary probe of keeping only the visual pathway (temporal ∪
//! occipital) — and their end-to-end test metrics land in one comparative
//! table. Channel counts shrink per condition and the latent height is
//! re-derived from the surviving channels, so every condition trains a
//! correctly-shaped model from scratch.

use std::path::Path;

use crate::data::regions::{REGION_NAMES, VISUAL_PATHWAY};
use crate::data::{
    ablated_channel_count, apply_ablation, AblationMode, Dataset, DatasetWriter, Protocol,
    RegionConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{csv_value, MetricTriple};
use crate::pipeline::config::KvConfig;
use crate::pipeline::evaluate::{evaluate, load_predictions};
use crate::pipeline::infer::infer_end_to_end;
use crate::pipeline::stage1::{train_stage1, Stage1Options};
use crate::pipeline::stage2::{train_stage2, Stage2Options};

/// Sweep-wide settings; per-stage hyperparameters ride in `overrides`,
/// applied identically to every condition.
#[derive(Debug, Clone)]
pub struct AblateOptions {
    pub overrides: KvConfig,
    pub protocol: Protocol,
    /// Evaluation-thread cap.
    pub threads: usize,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            overrides: KvConfig::default(),
            protocol: Protocol::SubjectSpecific,
            threads: 1,
        }
    }
}

/// End-to-end metrics of one ablation condition (the report's average row).
#[derive(Debug, Clone)]
pub struct ConditionResult {
    pub region: String,
    pub mode: AblationMode,
    /// Channels surviving the ablation.
    pub channels: usize,
    pub metrics: MetricTriple,
}

fn mode_name(mode: AblationMode) -> &'static str {
    match mode {
        AblationMode::Remove => "remove",
        AblationMode::Keep => "keep",
    }
}

/// Run the six-condition sweep, writing per-condition artifacts under
/// `out_dir/<mode>_<region>/` and the comparative table to
/// `out_dir/ablation.csv`.
pub fn ablate_regions(
    dataset: &Dataset,
    opts: &AblateOptions,
    out_dir: &Path,
) -> Result<Vec<ConditionResult>> {
    // Fails up front for presets without a region table (toy).
    let regions = RegionConfig::for_preset(dataset.preset())?;
    std::fs::create_dir_all(out_dir)?;

    let mut conditions: Vec<(String, AblationMode)> = REGION_NAMES
        .iter()
        .map(|r| (r.to_string(), AblationMode::Remove))
        .collect();
    conditions.push((VISUAL_PATHWAY.to_string(), AblationMode::Keep));

    let mut results = Vec::with_capacity(conditions.len());
    for (region, mode) in conditions {
        let mask = regions.mask(&region)?;
        let cond_dir = out_dir.join(format!("{}_{region}", mode_name(mode)));
        let derived = write_ablated(dataset, &mask, mode, &cond_dir.join("data"))?;

        let mut s1 = Stage1Options::for_dataset(&derived)?;
        s1.apply(&opts.overrides)?;
        let sum1 = train_stage1(&derived, &s1, &cond_dir)?;

        let mut s2 = Stage2Options::for_dataset(&derived)?;
        s2.apply(&opts.overrides)?;
        let sum2 = train_stage2(&derived, &sum1.final_path, &s2, &cond_dir)?;

        let pred_path = cond_dir.join("predictions.vibe");
        infer_end_to_end(&derived, &sum1.final_path, &sum2.final_path, &pred_path)?;
        let predictions = load_predictions(&pred_path)?;
        let report = evaluate(
            &derived,
            &predictions,
            opts.protocol,
            opts.threads,
            &cond_dir.join("eval.csv"),
            None,
        )?;
        let average = report
            .rows
            .last()
            .ok_or_else(|| Error::data("evaluation report was empty".to_string()))?;

        results.push(ConditionResult {
            region,
            mode,
            channels: derived.preset().channels,
            metrics: average.metrics,
        });
    }

    let mut csv = String::from("condition,mode,channels,mse,pearson,cosine\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.region,
            mode_name(r.mode),
            r.channels,
            csv_value(Some(r.metrics.mse)),
            csv_value(r.metrics.pearson),
            csv_value(r.metrics.cosine),
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(results)
}

/// Write a copy of `src` with `mask` applied to every recording; embeddings
/// pass through untouched.
fn write_ablated(
    src: &Dataset,
    mask: &[usize],
    mode: AblationMode,
    dir: &Path,
) -> Result<Dataset> {
    let mut w = DatasetWriter::create(dir)?;
    for (k, v) in src.manifest() {
        w.set_manifest(k.clone(), v.clone());
    }
    let survivors = ablated_channel_count(src.preset().channels, mask, mode)?;
    w.set_manifest("channels", survivors.to_string());
    for &s in src.subjects() {
        w.write_train(s, &apply_ablation(&src.load_train(s)?, mask, mode)?)?;
        w.write_test(s, &apply_ablation(&src.load_test(s)?, mask, mode)?)?;
    }
    for split in ["train", "test"] {
        w.write_embeddings(split, &src.load_embeddings(split)?)?;
    }
    w.finish()?;
    Dataset::open(dir)
}
