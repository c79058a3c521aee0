//! Pooled value statistics across families of stored tensors.
//!
//! Each input file is one *family*, labeled by its file stem: every tensor
//! entry in the container is pooled into one flat sample, except id vectors
//! (entries whose name ends in `_ids`). The report is a column-per-family
//! CSV with the distribution rows in fixed order, plus an optional box-plot
//! SVG on a symmetric-log axis.
//!
//! When exactly three families are given they are read as (visual
//! embedding, neural proxy, neural latent) in that order, and a
//! scale-bridge verdict — is std(visual) < std(proxy) < std(latent)? — is
//! appended to the CSV as a comment line. A violated ordering is a verdict,
//! not a failure: the table still gets written and the call still succeeds.

use std::path::{Path, PathBuf};

use crate::data::Container;
use crate::error::{Error, Result};
use crate::metrics::{box_plot_svg, embedding_stats, scale_bridge_check, EmbeddingStats};

/// One family's pooled statistics.
#[derive(Debug, Clone)]
pub struct FamilyStats {
    pub label: String,
    pub stats: EmbeddingStats,
}

/// What `stats_table` produced: the per-family statistics and, when three
/// families were given, the scale-bridge verdict line.
#[derive(Debug, Clone)]
pub struct StatsOutcome {
    pub families: Vec<FamilyStats>,
    pub bridge_verdict: Option<String>,
    /// Present only when the bridge check ran and held.
    pub bridge_ratios: Option<(f64, f64)>,
}

/// Pool every non-id tensor entry of one container into a flat f64 sample.
fn pool_container(c: &Container) -> Vec<f64> {
    let mut pool = Vec::new();
    for (name, tensor) in c.entries() {
        if name.ends_with("_ids") {
            continue;
        }
        pool.extend(tensor.to_f64().values().iter().copied());
    }
    pool
}

/// Statistics of one file's pool.
pub fn file_stats(path: &Path) -> Result<EmbeddingStats> {
    let pool = pool_container(&Container::read(path)?);
    if pool.is_empty() {
        return Err(Error::data(format!(
            "{} holds no poolable values (only id entries)",
            path.display()
        )));
    }
    embedding_stats(&pool)
}

/// Statistics of several files pooled together, exactly as if their values
/// had been stored in one file.
pub fn pooled_stats_of_files(paths: &[PathBuf]) -> Result<EmbeddingStats> {
    let mut pool = Vec::new();
    for path in paths {
        pool.extend(pool_container(&Container::read(path)?));
    }
    if pool.is_empty() {
        return Err(Error::data("no poolable values in any input".to_string()));
    }
    embedding_stats(&pool)
}

/// Build the per-family statistics table, write it to `out_csv` (plus an
/// optional box-plot SVG), and return the outcome.
pub fn stats_table(
    files: &[PathBuf],
    out_csv: &Path,
    svg: Option<&Path>,
    linthresh: f64,
) -> Result<StatsOutcome> {
    if files.is_empty() {
        return Err(Error::config("stats needs at least one input file".to_string()));
    }
    let mut families = Vec::with_capacity(files.len());
    for path in files {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| path.display().to_string());
        if families.iter().any(|f: &FamilyStats| f.label == label) {
            return Err(Error::config(format!(
                "two inputs share the family label '{label}'; rename one file"
            )));
        }
        families.push(FamilyStats {
            label,
            stats: file_stats(path)?,
        });
    }

    // The bridge verdict only makes sense over the canonical triple.
    let (bridge_verdict, bridge_ratios) = if families.len() == 3 {
        let (visual, proxy, latent) = (&families[0].stats, &families[1].stats, &families[2].stats);
        match scale_bridge_check(visual, proxy, latent) {
            Ok(report) => (
                Some(format!(
                    "ok — std(proxy)/std(visual) = {:.4}, std(latent)/std(proxy) = {:.4}",
                    report.proxy_over_visual, report.latent_over_proxy
                )),
                Some((report.proxy_over_visual, report.latent_over_proxy)),
            ),
            Err(e) => (Some(format!("violated — {e}")), None),
        }
    } else {
        (None, None)
    };

    let mut csv = String::from("stat");
    for f in &families {
        csv.push(',');
        csv.push_str(&f.label);
    }
    csv.push('\n');
    type StatGetter = fn(&EmbeddingStats) -> f64;
    let rows: [(&str, StatGetter); 7] = [
        ("mean", |s| s.mean),
        ("std", |s| s.std),
        ("median", |s| s.median),
        ("q25", |s| s.q25),
        ("q75", |s| s.q75),
        ("q01", |s| s.q01),
        ("q99", |s| s.q99),
    ];
    for (name, get) in rows {
        csv.push_str(name);
        for f in &families {
            csv.push_str(&format!(",{}", get(&f.stats)));
        }
        csv.push('\n');
    }
    csv.push_str("count");
    for f in &families {
        csv.push_str(&format!(",{}", f.stats.count));
    }
    csv.push('\n');
    if let Some(verdict) = &bridge_verdict {
        csv.push_str(&format!("# scale_bridge: {verdict}\n"));
    }
    if let Some(dir) = out_csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out_csv, csv)?;

    if let Some(svg_path) = svg {
        let plot_families: Vec<(String, EmbeddingStats)> = families
            .iter()
            .map(|f| (f.label.clone(), f.stats))
            .collect();
        let doc = box_plot_svg(&plot_families, linthresh)?;
        if let Some(dir) = svg_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(svg_path, doc)?;
    }

    Ok(StatsOutcome {
        families,
        bridge_verdict,
        bridge_ratios,
    })
}
