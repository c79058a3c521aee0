//! Evaluation metrics and embedding distribution statistics.
//!
//! The metric triple (MSE, Pearson, cosine) is computed per recording over
//! the flattened `(C, T)` values, then averaged — first across a subject's
//! recordings, then across subjects — so each subject contributes one row
//! and the summary row is the arithmetic mean of subject rows.
//!
//! Pearson and cosine are undefined on degenerate inputs (zero variance,
//! zero vector); those are *flagged missing* (`None`, written as `nan` in
//! CSV), not errors, because a constant prediction is a legitimate model
//! output that the report must represent.
//!
//! All accumulation is in `f64` regardless of the storage precision.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::Scalar;

/// Pearson correlation of two equal-length value sequences.
///
/// Returns `None` when either input has zero variance (the statistic is
/// undefined there). Lengths must match and be ≥ 2.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::dim(format!(
            "pearson needs equal lengths ≥ 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mean = |v: &[T]| v.iter().map(|a| a.to_f64()).sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a.to_f64() - mx;
        let dy = b.to_f64() - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx.sqrt() * vy.sqrt())))
}

/// Cosine similarity ⟨x,y⟩ / (‖x‖‖y‖); `None` when either vector is zero.
pub fn cosine<T: Scalar>(x: &[T], y: &[T]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dim(format!(
            "cosine needs equal nonempty lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (a.to_f64(), b.to_f64());
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Ok(None);
    }
    Ok(Some(dot / (nx.sqrt() * ny.sqrt())))
}

/// Element-mean squared difference.
pub fn mse_metric<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::dim(format!(
            "mse needs equal nonempty lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let sum: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum();
    Ok(sum / x.len() as f64)
}

/// The metric triple for one comparison; correlation metrics may be missing
/// on degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub mse: f64,
    pub pearson: Option<f64>,
    pub cosine: Option<f64>,
}

impl MetricTriple {
    /// All three metrics of one prediction/truth pair over flattened values.
    pub fn compare<T: Scalar>(prediction: &[T], truth: &[T]) -> Result<MetricTriple> {
        Ok(MetricTriple {
            mse: mse_metric(prediction, truth)?,
            pearson: pearson(prediction, truth)?,
            cosine: cosine(prediction, truth)?,
        })
    }

    /// Arithmetic mean of several triples. Missing values are excluded from
    /// their metric's mean; a metric missing everywhere stays missing.
    pub fn mean(rows: &[MetricTriple]) -> Option<MetricTriple> {
        if rows.is_empty() {
            return None;
        }
        let mse = rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64;
        let mean_opt = |get: fn(&MetricTriple) -> Option<f64>| {
            let present: Vec<f64> = rows.iter().filter_map(get).collect();
            if present.is_empty() {
                None
            } else {
                Some(present.iter().sum::<f64>() / present.len() as f64)
            }
        };
        Some(MetricTriple {
            mse,
            pearson: mean_opt(|r| r.pearson),
            cosine: mean_opt(|r| r.cosine),
        })
    }
}

/// Render an optional metric for a CSV cell: plain `f64` display, with
/// missing values spelled `nan`.
pub fn csv_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "nan".to_string(),
    }
}

/// One CSV row of an evaluation report.
#[derive(Debug, Clone)]
pub struct MetricRow {
    /// "subject_NN", a fold/eval label, or "average".
    pub subject: String,
    pub protocol: String,
    /// "stage1" (reconstruction) or "stage2" (end-to-end).
    pub stage: String,
    pub metrics: MetricTriple,
}

/// Per-subject metric rows plus their arithmetic-mean summary row.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    /// Build from per-subject rows; appends the "average" row (arithmetic
    /// mean of the given rows).
    pub fn from_subject_rows(
        protocol: &str,
        stage: &str,
        subject_rows: Vec<(String, MetricTriple)>,
    ) -> Result<EvalReport> {
        if subject_rows.is_empty() {
            return Err(Error::data("evaluation produced no subject rows".to_string()));
        }
        let triples: Vec<MetricTriple> = subject_rows.iter().map(|(_, m)| *m).collect();
        let mut rows: Vec<MetricRow> = subject_rows
            .into_iter()
            .map(|(subject, metrics)| MetricRow {
                subject,
                protocol: protocol.to_string(),
                stage: stage.to_string(),
                metrics,
            })
            .collect();
        rows.push(MetricRow {
            subject: "average".to_string(),
            protocol: protocol.to_string(),
            stage: stage.to_string(),
            metrics: MetricTriple::mean(&triples).expect("nonempty rows"),
        });
        Ok(EvalReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,protocol,stage,mse,pearson,cosine\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.subject,
                r.protocol,
                r.stage,
                csv_value(Some(r.metrics.mse)),
                csv_value(r.metrics.pearson),
                csv_value(r.metrics.cosine),
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Distribution summary of one pooled embedding family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q01: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q99: f64,
}

/// Quantile of ascending-sorted values by linear interpolation between the
/// closest order statistics (rank `h = (n−1)·q`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Pooled distribution statistics of a flat value collection.
pub fn embedding_stats<T: Scalar>(values: &[T]) -> Result<EmbeddingStats> {
    if values.is_empty() {
        return Err(Error::contract(
            "embedding_stats needs at least one value".to_string(),
        ));
    }
    let n = values.len() as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut sorted = Vec::with_capacity(values.len());
    for v in values {
        let v = v.to_f64();
        if !v.is_finite() {
            return Err(Error::numeric(
                "embedding_stats: non-finite value in the pool".to_string(),
            ));
        }
        sum += v;
        sum_sq += v * v;
        sorted.push(v);
    }
    sorted.sort_by(f64::total_cmp);
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(EmbeddingStats {
        count: values.len(),
        mean,
        std: var.sqrt(),
        q01: quantile_sorted(&sorted, 0.01),
        q25: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        q99: quantile_sorted(&sorted, 0.99),
    })
}

/// Result of the scale-bridge ordering check across the three embedding
/// families of the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct BridgeReport {
    /// std(proxy) / std(visual embedding) — the bridged gap (≈ 40×).
    pub proxy_over_visual: f64,
    /// std(latent) / std(proxy) — the residual gap (≈ 2.5×).
    pub latent_over_proxy: f64,
}

/// Check that the proxy embedding bridges the scale gap: the visual
/// embeddings must be strictly narrower than the proxy, which must be
/// strictly narrower than the neural latents. Violations are data errors
/// carrying the observed ratios.
pub fn scale_bridge_check(
    visual: &EmbeddingStats,
    proxy: &EmbeddingStats,
    latent: &EmbeddingStats,
) -> Result<BridgeReport> {
    let report = BridgeReport {
        proxy_over_visual: proxy.std / visual.std,
        latent_over_proxy: latent.std / proxy.std,
    };
    if !(visual.std < proxy.std && proxy.std < latent.std) {
        return Err(Error::data(format!(
            "scale bridge violated: std(visual)={} std(proxy)={} std(latent)={} \
             (ratios {:.4}× and {:.4}×) — strict ordering visual < proxy < latent required",
            visual.std, proxy.std, latent.std, report.proxy_over_visual, report.latent_over_proxy
        )));
    }
    Ok(report)
}

/// Render box plots of embedding families as a static SVG.
///
/// Boxes span Q25–Q75 with a median line; whiskers reach Q01/Q99. The value
/// axis uses a symmetric-log transform (linear within ±`linthresh`,
/// logarithmic outside), which keeps families three orders of magnitude
/// apart readable in one panel.
pub fn box_plot_svg(families: &[(String, EmbeddingStats)], linthresh: f64) -> Result<String> {
    if families.is_empty() {
        return Err(Error::contract("box_plot_svg needs at least one family".to_string()));
    }
    if !(linthresh.is_finite() && linthresh > 0.0) {
        return Err(Error::config("linthresh must be positive".to_string()));
    }
    let symlog = |v: f64| v.signum() * (1.0 + (v.abs() / linthresh)).ln();

    let (width, height) = (120.0 * families.len() as f64 + 80.0, 360.0);
    let (top, bottom, left) = (20.0, 40.0, 50.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, s) in families {
        lo = lo.min(symlog(s.q01));
        hi = hi.max(symlog(s.q99));
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| top + (hi - symlog(v)) / (hi - lo) * (height - top - bottom);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    svg.push('\n');
    // zero line for reference
    svg.push_str(&format!(
        r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        y(0.0),
        width - 10.0
    ));
    svg.push('\n');
    for (i, (name, s)) in families.iter().enumerate() {
        let cx = left + 60.0 + 120.0 * i as f64;
        let half = 35.0;
        let (yq01, yq25, ymed, yq75, yq99) =
            (y(s.q01), y(s.q25), y(s.median), y(s.q75), y(s.q99));
        svg.push_str(&format!(
            concat!(
                r##"<line x1="{cx}" y1="{yq99}" x2="{cx}" y2="{yq75}" stroke="#333"/>"##,
                r##"<line x1="{cx}" y1="{yq25}" x2="{cx}" y2="{yq01}" stroke="#333"/>"##,
                r##"<line x1="{wl}" y1="{yq99}" x2="{wr}" y2="{yq99}" stroke="#333"/>"##,
                r##"<line x1="{wl}" y1="{yq01}" x2="{wr}" y2="{yq01}" stroke="#333"/>"##,
                r##"<rect x="{bl}" y="{yq75}" width="{bw}" height="{bh}" fill="#9ecae1" stroke="#333"/>"##,
                r##"<line x1="{bl}" y1="{ymed}" x2="{br}" y2="{ymed}" stroke="#08306b" stroke-width="2"/>"##,
                r##"<text x="{cx}" y="{label_y}" text-anchor="middle">{name}</text>"##,
                "\n"
            ),
            cx = cx,
            yq99 = yq99,
            yq75 = yq75,
            yq25 = yq25,
            yq01 = yq01,
            ymed = ymed,
            wl = cx - half * 0.5,
            wr = cx + half * 0.5,
            bl = cx - half,
            br = cx + half,
            bw = 2.0 * half,
            bh = (yq25 - yq75).max(0.5),
            label_y = height - 15.0,
            name = name,
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
