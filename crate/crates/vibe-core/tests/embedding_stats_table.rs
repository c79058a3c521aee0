//! Regression fixture for the embedding-statistics report.
//!
//! The reference numbers below are the summary statistics the pipeline's
//! stats command reports for the three embedding families (visual
//! embeddings, encoder latents, neural-proxy embeddings) on the two
//! recording modalities. Each fixture pool is constructed to carry exactly
//! those statistics: values follow a piecewise-linear quantile function
//! through the five reported quantile knots, sampled on an inclusive grid
//! whose size makes every knot land on an exact estimator position, with the
//! two tail endpoints solved (Newton) so the pool's mean and population
//! standard deviation hit the reported values. The stats code must then
//! reproduce the whole table, and the three families must satisfy the
//! scale-bridge ordering with the reported ratios.

use vibe_core::metrics::{embedding_stats, scale_bridge_check, EmbeddingStats};

/// Reported summary row: mean, std, median, q25, q75, q01, q99.
#[derive(Debug, Clone, Copy)]
struct Reported {
    mean: f64,
    std: f64,
    median: f64,
    q25: f64,
    q75: f64,
    q01: f64,
    q99: f64,
}

const EEG_VISUAL: Reported = Reported {
    mean: -0.0001,
    std: 0.0247,
    median: -0.0002,
    q25: -0.0134,
    q75: 0.0131,
    q01: -0.0511,
    q99: 0.0522,
};
const EEG_LATENT: Reported = Reported {
    mean: -0.0402,
    std: 2.5414,
    median: -0.0589,
    q25: -1.6023,
    q75: 1.5125,
    q01: -6.3516,
    q99: 6.2973,
};
const EEG_PROXY: Reported = Reported {
    mean: -0.0408,
    std: 1.0465,
    median: -0.0603,
    q25: -0.5812,
    q75: 0.4744,
    q01: -2.9357,
    q99: 3.0320,
};
const MEG_VISUAL: Reported = Reported {
    mean: -0.0001,
    std: 0.0246,
    median: -0.0002,
    q25: -0.0134,
    q75: 0.0130,
    q01: -0.0509,
    q99: 0.0520,
};
const MEG_LATENT: Reported = Reported {
    mean: 0.0009,
    std: 2.6688,
    median: -0.0045,
    q25: -1.5534,
    q75: 1.5485,
    q01: -6.8126,
    q99: 6.8643,
};
const MEG_PROXY: Reported = Reported {
    mean: 0.0004,
    std: 0.9413,
    median: 0.0078,
    q25: -0.4959,
    q75: 0.5057,
    q01: -2.5122,
    q99: 2.5348,
};

/// Pool size: `N - 1` is a multiple of 100 so the quantile estimator's
/// `h = (N-1) q` is an integer at every knot — the estimator then returns a
/// grid value exactly.
const N: usize = 20_001;

/// Shape of one fixture pool's quantile function: tail endpoints plus power
/// exponents that bend the two outer interior segments (linear interpolation
/// between the reported quantiles carries more variance than the reported
/// std, so the segments between q01–q25 and q75–q99 must bow toward the
/// median).
#[derive(Debug, Clone, Copy)]
struct Shape {
    v0: f64,
    v1: f64,
    gamma_lo: f64,
    gamma_hi: f64,
}

/// Evaluate the quantile function through `(0, v0), (0.01, q01),
/// (0.25, q25), (0.5, median), (0.75, q75), (0.99, q99), (1, v1)` on the
/// inclusive grid `q_i = i / (N-1)`. Tail and central segments are linear;
/// the q01–q25 and q75–q99 segments follow `xa + (xb-xa) * t^gamma`, which
/// keeps the knot values exact for any positive exponent.
fn sample_pool(r: &Reported, s: &Shape) -> Vec<f64> {
    let knots_q = [0.0, 0.01, 0.25, 0.5, 0.75, 0.99, 1.0];
    let knots_v = [s.v0, r.q01, r.q25, r.median, r.q75, r.q99, s.v1];
    let gammas = [1.0, s.gamma_lo, 1.0, 1.0, s.gamma_hi, 1.0];
    (0..N)
        .map(|i| {
            let q = i as f64 / (N - 1) as f64;
            let k = knots_q.iter().rposition(|&kq| kq <= q).unwrap().min(5);
            let t = (q - knots_q[k]) / (knots_q[k + 1] - knots_q[k]);
            knots_v[k] + t.powf(gammas[k]) * (knots_v[k + 1] - knots_v[k])
        })
        .collect()
}

fn mean_std(pool: &[f64]) -> (f64, f64) {
    let n = pool.len() as f64;
    let mean = pool.iter().sum::<f64>() / n;
    let var = pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Solve the pool shape so its mean and std equal the reported values.
/// Two equations, four unknowns: Gauss-Newton with the minimal-norm step,
/// parameterized so tails stay outside the quantile range and exponents stay
/// positive.
fn solve_shape(r: &Reported) -> Shape {
    let spread = r.q99 - r.q01;
    let shape_of = |u: &[f64; 4]| Shape {
        v0: r.q01 - u[0].exp() * 0.05 * spread,
        v1: r.q99 + u[1].exp() * 0.05 * spread,
        gamma_lo: u[2].exp(),
        gamma_hi: u[3].exp(),
    };
    let residual = |u: &[f64; 4]| -> [f64; 2] {
        let (m, s) = mean_std(&sample_pool(r, &shape_of(u)));
        [m - r.mean, s - r.std]
    };

    let mut u = [0.0f64; 4];
    for _ in 0..200 {
        let f = residual(&u);
        if f[0].abs() < 1e-12 && f[1].abs() < 1e-12 {
            break;
        }
        // 2x4 finite-difference Jacobian.
        let h = 1e-6;
        let mut j = [[0.0f64; 4]; 2];
        for c in 0..4 {
            let mut up = u;
            up[c] += h;
            let fp = residual(&up);
            j[0][c] = (fp[0] - f[0]) / h;
            j[1][c] = (fp[1] - f[1]) / h;
        }
        // Minimal-norm step: delta = J^T (J J^T)^-1 f.
        let a = j[0].iter().map(|v| v * v).sum::<f64>();
        let b = j[0].iter().zip(&j[1]).map(|(x, y)| x * y).sum::<f64>();
        let d = j[1].iter().map(|v| v * v).sum::<f64>();
        let det = a * d - b * b;
        assert!(det.abs() > 1e-24, "degenerate shape system for {r:?}");
        let y0 = (d * f[0] - b * f[1]) / det;
        let y1 = (a * f[1] - b * f[0]) / det;
        for c in 0..4 {
            u[c] -= j[0][c] * y0 + j[1][c] * y1;
        }
    }
    let f = residual(&u);
    assert!(
        f[0].abs() < 1e-9 && f[1].abs() < 1e-9,
        "shape solve did not converge for {r:?}: residual {f:?}"
    );
    let s = shape_of(&u);
    assert!(
        s.v0 < r.q01 && s.v1 > r.q99 && s.gamma_lo > 0.0 && s.gamma_hi > 0.0,
        "solved shape {s:?} is not a valid quantile function for {r:?}"
    );
    s
}

fn fixture_stats(r: &Reported) -> EmbeddingStats {
    let s = solve_shape(r);
    embedding_stats(&sample_pool(r, &s)).unwrap()
}

fn assert_row(label: &str, got: &EmbeddingStats, want: &Reported) {
    let tol = 5e-4;
    for (what, g, w) in [
        ("mean", got.mean, want.mean),
        ("std", got.std, want.std),
        ("median", got.median, want.median),
        ("q25", got.q25, want.q25),
        ("q75", got.q75, want.q75),
        ("q01", got.q01, want.q01),
        ("q99", got.q99, want.q99),
    ] {
        assert!(
            (g - w).abs() < tol,
            "{label} {what}: got {g}, reported {w}"
        );
    }
    assert_eq!(got.count, N);
}

#[test]
fn reported_statistics_are_reproduced_for_every_family() {
    for (label, row) in [
        ("eeg visual", EEG_VISUAL),
        ("eeg latent", EEG_LATENT),
        ("eeg proxy", EEG_PROXY),
        ("meg visual", MEG_VISUAL),
        ("meg latent", MEG_LATENT),
        ("meg proxy", MEG_PROXY),
    ] {
        assert_row(label, &fixture_stats(&row), &row);
    }
}

#[test]
fn the_three_eeg_families_bridge_the_scale_gap_with_reported_ratios() {
    let visual = fixture_stats(&EEG_VISUAL);
    let proxy = fixture_stats(&EEG_PROXY);
    let latent = fixture_stats(&EEG_LATENT);
    let report = scale_bridge_check(&visual, &proxy, &latent).unwrap();
    // 1.0465 / 0.0247 and 2.5414 / 1.0465, up to the 5e-4 row tolerance.
    assert!(
        (report.proxy_over_visual - 42.3684).abs() < 0.1,
        "proxy/visual ratio {}",
        report.proxy_over_visual
    );
    assert!(
        (report.latent_over_proxy - 2.4285).abs() < 0.01,
        "latent/proxy ratio {}",
        report.latent_over_proxy
    );
}

#[test]
fn the_three_meg_families_bridge_the_scale_gap_with_reported_ratios() {
    let visual = fixture_stats(&MEG_VISUAL);
    let proxy = fixture_stats(&MEG_PROXY);
    let latent = fixture_stats(&MEG_LATENT);
    let report = scale_bridge_check(&visual, &proxy, &latent).unwrap();
    // 0.9413 / 0.0246 and 2.6688 / 0.9413.
    assert!(
        (report.proxy_over_visual - 38.2642).abs() < 0.1,
        "proxy/visual ratio {}",
        report.proxy_over_visual
    );
    assert!(
        (report.latent_over_proxy - 2.8352).abs() < 0.01,
        "latent/proxy ratio {}",
        report.latent_over_proxy
    );
}
