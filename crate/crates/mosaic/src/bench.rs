//! Runtime scaling of the consensus solver against the exhaustive
//! candidate oracle.

use std::time::Instant;

use mosaic_core::consensus::{
    exhaustive_candidate_oracle, max_consensus_translation, ConsensusConfig, SphereSet,
};
use mosaic_core::geometry::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, StageExt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub eps: f64,
    pub seed: u64,
    /// Timed runs per method and count; the median is reported.
    pub repeats: usize,
    /// Fraction of candidates drawn near the true translation.
    pub inlier_fraction: f64,
    /// Side of the cube holding the outlier candidates, meters.
    pub extent: f64,
    pub consensus: ConsensusConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            seed: 0,
            repeats: 5,
            inlier_fraction: 0.3,
            extent: 4.0,
            consensus: ConsensusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScaleRow {
    pub n: usize,
    pub proposed_seconds: f64,
    pub exhaustive_seconds: f64,
    pub proposed_inliers: usize,
    pub exhaustive_inliers: usize,
}

/// Candidates around a random true translation plus uniform outliers.
pub fn clustered_instance(n: usize, cfg: &BenchConfig, rng: &mut impl Rng) -> Vec<Vec3> {
    let half = 0.5 * cfg.extent;
    let mut uniform = |s: f64| {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    };
    let truth = uniform(half - cfg.eps);
    let inliers = (cfg.inlier_fraction * n as f64).round() as usize;
    (0..n)
        .map(|k| {
            if k < inliers {
                // Within eps/2 per axis keeps most of the cluster mutually consistent.
                truth + uniform(0.5 * cfg.eps / 3f64.sqrt())
            } else {
                uniform(half)
            }
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times both solvers on one instance per count. Counts must be non-empty
/// and strictly ascending.
pub fn run_scaling_bench(cfg: &BenchConfig, counts: &[usize]) -> Result<Vec<ScaleRow>> {
    if counts.is_empty() {
        return Err(Error::Usage(
            "scale-bench needs at least one candidate count".into(),
        ));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) || counts[0] == 0 {
        return Err(Error::Usage(
            "candidate counts must be positive and ascending".into(),
        ));
    }
    if cfg.repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
        let spheres =
            SphereSet::new(clustered_instance(n, cfg, &mut rng), cfg.eps).stage("scale-bench")?;
        let mut tp = Vec::new();
        let mut te = Vec::new();
        let mut counts_seen = (0, 0);
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            let p = max_consensus_translation(&spheres, &cfg.consensus).stage("scale-bench")?;
            tp.push(t0.elapsed().as_secs_f64());
            let t0 = Instant::now();
            let e = exhaustive_candidate_oracle(&spheres).stage("scale-bench")?;
            te.push(t0.elapsed().as_secs_f64());
            counts_seen = (p.inlier_count, e.inlier_count);
        }
        log::info!(
            "n = {n}: proposed {} inliers, exhaustive {} inliers",
            counts_seen.0,
            counts_seen.1
        );
        rows.push(ScaleRow {
            n,
            proposed_seconds: median(tp),
            exhaustive_seconds: median(te),
            proposed_inliers: counts_seen.0,
            exhaustive_inliers: counts_seen.1,
        });
    }
    Ok(rows)
}

/// Least-squares line `y = a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let b = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (my - b * mx, b, r2)
}
