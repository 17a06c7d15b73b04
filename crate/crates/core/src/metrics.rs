//! Registration metrics: per-pair RRE/RTE and recall, per-vertex RE/TE after
//! removing the gauge.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{relative_from_global, rotation_geodesic_angle, RigidTransform, Rotation};
use crate::position_averaging::align_positions_to_truth;
use crate::rotation_averaging::{align_rotations_to_truth, rotation_gauge};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub rre_threshold_deg: f64,
    pub rte_threshold_m: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            rre_threshold_deg: 15.0,
            rte_threshold_m: 0.3,
        }
    }
}

/// `(RRE in degrees, RTE in meters)` of an estimated relative transform.
pub fn pairwise_metrics(estimated: &RigidTransform, truth: &RigidTransform) -> (f64, f64) {
    (
        rotation_geodesic_angle(&estimated.rotation, &truth.rotation).to_degrees(),
        (estimated.translation - truth.translation).norm(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub i: usize,
    pub j: usize,
    pub rre_deg: f64,
    pub rte_m: f64,
    pub success: bool,
}

/// Mean and median of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Self {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: MetricsConfig,
    pub pairs: Vec<PairMetrics>,
    /// Per-vertex rotation errors after gauge alignment, degrees.
    pub re_deg: Vec<f64>,
    /// Per-vertex position errors after gauge alignment, meters.
    pub te_m: Vec<f64>,
    /// Registration recall; `None` when there are no pairs.
    pub recall: Option<f64>,
    pub re: Summary,
    pub te: Summary,
    pub rre: Option<Summary>,
    pub rte: Option<Summary>,
}

pub fn multiway_metrics(
    estimated: &[RigidTransform],
    truth: &[RigidTransform],
    edges: &[(usize, usize)],
    cfg: &MetricsConfig,
) -> Result<EvalReport> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimated.len(),
            right: truth.len(),
        });
    }
    if !(cfg.rre_threshold_deg > 0.0 && cfg.rte_threshold_m > 0.0) {
        return Err(Error::invalid(
            "threshold",
            "recall thresholds must be positive",
        ));
    }
    if let Some(&(i, j)) = edges
        .iter()
        .find(|(i, j)| *i >= estimated.len() || *j >= estimated.len())
    {
        return Err(Error::invalid(
            "edges",
            alloc::format!("edge ({i}, {j}) references a missing vertex"),
        ));
    }
    let est_r: Vec<Rotation> = estimated.iter().map(|p| p.rotation).collect();
    let tru_r: Vec<Rotation> = truth.iter().map(|p| p.rotation).collect();
    let gauge = rotation_gauge(&est_r, &tru_r)?;
    let (_, rot_err) = align_rotations_to_truth(&est_r, &tru_r)?;
    let est_t: Vec<_> = estimated.iter().map(|p| p.translation).collect();
    let tru_t: Vec<_> = truth.iter().map(|p| p.translation).collect();
    let (_, te_m) = align_positions_to_truth(&est_t, &tru_t, &gauge)?;
    let re_deg: Vec<f64> = rot_err.iter().map(|e| e.to_degrees()).collect();

    let pairs: Vec<PairMetrics> = edges
        .iter()
        .map(|&(i, j)| {
            let est = relative_from_global(&estimated[i], &estimated[j]);
            let tru = relative_from_global(&truth[i], &truth[j]);
            let (rre_deg, rte_m) = pairwise_metrics(&est, &tru);
            PairMetrics {
                i,
                j,
                rre_deg,
                rte_m,
                success: rre_deg < cfg.rre_threshold_deg && rte_m < cfg.rte_threshold_m,
            }
        })
        .collect();
    let recall = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().filter(|p| p.success).count() as f64 / pairs.len() as f64)
    };
    let rre: Vec<f64> = pairs.iter().map(|p| p.rre_deg).collect();
    let rte: Vec<f64> = pairs.iter().map(|p| p.rte_m).collect();
    Ok(EvalReport {
        config: *cfg,
        re: Summary::of(&re_deg).ok_or(Error::EmptyInput)?,
        te: Summary::of(&te_m).ok_or(Error::EmptyInput)?,
        rre: Summary::of(&rre),
        rte: Summary::of(&rte),
        pairs,
        re_deg,
        te_m,
        recall,
    })
}
