//! Pipeline configuration, read from and echoed as TOML.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Radii left unset follow `eps`.

use std::path::{Path, PathBuf};

use mosaic_core::consensus::{ConsensusConfig, ReestimateConfig};
use mosaic_core::frontend::{OverlapConfig, OverlapSense, RansacConfig, SceneConfig};
use mosaic_core::metrics::MetricsConfig;
use mosaic_core::position_averaging::{PosAvgConfig, PositionLoss};
use mosaic_core::refinement::RefineConfig;
use mosaic_core::rotation_averaging::RotAvgConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Inlier radius ε, meters.
    pub eps: f64,
    pub seed: u64,
    pub stages: StageToggles,
    pub scene: SceneSection,
    pub ransac: RansacSection,
    pub overlap: OverlapSection,
    pub rotation: RotationSection,
    pub consensus: ConsensusSection,
    pub position: PositionSection,
    pub refinement: RefinementSection,
    pub metrics: MetricsSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub rotation_averaging: bool,
    pub consensus: bool,
    pub refinement: bool,
    /// Feed edge weights into rotation and position averaging.
    pub edge_weights: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub n_clouds: usize,
    pub points_per_cloud: usize,
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    pub outlier_ratio: f64,
    pub corrupted_edge_ratio: f64,
    pub correspondences_per_edge: usize,
    pub neighbor_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacSection {
    pub max_iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlier_threshold: Option<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapSenseName {
    Forward,
    Backward,
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlapSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub sense: OverlapSenseName,
    /// Scale edge weights by the normalized overlap score when clouds are
    /// available.
    pub weight_edges: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationSection {
    pub l1_max_iters: usize,
    pub irls_max_iters: usize,
    pub step_tolerance: f64,
    pub kernel_width_deg: f64,
    pub weight_floor: f64,
    /// Random spanning trees tried for the starting rotations.
    pub init_trees: usize,
    pub init_threshold_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_cell: Option<f64>,
    pub zoom_factor: usize,
    pub max_zoom: usize,
    pub min_inliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    TruncatedSoftL1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    pub max_iters: usize,
    pub gradient_tolerance: f64,
    pub loss: LossName,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub max_iters: usize,
    pub step_tolerance: f64,
    pub parameter_damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub rre_threshold_deg: f64,
    pub rte_threshold_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Graph file whose CORR records feed the front-end.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    /// One PLY per vertex, used for overlap scoring.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub clouds: Vec<PathBuf>,
    /// Graph file whose VERTEX records are the ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            seed: 0,
            stages: StageToggles::default(),
            scene: SceneSection::default(),
            ransac: RansacSection::default(),
            overlap: OverlapSection::default(),
            rotation: RotationSection::default(),
            consensus: ConsensusSection::default(),
            position: PositionSection::default(),
            refinement: RefinementSection::default(),
            metrics: MetricsSection::default(),
            io: IoSection::default(),
        }
    }
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            rotation_averaging: true,
            consensus: true,
            refinement: true,
            edge_weights: true,
        }
    }
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            n_clouds: s.n_clouds,
            points_per_cloud: s.points_per_cloud,
            overlap_fraction: s.overlap_fraction,
            noise_sigma: s.noise_sigma,
            outlier_ratio: s.outlier_ratio,
            corrupted_edge_ratio: s.corrupted_edge_ratio,
            correspondences_per_edge: s.correspondences_per_edge,
            neighbor_window: s.neighbor_window,
        }
    }
}

impl Default for RansacSection {
    fn default() -> Self {
        let r = RansacConfig::default();
        Self {
            max_iterations: r.max_iterations,
            inlier_threshold: None,
            confidence: r.confidence,
        }
    }
}

impl Default for OverlapSection {
    fn default() -> Self {
        Self {
            radius: None,
            sense: OverlapSenseName::Symmetric,
            weight_edges: true,
        }
    }
}

impl Default for RotationSection {
    fn default() -> Self {
        let r = RotAvgConfig::default();
        Self {
            l1_max_iters: r.l1_max_iters,
            irls_max_iters: r.irls_max_iters,
            step_tolerance: r.step_tolerance,
            kernel_width_deg: r.kernel_width.to_degrees(),
            weight_floor: r.weight_floor,
            init_trees: r.init_trees,
            init_threshold_deg: r.init_threshold.to_degrees(),
        }
    }
}

impl Default for ConsensusSection {
    fn default() -> Self {
        let c = ReestimateConfig::default();
        Self {
            initial_cell: c.consensus.initial_cell,
            zoom_factor: c.consensus.zoom_factor,
            max_zoom: c.consensus.max_zoom,
            min_inliers: c.min_inliers,
        }
    }
}

impl Default for PositionSection {
    fn default() -> Self {
        let p = PosAvgConfig::default();
        Self {
            loss_scale: None,
            truncation: None,
            max_iters: p.max_iters,
            gradient_tolerance: p.gradient_tolerance,
            loss: LossName::TruncatedSoftL1,
        }
    }
}

impl Default for RefinementSection {
    fn default() -> Self {
        let r = RefineConfig::default();
        Self {
            gamma: None,
            max_iters: r.max_iters,
            step_tolerance: r.step_tolerance,
            parameter_damping: r.parameter_damping,
        }
    }
}

impl Default for MetricsSection {
    fn default() -> Self {
        let m = MetricsConfig::default();
        Self {
            rre_threshold_deg: m.rre_threshold_deg,
            rte_threshold_m: m.rte_threshold_m,
        }
    }
}

/// SplitMix64 finalizer; spreads per-edge seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        let m = &self.metrics;
        if !(m.rre_threshold_deg > 0.0 && m.rte_threshold_m > 0.0) {
            return Err(Error::Config("recall thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        let s = &self.scene;
        SceneConfig {
            n_clouds: s.n_clouds,
            points_per_cloud: s.points_per_cloud,
            overlap_fraction: s.overlap_fraction,
            noise_sigma: s.noise_sigma,
            outlier_ratio: s.outlier_ratio,
            corrupted_edge_ratio: s.corrupted_edge_ratio,
            correspondences_per_edge: s.correspondences_per_edge,
            neighbor_window: s.neighbor_window,
            rng_seed: self.seed,
        }
    }

    /// RANSAC settings for input pair `k`; the seed depends on both.
    pub fn ransac_config(&self, k: usize) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac.max_iterations,
            inlier_threshold: self.ransac.inlier_threshold.unwrap_or(self.eps),
            confidence: self.ransac.confidence,
            rng_seed: mix(self.seed ^ mix(k as u64)),
            ..RansacConfig::default()
        }
    }

    pub fn overlap_config(&self) -> OverlapConfig {
        OverlapConfig {
            radius: self.overlap.radius.unwrap_or(self.eps),
            sense: match self.overlap.sense {
                OverlapSenseName::Forward => OverlapSense::Forward,
                OverlapSenseName::Backward => OverlapSense::Backward,
                OverlapSenseName::Symmetric => OverlapSense::Symmetric,
            },
        }
    }

    pub fn rotation_config(&self) -> RotAvgConfig {
        let r = &self.rotation;
        RotAvgConfig {
            l1_max_iters: r.l1_max_iters,
            irls_max_iters: r.irls_max_iters,
            step_tolerance: r.step_tolerance,
            kernel_width: r.kernel_width_deg.to_radians(),
            weight_floor: r.weight_floor,
            use_edge_weights: self.stages.edge_weights,
            init_trees: r.init_trees,
            init_threshold: r.init_threshold_deg.to_radians(),
            init_seed: mix(self.seed),
        }
    }

    pub fn reestimate_config(&self) -> ReestimateConfig {
        let c = &self.consensus;
        ReestimateConfig {
            consensus: ConsensusConfig {
                initial_cell: c.initial_cell,
                zoom_factor: c.zoom_factor,
                max_zoom: c.max_zoom,
            },
            min_inliers: c.min_inliers,
        }
    }

    pub fn position_config(&self) -> PosAvgConfig {
        let p = &self.position;
        let base = PosAvgConfig::for_eps(self.eps);
        PosAvgConfig {
            loss_scale: p.loss_scale.unwrap_or(base.loss_scale),
            truncation: p.truncation.unwrap_or(base.truncation),
            max_iters: p.max_iters,
            gradient_tolerance: p.gradient_tolerance,
            use_edge_weights: self.stages.edge_weights,
            loss: match p.loss {
                LossName::TruncatedSoftL1 => PositionLoss::TruncatedSoftL1,
                LossName::L2 => PositionLoss::L2,
            },
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        let r = &self.refinement;
        RefineConfig {
            gamma: r.gamma.unwrap_or(RefineConfig::for_eps(self.eps).gamma),
            max_iters: r.max_iters,
            step_tolerance: r.step_tolerance,
            parameter_damping: r.parameter_damping,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            rre_threshold_deg: self.metrics.rre_threshold_deg,
            rte_threshold_m: self.metrics.rte_threshold_m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("[stages]") && text.contains("eps = 0.05"));
    }

    #[test]
    fn populated_round_trip() {
        let mut cfg = PipelineConfig {
            eps: 0.1 + 0.2,
            seed: u64::MAX >> 1,
            ..PipelineConfig::default()
        };
        cfg.stages.refinement = false;
        cfg.ransac.inlier_threshold = Some(1.0 / 3.0);
        cfg.overlap.sense = OverlapSenseName::Backward;
        cfg.position.loss = LossName::L2;
        cfg.position.truncation = Some(0.7);
        cfg.consensus.initial_cell = Some(0.25);
        cfg.io.clouds = vec!["a.ply".into(), "b c.ply".into()];
        cfg.io.truth = Some("truth.graph".into());
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string(), cfg.to_toml_string());
    }

    #[test]
    fn partial_file_and_errors() {
        let cfg =
            PipelineConfig::from_toml_str("eps = 0.02\n[consensus]\nzoom_factor = 3\n").unwrap();
        assert_eq!(cfg.eps, 0.02);
        assert_eq!(cfg.consensus.zoom_factor, 3);
        assert_eq!(cfg.ransac_config(0).inlier_threshold, 0.02);
        assert_eq!(cfg.refine_config().gamma, 3.0 * 0.02);
        assert!(PipelineConfig::from_toml_str("epsilon = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[consensus]\nzoom = 3").is_err());
        assert!(PipelineConfig::from_toml_str("eps = -1.0").is_err());
    }

    #[test]
    fn ransac_seeds_differ_per_edge() {
        let cfg = PipelineConfig::default();
        assert_ne!(cfg.ransac_config(0).rng_seed, cfg.ransac_config(1).rng_seed);
        assert_eq!(cfg.ransac_config(3), cfg.ransac_config(3));
    }
}
