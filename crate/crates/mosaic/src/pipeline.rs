//! The registration pipeline: front-end, graph construction, rotation
//! averaging, translation re-estimation, position averaging, refinement and
//! evaluation, in that order.
//!
//! Per-edge work runs on the current rayon pool and is collected in edge
//! order, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mosaic_core::consensus::{apply_reestimates, reestimate_edge};
use mosaic_core::frontend::{estimate_pairwise, generate_scene_with, overlap_score};
use mosaic_core::geometry::{relative_point_map, RigidTransform, Rotation, Vec3};
use mosaic_core::graph::{
    build_graph, CorrespondenceSet, PairwiseResult, PoseGraph, EDGE_WEIGHT_FLOOR,
};
use mosaic_core::metrics::{multiway_metrics, EvalReport, Summary};
use mosaic_core::position_averaging::average_positions;
use mosaic_core::refinement::refine_poses;
use mosaic_core::rotation_averaging::average_rotations;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result, StageExt};

/// Which optional stages run. Position averaging (TA) always runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageMask {
    /// R: rotation averaging.
    pub rotation: bool,
    /// TR: consensus translation re-estimation.
    pub reestimation: bool,
    /// D: joint refinement.
    pub refinement: bool,
}

impl StageMask {
    pub const TA: Self = Self {
        rotation: false,
        reestimation: false,
        refinement: false,
    };
    pub const R_TA: Self = Self {
        rotation: true,
        ..Self::TA
    };
    pub const R_TR_TA: Self = Self {
        reestimation: true,
        ..Self::R_TA
    };
    pub const FULL: Self = Self {
        refinement: true,
        ..Self::R_TR_TA
    };

    /// The standard ablation ladder.
    pub const LADDER: [Self; 4] = [Self::TA, Self::R_TA, Self::R_TR_TA, Self::FULL];

    pub fn from_toggles(cfg: &PipelineConfig) -> Self {
        Self {
            rotation: cfg.stages.rotation_averaging,
            reestimation: cfg.stages.consensus,
            refinement: cfg.stages.refinement,
        }
    }
}

impl fmt::Display for StageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.rotation {
            parts.push("R");
        }
        if self.reestimation {
            parts.push("TR");
        }
        parts.push("TA");
        if self.refinement {
            parts.push("D");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for StageMask {
    type Err = Error;

    /// Parses `+`-joined stage names such as `R+TR+TA+D`; `TA` is required.
    fn from_str(s: &str) -> Result<Self> {
        let mut mask = Self::TA;
        let mut ta = false;
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_uppercase().as_str() {
                "R" => mask.rotation = true,
                "TR" => mask.reestimation = true,
                "TA" => ta = true,
                "D" => mask.refinement = true,
                _ => {
                    return Err(Error::Usage(format!(
                        "unknown stage `{part}` in mask `{s}`"
                    )))
                }
            }
        }
        if !ta {
            return Err(Error::Usage(format!("mask `{s}` must include TA")));
        }
        Ok(mask)
    }
}

/// Correspondences between two clouds, as handed to the front-end.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub i: usize,
    pub j: usize,
    pub correspondences: CorrespondenceSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInput {
    pub n_vertices: usize,
    pub pairs: Vec<InputPair>,
    /// Clouds in their own frames; enables overlap scoring.
    pub clouds: Option<Vec<Vec<Vec3>>>,
    pub truth: Option<Vec<RigidTransform>>,
}

impl PipelineInput {
    /// Synthetic scene from `cfg.scene`, seeded by `cfg.seed`.
    pub fn synthetic(cfg: &PipelineConfig) -> Result<Self> {
        let scene = generate_scene_with(&cfg.scene_config()).stage("generate")?;
        Ok(Self {
            n_vertices: scene.truth.len(),
            pairs: scene
                .pairs
                .into_iter()
                .map(|p| InputPair {
                    i: p.i,
                    j: p.j,
                    correspondences: p.correspondences,
                })
                .collect(),
            clouds: Some(scene.clouds),
            truth: Some(scene.truth),
        })
    }

    /// Uses the correspondences of `graph`; its poses and relatives are ignored.
    pub fn from_graph(graph: &PoseGraph) -> Self {
        Self {
            n_vertices: graph.vertices.len(),
            pairs: graph
                .edges
                .iter()
                .map(|e| InputPair {
                    i: e.i,
                    j: e.j,
                    correspondences: e.correspondences.clone(),
                })
                .collect(),
            clouds: None,
            truth: None,
        }
    }
}

/// Outcome of one stage. `seconds` is wall time and is kept out of the
/// deterministic outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub summary: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub mask: StageMask,
    /// Final poses with the edges as the last stage left them.
    pub graph: PoseGraph,
    pub report: Option<EvalReport>,
    pub stages: Vec<StageReport>,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn poses(&self) -> Vec<RigidTransform> {
        self.graph.poses()
    }
}

struct Recorder {
    stages: Vec<StageReport>,
    warnings: Vec<String>,
    start: Instant,
}

impl Recorder {
    fn begin(&mut self, name: &str) {
        log::info!("== {name}");
        self.start = Instant::now();
    }

    fn end(&mut self, name: &'static str, converged: bool, iterations: usize, summary: String) {
        let seconds = self.start.elapsed().as_secs_f64();
        log::info!("   {summary} ({seconds:.3} s)");
        if !converged {
            self.warn(format!("{name}: did not converge within the iteration cap"));
        }
        self.stages.push(StageReport {
            name,
            converged,
            iterations,
            summary,
            seconds,
        });
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Multiplies each edge weight by `overlap / max overlap`, keeping the floor.
pub fn overlap_weighting(graph: &mut PoseGraph) {
    let max = graph
        .edges
        .iter()
        .map(|e| e.overlap_score)
        .fold(0.0, f64::max);
    if max <= 0.0 {
        return;
    }
    for e in &mut graph.edges {
        e.weight = (e.weight * e.overlap_score / max).max(EDGE_WEIGHT_FLOOR);
    }
}

/// Runs the pipeline with the stages selected by `cfg.stages`.
pub fn run_pipeline(input: &PipelineInput, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline_masked(input, cfg, StageMask::from_toggles(cfg))
}

pub fn run_pipeline_masked(
    input: &PipelineInput,
    cfg: &PipelineConfig,
    mask: StageMask,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let mut rec = Recorder {
        stages: Vec::new(),
        warnings: Vec::new(),
        start: Instant::now(),
    };

    rec.begin("frontend");
    let estimates: Vec<_> = input
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, p)| estimate_pairwise(&p.correspondences, &cfg.ransac_config(k)))
        .collect();
    let mut results = Vec::new();
    let mut ransac_inliers = Vec::new();
    for (p, est) in input.pairs.iter().zip(estimates) {
        match est {
            Ok(est) => {
                results.push(PairwiseResult {
                    i: p.i,
                    j: p.j,
                    relative: est.relative,
                    correspondences: p.correspondences.clone(),
                    inlier_count: est.inlier_indices.len(),
                });
                ransac_inliers.push(est.inlier_indices);
            }
            Err(e) => rec.warn(format!("frontend: dropping edge ({}, {}): {e}", p.i, p.j)),
        }
    }
    let mut seen = vec![false; input.n_vertices];
    for r in &results {
        for v in [r.i, r.j] {
            if v >= input.n_vertices {
                return Err(Error::Config(format!(
                    "pair references vertex {v} of {}",
                    input.n_vertices
                )));
            }
            seen[v] = true;
        }
    }
    if let Some(v) = seen.iter().position(|s| !s) {
        return Err(Error::Stage {
            stage: "frontend",
            source: mosaic_core::Error::InvalidParameter {
                name: "vertices",
                reason: format!("vertex {v} has no usable edge"),
            },
        });
    }
    let kept = results.len();
    rec.end(
        "frontend",
        true,
        kept,
        format!("{kept} of {} pairs estimated", input.pairs.len()),
    );

    rec.begin("build_graph");
    let mut graph = build_graph(results).stage("build_graph")?;
    if let Some(clouds) = &input.clouds {
        let ocfg = cfg.overlap_config();
        let scores = graph
            .edges
            .par_iter()
            .map(|e| {
                overlap_score(
                    &clouds[e.i],
                    &clouds[e.j],
                    &relative_point_map(&e.relative),
                    &ocfg,
                )
            })
            .collect::<mosaic_core::Result<Vec<f64>>>()
            .stage("overlap")?;
        for (e, s) in graph.edges.iter_mut().zip(scores) {
            e.overlap_score = s;
        }
        if cfg.overlap.weight_edges {
            overlap_weighting(&mut graph);
        }
    }
    rec.end(
        "build_graph",
        true,
        0,
        format!(
            "{} vertices, {} edges",
            graph.vertices.len(),
            graph.edges.len()
        ),
    );

    let rotations: Vec<Rotation> = if mask.rotation {
        rec.begin("rotation_averaging");
        let r = average_rotations(&graph, &cfg.rotation_config()).stage("rotation_averaging")?;
        let last = r.objective_history.last().copied().unwrap_or(0.0);
        rec.end(
            "rotation_averaging",
            r.converged,
            r.irls_iterations,
            format!(
                "{} L1 sweeps, {} IRLS sweeps, objective {last:.6e}",
                r.l1_sweeps, r.irls_iterations
            ),
        );
        r.rotations
    } else {
        graph.rotations()
    };

    let mut consensus_inliers: Option<Vec<Option<Vec<usize>>>> = None;
    if mask.reestimation {
        rec.begin("translation_reestimation");
        let rcfg = cfg.reestimate_config();
        let per_edge = (0..graph.edges.len())
            .into_par_iter()
            .map(|k| reestimate_edge(&graph, k, &rotations, cfg.eps, &rcfg))
            .collect::<mosaic_core::Result<Vec<_>>>()
            .stage("translation_reestimation")?;
        let re =
            apply_reestimates(&graph, &rotations, per_edge).stage("translation_reestimation")?;
        let low = re.low_inlier_edges();
        let open = re.non_terminated();
        for &k in &low {
            let e = &re.graph.edges[k];
            rec.warn(format!(
                "translation_reestimation: edge ({}, {}) has {} consensus inliers, weight floored",
                e.i, e.j, e.inlier_count
            ));
        }
        let cells: usize = re
            .edges
            .iter()
            .filter_map(|e| e.consensus.as_ref().map(|c| c.cells_visited))
            .sum();
        consensus_inliers = Some(
            re.edges
                .iter()
                .map(|e| match (&e.consensus, e.low_inlier) {
                    (Some(c), false) => Some(c.inlier_indices.clone()),
                    _ => None,
                })
                .collect(),
        );
        rec.end(
            "translation_reestimation",
            open.is_empty(),
            graph.edges.len(),
            format!(
                "{} edges, {} low-inlier, {cells} cells visited",
                graph.edges.len(),
                low.len()
            ),
        );
        graph = re.graph;
        if input.clouds.is_some() && cfg.overlap.weight_edges {
            overlap_weighting(&mut graph);
        }
    }

    rec.begin("position_averaging");
    let pos = average_positions(&graph, &rotations, &cfg.position_config())
        .stage("position_averaging")?;
    let last = pos.objective_history.last().copied().unwrap_or(0.0);
    rec.end(
        "position_averaging",
        pos.converged,
        pos.iterations,
        format!(
            "{} LM iterations after {} warm-start stages, objective {last:.6e}",
            pos.iterations,
            pos.warm_start_history.len()
        ),
    );
    let mut poses: Vec<RigidTransform> = rotations
        .iter()
        .zip(&pos.positions)
        .map(|(r, t)| RigidTransform::new(*r, *t))
        .collect();

    if mask.refinement {
        rec.begin("refinement");
        let mut pruned = graph.clone();
        for (k, e) in pruned.edges.iter_mut().enumerate() {
            let keep: &[usize] = match &consensus_inliers {
                Some(ci) => ci[k].as_deref().unwrap_or(&[]),
                None => &ransac_inliers[k],
            };
            e.correspondences = if keep.len() >= 3 {
                e.correspondences.subset(keep)
            } else {
                CorrespondenceSet::default()
            };
        }
        let r = refine_poses(&pruned, &poses, &cfg.refine_config()).stage("refinement")?;
        let (first, last) = (
            r.loss_history.first().copied().unwrap_or(0.0),
            r.loss_history.last().copied().unwrap_or(0.0),
        );
        rec.end(
            "refinement",
            r.converged,
            r.iterations,
            format!(
                "{} iterations, loss {first:.6e} -> {last:.6e}",
                r.iterations
            ),
        );
        poses = r.poses;
    }

    let graph = graph.with_poses(&poses).stage("output")?;
    let report = match &input.truth {
        Some(truth) => {
            rec.begin("metrics");
            let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.i, e.j)).collect();
            let r =
                multiway_metrics(&poses, truth, &pairs, &cfg.metrics_config()).stage("metrics")?;
            rec.end(
                "metrics",
                true,
                0,
                format!("RE {:.4} deg, TE {:.4} m (means)", r.re.mean, r.te.mean),
            );
            Some(r)
        }
        None => None,
    };
    Ok(PipelineOutput {
        mask,
        graph,
        report,
        stages: rec.stages,
        warnings: rec.warnings,
    })
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mask: StageMask,
    /// Per-run mean RE (deg) and mean TE (m), in seed order.
    pub re_deg: Vec<f64>,
    pub te_m: Vec<f64>,
    pub re: Summary,
    pub te: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ablation {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

/// Removes repeated masks, keeping first occurrences; returns the warnings.
pub fn dedup_masks(masks: &[StageMask]) -> (Vec<StageMask>, Vec<String>) {
    let mut out: Vec<StageMask> = Vec::new();
    let mut warnings = Vec::new();
    for m in masks {
        if out.contains(m) {
            let w = format!("duplicate mask `{m}` ignored");
            log::warn!("{w}");
            warnings.push(w);
        } else {
            out.push(*m);
        }
    }
    (out, warnings)
}

/// Runs every mask on the synthetic scene of every seed. Row values are the
/// per-seed mean RE and TE.
pub fn run_ablation(cfg: &PipelineConfig, masks: &[StageMask], seeds: &[u64]) -> Result<Ablation> {
    let (masks, warnings) = dedup_masks(masks);
    if masks.len() < 2 {
        return Err(Error::Usage(
            "an ablation needs at least two distinct masks".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Usage("an ablation needs at least one seed".into()));
    }
    let mut per_mask = vec![(Vec::new(), Vec::new()); masks.len()];
    for &seed in seeds {
        let run_cfg = PipelineConfig {
            seed,
            ..cfg.clone()
        };
        let input = PipelineInput::synthetic(&run_cfg)?;
        for (m, acc) in masks.iter().zip(per_mask.iter_mut()) {
            let out = run_pipeline_masked(&input, &run_cfg, *m)?;
            let r = out.report.expect("synthetic input has truth");
            acc.0.push(r.re.mean);
            acc.1.push(r.te.mean);
        }
    }
    let rows = masks
        .into_iter()
        .zip(per_mask)
        .map(|(mask, (re_deg, te_m))| AblationRow {
            mask,
            re: Summary::of(&re_deg).expect("non-empty"),
            te: Summary::of(&te_m).expect("non-empty"),
            re_deg,
            te_m,
        })
        .collect();
    Ok(Ablation {
        seeds: seeds.to_vec(),
        rows,
        warnings,
    })
}
