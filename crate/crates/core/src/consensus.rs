//! Globally optimal translation re-estimation by consensus maximization.
//!
//! With both global rotations fixed, every correspondence implies one
//! candidate relative translation. A translation `t` explains a candidate `c`
//! when `‖t - c‖ < ε`, so the best translation is a point covered by the most
//! open ε-balls. The search runs on a sparse uniform grid: each ball is
//! registered in the cells it touches and classified per cell as outside,
//! crossing the cell boundary, or fully containing the cell. Cells whose upper
//! bound (contained + crossing) cannot beat the best exact count seen so far
//! are discarded; the rest are subdivided and re-classified against the balls
//! that still cross them. The search ends when no cell can improve on the
//! incumbent, which is then the global maximum.

use alloc::vec::Vec;

use hashbrown::HashMap;
use nalgebra::ComplexField;
use rustc_hash::FxBuildHasher;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};
use crate::graph::{CorrespondenceSet, PoseGraph, EDGE_WEIGHT_FLOOR};

/// Candidate translations (ball centers) sharing the inlier radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSet {
    pub centers: Vec<Vec3>,
    pub radius: f64,
}

impl SphereSet {
    pub fn new(centers: Vec<Vec3>, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid("eps", "inlier radius must be positive"));
        }
        if centers.is_empty() {
            return Err(Error::EmptyInput);
        }
        if centers.iter().any(|c| !c.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("centers", "must be finite"));
        }
        Ok(Self { centers, radius })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Indices of the centers explaining `t`.
    pub fn inliers_at(&self, t: &Vec3) -> Vec<usize> {
        let r2 = self.radius * self.radius;
        self.centers
            .iter()
            .enumerate()
            .filter(|(_, c)| (t - *c).norm_squared() < r2)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn count_at(&self, t: &Vec3) -> usize {
        let r2 = self.radius * self.radius;
        self.centers
            .iter()
            .filter(|c| (t - *c).norm_squared() < r2)
            .count()
    }
}

/// How an open ball relates to a closed axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxSphereRelation {
    /// No point of the box lies inside the ball.
    Outside,
    /// The ball boundary passes through the box.
    Boundary,
    /// Every point of the box lies inside the ball.
    Inside,
}

/// Closest-point and farthest-corner test of a box against an open ball.
pub fn classify_box_sphere(
    min: &Vec3,
    max: &Vec3,
    center: &Vec3,
    radius: f64,
) -> BoxSphereRelation {
    let r2 = radius * radius;
    let mut near = 0.0;
    let mut far = 0.0;
    for a in 0..3 {
        let c = center[a];
        let d_near = if c < min[a] {
            min[a] - c
        } else if c > max[a] {
            c - max[a]
        } else {
            0.0
        };
        let d_far = (c - min[a]).abs().max((c - max[a]).abs());
        near += d_near * d_near;
        far += d_far * d_far;
    }
    if near >= r2 {
        BoxSphereRelation::Outside
    } else if far < r2 {
        BoxSphereRelation::Inside
    } else {
        BoxSphereRelation::Boundary
    }
}

/// Distance from a box to a point (0 inside) and to its farthest corner.
pub fn box_point_distances(min: &Vec3, max: &Vec3, p: &Vec3) -> (f64, f64) {
    let mut near = 0.0;
    let mut far = 0.0;
    for a in 0..3 {
        let c = p[a];
        let d_near = (min[a] - c).max(0.0).max(c - max[a]);
        let d_far = (c - min[a]).abs().max((c - max[a]).abs());
        near += d_near * d_near;
        far += d_far * d_far;
    }
    (ComplexField::sqrt(near), ComplexField::sqrt(far))
}

/// One cell of the zooming grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
    /// Balls whose boundary crosses the cell.
    pub intersecting_sphere_indices: Vec<u32>,
    /// Balls containing the whole cell.
    pub fully_contained_count: usize,
}

impl GridCell {
    pub fn upper_bound(&self) -> usize {
        self.fully_contained_count + self.intersecting_sphere_indices.len()
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner + self.max_corner) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusConfig {
    /// Edge length of the first grid; `None` uses the inlier radius.
    pub initial_cell: Option<f64>,
    /// Subdivisions per axis at each zoom.
    pub zoom_factor: usize,
    pub max_zoom: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            initial_cell: None,
            zoom_factor: 2,
            max_zoom: 40,
        }
    }
}

/// Statistics of one zoom level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStats {
    pub zoom_level: usize,
    pub cells: usize,
    /// Largest upper bound among the level's cells.
    pub max_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    /// Mean of the inlier centers. It need not lie within ε of all of them.
    pub translation: Vec3,
    /// A point covered by exactly the inlier balls.
    pub witness: Vec3,
    /// Centers within ε of `witness`.
    pub inlier_indices: Vec<usize>,
    pub inlier_count: usize,
    pub zoom_levels: usize,
    pub cells_visited: usize,
    /// False when `max_zoom` was hit with undecided cells left; the result is
    /// then the best translation found so far.
    pub terminated: bool,
    pub levels: Vec<LevelStats>,
}

const MAX_WITNESSES: usize = 32;

/// Candidate relative translations, one per correspondence.
///
/// With cloud-to-world rotations `Q_k = R_k^T`, a correspondence gives the
/// world-frame offset `Q_j x_j - Q_i x_i`; in the edge convention of
/// [`crate::geometry`] the relative translation is that offset negated and
/// rotated into frame `i`, i.e. `x_i - R_i R_j^T x_j`. The map is an isometry,
/// so inlier sets are identical in either frame.
pub fn candidate_translations(
    corr: &CorrespondenceSet,
    rot_i: &Rotation,
    rot_j: &Rotation,
) -> Vec<Vec3> {
    let m = rot_i.matrix() * rot_j.matrix().transpose();
    corr.pairs.iter().map(|(xi, xj)| xi - m * xj).collect()
}

/// Returns a translation covered by the maximum number of balls.
pub fn max_consensus_translation(
    spheres: &SphereSet,
    cfg: &ConsensusConfig,
) -> Result<ConsensusResult> {
    if spheres.is_empty() {
        return Err(Error::EmptyInput);
    }
    let eps = spheres.radius;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps", "inlier radius must be positive"));
    }
    if cfg.zoom_factor < 2 {
        return Err(Error::invalid("zoom_factor", "must be at least 2"));
    }
    let cell = cfg.initial_cell.unwrap_or(eps);
    if !(cell.is_finite() && cell > 0.0) {
        return Err(Error::invalid("initial_cell", "must be positive"));
    }

    let mut cells = initial_grid(spheres, cell);
    let mut best_count = 0usize;
    let mut witnesses: Vec<Vec3> = Vec::new();
    let mut levels = Vec::new();
    let mut visited = 0usize;
    let mut terminated = false;
    let r2 = eps * eps;

    for level in 0..=cfg.max_zoom {
        visited += cells.len();
        let mut max_ub = 0;
        for c in &cells {
            let ub = c.upper_bound();
            max_ub = max_ub.max(ub);
            if ub < best_count {
                continue;
            }
            let p = c.center();
            let lb = c.fully_contained_count
                + c.intersecting_sphere_indices
                    .iter()
                    .filter(|&&k| (p - spheres.centers[k as usize]).norm_squared() < r2)
                    .count();
            if lb > best_count {
                best_count = lb;
                witnesses.clear();
                witnesses.push(p);
            } else if lb == best_count && witnesses.len() < MAX_WITNESSES {
                witnesses.push(p);
            }
        }
        levels.push(LevelStats {
            zoom_level: level,
            cells: cells.len(),
            max_count: max_ub,
        });
        cells.retain(|c| c.upper_bound() > best_count);
        if cells.is_empty() {
            terminated = true;
            break;
        }
        if level == cfg.max_zoom {
            break;
        }
        cells = subdivide(&cells, spheres, cfg.zoom_factor, best_count);
    }

    let (translation, witness, inliers) = select_and_refit(spheres, &witnesses);
    Ok(ConsensusResult {
        translation,
        witness,
        inlier_count: inliers.len(),
        inlier_indices: inliers,
        zoom_levels: levels.len(),
        cells_visited: visited,
        terminated,
        levels,
    })
}

fn initial_grid(spheres: &SphereSet, cell: f64) -> Vec<GridCell> {
    let eps = spheres.radius;
    let mut lo = spheres.centers[0];
    for c in &spheres.centers {
        lo = lo.inf(c);
    }
    // The small offset keeps ball boundaries off the grid planes in
    // symmetric configurations.
    let origin = lo - Vec3::repeat(eps + 1e-7 * eps);

    struct Acc {
        contained: usize,
        crossing: Vec<u32>,
    }
    let mut grid: HashMap<[i64; 3], Acc, FxBuildHasher> =
        HashMap::with_capacity_and_hasher(spheres.len() * 8, FxBuildHasher);
    for (k, c) in spheres.centers.iter().enumerate() {
        let local_lo = (c - Vec3::repeat(eps) - origin) / cell;
        let local_hi = (c + Vec3::repeat(eps) - origin) / cell;
        let lo_idx = [0, 1, 2].map(|a| local_lo[a].floor() as i64);
        let hi_idx = [0, 1, 2].map(|a| local_hi[a].floor() as i64);
        for x in lo_idx[0]..=hi_idx[0] {
            for y in lo_idx[1]..=hi_idx[1] {
                for z in lo_idx[2]..=hi_idx[2] {
                    let min = origin + Vec3::new(x as f64, y as f64, z as f64) * cell;
                    let max = min + Vec3::repeat(cell);
                    let rel = classify_box_sphere(&min, &max, c, eps);
                    if rel == BoxSphereRelation::Outside {
                        continue;
                    }
                    let acc = grid.entry([x, y, z]).or_insert_with(|| Acc {
                        contained: 0,
                        crossing: Vec::new(),
                    });
                    match rel {
                        BoxSphereRelation::Inside => acc.contained += 1,
                        _ => acc.crossing.push(k as u32),
                    }
                }
            }
        }
    }
    let mut keyed: Vec<([i64; 3], Acc)> = grid.into_iter().collect();
    keyed.sort_unstable_by_key(|(key, _)| *key);
    keyed
        .into_iter()
        .map(|(key, acc)| {
            let min = origin + Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) * cell;
            GridCell {
                min_corner: min,
                max_corner: min + Vec3::repeat(cell),
                intersecting_sphere_indices: acc.crossing,
                fully_contained_count: acc.contained,
            }
        })
        .collect()
}

fn subdivide(
    parents: &[GridCell],
    spheres: &SphereSet,
    zoom: usize,
    best_count: usize,
) -> Vec<GridCell> {
    let eps = spheres.radius;
    let mut out = Vec::new();
    for parent in parents {
        let step = (parent.max_corner - parent.min_corner) / zoom as f64;
        for x in 0..zoom {
            for y in 0..zoom {
                for z in 0..zoom {
                    let min = parent.min_corner
                        + Vec3::new(x as f64 * step.x, y as f64 * step.y, z as f64 * step.z);
                    let max = if x + 1 == zoom && y + 1 == zoom && z + 1 == zoom {
                        parent.max_corner
                    } else {
                        Vec3::new(
                            if x + 1 == zoom {
                                parent.max_corner.x
                            } else {
                                min.x + step.x
                            },
                            if y + 1 == zoom {
                                parent.max_corner.y
                            } else {
                                min.y + step.y
                            },
                            if z + 1 == zoom {
                                parent.max_corner.z
                            } else {
                                min.z + step.z
                            },
                        )
                    };
                    let mut contained = parent.fully_contained_count;
                    let mut crossing = Vec::new();
                    for &k in &parent.intersecting_sphere_indices {
                        match classify_box_sphere(&min, &max, &spheres.centers[k as usize], eps) {
                            BoxSphereRelation::Inside => contained += 1,
                            BoxSphereRelation::Boundary => crossing.push(k),
                            BoxSphereRelation::Outside => {}
                        }
                    }
                    if contained + crossing.len() < best_count {
                        continue;
                    }
                    out.push(GridCell {
                        min_corner: min,
                        max_corner: max,
                        intersecting_sphere_indices: crossing,
                        fully_contained_count: contained,
                    });
                }
            }
        }
    }
    out
}

/// Picks among equally good witnesses (lowest refit residual, then the
/// lexicographically smallest witness). Returns the refit mean, the witness
/// and its inlier set.
fn select_and_refit(spheres: &SphereSet, witnesses: &[Vec3]) -> (Vec3, Vec3, Vec<usize>) {
    let mut best: Option<(f64, Vec3, Vec<usize>, Vec3)> = None;
    let mut seen: Vec<Vec<usize>> = Vec::new();
    for w in witnesses {
        let set = spheres.inliers_at(w);
        if seen.contains(&set) {
            // Same inlier set: only the witness ordering can matter.
            if let Some(b) = best.as_mut() {
                if b.2 == set && lex_less(w, &b.1) {
                    b.1 = *w;
                }
            }
            continue;
        }
        let mean = mean_of(spheres, &set);
        let residual: f64 = set
            .iter()
            .map(|&k| (spheres.centers[k] - mean).norm_squared())
            .sum();
        let better = match &best {
            None => true,
            Some((r, bw, _, _)) => residual < *r || (residual == *r && lex_less(w, bw)),
        };
        if better {
            best = Some((residual, *w, set.clone(), mean));
        }
        seen.push(set);
    }
    let (_, witness, set, mean) = best.expect("at least one witness");
    (mean, witness, set)
}

fn lex_less(a: &Vec3, b: &Vec3) -> bool {
    for k in 0..3 {
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

fn mean_of(spheres: &SphereSet, set: &[usize]) -> Vec3 {
    let sum = set
        .iter()
        .fold(Vec3::zeros(), |acc, &k| acc + spheres.centers[k]);
    sum / set.len().max(1) as f64
}

/// Tries every candidate as the translation and keeps the one with the most
/// inliers (ties: lowest index). Quadratic in the number of candidates.
pub fn exhaustive_candidate_oracle(spheres: &SphereSet) -> Result<ConsensusResult> {
    if spheres.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best = (0usize, 0usize);
    for (k, c) in spheres.centers.iter().enumerate() {
        let n = spheres.count_at(c);
        if n > best.0 {
            best = (n, k);
        }
    }
    let witness = spheres.centers[best.1];
    let set = spheres.inliers_at(&witness);
    Ok(ConsensusResult {
        translation: mean_of(spheres, &set),
        witness,
        inlier_count: set.len(),
        inlier_indices: set,
        zoom_levels: 0,
        cells_visited: 0,
        terminated: true,
        levels: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReestimateConfig {
    pub consensus: ConsensusConfig,
    /// Edges with fewer consensus inliers are flagged and get the floor weight.
    pub min_inliers: usize,
}

impl Default for ReestimateConfig {
    fn default() -> Self {
        Self {
            consensus: ConsensusConfig::default(),
            min_inliers: 5,
        }
    }
}

/// Outcome of re-estimating one edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeReestimate {
    /// `None` when the edge has no correspondences.
    pub consensus: Option<ConsensusResult>,
    pub low_inlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reestimation {
    pub graph: PoseGraph,
    pub edges: Vec<EdgeReestimate>,
}

impl Reestimation {
    pub fn non_terminated(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.consensus.as_ref().is_some_and(|c| !c.terminated))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn low_inlier_edges(&self) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.low_inlier)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Runs the consensus solve for edge `k` of `graph` under `rotations`.
pub fn reestimate_edge(
    graph: &PoseGraph,
    k: usize,
    rotations: &[Rotation],
    eps: f64,
    cfg: &ReestimateConfig,
) -> Result<EdgeReestimate> {
    let e = &graph.edges[k];
    if e.correspondences.is_empty() {
        return Ok(EdgeReestimate {
            consensus: None,
            low_inlier: true,
        });
    }
    let centers = candidate_translations(&e.correspondences, &rotations[e.i], &rotations[e.j]);
    let spheres = SphereSet::new(centers, eps)?;
    let res = max_consensus_translation(&spheres, &cfg.consensus)?;
    Ok(EdgeReestimate {
        low_inlier: res.inlier_count < cfg.min_inliers,
        consensus: Some(res),
    })
}

/// Writes per-edge consensus results back into a copy of `graph`: each edge
/// gets the consensus translation, the rotation induced by `rotations`, and
/// inlier count and weight from the consensus inliers.
pub fn apply_reestimates(
    graph: &PoseGraph,
    rotations: &[Rotation],
    results: Vec<EdgeReestimate>,
) -> Result<Reestimation> {
    if results.len() != graph.edges.len() {
        return Err(Error::LengthMismatch {
            left: results.len(),
            right: graph.edges.len(),
        });
    }
    let mut out = graph.clone();
    let max_inliers = results
        .iter()
        .filter(|r| !r.low_inlier)
        .filter_map(|r| r.consensus.as_ref().map(|c| c.inlier_count))
        .max()
        .unwrap_or(0);
    for (e, r) in out.edges.iter_mut().zip(&results) {
        e.relative.rotation = rotations[e.j] * rotations[e.i].transpose();
        if let Some(c) = &r.consensus {
            e.relative.translation = c.translation;
            e.inlier_count = c.inlier_count;
        } else {
            e.inlier_count = 0;
        }
        e.weight = if r.low_inlier || max_inliers == 0 {
            EDGE_WEIGHT_FLOOR
        } else {
            (e.inlier_count as f64 / max_inliers as f64).max(EDGE_WEIGHT_FLOOR)
        };
    }
    Ok(Reestimation {
        graph: out,
        edges: results,
    })
}

/// Sequential re-estimation of every edge.
pub fn reestimate_all_edges(
    graph: &PoseGraph,
    rotations: &[Rotation],
    eps: f64,
    cfg: &ReestimateConfig,
) -> Result<Reestimation> {
    if rotations.len() != graph.vertices.len() {
        return Err(Error::LengthMismatch {
            left: rotations.len(),
            right: graph.vertices.len(),
        });
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("eps", "inlier radius must be positive"));
    }
    let results = (0..graph.edges.len())
        .map(|k| reestimate_edge(graph, k, rotations, eps, cfg))
        .collect::<Result<Vec<_>>>()?;
    apply_reestimates(graph, rotations, results)
}
