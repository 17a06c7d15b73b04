//! Pairwise front-end: synthetic scenes with known poses, RANSAC rigid
//! estimation from correspondences, and nearest-neighbor overlap scoring.

use alloc::vec::Vec;

use hashbrown::HashMap;
use nalgebra::ComplexField;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustc_hash::FxBuildHasher;

use crate::error::{Error, Result};
use crate::geometry::{
    fit_rigid_svd, relative_from_global, relative_from_point_map, AxisAngle, RigidTransform,
    Rotation, Vec3,
};
use crate::graph::{CorrespondenceSet, Edge, PoseGraph, Vertex};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier threshold on `‖R x_i + t - x_j‖`, meters.
    pub inlier_threshold: f64,
    /// Only used to report the theoretically sufficient iteration count.
    pub confidence: f64,
    pub min_sample: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 0.05,
            confidence: 0.999,
            min_sample: 3,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    fn check(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.inlier_threshold.is_finite() && self.inlier_threshold > 0.0) {
            return Err(Error::invalid("inlier_threshold", "must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence", "must lie in (0, 1)"));
        }
        if self.min_sample < 3 {
            return Err(Error::invalid("min_sample", "must be at least 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseEstimate {
    /// Relative transform in edge convention.
    pub relative: RigidTransform,
    /// The same estimate as a point map `x_j = R x_i + t`.
    pub point_map: RigidTransform,
    /// Inliers of the best hypothesis, before the final refit.
    pub inlier_indices: Vec<usize>,
    /// Iterations that would reach the configured confidence at the observed
    /// inlier ratio.
    pub sufficient_iterations: Option<usize>,
}

/// Fixed-iteration RANSAC over minimal samples followed by an SVD refit on
/// the inliers of the best hypothesis.
pub fn estimate_pairwise(corr: &CorrespondenceSet, cfg: &RansacConfig) -> Result<PairwiseEstimate> {
    cfg.check()?;
    let n = corr.len();
    if n < cfg.min_sample {
        return Err(Error::TooFewCorrespondences {
            needed: cfg.min_sample,
            got: n,
        });
    }
    let src: Vec<Vec3> = corr.pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Vec3> = corr.pairs.iter().map(|p| p.1).collect();
    let thr2 = cfg.inlier_threshold * cfg.inlier_threshold;
    let sample_weights = alloc::vec![1.0; cfg.min_sample];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut s_buf = Vec::with_capacity(cfg.min_sample);
    let mut d_buf = Vec::with_capacity(cfg.min_sample);
    for _ in 0..cfg.max_iterations {
        let sample = index::sample(&mut rng, n, cfg.min_sample);
        s_buf.clear();
        d_buf.clear();
        for k in sample.iter() {
            s_buf.push(src[k]);
            d_buf.push(dst[k]);
        }
        let Ok(model) = fit_rigid_svd(&s_buf, &d_buf, &sample_weights) else {
            continue;
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&k| (model.apply(&src[k]) - dst[k]).norm_squared() < thr2)
            .collect();
        if best.as_ref().is_none_or(|b| inliers.len() > b.1.len()) {
            best = Some((model, inliers));
        }
    }
    let Some((model, inliers)) = best else {
        return Err(Error::DegenerateGeometry("no non-collinear sample found"));
    };

    // Refit on the inliers; keep the hypothesis when they are too few or degenerate.
    let s: Vec<Vec3> = inliers.iter().map(|&k| src[k]).collect();
    let d: Vec<Vec3> = inliers.iter().map(|&k| dst[k]).collect();
    let w = alloc::vec![1.0; s.len()];
    let point_map = fit_rigid_svd(&s, &d, &w).unwrap_or(model);
    let ratio = inliers.len() as f64 / n as f64;
    Ok(PairwiseEstimate {
        relative: relative_from_point_map(&point_map),
        point_map,
        inlier_indices: inliers,
        sufficient_iterations: sufficient_iterations(ratio, cfg.min_sample, cfg.confidence),
    })
}

/// `log(1 - confidence) / log(1 - w^s)`, or `None` when undefined.
pub fn sufficient_iterations(inlier_ratio: f64, sample: usize, confidence: f64) -> Option<usize> {
    let p = ComplexField::powi(inlier_ratio, sample as i32);
    if p <= 0.0 {
        return None;
    }
    if p >= 1.0 {
        return Some(1);
    }
    let k = ComplexField::ln(1.0 - confidence) / ComplexField::ln(1.0 - p);
    Some(ComplexField::ceil(k).max(1.0) as usize)
}

/// Uniform hash grid for fixed-radius neighbor queries.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>, FxBuildHasher>,
    points: Vec<Vec3>,
}

impl SpatialHash {
    pub fn new(points: &[Vec3], cell: f64) -> Result<Self> {
        if !(cell.is_finite() && cell > 0.0) {
            return Err(Error::invalid("radius", "must be positive"));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>, FxBuildHasher> = HashMap::default();
        for (k, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(k as u32);
        }
        Ok(Self {
            cell,
            cells,
            points: points.to_vec(),
        })
    }

    /// True if some stored point lies within `radius` (inclusive) of `q`.
    /// `radius` must not exceed the cell size.
    pub fn has_neighbor(&self, q: &Vec3, radius: f64) -> bool {
        let r2 = radius * radius;
        let c = key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        if ids
                            .iter()
                            .any(|&k| (self.points[k as usize] - q).norm_squared() <= r2)
                        {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn key(p: &Vec3, cell: f64) -> [i64; 3] {
    [0, 1, 2].map(|a| ComplexField::floor(p[a] / cell) as i64)
}

/// Which cloud's points are counted by [`overlap_score`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapSense {
    /// Transformed `P` queried against `Q`.
    Forward,
    /// `Q` queried against transformed `P`.
    Backward,
    /// Mean of both directions.
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapConfig {
    pub radius: f64,
    pub sense: OverlapSense,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        Self {
            radius: 0.05,
            sense: OverlapSense::Symmetric,
        }
    }
}

/// Fraction of points with a neighbor within `radius` in the other cloud,
/// after mapping `cloud_p` by the point map `transform`.
pub fn overlap_score(
    cloud_p: &[Vec3],
    cloud_q: &[Vec3],
    transform: &RigidTransform,
    cfg: &OverlapConfig,
) -> Result<f64> {
    if cloud_p.is_empty() || cloud_q.is_empty() {
        return Err(Error::EmptyInput);
    }
    let moved: Vec<Vec3> = cloud_p.iter().map(|p| transform.apply(p)).collect();
    let fraction = |query: &[Vec3], target: &[Vec3]| -> Result<f64> {
        let hash = SpatialHash::new(target, cfg.radius)?;
        let hits = query
            .iter()
            .filter(|q| hash.has_neighbor(q, cfg.radius))
            .count();
        Ok(hits as f64 / query.len() as f64)
    };
    Ok(match cfg.sense {
        OverlapSense::Forward => fraction(&moved, cloud_q)?,
        OverlapSense::Backward => fraction(cloud_q, &moved)?,
        OverlapSense::Symmetric => 0.5 * (fraction(&moved, cloud_q)? + fraction(cloud_q, &moved)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_clouds: usize,
    pub points_per_cloud: usize,
    /// Fraction of each cloud made of points seen by every cloud.
    pub overlap_fraction: f64,
    pub noise_sigma: f64,
    /// Probability that a correspondence is a random mismatch.
    pub outlier_ratio: f64,
    /// Fraction of non-consecutive edges whose correspondences follow a wrong
    /// transform.
    pub corrupted_edge_ratio: f64,
    pub correspondences_per_edge: usize,
    /// Clouds `i < j` are paired when `j - i <= neighbor_window`.
    pub neighbor_window: usize,
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_clouds: 10,
            points_per_cloud: 500,
            overlap_fraction: 0.5,
            noise_sigma: 0.01,
            outlier_ratio: 0.4,
            corrupted_edge_ratio: 0.2,
            correspondences_per_edge: 200,
            neighbor_window: 3,
            rng_seed: 0,
        }
    }
}

/// Correspondences generated for one pair of clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub i: usize,
    pub j: usize,
    pub correspondences: CorrespondenceSet,
    /// The non-mismatch correspondences follow a wrong relative transform.
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    /// Points in each cloud's own frame.
    pub clouds: Vec<Vec<Vec3>>,
    pub truth: Vec<RigidTransform>,
    pub pairs: Vec<ScenePair>,
}

impl SceneBundle {
    /// Pose graph carrying the ground-truth poses and exact relative transforms.
    pub fn truth_graph(&self) -> PoseGraph {
        let vertices = self
            .truth
            .iter()
            .enumerate()
            .map(|(id, pose)| Vertex {
                id,
                pose: *pose,
                fixed: id == 0,
            })
            .collect();
        let edges = self
            .pairs
            .iter()
            .map(|p| {
                let inliers = p
                    .correspondences
                    .truth_labels
                    .as_ref()
                    .map_or(0, |l| l.iter().filter(|x| **x).count());
                Edge {
                    i: p.i,
                    j: p.j,
                    relative: relative_from_global(&self.truth[p.i], &self.truth[p.j]),
                    correspondences: p.correspondences.clone(),
                    inlier_count: inliers,
                    weight: 1.0,
                    overlap_score: 0.0,
                }
            })
            .collect();
        PoseGraph { vertices, edges }
    }
}

/// Scene with default pair structure and corruption settings.
pub fn generate_scene(
    n_clouds: usize,
    points_per_cloud: usize,
    overlap_fraction: f64,
    noise_sigma: f64,
    outlier_ratio: f64,
    rng_seed: u64,
) -> Result<SceneBundle> {
    generate_scene_with(&SceneConfig {
        n_clouds,
        points_per_cloud,
        overlap_fraction,
        noise_sigma,
        outlier_ratio,
        corrupted_edge_ratio: 0.0,
        rng_seed,
        ..SceneConfig::default()
    })
}

pub fn generate_scene_with(cfg: &SceneConfig) -> Result<SceneBundle> {
    if cfg.n_clouds < 2 {
        return Err(Error::invalid("n_clouds", "need at least 2 clouds"));
    }
    if !(cfg.overlap_fraction > 0.0 && cfg.overlap_fraction <= 1.0) {
        return Err(Error::invalid("overlap_fraction", "must lie in (0, 1]"));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma", "must be non-negative"));
    }
    if !(0.0..1.0).contains(&cfg.outlier_ratio) {
        return Err(Error::invalid("outlier_ratio", "must lie in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&cfg.corrupted_edge_ratio) {
        return Err(Error::invalid("corrupted_edge_ratio", "must lie in [0, 1]"));
    }
    if cfg.neighbor_window == 0 {
        return Err(Error::invalid("neighbor_window", "must be at least 1"));
    }
    let shared = ComplexField::round(cfg.overlap_fraction * cfg.points_per_cloud as f64) as usize;
    if shared < 3 {
        return Err(Error::invalid(
            "overlap_fraction",
            "fewer than 3 shared points per cloud",
        ));
    }
    if cfg.correspondences_per_edge < 3 {
        return Err(Error::invalid(
            "correspondences_per_edge",
            "must be at least 3",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let surface = LatentSurface::random(&mut rng);
    let truth = trajectory(cfg.n_clouds, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let jitter = |rng: &mut ChaCha8Rng| {
        if cfg.noise_sigma > 0.0 {
            Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
        } else {
            Vec3::zeros()
        }
    };

    let shared_world: Vec<Vec3> = (0..shared).map(|_| surface.sample(&mut rng)).collect();
    let mut clouds = Vec::with_capacity(cfg.n_clouds);
    for pose in &truth {
        let mut cloud = Vec::with_capacity(cfg.points_per_cloud.max(shared));
        for w in &shared_world {
            cloud.push(pose.rotation.apply(&(w - pose.translation)) + jitter(&mut rng));
        }
        while cloud.len() < cfg.points_per_cloud {
            let w = surface.sample(&mut rng);
            cloud.push(pose.rotation.apply(&(w - pose.translation)) + jitter(&mut rng));
        }
        clouds.push(cloud);
    }

    let mut pairs = Vec::new();
    for i in 0..cfg.n_clouds {
        for j in (i + 1)..cfg.n_clouds.min(i + cfg.neighbor_window + 1) {
            pairs.push((i, j));
        }
    }
    let n_corrupt = ComplexField::round(cfg.corrupted_edge_ratio * pairs.len() as f64) as usize;
    // Never corrupt the consecutive edges, so the inlier graph stays connected.
    let candidates: Vec<usize> = (0..pairs.len())
        .filter(|&k| pairs[k].1 - pairs[k].0 > 1)
        .collect();
    let n_corrupt = n_corrupt.min(candidates.len());
    let mut corrupted = alloc::vec![false; pairs.len()];
    for k in index::sample(&mut rng, candidates.len(), n_corrupt).iter() {
        corrupted[candidates[k]] = true;
    }

    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let m = cfg.correspondences_per_edge;
        let mut corr = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        let wrong = corrupted[k].then(|| {
            RigidTransform::new(
                AxisAngle(random_unit(&mut rng) * rng.random_range(0.5..3.0)).exp(),
                random_unit(&mut rng) * rng.random_range(0.5..2.0),
            )
        });
        for _ in 0..m {
            if rng.random::<f64>() < cfg.outlier_ratio {
                let (a, b) = loop {
                    let a = rng.random_range(0..clouds[i].len());
                    let b = rng.random_range(0..clouds[j].len());
                    if !(a == b && a < shared) {
                        break (a, b);
                    }
                };
                corr.push((clouds[i][a], clouds[j][b]));
                labels.push(false);
            } else {
                let s = rng.random_range(0..shared);
                match &wrong {
                    Some(w) => {
                        corr.push((clouds[i][s], w.apply(&clouds[i][s]) + jitter(&mut rng)));
                        labels.push(false);
                    }
                    None => {
                        corr.push((clouds[i][s], clouds[j][s]));
                        labels.push(true);
                    }
                }
            }
        }
        out.push(ScenePair {
            i,
            j,
            correspondences: CorrespondenceSet::with_labels(corr, labels),
            corrupted: corrupted[k],
        });
    }
    Ok(SceneBundle {
        clouds,
        truth,
        pairs: out,
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Smooth path: heading drifts by bounded increments, small tilt, steps of
/// 0.2 to 0.5 m. Pose 0 is the identity.
fn trajectory(n: usize, rng: &mut ChaCha8Rng) -> Vec<RigidTransform> {
    let mut poses = Vec::with_capacity(n);
    let mut yaw: f64 = 0.0;
    let mut position = Vec3::zeros();
    poses.push(RigidTransform::identity());
    for _ in 1..n {
        yaw += rng.random_range(-0.35..0.35);
        let step = rng.random_range(0.2..0.5);
        position += Vec3::new(ComplexField::cos(yaw), ComplexField::sin(yaw), 0.0) * step
            + Vec3::new(0.0, 0.0, rng.random_range(-0.05..0.05));
        let tilt = AxisAngle(Vec3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            0.0,
        ))
        .exp();
        // Stored rotation maps world to cloud.
        let cloud_to_world = Rotation::about_z(yaw) * tilt;
        poses.push(RigidTransform::new(cloud_to_world.transpose(), position));
    }
    poses
}

/// Union of axis-aligned box surfaces and planar rectangles.
struct LatentSurface {
    /// (min corner, max corner) of each box.
    boxes: Vec<(Vec3, Vec3)>,
    /// (origin, edge u, edge v) of each rectangle.
    planes: Vec<(Vec3, Vec3, Vec3)>,
    areas: Vec<f64>,
}

impl LatentSurface {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut boxes = Vec::new();
        for _ in 0..6 {
            let c = Vec3::new(
                rng.random_range(-2.0..4.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
            );
            let h = Vec3::new(
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            );
            boxes.push((c - h, c + h));
        }
        let planes = alloc::vec![
            (
                Vec3::new(-3.0, -3.0, -1.5),
                Vec3::new(8.0, 0.0, 0.0),
                Vec3::new(0.0, 6.0, 0.0)
            ),
            (
                Vec3::new(-3.0, 3.0, -1.5),
                Vec3::new(8.0, 0.0, 0.0),
                Vec3::new(0.0, 0.0, 3.0)
            ),
            (
                Vec3::new(-3.0, -3.0, -1.5),
                Vec3::new(0.0, 6.0, 0.0),
                Vec3::new(0.0, 0.0, 3.0)
            ),
        ];
        let mut areas = Vec::new();
        for (lo, hi) in &boxes {
            let d = hi - lo;
            areas.push(2.0 * (d.x * d.y + d.y * d.z + d.x * d.z));
        }
        for (_, u, v) in &planes {
            areas.push(u.cross(v).norm());
        }
        Self {
            boxes,
            planes,
            areas,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        let total: f64 = self.areas.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut k = 0;
        while k + 1 < self.areas.len() && pick >= self.areas[k] {
            pick -= self.areas[k];
            k += 1;
        }
        if k < self.boxes.len() {
            let (lo, hi) = self.boxes[k];
            let d = hi - lo;
            let faces = [d.y * d.z, d.x * d.z, d.x * d.y];
            let mut f = rng.random_range(0.0..(faces[0] + faces[1] + faces[2]));
            let mut axis = 0;
            while axis < 2 && f >= faces[axis] {
                f -= faces[axis];
                axis += 1;
            }
            let mut p = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            p[axis] = if rng.random::<bool>() {
                lo[axis]
            } else {
                hi[axis]
            };
            p
        } else {
            let (o, u, v) = self.planes[k - self.boxes.len()];
            o + u * rng.random::<f64>() + v * rng.random::<f64>()
        }
    }
}
