//! Global rotations from relative rotations.
//!
//! The starting point is the best supported of the graph's own rotations and
//! rotations chained along random spanning trees. Stage 1 sweeps the vertices in breadth-first order and moves each rotation
//! to the Weiszfeld (L1) median of the estimates implied by its edges. Stage 2
//! runs iteratively re-weighted least squares with the robust weight
//! `σ²/(σ²+θ²)`, i.e. a Cauchy kernel with objective
//! `Σ w σ² ln(1 + θ²/σ²)`. Every per-vertex update is backtracked so its local
//! objective never increases, which makes the sweep objective monotone.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::ComplexField;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{rotation_geodesic_angle, AxisAngle, Mat3, Rotation, Vec3};
use crate::graph::PoseGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotAvgConfig {
    pub l1_max_iters: usize,
    pub irls_max_iters: usize,
    /// Stop when no vertex moves by more than this angle in a sweep, radians.
    pub step_tolerance: f64,
    /// Kernel width σ_r, radians.
    pub kernel_width: f64,
    pub weight_floor: f64,
    /// Multiply robust weights by `edge.weight`.
    pub use_edge_weights: bool,
    /// Random spanning trees tried for the starting rotations; 0 starts from
    /// the graph's vertex rotations.
    pub init_trees: usize,
    /// Edge residual under which an edge supports a starting point, radians.
    pub init_threshold: f64,
    pub init_seed: u64,
}

impl Default for RotAvgConfig {
    fn default() -> Self {
        Self {
            l1_max_iters: 50,
            irls_max_iters: 200,
            step_tolerance: 1e-10,
            kernel_width: 5f64.to_radians(),
            weight_floor: 1e-6,
            use_edge_weights: true,
            init_trees: 200,
            init_threshold: 15f64.to_radians(),
            init_seed: 0,
        }
    }
}

impl RotAvgConfig {
    fn check(&self) -> Result<()> {
        if self.l1_max_iters == 0 || self.irls_max_iters == 0 {
            return Err(Error::invalid(
                "max_iters",
                "iteration caps must be at least 1",
            ));
        }
        if !(self.step_tolerance > 0.0
            && self.kernel_width > 0.0
            && self.weight_floor > 0.0
            && self.init_threshold > 0.0)
        {
            return Err(Error::invalid("tolerance", "tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotAvgResult {
    pub rotations: Vec<Rotation>,
    /// False when the IRLS iteration cap was hit first.
    pub converged: bool,
    pub l1_sweeps: usize,
    pub irls_iterations: usize,
    /// IRLS objective before the first sweep and after each sweep.
    pub objective_history: Vec<f64>,
}

/// One incident edge of `v`, implying `R_v ≈ rel · R_other`.
struct Constraint {
    other: usize,
    rel: Mat3,
    weight: f64,
}

fn constraints(graph: &PoseGraph, use_weights: bool) -> Vec<Vec<Constraint>> {
    let mut out: Vec<Vec<Constraint>> = (0..graph.len()).map(|_| Vec::new()).collect();
    for e in &graph.edges {
        let w = if use_weights { e.weight } else { 1.0 };
        let r = *e.relative.rotation.matrix();
        // R_ij = R_j R_iᵀ: R_j ≈ R_ij R_i and R_i ≈ R_ijᵀ R_j.
        out[e.j].push(Constraint {
            other: e.i,
            rel: r,
            weight: w,
        });
        out[e.i].push(Constraint {
            other: e.j,
            rel: r.transpose(),
            weight: w,
        });
    }
    out
}

/// Tangent residuals `log(Est · R_vᵀ)` of the constraints on `v`.
fn residuals(cs: &[Constraint], rots: &[Rotation], rv: &Rotation) -> Vec<Vec3> {
    cs.iter()
        .map(|c| {
            let est = c.rel * rots[c.other].matrix();
            Rotation::from_matrix_unchecked(est * rv.matrix().transpose())
                .log()
                .0
        })
        .collect()
}

fn cauchy(theta2: f64, sigma2: f64) -> f64 {
    sigma2 * ComplexField::ln(1.0 + theta2 / sigma2)
}

fn local_l1(cs: &[Constraint], rots: &[Rotation], rv: &Rotation) -> f64 {
    residuals(cs, rots, rv)
        .iter()
        .zip(cs)
        .map(|(r, c)| c.weight * r.norm())
        .sum()
}

fn local_cauchy(cs: &[Constraint], rots: &[Rotation], rv: &Rotation, sigma2: f64) -> f64 {
    residuals(cs, rots, rv)
        .iter()
        .zip(cs)
        .map(|(r, c)| c.weight * cauchy(r.norm_squared(), sigma2))
        .sum()
}

/// `Σ_e w_e σ² ln(1 + θ_e²/σ²)` with `θ_e` the angle of `R_ij R_i R_jᵀ`.
pub fn irls_objective(graph: &PoseGraph, rotations: &[Rotation], cfg: &RotAvgConfig) -> f64 {
    let sigma2 = cfg.kernel_width * cfg.kernel_width;
    graph
        .edges
        .iter()
        .map(|e| {
            let w = if cfg.use_edge_weights { e.weight } else { 1.0 };
            let theta =
                edge_rotation_residual(e.relative.rotation, &rotations[e.i], &rotations[e.j]);
            w * cauchy(theta * theta, sigma2)
        })
        .sum()
}

/// Angle of `R_ij R_i R_jᵀ`.
pub fn edge_rotation_residual(r_ij: Rotation, r_i: &Rotation, r_j: &Rotation) -> f64 {
    rotation_geodesic_angle(&(r_ij * *r_i), r_j)
}

/// Applies `exp(scale·δ)` to `rv` with backtracking until `objective` does not
/// increase. Returns the accepted rotation and step angle.
fn backtracked_step(
    rv: &Rotation,
    delta: Vec3,
    objective: impl Fn(&Rotation) -> f64,
) -> (Rotation, f64) {
    let before = objective(rv);
    let mut scale = 1.0;
    for _ in 0..40 {
        let step = delta * scale;
        let cand = Rotation::project(&(AxisAngle(step).exp().matrix() * rv.matrix()));
        if objective(&cand) <= before {
            let moved = rotation_geodesic_angle(&cand, rv);
            return (cand, moved);
        }
        scale *= 0.5;
    }
    (*rv, 0.0)
}

/// Support of a starting point: total weight of the edges with residual
/// below the threshold, then the truncated residual sum (lower is better).
fn support(graph: &PoseGraph, rots: &[Rotation], cfg: &RotAvgConfig) -> (f64, f64) {
    let mut weight = 0.0;
    let mut cost = 0.0;
    for e in &graph.edges {
        let theta = edge_rotation_residual(e.relative.rotation, &rots[e.i], &rots[e.j]);
        if theta < cfg.init_threshold {
            weight += if cfg.use_edge_weights { e.weight } else { 1.0 };
        }
        cost += theta.min(cfg.init_threshold);
    }
    (weight, cost)
}

/// Rotations chained from the anchor along the tree made of `tree_edges`.
fn chain_tree(graph: &PoseGraph, tree_edges: &[usize]) -> Vec<Rotation> {
    let n = graph.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &k in tree_edges {
        adj[graph.edges[k].i].push(k);
        adj[graph.edges[k].j].push(k);
    }
    let anchor = graph.anchor();
    let mut rots = vec![Rotation::identity(); n];
    let mut seen = vec![false; n];
    seen[anchor] = true;
    let mut queue = alloc::collections::VecDeque::from([anchor]);
    while let Some(v) = queue.pop_front() {
        for &k in &adj[v] {
            let e = &graph.edges[k];
            let (u, r) = if e.i == v {
                (e.j, e.relative.rotation * rots[v])
            } else {
                (e.i, e.relative.rotation.transpose() * rots[v])
            };
            if !seen[u] {
                seen[u] = true;
                rots[u] = r;
                queue.push_back(u);
            }
        }
    }
    rots
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Starting rotations with the largest edge support among the graph's own
/// vertex rotations and `init_trees` random spanning trees. The anchor is
/// the identity.
fn initial_rotations(graph: &PoseGraph, cfg: &RotAvgConfig) -> Vec<Rotation> {
    let anchor = graph.anchor();
    let gauge = graph.vertices[anchor].pose.rotation.transpose();
    let mut best: Vec<Rotation> = graph
        .vertices
        .iter()
        .map(|v| Rotation::project(&(v.pose.rotation.matrix() * gauge.matrix())))
        .collect();
    best[anchor] = Rotation::identity();
    if cfg.init_trees == 0 {
        return best;
    }
    let mut best_support = support(graph, &best, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut order: Vec<usize> = (0..graph.edges.len()).collect();
    for _ in 0..cfg.init_trees {
        order.shuffle(&mut rng);
        let mut parent: Vec<usize> = (0..graph.len()).collect();
        let mut tree = Vec::with_capacity(graph.len().saturating_sub(1));
        for &k in &order {
            let (a, b) = (
                find(&mut parent, graph.edges[k].i),
                find(&mut parent, graph.edges[k].j),
            );
            if a != b {
                parent[a] = b;
                tree.push(k);
            }
        }
        let rots = chain_tree(graph, &tree);
        let s = support(graph, &rots, cfg);
        if s.0 > best_support.0 || (s.0 == best_support.0 && s.1 < best_support.1) {
            best = rots;
            best_support = s;
        }
    }
    best
}

pub fn average_rotations(graph: &PoseGraph, cfg: &RotAvgConfig) -> Result<RotAvgResult> {
    cfg.check()?;
    graph.require_connected()?;
    let anchor = graph.anchor();
    let order: Vec<usize> = graph
        .bfs_order()
        .into_iter()
        .filter(|&v| v != anchor)
        .collect();
    let cs = constraints(graph, cfg.use_edge_weights);

    let mut rots = initial_rotations(graph, cfg);

    let reg = 1e-9;
    let mut l1_sweeps = 0;
    for _ in 0..cfg.l1_max_iters {
        l1_sweeps += 1;
        let mut max_step: f64 = 0.0;
        for &v in &order {
            for _ in 0..5 {
                let r = residuals(&cs[v], &rots, &rots[v]);
                let mut num = Vec3::zeros();
                let mut den = 0.0;
                for (res, c) in r.iter().zip(&cs[v]) {
                    let w = c.weight / res.norm().max(reg);
                    num += res * w;
                    den += w;
                }
                if den <= 0.0 {
                    break;
                }
                let (next, moved) =
                    backtracked_step(&rots[v], num / den, |rv| local_l1(&cs[v], &rots, rv));
                rots[v] = next;
                max_step = max_step.max(moved);
                if moved < cfg.step_tolerance {
                    break;
                }
            }
        }
        if max_step < cfg.step_tolerance {
            break;
        }
    }

    let sigma2 = cfg.kernel_width * cfg.kernel_width;
    let mut history = vec![irls_objective(graph, &rots, cfg)];
    let mut converged = false;
    let mut irls_iterations = 0;
    for _ in 0..cfg.irls_max_iters {
        irls_iterations += 1;
        let mut max_step: f64 = 0.0;
        for &v in &order {
            let r = residuals(&cs[v], &rots, &rots[v]);
            let mut num = Vec3::zeros();
            let mut den = 0.0;
            for (res, c) in r.iter().zip(&cs[v]) {
                let w = (sigma2 / (sigma2 + res.norm_squared()) * c.weight).max(cfg.weight_floor);
                num += res * w;
                den += w;
            }
            let (next, moved) = backtracked_step(&rots[v], num / den, |rv| {
                local_cauchy(&cs[v], &rots, rv, sigma2)
            });
            rots[v] = next;
            max_step = max_step.max(moved);
        }
        history.push(irls_objective(graph, &rots, cfg));
        if max_step < cfg.step_tolerance {
            converged = true;
            break;
        }
    }

    Ok(RotAvgResult {
        rotations: rots,
        converged,
        l1_sweeps,
        irls_iterations,
        objective_history: history,
    })
}

/// Global rotation `G` with `R_est G ≈ R_truth` in the chordal sense.
pub fn rotation_gauge(estimated: &[Rotation], truth: &[Rotation]) -> Result<Rotation> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimated.len(),
            right: truth.len(),
        });
    }
    if estimated.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut m = Mat3::zeros();
    for (e, t) in estimated.iter().zip(truth) {
        m += e.matrix().transpose() * t.matrix();
    }
    Ok(Rotation::project(&m))
}

/// Removes the global rotation gauge and returns aligned rotations with their
/// geodesic errors in radians.
pub fn align_rotations_to_truth(
    estimated: &[Rotation],
    truth: &[Rotation],
) -> Result<(Vec<Rotation>, Vec<f64>)> {
    let g = rotation_gauge(estimated, truth)?;
    let aligned: Vec<Rotation> = estimated.iter().map(|r| *r * g).collect();
    let errors = aligned
        .iter()
        .zip(truth)
        .map(|(a, t)| rotation_geodesic_angle(a, t))
        .collect();
    Ok((aligned, errors))
}
