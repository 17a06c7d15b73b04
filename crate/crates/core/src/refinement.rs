//! Joint refinement of all poses on the truncated correspondence loss
//! `L = Σ_e min(ε_e, γ)`, where `ε_e` is the RMSE of edge `e`'s
//! correspondences under the relative transform induced by the global poses.
//!
//! Steps are damped Gauss-Newton on `Σ ε_e²` over the edges with `ε_e < γ`;
//! a step is accepted only if `L` does not increase. Each non-anchor pose is
//! perturbed as `R ← exp(ω) R`, `t ← t + δt`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{ComplexField, DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::geometry::{hat, AxisAngle, Mat3, RigidTransform, Rotation, Vec3};
use crate::graph::{Edge, PoseGraph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Truncation γ on the edge RMSE, meters.
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop when the accepted step is shorter than this.
    pub step_tolerance: f64,
    /// Initial Levenberg damping added to the Gauss-Newton matrix.
    pub parameter_damping: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::for_eps(0.05)
    }
}

impl RefineConfig {
    /// `γ = 3ε`.
    pub fn for_eps(eps: f64) -> Self {
        Self {
            gamma: 3.0 * eps,
            max_iters: 50,
            step_tolerance: 1e-12,
            parameter_damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub poses: Vec<RigidTransform>,
    pub converged: bool,
    pub iterations: usize,
    /// `L` at the start and after each accepted step.
    pub loss_history: Vec<f64>,
}

/// Residual of one correspondence, `R_j (R_iᵀ p + t_i - t_j) - q`.
fn point_residual(p: &Vec3, q: &Vec3, pi: &RigidTransform, pj: &RigidTransform) -> Vec3 {
    pj.rotation
        .apply(&(pi.rotation.transpose().apply(p) + pi.translation - pj.translation))
        - q
}

/// RMSE of the edge's correspondences under the relative transform implied
/// by `pose_i` and `pose_j`.
pub fn edge_residual(edge: &Edge, pose_i: &RigidTransform, pose_j: &RigidTransform) -> Result<f64> {
    let c = &edge.correspondences;
    if c.is_empty() {
        return Err(Error::EmptyCorrespondences(edge.i, edge.j));
    }
    Ok(ComplexField::sqrt(squared_rmse(edge, pose_i, pose_j)))
}

fn squared_rmse(edge: &Edge, pi: &RigidTransform, pj: &RigidTransform) -> f64 {
    let c = &edge.correspondences.pairs;
    c.iter()
        .map(|(p, q)| point_residual(p, q, pi, pj).norm_squared())
        .sum::<f64>()
        / c.len() as f64
}

/// Stacked correspondence residuals of one edge and their Jacobian with
/// respect to `(ω_i, δt_i, ω_j, δt_j)` (12 columns).
pub fn edge_jacobian(
    edge: &Edge,
    pose_i: &RigidTransform,
    pose_j: &RigidTransform,
) -> (DVector<f64>, DMatrix<f64>) {
    let c = &edge.correspondences.pairs;
    let mut r = DVector::zeros(3 * c.len());
    let mut jac = DMatrix::zeros(3 * c.len(), 12);
    for (k, (p, q)) in c.iter().enumerate() {
        let (res, blocks) = point_jacobian(p, q, pose_i, pose_j);
        for a in 0..3 {
            r[3 * k + a] = res[a];
            for b in 0..12 {
                jac[(3 * k + a, b)] = blocks[(a, b)];
            }
        }
    }
    (r, jac)
}

fn point_jacobian(
    p: &Vec3,
    q: &Vec3,
    pi: &RigidTransform,
    pj: &RigidTransform,
) -> (Vec3, SMatrix<f64, 3, 12>) {
    let ri = pi.rotation.matrix();
    let rj = pj.rotation.matrix();
    let w = ri.transpose() * p + pi.translation - pj.translation;
    let res = rj * w - q;
    let mut jac = SMatrix::<f64, 3, 12>::zeros();
    let d_wi: Mat3 = rj * ri.transpose() * hat(p);
    let d_wj: Mat3 = -hat(&(rj * w));
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_wi);
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(rj);
    jac.fixed_view_mut::<3, 3>(0, 6).copy_from(&d_wj);
    jac.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-rj));
    (res, jac)
}

/// `L = Σ_e min(ε_e, γ)` over edges with correspondences.
pub fn truncated_loss(graph: &PoseGraph, poses: &[RigidTransform], gamma: f64) -> f64 {
    graph
        .edges
        .iter()
        .filter(|e| !e.correspondences.is_empty())
        .map(|e| ComplexField::sqrt(squared_rmse(e, &poses[e.i], &poses[e.j])).min(gamma))
        .sum()
}

/// `Σ ε_e²` over the edges with `ε_e < γ`.
pub fn smooth_objective(graph: &PoseGraph, poses: &[RigidTransform], gamma: f64) -> f64 {
    graph
        .edges
        .iter()
        .filter(|e| !e.correspondences.is_empty())
        .map(|e| squared_rmse(e, &poses[e.i], &poses[e.j]))
        .filter(|s| ComplexField::sqrt(*s) < gamma)
        .sum()
}

/// Parameter slot of each vertex; the anchor has none.
fn slots(graph: &PoseGraph) -> (Vec<Option<usize>>, usize) {
    let anchor = graph.anchor();
    let mut slot = vec![None; graph.len()];
    let mut k = 0;
    for (v, s) in slot.iter_mut().enumerate() {
        if v != anchor {
            *s = Some(k);
            k += 1;
        }
    }
    (slot, 6 * k)
}

/// Gradient `g` and Gauss-Newton matrix `H` of [`smooth_objective`] with
/// respect to the stacked 6-vectors of the non-anchor poses.
pub fn smooth_gradient_and_hessian(
    graph: &PoseGraph,
    poses: &[RigidTransform],
    gamma: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (slot, d) = slots(graph);
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for e in &graph.edges {
        let c = &e.correspondences.pairs;
        if c.is_empty() {
            continue;
        }
        let (pi, pj) = (&poses[e.i], &poses[e.j]);
        if ComplexField::sqrt(squared_rmse(e, pi, pj)) >= gamma {
            continue;
        }
        let scale = 1.0 / c.len() as f64;
        let mut ge = SMatrix::<f64, 12, 1>::zeros();
        let mut he = SMatrix::<f64, 12, 12>::zeros();
        for (p, q) in c {
            let (res, jac) = point_jacobian(p, q, pi, pj);
            ge += jac.transpose() * res;
            he += jac.transpose() * jac;
        }
        // d(ε²)/dx = (2/|C|) Jᵀr, Gauss-Newton matrix (2/|C|) JᵀJ.
        ge *= 2.0 * scale;
        he *= 2.0 * scale;
        let blocks = [(slot[e.i], 0usize), (slot[e.j], 6usize)];
        for &(a, oa) in &blocks {
            let Some(a) = a else { continue };
            for x in 0..6 {
                g[6 * a + x] += ge[oa + x];
            }
            for &(b, ob) in &blocks {
                let Some(b) = b else { continue };
                for x in 0..6 {
                    for y in 0..6 {
                        h[(6 * a + x, 6 * b + y)] += he[(oa + x, ob + y)];
                    }
                }
            }
        }
    }
    (g, h)
}

/// Applies the stacked perturbation `delta` to the non-anchor poses.
pub fn retract(
    graph: &PoseGraph,
    poses: &[RigidTransform],
    delta: &DVector<f64>,
) -> Vec<RigidTransform> {
    let (slot, _) = slots(graph);
    poses
        .iter()
        .zip(&slot)
        .map(|(p, s)| match s {
            None => *p,
            Some(k) => {
                let w = Vec3::new(delta[6 * k], delta[6 * k + 1], delta[6 * k + 2]);
                let t = Vec3::new(delta[6 * k + 3], delta[6 * k + 4], delta[6 * k + 5]);
                let rot = Rotation::project(&(AxisAngle(w).exp().matrix() * p.rotation.matrix()));
                RigidTransform::new(rot, p.translation + t)
            }
        })
        .collect()
}

pub fn refine_poses(
    graph: &PoseGraph,
    initial: &[RigidTransform],
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    if !(cfg.gamma.is_finite() && cfg.gamma > 0.0) {
        return Err(Error::invalid("gamma", "must be positive"));
    }
    if !(cfg.parameter_damping >= 0.0 && cfg.step_tolerance > 0.0) {
        return Err(Error::invalid("parameter_damping", "must be non-negative"));
    }
    if initial.len() != graph.len() {
        return Err(Error::LengthMismatch {
            left: initial.len(),
            right: graph.len(),
        });
    }
    graph.require_connected()?;
    let (_, d) = slots(graph);
    let mut poses = initial.to_vec();
    let mut loss = truncated_loss(graph, &poses, cfg.gamma);
    let mut history = vec![loss];
    let mut lambda = cfg.parameter_damping;
    let mut converged = false;
    let mut iterations = 0;
    'outer: for _ in 0..cfg.max_iters {
        iterations += 1;
        let (g, h) = smooth_gradient_and_hessian(graph, &poses, cfg.gamma);
        if g.amax() < 1e-15 {
            converged = true;
            break;
        }
        loop {
            let mut a = h.clone();
            for q in 0..d {
                a[(q, q)] += lambda.max(1e-12) * (1.0 + h[(q, q)]);
            }
            let Some(chol) = a.cholesky() else {
                lambda = (lambda * 10.0).max(1e-9);
                continue;
            };
            let step = chol.solve(&(-&g));
            let candidate = retract(graph, &poses, &step);
            let new_loss = truncated_loss(graph, &candidate, cfg.gamma);
            if new_loss <= loss {
                poses = candidate;
                loss = new_loss;
                history.push(loss);
                lambda *= 0.5;
                if step.norm() < cfg.step_tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-9);
            if lambda > 1e12 {
                converged = true;
                break 'outer;
            }
        }
    }
    Ok(RefineResult {
        poses,
        converged,
        iterations,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{relative_from_global, rotation_geodesic_angle};
    use crate::graph::CorrespondenceSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::vec::Vec;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(AxisAngle(rand_vec(rng, 1.5)).exp(), rand_vec(rng, 2.0))
    }

    /// Graph whose edges carry exact correspondences of shared world points.
    fn scene(n: usize, per_edge: usize, seed: u64) -> (PoseGraph, Vec<RigidTransform>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<RigidTransform> = (0..n).map(|_| random_pose(&mut rng)).collect();
        truth[0] = RigidTransform::identity();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n.min(i + 4) {
                let pairs = (0..per_edge)
                    .map(|_| {
                        let w = rand_vec(&mut rng, 3.0);
                        (
                            truth[i].rotation.apply(&(w - truth[i].translation)),
                            truth[j].rotation.apply(&(w - truth[j].translation)),
                        )
                    })
                    .collect();
                edges.push(Edge {
                    i,
                    j,
                    relative: relative_from_global(&truth[i], &truth[j]),
                    correspondences: CorrespondenceSet::new(pairs),
                    inlier_count: per_edge,
                    weight: 1.0,
                    overlap_score: 1.0,
                });
            }
        }
        let vertices = truth
            .iter()
            .enumerate()
            .map(|(id, p)| crate::graph::Vertex {
                id,
                pose: *p,
                fixed: id == 0,
            })
            .collect();
        (PoseGraph { vertices, edges }, truth)
    }

    fn perturb(
        poses: &[RigidTransform],
        rng: &mut ChaCha8Rng,
        angle: f64,
        dist: f64,
    ) -> Vec<RigidTransform> {
        poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if k == 0 {
                    return *p;
                }
                let w = rand_vec(rng, 1.0).normalize() * angle;
                let t = rand_vec(rng, 1.0).normalize() * dist;
                RigidTransform::new(AxisAngle(w).exp() * p.rotation, p.translation + t)
            })
            .collect()
    }

    #[test]
    fn residual_examples() {
        let (g, truth) = scene(3, 20, 1);
        let e = &g.edges[0];
        assert!(edge_residual(e, &truth[0], &truth[1]).unwrap() < 1e-9);

        let pairs = vec![(Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 2.0, 3.0)); 4];
        let edge = Edge {
            i: 0,
            j: 1,
            relative: RigidTransform::identity(),
            correspondences: CorrespondenceSet::new(pairs),
            inlier_count: 4,
            weight: 1.0,
            overlap_score: 1.0,
        };
        let id = RigidTransform::identity();
        let moved = RigidTransform::new(Rotation::identity(), Vec3::new(0.3, 0.0, 0.0));
        assert!((edge_residual(&edge, &id, &moved).unwrap() - 0.3).abs() < 1e-12);

        let empty = Edge {
            correspondences: CorrespondenceSet::default(),
            ..edge
        };
        assert!(matches!(
            edge_residual(&empty, &id, &id),
            Err(Error::EmptyCorrespondences(0, 1))
        ));
    }

    #[test]
    fn residual_matches_duplicate_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, _) = scene(2, 30, 2);
        for _ in 0..20 {
            let pi = random_pose(&mut rng);
            let pj = random_pose(&mut rng);
            // World-frame route: lift p to the world with pose i, project with pose j.
            let e = &g.edges[0];
            let mut sum = 0.0;
            for (p, q) in &e.correspondences.pairs {
                let world = pi.rotation.matrix().transpose() * p + pi.translation;
                let in_j = pj.rotation.matrix() * (world - pj.translation);
                sum += (in_j - q).norm_squared();
            }
            let oracle = (sum / e.correspondences.len() as f64).sqrt();
            assert!((edge_residual(e, &pi, &pj).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, _) = scene(2, 10, 3);
        let e = &g.edges[0];
        for _ in 0..20 {
            let pi = random_pose(&mut rng);
            let pj = random_pose(&mut rng);
            let (_, jac) = edge_jacobian(e, &pi, &pj);
            let h = 1e-6;
            for col in 0..12 {
                let bump = |s: f64| {
                    let mut d = [0.0; 12];
                    d[col] = s * h;
                    let ri = AxisAngle(Vec3::new(d[0], d[1], d[2])).exp() * pi.rotation;
                    let rj = AxisAngle(Vec3::new(d[6], d[7], d[8])).exp() * pj.rotation;
                    let a = RigidTransform::new(ri, pi.translation + Vec3::new(d[3], d[4], d[5]));
                    let b = RigidTransform::new(rj, pj.translation + Vec3::new(d[9], d[10], d[11]));
                    edge_jacobian(e, &a, &b).0
                };
                let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                for row in 0..fd.len() {
                    let err = (fd[row] - jac[(row, col)]).abs() / jac[(row, col)].abs().max(1.0);
                    assert!(err < 1e-4, "{err}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let (g, truth) = scene(4, 15, 10 + seed);
            let poses = perturb(&truth, &mut rng, 0.02, 0.02);
            let gamma = 10.0;
            let (grad, _) = smooth_gradient_and_hessian(&g, &poses, gamma);
            let h = 1e-6;
            for k in 0..grad.len() {
                let mut d = DVector::zeros(grad.len());
                d[k] = h;
                let plus = smooth_objective(&g, &retract(&g, &poses, &d), gamma);
                let minus = smooth_objective(&g, &retract(&g, &poses, &(-d)), gamma);
                let fd = (plus - minus) / (2.0 * h);
                let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-3);
                assert!(err < 1e-4, "{k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (g, truth) = scene(6, 20, 5);
        let r = refine_poses(&g, &truth, &RefineConfig::default()).unwrap();
        for (a, b) in r.poses.iter().zip(&truth) {
            assert!(rotation_geodesic_angle(&a.rotation, &b.rotation) < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn recovers_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..20 {
            let (g, truth) = scene(8, 30, 100 + seed);
            let start = perturb(&truth, &mut rng, 1f64.to_radians(), 0.02);
            let r = refine_poses(&g, &start, &RefineConfig::default()).unwrap();
            for (a, b) in r.poses.iter().zip(&truth) {
                assert!(rotation_geodesic_angle(&a.rotation, &b.rotation) < 1e-4);
                assert!((a.translation - b.translation).norm() < 1e-4);
            }
            for w in r.loss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn outlier_edge_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, truth) = scene(6, 20, 7);
        let mut bad = g.clone();
        let k = bad.edges.iter().position(|e| e.i == 1 && e.j == 3).unwrap();
        for (_, q) in bad.edges[k].correspondences.pairs.iter_mut() {
            *q = rand_vec(&mut rng, 5.0);
        }
        let mut dropped = g.clone();
        dropped.edges.remove(k);
        let start = perturb(&truth, &mut rng, 0.5f64.to_radians(), 0.01);
        let cfg = RefineConfig::default();
        assert!(edge_residual(&bad.edges[k], &start[1], &start[3]).unwrap() > 10.0 * cfg.gamma);
        let a = refine_poses(&bad, &start, &cfg).unwrap();
        let b = refine_poses(&dropped, &start, &cfg).unwrap();
        for (x, y) in a.poses.iter().zip(&b.poses) {
            assert!(rotation_geodesic_angle(&x.rotation, &y.rotation) < 1e-9);
            assert!((x.translation - y.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn clamp_boundary() {
        let pairs = vec![(Vec3::zeros(), Vec3::zeros()); 3];
        let gamma = 0.1;
        let mut vertices = Vec::new();
        for id in 0..2 {
            vertices.push(crate::graph::Vertex {
                id,
                pose: RigidTransform::identity(),
                fixed: id == 0,
            });
        }
        let g = PoseGraph {
            vertices,
            edges: vec![Edge {
                i: 0,
                j: 1,
                relative: RigidTransform::identity(),
                correspondences: CorrespondenceSet::new(pairs),
                inlier_count: 3,
                weight: 1.0,
                overlap_score: 1.0,
            }],
        };
        for (d, active) in [(gamma - 1e-9, true), (gamma + 1e-9, false)] {
            let poses = [
                RigidTransform::identity(),
                RigidTransform::new(Rotation::identity(), Vec3::new(d, 0.0, 0.0)),
            ];
            let l = truncated_loss(&g, &poses, gamma);
            let (grad, _) = smooth_gradient_and_hessian(&g, &poses, gamma);
            if active {
                assert!((l - d).abs() < 1e-15);
                assert!(grad.amax() > 0.0);
            } else {
                assert_eq!(l, gamma);
                assert_eq!(grad.amax(), 0.0);
            }
        }
    }
}
