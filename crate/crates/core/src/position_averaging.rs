//! Global positions from relative translations with rotations held fixed.
//!
//! Minimizes `s² Σ_e w_e ρ(‖r_e‖²/s²)` with `r_e = R_i (t_j - t_i) - t_ij` and
//! the truncated soft-L1 kernel `ρ(u) = min(2(√(1+u) - 1), ρ(c²/s²))`. The
//! `s²` factor only rescales the objective to squared meters, so the L2 limit
//! `s, c → ∞` is the plain least-squares objective. Levenberg-Marquardt first
//! solves the untruncated (convex) kernel from the origin, then re-solves with
//! the truncation halved at each stage from the largest residual down to `c`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Rotation, Vec3};
use crate::graph::PoseGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionLoss {
    TruncatedSoftL1,
    /// Plain least squares, for comparison runs.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosAvgConfig {
    /// Soft-L1 scale `s`, meters.
    pub loss_scale: f64,
    /// Truncation `c`, meters.
    pub truncation: f64,
    pub max_iters: usize,
    /// Stop when the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    pub use_edge_weights: bool,
    pub loss: PositionLoss,
}

impl Default for PosAvgConfig {
    fn default() -> Self {
        Self::for_eps(0.05)
    }
}

impl PosAvgConfig {
    /// `s = ε`, `c = 3ε`.
    pub fn for_eps(eps: f64) -> Self {
        Self {
            loss_scale: eps,
            truncation: 3.0 * eps,
            max_iters: 100,
            gradient_tolerance: 1e-12,
            use_edge_weights: true,
            loss: PositionLoss::TruncatedSoftL1,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.loss_scale.is_finite() && self.loss_scale > 0.0) {
            return Err(Error::invalid("loss_scale", "must be positive"));
        }
        if !(self.truncation > self.loss_scale) {
            return Err(Error::invalid("truncation", "must exceed loss_scale"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient_tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosAvgResult {
    pub positions: Vec<Vec3>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective at the start and after every accepted step of the final solve.
    pub objective_history: Vec<f64>,
    /// Histories of the warm-start solves: the untruncated kernel, then each
    /// looser truncation level.
    pub warm_start_history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Kernel {
    l2: bool,
    s2: f64,
    /// `u` at which the kernel becomes flat; infinite when untruncated.
    u_cap: f64,
}

impl Kernel {
    fn soft_l1(u: f64) -> f64 {
        2.0 * (ComplexField::sqrt(1.0 + u) - 1.0)
    }

    /// `s² ρ(r²/s²)`.
    fn value(&self, r2: f64) -> f64 {
        if self.l2 {
            return r2;
        }
        let u = r2 / self.s2;
        self.s2 * Self::soft_l1(u.min(self.u_cap))
    }

    /// Derivative of [`Kernel::value`] with respect to `r²`.
    fn slope(&self, r2: f64) -> f64 {
        if self.l2 {
            return 1.0;
        }
        let u = r2 / self.s2;
        if u >= self.u_cap {
            0.0
        } else {
            1.0 / ComplexField::sqrt(1.0 + u)
        }
    }
}

struct Problem {
    n: usize,
    /// Parameter slot of each vertex; `None` for the anchor.
    slot: Vec<Option<usize>>,
    edges: Vec<(usize, usize, Mat3, Vec3, f64)>,
}

impl Problem {
    fn new(graph: &PoseGraph, rotations: &[Rotation], use_weights: bool) -> Self {
        let anchor = graph.anchor();
        let mut slot = vec![None; graph.len()];
        let mut k = 0;
        for (v, s) in slot.iter_mut().enumerate() {
            if v != anchor {
                *s = Some(k);
                k += 1;
            }
        }
        let edges = graph
            .edges
            .iter()
            .map(|e| {
                let w = if use_weights { e.weight } else { 1.0 };
                (
                    e.i,
                    e.j,
                    *rotations[e.i].matrix(),
                    e.relative.translation,
                    w,
                )
            })
            .collect();
        Self {
            n: graph.len(),
            slot,
            edges,
        }
    }

    fn dim(&self) -> usize {
        3 * (self.n - 1)
    }

    fn position(&self, x: &DVector<f64>, v: usize) -> Vec3 {
        match self.slot[v] {
            Some(k) => Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]),
            None => Vec3::zeros(),
        }
    }

    fn residual(&self, x: &DVector<f64>, e: usize) -> Vec3 {
        let (i, j, r, t, _) = &self.edges[e];
        r * (self.position(x, *j) - self.position(x, *i)) - t
    }

    fn objective(&self, x: &DVector<f64>, k: &Kernel) -> f64 {
        (0..self.edges.len())
            .map(|e| self.edges[e].4 * k.value(self.residual(x, e).norm_squared()))
            .sum()
    }

    fn normal_equations(&self, x: &DVector<f64>, k: &Kernel) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        let mut g = DVector::zeros(d);
        for (e, (i, j, r, _, w)) in self.edges.iter().enumerate() {
            let res = self.residual(x, e);
            let scale = 2.0 * w * k.slope(res.norm_squared());
            if scale == 0.0 {
                continue;
            }
            // ∂r/∂t_j = R_i, ∂r/∂t_i = -R_i, so JᵀJ blocks are ±I.
            let blocks = [(self.slot[*j], 1.0), (self.slot[*i], -1.0)];
            for &(a, sa) in &blocks {
                let Some(a) = a else { continue };
                let ga = r.transpose() * res * (sa * scale);
                for q in 0..3 {
                    g[3 * a + q] += ga[q];
                }
                for &(b, sb) in &blocks {
                    let Some(b) = b else { continue };
                    for q in 0..3 {
                        h[(3 * a + q, 3 * b + q)] += sa * sb * scale;
                    }
                }
            }
        }
        (h, g)
    }
}

struct LmOutcome {
    x: DVector<f64>,
    converged: bool,
    iterations: usize,
    history: Vec<f64>,
}

fn levenberg_marquardt(
    p: &Problem,
    x0: DVector<f64>,
    k: &Kernel,
    max_iters: usize,
    grad_tol: f64,
) -> LmOutcome {
    let d = p.dim();
    let mut x = x0;
    let mut f = p.objective(&x, k);
    let mut history = vec![f];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    'outer: for _ in 0..max_iters {
        iterations += 1;
        let (h, g) = p.normal_equations(&x, k);
        if g.amax() < grad_tol {
            converged = true;
            break;
        }
        loop {
            let mut a = h.clone();
            for q in 0..d {
                a[(q, q)] += lambda;
            }
            let step = match a.cholesky() {
                Some(c) => c.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let x_new = &x + &step;
            let f_new = p.objective(&x_new, k);
            if f_new <= f {
                let small = step.norm() <= 1e-14 * (1.0 + x.norm());
                x = x_new;
                f = f_new;
                history.push(f);
                lambda = (lambda * 0.5).max(1e-15);
                if small {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent at machine precision: a stationary point.
                converged = true;
                break 'outer;
            }
        }
    }
    LmOutcome {
        x,
        converged,
        iterations,
        history,
    }
}

pub fn average_positions(
    graph: &PoseGraph,
    rotations: &[Rotation],
    cfg: &PosAvgConfig,
) -> Result<PosAvgResult> {
    cfg.check()?;
    if rotations.len() != graph.len() {
        return Err(Error::LengthMismatch {
            left: rotations.len(),
            right: graph.len(),
        });
    }
    graph.require_connected()?;
    let p = Problem::new(graph, rotations, cfg.use_edge_weights);
    let s2 = cfg.loss_scale * cfg.loss_scale;
    let x0 = DVector::zeros(p.dim());
    let (x, warm, out) = match cfg.loss {
        PositionLoss::L2 => {
            let k = Kernel {
                l2: true,
                s2,
                u_cap: f64::INFINITY,
            };
            let out = levenberg_marquardt(&p, x0, &k, cfg.max_iters, cfg.gradient_tolerance);
            (out.x.clone(), Vec::new(), out)
        }
        PositionLoss::TruncatedSoftL1 => {
            let convex = Kernel {
                l2: false,
                s2,
                u_cap: f64::INFINITY,
            };
            let mut stage =
                levenberg_marquardt(&p, x0, &convex, 10 * cfg.max_iters, cfg.gradient_tolerance);
            let mut warm = vec![core::mem::take(&mut stage.history)];
            // Tighten the truncation from the largest residual down to c,
            // halving per stage.
            let r_max = (0..p.edges.len())
                .map(|e| p.residual(&stage.x, e).norm())
                .fold(0.0, f64::max);
            let mut levels = 0;
            while levels < 16 && cfg.truncation * f64::from(1u32 << levels) < r_max {
                levels += 1;
            }
            for level in (0..=levels).rev() {
                let c = cfg.truncation * f64::from(1u32 << level);
                let k = Kernel {
                    l2: false,
                    s2,
                    u_cap: c * c / s2,
                };
                let next =
                    levenberg_marquardt(&p, stage.x, &k, cfg.max_iters, cfg.gradient_tolerance);
                stage = next;
                if level > 0 {
                    warm.push(core::mem::take(&mut stage.history));
                }
            }
            (stage.x.clone(), warm, stage)
        }
    };
    let positions = (0..graph.len()).map(|v| p.position(&x, v)).collect();
    Ok(PosAvgResult {
        positions,
        converged: out.converged,
        iterations: out.iterations,
        objective_history: out.history,
        warm_start_history: warm,
    })
}

/// The objective minimized by [`average_positions`] (final stage) at `positions`.
pub fn position_objective(
    graph: &PoseGraph,
    rotations: &[Rotation],
    positions: &[Vec3],
    cfg: &PosAvgConfig,
) -> f64 {
    let s2 = cfg.loss_scale * cfg.loss_scale;
    let k = Kernel {
        l2: cfg.loss == PositionLoss::L2,
        s2,
        u_cap: cfg.truncation * cfg.truncation / s2,
    };
    graph
        .edges
        .iter()
        .map(|e| {
            let w = if cfg.use_edge_weights { e.weight } else { 1.0 };
            let r =
                rotations[e.i].apply(&(positions[e.j] - positions[e.i])) - e.relative.translation;
            w * k.value(r.norm_squared())
        })
        .sum()
}

/// Stacked edge residuals and their Jacobian with respect to the non-anchor
/// positions (vertex order, anchor column block removed).
pub fn residuals_and_jacobian(
    graph: &PoseGraph,
    rotations: &[Rotation],
    positions: &[Vec3],
) -> (DVector<f64>, DMatrix<f64>) {
    let p = Problem::new(graph, rotations, false);
    let mut x = DVector::zeros(p.dim());
    for v in 0..graph.len() {
        if let Some(k) = p.slot[v] {
            for q in 0..3 {
                x[3 * k + q] = positions[v][q];
            }
        }
    }
    let m = graph.edges.len();
    let mut r = DVector::zeros(3 * m);
    let mut jac = DMatrix::zeros(3 * m, p.dim());
    for (e, (i, j, rot, _, _)) in p.edges.iter().enumerate() {
        let res = p.residual(&x, e);
        for q in 0..3 {
            r[3 * e + q] = res[q];
        }
        for (v, sign) in [(*j, 1.0), (*i, -1.0)] {
            if let Some(k) = p.slot[v] {
                for a in 0..3 {
                    for b in 0..3 {
                        jac[(3 * e + a, 3 * k + b)] = sign * rot[(a, b)];
                    }
                }
            }
        }
    }
    (r, jac)
}

/// Applies the rotation gauge `g` (from
/// [`crate::rotation_averaging::rotation_gauge`]) and the best translation,
/// returning aligned positions and their errors in meters.
pub fn align_positions_to_truth(
    estimated: &[Vec3],
    truth: &[Vec3],
    gauge: &Rotation,
) -> Result<(Vec<Vec3>, Vec<f64>)> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimated.len(),
            right: truth.len(),
        });
    }
    if estimated.is_empty() {
        return Err(Error::EmptyInput);
    }
    let gt = gauge.transpose();
    let rotated: Vec<Vec3> = estimated.iter().map(|t| gt.apply(t)).collect();
    let offset = rotated
        .iter()
        .zip(truth)
        .fold(Vec3::zeros(), |acc, (e, t)| acc + (t - e))
        / estimated.len() as f64;
    let aligned: Vec<Vec3> = rotated.iter().map(|e| e + offset).collect();
    let errors = aligned
        .iter()
        .zip(truth)
        .map(|(a, t)| (a - t).norm())
        .collect();
    Ok((aligned, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{relative_from_global, AxisAngle, RigidTransform};
    use crate::graph::{build_graph, CorrespondenceSet, PairwiseResult};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::vec::Vec;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    /// Graph with edges `|i-j| <= 4`, exact rotations, Gaussian translation
    /// noise and a fraction of non-consecutive edges with random translations.
    fn scene(n: usize, sigma: f64, outliers: f64, seed: u64) -> (PoseGraph, Vec<RigidTransform>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<RigidTransform> = (0..n)
            .map(|k| {
                if k == 0 {
                    RigidTransform::identity()
                } else {
                    RigidTransform::new(
                        AxisAngle(rand_vec(&mut rng, 1.5)).exp(),
                        rand_vec(&mut rng, 3.0),
                    )
                }
            })
            .collect();
        let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut results = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n.min(i + 5) {
                let mut rel = relative_from_global(&truth[i], &truth[j]);
                if j - i > 1 && rng.random::<f64>() < outliers {
                    rel.translation = rand_vec(&mut rng, 3.0);
                } else if sigma > 0.0 {
                    rel.translation += Vec3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    );
                }
                results.push(PairwiseResult {
                    i,
                    j,
                    relative: rel,
                    correspondences: CorrespondenceSet::new(vec![
                        (Vec3::zeros(), Vec3::zeros());
                        10
                    ]),
                    inlier_count: 10,
                });
            }
        }
        (build_graph(results).unwrap(), truth)
    }

    fn rotations(truth: &[RigidTransform]) -> Vec<Rotation> {
        truth.iter().map(|p| p.rotation).collect()
    }

    fn mean_te(est: &[Vec3], truth: &[RigidTransform]) -> f64 {
        let t: Vec<Vec3> = truth.iter().map(|p| p.translation).collect();
        let (_, errs) = align_positions_to_truth(est, &t, &Rotation::identity()).unwrap();
        errs.iter().sum::<f64>() / errs.len() as f64
    }

    #[test]
    fn noiseless_recovery() {
        let (g, truth) = scene(12, 0.0, 0.0, 1);
        let r = average_positions(&g, &rotations(&truth), &PosAvgConfig::default()).unwrap();
        for (p, t) in r.positions.iter().zip(&truth) {
            assert!((p - t.translation).norm() < 1e-8);
        }
        assert!(r.converged);
    }

    #[test]
    fn noise_and_outliers() {
        let cfg = PosAvgConfig::default();
        let l2 = PosAvgConfig {
            loss: PositionLoss::L2,
            ..cfg
        };
        let (mut clean, mut dirty, mut plain) = (0.0, 0.0, 0.0);
        for seed in 0..20 {
            let (g, truth) = scene(20, 0.01, 0.0, 10 + seed);
            let r = average_positions(&g, &rotations(&truth), &cfg).unwrap();
            clean += mean_te(&r.positions, &truth) / 20.0;

            let (g, truth) = scene(20, 0.01, 0.25, 10 + seed);
            let r = average_positions(&g, &rotations(&truth), &cfg).unwrap();
            dirty += mean_te(&r.positions, &truth) / 20.0;
            let r = average_positions(&g, &rotations(&truth), &l2).unwrap();
            plain += mean_te(&r.positions, &truth) / 20.0;
        }
        assert!(clean <= 0.01, "{clean}");
        assert!(dirty <= 2.0 * clean, "{dirty} vs {clean}");
        assert!(plain > dirty, "{plain} vs {dirty}");
    }

    /// Independent normal-equation solve of the anchored L2 problem.
    fn linear_oracle(g: &PoseGraph, rots: &[Rotation]) -> Vec<Vec3> {
        let n = g.len();
        let d = 3 * (n - 1);
        let mut a = DMatrix::<f64>::zeros(3 * g.edges.len(), d);
        let mut b = DVector::<f64>::zeros(3 * g.edges.len());
        for (k, e) in g.edges.iter().enumerate() {
            let r = rots[e.i].matrix();
            for row in 0..3 {
                b[3 * k + row] = e.relative.translation[row] * e.weight.sqrt();
                for col in 0..3 {
                    if e.j > 0 {
                        a[(3 * k + row, 3 * (e.j - 1) + col)] += r[(row, col)] * e.weight.sqrt();
                    }
                    if e.i > 0 {
                        a[(3 * k + row, 3 * (e.i - 1) + col)] -= r[(row, col)] * e.weight.sqrt();
                    }
                }
            }
        }
        let x = (a.transpose() * &a)
            .lu()
            .solve(&(a.transpose() * b))
            .unwrap();
        let mut out = vec![Vec3::zeros()];
        for v in 1..n {
            out.push(Vec3::new(x[3 * v - 3], x[3 * v - 2], x[3 * v - 1]));
        }
        out
    }

    #[test]
    fn large_scale_limit_matches_linear_solve() {
        for seed in 0..10 {
            let (mut g, truth) = scene(10, 0.05, 0.2, 50 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for e in &mut g.edges {
                e.weight = rng.random_range(0.1..1.0);
            }
            let cfg = PosAvgConfig {
                loss_scale: 1e8,
                truncation: 1e9,
                ..PosAvgConfig::default()
            };
            let r = average_positions(&g, &rotations(&truth), &cfg).unwrap();
            let oracle = linear_oracle(&g, &rotations(&truth));
            for (a, b) in r.positions.iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-8, "{}", (a - b).norm());
            }
        }
    }

    #[test]
    fn objective_is_monotone() {
        for seed in 0..50 {
            let (g, truth) = scene(12, 0.02, 0.3, 100 + seed);
            let r = average_positions(&g, &rotations(&truth), &PosAvgConfig::default()).unwrap();
            for h in r.warm_start_history.iter().chain([&r.objective_history]) {
                for w in h.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12);
                }
            }
            let last = *r.objective_history.last().unwrap();
            let f = position_objective(
                &g,
                &rotations(&truth),
                &r.positions,
                &PosAvgConfig::default(),
            );
            assert!((f - last).abs() <= 1e-12 * (1.0 + f));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let (g, truth) = scene(6, 0.01, 0.2, 200 + seed);
            let rots = rotations(&truth);
            let pos: Vec<Vec3> = (0..g.len())
                .map(|v| {
                    if v == 0 {
                        Vec3::zeros()
                    } else {
                        rand_vec(&mut rng, 2.0)
                    }
                })
                .collect();
            let (_, jac) = residuals_and_jacobian(&g, &rots, &pos);
            let h = 1e-6;
            for v in 1..g.len() {
                for q in 0..3 {
                    let mut plus = pos.clone();
                    let mut minus = pos.clone();
                    plus[v][q] += h;
                    minus[v][q] -= h;
                    let fd = (residuals_and_jacobian(&g, &rots, &plus).0
                        - residuals_and_jacobian(&g, &rots, &minus).0)
                        / (2.0 * h);
                    let col = jac.column(3 * (v - 1) + q);
                    for row in 0..fd.len() {
                        let err = (fd[row] - col[row]).abs() / col[row].abs().max(1.0);
                        assert!(err < 1e-5, "{err}");
                    }
                }
            }
        }
    }

    #[test]
    fn anchor_relabeling_invariance() {
        for seed in 0..5 {
            let (g, truth) = scene(10, 0.01, 0.0, 300 + seed);
            let rots = rotations(&truth);
            let a = average_positions(&g, &rots, &PosAvgConfig::default()).unwrap();
            let mut h = g.clone();
            h.vertices[0].fixed = false;
            h.vertices[4].fixed = true;
            let b = average_positions(&h, &rots, &PosAvgConfig::default()).unwrap();
            let (aligned, _) =
                align_positions_to_truth(&b.positions, &a.positions, &Rotation::identity())
                    .unwrap();
            for (x, y) in aligned.iter().zip(&a.positions) {
                assert!((x - y).norm() < 1e-7);
            }
        }
    }

    #[test]
    fn alignment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<Vec3> = (0..5).map(|_| rand_vec(&mut rng, 3.0)).collect();
        let (_, e) = align_positions_to_truth(&truth, &truth, &Rotation::identity()).unwrap();
        assert!(e.iter().all(|x| *x == 0.0));
        let shifted: Vec<Vec3> = truth
            .iter()
            .map(|t| t + Vec3::new(1.0, -2.0, 0.5))
            .collect();
        let (_, e) = align_positions_to_truth(&shifted, &truth, &Rotation::identity()).unwrap();
        assert!(e.iter().all(|x| *x < 1e-12));
        // Gauge (A, b): positions map to A t + b; the rotation gauge is A.
        let a = AxisAngle(rand_vec(&mut rng, 1.5)).exp();
        let b = rand_vec(&mut rng, 5.0);
        let moved: Vec<Vec3> = truth.iter().map(|t| a.apply(t) + b).collect();
        let (_, e) = align_positions_to_truth(&moved, &truth, &a).unwrap();
        assert!(e.iter().all(|x| *x < 1e-9));
        assert!(align_positions_to_truth(&moved[..2], &truth, &a).is_err());
    }

    #[test]
    fn truncated_edges_have_flat_loss() {
        let k = Kernel {
            l2: false,
            s2: 1.0,
            u_cap: 9.0,
        };
        assert_eq!(k.slope(9.0 + 1e-9), 0.0);
        assert!(k.slope(9.0 - 1e-9) > 0.0);
        assert_eq!(k.value(100.0), k.value(9.0));
    }
}
