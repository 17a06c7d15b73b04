//! Rigid-body primitives shared by every solver.
//!
//! Pose conventions used throughout the crate:
//!
//! * A global pose `(R_i, t_i)` stores the world-to-cloud rotation `R_i` and the
//!   position `t_i` of the cloud origin in the world, so `x_i = R_i (w - t_i)`.
//! * A relative transform on edge `(i, j)` stores `R_ij = R_j R_i^T` and
//!   `t_ij = R_i (t_j - t_i)`, the origin of cloud `j` seen from frame `i`.
//!   It maps frame-`i` points into frame `j` as `x_j = R_ij (x_i - t_ij)`;
//!   [`relative_point_map`] returns that map as an ordinary `x -> R x + t`
//!   transform.

use core::ops::Mul;

use nalgebra::{ComplexField, Matrix3, RealField, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

/// Tangent vector of SO(3): rotation axis scaled by the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vec3);

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_antisym(m: &Mat3) -> Vec3 {
    Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Accepts `m` only if it is orthonormal with unit determinant (tolerance 1e-9).
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidRotation);
        }
        let gram = m.transpose() * m - Mat3::identity();
        if gram.amax() > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRotation);
        }
        Ok(Rotation(m))
    }

    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Nearest rotation in the Frobenius sense (polar projection).
    pub fn project(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let d = (u * v_t).determinant().signum();
        Rotation(u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t)
    }

    pub fn about_x(angle: f64) -> Self {
        AxisAngle(Vec3::new(angle, 0.0, 0.0)).exp()
    }

    pub fn about_y(angle: f64) -> Self {
        AxisAngle(Vec3::new(0.0, angle, 0.0)).exp()
    }

    pub fn about_z(angle: f64) -> Self {
        AxisAngle(Vec3::new(0.0, 0.0, angle)).exp()
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Logarithm map, robust near both zero and pi.
    pub fn log(&self) -> AxisAngle {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let v = vee_antisym(m);
        let sin = v.norm();
        let theta = RealField::atan2(sin, cos);
        if cos > -0.9 {
            let scale = if theta < 1e-4 {
                let t2 = theta * theta;
                1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
            } else {
                theta / sin
            };
            return AxisAngle(v * scale);
        }
        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part (1 - cos) a a^T.
        let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos;
        let k = (0..3)
            .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vec3 = sym.column(k).into_owned();
        let n = axis.norm();
        if n == 0.0 {
            return AxisAngle(Vec3::zeros());
        }
        axis /= n;
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        AxisAngle(axis * theta)
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        RealField::atan2(vee_antisym(m).norm(), cos)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let gram = self.0.transpose() * self.0 - Mat3::identity();
        gram.amax() <= tol && (self.0.determinant() - 1.0).abs() <= tol
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl AxisAngle {
    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Exponential map (Rodrigues).
    pub fn exp(&self) -> Rotation {
        let w = &self.0;
        let t2 = w.norm_squared();
        let (a, b) = if t2 < 1e-8 {
            (
                1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            )
        } else {
            let t = t2.sqrt();
            (t.sin() / t, (1.0 - t.cos()) / t2)
        };
        let k = hat(w);
        Rotation(Mat3::identity() + k * a + k * k * b)
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -rt.apply(&self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        compose(self, other)
    }
}

/// `(a ∘ b)(x) = a.R (b.R x + b.t) + a.t`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        a.rotation * b.rotation,
        a.rotation.apply(&b.translation) + a.translation,
    )
}

/// Relative transform of edge `(i, j)`: `(R_j R_i^T, R_i (t_j - t_i))`.
pub fn relative_from_global(pose_i: &RigidTransform, pose_j: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        pose_j.rotation * pose_i.rotation.transpose(),
        pose_i
            .rotation
            .apply(&(pose_j.translation - pose_i.translation)),
    )
}

/// Global pose of `j` from the pose of `i` and the relative transform of `(i, j)`.
pub fn chain_forward(pose_i: &RigidTransform, rel: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        rel.rotation * pose_i.rotation,
        pose_i.translation + pose_i.rotation.transpose().apply(&rel.translation),
    )
}

/// Global pose of `i` from the pose of `j` and the relative transform of `(i, j)`.
pub fn chain_backward(pose_j: &RigidTransform, rel: &RigidTransform) -> RigidTransform {
    let rot_i = rel.rotation.transpose() * pose_j.rotation;
    RigidTransform::new(
        rot_i,
        pose_j.translation - rot_i.transpose().apply(&rel.translation),
    )
}

/// The frame-`i` to frame-`j` point map `x -> R_ij x - R_ij t_ij` of a relative transform.
pub fn relative_point_map(rel: &RigidTransform) -> RigidTransform {
    RigidTransform::new(rel.rotation, -rel.rotation.apply(&rel.translation))
}

/// Inverse of [`relative_point_map`].
pub fn relative_from_point_map(map: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        map.rotation,
        -map.rotation.transpose().apply(&map.translation),
    )
}

/// Maps cloud coordinates of a global pose into the world frame.
pub fn cloud_to_world(pose: &RigidTransform) -> RigidTransform {
    RigidTransform::new(pose.rotation.transpose(), pose.translation)
}

/// Geodesic distance on SO(3), in `[0, pi]`.
///
/// Equal to `acos((trace(a b^T) - 1) / 2)`; evaluated through `atan2` so small
/// angles keep full precision.
pub fn rotation_geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    Rotation(a.0 * b.0.transpose()).angle()
}

/// Weighted Kabsch/Umeyama fit minimizing `Σ w_k ‖R src_k + t - dst_k‖²`.
pub fn fit_rigid_svd(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: dst.len(),
        });
    }
    if src.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: src.len(),
            right: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights", "must be finite and non-negative"));
    }
    let active = weights.iter().filter(|w| **w > 0.0).count();
    if active < 3 {
        return Err(Error::TooFewCorrespondences {
            needed: 3,
            got: active,
        });
    }
    let total: f64 = weights.iter().sum();
    let mut c_src = Vec3::zeros();
    let mut c_dst = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        c_src += s * *w;
        c_dst += d * *w;
    }
    c_src /= total;
    c_dst /= total;
    let mut cov = Mat3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        cov += (s - c_src) * (d - c_dst).transpose() * *w;
    }
    let svd = cov.svd(true, true);
    let mut sv = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > f64::MIN_POSITIVE) || sv[1] <= 1e-9 * sv[0] {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident",
        ));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let v = v_t.transpose();
    // Order-independent reflection fix: flip along the singular direction with
    // the smallest singular value.
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap_or(2);
    let mut diag = Vec3::new(1.0, 1.0, 1.0);
    if (v * u.transpose()).determinant() < 0.0 {
        diag[smallest] = -1.0;
    }
    let r = v * Mat3::from_diagonal(&diag) * u.transpose();
    let rotation = Rotation(r);
    Ok(RigidTransform::new(
        rotation,
        c_dst - rotation.apply(&c_src),
    ))
}

pub fn centroid(points: &[Vec3]) -> Option<Vec3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    Some(sum / points.len() as f64)
}

pub fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use core::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        AxisAngle(axis * rng.random_range(0.0..PI)).exp()
    }

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn compose_examples() {
        let id = RigidTransform::identity();
        assert_eq!(compose(&id, &id), id);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 3.0));
        let r = compose(&t, &t.inverse());
        assert!((r.rotation.matrix() - Mat3::identity()).amax() < 1e-9);
        assert!(r.translation.amax() < 1e-9);

        // Rz(90°) sends x to y; adding [1,0,0] gives [1,1,0].
        let t = RigidTransform::new(Rotation::about_z(PI / 2.0), Vec3::new(1.0, 0.0, 0.0));
        let p = t.apply(&Vec3::new(1.0, 0.0, 0.0));
        assert!((p - Vec3::new(1.0, 1.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn relative_from_global_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 2.0));
        let r = relative_from_global(&p, &p);
        assert!((r.rotation.matrix() - Mat3::identity()).amax() < 1e-12);
        assert!(r.translation.amax() < 1e-12);

        let pj = RigidTransform::new(Rotation::identity(), Vec3::new(1.0, 2.0, 3.0));
        let r = relative_from_global(&RigidTransform::identity(), &pj);
        assert_eq!(r.translation, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(*r.rotation.matrix(), Mat3::identity());
    }

    #[test]
    fn relative_transform_maps_points() {
        // Oracle: a world point observed from both clouds must satisfy
        // x_j = R_ij (x_i - t_ij).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pi = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 5.0));
            let pj = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 5.0));
            let rel = relative_from_global(&pi, &pj);
            let map = relative_point_map(&rel);
            for _ in 0..10 {
                let w = random_vec(&mut rng, 10.0);
                let xi = pi.rotation.apply(&(w - pi.translation));
                let xj = pj.rotation.apply(&(w - pj.translation));
                let lhs = rel.rotation.apply(&(xi - rel.translation));
                assert!((lhs - xj).amax() < 1e-9);
                assert!((map.apply(&xi) - xj).amax() < 1e-9);
            }
            let back = chain_forward(&pi, &rel);
            assert!((back.rotation.matrix() - pj.rotation.matrix()).amax() < 1e-9);
            assert!((back.translation - pj.translation).amax() < 1e-9);
            let front = chain_backward(&pj, &rel);
            assert!((front.rotation.matrix() - pi.rotation.matrix()).amax() < 1e-9);
            assert!((front.translation - pi.translation).amax() < 1e-9);
            let rt = relative_from_point_map(&map);
            assert!((rt.translation - rel.translation).amax() < 1e-9);
        }
    }

    #[test]
    fn geodesic_angle_examples() {
        let id = Rotation::identity();
        assert_eq!(rotation_geodesic_angle(&id, &id), 0.0);
        let flip = Rotation::about_x(PI);
        assert!((rotation_geodesic_angle(&id, &flip) - PI).abs() < 1e-12);
        let a = Rotation::about_z(rad(10.0));
        let b = Rotation::about_z(rad(25.0));
        assert!((rotation_geodesic_angle(&a, &b) - rad(15.0)).abs() < 1e-9);
    }

    #[test]
    fn geodesic_angle_symmetry_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            let ab = rotation_geodesic_angle(&a, &b);
            assert!((ab - rotation_geodesic_angle(&b, &a)).abs() < 1e-12);
            assert!((0.0..=PI).contains(&ab));
            let ac = rotation_geodesic_angle(&a, &c);
            let cb = rotation_geodesic_angle(&c, &b);
            assert!(ab <= ac + cb + 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut angles: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..PI - 1e-6)).collect();
        angles.extend([0.0, 1e-12, 1e-6, 1e-4, 3.0, PI - 1e-3, PI - 1e-5, PI - 1e-6]);
        for theta in angles {
            let axis = random_vec(&mut rng, 1.0).normalize();
            let r = AxisAngle(axis * theta).exp();
            assert!(r.is_valid(1e-9));
            let back = r.log().exp();
            assert!(
                (back.matrix() - r.matrix()).amax() < 1e-8,
                "theta = {theta}"
            );
            assert!((r.log().angle() - theta).abs() < 1e-8);
        }
    }

    #[test]
    fn project_restores_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_rotation(&mut rng);
        let noisy = r.matrix() + Mat3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
        let p = Rotation::project(&noisy);
        assert!(p.is_valid(1e-12));
        assert!(rotation_geodesic_angle(&p, &r) < 1e-2);
        assert!(Rotation::from_matrix(noisy).is_err());
        assert!(Rotation::from_matrix(*r.matrix()).is_ok());
    }

    #[test]
    fn fit_rigid_svd_exact() {
        let src: Vec<Vec3> = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        let w = vec![1.0; src.len()];
        let t = fit_rigid_svd(&src, &src, &w).unwrap();
        assert!((t.rotation.matrix() - Mat3::identity()).amax() < 1e-9);
        assert!(t.translation.amax() < 1e-9);

        let truth = RigidTransform::new(Rotation::about_z(PI / 2.0), Vec3::new(0.0, 0.0, 1.0));
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let t = fit_rigid_svd(&src, &dst, &w).unwrap();
        assert!((t.rotation.matrix() - truth.rotation.matrix()).amax() < 1e-9);
        assert!((t.translation - truth.translation).amax() < 1e-9);
    }

    #[test]
    fn fit_rigid_svd_planar_needs_reflection_fix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let src: Vec<Vec3> = (0..10)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        0.0,
                    )
                })
                .collect();
            let truth = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 1.0));
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
            let t = fit_rigid_svd(&src, &dst, &[1.0; 10]).unwrap();
            assert!((t.rotation.matrix().determinant() - 1.0).abs() < 1e-9);
            assert!(rotation_geodesic_angle(&t.rotation, &truth.rotation) < 1e-9);
        }
    }

    #[test]
    fn fit_rigid_svd_degenerate() {
        let line: Vec<Vec3> = (0..5).map(|k| Vec3::new(k as f64, 0.0, 0.0)).collect();
        let w = vec![1.0; 5];
        assert!(matches!(
            fit_rigid_svd(&line, &line, &w),
            Err(Error::DegenerateGeometry(_))
        ));
        let same = vec![Vec3::new(1.0, 2.0, 3.0); 4];
        assert!(matches!(
            fit_rigid_svd(&same, &same, &[1.0; 4]),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            fit_rigid_svd(&line[..2], &line[..2], &w[..2]),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn fit_rigid_svd_noisy_monte_carlo() {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.01).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let truth = RigidTransform::new(random_rotation(&mut rng), random_vec(&mut rng, 2.0));
            let src: Vec<Vec3> = (0..100).map(|_| random_vec(&mut rng, 1.0)).collect();
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| {
                    truth.apply(p)
                        + Vec3::new(
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                            noise.sample(&mut rng),
                        )
                })
                .collect();
            let t = fit_rigid_svd(&src, &dst, &[1.0; 100]).unwrap();
            let rmse = (src
                .iter()
                .zip(&dst)
                .map(|(s, d)| (t.apply(s) - d).norm_squared())
                .sum::<f64>()
                / 100.0)
                .sqrt();
            assert!(rmse <= 0.02, "rmse {rmse}");
            assert!(deg(rotation_geodesic_angle(&t.rotation, &truth.rotation)) < 1.0);
        }
    }
}
