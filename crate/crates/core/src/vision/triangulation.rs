use nalgebra::{Matrix3, Vector2};

use super::{projection_jacobian, CameraCalibration, FeatureTrack, VisionConfig, VisionError};
use crate::geometry::{Mat3, Vec3};
use crate::state::StateVector;

/// One camera observing a point: `uv = Λ(R·(p − c))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    /// `ᶜ_G R`
    pub rotation: Mat3,
    /// Camera center in `{G}`.
    pub center: Vec3,
    pub uv: Vector2<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub position: Vec3,
    /// Inverse of the weighted Gauss-Newton information at the solution.
    pub covariance: Mat3,
    pub converged: bool,
    /// Largest reprojection error over the views, normalized units.
    pub max_reprojection: f64,
}

fn baseline(views: &[View]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in views.iter().enumerate() {
        for b in &views[i + 1..] {
            best = best.max((a.center - b.center).norm());
        }
    }
    best
}

/// Linear DLT estimate: each view contributes `(u·r₃ − r₁)·(p − c) = 0` and
/// `(v·r₃ − r₂)·(p − c) = 0`.
fn dlt(views: &[View]) -> Option<Vec3> {
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for v in views {
        let r = &v.rotation;
        let w = 1.0 / (v.sigma * v.sigma);
        for (k, m) in [v.uv.x, v.uv.y].into_iter().enumerate() {
            let row = (r.row(2) * m - r.row(k)).transpose();
            a += row * row.transpose() * w;
            b += row * row.dot(&v.center) * w;
        }
    }
    a.cholesky().map(|c| c.solve(&b))
}

fn cost_and_normal(views: &[View], p: &Vec3, z_min: f64) -> Option<(f64, Matrix3<f64>, Vec3, f64)> {
    let mut cost = 0.0;
    let mut info = Matrix3::zeros();
    let mut grad = Vec3::zeros();
    let mut max_err: f64 = 0.0;
    for v in views {
        let pc = v.rotation * (p - v.center);
        if !(pc.z > z_min) {
            return None;
        }
        let e = v.uv - Vector2::new(pc.x / pc.z, pc.y / pc.z);
        let j = projection_jacobian(&pc) * v.rotation;
        let w = 1.0 / (v.sigma * v.sigma);
        cost += e.norm_squared() * w;
        info += j.transpose() * j * w;
        grad += j.transpose() * e * w;
        max_err = max_err.max(e.norm());
    }
    Some((cost, info, grad, max_err))
}

/// Triangulates a point from two or more views: linear DLT followed by
/// Gauss-Newton on the weighted reprojection error.
pub fn triangulate_views(views: &[View], cfg: &VisionConfig) -> Result<Triangulation, VisionError> {
    let b = baseline(views);
    if views.len() < 2 || b < cfg.min_baseline {
        return Err(VisionError::InsufficientBaseline(b));
    }
    let mut p = dlt(views).ok_or(VisionError::DivergedRefinement(f64::NAN))?;
    let (mut cost, mut info, mut grad, mut max_err) = match cost_and_normal(views, &p, cfg.z_min) {
        Some(x) => x,
        None => {
            let depth = views.iter().map(|v| (v.rotation * (p - v.center)).z).fold(f64::INFINITY, f64::min);
            return Err(VisionError::BehindCamera(depth));
        }
    };
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let Some(chol) = info.cholesky() else {
            return Err(VisionError::DivergedRefinement(max_err));
        };
        let mut step = chol.solve(&grad);
        let mut accepted = false;
        for _ in 0..8 {
            let cand = p + step;
            if let Some((c, i, g, m)) = cost_and_normal(views, &cand, cfg.z_min) {
                if c <= cost {
                    (p, cost, info, grad, max_err) = (cand, c, i, g, m);
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || step.norm() <= 1e-12 * (1.0 + p.norm()) {
            converged = true;
            break;
        }
    }
    if !max_err.is_finite() || max_err > cfg.reprojection_gate {
        return Err(VisionError::DivergedRefinement(max_err));
    }
    let covariance = info.try_inverse().ok_or(VisionError::DivergedRefinement(max_err))?;
    Ok(Triangulation { position: p, covariance, converged, max_reprojection: max_err })
}

/// Real-image views of a track whose clones are still in the window.
pub(crate) fn track_views(track: &FeatureTrack, state: &StateVector, calib: &CameraCalibration) -> Vec<View> {
    track
        .measurements
        .iter()
        .filter_map(|m| {
            let c = state.clone_state(m.clone)?;
            let cam = calib.camera_pose(&c.pose);
            Some(View { rotation: cam.rotation_matrix(), center: cam.position, uv: m.uv, sigma: m.sigma })
        })
        .collect()
}

/// Triangulates a track from its real-image measurements.
pub fn triangulate(
    track: &FeatureTrack,
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
) -> Result<Triangulation, VisionError> {
    triangulate_views(&track_views(track, state, calib), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use crate::state::chi2_quantile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn view(center: Vec3, p: &Vec3, sigma: f64) -> View {
        let rotation = Mat3::identity();
        let pc = rotation * (p - center);
        View { rotation, center, uv: Vector2::new(pc.x / pc.z, pc.y / pc.z), sigma }
    }

    #[test]
    fn exact_two_view_recovery() {
        let p = Vec3::new(0.0, 0.0, 5.0);
        let views = [view(Vec3::zeros(), &p, 0.004), view(Vec3::new(0.1, 0.0, 0.0), &p, 0.004)];
        let t = triangulate_views(&views, &VisionConfig::default()).unwrap();
        assert!((t.position - p).norm() < 1e-8);
        assert!(t.converged);
    }

    #[test]
    fn zero_baseline_rejected() {
        let p = Vec3::new(0.0, 0.0, 5.0);
        let views = [view(Vec3::zeros(), &p, 0.004), view(Vec3::zeros(), &p, 0.004)];
        assert!(matches!(triangulate_views(&views, &VisionConfig::default()), Err(VisionError::InsufficientBaseline(_))));
    }

    #[test]
    fn point_behind_cameras_rejected() {
        let views = [
            View { rotation: Mat3::identity(), center: Vec3::zeros(), uv: Vector2::zeros(), sigma: 0.004 },
            View { rotation: Mat3::identity(), center: Vec3::new(0.1, 0.0, 0.0), uv: Vector2::new(0.05, 0.0), sigma: 0.004 },
        ];
        // the rays intersect at z = -2
        assert!(triangulate_views(&views, &VisionConfig::default()).is_err());
    }

    #[test]
    fn noisy_recovery_within_propagated_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let sigma = 0.001;
        let bound = chi2_quantile(0.9973, 3);
        let cfg = VisionConfig { reprojection_gate: 1.0, ..Default::default() };
        let trials = 1000;
        let mut inside = 0;
        for _ in 0..trials {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let views: Vec<View> = (0..4)
                .map(|_| {
                    let center = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));
                    let rotation = UnitQuaternion::from_rotation_vector(&Vec3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    ))
                    .to_rotation_matrix();
                    let pc = rotation * (p - center);
                    let n: Vector2<f64> =
                        Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)) * sigma;
                    View { rotation, center, uv: Vector2::new(pc.x / pc.z, pc.y / pc.z) + n, sigma }
                })
                .collect();
            let t = triangulate_views(&views, &cfg).unwrap();
            let e = t.position - p;
            let d = e.dot(&(t.covariance.try_inverse().unwrap() * e));
            if d < bound {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.95 * trials as f64, "{inside}");
    }
}
