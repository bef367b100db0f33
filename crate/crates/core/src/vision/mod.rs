//! Pinhole camera model, real-image bearing measurements and their
//! linearization, triangulation and the MSCKF / SLAM update paths.

mod msckf;
mod triangulation;

pub use msckf::{
    apply_rows, build_feature_system, compress_rows, initialize_landmark, msckf_rows, msckf_update,
    nullspace_project, slam_rows, stack_rows, FeatureOutcome, FeatureSystem, MsckfReport, ProjectedSystem, RowBlock,
};
pub use triangulation::{triangulate, triangulate_views, Triangulation, View};

/// Thresholds shared by triangulation and the measurement updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionConfig {
    pub z_min: f64,
    /// Minimum camera-center spread for triangulation, meters.
    pub min_baseline: f64,
    /// Reprojection gate in normalized units.
    pub reprojection_gate: f64,
    /// Chi-square gate for geometric verification of map matches (2 dof).
    pub map_gate: f64,
    pub first_estimates: bool,
    pub max_iterations: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self::for_camera(&CameraCalibration::default())
    }
}

impl VisionConfig {
    pub fn for_camera(calib: &CameraCalibration) -> Self {
        Self {
            z_min: 0.05,
            min_baseline: 0.02,
            reprojection_gate: 5.0 / calib.fx,
            // 3σ-equivalent for 2 dof
            map_gate: crate::state::chi2_quantile(0.9973, 2),
            first_estimates: true,
            max_iterations: 15,
        }
    }
}

use nalgebra::{Matrix2, Matrix2x3, SMatrix, Vector2};
use thiserror::Error;

use crate::geometry::{quat_to_rot, skew, Mat3, Pose, UnitQuaternion, Vec3};
use crate::map_update::MapMeasurement;
use crate::state::{CloneId, FeatureId};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisionError {
    #[error("point is behind the camera (depth {0:.4} m)")]
    BehindCamera(f64),
    #[error("insufficient triangulation baseline ({0:.4} m)")]
    InsufficientBaseline(f64),
    #[error("triangulation refinement diverged (reprojection {0:.3e})")]
    DivergedRefinement(f64),
    #[error("measurement references clone {0:?} which is not in the window")]
    MissingClone(CloneId),
    #[error("feature {0:?} has too few observations")]
    TooFewObservations(FeatureId),
    #[error("feature {0:?} failed the innovation gate")]
    Gated(FeatureId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraCalibration {
    /// `ᶜ_I R`
    pub rot_ci: UnitQuaternion,
    /// `ᶜp_I`
    pub p_ci: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Per-measurement pixel noise.
    pub sigma_px: f64,
}

impl Default for CameraCalibration {
    fn default() -> Self {
        Self {
            rot_ci: UnitQuaternion::identity(),
            p_ci: Vec3::new(0.02, -0.01, 0.01),
            fx: 250.0,
            fy: 250.0,
            cx: 212.0,
            cy: 120.0,
            width: 424,
            height: 240,
            sigma_px: 1.0,
        }
    }
}

impl CameraCalibration {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0 && self.sigma_px > 0.0
    }

    /// Bearing noise in normalized image units.
    pub fn sigma_normalized(&self) -> f64 {
        self.sigma_px / self.fx
    }

    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn to_pixel(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(uv.x * self.fx + self.cx, uv.y * self.fy + self.cy)
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn rot_ci_matrix(&self) -> Mat3 {
        quat_to_rot(&self.rot_ci)
    }

    /// Camera pose in `{G}` (`ᶜ_G R`, `ᴳp_C`) for an IMU pose `{ᴵ_G R, ᴳp_I}`.
    pub fn camera_pose(&self, imu_pose: &Pose) -> Pose {
        let r_ig = imu_pose.rotation_matrix();
        let r_ci = self.rot_ci_matrix();
        let p_c_in_i = -(r_ci.transpose() * self.p_ci);
        Pose::new(self.rot_ci * imu_pose.rotation, imu_pose.position + r_ig.transpose() * p_c_in_i)
    }
}

/// Normalized bearing of a clone observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingMeasurement {
    pub feature: FeatureId,
    pub clone: CloneId,
    pub timestamp: f64,
    pub uv: Vector2<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tracking,
    Lost,
    InState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub id: FeatureId,
    pub measurements: Vec<BearingMeasurement>,
    /// Matched observations in rendered map views.
    pub map_observations: Vec<MapMeasurement>,
    pub status: TrackStatus,
}

impl FeatureTrack {
    pub fn new(id: FeatureId) -> Self {
        Self { id, measurements: Vec::new(), map_observations: Vec::new(), status: TrackStatus::Tracking }
    }

    /// Adds a measurement, keeping at most one per clone.
    pub fn push(&mut self, m: BearingMeasurement) {
        if let Some(existing) = self.measurements.iter_mut().find(|x| x.clone == m.clone) {
            *existing = m;
        } else {
            self.measurements.push(m);
        }
    }

    pub fn observed_in(&self, clone: CloneId) -> bool {
        self.measurements.iter().any(|m| m.clone == clone)
    }
}

/// `Λ([x y z]) = [x/z, y/z]`.
pub fn project(p_cam: &Vec3, z_min: f64) -> Result<Vector2<f64>, VisionError> {
    if !(p_cam.z > z_min) {
        return Err(VisionError::BehindCamera(p_cam.z));
    }
    Ok(Vector2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z))
}

/// `∂Λ/∂p` at `p_cam`.
pub fn projection_jacobian(p_cam: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / p_cam.z;
    let iz2 = iz * iz;
    Matrix2x3::new(iz, 0.0, -p_cam.x * iz2, 0.0, iz, -p_cam.y * iz2)
}

/// `ᶜ_I R · ᴵ_G R · (ᴳp_f − ᴳp_I) + ᶜp_I`.
pub fn to_camera_frame(clone_pose: &Pose, calib: &CameraCalibration, p_f: &Vec3) -> Vec3 {
    calib.rot_ci_matrix() * (clone_pose.rotation_matrix() * (p_f - clone_pose.position)) + calib.p_ci
}

/// Residual and Jacobians of one real-image bearing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealLinearization {
    pub residual: Vector2<f64>,
    /// Over the clone error `[θ p]`.
    pub h_pose: Matrix2x6,
    /// Over `ᴳp_f`.
    pub h_feature: Matrix2x3<f64>,
}

/// Linearizes `z = Λ(ᶜp_f)` about the estimate. The residual uses
/// (`clone_pose`, `p_f`); the state Jacobians are evaluated at
/// (`clone_lin`, `p_f_lin`), which equal the estimate unless first-estimate
/// Jacobians are in use.
pub fn linearize_real(
    uv: &Vector2<f64>,
    clone_pose: &Pose,
    clone_lin: &Pose,
    p_f: &Vec3,
    p_f_lin: &Vec3,
    calib: &CameraCalibration,
    z_min: f64,
) -> Result<RealLinearization, VisionError> {
    let p_c = to_camera_frame(clone_pose, calib, p_f);
    let predicted = project(&p_c, z_min)?;
    let h_proj = projection_jacobian(&p_c);
    let r_ci = calib.rot_ci_matrix();
    let r_lin = clone_lin.rotation_matrix();
    let d_theta = r_ci * skew(&(r_lin * (p_f_lin - clone_lin.position)));
    let d_feature = r_ci * r_lin;
    let mut h_pose = Matrix2x6::zeros();
    h_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(h_proj * d_theta));
    h_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-h_proj * d_feature));
    Ok(RealLinearization { residual: uv - predicted, h_pose, h_feature: h_proj * d_feature })
}

/// `L⁻¹` for `R = L Lᵀ`; rows multiplied by it have unit noise.
pub fn whitening(noise: &Matrix2<f64>) -> Matrix2<f64> {
    let l = noise.cholesky().expect("measurement noise must be positive definite").l();
    l.try_inverse().expect("cholesky factor is invertible")
}
