//! Map-view measurements: render planning at an offset viewpoint, the
//! bearing model of a rendered view, its linearization with pose-error noise
//! inflation, and the render scheduler.
//!
//! A rendered view is taken at pose `{ᴷ_N R, ᴺp_K}` in the map frame `{N}`.
//! The map transform `T = {s, ᴺ_G R, t}` maps global points as
//! `ᴺp = s·ᴺ_G R·ᴳp + t`, so with `ᴺp_G = t / s` a global feature lands in the
//! render camera at
//!
//! ```text
//! ᴷp_f = ᴷp_N + s·ᴷ_N R·(ᴺp_G + ᴺ_G R·ᴳp_f)
//! ```

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix6, SMatrix, Vector2};
use thiserror::Error;

use crate::geometry::{skew, so3_exp, Pose, Sim3Transform, UnitQuaternion, Vec3};
use crate::state::{chi2_threshold_95, CloneId, FeatureId, StateVector, VarKey};
use crate::vision::{projection_jacobian, whitening, CameraCalibration, RowBlock, View, VisionConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapUpdateError {
    #[error("point is behind the render camera (depth {0:.4})")]
    BehindRenderCamera(f64),
    #[error("render {0} was triggered at a clone that has left the window")]
    StaleRender(u64),
    #[error("landmark {0:?} is not in the state")]
    UnknownLandmark(FeatureId),
    #[error("map measurement failed the innovation gate ({0:.2})")]
    Gated(f64),
}

/// Camera-frame offset of the render viewpoint (meters).
pub const DEFAULT_RENDER_OFFSET: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderRequest {
    pub id: u64,
    pub trigger: CloneId,
    pub trigger_time: f64,
    /// Requested pose in `{N}`: rotation `ᴷ_N R`, position `ᴺp_K`.
    pub pose: Pose,
    /// Offset applied in the camera frame, meters.
    pub offset: Vec3,
}

/// Everything about a rendered view that the estimator is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderContext {
    pub id: u64,
    pub trigger: CloneId,
    pub trigger_time: f64,
    /// Requested pose in `{N}`.
    pub pose: Pose,
    pub transform: Sim3Transform,
    /// Bearing noise of rendered observations, normalized units.
    pub sigma: f64,
    /// Declared covariance of the render pose error `[θ̃ p̃]`.
    pub pose_cov: Matrix6<f64>,
}

impl RenderContext {
    /// The rendered camera expressed as a camera in `{G}`.
    pub fn camera_in_global(&self) -> Pose {
        Pose::new(self.pose.rotation * self.transform.rotation, self.transform.apply_inverse(&self.pose.position))
    }
}

/// A bearing in a rendered view matched to a live feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMeasurement {
    pub feature: FeatureId,
    pub uv: Vector2<f64>,
    pub render: RenderContext,
}

impl MapMeasurement {
    /// The measurement as a triangulation view.
    pub fn view(&self) -> View {
        let cam = self.render.camera_in_global();
        View { rotation: cam.rotation_matrix(), center: cam.position, uv: self.uv, sigma: self.render.sigma }
    }
}

/// `h_n(ᴳp_f)`: bearing of a global point in the render camera.
pub fn nerf_bearing_model(
    p_f: &Vec3,
    render_pose: &Pose,
    transform: &Sim3Transform,
    z_min: f64,
) -> Result<Vector2<f64>, MapUpdateError> {
    let p_k = render_pose.to_body(&transform.apply(p_f));
    if !(p_k.z > z_min) {
        return Err(MapUpdateError::BehindRenderCamera(p_k.z));
    }
    Ok(Vector2::new(p_k.x / p_k.z, p_k.y / p_k.z))
}

/// The render pose actually produced for a pose error `(θ̃, p̃)`. The error
/// enters the bearing chain as `ᴷp_f = ᴷp_N + s·ᴷ_N R·(ᴺp_G + p̃ + Exp(−θ̃)·ᴺ_G R·ᴳp_f)`,
/// whose first-order effect is the inflation used by [`linearize_nerf`].
pub fn perturbed_render_pose(requested: &Pose, transform: &Sim3Transform, theta: &Vec3, p: &Vec3) -> Pose {
    let rot = requested.rotation * UnitQuaternion::from_rotation_vector(&(-theta));
    let t = transform.translation;
    let center = so3_exp(theta) * (requested.position - t - transform.scale * p) + t;
    Pose::new(rot, center)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapLinearization {
    pub residual: Vector2<f64>,
    pub h_feature: Matrix2x3<f64>,
    /// `σ_r²·I + J·Σ_pose·Jᵀ`.
    pub noise: Matrix2<f64>,
}

/// Residual, feature Jacobian and inflated noise of a map bearing about the
/// feature estimate `p_f`.
pub fn linearize_nerf(meas: &MapMeasurement, p_f: &Vec3, z_min: f64) -> Result<MapLinearization, MapUpdateError> {
    let ctx = &meas.render;
    let t = &ctx.transform;
    let r_k = ctx.pose.rotation_matrix();
    let r_map = t.rotation_matrix();
    let p_k = r_k * (t.apply(p_f) - ctx.pose.position);
    if !(p_k.z > z_min) {
        return Err(MapUpdateError::BehindRenderCamera(p_k.z));
    }
    let predicted = Vector2::new(p_k.x / p_k.z, p_k.y / p_k.z);
    let sh = t.scale * projection_jacobian(&p_k) * r_k;
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(sh * skew(&(r_map * p_f))));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&sh);
    let noise = Matrix2::identity() * ctx.sigma * ctx.sigma + j * ctx.pose_cov * j.transpose();
    Ok(MapLinearization { residual: meas.uv - predicted, h_feature: sh * r_map, noise })
}

/// Chooses the next render viewpoint: the current camera estimate shifted by
/// `sign · offset` along its x-axis, expressed in `{N}`.
pub fn plan_render(
    state: &StateVector,
    transform: &Sim3Transform,
    calib: &CameraCalibration,
    offset: f64,
    sign: f64,
    id: u64,
) -> Option<RenderRequest> {
    let clone = state.newest_clone()?;
    let cam = calib.camera_pose(&clone.pose);
    let delta = Vec3::new(sign * offset, 0.0, 0.0);
    let center_g = cam.to_reference(&delta);
    let pose = Pose::new(cam.rotation * transform.rotation.inverse(), transform.apply(&center_g));
    Some(RenderRequest { id, trigger: clone.id, trigger_time: clone.timestamp, pose, offset: delta })
}

/// Gated, whitened map rows for an in-state landmark.
pub fn map_landmark_rows(
    state: &StateVector,
    meas: &MapMeasurement,
    cfg: &VisionConfig,
) -> Result<(RowBlock, f64), MapUpdateError> {
    let lm = state.landmark(meas.feature).ok_or(MapUpdateError::UnknownLandmark(meas.feature))?;
    let off = state.offset(VarKey::Landmark(meas.feature)).unwrap();
    let lin = linearize_nerf(meas, &lm.position, cfg.z_min)?;
    let w = whitening(&lin.noise);
    let n = state.dim();
    let mut h = DMatrix::zeros(2, n);
    h.view_mut((0, off), (2, 3)).copy_from(&(w * lin.h_feature));
    let r = w * lin.residual;
    let p_ff = state.covariance().view((off, off), (3, 3)).into_owned();
    let hf = w * lin.h_feature;
    let s = hf * p_ff * hf.transpose() + Matrix2::identity();
    let d = s.cholesky().map(|c| r.dot(&c.solve(&r))).unwrap_or(f64::INFINITY);
    if d >= chi2_threshold_95(2) {
        return Err(MapUpdateError::Gated(d));
    }
    Ok((RowBlock { h, r: DVector::from_column_slice(r.as_slice()) }, d))
}

/// Mahalanobis distance of a map bearing against a feature estimate with
/// covariance `p_f_cov`; used for geometric verification of matches.
pub fn map_mahalanobis(meas: &MapMeasurement, p_f: &Vec3, p_f_cov: &nalgebra::Matrix3<f64>, z_min: f64) -> f64 {
    match linearize_nerf(meas, p_f, z_min) {
        Ok(lin) => {
            let s = lin.h_feature * p_f_cov * lin.h_feature.transpose() + lin.noise;
            s.cholesky().map(|c| lin.residual.dot(&c.solve(&lin.residual))).unwrap_or(f64::INFINITY)
        }
        Err(_) => f64::INFINITY,
    }
}

/// What the filter loop should do with renders at a frame boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SchedulerStep {
    /// Deliver the result of this request before anything is issued.
    pub deliver: Option<u64>,
    /// Issue a new request with this id.
    pub issue: Option<u64>,
    /// The new request is delivered at the same frame (zero latency).
    pub deliver_issued: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct InFlight {
    id: u64,
    ready_frame: usize,
}

/// Deterministic render scheduler: at most one render in flight, results
/// become available `latency` frames after the trigger frame.
#[derive(Debug, Clone)]
pub struct RenderScheduler {
    latency: usize,
    in_flight: Option<InFlight>,
    next_id: u64,
    sign: f64,
    pub issued: u64,
    pub delivered: u64,
}

impl RenderScheduler {
    pub fn new(latency_frames: usize) -> Self {
        Self { latency: latency_frames, in_flight: None, next_id: 0, sign: 1.0, issued: 0, delivered: 0 }
    }

    pub fn latency(&self) -> usize {
        self.latency
    }

    pub fn in_flight(&self) -> Option<u64> {
        self.in_flight.map(|f| f.id)
    }

    /// Sign of the offset for the next request; alternates per request.
    pub fn next_sign(&mut self) -> f64 {
        let s = self.sign;
        self.sign = -self.sign;
        s
    }

    pub fn step(&mut self, frame: usize) -> SchedulerStep {
        let mut out = SchedulerStep::default();
        if let Some(f) = self.in_flight {
            if f.ready_frame <= frame {
                out.deliver = Some(f.id);
                self.in_flight = None;
                self.delivered += 1;
            }
        }
        if self.in_flight.is_none() {
            let id = self.next_id;
            self.next_id += 1;
            self.issued += 1;
            out.issue = Some(id);
            if self.latency == 0 {
                out.deliver_issued = true;
                self.delivered += 1;
            } else {
                self.in_flight = Some(InFlight { id, ready_frame: frame + self.latency });
            }
        }
        out
    }

    /// Marks a request as completed out of band (threaded mode).
    pub fn complete(&mut self, id: u64) {
        if self.in_flight.map(|f| f.id) == Some(id) {
            self.in_flight = None;
            self.delivered += 1;
        }
    }

    /// Threaded mode: issue only, completion is reported via [`complete`](Self::complete).
    pub fn try_issue(&mut self) -> Option<u64> {
        if self.in_flight.is_some() {
            return None;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.issued += 1;
        self.in_flight = Some(InFlight { id, ready_frame: usize::MAX });
        Some(id)
    }
}

/// Whether a render may still be applied.
pub fn check_trigger(state: &StateVector, ctx: &RenderContext) -> Result<(), MapUpdateError> {
    if state.clone_state(ctx.trigger).is_some() {
        Ok(())
    } else {
        Err(MapUpdateError::StaleRender(ctx.id))
    }
}
