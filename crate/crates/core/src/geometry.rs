//! Rotation, rigid-body and similarity-transform algebra.
//!
//! Conventions, fixed crate-wide:
//!
//! * [`UnitQuaternion`] stores `(x, y, z, w)` and multiplies with the Hamilton
//!   product, so that `quat_to_rot(a * b) == quat_to_rot(a) * quat_to_rot(b)`.
//! * An orientation `q` attached to a body frame `B` and reference frame `A`
//!   is the rotation that takes vectors expressed in `A` into `B`
//!   (`R(q) = ᴮ_A R`). The IMU orientation is therefore `ᴵ_G R`.
//! * Orientation error is a 3-vector `θ` with `R_true ≈ (I − skew(θ)) · R_est`,
//!   i.e. `R_true = Exp(−θ) · R_est`. Use [`perturb_rotation`] and
//!   [`rotation_error`] instead of spelling this out at use sites.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {0} is too far from 1 to renormalize")]
    NotUnit(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("source and target have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

const SMALL_ANGLE: f64 = 1e-8;

/// Unit quaternion `(x, y, z, w)` with Hamilton multiplication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    x: f64,
    y: f64,
    z: f64,
    w: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, w: 1.0 }
    }

    /// Builds a quaternion from raw components. Components that are within
    /// 1e-6 of unit norm are renormalized; anything else is rejected.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self, GeometryError> {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || (n - 1.0).abs() >= 1e-6 {
            return Err(GeometryError::NotUnit(n));
        }
        // already unit to rounding: keep the bits so stored values round-trip
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { x, y, z, w });
        }
        Ok(Self { x: x / n, y: y / n, z: z / n, w: w / n })
    }

    /// Normalizes arbitrary non-zero components.
    pub fn normalize(x: f64, y: f64, z: f64, w: f64) -> Self {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        Self { x: x / n, y: y / n, z: z / n, w: w / n }
    }

    /// `(x, y, z, w)`.
    pub fn coords(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Quaternion whose rotation matrix is `so3_exp(phi)`.
    pub fn from_rotation_vector(phi: &Vec3) -> Self {
        let angle = phi.norm();
        let half = 0.5 * angle;
        let k = if angle < SMALL_ANGLE { 0.5 - angle * angle / 48.0 } else { half.sin() / angle };
        Self::normalize(k * phi.x, k * phi.y, k * phi.z, half.cos())
    }

    pub fn to_rotation_vector(&self) -> Vec3 {
        // keep w >= 0 so the angle lies in [0, pi]
        let (v, w) = if self.w < 0.0 {
            (Vec3::new(-self.x, -self.y, -self.z), -self.w)
        } else {
            (Vec3::new(self.x, self.y, self.z), self.w)
        };
        let s = v.norm();
        if s < SMALL_ANGLE {
            return v * 2.0;
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    pub fn from_rotation_matrix(r: &Mat3) -> Self {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let (x, y, z, w);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::normalize(x, y, z, w)
    }

    pub fn inverse(&self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z, w: self.w }
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        quat_to_rot(self)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        quat_to_rot(self) * v
    }

    /// Angle of the rotation in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.to_rotation_vector().norm()
    }
}

impl std::ops::Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, b: UnitQuaternion) -> UnitQuaternion {
        let a = self;
        UnitQuaternion::normalize(
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        )
    }
}

/// Rotation matrix of a unit quaternion (Hamilton convention).
pub fn quat_to_rot(q: &UnitQuaternion) -> Mat3 {
    let [x, y, z, w] = q.coords();
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Mat3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// `skew(v) * w == v.cross(w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Mat3::identity() + a * k + b * k * k
}

pub fn so3_log(r: &Mat3) -> Vec3 {
    UnitQuaternion::from_rotation_matrix(r).to_rotation_vector()
}

/// Right Jacobian of SO(3): `Exp(phi + d) ≈ Exp(phi) · Exp(Jr(phi) · d)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Mat3::identity() - (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
}

/// Applies an error-state orientation correction: `Exp(−θ) · R`.
pub fn perturb_rotation(r: &Mat3, theta: &Vec3) -> Mat3 {
    so3_exp(&(-theta)) * r
}

/// Quaternion form of [`perturb_rotation`].
pub fn perturb_quaternion(q: &UnitQuaternion, theta: &Vec3) -> UnitQuaternion {
    UnitQuaternion::from_rotation_vector(&(-theta)) * *q
}

/// Error-state orientation error `θ` such that `R_true = Exp(−θ) · R_est`.
pub fn rotation_error(r_true: &Mat3, r_est: &Mat3) -> Vec3 {
    so3_log(&(r_est * r_true.transpose()))
}

/// Rigid pose of a body frame `B` relative to a reference frame `A`.
///
/// `rotation` is `ᴮ_A R` (reference-to-body) and `position` is `ᴬp_B`, the
/// body origin expressed in the reference frame. A point `ᴬx` maps into the
/// body as `ᴮx = R · (ᴬx − ᴬp_B)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub position: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion, position: Vec3) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rot(&self.rotation)
    }

    /// Reference-frame point into the body frame.
    pub fn to_body(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * (p - self.position)
    }

    /// Body-frame point into the reference frame.
    pub fn to_reference(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * p + self.position
    }

    /// Pose of `A` relative to `B`.
    pub fn inverse(&self) -> Pose {
        let r = self.rotation_matrix();
        Pose { rotation: self.rotation.inverse(), position: -(r * self.position) }
    }

    /// Given `self` = pose of `B` in `A` and `other` = pose of `C` in `B`,
    /// returns the pose of `C` in `A`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: other.rotation * self.rotation,
            position: self.position + self.rotation_matrix().transpose() * other.position,
        }
    }
}

/// Similarity transform `x ↦ s · R · x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GeometryError::DegenerateGeometry("sim3 scale must be positive"));
        }
        Ok(Self { scale, rotation, translation })
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rot(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        sim3_apply(self, p)
    }

    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix().transpose() * (p - self.translation) / self.scale
    }

    pub fn inverse(&self) -> Sim3Transform {
        let rt = self.rotation_matrix().transpose();
        Sim3Transform {
            scale: 1.0 / self.scale,
            rotation: self.rotation.inverse(),
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation_matrix() * other.translation) + self.translation,
        }
    }
}

/// `s · R · p + t`.
pub fn sim3_apply(t: &Sim3Transform, p: &Vec3) -> Vec3 {
    t.scale * (t.rotation_matrix() * p) + t.translation
}

/// Closed-form least-squares similarity (or rigid, when `with_scale` is
/// false) transform minimizing `Σ ‖target_i − (s·R·source_i + t)‖²`.
pub fn umeyama_align(source: &[Vec3], target: &[Vec3], with_scale: bool) -> Result<Sim3Transform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch(source.len(), target.len()));
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::DegenerateGeometry("need at least 3 point pairs"));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vec3>() * inv_n;
    let mu_t = target.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    // Collinearity: the centered source cloud needs rank >= 2.
    let mut scatter = Mat3::zeros();
    for s in source {
        let ds = s - mu_s;
        scatter += ds * ds.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(GeometryError::DegenerateGeometry("points are collinear"));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Mat3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        let sv = svd.singular_values;
        (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_t - scale * (r * mu_s);
    Sim3Transform::new(scale, UnitQuaternion::from_rotation_matrix(&r), translation)
}
