//! Trajectory accuracy and consistency metrics.

use nalgebra::{Matrix6, Vector6};
use thiserror::Error;

use crate::geometry::{rotation_error, umeyama_align, GeometryError, Pose, Sim3Transform, UnitQuaternion};
use crate::par;
use crate::state::chi2_quantile;

/// Timestamp association gate, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("fewer than two associated poses")]
    NoOverlap,
    #[error("no segment of length {0} m fits in the trajectory")]
    SegmentTooLong(f64),
    #[error("pose covariance at t = {0} is singular")]
    SingularCovariance(f64),
    #[error("covariance missing at t = {0}")]
    MissingCovariance(f64),
    #[error("timestamps must increase (t = {0})")]
    NonIncreasing(f64),
    #[error(transparent)]
    Alignment(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub timestamp: f64,
    /// `{ᴵ_G q̄, ᴳp_I}`
    pub pose: Pose,
    /// Covariance of the error state `[θ p]`.
    pub covariance: Option<Matrix6<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    entries: Vec<LogEntry>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose, covariance: Option<Matrix6<f64>>) -> Result<(), EvalError> {
        if self.entries.last().is_some_and(|e| timestamp <= e.timestamp) {
            return Err(EvalError::NonIncreasing(timestamp));
        }
        self.entries.push(LogEntry { timestamp, pose, covariance });
        Ok(())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies a similarity transform to every pose (positions and
    /// orientations), dropping covariances.
    pub fn transformed(&self, t: &Sim3Transform) -> TrajectoryLog {
        let rot = t.rotation;
        TrajectoryLog {
            entries: self
                .entries
                .iter()
                .map(|e| LogEntry {
                    timestamp: e.timestamp,
                    pose: Pose::new(e.pose.rotation * rot.inverse(), t.apply(&e.pose.position)),
                    covariance: None,
                })
                .collect(),
        }
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp within the gate.
pub fn associate(est: &TrajectoryLog, gt: &TrajectoryLog) -> Vec<(usize, usize)> {
    let g = gt.entries();
    let mut out = Vec::new();
    for (i, e) in est.entries().iter().enumerate() {
        let k = g.partition_point(|x| x.timestamp < e.timestamp);
        let best = [k.wrapping_sub(1), k]
            .into_iter()
            .filter(|&j| j < g.len())
            .min_by(|&a, &b| (g[a].timestamp - e.timestamp).abs().total_cmp(&(g[b].timestamp - e.timestamp).abs()));
        if let Some(j) = best {
            if (g[j].timestamp - e.timestamp).abs() <= ASSOCIATION_TOLERANCE {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    Se3,
    Sim3,
}

impl Alignment {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::None),
            "se3" | "SE3" => Some(Self::Se3),
            "sim3" => Some(Self::Sim3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ate {
    /// Rotation RMSE, degrees.
    pub rotation_deg: f64,
    /// Position RMSE, meters.
    pub position_m: f64,
    pub pairs: usize,
    pub alignment: Sim3Transform,
}

/// Absolute trajectory error after the requested alignment of the
/// estimate onto the ground truth.
pub fn ate(est: &TrajectoryLog, gt: &TrajectoryLog, alignment: Alignment) -> Result<Ate, EvalError> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(EvalError::NoOverlap);
    }
    let (e, g) = (est.entries(), gt.entries());
    let t = match alignment {
        Alignment::None => Sim3Transform::identity(),
        Alignment::Se3 | Alignment::Sim3 => {
            let src: Vec<_> = pairs.iter().map(|&(i, _)| e[i].pose.position).collect();
            let dst: Vec<_> = pairs.iter().map(|&(_, j)| g[j].pose.position).collect();
            umeyama_align(&src, &dst, alignment == Alignment::Sim3)?
        }
    };
    let r_align = t.rotation_matrix();
    let (mut rot_sq, mut pos_sq) = (0.0, 0.0);
    for &(i, j) in &pairs {
        let p = t.apply(&e[i].pose.position);
        pos_sq += (p - g[j].pose.position).norm_squared();
        let r_est = e[i].pose.rotation_matrix() * r_align.transpose();
        rot_sq += rotation_error(&g[j].pose.rotation_matrix(), &r_est).norm_squared();
    }
    let n = pairs.len() as f64;
    Ok(Ate {
        rotation_deg: (rot_sq / n).sqrt().to_degrees(),
        position_m: (pos_sq / n).sqrt(),
        pairs: pairs.len(),
        alignment: t,
    })
}

/// Box-plot statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme samples within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

fn quantile_sorted(x: &[f64], q: f64) -> f64 {
    let pos = q * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    x[lo] + (x[hi] - x[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut x = samples.to_vec();
        x.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile_sorted(&x, 0.25), quantile_sorted(&x, 0.5), quantile_sorted(&x, 0.75));
        let iqr = q3 - q1;
        let whisker_low = x.iter().copied().find(|v| *v >= q1 - 1.5 * iqr).unwrap_or(x[0]);
        let whisker_high = x.iter().rev().copied().find(|v| *v <= q3 + 1.5 * iqr).unwrap_or(x[x.len() - 1]);
        Some(Self { count: x.len(), median, q1, q3, whisker_low, whisker_high })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeStats {
    /// Segment length, meters.
    pub length: f64,
    /// Translation error, meters.
    pub translation: BoxStats,
    /// Rotation error, degrees.
    pub rotation: BoxStats,
}

/// Relative pose errors `(translation m, rotation deg)` of every segment
/// that starts at an associated pose and spans at least `length` meters of
/// ground-truth travel.
pub fn rpe_samples(est: &TrajectoryLog, gt: &TrajectoryLog, length: f64) -> Vec<(f64, f64)> {
    let pairs = associate(est, gt);
    let (e, g) = (est.entries(), gt.entries());
    let mut dist = vec![0.0; pairs.len()];
    for k in 1..pairs.len() {
        dist[k] = dist[k - 1] + (g[pairs[k].1].pose.position - g[pairs[k - 1].1].pose.position).norm();
    }
    let mut out = Vec::new();
    let mut end = 0;
    for start in 0..pairs.len() {
        end = end.max(start);
        while end < pairs.len() && dist[end] - dist[start] < length {
            end += 1;
        }
        if end == pairs.len() {
            break;
        }
        let (a, b) = (pairs[start], pairs[end]);
        let rel_gt = g[a.1].pose.inverse().compose(&g[b.1].pose);
        let rel_est = e[a.0].pose.inverse().compose(&e[b.0].pose);
        let err = rel_gt.inverse().compose(&rel_est);
        out.push((err.position.norm(), err.rotation.angle().to_degrees()));
    }
    out
}

/// Relative pose error statistics per segment length.
pub fn rpe(est: &TrajectoryLog, gt: &TrajectoryLog, lengths: &[f64]) -> Result<Vec<RpeStats>, EvalError> {
    par::map_slice(lengths, |&length| {
        let samples = rpe_samples(est, gt, length);
        let t: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let r: Vec<f64> = samples.iter().map(|s| s.1).collect();
        match (BoxStats::from_samples(&t), BoxStats::from_samples(&r)) {
            (Some(translation), Some(rotation)) => Ok(RpeStats { length, translation, rotation }),
            _ => Err(EvalError::SegmentTooLong(length)),
        }
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nees {
    pub per_frame: Vec<f64>,
    pub average: f64,
    pub dof: usize,
    /// Two-sided 95% interval of the average under consistency.
    pub interval: (f64, f64),
}

/// Two-sided 95% interval of the mean of `samples` independent `χ²(dof)`
/// variables.
pub fn nees_interval(dof: usize, samples: usize) -> (f64, f64) {
    let k = dof * samples.max(1);
    let n = samples.max(1) as f64;
    (chi2_quantile(0.025, k) / n, chi2_quantile(0.975, k) / n)
}

/// Error-state pose error `[θ p]` of an estimate against the truth.
pub fn pose_error(est: &Pose, gt: &Pose) -> Vector6<f64> {
    let th = rotation_error(&gt.rotation_matrix(), &est.rotation_matrix());
    let dp = gt.position - est.position;
    Vector6::new(th.x, th.y, th.z, dp.x, dp.y, dp.z)
}

/// Pose NEES `eᵀ P⁻¹ e` per associated frame.
pub fn nees(est: &TrajectoryLog, gt: &TrajectoryLog) -> Result<Nees, EvalError> {
    let pairs = associate(est, gt);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let (e, g) = (est.entries(), gt.entries());
    let mut per_frame = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let p = e[i].covariance.ok_or(EvalError::MissingCovariance(e[i].timestamp))?;
        let chol = p.cholesky().ok_or(EvalError::SingularCovariance(e[i].timestamp))?;
        let err = pose_error(&e[i].pose, &g[j].pose);
        per_frame.push(err.dot(&chol.solve(&err)));
    }
    let average = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let interval = nees_interval(6, per_frame.len());
    Ok(Nees { per_frame, average, dof: 6, interval })
}

/// Per-frame position error norms, no alignment.
pub fn position_errors(est: &TrajectoryLog, gt: &TrajectoryLog) -> Vec<f64> {
    let (e, g) = (est.entries(), gt.entries());
    associate(est, gt).into_iter().map(|(i, j)| (e[i].pose.position - g[j].pose.position).norm()).collect()
}

/// Fraction of frames whose position error is at most each threshold.
pub fn recall_curve(est: &TrajectoryLog, gt: &TrajectoryLog, thresholds: &[f64]) -> Vec<(f64, f64)> {
    let errors = position_errors(est, gt);
    let n = errors.len().max(1) as f64;
    thresholds.iter().map(|&t| (t, errors.iter().filter(|&&e| e <= t).count() as f64 / n)).collect()
}

/// `ᴳ_I q̄` as stored in trajectory files (body-to-world, TUM order).
pub fn world_from_body(pose: &Pose) -> UnitQuaternion {
    pose.rotation.inverse()
}
