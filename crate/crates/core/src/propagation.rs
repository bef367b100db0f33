//! IMU mean and covariance propagation between camera times.
//!
//! Between consecutive breakpoints the inputs are held constant at the mean
//! of the two (interpolated) endpoint readings. Within a hold interval the
//! orientation is integrated in closed form and velocity/position with RK4;
//! the state-transition matrix is the exact Jacobian of that discrete map.

use nalgebra::{DMatrix, SMatrix};
use thiserror::Error;

use crate::geometry::{rotation_error, skew, so3_exp, so3_right_jacobian, Mat3, Vec3};
use crate::state::{ImuState, StateVector, IMU_DIM, OFF_BA, OFF_BG, OFF_POS, OFF_THETA, OFF_VEL};

pub type Mat15 = SMatrix<f64, 15, 15>;
type Mat15x12 = SMatrix<f64, 15, 12>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuReading {
    pub timestamp: f64,
    /// `ᴵω_m`, rad/s
    pub gyro: Vec3,
    /// `ᴵa_m`, m/s²
    pub accel: Vec3,
}

impl ImuReading {
    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.gyro.iter().all(|v| v.is_finite()) && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseParams {
    /// rad/s/√Hz
    pub sigma_g: f64,
    /// m/s²/√Hz
    pub sigma_a: f64,
    /// rad/s²/√Hz
    pub sigma_wg: f64,
    /// m/s³/√Hz
    pub sigma_wa: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self { sigma_g: 1.7e-4, sigma_a: 2.0e-3, sigma_wg: 1.0e-5, sigma_wa: 1.0e-4 }
    }
}

impl ImuNoiseParams {
    pub fn is_valid(&self) -> bool {
        [self.sigma_g, self.sigma_a, self.sigma_wg, self.sigma_wa].iter().all(|s| *s > 0.0 && s.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub gravity: Vec3,
    /// Largest tolerated hole in IMU coverage, seconds.
    pub gap_tolerance: f64,
    /// Evaluate the orientation columns of the transition at the
    /// first-estimate linearization point.
    pub first_estimates: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { gravity: Vec3::new(0.0, 0.0, -9.81), gap_tolerance: 0.05, first_estimates: true }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("IMU readings do not cover [{from}, {to}] (tolerance {tolerance} s)")]
    GapInReadings { from: f64, to: f64, tolerance: f64 },
    #[error("non-monotonic time at {0}")]
    NonMonotonicTime(f64),
    #[error("non-finite IMU reading at {0}")]
    NonFinite(f64),
}

/// One constant-input step of the mean: returns the propagated IMU state.
pub fn step_mean(imu: &ImuState, gyro: &Vec3, accel: &Vec3, dt: f64, gravity: &Vec3) -> ImuState {
    step(imu, gyro, accel, dt, gravity, false).0
}

/// One constant-input step: propagated state and its error-state transition.
pub fn step_with_transition(imu: &ImuState, gyro: &Vec3, accel: &Vec3, dt: f64, gravity: &Vec3) -> (ImuState, Mat15) {
    step(imu, gyro, accel, dt, gravity, true)
}

fn step(imu: &ImuState, gyro: &Vec3, accel: &Vec3, dt: f64, gravity: &Vec3, jacobian: bool) -> (ImuState, Mat15) {
    let r0 = imu.rotation();
    let r0t = r0.transpose();
    let w = gyro - imu.gyro_bias;
    let a = accel - imu.accel_bias;
    let dr = so3_exp(&(-w * dt));
    let r1 = dr * r0;
    let eh = so3_exp(&(w * (0.5 * dt)));
    let e1 = so3_exp(&(w * dt));
    let f0 = r0t * a;
    let fh = r0t * (eh * a);
    let f1 = r0t * (e1 * a);

    let v1 = imu.velocity + (f0 + 4.0 * fh + f1) * (dt / 6.0) + gravity * dt;
    let p1 = imu.position + imu.velocity * dt + (f0 + 2.0 * fh) * (dt * dt / 6.0) + gravity * (0.5 * dt * dt);
    let next = ImuState {
        orientation: crate::geometry::UnitQuaternion::from_rotation_matrix(&r1),
        position: p1,
        velocity: v1,
        gyro_bias: imu.gyro_bias,
        accel_bias: imu.accel_bias,
    };
    if !jacobian {
        return (next, Mat15::identity());
    }

    let skew_a = skew(&a);
    let d_theta = |f: &Vec3| -skew(f) * r0t;
    let d_bg = |e: &Mat3, tau: f64| r0t * e * skew_a * so3_right_jacobian(&(w * tau)) * tau;
    let d_ba = |e: &Mat3| -(r0t * e);
    let (t0, th, t1) = (d_theta(&f0), d_theta(&fh), d_theta(&f1));
    let (g0, gh, g1) = (Mat3::zeros(), d_bg(&eh, 0.5 * dt), d_bg(&e1, dt));
    let (a0, ah, a1) = (-r0t, d_ba(&eh), d_ba(&e1));

    let mut phi = Mat15::identity();
    phi.fixed_view_mut::<3, 3>(OFF_THETA, OFF_THETA).copy_from(&dr);
    phi.fixed_view_mut::<3, 3>(OFF_THETA, OFF_BG).copy_from(&(-dr * so3_right_jacobian(&(-w * dt)) * dt));

    let wv = dt / 6.0;
    let wp = dt * dt / 6.0;
    phi.fixed_view_mut::<3, 3>(OFF_VEL, OFF_THETA).copy_from(&((t0 + 4.0 * th + t1) * wv));
    phi.fixed_view_mut::<3, 3>(OFF_VEL, OFF_BG).copy_from(&((g0 + 4.0 * gh + g1) * wv));
    phi.fixed_view_mut::<3, 3>(OFF_VEL, OFF_BA).copy_from(&((a0 + 4.0 * ah + a1) * wv));
    phi.fixed_view_mut::<3, 3>(OFF_POS, OFF_THETA).copy_from(&((t0 + 2.0 * th) * wp));
    phi.fixed_view_mut::<3, 3>(OFF_POS, OFF_BG).copy_from(&((g0 + 2.0 * gh) * wp));
    phi.fixed_view_mut::<3, 3>(OFF_POS, OFF_BA).copy_from(&((a0 + 2.0 * ah) * wp));
    phi.fixed_view_mut::<3, 3>(OFF_POS, OFF_VEL).copy_from(&(Mat3::identity() * dt));
    (next, phi)
}

/// Error-state difference `x ⊟ y` of two IMU states in the filter convention.
pub fn imu_difference(x: &ImuState, y: &ImuState) -> SMatrix<f64, 15, 1> {
    let mut d = SMatrix::<f64, 15, 1>::zeros();
    d.fixed_rows_mut::<3>(OFF_THETA).copy_from(&rotation_error(&x.rotation(), &y.rotation()));
    d.fixed_rows_mut::<3>(OFF_POS).copy_from(&(x.position - y.position));
    d.fixed_rows_mut::<3>(OFF_VEL).copy_from(&(x.velocity - y.velocity));
    d.fixed_rows_mut::<3>(OFF_BG).copy_from(&(x.gyro_bias - y.gyro_bias));
    d.fixed_rows_mut::<3>(OFF_BA).copy_from(&(x.accel_bias - y.accel_bias));
    d
}

/// `x ⊞ δ`.
pub fn imu_plus(x: &ImuState, d: &SMatrix<f64, 15, 1>) -> ImuState {
    let seg = |o: usize| Vec3::new(d[o], d[o + 1], d[o + 2]);
    ImuState {
        orientation: crate::geometry::perturb_quaternion(&x.orientation, &seg(OFF_THETA)),
        position: x.position + seg(OFF_POS),
        velocity: x.velocity + seg(OFF_VEL),
        gyro_bias: x.gyro_bias + seg(OFF_BG),
        accel_bias: x.accel_bias + seg(OFF_BA),
    }
}

fn noise_jacobian(rotation: &Mat3) -> Mat15x12 {
    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(OFF_THETA, 0).copy_from(&(-Mat3::identity()));
    g.fixed_view_mut::<3, 3>(OFF_VEL, 3).copy_from(&(-rotation.transpose()));
    g.fixed_view_mut::<3, 3>(OFF_BG, 6).copy_from(&Mat3::identity());
    g.fixed_view_mut::<3, 3>(OFF_BA, 9).copy_from(&Mat3::identity());
    g
}

fn continuous_noise(noise: &ImuNoiseParams) -> SMatrix<f64, 12, 12> {
    let mut q = SMatrix::<f64, 12, 12>::zeros();
    for (k, s) in [noise.sigma_g, noise.sigma_a, noise.sigma_wg, noise.sigma_wa].iter().enumerate() {
        for i in 0..3 {
            q[(3 * k + i, 3 * k + i)] = s * s;
        }
    }
    q
}

fn interpolate(a: &ImuReading, b: &ImuReading, t: f64) -> (Vec3, Vec3) {
    let span = b.timestamp - a.timestamp;
    if span <= 0.0 {
        return (a.gyro, a.accel);
    }
    let u = ((t - a.timestamp) / span).clamp(0.0, 1.0);
    (a.gyro.lerp(&b.gyro, u), a.accel.lerp(&b.accel, u))
}

/// Piecewise-constant hold segments `(dt, gyro, accel)` covering `[from, to]`.
pub fn hold_segments(
    readings: &[ImuReading],
    from: f64,
    to: f64,
    gap_tolerance: f64,
) -> Result<Vec<(f64, Vec3, Vec3)>, PropagationError> {
    if to < from {
        return Err(PropagationError::NonMonotonicTime(to));
    }
    for w in readings.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(PropagationError::NonMonotonicTime(w[1].timestamp));
        }
    }
    if let Some(bad) = readings.iter().find(|r| !r.is_finite()) {
        return Err(PropagationError::NonFinite(bad.timestamp));
    }
    if to == from {
        return Ok(Vec::new());
    }
    let gap = || PropagationError::GapInReadings { from, to, tolerance: gap_tolerance };
    let (first, last) = match (readings.first(), readings.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(gap()),
    };
    if first.timestamp > from + gap_tolerance || last.timestamp < to - gap_tolerance {
        return Err(gap());
    }
    // breakpoints and interpolated values
    let value_at = |t: f64| -> (Vec3, Vec3) {
        let idx = readings.partition_point(|r| r.timestamp <= t);
        if idx == 0 {
            (first.gyro, first.accel)
        } else if idx >= readings.len() {
            (last.gyro, last.accel)
        } else {
            interpolate(&readings[idx - 1], &readings[idx], t)
        }
    };
    let mut times = vec![from];
    times.extend(readings.iter().map(|r| r.timestamp).filter(|&t| t > from && t < to));
    times.push(to);
    for w in times.windows(2) {
        if w[1] - w[0] > gap_tolerance {
            return Err(gap());
        }
    }
    let values: Vec<(Vec3, Vec3)> = times.iter().map(|&t| value_at(t)).collect();
    Ok(times
        .windows(2)
        .zip(values.windows(2))
        .filter(|(t, _)| t[1] > t[0])
        .map(|(t, v)| (t[1] - t[0], (v[0].0 + v[1].0) * 0.5, (v[0].1 + v[1].1) * 0.5))
        .collect())
}

/// Transition and discrete noise accumulated over one propagation call.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub phi: Mat15,
    pub q: Mat15,
}

/// Propagates the IMU mean and the joint covariance to `to_time`.
pub fn propagate(
    state: &mut StateVector,
    readings: &[ImuReading],
    to_time: f64,
    noise: &ImuNoiseParams,
    cfg: &PropagationConfig,
) -> Result<Propagated, PropagationError> {
    let segments = hold_segments(readings, state.timestamp, to_time, cfg.gap_tolerance)?;
    let qc = continuous_noise(noise);
    let mut imu = state.imu;
    let mut phi_total = Mat15::identity();
    let mut q_total = Mat15::zeros();
    let mut total_dt = 0.0;
    for (dt, gyro, accel) in &segments {
        let g0 = noise_jacobian(&imu.rotation());
        let (next, phi) = step_with_transition(&imu, gyro, accel, *dt, &cfg.gravity);
        let g1 = noise_jacobian(&next.rotation());
        let a = phi * g0;
        let q_step = (a * qc * a.transpose() + g1 * qc * g1.transpose()) * (0.5 * dt);
        q_total = phi * q_total * phi.transpose() + q_step;
        phi_total = phi * phi_total;
        imu = next;
        total_dt += dt;
    }

    if cfg.first_estimates && !segments.is_empty() {
        let lin = state.imu_linearization;
        let r0t = lin.rotation.transpose();
        let g = cfg.gravity;
        let dv = imu.velocity - lin.velocity - g * total_dt;
        let dp = imu.position - lin.position - lin.velocity * total_dt - g * (0.5 * total_dt * total_dt);
        phi_total.fixed_view_mut::<3, 3>(OFF_THETA, OFF_THETA).copy_from(&(imu.rotation() * r0t));
        phi_total.fixed_view_mut::<3, 3>(OFF_VEL, OFF_THETA).copy_from(&(-skew(&dv) * r0t));
        phi_total.fixed_view_mut::<3, 3>(OFF_POS, OFF_THETA).copy_from(&(-skew(&dp) * r0t));
    }

    // P_II ← Φ P_II Φᵀ + Q, P_IX ← Φ P_IX
    let n = state.dim();
    let cov = state.covariance_mut();
    let p_ii: Mat15 = cov.fixed_view::<15, 15>(0, 0).into_owned();
    let new_ii = phi_total * p_ii * phi_total.transpose() + q_total;
    if n > IMU_DIM {
        let p_ix = cov.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
        let phi_d = DMatrix::from_column_slice(15, 15, phi_total.as_slice());
        let new_ix = phi_d * p_ix;
        cov.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&new_ix);
        cov.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&new_ix.transpose());
    }
    cov.fixed_view_mut::<15, 15>(0, 0).copy_from(&new_ii);
    state.symmetrize();
    state.imu = imu;
    state.timestamp = to_time;
    state.reset_imu_linearization();
    Ok(Propagated { phi: phi_total, q: q_total })
}
