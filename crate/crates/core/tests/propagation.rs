use nalgebra::{DMatrix, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mapvins::geometry::{UnitQuaternion, Vec3};
use mapvins::propagation::{
    hold_segments, imu_difference, imu_plus, propagate, step_mean, ImuNoiseParams, ImuReading, PropagationConfig,
};
use mapvins::simulator::{sample_trajectory, synthesize_imu, TrajectorySpec};
use mapvins::state::{ImuState, StateVector};

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

// Sample covariance of 10⁴ states pushed through 0.5 s of noisy IMU against
// the propagated covariance.
#[test]
fn monte_carlo_covariance_matches_propagated() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let g = Vec3::new(0.0, 0.0, -9.81);
    // noise large enough that Q matters next to P0
    let noise = ImuNoiseParams { sigma_g: 5e-3, sigma_a: 5e-2, sigma_wg: 2e-3, sigma_wa: 2e-2 };
    let x0 = ImuState {
        orientation: UnitQuaternion::from_rotation_vector(&Vec3::new(0.3, -0.2, 0.9)),
        position: Vec3::new(1.0, 2.0, 0.5),
        velocity: Vec3::new(0.5, -0.3, 0.1),
        gyro_bias: Vec3::new(0.01, -0.02, 0.005),
        accel_bias: Vec3::new(0.05, 0.02, -0.03),
    };
    let mut p0 = DMatrix::zeros(15, 15);
    for (i, s) in [2e-3, 2e-3, 2e-3, 1e-2, 1e-2, 1e-2, 1e-2, 1e-2, 1e-2, 1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2]
        .iter()
        .enumerate()
    {
        p0[(i, i)] = s * s;
    }
    let rate = 200.0;
    let readings: Vec<ImuReading> = (0..=100)
        .map(|i| {
            let t = i as f64 / rate;
            ImuReading {
                timestamp: t,
                gyro: Vec3::new(0.3 * (2.0 * t).sin(), 0.4, -0.2 + 0.1 * t),
                accel: Vec3::new(0.4, -0.3 * t, 9.7 + 0.2 * (3.0 * t).cos()),
            }
        })
        .collect();

    let mut state = StateVector::new(0.0, x0, p0.clone(), 11).unwrap();
    let cfg = PropagationConfig { gravity: g, ..Default::default() };
    propagate(&mut state, &readings, 0.5, &noise, &cfg).unwrap();
    let nominal = state.imu;

    let l = p0.cholesky().unwrap().l();
    let n = 10_000;
    let dt = 1.0 / rate;
    let mut cov = SMatrix::<f64, 15, 15>::zeros();
    for _ in 0..n {
        let z = DMatrix::from_fn(15, 1, |_, _| StandardNormal.sample(&mut rng));
        let d = SMatrix::<f64, 15, 1>::from_iterator((&l * z).iter().copied());
        let mut x = imu_plus(&x0, &d);
        let noisy: Vec<ImuReading> = readings
            .iter()
            .map(|r| ImuReading {
                timestamp: r.timestamp,
                gyro: r.gyro + gauss3(&mut rng) * (noise.sigma_g / dt.sqrt()),
                accel: r.accel + gauss3(&mut rng) * (noise.sigma_a / dt.sqrt()),
            })
            .collect();
        for (h, w, a) in hold_segments(&noisy, 0.0, 0.5, 0.05).unwrap() {
            x = step_mean(&x, &w, &a, h, &g);
            x.gyro_bias += gauss3(&mut rng) * (noise.sigma_wg * h.sqrt());
            x.accel_bias += gauss3(&mut rng) * (noise.sigma_wa * h.sqrt());
        }
        let e = imu_difference(&x, &nominal);
        cov += e * e.transpose();
    }
    cov /= n as f64;
    let p = state.covariance().view((0, 0), (15, 15)).into_owned();
    let p = SMatrix::<f64, 15, 15>::from_iterator(p.iter().copied());
    let rel = (cov - p).norm() / p.norm();
    assert!(rel < 0.10, "relative Frobenius difference {rel}");
}

// Noise-free synthetic IMU integrated by the filter reproduces the truth.
#[test]
fn zero_noise_imu_round_trip() {
    let spec = TrajectorySpec::default();
    let g = Vec3::new(0.0, 0.0, -9.81);
    let stream = synthesize_imu(&spec, None, (Vec3::zeros(), Vec3::zeros()), &g, 1);
    let s0 = sample_trajectory(&spec, 0.0).unwrap();
    let x0 = ImuState { orientation: s0.pose.rotation, position: s0.pose.position, velocity: s0.velocity, ..Default::default() };
    let mut state = StateVector::new(0.0, x0, DMatrix::identity(15, 15) * 1e-6, 11).unwrap();
    let cfg = PropagationConfig { gravity: g, ..Default::default() };
    let mut worst: f64 = 0.0;
    for k in 1..=100 {
        let t = k as f64 * 0.1;
        propagate(&mut state, &stream.readings, t, &ImuNoiseParams::default(), &cfg).unwrap();
        let truth = sample_trajectory(&spec, t).unwrap();
        worst = worst.max((state.imu.position - truth.pose.position).norm());
    }
    assert!(worst < 1e-3, "position error {worst} m over 10 s");
}
