//! Deterministic world and sensor synthesis.
//!
//! The default scene is a room-sized box with landmarks on its walls, floor
//! and ceiling plus a cluster standing in for a table in the middle. The
//! sensor rig circles the table looking at it.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{Mat3, Pose, UnitQuaternion, Vec3};
use crate::map_oracle::{landmark_descriptor, perturb_descriptor, Descriptor, LiveFeature};
use crate::propagation::{ImuNoiseParams, ImuReading};
use crate::state::FeatureId;
use crate::vision::CameraCalibration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("time {t} is outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },
    #[error("landmark {0} is not in the world")]
    UnknownLandmark(u64),
    #[error("invalid environment change: {0}")]
    InvalidChange(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldLandmark {
    pub id: u64,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub landmarks: Vec<WorldLandmark>,
    /// Axis-aligned extent `(min, max)`.
    pub extent: (Vec3, Vec3),
    /// Seed of the per-landmark base descriptors.
    pub descriptor_seed: u64,
    /// Ids of the central cluster.
    pub cluster: Vec<u64>,
    pub next_id: u64,
}

impl WorldModel {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn position(&self, id: u64) -> Option<Vec3> {
        self.landmarks.iter().find(|l| l.id == id).map(|l| l.position)
    }

    pub fn descriptor(&self, id: u64) -> Descriptor {
        landmark_descriptor(self.descriptor_seed, id)
    }

    pub fn as_pairs(&self) -> Vec<(u64, Vec3)> {
        self.landmarks.iter().map(|l| (l.id, l.position)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub room_min: Vec3,
    pub room_max: Vec3,
    pub surface_landmarks: usize,
    pub cluster_center: Vec3,
    pub cluster_half_extent: Vec3,
    pub cluster_landmarks: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            room_min: Vec3::new(-4.0, -4.0, 0.0),
            room_max: Vec3::new(4.0, 4.0, 3.0),
            surface_landmarks: 1200,
            cluster_center: Vec3::new(0.0, 0.0, 0.9),
            cluster_half_extent: Vec3::new(0.5, 0.35, 0.2),
            cluster_landmarks: 300,
        }
    }
}

fn uniform_on_box(rng: &mut ChaCha8Rng, lo: &Vec3, hi: &Vec3) -> Vec3 {
    let d = hi - lo;
    let areas = [d.y * d.z, d.y * d.z, d.x * d.z, d.x * d.z, d.x * d.y, d.x * d.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 5 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let mut p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
    let axis = face / 2;
    p[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
    p
}

/// Builds the default scene deterministically from `seed`.
pub fn build_world(spec: &WorldSpec, seed: u64) -> WorldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut landmarks = Vec::with_capacity(spec.surface_landmarks + spec.cluster_landmarks);
    for i in 0..spec.surface_landmarks {
        landmarks.push(WorldLandmark { id: i as u64, position: uniform_on_box(&mut rng, &spec.room_min, &spec.room_max) });
    }
    let mut cluster = Vec::with_capacity(spec.cluster_landmarks);
    let (lo, hi) = (spec.cluster_center - spec.cluster_half_extent, spec.cluster_center + spec.cluster_half_extent);
    for i in 0..spec.cluster_landmarks {
        let id = (spec.surface_landmarks + i) as u64;
        let p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
        landmarks.push(WorldLandmark { id, position: p });
        cluster.push(id);
    }
    let next_id = landmarks.len() as u64;
    WorldModel { landmarks, extent: (spec.room_min, spec.room_max), descriptor_seed: seed, cluster, next_id }
}

/// Where new landmarks are placed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// A vertical rectangle `center ± half_width·along` (horizontal) and
    /// `± half_height` (vertical).
    Plane { center: Vec3, along: Vec3, half_width: f64, half_height: f64 },
    /// The surfaces of the room box.
    RoomSurface,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvironmentChange {
    /// Removes a fraction of the landmarks, optionally restricted to the
    /// room surfaces (excluding the cluster).
    Remove { fraction: f64, surfaces_only: bool, seed: u64 },
    Displace { ids: Vec<u64>, delta: Vec3 },
    DisplaceCluster { delta: Vec3 },
    Add { count: usize, region: Region, seed: u64 },
}

/// Applies one scripted change to the live world. A map built earlier is
/// not affected.
pub fn apply_environment_change(world: &WorldModel, change: &EnvironmentChange) -> Result<WorldModel, SimError> {
    let mut w = world.clone();
    match change {
        EnvironmentChange::Remove { fraction, surfaces_only, seed } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(SimError::InvalidChange(format!("fraction {fraction}")));
            }
            let cluster: HashSet<u64> = w.cluster.iter().copied().collect();
            let eligible: Vec<usize> =
                (0..w.landmarks.len()).filter(|&i| !surfaces_only || !cluster.contains(&w.landmarks[i].id)).collect();
            let k = (fraction * eligible.len() as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let drop: HashSet<usize> = sample(&mut rng, eligible.len(), k).into_iter().map(|j| eligible[j]).collect();
            let mut i = 0;
            w.landmarks.retain(|_| {
                let keep = !drop.contains(&i);
                i += 1;
                keep
            });
            let alive: HashSet<u64> = w.landmarks.iter().map(|l| l.id).collect();
            w.cluster.retain(|id| alive.contains(id));
        }
        EnvironmentChange::Displace { ids, delta } => {
            for id in ids {
                let lm = w.landmarks.iter_mut().find(|l| l.id == *id).ok_or(SimError::UnknownLandmark(*id))?;
                lm.position += delta;
            }
        }
        EnvironmentChange::DisplaceCluster { delta } => {
            let ids = w.cluster.clone();
            return apply_environment_change(&w, &EnvironmentChange::Displace { ids, delta: *delta });
        }
        EnvironmentChange::Add { count, region, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            for _ in 0..*count {
                let p = match region {
                    Region::Plane { center, along, half_width, half_height } => {
                        let a = along.normalize();
                        center + a * rng.random_range(-half_width..*half_width) + Vec3::z() * rng.random_range(-half_height..*half_height)
                    }
                    Region::RoomSurface => uniform_on_box(&mut rng, &w.extent.0, &w.extent.1),
                };
                w.landmarks.push(WorldLandmark { id: w.next_id, position: p });
                w.next_id += 1;
            }
        }
    }
    Ok(w)
}

/// Scripted environment variants, applied after the map was built.
pub fn environment_preset(name: &str, world: &WorldModel, seed: u64) -> Option<Vec<EnvironmentChange>> {
    let surfaces = world.len() - world.cluster.len();
    Some(match name {
        "table1" | "none" => Vec::new(),
        "table5" => vec![EnvironmentChange::Remove { fraction: 0.1, surfaces_only: true, seed }],
        "table6" => vec![EnvironmentChange::Add {
            count: world.len() / 10,
            region: Region::Plane {
                center: Vec3::new(0.0, 3.9, 1.5),
                along: Vec3::x(),
                half_width: 1.5,
                half_height: 0.75,
            },
            seed,
        }],
        "table7" => vec![EnvironmentChange::DisplaceCluster { delta: Vec3::new(0.5, 0.0, 0.0) }],
        "table8" => {
            let k = (0.4 * surfaces as f64).round() as usize;
            vec![
                EnvironmentChange::DisplaceCluster { delta: Vec3::new(1.5, 0.0, 0.0) },
                EnvironmentChange::Remove { fraction: 0.4, surfaces_only: true, seed },
                EnvironmentChange::Add { count: k, region: Region::RoomSurface, seed: seed.wrapping_add(1) },
            ]
        }
        _ => return None,
    })
}

/// A pause of the rig, entered and left with smooth velocity ramps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationary {
    pub start: f64,
    pub duration: f64,
    pub ramp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    /// Circle center (horizontal) and mean height in `z`.
    pub center: Vec3,
    pub radius: f64,
    pub vertical_amplitude: f64,
    /// Vertical oscillations per loop.
    pub vertical_cycles: f64,
    pub loops: f64,
    pub duration: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,
    /// Point the rig looks at.
    pub target: Vec3,
    pub stationary: Option<Stationary>,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            center: Vec3::new(0.0, 0.0, 1.4),
            radius: 2.0,
            vertical_amplitude: 0.2,
            vertical_cycles: 3.0,
            loops: 2.0,
            duration: 60.0,
            imu_rate: 200.0,
            camera_rate: 30.0,
            target: Vec3::new(0.0, 0.0, 0.9),
            stationary: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    /// `{ᴵ_G q̄, ᴳp_I}`
    pub pose: Pose,
    pub velocity: Vec3,
    /// Body-frame angular velocity.
    pub angular_velocity: Vec3,
    /// Global-frame acceleration.
    pub acceleration: Vec3,
}

fn smootherstep(x: f64) -> f64 {
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

fn smootherstep_d(x: f64) -> f64 {
    30.0 * x * x * (x - 1.0) * (x - 1.0)
}

fn smootherstep_integral(x: f64) -> f64 {
    x.powi(4) * (x * (x - 3.0) + 2.5)
}

impl TrajectorySpec {
    /// Warped time `τ(t)` and its first two derivatives.
    fn warp(&self, t: f64) -> (f64, f64, f64) {
        let Some(s) = self.stationary else {
            return (t, 1.0, 0.0);
        };
        let a = s.start - s.ramp;
        let b = s.start + s.duration;
        if t <= a {
            (t, 1.0, 0.0)
        } else if t < s.start {
            let x = (t - a) / s.ramp;
            (a + s.ramp * (x - smootherstep_integral(x)), 1.0 - smootherstep(x), -smootherstep_d(x) / s.ramp)
        } else if t <= b {
            (a + 0.5 * s.ramp, 0.0, 0.0)
        } else if t < b + s.ramp {
            let x = (t - b) / s.ramp;
            (a + 0.5 * s.ramp + s.ramp * smootherstep_integral(x), smootherstep(x), smootherstep_d(x) / s.ramp)
        } else {
            (t - s.duration - s.ramp, 1.0, 0.0)
        }
    }

    /// Phase rate so that the warped duration covers `loops` loops.
    fn phase_rate(&self) -> f64 {
        let lost = self.stationary.map(|s| s.duration + s.ramp).unwrap_or(0.0);
        2.0 * std::f64::consts::PI * self.loops / (self.duration - lost)
    }

    /// Duration of one loop when there is no pause.
    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.phase_rate()
    }

    pub fn is_valid(&self) -> bool {
        self.radius > 0.0
            && self.duration > 0.0
            && self.imu_rate > 0.0
            && self.camera_rate > 0.0
            && self.stationary.map(|s| s.duration >= 0.0 && s.ramp > 0.0 && s.start >= s.ramp).unwrap_or(true)
    }

    pub fn camera_times(&self) -> Vec<f64> {
        let n = (self.duration * self.camera_rate).floor() as usize;
        (0..=n).map(|i| i as f64 / self.camera_rate).filter(|t| *t <= self.duration).collect()
    }
}

/// Position and its derivatives in phase `φ`.
fn curve(spec: &TrajectorySpec, phi: f64) -> (Vec3, Vec3, Vec3) {
    let (r, a, k) = (spec.radius, spec.vertical_amplitude, spec.vertical_cycles);
    let (s, c) = phi.sin_cos();
    let (sk, ck) = (k * phi).sin_cos();
    let p = spec.center + Vec3::new(r * c, r * s, a * sk);
    let dp = Vec3::new(-r * s, r * c, a * k * ck);
    let ddp = Vec3::new(-r * c, -r * s, -a * k * k * sk);
    (p, dp, ddp)
}

/// Derivative of `v / |v|` given `v̇`.
fn unit_rate(v: &Vec3, dv: &Vec3) -> (Vec3, Vec3) {
    let n = v.norm();
    let u = v / n;
    (u, (dv - u * u.dot(dv)) / n)
}

/// Closed-form kinematics at time `t`.
pub fn sample_trajectory(spec: &TrajectorySpec, t: f64) -> Result<TrajectorySample, SimError> {
    if !(0.0..=spec.duration + 1e-9).contains(&t) {
        return Err(SimError::OutOfRange { t, duration: spec.duration });
    }
    let w = spec.phase_rate();
    let (tau, dtau, ddtau) = spec.warp(t);
    let phi = w * tau;
    let dphi = w * dtau;
    let ddphi = w * ddtau;
    let (p, dp, ddp) = curve(spec, phi);
    let velocity = dp * dphi;
    let acceleration = ddp * dphi * dphi + dp * ddphi;

    // Look-at frame: z forward, x right, y down; columns of ᴳ_I R.
    let up = Vec3::z();
    let (f, df) = unit_rate(&(spec.target - p), &(-velocity));
    let (r, dr) = unit_rate(&f.cross(&up), &df.cross(&up));
    let d = f.cross(&r);
    let dd = df.cross(&r) + f.cross(&dr);
    let r_gi = Mat3::from_columns(&[r, d, f]);
    let dr_gi = Mat3::from_columns(&[dr, dd, df]);
    let wx = r_gi.transpose() * dr_gi;
    let angular_velocity = Vec3::new(wx[(2, 1)] - wx[(1, 2)], wx[(0, 2)] - wx[(2, 0)], wx[(1, 0)] - wx[(0, 1)]) * 0.5;
    let pose = Pose::new(UnitQuaternion::from_rotation_matrix(&r_gi.transpose()), p);
    Ok(TrajectorySample { time: t, pose, velocity, angular_velocity, acceleration })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    pub readings: Vec<ImuReading>,
    /// True `(b_g, b_a)` at each reading.
    pub biases: Vec<(Vec3, Vec3)>,
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Synthesizes IMU readings at `spec.imu_rate`. With `noise = None` the
/// readings are exact and the biases stay at their initial values.
pub fn synthesize_imu(
    spec: &TrajectorySpec,
    noise: Option<&ImuNoiseParams>,
    initial_bias: (Vec3, Vec3),
    gravity: &Vec3,
    seed: u64,
) -> ImuStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (spec.duration * spec.imu_rate).round() as usize;
    let dt = 1.0 / spec.imu_rate;
    let (mut bg, mut ba) = initial_bias;
    let mut readings = Vec::with_capacity(n + 1);
    let mut biases = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = (i as f64 * dt).min(spec.duration);
        let s = sample_trajectory(spec, t).expect("time inside the trajectory");
        let r = s.pose.rotation_matrix();
        let mut gyro = s.angular_velocity + bg;
        let mut accel = r * (s.acceleration - gravity) + ba;
        if let Some(nz) = noise {
            gyro += gauss3(&mut rng) * (nz.sigma_g / dt.sqrt());
            accel += gauss3(&mut rng) * (nz.sigma_a / dt.sqrt());
        }
        readings.push(ImuReading { timestamp: t, gyro, accel });
        biases.push((bg, ba));
        if let Some(nz) = noise {
            bg += gauss3(&mut rng) * (nz.sigma_wg * dt.sqrt());
            ba += gauss3(&mut rng) * (nz.sigma_wa * dt.sqrt());
        }
    }
    ImuStream { readings, biases }
}

/// A simulated tracker observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFeature {
    pub track: FeatureId,
    /// Ground truth only.
    pub landmark: u64,
    pub pixel: Vector2<f64>,
    pub uv: Vector2<f64>,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub timestamp: f64,
    pub features: Vec<SimFeature>,
}

impl CameraFrame {
    /// What the estimator receives.
    pub fn live_features(&self) -> Vec<LiveFeature> {
        self.features.iter().map(|f| LiveFeature { id: f.track, descriptor: f.descriptor, uv: f.uv }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSimConfig {
    pub pixel_noise: f64,
    pub max_features: usize,
    pub max_range: f64,
    pub z_min: f64,
    pub descriptor_noise: f64,
}

impl Default for CameraSimConfig {
    fn default() -> Self {
        Self { pixel_noise: 1.0, max_features: 100, max_range: 20.0, z_min: 0.1, descriptor_noise: 0.05 }
    }
}

/// Stateful tracker emulation. A landmark keeps its track id while it stays
/// selected; once it drops out, a later sighting starts a new track.
#[derive(Debug, Clone)]
pub struct CameraSynth {
    calib: CameraCalibration,
    cfg: CameraSimConfig,
    rng: ChaCha8Rng,
    active: HashMap<u64, FeatureId>,
    next_track: u64,
}

impl CameraSynth {
    pub fn new(calib: CameraCalibration, cfg: CameraSimConfig, seed: u64) -> Self {
        Self { calib, cfg, rng: ChaCha8Rng::seed_from_u64(seed), active: HashMap::new(), next_track: 0 }
    }

    /// Observes `world` from the IMU pose `imu_pose` at time `t`.
    pub fn frame(&mut self, world: &WorldModel, imu_pose: &Pose, t: f64) -> CameraFrame {
        let cam = self.calib.camera_pose(imu_pose);
        let r = cam.rotation_matrix();
        let mut continuing = Vec::new();
        let mut fresh = Vec::new();
        for lm in &world.landmarks {
            let pc = r * (lm.position - cam.position);
            if !(pc.z > self.cfg.z_min && pc.z < self.cfg.max_range) {
                continue;
            }
            let uv = Vector2::new(pc.x / pc.z, pc.y / pc.z);
            if !self.calib.in_image(&self.calib.to_pixel(&uv)) {
                continue;
            }
            if self.active.contains_key(&lm.id) {
                continuing.push((lm.id, uv));
            } else {
                fresh.push((lm.id, uv));
            }
        }
        fresh.shuffle(&mut self.rng);
        let room = self.cfg.max_features.saturating_sub(continuing.len().min(self.cfg.max_features));
        continuing.truncate(self.cfg.max_features);
        fresh.truncate(room);
        let mut next_active = HashMap::with_capacity(self.cfg.max_features);
        let mut features = Vec::with_capacity(continuing.len() + fresh.len());
        for (id, uv) in continuing.into_iter().chain(fresh) {
            let track = match self.active.get(&id) {
                Some(t) => *t,
                None => {
                    self.next_track += 1;
                    FeatureId(self.next_track)
                }
            };
            next_active.insert(id, track);
            let noise = Vector2::new(StandardNormal.sample(&mut self.rng), StandardNormal.sample(&mut self.rng))
                * self.cfg.pixel_noise;
            let pixel = self.calib.to_pixel(&uv) + noise;
            let descriptor = perturb_descriptor(&world.descriptor(id), self.cfg.descriptor_noise, &mut self.rng);
            features.push(SimFeature { track, landmark: id, pixel, uv: self.calib.normalize(&pixel), descriptor });
        }
        self.active = next_active;
        CameraFrame { timestamp: t, features }
    }
}

/// Camera frames over a whole trajectory, applying `changes` to the world
/// before the first frame.
pub fn synthesize_camera(
    world: &WorldModel,
    spec: &TrajectorySpec,
    calib: &CameraCalibration,
    cfg: &CameraSimConfig,
    seed: u64,
) -> Vec<CameraFrame> {
    let mut synth = CameraSynth::new(*calib, *cfg, seed);
    spec.camera_times()
        .into_iter()
        .map(|t| {
            let s = sample_trajectory(spec, t).expect("camera time inside the trajectory");
            synth.frame(world, &s.pose, t)
        })
        .collect()
}
