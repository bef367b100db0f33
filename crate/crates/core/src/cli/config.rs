use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimatorConfig, MapAidConfig};
use crate::geometry::{Sim3Transform, UnitQuaternion, Vec3};
use crate::map_oracle::{MapBuildOptions, RenderQuality};
use crate::propagation::{ImuNoiseParams, PropagationConfig};
use crate::simulator::{Stationary, TrajectorySpec, WorldSpec};
use crate::state::chi2_quantile;
use crate::vision::{CameraCalibration, VisionConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Odometry,
    MapAided,
}

impl Mode {
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "odometry" | "odometry-only" => Some(Self::Odometry),
            "map-aided" | "map" => Some(Self::MapAided),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Odometry => "odometry",
            Self::MapAided => "map-aided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub center: [f64; 3],
    pub radius: f64,
    pub vertical_amplitude: f64,
    pub vertical_cycles: f64,
    pub loops: f64,
    pub duration: f64,
    pub imu_rate: f64,
    pub camera_rate: f64,
    pub target: [f64; 3],
    /// Start, duration and ramp of an optional pause, seconds.
    pub stationary: Option<[f64; 3]>,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let s = TrajectorySpec::default();
        Self {
            center: s.center.into(),
            radius: s.radius,
            vertical_amplitude: s.vertical_amplitude,
            vertical_cycles: s.vertical_cycles,
            loops: s.loops,
            duration: s.duration,
            imu_rate: s.imu_rate,
            camera_rate: s.camera_rate,
            target: s.target.into(),
            stationary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    /// Environment script applied after mapping: `table1` (none) or
    /// `table5`..`table8`.
    pub preset: String,
    pub surface_landmarks: usize,
    pub cluster_landmarks: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldSpec::default();
        Self { preset: "table1".into(), surface_landmarks: w.surface_landmarks, cluster_landmarks: w.cluster_landmarks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma_g: f64,
    pub sigma_a: f64,
    pub sigma_wg: f64,
    pub sigma_wa: f64,
    pub gravity: [f64; 3],
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = ImuNoiseParams::default();
        Self {
            sigma_g: n.sigma_g,
            sigma_a: n.sigma_a,
            sigma_wg: n.sigma_wg,
            sigma_wa: n.sigma_wa,
            gravity: PropagationConfig::default().gravity.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub sigma_px: f64,
    /// `ᶜ_I q̄` as `[x, y, z, w]`.
    pub rot_ci: [f64; 4],
    pub p_ci: [f64; 3],
    pub max_features: usize,
    pub max_range: f64,
}

impl Default for CameraSection {
    fn default() -> Self {
        let c = CameraCalibration::default();
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            sigma_px: c.sigma_px,
            rot_ci: c.rot_ci.coords(),
            p_ci: c.p_ci.into(),
            max_features: 100,
            max_range: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub window: usize,
    pub max_slam: usize,
    pub promote_after: usize,
    pub first_estimates: bool,
    pub min_baseline: f64,
    pub reprojection_gate_px: f64,
    /// Probability of the geometric verification gate.
    pub map_gate_probability: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            window: 11,
            max_slam: 15,
            promote_after: 11,
            first_estimates: true,
            min_baseline: 0.02,
            reprojection_gate_px: 5.0,
            map_gate_probability: 0.9973,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub sigma_theta: f64,
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub sigma_bg: f64,
    pub sigma_ba: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self { sigma_theta: 0.005, sigma_p: 0.01, sigma_v: 0.01, sigma_bg: 1e-3, sigma_ba: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    /// `full`, `half` or `low`.
    pub quality: String,
    pub latency_frames: usize,
    pub offset: f64,
    pub ratio: f64,
    pub scale: f64,
    /// `ᴺ_G q̄` as `[x, y, z, w]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    /// Poses of the mapping pass; keyframes are every `keyframe_stride`-th.
    pub mapping_poses: usize,
    pub keyframe_stride: usize,
    pub keyframe_noise: f64,
    pub landmark_noise: f64,
    /// Render on a worker thread (not deterministic).
    pub threaded: bool,
    /// Load this map instead of building one.
    pub file: Option<PathBuf>,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            quality: "half".into(),
            latency_frames: 2,
            offset: 0.10,
            ratio: 0.8,
            scale: 1.0,
            rotation: [0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
            mapping_poses: 5430,
            keyframe_stride: 10,
            keyframe_noise: 0.0,
            landmark_noise: 0.0,
            threaded: false,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// `none`, `se3` or `sim3`.
    pub alignment: String,
    pub rpe_lengths: Vec<f64>,
    pub recall_thresholds: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            alignment: "se3".into(),
            rpe_lengths: vec![2.0, 5.0, 10.0, 20.0],
            recall_thresholds: (1..=20).map(|i| i as f64 * 0.005).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of sensor noise, initial error and renders.
    pub seed: u64,
    /// Seed of the world and the map.
    pub world_seed: u64,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub trajectory: TrajectorySection,
    pub world: WorldSection,
    pub noise: NoiseSection,
    pub camera: CameraSection,
    pub filter: FilterSection,
    pub initial: InitialSection,
    pub map: MapSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world_seed: 7,
            mode: Mode::MapAided,
            output_dir: PathBuf::from("out"),
            trajectory: Default::default(),
            world: Default::default(),
            noise: Default::default(),
            camera: Default::default(),
            filter: Default::default(),
            initial: Default::default(),
            map: Default::default(),
            evaluation: Default::default(),
        }
    }
}

fn quat(field: &'static str, q: [f64; 4]) -> Result<UnitQuaternion, ConfigError> {
    UnitQuaternion::new(q[0], q[1], q[2], q[3]).map_err(|e| invalid(field, e.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field; the first problem is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.trajectory_spec().is_valid() {
            return Err(invalid("trajectory", "radius, duration and rates must be positive; pauses need a ramp"));
        }
        if !self.noise_params().is_valid() {
            return Err(invalid("noise", "densities must be positive"));
        }
        let calib = self.calibration()?;
        if !calib.is_valid() {
            return Err(invalid("camera", "focal lengths, image size and sigma must be positive"));
        }
        if self.camera.max_features == 0 {
            return Err(invalid("camera.max_features", "must be positive"));
        }
        let f = &self.filter;
        if f.window < 2 {
            return Err(invalid("filter.window", "needs at least 2 clones"));
        }
        if f.promote_after < 2 {
            return Err(invalid("filter.promote_after", "must be at least 2"));
        }
        if !(f.map_gate_probability > 0.0 && f.map_gate_probability < 1.0) {
            return Err(invalid("filter.map_gate_probability", "must be in (0, 1)"));
        }
        if !(f.min_baseline >= 0.0 && f.reprojection_gate_px > 0.0) {
            return Err(invalid("filter", "baseline must be non-negative and the reprojection gate positive"));
        }
        let i = &self.initial;
        if [i.sigma_theta, i.sigma_p, i.sigma_v, i.sigma_bg, i.sigma_ba].iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("initial", "standard deviations must be positive"));
        }
        let q = self.render_quality()?;
        if !q.is_valid() {
            return Err(invalid("map.quality", "invalid preset"));
        }
        self.map_transform()?;
        if !(self.map.ratio > 0.0 && self.map.ratio <= 1.0) {
            return Err(invalid("map.ratio", "must be in (0, 1]"));
        }
        if self.map.keyframe_stride == 0 || self.map.mapping_poses == 0 {
            return Err(invalid("map", "mapping poses and keyframe stride must be positive"));
        }
        if self.map.keyframe_noise < 0.0 || self.map.landmark_noise < 0.0 || self.map.offset < 0.0 {
            return Err(invalid("map", "noise levels and offset must be non-negative"));
        }
        if crate::evaluation::Alignment::by_name(&self.evaluation.alignment).is_none() {
            return Err(invalid("evaluation.alignment", format!("unknown alignment `{}`", self.evaluation.alignment)));
        }
        if self.evaluation.rpe_lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(invalid("evaluation.rpe_lengths", "lengths must be positive"));
        }
        if !matches!(self.world.preset.as_str(), "table1" | "none" | "table5" | "table6" | "table7" | "table8") {
            return Err(invalid("world.preset", format!("unknown preset `{}`", self.world.preset)));
        }
        Ok(())
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        let t = &self.trajectory;
        TrajectorySpec {
            center: Vec3::from(t.center),
            radius: t.radius,
            vertical_amplitude: t.vertical_amplitude,
            vertical_cycles: t.vertical_cycles,
            loops: t.loops,
            duration: t.duration,
            imu_rate: t.imu_rate,
            camera_rate: t.camera_rate,
            target: Vec3::from(t.target),
            stationary: t.stationary.map(|s| Stationary { start: s[0], duration: s[1], ramp: s[2] }),
        }
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            surface_landmarks: self.world.surface_landmarks,
            cluster_landmarks: self.world.cluster_landmarks,
            ..Default::default()
        }
    }

    pub fn noise_params(&self) -> ImuNoiseParams {
        let n = &self.noise;
        ImuNoiseParams { sigma_g: n.sigma_g, sigma_a: n.sigma_a, sigma_wg: n.sigma_wg, sigma_wa: n.sigma_wa }
    }

    pub fn calibration(&self) -> Result<CameraCalibration, ConfigError> {
        let c = &self.camera;
        Ok(CameraCalibration {
            rot_ci: quat("camera.rot_ci", c.rot_ci)?,
            p_ci: Vec3::from(c.p_ci),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            sigma_px: c.sigma_px,
        })
    }

    pub fn render_quality(&self) -> Result<RenderQuality, ConfigError> {
        let mut q = RenderQuality::by_name(&self.map.quality)
            .ok_or_else(|| invalid("map.quality", format!("unknown preset `{}`", self.map.quality)))?;
        q.latency_frames = self.map.latency_frames;
        q.max_range = self.camera.max_range;
        Ok(q)
    }

    pub fn map_transform(&self) -> Result<Sim3Transform, ConfigError> {
        let m = &self.map;
        Sim3Transform::new(m.scale, quat("map.rotation", m.rotation)?, Vec3::from(m.translation))
            .map_err(|e| invalid("map.scale", e.to_string()))
    }

    pub fn map_build_options(&self) -> MapBuildOptions {
        MapBuildOptions {
            stride: self.map.keyframe_stride,
            keyframe_noise: self.map.keyframe_noise,
            landmark_noise: self.map.landmark_noise,
        }
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig, ConfigError> {
        let calib = self.calibration()?;
        let f = &self.filter;
        let vision = VisionConfig {
            min_baseline: f.min_baseline,
            reprojection_gate: f.reprojection_gate_px / calib.fx,
            map_gate: chi2_quantile(f.map_gate_probability, 2),
            first_estimates: f.first_estimates,
            ..VisionConfig::for_camera(&calib)
        };
        Ok(EstimatorConfig {
            window: f.window,
            max_slam: f.max_slam,
            promote_after: f.promote_after,
            vision,
            noise: self.noise_params(),
            propagation: PropagationConfig {
                gravity: Vec3::from(self.noise.gravity),
                first_estimates: f.first_estimates,
                ..Default::default()
            },
            camera_rate: self.trajectory.camera_rate,
        })
    }

    pub fn map_aid_config(&self) -> Result<MapAidConfig, ConfigError> {
        Ok(MapAidConfig {
            transform: self.map_transform()?,
            offset: self.map.offset,
            ratio: self.map.ratio,
            latency_frames: self.map.latency_frames,
        })
    }
}
