use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use super::config::{ConfigError, ExperimentConfig, Mode};
use super::files::{self, FileError};
use crate::estimator::{
    Estimator, EstimatorError, EstimatorStats, FrameInput, InlineRenderer, MapDiagnostics, RenderBackend, StageTimes,
    ThreadedRenderer,
};
use crate::evaluation::{self, Alignment, Ate, EvalError, Nees, RpeStats, TrajectoryLog};
use crate::map_oracle::{build_map, load_map, save_map, MapError, PriorMap};
use crate::propagation::{imu_plus, ImuReading};
use crate::simulator::{
    apply_environment_change, build_world, environment_preset, sample_trajectory, synthesize_imu, CameraFrame,
    CameraSimConfig, CameraSynth, SimError, TrajectorySample, WorldModel,
};
use crate::state::ImuState;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    File(#[from] FileError),
}

/// Sensor streams and ground truth of one run.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// The world as mapped.
    pub mapped_world: WorldModel,
    /// The world observed during the run.
    pub live_world: WorldModel,
    pub imu: Vec<ImuReading>,
    pub frames: Vec<CameraFrame>,
    pub truth: Vec<TrajectorySample>,
    pub initial_truth: ImuState,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// The world before and after the configured environment script.
pub fn worlds(cfg: &ExperimentConfig) -> Result<(WorldModel, WorldModel), ExperimentError> {
    let mapped = build_world(&cfg.world_spec(), cfg.world_seed);
    let mut live = mapped.clone();
    let script = environment_preset(&cfg.world.preset, &mapped, sub_seed(cfg.world_seed, 11)).unwrap_or_default();
    for step in &script {
        live = apply_environment_change(&live, step)?;
    }
    Ok((mapped, live))
}

pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario, ExperimentError> {
    cfg.validate()?;
    let spec = cfg.trajectory_spec();
    let calib = cfg.calibration()?;
    let (mapped_world, live_world) = worlds(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let i = &cfg.initial;
    let mut bias = [0.0; 6];
    for (k, b) in bias.iter_mut().enumerate() {
        let s = if k < 3 { i.sigma_bg } else { i.sigma_ba };
        *b = s * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    let bg = crate::geometry::Vec3::new(bias[0], bias[1], bias[2]);
    let ba = crate::geometry::Vec3::new(bias[3], bias[4], bias[5]);
    let gravity = crate::geometry::Vec3::from(cfg.noise.gravity);
    let stream = synthesize_imu(&spec, Some(&cfg.noise_params()), (bg, ba), &gravity, sub_seed(cfg.seed, 2));

    let cam_cfg = CameraSimConfig {
        max_features: cfg.camera.max_features,
        max_range: cfg.camera.max_range,
        ..Default::default()
    };
    let mut synth = CameraSynth::new(calib, cam_cfg, sub_seed(cfg.seed, 3));
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    for t in spec.camera_times() {
        let s = sample_trajectory(&spec, t)?;
        frames.push(synth.frame(&live_world, &s.pose, t));
        truth.push(s);
    }
    let s0 = truth[0];
    let initial_truth = ImuState {
        orientation: s0.pose.rotation,
        position: s0.pose.position,
        velocity: s0.velocity,
        gyro_bias: bg,
        accel_bias: ba,
    };
    Ok(Scenario { mapped_world, live_world, imu: stream.readings, frames, truth, initial_truth })
}

/// Builds the prior map of the configured world from a mapping pass over
/// the trajectory.
pub fn build_prior_map(cfg: &ExperimentConfig) -> Result<PriorMap, ExperimentError> {
    cfg.validate()?;
    let spec = cfg.trajectory_spec();
    let calib = cfg.calibration()?;
    let (mapped, _) = worlds(cfg)?;
    let n = cfg.map.mapping_poses;
    let mut cams = Vec::with_capacity(n);
    for k in 0..n {
        let t = spec.duration * k as f64 / n as f64;
        cams.push(calib.camera_pose(&sample_trajectory(&spec, t)?.pose));
    }
    Ok(build_map(&mapped.as_pairs(), &cams, cfg.map_transform()?, cfg.map_build_options(), cfg.world_seed)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mode: Mode,
    pub frames: usize,
    pub ate: Ate,
    pub rpe: Vec<RpeStats>,
    pub nees: Option<Nees>,
    pub recall: Vec<(f64, f64)>,
    pub max_position_error: f64,
    /// Median over frames of `sqrt(tr P_pp)`.
    pub median_position_sigma: f64,
    pub keyframes: Option<usize>,
}

pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub estimate: TrajectoryLog,
    pub truth: TrajectoryLog,
    pub imu: Vec<ImuReading>,
    pub diagnostics: Vec<MapDiagnostics>,
    pub stats: EstimatorStats,
    pub times: StageTimes,
    pub wall_time: Duration,
    pub summary: Summary,
}

fn initial_covariance(cfg: &ExperimentConfig) -> DMatrix<f64> {
    let i = &cfg.initial;
    let sig = [i.sigma_theta, i.sigma_p, i.sigma_v, i.sigma_bg, i.sigma_ba];
    DMatrix::from_fn(15, 15, |r, c| if r == c { sig[r / 3] * sig[r / 3] } else { 0.0 })
}

/// Runs the configured experiment, building the map when needed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    let map = match (cfg.mode, &cfg.map.file) {
        (Mode::Odometry, _) => None,
        (Mode::MapAided, Some(path)) => Some(Arc::new(load_map(path)?)),
        (Mode::MapAided, None) => Some(Arc::new(build_prior_map(cfg)?)),
    };
    run_with_map(cfg, map)
}

/// Runs the filter over a synthesized scenario with an existing map.
pub fn run_with_map(cfg: &ExperimentConfig, map: Option<Arc<PriorMap>>) -> Result<RunArtifacts, ExperimentError> {
    let start = Instant::now();
    let scenario = build_scenario(cfg)?;
    let calib = cfg.calibration()?;
    let p0 = initial_covariance(cfg);

    // initial estimate = truth ⊞ (−e) with e ~ N(0, P0)
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
    let l = p0.clone().cholesky().expect("diagonal prior").l();
    let z = DMatrix::from_fn(15, 1, |_, _| StandardNormal.sample(&mut rng));
    let e = &l * z;
    let e = SMatrix::<f64, 15, 1>::from_iterator(e.iter().map(|v| -v));
    let imu0 = imu_plus(&scenario.initial_truth, &e);

    let mut est = Estimator::new(cfg.estimator_config()?, calib, scenario.truth[0].time, imu0, p0)
        .map_err(|source| EstimatorError::State { frame: 0, source })?;
    let keyframes = map.as_ref().map(|m| m.keyframes.len());
    if let (Mode::MapAided, Some(map)) = (cfg.mode, map) {
        let quality = cfg.render_quality()?;
        let seed = sub_seed(cfg.seed, 5);
        let backend: Box<dyn RenderBackend> = if cfg.map.threaded {
            Box::new(ThreadedRenderer::new(map, calib, quality, seed))
        } else {
            Box::new(InlineRenderer::new(map, calib, quality, seed))
        };
        est = est.with_map(cfg.map_aid_config()?, backend);
    }

    let imu = &scenario.imu;
    let mut estimate = TrajectoryLog::new();
    let mut truth = TrajectoryLog::new();
    let mut prev_t = scenario.truth[0].time;
    for (frame, gt) in scenario.frames.iter().zip(&scenario.truth) {
        let t = frame.timestamp;
        let lo = imu.partition_point(|r| r.timestamp <= prev_t).saturating_sub(1);
        let hi = (imu.partition_point(|r| r.timestamp < t) + 1).min(imu.len());
        let input = FrameInput { timestamp: t, features: frame.live_features() };
        let out = est.process(&imu[lo..hi], &input)?;
        estimate.push(t, out.pose, Some(out.pose_covariance))?;
        truth.push(t, gt.pose, None)?;
        prev_t = t;
    }

    let summary = summarize(cfg, &estimate, &truth, keyframes)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        estimate,
        truth,
        imu: scenario.imu,
        diagnostics: est.diagnostics.clone(),
        stats: est.stats,
        times: est.times,
        wall_time: start.elapsed(),
        summary,
    })
}

pub fn summarize(
    cfg: &ExperimentConfig,
    estimate: &TrajectoryLog,
    truth: &TrajectoryLog,
    keyframes: Option<usize>,
) -> Result<Summary, ExperimentError> {
    let alignment = Alignment::by_name(&cfg.evaluation.alignment).unwrap_or(Alignment::Se3);
    let ate = evaluation::ate(estimate, truth, alignment)?;
    let rpe = evaluation::rpe(estimate, truth, &cfg.evaluation.rpe_lengths).unwrap_or_default();
    let nees = evaluation::nees(estimate, truth).ok();
    let recall = evaluation::recall_curve(estimate, truth, &cfg.evaluation.recall_thresholds);
    let errors = evaluation::position_errors(estimate, truth);
    let mut sigmas: Vec<f64> = estimate
        .entries()
        .iter()
        .filter_map(|e| e.covariance.map(|c| c.fixed_view::<3, 3>(3, 3).trace().sqrt()))
        .collect();
    sigmas.sort_by(f64::total_cmp);
    let median_position_sigma = sigmas.get(sigmas.len() / 2).copied().unwrap_or(f64::NAN);
    Ok(Summary {
        mode: cfg.mode,
        frames: estimate.len(),
        ate,
        rpe,
        nees,
        recall,
        max_position_error: errors.iter().copied().fold(0.0, f64::max),
        median_position_sigma,
        keyframes,
    })
}

impl RunArtifacts {
    /// Scalar metrics in a stable order; positions in cm, angles in degrees.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let s = &self.summary;
        let st = &self.stats;
        let mut m = vec![
            ("frames".to_string(), s.frames as f64),
            ("ate_rotation_deg".into(), s.ate.rotation_deg),
            ("ate_position_cm".into(), s.ate.position_m * 100.0),
            ("max_position_error_cm".into(), s.max_position_error * 100.0),
            ("median_position_sigma_cm".into(), s.median_position_sigma * 100.0),
            ("nees_average".into(), s.nees.as_ref().map(|n| n.average).unwrap_or(f64::NAN)),
            ("msckf_features".into(), st.msckf_features as f64),
            ("msckf_rejected".into(), st.msckf_rejected as f64),
            ("slam_promoted".into(), st.promoted as f64),
            ("map_matches".into(), st.map_matches as f64),
            ("map_rows_slam".into(), st.map_rows_slam as f64),
            ("map_rows_msckf".into(), st.map_rows_msckf as f64),
            ("renders_delivered".into(), st.renders_delivered as f64),
            ("renders_stale".into(), st.renders_stale as f64),
            ("max_nullspace_residual".into(), st.max_nullspace_residual),
        ];
        for r in &s.rpe {
            m.push((format!("rpe_median_{}m_cm", r.length), r.translation.median * 100.0));
        }
        m
    }

    /// Wall-clock time per pipeline stage, milliseconds per frame.
    pub fn timing_table(&self) -> Vec<(&'static str, f64)> {
        let n = self.summary.frames.max(1) as f64;
        let ms = |d: Duration| d.as_secs_f64() * 1e3 / n;
        let t = &self.times;
        vec![
            ("propagation", ms(t.propagation)),
            ("tracking", ms(t.tracking)),
            ("rendering", ms(t.rendering)),
            ("matching", ms(t.matching)),
            ("msckf", ms(t.msckf)),
            ("update", ms(t.update)),
            ("marginalization", ms(t.marginalization)),
            ("total", ms(t.total())),
        ]
    }

    pub fn summary_text(&self) -> String {
        let s = &self.summary;
        let mut out = format!(
            "mode: {}\nframes: {}\nATE: {:.3} deg / {:.2} cm ({} alignment)\n",
            s.mode.name(),
            s.frames,
            s.ate.rotation_deg,
            s.ate.position_m * 100.0,
            self.config.evaluation.alignment
        );
        if let Some(n) = &s.nees {
            out += &format!("NEES: {:.2} (95% interval {:.2}..{:.2})\n", n.average, n.interval.0, n.interval.1);
        }
        for r in &s.rpe {
            out += &format!("RPE {} m: median {:.2} cm\n", r.length, r.translation.median * 100.0);
        }
        let st = &self.stats;
        out += &format!(
            "map: {} renders delivered, {} stale, {} matches, {} SLAM rows, {} MSCKF rows\n",
            st.renders_delivered, st.renders_stale, st.map_matches, st.map_rows_slam, st.map_rows_msckf
        );
        if let Some(k) = s.keyframes {
            out += &format!("map keyframes: {k}\n");
        }
        out += "timing (ms/frame):";
        for (k, v) in self.timing_table() {
            out += &format!(" {k}={v:.3}");
        }
        out += &format!("\nwall time: {:.2} s\n", self.wall_time.as_secs_f64());
        out
    }

    /// Writes all run artifacts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|source| FileError::Io { path: dir.into(), source })?;
        files::write_file(&dir.join("trajectory_est.csv"), &files::trajectory_csv(&self.estimate))?;
        files::write_file(&dir.join("trajectory_gt.csv"), &files::trajectory_csv(&self.truth))?;
        files::write_file(&dir.join("imu.csv"), &files::imu_csv(&self.imu))?;
        files::write_file(&dir.join("diagnostics.csv"), &files::diagnostics_csv(&self.diagnostics))?;
        files::write_file(&dir.join("metrics.csv"), &files::metrics_csv(&self.metrics()))?;
        files::write_file(&dir.join("rpe.csv"), &files::rpe_csv(&self.summary.rpe))?;
        files::write_file(&dir.join("recall.csv"), &files::recall_csv(&self.summary.recall))?;
        let timing: Vec<(String, f64)> = self.timing_table().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        files::write_file(&dir.join("timing.csv"), &files::metrics_csv(&timing))?;
        files::write_file(&dir.join("summary.txt"), &self.summary_text())?;
        Ok(())
    }
}

/// Builds and saves the configured map; returns it.
pub fn build_map_to(cfg: &ExperimentConfig, path: &Path) -> Result<PriorMap, ExperimentError> {
    let map = build_prior_map(cfg)?;
    save_map(&map, path)?;
    Ok(map)
}

/// Metrics of an estimate file against a ground-truth file.
pub struct Evaluation {
    pub ate: Ate,
    pub rpe: Vec<RpeStats>,
    pub recall: Vec<(f64, f64)>,
}

pub fn evaluate_files(
    est: &Path,
    gt: &Path,
    alignment: Alignment,
    lengths: &[f64],
    thresholds: &[f64],
) -> Result<Evaluation, ExperimentError> {
    let e = files::read_trajectory(est)?;
    let g = files::read_trajectory(gt)?;
    let ate = evaluation::ate(&e, &g, alignment)?;
    let rpe = evaluation::rpe(&e, &g, lengths)?;
    let recall = evaluation::recall_curve(&e, &g, thresholds);
    Ok(Evaluation { ate, rpe, recall })
}

impl Evaluation {
    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|source| FileError::Io { path: dir.into(), source })?;
        let metrics = vec![
            ("ate_rotation_deg".to_string(), self.ate.rotation_deg),
            ("ate_position_cm".to_string(), self.ate.position_m * 100.0),
            ("pairs".to_string(), self.ate.pairs as f64),
        ];
        files::write_file(&dir.join("metrics.csv"), &files::metrics_csv(&metrics))?;
        files::write_file(&dir.join("rpe.csv"), &files::rpe_csv(&self.rpe))?;
        files::write_file(&dir.join("recall.csv"), &files::recall_csv(&self.recall))?;
        Ok(())
    }
}

