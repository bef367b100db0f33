//! The filter loop: propagation, cloning, feature bookkeeping, render
//! scheduling and one stacked EKF update per camera frame.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix6};
use thiserror::Error;

use crate::geometry::{Pose, Sim3Transform};
use crate::map_oracle::{match_view, Correspondence, render, LiveFeature, PriorMap, RenderQuality, RenderTruth, RenderedView};
use crate::map_update::{
    check_trigger, map_landmark_rows, map_mahalanobis, plan_render, MapMeasurement, RenderRequest, RenderScheduler,
    DEFAULT_RENDER_OFFSET,
};
use crate::propagation::{propagate, ImuNoiseParams, ImuReading, PropagationConfig, PropagationError};
use crate::state::{CloneId, FeatureId, ImuState, StateError, StateVector, VarKey};
use crate::vision::{
    apply_rows, build_feature_system, initialize_landmark, msckf_rows, slam_rows, BearingMeasurement,
    CameraCalibration, FeatureTrack, RowBlock, TrackStatus, VisionConfig,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("frame {frame}: propagation failed: {source}")]
    Propagation { frame: usize, source: PropagationError },
    #[error("frame {frame}: state operation failed: {source}")]
    State { frame: usize, source: StateError },
    #[error("frame {frame}: render {id} was never delivered")]
    LostRender { frame: usize, id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Clones kept in the window.
    pub window: usize,
    /// Capacity of in-state landmarks.
    pub max_slam: usize,
    /// Track length needed for promotion into the state.
    pub promote_after: usize,
    pub vision: VisionConfig,
    pub noise: ImuNoiseParams,
    pub propagation: PropagationConfig,
    pub camera_rate: f64,
}

impl EstimatorConfig {
    pub fn for_camera(calib: &CameraCalibration) -> Self {
        Self {
            window: 11,
            max_slam: 15,
            promote_after: 11,
            vision: VisionConfig::for_camera(calib),
            noise: ImuNoiseParams::default(),
            propagation: PropagationConfig::default(),
            camera_rate: 30.0,
        }
    }

    /// Time spanned by a full window.
    pub fn window_span(&self) -> f64 {
        self.window as f64 / self.camera_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapAidConfig {
    /// Known map transform.
    pub transform: Sim3Transform,
    pub offset: f64,
    /// Descriptor ratio-test threshold.
    pub ratio: f64,
    pub latency_frames: usize,
}

impl Default for MapAidConfig {
    fn default() -> Self {
        Self { transform: Sim3Transform::identity(), offset: DEFAULT_RENDER_OFFSET, ratio: 0.8, latency_frames: 2 }
    }
}

/// Source of rendered views.
pub trait RenderBackend {
    fn submit(&mut self, request: RenderRequest);
    /// Blocks until the result of `id` is available.
    fn wait(&mut self, id: u64) -> Option<RenderedView>;
    /// Returns a finished result if one is ready.
    fn poll(&mut self) -> Option<RenderedView>;
    /// Whether results arrive on their own schedule (threaded mode).
    fn asynchronous(&self) -> bool;
    /// Hidden render truth, for evaluation only.
    fn truths(&self) -> &[(u64, RenderTruth)];
}

fn render_seed(seed: u64, id: u64) -> u64 {
    seed ^ id.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Renders on the filter thread when the result is requested.
pub struct InlineRenderer {
    map: Arc<PriorMap>,
    calib: CameraCalibration,
    quality: RenderQuality,
    seed: u64,
    pending: BTreeMap<u64, RenderRequest>,
    truths: Vec<(u64, RenderTruth)>,
}

impl InlineRenderer {
    pub fn new(map: Arc<PriorMap>, calib: CameraCalibration, quality: RenderQuality, seed: u64) -> Self {
        Self { map, calib, quality, seed, pending: BTreeMap::new(), truths: Vec::new() }
    }
}

impl RenderBackend for InlineRenderer {
    fn submit(&mut self, request: RenderRequest) {
        self.pending.insert(request.id, request);
    }

    fn wait(&mut self, id: u64) -> Option<RenderedView> {
        let req = self.pending.remove(&id)?;
        let r = render(&self.map, &req, &self.calib, &self.quality, render_seed(self.seed, id));
        self.truths.push((id, r.truth));
        Some(r.view)
    }

    fn poll(&mut self) -> Option<RenderedView> {
        let id = *self.pending.keys().next()?;
        self.wait(id)
    }

    fn asynchronous(&self) -> bool {
        false
    }

    fn truths(&self) -> &[(u64, RenderTruth)] {
        &self.truths
    }
}

/// Renders on a worker thread; the filter never blocks on it.
pub struct ThreadedRenderer {
    jobs: Option<Sender<RenderRequest>>,
    results: Receiver<crate::map_oracle::Render>,
    worker: Option<JoinHandle<()>>,
    truths: Vec<(u64, RenderTruth)>,
}

impl ThreadedRenderer {
    pub fn new(map: Arc<PriorMap>, calib: CameraCalibration, quality: RenderQuality, seed: u64) -> Self {
        let (jobs, job_rx) = channel::<RenderRequest>();
        let (res_tx, results) = channel();
        let worker = std::thread::spawn(move || {
            for req in job_rx {
                let r = render(&map, &req, &calib, &quality, render_seed(seed, req.id));
                if res_tx.send(r).is_err() {
                    break;
                }
            }
        });
        Self { jobs: Some(jobs), results, worker: Some(worker), truths: Vec::new() }
    }

    fn take(&mut self, r: crate::map_oracle::Render) -> RenderedView {
        self.truths.push((r.view.context.id, r.truth));
        r.view
    }
}

impl RenderBackend for ThreadedRenderer {
    fn submit(&mut self, request: RenderRequest) {
        if let Some(tx) = &self.jobs {
            // a send error means the worker is gone; wait() then reports it
            let _ = tx.send(request);
        }
    }

    fn wait(&mut self, id: u64) -> Option<RenderedView> {
        while let Ok(r) = self.results.recv() {
            if r.view.context.id == id {
                return Some(self.take(r));
            }
        }
        None
    }

    fn poll(&mut self) -> Option<RenderedView> {
        let r = self.results.try_recv().ok()?;
        Some(self.take(r))
    }

    fn asynchronous(&self) -> bool {
        true
    }

    fn truths(&self) -> &[(u64, RenderTruth)] {
        &self.truths
    }
}

impl Drop for ThreadedRenderer {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// One camera frame as seen by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub timestamp: f64,
    pub features: Vec<LiveFeature>,
}

/// Pose estimate after a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEstimate {
    pub frame: usize,
    pub timestamp: f64,
    /// `{ᴵ_G q̄, ᴳp_I}`
    pub pose: Pose,
    /// Covariance of `[θ p]`.
    pub pose_covariance: Matrix6<f64>,
}

/// One row per delivered render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapDiagnostics {
    pub frame: usize,
    pub timestamp: f64,
    pub render_id: u64,
    pub trigger: CloneId,
    pub latency_frames: usize,
    pub rendered: usize,
    pub matches: usize,
    /// Matches to in-state landmarks that produced rows.
    pub slam_rows: usize,
    /// Matches attached to live tracks.
    pub attached: usize,
    pub rejected: usize,
    pub stale: bool,
    pub stale_total: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub propagation: Duration,
    pub tracking: Duration,
    pub rendering: Duration,
    pub matching: Duration,
    pub msckf: Duration,
    pub update: Duration,
    pub marginalization: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.propagation
            + self.tracking
            + self.rendering
            + self.matching
            + self.msckf
            + self.update
            + self.marginalization
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EstimatorStats {
    pub frames: usize,
    pub msckf_features: usize,
    pub msckf_rejected: usize,
    pub promoted: usize,
    pub slam_rows: usize,
    pub map_matches: usize,
    pub map_rows_slam: usize,
    pub map_rows_msckf: usize,
    pub renders_delivered: u64,
    pub renders_stale: u64,
    /// Largest `|Nᵀ H_f|` entry seen.
    pub max_nullspace_residual: f64,
    /// Features whose projected system did not have `2m − 3` rows.
    pub row_count_violations: usize,
}

struct Pending {
    trigger_frame: usize,
    features: Vec<LiveFeature>,
}

pub struct Estimator {
    cfg: EstimatorConfig,
    calib: CameraCalibration,
    state: StateVector,
    tracks: BTreeMap<FeatureId, FeatureTrack>,
    frame: usize,
    map_aid: Option<(MapAidConfig, Box<dyn RenderBackend>, RenderScheduler)>,
    pending: HashMap<u64, Pending>,
    pub stats: EstimatorStats,
    pub times: StageTimes,
    pub diagnostics: Vec<MapDiagnostics>,
}

impl Estimator {
    pub fn new(
        cfg: EstimatorConfig,
        calib: CameraCalibration,
        timestamp: f64,
        imu: ImuState,
        imu_cov: DMatrix<f64>,
    ) -> Result<Self, StateError> {
        Ok(Self {
            cfg,
            calib,
            state: StateVector::new(timestamp, imu, imu_cov, cfg.window)?,
            tracks: BTreeMap::new(),
            frame: 0,
            map_aid: None,
            pending: HashMap::new(),
            stats: EstimatorStats::default(),
            times: StageTimes::default(),
            diagnostics: Vec::new(),
        })
    }

    /// Enables map-aided updates.
    pub fn with_map(mut self, aid: MapAidConfig, backend: Box<dyn RenderBackend>) -> Self {
        let sched = RenderScheduler::new(aid.latency_frames);
        self.map_aid = Some((aid, backend, sched));
        self
    }

    pub fn state(&self) -> &StateVector {
        &self.state
    }

    pub fn tracks(&self) -> &BTreeMap<FeatureId, FeatureTrack> {
        &self.tracks
    }

    pub fn render_truths(&self) -> &[(u64, RenderTruth)] {
        self.map_aid.as_ref().map(|m| m.1.truths()).unwrap_or(&[])
    }

    /// Processes one camera frame, given IMU readings covering the interval
    /// since the previous frame.
    pub fn process(&mut self, readings: &[ImuReading], input: &FrameInput) -> Result<FrameEstimate, EstimatorError> {
        let frame = self.frame;
        let cfg = self.cfg;
        let state_err = |source| EstimatorError::State { frame, source };

        let t0 = Instant::now();
        propagate(&mut self.state, readings, input.timestamp, &cfg.noise, &cfg.propagation)
            .map_err(|source| EstimatorError::Propagation { frame, source })?;
        let clone = CloneId(frame as u64);
        self.state.augment_clone(clone, input.timestamp).map_err(state_err)?;
        let t1 = Instant::now();
        self.times.propagation += t1 - t0;

        let slam_meas = self.ingest(input, clone);
        let t2 = Instant::now();
        self.times.tracking += t2 - t1;

        let mut rows: Vec<RowBlock> = Vec::new();
        self.run_map_aid(frame, input, &mut rows)?;
        let t3 = Instant::now();

        // MSCKF: lost tracks and tracks anchored at the clone leaving the window
        let overflow = self.state.window_overflow();
        let mut lost = Vec::new();
        let mut anchored = Vec::new();
        for (id, tr) in &self.tracks {
            if tr.status == TrackStatus::Lost {
                lost.push(*id);
            } else if let Some(old) = overflow {
                if tr.observed_in(old) {
                    anchored.push(*id);
                }
            }
        }
        let mut to_msckf: Vec<FeatureId> = lost.clone();
        let mut promote = Vec::new();
        for id in anchored {
            let len = self.tracks[&id].measurements.len();
            if len >= cfg.promote_after && self.state.landmarks().len() + promote.len() < cfg.max_slam {
                promote.push(id);
            } else {
                to_msckf.push(id);
            }
        }
        let batch: Vec<&FeatureTrack> = to_msckf.iter().map(|id| &self.tracks[id]).collect();
        let (blocks, report) = msckf_rows(&batch, &self.state, &self.calib, &cfg.vision);
        self.stats.msckf_features += report.accepted.len();
        self.stats.msckf_rejected += report.rejected.len();
        self.stats.map_rows_msckf += report.map_rows();
        self.stats.max_nullspace_residual = self.stats.max_nullspace_residual.max(report.max_nullspace_residual());
        self.stats.row_count_violations +=
            report.accepted.iter().filter(|o| o.projected_rows != 2 * o.observations - 3).count();
        rows.extend(blocks);
        let t4 = Instant::now();
        self.times.msckf += t4 - t3;

        // real observations of in-state landmarks
        let (blocks, _) = slam_rows(&slam_meas, &self.state, &self.calib, &cfg.vision);
        self.stats.slam_rows += blocks.len();
        rows.extend(blocks);

        // promotion adds state dimensions; earlier rows are zero-padded
        for id in promote {
            let track = &self.tracks[&id];
            let init = build_feature_system(track, &self.state, &self.calib, &cfg.vision, true)
                .and_then(|sys| initialize_landmark(&mut self.state, &sys, input.timestamp));
            match init {
                Ok(rest) => {
                    rows.push(rest);
                    self.stats.promoted += 1;
                    self.tracks.remove(&id);
                }
                Err(_) => {
                    let tr = &self.tracks[&id];
                    let (b, rep) = msckf_rows(&[tr], &self.state, &self.calib, &cfg.vision);
                    self.stats.msckf_features += rep.accepted.len();
                    self.stats.msckf_rejected += rep.rejected.len();
                    rows.extend(b);
                    to_msckf.push(id);
                }
            }
        }

        apply_rows(&mut self.state, rows).map_err(state_err)?;
        let t5 = Instant::now();
        self.times.update += t5 - t4;

        // used measurements are discarded; lost tracks are dropped
        for id in to_msckf {
            if let Some(tr) = self.tracks.get_mut(&id) {
                if tr.status == TrackStatus::Lost {
                    self.tracks.remove(&id);
                } else {
                    tr.measurements.clear();
                    tr.map_observations.clear();
                }
            }
        }
        let mut drop = Vec::new();
        if let Some(old) = self.state.window_overflow() {
            drop.push(VarKey::Clone(old));
        }
        let span = cfg.window_span();
        drop.extend(
            self.state
                .landmarks()
                .values()
                .filter(|l| input.timestamp - l.last_seen > span)
                .map(|l| VarKey::Landmark(l.id)),
        );
        self.state.marginalize(&drop).map_err(state_err)?;
        self.times.marginalization += t5.elapsed();

        self.stats.frames += 1;
        self.frame += 1;
        Ok(FrameEstimate {
            frame,
            timestamp: input.timestamp,
            pose: self.state.imu.pose(),
            pose_covariance: self.state.pose_covariance(),
        })
    }

    /// Sorts the frame's features into in-state landmark measurements and
    /// track measurements; tracks not seen in this frame become lost.
    fn ingest(&mut self, input: &FrameInput, clone: CloneId) -> Vec<BearingMeasurement> {
        let sigma = self.calib.sigma_normalized();
        let mut slam = Vec::new();
        let mut seen = Vec::with_capacity(input.features.len());
        for f in &input.features {
            let m = BearingMeasurement { feature: f.id, clone, timestamp: input.timestamp, uv: f.uv, sigma };
            if let Some(lm) = self.state.landmark_mut(f.id) {
                lm.last_seen = input.timestamp;
                slam.push(m);
            } else {
                self.tracks.entry(f.id).or_insert_with(|| FeatureTrack::new(f.id)).push(m);
                seen.push(f.id);
            }
        }
        seen.sort_unstable();
        for (id, tr) in self.tracks.iter_mut() {
            if seen.binary_search(id).is_err() {
                tr.status = TrackStatus::Lost;
            }
        }
        slam
    }

    /// Delivers and issues renders for this frame. Map rows of in-state
    /// landmarks go to `rows`; matches to tracks are attached to them.
    fn run_map_aid(&mut self, frame: usize, input: &FrameInput, rows: &mut Vec<RowBlock>) -> Result<(), EstimatorError> {
        let Some((aid, mut backend, mut sched)) = self.map_aid.take() else {
            return Ok(());
        };
        let result = self.schedule(frame, input, rows, &aid, backend.as_mut(), &mut sched);
        self.stats.renders_delivered = sched.delivered;
        self.map_aid = Some((aid, backend, sched));
        result
    }

    fn schedule(
        &mut self,
        frame: usize,
        input: &FrameInput,
        rows: &mut Vec<RowBlock>,
        aid: &MapAidConfig,
        backend: &mut dyn RenderBackend,
        sched: &mut RenderScheduler,
    ) -> Result<(), EstimatorError> {
        if backend.asynchronous() {
            while let Some(view) = backend.poll() {
                sched.complete(view.context.id);
                self.deliver(frame, input.timestamp, view, aid, rows);
            }
            if let Some(id) = sched.try_issue() {
                self.issue(id, frame, input, aid, backend, sched);
            }
            return Ok(());
        }
        let step = sched.step(frame);
        if let Some(id) = step.deliver {
            let t = Instant::now();
            let view = backend.wait(id).ok_or(EstimatorError::LostRender { frame, id })?;
            self.times.rendering += t.elapsed();
            self.deliver(frame, input.timestamp, view, aid, rows);
        }
        if let Some(id) = step.issue {
            self.issue(id, frame, input, aid, backend, sched);
            if step.deliver_issued {
                let t = Instant::now();
                let view = backend.wait(id).ok_or(EstimatorError::LostRender { frame, id })?;
                self.times.rendering += t.elapsed();
                self.deliver(frame, input.timestamp, view, aid, rows);
            }
        }
        Ok(())
    }

    fn issue(
        &mut self,
        id: u64,
        frame: usize,
        input: &FrameInput,
        aid: &MapAidConfig,
        backend: &mut dyn RenderBackend,
        sched: &mut RenderScheduler,
    ) {
        let sign = sched.next_sign();
        if let Some(req) = plan_render(&self.state, &aid.transform, &self.calib, aid.offset, sign, id) {
            self.pending.insert(id, Pending { trigger_frame: frame, features: input.features.clone() });
            backend.submit(req);
        }
    }

    fn deliver(&mut self, frame: usize, timestamp: f64, view: RenderedView, aid: &MapAidConfig, rows: &mut Vec<RowBlock>) {
        let t0 = Instant::now();
        let ctx = view.context;
        let Some(pending) = self.pending.remove(&ctx.id) else {
            return;
        };
        let mut diag = MapDiagnostics {
            frame,
            timestamp,
            render_id: ctx.id,
            trigger: ctx.trigger,
            latency_frames: frame - pending.trigger_frame,
            rendered: view.observations.len(),
            matches: 0,
            slam_rows: 0,
            attached: 0,
            rejected: 0,
            stale: false,
            stale_total: self.stats.renders_stale,
        };
        if check_trigger(&self.state, &ctx).is_err() {
            self.stats.renders_stale += 1;
            diag.stale = true;
            diag.stale_total = self.stats.renders_stale;
            self.diagnostics.push(diag);
            return;
        }
        let vcfg = self.cfg.vision;
        let state = &self.state;
        let tracks = &self.tracks;
        let measurement = |c: &Correspondence| MapMeasurement {
            feature: c.feature,
            uv: view.observations[c.view_index].uv,
            render: ctx,
        };
        let mut rejected = 0;
        let corr = match_view(&view, &pending.features, aid.ratio, |c| {
            let ok = if let Some(lm) = state.landmark(c.feature) {
                let off = state.offset(VarKey::Landmark(c.feature)).unwrap();
                let p = state.covariance().fixed_view::<3, 3>(off, off).into_owned();
                map_mahalanobis(&measurement(c), &lm.position, &p, vcfg.z_min) < vcfg.map_gate
            } else {
                tracks.contains_key(&c.feature)
            };
            if !ok {
                rejected += 1;
            }
            ok
        });
        diag.matches = corr.len() + rejected;
        for c in &corr {
            let meas = measurement(c);
            if self.state.landmark(c.feature).is_some() {
                match map_landmark_rows(&self.state, &meas, &vcfg) {
                    Ok((block, _)) => {
                        rows.push(block);
                        diag.slam_rows += 1;
                    }
                    Err(_) => rejected += 1,
                }
            } else if let Some(tr) = self.tracks.get_mut(&c.feature) {
                tr.map_observations.push(meas);
                diag.attached += 1;
            }
        }
        diag.rejected = rejected;
        self.stats.map_matches += corr.len();
        self.stats.map_rows_slam += diag.slam_rows;
        self.diagnostics.push(diag);
        self.times.matching += t0.elapsed();
    }
}
