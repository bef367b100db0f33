use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix};

use super::triangulation::{track_views, triangulate_views, View};
use super::{linearize_real, whitening, BearingMeasurement, CameraCalibration, FeatureTrack, VisionConfig, VisionError};
use crate::geometry::{skew, Vec3};
use crate::map_update::{linearize_nerf, map_mahalanobis, MapMeasurement};
use crate::state::{chi2_threshold_95, FeatureId, StateError, StateVector, UpdateReport, VarKey};

/// Whitened linear rows `r = H·x̃ + n`, `n ~ N(0, I)`, over the error state.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBlock {
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
}

impl RowBlock {
    pub fn rows(&self) -> usize {
        self.r.len()
    }

    /// Appends zero columns for variables added after the rows were built.
    pub fn padded(mut self, n: usize) -> RowBlock {
        let (m, c) = self.h.shape();
        if c < n {
            self.h = self.h.resize(m, n, 0.0);
        }
        self
    }

    fn nonzero_columns(&self) -> Vec<usize> {
        (0..self.h.ncols()).filter(|&j| self.h.column(j).iter().any(|v| *v != 0.0)).collect()
    }

    /// `rᵀ (H P Hᵀ + I)⁻¹ r`, evaluated on the columns `H` touches.
    pub fn mahalanobis(&self, state: &StateVector) -> f64 {
        let cols = self.nonzero_columns();
        let h = self.h.select_columns(&cols);
        let p = state.covariance().select_rows(&cols).select_columns(&cols);
        let s = &h * p * h.transpose() + DMatrix::identity(self.rows(), self.rows());
        match s.cholesky() {
            Some(c) => self.r.dot(&c.solve(&self.r)),
            None => f64::INFINITY,
        }
    }

    pub fn passes_gate(&self, state: &StateVector) -> (bool, f64) {
        if self.rows() == 0 {
            return (true, 0.0);
        }
        let d = self.mahalanobis(state);
        (d < chi2_threshold_95(self.rows()), d)
    }
}

/// Stacks row blocks (padding each to `n` columns).
pub fn stack_rows(blocks: Vec<RowBlock>, n: usize) -> RowBlock {
    let m: usize = blocks.iter().map(RowBlock::rows).sum();
    let mut h = DMatrix::zeros(m, n);
    let mut r = DVector::zeros(m);
    let mut at = 0;
    for b in blocks {
        let k = b.rows();
        let c = b.h.ncols().min(n);
        h.view_mut((at, 0), (k, c)).copy_from(&b.h.columns(0, c));
        r.rows_mut(at, k).copy_from(&b.r);
        at += k;
    }
    RowBlock { h, r }
}

/// Measurement compression: when there are more rows than touched columns,
/// replaces the system by the triangular factor of `[H r]`. Noise stays
/// white because the transform is orthonormal.
pub fn compress_rows(block: RowBlock) -> RowBlock {
    let cols = block.nonzero_columns();
    let k = cols.len();
    if block.rows() <= k {
        return block;
    }
    let n = block.h.ncols();
    let mut aug = DMatrix::zeros(block.rows(), k + 1);
    for (j, &c) in cols.iter().enumerate() {
        aug.set_column(j, &block.h.column(c));
    }
    aug.set_column(k, &block.r);
    let qr = aug.qr();
    let rf = qr.r();
    let mut h = DMatrix::zeros(k, n);
    for (j, &c) in cols.iter().enumerate() {
        h.view_mut((0, c), (k, 1)).copy_from(&rf.view((0, j), (k, 1)));
    }
    let r = rf.view((0, k), (k, 1)).column(0).into_owned();
    RowBlock { h, r }
}

/// Applies whitened row blocks in one EKF update.
pub fn apply_rows(state: &mut StateVector, blocks: Vec<RowBlock>) -> Result<UpdateReport, StateError> {
    let n = state.dim();
    let stacked = compress_rows(stack_rows(blocks, n));
    let m = stacked.rows();
    if m == 0 {
        return Ok(UpdateReport { rows: 0, mahalanobis: 0.0 });
    }
    state.ekf_update(&stacked.h, &stacked.r, &DMatrix::identity(m, m), false)
}

/// Stacked, whitened linear system of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSystem {
    pub id: FeatureId,
    /// Linearization point `ᴳp̂_f`.
    pub position: Vec3,
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    pub r: DVector<f64>,
    pub real_rows: usize,
    pub map_rows: usize,
}

impl FeatureSystem {
    pub fn observations(&self) -> usize {
        (self.real_rows + self.map_rows) / 2
    }
}

/// Feature-free rows obtained by left-multiplying with a basis of the left
/// nullspace of `H_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSystem {
    pub rows: RowBlock,
    /// `max |Nᵀ H_f|` as computed.
    pub nullspace_residual: f64,
}

struct Eliminated {
    h_x: DMatrix<f64>,
    h_f: DMatrix<f64>,
    r: DVector<f64>,
    perm: [usize; 3],
}

/// Householder QR of `H_f` with column pivoting, applied in place to
/// `[H_x | H_f | r]`. Rows 0..3 carry the feature; rows 3.. are `Nᵀ·(…)`.
fn eliminate(sys: &FeatureSystem) -> Eliminated {
    let mut h_x = sys.h_x.clone();
    let mut h_f = sys.h_f.clone();
    let mut r = sys.r.clone();
    let m = h_f.nrows();
    let mut perm = [0, 1, 2];
    for k in 0..3.min(m) {
        let best = (k..3).max_by(|&a, &b| {
            h_f.view((k, a), (m - k, 1)).norm_squared().total_cmp(&h_f.view((k, b), (m - k, 1)).norm_squared())
        });
        if let Some(j) = best.filter(|&j| j != k) {
            h_f.swap_columns(k, j);
            perm.swap(k, j);
        }
        let x = h_f.view((k, k), (m - k, 1)).column(0).into_owned();
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vv = v.norm_squared();
        if vv == 0.0 {
            continue;
        }
        let beta = 2.0 / vv;
        let reflect = |mat: &mut DMatrix<f64>| {
            for c in 0..mat.ncols() {
                let mut col = mat.column_mut(c);
                let mut seg = col.rows_mut(k, m - k);
                let d = v.dot(&seg) * beta;
                if d != 0.0 {
                    seg.axpy(-d, &v, 1.0);
                }
            }
        };
        reflect(&mut h_f);
        reflect(&mut h_x);
        let d = v.dot(&r.rows(k, m - k)) * beta;
        r.rows_mut(k, m - k).axpy(-d, &v, 1.0);
    }
    Eliminated { h_x, h_f, r, perm }
}

/// Eliminates the feature from its stacked system. With `m` observations
/// the result has `2m − 3` rows.
pub fn nullspace_project(sys: &FeatureSystem) -> ProjectedSystem {
    let m = sys.r.len();
    let e = eliminate(sys);
    let rest = m.saturating_sub(3);
    let tail = e.h_f.view((m - rest, 0), (rest, 3));
    let nullspace_residual = tail.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ProjectedSystem {
        rows: RowBlock {
            h: e.h_x.view((m - rest, 0), (rest, e.h_x.ncols())).into_owned(),
            r: e.r.rows(m - rest, rest).into_owned(),
        },
        nullspace_residual,
    }
}

/// Uncertainty a feature inherits from the pose of the clone it was seen from.
fn pose_induced_covariance(state: &StateVector, clone: crate::state::CloneId, p_f: &Vec3) -> Matrix3<f64> {
    let (Some(c), Some(off)) = (state.clone_state(clone), state.offset(VarKey::Clone(clone))) else {
        return Matrix3::zeros();
    };
    let r = c.pose.rotation_matrix();
    let rel = r * (p_f - c.pose.position);
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(r.transpose() * skew(&rel))));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let p: Matrix6<f64> = state.covariance().fixed_view::<6, 6>(off, off).into_owned();
    j * p * j.transpose()
}

fn map_view(meas: &MapMeasurement, p_f: Option<&Vec3>, z_min: f64) -> View {
    let mut v = meas.view();
    if let Some(p) = p_f {
        if let Ok(lin) = linearize_nerf(meas, p, z_min) {
            v.sigma = (0.5 * lin.noise.trace()).sqrt();
        }
    }
    v
}

/// Triangulates a track, verifying its map observations against the
/// real-image geometry. Returns the estimate and the surviving map rows.
fn triangulate_with_map<'a>(
    track: &'a FeatureTrack,
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
    use_map: bool,
) -> Result<(Vec3, Vec<&'a MapMeasurement>), VisionError> {
    let real = track_views(track, state, calib);
    let mut map: Vec<&MapMeasurement> = if use_map { track.map_observations.iter().collect() } else { Vec::new() };
    match triangulate_views(&real, cfg) {
        Ok(t) => {
            if map.is_empty() {
                return Ok((t.position, map));
            }
            let newest = track.measurements.iter().filter(|m| state.clone_state(m.clone).is_some()).last();
            let pcov = t.covariance
                + newest.map(|m| pose_induced_covariance(state, m.clone, &t.position)).unwrap_or_else(Matrix3::zeros);
            map.retain(|m| map_mahalanobis(m, &t.position, &pcov, cfg.z_min) < cfg.map_gate);
            if map.is_empty() {
                return Ok((t.position, map));
            }
            let mut views = real.clone();
            views.extend(map.iter().map(|m| map_view(m, Some(&t.position), cfg.z_min)));
            match triangulate_views(&views, cfg) {
                Ok(t2) => Ok((t2.position, map)),
                Err(_) => Ok((t.position, Vec::new())),
            }
        }
        Err(VisionError::InsufficientBaseline(_)) if !map.is_empty() && !real.is_empty() => {
            // The real views alone have no parallax; the rendered views provide it.
            let mut views = real.clone();
            views.extend(map.iter().map(|m| map_view(m, None, cfg.z_min)));
            let first = triangulate_views(&views, &VisionConfig { reprojection_gate: f64::INFINITY, ..*cfg })?;
            map.retain(|m| map_mahalanobis(m, &first.position, &Matrix3::zeros(), cfg.z_min) < cfg.map_gate);
            if map.is_empty() {
                return Err(VisionError::InsufficientBaseline(0.0));
            }
            let mut views = real;
            views.extend(map.iter().map(|m| map_view(m, Some(&first.position), cfg.z_min)));
            let t = triangulate_views(&views, cfg)?;
            Ok((t.position, map))
        }
        Err(e) => Err(e),
    }
}

/// Builds the whitened stacked system `[H_x | H_f | r]` of a track from its
/// real-image measurements and any verified map observations.
pub fn build_feature_system(
    track: &FeatureTrack,
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
    use_map: bool,
) -> Result<FeatureSystem, VisionError> {
    let (p_f, map) = triangulate_with_map(track, state, calib, cfg, use_map)?;
    let n = state.dim();
    let real: Vec<&BearingMeasurement> =
        track.measurements.iter().filter(|m| state.clone_state(m.clone).is_some()).collect();
    let mut map_rows = Vec::with_capacity(map.len());
    for m in &map {
        if let Ok(lin) = linearize_nerf(m, &p_f, cfg.z_min) {
            map_rows.push(lin);
        }
    }
    let rows = 2 * (real.len() + map_rows.len());
    if real.len() + map_rows.len() < 2 {
        return Err(VisionError::TooFewObservations(track.id));
    }
    let mut h_x = DMatrix::zeros(rows, n);
    let mut h_f = DMatrix::zeros(rows, 3);
    let mut r = DVector::zeros(rows);
    for (i, m) in real.iter().enumerate() {
        let c = state.clone_state(m.clone).unwrap();
        let lin_pose = if cfg.first_estimates { c.first_estimate } else { c.pose };
        let lin = linearize_real(&m.uv, &c.pose, &lin_pose, &p_f, &p_f, calib, cfg.z_min)?;
        let off = state.offset(VarKey::Clone(m.clone)).unwrap();
        let w = 1.0 / m.sigma;
        h_x.view_mut((2 * i, off), (2, 6)).copy_from(&(lin.h_pose * w));
        h_f.view_mut((2 * i, 0), (2, 3)).copy_from(&(lin.h_feature * w));
        r.rows_mut(2 * i, 2).copy_from(&(lin.residual * w));
    }
    let base = 2 * real.len();
    for (i, lin) in map_rows.iter().enumerate() {
        let w = whitening(&lin.noise);
        h_f.view_mut((base + 2 * i, 0), (2, 3)).copy_from(&(w * lin.h_feature));
        r.rows_mut(base + 2 * i, 2).copy_from(&(w * lin.residual));
    }
    Ok(FeatureSystem { id: track.id, position: p_f, h_x, h_f, r, real_rows: base, map_rows: rows - base })
}

/// Per-feature bookkeeping of an MSCKF pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutcome {
    pub id: FeatureId,
    pub observations: usize,
    pub projected_rows: usize,
    pub map_rows: usize,
    pub nullspace_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MsckfReport {
    pub accepted: Vec<FeatureOutcome>,
    pub rejected: Vec<(FeatureId, VisionError)>,
    pub update: Option<UpdateReport>,
}

impl MsckfReport {
    pub fn max_nullspace_residual(&self) -> f64 {
        self.accepted.iter().map(|o| o.nullspace_residual).fold(0.0, f64::max)
    }

    pub fn map_rows(&self) -> usize {
        self.accepted.iter().map(|o| o.map_rows).sum()
    }
}

fn gated_projection(
    track: &FeatureTrack,
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
    use_map: bool,
) -> Result<(RowBlock, FeatureOutcome), VisionError> {
    let sys = build_feature_system(track, state, calib, cfg, use_map)?;
    let proj = nullspace_project(&sys);
    if proj.rows.rows() == 0 || !proj.rows.passes_gate(state).0 {
        return Err(VisionError::Gated(track.id));
    }
    let outcome = FeatureOutcome {
        id: track.id,
        observations: sys.observations(),
        projected_rows: proj.rows.rows(),
        map_rows: sys.map_rows,
        nullspace_residual: proj.nullspace_residual,
    };
    Ok((proj.rows, outcome))
}

/// Projected, gated rows for a batch of tracks. A feature whose map rows make
/// it fail the gate is retried with real-image rows only.
pub fn msckf_rows(
    tracks: &[&FeatureTrack],
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
) -> (Vec<RowBlock>, MsckfReport) {
    let mut blocks = Vec::new();
    let mut report = MsckfReport::default();
    for track in tracks {
        let mut res = gated_projection(track, state, calib, cfg, true);
        if res.is_err() && !track.map_observations.is_empty() {
            res = gated_projection(track, state, calib, cfg, false);
        }
        match res {
            Ok((rows, outcome)) => {
                blocks.push(rows);
                report.accepted.push(outcome);
            }
            Err(e) => report.rejected.push((track.id, e)),
        }
    }
    (blocks, report)
}

/// MSCKF update with every surviving feature stacked into one EKF update.
pub fn msckf_update(
    tracks: &[&FeatureTrack],
    state: &mut StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
) -> Result<MsckfReport, StateError> {
    let (blocks, mut report) = msckf_rows(tracks, state, calib, cfg);
    report.update = Some(apply_rows(state, blocks)?);
    Ok(report)
}

/// Gated rows for real observations of in-state landmarks at their clones.
pub fn slam_rows(
    measurements: &[BearingMeasurement],
    state: &StateVector,
    calib: &CameraCalibration,
    cfg: &VisionConfig,
) -> (Vec<RowBlock>, Vec<FeatureId>) {
    let n = state.dim();
    let mut blocks = Vec::new();
    let mut rejected = Vec::new();
    for m in measurements {
        let (Some(lm), Some(c)) = (state.landmark(m.feature), state.clone_state(m.clone)) else {
            rejected.push(m.feature);
            continue;
        };
        let (clone_lin, f_lin) =
            if cfg.first_estimates { (c.first_estimate, lm.first_estimate) } else { (c.pose, lm.position) };
        let Ok(lin) = linearize_real(&m.uv, &c.pose, &clone_lin, &lm.position, &f_lin, calib, cfg.z_min) else {
            rejected.push(m.feature);
            continue;
        };
        let oc = state.offset(VarKey::Clone(m.clone)).unwrap();
        let of = state.offset(VarKey::Landmark(m.feature)).unwrap();
        let w = 1.0 / m.sigma;
        let mut h = DMatrix::zeros(2, n);
        h.view_mut((0, oc), (2, 6)).copy_from(&(lin.h_pose * w));
        h.view_mut((0, of), (2, 3)).copy_from(&(lin.h_feature * w));
        let block = RowBlock { h, r: DVector::from_column_slice((lin.residual * w).as_slice()) };
        if block.passes_gate(state).0 {
            blocks.push(block);
        } else {
            rejected.push(m.feature);
        }
    }
    (blocks, rejected)
}

/// Delayed initialization of a landmark from its feature system: the three
/// rows carrying the feature define its mean and covariance, the remaining
/// nullspace rows are returned (padded to the new dimension) for the update.
pub fn initialize_landmark(
    state: &mut StateVector,
    sys: &FeatureSystem,
    last_seen: f64,
) -> Result<RowBlock, VisionError> {
    let n = state.dim();
    if sys.h_x.ncols() != n || sys.r.len() < 3 {
        return Err(VisionError::TooFewObservations(sys.id));
    }
    let e = eliminate(sys);
    let m = sys.r.len();
    let mut h_f1 = Matrix3::zeros();
    for k in 0..3 {
        for i in 0..3 {
            h_f1[(i, e.perm[k])] = e.h_f[(i, k)];
        }
    }
    let rest = RowBlock {
        h: e.h_x.view((3, 0), (m - 3, n)).into_owned(),
        r: e.r.rows(3, m - 3).into_owned(),
    };
    if !rest.passes_gate(state).0 {
        return Err(VisionError::Gated(sys.id));
    }
    let svd = h_f1.svd(false, false);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 1e-9 * smax) {
        return Err(VisionError::DivergedRefinement(smin));
    }
    let a = h_f1.try_inverse().ok_or(VisionError::DivergedRefinement(smin))?;
    let a_dyn = DMatrix::from_column_slice(3, 3, a.as_slice());
    let h_x1 = e.h_x.rows(0, 3).into_owned();
    let r1 = Vec3::new(e.r[0], e.r[1], e.r[2]);
    let hp = &h_x1 * state.covariance();
    let cross = -(&a_dyn * &hp);
    let inner = &hp * h_x1.transpose() + DMatrix::identity(3, 3);
    let block = &a_dyn * inner * a_dyn.transpose();
    let mean = sys.position + a * r1;
    state
        .add_landmark(sys.id, mean, last_seen, &cross, &block)
        .map_err(|_| VisionError::TooFewObservations(sys.id))?;
    Ok(rest.padded(n + 3))
}
