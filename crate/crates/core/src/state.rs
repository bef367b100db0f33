//! Filter state: IMU state, clone window, in-state landmarks and the joint
//! error-state covariance, together with the generic EKF update.
//!
//! Error-state layout: the IMU block always comes first as
//! `[θ(3) p(3) v(3) b_g(3) b_a(3)]`; clones (`[θ p]`, 6 each) and landmarks
//! (3 each) follow in insertion order. [`StateVector::offset`] is the only
//! way to find a block.

use std::collections::{BTreeMap, VecDeque};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::{perturb_quaternion, Mat3, Pose, UnitQuaternion, Vec3};

pub const IMU_DIM: usize = 15;
pub const CLONE_DIM: usize = 6;
pub const LANDMARK_DIM: usize = 3;

pub const OFF_THETA: usize = 0;
pub const OFF_POS: usize = 3;
pub const OFF_VEL: usize = 6;
pub const OFF_BG: usize = 9;
pub const OFF_BA: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u64);

/// Clones are keyed by the camera frame index that created them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CloneId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKey {
    Imu,
    Clone(CloneId),
    Landmark(FeatureId),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("clone timestamp {new} is not after the newest clone at {newest}")]
    NonIncreasingClone { new: f64, newest: f64 },
    #[error("unknown state variable {0:?}")]
    UnknownId(VarKey),
    #[error("landmark {0:?} is already in the state")]
    DuplicateLandmark(FeatureId),
    #[error("innovation test failed (mahalanobis {mahalanobis:.3} >= threshold {threshold:.3}, dof {dof})")]
    InnovationTestFailure { mahalanobis: f64, threshold: f64, dof: usize },
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuState {
    /// `ᴵ_G q̄`
    pub orientation: UnitQuaternion,
    pub position: Vec3,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
}

impl Default for ImuState {
    fn default() -> Self {
        Self {
            orientation: UnitQuaternion::identity(),
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
        }
    }
}

impl ImuState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation, self.position)
    }

    pub fn rotation(&self) -> Mat3 {
        self.orientation.to_rotation_matrix()
    }
}

/// First-estimate linearization point for the IMU navigation states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuLinearization {
    pub rotation: Mat3,
    pub position: Vec3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneState {
    pub id: CloneId,
    pub timestamp: f64,
    /// `{ᴵ_G q̄, ᴳp_I}` at the clone time.
    pub pose: Pose,
    /// Value at cloning time, used as the first-estimate linearization point.
    pub first_estimate: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: FeatureId,
    pub position: Vec3,
    pub first_estimate: Vec3,
    /// Timestamp of the last camera observation.
    pub last_seen: f64,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    key: VarKey,
    offset: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct StateVector {
    pub timestamp: f64,
    pub imu: ImuState,
    pub imu_linearization: ImuLinearization,
    clones: VecDeque<CloneState>,
    landmarks: BTreeMap<FeatureId, Landmark>,
    layout: Vec<Block>,
    cov: DMatrix<f64>,
    max_clones: usize,
}

/// Outcome of an accepted update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub rows: usize,
    pub mahalanobis: f64,
}

impl StateVector {
    pub fn new(timestamp: f64, imu: ImuState, imu_cov: DMatrix<f64>, max_clones: usize) -> Result<Self, StateError> {
        if imu_cov.shape() != (IMU_DIM, IMU_DIM) {
            return Err(StateError::Dimension(format!("IMU covariance must be 15x15, got {:?}", imu_cov.shape())));
        }
        let rot = imu.rotation();
        Ok(Self {
            timestamp,
            imu,
            imu_linearization: ImuLinearization { rotation: rot, position: imu.position, velocity: imu.velocity },
            clones: VecDeque::new(),
            landmarks: BTreeMap::new(),
            layout: vec![Block { key: VarKey::Imu, offset: 0, dim: IMU_DIM }],
            cov: imu_cov,
            max_clones: max_clones.max(1),
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Replaces the covariance wholesale. Used by propagation, which owns the
    /// IMU block transition.
    pub(crate) fn covariance_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.cov
    }

    pub fn max_clones(&self) -> usize {
        self.max_clones
    }

    pub fn clones(&self) -> &VecDeque<CloneState> {
        &self.clones
    }

    pub fn clone_state(&self, id: CloneId) -> Option<&CloneState> {
        self.clones.iter().find(|c| c.id == id)
    }

    pub fn newest_clone(&self) -> Option<&CloneState> {
        self.clones.back()
    }

    pub fn oldest_clone(&self) -> Option<&CloneState> {
        self.clones.front()
    }

    pub fn landmarks(&self) -> &BTreeMap<FeatureId, Landmark> {
        &self.landmarks
    }

    pub fn landmark(&self, id: FeatureId) -> Option<&Landmark> {
        self.landmarks.get(&id)
    }

    pub fn landmark_mut(&mut self, id: FeatureId) -> Option<&mut Landmark> {
        self.landmarks.get_mut(&id)
    }

    /// `Some(oldest)` when the window holds more clones than configured.
    pub fn window_overflow(&self) -> Option<CloneId> {
        (self.clones.len() > self.max_clones).then(|| self.clones[0].id)
    }

    pub fn offset(&self, key: VarKey) -> Option<usize> {
        self.layout.iter().find(|b| b.key == key).map(|b| b.offset)
    }

    /// Block keys in covariance order.
    pub fn keys(&self) -> impl Iterator<Item = (VarKey, usize, usize)> + '_ {
        self.layout.iter().map(|b| (b.key, b.offset, b.dim))
    }

    /// Clones the current IMU pose into the window.
    pub fn augment_clone(&mut self, id: CloneId, timestamp: f64) -> Result<(), StateError> {
        if let Some(newest) = self.clones.back() {
            if timestamp <= newest.timestamp {
                return Err(StateError::NonIncreasingClone { new: timestamp, newest: newest.timestamp });
            }
        }
        let n = self.dim();
        let mut cov = DMatrix::zeros(n + CLONE_DIM, n + CLONE_DIM);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        // the cloning Jacobian selects the IMU [θ p] rows
        let rows = self.cov.rows(0, CLONE_DIM).into_owned();
        cov.view_mut((n, 0), (CLONE_DIM, n)).copy_from(&rows);
        cov.view_mut((0, n), (n, CLONE_DIM)).copy_from(&rows.transpose());
        cov.view_mut((n, n), (CLONE_DIM, CLONE_DIM)).copy_from(&self.cov.view((0, 0), (CLONE_DIM, CLONE_DIM)));
        self.cov = cov;
        let pose = self.imu.pose();
        self.clones.push_back(CloneState { id, timestamp, pose, first_estimate: pose });
        self.layout.push(Block { key: VarKey::Clone(id), offset: n, dim: CLONE_DIM });
        Ok(())
    }

    /// Adds a landmark with its covariance block and cross-covariance against
    /// the existing state (`cross` is `3 × dim`).
    pub fn add_landmark(
        &mut self,
        id: FeatureId,
        position: Vec3,
        last_seen: f64,
        cross: &DMatrix<f64>,
        block: &DMatrix<f64>,
    ) -> Result<(), StateError> {
        if self.landmarks.contains_key(&id) {
            return Err(StateError::DuplicateLandmark(id));
        }
        let n = self.dim();
        if cross.shape() != (LANDMARK_DIM, n) || block.shape() != (LANDMARK_DIM, LANDMARK_DIM) {
            return Err(StateError::Dimension("landmark covariance blocks".into()));
        }
        let mut cov = DMatrix::zeros(n + LANDMARK_DIM, n + LANDMARK_DIM);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        cov.view_mut((n, 0), (LANDMARK_DIM, n)).copy_from(cross);
        cov.view_mut((0, n), (n, LANDMARK_DIM)).copy_from(&cross.transpose());
        cov.view_mut((n, n), (LANDMARK_DIM, LANDMARK_DIM)).copy_from(block);
        self.cov = cov;
        self.symmetrize();
        self.landmarks.insert(id, Landmark { id, position, first_estimate: position, last_seen });
        self.layout.push(Block { key: VarKey::Landmark(id), offset: n, dim: LANDMARK_DIM });
        Ok(())
    }

    /// Removes clones or landmarks. EKF marginalization drops the matching
    /// rows and columns of the covariance.
    pub fn marginalize(&mut self, keys: &[VarKey]) -> Result<(), StateError> {
        for key in keys {
            if *key == VarKey::Imu || self.offset(*key).is_none() {
                return Err(StateError::UnknownId(*key));
            }
        }
        let mut keep = vec![true; self.dim()];
        for key in keys {
            let b = self.layout.iter().find(|b| b.key == *key).copied().unwrap();
            keep[b.offset..b.offset + b.dim].iter_mut().for_each(|k| *k = false);
        }
        let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        self.cov = self.cov.select_rows(&idx).select_columns(&idx);
        self.layout.retain(|b| !keys.contains(&b.key));
        let mut off = 0;
        for b in &mut self.layout {
            b.offset = off;
            off += b.dim;
        }
        for key in keys {
            match key {
                VarKey::Clone(id) => self.clones.retain(|c| c.id != *id),
                VarKey::Landmark(id) => {
                    self.landmarks.remove(id);
                }
                VarKey::Imu => unreachable!(),
            }
        }
        Ok(())
    }

    /// Adds an error-state correction `δx` to the mean.
    pub fn apply_correction(&mut self, dx: &DVector<f64>) {
        let seg = |o: usize| Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        self.imu.orientation = perturb_quaternion(&self.imu.orientation, &seg(OFF_THETA));
        self.imu.position += seg(OFF_POS);
        self.imu.velocity += seg(OFF_VEL);
        self.imu.gyro_bias += seg(OFF_BG);
        self.imu.accel_bias += seg(OFF_BA);
        for b in &self.layout {
            match b.key {
                VarKey::Imu => {}
                VarKey::Clone(id) => {
                    let c = self.clones.iter_mut().find(|c| c.id == id).unwrap();
                    c.pose.rotation = perturb_quaternion(&c.pose.rotation, &seg(b.offset));
                    c.pose.position += seg(b.offset + 3);
                }
                VarKey::Landmark(id) => {
                    self.landmarks.get_mut(&id).unwrap().position += seg(b.offset);
                }
            }
        }
    }

    pub fn symmetrize(&mut self) {
        let n = self.dim();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.cov[(i, j)] + self.cov[(j, i)]);
                self.cov[(i, j)] = m;
                self.cov[(j, i)] = m;
            }
        }
    }

    /// Innovation covariance `H P Hᵀ + R`.
    pub fn innovation_covariance(&self, h: &DMatrix<f64>, r_meas: &DMatrix<f64>) -> DMatrix<f64> {
        let ph_t = &self.cov * h.transpose();
        h * ph_t + r_meas
    }

    /// Mahalanobis test of a residual block against the current covariance.
    pub fn gate(&self, h: &DMatrix<f64>, r: &DVector<f64>, r_meas: &DMatrix<f64>) -> Result<GateOutcome, StateError> {
        let s = self.innovation_covariance(h, r_meas);
        chi2_gate(r, &s, r.len())
    }

    /// EKF update with Joseph-form covariance. When `gate` is set the
    /// measurement is first checked with [`chi2_gate`] and skipped on failure.
    pub fn ekf_update(
        &mut self,
        h: &DMatrix<f64>,
        r: &DVector<f64>,
        r_meas: &DMatrix<f64>,
        gate: bool,
    ) -> Result<UpdateReport, StateError> {
        let n = self.dim();
        let m = r.len();
        if h.ncols() != n || h.nrows() != m || r_meas.shape() != (m, m) {
            return Err(StateError::Dimension(format!(
                "H {:?}, r {}, R {:?} against state dim {}",
                h.shape(),
                m,
                r_meas.shape(),
                n
            )));
        }
        if m == 0 {
            return Ok(UpdateReport { rows: 0, mahalanobis: 0.0 });
        }
        let ph_t = &self.cov * h.transpose();
        let s = h * &ph_t + r_meas;
        let chol = s.clone().cholesky().ok_or(StateError::SingularInnovation)?;
        let mahalanobis = r.dot(&chol.solve(r));
        if gate {
            let threshold = chi2_threshold_95(m);
            if mahalanobis >= threshold {
                return Err(StateError::InnovationTestFailure { mahalanobis, threshold, dof: m });
            }
        }
        // K = P Hᵀ S⁻¹
        let k = chol.solve(&ph_t.transpose()).transpose();
        let dx = &k * r;
        // Joseph form (I−KH) P (I−KH)ᵀ + K R Kᵀ, associated so that the n×n
        // matrix I−KH is never formed.
        let m_mat = &self.cov - &k * ph_t.transpose();
        let mh_t = &m_mat * h.transpose();
        let kr = &k * r_meas;
        self.cov = m_mat - mh_t * k.transpose() + kr * k.transpose();
        self.symmetrize();
        self.apply_correction(&dx);
        Ok(UpdateReport { rows: m, mahalanobis })
    }

    /// Minimum eigenvalue over maximum eigenvalue; diagnostics only.
    pub fn min_max_eigenvalues(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    /// 6×6 covariance of the current IMU `[θ p]`.
    pub fn pose_covariance(&self) -> nalgebra::Matrix6<f64> {
        self.cov.fixed_view::<6, 6>(0, 0).into_owned()
    }

    /// Sets the IMU first-estimate linearization point to the current mean.
    pub fn reset_imu_linearization(&mut self) {
        self.imu_linearization = ImuLinearization {
            rotation: self.imu.rotation(),
            position: self.imu.position,
            velocity: self.imu.velocity,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub accepted: bool,
    pub mahalanobis: f64,
    pub threshold: f64,
}

const CHI2_TABLE_LEN: usize = 1024;

fn chi2_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| (1..=CHI2_TABLE_LEN).map(|dof| chi2_quantile(0.95, dof)).collect())
}

/// Quantile of the chi-square distribution.
pub fn chi2_quantile(p: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("dof > 0").inverse_cdf(p)
}

/// 95th percentile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_threshold_95(dof: usize) -> f64 {
    assert!(dof > 0);
    if dof <= CHI2_TABLE_LEN {
        chi2_table()[dof - 1]
    } else {
        chi2_quantile(0.95, dof)
    }
}

/// Accepts iff `rᵀ S⁻¹ r` is below the 95% chi-square quantile for `dof`.
pub fn chi2_gate(r: &DVector<f64>, s: &DMatrix<f64>, dof: usize) -> Result<GateOutcome, StateError> {
    let chol = s.clone().cholesky().ok_or(StateError::SingularInnovation)?;
    let mahalanobis = r.dot(&chol.solve(r));
    let threshold = chi2_threshold_95(dof.max(1));
    Ok(GateOutcome { accepted: mahalanobis < threshold, mahalanobis, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose()) * scale + DMatrix::identity(n, n) * (0.1 * scale)
    }

    fn fresh(rng: &mut ChaCha8Rng) -> StateVector {
        StateVector::new(0.0, ImuState::default(), random_spd(rng, IMU_DIM, 0.01), 3).unwrap()
    }

    fn assert_psd(s: &StateVector) {
        let c = s.covariance();
        assert!((c - c.transpose()).amax() < 1e-10);
        let (min, max) = s.min_max_eigenvalues();
        assert!(min >= -1e-9 * max, "min eig {min} max {max}");
    }

    #[test]
    fn cloning_copies_pose_and_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = fresh(&mut rng);
        s.imu.position = Vec3::new(1.0, 2.0, 3.0);
        s.augment_clone(CloneId(0), 0.1).unwrap();
        assert_eq!(s.dim(), 21);
        assert_eq!(s.clones()[0].pose, s.imu.pose());
        let c = s.covariance();
        assert_eq!(c.view((15, 15), (6, 6)), c.view((0, 0), (6, 6)));
        assert_eq!(c.view((15, 0), (6, 15)), c.view((0, 0), (6, 15)));
        assert!(matches!(s.augment_clone(CloneId(1), 0.1), Err(StateError::NonIncreasingClone { .. })));
    }

    // Monte-Carlo oracle for the cross-covariance of two clones of a linear
    // system x' = F x + w taken at two times.
    #[test]
    fn clone_cross_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p0 = random_spd(&mut rng, IMU_DIM, 0.01);
        let f = DMatrix::<f64>::identity(IMU_DIM, IMU_DIM) + DMatrix::from_fn(IMU_DIM, IMU_DIM, |_, _| rng.random_range(-0.1..0.1));
        let q = random_spd(&mut rng, IMU_DIM, 0.001);

        let mut s = StateVector::new(0.0, ImuState::default(), p0.clone(), 5).unwrap();
        s.augment_clone(CloneId(0), 0.1).unwrap();
        {
            let n = s.dim();
            let mut phi = DMatrix::<f64>::identity(n, n);
            phi.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&f);
            let mut qq = DMatrix::<f64>::zeros(n, n);
            qq.view_mut((0, 0), (IMU_DIM, IMU_DIM)).copy_from(&q);
            let new = &phi * s.covariance() * phi.transpose() + qq;
            *s.covariance_mut() = new;
        }
        s.augment_clone(CloneId(1), 0.2).unwrap();
        let analytic = s.covariance().view((15, 21), (6, 6)).into_owned();

        let l0 = p0.clone().cholesky().unwrap().l();
        let lq = q.clone().cholesky().unwrap().l();
        let n_samples = 200_000;
        let mut acc = DMatrix::<f64>::zeros(6, 6);
        for _ in 0..n_samples {
            let z0 = DVector::from_fn(IMU_DIM, |_, _| StandardNormal.sample(&mut rng));
            let z1 = DVector::from_fn(IMU_DIM, |_, _| StandardNormal.sample(&mut rng));
            let x0 = &l0 * z0;
            let x1 = &f * &x0 + &lq * z1;
            acc += x0.rows(0, 6) * x1.rows(0, 6).transpose();
        }
        acc /= n_samples as f64;
        assert!((&acc - &analytic).norm() < 0.05 * analytic.norm(), "{acc} vs {analytic}");
    }

    #[test]
    fn marginalize_removes_rows_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = fresh(&mut rng);
        s.augment_clone(CloneId(0), 0.1).unwrap();
        let n = s.dim();
        let cross = DMatrix::from_fn(3, n, |_, _| rng.random_range(-1e-3..1e-3));
        s.add_landmark(FeatureId(7), Vec3::new(1.0, 1.0, 1.0), 0.1, &cross, &DMatrix::identity(3, 3)).unwrap();
        let before = s.covariance().clone();
        s.marginalize(&[VarKey::Landmark(FeatureId(7))]).unwrap();
        assert_eq!(s.dim(), n);
        assert_eq!(s.covariance(), &before.view((0, 0), (n, n)).into_owned());
        assert!(s.landmark(FeatureId(7)).is_none());
        assert_eq!(
            s.marginalize(&[VarKey::Landmark(FeatureId(7))]),
            Err(StateError::UnknownId(VarKey::Landmark(FeatureId(7))))
        );
        // re-adding with zero cross-covariance does not bring the old correlations back
        s.add_landmark(FeatureId(7), Vec3::zeros(), 0.2, &DMatrix::zeros(3, n), &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(s.covariance().view((n, 0), (3, n)).amax(), 0.0);
    }

    #[test]
    fn marginal_matches_closed_form_gaussian_marginal() {
        // x = [a, b, c] jointly Gaussian; dropping b leaves the (a, c) sub-block
        // of the joint covariance, which is the exact marginal.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = fresh(&mut rng);
        s.augment_clone(CloneId(0), 0.1).unwrap();
        s.augment_clone(CloneId(1), 0.2).unwrap();
        let joint = s.covariance().clone();
        s.marginalize(&[VarKey::Clone(CloneId(0))]).unwrap();
        let idx: Vec<usize> = (0..15).chain(21..27).collect();
        assert_eq!(s.covariance(), &joint.select_rows(&idx).select_columns(&idx));
        assert_eq!(s.offset(VarKey::Clone(CloneId(1))), Some(15));
    }

    #[test]
    fn scalar_kalman_textbook_case() {
        let mut p = DMatrix::<f64>::identity(IMU_DIM, IMU_DIM);
        p[(3, 3)] = 1.0;
        let mut s = StateVector::new(0.0, ImuState::default(), p, 2).unwrap();
        let mut h = DMatrix::zeros(1, IMU_DIM);
        h[(0, 3)] = 1.0;
        s.ekf_update(&h, &DVector::from_element(1, 1.0), &DMatrix::identity(1, 1), false).unwrap();
        assert_relative_eq!(s.imu.position.x, 0.5, epsilon = 1e-14);
        assert_relative_eq!(s.covariance()[(3, 3)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_jacobian_leaves_state_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = fresh(&mut rng);
        let before = s.clone();
        s.ekf_update(&DMatrix::zeros(2, IMU_DIM), &DVector::from_element(2, 0.3), &DMatrix::identity(2, 2), false)
            .unwrap();
        assert_eq!(s.imu, before.imu);
        assert!((s.covariance() - before.covariance()).amax() < 1e-15);
    }

    // Batch least squares on the stacked prior + measurement system.
    #[test]
    fn linear_update_matches_batch_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let p = random_spd(&mut rng, IMU_DIM, 0.01);
            let mut s = StateVector::new(0.0, ImuState::default(), p.clone(), 2).unwrap();
            // keep the orientation block out of H so the update is linear in the mean
            let m = 6;
            let mut h = DMatrix::from_fn(m, IMU_DIM, |_, _| rng.random_range(-1.0..1.0));
            h.columns_mut(0, 3).fill(0.0);
            let r = DVector::from_fn(m, |_, _| rng.random_range(-0.1..0.1));
            let rm = random_spd(&mut rng, m, 0.01);
            s.ekf_update(&h, &r, &rm, false).unwrap();

            let pinv = p.clone().try_inverse().unwrap();
            let rinv = rm.clone().try_inverse().unwrap();
            let info = &pinv + h.transpose() * &rinv * &h;
            let cov = info.clone().try_inverse().unwrap();
            let mean = &cov * h.transpose() * &rinv * &r;
            assert!((s.covariance() - &cov).amax() < 1e-10);
            assert_relative_eq!(s.imu.position, Vec3::new(mean[3], mean[4], mean[5]), epsilon = 1e-10);
            assert_relative_eq!(s.imu.accel_bias, Vec3::new(mean[12], mean[13], mean[14]), epsilon = 1e-10);
        }
    }

    #[test]
    fn gate_thresholds() {
        assert!((chi2_threshold_95(2) - 5.991).abs() < 1e-3);
        // closed form for two degrees of freedom
        assert!((chi2_threshold_95(2) - (-2.0 * 0.05f64.ln())).abs() < 1e-6);
        let s = DMatrix::identity(2, 2);
        assert!(chi2_gate(&DVector::zeros(2), &s, 2).unwrap().accepted);
        assert!(!chi2_gate(&DVector::from_vec(vec![1000.0, 0.0]), &s, 2).unwrap().accepted);
        assert_eq!(chi2_gate(&DVector::zeros(2), &DMatrix::zeros(2, 2), 2), Err(StateError::SingularInnovation));
    }

    #[test]
    fn gated_update_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = fresh(&mut rng);
        let before = s.clone();
        let mut h = DMatrix::zeros(1, IMU_DIM);
        h[(0, 3)] = 1.0;
        let res = s.ekf_update(&h, &DVector::from_element(1, 1e3), &(DMatrix::identity(1, 1) * 1e-4), true);
        assert!(matches!(res, Err(StateError::InnovationTestFailure { .. })));
        assert_eq!(s.covariance(), before.covariance());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn random_op_sequences_keep_covariance_psd(ops in proptest::collection::vec(0u8..4, 1..25), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = fresh(&mut rng);
            let mut t = 0.0;
            let mut next_clone = 0;
            let mut next_lm = 0;
            for op in ops {
                let trace_before = s.covariance().trace();
                match op {
                    0 => {
                        t += 0.1;
                        s.augment_clone(CloneId(next_clone), t).unwrap();
                        next_clone += 1;
                        if let Some(old) = s.window_overflow() {
                            s.marginalize(&[VarKey::Clone(old)]).unwrap();
                        }
                    }
                    1 => {
                        let n = s.dim();
                        s.add_landmark(FeatureId(next_lm), Vec3::zeros(), t, &DMatrix::zeros(3, n), &(DMatrix::identity(3, 3) * 0.5)).unwrap();
                        next_lm += 1;
                    }
                    2 => {
                        let n = s.dim();
                        let m = rng.random_range(1..5);
                        let mut h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
                        h.columns_mut(0, 3).fill(0.0);
                        let r = DVector::from_fn(m, |_, _| rng.random_range(-0.01..0.01));
                        s.ekf_update(&h, &r, &(DMatrix::identity(m, m) * 0.01), false).unwrap();
                        proptest::prop_assert!(s.covariance().trace() <= trace_before + 1e-12);
                    }
                    _ => {
                        if let Some((&id, _)) = s.landmarks().iter().next() {
                            s.marginalize(&[VarKey::Landmark(id)]).unwrap();
                        }
                    }
                }
                assert_psd(&s);
                // offsets tile the covariance exactly
                let mut off = 0;
                for (_, o, d) in s.keys() {
                    proptest::prop_assert_eq!(o, off);
                    off += d;
                }
                proptest::prop_assert_eq!(off, s.dim());
                proptest::prop_assert_eq!(s.clones().len() * 6 + s.landmarks().len() * 3 + 15, s.dim());
            }
        }
    }
}
