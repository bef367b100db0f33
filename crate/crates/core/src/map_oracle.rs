//! Prior map and the render-then-match stand-in.
//!
//! A [`PriorMap`] holds landmarks with unit descriptors in the map frame
//! `{N}`. [`render`] synthesizes what a rendered view at a requested pose
//! would yield after feature extraction: bearings of visible landmarks with
//! their (noisy) descriptors, seen from a pose that deviates from the request
//! by a sampled error. The estimator-facing [`RenderedView`] carries only the
//! requested pose and the declared statistics; the actual pose and the
//! landmark ids live in [`RenderTruth`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Matrix6, SVector, Vector2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{Pose, Sim3Transform, UnitQuaternion, Vec3};
use crate::map_update::{perturbed_render_pose, RenderContext, RenderRequest};
use crate::state::FeatureId;
use crate::vision::CameraCalibration;

pub const DESCRIPTOR_DIM: usize = 32;
pub type Descriptor = SVector<f64, DESCRIPTOR_DIM>;

pub const MAP_MAGIC: &str = "MAPVINS-MAP v1";

#[derive(Debug, Error)]
pub enum MapError {
    #[error("world has no landmarks or the trajectory is empty")]
    EmptyWorld,
    #[error("invalid map transform")]
    InvalidTransform,
    #[error("map file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Base descriptor of a landmark, a deterministic function of `(seed, id)`.
pub fn landmark_descriptor(seed: u64, id: u64) -> Descriptor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let d = Descriptor::from_fn(|_, _| StandardNormal.sample(&mut rng));
    d.normalize()
}

/// Adds isotropic Gaussian noise and renormalizes.
pub fn perturb_descriptor(d: &Descriptor, sigma: f64, rng: &mut impl Rng) -> Descriptor {
    if sigma == 0.0 {
        return *d;
    }
    let n = Descriptor::from_fn(|_, _| StandardNormal.sample(rng));
    (d + n * sigma).normalize()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapLandmark {
    pub id: u64,
    /// `ᴺp`
    pub position: Vec3,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub landmarks: Vec<MapLandmark>,
    /// Keyframe camera poses in `{N}`.
    pub keyframes: Vec<Pose>,
    /// `{s, ᴺ_G R, t}` with `ᴺp = s·ᴺ_G R·ᴳp + t`.
    pub map_to_global: Sim3Transform,
    pub seed: u64,
}

impl PriorMap {
    pub fn landmark_count(&self) -> usize {
        self.landmarks.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapBuildOptions {
    pub stride: usize,
    /// Standard deviation of keyframe position noise, meters.
    pub keyframe_noise: f64,
    /// Standard deviation of landmark position noise, meters.
    pub landmark_noise: f64,
}

impl Default for MapBuildOptions {
    fn default() -> Self {
        Self { stride: 10, keyframe_noise: 0.0, landmark_noise: 0.0 }
    }
}

/// Builds a prior map from world landmarks `(id, ᴳp)` and a trajectory of
/// camera poses in `{G}`.
///
/// Keyframe pose noise models an imperfect offline reconstruction: each
/// keyframe gets a position error, and landmarks inherit the error of the
/// keyframe nearest to them, which is how a reconstruction anchored on those
/// keyframes would misplace its content.
pub fn build_map(
    landmarks: &[(u64, Vec3)],
    trajectory: &[Pose],
    map_transform: Sim3Transform,
    opts: MapBuildOptions,
    seed: u64,
) -> Result<PriorMap, MapError> {
    if landmarks.is_empty() || trajectory.is_empty() {
        return Err(MapError::EmptyWorld);
    }
    if !(map_transform.scale > 0.0) {
        return Err(MapError::InvalidTransform);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6d61_70));
    let stride = opts.stride.max(1);
    let mut kf_offsets = Vec::new();
    let mut keyframes = Vec::new();
    for pose in trajectory.iter().step_by(stride) {
        let e = gaussian3(&mut rng) * opts.keyframe_noise;
        kf_offsets.push((pose.position, e));
        let noisy = Pose::new(pose.rotation, pose.position + e);
        keyframes.push(to_map_frame(&noisy, &map_transform));
    }
    let out = landmarks
        .iter()
        .map(|&(id, p)| {
            let kf_err = if opts.keyframe_noise > 0.0 {
                kf_offsets
                    .iter()
                    .min_by(|a, b| (a.0 - p).norm_squared().total_cmp(&(b.0 - p).norm_squared()))
                    .map(|k| k.1)
                    .unwrap_or_else(Vec3::zeros)
            } else {
                Vec3::zeros()
            };
            let noise = gaussian3(&mut rng) * opts.landmark_noise;
            MapLandmark {
                id,
                position: map_transform.apply(&(p + kf_err + noise)),
                descriptor: landmark_descriptor(seed, id),
            }
        })
        .collect();
    Ok(PriorMap { landmarks: out, keyframes, map_to_global: map_transform, seed })
}

fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Camera pose in `{G}` (`ᶜ_G R`, `ᴳp_C`) to the same camera in `{N}`.
pub fn to_map_frame(pose_g: &Pose, t: &Sim3Transform) -> Pose {
    Pose::new(pose_g.rotation * t.rotation.inverse(), t.apply(&pose_g.position))
}

/// Degradation model of rendered views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderQuality {
    pub visibility: f64,
    pub descriptor_noise: f64,
    /// Bearing noise, normalized units.
    pub bearing_noise: f64,
    /// Per-axis standard deviation of the render orientation error, radians.
    pub sigma_theta: f64,
    /// Per-axis standard deviation of the render position error, meters.
    pub sigma_p: f64,
    pub latency_frames: usize,
    /// Maximum rendered depth, meters.
    pub max_range: f64,
}

impl RenderQuality {
    pub fn full() -> Self {
        Self::preset(0.9, 0.05, 0.5 / 250.0)
    }

    pub fn half() -> Self {
        Self::preset(0.7, 0.08, 0.75 / 250.0)
    }

    pub fn low() -> Self {
        Self::preset(0.4, 0.15, 1.5 / 250.0)
    }

    fn preset(visibility: f64, descriptor_noise: f64, bearing_noise: f64) -> Self {
        Self {
            visibility,
            descriptor_noise,
            bearing_noise,
            sigma_theta: 0.5f64.to_radians(),
            sigma_p: 0.01,
            latency_frames: 2,
            max_range: 20.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "half" => Some(Self::half()),
            "low" => Some(Self::low()),
            _ => None,
        }
    }

    /// A noiseless, fully visible render.
    pub fn perfect() -> Self {
        Self {
            visibility: 1.0,
            descriptor_noise: 0.0,
            bearing_noise: 0.0,
            sigma_theta: 0.0,
            sigma_p: 0.0,
            latency_frames: 0,
            max_range: 20.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.visibility > 0.0
            && self.visibility <= 1.0
            && self.descriptor_noise >= 0.0
            && self.bearing_noise >= 0.0
            && self.sigma_theta >= 0.0
            && self.sigma_p >= 0.0
            && self.max_range > 0.0
    }

    /// Declared covariance of `[θ̃ p̃]`.
    pub fn pose_covariance(&self) -> Matrix6<f64> {
        let mut c = Matrix6::zeros();
        for i in 0..3 {
            c[(i, i)] = self.sigma_theta * self.sigma_theta;
            c[(i + 3, i + 3)] = self.sigma_p * self.sigma_p;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedObservation {
    pub descriptor: Descriptor,
    pub uv: Vector2<f64>,
}

/// Estimator-facing result of a render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub context: RenderContext,
    pub observations: Vec<RenderedObservation>,
}

/// Hidden side of a render, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTruth {
    pub actual_pose: Pose,
    /// Map landmark id of each observation, in order.
    pub landmark_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub view: RenderedView,
    pub truth: RenderTruth,
}

/// Synthesizes the observations of a rendered view at `request`.
pub fn render(
    map: &PriorMap,
    request: &RenderRequest,
    calib: &CameraCalibration,
    quality: &RenderQuality,
    seed: u64,
) -> Render {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = &map.map_to_global;
    let theta = gaussian3(&mut rng) * quality.sigma_theta;
    let dp = gaussian3(&mut rng) * quality.sigma_p;
    let actual = perturbed_render_pose(&request.pose, t, &theta, &dp);
    let max_depth = quality.max_range * t.scale;
    let r = actual.rotation_matrix();
    let mut candidates = Vec::new();
    for (i, lm) in map.landmarks.iter().enumerate() {
        let pk = r * (lm.position - actual.position);
        if !(pk.z > 0.05 * t.scale && pk.z < max_depth) {
            continue;
        }
        let uv = Vector2::new(pk.x / pk.z, pk.y / pk.z);
        if calib.in_image(&calib.to_pixel(&uv)) {
            candidates.push((i, uv));
        }
    }
    let keep = if quality.visibility >= 1.0 {
        candidates.len()
    } else {
        (quality.visibility * candidates.len() as f64).round() as usize
    };
    let mut chosen: Vec<usize> = sample(&mut rng, candidates.len(), keep).into_iter().collect();
    chosen.sort_unstable();
    let mut observations = Vec::with_capacity(keep);
    let mut landmark_ids = Vec::with_capacity(keep);
    for k in chosen {
        let (i, uv) = candidates[k];
        let lm = &map.landmarks[i];
        let noise = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)) * quality.bearing_noise;
        observations.push(RenderedObservation {
            descriptor: perturb_descriptor(&lm.descriptor, quality.descriptor_noise, &mut rng),
            uv: uv + noise,
        });
        landmark_ids.push(lm.id);
    }
    let context = RenderContext {
        id: request.id,
        trigger: request.trigger,
        trigger_time: request.trigger_time,
        pose: request.pose,
        transform: *t,
        sigma: quality.bearing_noise.max(1e-6),
        pose_cov: quality.pose_covariance(),
    };
    Render { view: RenderedView { context, observations }, truth: RenderTruth { actual_pose: actual, landmark_ids } }
}

/// A live feature offered for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveFeature {
    pub id: FeatureId,
    pub descriptor: Descriptor,
    pub uv: Vector2<f64>,
}

/// Rendered observation `view_index` matched to live feature `feature`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Correspondence {
    pub view_index: usize,
    pub feature: FeatureId,
}

/// Nearest and second-nearest squared distances with the nearest index.
fn nearest_two<'a>(q: &Descriptor, set: impl Iterator<Item = &'a Descriptor>) -> Option<(usize, f64, f64)> {
    let mut best = (usize::MAX, f64::INFINITY, f64::INFINITY);
    for (i, d) in set.enumerate() {
        let dist = (q - d).norm_squared();
        if dist < best.1 {
            best = (i, dist, best.1);
        } else if dist < best.2 {
            best.2 = dist;
        }
    }
    (best.0 != usize::MAX).then_some(best)
}

/// Mutual nearest neighbours in descriptor space that pass the ratio test
/// `d₁ < ρ·d₂` in both directions.
pub fn match_descriptors(view: &[Descriptor], live: &[Descriptor], ratio: f64) -> Vec<(usize, usize)> {
    let fwd: Vec<Option<(usize, f64, f64)>> = view.iter().map(|q| nearest_two(q, live.iter())).collect();
    let bwd: Vec<Option<(usize, f64, f64)>> = live.iter().map(|q| nearest_two(q, view.iter())).collect();
    let passes = |(_, d1, d2): (usize, f64, f64)| d1.sqrt() < ratio * d2.sqrt();
    let mut out = Vec::new();
    for (i, f) in fwd.iter().enumerate() {
        let Some(f) = *f else { continue };
        let Some(b) = bwd[f.0] else { continue };
        if b.0 == i && passes(f) && passes(b) {
            out.push((i, f.0));
        }
    }
    out
}

/// Matches a rendered view against live features, then keeps the matches
/// that `verify` accepts (geometric verification against the estimate).
pub fn match_view(
    view: &RenderedView,
    live: &[LiveFeature],
    ratio: f64,
    mut verify: impl FnMut(&Correspondence) -> bool,
) -> Vec<Correspondence> {
    let vd: Vec<Descriptor> = view.observations.iter().map(|o| o.descriptor).collect();
    let ld: Vec<Descriptor> = live.iter().map(|f| f.descriptor).collect();
    match_descriptors(&vd, &ld, ratio)
        .into_iter()
        .map(|(i, j)| Correspondence { view_index: i, feature: live[j].id })
        .filter(|c| verify(c))
        .collect()
}

fn fmt_f(x: f64) -> String {
    format!("{x:e}")
}

/// Writes a map in the versioned text format.
pub fn write_map(map: &PriorMap, w: &mut impl Write) -> Result<(), MapError> {
    let t = &map.map_to_global;
    let q = t.rotation.coords();
    let mut s = String::new();
    writeln!(s, "{MAP_MAGIC}").unwrap();
    writeln!(s, "seed {}", map.seed).unwrap();
    writeln!(
        s,
        "transform {} {} {} {} {} {} {} {}",
        fmt_f(t.scale),
        fmt_f(q[0]),
        fmt_f(q[1]),
        fmt_f(q[2]),
        fmt_f(q[3]),
        fmt_f(t.translation.x),
        fmt_f(t.translation.y),
        fmt_f(t.translation.z)
    )
    .unwrap();
    writeln!(s, "landmarks {} {}", map.landmarks.len(), DESCRIPTOR_DIM).unwrap();
    for lm in &map.landmarks {
        write!(s, "{} {} {} {}", lm.id, fmt_f(lm.position.x), fmt_f(lm.position.y), fmt_f(lm.position.z)).unwrap();
        for v in lm.descriptor.iter() {
            write!(s, " {}", fmt_f(*v)).unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "keyframes {}", map.keyframes.len()).unwrap();
    for kf in &map.keyframes {
        let q = kf.rotation.coords();
        writeln!(
            s,
            "{} {} {} {} {} {} {}",
            fmt_f(kf.position.x),
            fmt_f(kf.position.y),
            fmt_f(kf.position.z),
            fmt_f(q[0]),
            fmt_f(q[1]),
            fmt_f(q[2]),
            fmt_f(q[3])
        )
        .unwrap();
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Lines<R: BufRead> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_fields(&mut self) -> Result<Vec<String>, MapError> {
        loop {
            self.line += 1;
            let l = self
                .inner
                .next()
                .ok_or_else(|| MapError::Parse { line: self.line, msg: "unexpected end of file".into() })??;
            let t = l.trim();
            if !t.is_empty() {
                return Ok(t.split_whitespace().map(str::to_owned).collect());
            }
        }
    }

    fn err(&self, msg: impl Into<String>) -> MapError {
        MapError::Parse { line: self.line, msg: msg.into() }
    }

    fn nums(&self, fields: &[String]) -> Result<Vec<f64>, MapError> {
        fields.iter().map(|f| f.parse::<f64>().map_err(|_| self.err(format!("bad number '{f}'")))).collect()
    }

    fn header(&mut self, key: &str, n: usize) -> Result<Vec<String>, MapError> {
        let f = self.next_fields()?;
        if f.first().map(String::as_str) != Some(key) || f.len() != n + 1 {
            return Err(self.err(format!("expected '{key}' with {n} values")));
        }
        Ok(f[1..].to_vec())
    }
}

/// Reads a map written by [`write_map`].
pub fn read_map(r: impl BufRead) -> Result<PriorMap, MapError> {
    let mut lines = Lines { inner: r.lines(), line: 0 };
    let magic = lines.next_fields()?.join(" ");
    if magic != MAP_MAGIC {
        return Err(lines.err(format!("expected header '{MAP_MAGIC}'")));
    }
    let seed = lines.header("seed", 1)?[0].parse::<u64>().map_err(|_| lines.err("bad seed"))?;
    let tf = lines.header("transform", 8)?;
    let v = lines.nums(&tf)?;
    let rot = UnitQuaternion::new(v[1], v[2], v[3], v[4]).map_err(|e| lines.err(e.to_string()))?;
    let map_to_global = Sim3Transform::new(v[0], rot, Vec3::new(v[5], v[6], v[7])).map_err(|e| lines.err(e.to_string()))?;
    let lh = lines.header("landmarks", 2)?;
    let count: usize = lh[0].parse().map_err(|_| lines.err("bad landmark count"))?;
    if lh[1] != DESCRIPTOR_DIM.to_string() {
        return Err(lines.err(format!("descriptor dimension must be {DESCRIPTOR_DIM}")));
    }
    let mut landmarks = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let f = lines.next_fields()?;
        if f.len() != 4 + DESCRIPTOR_DIM {
            return Err(lines.err(format!("expected {} fields", 4 + DESCRIPTOR_DIM)));
        }
        let id: u64 = f[0].parse().map_err(|_| lines.err("bad landmark id"))?;
        if !seen.insert(id) {
            return Err(lines.err(format!("duplicate landmark id {id}")));
        }
        let v = lines.nums(&f[1..])?;
        let descriptor = Descriptor::from_column_slice(&v[3..]);
        if (descriptor.norm() - 1.0).abs() > 1e-9 {
            return Err(lines.err("descriptor is not unit norm"));
        }
        landmarks.push(MapLandmark { id, position: Vec3::new(v[0], v[1], v[2]), descriptor });
    }
    let kh = lines.header("keyframes", 1)?;
    let kcount: usize = kh[0].parse().map_err(|_| lines.err("bad keyframe count"))?;
    let mut keyframes = Vec::with_capacity(kcount);
    for _ in 0..kcount {
        let f = lines.next_fields()?;
        if f.len() != 7 {
            return Err(lines.err("expected 7 keyframe fields"));
        }
        let v = lines.nums(&f)?;
        let q = UnitQuaternion::new(v[3], v[4], v[5], v[6]).map_err(|e| lines.err(e.to_string()))?;
        keyframes.push(Pose::new(q, Vec3::new(v[0], v[1], v[2])));
    }
    Ok(PriorMap { landmarks, keyframes, map_to_global, seed })
}

pub fn save_map(map: &PriorMap, path: &Path) -> Result<(), MapError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_map(map, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<PriorMap, MapError> {
    read_map(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::CloneId;
    use approx::assert_relative_eq;

    fn request(pose: Pose) -> RenderRequest {
        RenderRequest { id: 0, trigger: CloneId(0), trigger_time: 0.0, pose, offset: Vec3::zeros() }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<(u64, Vec3)> {
        (0..n)
            .map(|i| {
                (i as u64, Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..8.0)))
            })
            .collect()
    }

    #[test]
    fn descriptors_are_unit_and_deterministic() {
        let a = landmark_descriptor(7, 3);
        assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-12);
        assert_eq!(a, landmark_descriptor(7, 3));
        assert_ne!(a, landmark_descriptor(7, 4));
    }

    #[test]
    fn noiseless_render_on_axis() {
        let map = build_map(&[(0, Vec3::new(0.0, 0.0, 2.0))], &[Pose::identity()], Sim3Transform::identity(), MapBuildOptions::default(), 1)
            .unwrap();
        let r = render(&map, &request(Pose::identity()), &CameraCalibration::default(), &RenderQuality::perfect(), 5);
        assert_eq!(r.view.observations.len(), 1);
        assert_eq!(r.view.observations[0].uv, Vector2::zeros());
        assert_eq!(r.truth.landmark_ids, vec![0]);
    }

    #[test]
    fn visibility_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        // 1000 landmarks all inside the frustum
        let pts: Vec<(u64, Vec3)> = (0..1000)
            .map(|i| (i, Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3), rng.random_range(2.0..5.0))))
            .collect();
        let map = build_map(&pts, &[Pose::identity()], Sim3Transform::identity(), MapBuildOptions::default(), 1).unwrap();
        let q = RenderQuality { visibility: 0.5, ..RenderQuality::perfect() };
        let a = render(&map, &request(Pose::identity()), &CameraCalibration::default(), &q, 9);
        let b = render(&map, &request(Pose::identity()), &CameraCalibration::default(), &q, 9);
        assert_eq!(a.view.observations.len(), 500);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_and_scaled_map_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let pts = random_cloud(&mut rng, 50);
        let map = build_map(&pts, &[Pose::identity()], Sim3Transform::identity(), MapBuildOptions::default(), 1).unwrap();
        for (lm, (_, p)) in map.landmarks.iter().zip(&pts) {
            assert_eq!(lm.position, *p);
        }
        let t = Sim3Transform::new(2.0, UnitQuaternion::from_rotation_vector(&Vec3::new(0.1, 0.2, 0.3)), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let map = build_map(&pts, &[Pose::identity()], t, MapBuildOptions::default(), 1).unwrap();
        for (lm, (_, p)) in map.landmarks.iter().zip(&pts) {
            assert!((t.apply_inverse(&lm.position) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn keyframe_stride() {
        let traj = vec![Pose::identity(); 5430];
        let map = build_map(&[(0, Vec3::zeros())], &traj, Sim3Transform::identity(), MapBuildOptions::default(), 1).unwrap();
        assert_eq!(map.keyframes.len(), 543);
    }

    #[test]
    fn empty_world_rejected() {
        assert!(matches!(
            build_map(&[], &[Pose::identity()], Sim3Transform::identity(), MapBuildOptions::default(), 1),
            Err(MapError::EmptyWorld)
        ));
    }

    #[test]
    fn exact_matching_is_one_to_one() {
        let ds: Vec<Descriptor> = (0..100).map(|i| landmark_descriptor(3, i)).collect();
        let m = match_descriptors(&ds, &ds, 0.8);
        assert_eq!(m.len(), 100);
        assert!(m.iter().all(|(i, j)| i == j));
    }

    #[test]
    fn ratio_test_rejects_ambiguous() {
        let a = landmark_descriptor(3, 1);
        let b = landmark_descriptor(3, 2);
        let q = (a + b).normalize();
        let m = match_descriptors(&[q], &[a, b], 0.8);
        assert!(m.is_empty());
    }

    #[test]
    fn matching_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let a: Vec<Descriptor> = (0..80).map(|i| perturb_descriptor(&landmark_descriptor(3, i), 0.1, &mut rng)).collect();
        let b: Vec<Descriptor> = (20..120).map(|i| perturb_descriptor(&landmark_descriptor(3, i), 0.1, &mut rng)).collect();
        let mut fwd = match_descriptors(&a, &b, 0.8);
        let mut bwd: Vec<(usize, usize)> = match_descriptors(&b, &a, 0.8).into_iter().map(|(i, j)| (j, i)).collect();
        fwd.sort();
        bwd.sort();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn noisy_matching_precision() {
        let mut correct = 0usize;
        let mut total = 0usize;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let ids: Vec<u64> = (0..200).collect();
            let view: Vec<Descriptor> = ids.iter().map(|&i| perturb_descriptor(&landmark_descriptor(trial, i), 0.1, &mut rng)).collect();
            let live: Vec<Descriptor> = ids.iter().map(|&i| perturb_descriptor(&landmark_descriptor(trial, i), 0.05, &mut rng)).collect();
            for (i, j) in match_descriptors(&view, &live, 0.8) {
                total += 1;
                correct += usize::from(i == j);
            }
        }
        assert!(correct as f64 >= 0.95 * total as f64 && total > 0);
    }

    #[test]
    fn map_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let pts = random_cloud(&mut rng, 20);
        let traj: Vec<Pose> =
            (0..30).map(|i| Pose::new(UnitQuaternion::from_rotation_vector(&Vec3::new(0.0, 0.01 * i as f64, 0.0)), Vec3::new(i as f64, 0.0, 0.0))).collect();
        for t in [Sim3Transform::identity(), Sim3Transform::new(2.0, UnitQuaternion::from_rotation_vector(&Vec3::new(0.3, 0.0, 0.1)), Vec3::new(1.0, 0.0, 0.5)).unwrap()] {
            let map = build_map(&pts, &traj, t, MapBuildOptions { stride: 3, ..Default::default() }, 4).unwrap();
            let mut buf = Vec::new();
            write_map(&map, &mut buf).unwrap();
            let back = read_map(&buf[..]).unwrap();
            assert_eq!(back, map);
        }
    }

    #[test]
    fn malformed_map_reports_line() {
        let text = format!("{MAP_MAGIC}\nseed 1\ntransform 1 0 0 0 1 0 0 0\nlandmarks 1 32\n0 1 2\n");
        match read_map(text.as_bytes()) {
            Err(MapError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_map("nope\n".as_bytes()), Err(MapError::Parse { line: 1, .. })));
    }

    #[test]
    fn render_is_deterministic_and_map_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let pts = random_cloud(&mut rng, 300);
        let map = build_map(&pts, &[Pose::identity()], Sim3Transform::identity(), MapBuildOptions::default(), 1).unwrap();
        let copy = map.clone();
        let q = RenderQuality::half();
        let a = render(&map, &request(Pose::identity()), &CameraCalibration::default(), &q, 3);
        let b = render(&map, &request(Pose::identity()), &CameraCalibration::default(), &q, 3);
        assert_eq!(a, b);
        assert_eq!(map, copy);
        // observations are in front of the actual pose and inside the image
        let calib = CameraCalibration::default();
        for (o, id) in a.view.observations.iter().zip(&a.truth.landmark_ids) {
            let lm = map.landmarks.iter().find(|l| l.id == *id).unwrap();
            assert!(a.truth.actual_pose.to_body(&lm.position).z > 0.0);
            let px = calib.to_pixel(&o.uv);
            assert!(px.x > -10.0 && px.x < 434.0);
        }
    }
}
