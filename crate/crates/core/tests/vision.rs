use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mapvins::geometry::{Pose, UnitQuaternion, Vec3};
use mapvins::simulator::{build_world, sample_trajectory, CameraSimConfig, CameraSynth, TrajectorySpec, WorldSpec};
use mapvins::state::{CloneId, FeatureId, ImuState, StateVector, VarKey};
use mapvins::vision::{
    apply_rows, msckf_update, project, slam_rows, to_camera_frame, triangulate, triangulate_views,
    BearingMeasurement, CameraCalibration, FeatureTrack, View, VisionConfig,
};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// Zero pixel noise: every simulated track triangulates back to its landmark.
#[test]
fn zero_noise_tracks_triangulate_exactly() {
    let spec = TrajectorySpec::default();
    let world = build_world(&WorldSpec::default(), 7);
    let calib = CameraCalibration::default();
    let cfg = VisionConfig::for_camera(&calib);
    let mut synth = CameraSynth::new(calib, CameraSimConfig { pixel_noise: 0.0, ..Default::default() }, 3);
    let mut views: BTreeMap<(u64, u64), Vec<View>> = BTreeMap::new();
    for k in 0..60 {
        let t = k as f64 / spec.camera_rate;
        let pose = sample_trajectory(&spec, t).unwrap().pose;
        let cam = calib.camera_pose(&pose);
        for f in synth.frame(&world, &pose, t).features {
            views.entry((f.track.0, f.landmark)).or_default().push(View {
                rotation: cam.rotation_matrix(),
                center: cam.position,
                uv: f.uv,
                sigma: calib.sigma_normalized(),
            });
        }
    }
    let mut checked = 0;
    for ((_, id), v) in &views {
        if v.len() < 10 {
            continue;
        }
        let tri = triangulate_views(v, &cfg).unwrap();
        let truth = world.position(*id).unwrap();
        assert!((tri.position - truth).norm() < 1e-8, "landmark {id}: {}", (tri.position - truth).norm());
        checked += 1;
    }
    assert!(checked > 50, "{checked}");
}

struct Toy {
    state: StateVector,
    calib: CameraCalibration,
    cfg: VisionConfig,
    tracks: Vec<FeatureTrack>,
}

/// Window of `clones` poses with noisy observations of `features` points.
fn toy(seed: u64, clones: u64, features: usize) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = CameraCalibration::default();
    let cfg = VisionConfig::for_camera(&calib);
    let imu = ImuState { orientation: UnitQuaternion::from_rotation_vector(&Vec3::new(0.1, 0.2, 0.3)), ..Default::default() };
    let a = DMatrix::from_fn(15, 15, |_, _| gauss(&mut rng));
    let p0 = (&a * a.transpose() / 15.0 + DMatrix::identity(15, 15)) * 1e-4;
    let mut state = StateVector::new(0.0, imu, p0, 11).unwrap();
    let mut poses = Vec::new();
    for i in 0..clones {
        state.imu.position = Vec3::new(0.25 * i as f64, -0.1 * i as f64, 0.03 * i as f64);
        state.augment_clone(CloneId(i), i as f64).unwrap();
        poses.push(state.imu.pose());
    }
    let cam0 = calib.camera_pose(&poses[0]);
    let sigma = calib.sigma_normalized();
    let mut tracks = Vec::new();
    for k in 0..features {
        let in_cam = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.5..0.5), rng.random_range(2.0..5.0));
        let p_f = cam0.to_reference(&in_cam);
        let mut t = FeatureTrack::new(FeatureId(k as u64));
        for (i, pose) in poses.iter().enumerate() {
            let truth = Pose::new(pose.rotation, pose.position + Vec3::new(0.002, -0.001, 0.001) * i as f64);
            let uv = project(&to_camera_frame(&truth, &calib, &p_f), 0.05).unwrap()
                + Vector2::new(gauss(&mut rng), gauss(&mut rng)) * sigma;
            t.push(BearingMeasurement { feature: t.id, clone: CloneId(i as u64), timestamp: i as f64, uv, sigma });
        }
        tracks.push(t);
    }
    Toy { state, calib, cfg, tracks }
}

// With an uninformative landmark prior, the SLAM update followed by
// marginalizing the landmark approaches the MSCKF update.
#[test]
fn slam_update_approaches_msckf_in_the_infinite_prior_limit() {
    let Toy { state, calib, cfg, tracks } = toy(81, 2, 1);
    let track = &tracks[0];

    let mut msckf = state.clone();
    let report = msckf_update(&[track], &mut msckf, &calib, &cfg).unwrap();
    assert_eq!(report.accepted.len(), 1);
    assert_eq!(report.accepted[0].projected_rows, 1);

    let tri = triangulate(track, &state, &calib, &cfg).unwrap();
    let mut slam = state.clone();
    let n = slam.dim();
    slam.add_landmark(track.id, tri.position, 1.0, &DMatrix::zeros(3, n), &(DMatrix::identity(3, 3) * 1e4)).unwrap();
    let (blocks, rejected) = slam_rows(&track.measurements, &slam, &calib, &cfg);
    assert!(rejected.is_empty());
    apply_rows(&mut slam, blocks).unwrap();
    slam.marginalize(&[VarKey::Landmark(track.id)]).unwrap();

    let dp = (slam.covariance() - msckf.covariance()).norm() / msckf.covariance().norm();
    assert!(dp < 1e-3, "covariance rel diff {dp}");
    let prior_shift = (msckf.imu.position - state.imu.position).norm();
    let diff = (slam.imu.position - msckf.imu.position).norm();
    assert!(diff <= 1e-3 * prior_shift.max(1e-9), "{diff} vs shift {prior_shift}");
    for (a, b) in slam.clones().iter().zip(msckf.clones()) {
        assert!((a.pose.position - b.pose.position).norm() <= 1e-3 * prior_shift.max(1e-9));
    }
}

// Stacking features jointly makes the update independent of their order.
#[test]
fn msckf_update_is_order_invariant() {
    let Toy { state, calib, cfg, tracks } = toy(82, 4, 5);
    let fwd: Vec<&FeatureTrack> = tracks.iter().collect();
    let rev: Vec<&FeatureTrack> = tracks.iter().rev().collect();
    let mut a = state.clone();
    let mut b = state.clone();
    let ra = msckf_update(&fwd, &mut a, &calib, &cfg).unwrap();
    let rb = msckf_update(&rev, &mut b, &calib, &cfg).unwrap();
    assert_eq!(ra.accepted.len(), 5);
    assert_eq!(rb.accepted.len(), 5);
    assert!((a.covariance() - b.covariance()).amax() < 1e-10);
    assert!((a.imu.position - b.imu.position).amax() < 1e-10);
    for (x, y) in a.clones().iter().zip(b.clones()) {
        assert!((x.pose.position - y.pose.position).amax() < 1e-10);
        assert!((x.pose.rotation_matrix() - y.pose.rotation_matrix()).amax() < 1e-10);
    }
}
