//! CSV schemas. Every file starts with a `# mapvins <kind> v1` line followed
//! by a header row; lines starting with `#` are skipped on read.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::estimator::MapDiagnostics;
use crate::evaluation::{RpeStats, TrajectoryLog};
use crate::geometry::{Pose, UnitQuaternion, Vec3};
use crate::propagation::ImuReading;

pub const TRAJECTORY_HEADER: &str = "timestamp,px,py,pz,qx,qy,qz,qw";
pub const IMU_HEADER: &str = "timestamp,wx,wy,wz,ax,ay,az";
pub const DIAGNOSTICS_HEADER: &str =
    "frame,timestamp,render_id,trigger_frame,latency_frames,rendered,matches,slam_rows,attached,rejected,stale,stale_total";
pub const RPE_HEADER: &str = "length_m,count,t_median,t_q1,t_q3,t_whisker_low,t_whisker_high,r_median_deg,r_q1_deg,r_q3_deg";
pub const RECALL_HEADER: &str = "threshold_m,fraction";
pub const METRICS_HEADER: &str = "metric,value";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn banner(kind: &str) -> String {
    format!("# mapvins {kind} v1\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io { path: path.to_path_buf(), source }
}

pub fn write_file(path: &Path, text: &str) -> Result<(), FileError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Trajectory rows: position of the body in `{G}` and its body-to-world
/// orientation `ᴳ_I q̄` (TUM ordering).
pub fn trajectory_csv(log: &TrajectoryLog) -> String {
    let mut s = banner("trajectory");
    s.push_str(TRAJECTORY_HEADER);
    s.push('\n');
    for e in log.entries() {
        let p = e.pose.position;
        let mut q = e.pose.rotation.inverse().coords();
        // canonical sign, and no "-0" in the output
        let sign = if q[3] < 0.0 { -1.0 } else { 1.0 };
        q.iter_mut().for_each(|c| *c = *c * sign + 0.0);
        writeln!(s, "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", e.timestamp, p.x, p.y, p.z, q[0], q[1], q[2], q[3])
            .unwrap();
    }
    s
}

pub fn imu_csv(readings: &[ImuReading]) -> String {
    let mut s = banner("imu");
    s.push_str(IMU_HEADER);
    s.push('\n');
    for r in readings {
        let (w, a) = (r.gyro, r.accel);
        writeln!(s, "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", r.timestamp, w.x, w.y, w.z, a.x, a.y, a.z).unwrap();
    }
    s
}

pub fn diagnostics_csv(rows: &[MapDiagnostics]) -> String {
    let mut s = banner("diagnostics");
    s.push_str(DIAGNOSTICS_HEADER);
    s.push('\n');
    for d in rows {
        writeln!(
            s,
            "{},{:.6},{},{},{},{},{},{},{},{},{},{}",
            d.frame,
            d.timestamp,
            d.render_id,
            d.trigger.0,
            d.latency_frames,
            d.rendered,
            d.matches,
            d.slam_rows,
            d.attached,
            d.rejected,
            u8::from(d.stale),
            d.stale_total
        )
        .unwrap();
    }
    s
}

pub fn rpe_csv(stats: &[RpeStats]) -> String {
    let mut s = banner("rpe");
    s.push_str(RPE_HEADER);
    s.push('\n');
    for r in stats {
        let (t, q) = (&r.translation, &r.rotation);
        writeln!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.length, t.count, t.median, t.q1, t.q3, t.whisker_low, t.whisker_high, q.median, q.q1, q.q3
        )
        .unwrap();
    }
    s
}

pub fn recall_csv(curve: &[(f64, f64)]) -> String {
    let mut s = banner("recall");
    s.push_str(RECALL_HEADER);
    s.push('\n');
    for (t, f) in curve {
        writeln!(s, "{t:.6},{f:.6}").unwrap();
    }
    s
}

pub fn metrics_csv(metrics: &[(String, f64)]) -> String {
    let mut s = banner("metrics");
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for (k, v) in metrics {
        writeln!(s, "{k},{v}").unwrap();
    }
    s
}

/// Numeric rows of a CSV file with the given column count; returns
/// `(line number, values)`.
fn numeric_rows(path: &Path, text: impl BufRead, header: &str) -> Result<Vec<(usize, Vec<f64>)>, FileError> {
    let cols = header.split(',').count();
    let mut out = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let ln = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !seen_header && t.replace(' ', "") == header {
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = t.split([',', ' ', '\t']).filter(|f| !f.is_empty()).collect();
        let parse_err = |msg: String| FileError::Parse { path: path.to_path_buf(), line: ln, msg };
        if fields.len() != cols {
            return Err(parse_err(format!("expected {cols} columns, found {}", fields.len())));
        }
        let vals = fields
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| parse_err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((ln, vals));
    }
    Ok(out)
}

pub fn parse_trajectory(path: &Path, text: impl BufRead) -> Result<TrajectoryLog, FileError> {
    let mut log = TrajectoryLog::new();
    for (ln, v) in numeric_rows(path, text, TRAJECTORY_HEADER)? {
        let parse_err = |msg: String| FileError::Parse { path: path.to_path_buf(), line: ln, msg };
        let q = UnitQuaternion::new(v[4], v[5], v[6], v[7]).map_err(|e| parse_err(e.to_string()))?;
        let pose = Pose::new(q.inverse(), Vec3::new(v[1], v[2], v[3]));
        log.push(v[0], pose, None).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(log)
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryLog, FileError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    parse_trajectory(path, std::io::BufReader::new(f))
}

pub fn parse_imu(path: &Path, text: impl BufRead) -> Result<Vec<ImuReading>, FileError> {
    Ok(numeric_rows(path, text, IMU_HEADER)?
        .into_iter()
        .map(|(_, v)| ImuReading { timestamp: v[0], gyro: Vec3::new(v[1], v[2], v[3]), accel: Vec3::new(v[4], v[5], v[6]) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log() -> TrajectoryLog {
        let mut log = TrajectoryLog::new();
        let q = UnitQuaternion::from_rotation_vector(&Vec3::new(0.1, 0.2, 0.3));
        log.push(0.0, Pose::new(q, Vec3::new(1.0, 2.0, 3.0)), None).unwrap();
        log.push(0.5, Pose::identity(), None).unwrap();
        log
    }

    #[test]
    fn trajectory_golden() {
        let mut log = TrajectoryLog::new();
        log.push(0.0, Pose::new(UnitQuaternion::default(), Vec3::new(1.0, -2.0, 0.5)), None).unwrap();
        let expected = "# mapvins trajectory v1\n\
                        timestamp,px,py,pz,qx,qy,qz,qw\n\
                        0.000000,1.000000000,-2.000000000,0.500000000,0.000000000,0.000000000,0.000000000,1.000000000\n";
        assert_eq!(trajectory_csv(&log), expected);
    }

    #[test]
    fn diagnostics_golden_header() {
        let s = diagnostics_csv(&[]);
        assert_eq!(s, format!("# mapvins diagnostics v1\n{DIAGNOSTICS_HEADER}\n"));
        assert_eq!(
            DIAGNOSTICS_HEADER.split(',').collect::<Vec<_>>(),
            [
                "frame",
                "timestamp",
                "render_id",
                "trigger_frame",
                "latency_frames",
                "rendered",
                "matches",
                "slam_rows",
                "attached",
                "rejected",
                "stale",
                "stale_total"
            ]
        );
    }

    #[test]
    fn trajectory_round_trip() {
        let log = sample_log();
        let text = trajectory_csv(&log);
        let back = parse_trajectory(Path::new("t.csv"), text.as_bytes()).unwrap();
        for (a, b) in log.entries().iter().zip(back.entries()) {
            assert!((a.pose.position - b.pose.position).norm() < 1e-8);
            assert!((a.pose.rotation.inverse() * b.pose.rotation).angle() < 1e-8);
        }
    }

    #[test]
    fn malformed_row_names_the_line() {
        let text = format!("{}{TRAJECTORY_HEADER}\n0,0,0,0,0,0,0,1\n1,0,0,zero,0,0,0,1\n", banner("trajectory"));
        match parse_trajectory(Path::new("t.csv"), text.as_bytes()) {
            Err(FileError::Parse { line, msg, .. }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("zero"));
            }
            other => panic!("{other:?}"),
        }
        let text = format!("{TRAJECTORY_HEADER}\n0,0,0\n");
        assert!(matches!(parse_trajectory(Path::new("t.csv"), text.as_bytes()), Err(FileError::Parse { line: 2, .. })));
    }

    #[test]
    fn imu_round_trip() {
        let r = vec![ImuReading { timestamp: 0.005, gyro: Vec3::new(0.1, 0.2, 0.3), accel: Vec3::new(0.0, 0.0, 9.81) }];
        let back = parse_imu(Path::new("i.csv"), imu_csv(&r).as_bytes()).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].accel - r[0].accel).norm() < 1e-9);
    }
}
