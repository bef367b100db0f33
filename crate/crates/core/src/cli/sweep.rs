use std::fmt::Write as _;

use super::config::{ExperimentConfig, Mode};
use super::experiment::{run_experiment, ExperimentError};
use crate::par;

/// Parameter grid; every combination is run once.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub qualities: Vec<String>,
    pub keyframe_noise: Vec<f64>,
    pub latencies: Vec<usize>,
}

impl SweepGrid {
    pub fn configs(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for q in &self.qualities {
                for &kn in &self.keyframe_noise {
                    for &lat in &self.latencies {
                        for &seed in &self.seeds {
                            let mut c = base.clone();
                            c.mode = mode;
                            c.seed = seed;
                            c.map.quality = q.clone();
                            c.map.keyframe_noise = kn;
                            c.map.latency_frames = lat;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub mode: Mode,
    pub quality: String,
    pub keyframe_noise: f64,
    pub latency_frames: usize,
    pub ate_rotation_deg: f64,
    pub ate_position_cm: f64,
    pub nees: f64,
    pub max_position_error_cm: f64,
}

/// Runs every grid point (in parallel when available); results keep grid
/// order.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, ExperimentError> {
    let configs = grid.configs(base);
    par::map_slice(&configs, |c| {
        let mut c = c.clone();
        c.map.threaded = false;
        let art = run_experiment(&c)?;
        let s = &art.summary;
        Ok(SweepRow {
            seed: c.seed,
            mode: c.mode,
            quality: c.map.quality.clone(),
            keyframe_noise: c.map.keyframe_noise,
            latency_frames: c.map.latency_frames,
            ate_rotation_deg: s.ate.rotation_deg,
            ate_position_cm: s.ate.position_m * 100.0,
            nees: s.nees.as_ref().map(|n| n.average).unwrap_or(f64::NAN),
            max_position_error_cm: s.max_position_error * 100.0,
        })
    })
    .into_iter()
    .collect()
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

pub const SWEEP_HEADER: &str =
    "seed,mode,quality,keyframe_noise,latency_frames,ate_rotation_deg,ate_position_cm,nees,max_position_error_cm";
pub const SWEEP_AGGREGATE_HEADER: &str =
    "mode,quality,keyframe_noise,latency_frames,runs,median_ate_rotation_deg,median_ate_position_cm,median_nees";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("# mapvins sweep v1\n{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.seed,
            r.mode.name(),
            r.quality,
            r.keyframe_noise,
            r.latency_frames,
            r.ate_rotation_deg,
            r.ate_position_cm,
            r.nees,
            r.max_position_error_cm
        )
        .unwrap();
    }
    s
}

/// Medians over seeds for every other grid coordinate.
pub fn aggregate_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("# mapvins sweep-aggregate v1\n{SWEEP_AGGREGATE_HEADER}\n");
    let mut keys: Vec<(Mode, String, f64, usize)> = Vec::new();
    for r in rows {
        let k = (r.mode, r.quality.clone(), r.keyframe_noise, r.latency_frames);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for k in keys {
        let g: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| (r.mode, r.quality.clone(), r.keyframe_noise, r.latency_frames) == k)
            .collect();
        writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            k.0.name(),
            k.1,
            k.2,
            k.3,
            g.len(),
            median(g.iter().map(|r| r.ate_rotation_deg).collect()),
            median(g.iter().map(|r| r.ate_position_cm).collect()),
            median(g.iter().map(|r| r.nees).collect())
        )
        .unwrap();
    }
    s
}
