use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mapvins::cli::{
    aggregate_csv, build_map_to, evaluate_files, files, run_experiment, run_sweep, sweep_csv, ExperimentConfig,
    ExperimentError, Mode, SweepGrid,
};
use mapvins::evaluation::Alignment;

#[derive(Parser)]
#[command(name = "mapvins", version, about = "Map-aided MSCKF simulator and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    world_seed: Option<u64>,
    /// odometry | map-aided
    #[arg(long)]
    mode: Option<String>,
    /// full | half | low
    #[arg(long)]
    quality: Option<String>,
    #[arg(long)]
    latency_frames: Option<usize>,
    /// table1 | table5 | table6 | table7 | table8
    #[arg(long)]
    preset: Option<String>,
    /// Render offset, meters.
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    keyframe_noise: Option<f64>,
    /// Load the prior map from this file.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Render on a worker thread (not deterministic).
    #[arg(long)]
    threaded: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prior map file from the configured world.
    BuildMap {
        #[command(flatten)]
        overrides: Overrides,
        /// Map file to write.
        #[arg(long, default_value = "map.txt")]
        out: PathBuf,
    },
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare an estimated trajectory CSV against ground truth.
    Evaluate {
        est: PathBuf,
        gt: PathBuf,
        /// none | se3 | sim3
        #[arg(long, default_value = "se3")]
        alignment: String,
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
        lengths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.005,0.01,0.025,0.05,0.1")]
        thresholds: Vec<f64>,
        #[arg(long, short, default_value = "eval")]
        output: PathBuf,
    },
    /// Run a parameter grid and aggregate the results.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "odometry,map-aided")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "half")]
        qualities: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        keyframe_noises: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        latencies: Vec<usize>,
    },
}

fn load(o: &Overrides) -> Result<ExperimentConfig, String> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(s) = o.world_seed {
        cfg.world_seed = s;
    }
    if let Some(m) = &o.mode {
        cfg.mode = Mode::by_name(m).ok_or_else(|| format!("unknown mode `{m}`"))?;
    }
    if let Some(q) = &o.quality {
        cfg.map.quality = q.clone();
    }
    if let Some(l) = o.latency_frames {
        cfg.map.latency_frames = l;
    }
    if let Some(p) = &o.preset {
        cfg.world.preset = p.clone();
    }
    if let Some(x) = o.offset {
        cfg.map.offset = x;
    }
    if let Some(x) = o.keyframe_noise {
        cfg.map.keyframe_noise = x;
    }
    if let Some(m) = &o.map {
        cfg.map.file = Some(m.clone());
    }
    if o.threaded {
        cfg.map.threaded = true;
    }
    if let Some(d) = &o.output {
        cfg.output_dir = d.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), String> {
    let err = |e: ExperimentError| e.to_string();
    match cli.command {
        Command::BuildMap { overrides, out } => {
            let cfg = load(&overrides)?;
            let map = build_map_to(&cfg, &out).map_err(err)?;
            let t = map.map_to_global;
            println!(
                "wrote {}: {} landmarks, {} keyframes, scale {}, translation [{}, {}, {}]",
                out.display(),
                map.landmarks.len(),
                map.keyframes.len(),
                t.scale,
                t.translation.x,
                t.translation.y,
                t.translation.z
            );
        }
        Command::Run { overrides } => {
            let cfg = load(&overrides)?;
            let art = run_experiment(&cfg).map_err(err)?;
            art.write(&cfg.output_dir).map_err(err)?;
            print!("{}", art.summary_text());
        }
        Command::Evaluate { est, gt, alignment, lengths, thresholds, output } => {
            let a = Alignment::by_name(&alignment).ok_or_else(|| format!("unknown alignment `{alignment}`"))?;
            let ev = evaluate_files(&est, &gt, a, &lengths, &thresholds).map_err(err)?;
            ev.write(&output).map_err(err)?;
            println!("ATE: {:.3} deg / {:.2} cm over {} poses", ev.ate.rotation_deg, ev.ate.position_m * 100.0, ev.ate.pairs);
        }
        Command::Sweep { overrides, seeds, modes, qualities, keyframe_noises, latencies } => {
            let base = load(&overrides)?;
            let modes = modes
                .iter()
                .map(|m| Mode::by_name(m).ok_or_else(|| format!("unknown mode `{m}`")))
                .collect::<Result<Vec<_>, _>>()?;
            let grid = SweepGrid { seeds, modes, qualities, keyframe_noise: keyframe_noises, latencies };
            let rows = run_sweep(&base, &grid).map_err(err)?;
            std::fs::create_dir_all(&base.output_dir).map_err(|e| e.to_string())?;
            files::write_file(&base.output_dir.join("sweep.csv"), &sweep_csv(&rows)).map_err(|e| e.to_string())?;
            let agg = aggregate_csv(&rows);
            files::write_file(&base.output_dir.join("sweep_aggregate.csv"), &agg).map_err(|e| e.to_string())?;
            print!("{agg}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
