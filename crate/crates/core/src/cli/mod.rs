//! Configuration, experiment orchestration and file I/O.

mod config;
mod experiment;
pub mod files;
mod sweep;

pub use config::{
    CameraSection, ConfigError, EvaluationSection, ExperimentConfig, FilterSection, InitialSection, MapSection, Mode,
    NoiseSection, TrajectorySection, WorldSection,
};
pub use experiment::{
    build_map_to, build_prior_map, build_scenario, evaluate_files, run_experiment, run_with_map, summarize, worlds,
    Evaluation, ExperimentError, RunArtifacts, Scenario, Summary,
};
pub use sweep::{aggregate_csv, run_sweep, sweep_csv, SweepGrid, SweepRow};
