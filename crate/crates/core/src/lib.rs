pub mod cli;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod map_oracle;
pub mod map_update;
pub mod par;
pub mod propagation;
pub mod simulator;
pub mod state;
pub mod vision;
