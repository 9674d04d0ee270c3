//! Benchmark harness for the tree DOA classifiers: configuration, model
//! training and checkpoints, Monte-Carlo sweeps and CSV result tables.

pub mod config;
pub mod error;
pub mod experiments;
pub mod models;
pub mod results;

pub use config::{ExperimentConfig, Method, Profile, ThetaMode};
pub use error::{BenchError, Result};
pub use experiments::{run_accuracy_vs_classes, run_rmse_vs_q, run_rmse_vs_snr};
pub use models::{train_models, ModelSet, TrainPlan};
pub use results::{aggregate_classes, aggregate_trials, emit_results, load_results, PlotRow, TrialResult, XAxis};
