//! Synthetic data, experiment grids, result files and run configuration.

pub mod config;
pub mod data;
pub mod experiment;
pub mod output;

pub use config::Settings;
pub use data::{generate_synthetic, synthetic_signal, SYNTHETIC_NOISE_VARIANCE};
pub use experiment::{
    derive_seed, prediction_grid, run_cell, run_experiment, Cell, CurvePoint, ExperimentKind,
    ExperimentOutput, ExperimentSpec, Method, PredictiveCurve, ResultRow, CURVE_POINTS,
    SCHEMA_VERSION,
};
pub use output::{
    percentile, read_rows, scan_bound, summarize, write_outputs, BoundScan, SummaryRow,
};
