//! Scenario files, orchestration and report files.

pub mod config;
pub mod fixtures;
pub mod pipeline;
pub mod reports;

pub use config::{
    strategy_from_toml, strategy_to_toml, AnalysisParams, BoundsSpec, DetectorSpec, ReceiverModel, Scenario, StrategySpec, SweepSpec};
pub use fixtures::{ExpectedValues, ReferenceData};
pub use pipeline::{
    analyze, analyze_outcome, analyze_reference, derive_seed, expected_probe_rates, Analysis, ExpectedEvaluator,
    MonteCarloEvaluator, SimulatedProbeChannel,
};
pub use reports::{
    calibration_stats, read_sweep_csv, reproduce, run_sweep, wilson_interval, write_sweep_csv, CalibrationReport, Check,
    Reproduction, SweepRow,
};
