//! Simulation and analysis of the time-shift attack on a gated two-detector
//! BB84 receiver.
//!
//! The crate is organised bottom-up:
//!
//! * [`detector`] models the time-dependent efficiency of the two gated
//!   detectors, pulse-width blurring and the activation-time calibration.
//! * [`protocol`] runs Monte Carlo BB84 sessions under a shift strategy and
//!   accumulates sifted contingency tables.
//! * [`attack`] holds the eavesdropper side: count balancing, shift choice,
//!   remote probing and shift-pair optimisation.
//! * [`bounds`] computes the error-correction cost together with the
//!   attack-blind lower bound and the mismatch-aware upper bound on the key
//!   length.
//! * [`harness`] wires the pieces into scenarios, sweeps and report files.
//!
//! Key-length arithmetic is generic over the scalar type (see [`Real`]);
//! the aliases at the crate root fix it to `f64` for everyday use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod attack;
pub mod bounds;
pub mod detector;
pub mod error;
pub mod harness;
pub mod protocol;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub use attack::{ShiftMode, ShiftStrategy};
pub use detector::{CalibrationModel, DetectorPair, EfficiencyCurve, GateProfile};
pub use protocol::{CountSummary, PulseRecord, SessionConfig, ShiftLabel, SiftedTable};

/// Key-rate inputs in double precision.
pub type KeyRateInputs = bounds::KeyRateInputs<f64>;
/// Decoy-state estimates in double precision.
pub type DecoyEstimates = bounds::DecoyEstimates<f64>;
/// Bound report in double precision.
pub type BoundsReport = bounds::BoundsReport<f64>;
/// Shift mixture weights in double precision.
pub type ShiftWeights = bounds::ShiftWeights<f64>;
/// Merged attack statistics in double precision.
pub type MergedStatistics = attack::MergedStatistics<f64>;

/// Single-precision variants, mostly useful for cross-checking rounding
/// sensitivity of the bounds.
pub mod f32 {
    pub type KeyRateInputs = crate::bounds::KeyRateInputs<f32>;
    pub type DecoyEstimates = crate::bounds::DecoyEstimates<f32>;
    pub type BoundsReport = crate::bounds::BoundsReport<f32>;
    pub type ShiftWeights = crate::bounds::ShiftWeights<f32>;
}
