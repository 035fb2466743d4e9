use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mismatch ratio undefined: both click probabilities are zero at {shift_ps} ps")]
    UndefinedRatio { shift_ps: f64 },

    #[error("no detected events at shift {0}")]
    NoEvents(String),

    #[error("shifts favour the same bit value, counts cannot be balanced")]
    Unbalanceable,

    #[error("empty table: {0}")]
    EmptyTable(String),

    #[error("empty cell: shift {shift}, basis {basis}")]
    EmptyCell { shift: String, basis: u8 },

    #[error("insufficient probe data at {shift_ps} ps: {announced} announcements (need {required})")]
    InsufficientData {
        shift_ps: f64,
        announced: u64,
        required: u64,
    },

    #[error("no candidate shift pair yields K_L > K_U")]
    NoBreach,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("decoy inversion undefined for gain {gain} with dark yield {y0}")]
    DecoyInversion { gain: f64, y0: f64 },

    #[error("fixture missing: {}", .0.display())]
    FixtureMissing(PathBuf),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error("at shift {shift_ps} ps: {source}")]
    AtShift {
        shift_ps: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::UndefinedRatio { .. } => "undefined_ratio",
            Error::NoEvents(_) => "no_events",
            Error::Unbalanceable => "unbalanceable",
            Error::EmptyTable(_) => "empty_table",
            Error::EmptyCell { .. } => "empty_cell",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::NoBreach => "no_breach",
            Error::Domain(_) => "domain",
            Error::DecoyInversion { .. } => "decoy_inversion",
            Error::FixtureMissing(_) => "fixture_missing",
            Error::Parse(_) => "parse",
            Error::AtShift { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Toml(_) => "config_syntax",
        }
    }

    pub(crate) fn at_shift(self, shift_ps: f64) -> Error {
        Error::AtShift {
            shift_ps,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
