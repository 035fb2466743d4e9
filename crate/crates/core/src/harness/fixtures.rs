//! Bundled reference counts and the values derived from them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{read_counts_csv, split_metadata, CountSummary, ShiftLabel, SiftedTable};

pub const COUNTS_FILE: &str = "reference_counts.csv";
pub const SIFTED_FILE: &str = "reference_sifted.csv";
pub const EXPECTED_FILE: &str = "reference_expected.toml";

const COUNTS_CSV: &str = include_str!("../../data/reference_counts.csv");
const SIFTED_CSV: &str = include_str!("../../data/reference_sifted.csv");
const EXPECTED_TOML: &str = include_str!("../../data/reference_expected.toml");

/// Expected results and tolerances for the fixture arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedValues {
    pub qber_a: f64,
    pub qber_b: f64,
    pub qber_decimals: u32,
    pub p_a: f64,
    pub p_a_decimals: u32,
    pub merged_counts: f64,
    pub merged_counts_tol: f64,
    pub merged_qber: f64,
    pub merged_qber_tol: f64,
    pub k_upper: f64,
    pub k_upper_rel_tol: f64,
    pub k_lower: f64,
    pub k_lower_rel_tol: f64,
    pub mu: f64,
    pub y0: f64,
    pub ec_inefficiency: f64,
}

/// Counts of two constant-shift runs, their sifted cells and the expected
/// results.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceData {
    /// Shift in picoseconds and detector counts of run A.
    pub shift_a: (f64, CountSummary),
    pub shift_b: (f64, CountSummary),
    pub table: SiftedTable,
    pub expected: ExpectedValues,
}

impl ReferenceData {
    /// The copy compiled into the library.
    pub fn embedded() -> Result<Self> {
        Self::parse(COUNTS_CSV, SIFTED_CSV, EXPECTED_TOML)
    }

    /// Reads the three fixture files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|_| Error::FixtureMissing(path))
        };
        Self::parse(&read(COUNTS_FILE)?, &read(SIFTED_FILE)?, &read(EXPECTED_FILE)?)
    }

    pub fn parse(counts: &str, sifted: &str, expected: &str) -> Result<Self> {
        let (meta, _) = split_metadata(counts.as_bytes())?;
        let shift_of = |label: ShiftLabel| -> Result<f64> {
            let key = format!("shift_ps_{label}");
            meta.get(&key)
                .ok_or_else(|| Error::Parse(format!("counts file lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad value for `{key}`")))
        };
        let rows = read_counts_csv(counts.as_bytes())?;
        let row = |label: ShiftLabel| -> Result<CountSummary> {
            rows.iter()
                .find(|(l, _)| *l == label)
                .map(|(_, c)| *c)
                .ok_or_else(|| Error::Parse(format!("counts file lacks row {label}")))
        };
        let table = SiftedTable::read_csv(sifted.as_bytes())?;
        table.check_invariants()?;
        let expected: ExpectedValues = toml::from_str(expected)?;
        Ok(ReferenceData {
            shift_a: (shift_of(ShiftLabel::A)?, row(ShiftLabel::A)?),
            shift_b: (shift_of(ShiftLabel::B)?, row(ShiftLabel::B)?),
            table,
            expected,
        })
    }

    /// The same data with the A and B runs swapped.
    pub fn relabeled(&self) -> Self {
        ReferenceData {
            shift_a: self.shift_b,
            shift_b: self.shift_a,
            table: self.table.relabeled(),
            expected: self.expected,
        }
    }
}
