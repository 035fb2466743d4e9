//! Shift sweeps, the fixture reproduction and calibration statistics.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::ShiftStrategy;
use crate::detector::{sample_calibration, CalibrationModel, Receiver};
use crate::error::{Error, Result};
use crate::harness::config::AnalysisParams;
use crate::harness::fixtures::ReferenceData;
use crate::harness::pipeline::{analyze_reference, derive_seed, shift_tag, Analysis};
use crate::protocol::{expect_header, qber, run_session, split_metadata, SessionConfig, ShiftLabel};

const SWEEP_HEADER: [&str; 6] = ["shift_ps", "d0", "d1", "n", "qber", "mismatch"];

/// One constant-shift session of a sweep. Undefined ratios are empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shift_ps: f64,
    pub d0: u64,
    pub d1: u64,
    pub n: u64,
    pub qber: Option<f64>,
    pub mismatch: Option<f64>,
}

/// Runs one constant-shift session per shift, each with its own derived
/// seed, and returns the rows sorted by shift.
pub fn run_sweep<D: Receiver + ?Sized>(session: &SessionConfig, receiver: &D, shifts_ps: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = shifts_ps
        .par_iter()
        .map(|&shift| {
            let cfg = SessionConfig {
                seed: derive_seed(session.seed, shift_tag(shift)),
                ..*session
            };
            let out = run_session(&cfg, receiver, &ShiftStrategy::constant(shift)).map_err(|e| e.at_shift(shift))?;
            let s = out.summary(ShiftLabel::A);
            Ok(SweepRow {
                shift_ps: shift,
                d0: s.d0,
                d1: s.d1,
                n: s.n_sent,
                qber: qber(&out.table, ShiftLabel::A).ok(),
                mismatch: s.mismatch(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.shift_ps.total_cmp(&b.shift_ps));
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(SWEEP_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let (_, body) = split_metadata(r)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    expect_header(&mut rdr, &SWEEP_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// One pass/fail line of the reproduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    /// Human-readable tolerance, e.g. `±1` or `4 dp`.
    pub tolerance: String,
    pub pass: bool,
}

impl Check {
    fn absolute(name: &'static str, value: f64, expected: f64, tol: f64) -> Self {
        Check {
            name,
            value,
            expected,
            tolerance: format!("±{tol}"),
            pass: (value - expected).abs() <= tol,
        }
    }

    fn relative(name: &'static str, value: f64, expected: f64, rel: f64) -> Self {
        Check {
            name,
            value,
            expected,
            tolerance: format!("±{}%", rel * 100.0),
            pass: (value - expected).abs() <= rel * expected.abs(),
        }
    }

    fn decimals(name: &'static str, value: f64, expected: f64, places: u32) -> Self {
        let scale = 10f64.powi(places as i32);
        Check {
            name,
            value,
            expected,
            tolerance: format!("{places} dp"),
            pass: (value - expected).abs() * scale < 0.5,
        }
    }

    fn flag(name: &'static str, value: bool, expected: bool) -> Self {
        Check {
            name,
            value: value as u8 as f64,
            expected: expected as u8 as f64,
            tolerance: "exact".into(),
            pass: value == expected,
        }
    }
}

/// Arithmetic over the bundled reference runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub data: ReferenceData,
    pub qber: [f64; 2],
    pub p_a: f64,
    pub analysis: Analysis<f64>,
    pub checks: Vec<Check>,
}

impl Reproduction {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Recomputes everything from the reference data. Draws no random numbers.
pub fn reproduce(data: &ReferenceData) -> Result<Reproduction> {
    let e = data.expected;
    let params = AnalysisParams {
        mu: e.mu,
        y0: e.y0,
        ec_inefficiency: e.ec_inefficiency,
    };
    let qa = qber(&data.table, ShiftLabel::A)?;
    let qb = qber(&data.table, ShiftLabel::B)?;
    let (p_a, analysis) = analyze_reference::<f64>(data, &params)?;
    let m = analysis.merged;
    let r = analysis.report;
    let checks = vec![
        Check::decimals("qber_a", qa, e.qber_a, e.qber_decimals),
        Check::decimals("qber_b", qb, e.qber_b, e.qber_decimals),
        Check::decimals("p_a", p_a, e.p_a, e.p_a_decimals),
        Check::absolute("merged_d0", m.d0, e.merged_counts, e.merged_counts_tol),
        Check::absolute("merged_d1", m.d1, e.merged_counts, e.merged_counts_tol),
        Check::absolute("merged_qber", m.qber, e.merged_qber, e.merged_qber_tol),
        Check::relative("k_upper", r.k_upper, e.k_upper, e.k_upper_rel_tol),
        Check::relative("k_lower", r.k_lower, e.k_lower, e.k_lower_rel_tol),
        Check::flag("breach", r.breach, true),
    ];
    Ok(Reproduction {
        data: data.clone(),
        qber: [qa, qb],
        p_a,
        analysis,
        checks,
    })
}

impl fmt::Display for Reproduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (sa, ca) = self.data.shift_a;
        let (sb, cb) = self.data.shift_b;
        let m = self.analysis.merged;
        let r = self.analysis.report;
        writeln!(f, "{:<10}{:>12}{:>12}{:>12}", "", format!("A ({sa} ps)"), format!("B ({sb} ps)"), "merged")?;
        writeln!(f, "{:<10}{:>12.4}{:>12.4}{:>12}", "p", self.p_a, 1.0 - self.p_a, "")?;
        writeln!(f, "{:<10}{:>12}{:>12}{:>12.1}", "d0", ca.d0, cb.d0, m.d0)?;
        writeln!(f, "{:<10}{:>12}{:>12}{:>12.1}", "d1", ca.d1, cb.d1, m.d1)?;
        writeln!(f, "{:<10}{:>12.5}{:>12.5}{:>12.5}", "E", self.qber[0], self.qber[1], m.qber)?;
        writeln!(f)?;
        writeln!(f, "{:<10}{:>12.1}", "r_EC", r.r_ec)?;
        writeln!(f, "{:<10}{:>12.1}", "K_L", r.k_lower)?;
        writeln!(f, "{:<10}{:>12.1}", "K_U", r.k_upper)?;
        writeln!(f, "{:<10}{:>12}", "breach", r.breach)?;
        writeln!(f)?;
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<12} {:>12.6} expected {:>10} ({})",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.expected,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

/// Frequency of maximal calibration deviations over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_runs: u64,
    pub maximal: u64,
    pub frequency: f64,
    /// Wilson score interval at `z` standard deviations.
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
}

impl CalibrationReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.serialize(self)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        rdr.deserialize()
            .next()
            .ok_or_else(|| Error::Parse("calibration report has no data row".into()))?
            .map_err(Error::from)
    }

    pub fn contains_frequency(&self, p: f64) -> bool {
        self.ci_low <= p && p <= self.ci_high
    }

    /// Whether the count `k` lies within the interval scaled to counts.
    pub fn contains_count(&self, k: u64) -> bool {
        self.contains_frequency(k as f64 / self.n_runs as f64)
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} calibrations at maximal deviation: frequency {:.4}, {}σ interval [{:.4}, {:.4}]",
            self.maximal, self.n_runs, self.frequency, self.z, self.ci_low, self.ci_high
        )
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Samples the calibration `n_runs` times and counts maximal deviations.
pub fn calibration_stats<R: Rng + ?Sized>(model: &CalibrationModel, n_runs: u64, rng: &mut R) -> Result<CalibrationReport> {
    model.validate()?;
    if n_runs == 0 {
        return Err(Error::InvalidConfig("n_runs must be at least 1".into()));
    }
    let maximal = (0..n_runs)
        .filter(|_| model.is_maximal(sample_calibration(model, rng)))
        .count() as u64;
    let z = 3.0;
    let (ci_low, ci_high) = wilson_interval(maximal, n_runs, z);
    Ok(CalibrationReport {
        n_runs,
        maximal,
        frequency: maximal as f64 / n_runs as f64,
        ci_low,
        ci_high,
        z,
    })
}
