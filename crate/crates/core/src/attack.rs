//! Eve's side of the time-shift attack.

use std::io::{Read, Write};

use num_traits::{FromPrimitive, Num};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::ShiftWeights;
use crate::error::{Error, Result};
use crate::protocol::{expect_header, split_metadata, CountSummary, ShiftLabel, SiftedTable};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Every pulse goes to `shift_a_ps`.
    ConstantA,
    /// Every pulse goes to `shift_b_ps`.
    ConstantB,
    /// Each pulse independently goes to A with probability `p_a`, else B.
    Mixture,
    /// No attack.
    None,
}

/// Eve's shift strategy: two arrival-time shifts and the probability of
/// using the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftStrategy {
    pub shift_a_ps: f64,
    pub shift_b_ps: f64,
    pub p_a: f64,
    pub mode: ShiftMode,
}

impl ShiftStrategy {
    /// All pulses shifted by `shift_ps`, recorded under label A.
    pub fn constant(shift_ps: f64) -> Self {
        ShiftStrategy {
            shift_a_ps: shift_ps,
            shift_b_ps: shift_ps,
            p_a: 1.0,
            mode: ShiftMode::ConstantA,
        }
    }

    pub fn mixture(shift_a_ps: f64, shift_b_ps: f64, p_a: f64) -> Result<Self> {
        let s = ShiftStrategy {
            shift_a_ps,
            shift_b_ps,
            p_a,
            mode: ShiftMode::Mixture,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_a) {
            return Err(Error::InvalidConfig(format!("p_a = {} outside [0, 1]", self.p_a)));
        }
        if !self.shift_a_ps.is_finite() || !self.shift_b_ps.is_finite() {
            return Err(Error::InvalidConfig("shifts must be finite".into()));
        }
        if self.mode == ShiftMode::Mixture && self.shift_a_ps == self.shift_b_ps {
            return Err(Error::InvalidConfig("mixture needs two distinct shifts".into()));
        }
        Ok(())
    }

    /// Arrival-time shift applied to pulses carrying `label`.
    pub fn shift_time(&self, label: ShiftLabel) -> f64 {
        match label {
            ShiftLabel::A => self.shift_a_ps,
            ShiftLabel::B => self.shift_b_ps,
            ShiftLabel::Unshifted => 0.0,
        }
    }

    /// Fraction of pulses that carry `label`.
    pub fn share(&self, label: ShiftLabel) -> f64 {
        match (self.mode, label) {
            (ShiftMode::ConstantA, ShiftLabel::A)
            | (ShiftMode::ConstantB, ShiftLabel::B)
            | (ShiftMode::None, ShiftLabel::Unshifted) => 1.0,
            (ShiftMode::Mixture, ShiftLabel::A) => self.p_a,
            (ShiftMode::Mixture, ShiftLabel::B) => 1.0 - self.p_a,
            _ => 0.0,
        }
    }

    /// Mixture weights as seen by the bound computation.
    pub fn weights(&self) -> ShiftWeights<f64> {
        ShiftWeights {
            a: self.share(ShiftLabel::A),
            b: self.share(ShiftLabel::B),
        }
    }
}

/// Picks the shift for one pulse.
pub fn choose_shift<R: Rng + ?Sized>(strategy: &ShiftStrategy, rng: &mut R) -> ShiftLabel {
    match strategy.mode {
        ShiftMode::ConstantA => ShiftLabel::A,
        ShiftMode::ConstantB => ShiftLabel::B,
        ShiftMode::None => ShiftLabel::Unshifted,
        ShiftMode::Mixture => {
            if rng.random_bool(strategy.p_a) {
                ShiftLabel::A
            } else {
                ShiftLabel::B
            }
        }
    }
}

/// Count gaps `(|d0_A - d1_A|, |d0_B - d1_B|)` of two shifts favouring
/// opposite bits.
fn balance_gaps<T>(a: &CountSummary, b: &CountSummary) -> Result<(T, T)>
where
    T: Num + FromPrimitive + PartialOrd + Copy,
{
    let c = |n: u64| T::from_u64(n).ok_or_else(|| Error::Domain(format!("count {n} not representable")));
    let (d0a, d1a, d0b, d1b) = (c(a.d0)?, c(a.d1)?, c(b.d0)?, c(b.d1)?);
    // Signed gaps without requiring a signed T.
    if d0a > d1a && d1b > d0b {
        Ok((d0a - d1a, d1b - d0b))
    } else if d1a > d0a && d0b > d1b {
        Ok((d1a - d0a, d0b - d1b))
    } else {
        Err(Error::Unbalanceable)
    }
}

/// Probability of shift A that equalises Bob's 0 and 1 detection counts.
///
/// Solves `p d0_A + (1-p) d0_B = p d1_A + (1-p) d1_B`. Works in any numeric
/// type, so exact rationals give an exact answer.
pub fn balance_pa<T>(a: &CountSummary, b: &CountSummary) -> Result<T>
where
    T: Num + FromPrimitive + PartialOrd + Copy,
{
    let (gap_a, gap_b) = balance_gaps::<T>(a, b)?;
    Ok(gap_b / (gap_a + gap_b))
}

/// Both balancing weights, each computed directly from the gaps so that
/// swapping the arguments swaps the weights exactly.
pub fn balanced_weights<T: Real>(a: &CountSummary, b: &CountSummary) -> Result<ShiftWeights<T>> {
    let (gap_a, gap_b) = balance_gaps::<T>(a, b)?;
    let total = gap_a + gap_b;
    Ok(ShiftWeights {
        a: gap_b / total,
        b: gap_a / total,
    })
}

/// What Alice and Bob see of the mixture: bit counts and error rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedStatistics<T> {
    /// Bit-0 detections over the session budget, all bases.
    pub d0: T,
    /// Bit-1 detections over the session budget, all bases.
    pub d1: T,
    /// Sifted detections, `Ñ·Q`.
    pub detections: T,
    /// Sifted detections with `y != x`.
    pub errors: T,
    /// Overall QBER `E`.
    pub qber: T,
}

/// Per-shift scale that turns raw counts into the mixture's share of the
/// session budget: `p_i * budget / sent_i`.
///
/// For tables recorded as separate full-length constant-shift runs this is
/// just `p_i`; for a mixture session it is close to 1.
pub(crate) fn count_scale<T: Real>(p: T, budget: u64, sent: u64, what: &str) -> Result<T> {
    if p == T::zero() {
        return Ok(T::zero());
    }
    if sent == 0 {
        return Err(Error::EmptyTable(format!("no pulses recorded at shift {what}")));
    }
    Ok(p * T::from_count(budget) / T::from_count(sent))
}

/// Merges the two shifts' statistics with the mixture weights.
pub fn merged_statistics<T: Real>(
    table: &SiftedTable,
    summary_a: &CountSummary,
    summary_b: &CountSummary,
    weights: ShiftWeights<T>,
) -> Result<MergedStatistics<T>> {
    let ca = count_scale(weights.a, table.n_sent, summary_a.n_sent, "A")?;
    let cb = count_scale(weights.b, table.n_sent, summary_b.n_sent, "B")?;
    let cells_a = table.shift(ShiftLabel::A);
    let cells_b = table.shift(ShiftLabel::B);
    let wa = count_scale(weights.a, table.n_sent, cells_a.n_sent, "A")?;
    let wb = count_scale(weights.b, table.n_sent, cells_b.n_sent, "B")?;
    let n = T::from_count;
    let detections = wa * n(cells_a.total()) + wb * n(cells_b.total());
    if detections <= T::zero() {
        return Err(Error::EmptyTable("no sifted detections at the weighted shifts".into()));
    }
    let errors = wa * n(cells_a.errors()) + wb * n(cells_b.errors());
    Ok(MergedStatistics {
        d0: ca * n(summary_a.d0) + cb * n(summary_b.d0),
        d1: ca * n(summary_a.d1) + cb * n(summary_b.d1),
        detections,
        errors,
        qber: errors / detections,
    })
}

/// Result of sending a batch of probe pulses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub sent: u64,
    /// Pulses Bob announced as detected.
    pub announced: u64,
    /// Probe pulses whose basis later turned out to match Bob's.
    pub matched: u64,
    /// Announced detections among the matched pulses.
    pub matched_detected: u64,
}

/// A receiver Eve can probe through public announcements only.
pub trait ProbeChannel {
    /// Pulses available in one session.
    fn pulse_budget(&self) -> u64;

    /// Sends `n` pulses prepared with bit `bit` at `shift_ps`.
    fn send_probes(&mut self, shift_ps: f64, bit: u8, n: u64) -> Result<ProbeOutcome>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeEstimate {
    pub shift_ps: f64,
    pub n_probe: u64,
    pub n_detected: u64,
    /// Announced detections per probe pulse.
    pub rate: f64,
    pub stderr: f64,
    /// Detection rate on basis-matched probes prepared with bit 0 and 1.
    pub detector_rates: [f64; 2],
    pub detector_stderr: [f64; 2],
}

impl ProbeEstimate {
    /// Estimated `max(r0/r1, r1/r0)` with its delta-method standard error.
    pub fn mismatch(&self) -> (f64, f64) {
        let [r0, r1] = self.detector_rates;
        let [s0, s1] = self.detector_stderr;
        let ratio = (r0 / r1).max(r1 / r0);
        let rel = ((s0 / r0).powi(2) + (s1 / r1).powi(2)).sqrt();
        (ratio, ratio * rel)
    }

    pub fn row(&self) -> ProbeRow {
        ProbeRow {
            shift_ps: self.shift_ps,
            n_probe: self.n_probe,
            n_detected: self.n_detected,
            rate: self.rate,
            stderr: self.stderr,
        }
    }
}

/// One line of the probe CSV export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub shift_ps: f64,
    pub n_probe: u64,
    pub n_detected: u64,
    pub rate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeReport {
    pub estimates: Vec<ProbeEstimate>,
}

impl ProbeReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.estimates {
            out.serialize(e.row())?;
        }
        if self.estimates.is_empty() {
            out.write_record(["shift_ps", "n_probe", "n_detected", "rate", "stderr"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Vec<ProbeRow>> {
        let (_, body) = split_metadata(r)?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        expect_header(&mut rdr, &["shift_ps", "n_probe", "n_detected", "rate", "stderr"])?;
        rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
    }
}

/// Binomial rate estimate `k/n` and its standard error.
fn binomial(k: u64, n: u64) -> (f64, f64) {
    let p = k as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Minimum announced detections per probed shift.
pub const MIN_PROBE_ANNOUNCEMENTS: u64 = 100;

/// Estimates the detectors' click rates at each shift by diverting a small
/// fraction of the session to probe pulses.
///
/// Half the probes at each shift carry bit 0 and half bit 1; the split
/// between detectors uses the basis-matched probes, whose bits become known
/// once bases and test bits are disclosed.
pub fn probe_mismatch<C: ProbeChannel>(channel: &mut C, shifts: &[f64], probe_fraction: f64) -> Result<ProbeReport> {
    if !(probe_fraction > 0.0 && probe_fraction <= 0.1) {
        return Err(Error::InvalidConfig(format!("probe fraction {probe_fraction} outside (0, 0.1]")));
    }
    let n_probe = (probe_fraction * channel.pulse_budget() as f64).round() as u64;
    let mut estimates = Vec::with_capacity(shifts.len());
    for &shift in shifts {
        let halves = [n_probe / 2, n_probe - n_probe / 2];
        let mut outcomes = [ProbeOutcome::default(); 2];
        for bit in 0..2 {
            outcomes[bit] = channel.send_probes(shift, bit as u8, halves[bit])?;
        }
        let announced = outcomes[0].announced + outcomes[1].announced;
        if announced < MIN_PROBE_ANNOUNCEMENTS || outcomes.iter().any(|o| o.matched_detected == 0) {
            return Err(Error::InsufficientData {
                shift_ps: shift,
                announced,
                required: MIN_PROBE_ANNOUNCEMENTS,
            });
        }
        let (rate, stderr) = binomial(announced, n_probe);
        let d = outcomes.map(|o| binomial(o.matched_detected, o.matched));
        estimates.push(ProbeEstimate {
            shift_ps: shift,
            n_probe,
            n_detected: announced,
            rate,
            stderr,
            detector_rates: [d[0].0, d[1].0],
            detector_stderr: [d[0].1, d[1].1],
        });
    }
    Ok(ProbeReport { estimates })
}

/// Computes bounds for candidate strategies during shift optimisation.
pub trait PairEvaluator {
    /// Detection counts of a constant-shift session at `shift_ps`.
    fn counts(&mut self, shift_ps: f64) -> Result<CountSummary>;

    /// `(K_L, K_U)` for a mixture strategy.
    fn bounds(&mut self, strategy: &ShiftStrategy) -> Result<(f64, f64)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftPairChoice {
    pub strategy: ShiftStrategy,
    pub k_lower: f64,
    pub k_upper: f64,
}

impl ShiftPairChoice {
    pub fn gap(&self) -> f64 {
        self.k_lower - self.k_upper
    }
}

/// Exhaustive search over candidate shift pairs for the balanced mixture
/// with the largest `K_L - K_U`.
///
/// Shift A is always the one favouring bit 0. Pairs that cannot be balanced,
/// or whose tables are empty, are skipped. Ties go to the smaller
/// `|shift_a| + |shift_b|`.
pub fn optimize_shift_pair<E: PairEvaluator>(candidates: &[f64], evaluator: &mut E) -> Result<ShiftPairChoice> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate shifts".into()));
    }
    let counts = candidates
        .iter()
        .map(|&s| evaluator.counts(s).map_err(|e| e.at_shift(s)))
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<ShiftPairChoice> = None;
    for i in 0..candidates.len() {
        for j in (i + 1)..candidates.len() {
            let (ia, ib) = if counts[i].d0 > counts[i].d1 { (i, j) } else { (j, i) };
            let p_a = match balance_pa::<f64>(&counts[ia], &counts[ib]) {
                Ok(p) => p,
                Err(Error::Unbalanceable) => continue,
                Err(e) => return Err(e),
            };
            let strategy = ShiftStrategy::mixture(candidates[ia], candidates[ib], p_a)?;
            let (k_lower, k_upper) = match evaluator.bounds(&strategy) {
                Ok(b) => b,
                Err(Error::EmptyCell { .. } | Error::EmptyTable(_) | Error::NoEvents(_) | Error::DecoyInversion { .. }) => {
                    continue
                }
                Err(e) => return Err(e),
            };
            if !(k_lower > k_upper && k_lower > 0.0) {
                continue;
            }
            let cand = ShiftPairChoice {
                strategy,
                k_lower,
                k_upper,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    let size = |c: &ShiftPairChoice| c.strategy.shift_a_ps.abs() + c.strategy.shift_b_ps.abs();
                    cand.gap() > b.gap() || (cand.gap() == b.gap() && size(&cand) < size(b))
                }
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or(Error::NoBreach)
}
