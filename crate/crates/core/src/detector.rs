//! Gated detector efficiency model.
//!
//! Each detector is described by a [`GateProfile`]: a flat-topped activation
//! window whose edges fall off as Gaussian error functions. Convolving such a
//! profile with a Gaussian optical pulse yields another profile of the same
//! family, so pulse blurring is exact and closed-form.

use std::f64::consts::SQRT_2;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FWHM of a Gaussian divided by its standard deviation.
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Largest per-gate dark-count probability accepted by [`DetectorPair`].
pub const MAX_DARK_COUNT_PROB: f64 = 1e-2;

/// Time-dependent efficiency of one gated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateProfile {
    /// Efficiency at the gate centre, in (0, 1].
    pub peak_efficiency: f64,
    /// Gate centre, picoseconds.
    pub center_time: f64,
    /// Full width of the plateau, picoseconds.
    pub gate_width: f64,
    /// Standard deviation of the Gaussian edges, picoseconds.
    pub edge_width: f64,
}

impl GateProfile {
    pub fn new(peak_efficiency: f64, center_time: f64, gate_width: f64, edge_width: f64) -> Result<Self> {
        let p = GateProfile {
            peak_efficiency,
            center_time,
            gate_width,
            edge_width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_efficiency > 0.0 && self.peak_efficiency <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "peak efficiency {} outside (0, 1]",
                self.peak_efficiency
            )));
        }
        if !(self.gate_width > 0.0) || !(self.edge_width > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gate width {} and edge width {} must be positive",
                self.gate_width, self.edge_width
            )));
        }
        if !self.center_time.is_finite() {
            return Err(Error::InvalidConfig("gate centre must be finite".into()));
        }
        Ok(())
    }

    /// Efficiency at time `t` (picoseconds).
    ///
    /// Depends on `t` only through `|t - center_time|`, so the profile is
    /// exactly symmetric.
    pub fn efficiency(&self, t: f64) -> f64 {
        let d = (t - self.center_time).abs();
        let rel = box_gauss(d, self.gate_width, self.edge_width) / box_gauss(0.0, self.gate_width, self.edge_width);
        self.peak_efficiency * rel.clamp(0.0, 1.0)
    }

    /// Scale factor of the underlying box-times-Gaussian shape.
    fn amplitude(&self) -> f64 {
        self.peak_efficiency / box_gauss(0.0, self.gate_width, self.edge_width)
    }

    /// Integral of the efficiency over all time, in efficiency·picoseconds.
    pub fn area(&self) -> f64 {
        self.amplitude() * self.gate_width
    }
}

/// Unit-height box of width `w` convolved with a unit-area Gaussian of
/// standard deviation `sigma`, evaluated at distance `d >= 0` from the centre.
fn box_gauss(d: f64, w: f64, sigma: f64) -> f64 {
    let s = SQRT_2 * sigma;
    let half = 0.5 * w;
    // erfc form keeps precision in the far tail.
    0.5 * (libm::erfc((d - half) / s) - libm::erfc((d + half) / s))
}

/// Efficiency of `profile` at time `t`.
pub fn profile_efficiency(profile: &GateProfile, t: f64) -> f64 {
    profile.efficiency(t)
}

/// Convolves a gate profile with a unit-area Gaussian pulse of the given
/// full width at half maximum.
///
/// Edge variances add, the area is preserved and the peak can only drop.
pub fn blur_with_pulse(profile: &GateProfile, pulse_fwhm: f64) -> Result<GateProfile> {
    if !(pulse_fwhm >= 0.0) || !pulse_fwhm.is_finite() {
        return Err(Error::InvalidConfig(format!("pulse FWHM {pulse_fwhm} must be non-negative")));
    }
    if pulse_fwhm == 0.0 {
        return Ok(*profile);
    }
    let pulse_sigma = pulse_fwhm / FWHM_PER_SIGMA;
    let edge_width = profile.edge_width.hypot(pulse_sigma);
    let peak = profile.amplitude() * box_gauss(0.0, profile.gate_width, edge_width);
    Ok(GateProfile {
        peak_efficiency: peak,
        edge_width,
        ..*profile
    })
}

/// Uniformly sampled efficiency curve, as measured by sweeping the arrival
/// time in fixed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyCurve {
    samples: Vec<(f64, f64)>,
}

impl EfficiencyCurve {
    pub const DEFAULT_STEP_PS: f64 = 50.0;

    pub fn new(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("efficiency curve has no samples".into()));
        }
        if let Some(&(s, e)) = samples.iter().find(|(s, e)| !s.is_finite() || !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidConfig(format!("bad curve sample ({s}, {e})")));
        }
        if samples.len() > 1 {
            let step = samples[1].0 - samples[0].0;
            if !(step > 0.0) {
                return Err(Error::InvalidConfig("curve shifts must be strictly increasing".into()));
            }
            let tol = 1e-9 * step.max(1.0);
            for (i, w) in samples.windows(2).enumerate() {
                if ((w[1].0 - w[0].0) - step).abs() > tol {
                    return Err(Error::InvalidConfig(format!(
                        "non-uniform curve spacing at sample {}",
                        i + 1
                    )));
                }
            }
        }
        Ok(EfficiencyCurve { samples })
    }

    /// Samples `profile` on `[start, stop]` with spacing `step`.
    pub fn from_profile(profile: &GateProfile, start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || stop < start {
            return Err(Error::InvalidConfig(format!("bad sampling grid {start}..{stop} step {step}")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let samples = (0..n)
            .map(|i| {
                let t = start + i as f64 * step;
                (t, profile.efficiency(t))
            })
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn step(&self) -> Option<f64> {
        (self.samples.len() > 1).then(|| self.samples[1].0 - self.samples[0].0)
    }

    /// Linear interpolation between samples; constant beyond either end.
    pub fn efficiency_at(&self, t: f64) -> f64 {
        let first = self.samples[0];
        let last = self.samples[self.samples.len() - 1];
        if t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        let i = self.samples.partition_point(|&(s, _)| s <= t) - 1;
        let (s0, e0) = self.samples[i];
        let (s1, e1) = self.samples[i + 1];
        e0 + (e1 - e0) * (t - s0) / (s1 - s0)
    }

    /// Trapezoidal integral over the sampled range.
    pub fn integral(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["shift_ps", "efficiency"])?;
        for &(s, e) in &self.samples {
            out.write_record([s.to_string(), e.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "shift_ps" || &headers[1] != "efficiency" {
            return Err(Error::Parse(format!("expected header shift_ps,efficiency, got {headers:?}")));
        }
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Parse(format!("bad number {:?}", &rec[i])))
            };
            samples.push((parse(0)?, parse(1)?));
        }
        Self::new(samples)
    }
}

/// The two gated detectors of Bob's receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorPair {
    /// Detector that reports bit 0.
    pub d0: GateProfile,
    /// Detector that reports bit 1.
    pub d1: GateProfile,
    /// Dark-count probability per gate, per detector.
    pub dark_count_prob: f64,
}

impl DetectorPair {
    pub fn new(d0: GateProfile, d1: GateProfile, dark_count_prob: f64) -> Result<Self> {
        let pair = DetectorPair { d0, d1, dark_count_prob };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.d0.validate()?;
        self.d1.validate()?;
        if !(0.0..=MAX_DARK_COUNT_PROB).contains(&self.dark_count_prob) {
            return Err(Error::InvalidConfig(format!(
                "dark count probability {} outside [0, {MAX_DARK_COUNT_PROB}]",
                self.dark_count_prob
            )));
        }
        Ok(())
    }

    /// Both detectors share one profile.
    pub fn identical(profile: GateProfile, dark_count_prob: f64) -> Result<Self> {
        Self::new(profile, profile, dark_count_prob)
    }

    /// Difference of the two activation times, `d1 - d0`.
    pub fn activation_offset(&self) -> f64 {
        self.d1.center_time - self.d0.center_time
    }

    pub fn profile(&self, detector: usize) -> &GateProfile {
        match detector {
            0 => &self.d0,
            _ => &self.d1,
        }
    }

    /// Per-photon efficiencies of both detectors at time `t`.
    pub fn efficiencies(&self, t: f64) -> [f64; 2] {
        [self.d0.efficiency(t), self.d1.efficiency(t)]
    }

    /// Both profiles blurred by a pulse of the given FWHM.
    pub fn blurred(&self, pulse_fwhm: f64) -> Result<Self> {
        Ok(DetectorPair {
            d0: blur_with_pulse(&self.d0, pulse_fwhm)?,
            d1: blur_with_pulse(&self.d1, pulse_fwhm)?,
            dark_count_prob: self.dark_count_prob,
        })
    }

    /// Moves detector 1 so that the activation offset becomes `offset`.
    pub fn with_activation_offset(&self, offset: f64) -> Self {
        let mut out = *self;
        out.d1.center_time = self.d0.center_time + offset;
        out
    }
}

/// Anything that gives both detectors' per-photon efficiency at an arrival
/// time, plus a shift-independent dark-count probability.
pub trait Receiver: Sync {
    fn efficiencies(&self, t: f64) -> [f64; 2];
    fn dark_count_prob(&self) -> f64;
    fn validate(&self) -> Result<()>;
}

impl Receiver for DetectorPair {
    fn efficiencies(&self, t: f64) -> [f64; 2] {
        DetectorPair::efficiencies(self, t)
    }

    fn dark_count_prob(&self) -> f64 {
        self.dark_count_prob
    }

    fn validate(&self) -> Result<()> {
        DetectorPair::validate(self)
    }
}

/// Two measured efficiency curves, used as-is (already including the
/// pulse width of the measurement).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePair {
    pub d0: EfficiencyCurve,
    pub d1: EfficiencyCurve,
    pub dark_count_prob: f64,
}

impl CurvePair {
    pub fn from_pair(pair: &DetectorPair, start: f64, stop: f64, step: f64) -> Result<Self> {
        Ok(CurvePair {
            d0: EfficiencyCurve::from_profile(&pair.d0, start, stop, step)?,
            d1: EfficiencyCurve::from_profile(&pair.d1, start, stop, step)?,
            dark_count_prob: pair.dark_count_prob,
        })
    }
}

impl Receiver for CurvePair {
    fn efficiencies(&self, t: f64) -> [f64; 2] {
        [self.d0.efficiency_at(t), self.d1.efficiency_at(t)]
    }

    fn dark_count_prob(&self) -> f64 {
        self.dark_count_prob
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_DARK_COUNT_PROB).contains(&self.dark_count_prob) {
            return Err(Error::InvalidConfig(format!(
                "dark count probability {} outside [0, {MAX_DARK_COUNT_PROB}]",
                self.dark_count_prob
            )));
        }
        Ok(())
    }
}

/// Dark-count-inclusive click probabilities of both detectors for a single
/// photon arriving at `t`.
pub fn click_probabilities<D: Receiver + ?Sized>(receiver: &D, t: f64) -> [f64; 2] {
    let dark = receiver.dark_count_prob();
    receiver.efficiencies(t).map(|eta| 1.0 - (1.0 - eta) * (1.0 - dark))
}

/// `max(a/b, b/a)` for non-negative rates.
pub fn rate_ratio(a: f64, b: f64) -> Option<f64> {
    match (a > 0.0, b > 0.0) {
        (false, false) => None,
        (true, false) | (false, true) => Some(f64::INFINITY),
        (true, true) => Some((a / b).max(b / a)),
    }
}

/// Efficiency mismatch `max(p0/p1, p1/p0)` of dark-count-inclusive click
/// probabilities at `shift`.
pub fn mismatch_ratio<D: Receiver + ?Sized>(pair: &D, shift: f64) -> Result<f64> {
    let [p0, p1] = click_probabilities(pair, shift);
    rate_ratio(p0, p1)
        .ok_or(Error::UndefinedRatio { shift_ps: shift })
}

/// Statistics of the built-in activation-time calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationModel {
    /// Activation offset the calibration aims for, picoseconds.
    pub nominal_offset: f64,
    /// Largest deviation from the nominal offset, picoseconds.
    pub max_deviation: f64,
    /// Probability that a calibration lands at `±max_deviation`.
    pub deviation_prob: f64,
    /// Standard deviation of the other outcomes, picoseconds.
    pub residual_jitter: f64,
}

impl Default for CalibrationModel {
    fn default() -> Self {
        CalibrationModel::observed()
    }
}

impl CalibrationModel {
    /// Observed frequency of maximal deviations: 106 of 2844 calibrations.
    pub const OBSERVED_MAXIMAL: u64 = 106;
    pub const OBSERVED_RUNS: u64 = 2844;

    pub fn observed() -> Self {
        CalibrationModel {
            nominal_offset: 0.0,
            max_deviation: 100.0,
            deviation_prob: Self::OBSERVED_MAXIMAL as f64 / Self::OBSERVED_RUNS as f64,
            residual_jitter: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.deviation_prob) {
            return Err(Error::InvalidConfig(format!(
                "deviation probability {} outside [0, 1]",
                self.deviation_prob
            )));
        }
        if !(self.max_deviation > 0.0) || !(self.residual_jitter >= 0.0) {
            return Err(Error::InvalidConfig(
                "max deviation must be positive and residual jitter non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Activation offset produced by a calibration with the given deviation.
    pub fn offset_for(&self, deviation: f64) -> f64 {
        self.nominal_offset + deviation
    }

    pub fn is_maximal(&self, deviation: f64) -> bool {
        deviation.abs() == self.max_deviation
    }
}

/// Draws the deviation of one calibration run from the nominal offset.
///
/// With probability `deviation_prob` the result is `±max_deviation` (sign
/// equiprobable); otherwise it is a zero-mean normal draw with standard
/// deviation `residual_jitter`, rejected until strictly inside the maximal
/// band.
pub fn sample_calibration<R: Rng + ?Sized>(model: &CalibrationModel, rng: &mut R) -> f64 {
    if rng.random_bool(model.deviation_prob.clamp(0.0, 1.0)) {
        return if rng.random_bool(0.5) {
            model.max_deviation
        } else {
            -model.max_deviation
        };
    }
    if model.residual_jitter <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, model.residual_jitter).expect("positive jitter");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() < model.max_deviation {
            return x;
        }
    }
}

/// Detection-rate targets at one shift: per-pulse click probability of each
/// detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickTarget {
    pub shift_ps: f64,
    pub rates: [f64; 2],
}

/// Fixed geometry used when fitting a [`DetectorPair`] to measured rates.
///
/// Only peak efficiencies and edge widths are fitted; centres and gate width
/// are taken as given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub centers: [f64; 2],
    pub gate_width: f64,
    pub pulse_fwhm: f64,
    pub dark_count_prob: f64,
    /// Mean photon number reaching the detectors, `mu * transmittance`.
    pub photons_at_receiver: f64,
}

impl PairFit {
    /// Per-photon efficiency that produces per-pulse click probability `rate`
    /// on one detector, given that half of the pulses are routed to it.
    pub fn efficiency_for_rate(&self, rate: f64) -> Result<f64> {
        let signal = 2.0 * (1.0 - (1.0 - rate) / (1.0 - self.dark_count_prob));
        if !(signal > 0.0 && signal < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "click rate {rate} not reachable above dark count {}",
                self.dark_count_prob
            )));
        }
        Ok(-(1.0 - signal).ln() / self.photons_at_receiver)
    }

    /// Fits the raw (unblurred) detector pair whose blurred profiles
    /// reproduce both targets.
    pub fn fit(&self, targets: &[ClickTarget; 2]) -> Result<DetectorPair> {
        if !(self.photons_at_receiver > 0.0) {
            return Err(Error::InvalidConfig("photons at receiver must be positive".into()));
        }
        let mut profiles = [None, None];
        for det in 0..2 {
            let eff = [
                self.efficiency_for_rate(targets[0].rates[det])?,
                self.efficiency_for_rate(targets[1].rates[det])?,
            ];
            let times = [targets[0].shift_ps, targets[1].shift_ps];
            profiles[det] = Some(self.fit_one(self.centers[det], times, eff)?);
        }
        DetectorPair::new(profiles[0].unwrap(), profiles[1].unwrap(), self.dark_count_prob)
    }

    fn fit_one(&self, center: f64, times: [f64; 2], eff: [f64; 2]) -> Result<GateProfile> {
        let pulse_sigma = self.pulse_fwhm / FWHM_PER_SIGMA;
        let d = [(times[0] - center).abs(), (times[1] - center).abs()];
        if d[0] == d[1] {
            return Err(Error::InvalidConfig(
                "fit shifts are equidistant from the gate centre".into(),
            ));
        }
        let target = (eff[0] / eff[1]).ln();
        let w = self.gate_width;
        let residual = |sigma: f64| (box_gauss(d[0], w, sigma) / box_gauss(d[1], w, sigma)).ln() - target;

        // The ratio tends to 1 as the edges widen; bracket below by the pulse width.
        let mut lo = pulse_sigma.max(1e-3) * (1.0 + 1e-9);
        let mut hi = 20.0 * w;
        let (rlo, rhi) = (residual(lo), residual(hi));
        if rlo.is_nan() || rhi.is_nan() || rlo.signum() == rhi.signum() {
            return Err(Error::InvalidConfig(format!(
                "cannot fit edge width around centre {center} to efficiency ratio {:.4}",
                eff[0] / eff[1]
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid).signum() == rlo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let sigma_eff = 0.5 * (lo + hi);
        let amplitude = eff[0] / box_gauss(d[0], w, sigma_eff);
        let raw_edge = (sigma_eff * sigma_eff - pulse_sigma * pulse_sigma).sqrt();
        // Peak of the raw profile, whose blur gives `amplitude` on the effective one.
        let raw_peak = amplitude * box_gauss(0.0, w, raw_edge);
        GateProfile::new(raw_peak, center, w, raw_edge)
    }
}
