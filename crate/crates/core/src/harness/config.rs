//! Scenario files: sectioned TOML, one section per component.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::ShiftStrategy;
use crate::bounds::KeyRateInputs;
use crate::detector::{
    ClickTarget, CalibrationModel, CurvePair, DetectorPair, EfficiencyCurve, GateProfile, PairFit, Receiver,
};
use crate::error::{Error, Result};
use crate::harness::fixtures::ReferenceData;
use crate::protocol::SessionConfig;

/// Pulse FWHM of the attack laser, picoseconds.
pub const DEFAULT_PULSE_FWHM_PS: f64 = 100.0;
/// Nominal gate width, picoseconds.
pub const DEFAULT_GATE_WIDTH_PS: f64 = 500.0;
/// Vacuum yield of the receiver.
pub const DEFAULT_Y0: f64 = 2.26e-5;
/// Gate centres of the fitted reference receiver. Detector 1 trails by the
/// maximal calibration deviation.
pub const DEFAULT_CENTERS_PS: [f64; 2] = [50.0, 150.0];

/// Receiver description: explicit profiles, a fit to the reference counts,
/// or measured curve files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    Profiles {
        d0: GateProfile,
        d1: GateProfile,
        dark_count_prob: f64,
        #[serde(default = "default_fwhm")]
        pulse_fwhm_ps: f64,
    },
    Fit {
        #[serde(default = "default_centers")]
        centers_ps: [f64; 2],
        #[serde(default = "default_gate")]
        gate_width_ps: f64,
        #[serde(default = "default_fwhm")]
        pulse_fwhm_ps: f64,
        #[serde(default = "default_dark")]
        dark_count_prob: f64,
    },
    Curves {
        d0: PathBuf,
        d1: PathBuf,
        dark_count_prob: f64,
    },
}

fn default_fwhm() -> f64 {
    DEFAULT_PULSE_FWHM_PS
}
fn default_gate() -> f64 {
    DEFAULT_GATE_WIDTH_PS
}
fn default_centers() -> [f64; 2] {
    DEFAULT_CENTERS_PS
}
fn default_dark() -> f64 {
    dark_count_for_y0(DEFAULT_Y0)
}

/// Per-detector dark-count probability giving vacuum yield `y0` on two
/// independent detectors.
pub fn dark_count_for_y0(y0: f64) -> f64 {
    1.0 - (1.0 - y0).sqrt()
}

/// Vacuum yield of two detectors with per-detector dark probability `pd`.
pub fn y0_for_dark_count(pd: f64) -> f64 {
    1.0 - (1.0 - pd) * (1.0 - pd)
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Fit {
            centers_ps: DEFAULT_CENTERS_PS,
            gate_width_ps: DEFAULT_GATE_WIDTH_PS,
            pulse_fwhm_ps: DEFAULT_PULSE_FWHM_PS,
            dark_count_prob: default_dark(),
        }
    }
}

/// Effective receiver seen by the pulses.
#[derive(Debug, Clone, PartialEq)]
pub enum ReceiverModel {
    Profiles(DetectorPair),
    Curves(CurvePair),
}

impl Receiver for ReceiverModel {
    fn efficiencies(&self, t: f64) -> [f64; 2] {
        match self {
            ReceiverModel::Profiles(p) => p.efficiencies(t),
            ReceiverModel::Curves(c) => c.efficiencies(t),
        }
    }

    fn dark_count_prob(&self) -> f64 {
        match self {
            ReceiverModel::Profiles(p) => p.dark_count_prob,
            ReceiverModel::Curves(c) => c.dark_count_prob,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ReceiverModel::Profiles(p) => p.validate(),
            ReceiverModel::Curves(c) => Receiver::validate(c),
        }
    }
}

impl ReceiverModel {
    /// Sampling step of curve-based receivers.
    pub fn curve_step(&self) -> Option<f64> {
        match self {
            ReceiverModel::Profiles(_) => None,
            ReceiverModel::Curves(c) => c.d0.step(),
        }
    }

    pub fn profiles(&self) -> Option<&DetectorPair> {
        match self {
            ReceiverModel::Profiles(p) => Some(p),
            ReceiverModel::Curves(_) => None,
        }
    }
}

impl DetectorSpec {
    /// Builds the effective (pulse-blurred) receiver. Relative curve paths
    /// resolve against `base`.
    pub fn build(&self, session: &SessionConfig, base: &Path) -> Result<ReceiverModel> {
        match self {
            DetectorSpec::Profiles {
                d0,
                d1,
                dark_count_prob,
                pulse_fwhm_ps,
            } => Ok(ReceiverModel::Profiles(
                DetectorPair::new(*d0, *d1, *dark_count_prob)?.blurred(*pulse_fwhm_ps)?,
            )),
            DetectorSpec::Fit {
                centers_ps,
                gate_width_ps,
                pulse_fwhm_ps,
                dark_count_prob,
            } => {
                let fit = PairFit {
                    centers: *centers_ps,
                    gate_width: *gate_width_ps,
                    pulse_fwhm: *pulse_fwhm_ps,
                    dark_count_prob: *dark_count_prob,
                    photons_at_receiver: session.photons_at_receiver(),
                };
                let raw = fit.fit(&ReferenceData::embedded()?.click_targets())?;
                Ok(ReceiverModel::Profiles(raw.blurred(*pulse_fwhm_ps)?))
            }
            DetectorSpec::Curves { d0, d1, dark_count_prob } => {
                let load = |p: &Path| -> Result<EfficiencyCurve> {
                    let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                    let file = fs::File::open(&path).map_err(|_| Error::FixtureMissing(path.clone()))?;
                    EfficiencyCurve::read_csv(file)
                };
                let curves = CurvePair {
                    d0: load(d0)?,
                    d1: load(d1)?,
                    dark_count_prob: *dark_count_prob,
                };
                if curves.d0.step() != curves.d1.step() {
                    return Err(Error::InvalidConfig("the two curves use different sample spacing".into()));
                }
                Receiver::validate(&curves)?;
                Ok(ReceiverModel::Curves(curves))
            }
        }
    }
}

/// Strategy section: a fixed strategy or a search over candidate shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategySpec {
    Fixed(ShiftStrategy),
    Optimize { optimize: bool, candidates_ps: Vec<f64> },
}

impl Default for StrategySpec {
    fn default() -> Self {
        StrategySpec::Fixed(ShiftStrategy {
            shift_a_ps: -250.0,
            shift_b_ps: 500.0,
            p_a: 2828.0 / 12279.0,
            mode: crate::attack::ShiftMode::Mixture,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub shifts_ps: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            shifts_ps: vec![-250.0, 500.0],
        }
    }
}

/// Constants of the key-length computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    /// Vacuum yield; derived from the dark-count probability when absent.
    pub y0: Option<f64>,
    #[serde(default = "default_f")]
    pub ec_inefficiency: f64,
}

fn default_f() -> f64 {
    KeyRateInputs::<f64>::DEFAULT_EC_INEFFICIENCY
}

impl Default for BoundsSpec {
    fn default() -> Self {
        BoundsSpec {
            y0: None,
            ec_inefficiency: default_f(),
        }
    }
}

/// Parameters the analysis needs besides the tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    pub mu: f64,
    pub y0: f64,
    pub ec_inefficiency: f64,
}

impl AnalysisParams {
    pub fn reference() -> Self {
        AnalysisParams {
            mu: SessionConfig::REFERENCE_MU,
            y0: DEFAULT_Y0,
            ec_inefficiency: KeyRateInputs::<f64>::DEFAULT_EC_INEFFICIENCY,
        }
    }
}

/// Everything one run of the harness needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "SessionConfig::reference")]
    pub session: SessionConfig,
    #[serde(default)]
    pub detectors: DetectorSpec,
    #[serde(default = "CalibrationModel::observed")]
    pub calibration: CalibrationModel,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub bounds: BoundsSpec,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Directory relative paths resolve against; the config file's directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            session: SessionConfig::reference(),
            detectors: DetectorSpec::default(),
            calibration: CalibrationModel::observed(),
            strategy: StrategySpec::default(),
            sweep: SweepSpec::default(),
            bounds: BoundsSpec::default(),
            output_dir: default_out(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text)?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::FixtureMissing(path.to_path_buf()))?;
        let mut scenario = Self::from_toml(&text)?;
        scenario.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn receiver(&self) -> Result<ReceiverModel> {
        self.detectors.build(&self.session, &self.base_dir)
    }

    pub fn analysis_params(&self, receiver: &ReceiverModel) -> AnalysisParams {
        AnalysisParams {
            mu: self.session.mean_photon_number,
            y0: self.bounds.y0.unwrap_or_else(|| y0_for_dark_count(receiver.dark_count_prob())),
            ec_inefficiency: self.bounds.ec_inefficiency,
        }
    }

    /// Checks everything that does not require running anything.
    pub fn validate(&self, receiver: &ReceiverModel) -> Result<()> {
        self.session.validate()?;
        self.calibration.validate()?;
        receiver.validate()?;
        if let StrategySpec::Fixed(s) = &self.strategy {
            s.validate()?;
        }
        let step = receiver.curve_step().unwrap_or(EfficiencyCurve::DEFAULT_STEP_PS);
        for &s in &self.sweep.shifts_ps {
            let k = s / step;
            if !s.is_finite() || (k - k.round()).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "sweep shift {s} ps is not a multiple of the {step} ps sample spacing"
                )));
            }
        }
        Ok(())
    }

    /// Creates the output directory and checks it is writable.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            self.base_dir.join(&self.output_dir)
        };
        fs::create_dir_all(&dir)?;
        let probe = dir.join(".write-check");
        fs::write(&probe, b"")?;
        fs::remove_file(&probe)?;
        Ok(dir)
    }
}

/// Strategy as a standalone TOML document.
pub fn strategy_to_toml(strategy: &ShiftStrategy) -> String {
    toml::to_string(strategy).expect("strategy serialises")
}

pub fn strategy_from_toml(text: &str) -> Result<ShiftStrategy> {
    let s: ShiftStrategy = toml::from_str(text)?;
    s.validate()?;
    Ok(s)
}

/// Reference click targets for the fit, from the bundled counts.
impl ReferenceData {
    pub fn click_targets(&self) -> [ClickTarget; 2] {
        [self.shift_a, self.shift_b].map(|(shift_ps, c)| ClickTarget {
            shift_ps,
            rates: [c.d0 as f64 / c.n_sent as f64, c.d1 as f64 / c.n_sent as f64],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_round_trips_through_toml() {
        let s = Scenario::default();
        let mut back = Scenario::from_toml(&s.to_toml()).unwrap();
        back.base_dir = s.base_dir.clone();
        assert_eq!(back, s);
    }

    #[test]
    fn strategy_file_round_trips() {
        let s = ShiftStrategy::mixture(-250.0, 500.0, 2828.0 / 12279.0).unwrap();
        assert_eq!(strategy_from_toml(&strategy_to_toml(&s)).unwrap(), s);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let s = Scenario::from_toml("").unwrap();
        assert_eq!(s.session, SessionConfig::reference());
        assert_eq!(s.detectors, DetectorSpec::default());
    }

    #[test]
    fn sectioned_file_parses() {
        let text = r#"
output_dir = "results"

[session]
n_pulses = 1000
mean_photon_number = 0.1
intrinsic_flip_prob = 0.01
channel_transmittance = 0.5
seed = 7

[detectors]
source = "profiles"
dark_count_prob = 1e-5
pulse_fwhm_ps = 0.0
d0 = { peak_efficiency = 0.2, center_time = 0.0, gate_width = 500.0, edge_width = 80.0 }
d1 = { peak_efficiency = 0.2, center_time = 100.0, gate_width = 500.0, edge_width = 80.0 }

[strategy]
optimize = true
candidates_ps = [-300.0, -250.0, 500.0]

[sweep]
shifts_ps = [-100.0, 0.0, 100.0]

[bounds]
ec_inefficiency = 1.1
"#;
        let s = Scenario::from_toml(text).unwrap();
        assert_eq!(s.session.seed, 7);
        assert!(matches!(s.strategy, StrategySpec::Optimize { .. }));
        let r = s.receiver().unwrap();
        s.validate(&r).unwrap();
        assert_eq!(r.profiles().unwrap().activation_offset(), 100.0);
        let p = s.analysis_params(&r);
        assert!((p.y0 - y0_for_dark_count(1e-5)).abs() < 1e-18);
        assert_eq!(p.ec_inefficiency, 1.1);
    }

    #[test]
    fn sweep_off_grid_rejected() {
        let mut s = Scenario::default();
        s.sweep.shifts_ps = vec![-250.0, 510.0];
        let r = s.receiver().unwrap();
        assert!(matches!(s.validate(&r), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Scenario::from_toml("[session]\nbogus = 1\n").is_err());
    }

    #[test]
    fn dark_count_conversion_inverts() {
        let pd = dark_count_for_y0(DEFAULT_Y0);
        assert!((y0_for_dark_count(pd) / DEFAULT_Y0 - 1.0).abs() < 1e-9);
    }
}
