//! Key-length bounds.
//!
//! `K_L` is what Alice and Bob would compute while ignoring the attack:
//! infinite-decoy estimates of the single-photon gain and error rate, minus
//! the error-correction cost. `K_U` bounds what is actually extractable once
//! Eve knows the per-shift bias of Bob's results. `K_L > K_U` means key that
//! Alice and Bob believe secret has leaked.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attack::count_scale;
use crate::error::{Error, Result};
use crate::protocol::{expect_header, split_metadata, ShiftLabel, SiftedTable};
use crate::scalar::Real;

/// Probabilities of the two shifts in Eve's mixture.
///
/// Both weights are stored so that swapping A and B is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftWeights<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> ShiftWeights<T> {
    pub fn from_pa(p_a: T) -> Self {
        ShiftWeights { a: p_a, b: T::one() - p_a }
    }

    pub fn swapped(self) -> Self {
        ShiftWeights { a: self.b, b: self.a }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyRateInputs<T> {
    /// Basis-matched pulses, `Ñ`.
    pub n_sifted: u64,
    /// Detections per sifted pulse, `Q`.
    pub gain: T,
    /// Overall QBER, `E`.
    pub qber: T,
    /// Mean photon number of the signal states.
    pub mu: T,
    /// Vacuum yield (dark counts), `Y₀`.
    pub y0: T,
    /// Error-correction inefficiency `f(E)`.
    pub ec_inefficiency: T,
}

impl<T: Real> KeyRateInputs<T> {
    pub const DEFAULT_EC_INEFFICIENCY: f64 = 1.22;

    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        let one = T::one();
        if !(self.gain > zero && self.gain <= one) {
            return Err(Error::Domain(format!("gain {} outside (0, 1]", self.gain)));
        }
        if !(self.qber >= zero && self.qber <= T::half()) {
            return Err(Error::Domain(format!("QBER {} outside [0, 0.5]", self.qber)));
        }
        if !(self.ec_inefficiency >= one) {
            return Err(Error::Domain(format!("EC inefficiency {} below 1", self.ec_inefficiency)));
        }
        if !(self.mu > zero) || !(self.y0 >= zero && self.y0 < one) {
            return Err(Error::Domain(format!("mu {} or Y0 {} invalid", self.mu, self.y0)));
        }
        if T::from_count(self.n_sifted) * self.gain < one {
            return Err(Error::Domain("fewer than one sifted detection".into()));
        }
        Ok(())
    }

    /// Sifted detections `Ñ·Q`.
    pub fn detections(&self) -> T {
        T::from_count(self.n_sifted) * self.gain
    }
}

/// Binary Shannon entropy in bits, with `0·log 0 = 0`.
pub fn h2<T: Real>(x: T) -> Result<T> {
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::Domain(format!("binary entropy argument {x} outside [0, 1]")));
    }
    let term = |p: T| if p > T::zero() { -p * p.log2() } else { T::zero() };
    Ok(term(x) + term(T::one() - x))
}

/// Bits consumed by error correction, `Ñ·Q·f(E)·H₂(E)`.
pub fn ec_cost<T: Real>(inputs: &KeyRateInputs<T>) -> Result<T> {
    Ok(inputs.detections() * inputs.ec_inefficiency * h2(inputs.qber)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoyEstimates<T> {
    /// Vacuum gain `Q₀`.
    pub q0: T,
    /// Single-photon gain `Q₁`.
    pub q1: T,
    /// Single-photon error rate `e₁`.
    pub e1: T,
    /// Set when `e₁` had to be clamped into `[0, 0.5]`.
    pub e1_clamped: bool,
}

/// Infinite-decoy estimates from the standard channel model.
///
/// The overall transmittance `η` is recovered from
/// `Q = 1 - (1 - Y₀)e^{-ημ}`; then `Y₁ = Y₀ + η - Y₀η`,
/// `Q₁ = Y₁ μ e^{-μ}`, `Q₀ = Y₀ e^{-μ}` and `e₁ = (EQ - Q₀/2)/Q₁`.
pub fn decoy_estimate<T: Real>(inputs: &KeyRateInputs<T>) -> Result<DecoyEstimates<T>> {
    let KeyRateInputs { gain, qber, mu, y0, .. } = *inputs;
    let one = T::one();
    if !(gain > y0) || !(gain < one) {
        return Err(Error::DecoyInversion {
            gain: gain.to_f64().unwrap_or(f64::NAN),
            y0: y0.to_f64().unwrap_or(f64::NAN),
        });
    }
    let attenuation = (-mu).exp();
    let eta = -((one - gain) / (one - y0)).ln() / mu;
    let y1 = y0 + eta - y0 * eta;
    let q0 = y0 * attenuation;
    let q1 = y1 * mu * attenuation;
    let raw = (qber * gain - T::half() * q0) / q1;
    let e1 = raw.max(T::zero()).min(T::half());
    Ok(DecoyEstimates {
        q0,
        q1,
        e1,
        e1_clamped: e1 != raw,
    })
}

/// Attack-blind key length `-r_EC + Ñ{Q₁[1 - H₂(e₁)] + Q₀}`. Not clamped.
pub fn lower_bound<T: Real>(inputs: &KeyRateInputs<T>, decoy: &DecoyEstimates<T>) -> Result<T> {
    let n = T::from_count(inputs.n_sifted);
    Ok(-ec_cost(inputs)? + n * (decoy.q1 * (T::one() - h2(decoy.e1)?) + decoy.q0))
}

/// Mismatch-aware key length
/// `-r_EC + Ñ·Q·Σ_{i,j} Pr{Z₂=j|Z₁=i} Pr{Z₁=i} H₂(Pr{X=0|Z₁=i,Z₂=j})`.
///
/// Probabilities are maximum-likelihood frequencies of the weighted,
/// detection-conditioned sifted counts. A shift with zero weight is left
/// out; an empty basis cell at a weighted shift is an error.
pub fn upper_bound<T: Real>(table: &SiftedTable, weights: ShiftWeights<T>, inputs: &KeyRateInputs<T>) -> Result<T> {
    let n = T::from_count;
    let mut totals = [T::zero(); 2];
    let mut entropy = [T::zero(); 2];
    for (k, (label, p)) in [(ShiftLabel::A, weights.a), (ShiftLabel::B, weights.b)].into_iter().enumerate() {
        let cells = table.shift(label);
        let w = count_scale(p, table.n_sent, cells.n_sent, label.as_str())?;
        if w == T::zero() {
            continue;
        }
        let mut basis_terms = [T::zero(); 2];
        for (z2, term) in basis_terms.iter_mut().enumerate() {
            let tot = cells.basis_total(z2);
            if tot == 0 {
                return Err(Error::EmptyCell {
                    shift: label.to_string(),
                    basis: z2 as u8,
                });
            }
            *term = n(tot) * h2(n(cells.bit_total(z2, 0)) / n(tot))?;
        }
        totals[k] = w * n(cells.total());
        entropy[k] = w * (basis_terms[0] + basis_terms[1]);
    }
    let weight = totals[0] + totals[1];
    if weight <= T::zero() {
        return Err(Error::EmptyTable("no weighted detections".into()));
    }
    // Two-term sums only, so relabelling A and B is bit-exact.
    let leak_free = (entropy[0] + entropy[1]) / weight;
    Ok(-ec_cost(inputs)? + inputs.detections() * leak_free)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport<T> {
    pub r_ec: T,
    pub k_lower: T,
    pub k_upper: T,
    pub breach: bool,
}

/// Packages the bounds; a breach is `K_L > K_U`.
pub fn assess<T: Real>(r_ec: T, k_lower: T, k_upper: T) -> BoundsReport<T> {
    BoundsReport {
        r_ec,
        k_lower,
        k_upper,
        breach: k_lower > k_upper,
    }
}

impl<T: Real> BoundsReport<T> {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r_ec", "k_lower", "k_upper", "breach"])?;
        out.write_record([
            self.r_ec.to_string(),
            self.k_lower.to_string(),
            self.k_upper.to_string(),
            self.breach.to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

impl BoundsReport<f64> {
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (_, body) = split_metadata(r)?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        expect_header(&mut rdr, &["r_ec", "k_lower", "k_upper", "breach"])?;
        let row = rdr
            .deserialize()
            .next()
            .ok_or_else(|| Error::Parse("bounds CSV has no data row".into()))??;
        Ok(row)
    }
}

impl<T: Real> fmt::Display for BoundsReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>12} {:>12} {:>12} {:>7}", "r_EC", "K_L", "K_U", "breach")?;
        write!(
            f,
            "{:>12.1} {:>12.1} {:>12.1} {:>7}",
            self.r_ec.to_f64().unwrap_or(f64::NAN),
            self.k_lower.to_f64().unwrap_or(f64::NAN),
            self.k_upper.to_f64().unwrap_or(f64::NAN),
            self.breach
        )
    }
}
