//! Independent high-precision re-evaluation of the key-length formulas and
//! generators of random valid inputs.

#![allow(dead_code)]

use dashu_float::round::mode::HalfEven;
use dashu_float::FBig;
use rand::Rng;
use timeshift::protocol::{ShiftLabel, SiftedTable};
use timeshift::{KeyRateInputs, ShiftWeights};

type Big = FBig<HalfEven>;

const PRECISION: usize = 256;

fn big(x: f64) -> Big {
    Big::try_from(x).expect("finite").with_precision(PRECISION).value()
}

fn count(n: u64) -> Big {
    Big::from(n).with_precision(PRECISION).value()
}

fn f(x: &Big) -> f64 {
    x.to_f64().value()
}

fn one() -> Big {
    big(1.0)
}

fn entropy(p: &Big) -> Big {
    let zero = big(0.0);
    let q = one() - p;
    let mut s = big(0.0);
    if *p > zero {
        s = s - p * p.ln();
    }
    if q > zero {
        s = s - &q * q.ln();
    }
    s / big(2.0).ln()
}

pub fn h2(x: f64) -> f64 {
    f(&entropy(&big(x)))
}

fn ec(inputs: &KeyRateInputs) -> Big {
    count(inputs.n_sifted) * big(inputs.gain) * big(inputs.ec_inefficiency) * entropy(&big(inputs.qber))
}

pub fn ec_cost(inputs: &KeyRateInputs) -> f64 {
    f(&ec(inputs))
}

/// Lower bound with the decoy quantities rebuilt from the transmittance.
pub fn lower_bound(inputs: &KeyRateInputs) -> f64 {
    let mu = big(inputs.mu);
    let y0 = big(inputs.y0);
    let q = big(inputs.gain);
    let e = big(inputs.qber);
    let loss = (-mu.clone()).exp();
    // Channel transmittance η from the signal gain.
    let eta = ((one() - &y0) / (one() - &q)).ln() / &mu;
    let q1 = (y0.clone() + &eta * (one() - &y0)) * &mu * &loss;
    let q0 = y0 * &loss;
    let mut e1 = (e * &q - &q0 / big(2.0)) / &q1;
    if e1 < big(0.0) {
        e1 = big(0.0);
    }
    if e1 > big(0.5) {
        e1 = big(0.5);
    }
    let secret = count(inputs.n_sifted) * (q1 * (one() - entropy(&e1)) + q0);
    f(&(secret - ec(inputs)))
}

/// Upper bound written as a sum over (shift, basis) of the joint
/// probability times the conditional bit entropy.
pub fn upper_bound(table: &SiftedTable, weights: ShiftWeights, inputs: &KeyRateInputs) -> f64 {
    let labels = [(ShiftLabel::A, weights.a), (ShiftLabel::B, weights.b)];
    let mut mass = Vec::new();
    for (label, p) in labels {
        let cells = table.shift(label);
        if p == 0.0 {
            continue;
        }
        let w = big(p) * count(table.n_sent) / count(cells.n_sent);
        for z2 in 0..2 {
            let zeros = cells.counts[z2][0][0] + cells.counts[z2][0][1];
            let all = cells.basis_total(z2);
            mass.push((w.clone() * count(all), count(zeros) / count(all)));
        }
    }
    let total = mass.iter().fold(big(0.0), |acc, (m, _)| acc + m);
    let mut leak_free = big(0.0);
    for (m, p0) in &mass {
        leak_free = leak_free + m / &total * entropy(p0);
    }
    let detections = count(inputs.n_sifted) * big(inputs.gain);
    f(&(detections * leak_free - ec(inputs)))
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs()
    }
}

/// Random key-rate inputs with the gain comfortably above the dark yield.
pub fn random_inputs<R: Rng>(rng: &mut R) -> KeyRateInputs {
    let y0 = 10f64.powf(rng.random_range(-6.5..-4.0));
    KeyRateInputs {
        n_sifted: rng.random_range(1_000_000..100_000_000),
        gain: y0 * rng.random_range(5.0..1e3),
        qber: rng.random_range(0.001..0.12),
        mu: rng.random_range(0.05..0.8),
        y0,
        ec_inefficiency: rng.random_range(1.0..1.5),
    }
}

/// Random table of two separate full-length runs with all cells non-empty.
pub fn random_table<R: Rng>(rng: &mut R) -> SiftedTable {
    let n = 20_000_000;
    let mut t = SiftedTable::new(n, n / 2);
    for label in [ShiftLabel::A, ShiftLabel::B] {
        let cells = t.shift_mut(label);
        cells.n_sent = n;
        for z2 in 0..2 {
            for x in 0..2 {
                for y in 0..2 {
                    cells.counts[z2][x][y] = rng.random_range(1..20_000);
                }
            }
        }
    }
    t
}
