//! Monte Carlo of a phase-encoded BB84 session with weak coherent pulses,
//! gated detection and sifting.
//!
//! The interferometer is abstracted away: on a basis match the pulse goes to
//! the detector matching Alice's bit (up to an intrinsic flip), on a mismatch
//! it goes to either detector with equal probability. All photons of a pulse
//! share one route.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{choose_shift, ShiftStrategy};
use crate::detector::Receiver;
use crate::error::{Error, Result};

/// Pulses simulated per RNG substream.
pub const BLOCK_PULSES: u64 = 1 << 18;

/// Where Eve put a pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShiftLabel {
    A,
    B,
    /// No attack: the pulse arrives at the calibrated time.
    Unshifted,
}

impl ShiftLabel {
    pub const ALL: [ShiftLabel; 3] = [ShiftLabel::A, ShiftLabel::B, ShiftLabel::Unshifted];

    fn index(self) -> usize {
        match self {
            ShiftLabel::A => 0,
            ShiftLabel::B => 1,
            ShiftLabel::Unshifted => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftLabel::A => "A",
            ShiftLabel::B => "B",
            ShiftLabel::Unshifted => "none",
        }
    }

    /// A and B exchanged; `Unshifted` is fixed.
    pub fn swapped(self) -> Self {
        match self {
            ShiftLabel::A => ShiftLabel::B,
            ShiftLabel::B => ShiftLabel::A,
            ShiftLabel::Unshifted => ShiftLabel::Unshifted,
        }
    }
}

impl fmt::Display for ShiftLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShiftLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(ShiftLabel::A),
            "B" => Ok(ShiftLabel::B),
            "none" => Ok(ShiftLabel::Unshifted),
            other => Err(Error::Parse(format!("unknown shift label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Pulses sent by Alice.
    pub n_pulses: u64,
    /// Poisson mean photon number per pulse at Alice's output.
    pub mean_photon_number: f64,
    /// Bit-flip probability of the optics on a basis match.
    pub intrinsic_flip_prob: f64,
    /// Per-photon transmittance from Alice to Bob's detectors.
    pub channel_transmittance: f64,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig::reference()
    }
}

impl SessionConfig {
    pub const REFERENCE_PULSES: u64 = 20_966_400;
    pub const REFERENCE_MU: f64 = 0.1;
    pub const DEFAULT_FLIP_PROB: f64 = 0.02;
    pub const DEFAULT_TRANSMITTANCE: f64 = 0.1;
    pub const DEFAULT_SEED: u64 = 0x7153_4b44_2008_0001;

    pub fn reference() -> Self {
        SessionConfig {
            n_pulses: Self::REFERENCE_PULSES,
            mean_photon_number: Self::REFERENCE_MU,
            intrinsic_flip_prob: Self::DEFAULT_FLIP_PROB,
            channel_transmittance: Self::DEFAULT_TRANSMITTANCE,
            seed: Self::DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pulses == 0 {
            return Err(Error::InvalidConfig("n_pulses must be positive".into()));
        }
        if !(self.mean_photon_number > 0.0 && self.mean_photon_number.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "mean photon number {} must be positive",
                self.mean_photon_number
            )));
        }
        for (name, p) in [
            ("intrinsic_flip_prob", self.intrinsic_flip_prob),
            ("channel_transmittance", self.channel_transmittance),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Mean photon number reaching Bob's detectors.
    pub fn photons_at_receiver(&self) -> f64 {
        self.mean_photon_number * self.channel_transmittance
    }
}

/// One transmitted pulse and what Bob made of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseRecord {
    pub alice_bit: u8,
    pub alice_basis: u8,
    pub eve_shift: ShiftLabel,
    pub bob_basis: u8,
    pub photons: u32,
    pub click0: bool,
    pub click1: bool,
    pub bob_bit: Option<u8>,
}

impl PulseRecord {
    pub fn basis_match(&self) -> bool {
        self.alice_basis == self.bob_basis
    }
}

/// Maps a raw click pattern to a bit; double clicks become a fair coin.
pub fn squash<R: Rng + ?Sized>(click0: bool, click1: bool, rng: &mut R) -> Option<u8> {
    match (click0, click1) {
        (false, false) => None,
        (true, false) => Some(0),
        (false, true) => Some(1),
        (true, true) => Some(rng.random::<bool>() as u8),
    }
}

/// Sifted counts at one shift label, indexed `[z2][x][y]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShiftCells {
    /// Pulses Eve sent at this shift (any basis).
    pub n_sent: u64,
    pub counts: [[[u64; 2]; 2]; 2],
}

impl ShiftCells {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().flatten().sum()
    }

    pub fn basis_total(&self, z2: usize) -> u64 {
        self.counts[z2].iter().flatten().sum()
    }

    /// Events in basis `z2` with Alice's bit `x`.
    pub fn bit_total(&self, z2: usize, x: usize) -> u64 {
        self.counts[z2][x].iter().sum()
    }

    pub fn errors(&self) -> u64 {
        self.counts.iter().map(|c| c[0][1] + c[1][0]).sum()
    }

    fn add(&mut self, other: &ShiftCells) {
        self.n_sent += other.n_sent;
        for z2 in 0..2 {
            for x in 0..2 {
                for y in 0..2 {
                    self.counts[z2][x][y] += other.counts[z2][x][y];
                }
            }
        }
    }
}

/// Per-shift contingency counts over (basis, Alice's bit, Bob's bit) for
/// basis-matched detected pulses.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedTable {
    shifts: [ShiftCells; 3],
    /// Pulses sent in the session.
    pub n_sent: u64,
    /// Basis-matched pulses, detected or not.
    pub n_sifted_basis: u64,
}

impl SiftedTable {
    pub fn new(n_sent: u64, n_sifted_basis: u64) -> Self {
        SiftedTable {
            n_sent,
            n_sifted_basis,
            ..Default::default()
        }
    }

    pub fn shift(&self, label: ShiftLabel) -> &ShiftCells {
        &self.shifts[label.index()]
    }

    pub fn shift_mut(&mut self, label: ShiftLabel) -> &mut ShiftCells {
        &mut self.shifts[label.index()]
    }

    /// Sets the counts of one shift from rows `(z2, x, count of y=1, count of y=0)`.
    pub fn set_rows(&mut self, label: ShiftLabel, n_sent: u64, rows: &[(usize, usize, u64, u64)]) {
        let cells = self.shift_mut(label);
        cells.n_sent = n_sent;
        for &(z2, x, y1, y0) in rows {
            cells.counts[z2][x][1] = y1;
            cells.counts[z2][x][0] = y0;
        }
    }

    pub fn count(&self, label: ShiftLabel, z2: usize, x: usize, y: usize) -> u64 {
        self.shift(label).counts[z2][x][y]
    }

    pub fn total_detected(&self) -> u64 {
        self.shifts.iter().map(ShiftCells::total).sum()
    }

    /// A and B exchanged.
    pub fn relabeled(&self) -> Self {
        let mut out = self.clone();
        out.shifts.swap(0, 1);
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.total_detected() > self.n_sifted_basis || self.n_sifted_basis > self.n_sent {
            return Err(Error::Parse(format!(
                "inconsistent table: {} detected, {} sifted, {} sent",
                self.total_detected(),
                self.n_sifted_basis,
                self.n_sent
            )));
        }
        Ok(())
    }

    fn merge(&mut self, other: &SiftedTable) {
        self.n_sent += other.n_sent;
        self.n_sifted_basis += other.n_sifted_basis;
        for (a, b) in self.shifts.iter_mut().zip(&other.shifts) {
            a.add(b);
        }
    }

    /// CSV with columns `shift,z2,x,y,count`, preceded by `#`-comment
    /// metadata lines for the pulse totals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# n_sent={}", self.n_sent)?;
        writeln!(w, "# n_sifted_basis={}", self.n_sifted_basis)?;
        for label in ShiftLabel::ALL {
            let sent = self.shift(label).n_sent;
            if sent > 0 || self.shift(label).total() > 0 {
                writeln!(w, "# sent_{label}={sent}")?;
            }
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["shift", "z2", "x", "y", "count"])?;
        for label in ShiftLabel::ALL {
            let cells = self.shift(label);
            if cells.n_sent == 0 && cells.total() == 0 {
                continue;
            }
            for z2 in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        out.write_record([
                            label.as_str().to_string(),
                            z2.to_string(),
                            x.to_string(),
                            y.to_string(),
                            cells.counts[z2][x][y].to_string(),
                        ])?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (meta, body) = split_metadata(r)?;
        let get = |k: &str| -> Result<u64> {
            meta.get(k)
                .ok_or_else(|| Error::Parse(format!("missing metadata {k}")))?
                .parse()
                .map_err(|_| Error::Parse(format!("bad metadata {k}")))
        };
        let mut table = SiftedTable::new(get("n_sent")?, get("n_sifted_basis")?);
        for label in ShiftLabel::ALL {
            if let Some(v) = meta.get(&format!("sent_{label}")) {
                table.shift_mut(label).n_sent = v.parse().map_err(|_| Error::Parse(format!("bad sent_{label}")))?;
            }
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        expect_header(&mut rdr, &["shift", "z2", "x", "y", "count"])?;
        for rec in rdr.records() {
            let rec = rec?;
            let label: ShiftLabel = rec[0].parse()?;
            let bit = |i: usize| -> Result<usize> {
                match &rec[i] {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Parse(format!("expected 0 or 1, got {other:?}"))),
                }
            };
            let count: u64 = rec[4].parse().map_err(|_| Error::Parse(format!("bad count {:?}", &rec[4])))?;
            let (z2, x, y) = (bit(1)?, bit(2)?, bit(3)?);
            table.shift_mut(label).counts[z2][x][y] = count;
        }
        table.check_invariants()?;
        Ok(table)
    }
}

/// Detections of each detector at one shift, all bases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSummary {
    pub d0: u64,
    pub d1: u64,
    pub n_sent: u64,
}

impl CountSummary {
    pub fn new(d0: u64, d1: u64, n_sent: u64) -> Result<Self> {
        if d0 + d1 > n_sent {
            return Err(Error::InvalidConfig(format!("{d0} + {d1} detections exceed {n_sent} pulses")));
        }
        Ok(CountSummary { d0, d1, n_sent })
    }

    /// `max(d0/d1, d1/d0)`.
    pub fn mismatch(&self) -> Option<f64> {
        crate::detector::rate_ratio(self.d0 as f64, self.d1 as f64)
    }

    pub fn swapped_bits(&self) -> Self {
        CountSummary {
            d0: self.d1,
            d1: self.d0,
            n_sent: self.n_sent,
        }
    }

    fn add(&mut self, other: &CountSummary) {
        self.d0 += other.d0;
        self.d1 += other.d1;
        self.n_sent += other.n_sent;
    }
}

/// Writes `shift,d0,d1,n` rows.
pub fn write_counts_csv<W: Write>(w: W, rows: &[(ShiftLabel, CountSummary)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["shift", "d0", "d1", "n"])?;
    for (label, c) in rows {
        out.write_record([label.as_str().to_string(), c.d0.to_string(), c.d1.to_string(), c.n_sent.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_counts_csv<R: Read>(r: R) -> Result<Vec<(ShiftLabel, CountSummary)>> {
    let (_, body) = split_metadata(r)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    expect_header(&mut rdr, &["shift", "d0", "d1", "n"])?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| Error::Parse(format!("bad count {:?}", &rec[i]))) };
        rows.push((rec[0].parse()?, CountSummary::new(num(1)?, num(2)?, num(3)?)?));
    }
    Ok(rows)
}

/// Separates leading `# key=value` lines from the CSV body. Comment lines
/// without `=` are ignored.
pub(crate) fn split_metadata<R: Read>(mut r: R) -> Result<(BTreeMap<String, String>, String)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut meta = BTreeMap::new();
    let mut body = String::with_capacity(text.len());
    for line in text.lines() {
        if let Some(c) = line.trim_start().strip_prefix('#') {
            if let Some((k, v)) = c.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else if !line.trim().is_empty() {
            body.push_str(line);
            body.push('\n');
        }
    }
    Ok((meta, body))
}

pub(crate) fn expect_header<R: Read>(rdr: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(Error::Parse(format!("expected header {}, got {:?}", want.join(","), h)));
    }
    Ok(())
}

/// Streaming sifter: accumulates pulse records into tables.
#[derive(Debug, Clone, Default)]
pub struct SiftAccumulator {
    table: SiftedTable,
    summaries: [CountSummary; 3],
}

impl SiftAccumulator {
    pub fn push(&mut self, rec: &PulseRecord) {
        let idx = rec.eve_shift.index();
        self.table.n_sent += 1;
        self.summaries[idx].n_sent += 1;
        self.table.shifts[idx].n_sent += 1;
        match rec.bob_bit {
            Some(0) => self.summaries[idx].d0 += 1,
            Some(_) => self.summaries[idx].d1 += 1,
            None => {}
        }
        if rec.basis_match() {
            self.table.n_sifted_basis += 1;
            if let Some(y) = rec.bob_bit {
                self.table.shifts[idx].counts[rec.alice_basis as usize][rec.alice_bit as usize][y as usize] += 1;
            }
        }
    }

    fn merge(mut self, other: &SiftAccumulator) -> Self {
        self.table.merge(&other.table);
        for (a, b) in self.summaries.iter_mut().zip(&other.summaries) {
            a.add(b);
        }
        self
    }

    pub fn finish(self) -> SessionOutcome {
        SessionOutcome {
            table: self.table,
            summaries: self.summaries,
        }
    }
}

/// Keeps basis-matched detected pulses in the per-shift cells.
pub fn sift<'a, I: IntoIterator<Item = &'a PulseRecord>>(records: I) -> SessionOutcome {
    let mut acc = SiftAccumulator::default();
    for r in records {
        acc.push(r);
    }
    acc.finish()
}

/// Tables produced by one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOutcome {
    pub table: SiftedTable,
    summaries: [CountSummary; 3],
}

impl SessionOutcome {
    pub fn summary(&self, label: ShiftLabel) -> &CountSummary {
        &self.summaries[label.index()]
    }

    pub fn summaries(&self) -> Vec<(ShiftLabel, CountSummary)> {
        ShiftLabel::ALL
            .iter()
            .filter(|l| self.summaries[l.index()].n_sent > 0)
            .map(|&l| (l, self.summaries[l.index()]))
            .collect()
    }

    pub(crate) fn from_parts(table: SiftedTable, summaries: [CountSummary; 3]) -> Self {
        SessionOutcome { table, summaries }
    }
}

/// Per-pulse physics with everything that does not change between pulses
/// precomputed.
#[derive(Debug, Clone)]
pub struct PulseModel {
    /// Per-photon efficiency of each detector at each shift label's time.
    efficiencies: [[f64; 2]; 3],
    photons: Poisson<f64>,
    transmit: Bernoulli,
    flip: Bernoulli,
    dark: Bernoulli,
}

impl PulseModel {
    pub fn new<D: Receiver + ?Sized>(cfg: &SessionConfig, pair: &D, strategy: &ShiftStrategy) -> Result<Self> {
        cfg.validate()?;
        pair.validate()?;
        strategy.validate()?;
        let efficiencies = ShiftLabel::ALL.map(|l| pair.efficiencies(strategy.shift_time(l)));
        let bern = |p: f64| Bernoulli::new(p).map_err(|e| Error::InvalidConfig(e.to_string()));
        Ok(PulseModel {
            efficiencies,
            photons: Poisson::new(cfg.mean_photon_number).map_err(|e| Error::InvalidConfig(e.to_string()))?,
            transmit: bern(cfg.channel_transmittance)?,
            flip: bern(cfg.intrinsic_flip_prob)?,
            dark: bern(pair.dark_count_prob())?,
        })
    }

    /// Simulates one pulse with all of Alice's and Bob's choices drawn here.
    pub fn pulse<R: Rng + ?Sized>(&self, shift: ShiftLabel, rng: &mut R) -> PulseRecord {
        let bits: u32 = rng.random();
        self.pulse_with(shift, (bits & 1) as u8, ((bits >> 1) & 1) as u8, ((bits >> 2) & 1) as u8, rng)
    }

    /// Simulates one pulse with Alice's bit and both bases given.
    pub fn pulse_with<R: Rng + ?Sized>(
        &self,
        shift: ShiftLabel,
        alice_bit: u8,
        alice_basis: u8,
        bob_basis: u8,
        rng: &mut R,
    ) -> PulseRecord {
        let photons = self.photons.sample(rng) as u32;
        let route = if alice_basis == bob_basis {
            alice_bit ^ self.flip.sample(rng) as u8
        } else {
            rng.random::<bool>() as u8
        };
        let eff = self.efficiencies[shift.index()][route as usize];
        let mut signal = false;
        for _ in 0..photons {
            if self.transmit.sample(rng) && rng.random::<f64>() < eff {
                signal = true;
            }
        }
        let click0 = (signal && route == 0) | self.dark.sample(rng);
        let click1 = (signal && route == 1) | self.dark.sample(rng);
        PulseRecord {
            alice_bit,
            alice_basis,
            eve_shift: shift,
            bob_basis,
            photons,
            click0,
            click1,
            bob_bit: squash(click0, click1, rng),
        }
    }
}

/// RNG for pulse block `block` of a session seeded with `seed`.
pub fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

/// Runs a full session and returns its sifted table and per-shift counts.
///
/// Pulses are simulated in blocks of [`BLOCK_PULSES`], each with its own
/// substream of the seed; the result does not depend on block scheduling.
pub fn run_session<D: Receiver + ?Sized>(cfg: &SessionConfig, pair: &D, strategy: &ShiftStrategy) -> Result<SessionOutcome> {
    let model = PulseModel::new(cfg, pair, strategy)?;
    let n_blocks = cfg.n_pulses.div_ceil(BLOCK_PULSES);
    let partials: Vec<SiftAccumulator> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(cfg.seed, b);
            let len = BLOCK_PULSES.min(cfg.n_pulses - b * BLOCK_PULSES);
            let mut acc = SiftAccumulator::default();
            for _ in 0..len {
                let shift = choose_shift(strategy, &mut rng);
                acc.push(&model.pulse(shift, &mut rng));
            }
            acc
        })
        .collect();
    Ok(partials
        .iter()
        .fold(SiftAccumulator::default(), |acc, p| acc.merge(p))
        .finish())
}

/// Per-pulse probabilities that Bob decodes 0 or 1, given where the pulse
/// was routed. Closed form of [`PulseModel::pulse_with`].
fn decode_probs(eff: [f64; 2], route: usize, photons_at_receiver: f64, dark: f64) -> [f64; 2] {
    let signal = 1.0 - (-photons_at_receiver * eff[route]).exp();
    let mut c = [dark, dark];
    c[route] = 1.0 - (1.0 - signal) * (1.0 - dark);
    let both = c[0] * c[1];
    [c[0] * (1.0 - c[1]) + 0.5 * both, c[1] * (1.0 - c[0]) + 0.5 * both]
}

/// Expected per-pulse probabilities at one shift: `[z2][x][y]` for
/// basis-matched pulses and the all-basis decode probabilities.
pub fn expected_pulse_probabilities<D: Receiver + ?Sized>(
    cfg: &SessionConfig,
    pair: &D,
    shift_ps: f64,
) -> ([[[f64; 2]; 2]; 2], [f64; 2]) {
    let eff = pair.efficiencies(shift_ps);
    let m = cfg.photons_at_receiver();
    let f = cfg.intrinsic_flip_prob;
    let dark = pair.dark_count_prob();
    let mut sifted = [[[0.0; 2]; 2]; 2];
    let mut decoded = [0.0; 2];
    for x in 0..2 {
        let keep = decode_probs(eff, x, m, dark);
        let flipped = decode_probs(eff, 1 - x, m, dark);
        let matched = [
            (1.0 - f) * keep[0] + f * flipped[0],
            (1.0 - f) * keep[1] + f * flipped[1],
        ];
        let unmatched = [0.5 * (keep[0] + flipped[0]), 0.5 * (keep[1] + flipped[1])];
        for y in 0..2 {
            for z2 in 0..2 {
                // P(x) P(z2) P(bob basis = z2)
                sifted[z2][x][y] = 0.125 * matched[y];
            }
            decoded[y] += 0.5 * (0.5 * matched[y] + 0.5 * unmatched[y]);
        }
    }
    (sifted, decoded)
}

/// Expected session outcome with counts rounded to the nearest integer.
///
/// Pulses are split between shifts in exact proportion to the strategy.
pub fn expected_outcome<D: Receiver + ?Sized>(
    cfg: &SessionConfig,
    pair: &D,
    strategy: &ShiftStrategy,
) -> Result<SessionOutcome> {
    cfg.validate()?;
    pair.validate()?;
    strategy.validate()?;
    let n = cfg.n_pulses as f64;
    let mut table = SiftedTable::new(cfg.n_pulses, (n / 2.0).round() as u64);
    let mut summaries = [CountSummary::default(); 3];
    for label in ShiftLabel::ALL {
        let share = strategy.share(label);
        if share == 0.0 {
            continue;
        }
        let sent = n * share;
        let (sifted, decoded) = expected_pulse_probabilities(cfg, pair, strategy.shift_time(label));
        let cells = table.shift_mut(label);
        cells.n_sent = sent.round() as u64;
        for z2 in 0..2 {
            for x in 0..2 {
                for y in 0..2 {
                    cells.counts[z2][x][y] = (sent * sifted[z2][x][y]).round() as u64;
                }
            }
        }
        summaries[label.index()] = CountSummary {
            d0: (sent * decoded[0]).round() as u64,
            d1: (sent * decoded[1]).round() as u64,
            n_sent: cells.n_sent,
        };
    }
    Ok(SessionOutcome::from_parts(table, summaries))
}

/// Fraction of sifted detections at `label` where Bob's bit differs from
/// Alice's.
pub fn qber(table: &SiftedTable, label: ShiftLabel) -> Result<f64> {
    let cells = table.shift(label);
    let total = cells.total();
    if total == 0 {
        return Err(Error::NoEvents(label.to_string()));
    }
    Ok(cells.errors() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::ShiftMode;
    use crate::detector::{DetectorPair, GateProfile};

    fn pair(dark: f64) -> DetectorPair {
        let p0 = GateProfile::new(0.3, 50.0, 500.0, 90.0).unwrap();
        let p1 = GateProfile::new(0.28, 150.0, 500.0, 80.0).unwrap();
        DetectorPair::new(p0, p1, dark).unwrap()
    }

    fn small_cfg(n: u64) -> SessionConfig {
        SessionConfig {
            n_pulses: n,
            ..SessionConfig::reference()
        }
    }

    #[test]
    fn squash_rules() {
        let mut rng = block_rng(1, 0);
        assert_eq!(squash(false, false, &mut rng), None);
        assert_eq!(squash(true, false, &mut rng), Some(0));
        assert_eq!(squash(false, true, &mut rng), Some(1));
        let zeros = (0..10_000).filter(|_| squash(true, true, &mut rng) == Some(0)).count();
        let frac = zeros as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn no_light_no_dark_no_detections() {
        let cfg = SessionConfig {
            channel_transmittance: 0.0,
            ..small_cfg(200_000)
        };
        let out = run_session(&cfg, &pair(0.0), &ShiftStrategy::constant(-250.0)).unwrap();
        assert_eq!(out.table.total_detected(), 0);
        let s = out.summary(ShiftLabel::A);
        assert_eq!((s.d0, s.d1, s.n_sent), (0, 0, 200_000));
        assert!(matches!(qber(&out.table, ShiftLabel::A), Err(Error::NoEvents(_))));
    }

    #[test]
    fn sift_keeps_basis_matched_detections() {
        let rec = |x, z2, bb, y| PulseRecord {
            alice_bit: x,
            alice_basis: z2,
            eve_shift: ShiftLabel::A,
            bob_basis: bb,
            photons: 1,
            click0: y == Some(0),
            click1: y == Some(1),
            bob_bit: y,
        };
        let records = [
            rec(0, 0, 0, Some(0)),
            rec(1, 0, 1, Some(0)),
            rec(1, 1, 1, None),
            rec(1, 1, 1, Some(0)),
        ];
        let out = sift(&records);
        assert_eq!(out.table.n_sent, 4);
        assert_eq!(out.table.n_sifted_basis, 3);
        assert_eq!(out.table.count(ShiftLabel::A, 0, 0, 0), 1);
        assert_eq!(out.table.count(ShiftLabel::A, 1, 1, 0), 1);
        assert_eq!(out.table.total_detected(), 2);
        assert_eq!(out.summary(ShiftLabel::A).d0, 3);
    }

    #[test]
    fn forced_equal_bases_sift_everything() {
        let model = PulseModel::new(&small_cfg(1), &pair(1e-5), &ShiftStrategy::constant(0.0)).unwrap();
        let mut rng = block_rng(5, 0);
        let records: Vec<_> = (0..10_000)
            .map(|i| model.pulse_with(ShiftLabel::A, (i % 2) as u8, 1, 1, &mut rng))
            .collect();
        let out = sift(&records);
        assert_eq!(out.table.n_sifted_basis, out.table.n_sent);
    }

    #[test]
    fn perfect_symmetric_receiver_has_zero_qber() {
        let p = GateProfile::new(0.5, 0.0, 500.0, 50.0).unwrap();
        let pair = DetectorPair::identical(p, 0.0).unwrap();
        let cfg = SessionConfig {
            intrinsic_flip_prob: 0.0,
            channel_transmittance: 1.0,
            ..small_cfg(400_000)
        };
        let out = run_session(&cfg, &pair, &ShiftStrategy::constant(0.0)).unwrap();
        assert!(out.table.total_detected() > 1000);
        assert_eq!(qber(&out.table, ShiftLabel::A).unwrap(), 0.0);
    }

    #[test]
    fn identical_seeds_identical_tables() {
        let cfg = small_cfg(600_000);
        let s = ShiftStrategy::mixture(-250.0, 500.0, 0.3).unwrap();
        let a = run_session(&cfg, &pair(1e-5), &s).unwrap();
        let b = run_session(&cfg, &pair(1e-5), &s).unwrap();
        assert_eq!(a, b);
        let c = run_session(&SessionConfig { seed: 1, ..cfg }, &pair(1e-5), &s).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unattacked_pulses_land_in_unshifted_slot() {
        let s = ShiftStrategy {
            mode: ShiftMode::None,
            ..ShiftStrategy::constant(-250.0)
        };
        let out = run_session(&small_cfg(100_000), &pair(1e-5), &s).unwrap();
        assert_eq!(out.summary(ShiftLabel::Unshifted).n_sent, 100_000);
        assert_eq!(out.summary(ShiftLabel::A).n_sent, 0);
    }

    #[test]
    fn qber_of_published_cells() {
        let mut t = SiftedTable::new(20_966_400, 10_481_280);
        t.set_rows(ShiftLabel::A, 20_966_400, &[(0, 1, 336, 139), (0, 0, 65, 2557), (1, 1, 333, 120), (1, 0, 59, 2634)]);
        t.set_rows(ShiftLabel::B, 20_966_400, &[(0, 1, 979, 31), (0, 0, 41, 260), (1, 1, 1022, 37), (1, 0, 35, 279)]);
        assert!((qber(&t, ShiftLabel::A).unwrap() - 383.0 / 6243.0).abs() < 1e-15);
        assert!((qber(&t, ShiftLabel::B).unwrap() - 144.0 / 2684.0).abs() < 1e-15);
    }

    #[test]
    fn table_csv_round_trip() {
        let out = run_session(&small_cfg(300_000), &pair(1e-5), &ShiftStrategy::mixture(-250.0, 500.0, 0.4).unwrap()).unwrap();
        let mut buf = Vec::new();
        out.table.write_csv(&mut buf).unwrap();
        assert_eq!(SiftedTable::read_csv(buf.as_slice()).unwrap(), out.table);

        let rows = out.summaries();
        let mut buf = Vec::new();
        write_counts_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_counts_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            SessionConfig { n_pulses: 0, ..small_cfg(1) },
            SessionConfig { mean_photon_number: 0.0, ..small_cfg(1) },
            SessionConfig { intrinsic_flip_prob: 1.5, ..small_cfg(1) },
            SessionConfig { channel_transmittance: -0.1, ..small_cfg(1) },
        ];
        for cfg in bad {
            assert!(matches!(
                run_session(&cfg, &pair(0.0), &ShiftStrategy::constant(0.0)),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
