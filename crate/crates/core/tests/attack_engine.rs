use num_rational::Ratio;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timeshift::attack::{
    balance_pa, balanced_weights, choose_shift, merged_statistics, optimize_shift_pair, probe_mismatch, PairEvaluator,
};
use timeshift::harness::{expected_probe_rates, AnalysisParams, ExpectedEvaluator, Scenario, SimulatedProbeChannel};
use timeshift::{CountSummary, DetectorPair, Error, GateProfile, SessionConfig, ShiftLabel, ShiftStrategy, SiftedTable};

fn fitted() -> DetectorPair {
    *Scenario::default().receiver().unwrap().profiles().unwrap()
}

fn evaluator(pair: &DetectorPair) -> ExpectedEvaluator<'_, DetectorPair> {
    let params = AnalysisParams::reference();
    ExpectedEvaluator {
        session: SessionConfig::reference(),
        receiver: pair,
        params,
    }
}

#[test]
fn optimizer_finds_the_reference_pair() {
    let pair = fitted();
    let mut ev = evaluator(&pair);
    let choice = optimize_shift_pair(&[-250.0, 500.0], &mut ev).unwrap();
    assert_eq!((choice.strategy.shift_a_ps, choice.strategy.shift_b_ps), (-250.0, 500.0));
    assert!((choice.strategy.p_a - 0.2303).abs() < 2e-3, "{}", choice.strategy.p_a);
    assert!(choice.gap() > 0.0);
    // Re-evaluating the chosen mixture gives the same numbers.
    assert_eq!(ev.bounds(&choice.strategy).unwrap(), (choice.k_lower, choice.k_upper));
}

#[test]
fn extreme_shifts_do_not_win() {
    let pair = fitted();
    let mut ev = evaluator(&pair);
    let best = optimize_shift_pair(&[-2000.0, -250.0, 500.0, 2000.0], &mut ev).unwrap();
    assert!(best.strategy.shift_a_ps.abs() < 2000.0 && best.strategy.shift_b_ps.abs() < 2000.0);
    for (a, b) in [(-2000.0, 500.0), (-250.0, 2000.0), (-2000.0, 2000.0)] {
        let (ca, cb) = (ev.counts(a).unwrap(), ev.counts(b).unwrap());
        let Ok(p) = balance_pa::<f64>(&ca, &cb) else { continue };
        let s = ShiftStrategy::mixture(a, b, p).unwrap();
        if let Ok((kl, ku)) = ev.bounds(&s) {
            assert!(kl - ku < best.gap(), "{a}/{b}");
        }
    }
}

#[test]
fn identical_detectors_cannot_be_exploited() {
    let g = GateProfile::new(0.12, 100.0, 500.0, 70.0).unwrap();
    let pair = DetectorPair::identical(g, 1.13e-5).unwrap();
    let mut ev = evaluator(&pair);
    let err = optimize_shift_pair(&[-500.0, -250.0, 0.0, 250.0, 500.0], &mut ev).unwrap_err();
    assert!(matches!(err, Error::NoBreach), "{err}");
}

#[test]
fn shift_choice_frequency() {
    let s = ShiftStrategy::mixture(-250.0, 500.0, 2828.0 / 12279.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 200_000;
    let hits = (0..n).filter(|_| choose_shift(&s, &mut rng) == ShiftLabel::A).count() as f64;
    let sd = (n as f64 * s.p_a * (1.0 - s.p_a)).sqrt();
    assert!((hits - n as f64 * s.p_a).abs() < 3.0 * sd);
}

#[test]
fn probe_estimate_matches_fitted_receiver() {
    let pair = fitted();
    let cfg = SessionConfig {
        intrinsic_flip_prob: 0.0,
        ..SessionConfig::reference()
    };
    let mut ch = SimulatedProbeChannel::new(cfg, &pair).unwrap();
    let report = probe_mismatch(&mut ch, &[-250.0], 0.1).unwrap();
    let (ratio, err) = report.estimates[0].mismatch();
    let [r0, r1] = expected_probe_rates(&cfg, &pair, -250.0);
    let want = r0 / r1;
    assert!((ratio - want).abs() < 3.0 * err, "{ratio} ± {err} vs {want}");
}

#[test]
fn dark_only_shift_is_insufficient() {
    let pair = fitted();
    let cfg = SessionConfig {
        n_pulses: 2_000_000,
        ..SessionConfig::reference()
    };
    let mut ch = SimulatedProbeChannel::new(cfg, &pair).unwrap();
    let err = probe_mismatch(&mut ch, &[6000.0], 0.1).unwrap_err();
    assert!(matches!(err, Error::InsufficientData { shift_ps, .. } if shift_ps == 6000.0), "{err}");
}

#[test]
fn identical_detectors_probe_as_balanced() {
    let g = GateProfile::new(0.5, 0.0, 500.0, 70.0).unwrap();
    let pair = DetectorPair::identical(g, 1e-5).unwrap();
    let cfg = SessionConfig {
        n_pulses: 1_000_000,
        mean_photon_number: 0.5,
        channel_transmittance: 0.5,
        ..SessionConfig::reference()
    };
    let mut ch = SimulatedProbeChannel::new(cfg, &pair).unwrap();
    let report = probe_mismatch(&mut ch, &[-150.0, 0.0, 150.0], 0.1).unwrap();
    for e in &report.estimates {
        let [r0, r1] = e.detector_rates;
        let sd = (e.detector_stderr[0].powi(2) + e.detector_stderr[1].powi(2)).sqrt();
        assert!((r0 - r1).abs() < 3.0 * sd, "{}: {r0} vs {r1}", e.shift_ps);
    }
}

#[test]
fn probe_error_shrinks_as_inverse_square_root() {
    let g0 = GateProfile::new(0.6, 0.0, 500.0, 70.0).unwrap();
    let g1 = GateProfile::new(0.5, 100.0, 500.0, 70.0).unwrap();
    let pair = DetectorPair::new(g0, g1, 1e-5).unwrap();
    let reps = 24;
    let mut points = Vec::new();
    for n_probe in [1_000u64, 10_000, 100_000] {
        let mut sq = 0.0;
        for rep in 0..reps {
            let cfg = SessionConfig {
                n_pulses: n_probe * 10,
                mean_photon_number: 0.5,
                channel_transmittance: 1.0,
                seed: 1000 + rep,
                ..SessionConfig::reference()
            };
            let want = expected_probe_rates(&cfg, &pair, -100.0)[0];
            let mut ch = SimulatedProbeChannel::new(cfg, &pair).unwrap();
            let e = probe_mismatch(&mut ch, &[-100.0], 0.1).unwrap().estimates[0];
            sq += (e.detector_rates[0] - want).powi(2);
        }
        points.push(((n_probe as f64).ln(), (sq / reps as f64).sqrt().ln()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.15, "slope {slope}");
}

fn cs(d0: u64, d1: u64, n: u64) -> CountSummary {
    CountSummary::new(d0, d1, n).unwrap()
}

proptest! {
    #[test]
    fn balanced_merge_equalizes_bits(
        a in (1000u64..50_000, 0u64..1000),
        b in (0u64..1000, 1000u64..50_000),
        cells in prop::array::uniform8(1u64..5000),
    ) {
        let n = 20_000_000;
        let (sa, sb) = (cs(a.0, a.1, n), cs(b.0, b.1, n));
        let mut t = SiftedTable::new(n, n / 2);
        for label in [ShiftLabel::A, ShiftLabel::B] {
            t.set_rows(label, n, &[(0, 0, cells[0], cells[1]), (0, 1, cells[2], cells[3]), (1, 0, cells[4], cells[5]), (1, 1, cells[6], cells[7])]);
        }
        let w = balanced_weights::<f64>(&sa, &sb).unwrap();
        let m = merged_statistics(&t, &sa, &sb, w).unwrap();
        prop_assert!((m.d0.round() - m.d1.round()).abs() <= 1.0);
        prop_assert!((m.d0 - m.d1).abs() <= 1e-9 * m.d0);
        prop_assert!((w.a + w.b - 1.0).abs() <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn balancing_is_scale_invariant(
        a in (1u64..100_000, 0u64..100_000),
        b in (0u64..100_000, 1u64..100_000),
        k in 1u64..1000,
    ) {
        prop_assume!(a.0 > a.1 && b.1 > b.0);
        let n = 1 << 40;
        let p: Ratio<u64> = balance_pa(&cs(a.0, a.1, n), &cs(b.0, b.1, n)).unwrap();
        let q: Ratio<u64> = balance_pa(&cs(k * a.0, k * a.1, n), &cs(k * b.0, k * b.1, n)).unwrap();
        prop_assert_eq!(p, q);
        let want = Ratio::new(b.1 - b.0, (a.0 - a.1) + (b.1 - b.0));
        prop_assert_eq!(p, want);
    }
}
