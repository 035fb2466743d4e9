use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timeshift::detector::CurvePair;
use timeshift::harness::{
    analyze, calibration_stats, read_sweep_csv, reproduce, run_sweep, write_sweep_csv, AnalysisParams, ReferenceData,
    Scenario,
};
use timeshift::protocol::ShiftLabel;
use timeshift::{CalibrationModel, CountSummary, Error, SessionConfig, ShiftWeights};

#[test]
fn reproduction_survives_relabeling() {
    let data = ReferenceData::embedded().unwrap();
    let forward = reproduce(&data).unwrap();
    let swapped = reproduce(&data.relabeled()).unwrap();
    assert!(forward.all_pass());
    assert_eq!(forward.analysis.report.k_upper, swapped.analysis.report.k_upper);
    assert_eq!(forward.analysis.report.breach, swapped.analysis.report.breach);
    assert_eq!(forward.analysis.weights.a, swapped.analysis.weights.b);
}

#[test]
fn balanced_unbiased_cells_give_no_breach() {
    let data = ReferenceData::embedded().unwrap();
    let mut table = data.table.clone();
    // Every cell split evenly between bits: Eve learns nothing from the shift.
    for label in [ShiftLabel::A, ShiftLabel::B] {
        let cells = table.shift_mut(label);
        for z2 in 0..2 {
            let total = cells.basis_total(z2);
            let err = total / 30;
            let half = (total - 2 * err) / 2;
            cells.counts[z2] = [[half, err], [err, half]];
        }
    }
    let a = CountSummary::new(1000, 1000, data.table.n_sent).unwrap();
    let r = analyze(&table, &a, &a, ShiftWeights::from_pa(0.5), &AnalysisParams::reference()).unwrap();
    assert!(!r.report.breach, "{}", r.report);
}

#[test]
fn curve_backed_scenario_runs_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let fitted = *Scenario::default().receiver().unwrap().profiles().unwrap();
    let curves = CurvePair::from_pair(&fitted, -2000.0, 2000.0, 50.0).unwrap();
    curves.d0.write_csv(fs::File::create(dir.path().join("d0.csv")).unwrap()).unwrap();
    curves.d1.write_csv(fs::File::create(dir.path().join("d1.csv")).unwrap()).unwrap();
    let text = format!(
        "[session]\nn_pulses = 2000000\n\n[detectors]\nsource = \"curves\"\nd0 = \"d0.csv\"\nd1 = \"d1.csv\"\ndark_count_prob = {}\n\n[sweep]\nshifts_ps = [-250.0, 500.0]\n",
        fitted.dark_count_prob
    );
    fs::write(dir.path().join("scenario.toml"), text).unwrap();
    let scenario = Scenario::load(&dir.path().join("scenario.toml")).unwrap();
    let receiver = scenario.receiver().unwrap();
    assert_eq!(receiver.curve_step(), Some(50.0));
    scenario.validate(&receiver).unwrap();
    let rows = run_sweep(&scenario.session, &receiver, &scenario.sweep.shifts_ps).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].d0 > rows[0].d1 && rows[1].d1 > rows[1].d0);
    // Same seed and same efficiencies: the curve model matches the profiles.
    let direct = run_sweep(&scenario.session, &fitted, &scenario.sweep.shifts_ps).unwrap();
    assert_eq!(rows, direct);

    let mut off_grid = scenario.clone();
    off_grid.sweep.shifts_ps = vec![-225.0];
    assert!(matches!(off_grid.validate(&receiver), Err(Error::InvalidConfig(_))));
}

#[test]
fn full_length_sweep_matches_reference_counts() {
    let scenario = Scenario::default();
    let receiver = scenario.receiver().unwrap();
    let rows = run_sweep(&SessionConfig::reference(), &receiver, &[-250.0, 500.0]).unwrap();
    let want = [(10992.0, 1541.0), (1231.0, 4059.0)];
    for (row, (d0, d1)) in rows.iter().zip(want) {
        assert!((row.d0 as f64 - d0).abs() <= 3.0 * f64::sqrt(d0), "{row:?}");
        assert!((row.d1 as f64 - d1).abs() <= 3.0 * f64::sqrt(d1), "{row:?}");
    }
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows).unwrap();
    assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
}

#[test]
fn sweep_errors_name_the_shift() {
    let receiver = Scenario::default().receiver().unwrap();
    let cfg = SessionConfig {
        n_pulses: 0,
        ..SessionConfig::reference()
    };
    let err = run_sweep(&cfg, &receiver, &[500.0]).unwrap_err();
    assert!(matches!(err, Error::AtShift { shift_ps, .. } if shift_ps == 500.0), "{err}");
    assert!(err.to_string().contains("500"));
}

#[test]
fn calibration_interval_covers_observed_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(SessionConfig::DEFAULT_SEED);
    let r = calibration_stats(&CalibrationModel::observed(), 2844, &mut rng).unwrap();
    assert!(r.contains_frequency(106.0 / 2844.0), "{r}");
    assert!(r.ci_low < r.frequency && r.frequency < r.ci_high);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(timeshift::harness::CalibrationReport::read_csv(buf.as_slice()).unwrap(), r);
}

#[test]
fn sweep_independent_of_thread_count() {
    let receiver = Scenario::default().receiver().unwrap();
    let cfg = SessionConfig {
        n_pulses: 1_000_000,
        ..SessionConfig::reference()
    };
    let shifts = [500.0, -250.0, 0.0, 250.0];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_sweep(&cfg, &receiver, &shifts).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn scenario_toml_round_trip() {
    let mut s = Scenario::default();
    s.session.seed = 99;
    s.sweep.shifts_ps = vec![-500.0, 0.0, 500.0];
    let back = Scenario::from_toml(&s.to_toml()).unwrap();
    assert_eq!(back.session, s.session);
    assert_eq!(back.sweep, s.sweep);
    assert_eq!(back.strategy, s.strategy);
    assert_eq!(back.detectors, s.detectors);
}
