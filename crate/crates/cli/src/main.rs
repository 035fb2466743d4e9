//! Command-line front end: one subcommand per stage of the attack study.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timeshift::attack::{balanced_weights, optimize_shift_pair, probe_mismatch};
use timeshift::harness::{
    analyze, analyze_outcome, calibration_stats, reproduce, run_sweep, strategy_from_toml, strategy_to_toml,
    write_sweep_csv, ExpectedEvaluator, ReceiverModel, ReferenceData, Scenario, SimulatedProbeChannel, StrategySpec,
};
use timeshift::protocol::{read_counts_csv, run_session, write_counts_csv, ShiftLabel};
use timeshift::{BoundsReport, Error, ShiftStrategy, ShiftWeights, SiftedTable};

const SWEEP_FILE: &str = "sweep.csv";
const COUNTS_FILE: &str = "counts.csv";
const SIFTED_FILE: &str = "sifted.csv";
const BOUNDS_FILE: &str = "bounds.csv";
const STRATEGY_FILE: &str = "strategy.toml";
const PROBE_FILE: &str = "probe.csv";
const CALIBRATION_FILE: &str = "calibration.csv";
const REPRODUCTION_FILE: &str = "reproduction.txt";

#[derive(Parser)]
#[command(name = "timeshift", version, about = "Time-shift attack simulation and key-length bounds")]
struct Cli {
    /// Scenario file (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the session seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the number of pulses per session.
    #[arg(long, global = true)]
    pulses: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One constant-shift session per sweep shift.
    Sweep,
    /// Runs the attack session and computes both bounds.
    Attack {
        /// Also probe the sweep shifts with this fraction of the pulse budget.
        #[arg(long)]
        probe: Option<f64>,
    },
    /// Bounds from a counts file and a sifted table.
    Bounds {
        /// Directory with counts.csv, sifted.csv and optionally strategy.toml.
        /// Defaults to the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Recomputes the reference results from the bundled counts.
    ReproducePaper {
        /// Directory holding replacement fixture files.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Samples the calibration model repeatedly.
    CalibrateStats {
        #[arg(long, default_value_t = 2844)]
        runs: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn load_scenario(cli: &Cli) -> Result<Scenario, Error> {
    let mut scenario = match &cli.config {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(seed) = cli.seed {
        scenario.session.seed = seed;
    }
    if let Some(n) = cli.pulses {
        scenario.session.n_pulses = n;
    }
    if let Some(out) = &cli.out {
        scenario.output_dir = std::env::current_dir()?.join(out);
    }
    Ok(scenario)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let scenario = load_scenario(&cli)?;
    match cli.command {
        Command::Sweep => sweep(&scenario),
        Command::Attack { probe } => attack(&scenario, probe),
        Command::Bounds { ref input } => bounds(&scenario, input.as_deref()),
        Command::ReproducePaper { ref fixtures } => reproduce_paper(&scenario, fixtures.as_deref()),
        Command::CalibrateStats { runs } => calibrate(&scenario, runs),
    }
}

fn prepared(scenario: &Scenario) -> Result<(ReceiverModel, PathBuf), Error> {
    let receiver = scenario.receiver()?;
    scenario.validate(&receiver)?;
    let out = scenario.prepare_output()?;
    Ok((receiver, out))
}

fn sweep(scenario: &Scenario) -> Result<ExitCode, Error> {
    let (receiver, out) = prepared(scenario)?;
    let rows = run_sweep(&scenario.session, &receiver, &scenario.sweep.shifts_ps)?;
    write_sweep_csv(create(&out, SWEEP_FILE)?, &rows)?;
    println!("{:>10} {:>10} {:>10} {:>10} {:>9}", "shift_ps", "d0", "d1", "qber", "mismatch");
    for r in &rows {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!("{:>10} {:>10} {:>10} {:>10} {:>9}", r.shift_ps, r.d0, r.d1, opt(r.qber), opt(r.mismatch));
    }
    Ok(ExitCode::SUCCESS)
}

fn attack(scenario: &Scenario, probe: Option<f64>) -> Result<ExitCode, Error> {
    let (receiver, out) = prepared(scenario)?;
    let params = scenario.analysis_params(&receiver);
    if let Some(fraction) = probe {
        let mut channel = SimulatedProbeChannel::new(scenario.session, &receiver)?;
        let report = probe_mismatch(&mut channel, &scenario.sweep.shifts_ps, fraction)?;
        report.write_csv(create(&out, PROBE_FILE)?)?;
        for e in &report.estimates {
            let (ratio, err) = e.mismatch();
            println!("probe {:>8} ps: rate {:.3e}, mismatch {ratio:.3} ± {err:.3}", e.shift_ps, e.rate);
        }
    }
    let strategy = match &scenario.strategy {
        StrategySpec::Fixed(s) => *s,
        StrategySpec::Optimize { candidates_ps, .. } => {
            let mut evaluator = ExpectedEvaluator {
                session: scenario.session,
                receiver: &receiver,
                params,
            };
            let choice = optimize_shift_pair(candidates_ps, &mut evaluator)?;
            println!(
                "chosen pair {} / {} ps, expected gap {:.1} bits",
                choice.strategy.shift_a_ps,
                choice.strategy.shift_b_ps,
                choice.gap()
            );
            choice.strategy
        }
    };
    fs::write(out.join(STRATEGY_FILE), strategy_to_toml(&strategy))?;
    let outcome = run_session(&scenario.session, &receiver, &strategy)?;
    write_counts_csv(create(&out, COUNTS_FILE)?, &outcome.summaries())?;
    outcome.table.write_csv(create(&out, SIFTED_FILE)?)?;
    let analysis = analyze_outcome(&outcome, &strategy, &params)?;
    analysis.report.write_csv(create(&out, BOUNDS_FILE)?)?;
    println!(
        "strategy: A {} ps, B {} ps, p_A {:.4} ({:?})",
        strategy.shift_a_ps, strategy.shift_b_ps, strategy.p_a, strategy.mode
    );
    println!(
        "merged d0 {:.1}, d1 {:.1}, E {:.5}",
        analysis.merged.d0, analysis.merged.d1, analysis.merged.qber
    );
    print!("{}", analysis.report);
    Ok(ExitCode::SUCCESS)
}

fn read_file(path: PathBuf) -> Result<File, Error> {
    File::open(&path).map_err(|_| Error::FixtureMissing(path))
}

fn bounds(scenario: &Scenario, input: Option<&Path>) -> Result<ExitCode, Error> {
    let receiver = scenario.receiver()?;
    let params = scenario.analysis_params(&receiver);
    let out = scenario.prepare_output()?;
    let dir = input.map_or_else(|| out.clone(), Path::to_path_buf);
    let counts = read_counts_csv(read_file(dir.join(COUNTS_FILE))?)?;
    let table = SiftedTable::read_csv(read_file(dir.join(SIFTED_FILE))?)?;
    table.check_invariants()?;
    let summary = |label: ShiftLabel| counts.iter().find(|(l, _)| *l == label).map(|(_, c)| *c).unwrap_or_default();
    let (a, b) = (summary(ShiftLabel::A), summary(ShiftLabel::B));
    let strategy_path = dir.join(STRATEGY_FILE);
    let (weights, report): (ShiftWeights, BoundsReport) = if strategy_path.exists() {
        let strategy: ShiftStrategy = strategy_from_toml(&fs::read_to_string(&strategy_path)?)?;
        let w = strategy.weights();
        (w, analyze(&table, &a, &b, w, &params)?.report)
    } else {
        // Separate constant-shift runs: mix them at the balancing weight.
        let w = balanced_weights(&a, &b)?;
        (w, analyze(&table, &a, &b, w, &params)?.report)
    };
    report.write_csv(create(&out, BOUNDS_FILE)?)?;
    println!("weights: A {:.4}, B {:.4}", weights.a, weights.b);
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn reproduce_paper(scenario: &Scenario, fixtures: Option<&Path>) -> Result<ExitCode, Error> {
    let data = match fixtures {
        Some(dir) => ReferenceData::load(dir)?,
        None => ReferenceData::embedded()?,
    };
    let out = scenario.prepare_output()?;
    let r = reproduce(&data)?;
    let text = r.to_string();
    fs::write(out.join(REPRODUCTION_FILE), &text)?;
    r.analysis.report.write_csv(create(&out, BOUNDS_FILE)?)?;
    print!("{text}");
    if r.all_pass() {
        return Ok(ExitCode::SUCCESS);
    }
    let failed: Vec<_> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    let line = serde_json::json!({ "error": { "kind": "check_failed", "message": format!("failed checks: {}", failed.join(", ")) } });
    eprintln!("{line}");
    Ok(ExitCode::FAILURE)
}

fn calibrate(scenario: &Scenario, runs: u64) -> Result<ExitCode, Error> {
    scenario.calibration.validate()?;
    let out = scenario.prepare_output()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.session.seed);
    let report = calibration_stats(&scenario.calibration, runs, &mut rng)?;
    report.write_csv(create(&out, CALIBRATION_FILE)?)?;
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}
