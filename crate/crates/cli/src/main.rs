//! Experiment runner around the counting engine: single runs with file
//! outputs, sweeps over network sizes, and a self-check mode that replays
//! the library's invariants against live runs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use num_bigint::BigInt;
use num_rational::BigRational;

use adncount::engine::{self, RunConfig, RunOutcome};
use adncount::extensions::{AggregateFn, DEFAULT_VALUE_WIDTH};
use adncount::network::{CompiledSchedule, ScheduleKind, TopologySchedule};
use adncount::numeric::{pow_base, Backend, PotentialMath};
use adncount::oracle::{check_convergence_bound, evolve_f64, Evolver};
use adncount::params::{params_for, total_rounds, EpsilonPolicy};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Run,
    Sweep,
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Exact,
    Float64,
}

#[derive(Parser)]
#[command(
    name = "adncount",
    about = "Counting in anonymous dynamic networks: runs, sweeps, and self-checks"
)]
struct Cli {
    /// What to do: one run, a sweep over n, or the verification suites.
    #[arg(long, value_enum, default_value_t = Mode::Run)]
    mode: Mode,

    /// Number of nodes; in sweep and verify modes the lower end of the range.
    #[arg(long, default_value_t = 2)]
    n: usize,

    /// Upper end of the n range (inclusive), sweep and verify modes only.
    #[arg(long)]
    n_max: Option<usize>,

    /// Topology generator for the communication rounds.
    #[arg(long, default_value = "dynamic-permuted-path")]
    topology: ScheduleKind,

    /// Explicit round-by-round edge list; overrides --topology.
    #[arg(long)]
    schedule_file: Option<PathBuf>,

    /// Base RNG seed. Sweeps use seed, seed+1, ... per repetition.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Repetitions per n in sweep and verify modes.
    #[arg(long, default_value_t = 1)]
    reps: u64,

    /// "auto" for the built-in schedule, or one fixed positive real.
    #[arg(long, default_value = "auto")]
    epsilon: String,

    /// Arithmetic backend; defaults to exact up to n=5 and float64 beyond.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,

    /// Aggregate computed on top of counting.
    #[arg(long, default_value = "count")]
    function: AggregateFn,

    /// Input values for the aggregate, one integer per line, node 0 first.
    #[arg(long)]
    values: Option<PathBuf>,

    /// Bits reserved per input value.
    #[arg(long)]
    value_width: Option<u32>,

    /// Where the outcome JSON goes (run mode). Default outcome.json.
    #[arg(long)]
    outcome_out: Option<PathBuf>,

    /// Where the per-epoch (run) or per-run (sweep) CSV goes.
    #[arg(long)]
    metrics_out: Option<PathBuf>,

    /// Write a JSONL trace of sampled rounds here (run mode only).
    #[arg(long)]
    trace_out: Option<PathBuf>,

    /// Rounds between trace samples inside a phase.
    #[arg(long, default_value_t = 1000)]
    trace_stride: u64,
}

enum AppError {
    Usage(String),
    Verification(String),
    Runtime(String),
}

impl From<engine::EngineError> for AppError {
    fn from(e: engine::EngineError) -> Self {
        match e {
            engine::EngineError::Config(msg) => AppError::Usage(msg),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for AppError {
    fn from(e: io::Error) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.mode {
        Mode::Run => run_mode(&cli),
        Mode::Sweep => sweep_mode(&cli),
        Mode::Verify => verify_mode(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Verification(msg)) => {
            eprintln!("verification failed:\n{msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

fn parse_epsilon(s: &str) -> Result<EpsilonPolicy, AppError> {
    if s == "auto" {
        return Ok(EpsilonPolicy::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(EpsilonPolicy::Fixed(v)),
        _ => Err(usage(format!(
            "--epsilon takes \"auto\" or a positive real, got {s:?}"
        ))),
    }
}

fn backend_for(n: usize, choice: Option<BackendArg>) -> Backend {
    match choice {
        Some(BackendArg::Exact) => Backend::Exact,
        Some(BackendArg::Float64) => Backend::float64(),
        None if n <= 5 => Backend::Exact,
        None => Backend::float64(),
    }
}

fn schedule_for(cli: &Cli, n: usize, seed: u64) -> TopologySchedule {
    match &cli.schedule_file {
        Some(path) => TopologySchedule::from_file(path, n),
        None => TopologySchedule::new(cli.topology, n, seed),
    }
}

fn read_values(path: &Path) -> Result<Vec<u64>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<u64>().map_err(|_| {
            usage(format!(
                "{} line {}: expected an unsigned integer, got {line:?}",
                path.display(),
                i + 1
            ))
        })?;
        out.push(v);
    }
    Ok(out)
}

fn build_config(cli: &Cli, n: usize, seed: u64) -> Result<RunConfig, AppError> {
    if n < 2 {
        return Err(usage(format!("need at least 2 nodes, got {n}")));
    }
    if cli.function.needs_values() && cli.values.is_none() {
        return Err(usage(format!(
            "--function {} needs --values",
            cli.function
        )));
    }
    if cli.values.is_some() && !cli.function.needs_values() {
        return Err(usage("--values given but --function does not take inputs"));
    }
    let values = cli.values.as_deref().map(read_values).transpose()?;
    Ok(RunConfig {
        n,
        schedule: schedule_for(cli, n, seed),
        backend: backend_for(n, cli.backend),
        epsilon_policy: parse_epsilon(&cli.epsilon)?,
        function: cli.function,
        values,
        value_width: cli.value_width.unwrap_or(DEFAULT_VALUE_WIDTH),
        trace_stride: cli.trace_out.as_ref().map(|_| cli.trace_stride.max(1)),
    })
}

/// Files created so far; everything is unlinked unless the whole mode
/// finishes, so a failed invocation leaves no partial outputs behind.
struct OutputGuard {
    written: Vec<PathBuf>,
    keep: bool,
}

impl OutputGuard {
    fn new() -> Self {
        OutputGuard {
            written: Vec::new(),
            keep: false,
        }
    }

    fn write(&mut self, path: &Path, body: &[u8]) -> Result<(), AppError> {
        fs::write(path, body)
            .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.keep {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn summary_line(outcome: &RunOutcome, kind: &str, seed: u64) -> String {
    let mut line = format!(
        "n={} {kind} seed {seed} [{}]: output {}, {} rounds, {} epochs, simultaneous stop: {}",
        outcome.n,
        outcome.backend,
        outcome.outputs[0],
        outcome.total_rounds,
        outcome.per_epoch.len(),
        outcome.stopped_simultaneously,
    );
    if let Some(agg) = &outcome.aggregate {
        if let Some(s) = agg.sum {
            let _ = write!(line, ", sum {s}");
        }
        if let Some(a) = &agg.average {
            let _ = write!(line, ", average {}/{}", a.num, a.den);
        }
        if let Some(b) = agg.boolean {
            let _ = write!(line, ", {} is {b}", agg.function);
        }
        if let (Some(max), Some(min)) = (agg.max, agg.min) {
            let _ = write!(line, ", max {max}, min {min}");
        }
    }
    line
}

fn kind_label(cli: &Cli) -> String {
    match &cli.schedule_file {
        Some(p) => format!("file:{}", p.display()),
        None => cli.topology.to_string(),
    }
}

fn run_mode(cli: &Cli) -> Result<(), AppError> {
    if cli.n_max.is_some() {
        return Err(usage("--n-max only applies to sweep and verify modes"));
    }
    if cli.reps != 1 {
        return Err(usage("--reps only applies to sweep and verify modes"));
    }
    let cfg = build_config(cli, cli.n, cli.seed)?;
    let (outcome, trace) = engine::run(&cfg)?;

    let mut guard = OutputGuard::new();
    let outcome_path = cli
        .outcome_out
        .clone()
        .unwrap_or_else(|| PathBuf::from("outcome.json"));
    guard.write(&outcome_path, engine::outcome_json(&outcome).as_bytes())?;

    let metrics_path = cli
        .metrics_out
        .clone()
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));
    let mut csv = Vec::new();
    engine::write_metrics_csv(&outcome, &mut csv)?;
    guard.write(&metrics_path, &csv)?;

    if let Some(trace_path) = &cli.trace_out {
        let mut jsonl = Vec::new();
        engine::write_trace_jsonl(&trace, &mut jsonl)?;
        guard.write(trace_path, &jsonl)?;
    }
    guard.keep = true;

    println!("{}", summary_line(&outcome, &kind_label(cli), cli.seed));
    Ok(())
}

const SWEEP_CSV_HEADER: &str =
    "n,topology,seed,backend,output,total_rounds,epochs,stopped_simultaneously";

fn sweep_mode(cli: &Cli) -> Result<(), AppError> {
    if cli.function != AggregateFn::Count || cli.values.is_some() {
        return Err(usage("sweeps run plain counting; drop --function/--values"));
    }
    if cli.trace_out.is_some() || cli.outcome_out.is_some() {
        return Err(usage("sweeps write one CSV; use --metrics-out"));
    }
    let hi = cli.n_max.unwrap_or(cli.n);
    if hi < cli.n {
        return Err(usage(format!("--n-max {hi} is below --n {}", cli.n)));
    }
    if cli.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for n in cli.n..=hi {
        for rep in 0..cli.reps {
            let seed = cli.seed + rep;
            let cfg = build_config(cli, n, seed)?;
            let (outcome, _) = engine::run(&cfg)?;
            println!("{}", summary_line(&outcome, &kind_label(cli), seed));
            let _ = writeln!(
                csv,
                "{n},{},{seed},{},{},{},{},{}",
                kind_label(cli),
                outcome.backend,
                outcome.outputs[0],
                outcome.total_rounds,
                outcome.per_epoch.len(),
                outcome.stopped_simultaneously,
            );
        }
    }

    let path = cli
        .metrics_out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let mut guard = OutputGuard::new();
    guard.write(&path, csv.as_bytes())?;
    guard.keep = true;
    Ok(())
}

fn verify_mode(cli: &Cli) -> Result<(), AppError> {
    if cli.trace_out.is_some() || cli.outcome_out.is_some() || cli.metrics_out.is_some() {
        return Err(usage("verify mode writes no files"));
    }
    if cli.function != AggregateFn::Count || cli.values.is_some() {
        return Err(usage("verify mode runs plain counting; drop --function/--values"));
    }
    if cli.schedule_file.is_some() {
        return Err(usage("verify mode uses the built-in generators"));
    }
    let lo = cli.n;
    let hi = cli.n_max.unwrap_or(lo.max(4));
    if hi < lo {
        return Err(usage(format!("--n-max {hi} is below --n {lo}")));
    }
    if cli.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }

    let mut failures: Vec<String> = Vec::new();
    instrumented_suite(cli, lo, hi, &mut failures)?;
    oracle_suite(cli, lo, hi, &mut failures)?;
    window_suite(cli, lo, hi, &mut failures)?;

    if failures.is_empty() {
        println!("all suites passed");
        Ok(())
    } else {
        Err(AppError::Verification(failures.join("\n")))
    }
}

/// Full runs with the evidence recorder on: counts, totals, conservation,
/// range, phase-1 census, alarm deadlines, and the mixing bound.
fn instrumented_suite(
    cli: &Cli,
    lo: usize,
    hi: usize,
    failures: &mut Vec<String>,
) -> Result<(), AppError> {
    let mut runs = 0;
    for n in lo..=hi {
        for kind in ScheduleKind::GENERATORS {
            for rep in 0..cli.reps {
                let seed = cli.seed + rep;
                let mut cfg = RunConfig::counting(n, TopologySchedule::new(kind, n, seed));
                cfg.backend = backend_for(n, cli.backend);
                cfg.epsilon_policy = parse_epsilon(&cli.epsilon)?;
                let label = format!("n={n} {kind} seed {seed}");
                let (outcome, _, evidence) = engine::run_instrumented(&cfg)?;
                let mut fail = |msg: String| failures.push(format!("{label}: {msg}"));

                if outcome.outputs != vec![n as u64; n] {
                    fail(format!("outputs {:?}", outcome.outputs));
                }
                if !outcome.stopped_simultaneously {
                    fail("nodes stopped at different rounds".into());
                }
                let expected = total_rounds(n as u64, cfg.epsilon_policy)
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
                if outcome.total_rounds != expected {
                    fail(format!(
                        "ran {} rounds, schedule says {expected}",
                        outcome.total_rounds
                    ));
                }
                if !evidence.conservation_ok {
                    fail(format!(
                        "potential mass not conserved: {:?}",
                        evidence.conservation_failure
                    ));
                }
                if !evidence.range_ok {
                    fail(format!(
                        "potential left [0,1] (worst excess {:.3e})",
                        evidence.range_worst
                    ));
                }
                for e in &evidence.epochs {
                    match &e.census {
                        Some(c) if !c.holds => fail(format!(
                            "k={}: {} nodes at or below tau, bound {}, slack-sum-one {:?}",
                            e.k, c.low_count, c.bound, c.slack_sum_is_one
                        )),
                        Some(_) => {}
                        None => fail(format!("k={}: phase-1 census missing", e.k)),
                    }
                    if let Some(dl) = &e.alarm_deadline {
                        if !dl.holds {
                            fail(format!(
                                "k={}: leader alarm at {:?}, deadline {}",
                                e.k, dl.leader_alarm_round, dl.deadline
                            ));
                        }
                    }
                }
                for s in &evidence.mixing {
                    if !s.holds_diam {
                        fail(format!(
                            "k={} phase {} t={}: mixing bound broken (log2 ratio {:.3})",
                            s.k, s.phase, s.t, s.ratio_log2_diam
                        ));
                    }
                }
                runs += 1;
            }
        }
    }
    println!("ok: {runs} instrumented runs (counts, conservation, range, census, deadlines, mixing)");
    Ok(())
}

/// The engine must track the independent walk oracle along alarm-free
/// prefixes, bit for bit on both backends.
fn oracle_suite(
    cli: &Cli,
    lo: usize,
    hi: usize,
    failures: &mut Vec<String>,
) -> Result<(), AppError> {
    const WINDOW: u64 = 300;
    let policy = parse_epsilon(&cli.epsilon)?;
    let mut pairs = 0;
    for n in lo..=hi.min(6) {
        for kind in ScheduleKind::GENERATORS {
            let mut cfg = RunConfig::counting(n, TopologySchedule::new(kind, n, cli.seed));
            cfg.epsilon_policy = policy;
            let schedule = CompiledSchedule::compile(&cfg.schedule)
                .map_err(|e| AppError::Runtime(e.to_string()))?;
            let label = format!("n={n} {kind} seed {}", cli.seed);

            let mut world = engine::World::exact_with_estimate(&cfg, 3)?;
            let d = world.params().d;
            let start: Vec<BigRational> = (0..n)
                .map(|i| BigRational::from_integer(BigInt::from(u32::from(i != 0))))
                .collect();
            let mut oracle = Evolver::new(start, d);
            'exact: for round in 0..WINDOW {
                world.step_round()?;
                let g = schedule
                    .graph_at(round)
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
                oracle
                    .step(g.as_ref())
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
                let ctx = world.ctx().clone();
                for (i, phi) in world.potentials().iter().enumerate() {
                    let (num, exp) = ctx.exact_view(phi).unwrap();
                    let val = BigRational::new(
                        BigInt::from(num.clone()),
                        BigInt::from(pow_base(d, exp)),
                    );
                    if val != oracle.current()[i] {
                        failures
                            .push(format!("{label}: exact drift at node {i} round {round}"));
                        break 'exact;
                    }
                }
            }

            cfg.backend = Backend::float64();
            let mut world = engine::World::float_with_estimate(&cfg, 3)?;
            let mut reference: Vec<f64> =
                (0..n).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect();
            'float: for round in 0..WINDOW {
                world.step_round()?;
                let g = schedule
                    .graph_at(round)
                    .map_err(|e| AppError::Runtime(e.to_string()))?
                    .into_owned();
                reference =
                    evolve_f64(&reference, &[g], d).map_err(|e| AppError::Runtime(e.to_string()))?;
                let ctx = world.ctx().clone();
                for (i, phi) in world.potentials().iter().enumerate() {
                    let diff = (ctx.approx_f64(phi) - reference[i]).abs();
                    if diff > 1e-12 {
                        failures.push(format!(
                            "{label}: float drift {diff:e} at node {i} round {round}"
                        ));
                        break 'float;
                    }
                }
            }
            pairs += 1;
        }
    }
    println!("ok: {pairs} oracle-tracking windows of {WINDOW} rounds on both backends");
    Ok(())
}

/// The contraction inequality over a full first phase, checked by the
/// oracle in reduced rational arithmetic.
fn window_suite(
    cli: &Cli,
    lo: usize,
    hi: usize,
    failures: &mut Vec<String>,
) -> Result<(), AppError> {
    let policy = parse_epsilon(&cli.epsilon)?;
    let params = params_for(2, policy).map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut windows = 0;
    for n in lo..=hi {
        let sched = TopologySchedule::new(ScheduleKind::DynamicPermutedPath, n, cli.seed);
        let graphs: Vec<_> = (0..params.r)
            .map(|t| sched.generate(t))
            .collect::<Result<_, _>>()
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        let start: Vec<BigRational> = (0..n)
            .map(|i| BigRational::from_integer(BigInt::from(u32::from(i != 0))))
            .collect();
        let report = check_convergence_bound(&start, &graphs, params.d)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        if !report.pass {
            failures.push(format!(
                "n={n}: contraction bound failed (max ratio {:.3e})",
                report.max_ratio_lhs_over_rhs
            ));
        }
        windows += 1;
    }
    println!("ok: {windows} full-phase contraction windows");
    Ok(())
}
