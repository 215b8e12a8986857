use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eppo::analysis::{self, FuseStrategy, StudyReport};
use eppo::bounds::{mc_validate, BoundReport, McScenario};
use eppo::config::{Backend, ConfigError, EvaluatorSpec, RunConfig};
use eppo::driver::RunErrorKind;
use eppo::evaluators::{protocol, Evaluator, Split, WorldParams};
use eppo::experiment::{self, ExperimentError, Suite};
use eppo::rng::derive_stream;
use eppo::space::PrePrompt;
use eppo::subsampling::{self, SubsampleError};

#[derive(Parser)]
#[command(name = "eppo", version, about = "Comparison-based pre-prompt optimization")]
struct Cli {
    /// Overrides the seed of the config (or seeds the command directly).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run, bench, analyze) or file (subsample, fuse).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config: a run config for `run`, a suite for `bench`, an MC
    /// scenario for `bounds`; `analyze` and `serve` take its evaluator.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a pre-prompt and write archive, progress, result and curve.
    Run {
        /// Test-score the running recommendation at every step.
        #[arg(long)]
        test_curve: Option<bool>,
    },
    /// Run an algorithms x shots x budgets x replicates grid.
    Bench,
    /// Evaluate the deviation bounds; with --config, also run a Monte Carlo check.
    Bounds(BoundsArgs),
    /// Post-hoc studies on saved pre-prompts.
    Analyze {
        #[command(subcommand)]
        study: Study,
    },
    /// Balanced subset of a JSONL item file.
    Subsample(SubsampleArgs),
    /// Answer evaluation requests for an evaluator over stdin/stdout or TCP.
    Serve {
        /// JSON evaluator spec; defaults to the synthetic world.
        #[arg(long)]
        evaluator: Option<PathBuf>,
        /// Listen on this address instead of stdin/stdout.
        #[arg(long)]
        listen: Option<String>,
        /// Include per-question outcomes in responses.
        #[arg(long)]
        per_question: bool,
    },
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long, default_value_t = 2)]
    kappa: u64,
    #[arg(long, default_value_t = 100)]
    budget: u64,
    /// Training-set size.
    #[arg(long = "T", default_value_t = 500)]
    t: u64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Confidence level for the epsilon bound.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct StudyInput {
    /// Pre-prompt file: a line of indices, a JSON array, or a result.json.
    #[arg(long)]
    preprompt: PathBuf,
    /// JSON evaluator spec; defaults to the evaluator of --config, then to
    /// the default synthetic world.
    #[arg(long)]
    evaluator: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Study {
    /// Score random reorderings.
    Permute {
        #[command(flatten)]
        input: StudyInput,
        #[arg(long, default_value_t = 10)]
        n_perm: usize,
    },
    /// Score random order-preserving subsequences.
    Remove {
        #[command(flatten)]
        input: StudyInput,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Concatenate two pre-prompts ranked by their scores.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        strategy: FuseStrategy,
        #[arg(long)]
        evaluator: Option<PathBuf>,
        /// Split used to rank the two inputs.
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Majority-vote exact match on the synthetic world.
    Sc {
        #[command(flatten)]
        input: StudyInput,
        #[arg(long, default_value_t = 5)]
        paths: usize,
        #[arg(long, default_value_t = 0.6)]
        tau: f64,
    },
    /// Score a saved pre-prompt under another evaluator.
    Transfer {
        #[command(flatten)]
        input: StudyInput,
    },
}

#[derive(Args)]
struct SubsampleArgs {
    /// JSONL items: {"id", "category", "correct_count", "n"}.
    #[arg(long)]
    items: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    k: usize,
    /// Answers sampled per item (uncertainty mode).
    #[arg(long, default_value_t = 10)]
    n: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Layered,
    Uncertainty,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Eval(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Eval(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Eval(e) | Failure::Other(e) => e,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.into())
    }
}

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn eval<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Eval(e.into())
}

fn from_config_error(e: ConfigError) -> Failure {
    match e {
        ConfigError::Connect(_) => eval(e),
        other => config(other),
    }
}

fn from_run_kind(e: eppo::driver::RunError) -> Failure {
    match e.kind {
        RunErrorKind::Eval(_) => eval(e),
        RunErrorKind::Config(_) | RunErrorKind::FeedbackLength { .. } => config(e),
        _ => Failure::Other(e.into()),
    }
}

fn from_experiment(e: ExperimentError) -> Failure {
    match e {
        ExperimentError::Run(r) => from_run_kind(r),
        ExperimentError::Eval(_) => eval(e),
        ExperimentError::Io(_) => Failure::Other(e.into()),
        ExperimentError::Suite(_) | ExperimentError::World(_) => config(e),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Config)
}

fn need_config(cli: &Cli, what: &str) -> Result<PathBuf, Failure> {
    cli.config
        .clone()
        .ok_or_else(|| config(anyhow!("{what} needs --config")))
}

fn read_preprompt(path: &Path) -> Result<PrePrompt, Failure> {
    let text = read_text(path)?;
    let t = text.trim();
    let parsed = if t.starts_with('[') {
        serde_json::from_str::<PrePrompt>(t).map_err(anyhow::Error::from)
    } else if t.starts_with('{') {
        serde_json::from_str::<serde_json::Value>(t)
            .map_err(anyhow::Error::from)
            .and_then(|v| {
                let rec = v
                    .get("recommendation")
                    .cloned()
                    .ok_or_else(|| anyhow!("JSON object has no \"recommendation\""))?;
                Ok(serde_json::from_value::<PrePrompt>(rec)?)
            })
    } else {
        t.parse::<PrePrompt>().map_err(anyhow::Error::from)
    };
    parsed
        .with_context(|| format!("bad pre-prompt file {}", path.display()))
        .map_err(Failure::Config)
}

/// Evaluator spec from an explicit file, else from the run config, else the
/// default world (seeded by --seed when given).
fn evaluator_spec(cli: &Cli, explicit: Option<&Path>) -> Result<EvaluatorSpec, Failure> {
    if let Some(p) = explicit {
        return serde_json::from_str(&read_text(p)?)
            .with_context(|| format!("bad evaluator spec {}", p.display()))
            .map_err(Failure::Config);
    }
    if let Some(p) = &cli.config {
        let cfg = RunConfig::from_json(&read_text(p)?).map_err(from_config_error)?;
        return Ok(cfg.evaluator);
    }
    Ok(EvaluatorSpec::Synthetic {
        world: WorldParams {
            seed: cli.seed.unwrap_or(0),
            ..WorldParams::default()
        },
    })
}

fn emit(cli: &Cli, json: &str, files: &[(&str, &str)]) -> Result<(), Failure> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for (name, body) in files {
                fs::write(dir.join(name), body)?;
            }
            Ok(())
        }
        None => {
            say(&format!("{json}\n"))?;
            Ok(())
        }
    }
}

fn emit_study(cli: &Cli, report: &StudyReport) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    emit(cli, &json, &[("study.json", &(json.clone() + "\n")), ("study.csv", &report.to_csv())])
}

fn cmd_run(cli: &Cli, test_curve: Option<bool>) -> Result<(), Failure> {
    let path = need_config(cli, "run")?;
    let mut cfg = RunConfig::from_json(&read_text(&path)?).map_err(from_config_error)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eppo-out"));
    let backend = Backend::resolve(&cfg.evaluator).map_err(from_config_error)?;
    let evaluator = backend.evaluator();
    let test_curve = test_curve.unwrap_or_else(|| evaluator.is_cheap());
    let (result, art) = experiment::execute_run(&cfg, evaluator, test_curve).map_err(from_run_kind)?;
    art.write_to(&out)?;
    fs::write(out.join("recommendation.txt"), format!("{}\n", result.recommendation))?;
    eprintln!(
        "{}: {} steps, recommendation {} at train EM {:.4}; artifacts in {}",
        cfg.algorithm,
        cfg.budget,
        result.recommendation,
        result.recommendation_score.value(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(cli: &Cli) -> Result<(), Failure> {
    let path = need_config(cli, "bench")?;
    let mut suite: Suite = serde_json::from_str(&read_text(&path)?).map_err(config)?;
    if let Some(seed) = cli.seed {
        suite.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eppo-bench"));
    let report = experiment::bench(&suite).map_err(from_experiment)?;
    report.write_to(&out)?;
    let mut text = report.to_csv();
    for f in &report.budget_flags {
        text.push_str(&format!("{} s={} budget {} vs {}: {}\n", f.algorithm, f.shots, f.to, f.from, f.flag));
    }
    say(&text)?;
    Ok(())
}

fn cmd_bounds(cli: &Cli, a: &BoundsArgs) -> Result<(), Failure> {
    if let Some(path) = &cli.config {
        let mut sc: McScenario = serde_json::from_str(&read_text(path)?).map_err(config)?;
        if let Some(seed) = cli.seed {
            sc.seed = seed;
        }
        let report = mc_validate(&sc).map_err(|e| Failure::Other(e.into()))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        return emit(cli, &json, &[("mc.json", &(json.clone() + "\n"))]);
    }
    let report = BoundReport::compute(a.kappa, a.budget, a.t, a.eps, a.delta).map_err(config)?;
    match a.format {
        Format::Json => say(&(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?,
        Format::Table => say(&report.to_table())?,
    }
    Ok(())
}

fn study_rng(cli: &Cli, label: &[u8]) -> eppo::rng::Stream {
    derive_stream(cli.seed.unwrap_or(0), label)
}

fn from_analysis(e: analysis::AnalysisError) -> Failure {
    match e {
        analysis::AnalysisError::Eval(_) => eval(e),
        other => config(other),
    }
}

fn cmd_analyze(cli: &Cli, study: &Study) -> Result<(), Failure> {
    match study {
        Study::Permute { input, n_perm } => {
            let pre = read_preprompt(&input.preprompt)?;
            let backend = Backend::resolve(&evaluator_spec(cli, input.evaluator.as_deref())?)
                .map_err(from_config_error)?;
            let r = analysis::permutation_study(
                &pre,
                backend.evaluator(),
                input.split.into(),
                *n_perm,
                &mut study_rng(cli, b"analyze-permute"),
            )
            .map_err(from_analysis)?;
            emit_study(cli, &r)
        }
        Study::Remove { input, k, samples } => {
            let pre = read_preprompt(&input.preprompt)?;
            let backend = Backend::resolve(&evaluator_spec(cli, input.evaluator.as_deref())?)
                .map_err(from_config_error)?;
            let r = analysis::removal_study(
                &pre,
                backend.evaluator(),
                input.split.into(),
                *k,
                *samples,
                &mut study_rng(cli, b"analyze-remove"),
            )
            .map_err(from_analysis)?;
            emit_study(cli, &r)
        }
        Study::Fuse {
            a,
            b,
            strategy,
            evaluator,
            split,
        } => {
            let (pa, pb) = (read_preprompt(a)?, read_preprompt(b)?);
            let backend =
                Backend::resolve(&evaluator_spec(cli, evaluator.as_deref())?).map_err(from_config_error)?;
            let ev = backend.evaluator();
            let sa = ev.evaluate(&pa, (*split).into()).map_err(eval)?.score();
            let sb = ev.evaluate(&pb, (*split).into()).map_err(eval)?.score();
            let fused = analysis::fuse(&pa, &pb, sa, sb, *strategy);
            match &cli.out {
                Some(path) => fs::write(path, format!("{fused}\n"))?,
                None => say(&format!("{fused}\n"))?,
            }
            Ok(())
        }
        Study::Sc { input, paths, tau } => {
            let pre = read_preprompt(&input.preprompt)?;
            let backend = Backend::resolve(&evaluator_spec(cli, input.evaluator.as_deref())?)
                .map_err(from_config_error)?;
            let world = backend
                .world()
                .ok_or_else(|| config(anyhow!("self-consistency needs a synthetic evaluator")))?;
            let split: Split = input.split.into();
            let rate = analysis::self_consistency(world, &pre, split, *paths, *tau, cli.seed.unwrap_or(0))
                .map_err(from_analysis)?;
            let single = world.evaluate(&pre, split).map_err(eval)?.accuracy();
            let json = serde_json::json!({
                "schema": analysis::STUDY_SCHEMA,
                "study": "sc",
                "split": split,
                "preprompt": pre,
                "paths": paths,
                "tau": tau,
                "single_path_em": single,
                "sc_em": rate,
            });
            let text = serde_json::to_string_pretty(&json).expect("json");
            emit(cli, &text, &[("sc.json", &(text.clone() + "\n"))])
        }
        Study::Transfer { input } => {
            let pre = read_preprompt(&input.preprompt)?;
            let backend = Backend::resolve(&evaluator_spec(cli, input.evaluator.as_deref())?)
                .map_err(from_config_error)?;
            let report = analysis::transfer_eval(&pre, backend.evaluator(), input.split.into())
                .map_err(from_analysis)?;
            let json = serde_json::json!({
                "schema": analysis::STUDY_SCHEMA,
                "study": "transfer",
                "preprompt": pre,
                "correct": report.correct,
                "total": report.total,
                "em": report.accuracy(),
            });
            let text = serde_json::to_string_pretty(&json).expect("json");
            emit(cli, &text, &[("transfer.json", &(text.clone() + "\n"))])
        }
    }
}

fn cmd_subsample(cli: &Cli, a: &SubsampleArgs) -> Result<(), Failure> {
    let file = fs::File::open(&a.items)
        .with_context(|| format!("cannot read {}", a.items.display()))
        .map_err(Failure::Config)?;
    let items = subsampling::read_items(BufReader::new(file)).map_err(config)?;
    let mut rng = study_rng(cli, b"subsample");
    let ids = match a.mode {
        Mode::Layered => subsampling::layered_subsample(&items, a.k, &mut rng),
        Mode::Uncertainty => subsampling::uncertainty_subsample(&items, a.k, a.n, &mut rng),
    }
    .map_err(|e: SubsampleError| config(e))?;
    let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
    match &cli.out {
        Some(path) => fs::write(path, body)?,
        None => say(&body)?,
    }
    Ok(())
}

fn cmd_serve(cli: &Cli, evaluator: Option<&Path>, listen: Option<&str>, per_question: bool) -> Result<(), Failure> {
    let backend = Backend::resolve(&evaluator_spec(cli, evaluator)?).map_err(from_config_error)?;
    let ev = backend.evaluator();
    match listen {
        None => {
            let stdin = io::stdin();
            protocol::serve(ev, stdin.lock(), io::stdout().lock(), per_question)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(config)?;
            eprintln!("listening on {}", listener.local_addr()?);
            std::thread::scope(|s| -> io::Result<()> {
                for stream in listener.incoming() {
                    let stream = stream?;
                    s.spawn(move || {
                        let reader = match stream.try_clone() {
                            Ok(r) => BufReader::new(r),
                            Err(_) => return,
                        };
                        let _ = protocol::serve(ev, reader, stream, per_question);
                    });
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { test_curve } => cmd_run(cli, *test_curve),
        Command::Bench => cmd_bench(cli),
        Command::Bounds(a) => cmd_bounds(cli, a),
        Command::Analyze { study } => cmd_analyze(cli, study),
        Command::Subsample(a) => cmd_subsample(cli, a),
        Command::Serve {
            evaluator,
            listen,
            per_question,
        } => cmd_serve(cli, evaluator.as_deref(), listen.as_deref(), *per_question),
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn say(text: &str) -> io::Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
