//! `ahop`: batch runner for retrieval grids, weight training and verification suites.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahop::checks::{self, CheckRow, EnergyCheckConfig, OracleConfig};
use ahop::data::{save_json, write_csv, write_results_csv, write_runs_csv, write_training_log_csv};
use ahop::evaluation::{run_experiment, train_on_setting, RunOptions};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    parse, preset_text, read_config, resolve_dataset, GridConfig, TrainRunConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Invariant(_) => "invariant_violation",
            CliError::Io(_) => "io",
        }
    }
}

impl From<ahop::Error> for CliError {
    fn from(e: ahop::Error) -> Self {
        use ahop::Error as E;
        let msg = e.to_string();
        if e.is_invariant_violation() {
            return CliError::Invariant(msg);
        }
        if e.is_io() {
            return CliError::Io(msg);
        }
        match innermost(&e) {
            E::Format { .. } | E::LabelFile | E::Csv(_) => CliError::Io(msg),
            _ => CliError::Config(msg),
        }
    }
}

fn innermost(e: &ahop::Error) -> &ahop::Error {
    match e {
        ahop::Error::Cell { source, .. } => innermost(source),
        other => other,
    }
}

#[derive(Parser)]
#[command(name = "ahop", version, about = "Adaptive Hopfield retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare models over variant settings (retrieval tables and axis sweeps).
    Bench(RunArgs),
    /// Fit adaptive weights on one setting and save them.
    Train(RunArgs),
    /// Run an ablation grid.
    Ablate(RunArgs),
    /// Check energy descent: monotone, bounded below, summable steps, rewrite identity.
    EnergyCheck(RunArgs),
    /// Check footprints, gradients and closed-form optima against independent oracles.
    OracleCheck(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Bench(_) => "bench",
            Command::Train(_) => "train",
            Command::Ablate(_) => "ablate",
            Command::EnergyCheck(_) => "energy-check",
            Command::OracleCheck(_) => "oracle-check",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Bench(a) | Command::Train(a) | Command::Ablate(a) | Command::EnergyCheck(a) | Command::OracleCheck(a) => a,
        }
    }
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checked-in configuration by name (see `presets/`).
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,
    /// Master seed; overrides the configuration (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    /// Where artifacts go; overrides the configuration (default `out/<command>`).
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Validate the configuration and print the resolved run without computing.
    #[arg(long)]
    dry_run: bool,
    /// Smaller run: fewer runs, trials and epochs, or the quick verification suite.
    #[arg(long)]
    quick: bool,
    /// Record wall-clock time per cell (makes CSVs differ between reruns).
    #[arg(long)]
    timing: bool,
    /// Root for relative dataset paths.
    #[arg(long, env = "AHOP_DATA_DIR", value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_source: String,
    config_sha256: String,
    seed: u64,
    quick: bool,
    timing: bool,
    versions: Versions,
    outputs: Vec<&'a str>,
}

#[derive(Serialize)]
struct Versions {
    ahop: &'static str,
    ahop_cli: &'static str,
    parallel: bool,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    status: &'static str,
    command: &'a str,
    kind: &'static str,
    exit_code: u8,
    message: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolved configuration plus where it came from.
struct Loaded<T> {
    config: T,
    source: String,
}

fn load<T: serde::de::DeserializeOwned>(args: &RunArgs) -> Result<Option<Loaded<T>>, CliError> {
    if let Some(path) = &args.config {
        let (config, _) = read_config(path)?;
        return Ok(Some(Loaded {
            config,
            source: path.display().to_string(),
        }));
    }
    if let Some(name) = &args.preset {
        return Ok(Some(Loaded {
            config: parse(preset_text(name)?, &format!("preset {name}"))?,
            source: format!("preset {name}"),
        }));
    }
    Ok(None)
}

struct Output<'a> {
    command: &'a str,
    dir: PathBuf,
    files: Vec<&'a str>,
}

impl<'a> Output<'a> {
    fn new(command: &'a str, dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            command,
            dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &'a str) -> PathBuf {
        self.files.push(name);
        self.dir.join(name)
    }

    fn finish<C: Serialize>(mut self, args: &RunArgs, source: String, config: &C, seed: u64) -> Result<(), CliError> {
        save_json(&self.path("config.json"), config)?;
        let manifest = Manifest {
            command: self.command,
            config_source: source,
            config_sha256: sha256_hex(&serde_json::to_vec(config).expect("config serializes")),
            seed,
            quick: args.quick,
            timing: args.timing,
            versions: Versions {
                ahop: ahop::VERSION,
                ahop_cli: env!("CARGO_PKG_VERSION"),
                parallel: ahop::exec::parallel_enabled(),
            },
            outputs: self.files.clone(),
        };
        save_json(&self.dir.join("manifest.json"), &manifest)?;
        println!("wrote {} files to {}", self.files.len() + 1, self.dir.display());
        Ok(())
    }
}

fn output_dir(args: &RunArgs, configured: &Option<PathBuf>, command: &str) -> PathBuf {
    args.output_dir
        .clone()
        .or_else(|| configured.clone())
        .unwrap_or_else(|| Path::new("out").join(command))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run_grid(command: &str, args: &RunArgs) -> Result<(), CliError> {
    let Loaded { mut config, source } = load::<GridConfig>(args)?
        .ok_or_else(|| CliError::Config(format!("{command} needs --config or --preset")))?;
    config.dataset = resolve_dataset(config.dataset, args.data_dir.as_deref());
    if args.quick {
        config.quick();
    }
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let dir = output_dir(args, &config.output_dir, command);
    config.seed = Some(seed);
    config.output_dir = Some(dir.clone());
    let grid = config.grid();
    grid.validate()?;
    if args.dry_run {
        print_json(&config);
        for cell in grid.cells() {
            println!(
                "cell {}: {} on {} x {} runs",
                cell.index,
                cell.model.name(),
                cell.setting.label,
                grid.eval.runs
            );
        }
        return Ok(());
    }
    let out = run_experiment(
        &grid,
        seed,
        RunOptions {
            record_timing: args.timing,
        },
    )?;
    let mut files = Output::new(command, dir)?;
    write_results_csv(&files.path("results.csv"), &out.results)?;
    save_json(&files.path("results.json"), &out.results)?;
    write_runs_csv(&files.path("runs.csv"), &out.runs)?;
    for r in &out.results {
        println!(
            "{:<24} {:<12} acc {:.4} ± {:.4}  err {:.4} ± {:.4}",
            r.model, r.setting, r.acc_mean, r.acc_std, r.err_mean, r.err_std
        );
    }
    files.finish(args, source, &hashable(&config), seed)
}

/// The configuration without run-level fields, so the hash identifies the experiment itself.
fn hashable(config: &GridConfig) -> GridConfig {
    GridConfig {
        seed: None,
        output_dir: None,
        ..config.clone()
    }
}

fn run_train(args: &RunArgs) -> Result<(), CliError> {
    if args.preset.is_some() {
        return Err(CliError::Config("train takes --config, not --preset".into()));
    }
    let Loaded { mut config, source } =
        load::<TrainRunConfig>(args)?.ok_or_else(|| CliError::Config("train needs --config".into()))?;
    config.dataset = resolve_dataset(config.dataset, args.data_dir.as_deref());
    if args.quick {
        config.train.epochs = config.train.epochs.min(20);
        config.trials = config.trials.min(500);
    }
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let dir = output_dir(args, &config.output_dir, "train");
    config.seed = Some(seed);
    config.output_dir = Some(dir.clone());
    config.dataset.validate()?;
    config.train.validate()?;
    if args.dry_run {
        print_json(&config);
        return Ok(());
    }
    let outcome = train_on_setting(&config.dataset, &config.setting, &config.init, &config.train, config.trials, seed)?;
    let mut files = Output::new("train", dir)?;
    save_json(&files.path("weights.json"), &outcome.weights)?;
    write_training_log_csv(&files.path("training_log.csv"), &outcome.log)?;
    save_json(&files.path("metrics.json"), &outcome.held_out)?;
    println!(
        "held-out accuracy {:.4}, error {:.4}",
        outcome.held_out.accuracy, outcome.held_out.error
    );
    let hashed = TrainRunConfig {
        seed: None,
        output_dir: None,
        ..config
    };
    files.finish(args, source, &hashed, seed)
}

fn run_checks<T: Serialize + serde::de::DeserializeOwned + Clone>(
    command: &str,
    args: &RunArgs,
    defaults: (T, T),
    suite: impl FnOnce(&T, u64) -> ahop::Result<Vec<CheckRow>>,
) -> Result<(), CliError> {
    if args.preset.is_some() {
        return Err(CliError::Config(format!("{command} takes --config or --quick, not --preset")));
    }
    let (full, quick) = defaults;
    let (config, source) = match load::<config::CheckRunConfig<T>>(args)? {
        Some(Loaded { config, source }) => (config, source),
        None => {
            let suite = if args.quick { quick } else { full };
            let source = if args.quick { "built-in quick suite" } else { "built-in full suite" };
            (
                config::CheckRunConfig {
                    suite,
                    seed: None,
                    output_dir: None,
                },
                source.to_string(),
            )
        }
    };
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let dir = output_dir(args, &config.output_dir, command);
    if args.dry_run {
        print_json(&config::CheckRunConfig {
            suite: config.suite.clone(),
            seed: Some(seed),
            output_dir: Some(dir),
        });
        return Ok(());
    }
    let rows = suite(&config.suite, seed)?;
    let mut files = Output::new(command, dir)?;
    write_csv(&files.path("checks.csv"), &rows)?;
    for r in &rows {
        println!(
            "{} {}/{}: {} cases, {} failures, worst {:e} (tolerance {:e})",
            if r.passed() { "ok  " } else { "FAIL" },
            r.suite,
            r.check,
            r.cases,
            r.failures,
            r.worst,
            r.tolerance
        );
    }
    let hashed = config::CheckRunConfig {
        suite: config.suite.clone(),
        seed: None,
        output_dir: None,
    };
    files.finish(args, source, &hashed, seed)?;
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{}", r.suite, r.check))
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!("checks failed: {}", failing.join(", "))))
    }
}

fn init_pool(jobs: Option<usize>) -> Result<(), CliError> {
    match jobs {
        Some(0) => Err(CliError::Config("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

fn execute(command: &Command) -> Result<(), CliError> {
    let args = command.args();
    init_pool(args.jobs)?;
    match command {
        Command::Bench(a) | Command::Ablate(a) => run_grid(command.name(), a),
        Command::Train(a) => run_train(a),
        Command::EnergyCheck(a) => run_checks::<EnergyCheckConfig>(
            command.name(),
            a,
            (EnergyCheckConfig::full(), EnergyCheckConfig::quick()),
            checks::energy_suite,
        ),
        Command::OracleCheck(a) => run_checks::<OracleConfig>(
            command.name(),
            a,
            (OracleConfig::full(), OracleConfig::quick()),
            checks::oracle_suite,
        ),
    }
}

fn report(command: &str, e: &CliError) -> ExitCode {
    let report = ErrorReport {
        status: "error",
        command,
        kind: e.kind(),
        exit_code: e.exit_code(),
        message: e.to_string(),
    };
    eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let command = std::env::args().nth(1).unwrap_or_default();
            return report(&command, &CliError::Config(e.render().to_string().trim_end().to_string()));
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(cli.command.name(), &e),
    }
}
