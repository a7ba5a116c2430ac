//! `drpo-lab`: generate environments, simulate preference data, evaluate and
//! train policies, and run replicated experiments, with a manifest next to
//! every output so any run can be replayed byte for byte.
//!
//! Every subcommand builds one effective JSON config: a `--config` file (a
//! raw config or an earlier manifest), then explicit flags, then the seed
//! override (`--seed`, else `DRPO_LAB_SEED`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drpo_core::LabError;
use serde_json::Value;

mod commands;
mod output;

/// Environment variable that overrides config seeds when `--seed` is absent.
pub const SEED_ENV: &str = "DRPO_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "drpo-lab", version, about = "Doubly robust preference evaluation and optimization lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Overrides the seed of the subcommand's config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving outputs and manifest.json.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// error|warn|info|debug|trace
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic environment and its test bed.
    GenEnv(commands::GenEnvArgs),
    /// Sample a preference dataset from an environment.
    Simulate(commands::SimulateArgs),
    /// Estimate a policy's total preference from logged data.
    Evaluate(commands::EvaluateArgs),
    /// Train a policy with DRPO, DPO or closed-form PPO.
    Train(commands::TrainArgs),
    /// Four-variant nuisance misspecification MSE sweep.
    Sweep(commands::ExperimentArgs),
    /// MSE relative to the efficiency bound.
    Efficiency(commands::ExperimentArgs),
    /// Replicated policy-optimization comparison scored by the oracle.
    Compare(commands::ExperimentArgs),
    /// Exact population quantities of a policy.
    Oracle(commands::OracleArgs),
    /// Run the built-in invariant suite.
    Selftest(commands::SelftestArgs),
}

/// Failures, split by exit class.
#[derive(Debug)]
pub enum CliError {
    /// A check or criterion did not hold (exit 1).
    Failed(String),
    /// Everything raised by the library: usage and config errors exit 2,
    /// resource refusals exit 3.
    Lab(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lab(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Lab(LabError::Resource(_)) => 3,
            CliError::Lab(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "failed: {m}"),
            CliError::Lab(e) => write!(f, "{e}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Seed override resolved from the flag and the environment.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeedOverride {
    pub seed: Option<u64>,
    pub from_env: bool,
}

impl SeedOverride {
    fn resolve(flag: Option<u64>) -> CliResult<Self> {
        if flag.is_some() {
            return Ok(Self { seed: flag, from_env: false });
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v.trim().parse().map_err(|_| LabError::usage(format!("{SEED_ENV} must be an unsigned integer, got '{v}'")))?;
                Ok(Self { seed: Some(seed), from_env: true })
            }
            Err(_) => Ok(Self::default()),
        }
    }
}

/// Context shared by all subcommands.
pub struct Ctx {
    pub out_dir: PathBuf,
    pub seed: SeedOverride,
}

/// Reads a config file, unwrapping a manifest written by `subcommand`.
fn read_config_value(path: &Path, subcommand: &str) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    if value.get("kind").and_then(Value::as_str) == Some("manifest") {
        let sub = value.get("subcommand").and_then(Value::as_str).unwrap_or_default();
        if sub != subcommand {
            return Err(LabError::usage(format!("manifest was written by '{sub}', not '{subcommand}'")).into());
        }
        return value.get("config").cloned().ok_or_else(|| LabError::usage("manifest has no config block").into());
    }
    Ok(value)
}

/// Sets `dotted.key` in `root`, creating intermediate objects.
fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let map = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            map.insert(part.to_string(), v);
            return;
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
}

/// Flag overrides collected as (dotted key, JSON value).
#[derive(Default)]
pub(crate) struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    pub(crate) fn set<T: serde::Serialize>(&mut self, key: &'static str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key, serde_json::to_value(v).expect("flag values serialize")));
        }
    }

    pub(crate) fn flag(&mut self, key: &'static str, on: bool) {
        if on {
            self.0.push((key, Value::Bool(true)));
        }
    }
}

/// Builds the effective config `T` and its canonical JSON.
pub(crate) fn effective_config<T: serde::Serialize + serde::de::DeserializeOwned>(
    subcommand: &str,
    file: Option<&Path>,
    base: Option<Value>,
    overrides: Overrides,
    seed_key: Option<&'static str>,
    ctx: &Ctx,
) -> CliResult<(T, Value)> {
    let mut value = match (file, base) {
        (Some(p), _) => read_config_value(p, subcommand)?,
        (None, Some(b)) => b,
        (None, None) => Value::Object(Default::default()),
    };
    for (k, v) in overrides.0 {
        set_path(&mut value, k, v);
    }
    if let (Some(key), Some(seed)) = (seed_key, ctx.seed.seed) {
        set_path(&mut value, key, Value::from(seed));
    }
    let cfg: T = serde_json::from_value(value).map_err(|e| LabError::usage(format!("{subcommand} config: {e}")))?;
    let canonical = serde_json::to_value(&cfg)?;
    Ok((cfg, canonical))
}

fn init_logging(level: log::LevelFilter) {
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn init_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(LabError::usage("--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LabError::usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_logging(cli.global.log_level);
    init_threads(cli.global.threads)?;
    let ctx = Ctx { out_dir: cli.global.out_dir, seed: SeedOverride::resolve(cli.global.seed)? };
    match cli.command {
        Command::GenEnv(a) => commands::gen_env(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Sweep(a) => commands::experiment(&ctx, "sweep", a),
        Command::Efficiency(a) => commands::experiment(&ctx, "efficiency", a),
        Command::Compare(a) => commands::experiment(&ctx, "compare", a),
        Command::Oracle(a) => commands::oracle(&ctx, a),
        Command::Selftest(a) => commands::selftest(&ctx, a),
    }
}

/// Parses `args`, runs, and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drpo-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
