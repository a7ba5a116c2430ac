//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use drpo_core::datagen::{augment_swapped, sample_dataset, write_csv};
use drpo_core::estimators::{estimate, DmMode, EstimatorConfig, EstimatorKind};
use drpo_core::experiments::{self, cross_fit_estimate, CompareConfig, Preset, RunReport, SweepConfig};
use drpo_core::nuisance::{fit_reward_bt_mle, resolve_nuisances, FitOptions, GSource, NuisanceSpec};
use drpo_core::oracle;
use drpo_core::rng::derive_seed;
use drpo_core::selftest::{run_selftest, Fault};
use drpo_core::testbeds::{make_test_bed, transitivity_violation, BtRandomOptions, Generator, TestBed};
use drpo_core::train::{dpo_train, drpo_train, ppo_closed_form, ppo_objective, DpoConfig, Optimizer, SampleMode, TraceRecord, TrainConfig, TrainTrace};
use drpo_core::{Document, Environment, LabError, Policy, PreferenceDataset, RewardTable};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::output::Outputs;
use crate::{effective_config, CliError, CliResult, Ctx, Overrides};

const FIT_TAG: u64 = 0x464954;

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), num)
}

/// Reads an `environment` or a `test_bed` document.
fn load_env(path: &Path) -> CliResult<(Environment, Option<TestBed>)> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::usage(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(bed) = TestBed::from_json(&text) {
        return Ok((bed.env.clone(), Some(bed)));
    }
    Ok((Environment::from_json(&text)?, None))
}

/// `wrong:designated` resolves to the test bed's wrong reference, any other
/// id is a policy file.
fn wrong_lookup(bed: Option<&TestBed>) -> impl Fn(&str) -> drpo_core::Result<Policy> + '_ {
    move |id: &str| match (id, bed) {
        ("designated", Some(b)) => Ok(b.wrong_ref.clone()),
        _ => Policy::read_file(Path::new(id)),
    }
}

fn parse_dm_mode(s: &str) -> Result<DmMode, LabError> {
    let bad = || LabError::usage(format!("bad --dm-mode '{s}' (exact|mc:SAMPLES[:SEED])"));
    if s == "exact" {
        return Ok(DmMode::Exact);
    }
    let rest = s.strip_prefix("mc:").ok_or_else(bad)?;
    let (samples, seed) = match rest.split_once(':') {
        Some((a, b)) => (a, b.parse().map_err(|_| bad())?),
        None => (rest, 0),
    };
    Ok(DmMode::MonteCarlo { samples: samples.parse().map_err(|_| bad())?, seed })
}

fn parse_sample_mode(s: &str) -> Result<SampleMode, LabError> {
    match s {
        "exact" => Ok(SampleMode::Exact),
        "mc" | "monte_carlo" => Ok(SampleMode::MonteCarlo),
        other => Err(LabError::usage(format!("bad --sample-mode '{other}' (exact|mc)"))),
    }
}

fn ten() -> usize {
    10
}

#[derive(Debug, Args)]
pub struct GenEnvArgs {
    /// Config file (raw or manifest).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// canonical|bt_random|intransitive|adversarial
    #[arg(long)]
    pub generator: Option<Generator>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub responses: Option<usize>,
    #[arg(long)]
    pub reward_bound: Option<f64>,
    #[arg(long)]
    pub ref_logit_sd: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GenEnvConfig {
    generator: Generator,
    seed: u64,
    options: BtRandomOptions,
}

impl Default for GenEnvConfig {
    fn default() -> Self {
        Self { generator: Generator::Canonical, seed: 0, options: BtRandomOptions::default() }
    }
}

pub fn gen_env(ctx: &Ctx, a: GenEnvArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("generator", a.generator);
    o.set("options.prompts", a.prompts);
    o.set("options.responses", a.responses);
    o.set("options.reward_bound", a.reward_bound);
    o.set("options.ref_logit_sd", a.ref_logit_sd);
    let base = serde_json::to_value(GenEnvConfig::default())?;
    let (cfg, value): (GenEnvConfig, Value) = effective_config("gen-env", a.config.as_deref(), Some(base), o, Some("seed"), ctx)?;
    let bed = make_test_bed(cfg.generator, cfg.seed, &cfg.options)?;
    let mut out = Outputs::new(ctx, "gen-env", value, cfg.seed)?;
    out.write("env.json", bed.env.to_json()?.as_bytes())?;
    out.write("test_bed.json", bed.to_json()?.as_bytes())?;
    out.write("target_policy.json", bed.target.to_json()?.as_bytes())?;
    out.write("wrong_ref.json", bed.wrong_ref.to_json()?.as_bytes())?;
    out.finish()?;

    let env = &bed.env;
    let shape = env.shape();
    let violation = transitivity_violation(env);
    println!("name={}", bed.name);
    println!("prompts={}", shape.prompts());
    println!("max_responses={}", shape.0.iter().max().copied().unwrap_or(0));
    println!("ref_total_preference={}", num(oracle::total_preference_exact(env, env.ref_policy())?));
    println!("target_total_preference={}", num(oracle::total_preference_exact(env, &bed.target)?));
    println!("coverage={}", num(env.coverage(&bed.target)?));
    println!("bt_representable={}", violation.is_none());
    match violation {
        Some((x, [p, q, r])) => println!("transitivity_violation=prompt {x}: {p}>{q}>{r}>{p}"),
        None => println!("transitivity_violation=NA"),
    }
    println!("bt_floor={}", opt_num(bed.bt_floor));
    println!("both_wrong_bias={}", num(bed.both_wrong_bias));
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment or test-bed JSON.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Number of comparisons.
    #[arg(long)]
    pub n: Option<usize>,
    /// Also append the swapped copy of every comparison.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateConfig {
    env: PathBuf,
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    augment: bool,
}

fn default_n() -> usize {
    1000
}

pub fn simulate(ctx: &Ctx, a: SimulateArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("env", a.env);
    o.set("n", a.n);
    o.flag("augment", a.augment);
    let (cfg, value): (SimulateConfig, Value) = effective_config("simulate", a.config.as_deref(), None, o, Some("seed"), ctx)?;
    let (env, _) = load_env(&cfg.env)?;
    let mut data = sample_dataset(&env, cfg.n, cfg.seed)?;
    if cfg.augment {
        data = augment_swapped(&data)?;
    }
    let mut csv = Vec::new();
    write_csv(&data, &mut csv)?;
    let mut out = Outputs::new(ctx, "simulate", value, cfg.seed)?;
    out.write("data.json", data.to_json()?.as_bytes())?;
    out.write("data.csv", &csv)?;
    out.finish()?;
    let wins = data.tuples().iter().filter(|t| t.z == 1).count();
    println!("tuples={}", data.len());
    println!("augmented={}", data.is_augmented());
    println!("first_preferred_rate={}", num(wins as f64 / data.len() as f64));
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Target policy JSON.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Preference dataset JSON.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// dm|is|dr
    #[arg(long)]
    pub estimator: Option<EstimatorKind>,
    /// true|bt_mle|gpm|uniform:SEED|const:C
    #[arg(long)]
    pub g: Option<String>,
    /// true|fitted|uniform|wrong:PATH (wrong:designated with a test bed)
    #[arg(long = "ref")]
    pub reference: Option<String>,
    #[arg(long)]
    pub clip_max: Option<f64>,
    /// exact|mc:SAMPLES[:SEED]
    #[arg(long)]
    pub dm_mode: Option<String>,
    /// Dataset for fitting nuisances; default is a fresh draw of
    /// fit_multiplier·n comparisons with a derived seed.
    #[arg(long)]
    pub fit_data: Option<PathBuf>,
    /// Fit on one half of the data and evaluate on the other, both ways.
    #[arg(long)]
    pub cross_fit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvaluateConfig {
    env: PathBuf,
    policy: PathBuf,
    data: PathBuf,
    #[serde(default = "EstimatorConfig::dr")]
    estimator: EstimatorConfig,
    #[serde(default = "NuisanceSpec::truth")]
    nuisance: NuisanceSpec,
    #[serde(default)]
    fit_data: Option<PathBuf>,
    #[serde(default = "ten")]
    fit_multiplier: usize,
    #[serde(default)]
    cross_fit: bool,
    #[serde(default)]
    fit: FitOptions,
    #[serde(default)]
    seed: u64,
}

/// Data for nuisance fitting: an explicit file or a fresh simulated draw.
fn fit_dataset(env: &Environment, path: Option<&Path>, n: usize, seed: u64) -> CliResult<PreferenceDataset> {
    match path {
        Some(p) => Ok(PreferenceDataset::read_file(p)?),
        None => Ok(sample_dataset(env, n, derive_seed(seed, &[FIT_TAG]))?),
    }
}

pub fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("env", a.env);
    o.set("policy", a.policy);
    o.set("data", a.data);
    o.set("estimator.kind", a.estimator);
    o.set("estimator.clip_max", a.clip_max);
    o.set("estimator.dm_mode", a.dm_mode.as_deref().map(parse_dm_mode).transpose()?);
    o.set("nuisance.g_source", a.g.as_deref().map(NuisanceSpec::parse_g).transpose()?);
    o.set("nuisance.ref_source", a.reference.as_deref().map(NuisanceSpec::parse_ref).transpose()?);
    o.set("fit_data", a.fit_data);
    o.flag("cross_fit", a.cross_fit);
    let base = serde_json::json!({ "estimator": EstimatorConfig::dr(), "nuisance": NuisanceSpec::truth() });
    let (cfg, value): (EvaluateConfig, Value) = effective_config("evaluate", a.config.as_deref(), Some(base), o, Some("seed"), ctx)?;

    let (env, bed) = load_env(&cfg.env)?;
    let policy = Policy::read_file(&cfg.policy)?;
    let data = PreferenceDataset::read_file(&cfg.data)?;
    let lookup = wrong_lookup(bed.as_ref());
    let report = if cfg.cross_fit && cfg.nuisance.needs_fit_data() {
        cross_fit_estimate(&env, &data, &policy, &cfg.nuisance, &cfg.fit, &lookup, &cfg.estimator)?
    } else {
        let fit = if cfg.nuisance.needs_fit_data() {
            let n = data.originals().count() * cfg.fit_multiplier;
            Some(fit_dataset(&env, cfg.fit_data.as_deref(), n, cfg.seed)?)
        } else {
            None
        };
        let nu = resolve_nuisances(&env, &cfg.nuisance, fit.as_ref(), &cfg.fit, &lookup)?;
        estimate(&data, &policy, &nu.ref_hat, &nu.g_hat, &cfg.estimator)?.with_provenance(nu.provenance)
    };
    let line = report.csv_line();
    let mut out = Outputs::new(ctx, "evaluate", value, cfg.seed)?;
    out.write("estimate.json", report.to_json()?.as_bytes())?;
    out.write("estimate.csv", format!("estimator,value,std_error,n\n{line}\n").as_bytes())?;
    out.finish()?;
    println!("{line}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Drpo,
    Dpo,
    Ppo,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<TrainMethod>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Preference model for DRPO, reward model for PPO (true|bt_mle).
    #[arg(long)]
    pub g: Option<String>,
    #[arg(long = "ref")]
    pub reference: Option<String>,
    #[arg(long)]
    pub fit_data: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub clip_lo: Option<f64>,
    #[arg(long)]
    pub clip_hi: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// gd|moment
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
    /// exact|mc
    #[arg(long)]
    pub sample_mode: Option<String>,
    /// Oracle-score the trace every k steps (0: final step only).
    #[arg(long)]
    pub monitor_every: Option<usize>,
    /// Trace CSV path (default OUT_DIR/trace.csv).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Trained policy path (default OUT_DIR/policy.json).
    #[arg(long)]
    pub policy_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainCmdConfig {
    method: TrainMethod,
    env: PathBuf,
    data: PathBuf,
    #[serde(default = "NuisanceSpec::truth")]
    nuisance: NuisanceSpec,
    #[serde(default)]
    fit_data: Option<PathBuf>,
    #[serde(default = "ten")]
    fit_multiplier: usize,
    #[serde(default)]
    fit: FitOptions,
    #[serde(default)]
    drpo: TrainConfig,
    #[serde(default)]
    dpo: DpoConfig,
}

/// Reward model for PPO from the `g` source.
fn ppo_reward(env: &Environment, cfg: &TrainCmdConfig, data: &PreferenceDataset) -> CliResult<RewardTable> {
    match cfg.nuisance.g_source {
        GSource::True => env
            .bt_reward()
            .cloned()
            .ok_or_else(|| LabError::usage("ppo with --g true needs a Bradley-Terry environment").into()),
        GSource::BtMle => {
            let n = data.originals().count() * cfg.fit_multiplier;
            let fit = fit_dataset(env, cfg.fit_data.as_deref(), n, cfg.drpo.seed)?;
            Ok(fit_reward_bt_mle(&env.shape(), &fit, &cfg.fit)?.model)
        }
        _ => Err(LabError::usage("ppo needs a reward model: --g true or --g bt_mle").into()),
    }
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("method", a.method);
    o.set("env", a.env);
    o.set("data", a.data);
    o.set("nuisance.g_source", a.g.as_deref().map(NuisanceSpec::parse_g).transpose()?);
    o.set("nuisance.ref_source", a.reference.as_deref().map(NuisanceSpec::parse_ref).transpose()?);
    o.set("fit_data", a.fit_data);
    for key in ["drpo.beta", "dpo.beta"] {
        o.set(key, a.beta);
    }
    for key in ["drpo.lr", "dpo.lr"] {
        o.set(key, a.lr);
    }
    for key in ["drpo.optimizer", "dpo.optimizer"] {
        o.set(key, a.optimizer);
    }
    for key in ["drpo.monitor_every", "dpo.monitor_every"] {
        o.set(key, a.monitor_every);
    }
    o.set("drpo.steps", a.steps);
    o.set("dpo.steps", a.steps);
    o.set("drpo.clip_lo", a.clip_lo);
    o.set("drpo.clip_hi", a.clip_hi);
    o.set("drpo.mc_samples", a.mc_samples);
    o.set("drpo.batch_size", a.batch_size);
    o.set("drpo.epochs", a.epochs);
    o.set("drpo.sample_mode", a.sample_mode.as_deref().map(parse_sample_mode).transpose()?);
    let base = serde_json::json!({ "nuisance": NuisanceSpec::truth(), "drpo": TrainConfig::default(), "dpo": DpoConfig::default() });
    let (cfg, value): (TrainCmdConfig, Value) = effective_config("train", a.config.as_deref(), Some(base), o, Some("drpo.seed"), ctx)?;

    let (env, bed) = load_env(&cfg.env)?;
    let data = PreferenceDataset::read_file(&cfg.data)?;
    let lookup = wrong_lookup(bed.as_ref());
    let (policy, trace, beta) = match cfg.method {
        TrainMethod::Ppo => {
            let spec = NuisanceSpec { g_source: GSource::True, ..cfg.nuisance.clone() };
            let fit = if spec.needs_fit_data() {
                Some(fit_dataset(&env, cfg.fit_data.as_deref(), data.originals().count() * cfg.fit_multiplier, cfg.drpo.seed)?)
            } else {
                None
            };
            let ref_hat = resolve_nuisances(&env, &spec, fit.as_ref(), &cfg.fit, &lookup)?.ref_hat;
            let reward = ppo_reward(&env, &cfg, &data)?;
            let beta = cfg.drpo.beta;
            let policy = ppo_closed_form(&env.shape(), &reward, &ref_hat, beta)?;
            let objective: f64 = env
                .prompt_weights()
                .iter()
                .enumerate()
                .map(|(x, w)| w * ppo_objective(&policy, &reward, &ref_hat, beta, x))
                .sum();
            let record = TraceRecord {
                step: 0,
                loss: -objective,
                grad_norm: 0.0,
                oracle_pref: Some(oracle::total_preference_exact(&env, &policy)?),
                oracle_kl: Some(oracle::kl_exact(&env, &policy, env.ref_policy())?),
            };
            (policy, TrainTrace { records: vec![record], augmented_input: false }, beta)
        }
        method => {
            let fit = if cfg.nuisance.needs_fit_data() {
                Some(fit_dataset(&env, cfg.fit_data.as_deref(), data.originals().count() * cfg.fit_multiplier, cfg.drpo.seed)?)
            } else {
                None
            };
            let nu = resolve_nuisances(&env, &cfg.nuisance, fit.as_ref(), &cfg.fit, &lookup)?;
            let outcome = if method == TrainMethod::Drpo {
                drpo_train(&data, &nu.ref_hat, &nu.g_hat, &cfg.drpo, &nu.ref_hat, Some(&env))?
            } else {
                dpo_train(&data, &nu.ref_hat, &cfg.dpo, &nu.ref_hat, Some(&env))?
            };
            let beta = if method == TrainMethod::Drpo { cfg.drpo.beta } else { cfg.dpo.beta };
            (outcome.policy, outcome.trace, beta)
        }
    };
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    let mut out = Outputs::new(ctx, "train", value, cfg.drpo.seed)?;
    out.write_to(a.policy_out.as_deref(), "policy.json", policy.to_json()?.as_bytes())?;
    out.write_to(a.trace_out.as_deref(), "trace.csv", &csv)?;
    out.finish()?;
    println!("method={}", serde_json::to_value(cfg.method)?.as_str().unwrap_or_default());
    println!("beta={}", num(beta));
    println!("steps={}", trace.records.len());
    println!("total_preference={}", num(oracle::total_preference_exact(&env, &policy)?));
    println!("kl_to_ref={}", num(oracle::kl_exact(&env, &policy, env.ref_policy())?));
    println!("regret={}", num(oracle::regret_exact(&env, &policy)?));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config JSON (raw or manifest).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: double-robustness, efficiency, consistency-e1,
    /// consistency-e3, robustness, non-bt.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the replication count.
    #[arg(long)]
    pub replications: Option<usize>,
}

fn print_rows(report: &RunReport) {
    println!("variant,n,mean,bias,mse,seb,mse_over_seb");
    for r in &report.rows {
        println!("{},{},{:.6},{:.6},{:.4e},{:.4e},{:.4}", r.variant, r.n, r.mean, r.bias, r.mse, r.seb, r.mse_over_seb);
    }
}

fn print_methods(report: &RunReport) {
    println!("cell,method,regret,regret_ci");
    for m in &report.methods {
        println!("{},{},{:.6},{:.6}", m.cell, m.method, m.regret, m.regret_ci);
    }
}

pub fn experiment(ctx: &Ctx, sub: &'static str, a: ExperimentArgs) -> CliResult<()> {
    let base = match a.preset.as_deref() {
        None => None,
        Some(name) => Some(match (sub, experiments::preset(name)?) {
            ("sweep", Preset::Sweep(c)) | ("efficiency", Preset::Efficiency(c)) => serde_json::to_value(c)?,
            ("compare", Preset::Compare(c)) => serde_json::to_value(c)?,
            _ => return Err(LabError::usage(format!("preset '{name}' is not a {sub} preset")).into()),
        }),
    };
    if a.config.is_none() && base.is_none() {
        return Err(LabError::usage(format!("{sub} needs --config or --preset")).into());
    }
    let mut o = Overrides::default();
    o.set("replications", a.replications);
    let mut out;
    let report = if sub == "compare" {
        let (cfg, value): (CompareConfig, Value) = effective_config(sub, a.config.as_deref(), base, o, Some("base_seed"), ctx)?;
        out = Outputs::new(ctx, sub, value, cfg.base_seed)?;
        let report = experiments::optimization_comparison(&cfg)?;
        let mut csv = Vec::new();
        report.write_comparison_csv(&mut csv)?;
        out.write("comparison.csv", &csv)?;
        print_methods(&report);
        report
    } else {
        let (cfg, value): (SweepConfig, Value) = effective_config(sub, a.config.as_deref(), base, o, Some("base_seed"), ctx)?;
        out = Outputs::new(ctx, sub, value, cfg.base_seed)?;
        let report = if sub == "sweep" { experiments::mse_sweep(&cfg)? } else { experiments::efficiency_study(&cfg)? };
        let mut csv = Vec::new();
        report.write_results_csv(&mut csv)?;
        out.write("results.csv", &csv)?;
        print_rows(&report);
        report
    };
    out.write("report.json", report.to_json()?.as_bytes())?;
    out.finish()
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment or test-bed JSON.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Policy to score (default: the test bed's target, else the reference).
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Sample size for the efficiency bound.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OracleCmdConfig {
    env: PathBuf,
    #[serde(default)]
    policy: Option<PathBuf>,
    #[serde(default = "default_n")]
    n: usize,
}

pub fn oracle(ctx: &Ctx, a: OracleArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("env", a.env);
    o.set("policy", a.policy);
    o.set("n", a.n);
    let (cfg, value): (OracleCmdConfig, Value) = effective_config("oracle", a.config.as_deref(), None, o, None, ctx)?;
    let (env, bed) = load_env(&cfg.env)?;
    oracle::check_enumeration_budget(&env.shape())?;
    let policy = match (&cfg.policy, bed) {
        (Some(p), _) => Policy::read_file(p)?,
        (None, Some(b)) => b.target,
        (None, None) => env.ref_policy().clone(),
    };
    let report = oracle::oracle_report(&env, &policy, cfg.n)?;
    let mut out = Outputs::new(ctx, "oracle", value, 0)?;
    out.write("oracle.json", report.to_json()?.as_bytes())?;
    out.finish()?;
    print!("{}", report.key_values());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Inject a known defect (flip-sign-augmentation).
    #[arg(long)]
    pub fault: Option<String>,
    /// JUnit XML path (default OUT_DIR/selftest.xml).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn selftest(ctx: &Ctx, a: SelftestArgs) -> CliResult<()> {
    let fault: Option<Fault> = a.fault.as_deref().map(str::parse).transpose()?;
    let value = serde_json::json!({ "fault": a.fault });
    let report = run_selftest(fault)?;
    let mut out = Outputs::new(ctx, "selftest", value, 0)?;
    out.write_to(a.report.as_deref(), "selftest.xml", report.to_junit_xml().as_bytes())?;
    out.finish()?;
    for r in &report.results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("invariants={} failed={}", report.results.len(), report.failures().count());
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|r| r.name).collect();
        Err(CliError::Failed(format!("invariants failed: {}", names.join(", "))))
    }
}
