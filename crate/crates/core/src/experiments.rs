//! Replicated experiment drivers: the four-variant MSE sweep, the efficiency
//! study and the policy-optimization comparison, all scored against exact
//! oracle values.
//!
//! Every replication derives its own seeds from the base seed and its
//! indices, replications run on the worker pool, and results are reduced in
//! index order, so reports are bit-identical for any thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::sample_dataset;
use crate::error::{LabError, Result};
use crate::estimators::{estimate, DmMode, EstimateReport, EstimatorConfig};
use crate::json::Document;
use crate::model::{Environment, Policy, PreferenceDataset, PreferenceModel, RewardTable};
use crate::nuisance::{fit_gpm_table, fit_reference_policy, fit_reward_bt_mle, resolve_nuisances, FitOptions, GSource, NuisanceSpec, RefSource};
use crate::oracle;
use crate::par;
use crate::rng::{derive_seed, StreamRng};
use crate::testbeds::{bt_projection, make_test_bed, BtRandomOptions, Generator, TestBed};
use crate::train::{dpo_train, drpo_train, ppo_closed_form, DpoConfig, TrainConfig};

pub use crate::testbeds::make_test_environments;

const FIT_TAG: u64 = 0x464954;
const DM_TAG: u64 = 0x444d;
const DATA_TAG: u64 = 0x44415441;
const NOISE_TAG: u64 = 0x4e4f4953;
const TRAIN_TAG: u64 = 0x5452;

/// z-value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Where an experiment's environment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum EnvSource {
    Builtin {
        generator: Generator,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<BtRandomOptions>,
    },
    /// A `test_bed` document, or an `environment` document (then `target`
    /// must be given; the designated wrong reference is uniform).
    File {
        path: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
}

impl EnvSource {
    pub fn builtin(generator: Generator, seed: u64) -> Self {
        EnvSource::Builtin { generator, seed, options: None }
    }

    pub fn load(&self) -> Result<TestBed> {
        match self {
            EnvSource::Builtin { generator, seed, options } => {
                make_test_bed(*generator, *seed, &options.unwrap_or_default())
            }
            EnvSource::File { path, target } => {
                let text = std::fs::read_to_string(path).map_err(|e| LabError::usage(format!("cannot read {path}: {e}")))?;
                let mut bed = match TestBed::from_json(&text) {
                    Ok(bed) => bed,
                    Err(_) => {
                        let env = Environment::from_json(&text)?;
                        let t = target
                            .as_deref()
                            .ok_or_else(|| LabError::usage("an environment file needs an explicit target policy"))?;
                        let target = Policy::read_file(Path::new(t))?;
                        let wrong = Policy::uniform(&env.shape());
                        let g = crate::nuisance::make_misspecified_g(&env.shape(), 0)?;
                        let bias = crate::testbeds::psi_bias(&env, &target, &wrong, &g)?;
                        TestBed {
                            name: path.clone(),
                            env,
                            target,
                            wrong_ref: wrong,
                            wrong_g_seed: 0,
                            bt_floor: None,
                            both_wrong_bias: bias,
                        }
                    }
                };
                if let Some(t) = target {
                    bed.target = Policy::read_file(Path::new(t))?;
                }
                bed.env.shape().ensure_same(&bed.target.shape(), "target policy")?;
                Ok(bed)
            }
        }
    }
}

/// Resolves `wrong:ID` references: `designated` is the test bed's wrong
/// reference, anything else a policy file.
pub fn wrong_policy_lookup(bed: &TestBed) -> impl Fn(&str) -> Result<Policy> + '_ {
    move |id: &str| {
        if id == "designated" {
            Ok(bed.wrong_ref.clone())
        } else {
            Policy::read_file(Path::new(id))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub spec: NuisanceSpec,
}

/// The four combinations of correct / misspecified ĝ and π̂_ref.
pub fn four_way_variants(bed: &TestBed) -> Vec<Variant> {
    let wrong_g = GSource::UniformRandom { seed: bed.wrong_g_seed };
    let wrong_ref = RefSource::WrongPolicy { id: "designated".into() };
    let v = |name: &str, g: GSource, r: RefSource| Variant { name: name.into(), spec: NuisanceSpec { g_source: g, ref_source: r } };
    vec![
        v("both_correct", GSource::True, RefSource::True),
        v("g_wrong", wrong_g.clone(), RefSource::True),
        v("ref_wrong", GSource::True, wrong_ref.clone()),
        v("both_wrong", wrong_g, wrong_ref),
    ]
}

/// Truth, a fitted preference model with the true reference, and both wrong.
pub fn efficiency_variants(bed: &TestBed) -> Vec<Variant> {
    let fitted = if bed.env.bt_reward().is_some() { GSource::BtMle } else { GSource::GpmTable };
    let mut v = vec![
        Variant { name: "both_correct".into(), spec: NuisanceSpec::truth() },
        Variant { name: "fitted_g".into(), spec: NuisanceSpec { g_source: fitted, ref_source: RefSource::True } },
    ];
    v.push(four_way_variants(bed).pop().expect("four variants"));
    v
}

fn default_sizes() -> Vec<usize> {
    vec![100, 200, 400, 800, 1500]
}

fn default_replications() -> usize {
    500
}

fn default_fit_multiplier() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub env: EnvSource,
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Defaults to the four-way grid (sweep) or the efficiency grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
    #[serde(default = "EstimatorConfig::dr")]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
    /// Fitting datasets hold `fit_multiplier · n` fresh tuples.
    #[serde(default = "default_fit_multiplier")]
    pub fit_multiplier: usize,
    /// Fit on one half of the data and evaluate on the other, both ways.
    #[serde(default)]
    pub cross_fit: bool,
}

impl SweepConfig {
    pub fn new(env: EnvSource) -> Self {
        Self {
            env,
            sample_sizes: default_sizes(),
            replications: default_replications(),
            variants: None,
            estimator: EstimatorConfig::dr(),
            base_seed: 0,
            fit: FitOptions::default(),
            fit_multiplier: default_fit_multiplier(),
            cross_fit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(LabError::invalid("replications must be at least 2"));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes[0] == 0 || self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::invalid("sample_sizes must be positive and strictly increasing"));
        }
        if self.fit_multiplier == 0 {
            return Err(LabError::invalid("fit_multiplier must be at least 1"));
        }
        self.estimator.validate()
    }
}

/// One (variant, n) cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub variant: String,
    pub n: usize,
    pub replications: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Mean squared deviation from `mean` (divisor R), so mse = bias² + variance.
    pub variance: f64,
    pub mse: f64,
    pub seb: f64,
    pub mse_over_seb: f64,
    pub ci_half_width: f64,
}

/// Aggregated regret of one method in one nuisance cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub cell: String,
    pub regret: f64,
    pub regret_ci: f64,
    /// Mean exact win rate against each opponent (`reference` is π_ref).
    pub win_rates: BTreeMap<String, f64>,
    pub regrets: Vec<f64>,
}

/// Paired regret difference `regret(worse) − regret(better)` in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedGap {
    pub cell: String,
    pub better: String,
    pub worse: String,
    pub mean_gap: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunReport {
    pub experiment: String,
    pub env_name: String,
    /// How confidence half-widths are formed.
    pub interval_method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MethodSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gaps: Vec<PairedGap>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, f64>,
}

impl Document for RunReport {
    const KIND: &'static str = "run_report";
}

impl RunReport {
    pub fn row(&self, variant: &str, n: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant && r.n == n)
    }

    pub fn method(&self, cell: &str, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.cell == cell && m.method == method)
    }

    pub fn gap(&self, cell: &str, better: &str, worse: &str) -> Option<&PairedGap> {
        self.gaps.iter().find(|g| g.cell == cell && g.better == better && g.worse == worse)
    }

    /// `results.csv` rows.
    pub fn write_results_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "experiment", "variant", "n", "replications", "mean", "bias", "variance", "mse", "seb", "mse_over_seb", "ci_half_width",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.experiment.clone(),
                r.variant.clone(),
                r.n.to_string(),
                r.replications.to_string(),
                num(r.mean),
                num(r.bias),
                num(r.variance),
                num(r.mse),
                num(r.seb),
                num(r.mse_over_seb),
                num(r.ci_half_width),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Comparison rows `method,cell,regret,regret_ci,opponent,win_rate`.
    pub fn write_comparison_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "cell", "regret", "regret_ci", "opponent", "win_rate"])?;
        for m in &self.methods {
            for (opp, rate) in &m.win_rates {
                w.write_record([m.method.clone(), m.cell.clone(), num(m.regret), num(m.regret_ci), opp.clone(), num(*rate)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Half-width 1.96·sd/√R with the unbiased sample variance.
fn half_width(v: &[f64]) -> f64 {
    let m = mean(v);
    let r = v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    Z95 * (var / r).sqrt()
}

fn summarize(experiment: &str, variant: &str, n: usize, truth: f64, seb: f64, est: &[f64]) -> SweepRow {
    let r = est.len() as f64;
    let m = mean(est);
    let variance = est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / r;
    let mse = est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / r;
    SweepRow {
        experiment: experiment.into(),
        variant: variant.into(),
        n,
        replications: est.len(),
        truth,
        mean: m,
        bias: m - truth,
        variance,
        mse,
        seb,
        mse_over_seb: mse / seb,
        ci_half_width: Z95 * (variance / r).sqrt(),
    }
}

/// One replication's estimate for a variant.
fn replicate_estimate(bed: &TestBed, variant: &Variant, n: usize, seed: u64, cfg: &SweepConfig) -> Result<f64> {
    let env = &bed.env;
    let data = sample_dataset(env, n, seed)?;
    let mut est_cfg = cfg.estimator;
    if let DmMode::MonteCarlo { samples, .. } = est_cfg.dm_mode {
        est_cfg.dm_mode = DmMode::MonteCarlo { samples, seed: derive_seed(seed, &[DM_TAG]) };
    }
    let lookup = wrong_policy_lookup(bed);
    let run = |eval: &PreferenceDataset, fit: Option<&PreferenceDataset>| -> Result<f64> {
        let nu = resolve_nuisances(env, &variant.spec, fit, &cfg.fit, &lookup)?;
        Ok(estimate(eval, &bed.target, &nu.ref_hat, &nu.g_hat, &est_cfg)?.value)
    };
    if !variant.spec.needs_fit_data() {
        return run(&data, None);
    }
    if cfg.cross_fit {
        return Ok(cross_fit_estimate(env, &data, &bed.target, &variant.spec, &cfg.fit, &lookup, &est_cfg)?.value);
    }
    let fit = sample_dataset(env, cfg.fit_multiplier * n, derive_seed(seed, &[FIT_TAG]))?;
    run(&data, Some(&fit))
}

/// Evaluates `policy` with nuisances fitted on one half of the original
/// comparisons and applied to the other, in both directions. Per-tuple
/// values are concatenated, even-indexed half first.
pub fn cross_fit_estimate(
    env: &Environment,
    data: &PreferenceDataset,
    policy: &Policy,
    spec: &NuisanceSpec,
    fit: &FitOptions,
    wrong: &dyn Fn(&str) -> Result<Policy>,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let (a, b) = data.split_halves();
    if a.is_empty() || b.is_empty() {
        return Err(LabError::usage("cross-fitting needs at least two comparisons"));
    }
    let nu_b = resolve_nuisances(env, spec, Some(&b), fit, wrong)?;
    let on_a = estimate(&a, policy, &nu_b.ref_hat, &nu_b.g_hat, cfg)?;
    let nu_a = resolve_nuisances(env, spec, Some(&a), fit, wrong)?;
    let on_b = estimate(&b, policy, &nu_a.ref_hat, &nu_a.g_hat, cfg)?;
    let mut values = on_a.per_tuple.unwrap_or_default();
    values.extend(on_b.per_tuple.unwrap_or_default());
    let mut provenance = nu_b.provenance;
    provenance.cross_fit = true;
    Ok(EstimateReport::from_values(values, *cfg).with_provenance(provenance))
}

fn run_sweep(experiment: &str, cfg: &SweepConfig, bed: &TestBed, variants: &[Variant]) -> Result<RunReport> {
    cfg.validate()?;
    oracle::check_enumeration_budget(&bed.env.shape())?;
    let truth = oracle::total_preference_exact(&bed.env, &bed.target)?;
    let psi_var = oracle::psi_variance_exact(&bed.env, &bed.target)?;
    let mut rows = Vec::new();
    for (vi, variant) in variants.iter().enumerate() {
        for (ni, &n) in cfg.sample_sizes.iter().enumerate() {
            let est = par::try_map_indexed(cfg.replications, |rep| {
                let seed = derive_seed(cfg.base_seed, &[vi as u64, ni as u64, rep as u64]);
                replicate_estimate(bed, variant, n, seed, cfg)
            })?;
            rows.push(summarize(experiment, &variant.name, n, truth, psi_var / n as f64, &est));
        }
    }
    let mut notes = BTreeMap::new();
    notes.insert("truth".into(), truth);
    notes.insert("psi_variance".into(), psi_var);
    notes.insert("both_wrong_bias".into(), bed.both_wrong_bias);
    Ok(RunReport {
        experiment: experiment.into(),
        env_name: bed.name.clone(),
        interval_method: "normal_approximation".into(),
        rows,
        notes,
        ..RunReport::default()
    })
}

/// DR estimates of the target's total preference for each nuisance variant
/// and sample size, aggregated against the exact value.
pub fn mse_sweep(cfg: &SweepConfig) -> Result<RunReport> {
    let bed = cfg.env.load()?;
    let variants = cfg.variants.clone().unwrap_or_else(|| four_way_variants(&bed));
    run_sweep("mse_sweep", cfg, &bed, &variants)
}

/// Same machinery as [`mse_sweep`], reported as MSE relative to the
/// efficiency bound. Requires a variant with both nuisances true.
pub fn efficiency_study(cfg: &SweepConfig) -> Result<RunReport> {
    let bed = cfg.env.load()?;
    let variants = cfg.variants.clone().unwrap_or_else(|| efficiency_variants(&bed));
    if !variants.iter().any(|v| v.spec == NuisanceSpec::truth()) {
        return Err(LabError::usage("efficiency study needs a variant with both nuisances true"));
    }
    run_sweep("efficiency", cfg, &bed, &variants)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DrpoBt,
    DrpoGpm,
    Dpo,
    Ppo,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::DrpoBt => "drpo_bt",
            Method::DrpoGpm => "drpo_gpm",
            Method::Dpo => "dpo",
            Method::Ppo => "ppo",
        }
    }
}

/// Reward model used by `drpo_bt` (as a Bradley-Terry ĝ) and `ppo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RewardSource {
    True,
    BtMle,
    /// True reward plus independent N(0, sd²) noise per entry, redrawn per
    /// replication.
    Perturbed { sd: f64 },
    /// Bradley-Terry projection of the true preference (uniform pair weights).
    BtProjection,
}

/// Preference model used by `drpo_gpm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TableSource {
    True,
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub ref_source: RefSource,
    pub reward: RewardSource,
    #[serde(default = "default_table")]
    pub table: TableSource,
    /// Methods run in this cell; defaults to the comparison's method list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
}

fn default_table() -> TableSource {
    TableSource::Fitted
}

fn default_methods() -> Vec<Method> {
    vec![Method::DrpoBt, Method::DrpoGpm, Method::Dpo, Method::Ppo]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub env: EnvSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub cells: Vec<Cell>,
    pub n: usize,
    pub replications: usize,
    /// KL weight shared by every method.
    pub beta: f64,
    #[serde(default)]
    pub drpo: TrainConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default = "one")]
    pub fit_multiplier: usize,
}

fn one() -> usize {
    1
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 || self.n == 0 || self.fit_multiplier == 0 || self.cells.is_empty() || self.methods.is_empty() {
            return Err(LabError::invalid("comparison needs n >= 1, replications >= 2, fit_multiplier >= 1, cells and methods"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        self.drpo.validate()
    }
}

struct RepContext<'a> {
    bed: &'a TestBed,
    data: PreferenceDataset,
    fit: PreferenceDataset,
    noise_seed: u64,
    train_seed: u64,
}

fn cell_reward(ctx: &RepContext<'_>, src: &RewardSource, cfg: &CompareConfig) -> Result<RewardTable> {
    let env = &ctx.bed.env;
    let truth = || env.bt_reward().cloned().ok_or_else(|| LabError::usage("true reward requested on a non-BT environment"));
    match src {
        RewardSource::True => truth(),
        RewardSource::BtMle => Ok(fit_reward_bt_mle(&env.shape(), &ctx.fit, &cfg.fit)?.model),
        RewardSource::Perturbed { sd } => {
            let r = truth()?;
            let mut rng = StreamRng::new(ctx.noise_seed, 0);
            let noisy = r.values().iter().map(|row| row.iter().map(|v| v + sd * rng.normal()).collect()).collect();
            RewardTable::tight(noisy)
        }
        RewardSource::BtProjection => bt_projection(env),
    }
}

fn cell_ref(ctx: &RepContext<'_>, src: &RefSource, cfg: &CompareConfig) -> Result<Policy> {
    let env = &ctx.bed.env;
    match src {
        RefSource::True => Ok(env.ref_policy().clone()),
        RefSource::Fitted => Ok(fit_reference_policy(&env.shape(), &ctx.fit, cfg.fit.ref_smoothing)?.model),
        RefSource::Uniform => Ok(Policy::uniform(&env.shape())),
        RefSource::WrongPolicy { id } => wrong_policy_lookup(ctx.bed)(id),
    }
}

/// Trains every method of every cell on one replication's data. Returns
/// policies per (cell, method).
fn compare_replication(ctx: &RepContext<'_>, cfg: &CompareConfig) -> Result<Vec<Vec<(Method, Policy)>>> {
    let env = &ctx.bed.env;
    let shape = env.shape();
    let mut out = Vec::with_capacity(cfg.cells.len());
    for cell in &cfg.cells {
        let ref_hat = cell_ref(ctx, &cell.ref_source, cfg)?;
        let methods = cell.methods.clone().unwrap_or_else(|| cfg.methods.clone());
        let needs_reward = methods.iter().any(|m| matches!(m, Method::DrpoBt | Method::Ppo));
        let reward = if needs_reward { Some(cell_reward(ctx, &cell.reward, cfg)?) } else { None };
        let drpo_cfg = TrainConfig { beta: cfg.beta, seed: ctx.train_seed, ..cfg.drpo };
        let mut policies = Vec::with_capacity(methods.len());
        for m in methods {
            let policy = match m {
                Method::DrpoBt => {
                    let g = PreferenceModel::Bt(reward.clone().expect("reward resolved"));
                    drpo_train(&ctx.data, &ref_hat, &g, &drpo_cfg, &ref_hat, None)?.policy
                }
                Method::DrpoGpm => {
                    let g = match cell.table {
                        TableSource::True => env.preference().clone(),
                        TableSource::Fitted => fit_gpm_table(&shape, &ctx.fit, cfg.fit.gpm_smoothing)?.model,
                    };
                    drpo_train(&ctx.data, &ref_hat, &g, &drpo_cfg, &ref_hat, None)?.policy
                }
                Method::Dpo => {
                    let dcfg = DpoConfig { beta: cfg.beta, ..cfg.dpo };
                    dpo_train(&ctx.data, &ref_hat, &dcfg, &ref_hat, None)?.policy
                }
                Method::Ppo => ppo_closed_form(&shape, reward.as_ref().expect("reward resolved"), &ref_hat, cfg.beta)?,
            };
            policies.push((m, policy));
        }
        out.push(policies);
    }
    Ok(out)
}

/// Per replication: draw data and an independent fitting set, build each
/// cell's nuisances, train each method from π̂_ref, and score with the
/// oracle (regret and pairwise exact win rates).
pub fn optimization_comparison(cfg: &CompareConfig) -> Result<RunReport> {
    cfg.validate()?;
    let bed = cfg.env.load()?;
    let env = &bed.env;
    oracle::check_enumeration_budget(&env.shape())?;
    let best = oracle::optimal_policy_enumerate(env)?.value;

    // scores[rep][cell][method] = (regret, win rates vs reference and the other methods)
    type Scored = Vec<Vec<(Method, f64, Vec<(String, f64)>)>>;
    let scored: Vec<Scored> = par::try_map_indexed(cfg.replications, |rep| -> Result<Scored> {
        let rep = rep as u64;
        let ctx = RepContext {
            bed: &bed,
            data: sample_dataset(env, cfg.n, derive_seed(cfg.base_seed, &[DATA_TAG, rep]))?,
            fit: sample_dataset(env, cfg.fit_multiplier * cfg.n, derive_seed(cfg.base_seed, &[FIT_TAG, rep]))?,
            noise_seed: derive_seed(cfg.base_seed, &[NOISE_TAG, rep]),
            train_seed: derive_seed(cfg.base_seed, &[TRAIN_TAG, rep]),
        };
        let cells = compare_replication(&ctx, cfg)?;
        cells
            .iter()
            .map(|policies| {
                policies
                    .iter()
                    .map(|(m, p)| {
                        let p_star = oracle::total_preference_exact(env, p)?;
                        let mut wins = vec![("reference".to_string(), p_star)];
                        for (o, q) in policies {
                            if o != m {
                                wins.push((o.name().to_string(), oracle::win_rate_exact(env, p, q)?));
                            }
                        }
                        Ok((*m, best - p_star, wins))
                    })
                    .collect()
            })
            .collect()
    })?;

    let mut methods = Vec::new();
    let mut gaps = Vec::new();
    for (ci, cell) in cfg.cells.iter().enumerate() {
        let cell_methods: Vec<Method> = scored[0][ci].iter().map(|(m, _, _)| *m).collect();
        let mut regrets_by_method = Vec::new();
        for (mi, m) in cell_methods.iter().enumerate() {
            let regrets: Vec<f64> = scored.iter().map(|s| s[ci][mi].1).collect();
            let mut win_rates = BTreeMap::new();
            for (wi, (opp, _)) in scored[0][ci][mi].2.iter().enumerate() {
                let rates: Vec<f64> = scored.iter().map(|s| s[ci][mi].2[wi].1).collect();
                win_rates.insert(opp.clone(), mean(&rates));
            }
            methods.push(MethodSummary {
                method: m.name().into(),
                cell: cell.name.clone(),
                regret: mean(&regrets),
                regret_ci: half_width(&regrets),
                win_rates,
                regrets: regrets.clone(),
            });
            regrets_by_method.push((*m, regrets));
        }
        for (a, ra) in &regrets_by_method {
            for (b, rb) in &regrets_by_method {
                if a == b {
                    continue;
                }
                let diff: Vec<f64> = rb.iter().zip(ra).map(|(x, y)| x - y).collect();
                gaps.push(PairedGap {
                    cell: cell.name.clone(),
                    better: a.name().into(),
                    worse: b.name().into(),
                    mean_gap: mean(&diff),
                    half_width: half_width(&diff),
                });
            }
        }
    }
    let mut notes = BTreeMap::new();
    notes.insert("optimal_total_preference".into(), best);
    if let Some(f) = bed.bt_floor {
        notes.insert("bt_floor".into(), f);
    }
    Ok(RunReport {
        experiment: "compare".into(),
        env_name: bed.name.clone(),
        interval_method: "normal_approximation".into(),
        methods,
        gaps,
        notes,
        ..RunReport::default()
    })
}

/// A named, ready-to-run experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Sweep(SweepConfig),
    Efficiency(SweepConfig),
    Compare(CompareConfig),
}

pub const PRESET_NAMES: [&str; 6] = ["double-robustness", "efficiency", "consistency-e1", "consistency-e3", "robustness", "non-bt"];

fn consistency_preset(generator: Generator) -> CompareConfig {
    CompareConfig {
        env: EnvSource::builtin(generator, 0),
        methods: vec![Method::DrpoGpm],
        cells: vec![Cell {
            name: "true_g_wrong_ref".into(),
            ref_source: RefSource::WrongPolicy { id: "designated".into() },
            reward: RewardSource::True,
            table: TableSource::True,
            methods: None,
        }],
        n: 2000,
        replications: 50,
        beta: 0.01,
        drpo: TrainConfig::default(),
        dpo: DpoConfig::default(),
        base_seed: 0,
        fit: FitOptions::default(),
        fit_multiplier: 1,
    }
}

/// Looks up a preset by name (see [`PRESET_NAMES`]).
pub fn preset(name: &str) -> Result<Preset> {
    Ok(match name {
        // Four nuisance variants on the adversarial bed across the default sizes.
        "double-robustness" => Preset::Sweep(SweepConfig::new(EnvSource::builtin(Generator::Adversarial, 0))),
        "efficiency" => Preset::Efficiency(SweepConfig {
            sample_sizes: vec![500],
            replications: 2000,
            ..SweepConfig::new(EnvSource::builtin(Generator::BtRandom, 0))
        }),
        "consistency-e1" => Preset::Compare(consistency_preset(Generator::Canonical)),
        "consistency-e3" => Preset::Compare(consistency_preset(Generator::Intransitive)),
        // Small β so that the KL pull toward a wrong reference does not mask
        // the difference between the methods.
        "robustness" => Preset::Compare(CompareConfig {
            env: EnvSource::builtin(Generator::BtRandom, 0),
            methods: vec![Method::DrpoBt, Method::Dpo, Method::Ppo],
            cells: vec![
                Cell {
                    name: "ref_uniform".into(),
                    ref_source: RefSource::Uniform,
                    reward: RewardSource::True,
                    table: TableSource::True,
                    methods: Some(vec![Method::DrpoBt, Method::Dpo]),
                },
                Cell {
                    name: "reward_perturbed".into(),
                    ref_source: RefSource::True,
                    reward: RewardSource::Perturbed { sd: 1.0 },
                    table: TableSource::True,
                    methods: Some(vec![Method::DrpoBt, Method::Ppo]),
                },
            ],
            n: 2000,
            replications: 100,
            beta: 0.001,
            drpo: TrainConfig { epochs: 32, ..TrainConfig::default() },
            dpo: DpoConfig { lr: 0.2, steps: 3000, ..DpoConfig::default() },
            base_seed: 0,
            fit: FitOptions::default(),
            fit_multiplier: 1,
        }),
        "non-bt" => Preset::Compare(CompareConfig {
            env: EnvSource::builtin(Generator::Intransitive, 0),
            methods: vec![Method::DrpoGpm, Method::Ppo],
            cells: vec![Cell {
                name: "gpm_fitted".into(),
                ref_source: RefSource::Fitted,
                reward: RewardSource::BtProjection,
                table: TableSource::Fitted,
                methods: None,
            }],
            n: 5000,
            replications: 10,
            beta: 0.01,
            drpo: TrainConfig::default(),
            dpo: DpoConfig::default(),
            base_seed: 0,
            fit: FitOptions::default(),
            fit_multiplier: 1,
        }),
        other => {
            return Err(LabError::usage(format!("unknown preset '{other}' (known: {})", PRESET_NAMES.join(", "))));
        }
    })
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Effective configuration after flag and environment overrides.
    pub config: serde_json::Value,
    /// SHA-256 of the canonical (compact, key-sorted) JSON of `config`.
    pub config_hash: String,
    pub seed: u64,
    /// Whether DRPO_LAB_SEED overrode the configured seed.
    pub seed_from_env: bool,
    /// Output file name → SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl Document for Manifest {
    const KIND: &'static str = "manifest";
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON of `value` (serde_json maps are key-sorted).
pub fn config_hash(value: &serde_json::Value) -> String {
    sha256_hex(serde_json::to_string(value).expect("json value serializes").as_bytes())
}

impl Manifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: u64, seed_from_env: bool) -> Self {
        Self {
            tool: "drpo-lab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config_hash: config_hash(&config),
            config,
            seed,
            seed_from_env,
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_output(&mut self, name: &str, bytes: &[u8]) {
        self.outputs.insert(name.into(), sha256_hex(bytes));
    }
}

/// Reads a configuration of type `T` from either a raw config document or a
/// manifest (whose `config` block is used).
pub fn load_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("kind").and_then(|k| k.as_str()) == Some(Manifest::KIND) {
        let m = Manifest::from_json(text)?;
        return Ok(serde_json::from_value(m.config)?);
    }
    Ok(serde_json::from_value(value)?)
}
