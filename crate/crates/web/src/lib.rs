//! WebAssembly bindings for a single-page demo. Each exported operation takes
//! plain numbers and returns a JSON string for the page to render:
//!
//! - [`describe_environment`]: exact oracle quantities of a built-in test bed;
//! - [`estimator_race`]: DM, IS and DR error under the four nuisance variants;
//! - [`train_trajectory`]: the oracle preference of DRPO iterates over training.
//!
//! The `*_json` functions hold the logic and run natively, which is how the
//! crate is tested; the exported wrappers only convert errors.

use drpo_core::datagen::sample_dataset;
use drpo_core::estimators::{EstimatorConfig, EstimatorKind};
use drpo_core::experiments::{mse_sweep, EnvSource, SweepConfig};
use drpo_core::oracle;
use drpo_core::testbeds::{make_test_bed, BtRandomOptions, Generator, TestBed};
use drpo_core::train::{drpo_train, TrainConfig};
use drpo_core::LabError;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest sample size or replication count the page may request; keeps a
/// single call well under a second in the browser.
pub const MAX_WORK: usize = 20_000;

#[derive(Debug, thiserror::Error)]
pub enum WebError {
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("{0}")]
    Request(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WebError>;

fn bed(generator: &str, seed: u64) -> Result<TestBed> {
    let g: Generator = generator.parse()?;
    Ok(make_test_bed(g, seed, &BtRandomOptions::default())?)
}

fn bounded(what: &str, v: usize, min: usize) -> Result<usize> {
    if v < min || v > MAX_WORK {
        return Err(WebError::Request(format!("{what} must lie in [{min}, {MAX_WORK}], got {v}")));
    }
    Ok(v)
}

#[derive(Debug, Serialize)]
pub struct EnvironmentSummary {
    pub name: String,
    pub prompts: usize,
    pub responses: Vec<usize>,
    pub bt_representable: bool,
    pub reference_preference: f64,
    pub target_preference: f64,
    pub optimal_preference: f64,
    pub target_kl: f64,
    pub coverage: f64,
    pub both_wrong_bias: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bt_floor: Option<f64>,
}

pub fn describe_environment_json(generator: &str, seed: u64) -> Result<String> {
    let b = bed(generator, seed)?;
    let env = &b.env;
    let shape = env.shape();
    let summary = EnvironmentSummary {
        name: b.name.clone(),
        prompts: shape.prompts(),
        responses: shape.0.clone(),
        bt_representable: env.bt_reward().is_some(),
        reference_preference: oracle::total_preference_exact(env, env.ref_policy())?,
        target_preference: oracle::total_preference_exact(env, &b.target)?,
        optimal_preference: oracle::optimal_policy_enumerate(env)?.value,
        target_kl: oracle::kl_exact(env, &b.target, env.ref_policy())?,
        coverage: env.coverage(&b.target)?,
        both_wrong_bias: b.both_wrong_bias,
        bt_floor: b.bt_floor,
    };
    Ok(serde_json::to_string(&summary)?)
}

#[derive(Debug, Serialize)]
pub struct RaceRow {
    pub estimator: String,
    pub variant: String,
    pub truth: f64,
    pub bias: f64,
    pub mse: f64,
    pub seb: f64,
}

pub fn estimator_race_json(generator: &str, n: usize, replications: usize, seed: u64) -> Result<String> {
    let g: Generator = generator.parse()?;
    bounded("n", n, 10)?;
    bounded("replications", replications, 2)?;
    let mut rows = Vec::new();
    for kind in [EstimatorKind::Dm, EstimatorKind::Is, EstimatorKind::Dr] {
        let cfg = SweepConfig {
            sample_sizes: vec![n],
            replications,
            estimator: EstimatorConfig::new(kind),
            base_seed: seed,
            fit_multiplier: 1,
            ..SweepConfig::new(EnvSource::builtin(g, seed))
        };
        for r in mse_sweep(&cfg)?.rows {
            rows.push(RaceRow { estimator: format!("{kind:?}").to_lowercase(), variant: r.variant, truth: r.truth, bias: r.bias, mse: r.mse, seb: r.seb });
        }
    }
    Ok(serde_json::to_string(&rows)?)
}

#[derive(Debug, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub preference: f64,
    pub kl: f64,
}

pub fn train_trajectory_json(generator: &str, n: usize, beta: f64, epochs: usize, seed: u64) -> Result<String> {
    let b = bed(generator, seed)?;
    bounded("n", n, 10)?;
    bounded("epochs", epochs, 1)?;
    let data = sample_dataset(&b.env, n, seed)?;
    let cfg = TrainConfig { beta, epochs, seed, monitor_every: 1, ..TrainConfig::default() };
    let out = drpo_train(&data, b.env.ref_policy(), b.env.preference(), &cfg, b.env.ref_policy(), Some(&b.env))?;
    let points: Vec<TrajectoryPoint> = out
        .trace
        .records
        .iter()
        .filter_map(|r| Some(TrajectoryPoint { step: r.step, preference: r.oracle_pref?, kl: r.oracle_kl? }))
        .collect();
    Ok(serde_json::to_string(&points)?)
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Generators: `canonical`, `bt-random`, `intransitive`, `adversarial`.
#[wasm_bindgen]
pub fn describe_environment(generator: &str, seed: u32) -> std::result::Result<String, JsError> {
    js(describe_environment_json(generator, seed.into()))
}

#[wasm_bindgen]
pub fn estimator_race(generator: &str, n: u32, replications: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(estimator_race_json(generator, n as usize, replications as usize, seed.into()))
}

#[wasm_bindgen]
pub fn train_trajectory(generator: &str, n: u32, beta: f64, epochs: u32, seed: u32) -> std::result::Result<String, JsError> {
    js(train_trajectory_json(generator, n as usize, beta, epochs as usize, seed.into()))
}
