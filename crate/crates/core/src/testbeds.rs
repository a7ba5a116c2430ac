//! The canonical suite of synthetic environments.
//!
//! * `canonical` (E1): one prompt, two responses, uniform reference,
//!   Bradley-Terry rewards (ln 2, −ln 2) so that g(a, b) = 0.8.
//! * `bt_random` (E2): several prompts with bounded random rewards and a
//!   random non-uniform reference.
//! * `intransitive` (E3): a four-response preference table with a cycle; no
//!   reward table reproduces it, and its Bradley-Terry projection ranks the
//!   wrong response first.
//! * `adversarial` (E4): a Bradley-Terry environment paired with a wrong
//!   reference and a random preference table whose combination biases ψ.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::estimators::{EstimatorConfig, PsiKernel};
use crate::model::{Environment, Policy, PreferenceModel, RewardTable, VocabShape};
use crate::nuisance::{make_misspecified_g, FitOptions};
use crate::oracle;
use crate::rng::{derive_seed, StreamRng};
use crate::train::ppo_closed_form;

/// Minimum |bias| of ψ with both nuisances wrong that the adversarial search
/// accepts.
pub const ADVERSARIAL_MIN_BIAS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Canonical,
    BtRandom,
    Intransitive,
    Adversarial,
}

impl std::str::FromStr for Generator {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "canonical" => Ok(Self::Canonical),
            "bt_random" => Ok(Self::BtRandom),
            "intransitive" => Ok(Self::Intransitive),
            "adversarial" => Ok(Self::Adversarial),
            _ => Err(LabError::usage(format!(
                "unknown generator '{s}' (canonical|bt_random|intransitive|adversarial)"
            ))),
        }
    }
}

/// An environment with the auxiliary policies the experiments use on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestBed {
    pub name: String,
    pub env: Environment,
    /// Policy whose total preference the estimators target.
    pub target: Policy,
    /// Designated misspecified reference policy.
    pub wrong_ref: Policy,
    /// Seed of the designated misspecified preference table.
    pub wrong_g_seed: u64,
    /// Regret of the deterministic argmax of the Bradley-Terry projection
    /// (non-BT environments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bt_floor: Option<f64>,
    /// Enumerated bias of ψ with the wrong reference and the wrong table.
    pub both_wrong_bias: f64,
}

impl crate::json::Document for TestBed {
    const KIND: &'static str = "test_bed";
}

impl TestBed {
    pub fn wrong_g(&self) -> Result<PreferenceModel> {
        make_misspecified_g(&self.env.shape(), self.wrong_g_seed)
    }
}

/// Options for the randomized generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtRandomOptions {
    pub prompts: usize,
    pub responses: usize,
    pub reward_bound: f64,
    /// Standard deviation of the reference logits.
    pub ref_logit_sd: f64,
}

impl Default for BtRandomOptions {
    fn default() -> Self {
        Self { prompts: 5, responses: 8, reward_bound: 2.0, ref_logit_sd: 1.0 }
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn canonical_env() -> Result<Environment> {
    let l2 = 2f64.ln();
    Environment::new(
        vec!["x0".into()],
        vec![1.0],
        vec![vec!["a".into(), "b".into()]],
        Policy::uniform(&VocabShape(vec![2])),
        PreferenceModel::Bt(RewardTable::new(vec![vec![l2, -l2]], 1.0)?),
    )
}

pub fn bt_random_env(seed: u64, opts: &BtRandomOptions) -> Result<Environment> {
    if opts.prompts == 0 || opts.responses == 0 {
        return Err(LabError::usage("bt_random needs at least one prompt and one response"));
    }
    if !(opts.reward_bound > 0.0 && opts.reward_bound.is_finite() && opts.ref_logit_sd >= 0.0) {
        return Err(LabError::usage("bt_random needs a positive reward bound and nonnegative logit sd"));
    }
    let mut rewards = Vec::with_capacity(opts.prompts);
    let mut logits = Vec::with_capacity(opts.prompts);
    for x in 0..opts.prompts {
        let mut rng = StreamRng::new(seed, x as u64);
        rewards.push((0..opts.responses).map(|_| opts.reward_bound * (2.0 * rng.uniform() - 1.0)).collect());
        logits.push((0..opts.responses).map(|_| opts.ref_logit_sd * rng.normal()).collect());
    }
    Environment::new(
        names("x", opts.prompts),
        vec![1.0 / opts.prompts as f64; opts.prompts],
        vec![names("y", opts.responses); opts.prompts],
        Policy::from_logits(logits)?,
        PreferenceModel::Bt(RewardTable::new(rewards, opts.reward_bound)?),
    )
}

/// Rows are g(y, y') for y, y' in 0..4. Cycle 0 ≻ 1 ≻ 2 ≻ 0.
const INTRANSITIVE: [[f64; 4]; 4] = [
    [0.5, 0.8, 0.4, 0.1],
    [0.2, 0.5, 0.9, 0.9],
    [0.6, 0.1, 0.5, 0.2],
    [0.9, 0.1, 0.8, 0.5],
];

pub fn intransitive_env() -> Result<Environment> {
    let table = INTRANSITIVE.iter().map(|r| r.to_vec()).collect();
    Environment::new(
        vec!["x0".into()],
        vec![1.0],
        vec![vec!["rock".into(), "paper".into(), "scissors".into(), "lizard".into()]],
        Policy::from_probs(&[vec![0.5, 0.1, 0.3, 0.1]])?,
        PreferenceModel::table(vec![table])?,
    )
}

/// A strict preference cycle y_a ≻ y_b ≻ y_c ≻ y_a (all g > 1/2) at some
/// prompt. Bradley-Terry implies transitivity, so a cycle certifies that no
/// reward table represents the model.
pub fn transitivity_violation(env: &Environment) -> Option<(usize, [usize; 3])> {
    let g = env.preference();
    for x in 0..env.prompts().len() {
        let k = env.shape().responses(x);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    if a != b && b != c && a != c && g.g(x, a, b) > 0.5 && g.g(x, b, c) > 0.5 && g.g(x, c, a) > 0.5 {
                        return Some((x, [a, b, c]));
                    }
                }
            }
        }
    }
    None
}

/// Bradley-Terry projection of the true preference: maximizes
/// Σ_{y≠y'} g*(x,y,y') log σ(r(y) − r(y')) with every ordered pair weighted
/// equally.
pub fn bt_projection(env: &Environment) -> Result<RewardTable> {
    let shape = env.shape();
    let g = env.preference();
    let wins: Vec<Vec<Vec<f64>>> = (0..shape.prompts())
        .map(|x| {
            let k = shape.responses(x);
            (0..k).map(|a| (0..k).map(|b| if a == b { 0.0 } else { g.g(x, a, b) }).collect()).collect()
        })
        .collect();
    let opts = FitOptions { l2: 1e-10, ..FitOptions::default() };
    crate::nuisance::fit_bt_weighted(&wins, &opts).map(|(r, _)| r)
}

/// Regret of the argmax policy of the Bradley-Terry projection.
pub fn bt_floor(env: &Environment) -> Result<f64> {
    let r = bt_projection(env)?;
    let choices: Vec<usize> = r
        .values()
        .iter()
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|v| *v == best).expect("non-empty row")
        })
        .collect();
    let p = Policy::deterministic(&env.shape(), &choices)?;
    oracle::regret_exact(env, &p)
}

/// Enumerated E[ψ] − p*(target) for the given nuisances.
pub fn psi_bias(env: &Environment, target: &Policy, ref_hat: &Policy, g_hat: &PreferenceModel) -> Result<f64> {
    let k = PsiKernel::new(target, Some(ref_hat), Some(g_hat), &EstimatorConfig::dr())?;
    Ok(oracle::expected_psi(env, &k)?.mean - oracle::total_preference_exact(env, target)?)
}

fn adversarial_env() -> Result<Environment> {
    Environment::new(
        vec!["x0".into()],
        vec![1.0],
        vec![names("y", 4)],
        Policy::from_probs(&[vec![0.55, 0.25, 0.15, 0.05]])?,
        PreferenceModel::Bt(RewardTable::new(vec![vec![1.0, 0.5, 0.0, -0.5]], 1.0)?),
    )
}

fn finish(name: &str, env: Environment, target: Policy, wrong_ref: Policy, wrong_g_seed: u64, bt_floor: Option<f64>) -> Result<TestBed> {
    let wrong_g = make_misspecified_g(&env.shape(), wrong_g_seed)?;
    let both_wrong_bias = psi_bias(&env, &target, &wrong_ref, &wrong_g)?;
    Ok(TestBed { name: name.into(), env, target, wrong_ref, wrong_g_seed, bt_floor, both_wrong_bias })
}

pub fn make_test_bed(generator: Generator, seed: u64, opts: &BtRandomOptions) -> Result<TestBed> {
    let wrong_seed = derive_seed(seed, &[0x5752]);
    match generator {
        Generator::Canonical => {
            let env = canonical_env()?;
            let target = Policy::deterministic(&env.shape(), &[0])?;
            let wrong = Policy::from_probs(&[vec![0.25, 0.75]])?;
            finish("canonical", env, target, wrong, wrong_seed, None)
        }
        Generator::BtRandom => {
            // Test beds carry enumerated quantities, so refuse before allocating.
            oracle::check_enumeration_budget(&VocabShape(vec![opts.responses; opts.prompts]))?;
            let env = bt_random_env(seed, opts)?;
            let r = env.bt_reward().expect("bt env");
            let target = ppo_closed_form(&env.shape(), r, env.ref_policy(), 1.0)?;
            let wrong = Policy::uniform(&env.shape());
            finish("bt_random", env, target, wrong, wrong_seed, None)
        }
        Generator::Intransitive => {
            let env = intransitive_env()?;
            let target = Policy::from_probs(&[vec![0.1, 0.2, 0.3, 0.4]])?;
            let wrong = Policy::uniform(&env.shape());
            let floor = bt_floor(&env)?;
            finish("intransitive", env, target, wrong, wrong_seed, Some(floor))
        }
        Generator::Adversarial => {
            let env = adversarial_env()?;
            let r = env.bt_reward().expect("bt env");
            let target = ppo_closed_form(&env.shape(), r, env.ref_policy(), 0.5)?;
            let wrong = Policy::uniform(&env.shape());
            // first table seed (in derivation order) whose both-wrong bias is large enough
            for attempt in 0..10_000u64 {
                let s = derive_seed(wrong_seed, &[attempt]);
                let g = make_misspecified_g(&env.shape(), s)?;
                if psi_bias(&env, &target, &wrong, &g)?.abs() >= ADVERSARIAL_MIN_BIAS {
                    return finish("adversarial", env, target, wrong, s, None);
                }
            }
            Err(LabError::Invalid("adversarial search exhausted its seed budget".into()))
        }
    }
}

/// E1–E4 in order.
pub fn make_test_environments(seed: u64) -> Result<Vec<TestBed>> {
    [Generator::Canonical, Generator::BtRandom, Generator::Intransitive, Generator::Adversarial]
        .iter()
        .map(|&g| make_test_bed(g, seed, &BtRandomOptions::default()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn canonical_numbers() {
        let b = make_test_bed(Generator::Canonical, 0, &BtRandomOptions::default()).unwrap();
        assert_abs_diff_eq!(b.env.preference().g(0, 0, 1), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(oracle::total_preference_exact(&b.env, &b.target).unwrap(), 0.65, epsilon = 1e-15);
        assert_eq!(oracle::total_preference_exact(&b.env, b.env.ref_policy()).unwrap(), 0.5);
    }

    #[test]
    fn intransitive_env_has_a_cycle_and_a_floor() {
        let b = make_test_bed(Generator::Intransitive, 0, &BtRandomOptions::default()).unwrap();
        let (_, cycle) = transitivity_violation(&b.env).unwrap();
        let g = b.env.preference();
        assert!(g.g(0, cycle[0], cycle[1]) > 0.5 && g.g(0, cycle[1], cycle[2]) > 0.5 && g.g(0, cycle[2], cycle[0]) > 0.5);
        let floor = b.bt_floor.unwrap();
        assert!(floor >= 0.03, "{floor}");
        let best = oracle::optimal_policy_enumerate(&b.env).unwrap();
        assert_eq!(best.choices, vec![3]);
        // BT environments are transitive
        assert!(transitivity_violation(&canonical_env().unwrap()).is_none());
    }

    #[test]
    fn adversarial_biases() {
        let b = make_test_bed(Generator::Adversarial, 0, &BtRandomOptions::default()).unwrap();
        assert!(b.both_wrong_bias.abs() >= ADVERSARIAL_MIN_BIAS);
        let g = b.wrong_g().unwrap();
        let rf = b.env.ref_policy();
        assert!(psi_bias(&b.env, &b.target, rf, &g).unwrap().abs() < 1e-12);
        assert!(psi_bias(&b.env, &b.target, &b.wrong_ref, b.env.preference()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = make_test_environments(5).unwrap();
        assert_eq!(a, make_test_environments(5).unwrap());
        assert_eq!(a.len(), 4);
        assert_eq!(a[1].env.shape(), VocabShape(vec![8; 5]));
    }
}
