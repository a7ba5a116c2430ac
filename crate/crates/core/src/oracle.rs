//! Exact population quantities by enumeration over a finite environment.
//!
//! These are the ground truth every estimator and trainer is scored against.
//! Per-prompt terms are computed independently and reduced in prompt order,
//! so results do not depend on the worker count.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::estimators::{EstimatorConfig, PsiKernel};
use crate::model::{Environment, Policy, PreferenceTuple, RewardTable, VocabShape};
use crate::par;

/// Largest outcome count (Σ_x 2|Y_x|²) an exact enumeration will visit.
pub const MAX_ENUMERATION_TERMS: u128 = 100_000_000;

/// Relative tolerance under which two preference scores count as tied.
pub const TIE_TOL: f64 = 1e-12;

pub fn check_enumeration_budget(shape: &VocabShape) -> Result<()> {
    let terms = shape.outcome_count();
    if terms > MAX_ENUMERATION_TERMS {
        return Err(LabError::Resource(format!(
            "exact enumeration needs {terms} terms (limit {MAX_ENUMERATION_TERMS})"
        )));
    }
    Ok(())
}

fn ensure_on_env(env: &Environment, policy: &Policy, what: &str) -> Result<()> {
    env.shape().ensure_same(&policy.shape(), what)
}

fn weighted_prompt_sum<F>(env: &Environment, per_prompt: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let terms = par::map_indexed(env.prompts().len(), per_prompt);
    terms.iter().zip(env.prompt_weights()).map(|(t, w)| w * t).sum()
}

/// Σ_x f(x) Σ_{y,y'} a(y|x) b(y'|x) g*(x,y,y').
pub fn win_rate_exact(env: &Environment, a: &Policy, b: &Policy) -> Result<f64> {
    ensure_on_env(env, a, "policy a")?;
    ensure_on_env(env, b, "policy b")?;
    check_enumeration_budget(&env.shape())?;
    let g = env.preference();
    Ok(weighted_prompt_sum(env, |x| {
        let (pa, pb) = (a.probs(x), b.probs(x));
        let mut s = 0.0;
        for (y, &p) in pa.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for (yp, &q) in pb.iter().enumerate() {
                inner += q * g.g(x, y, yp);
            }
            s += p * inner;
        }
        s
    }))
}

/// Total preference p*(π) of `policy` over the true reference policy.
pub fn total_preference_exact(env: &Environment, policy: &Policy) -> Result<f64> {
    win_rate_exact(env, policy, env.ref_policy())
}

/// Σ_x f(x) Σ_y π(y|x) r(y,x).
pub fn expected_reward_exact(env: &Environment, policy: &Policy, reward: &RewardTable) -> Result<f64> {
    ensure_on_env(env, policy, "policy")?;
    env.shape().ensure_same(&reward.shape(), "reward table")?;
    Ok(weighted_prompt_sum(env, |x| {
        policy.probs(x).iter().enumerate().map(|(y, p)| p * reward.get(x, y)).sum()
    }))
}

/// Σ_x f(x) KL(π(·|x) ‖ ref(·|x)).
pub fn kl_exact(env: &Environment, policy: &Policy, reference: &Policy) -> Result<f64> {
    ensure_on_env(env, policy, "policy")?;
    ensure_on_env(env, reference, "reference")?;
    reference.ensure_reference("KL reference")?;
    let kl = weighted_prompt_sum(env, |x| {
        policy
            .probs(x)
            .iter()
            .zip(reference.probs(x))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum()
    });
    Ok(kl.max(0.0))
}

/// Per-prompt preference scores s(x, y) = Σ_{y'} opponent(y'|x) g*(x, y, y').
/// Total preference is linear in π with these coefficients.
pub fn preference_scores(env: &Environment, opponent: &Policy) -> Result<Vec<Vec<f64>>> {
    ensure_on_env(env, opponent, "opponent")?;
    let g = env.preference();
    Ok((0..env.prompts().len())
        .map(|x| {
            let q = opponent.probs(x);
            (0..q.len())
                .map(|y| q.iter().enumerate().map(|(yp, qv)| qv * g.g(x, y, yp)).sum())
                .collect()
        })
        .collect())
}

/// First two moments of an integrand over the data-generating distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Enumerates every (x, y1, y2, z) with weight f(x) π_ref(y1|x) π_ref(y2|x)
/// P(z | x, y1, y2) and returns the mean and variance of `integrand`.
pub fn expected_outcome<F>(env: &Environment, integrand: F) -> Result<OutcomeMoments>
where
    F: Fn(&PreferenceTuple) -> Result<f64> + Sync + Send,
{
    check_enumeration_budget(&env.shape())?;
    let g = env.preference();
    let rf = env.ref_policy();
    let per_prompt = par::try_map_indexed(env.prompts().len(), |x| -> Result<(f64, f64)> {
        let probs = rf.probs(x);
        let (mut m1, mut m2) = (0.0, 0.0);
        for (y1, &p1) in probs.iter().enumerate() {
            for (y2, &p2) in probs.iter().enumerate() {
                let p_one = g.g(x, y1, y2);
                for (z, pz) in [(1u8, p_one), (0u8, 1.0 - p_one)] {
                    let w = p1 * p2 * pz;
                    if w == 0.0 {
                        continue;
                    }
                    let v = integrand(&PreferenceTuple { prompt: x, y1, y2, z })?;
                    m1 += w * v;
                    m2 += w * v * v;
                }
            }
        }
        Ok((m1, m2))
    })?;
    let (mut mean, mut second) = (0.0, 0.0);
    for ((m1, m2), w) in per_prompt.iter().zip(env.prompt_weights()) {
        mean += w * m1;
        second += w * m2;
    }
    Ok(OutcomeMoments { mean, variance: (second - mean * mean).max(0.0) })
}

/// Exact moments of ψ under the true data distribution for a given kernel.
pub fn expected_psi(env: &Environment, kernel: &PsiKernel<'_>) -> Result<OutcomeMoments> {
    env.shape().ensure_same(&kernel.shape(), "psi kernel")?;
    expected_outcome(env, |t| kernel.psi(t, 0))
}

/// Semiparametric efficiency bound Var(ψ; π, π_ref, g*) / n.
pub fn seb_exact(env: &Environment, policy: &Policy, n: usize) -> Result<f64> {
    Ok(psi_variance_exact(env, policy)? / n as f64)
}

/// Per-sample variance of ψ at the true nuisances.
pub fn psi_variance_exact(env: &Environment, policy: &Policy) -> Result<f64> {
    if policy.shape() != env.shape() {
        return Err(LabError::shape("policy does not match the environment vocabulary"));
    }
    let kernel = PsiKernel::new(policy, Some(env.ref_policy()), Some(env.preference()), &EstimatorConfig::dr())?;
    Ok(expected_psi(env, &kernel)?.variance)
}

/// Deterministic maximizer of total preference with its tie sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicy {
    pub policy: Policy,
    pub choices: Vec<usize>,
    /// Responses whose score is within tolerance of the best, per prompt.
    pub tie_sets: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
    pub value: f64,
}

/// Per prompt, all mass on argmax_y Σ_{y'} π_ref(y'|x) g*(x,y,y'); ties go to
/// the lowest index and the full tie set is reported.
pub fn optimal_policy_enumerate(env: &Environment) -> Result<OptimalPolicy> {
    check_enumeration_budget(&env.shape())?;
    let scores = preference_scores(env, env.ref_policy())?;
    let mut choices = Vec::with_capacity(scores.len());
    let mut tie_sets = Vec::with_capacity(scores.len());
    for row in &scores {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = TIE_TOL * best.abs().max(1.0);
        let ties: Vec<usize> = (0..row.len()).filter(|&y| row[y] >= best - tol).collect();
        choices.push(ties[0]);
        tie_sets.push(ties);
    }
    let policy = Policy::deterministic(&env.shape(), &choices)?;
    let value = total_preference_exact(env, &policy)?;
    Ok(OptimalPolicy { policy, choices, tie_sets, scores, value })
}

/// Regret p*(π*) − p*(π) against the best deterministic (hence best in-class)
/// policy.
pub fn regret_exact(env: &Environment, policy: &Policy) -> Result<f64> {
    let best = optimal_policy_enumerate(env)?;
    Ok(best.value - total_preference_exact(env, policy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub total_preference: f64,
    /// Present for Bradley-Terry environments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_reward: Option<f64>,
    pub kl_to_ref: f64,
    pub n: usize,
    pub seb: f64,
    pub psi_variance: f64,
    pub realized_coverage: f64,
    pub optimal_total_preference: f64,
    pub regret: f64,
}

impl crate::json::Document for OracleReport {
    const KIND: &'static str = "oracle_report";
}

impl OracleReport {
    /// Fixed-order `key=value` listing.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("total_preference", format!("{:.17e}", self.total_preference));
        line(
            "expected_reward",
            self.expected_reward.map_or_else(|| "NA".to_string(), |v| format!("{v:.17e}")),
        );
        line("kl_to_ref", format!("{:.17e}", self.kl_to_ref));
        line("n", self.n.to_string());
        line("seb", format!("{:.17e}", self.seb));
        line("psi_variance", format!("{:.17e}", self.psi_variance));
        line("realized_coverage", format!("{:.17e}", self.realized_coverage));
        line("optimal_total_preference", format!("{:.17e}", self.optimal_total_preference));
        line("regret", format!("{:.17e}", self.regret));
        out
    }
}

pub fn oracle_report(env: &Environment, policy: &Policy, n: usize) -> Result<OracleReport> {
    if n == 0 {
        return Err(LabError::usage("n must be at least 1"));
    }
    let total_preference = total_preference_exact(env, policy)?;
    let expected_reward = env.bt_reward().map(|r| expected_reward_exact(env, policy, r)).transpose()?;
    let psi_variance = psi_variance_exact(env, policy)?;
    let best = optimal_policy_enumerate(env)?;
    Ok(OracleReport {
        total_preference,
        expected_reward,
        kl_to_ref: kl_exact(env, policy, env.ref_policy())?,
        n,
        seb: psi_variance / n as f64,
        psi_variance,
        realized_coverage: env.coverage(policy)?,
        optimal_total_preference: best.value,
        regret: best.value - total_preference,
    })
}
