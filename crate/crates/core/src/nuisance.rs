//! Plug-in nuisances: the preference model ĝ and the reference policy π̂_ref.
//!
//! Each can be the truth, fitted from data (Bradley-Terry MLE, a smoothed
//! frequency table, smoothed response frequencies) or deliberately wrong.
//! All fitters read only the original comparisons of a swap-augmented
//! dataset, so augmentation never changes a fit.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{log_sigmoid, sigmoid, Environment, Policy, PreferenceDataset, PreferenceModel, RewardTable, VocabShape};
use crate::rng::StreamRng;

/// Source of ĝ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GSource {
    True,
    BtMle,
    GpmTable,
    UniformRandom { seed: u64 },
    Constant { c: f64 },
}

/// Source of π̂_ref.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RefSource {
    True,
    Fitted,
    /// A named wrong policy: `designated` (the environment's designated wrong
    /// reference) or a path to a policy document.
    WrongPolicy { id: String },
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSpec {
    pub g_source: GSource,
    pub ref_source: RefSource,
}

impl NuisanceSpec {
    pub fn truth() -> Self {
        Self { g_source: GSource::True, ref_source: RefSource::True }
    }

    pub fn needs_fit_data(&self) -> bool {
        matches!(self.g_source, GSource::BtMle | GSource::GpmTable) || self.ref_source == RefSource::Fitted
    }

    /// Parses the CLI forms `true|bt_mle|gpm|uniform:SEED|const:C`.
    pub fn parse_g(s: &str) -> Result<GSource> {
        let bad = || LabError::usage(format!("bad --g value '{s}' (true|bt_mle|gpm|uniform:SEED|const:C)"));
        Ok(match s {
            "true" => GSource::True,
            "bt_mle" => GSource::BtMle,
            "gpm" | "gpm_table" => GSource::GpmTable,
            _ => match s.split_once(':') {
                Some(("uniform", v)) => GSource::UniformRandom { seed: v.parse().map_err(|_| bad())? },
                Some(("const", v)) => GSource::Constant { c: v.parse().map_err(|_| bad())? },
                _ => return Err(bad()),
            },
        })
    }

    /// Parses the CLI forms `true|fitted|uniform|wrong:ID`.
    pub fn parse_ref(s: &str) -> Result<RefSource> {
        Ok(match s {
            "true" => RefSource::True,
            "fitted" => RefSource::Fitted,
            "uniform" => RefSource::Uniform,
            _ => match s.split_once(':') {
                Some(("wrong", id)) if !id.is_empty() => RefSource::WrongPolicy { id: id.to_string() },
                _ => return Err(LabError::usage(format!("bad --ref value '{s}' (true|fitted|uniform|wrong:ID)"))),
            },
        })
    }
}

/// Diagnostics attached to a fitted nuisance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub steps: usize,
    pub tuples_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_grad_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_grad_norm: Option<f64>,
}

/// A fitted model together with its `fit_meta` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted<T> {
    pub model: T,
    pub fit_meta: FitMeta,
}

impl crate::json::Document for Fitted<RewardTable> {
    const KIND: &'static str = "fitted_reward";
}

impl crate::json::Document for Fitted<PreferenceModel> {
    const KIND: &'static str = "fitted_preference_model";
}

impl crate::json::Document for Fitted<Policy> {
    const KIND: &'static str = "fitted_policy";
}

/// Record of which nuisances an estimate or training run used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceProvenance {
    pub spec: NuisanceSpec,
    pub cross_fit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_fit: Option<FitMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_fit: Option<FitMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub l2: f64,
    /// Iteration budget of the BT-MLE ascent.
    pub steps: usize,
    /// Step scale applied to each Newton direction.
    pub lr: f64,
    pub gpm_smoothing: f64,
    pub ref_smoothing: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { l2: 1e-4, steps: 200, lr: 1.0, gpm_smoothing: 1.0, ref_smoothing: 1.0 }
    }
}

/// Win counts per ordered pair, folded so that (x,y1,y2,z) and
/// (x,y2,y1,1−z) land in the same cell. `wins[x][a][b]` counts comparisons of
/// a against b won by a.
fn pair_wins(shape: &VocabShape, data: &PreferenceDataset) -> Result<(Vec<Vec<Vec<f64>>>, usize)> {
    data.validate_against(shape)?;
    let mut wins: Vec<Vec<Vec<f64>>> = shape.0.iter().map(|&k| vec![vec![0.0; k]; k]).collect();
    let mut used = 0;
    for t in data.originals() {
        let (w, l) = if t.z == 1 { (t.y1, t.y2) } else { (t.y2, t.y1) };
        wins[t.prompt][w][l] += 1.0;
        used += 1;
    }
    Ok((wins, used))
}

fn bt_objective(wins: &[Vec<f64>], r: &[f64], l2: f64) -> f64 {
    let k = r.len();
    let mut obj = -l2 * r.iter().map(|v| v * v).sum::<f64>();
    for a in 0..k {
        for b in 0..k {
            if a != b && wins[a][b] > 0.0 {
                obj += wins[a][b] * log_sigmoid(r[a] - r[b]);
            }
        }
    }
    obj
}

/// Gradient and negated Hessian of the penalized BT log-likelihood at one prompt.
fn bt_grad_hess(wins: &[Vec<f64>], r: &[f64], l2: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = r.len();
    let mut grad: Vec<f64> = r.iter().map(|v| -2.0 * l2 * v).collect();
    let mut neg_h = vec![vec![0.0; k]; k];
    for (i, row) in neg_h.iter_mut().enumerate() {
        row[i] = 2.0 * l2;
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let (wa, wb) = (wins[a][b], wins[b][a]);
            let total = wa + wb;
            if total == 0.0 {
                continue;
            }
            let s = sigmoid(r[a] - r[b]);
            let g = wa - total * s;
            grad[a] += g;
            grad[b] -= g;
            let c = total * s * (1.0 - s);
            neg_h[a][a] += c;
            neg_h[b][b] += c;
            neg_h[a][b] -= c;
            neg_h[b][a] -= c;
        }
    }
    (grad, neg_h)
}

/// Solves `a x = b` for symmetric positive definite `a` (Cholesky).
fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        y[i] = (b[i] - (0..i).map(|m| l[i][m] * y[m]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        x[i] = (y[i] - ((i + 1)..k).map(|m| l[m][i] * x[m]).sum::<f64>()) / l[i][i];
    }
    x
}

fn norm(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ridge-penalized Bradley-Terry maximum likelihood from zero initialization.
///
/// Each prompt is an independent concave problem; it is ascended along the
/// Newton direction scaled by `lr`, halving the step whenever the objective
/// would not increase, until the gradient norm falls below
/// `1e-9·(1 + initial norm)` or `steps` iterations are spent. Rewards are then
/// centred per prompt.
pub fn fit_reward_bt_mle(shape: &VocabShape, data: &PreferenceDataset, opts: &FitOptions) -> Result<Fitted<RewardTable>> {
    if data.is_empty() {
        return Err(LabError::usage("cannot fit a reward model to an empty dataset"));
    }
    if !(opts.lr > 0.0 && opts.lr <= 1.0) {
        return Err(LabError::invalid(format!("BT-MLE lr must lie in (0, 1], got {}", opts.lr)));
    }
    let (wins, used) = pair_wins(shape, data)?;
    let (model, stats) = fit_bt_weighted(&wins, opts)?;
    Ok(Fitted {
        model,
        fit_meta: FitMeta {
            seed: data.seed(),
            steps: stats.steps,
            tuples_used: used,
            initial_grad_norm: Some(stats.initial_grad_norm),
            final_grad_norm: Some(stats.final_grad_norm),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtFitStats {
    /// Largest iteration count over prompts.
    pub steps: usize,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
}

/// Penalized BT maximum likelihood from (possibly fractional) win weights
/// `wins[x][a][b]`, the weight of comparisons of a against b won by a.
pub fn fit_bt_weighted(wins: &[Vec<Vec<f64>>], opts: &FitOptions) -> Result<(RewardTable, BtFitStats)> {
    if !(opts.l2 > 0.0 && opts.l2.is_finite()) {
        return Err(LabError::invalid(format!("l2 must be positive, got {}", opts.l2)));
    }
    let mut values = Vec::with_capacity(wins.len());
    let (mut init_sq, mut final_sq, mut steps_max) = (0.0, 0.0, 0);
    for w in wins {
        let k = w.len();
        let mut r = vec![0.0; k];
        let (g0, _) = bt_grad_hess(w, &r, opts.l2);
        let g0n = norm(g0.iter().copied());
        init_sq += g0n * g0n;
        let tol = 1e-9 * (1.0 + g0n);
        let mut steps = 0;
        let mut gn = g0n;
        while steps < opts.steps && gn > tol {
            let (g, neg_h) = bt_grad_hess(w, &r, opts.l2);
            let dir = solve_spd(&neg_h, &g);
            let base = bt_objective(w, &r, opts.l2);
            let mut step = opts.lr;
            let mut cand: Vec<f64> = r.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            for _ in 0..40 {
                if bt_objective(w, &cand, opts.l2) >= base {
                    break;
                }
                step *= 0.5;
                cand = r.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            }
            r = cand;
            steps += 1;
            gn = norm(bt_grad_hess(w, &r, opts.l2).0);
        }
        final_sq += gn * gn;
        steps_max = steps_max.max(steps);
        let mean = r.iter().sum::<f64>() / k as f64;
        values.push(r.iter().map(|v| v - mean).collect());
    }
    let stats = BtFitStats { steps: steps_max, initial_grad_norm: init_sq.sqrt(), final_grad_norm: final_sq.sqrt() };
    Ok((RewardTable::tight(values)?, stats))
}

/// Gradient norm of the penalized BT objective (uncentred rewards), for
/// convergence certificates.
pub fn bt_mle_grad_norm(shape: &VocabShape, data: &PreferenceDataset, reward: &RewardTable, l2: f64) -> Result<f64> {
    let (wins, _) = pair_wins(shape, data)?;
    let sq: f64 = wins
        .iter()
        .zip(reward.values())
        .map(|(w, r)| norm(bt_grad_hess(w, r, l2).0).powi(2))
        .sum();
    Ok(sq.sqrt())
}

/// Smoothed frequency table: for each unordered pair,
/// ĝ(a,b) = (wins of a + s) / (comparisons + 2s); unseen pairs get 1/2.
pub fn fit_gpm_table(shape: &VocabShape, data: &PreferenceDataset, smoothing: f64) -> Result<Fitted<PreferenceModel>> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(LabError::invalid(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    let (wins, used) = pair_wins(shape, data)?;
    let values = wins
        .iter()
        .map(|w| {
            let k = w.len();
            let mut m = vec![vec![0.5; k]; k];
            for a in 0..k {
                for b in (a + 1)..k {
                    let total = w[a][b] + w[b][a];
                    if total + 2.0 * smoothing > 0.0 {
                        m[a][b] = (w[a][b] + smoothing) / (total + 2.0 * smoothing);
                        m[b][a] = 1.0 - m[a][b];
                    }
                }
            }
            m
        })
        .collect();
    Ok(Fitted {
        model: PreferenceModel::table(values)?,
        fit_meta: FitMeta { seed: data.seed(), steps: 0, tuples_used: used, initial_grad_norm: None, final_grad_norm: None },
    })
}

/// π̂_ref(y|x) ∝ (occurrences of y at x among all Y1 and Y2) + smoothing.
pub fn fit_reference_policy(shape: &VocabShape, data: &PreferenceDataset, smoothing: f64) -> Result<Fitted<Policy>> {
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(LabError::invalid(format!("reference smoothing must be positive, got {smoothing}")));
    }
    data.validate_against(shape)?;
    let mut counts: Vec<Vec<f64>> = shape.0.iter().map(|&k| vec![smoothing; k]).collect();
    let mut used = 0;
    for t in data.originals() {
        counts[t.prompt][t.y1] += 1.0;
        counts[t.prompt][t.y2] += 1.0;
        used += 1;
    }
    let probs: Vec<Vec<f64>> = counts
        .into_iter()
        .map(|c| {
            let s: f64 = c.iter().sum();
            c.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Ok(Fitted {
        model: Policy::from_probs(&probs)?,
        fit_meta: FitMeta { seed: data.seed(), steps: 0, tuples_used: used, initial_grad_norm: None, final_grad_norm: None },
    })
}

/// Random preference table with entries U[0,1], drawn once per unordered pair
/// and mirrored (g(b,a) = 1 − g(a,b), diagonal 1/2). Flagged misspecified.
pub fn make_misspecified_g(shape: &VocabShape, seed: u64) -> Result<PreferenceModel> {
    let values = shape
        .0
        .iter()
        .enumerate()
        .map(|(x, &k)| {
            let mut rng = StreamRng::new(seed, x as u64);
            let mut m = vec![vec![0.5; k]; k];
            for a in 0..k {
                for b in (a + 1)..k {
                    m[a][b] = rng.uniform();
                    m[b][a] = 1.0 - m[a][b];
                }
            }
            m
        })
        .collect();
    PreferenceModel::misspecified_table(values, format!("uniform_random(seed={seed})"))
}

/// Random table with every ordered triple, diagonal included, drawn
/// independently from U[0,1]. Not antisymmetric, so ψ built on it is biased
/// even when π̂_ref is correct; kept to demonstrate that failure.
pub fn make_misspecified_g_unpaired(shape: &VocabShape, seed: u64) -> Result<PreferenceModel> {
    let values = shape
        .0
        .iter()
        .enumerate()
        .map(|(x, &k)| {
            let mut rng = StreamRng::new(seed, x as u64);
            (0..k).map(|_| (0..k).map(|_| rng.uniform()).collect()).collect()
        })
        .collect();
    PreferenceModel::misspecified_table(values, format!("uniform_random_unpaired(seed={seed})"))
}

/// Resolved plug-ins ready for an estimator or trainer.
#[derive(Debug, Clone)]
pub struct Nuisances {
    pub g_hat: PreferenceModel,
    pub ref_hat: Policy,
    pub provenance: NuisanceProvenance,
}

/// Builds ĝ and π̂_ref for `spec`.
///
/// `fit_data` is required when the spec fits anything. `wrong` maps a
/// [`RefSource::WrongPolicy`] id to its policy.
pub fn resolve_nuisances(
    env: &Environment,
    spec: &NuisanceSpec,
    fit_data: Option<&PreferenceDataset>,
    opts: &FitOptions,
    wrong: &dyn Fn(&str) -> Result<Policy>,
) -> Result<Nuisances> {
    let shape = env.shape();
    let need = || fit_data.ok_or_else(|| LabError::usage("nuisance spec needs fitting data"));
    let (g_hat, g_fit) = match &spec.g_source {
        GSource::True => (env.preference().clone(), None),
        GSource::BtMle => {
            let f = fit_reward_bt_mle(&shape, need()?, opts)?;
            (PreferenceModel::Bt(f.model), Some(f.fit_meta))
        }
        GSource::GpmTable => {
            let f = fit_gpm_table(&shape, need()?, opts.gpm_smoothing)?;
            (f.model, Some(f.fit_meta))
        }
        GSource::UniformRandom { seed } => (make_misspecified_g(&shape, *seed)?, None),
        GSource::Constant { c } => {
            let m = if *c == 0.5 { PreferenceModel::constant(0.5)? } else { PreferenceModel::misspecified_constant(*c)? };
            (m, None)
        }
    };
    let (ref_hat, ref_fit) = match &spec.ref_source {
        RefSource::True => (env.ref_policy().clone(), None),
        RefSource::Fitted => {
            let f = fit_reference_policy(&shape, need()?, opts.ref_smoothing)?;
            (f.model, Some(f.fit_meta))
        }
        RefSource::Uniform => (Policy::uniform(&shape), None),
        RefSource::WrongPolicy { id } => {
            let p = wrong(id)?;
            shape.ensure_same(&p.shape(), "wrong reference policy")?;
            p.ensure_reference("wrong reference policy")?;
            (p, None)
        }
    };
    Ok(Nuisances {
        g_hat,
        ref_hat,
        provenance: NuisanceProvenance { spec: spec.clone(), cross_fit: false, g_fit, ref_fit },
    })
}

/// Lookup that knows no wrong policies.
pub fn no_wrong_policies(id: &str) -> Result<Policy> {
    Err(LabError::usage(format!("unknown wrong reference policy '{id}'")))
}
