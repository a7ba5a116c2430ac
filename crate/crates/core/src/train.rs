//! Tabular policy optimizers: DRPO with the stop-gradient clipped loss, DPO,
//! and the closed-form KL-regularized reward maximizer used as the PPO
//! baseline.
//!
//! Policies are parameterized by their logits. Every trainer is a
//! single-threaded deterministic loop; randomness comes from counter-based
//! streams keyed by the configured seed and the step index.

use serde::{Deserialize, Serialize};

use crate::datagen::augment_swapped;
use crate::error::{LabError, Result};
use crate::model::{log_sigmoid, sigmoid, Environment, Policy, PreferenceDataset, PreferenceModel, PreferenceTuple, RewardTable, VocabShape};
use crate::oracle;
use crate::rng::{derive_seed, StreamRng};

const EPOCH_TAG: u64 = 0x4550;
const STEP_TAG: u64 = 0x5354;

/// How the expectation over y* ~ π in term I and the KL term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Enumerate y* with the frozen current probabilities as weights.
    #[default]
    Exact,
    /// Draw `mc_samples` responses per batch element from the current policy.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    /// Bias-corrected first/second moment averaging (0.9 / 0.999 / 1e-8).
    #[default]
    Moment,
}

impl std::str::FromStr for Optimizer {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Self::Gd),
            "moment" => Ok(Self::Moment),
            other => Err(LabError::usage(format!("unknown optimizer '{other}' (gd|moment)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mc_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Overrides the step count derived from data size, epochs and batch size.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub sample_mode: SampleMode,
    /// Oracle scoring cadence for the trace when an environment is supplied
    /// (0 scores only the final step).
    pub monitor_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.04,
            clip_lo: 0.04,
            clip_hi: 2.5,
            mc_samples: 3,
            batch_size: 64,
            lr: 0.05,
            steps: None,
            epochs: 4,
            seed: 0,
            optimizer: Optimizer::Moment,
            sample_mode: SampleMode::Exact,
            monitor_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.clip_lo > 0.0 && self.clip_lo <= 1.0 && self.clip_hi >= 1.0 && self.clip_hi.is_finite()) {
            return Err(LabError::invalid(format!(
                "clip range [{}, {}] must satisfy 0 < lo <= 1 <= hi",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::invalid(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.mc_samples == 0 || self.batch_size == 0 || self.epochs == 0 || self.steps == Some(0) {
            return Err(LabError::invalid("mc_samples, batch_size, epochs and steps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub oracle_pref: Option<f64>,
    pub oracle_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// True when the trainer swap-augmented its input itself.
    pub augmented_input: bool,
}

impl TrainTrace {
    /// CSV with header `step,loss,grad_norm,oracle_pref,oracle_kl`; missing
    /// oracle values are left empty.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm", "oracle_pref", "oracle_kl"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.17e}"));
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:.17e}", r.loss),
                format!("{:.17e}", r.grad_norm),
                opt(r.oracle_pref),
                opt(r.oracle_kl),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub trace: TrainTrace,
}

/// Mean of r − 1 − log r over `samples`, with r = π̂_ref(y|x) / π(y|x).
pub fn kl_k3(policy: &Policy, ref_hat: &Policy, prompt: usize, samples: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(LabError::usage("k3 needs at least one sample"));
    }
    let mut acc = 0.0;
    for &y in samples {
        crate::model::policy_prob(policy, prompt, y)?;
        let (p, q) = (policy.prob(prompt, y), crate::model::policy_prob(ref_hat, prompt, y)?);
        if p <= 0.0 || q <= 0.0 {
            return Err(LabError::domain(format!("zero probability for response {y} at prompt {prompt}")));
        }
        acc += k3_term(q / p);
    }
    Ok(acc / samples.len() as f64)
}

#[inline]
fn k3_term(r: f64) -> f64 {
    r - 1.0 - r.ln()
}

/// One batch element with every stop-gradient quantity evaluated.
#[derive(Debug, Clone)]
struct FrozenElement {
    prompt: usize,
    y1: usize,
    term_ii: f64,
    /// (y*, weight, ĝ(x, y*, y2), k3 value at the frozen policy)
    draws: Vec<(usize, f64, f64, f64)>,
}

/// The DRPO loss of one batch with the sampling distribution, the term II
/// scalars and the k3 sample values frozen at the policy it was built from.
///
/// As a function of the logits θ:
///
/// ```text
/// L(θ) = −1/2 mean_i [ Σ_{y*} w ĝ(x,y*,y2) log π_θ(y*) + sg(term_II) log π_θ(y1) ]
///        + β mean_i Σ_{y*} w [ sg(k3(y*)) log π_θ(y*) + k3_θ(y*) ]
/// ```
///
/// The KL part is the score-function plus pathwise surrogate of
/// E_{y*~π}[k3], so its gradient at the frozen point is ∇KL(π‖π̂_ref) (exact
/// mode) or an unbiased estimate of it (Monte Carlo mode).
#[derive(Debug, Clone)]
pub struct DrpoSurrogate {
    beta: f64,
    ref_hat: Policy,
    elements: Vec<FrozenElement>,
}

impl DrpoSurrogate {
    pub fn build(
        batch: &[PreferenceTuple],
        policy: &Policy,
        ref_hat: &Policy,
        g_hat: &PreferenceModel,
        cfg: &TrainConfig,
        step_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = policy.shape();
        shape.ensure_same(&ref_hat.shape(), "estimated reference policy")?;
        ref_hat.ensure_reference("estimated reference policy")?;
        g_hat.check_shape(&shape)?;
        let mut elements = Vec::with_capacity(batch.len());
        for (i, t) in batch.iter().enumerate() {
            shape.check_tuple(t.prompt, t.y1, t.y2)?;
            let x = t.prompt;
            let ratio = policy.prob(x, t.y1) / ref_hat.prob(x, t.y1);
            let term_ii = ratio.clamp(cfg.clip_lo, cfg.clip_hi) * (t.label() - g_hat.g(x, t.y1, t.y2));
            let probs = policy.probs(x);
            let weights: Vec<(usize, f64)> = match cfg.sample_mode {
                SampleMode::Exact => probs.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(y, p)| (y, *p)).collect(),
                SampleMode::MonteCarlo => {
                    let mut rng = StreamRng::new(step_seed, i as u64);
                    let mut counts = vec![0usize; probs.len()];
                    for _ in 0..cfg.mc_samples {
                        counts[rng.categorical(probs)] += 1;
                    }
                    let m = cfg.mc_samples as f64;
                    counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(y, c)| (y, *c as f64 / m)).collect()
                }
            };
            let draws = weights
                .into_iter()
                .map(|(y, w)| (y, w, g_hat.g(x, y, t.y2), k3_term(ref_hat.prob(x, y) / probs[y])))
                .collect();
            elements.push(FrozenElement { prompt: x, y1: t.y1, term_ii, draws });
        }
        Ok(Self { beta: cfg.beta, ref_hat: ref_hat.clone(), elements })
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Value of the frozen surrogate at `policy`.
    pub fn loss(&self, policy: &Policy) -> f64 {
        let mut pref = 0.0;
        let mut kl = 0.0;
        for e in &self.elements {
            let x = e.prompt;
            let mut term_i = 0.0;
            for &(y, w, g, k3f) in &e.draws {
                let lp = policy.log_prob(x, y);
                term_i += w * g * lp;
                let r = self.ref_hat.prob(x, y) / policy.prob(x, y);
                kl += w * (k3f * lp + k3_term(r));
            }
            pref += term_i + e.term_ii * policy.log_prob(x, e.y1);
        }
        let n = self.elements.len() as f64;
        -0.5 * pref / n + self.beta * kl / n
    }

    /// Reported loss: the surrogate's preference part plus β times the mean
    /// k3 estimate at the frozen policy.
    pub fn reported_loss(&self, policy: &Policy) -> f64 {
        let mut pref = 0.0;
        let mut kl = 0.0;
        for e in &self.elements {
            for &(y, w, g, k3f) in &e.draws {
                pref += w * g * policy.log_prob(e.prompt, y);
                kl += w * k3f;
            }
            pref += e.term_ii * policy.log_prob(e.prompt, e.y1);
        }
        let n = self.elements.len() as f64;
        -0.5 * pref / n + self.beta * kl / n
    }

    /// Gradient of [`Self::loss`] with respect to the logits of `policy`.
    pub fn grad(&self, policy: &Policy) -> Vec<Vec<f64>> {
        let shape = policy.shape();
        // c[x][y] collects d loss / d log π(y|x); the softmax Jacobian is
        // applied once per prompt at the end.
        let mut c: Vec<Vec<f64>> = shape.0.iter().map(|&k| vec![0.0; k]).collect();
        for e in &self.elements {
            let cx = &mut c[e.prompt];
            for &(y, w, g, k3f) in &e.draws {
                let r = self.ref_hat.prob(e.prompt, y) / policy.prob(e.prompt, y);
                cx[y] += -0.5 * w * g + self.beta * w * (k3f + 1.0 - r);
            }
            cx[e.y1] += -0.5 * e.term_ii;
        }
        let n = self.elements.len() as f64;
        c.iter()
            .enumerate()
            .map(|(x, cx)| {
                let total: f64 = cx.iter().sum();
                policy
                    .probs(x)
                    .iter()
                    .zip(cx)
                    .map(|(p, ck)| if *p > 0.0 { (ck - p * total) / n } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

fn grad_norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Loss and logit gradient of the DRPO objective on `batch` (indices into a
/// swap-augmented dataset).
pub fn drpo_loss_and_grad(
    data: &PreferenceDataset,
    batch: &[usize],
    policy: &Policy,
    ref_hat: &Policy,
    g_hat: &PreferenceModel,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !data.is_augmented() {
        return Err(LabError::usage("DRPO batches must come from a swap-augmented dataset"));
    }
    if batch.is_empty() {
        return Err(LabError::usage("empty batch"));
    }
    let tuples: Vec<PreferenceTuple> = batch
        .iter()
        .map(|&i| data.tuples().get(i).copied().ok_or_else(|| LabError::index(format!("batch index {i}"))))
        .collect::<Result<_>>()?;
    let s = DrpoSurrogate::build(&tuples, policy, ref_hat, g_hat, cfg, step_seed)?;
    Ok((s.reported_loss(policy), s.grad(policy)))
}

/// Objective whose ascent direction the exact-mode DRPO step follows when
/// clipping is inactive: ½·p̂_DR(π) − β·Σ_x f̂(x) KL(π(·|x) ‖ π̂_ref(·|x)),
/// with f̂ the empirical prompt frequencies.
pub fn drpo_objective(data: &PreferenceDataset, policy: &Policy, ref_hat: &Policy, g_hat: &PreferenceModel, beta: f64) -> Result<f64> {
    let p = crate::estimators::dr_estimate(data, policy, ref_hat, g_hat, &crate::estimators::EstimatorConfig::dr())?.value;
    let mut kl = 0.0;
    for t in data.tuples() {
        kl += policy
            .probs(t.prompt)
            .iter()
            .zip(ref_hat.probs(t.prompt))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum::<f64>();
    }
    Ok(0.5 * p - beta * kl / data.len() as f64)
}

/// Logit update rule shared by the trainers.
struct Stepper {
    kind: Optimizer,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Stepper {
    fn new(kind: Optimizer, lr: f64, shape: &VocabShape) -> Self {
        let zeros: Vec<Vec<f64>> = shape.0.iter().map(|&k| vec![0.0; k]).collect();
        Self { kind, lr, t: 0, m: zeros.clone(), v: zeros }
    }

    fn apply(&mut self, logits: &mut [Vec<f64>], grad: &[Vec<f64>]) {
        self.t += 1;
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (x, row) in logits.iter_mut().enumerate() {
            for (y, l) in row.iter_mut().enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let g = grad[x][y];
                match self.kind {
                    Optimizer::Gd => *l -= self.lr * g,
                    Optimizer::Moment => {
                        let m = &mut self.m[x][y];
                        let v = &mut self.v[x][y];
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *l -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn monitor_record(env: Option<&Environment>, policy: &Policy, due: bool) -> Result<(Option<f64>, Option<f64>)> {
    match env {
        Some(env) if due => Ok((
            Some(oracle::total_preference_exact(env, policy)?),
            Some(oracle::kl_exact(env, policy, env.ref_policy())?),
        )),
        _ => Ok((None, None)),
    }
}

fn check_init(init: &Policy, ref_hat: &Policy) -> Result<()> {
    init.shape().ensure_same(&ref_hat.shape(), "initial policy")?;
    ref_hat.ensure_reference("estimated reference policy")
}

/// Algorithm loop for DRPO: shuffled mini-batches over the swap-augmented
/// data, frozen-surrogate gradients, logit updates.
///
/// Unaugmented input is augmented first (recorded in the trace). The step
/// count is `cfg.steps` or ceil(|data|·epochs / batch_size). When `monitor`
/// is given the trace carries oracle scores of the current policy.
pub fn drpo_train(
    data: &PreferenceDataset,
    ref_hat: &Policy,
    g_hat: &PreferenceModel,
    cfg: &TrainConfig,
    init: &Policy,
    monitor: Option<&Environment>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_init(init, ref_hat)?;
    if data.is_empty() {
        return Err(LabError::usage("cannot train on an empty dataset"));
    }
    let shape = init.shape();
    g_hat.check_shape(&shape)?;
    data.validate_against(&shape)?;
    let (data, augmented_input) = if data.is_augmented() {
        (data.clone(), false)
    } else {
        (augment_swapped(data)?, true)
    };
    let len = data.len();
    let batch = cfg.batch_size.min(len);
    let steps = cfg.steps.unwrap_or_else(|| (len * cfg.epochs).div_ceil(batch));

    let mut logits = init.logits().to_vec();
    let mut policy = init.clone();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, &shape);
    let mut order: Vec<usize> = Vec::new();
    let (mut epoch, mut pos) = (0u64, 0usize);
    let mut trace = TrainTrace { records: Vec::with_capacity(steps), augmented_input };
    let mut idx = Vec::with_capacity(batch);
    for step in 0..steps {
        idx.clear();
        while idx.len() < batch {
            if pos == order.len() {
                order = StreamRng::new(derive_seed(cfg.seed, &[EPOCH_TAG, epoch]), 0).permutation(len);
                epoch += 1;
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        let seed = derive_seed(cfg.seed, &[STEP_TAG, step as u64]);
        let (loss, grad) = drpo_loss_and_grad(&data, &idx, &policy, ref_hat, g_hat, cfg, seed)?;
        stepper.apply(&mut logits, &grad);
        policy = Policy::from_logits(logits.clone())?;
        let due = step + 1 == steps || (cfg.monitor_every > 0 && step % cfg.monitor_every == 0);
        let (oracle_pref, oracle_kl) = monitor_record(monitor, &policy, due)?;
        trace.records.push(TraceRecord { step, loss, grad_norm: grad_norm(&grad), oracle_pref, oracle_kl });
    }
    Ok(TrainOutcome { policy, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub monitor_every: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.04, lr: 0.05, steps: 500, optimizer: Optimizer::Moment, monitor_every: 0 }
    }
}

/// Mean DPO loss and its logit gradient over the original comparisons.
pub fn dpo_loss_and_grad(data: &PreferenceDataset, policy: &Policy, ref_hat: &Policy, beta: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grad: Vec<Vec<f64>> = policy.shape().0.iter().map(|&k| vec![0.0; k]).collect();
    let mut loss = 0.0;
    let mut n = 0usize;
    for t in data.originals() {
        let (w, l) = if t.z == 1 { (t.y1, t.y2) } else { (t.y2, t.y1) };
        let x = t.prompt;
        let u = beta
            * ((policy.log_prob(x, w) - ref_hat.log_prob(x, w)) - (policy.log_prob(x, l) - ref_hat.log_prob(x, l)));
        loss -= log_sigmoid(u);
        let c = -sigmoid(-u) * beta;
        grad[x][w] += c;
        grad[x][l] -= c;
        n += 1;
    }
    let n = n as f64;
    grad.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Full-batch DPO with y_w = y1 if z = 1 else y2. Swap-augmented input is
/// deduplicated to its original comparisons.
pub fn dpo_train(
    data: &PreferenceDataset,
    ref_hat: &Policy,
    cfg: &DpoConfig,
    init: &Policy,
    monitor: Option<&Environment>,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(LabError::usage("cannot train on an empty dataset"));
    }
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.steps == 0 {
        return Err(LabError::invalid("DPO needs beta > 0, lr >= 0 and steps >= 1"));
    }
    check_init(init, ref_hat)?;
    let shape = init.shape();
    data.validate_against(&shape)?;
    let mut logits = init.logits().to_vec();
    let mut policy = init.clone();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, &shape);
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let (loss, grad) = dpo_loss_and_grad(data, &policy, ref_hat, cfg.beta)?;
        stepper.apply(&mut logits, &grad);
        policy = Policy::from_logits(logits.clone())?;
        let due = step + 1 == cfg.steps || (cfg.monitor_every > 0 && step % cfg.monitor_every == 0);
        let (oracle_pref, oracle_kl) = monitor_record(monitor, &policy, due)?;
        trace.records.push(TraceRecord { step, loss, grad_norm: grad_norm(&grad), oracle_pref, oracle_kl });
    }
    Ok(TrainOutcome { policy, trace })
}

/// Exact maximizer of E_π[r̂] − β KL(π‖π̂_ref): π ∝ π̂_ref · exp(r̂/β).
pub fn ppo_closed_form(shape: &VocabShape, reward: &RewardTable, ref_hat: &Policy, beta: f64) -> Result<Policy> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(LabError::invalid(format!("beta must be positive, got {beta}")));
    }
    shape.ensure_same(&reward.shape(), "reward table")?;
    shape.ensure_same(&ref_hat.shape(), "estimated reference policy")?;
    ref_hat.ensure_reference("estimated reference policy")?;
    let logits = (0..shape.prompts())
        .map(|x| (0..shape.responses(x)).map(|y| ref_hat.log_prob(x, y) + reward.get(x, y) / beta).collect())
        .collect();
    Policy::from_logits(logits)
}

/// Exact KL-regularized reward objective E_π[r̂] − β KL(π‖π̂_ref) at one prompt.
pub fn ppo_objective(policy: &Policy, reward: &RewardTable, ref_hat: &Policy, beta: f64, prompt: usize) -> f64 {
    policy
        .probs(prompt)
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(y, p)| p * (reward.get(prompt, y) - beta * (p / ref_hat.prob(prompt, y)).ln()))
        .sum()
}
