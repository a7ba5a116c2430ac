//! Environment, policy, reward and preference-model types shared by every
//! other module.
//!
//! Prompts and responses are dense integer indices. Human-readable names are
//! carried by [`Environment`] only so they survive serialization.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance used for every "sums to one" / antisymmetry check.
pub const PROB_TOL: f64 = 1e-12;

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(t))` without cancellation for large negative `t`.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// Number of responses available at each prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabShape(pub Vec<usize>);

impl VocabShape {
    pub fn prompts(&self) -> usize {
        self.0.len()
    }

    pub fn responses(&self, prompt: usize) -> usize {
        self.0[prompt]
    }

    pub fn check_tuple(&self, prompt: usize, y1: usize, y2: usize) -> Result<()> {
        let k = *self
            .0
            .get(prompt)
            .ok_or_else(|| LabError::index(format!("prompt {prompt} (have {})", self.0.len())))?;
        for y in [y1, y2] {
            if y >= k {
                return Err(LabError::index(format!(
                    "response {y} at prompt {prompt} (vocab size {k})"
                )));
            }
        }
        Ok(())
    }

    pub fn ensure_same(&self, other: &VocabShape, what: &str) -> Result<()> {
        if self != other {
            return Err(LabError::shape(format!(
                "{what}: expected vocab {:?}, found {:?}",
                self.0, other.0
            )));
        }
        Ok(())
    }

    /// Number of (prompt, y1, y2, z) outcomes an exact enumeration visits.
    pub fn outcome_count(&self) -> u128 {
        self.0.iter().map(|&k| 2 * (k as u128) * (k as u128)).sum()
    }
}

// ── Policy ──────────────────────────────────────────────────────────────

/// Softmax-parameterized tabular policy.
///
/// A logit of `-inf` removes a response from the support, which lets
/// deterministic policies be represented exactly. Policies that act as a
/// reference must be strictly positive; see [`Policy::ensure_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct Policy {
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyRepr {
    /// `null` encodes a zero-mass response.
    logits: Vec<Vec<Option<f64>>>,
}

impl TryFrom<PolicyRepr> for Policy {
    type Error = LabError;

    fn try_from(r: PolicyRepr) -> Result<Self> {
        let logits = r
            .logits
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect())
            .collect();
        Policy::from_logits(logits)
    }
}

impl From<Policy> for PolicyRepr {
    fn from(p: Policy) -> Self {
        PolicyRepr {
            logits: p
                .logits
                .into_iter()
                .map(|row| row.into_iter().map(|v| v.is_finite().then_some(v)).collect())
                .collect(),
        }
    }
}

impl Policy {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        let mut probs = Vec::with_capacity(logits.len());
        let mut log_norm = Vec::with_capacity(logits.len());
        for (x, row) in logits.iter().enumerate() {
            if row.is_empty() {
                return Err(LabError::invalid(format!("prompt {x} has an empty vocabulary")));
            }
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(LabError::invalid(format!("prompt {x} has a NaN or +inf logit")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(LabError::invalid(format!("prompt {x} has no support")));
            }
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            probs.push(exps.iter().map(|e| e / total).collect());
            log_norm.push(max + total.ln());
        }
        Ok(Self { logits, probs, log_norm })
    }

    /// Builds a policy from probabilities; zeros become `-inf` logits.
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        let mut logits = Vec::with_capacity(probs.len());
        for (x, row) in probs.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(LabError::invalid(format!("prompt {x}: probabilities must be finite and >= 0")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(LabError::invalid(format!("prompt {x}: probabilities sum to {s}")));
            }
            logits.push(row.iter().map(|p| p.ln()).collect());
        }
        Self::from_logits(logits)
    }

    pub fn uniform(shape: &VocabShape) -> Self {
        Self::from_logits(shape.0.iter().map(|&k| vec![0.0; k]).collect())
            .expect("uniform logits are valid")
    }

    /// Puts all mass on `choices[x]` at each prompt.
    pub fn deterministic(shape: &VocabShape, choices: &[usize]) -> Result<Self> {
        if choices.len() != shape.prompts() {
            return Err(LabError::shape("one choice per prompt required"));
        }
        let logits = shape
            .0
            .iter()
            .zip(choices)
            .enumerate()
            .map(|(x, (&k, &c))| {
                if c >= k {
                    return Err(LabError::index(format!("choice {c} at prompt {x}")));
                }
                Ok((0..k).map(|y| if y == c { 0.0 } else { f64::NEG_INFINITY }).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::from_logits(logits)
    }

    pub fn shape(&self) -> VocabShape {
        VocabShape(self.logits.iter().map(Vec::len).collect())
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<Vec<f64>> {
        self.logits
    }

    pub fn probs(&self, prompt: usize) -> &[f64] {
        &self.probs[prompt]
    }

    /// Unchecked lookup; callers validate shapes up front.
    #[inline]
    pub fn prob(&self, prompt: usize, response: usize) -> f64 {
        self.probs[prompt][response]
    }

    #[inline]
    pub fn log_prob(&self, prompt: usize, response: usize) -> f64 {
        self.logits[prompt][response] - self.log_norm[prompt]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().flatten().all(|&p| p > 0.0)
    }

    pub fn ensure_reference(&self, role: &str) -> Result<()> {
        for (x, row) in self.probs.iter().enumerate() {
            if let Some(y) = row.iter().position(|&p| p <= 0.0) {
                return Err(LabError::domain(format!(
                    "{role} assigns zero probability to response {y} at prompt {x}"
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy with every finite logit of `prompt` shifted by `c`.
    pub fn shifted(&self, prompt: usize, c: f64) -> Result<Self> {
        let mut logits = self.logits.clone();
        for l in &mut logits[prompt] {
            *l += c;
        }
        Self::from_logits(logits)
    }
}

/// Checked probability lookup.
pub fn policy_prob(policy: &Policy, prompt: usize, response: usize) -> Result<f64> {
    let row = policy
        .probs
        .get(prompt)
        .ok_or_else(|| LabError::index(format!("prompt {prompt}")))?;
    row.get(response)
        .copied()
        .ok_or_else(|| LabError::index(format!("response {response} at prompt {prompt}")))
}

// ── Rewards and preferences ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardRepr", into = "RewardRepr")]
pub struct RewardTable {
    values: Vec<Vec<f64>>,
    bound: f64,
}

#[derive(Serialize, Deserialize)]
struct RewardRepr {
    values: Vec<Vec<f64>>,
    bound: f64,
}

impl TryFrom<RewardRepr> for RewardTable {
    type Error = LabError;
    fn try_from(r: RewardRepr) -> Result<Self> {
        RewardTable::new(r.values, r.bound)
    }
}

impl From<RewardTable> for RewardRepr {
    fn from(r: RewardTable) -> Self {
        RewardRepr { values: r.values, bound: r.bound }
    }
}

impl RewardTable {
    pub fn new(values: Vec<Vec<f64>>, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(LabError::invalid(format!("reward bound {bound}")));
        }
        for (x, row) in values.iter().enumerate() {
            if row.is_empty() {
                return Err(LabError::invalid(format!("prompt {x} has no rewards")));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && v.abs() <= bound)) {
                return Err(LabError::invalid(format!(
                    "reward {v} at prompt {x} exceeds declared bound {bound}"
                )));
            }
        }
        Ok(Self { values, bound })
    }

    /// Uses the largest absolute entry as the declared bound.
    pub fn tight(values: Vec<Vec<f64>>) -> Result<Self> {
        let bound = values.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
        Self::new(values, bound)
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    #[inline]
    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.values[prompt][response]
    }

    pub fn shape(&self) -> VocabShape {
        VocabShape(self.values.iter().map(Vec::len).collect())
    }
}

/// Explicit table of g(x, y1, y2), one k×k matrix per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTable {
    values: Vec<Vec<Vec<f64>>>,
    /// Set for deliberate misspecifiers; antisymmetry is not enforced.
    misspecified: bool,
    note: Option<String>,
}

/// Pairwise preference function g(x, y1, y2) = P(y1 preferred over y2 | x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PreferenceRepr", into = "PreferenceRepr")]
pub enum PreferenceModel {
    /// Bradley-Terry: sigmoid of the reward difference.
    Bt(RewardTable),
    Table(PreferenceTable),
    Constant { value: f64, misspecified: bool },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum PreferenceRepr {
    Bt {
        reward: RewardTable,
    },
    Table {
        values: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        misspecified: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Constant {
        value: f64,
        #[serde(default)]
        misspecified: bool,
    },
}

impl TryFrom<PreferenceRepr> for PreferenceModel {
    type Error = LabError;
    fn try_from(r: PreferenceRepr) -> Result<Self> {
        match r {
            PreferenceRepr::Bt { reward } => Ok(PreferenceModel::Bt(reward)),
            PreferenceRepr::Table { values, misspecified, note } => {
                if misspecified {
                    PreferenceModel::misspecified_table(values, note.unwrap_or_default())
                } else {
                    PreferenceModel::table(values)
                }
            }
            PreferenceRepr::Constant { value, misspecified } => {
                if misspecified {
                    PreferenceModel::misspecified_constant(value)
                } else {
                    PreferenceModel::constant(value)
                }
            }
        }
    }
}

impl From<PreferenceModel> for PreferenceRepr {
    fn from(m: PreferenceModel) -> Self {
        match m {
            PreferenceModel::Bt(reward) => PreferenceRepr::Bt { reward },
            PreferenceModel::Table(t) => PreferenceRepr::Table {
                values: t.values,
                misspecified: t.misspecified,
                note: t.note,
            },
            PreferenceModel::Constant { value, misspecified } => {
                PreferenceRepr::Constant { value, misspecified }
            }
        }
    }
}

fn check_table_entries(values: &[Vec<Vec<f64>>]) -> Result<()> {
    for (x, m) in values.iter().enumerate() {
        let k = m.len();
        if k == 0 {
            return Err(LabError::invalid(format!("prompt {x} has an empty preference table")));
        }
        for (i, row) in m.iter().enumerate() {
            if row.len() != k {
                return Err(LabError::shape(format!("prompt {x}: row {i} has {} entries, expected {k}", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
                return Err(LabError::invalid(format!("prompt {x}: preference value {v} outside [0,1]")));
            }
        }
    }
    Ok(())
}

impl PreferenceModel {
    /// Valid (antisymmetric, diagonal 1/2) table.
    pub fn table(values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        check_table_entries(&values)?;
        for (x, m) in values.iter().enumerate() {
            for i in 0..m.len() {
                if (m[i][i] - 0.5).abs() > PROB_TOL {
                    return Err(LabError::invalid(format!("prompt {x}: g(y,y) = {} != 1/2", m[i][i])));
                }
                for j in 0..i {
                    if (m[i][j] + m[j][i] - 1.0).abs() > PROB_TOL {
                        return Err(LabError::invalid(format!(
                            "prompt {x}: g({i},{j}) + g({j},{i}) = {} != 1",
                            m[i][j] + m[j][i]
                        )));
                    }
                }
            }
        }
        Ok(PreferenceModel::Table(PreferenceTable { values, misspecified: false, note: None }))
    }

    /// Table used as a deliberate misspecifier; entries only need to lie in [0,1].
    pub fn misspecified_table(values: Vec<Vec<Vec<f64>>>, note: impl Into<String>) -> Result<Self> {
        check_table_entries(&values)?;
        let note = note.into();
        Ok(PreferenceModel::Table(PreferenceTable {
            values,
            misspecified: true,
            note: (!note.is_empty()).then_some(note),
        }))
    }

    /// Valid constant model; only 1/2 is antisymmetric.
    pub fn constant(value: f64) -> Result<Self> {
        if value != 0.5 {
            return Err(LabError::invalid(format!(
                "constant preference {value} violates antisymmetry; use misspecified_constant"
            )));
        }
        Ok(PreferenceModel::Constant { value, misspecified: false })
    }

    pub fn misspecified_constant(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(LabError::invalid(format!("constant preference {value} outside [0,1]")));
        }
        Ok(PreferenceModel::Constant { value, misspecified: true })
    }

    /// Unchecked evaluation of g(x, y1, y2).
    #[inline]
    pub fn g(&self, prompt: usize, y1: usize, y2: usize) -> f64 {
        match self {
            PreferenceModel::Bt(r) => sigmoid(r.get(prompt, y1) - r.get(prompt, y2)),
            PreferenceModel::Table(t) => t.values[prompt][y1][y2],
            PreferenceModel::Constant { value, .. } => *value,
        }
    }

    pub fn is_misspecified(&self) -> bool {
        match self {
            PreferenceModel::Bt(_) => false,
            PreferenceModel::Table(t) => t.misspecified,
            PreferenceModel::Constant { misspecified, .. } => *misspecified,
        }
    }

    /// Shape implied by the model, if it carries one.
    pub fn shape(&self) -> Option<VocabShape> {
        match self {
            PreferenceModel::Bt(r) => Some(r.shape()),
            PreferenceModel::Table(t) => Some(VocabShape(t.values.iter().map(Vec::len).collect())),
            PreferenceModel::Constant { .. } => None,
        }
    }

    pub fn check_shape(&self, shape: &VocabShape) -> Result<()> {
        match self.shape() {
            Some(s) => shape.ensure_same(&s, "preference model"),
            None => Ok(()),
        }
    }

    pub fn bt_reward(&self) -> Option<&RewardTable> {
        match self {
            PreferenceModel::Bt(r) => Some(r),
            _ => None,
        }
    }
}

/// Checked evaluation of g(x, y1, y2).
pub fn preference_eval(model: &PreferenceModel, prompt: usize, y1: usize, y2: usize) -> Result<f64> {
    if let Some(shape) = model.shape() {
        shape.check_tuple(prompt, y1, y2)?;
    }
    Ok(model.g(prompt, y1, y2))
}

// ── Environment ─────────────────────────────────────────────────────────

/// Simulation ground truth: prompt distribution, vocabulary, the true
/// reference policy and the true preference function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvironmentRepr", into = "EnvironmentRepr")]
pub struct Environment {
    prompts: Vec<String>,
    prompt_weights: Vec<f64>,
    vocab: Vec<Vec<String>>,
    ref_policy: Policy,
    preference: PreferenceModel,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentRepr {
    prompts: Vec<String>,
    prompt_weights: Vec<f64>,
    vocab: Vec<Vec<String>>,
    ref_policy: Policy,
    preference: PreferenceModel,
}

impl TryFrom<EnvironmentRepr> for Environment {
    type Error = LabError;
    fn try_from(r: EnvironmentRepr) -> Result<Self> {
        Environment::new(r.prompts, r.prompt_weights, r.vocab, r.ref_policy, r.preference)
    }
}

impl From<Environment> for EnvironmentRepr {
    fn from(e: Environment) -> Self {
        EnvironmentRepr {
            prompts: e.prompts,
            prompt_weights: e.prompt_weights,
            vocab: e.vocab,
            ref_policy: e.ref_policy,
            preference: e.preference,
        }
    }
}

impl Environment {
    pub fn new(
        prompts: Vec<String>,
        prompt_weights: Vec<f64>,
        vocab: Vec<Vec<String>>,
        ref_policy: Policy,
        preference: PreferenceModel,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(LabError::invalid("environment has no prompts"));
        }
        if prompts.len() != prompt_weights.len() || prompts.len() != vocab.len() {
            return Err(LabError::shape("prompts, prompt_weights and vocab lengths differ"));
        }
        if prompt_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LabError::invalid("prompt weights must be finite and nonnegative"));
        }
        let total: f64 = prompt_weights.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(LabError::invalid(format!("prompt weights sum to {total}")));
        }
        let shape = VocabShape(vocab.iter().map(Vec::len).collect());
        shape.ensure_same(&ref_policy.shape(), "reference policy")?;
        ref_policy.ensure_reference("reference policy")?;
        preference.check_shape(&shape)?;
        Ok(Self { prompts, prompt_weights, vocab, ref_policy, preference })
    }

    /// Environment with generated names `x0, x1, ...` and `y0, y1, ...`.
    pub fn unnamed(
        prompt_weights: Vec<f64>,
        ref_policy: Policy,
        preference: PreferenceModel,
    ) -> Result<Self> {
        let shape = ref_policy.shape();
        let prompts = (0..shape.prompts()).map(|x| format!("x{x}")).collect();
        let vocab = shape.0.iter().map(|&k| (0..k).map(|y| format!("y{y}")).collect()).collect();
        Self::new(prompts, prompt_weights, vocab, ref_policy, preference)
    }

    pub fn shape(&self) -> VocabShape {
        self.ref_policy.shape()
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn prompt_weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    pub fn vocab(&self) -> &[Vec<String>] {
        &self.vocab
    }

    pub fn ref_policy(&self) -> &Policy {
        &self.ref_policy
    }

    pub fn preference(&self) -> &PreferenceModel {
        &self.preference
    }

    pub fn bt_reward(&self) -> Option<&RewardTable> {
        self.preference.bt_reward()
    }

    /// Realized coverage constant: max over (x, y) of policy(y|x)/ref(y|x).
    pub fn coverage(&self, policy: &Policy) -> Result<f64> {
        self.shape().ensure_same(&policy.shape(), "policy")?;
        let mut worst = 0.0_f64;
        for x in 0..self.prompts.len() {
            for (p, q) in policy.probs(x).iter().zip(self.ref_policy.probs(x)) {
                worst = worst.max(p / q);
            }
        }
        Ok(worst)
    }

    /// Same environment with a different preference function.
    pub fn with_preference(&self, preference: PreferenceModel) -> Result<Self> {
        Self::new(
            self.prompts.clone(),
            self.prompt_weights.clone(),
            self.vocab.clone(),
            self.ref_policy.clone(),
            preference,
        )
    }
}

// ── Data ────────────────────────────────────────────────────────────────

/// One logged comparison: `z = 1` means `y1` was preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub prompt: usize,
    pub y1: usize,
    pub y2: usize,
    pub z: u8,
}

impl PreferenceTuple {
    pub fn new(prompt: usize, y1: usize, y2: usize, z: u8) -> Result<Self> {
        if z > 1 {
            return Err(LabError::invalid(format!("label z = {z} is not binary")));
        }
        Ok(Self { prompt, y1, y2, z })
    }

    pub fn label(&self) -> f64 {
        f64::from(self.z)
    }

    pub fn swapped(&self) -> Self {
        Self { prompt: self.prompt, y1: self.y2, y2: self.y1, z: 1 - self.z }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct PreferenceDataset {
    tuples: Vec<PreferenceTuple>,
    seed: u64,
    augmented: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    seed: u64,
    augmented: bool,
    tuples: Vec<PreferenceTuple>,
}

impl TryFrom<DatasetRepr> for PreferenceDataset {
    type Error = LabError;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        PreferenceDataset::new(r.tuples, r.seed, r.augmented)
    }
}

impl From<PreferenceDataset> for DatasetRepr {
    fn from(d: PreferenceDataset) -> Self {
        DatasetRepr { seed: d.seed, augmented: d.augmented, tuples: d.tuples }
    }
}

impl PreferenceDataset {
    pub fn new(tuples: Vec<PreferenceTuple>, seed: u64, augmented: bool) -> Result<Self> {
        if let Some(t) = tuples.iter().find(|t| t.z > 1) {
            return Err(LabError::invalid(format!("label z = {} is not binary", t.z)));
        }
        if augmented {
            if !tuples.len().is_multiple_of(2) {
                return Err(LabError::invalid("augmented dataset has odd length"));
            }
            for (i, pair) in tuples.chunks_exact(2).enumerate() {
                if pair[1] != pair[0].swapped() {
                    return Err(LabError::invalid(format!(
                        "augmented dataset: tuple {} is not the swap of tuple {}",
                        2 * i + 1,
                        2 * i
                    )));
                }
            }
        }
        Ok(Self { tuples, seed, augmented })
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// The original comparisons: every tuple, or every other one when the
    /// dataset carries swap-augmentation.
    pub fn originals(&self) -> impl Iterator<Item = &PreferenceTuple> {
        let step = if self.augmented { 2 } else { 1 };
        self.tuples.iter().step_by(step)
    }

    pub fn validate_against(&self, shape: &VocabShape) -> Result<()> {
        for t in &self.tuples {
            shape.check_tuple(t.prompt, t.y1, t.y2)?;
        }
        Ok(())
    }

    /// Splits the originals into two halves (even / odd positions), each
    /// unaugmented. Used for cross-fitting.
    pub fn split_halves(&self) -> (PreferenceDataset, PreferenceDataset) {
        let originals: Vec<PreferenceTuple> = self.originals().copied().collect();
        let (a, b): (Vec<_>, Vec<_>) = originals.iter().enumerate().partition(|(i, _)| i % 2 == 0);
        let strip = |v: Vec<(usize, &PreferenceTuple)>| v.into_iter().map(|(_, t)| *t).collect();
        (
            PreferenceDataset { tuples: strip(a), seed: self.seed, augmented: false },
            PreferenceDataset { tuples: strip(b), seed: self.seed, augmented: false },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        let shape = VocabShape(vec![2]);
        let u = Policy::uniform(&shape);
        assert_eq!(policy_prob(&u, 0, 0).unwrap(), 0.5);
        assert_eq!(policy_prob(&u, 0, 1).unwrap(), 0.5);

        let p = Policy::from_logits(vec![vec![2f64.ln(), 0.0]]).unwrap();
        assert_abs_diff_eq!(p.prob(0, 0), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.prob(0, 1), 1.0 / 3.0, epsilon = 1e-15);

        let q = p.shifted(0, 5.0).unwrap();
        assert_abs_diff_eq!(q.prob(0, 0), p.prob(0, 0), epsilon = 1e-15);
        assert_abs_diff_eq!(q.prob(0, 1), p.prob(0, 1), epsilon = 1e-15);
    }

    #[test]
    fn policy_prob_rejects_bad_index() {
        let p = Policy::uniform(&VocabShape(vec![2, 3]));
        assert!(matches!(policy_prob(&p, 2, 0), Err(LabError::Index(_))));
        assert!(matches!(policy_prob(&p, 0, 2), Err(LabError::Index(_))));
        assert!(policy_prob(&p, 1, 2).is_ok());
    }

    #[test]
    fn deterministic_policy_has_zero_mass_elsewhere() {
        let p = Policy::deterministic(&VocabShape(vec![3]), &[1]).unwrap();
        assert_eq!(p.probs(0), &[0.0, 1.0, 0.0]);
        assert!(!p.is_strictly_positive());
        assert!(matches!(p.ensure_reference("ref"), Err(LabError::Domain(_))));
        assert_eq!(p.log_prob(0, 1), 0.0);
    }

    #[test]
    fn bt_preference_examples() {
        let r = RewardTable::new(vec![vec![4f64.ln(), 0.0, 0.0]], 2.0).unwrap();
        let m = PreferenceModel::Bt(r);
        assert_eq!(preference_eval(&m, 0, 1, 2).unwrap(), 0.5);
        assert_abs_diff_eq!(preference_eval(&m, 0, 0, 1).unwrap(), 0.8, epsilon = 1e-15);
        assert!(matches!(preference_eval(&m, 0, 0, 3), Err(LabError::Index(_))));
    }

    #[test]
    fn table_antisymmetry_enforced() {
        let ok = PreferenceModel::table(vec![vec![vec![0.5, 0.8], vec![0.2, 0.5]]]).unwrap();
        assert_abs_diff_eq!(ok.g(0, 0, 1) + ok.g(0, 1, 0), 1.0, epsilon = 1e-15);
        assert!(PreferenceModel::table(vec![vec![vec![0.5, 0.8], vec![0.3, 0.5]]]).is_err());
        assert!(PreferenceModel::table(vec![vec![vec![0.4, 0.8], vec![0.2, 0.5]]]).is_err());
        let waived =
            PreferenceModel::misspecified_table(vec![vec![vec![0.9, 0.8], vec![0.3, 0.1]]], "test").unwrap();
        assert!(waived.is_misspecified());
    }

    #[test]
    fn constant_models() {
        assert!(PreferenceModel::constant(0.5).is_ok());
        assert!(PreferenceModel::constant(1.0).is_err());
        let c = PreferenceModel::misspecified_constant(1.0).unwrap();
        assert!(c.is_misspecified());
        assert_eq!(c.g(0, 3, 1), 1.0);
    }

    #[test]
    fn reward_bound_is_enforced() {
        assert!(RewardTable::new(vec![vec![1.0, -2.5]], 2.0).is_err());
        assert_eq!(RewardTable::tight(vec![vec![1.0, -2.5]]).unwrap().bound(), 2.5);
    }

    #[test]
    fn environment_validation() {
        let shape = VocabShape(vec![2]);
        let pref = PreferenceModel::constant(0.5).unwrap();
        assert!(Environment::unnamed(vec![1.0], Policy::uniform(&shape), pref.clone()).is_ok());
        assert!(Environment::unnamed(vec![0.9], Policy::uniform(&shape), pref.clone()).is_err());
        let det = Policy::deterministic(&shape, &[0]).unwrap();
        assert!(matches!(Environment::unnamed(vec![1.0], det, pref), Err(LabError::Domain(_))));
    }

    #[test]
    fn augmented_structure_is_checked() {
        let t = PreferenceTuple::new(0, 0, 1, 1).unwrap();
        assert!(PreferenceDataset::new(vec![t, t.swapped()], 0, true).is_ok());
        assert!(PreferenceDataset::new(vec![t, t], 0, true).is_err());
        assert!(PreferenceDataset::new(vec![t], 0, true).is_err());
        assert!(PreferenceTuple::new(0, 0, 1, 2).is_err());
    }
}
