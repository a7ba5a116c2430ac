//! Preference-evaluation estimators of a policy's total preference over the
//! reference policy: direct method (DM), importance sampling (IS) and the
//! doubly robust (DR) estimator built from the pointwise estimating function ψ.
//!
//! For a tuple `(x, y1, y2, z)`:
//!
//! ```text
//! DM(t) = 1/2 [ E_{y~π} ĝ(x,y,y1) + E_{y~π} ĝ(x,y,y2) ]
//! IS(t) = 1/2 [ w(y1) z + w(y2) (1 - z) ]
//! ψ(t)  = DM(t) + 1/2 (w(y1) - w(y2)) (z - ĝ(x,y1,y2))
//! ```
//!
//! with `w(y) = π(y|x) / π̂_ref(y|x)`, optionally capped at `clip_max`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Policy, PreferenceDataset, PreferenceModel, PreferenceTuple, VocabShape};
use crate::nuisance::NuisanceProvenance;
use crate::par;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dm,
    Is,
    Dr,
}

impl std::str::FromStr for EstimatorKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dm" => Ok(Self::Dm),
            "is" => Ok(Self::Is),
            "dr" => Ok(Self::Dr),
            other => Err(LabError::usage(format!("unknown estimator '{other}' (dm|is|dr)"))),
        }
    }
}

/// How the direct-method expectation over `y ~ π` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DmMode {
    /// Sum over the vocabulary.
    #[default]
    Exact,
    /// Average over `samples` draws per tuple; tuple `i` uses stream `i` of `seed`.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Upper cap on importance ratios; `None` leaves them unclipped.
    #[serde(default)]
    pub clip_max: Option<f64>,
    #[serde(default)]
    pub dm_mode: DmMode,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self { kind, clip_max: None, dm_mode: DmMode::Exact }
    }

    pub fn dr() -> Self {
        Self::new(EstimatorKind::Dr)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_max {
            if !(c.is_finite() && c > 0.0) {
                return Err(LabError::invalid(format!("clip_max must be positive, got {c}")));
            }
        }
        if let DmMode::MonteCarlo { samples, .. } = self.dm_mode {
            if samples == 0 {
                return Err(LabError::invalid("monte_carlo dm_mode needs at least one sample"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub value: f64,
    /// Standard error of the mean of the per-tuple contributions.
    pub std_error: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_tuple: Option<Vec<f64>>,
    pub config: EstimatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<NuisanceProvenance>,
}

impl EstimateReport {
    pub(crate) fn from_values(values: Vec<f64>, config: EstimatorConfig) -> Self {
        let n = values.len();
        let value = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            value,
            std_error: (var / n as f64).sqrt(),
            n,
            per_tuple: Some(values),
            config,
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, p: NuisanceProvenance) -> Self {
        self.provenance = Some(p);
        self
    }

    /// One-line CSV record: `estimator,value,std_error,n`.
    pub fn csv_line(&self) -> String {
        let kind = match self.config.kind {
            EstimatorKind::Dm => "dm",
            EstimatorKind::Is => "is",
            EstimatorKind::Dr => "dr",
        };
        format!("{kind},{:.17e},{:.17e},{}", self.value, self.std_error, self.n)
    }
}

impl crate::json::Document for EstimateReport {
    const KIND: &'static str = "estimate_report";
}

/// Pointwise DM / IS / ψ evaluation with shapes validated once up front.
///
/// In exact mode the table `E_{y~π} ĝ(x, y, y')` is precomputed per prompt so
/// each tuple costs O(1).
pub struct PsiKernel<'a> {
    policy: &'a Policy,
    ref_hat: Option<&'a Policy>,
    g_hat: Option<&'a PreferenceModel>,
    clip_max: Option<f64>,
    dm_mode: DmMode,
    dm_table: Option<Vec<Vec<f64>>>,
    augmentation_sign: f64,
}

impl<'a> PsiKernel<'a> {
    pub fn new(
        policy: &'a Policy,
        ref_hat: Option<&'a Policy>,
        g_hat: Option<&'a PreferenceModel>,
        cfg: &EstimatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = policy.shape();
        if let Some(r) = ref_hat {
            shape.ensure_same(&r.shape(), "estimated reference policy")?;
            r.ensure_reference("estimated reference policy")?;
        }
        if let Some(g) = g_hat {
            g.check_shape(&shape)?;
        }
        let dm_table = match (g_hat, cfg.dm_mode) {
            (Some(g), DmMode::Exact) => Some(dm_table(policy, g, &shape)),
            _ => None,
        };
        Ok(Self {
            policy,
            ref_hat,
            g_hat,
            clip_max: cfg.clip_max,
            dm_mode: cfg.dm_mode,
            dm_table,
            augmentation_sign: 1.0,
        })
    }

    /// Fault injection for the self-test mutation check: flips the sign of
    /// the augmentation (residual) term of ψ.
    #[doc(hidden)]
    pub fn with_flipped_augmentation(mut self) -> Self {
        self.augmentation_sign = -1.0;
        self
    }

    pub fn shape(&self) -> VocabShape {
        self.policy.shape()
    }

    fn g_hat(&self) -> Result<&PreferenceModel> {
        self.g_hat.ok_or_else(|| LabError::usage("estimator needs a preference model"))
    }

    fn ref_hat(&self) -> Result<&Policy> {
        self.ref_hat.ok_or_else(|| LabError::usage("estimator needs an estimated reference policy"))
    }

    /// Clipped importance ratio π(y|x)/π̂_ref(y|x).
    #[inline]
    pub fn ratio(&self, prompt: usize, y: usize) -> Result<f64> {
        let r = self.policy.prob(prompt, y) / self.ref_hat()?.prob(prompt, y);
        Ok(match self.clip_max {
            Some(c) => r.min(c),
            None => r,
        })
    }

    /// Direct-method contribution of one tuple. `stream` addresses the Monte
    /// Carlo draws and is ignored in exact mode.
    pub fn dm(&self, t: &PreferenceTuple, stream: u64) -> Result<f64> {
        let g = self.g_hat()?;
        match (&self.dm_table, self.dm_mode) {
            (Some(table), _) => Ok(0.5 * (table[t.prompt][t.y1] + table[t.prompt][t.y2])),
            (None, DmMode::MonteCarlo { samples, seed }) => {
                let mut rng = StreamRng::new(seed, stream);
                let probs = self.policy.probs(t.prompt);
                let mut acc = 0.0;
                for _ in 0..samples {
                    let y = rng.categorical(probs);
                    acc += g.g(t.prompt, y, t.y1) + g.g(t.prompt, y, t.y2);
                }
                Ok(0.5 * acc / samples as f64)
            }
            (None, DmMode::Exact) => unreachable!("exact table is built whenever g_hat is present"),
        }
    }

    pub fn is(&self, t: &PreferenceTuple) -> Result<f64> {
        let z = t.label();
        Ok(0.5 * (self.ratio(t.prompt, t.y1)? * z + self.ratio(t.prompt, t.y2)? * (1.0 - z)))
    }

    /// The augmentation (residual-correction) term of ψ.
    pub fn augmentation(&self, t: &PreferenceTuple) -> Result<f64> {
        let g = self.g_hat()?;
        let resid = t.label() - g.g(t.prompt, t.y1, t.y2);
        let w = self.ratio(t.prompt, t.y1)? - self.ratio(t.prompt, t.y2)?;
        Ok(self.augmentation_sign * 0.5 * w * resid)
    }

    pub fn psi(&self, t: &PreferenceTuple, stream: u64) -> Result<f64> {
        Ok(self.dm(t, stream)? + self.augmentation(t)?)
    }

    /// Per-tuple contribution of the estimator `kind`.
    pub fn contribution(&self, kind: EstimatorKind, t: &PreferenceTuple, stream: u64) -> Result<f64> {
        match kind {
            EstimatorKind::Dm => self.dm(t, stream),
            EstimatorKind::Is => self.is(t),
            EstimatorKind::Dr => self.psi(t, stream),
        }
    }
}

fn dm_table(policy: &Policy, g: &PreferenceModel, shape: &VocabShape) -> Vec<Vec<f64>> {
    (0..shape.prompts())
        .map(|x| {
            let probs = policy.probs(x);
            (0..shape.responses(x))
                .map(|yp| probs.iter().enumerate().map(|(y, p)| p * g.g(x, y, yp)).sum())
                .collect()
        })
        .collect()
}

fn run(data: &PreferenceDataset, kernel: &PsiKernel<'_>, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    if data.is_empty() {
        return Err(LabError::usage("cannot estimate from an empty dataset"));
    }
    data.validate_against(&kernel.shape())?;
    let tuples = data.tuples();
    let values = par::try_map_indexed(tuples.len(), |i| kernel.contribution(cfg.kind, &tuples[i], i as u64))?;
    Ok(EstimateReport::from_values(values, *cfg))
}

pub fn dm_estimate(
    data: &PreferenceDataset,
    policy: &Policy,
    g_hat: &PreferenceModel,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let cfg = EstimatorConfig { kind: EstimatorKind::Dm, ..*cfg };
    let kernel = PsiKernel::new(policy, None, Some(g_hat), &cfg)?;
    run(data, &kernel, &cfg)
}

pub fn is_estimate(
    data: &PreferenceDataset,
    policy: &Policy,
    ref_hat: &Policy,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let cfg = EstimatorConfig { kind: EstimatorKind::Is, ..*cfg };
    let kernel = PsiKernel::new(policy, Some(ref_hat), None, &cfg)?;
    run(data, &kernel, &cfg)
}

/// ψ for a single tuple (Monte Carlo draws, if any, use stream 0).
pub fn psi_eval(
    tuple: &PreferenceTuple,
    policy: &Policy,
    ref_hat: &Policy,
    g_hat: &PreferenceModel,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    policy.shape().check_tuple(tuple.prompt, tuple.y1, tuple.y2)?;
    PsiKernel::new(policy, Some(ref_hat), Some(g_hat), cfg)?.psi(tuple, 0)
}

pub fn dr_estimate(
    data: &PreferenceDataset,
    policy: &Policy,
    ref_hat: &Policy,
    g_hat: &PreferenceModel,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let cfg = EstimatorConfig { kind: EstimatorKind::Dr, ..*cfg };
    let kernel = PsiKernel::new(policy, Some(ref_hat), Some(g_hat), &cfg)?;
    run(data, &kernel, &cfg)
}

/// Dispatches on `cfg.kind`.
pub fn estimate(
    data: &PreferenceDataset,
    policy: &Policy,
    ref_hat: &Policy,
    g_hat: &PreferenceModel,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    match cfg.kind {
        EstimatorKind::Dm => dm_estimate(data, policy, g_hat, cfg),
        EstimatorKind::Is => is_estimate(data, policy, ref_hat, cfg),
        EstimatorKind::Dr => dr_estimate(data, policy, ref_hat, g_hat, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::augment_swapped;
    use crate::model::*;
    use crate::rng::StreamRng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn g_canonical() -> PreferenceModel {
        PreferenceModel::table(vec![vec![vec![0.5, 0.8], vec![0.2, 0.5]]]).unwrap()
    }

    fn half() -> Policy {
        Policy::uniform(&VocabShape(vec![2]))
    }

    fn on_a() -> Policy {
        Policy::deterministic(&VocabShape(vec![2]), &[0]).unwrap()
    }

    fn single(t: (usize, usize, usize, u8)) -> PreferenceDataset {
        PreferenceDataset::new(vec![PreferenceTuple::new(t.0, t.1, t.2, t.3).unwrap()], 0, false).unwrap()
    }

    #[test]
    fn dm_examples() {
        let c = PreferenceModel::constant(0.5).unwrap();
        let d = single((0, 0, 1, 1));
        assert_eq!(dm_estimate(&d, &on_a(), &c, &EstimatorConfig::dr()).unwrap().value, 0.5);
        let v = dm_estimate(&d, &on_a(), &g_canonical(), &EstimatorConfig::dr()).unwrap().value;
        assert_abs_diff_eq!(v, 0.65, epsilon = 1e-15);
    }

    #[test]
    fn dm_monte_carlo_converges_to_exact() {
        let pi = Policy::from_probs(&[vec![0.3, 0.7]]).unwrap();
        let d = single((0, 0, 1, 1));
        let exact = dm_estimate(&d, &pi, &g_canonical(), &EstimatorConfig::dr()).unwrap().value;
        let cfg = EstimatorConfig {
            kind: EstimatorKind::Dm,
            clip_max: None,
            dm_mode: DmMode::MonteCarlo { samples: 10_000, seed: 4 },
        };
        let mc = dm_estimate(&d, &pi, &g_canonical(), &cfg).unwrap().value;
        // per-draw contribution is 1/2 (g(y,a) + g(y,b)); its sd is bounded by 0.15 here
        let se = 0.15 / 100.0;
        assert!((mc - exact).abs() < 3.0 * se, "mc {mc} exact {exact}");
    }

    #[test]
    fn is_examples() {
        let d = single((0, 0, 1, 1));
        assert_eq!(is_estimate(&d, &half(), &half(), &EstimatorConfig::dr()).unwrap().value, 0.5);
        assert_eq!(is_estimate(&d, &on_a(), &half(), &EstimatorConfig::dr()).unwrap().value, 1.0);

        // ratio 4 capped at 2.5
        let reff = Policy::from_probs(&[vec![0.25, 0.75]]).unwrap();
        let cfg = EstimatorConfig { clip_max: Some(2.5), ..EstimatorConfig::dr() };
        assert_eq!(is_estimate(&d, &on_a(), &reff, &cfg).unwrap().value, 0.5 * 2.5);
    }

    #[test]
    fn zero_reference_is_a_domain_error() {
        let d = single((0, 0, 1, 1));
        assert!(matches!(is_estimate(&d, &half(), &on_a(), &EstimatorConfig::dr()), Err(LabError::Domain(_))));
    }

    #[test]
    fn psi_examples() {
        let t = PreferenceTuple::new(0, 0, 1, 1).unwrap();
        let v = psi_eval(&t, &on_a(), &half(), &g_canonical(), &EstimatorConfig::dr()).unwrap();
        assert_abs_diff_eq!(v, 0.85, epsilon = 1e-15);

        let c = PreferenceModel::constant(0.5).unwrap();
        for z in [0, 1] {
            let t = PreferenceTuple::new(0, 0, 1, z).unwrap();
            assert_eq!(psi_eval(&t, &half(), &half(), &c, &EstimatorConfig::dr()).unwrap(), 0.5);
        }
        let d = single((0, 0, 1, 1));
        let r = dr_estimate(&d, &on_a(), &half(), &g_canonical(), &EstimatorConfig::dr()).unwrap();
        assert_abs_diff_eq!(r.value, 0.85, epsilon = 1e-15);
        assert_eq!(r.per_tuple.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn bad_config_rejected() {
        let d = single((0, 0, 1, 1));
        let cfg = EstimatorConfig { clip_max: Some(0.0), ..EstimatorConfig::dr() };
        assert!(dr_estimate(&d, &half(), &half(), &g_canonical(), &cfg).is_err());
        let cfg = EstimatorConfig { dm_mode: DmMode::MonteCarlo { samples: 0, seed: 0 }, ..EstimatorConfig::dr() };
        assert!(dr_estimate(&d, &half(), &half(), &g_canonical(), &cfg).is_err());
        let out_of_range = single((0, 0, 2, 1));
        assert!(matches!(
            dr_estimate(&out_of_range, &half(), &half(), &g_canonical(), &EstimatorConfig::dr()),
            Err(LabError::Index(_))
        ));
    }

    fn random_setup(seed: u64) -> (Policy, Policy, PreferenceModel) {
        let mut rng = StreamRng::new(seed, 0);
        let k = 4;
        let pi = Policy::from_logits(vec![(0..k).map(|_| rng.normal()).collect()]).unwrap();
        let rf = Policy::from_logits(vec![(0..k).map(|_| rng.normal()).collect()]).unwrap();
        let mut m = vec![vec![0.5; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                m[i][j] = rng.uniform();
                m[j][i] = 1.0 - m[i][j];
            }
        }
        (pi, rf, PreferenceModel::table(vec![m]).unwrap())
    }

    proptest! {
        #[test]
        fn psi_is_swap_symmetric(seed in 0u64..500, y1 in 0usize..4, y2 in 0usize..4, z in 0u8..2, clip in proptest::option::of(0.5f64..5.0)) {
            let (pi, rf, g) = random_setup(seed);
            let cfg = EstimatorConfig { clip_max: clip, ..EstimatorConfig::dr() };
            let t = PreferenceTuple::new(0, y1, y2, z).unwrap();
            let a = psi_eval(&t, &pi, &rf, &g, &cfg).unwrap();
            let b = psi_eval(&t.swapped(), &pi, &rf, &g, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-14, "{} vs {}", a, b);
        }

        #[test]
        fn augmented_dr_matches_original(seed in 0u64..200) {
            let (pi, rf, g) = random_setup(seed);
            let mut rng = StreamRng::new(seed, 1);
            let tuples: Vec<_> = (0..25)
                .map(|_| PreferenceTuple::new(0, rng.categorical(&[0.25; 4]), rng.categorical(&[0.25; 4]), rng.bernoulli(0.5) as u8).unwrap())
                .collect();
            let d = PreferenceDataset::new(tuples, 0, false).unwrap();
            let a = dr_estimate(&d, &pi, &rf, &g, &EstimatorConfig::dr()).unwrap().value;
            let b = dr_estimate(&augment_swapped(&d).unwrap(), &pi, &rf, &g, &EstimatorConfig::dr()).unwrap().value;
            prop_assert!((a - b).abs() < 1e-14);
        }
    }
}
