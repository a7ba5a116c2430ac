//! Built-in invariant suite: exact unbiasedness enumerations, ψ symmetry,
//! gradient finite-difference checks, k3 properties and oracle identities.
//!
//! Each invariant is a named check returning pass/fail with a short detail
//! line; the report renders as JUnit-style XML.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::datagen::{augment_swapped, sample_dataset};
use crate::error::{LabError, Result};
use crate::estimators::{dr_estimate, EstimatorConfig, EstimatorKind, PsiKernel};
use crate::json::Document;
use crate::model::{Environment, Policy, PreferenceModel, PreferenceTuple};
use crate::nuisance::{fit_reward_bt_mle, FitOptions};
use crate::oracle;
use crate::rng::{derive_seed, StreamRng};
use crate::testbeds::{make_test_environments, TestBed};
use crate::train::{kl_k3, ppo_closed_form, ppo_objective, DrpoSurrogate, SampleMode, TrainConfig};

/// Tolerance of the exact enumeration identities.
pub const EXACT_TOL: f64 = 1e-10;
/// Bound on the finite-difference relative gradient error.
pub const FD_TOL: f64 = 1e-5;

/// Deliberate defects used to check that the suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of ψ's residual-correction term.
    FlipSignAugmentation,
}

impl FromStr for Fault {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip-sign-augmentation" => Ok(Fault::FlipSignAugmentation),
            other => Err(LabError::usage(format!("unknown fault '{other}' (known: flip-sign-augmentation)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelftestReport {
    pub results: Vec<InvariantResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn to_junit_xml(&self) -> String {
        let failures = self.failures().count();
        let total: f64 = self.results.iter().map(|r| r.seconds).sum();
        let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        let _ = writeln!(
            s,
            "<testsuite name=\"drpo-lab-selftest\" tests=\"{}\" failures=\"{failures}\" errors=\"0\" time=\"{total:.3}\">",
            self.results.len()
        );
        for r in &self.results {
            let _ = write!(s, "  <testcase classname=\"selftest\" name=\"{}\" time=\"{:.3}\"", xml_escape(r.name), r.seconds);
            if r.passed {
                let _ = writeln!(s, "><system-out>{}</system-out></testcase>", xml_escape(&r.detail));
            } else {
                let _ = writeln!(s, "><failure message=\"{}\"/></testcase>", xml_escape(&r.detail));
            }
        }
        s.push_str("</testsuite>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Random full-support policy with logits ~ scale·N(0, 1).
pub fn random_policy(shape: &crate::model::VocabShape, rng: &mut StreamRng, scale: f64) -> Policy {
    let logits = shape.0.iter().map(|&k| (0..k).map(|_| scale * rng.normal()).collect()).collect();
    Policy::from_logits(logits).expect("finite logits")
}

/// Largest relative error between [`DrpoSurrogate::grad`] and central
/// differences (step `h`) of [`DrpoSurrogate::loss`] over `draws` randomized
/// configurations. The error of a draw is ‖fd − grad‖∞ / max(‖grad‖∞, 1e-8).
pub fn gradient_check(draws: usize, seed: u64, h: f64) -> Result<f64> {
    let beds = make_test_environments(0)?;
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let mut rng = StreamRng::new(seed, d as u64);
        let bed = &beds[d % beds.len()];
        let shape = bed.env.shape();
        let policy = random_policy(&shape, &mut rng, 1.0);
        let ref_hat = random_policy(&shape, &mut rng, 1.0);
        let g_hat = if rng.bernoulli(0.5) { bed.env.preference().clone() } else { bed.wrong_g()? };
        let data = augment_swapped(&sample_dataset(&bed.env, 6, derive_seed(seed, &[d as u64, 1]))?)?;
        let cfg = TrainConfig {
            beta: 0.01 + 0.5 * rng.uniform(),
            sample_mode: if rng.bernoulli(0.5) { SampleMode::Exact } else { SampleMode::MonteCarlo },
            ..TrainConfig::default()
        };
        let s = DrpoSurrogate::build(data.tuples(), &policy, &ref_hat, &g_hat, &cfg, derive_seed(seed, &[d as u64, 2]))?;
        let grad = s.grad(&policy);
        let mut err: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for x in 0..shape.prompts() {
            for y in 0..shape.responses(x) {
                let at = |delta: f64| {
                    let mut l = policy.logits().to_vec();
                    l[x][y] += delta;
                    s.loss(&Policy::from_logits(l).expect("finite logits"))
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                err = err.max((fd - grad[x][y]).abs());
                scale = scale.max(grad[x][y].abs());
            }
        }
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> InvariantResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    InvariantResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

fn max_gap(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn enumerated(env: &Environment, kernel: &PsiKernel<'_>, kind: EstimatorKind) -> Result<f64> {
    Ok(oracle::expected_outcome(env, |t| kernel.contribution(kind, t, 0))?.mean)
}

/// Runs every invariant. With a fault injected, the affected invariants are
/// expected to fail.
pub fn run_selftest(fault: Option<Fault>) -> Result<SelftestReport> {
    let beds = make_test_environments(0)?;
    let cfg = EstimatorConfig::dr();
    let flip = fault == Some(Fault::FlipSignAugmentation);
    let with_kernel = |pi: &Policy, r: &Policy, g: &PreferenceModel, f: &dyn Fn(&PsiKernel<'_>) -> Result<f64>| -> Result<f64> {
        let k = PsiKernel::new(pi, Some(r), Some(g), &cfg)?;
        let k = if flip { k.with_flipped_augmentation() } else { k };
        f(&k)
    };
    let truth = |b: &TestBed| oracle::total_preference_exact(&b.env, &b.target);
    let first_three = &beds[..3];

    let mut results = Vec::new();

    results.push(check("reference_self_preference", || {
        let gap = max_gap(beds.iter().map(|b| oracle::total_preference_exact(&b.env, b.env.ref_policy()).map(|v| (v, 0.5))).collect::<Result<Vec<_>>>()?);
        Ok((gap < EXACT_TOL, format!("max |p*(ref) - 0.5| = {gap:.3e}")))
    }));

    results.push(check("preference_antisymmetry", || {
        let mut gap: f64 = 0.0;
        for b in &beds {
            let g = b.env.preference();
            for x in 0..b.env.shape().prompts() {
                let k = b.env.shape().responses(x);
                for y in 0..k {
                    for y2 in 0..k {
                        gap = gap.max((g.g(x, y, y2) + g.g(x, y2, y) - 1.0).abs());
                    }
                }
            }
        }
        Ok((gap < EXACT_TOL, format!("max |g(y,y') + g(y',y) - 1| = {gap:.3e}")))
    }));

    results.push(check("win_rate_complement", || {
        let mut rng = StreamRng::new(11, 0);
        let mut gap: f64 = 0.0;
        for b in &beds {
            let a = random_policy(&b.env.shape(), &mut rng, 1.0);
            let c = random_policy(&b.env.shape(), &mut rng, 1.0);
            gap = gap.max((oracle::win_rate_exact(&b.env, &a, &c)? + oracle::win_rate_exact(&b.env, &c, &a)? - 1.0).abs());
        }
        Ok((gap < EXACT_TOL, format!("max |W(a,b) + W(b,a) - 1| = {gap:.3e}")))
    }));

    results.push(check("is_unbiased_true_reference", || {
        let mut gaps = Vec::new();
        for b in first_three {
            let v = with_kernel(&b.target, b.env.ref_policy(), b.env.preference(), &|k| enumerated(&b.env, k, EstimatorKind::Is))?;
            gaps.push((v, truth(b)?));
        }
        let gap = max_gap(gaps);
        Ok((gap < EXACT_TOL, format!("max |E[IS] - p*| = {gap:.3e}")))
    }));

    results.push(check("dm_unbiased_true_preference", || {
        let mut gaps = Vec::new();
        for b in first_three {
            let v = with_kernel(&b.target, &b.wrong_ref, b.env.preference(), &|k| enumerated(&b.env, k, EstimatorKind::Dm))?;
            gaps.push((v, truth(b)?));
        }
        let gap = max_gap(gaps);
        Ok((gap < EXACT_TOL, format!("max |E[DM] - p*| = {gap:.3e}")))
    }));

    results.push(check("psi_unbiased_true_nuisances", || {
        let mut gaps = Vec::new();
        for b in &beds {
            let v = with_kernel(&b.target, b.env.ref_policy(), b.env.preference(), &|k| enumerated(&b.env, k, EstimatorKind::Dr))?;
            gaps.push((v, truth(b)?));
        }
        let gap = max_gap(gaps);
        Ok((gap < EXACT_TOL, format!("max |E[psi] - p*| = {gap:.3e}")))
    }));

    results.push(check("double_robustness", || {
        let mut gaps = Vec::new();
        for b in &beds {
            let p = truth(b)?;
            let wrong_g = b.wrong_g()?;
            let a = with_kernel(&b.target, &b.wrong_ref, b.env.preference(), &|k| enumerated(&b.env, k, EstimatorKind::Dr))?;
            let c = with_kernel(&b.target, b.env.ref_policy(), &wrong_g, &|k| enumerated(&b.env, k, EstimatorKind::Dr))?;
            gaps.push((a, p));
            gaps.push((c, p));
        }
        let gap = max_gap(gaps);
        Ok((gap < EXACT_TOL, format!("max |E[psi] - p*| with one wrong nuisance = {gap:.3e}")))
    }));

    results.push(check("both_wrong_bias_visible", || {
        let b = &beds[3];
        let wrong_g = b.wrong_g()?;
        let v = with_kernel(&b.target, &b.wrong_ref, &wrong_g, &|k| enumerated(&b.env, k, EstimatorKind::Dr))?;
        let bias = (v - truth(b)?).abs();
        Ok((bias >= 0.05, format!("|bias| with both nuisances wrong = {bias:.4}")))
    }));

    results.push(check("psi_swap_symmetry", || {
        let mut gap: f64 = 0.0;
        for b in &beds {
            let wrong_g = b.wrong_g()?;
            let shape = b.env.shape();
            let k = PsiKernel::new(&b.target, Some(&b.wrong_ref), Some(&wrong_g), &cfg)?;
            for x in 0..shape.prompts() {
                for y1 in 0..shape.responses(x) {
                    for y2 in 0..shape.responses(x) {
                        for z in [0u8, 1] {
                            let t = PreferenceTuple::new(x, y1, y2, z)?;
                            gap = gap.max((k.psi(&t, 0)? - k.psi(&t.swapped(), 0)?).abs());
                        }
                    }
                }
            }
        }
        Ok((gap < 1e-12, format!("max |psi(t) - psi(swap t)| = {gap:.3e}")))
    }));

    results.push(check("augmentation_invariance", || {
        let b = &beds[1];
        let d = sample_dataset(&b.env, 300, 5)?;
        let wrong_g = b.wrong_g()?;
        let a = dr_estimate(&d, &b.target, &b.wrong_ref, &wrong_g, &cfg)?.value;
        let c = dr_estimate(&augment_swapped(&d)?, &b.target, &b.wrong_ref, &wrong_g, &cfg)?.value;
        Ok(((a - c).abs() < 1e-12, format!("|DR(D) - DR(aug D)| = {:.3e}", (a - c).abs())))
    }));

    results.push(check("seb_matches_psi_variance", || {
        let mut gap: f64 = 0.0;
        for b in &beds {
            let k = PsiKernel::new(&b.target, Some(b.env.ref_policy()), Some(b.env.preference()), &cfg)?;
            let m = oracle::expected_psi(&b.env, &k)?;
            gap = gap.max((oracle::seb_exact(&b.env, &b.target, 250)? - m.variance / 250.0).abs());
        }
        Ok((gap < 1e-14, format!("max |SEB - Var(psi)/n| = {gap:.3e}")))
    }));

    results.push(check("drpo_gradient_finite_difference", || {
        let worst = gradient_check(50, 17, 1e-6)?;
        Ok((worst < FD_TOL, format!("max relative error over 50 draws = {worst:.3e}")))
    }));

    results.push(check("k3_nonnegative", || {
        let mut rng = StreamRng::new(23, 0);
        let mut min = f64::INFINITY;
        for _ in 0..10_000 {
            let shape = crate::model::VocabShape(vec![5]);
            let p = random_policy(&shape, &mut rng, 2.0);
            let q = random_policy(&shape, &mut rng, 2.0);
            let y = rng.categorical(p.probs(0));
            min = min.min(kl_k3(&p, &q, 0, &[y])?);
        }
        Ok((min >= 0.0, format!("min k3 over 10000 draws = {min:.3e}")))
    }));

    results.push(check("k3_unbiased", || {
        let mut rng = StreamRng::new(29, 0);
        let mut gap: f64 = 0.0;
        for b in &beds {
            let shape = b.env.shape();
            let p = random_policy(&shape, &mut rng, 1.0);
            let q = random_policy(&shape, &mut rng, 1.0);
            let mut enumerated = 0.0;
            for (x, w) in b.env.prompt_weights().iter().enumerate() {
                for y in 0..shape.responses(x) {
                    enumerated += w * p.prob(x, y) * kl_k3(&p, &q, x, &[y])?;
                }
            }
            gap = gap.max((enumerated - oracle::kl_exact(&b.env, &p, &q)?).abs());
        }
        Ok((gap < EXACT_TOL, format!("max |E[k3] - KL| = {gap:.3e}")))
    }));

    results.push(check("kl_zero_at_reference", || {
        let mut worst: f64 = 0.0;
        for b in &beds {
            worst = worst.max(oracle::kl_exact(&b.env, b.env.ref_policy(), b.env.ref_policy())?);
        }
        Ok((worst < 1e-15, format!("max KL(ref || ref) = {worst:.3e}")))
    }));

    results.push(check("optimum_dominates", || {
        let mut rng = StreamRng::new(31, 0);
        let mut worst = f64::INFINITY;
        for b in &beds {
            let best = oracle::optimal_policy_enumerate(&b.env)?.value;
            for _ in 0..20 {
                let p = random_policy(&b.env.shape(), &mut rng, 3.0);
                worst = worst.min(best - oracle::total_preference_exact(&b.env, &p)?);
            }
        }
        Ok((worst >= -1e-12, format!("min regret of random policies = {worst:.3e}")))
    }));

    results.push(check("ppo_closed_form_optimal", || {
        let b = &beds[1];
        let r = b.env.bt_reward().ok_or_else(|| LabError::invalid("E2 must be Bradley-Terry"))?;
        let beta = 0.3;
        let pi = ppo_closed_form(&b.env.shape(), r, b.env.ref_policy(), beta)?;
        let mut rng = StreamRng::new(37, 0);
        let mut worst = f64::INFINITY;
        for x in 0..b.env.shape().prompts() {
            let base = ppo_objective(&pi, r, b.env.ref_policy(), beta, x);
            for _ in 0..20 {
                let mut l = pi.logits().to_vec();
                for v in l[x].iter_mut() {
                    *v += 0.1 * rng.normal();
                }
                let q = Policy::from_logits(l)?;
                worst = worst.min(base - ppo_objective(&q, r, b.env.ref_policy(), beta, x));
            }
        }
        Ok((worst >= -1e-12, format!("min objective drop under perturbation = {worst:.3e}")))
    }));

    results.push(check("bt_mle_convergence_certificate", || {
        let b = &beds[1];
        let d = sample_dataset(&b.env, 2000, 41)?;
        let fit = fit_reward_bt_mle(&b.env.shape(), &d, &FitOptions::default())?;
        let (g0, g1) = (fit.fit_meta.initial_grad_norm.unwrap_or(f64::NAN), fit.fit_meta.final_grad_norm.unwrap_or(f64::NAN));
        Ok((g1 < 1e-6 * (1.0 + g0), format!("final grad norm {g1:.3e}, initial {g0:.3e}")))
    }));

    results.push(check("sampling_deterministic", || {
        let b = &beds[0];
        let same = sample_dataset(&b.env, 500, 3)? == sample_dataset(&b.env, 500, 3)?;
        Ok((same, "same seed gives identical datasets".into()))
    }));

    results.push(check("json_round_trip_bit_exact", || {
        let b = &beds[1];
        let text = b.to_json()?;
        let back = TestBed::from_json(&text)?;
        Ok((back == *b && back.to_json()? == text, "test bed survives write/read/write".into()))
    }));

    Ok(SelftestReport { results })
}
