//! Nuisance fitting: BT-MLE and table estimates converge to the generating
//! model, with convergence certificates.

use drpo_core::datagen::sample_dataset;
use drpo_core::nuisance::{bt_mle_grad_norm, fit_gpm_table, fit_reference_policy, fit_reward_bt_mle, FitOptions};
use drpo_core::testbeds::{canonical_env, make_test_environments};

#[test]
fn bt_mle_recovers_the_canonical_reward_gap() {
    let env = canonical_env().unwrap();
    let data = sample_dataset(&env, 50_000, 21).unwrap();
    let opts = FitOptions::default();
    let fit = fit_reward_bt_mle(&env.shape(), &data, &opts).unwrap();
    let gap = fit.model.get(0, 0) - fit.model.get(0, 1);
    assert!((gap - 4f64.ln()).abs() < 0.1, "gap {gap}");
    let meta = &fit.fit_meta;
    let (g0, g1) = (meta.initial_grad_norm.unwrap(), meta.final_grad_norm.unwrap());
    assert!(g1 <= 1e-9 * (1.0 + g0), "certificate {g1} vs {g0}");
    let independent = bt_mle_grad_norm(&env.shape(), &data, &fit.model, opts.l2).unwrap();
    assert!(independent <= 1e-8 * (1.0 + g0));
}

#[test]
fn gpm_table_is_consistent_on_an_intransitive_environment() {
    let bed = make_test_environments(0).unwrap().into_iter().find(|b| b.env.bt_reward().is_none()).unwrap();
    let env = &bed.env;
    let mut last = f64::INFINITY;
    for n in [2_000, 20_000, 200_000] {
        let data = sample_dataset(env, n, 5).unwrap();
        let fit = fit_gpm_table(&env.shape(), &data, 0.5).unwrap();
        let mut worst: f64 = 0.0;
        for x in 0..env.shape().prompts() {
            let k = env.shape().responses(x);
            for a in 0..k {
                for b in 0..k {
                    worst = worst.max((fit.model.g(x, a, b) - env.preference().g(x, a, b)).abs());
                    assert!((fit.model.g(x, a, b) + fit.model.g(x, b, a) - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(worst < last, "n = {n}: {worst} did not shrink from {last}");
        last = worst;
    }
    assert!(last < 0.05, "{last}");
}

#[test]
fn fitted_reference_converges() {
    let bed = &make_test_environments(0).unwrap()[1];
    let env = &bed.env;
    let data = sample_dataset(env, 100_000, 8).unwrap();
    let fit = fit_reference_policy(&env.shape(), &data, 1.0).unwrap();
    for x in 0..env.shape().prompts() {
        for y in 0..env.shape().responses(x) {
            assert!((fit.model.prob(x, y) - env.ref_policy().prob(x, y)).abs() < 0.02);
        }
    }
}
