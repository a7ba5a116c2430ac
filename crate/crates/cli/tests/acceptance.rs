//! Acceptance run: nine checks, one PASS/FAIL line each. Exits nonzero if
//! any check fails. Statistical checks run the built-in presets at full size.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use drpo_core::datagen::{augment_swapped, sample_dataset};
use drpo_core::estimators::{EstimatorConfig, EstimatorKind, PsiKernel};
use drpo_core::experiments::{self, Preset, RunReport};
use drpo_core::model::Policy;
use drpo_core::oracle::{self, expected_outcome};
use drpo_core::rng::StreamRng;
use drpo_core::testbeds::{make_test_environments, TestBed};
use drpo_core::train::{drpo_loss_and_grad, kl_k3, DrpoSurrogate, SampleMode, TrainConfig};

type Outcome = Result<(bool, String), String>;
type Check = (&'static str, fn() -> Outcome);

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn beds() -> Result<Vec<TestBed>, String> {
    make_test_environments(0).map_err(err)
}

fn random_policy(bed: &TestBed, rng: &mut StreamRng, scale: f64) -> Policy {
    Policy::from_logits(bed.env.shape().0.iter().map(|&k| (0..k).map(|_| scale * rng.normal()).collect()).collect()).unwrap()
}

fn compare_preset(name: &str) -> Result<RunReport, String> {
    match experiments::preset(name).map_err(err)? {
        Preset::Compare(cfg) => experiments::optimization_comparison(&cfg).map_err(err),
        _ => Err(format!("{name} is not a comparison preset")),
    }
}

fn c1_enumeration() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for b in beds()?.iter().take(3) {
        let truth = oracle::total_preference_exact(&b.env, &b.target).map_err(err)?;
        let true_ref = b.env.ref_policy();
        let true_g = b.env.preference();
        let wrong_g = b.wrong_g().map_err(err)?;
        let cases = [
            (EstimatorKind::Is, Some(true_ref), None),
            (EstimatorKind::Dm, None, Some(true_g)),
            (EstimatorKind::Dr, Some(true_ref), Some(true_g)),
            (EstimatorKind::Dr, Some(true_ref), Some(&wrong_g)),
            (EstimatorKind::Dr, Some(&b.wrong_ref), Some(true_g)),
        ];
        for (kind, r, g) in cases {
            let k = PsiKernel::new(&b.target, r, g, &EstimatorConfig::new(kind)).map_err(err)?;
            let m = expected_outcome(&b.env, |t| k.contribution(kind, t, 0)).map_err(err)?.mean;
            worst = worst.max((m - truth).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-10 && secs < 1.0, format!("max |E - p*| = {worst:.2e} on E1-E3, {secs:.3}s")))
}

fn c2_double_robustness() -> Outcome {
    let start = Instant::now();
    let Preset::Sweep(cfg) = experiments::preset("double-robustness").map_err(err)? else {
        return Err("double-robustness is not a sweep preset".into());
    };
    let bed = cfg.env.load().map_err(err)?;
    let r = experiments::mse_sweep(&cfg).map_err(err)?;
    let (lo, hi) = (cfg.sample_sizes[0], *cfg.sample_sizes.last().unwrap());
    let mse = |v: &str, n| r.row(v, n).map(|row| row.mse).ok_or(format!("missing row {v} {n}"));
    let mut ok = true;
    let mut ratios = Vec::new();
    for v in ["both_correct", "g_wrong", "ref_wrong"] {
        let ratio = mse(v, hi)? / mse(v, lo)?;
        ok &= ratio < 0.2;
        ratios.push(format!("{v} {ratio:.3}"));
    }
    let bias2 = bed.both_wrong_bias.powi(2);
    let bw = mse("both_wrong", hi)?;
    let bc = mse("both_correct", hi)?;
    ok &= bias2 >= 0.0025 && bw > bias2 && bw > 5.0 * bc;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    Ok((
        ok,
        format!("MSE ratio n={hi}/n={lo}: {}; both_wrong MSE {bw:.4e} vs bias^2 {bias2:.4e} and 5x both_correct {:.4e}; {secs:.1}s", ratios.join(", "), 5.0 * bc),
    ))
}

fn c3_efficiency() -> Outcome {
    let start = Instant::now();
    let Preset::Efficiency(cfg) = experiments::preset("efficiency").map_err(err)? else {
        return Err("efficiency is not an efficiency preset".into());
    };
    let r = experiments::efficiency_study(&cfg).map_err(err)?;
    let row = r.row("both_correct", cfg.sample_sizes[0]).ok_or("missing both_correct row")?;
    let secs = start.elapsed().as_secs_f64();
    let ok = (0.9..=1.1).contains(&row.mse_over_seb) && secs < 120.0;
    Ok((ok, format!("MSE/SEB = {:.4} at n={}, R={}; {secs:.1}s", row.mse_over_seb, row.n, row.replications)))
}

fn c4_gradient() -> Outcome {
    let start = Instant::now();
    let beds = beds()?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for d in 0..50u64 {
        let mut rng = StreamRng::new(2024, d);
        let bed = &beds[d as usize % beds.len()];
        let policy = random_policy(bed, &mut rng, 1.0);
        let ref_hat = random_policy(bed, &mut rng, 1.0);
        let g = if d % 2 == 0 { bed.env.preference().clone() } else { bed.wrong_g().map_err(err)? };
        let data = augment_swapped(&sample_dataset(&bed.env, 8, d).map_err(err)?).map_err(err)?;
        let mode = if d % 4 < 2 { SampleMode::Exact } else { SampleMode::MonteCarlo };
        let cfg = TrainConfig { beta: 0.01 + 0.5 * rng.uniform(), sample_mode: mode, ..TrainConfig::default() };
        let batch: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = drpo_loss_and_grad(&data, &batch, &policy, &ref_hat, &g, &cfg, d).map_err(err)?;
        let s = DrpoSurrogate::build(data.tuples(), &policy, &ref_hat, &g, &cfg, d).map_err(err)?;
        let (mut e, mut scale) = (0f64, 1e-8f64);
        for (x, row) in grad.iter().enumerate() {
            for (y, gv) in row.iter().enumerate() {
                let at = |delta: f64| {
                    let mut l = policy.logits().to_vec();
                    l[x][y] += delta;
                    s.loss(&Policy::from_logits(l).unwrap())
                };
                e = e.max(((at(h) - at(-h)) / (2.0 * h) - gv).abs());
                scale = scale.max(gv.abs());
            }
        }
        worst = worst.max(e / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-5 && secs < 10.0, format!("max relative error {worst:.2e} over 50 draws; {secs:.2}s")))
}

fn c5_k3() -> Outcome {
    let mut rng = StreamRng::new(55, 0);
    let beds = beds()?;
    let mut negatives = 0;
    for i in 0..10_000 {
        let bed = &beds[i % beds.len()];
        let (p, q) = (random_policy(bed, &mut rng, 2.0), random_policy(bed, &mut rng, 2.0));
        let x = rng.categorical(bed.env.prompt_weights());
        let y = rng.categorical(p.probs(x));
        if kl_k3(&p, &q, x, &[y]).map_err(err)? < 0.0 {
            negatives += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for bed in &beds {
        let (p, q) = (random_policy(bed, &mut rng, 1.5), random_policy(bed, &mut rng, 1.5));
        let mut e = 0.0;
        for (x, f) in bed.env.prompt_weights().iter().enumerate() {
            for (y, py) in p.probs(x).iter().enumerate() {
                e += f * py * kl_k3(&p, &q, x, &[y]).map_err(err)?;
            }
        }
        worst = worst.max((e - oracle::kl_exact(&bed.env, &p, &q).map_err(err)?).abs());
    }
    Ok((negatives == 0 && worst < 1e-10, format!("{negatives} negative values in 10000 draws; max |E k3 - KL| = {worst:.2e}")))
}

fn c6_consistency() -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["consistency-e1", "consistency-e3"] {
        let r = compare_preset(name)?;
        let m = r.methods.first().ok_or("no method summary")?;
        let good = m.regrets.iter().filter(|v| **v < 0.02).count();
        let frac = good as f64 / m.regrets.len() as f64;
        ok &= m.regrets.len() == 50 && frac >= 0.9;
        let max = m.regrets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        parts.push(format!("{}: {good}/{} below 0.02 (mean {:.4}, max {max:.4})", r.env_name, m.regrets.len(), m.regret));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    Ok((ok, format!("{}; {secs:.1}s", parts.join("; "))))
}

fn c7_robustness() -> Outcome {
    let start = Instant::now();
    let r = compare_preset("robustness")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (cell, better, worse) in [("ref_uniform", "drpo_bt", "dpo"), ("reward_perturbed", "drpo_bt", "ppo")] {
        let g = r.gap(cell, better, worse).ok_or(format!("missing gap {cell}"))?;
        let (a, b) = (r.method(cell, better).ok_or("missing method")?, r.method(cell, worse).ok_or("missing method")?);
        ok &= a.regret < b.regret && g.mean_gap > g.half_width && a.regrets.len() == 100;
        parts.push(format!(
            "{cell}: {better} {:.4} vs {worse} {:.4}, gap {:.4} +/- {:.4}",
            a.regret, b.regret, g.mean_gap, g.half_width
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 900.0;
    Ok((ok, format!("{}; {secs:.1}s", parts.join("; "))))
}

fn c8_non_bt() -> Outcome {
    let Preset::Compare(cfg) = experiments::preset("non-bt").map_err(err)? else {
        return Err("non-bt is not a comparison preset".into());
    };
    let bed = cfg.env.load().map_err(err)?;
    let floor = bed.bt_floor.ok_or("E3 has no BT floor")?;
    let r = experiments::optimization_comparison(&cfg).map_err(err)?;
    let cell = &cfg.cells[0].name;
    let drpo = r.method(cell, "drpo_gpm").ok_or("missing drpo_gpm")?;
    let ppo = r.method(cell, "ppo").ok_or("missing ppo")?;
    let ppo_min = ppo.regrets.iter().cloned().fold(f64::INFINITY, f64::min);
    // PPO's regret equals the floor up to the softness of the tilted policy.
    let ok = floor >= 0.03 && drpo.regret < 0.02 && ppo_min >= floor * (1.0 - 1e-6);
    Ok((ok, format!("drpo_gpm regret {:.4}; ppo min regret {ppo_min:.6} vs BT floor {floor:.6}", drpo.regret)))
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_drpo-lab"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("DRPO_LAB_SEED")
        .output()
        .map_err(err)?;
    if !status.status.success() {
        return Err(format!("drpo-lab {} failed: {}", args.join(" "), String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn same_tree(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let mut diffs = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(a).map_err(err)?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        if std::fs::read(a.join(&name)).map_err(err)? != std::fs::read(b.join(&name)).map_err(err)? {
            diffs.push(name.to_string_lossy().into_owned());
        }
    }
    Ok(diffs)
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let p = |s: &str| root.join(s).display().to_string();
    let sweep_cfg = root.join("sweep.json");
    std::fs::write(
        &sweep_cfg,
        r#"{"env": {"source": "builtin", "generator": "adversarial"}, "sample_sizes": [50, 100], "replications": 40, "base_seed": 3}"#,
    )
    .map_err(err)?;
    let env_json = p("gen/test_bed.json");
    let data_json = p("sim/data.json");
    let policy_json = p("gen/target_policy.json");
    let sweep = sweep_cfg.display().to_string();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("gen", vec!["gen-env", "--generator", "bt-random", "--seed", "4"]),
        ("sim", vec!["simulate", "--env", &env_json, "--n", "500", "--seed", "5"]),
        ("eval", vec!["evaluate", "--env", &env_json, "--policy", &policy_json, "--data", &data_json, "--g", "bt_mle", "--ref", "fitted"]),
        ("train", vec!["train", "--method", "drpo", "--env", &env_json, "--data", &data_json, "--epochs", "3"]),
        ("oracle", vec!["oracle", "--env", &env_json]),
        ("sweep", vec!["sweep", "--config", &sweep]),
        ("efficiency", vec!["efficiency", "--preset", "efficiency", "--replications", "60"]),
        ("compare", vec!["compare", "--preset", "robustness", "--replications", "3"]),
    ];
    let mut diffs = Vec::new();
    for (dir, args) in &runs {
        let first = root.join(dir);
        let mut a = args.clone();
        a.extend(["--threads", "4"]);
        run_cli(&a, &first)?;
        let manifest = first.join("manifest.json").display().to_string();
        let replay = root.join(format!("{dir}-replay"));
        run_cli(&[args[0], "--config", &manifest, "--threads", "1"], &replay)?;
        for d in same_tree(&first, &replay)? {
            diffs.push(format!("{dir}/{d}"));
        }
    }
    let ok = diffs.is_empty();
    let detail = if ok {
        format!("{} subcommands replayed from manifests with --threads 4 then 1, all outputs byte-identical", runs.len())
    } else {
        format!("differing outputs: {}", diffs.join(", "))
    };
    Ok((ok, detail))
}

fn main() {
    let checks: [Check; 9] = [
        ("c1 exact unbiasedness enumerations", c1_enumeration),
        ("c2 double robustness sweep", c2_double_robustness),
        ("c3 semiparametric efficiency", c3_efficiency),
        ("c4 gradient finite differences", c4_gradient),
        ("c5 k3 KL estimator", c5_k3),
        ("c6 DRPO consistency", c6_consistency),
        ("c7 robustness ordering", c7_robustness),
        ("c8 non-BT consistency", c8_non_bt),
        ("c9 manifest replay determinism", c9_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let (passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of 9 passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
