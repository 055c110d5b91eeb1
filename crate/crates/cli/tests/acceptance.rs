//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::Instant;

use pinn_cli::{augment_timed, bench, ic_set, new_ic_model, pra_set, TEST_SEED_OFFSET};
use pinn_core::equinet::{
    beta_forward, build_pinn1d, build_pinn2d, count_params, pinn1d_forward, pinn2d_forward,
    permute_blocks_1d, permute_blocks_2d, BetaNetParams, BlockPermutation, FcSpec, Init,
    Pinn1dSpec, Pinn2dSpec,
};
use pinn_core::gradsuite::{run_gradcheck, FAMILIES};
use pinn_core::intercoord::{
    evaluate_ic, grid_oracle, sum_rate, train_ic_supervised, wmmse_run, IcSample,
};
use pinn_core::numcore::{Activation, Tensor};
use pinn_core::persist::{
    checkpoint_from_str, checkpoint_to_string, load_ic_dataset, load_pra_dataset,
    save_ic_dataset, save_pra_dataset, ExperimentConfig, ModelKind, Model, Task,
};
use pinn_core::pra::{
    build_pra_nets, evaluate_pra, infer_plan, lp_solve_p1, p1_grid_oracle, train_pra, LpStatus,
    PraConfig,
};
use pinn_core::rng::{seeded, Rng};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn equivariance() -> Outcome {
    const TRIPLES: usize = 200;
    let t0 = Instant::now();
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    let spec1 = Pinn1dSpec::from_widths(&[4, 6, 6, 3], Activation::Softplus, Activation::Identity, true);
    let spec2 = Pinn2dSpec::square(&[1, 3, 3, 1], Activation::Relu, Activation::Sigmoid);
    for k in 1..=8 {
        for t in 0..TRIPLES {
            let with_beta = t % 2 == 1;
            let perm = BlockPermutation::random(k, &mut rng);
            let bp = BetaNetParams::build(10, false, Init::Uniform, &mut rng).map_err(|e| e.to_string())?;
            let beta = with_beta.then(|| beta_forward(&bp, k).expect("beta"));

            let p1 = build_pinn1d(&spec1, Init::Uniform, &mut rng).map_err(|e| e.to_string())?;
            let x = Tensor::vector(uniform(4 * k, &mut rng));
            let lhs = pinn1d_forward(&p1, &permute_blocks_1d(&x, &perm, 4).unwrap(), k, beta).unwrap();
            let rhs = permute_blocks_1d(&pinn1d_forward(&p1, &x, k, beta).unwrap(), &perm, 3).unwrap();
            worst = worst.max(lhs.max_abs_diff(&rhs));

            let p2 = build_pinn2d(&spec2, Init::Uniform, &mut rng).map_err(|e| e.to_string())?;
            let x = Tensor::matrix(k, k, uniform(k * k, &mut rng)).unwrap();
            let lhs = pinn2d_forward(&p2, &permute_blocks_2d(&x, &perm, (1, 1)).unwrap(), k, beta).unwrap();
            let rhs = permute_blocks_1d(&pinn2d_forward(&p2, &x, k, beta).unwrap(), &perm, 1).unwrap();
            worst = worst.max(lhs.max_abs_diff(&rhs));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-10 && secs < 60.0,
        format!("K=1..8 x {TRIPLES} triples, max abs error {worst:.2e}, {secs:.1}s"),
    )
}

fn parameter_counts() -> Outcome {
    let pinn1d = Pinn1dSpec::from_widths(&[60, 50, 50, 60], Activation::Softplus, Activation::Identity, false);
    let widths: Vec<usize> = [60, 50, 50, 60].iter().map(|w| 40 * w).collect();
    let fc1 = FcSpec { widths, hidden: Activation::Softplus, output: Activation::Identity, bias: false };
    let pinn2d = Pinn2dSpec::square(&[1, 3, 3, 1], Activation::Relu, Activation::Identity);
    let beta = BetaNetParams::build(10, false, Init::Uniform, &mut seeded(0)).map_err(|e| e.to_string())?;
    let fc2 = FcSpec {
        widths: vec![900, 400, 300, 200, 30],
        hidden: Activation::Relu,
        output: Activation::Identity,
        bias: false,
    };
    let got = [
        count_params(&pinn1d),
        count_params(&fc1),
        count_params(&pinn2d),
        count_params(&pinn2d) + count_params(&beta),
        count_params(&fc2),
    ];
    let want = [17_000, 13_600_000, 60, 80, 546_000];
    check(got == want, format!("{got:?} (expected {want:?})"))
}

fn gradient_checks() -> Outcome {
    const CASES: usize = 50;
    let reports = run_gradcheck(CASES, 7).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let ok = reports.len() == FAMILIES.len()
        && reports.iter().all(|r| r.passed && r.cases >= CASES && r.max_relative_error < 1e-5);
    let names: Vec<&str> = reports.iter().map(|r| r.family.as_str()).collect();
    check(ok, format!("{} families x {CASES} cases ({}), max relative error {worst:.2e}", reports.len(), names.join(", ")))
}

fn lp_oracle() -> Outcome {
    let mut rng = seeded(3);
    let (mut feasible, mut grid_cases, mut tries) = (0, 0, 0);
    let (mut residual, mut gap, mut grid_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    while feasible < 100 {
        tries += 1;
        if tries > 10_000 {
            return Err(format!("only {feasible} feasible instances in {tries} draws"));
        }
        // every fourth instance is a two-user, two-frame one for the grid
        let (k, t_f) = if feasible % 4 == 0 { (2, 2) } else { (rng.random_range(1..=4), rng.random_range(1..=5)) };
        let cfg = PraConfig { k_max: 4, t_f, ..PraConfig::default() };
        let s = pinn_core::pra::generate_pra_scenario(&cfg, k, &mut rng).map_err(|e| e.to_string())?;
        let rates = pinn_core::pra::compute_average_rates(&s, &cfg).map_err(|e| e.to_string())?;
        let sol = lp_solve_p1(&rates, &s.assoc).map_err(|e| e.to_string())?;
        if sol.status != LpStatus::Optimal {
            continue;
        }
        feasible += 1;
        residual = residual.max(sol.primal_residual);
        gap = gap.max(sol.relative_gap);
        if k == 2 && t_f == 2 {
            let grid = p1_grid_oracle(&rates, &s.assoc, 1000).map_err(|e| e.to_string())?;
            let g = grid.ok_or("grid found no feasible point on an LP-feasible instance")?;
            grid_err = grid_err.max((g - sol.objective).abs());
            grid_cases += 1;
        }
    }
    check(
        residual < 1e-8 && gap < 1e-8 && grid_err <= 1e-3 && grid_cases > 0,
        format!(
            "100 feasible of {tries}; residual {residual:.1e}, gap {gap:.1e}, grid error {grid_err:.1e} on {grid_cases} K=2,T_f=2 instances"
        ),
    )
}

fn wmmse_quality() -> Outcome {
    let cfg = ExperimentConfig::default();
    let (ic, wm) = (cfg.ic.channel, cfg.ic.wmmse);
    let mut good = 0;
    let mut worst_step: f64 = 0.0;
    for i in 0..100 {
        let x = pinn_core::intercoord::generate_channels(2, &mut pinn_core::rng::stream(11, i)).unwrap();
        let run = wmmse_run(&x, &ic, &wm).map_err(|e| e.to_string())?;
        let (_, best) = grid_oracle(&x, &ic, 101).map_err(|e| e.to_string())?;
        if sum_rate(&x, &run.y, &ic).unwrap() >= 0.99 * best {
            good += 1;
        }
        for w in run.trace.windows(2) {
            worst_step = worst_step.max(w[0] - w[1]);
        }
    }
    check(
        good >= 95 && worst_step <= 1e-9,
        format!("{good}/100 instances within 99% of the grid optimum, largest decrease {worst_step:.1e}"),
    )
}

fn ic_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = Task::Ic;
    cfg.model = ModelKind::PinnAdpK;
    cfg.ic.k_max = 10;
    cfg
}

fn ic_learning() -> Outcome {
    let cfg = ic_config();
    let t0 = Instant::now();
    let train = ic_set(&cfg, 5000, cfg.seed).map_err(|e| e.to_string())?;
    let test = ic_set(&cfg, 1000, cfg.seed + TEST_SEED_OFFSET).map_err(|e| e.to_string())?;
    let mut m = new_ic_model(&cfg, ModelKind::PinnAdpK, 10, cfg.seed).map_err(|e| e.to_string())?;
    let hyper = cfg.ic.hyper(true);
    train_ic_supervised(&mut m, &train, &hyper, &mut pinn_core::rng::stream(cfg.seed, 2)).map_err(|e| e.to_string())?;
    let e = evaluate_ic(&m, &test, &cfg.ic.channel).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    check(
        e.ratio >= 0.88 && secs < 1800.0,
        format!("PINN-2D-Adp-K at K=10 on 5000 samples: {:.1}% of WMMSE sum-rate, {secs:.0}s", 100.0 * e.ratio),
    )
}

fn pra_learning() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.task = Task::Pra;
    cfg.model = ModelKind::PinnAdpK;
    cfg.pra = PraConfig { k_max: 8, t_f: 10, n_b: 4, ..PraConfig::default() };
    let t0 = Instant::now();
    let train = pra_set(&cfg, 2000, cfg.seed, true).map_err(|e| e.to_string())?;
    let test = pra_set(&cfg, 100, cfg.seed + TEST_SEED_OFFSET, false).map_err(|e| e.to_string())?;
    let mut nets = build_pra_nets(&cfg.pra, &cfg.pra_train, &mut pinn_core::rng::stream(cfg.seed, 1)).map_err(|e| e.to_string())?;
    train_pra(&mut nets, &train, &cfg.pra_train, &mut pinn_core::rng::stream(cfg.seed, 2)).map_err(|e| e.to_string())?;
    let e = evaluate_pra(&nets, &test, &cfg.pra).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    check(
        e.loss <= 0.25 && e.max_overload < 0.05 && e.mean_edf_time > e.mean_objective,
        format!(
            "{} scenarios: loss vs LP {:.1}%, max overload {:.3}, mean time {:.3} vs EDF {:.3}, {secs:.0}s",
            e.evaluated,
            100.0 * e.loss,
            e.max_overload,
            e.mean_objective,
            e.mean_edf_time
        ),
    )
}

fn complexity_ordering() -> Outcome {
    let mut cfg = ic_config();
    cfg.test_samples = 1000;
    let r = bench(&cfg).map_err(|e| e.to_string())?;
    let pinn = r.summary_of("pinn-adp-k").ok_or("no PINN summary")?;
    let fc = r.summary_of("fc").ok_or("no FC summary")?;
    let rows: Vec<String> = r.rows.iter().map(|b| format!("{}@{}={:.3}", b.model, b.size, b.ratio)).collect();
    let detail = format!("target {:.2}; {}", r.target, rows.join(" "));
    match (pinn.min_size, pinn.seconds_to_target, fc.min_size, fc.seconds_to_target) {
        (Some(np), Some(tp), Some(nf), Some(tf)) => check(
            5 * np <= nf && tp < tf,
            format!("{detail}; sizes {np} vs {nf}, time ratio {:.2}", tp / tf),
        ),
        // the dense model never reached the target within the sweep: its
        // minimal size exceeds the largest size tried
        (Some(np), Some(tp), None, _) => check(
            5 * np <= fc.largest_size && tp < fc.seconds_at_largest,
            format!(
                "{detail}; FC missed the target up to {} samples, PINN size {np}, time ratio below {:.2}",
                fc.largest_size,
                tp / fc.seconds_at_largest
            ),
        ),
        _ => Err(format!("{detail}; PINN did not reach the target")),
    }
}

fn augmentation() -> Outcome {
    let mut cfg = ic_config();
    cfg.model = ModelKind::Fc;
    let base = ic_set(&cfg, 10, cfg.seed).map_err(|e| e.to_string())?;
    let report = augment_timed(&cfg, &base, 10_000).map_err(|e| e.to_string())?;
    let ic = cfg.ic.channel;
    let mut drift: f64 = 0.0;
    for s in &report.samples[base.len()..] {
        let parent = base
            .iter()
            .map(|b| (sum_rate(&b.x, &b.y, &ic).unwrap() - sum_rate(&s.x, &s.y, &ic).unwrap()).abs())
            .fold(f64::INFINITY, f64::min);
        drift = drift.max(parent);
    }
    let speedup = report.speedup();

    let direct = ic_set(&cfg, 10_000, cfg.seed + 1).map_err(|e| e.to_string())?;
    let test = ic_set(&cfg, 1000, cfg.seed + TEST_SEED_OFFSET).map_err(|e| e.to_string())?;
    let fit = |data: &[IcSample]| -> Result<f64, String> {
        let mut m = new_ic_model(&cfg, ModelKind::Fc, 10, cfg.seed).map_err(|e| e.to_string())?;
        let h = cfg.ic.hyper(false);
        train_ic_supervised(&mut m, data, &h, &mut pinn_core::rng::stream(cfg.seed, 2)).map_err(|e| e.to_string())?;
        Ok(evaluate_ic(&m, &test, &ic).map_err(|e| e.to_string())?.mse)
    };
    let (mse_aug, mse_direct) = (fit(&report.samples)?, fit(&direct)?);
    let rel = (mse_aug - mse_direct).abs() / mse_direct;
    check(
        drift <= 1e-12 && speedup >= 10.0 && rel <= 0.10,
        format!(
            "sum-rate drift {drift:.1e}, speedup {speedup:.0}x, FC test MSE augmented {mse_aug:.4} vs direct {mse_direct:.4} ({:.1}% apart)",
            100.0 * rel
        ),
    )
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ic_config();
    cfg.ic.k_max = 5;
    let ic_data = ic_set(&cfg, 20, 4).map_err(|e| e.to_string())?;
    let path = dir.path().join("ic.jsonl");
    save_ic_dataset(&path, &ic_data).map_err(|e| e.to_string())?;
    let ic_ok = load_ic_dataset(&path).map_err(|e| e.to_string())? == ic_data;

    cfg.pra = PraConfig { k_max: 4, t_f: 5, ..PraConfig::default() };
    let pra_data = pra_set(&cfg, 20, 4, true).map_err(|e| e.to_string())?;
    let path = dir.path().join("pra.jsonl");
    save_pra_dataset(&path, &pra_data).map_err(|e| e.to_string())?;
    let pra_ok = load_pra_dataset(&path).map_err(|e| e.to_string())? == pra_data;

    let xs: Vec<&Tensor> = ic_data.iter().map(|s| &s.x).collect();
    let mut models = Vec::new();
    for kind in [ModelKind::PinnAdpK, ModelKind::Pinn, ModelKind::Fc] {
        let mut m = new_ic_model(&cfg, kind, 5, 9).map_err(|e| e.to_string())?;
        let h = cfg.ic.hyper(m.is_pinn());
        let h = pinn_core::intercoord::IcHyper { epochs: 2, ..h };
        train_ic_supervised(&mut m, &ic_data, &h, &mut seeded(1)).map_err(|e| e.to_string())?;
        models.push(Model::Ic(m));
    }
    let nets = build_pra_nets(&cfg.pra, &cfg.pra_train, &mut seeded(2)).map_err(|e| e.to_string())?;
    models.push(Model::Pra(nets));
    let mut ckpt_ok = true;
    for m in &models {
        let back = checkpoint_from_str(&checkpoint_to_string(m)).map_err(|e| e.to_string())?;
        ckpt_ok &= &back == m;
        ckpt_ok &= match (m, &back) {
            (Model::Ic(a), Model::Ic(b)) => a.predict(&xs).unwrap() == b.predict(&xs).unwrap(),
            (Model::Pra(a), Model::Pra(b)) => pra_data
                .iter()
                .all(|s| infer_plan(a, s).unwrap() == infer_plan(b, s).unwrap()),
            _ => false,
        };
    }
    check(
        ic_ok && pra_ok && ckpt_ok,
        format!(
            "ic dataset {ic_ok}, pra dataset {pra_ok}, {} checkpoints with identical outputs {ckpt_ok}",
            models.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("equivariance", equivariance),
        ("parameter counts", parameter_counts),
        ("gradient checks", gradient_checks),
        ("LP oracle", lp_oracle),
        ("WMMSE quality", wmmse_quality),
        ("IC supervised learning", ic_learning),
        ("PRA unsupervised learning", pra_learning),
        ("complexity ordering", complexity_ordering),
        ("augmentation", augmentation),
        ("persistence", persistence),
    ];
    let only = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
