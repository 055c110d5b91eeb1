use pinn_core::equinet::{
    beta_forward, build_pinn1d, build_pinn2d, permute_blocks_1d, permute_blocks_2d, BetaNetParams,
    BlockPermutation, Init, Pinn1dSpec, Pinn2dSpec,
};
use pinn_core::intercoord::{
    augment, generate_channels, sum_rate, wmmse_run, IcConfig, IcSample, WmmseConfig,
};
use pinn_core::numcore::{Activation, Tensor};
use pinn_core::persist::{load_ic_dataset, save_ic_dataset};
use pinn_core::pra::{evaluate_plan, lp_solve_p1, Association, LpStatus};
use pinn_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;

fn uniform(rows: usize, cols: usize, rng: &mut pinn_core::rng::Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinn1d_commutes_with_block_permutations(k in 1usize..9, seed in any::<u64>(), adapt in any::<bool>()) {
        let mut rng = seeded(seed);
        let spec = Pinn1dSpec::from_widths(&[3, 4, 2], Activation::Softplus, Activation::Identity, true);
        let p = build_pinn1d(&spec, Init::Uniform, &mut rng).unwrap();
        let beta = adapt.then(|| {
            let b = BetaNetParams::build(5, true, Init::Uniform, &mut rng).unwrap();
            beta_forward(&b, k).unwrap()
        });
        let x = uniform(1, 3 * k, &mut rng).into_reshape(&[3 * k]).unwrap();
        let perm = BlockPermutation::random(k, &mut rng);
        let lhs = pinn_core::equinet::pinn1d_forward(&p, &permute_blocks_1d(&x, &perm, 3).unwrap(), k, beta).unwrap();
        let rhs = permute_blocks_1d(&pinn_core::equinet::pinn1d_forward(&p, &x, k, beta).unwrap(), &perm, 2).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn pinn2d_commutes_with_block_permutations(k in 1usize..9, seed in any::<u64>(), beta in proptest::option::of(0.1f64..3.0)) {
        let mut rng = seeded(seed);
        let spec = Pinn2dSpec::square(&[1, 3, 3, 1], Activation::Relu, Activation::Sigmoid);
        let p = build_pinn2d(&spec, Init::Uniform, &mut rng).unwrap();
        let x = uniform(k, k, &mut rng);
        let perm = BlockPermutation::random(k, &mut rng);
        let lhs = pinn_core::equinet::pinn2d_forward(&p, &permute_blocks_2d(&x, &perm, (1, 1)).unwrap(), k, beta).unwrap();
        let rhs = permute_blocks_1d(&pinn_core::equinet::pinn2d_forward(&p, &x, k, beta).unwrap(), &perm, 1).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn permutation_and_inverse_cancel(k in 1usize..12, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let x = uniform(2 * k, k, &mut rng);
        let perm = BlockPermutation::random(k, &mut rng);
        let there = permute_blocks_2d(&x, &perm, (2, 1)).unwrap();
        let back = permute_blocks_2d(&there, &perm.inverse(), (2, 1)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn relabeled_samples_keep_their_sum_rate(k in 1usize..10, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let ic = IcConfig::default();
        let x = generate_channels(k, &mut rng).unwrap();
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
        let base = IcSample::new(x, y, false).unwrap();
        let rate = sum_rate(&base.x, &base.y, &ic).unwrap();
        for s in augment(std::slice::from_ref(&base), 20, &mut rng).unwrap() {
            prop_assert!((sum_rate(&s.x, &s.y, &ic).unwrap() - rate).abs() <= 1e-12);
        }
    }

    #[test]
    fn wmmse_never_decreases_the_sum_rate(k in 1usize..11, seed in any::<u64>()) {
        let x = generate_channels(k, &mut seeded(seed)).unwrap();
        let run = wmmse_run(&x, &IcConfig::default(), &WmmseConfig::default()).unwrap();
        for w in run.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9);
        }
        prop_assert!(run.y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lp_plans_are_feasible(k in 1usize..5, t_f in 1usize..6, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let n_b = 2;
        let rates = Tensor::matrix(t_f, k, (0..t_f * k).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap();
        let assoc = Association::new(n_b, t_f, k, (0..t_f * k).map(|_| rng.random_range(0..n_b)).collect()).unwrap();
        let sol = lp_solve_p1(&rates, &assoc).unwrap();
        if sol.status == LpStatus::Optimal {
            let report = evaluate_plan(&sol.plan, &rates, &assoc).unwrap();
            prop_assert!(report.max_qos_residual < 1e-8);
            prop_assert!(report.max_overload < 1e-8);
            prop_assert!(sol.plan.data().iter().all(|&s| s >= -1e-12));
        }
    }
}

#[test]
fn ic_dataset_file_round_trip_is_exact() {
    let mut rng = seeded(11);
    let samples: Vec<IcSample> = (1..6)
        .map(|k| {
            let x = generate_channels(k, &mut rng).unwrap();
            let y = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
            IcSample::new(x, y, k % 2 == 0).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ic.jsonl");
    save_ic_dataset(&path, &samples).unwrap();
    assert_eq!(load_ic_dataset(&path).unwrap(), samples);
}
