use num_complex::Complex64;
use proptest::prelude::*;

use snls::mc::wilson;
use snls::{
    solve_sde_seeded, solve_skeleton, Control, Equation, Grid, InitialData, ModelParams, NoiseModel, Record, RunConfig, SeedSpec,
    SolverOptions, Transform,
};

fn small_eq(beta: f64, m1: usize, m2: usize) -> Equation {
    let grid = Grid::new(1, 64, 8.0).unwrap();
    let params = ModelParams { beta, ..ModelParams::default() };
    Equation::new(grid, params, NoiseModel::geometric(m1, m2)).unwrap()
}

fn packet(grid: Grid, amplitude: f64, k: f64) -> snls::ComplexField {
    InitialData::Gaussian { amplitude, width: 1.0, center: 0.0, wavenumber: k }.build(grid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transform_round_trip(values in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 32)) {
        let grid = Grid::new(1, 32, 3.0).unwrap();
        let data: Vec<Complex64> = values.iter().map(|&(a, b)| Complex64::new(a, b)).collect();
        let f = snls::ComplexField::from_vec(grid, data).unwrap();
        let t = Transform::new(grid);
        let back = t.inverse(&t.forward(&f).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
        prop_assert!((t.forward(&f).unwrap().norm_l2() - f.norm_l2()).abs() < 1e-10 * (1.0 + f.norm_l2()));
    }

    #[test]
    fn cost_is_quadratic(coeffs in proptest::collection::vec(-3.0f64..3.0, 8), a in -4.0f64..4.0) {
        let c = Control::new(2, 2, 2, 1.5, coeffs[..4].to_vec(), coeffs[4..].to_vec()).unwrap();
        let lhs = c.scaled(a).cost();
        prop_assert!((lhs - a * a * c.cost()).abs() <= 1e-12 * (1.0 + lhs));
        prop_assert!(c.cost() >= 0.0);
    }

    #[test]
    fn wilson_interval_brackets_estimate(n in 1u64..100_000, frac in 0.0f64..=1.0) {
        let hits = ((n as f64) * frac).floor() as u64;
        let (p, lo, hi) = wilson(hits, n);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(lo <= p + 1e-15 && p <= hi + 1e-15);
    }

    #[test]
    fn conservative_case_keeps_mass(seed in any::<u64>(), rho in proptest::collection::vec(-2.0f64..2.0, 3), amp in 0.1f64..1.5) {
        let eq = small_eq(0.0, 3, 0);
        let u0 = packet(*eq.grid(), amp, 0.5);
        let ctrl = Control::constant(0.2, &rho, &[]).unwrap();
        let opts = SolverOptions::new(1e-2, 0.2).with_record(Record::Endpoints);
        let traj = solve_sde_seeded(&eq, &u0, &ctrl, &opts, SeedSpec::new(seed, 0)).unwrap();
        let m0 = u0.norm_l2().powi(2);
        for h in traj.h_norms() {
            prop_assert!((h * h - m0).abs() <= 1e-11 * m0);
        }
    }

    #[test]
    fn damping_never_increases_skeleton_mass(beta in 0.0f64..2.0, amp in 0.1f64..1.5) {
        let eq = small_eq(beta, 2, 0);
        let u0 = packet(*eq.grid(), amp, 0.0);
        let ctrl = Control::constant(0.3, &[0.7, -0.4], &[]).unwrap();
        let traj = solve_skeleton(&eq, &u0, &ctrl, &SolverOptions::new(1e-2, 0.3)).unwrap();
        let h = traj.h_norms();
        for w in h.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_noise_path_equals_skeleton(seed in any::<u64>(), path in 0u64..1000) {
        let eq = small_eq(0.2, 2, 2);
        let eq = eq.with_params(eq.params().with_epsilon(0.0)).unwrap();
        let u0 = packet(*eq.grid(), 0.8, 1.0);
        let ctrl = Control::constant(0.1, &[0.3, 0.1], &[0.2, -0.1]).unwrap();
        let opts = SolverOptions::new(1e-2, 0.1);
        let a = solve_sde_seeded(&eq, &u0, &ctrl, &opts, SeedSpec::new(seed, path)).unwrap();
        let b = solve_skeleton(&eq, &u0, &ctrl, &opts).unwrap();
        prop_assert_eq!(a.terminal(), b.terminal());
    }

    #[test]
    fn config_overrides_round_trip(beta in 0.0f64..3.0, n_paths in 1u64..10_000, seed in 0u64..=i64::MAX as u64) {
        let cfg = RunConfig::load(None, &[
            format!("model.beta={beta:?}"),
            format!("sweep.n_paths={n_paths}"),
            format!("seed={seed}"),
        ]).unwrap();
        prop_assert_eq!(cfg.model.beta, beta);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(again.hash(), cfg.hash());
    }
}
