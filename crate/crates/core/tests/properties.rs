mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schwarz_core::controllability::{check_ucc, gramian, shifted_ucc_constants};
use schwarz_core::linalg::{spectral_norm, sym_eig_extremes};
use schwarz_core::ltv_model::{validate_assumptions, LqProblem, MatrixFunction};
use schwarz_core::ode::{evolution_operator, integrate_ivp, AffineSystem, Direction, IntegratorConfig, Method, TimeGrid};
use schwarz_core::pmp::{forward_state, SubproblemSpec};
use schwarz_core::registry::{self, ProblemParams};
use schwarz_core::riccati::{solve_riccati, theoretical_constants, Solution};
use schwarz_core::schwarz::{build_partition, error_metric, SchwarzIterate};

fn tight() -> IntegratorConfig<f64> {
    IntegratorConfig::adaptive(Method::Rk45Adaptive, 1e-11, 1e-11)
}

fn small_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn evolution_semigroup(a in small_matrix(3), t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
        let a = MatrixFunction::constant(a);
        let (t1, t2) = (t1, t1 + t2);
        let p20 = evolution_operator(&a, 0.0, t2, &tight()).unwrap();
        let p21 = evolution_operator(&a, t1, t2, &tight()).unwrap();
        let p10 = evolution_operator(&a, 0.0, t1, &tight()).unwrap();
        prop_assert!((p20 - p21 * p10).abs().max() < 1e-8);
    }

    #[test]
    fn gramian_splits_and_is_psd(a in small_matrix(2), b in small_matrix(2), split in 0.1..0.9f64) {
        let am = MatrixFunction::constant(a);
        let bm = MatrixFunction::constant(b);
        let w = gramian(&am, &bm, 0.0, 1.0, 64).unwrap();
        let w1 = gramian(&am, &bm, 0.0, split, 64).unwrap();
        let w2 = gramian(&am, &bm, split, 1.0, 64).unwrap();
        // Φ_A(0, split) carries the later piece back to t0
        let phi = evolution_operator(&am, 0.0, split, &tight()).unwrap().try_inverse().unwrap();
        let joined = &w1 + &phi * w2 * phi.transpose();
        prop_assert!((&w - joined).abs().max() < 1e-7 * (1.0 + w.abs().max()));
        prop_assert_eq!(&w, &w.transpose());
        prop_assert!(sym_eig_extremes(&w).0 >= -1e-10);
        // the Gramian only grows with the window
        prop_assert!(sym_eig_extremes(&(&w - &w1)).0 >= -1e-10);
    }

    #[test]
    fn state_is_affine_in_data(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_problem(&mut rng, 2, 2, 1.0);
        let grid = TimeGrid::with_step(0.0, 1.0, 0.01).unwrap();
        let cfg = IntegratorConfig::fixed(Method::Rk4, 0.01);
        let u1 = common::normal_control(&mut rng, &grid, 2);
        let u2 = common::normal_control(&mut rng, &grid, 2);
        let sum = u1.map(|i, v| v + &u2.values()[i]).unwrap();
        let spec = SubproblemSpec::full(&p).unwrap();
        let zero_start = SubproblemSpec::new(&p, 0.0, 1.0, DVector::zeros(2), DVector::zeros(2), true).unwrap();
        let x12 = forward_state(&spec, &sum, &cfg).unwrap();
        let x1 = forward_state(&spec, &u1, &cfg).unwrap();
        let x2 = forward_state(&zero_start, &u2, &cfg).unwrap();
        let combined = x1.map(|i, v| v + &x2.values()[i]).unwrap();
        prop_assert!(x12.max_diff(&combined).unwrap() < 1e-10);
    }

    #[test]
    fn backward_then_forward_round_trip(a in small_matrix(2), c0 in -1.0..1.0f64, c1 in -1.0..1.0f64) {
        let sys = AffineSystem { dim: 2, parts: move |t: f64| (a.clone(), DVector::from_vec(vec![c0 * t.cos(), c1])) };
        let grid = TimeGrid::uniform(0.0, 1.5, 15).unwrap();
        let cfg = IntegratorConfig::adaptive(Method::Rk45Adaptive, 1e-10, 1e-10);
        let yt = DVector::from_vec(vec![0.3, -1.2]);
        let back = integrate_ivp(&sys, &yt, &grid, &cfg, Direction::Backward).unwrap();
        let fwd = integrate_ivp(&sys, back.first(), &grid, &cfg, Direction::Forward).unwrap();
        prop_assert!((fwd.last() - &yt).norm() < 1e-8);
    }

    #[test]
    fn partitions_cover_the_horizon(horizon in 0.5..20.0f64, m in 1usize..8, frac in 0.01..0.9f64) {
        let p = build_partition(horizon, m, frac).unwrap();
        prop_assert_eq!(p.subdomain(0).0, 0.0);
        prop_assert_eq!(p.subdomain(m - 1).1, horizon);
        for j in 0..m {
            let (a, b) = p.subdomain(j);
            prop_assert!(a <= p.breakpoints[j] && p.breakpoints[j + 1] <= b);
            if j + 1 < m {
                // neighbours overlap
                prop_assert!(p.subdomain(j + 1).0 < b);
            }
        }
        if m > 1 {
            prop_assert!(p.min_overlap() > 0.0);
        }
    }

    #[test]
    fn error_metric_sees_constant_shift(c0 in -3.0..3.0f64, c1 in -3.0..3.0f64) {
        let grid = TimeGrid::with_step(0.0, 1.0, 0.1).unwrap();
        let sol = Solution {
            x: schwarz_core::ode::Trajectory::constant(grid.clone(), &DVector::from_vec(vec![1.0, 2.0])),
            u: schwarz_core::ode::Trajectory::zeros(grid.clone(), 2),
            lambda: schwarz_core::ode::Trajectory::zeros(grid.clone(), 2),
        };
        let mut it = SchwarzIterate::from_solution(&sol);
        let c = DVector::from_vec(vec![c0, c1]);
        it.x = sol.x.map(|_, v| v + &c).unwrap();
        let e = error_metric(&it, &sol).unwrap();
        prop_assert!((e - c.norm()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), n in 1usize..4, m in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_problem(&mut rng, n, m, 1.0);
        let grid = TimeGrid::with_step(0.0, 1.0, 0.01).unwrap();
        let u = common::normal_control(&mut rng, &grid, m);
        let gap = common::gradient_fd_gap(&SubproblemSpec::full(&p).unwrap(), &u, &IntegratorConfig::fixed(Method::Rk4, 0.01));
        prop_assert!(gap < 5e-4, "gap {}", gap);
    }

    /// Riccati eigenvalues stay inside the theoretical [c0, c1] for
    /// perturbations of a well-conditioned problem.
    #[test]
    fn riccati_within_theoretical_bounds(da in small_matrix(2), db in small_matrix(2), dq in small_matrix(2), qt in 0.5..2.0f64) {
        let a = -DMatrix::identity(2, 2) + da * 0.3;
        let b = DMatrix::identity(2, 2) + db * 0.2;
        let q = DMatrix::identity(2, 2) * 2.0 + (&dq + dq.transpose()) * 0.2;
        let p = LqProblem::classic(
            6.0,
            MatrixFunction::constant(a),
            MatrixFunction::constant(b),
            MatrixFunction::constant(q),
            MatrixFunction::constant(DMatrix::from_element(2, 2, 0.1)),
            MatrixFunction::identity(2),
            DMatrix::identity(2, 2) * qt,
            DVector::from_vec(vec![1.0, -1.0]),
        ).unwrap();
        let rep = validate_assumptions(&p, 100).unwrap();
        prop_assume!(rep.pass);
        let ucc = check_ucc(&p.a, &p.b, 1.0, 6.0, 20, 32).unwrap();
        let c = theoretical_constants(&rep, &ucc, 1.0).unwrap();
        let grid = TimeGrid::with_step(0.0, 6.0, 0.02).unwrap();
        let ric = solve_riccati(&p, &grid, &IntegratorConfig::fixed(Method::Rk4, 0.02)).unwrap();
        let (lo, hi) = ric.eig_range();
        prop_assert!(lo >= c.c0 && hi <= c.c1, "eig [{}, {}] vs [{}, {}]", lo, hi, c.c0, c.c1);
    }

    /// The shifted-pair formula is a valid lower bound on the measured Gramian.
    #[test]
    fn shifted_gramian_bound_holds(f in small_matrix(2)) {
        let p = registry::build::<f64>("linearized_two_state", &ProblemParams::default()).unwrap();
        let sigma = 1.0;
        let a = p.a.eval(0.0).into_owned();
        let b = p.b.eval(0.0).into_owned();
        let base = check_ucc(&p.a, &p.b, sigma, 5.0, 10, 32).unwrap();
        let shifted = MatrixFunction::constant(&a + &b * &f);
        let measured = check_ucc(&shifted, &p.b, sigma, 5.0, 10, 32).unwrap();
        let formula = shifted_ucc_constants(spectral_norm(&a), spectral_norm(&b), spectral_norm(&f), sigma, base.alpha0, base.alpha1).unwrap();
        prop_assert!(measured.pass);
        prop_assert!(measured.alpha0 >= formula.alpha0 * (1.0 - 1e-9));
        prop_assert!(measured.alpha1 <= formula.alpha1 * (1.0 + 1e-9));
    }
}
