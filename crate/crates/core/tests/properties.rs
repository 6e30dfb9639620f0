mod common;

use dpctl::linalg::{self, Mat, Vector};
use dpctl::observability;
use dpctl::privacy::{self, PrivacyBudget, StableVariant};
use dpctl::{linsys, StateSpace};
use proptest::prelude::*;

fn system(seed: u64, max_n: usize) -> StateSpace {
    common::random_any(&mut common::rng(seed), max_n)
}

fn stable_system(seed: u64) -> StateSpace {
    let mut rng = common::rng(seed);
    let n = 1 + (seed % 3) as usize;
    common::random_system(&mut rng, n, 1 + (seed % 2) as usize, 1 + (seed / 3 % 2) as usize, 0.8, seed.is_multiple_of(2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn r_strictly_decreasing(eps in 0.01f64..10.0, delta in 0.001f64..0.45, step in 1.001f64..2.0) {
        let r = privacy::r_value(eps, delta).unwrap();
        prop_assert!(privacy::r_value(eps * step, delta).unwrap() < r);
        let d2 = (delta * step).min(0.499);
        if d2 > delta {
            prop_assert!(privacy::r_value(eps, d2).unwrap() < r);
        }
    }

    #[test]
    fn stacked_maps_reproduce_simulation(seed in any::<u64>(), t in 0usize..8) {
        let sys = system(seed, 3);
        let mut rng = common::rng(seed ^ 0x5eed);
        let x0 = Vector::from_iterator(sys.n(), common::gaussian(&mut rng, sys.n(), 1).iter().copied());
        let inputs: Vec<Vector> = (0..=t).map(|_| Vector::from_iterator(sys.m(), common::gaussian(&mut rng, sys.m(), 1).iter().copied())).collect();
        let traj = linsys::simulate(&sys, &x0, &inputs).unwrap();
        let maps = observability::stack_markov_map(&sys, t, t).unwrap();
        let u = Vector::from_iterator(sys.m() * (t + 1), inputs.iter().flat_map(|v| v.iter().copied()));
        let y = &maps.o * &x0 + &maps.n_full * u;
        let stacked = traj.stacked_outputs();
        prop_assert!((y - &stacked).amax() <= 1e-9 * (1.0 + stacked.amax()));
    }

    #[test]
    fn calibration_floors_linear_in_c(seed in any::<u64>(), eps in 0.1f64..3.0, delta in 0.001f64..0.2) {
        let sys = stable_system(seed);
        let floors = |c: f64| {
            let g = PrivacyBudget::gaussian(eps, delta, c).unwrap();
            [
                privacy::min_iid_sigma(&sys, &g, 4).unwrap(),
                privacy::calibrate_input_gaussian(&g).unwrap().sqrt(),
                privacy::stable_gaussian_floor(&sys, &g, StableVariant::Full).unwrap(),
            ]
        };
        let base = floors(1.0);
        for c in [0.5, 2.0] {
            for (a, b) in floors(c).iter().zip(&base) {
                prop_assert!((a - c * b).abs() <= 1e-9 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn stable_bound_implies_finite_horizon_test(seed in any::<u64>(), eps in 0.1f64..3.0, delta in 0.001f64..0.2, slack in 1.0f64..1.5) {
        let sys = stable_system(seed);
        let budget = PrivacyBudget::gaussian(eps, delta, 1.0).unwrap();
        let floor = privacy::stable_gaussian_floor(&sys, &budget, StableVariant::Full).unwrap() * slack;
        let lam = floor * floor;
        prop_assert!(privacy::verify_stable_gaussian(&sys, lam, &budget, StableVariant::Full).unwrap().passed);
        for t in 0..=15 {
            let rows = (t + 1) * sys.q();
            let sigma = Mat::identity(rows, rows) * lam;
            prop_assert!(privacy::verify_output_gaussian(&sys, &sigma, &budget, t, None).unwrap().passed, "t = {}", t);
        }
    }

    #[test]
    fn input_output_equivalence(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = 1 + (seed % 3) as usize;
        let m = 1 + (seed / 3 % 2) as usize;
        let sys = common::observable_by_construction(&mut rng, n, m);
        let (t, big_t) = (2 * n, n);
        let rows = (t + 1) * sys.q();
        let g = common::gaussian(&mut rng, rows, rows);
        let sigma = &g * g.transpose() + Mat::identity(rows, rows);
        let gram = observability::weighted_gramian(&sys, t, big_t, &sigma).unwrap();
        let s1 = privacy::equivalent_input_covariance(&sys, &sigma, t, big_t).unwrap();
        let product = gram.lambda_max() * linalg::lambda_min(&s1);
        prop_assert!((product - 1.0).abs() < 1e-9, "{}", product);
    }

    #[test]
    fn gramian_and_sigma_monotone_in_horizon(seed in any::<u64>()) {
        let sys = system(seed, 3);
        let budget = PrivacyBudget::gaussian(1.0, 0.05, 1.0).unwrap();
        let mut prev_lmax = 0.0;
        let mut prev_sigma = 0.0;
        for t in 0..=15 {
            let lmax = observability::strong_gramian_lambda_max(&sys, t, t).unwrap();
            let sigma = privacy::min_iid_sigma(&sys, &budget, t).unwrap();
            prop_assert!(lmax >= prev_lmax * (1.0 - 1e-12));
            prop_assert!(sigma >= prev_sigma * (1.0 - 1e-12));
            prev_lmax = lmax;
            prev_sigma = sigma;
        }
    }

    #[test]
    fn observability_verdict_invariant_under_similarity(seed in any::<u64>()) {
        let sys = system(seed, 3);
        let mut rng = common::rng(seed.wrapping_add(1));
        let n = sys.n();
        let t = common::gaussian(&mut rng, n, n) + Mat::identity(n, n) * 3.0;
        let ti = t.clone().try_inverse().unwrap();
        let sim = StateSpace::new(&ti * sys.a() * &t, &ti * sys.b(), sys.c() * &t, sys.d().clone()).unwrap();
        prop_assert_eq!(
            observability::is_strongly_input_observable(&sys).observable,
            observability::is_strongly_input_observable(&sim).observable
        );
    }
}

#[test]
fn static_identity_mechanism_needs_c_times_r() {
    let sys = StateSpace::new(Mat::zeros(0, 0), Mat::zeros(0, 1), Mat::zeros(1, 0), Mat::identity(1, 1)).unwrap();
    let budget = PrivacyBudget::gaussian(0.7, 0.01, 2.0).unwrap();
    let sigma = privacy::min_iid_sigma(&sys, &budget, 0).unwrap();
    assert!((sigma - 2.0 * privacy::r_value(0.7, 0.01).unwrap()).abs() < 1e-12);
}
