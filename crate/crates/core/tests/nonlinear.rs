use std::sync::Arc;

use dpctl::linalg::{Mat, Vector};
use dpctl::nonlinear::*;
use dpctl::observability;
use dpctl::privacy::{self, PrivacyBudget};
use dpctl::StateSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize) -> StateSpace {
    let mut g = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let a = g(n, n) * 0.5;
    StateSpace::new(a, g(n, m), g(q, n), g(q, m)).unwrap()
}

#[test]
fn linear_stacking_matches_linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let (n, m, q) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..3));
        let sys = random_system(&mut rng, n, m, q);
        let t = rng.random_range(0..6);
        let x0 = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let inputs: Vec<Vector> = (0..=t).map(|_| Vector::from_fn(m, |_, _| rng.random_range(-2.0..2.0))).collect();
        let h = stack_nonlinear_output(&NonlinearSystem::linear(&sys), &x0, &inputs).unwrap();
        let maps = observability::stack_markov_map(&sys, t, t).unwrap();
        let u = Vector::from_iterator((t + 1) * m, inputs.iter().flat_map(|v| v.iter().copied()));
        let want = &maps.o * &x0 + &maps.n_full * u;
        assert!((h - want).amax() < 1e-12);
    }
}

#[test]
fn linear_calibration_matches_eigen_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let sys = random_system(&mut rng, 2, 1, 1);
        let t = 2;
        let budget = PrivacyBudget::gaussian(0.7, 0.02, 0.5).unwrap();
        let exact = privacy::min_iid_sigma(&sys, &budget, t).unwrap();
        let x0 = Vector::from_element(2, 0.3);
        let inputs = vec![Vector::from_element(1, 0.1); t + 1];
        let cal = calibrate_nonlinear_gaussian(&NonlinearSystem::linear(&sys), &x0, &inputs, &budget, &SearchConfig::default()).unwrap();
        assert!(cal.sigma_floor <= exact * (1.0 + 1e-9));
        assert!((cal.sigma_floor - exact).abs() < 0.01 * exact, "{} vs {exact}", cal.sigma_floor);
    }
}

#[test]
fn scalar_quadratic_closed_form_and_input_dependence() {
    let sys = NonlinearSystem::static_output(1, 1, |x| x.map(|z| z * z));
    let c = 0.3;
    let budget = PrivacyBudget::gaussian(0.5, 0.01, c).unwrap();
    let r = privacy::r_value(0.5, 0.01).unwrap();
    let mut floors = Vec::new();
    for x0 in [1.0, 2.5] {
        let cal = calibrate_nonlinear_gaussian(&sys, &Vector::from_element(1, x0), &[Vector::zeros(0)], &budget, &SearchConfig::default()).unwrap();
        let want = (2.0 * x0 * c + c * c) * r;
        assert!((cal.sigma_floor - want).abs() < 0.005 * want, "{} vs {want}", cal.sigma_floor);
        assert!(cal.sampled);
        floors.push(cal.sigma_floor);
    }
    assert!(floors[1] > floors[0]);
}

#[test]
fn calibration_monotone_in_radius() {
    let sys = NonlinearSystem::logistic(3.1);
    let x0 = Vector::from_element(1, 0.4);
    let inputs = vec![Vector::zeros(1); 3];
    let mut last = 0.0;
    for c in [0.01, 0.02, 0.05, 0.1] {
        let budget = PrivacyBudget::gaussian(1.0, 0.05, c).unwrap();
        let cal = calibrate_nonlinear_gaussian(&sys, &x0, &inputs, &budget, &SearchConfig { points: 512, ..Default::default() }).unwrap();
        assert!(cal.sup_deviation >= last);
        last = cal.sup_deviation;
    }
}

#[test]
fn linear_laplace_sup_equals_joint_one_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sys = random_system(&mut rng, 2, 1, 2);
    let t = 2;
    let budget = PrivacyBudget::laplace(0.4, 1.5).unwrap();
    let dom = DomainBox::uniform(2 + 3, -1.0, 1.0).unwrap();
    let bound = nonlinear_laplace_scale(&NonlinearSystem::linear(&sys), &Vector::zeros(2), &vec![Vector::zeros(1); 3], &budget, &dom, 16).unwrap();
    let exact = privacy::laplace_scale(&sys, &budget, t).unwrap();
    assert!((bound.scale - exact).abs() < 1e-12 * exact.max(1.0));
    let halved = PrivacyBudget::laplace(0.8, 1.5).unwrap();
    let b2 = nonlinear_laplace_scale(&NonlinearSystem::linear(&sys), &Vector::zeros(2), &vec![Vector::zeros(1); 3], &halved, &dom, 16).unwrap();
    assert!((b2.scale * 2.0 - bound.scale).abs() < 1e-12 * bound.scale);
}

fn cert(lambda: f64, k: f64) -> IosCertificate {
    IosCertificate {
        v: Arc::new(move |x: &Vector, y: &Vector| k * (x - y).norm()),
        lambda,
        sigma1: KFunction::zero(),
        sigma2: KFunction::linear(k),
        alpha2: KFunction::linear(k),
        c1: k,
    }
}

fn grid_spec() -> SampleSpec {
    SampleSpec {
        state_lower: vec![-2.0],
        state_upper: vec![2.0],
        input_lower: vec![-1.0],
        input_upper: vec![1.0],
        mode: SampleMode::Grid { per_axis: 10 },
    }
}

#[test]
fn stable_scalar_certificate_holds_on_grid() {
    let sys = NonlinearSystem::linear(&StateSpace::scalar(0.5, 1.0, 1.0, 0.0));
    let rep = check_incremental_ios(&sys, &cert(0.5, 1.0), &grid_spec()).unwrap();
    assert_eq!(rep.samples, 10_000);
    assert!(rep.holds_on_samples, "{rep:?}");
    assert!(rep.output_margin >= 0.0 && rep.upper_margin >= 0.0 && rep.decrease_margin >= 0.0);
}

#[test]
fn unstable_scalar_yields_witness() {
    let sys = NonlinearSystem::linear(&StateSpace::scalar(2.0, 0.0, 1.0, 0.0));
    for lambda in [0.1, 0.5, 0.99] {
        let rep = check_incremental_ios(&sys, &cert(lambda, 1.0), &grid_spec()).unwrap();
        assert!(!rep.holds_on_samples);
        assert!(rep.decrease_margin < 0.0);
        let w = rep.decrease_witness.unwrap();
        let dx = (w.x[0] - w.x_prime[0]).abs();
        // V(f, f') = 2|Δx| exceeds λ|Δx| + |Δu| at the witness
        let du = (w.u[0] - w.u_prime[0]).abs();
        assert!(2.0 * dx > lambda * dx + du);
    }
}

#[test]
fn verdict_invariant_under_joint_scaling() {
    for a in [0.5, 2.0] {
        let sys = NonlinearSystem::linear(&StateSpace::scalar(a, 1.0, 1.0, 0.0));
        let base = check_incremental_ios(&sys, &cert(0.5, 1.0), &grid_spec()).unwrap();
        let scaled = check_incremental_ios(&sys, &cert(0.5, 3.7), &grid_spec()).unwrap();
        assert_eq!(base.holds_on_samples, scaled.holds_on_samples);
    }
}
