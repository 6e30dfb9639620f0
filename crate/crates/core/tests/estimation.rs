mod common;

use dpctl::estimation::{self, left_inverse_gain_of};
use dpctl::gridlab::Microgrid;
use dpctl::linalg::{self, Mat, Vector};
use dpctl::{linsys, Error, StateSpace};
use rand_distr::{Distribution, StandardNormal};

/// Error channel and reference channel sharing one state, with three outputs
/// so the single private input is recoverable.
fn tall_pair(seed: u64) -> (StateSpace, StateSpace) {
    let mut rng = common::rng(seed);
    let a = common::gaussian(&mut rng, 3, 3);
    let a = &a * (0.7 / linalg::spectral_radius(&a));
    let c = common::gaussian(&mut rng, 3, 3);
    let err = StateSpace::new(a.clone(), common::gaussian(&mut rng, 3, 1), c.clone(), Mat::zeros(3, 1)).unwrap();
    let refs = StateSpace::new(a, common::gaussian(&mut rng, 3, 2), c, common::gaussian(&mut rng, 3, 2)).unwrap();
    (err, refs)
}

fn publish(err: &StateSpace, refs: &StateSpace, e: &[Vector], r: &[Vector]) -> Vec<Vector> {
    let sys = StateSpace::new(
        err.a().clone(),
        linalg::hstack(&[err.b(), refs.b()]),
        err.c().clone(),
        linalg::hstack(&[err.d(), refs.d()]),
    )
    .unwrap();
    let inputs: Vec<Vector> =
        e.iter().zip(r).map(|(a, b)| Vector::from_iterator(a.len() + b.len(), a.iter().chain(b).copied())).collect();
    linsys::simulate(&sys, &Vector::from_column_slice(&[0.5, -1.0, 0.25]), &inputs).unwrap().outputs
}

fn signals(len: usize) -> (Vec<Vector>, Vec<Vector>) {
    let e = (0..len).map(|t| Vector::from_element(1, (0.3 * t as f64).sin() + 0.1 * t as f64)).collect();
    let r = (0..len).map(|t| Vector::from_column_slice(&[1.0, (0.05 * t as f64).cos()])).collect();
    (e, r)
}

#[test]
fn noiseless_reconstruction_exact_on_random_tall_systems() {
    for seed in 0..10 {
        let (err, refs) = tall_pair(seed);
        let (e, r) = signals(40);
        let u = publish(&err, &refs, &e, &r);
        let est = estimation::estimate_inputs(&err, &refs, &u, &r, None).unwrap();
        assert!(est.max_error(&e).unwrap() < 1e-8, "seed {seed}: {}", est.max_error(&e).unwrap());
    }
}

#[test]
fn lag_is_twice_the_state_dimension() {
    let (err, refs) = tall_pair(3);
    let gain = left_inverse_gain_of(&err).unwrap();
    assert_eq!(gain.lag(), 6);
    assert!(gain.residual < 1e-8);
    let (e, r) = signals(30);
    let u = publish(&err, &refs, &e, &r);
    let est = estimation::estimate_inputs(&err, &refs, &u, &r, None).unwrap();
    assert_eq!(est.lag, 6);
    assert_eq!(est.len(), 30 - 6);

    // ẽ(t) only reads samples t..=t+lag
    let t = 5;
    let mut tampered = u.clone();
    for v in tampered.iter_mut().skip(t + est.lag + 1) {
        v.add_scalar_mut(100.0);
    }
    let est2 = estimation::estimate_inputs(&err, &refs, &tampered, &r, None).unwrap();
    for s in 0..=t {
        assert!((&est.estimates[s] - &est2.estimates[s]).amax() < 1e-9);
    }
    assert!((&est.estimates[t + 1] - &est2.estimates[t + 1]).amax() > 1.0);
}

#[test]
fn reconstruction_error_grows_with_noise() {
    let (err, refs) = tall_pair(11);
    let (e, r) = signals(200);
    let u = publish(&err, &refs, &e, &r);
    let mut rng = common::rng(99);
    let draws: Vec<Vector> = (0..u.len()).map(|_| Vector::from_fn(3, |_, _| StandardNormal.sample(&mut rng))).collect();
    let scales = [0.01, 0.03, 0.1, 0.3, 1.0];
    let rmse: Vec<f64> = scales
        .iter()
        .map(|&s| {
            let noisy: Vec<Vector> = u.iter().zip(&draws).map(|(a, z)| a + z * s).collect();
            estimation::estimate_inputs(&err, &refs, &noisy, &r, Some(s)).unwrap().rmse(&e).unwrap()
        })
        .collect();
    assert_eq!(common::spearman(&scales, &rmse), 1.0, "{rmse:?}");
}

#[test]
fn microgrid_controller_has_no_left_inverse() {
    let ctrl = Microgrid::paper().printed_controller().unwrap();
    match estimation::left_inverse_gain(&ctrl) {
        Err(Error::NotStronglyInputObservable { rank, required }) => assert!(rank < required),
        other => panic!("expected rank failure, got {other:?}"),
    }
}

#[test]
fn mismatched_lengths_rejected() {
    let (err, refs) = tall_pair(1);
    let (e, r) = signals(20);
    let u = publish(&err, &refs, &e, &r);
    assert!(estimation::estimate_inputs(&err, &refs, &u, &r[..10], None).is_err());
    assert!(estimation::estimate_inputs(&err, &refs, &u, &r, Some(-1.0)).is_err());
}
