#![allow(dead_code)]

use dpctl::linalg::Mat;
use dpctl::StateSpace;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random system with `A` rescaled to spectral radius `radius`.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize, radius: f64, with_d: bool) -> StateSpace {
    let mut a = gaussian(rng, n, n);
    let rho = dpctl::linalg::spectral_radius(&a);
    if rho > 1e-12 {
        a *= radius / rho;
    }
    let d = if with_d { gaussian(rng, q, m) } else { Mat::zeros(q, m) };
    StateSpace::new(a, gaussian(rng, n, m), gaussian(rng, q, n), d).unwrap()
}

/// Random system whose dimensions are also drawn, `n ≤ max_n`.
pub fn random_any(rng: &mut ChaCha8Rng, max_n: usize) -> StateSpace {
    let n = rng.random_range(1..=max_n);
    let q = rng.random_range(1..=3);
    let m = rng.random_range(1..=3);
    let radius = rng.random_range(0.2..1.3);
    let with_d = rng.random_bool(0.5);
    random_system(rng, n, m, q, radius, with_d)
}

/// Strongly input observable by construction: `[C D]` injective.
pub fn observable_by_construction(rng: &mut ChaCha8Rng, n: usize, m: usize) -> StateSpace {
    let q = n + m;
    loop {
        let a = gaussian(rng, n, n) * 0.5;
        let c = gaussian(rng, q, n);
        let d = gaussian(rng, q, m);
        let cd = dpctl::linalg::hstack(&[&c, &d]);
        let sv = dpctl::linalg::singular_values(&cd);
        if sv.iter().cloned().fold(f64::INFINITY, f64::min) > 0.1 {
            return StateSpace::new(a, gaussian(rng, n, m), c, d).unwrap();
        }
    }
}

/// Not strongly input observable by construction: the input never reaches the output.
pub fn unobservable_by_construction(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize) -> StateSpace {
    StateSpace::new(gaussian(rng, n, n) * 0.5, Mat::zeros(n, m), gaussian(rng, q, n), Mat::zeros(q, m)).unwrap()
}

/// Spearman rank correlation for distinct values.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
