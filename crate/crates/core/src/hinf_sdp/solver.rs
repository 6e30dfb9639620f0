//! Log-det barrier method for max-slack LMI feasibility.
//!
//! Solves `max t  s.t.  Fₖ(z) ⪰ t·I` over a box `|zᵢ| ≤ B`. After each
//! centering step the barrier duality gap bounds the optimal slack from
//! above, so a negative upper bound certifies infeasibility on the box and a
//! positive re-evaluated slack certifies feasibility.

use std::collections::BTreeMap;

use serde::Serialize;

use super::lmi::{LmiProblem, LoweredLmi};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Feasible,
    Infeasible,
    NumericallyIndeterminate,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    /// Bound on every decision scalar.
    pub box_bound: f64,
    /// Strictness threshold, relative to the constant-term scale.
    pub feas_tol: f64,
    /// Target barrier gap, relative to the constant-term scale.
    pub gap_tol: f64,
    pub max_outer: usize,
    pub max_newton: usize,
    /// Barrier parameter growth per outer iteration.
    pub mu: f64,
    /// Stop as soon as feasibility or infeasibility is certified instead of
    /// maximizing the slack.
    pub early_exit: bool,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            box_bound: 1e4,
            feas_tol: 1e-7,
            gap_tol: 1e-9,
            max_outer: 80,
            max_newton: 200,
            mu: 8.0,
            early_exit: false,
        }
    }
}

impl SdpOptions {
    pub fn early_exit() -> Self {
        Self {
            early_exit: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Smallest eigenvalue over all constraints at the returned assignment.
    pub margin: f64,
    /// Upper bound on the optimal slack from the barrier gap.
    pub slack_upper_bound: f64,
    /// Threshold `margin` had to exceed.
    pub tolerance: f64,
    #[serde(serialize_with = "serialize_assignments")]
    pub assignments: BTreeMap<String, Mat>,
    pub constraint_margins: Vec<(String, f64)>,
    pub objective_value: Option<f64>,
    pub newton_steps: usize,
    pub diagnostics: String,
}

fn serialize_assignments<S: serde::Serializer>(
    m: &BTreeMap<String, Mat>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &linalg::mat_to_rows(v))?;
    }
    map.end()
}

impl SdpSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == SdpStatus::Feasible
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.assignments.get(name)
    }
}

/// Barrier `−Σ log det Gₖ(y) − Σ log(B² − yᵢ²)` plus linear term `s·wᵀy`.
struct Barrier {
    lmis: Vec<LoweredLmi>,
    dim: usize,
    boxed: usize,
    bound: f64,
    w: Vec<f64>,
}

enum Centering {
    Converged,
    Stalled,
}

impl Barrier {
    fn total_degree(&self) -> f64 {
        (self.lmis.iter().map(|l| l.constant.nrows()).sum::<usize>() + 2 * self.boxed) as f64
    }

    fn g_of(&self, lmi: &LoweredLmi, y: &[f64]) -> Mat {
        let mut g = lmi.constant.clone();
        for (k, a) in &lmi.coeffs {
            g += a * y[*k];
        }
        g
    }

    fn value(&self, y: &[f64], s: f64) -> Option<f64> {
        let mut v = s * self.w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        for yi in &y[..self.boxed] {
            let r = self.bound * self.bound - yi * yi;
            if r <= 0.0 {
                return None;
            }
            v -= r.ln();
        }
        for lmi in &self.lmis {
            let chol = self.g_of(lmi, y).cholesky()?;
            let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            if !logdet.is_finite() {
                return None;
            }
            v -= logdet;
        }
        Some(v)
    }

    fn grad_hess(&self, y: &[f64], s: f64) -> Option<(Vec<f64>, Mat)> {
        let n = self.dim;
        let mut g: Vec<f64> = self.w.iter().map(|w| s * w).collect();
        let mut h = Mat::zeros(n, n);
        for (i, yi) in y[..self.boxed].iter().enumerate() {
            let r = self.bound * self.bound - yi * yi;
            g[i] += 2.0 * yi / r;
            h[(i, i)] += 2.0 / r + 4.0 * yi * yi / (r * r);
        }
        for lmi in &self.lmis {
            let chol = self.g_of(lmi, y).cholesky()?;
            let l = chol.l();
            let scaled: Vec<(usize, Mat)> = lmi
                .coeffs
                .iter()
                .map(|(k, a)| {
                    let half = l.solve_lower_triangular(a).expect("triangular factor is nonsingular");
                    let full = l
                        .solve_lower_triangular(&half.transpose())
                        .expect("triangular factor is nonsingular");
                    (*k, full)
                })
                .collect();
            for (a, (ka, ma)) in scaled.iter().enumerate() {
                g[*ka] -= ma.trace();
                for (kb, mb) in scaled.iter().skip(a) {
                    let v = ma.dot(mb);
                    h[(*ka, *kb)] += v;
                    if ka != kb {
                        h[(*kb, *ka)] += v;
                    }
                }
            }
        }
        Some((g, h))
    }

    fn center(&self, y: &mut Vec<f64>, s: f64, max_newton: usize, steps: &mut usize) -> Centering {
        for _ in 0..max_newton {
            let Some((g, h)) = self.grad_hess(y, s) else {
                return Centering::Stalled;
            };
            let gv = nalgebra::DVector::from_vec(g.clone());
            let dir = match solve_spd(&h, &gv) {
                Some(d) => d,
                None => return Centering::Stalled,
            };
            let decrement = -gv.dot(&dir);
            if decrement.is_nan() {
                return Centering::Stalled;
            }
            if decrement * 0.5 <= 1e-10 {
                return Centering::Converged;
            }
            let Some(f0) = self.value(y, s) else {
                return Centering::Stalled;
            };
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..80 {
                let trial: Vec<f64> = y.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some(f1) = self.value(&trial, s) {
                    if f1 <= f0 - 0.25 * alpha * decrement {
                        *y = trial;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            *steps += 1;
            if !moved {
                return if decrement < 1e-6 {
                    Centering::Converged
                } else {
                    Centering::Stalled
                };
            }
        }
        Centering::Stalled
    }
}

fn solve_spd(h: &Mat, g: &nalgebra::DVector<f64>) -> Option<nalgebra::DVector<f64>> {
    let scale = h.diagonal().amax().max(1e-300);
    for k in 0..6 {
        let reg = if k == 0 { 0.0 } else { scale * 10f64.powi(-14 + 2 * k) };
        let hr = h + Mat::identity(h.nrows(), h.nrows()) * reg;
        if let Some(c) = hr.cholesky() {
            return Some(-c.solve(g));
        }
    }
    None
}

fn problem_scale(lowered: &[LoweredLmi]) -> f64 {
    lowered
        .iter()
        .map(|l| linalg::max_abs(&l.constant))
        .fold(1.0, f64::max)
}

struct SlackRun {
    z: Vec<f64>,
    upper: f64,
    steps: usize,
    stalled: bool,
}

fn maximize_slack(problem: &LmiProblem, lowered: &[LoweredLmi], opts: &SdpOptions, tol: f64) -> SlackRun {
    let nz = problem.scalar_count();
    let mut lmis = lowered.to_vec();
    for l in &mut lmis {
        let d = l.constant.nrows();
        l.coeffs.push((nz, -Mat::identity(d, d)));
    }
    let mut w = vec![0.0; nz + 1];
    w[nz] = -1.0;
    let barrier = Barrier {
        lmis,
        dim: nz + 1,
        boxed: nz,
        bound: opts.box_bound,
        w,
    };
    let t0 = lowered
        .iter()
        .map(|l| linalg::lambda_min(&l.constant))
        .fold(f64::INFINITY, f64::min);
    let mut y = vec![0.0; nz + 1];
    y[nz] = t0 - 1.0;
    let degree = barrier.total_degree();
    let gap_target = opts.gap_tol * problem_scale(lowered);
    let mut s = 1.0;
    let mut steps = 0;
    let mut upper = f64::INFINITY;
    let mut stalled = false;
    for _ in 0..opts.max_outer {
        match barrier.center(&mut y, s, opts.max_newton, &mut steps) {
            Centering::Converged => {
                upper = upper.min(y[nz] + degree / s);
            }
            Centering::Stalled => {
                stalled = true;
                break;
            }
        }
        let t = y[nz];
        if opts.early_exit && (t > tol || upper < -tol) {
            break;
        }
        if upper < -tol || degree / s < gap_target {
            break;
        }
        s *= opts.mu;
    }
    y.truncate(nz);
    SlackRun {
        z: y,
        upper,
        steps,
        stalled,
    }
}

fn minimize_objective(
    lowered: &[LoweredLmi],
    w: Vec<f64>,
    floor: f64,
    z0: &[f64],
    opts: &SdpOptions,
) -> (Vec<f64>, usize) {
    let lmis = lowered
        .iter()
        .map(|l| {
            let d = l.constant.nrows();
            LoweredLmi {
                constant: &l.constant - Mat::identity(d, d) * floor,
                coeffs: l.coeffs.clone(),
            }
        })
        .collect();
    let barrier = Barrier {
        lmis,
        dim: z0.len(),
        boxed: z0.len(),
        bound: opts.box_bound,
        w,
    };
    let degree = barrier.total_degree();
    let wscale = barrier.w.iter().fold(1e-300f64, |a, v| a.max(v.abs()));
    let mut s = 1.0 / wscale;
    let mut y = z0.to_vec();
    let mut steps = 0;
    for _ in 0..opts.max_outer {
        if let Centering::Stalled = barrier.center(&mut y, s, opts.max_newton, &mut steps) {
            break;
        }
        if degree / s < opts.gap_tol {
            break;
        }
        s *= opts.mu;
    }
    (y, steps)
}

/// Maximizes the common slack of all constraints and classifies the problem.
/// When the problem carries an objective and is feasible, the objective is
/// then minimized while keeping half of the certified slack.
pub fn sdp_feasible(problem: &LmiProblem, opts: &SdpOptions) -> SdpSolution {
    let vars = problem.variables();
    let lowered: Vec<LoweredLmi> = problem.constraints().iter().map(|c| c.lower(vars)).collect();
    let tol = opts.feas_tol * problem_scale(&lowered);
    if lowered.is_empty() {
        let z = vec![0.0; problem.scalar_count()];
        return SdpSolution {
            status: SdpStatus::Feasible,
            margin: f64::INFINITY,
            slack_upper_bound: f64::INFINITY,
            tolerance: tol,
            assignments: problem.assignments(&z),
            constraint_margins: Vec::new(),
            objective_value: None,
            newton_steps: 0,
            diagnostics: "no constraints".into(),
        };
    }
    let run = maximize_slack(problem, &lowered, opts, tol);
    let mut z = run.z;
    let mut steps = run.steps;
    let margins = |z: &[f64]| -> Vec<(String, f64)> {
        problem
            .constraints()
            .iter()
            .map(|c| (c.name.clone(), linalg::lambda_min(&c.evaluate(vars, z))))
            .collect()
    };
    let mut cm = margins(&z);
    let mut margin = cm.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let (status, diagnostics) = if margin > tol {
        (SdpStatus::Feasible, format!("slack {margin:.3e} exceeds tolerance {tol:.3e}"))
    } else if run.upper < -tol {
        (
            SdpStatus::Infeasible,
            format!("slack upper bound {:.3e} below −{tol:.3e} on box {:e}", run.upper, opts.box_bound),
        )
    } else {
        let why = if run.stalled { "Newton centering stalled" } else { "slack within tolerance band" };
        (
            SdpStatus::NumericallyIndeterminate,
            format!("{why}: slack {margin:.3e}, upper bound {:.3e}, tolerance {tol:.3e}", run.upper),
        )
    };
    let mut objective_value = None;
    if let (SdpStatus::Feasible, Some(obj)) = (status, problem.objective()) {
        let w = obj.vector(vars, z.len());
        let (z2, extra) = minimize_objective(&lowered, w.clone(), 0.5 * margin, &z, opts);
        steps += extra;
        let cm2 = margins(&z2);
        let m2 = cm2.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        if m2 > tol {
            z = z2;
            cm = cm2;
            margin = m2;
        }
        objective_value = Some(w.iter().zip(&z).map(|(a, b)| a * b).sum());
    }
    SdpSolution {
        status,
        margin,
        slack_upper_bound: run.upper,
        tolerance: tol,
        assignments: problem.assignments(&z),
        constraint_margins: cm,
        objective_value,
        newton_steps: steps,
        diagnostics,
    }
}
