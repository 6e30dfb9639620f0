#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use dpctl::estimation;
use dpctl::gridlab::{self, ExperimentConfig, Microgrid, NoisePlan};
use dpctl::linalg::{self, Mat, Vector};
use dpctl::nonlinear::{self, NonlinearSystem, SearchConfig};
use dpctl::observability;
use dpctl::privacy::{self, PrivacyBudget, StableVariant};
use dpctl::synthesis::{self, ObserverObjective, PrivacyController, PrivacyDesign, RegulatorMode};
use dpctl::{Error, Result, StateSpace};

#[derive(Parser)]
#[command(name = "dpctl", version, about = "Differential privacy of dynamical systems and privacy-preserving tracking control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strong input observability Gramian and output-noise privacy report.
    Analyze {
        system: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Input horizon; defaults to the output horizon.
        #[arg(long = "T")]
        big_t: Option<usize>,
        /// Noise covariance: a JSON matrix file or `iid:<σ>`.
        #[arg(long)]
        sigma: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
    /// Noise floors for an (ε, δ) target.
    Calibrate {
        system: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, value_enum, default_value_t = Mode::OutputIid)]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
    },
    /// Privacy-preserving tracking controller from plant and exosystem.
    Synthesize {
        plant: PathBuf,
        exo: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long = "gamma-bar")]
        gamma_bar: Option<f64>,
        /// Accept a least-squares solution of the regulator equations.
        #[arg(long)]
        least_squares: bool,
        #[arg(long, value_enum, default_value_t = Objective::DecayRate)]
        objective: Objective,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Closed-loop experiment: CSV traces and JSON summary.
    Simulate {
        plant: PathBuf,
        controller: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Exosystem JSON; a constant reference on every output by default.
        #[arg(long)]
        exo: Option<PathBuf>,
    },
    /// Reconstructs the tracking error from published controller outputs.
    Estimate {
        controller: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        /// Constant exosystem state when the CSV has no `r_j` columns.
        #[arg(long, value_delimiter = ',')]
        reference: Option<Vec<f64>>,
        /// Standard deviation of noise on the published outputs.
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Runs the two-node microgrid case study end to end.
    Microgrid {
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
        #[arg(long, default_value = "microgrid-out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the LMI design of a fresh observer gain.
        #[arg(long)]
        skip_design: bool,
    },
    /// Sampled Gaussian calibration for a built-in nonlinear system.
    Nonlinear {
        #[arg(long, value_enum)]
        builtin: Builtin,
        /// Logistic growth rate.
        #[arg(long, default_value_t = 3.5)]
        r: f64,
        /// System JSON for `linear-wrapped`.
        #[arg(long)]
        system: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 4096)]
        points: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    OutputIid,
    Input,
    Stable,
    Laplace,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    DecayRate,
    MaxSlack,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Logistic,
    LinearWrapped,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => gridlab::write_json_file(value, path),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn parse_sigma(spec: &str, rows: usize) -> Result<Mat> {
    if let Some(s) = spec.strip_prefix("iid:") {
        let sigma: f64 = s.parse().map_err(|_| Error::Parse(format!("bad σ in '{spec}'")))?;
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("σ must be positive, got {sigma}")));
        }
        return Ok(Mat::identity(rows, rows) * (sigma * sigma));
    }
    let m: Vec<Vec<f64>> = read_json(Path::new(spec))?;
    linalg::mat_from_rows(&m)
}

fn analyze(
    system: &Path,
    t: usize,
    big_t: Option<usize>,
    sigma: Option<&str>,
    eps: Option<f64>,
    delta: Option<f64>,
    c: f64,
) -> Result<serde_json::Value> {
    let sys: StateSpace = read_json(system)?;
    let bt = big_t.unwrap_or(t);
    let rows = (t + 1) * sys.q();
    let cov = match sigma {
        Some(s) => parse_sigma(s, rows)?,
        None => Mat::identity(rows, rows),
    };
    let gramian = observability::weighted_gramian(&sys, t, bt, &cov)?;
    let strong = observability::is_strongly_input_observable(&sys);
    let mut out = json!({ "gramian": gramian, "strong_input_observability": strong });
    if let Some(eps) = eps {
        let budget = PrivacyBudget::gaussian(eps, delta.unwrap_or(0.05), c)?;
        let report = privacy::verify_output_gaussian(&sys, &cov, &budget, t, big_t)?;
        out["privacy"] = serde_json::to_value(report).map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(out)
}

fn calibrate(system: &Path, eps: f64, delta: f64, c: f64, mode: Mode, t: usize) -> Result<serde_json::Value> {
    let sys: StateSpace = read_json(system)?;
    Ok(match mode {
        Mode::OutputIid => {
            let budget = PrivacyBudget::gaussian(eps, delta, c)?;
            json!({ "mode": "output-iid", "horizon": t, "sigma": privacy::min_iid_sigma(&sys, &budget, t)? })
        }
        Mode::Input => {
            let budget = PrivacyBudget::gaussian(eps, delta, c)?;
            json!({ "mode": "input", "lambda_min_floor": privacy::calibrate_input_gaussian(&budget)? })
        }
        Mode::Stable => {
            let budget = PrivacyBudget::gaussian(eps, delta, c)?;
            let floor = privacy::stable_gaussian_floor(&sys, &budget, StableVariant::Full)?;
            json!({ "mode": "stable", "sqrt_lambda_min_floor": floor, "lambda_min_floor": floor * floor })
        }
        Mode::Laplace => {
            let budget = PrivacyBudget::laplace(eps, c)?;
            json!({ "mode": "laplace", "horizon": t, "scale": privacy::laplace_scale(&sys, &budget, t)? })
        }
    })
}

type Columns = (Vec<Vector>, Vec<Vector>, Option<Vec<Vector>>);

fn read_estimate_csv(path: &Path, m: usize, nr: usize, reference: Option<&[f64]>) -> Result<Columns> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?.clone();
    let find = |name: String| headers.iter().position(|h| h.trim() == name);
    let u_cols: Vec<usize> = (1..=m)
        .map(|i| find(format!("u_{i}")).ok_or_else(|| Error::Parse(format!("{}: missing column u_{i}", path.display()))))
        .collect::<Result<_>>()?;
    let r_cols: Option<Vec<usize>> = (1..=nr).map(|j| find(format!("r_{j}"))).collect();
    let e_cols: Vec<usize> = (1..).map_while(|j| find(format!("e_{j}"))).collect();
    let constant = match (&r_cols, reference) {
        (Some(_), _) => None,
        (None, Some(r)) if r.len() == nr => Some(Vector::from_column_slice(r)),
        (None, Some(r)) => {
            return Err(Error::Dimension(format!("--reference has {} entries, exosystem has {nr}", r.len())));
        }
        (None, None) if nr == 0 => Some(Vector::zeros(0)),
        (None, None) => {
            return Err(Error::InvalidArgument(format!(
                "{}: no r_1..r_{nr} columns; pass --reference",
                path.display()
            )))
        }
    };
    let (mut us, mut rs, mut es) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let get = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("{}: bad number in row {}, column {}", path.display(), line + 2, c + 1)))
        };
        us.push(Vector::from_vec(u_cols.iter().map(|&c| get(c)).collect::<Result<_>>()?));
        rs.push(match (&r_cols, &constant) {
            (Some(cols), _) => Vector::from_vec(cols.iter().map(|&c| get(c)).collect::<Result<_>>()?),
            (None, Some(r)) => r.clone(),
            (None, None) => unreachable!("reference resolved above"),
        });
        if !e_cols.is_empty() {
            es.push(Vector::from_vec(e_cols.iter().map(|&c| get(c)).collect::<Result<_>>()?));
        }
    }
    Ok((us, rs, if e_cols.is_empty() { None } else { Some(es) }))
}

fn estimate(controller: &Path, traj: &Path, reference: Option<&[f64]>, noise_std: Option<f64>, output: Option<&Path>) -> Result<()> {
    let ctrl: PrivacyController = read_json(controller)?;
    let (m, nr) = (ctrl.g1.nrows(), ctrl.a_r.ncols());
    let (us, rs, truth) = read_estimate_csv(traj, m, nr, reference)?;
    let est = estimation::estimate_private_errors(&ctrl, &us, &rs, noise_std)?;
    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?),
        None => Box::new(io::stdout()),
    };
    let mut wr = csv::Writer::from_writer(sink);
    let q = ctrl.l1.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((1..=q).map(|j| format!("e_hat_{j}")));
    if truth.is_some() {
        header.extend((1..=q).map(|j| format!("e_{j}")));
        header.push("error".into());
    }
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    wr.write_record(&header).map_err(csv_err)?;
    for (t, e_hat) in est.estimates.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(e_hat.iter().map(|x| x.to_string()));
        if let Some(tr) = &truth {
            rec.extend(tr[t].iter().map(|x| x.to_string()));
            rec.push((e_hat - &tr[t]).amax().to_string());
        }
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::Io { path: "<output>".into(), source: e })
}

fn microgrid(out: &Path, horizon: usize, seed: u64, skip_design: bool) -> Result<serde_json::Value> {
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
    let mg = Microgrid::paper();
    let ctrl = mg.printed_controller()?;
    gridlab::write_json_file(&mg.params, &out.join("params.json"))?;
    gridlab::write_json_file(&mg.plant, &out.join("plant.json"))?;
    gridlab::write_json_file(&mg.exo, &out.join("exo.json"))?;
    gridlab::write_json_file(&ctrl, &out.join("controller.json"))?;
    let design = gridlab::gramian_noise_design(&ctrl, 10, 5, 1.0, None)?;
    gridlab::write_json_file(&design, &out.join("noise_design.json"))?;
    let assumptions = synthesis::check_assumptions(&mg.plant, &mg.exo)?;
    let designed = if skip_design {
        None
    } else {
        let d = mg.designed_controller(gridlab::printed::GAMMA)?;
        gridlab::write_json_file(&d, &out.join("designed_controller.json"))?;
        Some(json!({ "hinf": d.hinf, "controller_radius": d.controller_radius, "observer_radius": d.observer_radius }))
    };
    let mut runs = Vec::new();
    for a in [0.0, 15.8, 39.7, 64.3] {
        let noise = if a == 0.0 { NoisePlan::None } else { NoisePlan::Input { a, shape: None } };
        let mut cfg = ExperimentConfig::new(mg.paper_scenario(), noise, horizon, seed);
        cfg.dt = mg.params.dt;
        cfg.csv_path = Some(out.join(format!("traces_a{a}.csv")));
        cfg.summary_path = Some(out.join(format!("summary_a{a}.json")));
        let res = gridlab::run_and_write(&mg.plant, &mg.exo, &ctrl, &cfg)?;
        runs.push(res.summary);
    }
    let g1 = synthesis::lqr_gain(&mg.plant)?;
    let summary = json!({
        "g1": linalg::mat_to_rows(&g1),
        "g2": linalg::mat_to_rows(&ctrl.g2),
        "l1": linalg::mat_to_rows(&ctrl.l1),
        "gamma": ctrl.gamma,
        "hinf": ctrl.hinf,
        "assumptions": assumptions,
        "noise_shape": linalg::mat_to_rows(&design.shapes[0]),
        "kappa": design.kappa,
        "designed_controller": designed,
        "runs": runs,
    });
    gridlab::write_json_file(&summary, &out.join("pipeline.json"))?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn nonlinear_cmd(
    builtin: Builtin,
    r: f64,
    system: Option<&Path>,
    x0: &[f64],
    horizon: usize,
    eps: f64,
    delta: f64,
    c: f64,
    points: usize,
) -> Result<serde_json::Value> {
    let sys = match builtin {
        Builtin::Logistic => NonlinearSystem::logistic(r),
        Builtin::LinearWrapped => {
            let path = system.ok_or_else(|| Error::InvalidArgument("linear-wrapped needs --system".into()))?;
            NonlinearSystem::linear(&read_json::<StateSpace>(path)?)
        }
    };
    let x0 = if x0.is_empty() { Vector::zeros(sys.n) } else { Vector::from_column_slice(x0) };
    let inputs = vec![Vector::zeros(sys.m); horizon + 1];
    let budget = PrivacyBudget::gaussian(eps, delta, c)?;
    let cal = nonlinear::calibrate_nonlinear_gaussian(&sys, &x0, &inputs, &budget, &SearchConfig { points, ..Default::default() })?;
    Ok(json!({ "calibration": cal, "note": "sup found by sampling; the floor may be optimistic" }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { system, horizon, big_t, sigma, eps, delta, c } => {
            emit(&analyze(&system, horizon, big_t, sigma.as_deref(), eps, delta, c)?, None)
        }
        Command::Calibrate { system, eps, delta, c, mode, horizon } => emit(&calibrate(&system, eps, delta, c, mode, horizon)?, None),
        Command::Synthesize { plant, exo, gamma, gamma_bar, least_squares, objective, output } => {
            let plant: StateSpace = read_json(&plant)?;
            let exo: StateSpace = read_json(&exo)?;
            let mut design = PrivacyDesign::new(gamma);
            design.gamma_bar = gamma_bar;
            if least_squares {
                design.regulator = RegulatorMode::LeastSquares;
            }
            design.objective = match objective {
                Objective::DecayRate => ObserverObjective::DecayRate,
                Objective::MaxSlack => ObserverObjective::MaxSlack,
            };
            let ctrl = synthesis::design_privacy_controller(&plant, &exo, &design)?;
            emit(&ctrl, output.as_deref())
        }
        Command::Simulate { plant, controller, config, exo } => {
            let plant: StateSpace = read_json(&plant)?;
            let ctrl: PrivacyController = read_json(&controller)?;
            let cfg: ExperimentConfig = read_json(&config)?;
            let exo = match exo {
                Some(p) => read_json(&p)?,
                None => gridlab::constant_exosystem(plant.q()),
            };
            let res = gridlab::run_and_write(&plant, &exo, &ctrl, &cfg)?;
            emit(&res.summary, None)
        }
        Command::Estimate { controller, traj, reference, noise_std, output } => {
            estimate(&controller, &traj, reference.as_deref(), noise_std, output.as_deref())
        }
        Command::Microgrid { preset: Preset::Paper, out, horizon, seed, skip_design } => {
            emit(&microgrid(&out, horizon, seed, skip_design)?, None)
        }
        Command::Nonlinear { builtin, r, system, x0, horizon, eps, delta, c, points } => {
            emit(&nonlinear_cmd(builtin, r, system.as_deref(), &x0, horizon, eps, delta, c, points)?, None)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
