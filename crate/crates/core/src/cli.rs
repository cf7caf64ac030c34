//! Config-driven runners behind the `dual-lqr` binary.
//!
//! A run is fully described by one JSON document ([`RunConfig`]) plus the
//! command name; `--seed` and `--out-dir` are the only overrides. Each
//! runner writes its artifacts into the output directory and returns the
//! process exit code (see [`exit`]).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{
    admissible_rho, alpha_of, corollary_bound_check, first_certified_step, lyapunov_decay_check,
    theorem1_margin, CertificateReport, PSD_SLACK,
};
use crate::error::{Error, Result};
use crate::instances::{
    random_corollary_scenario, random_lemma1_report, random_member_plant, random_theorem1_report,
    stream_rng,
};
use crate::linalg::{spectral_norm, Mat, Vector};
use crate::riccati::{
    check_membership, dare_residual, gain_from_q, q_from_p, solve_dare, Gain, MembershipCertificate,
    PlantModel, QMatrix, ValueMatrix, DEFAULT_MAX_ITER, DEFAULT_MEMBERSHIP_TOL, DEFAULT_TOL,
};
use crate::sim::{fmt_f64, simulate, ControllerConfig, DisturbanceModel, Scenario, TrajectoryLog};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const NOT_STABILIZABLE: i32 = 2;
    pub const OVERFLOW: i32 = 3;
    pub const FALSIFIED: i32 = 4;
}

/// Environment variable capping the worker threads of batch commands.
pub const THREADS_ENV: &str = "DUAL_LQR_THREADS";

/// Stream offsets keeping the random batches of one seed independent.
const LEMMA1_STREAMS: u64 = 1 << 32;
const COROLLARY_STREAMS: u64 = 2 << 32;
const SWEEP_PLANT_STREAMS: u64 = 3 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Simulate,
    Certify,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Certify => "certify",
            Command::Sweep => "sweep",
        }
    }
}

/// Sweep axes. With `rho_relative`, `rhos` are fractions of `ρ*(β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub betas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub rho_relative: bool,
    pub gammas: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub disturbance_magnitudes: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            betas: vec![2.0],
            rhos: vec![0.5],
            rho_relative: true,
            gammas: vec![10.0],
            amplitudes: vec![1.0],
            disturbance_magnitudes: vec![0.0],
        }
    }
}

/// One JSON document per run. Every field has a default except the plant
/// (`plant`, or the dimensions `n`, `m` for randomized commands).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub plant: Option<PlantModel>,
    /// State dimension (upper bound for random certificate instances).
    pub n: Option<usize>,
    /// Input dimension (upper bound for random certificate instances).
    pub m: Option<usize>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub beta: f64,
    /// Defaults to `0.5 ρ*(β)`.
    pub rho: Option<f64>,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Defaults to all ones.
    pub x0: Option<Vec<f64>>,
    pub horizon: usize,
    /// Start of the gain-bound window; defaults to the first step from which
    /// the hypotheses hold.
    pub t0: Option<usize>,
    pub controller: ControllerConfig,
    pub disturbance: DisturbanceModel,
    /// Gain certified for an explicit instance; defaults to the optimal gain.
    pub gain: Option<Gain>,
    pub theorem1_instances: usize,
    pub lemma1_instances: usize,
    pub corollary_scenarios: usize,
    /// Also certify the gain bound on a simulated run of the explicit plant.
    pub corollary: bool,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            plant: None,
            n: None,
            m: None,
            seed: 0,
            out_dir: None,
            beta: 2.0,
            rho: None,
            gamma: 10.0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            x0: None,
            horizon: 1000,
            t0: None,
            controller: ControllerConfig::default(),
            disturbance: DisturbanceModel::Zero,
            gain: None,
            theorem1_instances: 100,
            lemma1_instances: 0,
            corollary_scenarios: 0,
            corollary: false,
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document; errors carry serde's line/column position.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn plant(&self) -> Result<&PlantModel> {
        self.plant
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs an inline `plant` {\"a\": [[..]], \"b\": [[..]]}".into()))
    }

    /// `(n, m)` from the plant, else from the explicit dimensions.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if let Some(p) = &self.plant {
            return Ok((p.n(), p.m()));
        }
        match (self.n, self.m) {
            (Some(n), Some(m)) if n > 0 && m > 0 => Ok((n, m)),
            _ => Err(Error::Config("either `plant` or positive dimensions `n` and `m` are required".into())),
        }
    }

    pub fn rho_value(&self) -> Result<f64> {
        match self.rho {
            Some(r) if r >= 0.0 && r.is_finite() => Ok(r),
            Some(r) => Err(Error::Config(format!("rho must be a finite non-negative number, got {r}"))),
            None => Ok(0.5 * admissible_rho(self.beta)?),
        }
    }

    pub fn x0_for(&self, n: usize) -> Vector {
        match &self.x0 {
            Some(v) => Vector::from_column_slice(v),
            None => Vector::from_element(n, 1.0),
        }
    }

    /// The closed-loop experiment for `plant` with the given certificate
    /// parameters, excitation amplitude and disturbance.
    pub fn scenario(
        &self,
        plant: &PlantModel,
        (beta, rho, gamma): (f64, f64, f64),
        amplitude: f64,
        disturbance: DisturbanceModel,
    ) -> Result<Scenario> {
        let scenario = Scenario {
            plant: plant.clone(),
            disturbance,
            controller: ControllerConfig { amplitude, ..self.controller.clone() },
            x0: self.x0_for(plant.n()),
            horizon: self.horizon,
            beta,
            rho,
            gamma,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// `solve` artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub plant: PlantModel,
    pub beta: f64,
    pub p: Option<ValueMatrix>,
    pub q: Option<QMatrix>,
    pub k: Option<Gain>,
    pub residual: Option<f64>,
    pub membership: Option<MembershipCertificate>,
    pub error: Option<String>,
}

/// `simulate` artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub steps: usize,
    pub overflow: bool,
    pub final_state_norm: f64,
    pub max_rho: Option<f64>,
    pub realized_cost: f64,
    pub fallback_steps: usize,
    pub optimal_gain: Option<Gain>,
    pub final_gain: Option<Gain>,
    /// `‖K_{T−1} − K̄‖`.
    pub gain_error: Option<f64>,
}

/// One `sweep.csv` row; absent values are empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub excitation_amplitude: f64,
    pub disturbance_magnitude: f64,
    pub alpha: Option<f64>,
    pub rho_star: Option<f64>,
    pub t0: Option<usize>,
    pub max_rho: Option<f64>,
    pub hypotheses_hold: Option<bool>,
    pub corollary_margin: Option<f64>,
    pub realized_cost: Option<f64>,
    pub overflow: Option<bool>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: [&str; 15] = [
    "index",
    "beta",
    "rho",
    "gamma",
    "excitation_amplitude",
    "disturbance_magnitude",
    "alpha",
    "rho_star",
    "t0",
    "max_rho",
    "hypotheses_hold",
    "corollary_margin",
    "realized_cost",
    "overflow",
    "error",
];

impl SweepRow {
    fn cells(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        vec![
            self.index.to_string(),
            fmt_f64(self.beta),
            fmt_f64(self.rho),
            fmt_f64(self.gamma),
            fmt_f64(self.excitation_amplitude),
            fmt_f64(self.disturbance_magnitude),
            f(self.alpha),
            f(self.rho_star),
            self.t0.map(|t| t.to_string()).unwrap_or_default(),
            f(self.max_rho),
            self.hypotheses_hold.map(|b| b.to_string()).unwrap_or_default(),
            f(self.corollary_margin),
            f(self.realized_cost),
            self.overflow.map(|b| b.to_string()).unwrap_or_default(),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// True when a report's hypotheses hold but its conclusion fails beyond the
/// certificate's slack (`1e-6·(1 + LHS)` for the gain bound, `PSD_SLACK`
/// otherwise).
pub fn is_falsified(report: &CertificateReport) -> bool {
    let slack = if report.name == "corollary" {
        1e-6 * (1.0 + report.details.get("lhs").copied().unwrap_or(0.0))
    } else {
        PSD_SLACK
    };
    report.falsifies(slack)
}

/// Exit code of a certificate bundle: [`exit::FALSIFIED`] if any report is
/// falsified, else [`exit::OK`].
pub fn certify_exit_code(reports: &[CertificateReport]) -> i32 {
    if reports.iter().any(is_falsified) {
        exit::FALSIFIED
    } else {
        exit::OK
    }
}

/// Dispatches `command`. `Err` means a configuration or I/O problem (exit 1).
pub fn run(command: Command, config: &RunConfig, out_dir: &Path) -> Result<i32> {
    if let Some(c) = config.command {
        if c != command {
            return Err(Error::Config(format!(
                "config is for `{}` but `{}` was requested",
                c.name(),
                command.name()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(format!("{}: {e}", out_dir.display())))?;
    match command {
        Command::Solve => run_solve(config, out_dir),
        Command::Simulate => run_simulate(config, out_dir),
        Command::Certify => run_certify(config, out_dir),
        Command::Sweep => run_sweep(config, out_dir),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Pool honoring [`THREADS_ENV`]; unset or 0 means rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// `{P, Q, K, residual, membership}` for the inline plant; exit 2 when the
/// plant is not stabilizable.
pub fn run_solve(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let plant = config.plant()?;
    let mut summary = SolveSummary {
        plant: plant.clone(),
        beta: config.beta,
        p: None,
        q: None,
        k: None,
        residual: None,
        membership: None,
        error: None,
    };
    let code = match solve_dare(plant, config.tol, config.max_iter) {
        Ok(p) => {
            let q = q_from_p(plant, &p)?;
            summary.k = Some(gain_from_q(&q)?);
            summary.residual = Some(dare_residual(plant, &p)?);
            summary.membership = Some(check_membership(plant, config.beta, DEFAULT_MEMBERSHIP_TOL));
            summary.p = Some(p);
            summary.q = Some(q);
            exit::OK
        }
        Err(e @ Error::NotStabilizable { .. }) => {
            summary.error = Some(e.to_string());
            exit::NOT_STABILIZABLE
        }
        Err(e) => return Err(e),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(code)
}

fn simulate_summary(log: &TrajectoryLog, plant: &PlantModel) -> SimulateSummary {
    let optimal_gain = solve_dare(plant, DEFAULT_TOL, DEFAULT_MAX_ITER)
        .and_then(|p| q_from_p(plant, &p))
        .and_then(|q| gain_from_q(&q))
        .ok();
    let final_gain = log.steps.last().map(|s| s.gain.clone());
    let gain_error = match (&optimal_gain, &final_gain) {
        (Some(kbar), Some(k)) => Some(spectral_norm(&(k.matrix() - kbar.matrix()))),
        _ => None,
    };
    SimulateSummary {
        steps: log.len(),
        overflow: log.overflow,
        final_state_norm: Vector::from_column_slice(&log.x_final).norm(),
        max_rho: log.max_rho(0),
        realized_cost: log.realized_cost(),
        fallback_steps: log.steps.iter().filter(|s| s.fallback).count(),
        optimal_gain,
        final_gain,
        gain_error,
    }
}

/// Runs the closed loop of the inline plant; writes `trajectory.csv`,
/// `trajectory.json` and `summary.json`. Exit 3 on state overflow.
pub fn run_simulate(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let plant = config.plant()?;
    let rho = config.rho_value().unwrap_or(0.0);
    let scenario = config.scenario(
        plant,
        (config.beta, rho, config.gamma),
        config.controller.amplitude,
        config.disturbance.clone(),
    )?;
    let log = simulate(&scenario)?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv)?;
    write_file(&out_dir.join("trajectory.csv"), &csv)?;
    write_json(&out_dir.join("trajectory.json"), &log)?;
    write_json(&out_dir.join("summary.json"), &simulate_summary(&log, plant))?;
    Ok(if log.overflow { exit::OVERFLOW } else { exit::OK })
}

/// Gain-bound report on `log`, with `t0` from the config or the first step
/// from which the hypotheses hold (0 when they never do).
fn corollary_report(
    config_t0: Option<usize>,
    log: &TrajectoryLog,
    plant: &PlantModel,
    (beta, rho, gamma): (f64, f64, f64),
) -> Result<(usize, CertificateReport)> {
    let t0 = config_t0.or_else(|| first_certified_step(log, rho)).unwrap_or(0);
    Ok((t0, corollary_bound_check(log, plant, t0, gamma, beta, rho)?))
}

/// Certificate bundle: for an inline plant the robustness inequality and
/// storage decay of `gain` (default the optimal gain), plus optionally the
/// gain bound on a simulated run; otherwise seeded random batches.
/// Writes `reports.json`; exit 4 if any report falsifies its conclusion.
pub fn run_certify(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let rho = config.rho_value()?;
    let alpha = alpha_of(config.beta, rho, config.gamma)?;
    let params = (config.beta, rho, config.gamma);

    let reports = if let Some(plant) = &config.plant {
        let p = solve_dare(plant, config.tol, config.max_iter)?;
        let k = match &config.gain {
            Some(k) => k.clone(),
            None => gain_from_q(&q_from_p(plant, &p)?)?,
        };
        let mut reports = vec![
            theorem1_margin(plant, &p, &k, config.beta, rho, None)?,
            lyapunov_decay_check(plant, &p, &k)?,
        ];
        if config.corollary {
            if !(alpha > 0.0) {
                return Err(Error::DomainError(format!("alpha = {alpha} is not positive")));
            }
            let scenario = config.scenario(plant, params, config.controller.amplitude, config.disturbance.clone())?;
            let log = simulate(&scenario)?;
            reports.push(corollary_report(config.t0, &log, plant, params)?.1);
        }
        reports
    } else {
        let (n, m) = config.dims()?;
        let seed = config.seed;
        let pool = thread_pool()?;
        pool.install(|| -> Result<Vec<CertificateReport>> {
            let mut reports: Vec<CertificateReport> = (0..config.theorem1_instances as u64)
                .into_par_iter()
                .map(|i| random_theorem1_report(&mut stream_rng(seed, i), n, m, config.beta, rho))
                .collect::<Result<_>>()?;
            let lemma: Vec<CertificateReport> = (0..config.lemma1_instances as u64)
                .into_par_iter()
                .map(|i| random_lemma1_report(&mut stream_rng(seed, LEMMA1_STREAMS + i), n, m, config.beta))
                .collect::<Result<_>>()?;
            let corollary: Vec<CertificateReport> = (0..config.corollary_scenarios as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(seed, COROLLARY_STREAMS + i);
                    let sc = random_corollary_scenario(&mut rng, n, m, config.horizon, seed.wrapping_add(i))?;
                    let log = simulate(&sc)?;
                    Ok(corollary_report(None, &log, &sc.plant, (sc.beta, sc.rho, sc.gamma))?.1)
                })
                .collect::<Result<_>>()?;
            reports.extend(lemma);
            reports.extend(corollary);
            Ok(reports)
        })?
    };

    write_json(&out_dir.join("reports.json"), &reports)?;
    let falsified = reports.iter().filter(|r| is_falsified(r)).count();
    let certified = reports.iter().filter(|r| r.hypotheses_hold).count();
    let worst = reports
        .iter()
        .filter(|r| r.hypotheses_hold)
        .map(|r| r.conclusion_margin())
        .fold(f64::INFINITY, f64::min);
    println!(
        "certify: {} reports, {certified} with hypotheses holding, worst certified margin {worst:.3e}, {falsified} falsified",
        reports.len()
    );
    Ok(certify_exit_code(&reports))
}

fn sweep_row(
    config: &RunConfig,
    plant: &std::result::Result<PlantModel, String>,
    index: usize,
    (beta, rho_axis, gamma, amplitude, magnitude): (f64, f64, f64, f64, f64),
) -> SweepRow {
    let rho_star = admissible_rho(beta).ok();
    let mut row = SweepRow {
        index,
        beta,
        rho: rho_axis,
        gamma,
        excitation_amplitude: amplitude,
        disturbance_magnitude: magnitude,
        alpha: None,
        rho_star,
        t0: None,
        max_rho: None,
        hypotheses_hold: None,
        corollary_margin: None,
        realized_cost: None,
        overflow: None,
        error: None,
    };
    let mut fill = || -> Result<()> {
        let plant = plant.as_ref().map_err(|e| Error::InvalidArgument(e.clone()))?;
        if config.sweep.rho_relative {
            row.rho = rho_axis * admissible_rho(beta)?;
        }
        let alpha = alpha_of(beta, row.rho, gamma);
        row.alpha = alpha.as_ref().ok().copied();
        let disturbance = if magnitude == 0.0 {
            config.disturbance.clone()
        } else {
            let n = plant.n();
            DisturbanceModel::LinearUnmodeled {
                delta_a: Mat::identity(n, n) * magnitude,
                delta_b: Mat::zeros(n, plant.m()),
            }
        };
        let params = (beta, row.rho, gamma);
        let log = simulate(&config.scenario(plant, params, amplitude, disturbance)?)?;
        row.max_rho = log.max_rho(0);
        row.realized_cost = Some(log.realized_cost());
        row.overflow = Some(log.overflow);
        alpha?;
        let (t0, report) = corollary_report(config.t0, &log, plant, params)?;
        row.t0 = Some(t0);
        row.hypotheses_hold = Some(report.hypotheses_hold);
        row.corollary_margin = Some(report.conclusion_margin());
        Ok(())
    };
    if let Err(e) = fill() {
        row.error = Some(e.to_string());
    }
    row
}

/// All rows of the sweep grid in grid order (β outermost, disturbance
/// magnitude innermost). Rows are independent and run on the pool.
pub fn sweep_rows(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let g = &config.sweep;
    let axes = [
        ("betas", g.betas.len()),
        ("rhos", g.rhos.len()),
        ("gammas", g.gammas.len()),
        ("amplitudes", g.amplitudes.len()),
        ("disturbance_magnitudes", g.disturbance_magnitudes.len()),
    ];
    if let Some((name, _)) = axes.iter().find(|(_, len)| *len == 0) {
        return Err(Error::Config(format!("sweep grid `{name}` is empty")));
    }
    let (n, m) = config.dims()?;
    let plants: Vec<std::result::Result<PlantModel, String>> = g
        .betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| match &config.plant {
            Some(p) => Ok(p.clone()),
            None => {
                let mut rng = stream_rng(config.seed, SWEEP_PLANT_STREAMS + i as u64);
                random_member_plant(&mut rng, n, m, beta, 1.5).map(|(p, _)| p).map_err(|e| e.to_string())
            }
        })
        .collect();

    let mut points = Vec::new();
    for (bi, &beta) in g.betas.iter().enumerate() {
        for &rho in &g.rhos {
            for &gamma in &g.gammas {
                for &amp in &g.amplitudes {
                    for &mag in &g.disturbance_magnitudes {
                        points.push((bi, (beta, rho, gamma, amp, mag)));
                    }
                }
            }
        }
    }
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(index, &(bi, point))| sweep_row(config, &plants[bi], index, point))
            .collect()
    }))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(SWEEP_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row.cells()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

/// Writes `sweep.csv`; per-row failures land in the `error` column.
pub fn run_sweep(config: &RunConfig, out_dir: &Path) -> Result<i32> {
    let rows = sweep_rows(config)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv)?;
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("sweep: {} rows, {failed} with errors", rows.len());
    Ok(exit::OK)
}
