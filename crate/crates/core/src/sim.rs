//! Closed loop `x⁺ = A x + B u + w` around the adaptive controller, with
//! disturbance generators for external signals and unmodeled dynamics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adaptive::{ControllerState, ExcitationKind, ExcitationSchedule};
use crate::data::{rho_of, CorrelationState, DEFAULT_LAMBDA, DEFAULT_SIGMA0_SCALE};
use crate::error::{Error, Result};
use crate::linalg::{check_shape, serde_rows, Mat, Vector};
use crate::riccati::{Gain, PlantModel, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// States with any entry beyond this end the run.
pub const STATE_CAP: f64 = 1e12;

/// Source of `w_t`. Every variant is causal in `(x, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceModel {
    #[default]
    Zero,
    /// Explicit `w_0, w_1, …`; zero past the end.
    ExternalSequence { values: Vec<Vec<f64>> },
    /// `w = δA x + δB u`.
    LinearUnmodeled {
        #[serde(with = "serde_rows")]
        delta_a: Mat,
        #[serde(with = "serde_rows")]
        delta_b: Mat,
    },
    /// `w_t = ξ_t`, `ξ_{t+1} = a_f ξ_t + δA x_t + δB u_t`, `ξ_0 = 0`.
    FilteredUnmodeled {
        #[serde(with = "serde_rows")]
        delta_a: Mat,
        #[serde(with = "serde_rows")]
        delta_b: Mat,
        pole: f64,
    },
}

impl DisturbanceModel {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        match self {
            DisturbanceModel::Zero => Ok(()),
            DisturbanceModel::ExternalSequence { values } => {
                for (k, w) in values.iter().enumerate() {
                    if w.len() != n {
                        return Err(Error::ShapeMismatch(format!("disturbance {k} has length {}", w.len())));
                    }
                    if !w.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFiniteInput(format!("disturbance {k}")));
                    }
                }
                Ok(())
            }
            DisturbanceModel::LinearUnmodeled { delta_a, delta_b } => {
                check_shape(delta_a, n, n, "delta_a")?;
                check_shape(delta_b, n, m, "delta_b")
            }
            DisturbanceModel::FilteredUnmodeled { delta_a, delta_b, pole } => {
                check_shape(delta_a, n, n, "delta_a")?;
                check_shape(delta_b, n, m, "delta_b")?;
                if pole.abs() < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("filter pole must lie in (-1, 1), got {pole}")))
                }
            }
        }
    }

    /// Returns `w_t` and the next internal filter state.
    pub fn eval(&self, t: usize, x: &Vector, u: &Vector, internal: &Vector) -> (Vector, Vector) {
        let n = x.len();
        match self {
            DisturbanceModel::Zero => (Vector::zeros(n), internal.clone()),
            DisturbanceModel::ExternalSequence { values } => {
                let w = values.get(t).map_or_else(|| Vector::zeros(n), |w| Vector::from_column_slice(w));
                (w, internal.clone())
            }
            DisturbanceModel::LinearUnmodeled { delta_a, delta_b } => {
                (delta_a * x + delta_b * u, internal.clone())
            }
            DisturbanceModel::FilteredUnmodeled { delta_a, delta_b, pole } => {
                let next = internal * *pole + delta_a * x + delta_b * u;
                (internal.clone(), next)
            }
        }
    }
}

pub fn disturbance_eval(
    model: &DisturbanceModel,
    t: usize,
    x: &Vector,
    u: &Vector,
    internal: &Vector,
) -> (Vector, Vector) {
    model.eval(t, x, u, internal)
}

/// Controller settings; `Σ₀ = sigma0_scale · I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub lambda: f64,
    pub sigma0_scale: f64,
    pub excitation: ExcitationKind,
    pub amplitude: f64,
    pub decay_rate: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda: DEFAULT_LAMBDA,
            sigma0_scale: DEFAULT_SIGMA0_SCALE,
            excitation: ExcitationKind::Decaying,
            amplitude: 1.0,
            decay_rate: 0.9,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl ControllerConfig {
    pub fn schedule(&self, seed: u64) -> ExcitationSchedule {
        ExcitationSchedule {
            kind: self.excitation,
            amplitude: self.amplitude,
            decay_rate: self.decay_rate,
            seed,
        }
    }
}

/// A complete closed-loop experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub plant: PlantModel,
    pub disturbance: DisturbanceModel,
    pub controller: ControllerConfig,
    pub x0: Vector,
    pub horizon: usize,
    pub beta: f64,
    pub rho: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn new(plant: PlantModel, x0: Vector, horizon: usize) -> Self {
        Scenario {
            plant,
            disturbance: DisturbanceModel::Zero,
            controller: ControllerConfig::default(),
            x0,
            horizon,
            beta: 2.0,
            rho: 0.01,
            gamma: 10.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.plant.n(), self.plant.m());
        if self.x0.len() != n {
            return Err(Error::ShapeMismatch(format!("x0 has length {}, expected {n}", self.x0.len())));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("x0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let c = &self.controller;
        if !(c.amplitude >= 0.0) || !(c.decay_rate > 0.0 && c.decay_rate <= 1.0) {
            return Err(Error::InvalidArgument("excitation needs amplitude >= 0, decay in (0, 1]".into()));
        }
        if !(c.sigma0_scale > 0.0) {
            return Err(Error::InvalidArgument("sigma0_scale must be positive".into()));
        }
        self.disturbance.validate(n, m)
    }

    pub fn controller_state(&self) -> Result<ControllerState> {
        let (n, m) = (self.plant.n(), self.plant.m());
        let d = n + m;
        let corr = CorrelationState::new(n, m, self.controller.lambda, Mat::identity(d, d) * self.controller.sigma0_scale)?;
        let mut ctl = ControllerState::new(corr, self.controller.schedule(self.seed));
        ctl.tol = self.controller.tol;
        ctl.max_iter = self.controller.max_iter;
        Ok(ctl)
    }
}

/// One logged time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    pub w: Vec<f64>,
    pub gain: Gain,
    /// `‖[A B] − Σ̂Σ⁻¹‖` against the true plant; diagnostic only.
    pub rho: Option<f64>,
    pub eq6_residual: Option<f64>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub n: usize,
    pub m: usize,
    pub steps: Vec<StepRecord>,
    pub x_final: Vec<f64>,
    /// Set when the state crossed [`STATE_CAP`]; `steps` is then truncated.
    pub overflow: bool,
}

fn col(v: &[f64]) -> Vector {
    Vector::from_column_slice(v)
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at time `t`, including the terminal state at `t = len()`.
    pub fn state(&self, t: usize) -> Vector {
        if t == self.steps.len() {
            col(&self.x_final)
        } else {
            col(&self.steps[t].x)
        }
    }

    /// Largest `|A x_t + B u_t + w_t − x_{t+1}|` over the log.
    pub fn replay_error(&self, plant: &PlantModel) -> f64 {
        (0..self.steps.len())
            .map(|t| {
                let s = &self.steps[t];
                let next = plant.a() * col(&s.x) + plant.b() * col(&s.u) + col(&s.w);
                (next - self.state(t + 1)).amax()
            })
            .fold(0.0, f64::max)
    }

    /// `Σ (|x_t|² + |u_t|²)` over the logged steps.
    pub fn realized_cost(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.x.iter().chain(&s.u).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn max_rho(&self, from: usize) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for s in self.steps.iter().skip(from) {
            let r = s.rho.unwrap_or(f64::INFINITY);
            worst = Some(worst.map_or(r, |w| w.max(r)));
        }
        worst
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((0..self.n).map(|i| format!("x{i}")));
        h.extend((0..self.m).map(|i| format!("u{i}")));
        h.extend((0..self.m).map(|i| format!("eps{i}")));
        h.extend((0..self.n).map(|i| format!("w{i}")));
        for r in 0..self.m {
            h.extend((0..self.n).map(|c| format!("K{r}_{c}")));
        }
        h.extend(["rho", "eq6_residual", "fallback"].map(String::from));
        h
    }

    /// One row per step plus a final row carrying `x_T` (other cells empty).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
        w.write_record(self.csv_header()).map_err(io)?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.x.iter().chain(&s.u).chain(&s.eps).chain(&s.w).map(|v| fmt_f64(*v)));
            let k = s.gain.matrix();
            for r in 0..self.m {
                row.extend((0..self.n).map(|c| fmt_f64(k[(r, c)])));
            }
            row.push(s.rho.map(fmt_f64).unwrap_or_default());
            row.push(s.eq6_residual.map(fmt_f64).unwrap_or_default());
            row.push(s.fallback.to_string());
            w.write_record(&row).map_err(io)?;
        }
        let width = self.csv_header().len();
        let mut last = vec![self.steps.len().to_string()];
        last.extend(self.x_final.iter().map(|v| fmt_f64(*v)));
        last.resize(width, String::new());
        w.write_record(&last).map_err(io)?;
        w.flush().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs the closed loop for `horizon` steps:
/// controller step, disturbance, plant update, correlation update.
pub fn simulate(scenario: &Scenario) -> Result<TrajectoryLog> {
    scenario.validate()?;
    let plant = &scenario.plant;
    let (n, m) = (plant.n(), plant.m());
    let mut ctl = scenario.controller_state()?;
    let mut x = scenario.x0.clone();
    let mut filter = Vector::zeros(n);
    let mut steps = Vec::with_capacity(scenario.horizon);
    let mut overflow = false;

    for t in 0..scenario.horizon {
        let (u, stepped, diag) = ctl.step(&x);
        let rho = rho_of(&ctl.corr, plant).ok();
        let (w, next_filter) = scenario.disturbance.eval(t, &x, &u, &filter);
        filter = next_filter;
        let x_next = plant.a() * &x + plant.b() * &u + &w;
        steps.push(StepRecord {
            t,
            x: x.as_slice().to_vec(),
            u: u.as_slice().to_vec(),
            eps: diag.eps.as_slice().to_vec(),
            w: w.as_slice().to_vec(),
            gain: diag.gain,
            rho,
            eq6_residual: diag.eq6_residual,
            fallback: diag.fallback,
        });
        let escaped = !x_next.iter().all(|v| v.is_finite() && v.abs() <= STATE_CAP);
        if escaped {
            overflow = true;
            x = x_next;
            break;
        }
        ctl = stepped.observe(&x, &u, &x_next)?;
        x = x_next;
    }
    Ok(TrajectoryLog { n, m, steps, x_final: x.as_slice().to_vec(), overflow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::optimal_gain;

    fn v(vals: &[f64]) -> Vector {
        Vector::from_column_slice(vals)
    }

    #[test]
    fn disturbance_examples() {
        let z = Vector::zeros(1);
        let (w, _) = DisturbanceModel::Zero.eval(3, &v(&[5.0]), &v(&[1.0]), &z);
        assert_eq!(w, v(&[0.0]));

        let lin = DisturbanceModel::LinearUnmodeled { delta_a: Mat::from_element(1, 1, 0.1), delta_b: Mat::zeros(1, 1) };
        let (w, _) = lin.eval(0, &v(&[2.0]), &v(&[-7.0]), &z);
        assert!((w[0] - 0.2).abs() < 1e-15);

        let filt = DisturbanceModel::FilteredUnmodeled {
            delta_a: Mat::from_element(1, 1, 1.0),
            delta_b: Mat::zeros(1, 1),
            pole: 0.5,
        };
        let (w0, s1) = filt.eval(0, &v(&[1.0]), &v(&[0.0]), &z);
        let (w1, s2) = filt.eval(1, &v(&[1.0]), &v(&[0.0]), &s1);
        let (w2, _) = filt.eval(2, &v(&[0.0]), &v(&[0.0]), &s2);
        assert_eq!((w0[0], w1[0], w2[0]), (0.0, 1.0, 1.5));

        let ext = DisturbanceModel::ExternalSequence { values: vec![vec![0.3], vec![-0.1]] };
        assert_eq!(ext.eval(1, &v(&[0.0]), &v(&[0.0]), &z).0, v(&[-0.1]));
        assert_eq!(ext.eval(5, &v(&[0.0]), &v(&[0.0]), &z).0, v(&[0.0]));
    }

    #[test]
    fn disturbance_validation() {
        let bad = DisturbanceModel::FilteredUnmodeled { delta_a: Mat::zeros(1, 1), delta_b: Mat::zeros(1, 1), pole: 1.0 };
        assert!(bad.validate(1, 1).is_err());
        let bad = DisturbanceModel::ExternalSequence { values: vec![vec![f64::NAN]] };
        assert!(bad.validate(1, 1).is_err());
        let bad = DisturbanceModel::LinearUnmodeled { delta_a: Mat::zeros(2, 2), delta_b: Mat::zeros(1, 1) };
        assert!(bad.validate(1, 1).is_err());
    }

    #[test]
    fn deadbeat_plant_settles_after_one_step() {
        let mut s = Scenario::new(PlantModel::scalar(0.0, 1.0).unwrap(), v(&[1.0]), 10);
        s.controller.excitation = ExcitationKind::None;
        let log = simulate(&s).unwrap();
        assert_eq!(log.steps[0].u, vec![0.0]);
        assert!(log.steps[1..].iter().all(|r| r.x == vec![0.0]));
        assert_eq!(log.x_final, vec![0.0]);
        assert_eq!(log.len(), 10);
    }

    #[test]
    fn origin_is_an_equilibrium() {
        let plant = PlantModel::new(Mat::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.8]), Mat::from_row_slice(2, 1, &[0.0, 1.0])).unwrap();
        let mut s = Scenario::new(plant, Vector::zeros(2), 50);
        s.controller.excitation = ExcitationKind::None;
        let log = simulate(&s).unwrap();
        assert!(log.steps.iter().all(|r| r.x.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn golden_ratio_plant_learns_optimal_gain() {
        let plant = PlantModel::scalar(1.0, 1.0).unwrap();
        let (_, _, kbar) = optimal_gain(&plant).unwrap();
        let mut s = Scenario::new(plant.clone(), v(&[1.0]), 1000);
        s.controller.sigma0_scale = 1e-9;
        s.seed = 3;
        let log = simulate(&s).unwrap();
        for r in &log.steps[500..] {
            assert!((r.gain.matrix() - kbar.matrix()).amax() <= 1e-6, "t = {}", r.t);
        }
        assert!(log.x_final[0].abs() <= 1e-6);
        assert!(log.replay_error(&plant) <= 1e-12);
    }

    #[test]
    fn overflow_truncates_and_flags() {
        let mut s = Scenario::new(PlantModel::scalar(1.0, 1.0).unwrap(), v(&[1.0]), 500);
        // effective plant (3, 0): input cancelled, unstable
        s.disturbance = DisturbanceModel::LinearUnmodeled { delta_a: Mat::from_element(1, 1, 2.0), delta_b: Mat::from_element(1, 1, -1.0) };
        let log = simulate(&s).unwrap();
        assert!(log.overflow);
        assert!(log.len() < 500);
    }

    #[test]
    fn csv_layout() {
        let mut s = Scenario::new(PlantModel::new(Mat::identity(2, 2) * 0.5, Mat::from_row_slice(2, 1, &[1.0, 0.0])).unwrap(), v(&[1.0, -1.0]), 3);
        s.controller.excitation = ExcitationKind::None;
        let log = simulate(&s).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,x1,u0,eps0,w0,w1,K0_0,K0_1,rho,eq6_residual,fallback");
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[4].starts_with("3,"));
        assert_eq!(lines[1].split(',').count(), 12);
    }
}
