//! Certainty-equivalence controller: keep the forgotten correlations, solve
//! the data-driven Riccati equation every step and apply `u = K_t x + ε_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{solve_data_riccati, CorrelationState};
use crate::error::Result;
use crate::linalg::Vector;
use crate::riccati::{Gain, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationKind {
    #[default]
    None,
    ConstantAmplitude,
    Decaying,
}

/// Bounded probing signal, i.i.d. uniform in `[−a_t, a_t]` per entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSchedule {
    pub kind: ExcitationKind,
    pub amplitude: f64,
    pub decay_rate: f64,
    pub seed: u64,
}

impl Default for ExcitationSchedule {
    fn default() -> Self {
        ExcitationSchedule { kind: ExcitationKind::None, amplitude: 0.0, decay_rate: 1.0, seed: 0 }
    }
}

impl ExcitationSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(amplitude: f64, seed: u64) -> Self {
        ExcitationSchedule { kind: ExcitationKind::ConstantAmplitude, amplitude, decay_rate: 1.0, seed }
    }

    pub fn decaying(amplitude: f64, decay_rate: f64, seed: u64) -> Self {
        ExcitationSchedule { kind: ExcitationKind::Decaying, amplitude, decay_rate, seed }
    }

    /// Entry bound at time `t`.
    pub fn amplitude_at(&self, t: usize) -> f64 {
        match self.kind {
            ExcitationKind::None => 0.0,
            ExcitationKind::ConstantAmplitude => self.amplitude,
            ExcitationKind::Decaying => self.amplitude * self.decay_rate.powi(t.min(i32::MAX as usize) as i32),
        }
    }

    /// `ε_t`. The ChaCha stream is keyed by `(seed, t)`, so any sample can be
    /// regenerated independently of the others.
    pub fn sample(&self, t: usize, m: usize) -> Vector {
        let amp = self.amplitude_at(t);
        if amp == 0.0 {
            return Vector::zeros(m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64);
        Vector::from_fn(m, |_, _| rng.gen_range(-1.0..=1.0) * amp)
    }
}

pub fn excitation_sample(schedule: &ExcitationSchedule, t: usize, m: usize) -> Vector {
    schedule.sample(t, m)
}

/// What one controller step computed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub gain: Gain,
    pub eps: Vector,
    pub eq6_residual: Option<f64>,
    pub fallback: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub corr: CorrelationState,
    /// Gain applied at the most recent step.
    pub last_gain: Gain,
    pub excitation: ExcitationSchedule,
    /// Last gain obtained from a successful solve; used when the estimate
    /// cannot be stabilized.
    pub fallback_gain: Gain,
    pub tol: f64,
    pub max_iter: usize,
}

impl ControllerState {
    pub fn new(corr: CorrelationState, excitation: ExcitationSchedule) -> Self {
        let zero = Gain::zeros(corr.m(), corr.n());
        ControllerState {
            corr,
            last_gain: zero.clone(),
            excitation,
            fallback_gain: zero,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    /// `u_t = K_t x_t + ε_t` with `K_t` from the current correlations.
    pub fn step(&self, x: &Vector) -> (Vector, ControllerState, StepDiagnostics) {
        let eps = self.excitation.sample(self.corr.t(), self.corr.m());
        let mut next = self.clone();
        let diag = match solve_data_riccati(&self.corr, self.tol, self.max_iter) {
            Ok(sol) => {
                next.fallback_gain = sol.gain.clone();
                StepDiagnostics {
                    gain: sol.gain,
                    eps,
                    eq6_residual: Some(sol.residual),
                    fallback: false,
                    failure: None,
                }
            }
            Err(e) => StepDiagnostics {
                gain: self.fallback_gain.clone(),
                eps,
                eq6_residual: None,
                fallback: true,
                failure: Some(e.to_string()),
            },
        };
        let u = diag.gain.matrix() * x + &diag.eps;
        next.last_gain = diag.gain.clone();
        (u, next, diag)
    }

    /// Folds the observed transition into the correlations.
    pub fn observe(&self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<ControllerState> {
        Ok(ControllerState { corr: self.corr.update(x, u, x_next)?, ..self.clone() })
    }
}

pub fn controller_step(
    state: &ControllerState,
    x: &Vector,
) -> (Vector, ControllerState, StepDiagnostics) {
    state.step(x)
}

pub fn controller_observe(
    state: &ControllerState,
    x: &Vector,
    u: &Vector,
    x_next: &Vector,
) -> Result<ControllerState> {
    state.observe(x, u, x_next)
}
