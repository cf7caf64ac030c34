//! Exponentially forgotten data correlations and the data-driven Riccati
//! equation
//!
//! ```text
//! Σ_t (Q_t − I) Σ_t = Σ̂_tᵀ · min_K [I; K]ᵀ Q_t [I; K] · Σ̂_t
//! ```
//!
//! which is solved through the certainty-equivalent estimate
//! `[Â B̂] = Σ̂ Σ⁻¹` and then re-checked on the equation itself.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    check_finite, check_shape, min_eig, serde_rows, spectral_norm, sym_condition,
    symmetrize, Mat, Vector,
};
use crate::riccati::{
    gain_from_q, min_over_gain, q_from_p, solve_dare_from, Gain, PlantModel, QMatrix, ValueMatrix,
};

pub const DEFAULT_LAMBDA: f64 = 0.99;
pub const DEFAULT_SIGMA0_SCALE: f64 = 1e-3;

/// Condition estimates of Σ above this refuse to produce a model estimate.
pub const MAX_CONDITION: f64 = 1e14;

/// One observed transition `(x_k, u_k, x_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x: Vector,
    pub u: Vector,
    pub x_next: Vector,
}

/// Running `(Σ_t, Σ̂_t)` with forgetting factor and regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    n: usize,
    m: usize,
    #[serde(with = "serde_rows")]
    sigma: Mat,
    #[serde(with = "serde_rows")]
    sigma_hat: Mat,
    lambda: f64,
    #[serde(with = "serde_rows")]
    sigma0: Mat,
    t: usize,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("forgetting factor must lie in (0, 1], got {lambda}")))
    }
}

fn check_sigma0(sigma0: &Mat, d: usize) -> Result<()> {
    check_shape(sigma0, d, d, "Sigma0")?;
    check_finite(sigma0, "Sigma0")?;
    if (sigma0 - sigma0.transpose()).amax() > 1e-12 * sigma0.amax() {
        return Err(Error::InvalidArgument("Sigma0 must be symmetric".into()));
    }
    if !(min_eig(sigma0) > 0.0) {
        return Err(Error::InvalidArgument("Sigma0 must be positive definite".into()));
    }
    Ok(())
}

fn stacked(x: &Vector, u: &Vector) -> Vector {
    let mut z = Vector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

impl CorrelationState {
    /// State at `t = 0`: `Σ = Σ₀`, `Σ̂ = 0`.
    pub fn new(n: usize, m: usize, lambda: f64, sigma0: Mat) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::ShapeMismatch("need n >= 1 and m >= 1".into()));
        }
        check_lambda(lambda)?;
        check_sigma0(&sigma0, n + m)?;
        Ok(CorrelationState {
            n,
            m,
            sigma: sigma0.clone(),
            sigma_hat: Mat::zeros(n, n + m),
            lambda,
            sigma0,
            t: 0,
        })
    }

    /// `λ = 0.99`, `Σ₀ = 1e-3·I`.
    pub fn with_defaults(n: usize, m: usize) -> Result<Self> {
        let d = n + m;
        CorrelationState::new(n, m, DEFAULT_LAMBDA, Mat::identity(d, d) * DEFAULT_SIGMA0_SCALE)
    }

    /// Assembles a state from raw correlations. `Σ` must be symmetric PD.
    pub fn from_parts(
        sigma: Mat,
        sigma_hat: Mat,
        lambda: f64,
        sigma0: Mat,
        t: usize,
    ) -> Result<Self> {
        let n = sigma_hat.nrows();
        let d = sigma.nrows();
        if n == 0 || d <= n {
            return Err(Error::ShapeMismatch("need Sigma (n+m)x(n+m), SigmaHat n x (n+m)".into()));
        }
        check_shape(&sigma, d, d, "Sigma")?;
        check_shape(&sigma_hat, n, d, "SigmaHat")?;
        check_finite(&sigma, "Sigma")?;
        check_finite(&sigma_hat, "SigmaHat")?;
        check_lambda(lambda)?;
        check_sigma0(&sigma0, d)?;
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax() {
            return Err(Error::InvalidArgument("Sigma must be symmetric".into()));
        }
        if !(min_eig(&sigma) > 0.0) {
            return Err(Error::InvalidArgument("Sigma must be positive definite".into()));
        }
        Ok(CorrelationState { n, m: d - n, sigma: symmetrize(&sigma), sigma_hat, lambda, sigma0, t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }

    pub fn sigma_hat(&self) -> &Mat {
        &self.sigma_hat
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma0(&self) -> &Mat {
        &self.sigma0
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `Σ' = λΣ + z zᵀ`, `Σ̂' = λΣ̂ + x⁺ zᵀ` with `z = [x; u]`.
    pub fn update(&self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<Self> {
        if x.len() != self.n || u.len() != self.m || x_next.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "observation sizes ({}, {}, {}) do not match n = {}, m = {}",
                x.len(),
                u.len(),
                x_next.len(),
                self.n,
                self.m
            )));
        }
        if !(x.iter().chain(u.iter()).chain(x_next.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFiniteInput("observation".into()));
        }
        let z = stacked(x, u);
        let sigma = symmetrize(&(&self.sigma * self.lambda + &z * z.transpose()));
        let sigma_hat = &self.sigma_hat * self.lambda + x_next * z.transpose();
        Ok(CorrelationState { sigma, sigma_hat, t: self.t + 1, ..self.clone() })
    }
}

/// Free-function form of [`CorrelationState::update`].
pub fn update_correlations(
    state: &CorrelationState,
    x: &Vector,
    u: &Vector,
    x_next: &Vector,
) -> Result<CorrelationState> {
    state.update(x, u, x_next)
}

/// Closed-form weighted sums over a whole history:
/// `Σ_t = Σ λ^{t−1−k} z_k z_kᵀ + λᵗ Σ₀`, `Σ̂_t = Σ λ^{t−1−k} x_{k+1} z_kᵀ`.
pub fn batch_correlations(
    n: usize,
    history: &[Transition],
    lambda: f64,
    sigma0: &Mat,
) -> Result<CorrelationState> {
    let d = sigma0.nrows();
    if n == 0 || n >= d {
        return Err(Error::ShapeMismatch(format!("n = {n} incompatible with Sigma0 of size {d}")));
    }
    let base = CorrelationState::new(n, d - n, lambda, sigma0.clone())?;
    let t = history.len();
    let mut sigma = sigma0 * lambda.powi(t as i32);
    let mut sigma_hat = Mat::zeros(n, d);
    for (k, tr) in history.iter().enumerate() {
        if tr.x.len() != n || tr.x_next.len() != n || tr.u.len() != d - n {
            return Err(Error::ShapeMismatch(format!("transition {k} has inconsistent sizes")));
        }
        let z = stacked(&tr.x, &tr.u);
        if !(z.iter().all(|v| v.is_finite()) && tr.x_next.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteInput(format!("transition {k}")));
        }
        let w = lambda.powi((t - 1 - k) as i32);
        sigma += &z * z.transpose() * w;
        sigma_hat += &tr.x_next * z.transpose() * w;
    }
    Ok(CorrelationState { sigma: symmetrize(&sigma), sigma_hat, t, ..base })
}

/// Certainty-equivalent model `[Â B̂] = Σ̂ Σ⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    #[serde(with = "serde_rows")]
    pub a_hat: Mat,
    #[serde(with = "serde_rows")]
    pub b_hat: Mat,
}

impl ModelEstimate {
    pub fn to_plant(&self) -> Result<PlantModel> {
        PlantModel::new(self.a_hat.clone(), self.b_hat.clone())
    }
}

/// `[Â B̂]` as one n × (n+m) matrix, via a Cholesky solve of `Σ Xᵀ = Σ̂ᵀ`.
pub fn estimate_ab(state: &CorrelationState) -> Result<Mat> {
    let cond = sym_condition(&state.sigma);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let chol = Cholesky::new(state.sigma.clone()).ok_or(Error::IllConditioned(cond))?;
    Ok(chol.solve(&state.sigma_hat.transpose()).transpose())
}

pub fn estimate_model(state: &CorrelationState) -> Result<ModelEstimate> {
    let ab = estimate_ab(state)?;
    let n = state.n;
    Ok(ModelEstimate {
        a_hat: ab.columns(0, n).into_owned(),
        b_hat: ab.columns(n, state.m).into_owned(),
    })
}

/// Solution of the data-driven Riccati equation at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct DataRiccatiSolution {
    pub q: QMatrix,
    pub gain: Gain,
    /// Value matrix of the estimated model.
    pub p: ValueMatrix,
    /// Relative residual of the data equation at `q`.
    pub residual: f64,
}

/// Spectral-norm residual of `Σ(Q−I)Σ = Σ̂ᵀ min_K([I;K]ᵀQ[I;K]) Σ̂`,
/// relative to the larger side.
pub fn data_riccati_residual(state: &CorrelationState, q: &QMatrix) -> Result<f64> {
    let d = state.n + state.m;
    check_shape(q.matrix(), d, d, "Q")?;
    let lhs = &state.sigma * (q.matrix() - Mat::identity(d, d)) * &state.sigma;
    let rhs = state.sigma_hat.transpose() * min_over_gain(q)? * &state.sigma_hat;
    let scale = spectral_norm(&lhs).max(spectral_norm(&rhs));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(spectral_norm(&(lhs - rhs)) / scale)
}

/// Solves the data-driven Riccati equation through the model estimate.
pub fn solve_data_riccati(
    state: &CorrelationState,
    tol: f64,
    max_iter: usize,
) -> Result<DataRiccatiSolution> {
    let init = Mat::identity(state.n, state.n);
    solve_data_riccati_from(state, &init, tol, max_iter)
}

/// As [`solve_data_riccati`], warm-starting the value iteration at `init`.
pub fn solve_data_riccati_from(
    state: &CorrelationState,
    init: &Mat,
    tol: f64,
    max_iter: usize,
) -> Result<DataRiccatiSolution> {
    let estimate = PlantModel::from_ab(&estimate_ab(state)?, state.n)?;
    let p = solve_dare_from(&estimate, init, tol, max_iter)
        .map_err(|e| Error::EstimateNotStabilizable(Box::new(e)))?;
    let q = q_from_p(&estimate, &p)?;
    let gain = gain_from_q(&q)?;
    let residual = data_riccati_residual(state, &q)?;
    Ok(DataRiccatiSolution { q, gain, p, residual })
}

/// `[Σ^{wx} Σ^{wu}]`: disturbance–data correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceCorrelation {
    #[serde(with = "serde_rows")]
    pub swx: Mat,
    #[serde(with = "serde_rows")]
    pub swu: Mat,
}

impl DisturbanceCorrelation {
    pub fn combined(&self) -> Mat {
        crate::linalg::hstack(&self.swx, &self.swu)
    }
}

/// One record `(x_k, u_k, w_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceSample {
    pub x: Vector,
    pub u: Vector,
    pub w: Vector,
}

/// `Σ λ^{t−1−k} w_k [x_kᵀ u_kᵀ] − λᵗ [A B] Σ₀`.
///
/// `Σ₀` may be any square matrix here (including zero).
pub fn disturbance_correlation(
    history: &[DisturbanceSample],
    plant: &PlantModel,
    lambda: f64,
    sigma0: &Mat,
) -> Result<DisturbanceCorrelation> {
    let (n, m) = (plant.n(), plant.m());
    check_lambda(lambda)?;
    check_shape(sigma0, n + m, n + m, "Sigma0")?;
    check_finite(sigma0, "Sigma0")?;
    let t = history.len();
    let mut s = -(plant.ab() * sigma0) * lambda.powi(t as i32);
    for (k, rec) in history.iter().enumerate() {
        if rec.x.len() != n || rec.u.len() != m || rec.w.len() != n {
            return Err(Error::ShapeMismatch(format!("record {k} has inconsistent sizes")));
        }
        let z = stacked(&rec.x, &rec.u);
        if !(z.iter().all(|v| v.is_finite()) && rec.w.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteInput(format!("record {k}")));
        }
        s += &rec.w * z.transpose() * lambda.powi((t - 1 - k) as i32);
    }
    Ok(DisturbanceCorrelation {
        swx: s.columns(0, n).into_owned(),
        swu: s.columns(n, m).into_owned(),
    })
}

/// Spectral-norm distance `‖[A B] − Σ̂ Σ⁻¹‖` between truth and estimate.
pub fn rho_of(state: &CorrelationState, plant: &PlantModel) -> Result<f64> {
    check_shape(&state.sigma_hat, plant.n(), plant.n() + plant.m(), "SigmaHat")?;
    Ok(spectral_norm(&(plant.ab() - estimate_ab(state)?)))
}
