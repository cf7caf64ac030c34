//! Numerical checks of the one-step robustness inequality for the
//! certainty-equivalent gain, the resulting closed-loop gain bound, the
//! perturbation lemma behind them, and the storage-function decay of the
//! optimal loop.
//!
//! Every matrix inequality `X ⪯ Y` is reported as `min eig(Y − X)` after
//! re-symmetrization; a hypothesis counts as satisfied when its margin is at
//! least `−PSD_SLACK`.

use std::collections::BTreeMap;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::data::{rho_of, solve_data_riccati, CorrelationState};
use crate::error::{Error, Result};
use crate::linalg::{check_shape, min_eig, psd_margin, spectral_norm, Mat, Vector};
use crate::riccati::{check_membership, dare_residual, gain_from_q, q_from_p, solve_dare, Gain, PlantModel, ValueMatrix, DEFAULT_MAX_ITER, DEFAULT_MEMBERSHIP_TOL, DEFAULT_TOL};
use crate::sim::TrajectoryLog;

pub const PSD_SLACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub holds: bool,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Negative means the conclusion is violated.
    pub conclusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub name: String,
    pub hypotheses_hold: bool,
    pub hypotheses: BTreeMap<String, HypothesisCheck>,
    pub margins: Margins,
    pub details: BTreeMap<String, f64>,
}

impl CertificateReport {
    fn new(name: &str) -> Self {
        CertificateReport {
            name: name.to_string(),
            hypotheses_hold: true,
            hypotheses: BTreeMap::new(),
            margins: Margins { conclusion: 0.0 },
            details: BTreeMap::new(),
        }
    }

    fn hypothesis(&mut self, key: &str, holds: bool, margin: f64) {
        let margin = if margin.is_finite() { margin } else { f64::MIN };
        self.hypotheses_hold &= holds;
        self.hypotheses.insert(key.to_string(), HypothesisCheck { holds, margin });
    }

    fn psd_hypothesis(&mut self, key: &str, margin: f64) {
        self.hypothesis(key, margin >= -PSD_SLACK, margin);
    }

    fn detail(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.details.insert(key.to_string(), value);
        }
    }

    pub fn conclusion_margin(&self) -> f64 {
        self.margins.conclusion
    }

    /// True when the hypotheses hold but the conclusion fails beyond `slack`.
    pub fn falsifies(&self, slack: f64) -> bool {
        self.hypotheses_hold && self.margins.conclusion < -slack
    }
}

/// `1 − 2β²ρ(ρ+2)`.
pub fn contraction_factor(beta: f64, rho: f64) -> f64 {
    1.0 - 2.0 * beta * beta * rho * (rho + 2.0)
}

fn membership_hypothesis(report: &mut CertificateReport, plant: &PlantModel, beta: f64) {
    let cert = check_membership(plant, beta, DEFAULT_MEMBERSHIP_TOL);
    let margin = match (cert.min_eig_q, cert.max_eig_q) {
        (Some(lo), Some(hi)) => (lo - 1.0).min(beta * beta - hi),
        _ => -1.0,
    };
    report.hypothesis("plant_in_m_beta", cert.member, margin);
}

/// `P` solves the plant's Riccati equation: `‖P − step(P)‖ ≤ PSD_SLACK`
/// (absolute, since the tight margins move one-for-one with it).
fn riccati_hypothesis(report: &mut CertificateReport, plant: &PlantModel, p: &ValueMatrix) {
    match dare_residual(plant, p) {
        Ok(r) => {
            let abs = r * spectral_norm(p.matrix());
            report.hypothesis("riccati_residual", abs <= PSD_SLACK, PSD_SLACK - abs);
        }
        Err(_) => report.hypothesis("riccati_residual", false, -1.0),
    }
}

/// `(1 − 2β²ρ(ρ+2))⁻¹ P ⪰ I + KᵀK + (A+BK)ᵀ P (A+BK)` for the true plant's
/// `P` and a data-driven gain `K`.
///
/// When `data` is supplied, the report also checks that its estimate lies
/// within `rho` of the plant.
pub fn theorem1_margin(
    plant: &PlantModel,
    p: &ValueMatrix,
    kt: &Gain,
    beta: f64,
    rho: f64,
    data: Option<&CorrelationState>,
) -> Result<CertificateReport> {
    let (n, m) = (plant.n(), plant.m());
    check_shape(p.matrix(), n, n, "P")?;
    check_shape(kt.matrix(), m, n, "K")?;
    let mut report = CertificateReport::new("theorem1");
    let c = contraction_factor(beta, rho);
    report.hypothesis("rho_condition", c > 0.0, c);
    membership_hypothesis(&mut report, plant, beta);
    riccati_hypothesis(&mut report, plant, p);
    if let Some(state) = data {
        match rho_of(state, plant) {
            Ok(r) => {
                report.hypothesis("estimate_within_rho", r <= rho, rho - r);
                report.detail("rho_data", r);
            }
            Err(_) => report.hypothesis("estimate_within_rho", false, -1.0),
        }
    }

    // The conclusion concerns the minimizer of the data equation. Without
    // data this is only checkable at rho = 0, where that minimizer is the
    // optimal gain of the plant itself.
    let gain_gap = match data {
        Some(state) => solve_data_riccati(state, DEFAULT_TOL, DEFAULT_MAX_ITER)
            .map(|sol| spectral_norm(&(kt.matrix() - sol.gain.matrix())))
            .ok(),
        None if rho == 0.0 => q_from_p(plant, p)
            .and_then(|q| gain_from_q(&q))
            .map(|kbar| spectral_norm(&(kt.matrix() - kbar.matrix())))
            .ok(),
        None => None,
    };
    match gain_gap {
        Some(gap) => {
            let slack = 1e-6 * (1.0 + spectral_norm(kt.matrix()));
            report.hypothesis("gain_from_data", gap <= slack, slack - gap);
        }
        None => report.hypothesis("gain_from_data", false, -1.0),
    }

    let k = kt.matrix();
    let cl = plant.closed_loop(kt);
    let rhs = Mat::identity(n, n) + k.transpose() * k + cl.transpose() * p.matrix() * &cl;
    report.margins.conclusion = if c > 0.0 {
        psd_margin(&(p.matrix() / c), &rhs)
    } else {
        // left side undefined; report the failed hypothesis value
        c
    };
    report.detail("beta", beta);
    report.detail("rho", rho);
    report.detail("contraction_factor", c);
    Ok(report)
}

/// Full data-driven check: solve the data Riccati equation for `state` and
/// certify its gain against the true plant.
///
/// The theorem also asserts that the data equation is solvable; a failed
/// solve is reported as a violated conclusion (`detail["solve_failed"] = 1`).
pub fn theorem1_from_data(
    plant: &PlantModel,
    p: &ValueMatrix,
    state: &CorrelationState,
    beta: f64,
    rho: f64,
) -> Result<CertificateReport> {
    match solve_data_riccati(state, DEFAULT_TOL, DEFAULT_MAX_ITER) {
        Ok(sol) => {
            let mut report = theorem1_margin(plant, p, &sol.gain, beta, rho, Some(state))?;
            report.detail("eq6_residual", sol.residual);
            Ok(report)
        }
        Err(_) => {
            let mut report = theorem1_margin(plant, p, &Gain::zeros(plant.m(), plant.n()), beta, rho, Some(state))?;
            // existence of the minimizer is itself part of the conclusion
            report.hypotheses.remove("gain_from_data");
            report.hypotheses_hold = report.hypotheses.values().all(|h| h.holds);
            report.margins.conclusion = -f64::MAX;
            report.detail("solve_failed", 1.0);
            Ok(report)
        }
    }
}

/// `α = β² + (1 − β²/γ²)⁻¹ (1 − β² / (1 − 2β²ρ(ρ+2)))`.
pub fn alpha_of(beta: f64, rho: f64, gamma: f64) -> Result<f64> {
    if !(gamma > beta) {
        return Err(Error::DomainError(format!("gamma ({gamma}) must exceed beta ({beta})")));
    }
    let c = contraction_factor(beta, rho);
    if !(c > 0.0) {
        return Err(Error::DomainError(format!("2 beta^2 rho (rho + 2) must be below 1 (beta = {beta}, rho = {rho})")));
    }
    let b2 = beta * beta;
    Ok(b2 + (1.0 - b2 / c) / (1.0 - b2 / (gamma * gamma)))
}

/// Largest `ρ` with `(1 − 2β²ρ(ρ+2))⁻¹ ≤ 1 + β⁻²`, i.e. the positive root of
/// `ρ² + 2ρ = 1 / (2β²(1+β²))`.
pub fn admissible_rho(beta: f64) -> Result<f64> {
    if !(beta > 1.0) || !beta.is_finite() {
        return Err(Error::DomainError(format!("beta must exceed 1, got {beta}")));
    }
    let b2 = beta * beta;
    let s = 1.0 / (2.0 * b2 * (1.0 + b2));
    Ok(s / (1.0 + (1.0 + s).sqrt()))
}

/// Gain-bound check over `t0 ≤ t < T` of a logged run:
/// `Σ (|x_t|² + |K_t x_t|²) ≤ α⁻¹ |x_{t0}|²_P + (γ²/α) Σ |B ε_t + w_t|²`.
///
/// The hypotheses require `ρ_t ≤ ρ` and a data-driven gain (no fallback) on
/// every step of the window, and `(A, B) ∈ M_β`.
pub fn corollary_bound_check(
    log: &TrajectoryLog,
    plant: &PlantModel,
    t0: usize,
    gamma: f64,
    beta: f64,
    rho: f64,
) -> Result<CertificateReport> {
    let alpha = alpha_of(beta, rho, gamma)?;
    if !(alpha > 0.0) {
        return Err(Error::DomainError(format!("alpha = {alpha} is not positive")));
    }
    if t0 >= log.len() {
        return Err(Error::DomainError(format!("t0 = {t0} must be below the logged horizon {}", log.len())));
    }
    if log.n != plant.n() || log.m != plant.m() {
        return Err(Error::ShapeMismatch("log dimensions do not match the plant".into()));
    }
    let p = solve_dare(plant, DEFAULT_TOL, DEFAULT_MAX_ITER)?;

    let mut report = CertificateReport::new("corollary");
    membership_hypothesis(&mut report, plant, beta);
    let window = &log.steps[t0..];
    let max_rho = window.iter().map(|s| s.rho.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    report.hypothesis("rho_bound_on_window", max_rho <= rho, rho - max_rho);
    let fallbacks = window.iter().filter(|s| s.fallback).count();
    report.hypothesis("data_driven_gain_on_window", fallbacks == 0, -(fallbacks as f64));

    let mut lhs = 0.0;
    let mut drive = 0.0;
    for s in window {
        let x = Vector::from_column_slice(&s.x);
        let kx = s.gain.matrix() * &x;
        lhs += x.norm_squared() + kx.norm_squared();
        let e = plant.b() * Vector::from_column_slice(&s.eps) + Vector::from_column_slice(&s.w);
        drive += e.norm_squared();
    }
    let x0 = Vector::from_column_slice(&window[0].x);
    let storage = (x0.transpose() * p.matrix() * &x0)[(0, 0)];
    let rhs = storage / alpha + gamma * gamma / alpha * drive;
    report.margins.conclusion = rhs - lhs;
    report.detail("alpha", alpha);
    report.detail("lhs", lhs);
    report.detail("rhs", rhs);
    report.detail("max_rho", max_rho);
    report.detail("t0", t0 as f64);
    report.detail("horizon", log.len() as f64);
    report.detail("beta", beta);
    report.detail("rho", rho);
    report.detail("gamma", gamma);
    Ok(report)
}

/// Earliest `t0` from which every logged step has `ρ_t ≤ rho` and a
/// data-driven gain, i.e. the longest window on which the gain bound's
/// hypotheses can hold.
pub fn first_certified_step(log: &TrajectoryLog, rho: f64) -> Option<usize> {
    let mut t0 = log.len();
    for (i, s) in log.steps.iter().enumerate().rev() {
        if s.fallback || !s.rho.is_some_and(|r| r <= rho) {
            break;
        }
        t0 = i;
    }
    (t0 < log.len()).then_some(t0)
}

/// Perturbation lemma: from `(Σ̂−Σ̃)ᵀP(Σ̂−Σ̃) = Σ(Q−I)Σ`, `Σ̃ᵀΣ̃ ⪯ ρ²Σ²`,
/// `I ⪯ Q ⪯ β²I` and `P ⪯ β²I`, conclude
/// `Σ̂ᵀPΣ̂ ⪯ ΣQΣ + (β²ρ(ρ+2) − 1) Σ²`.
///
/// Violated hypotheses are recorded; the conclusion is always evaluated.
#[allow(clippy::too_many_arguments)]
pub fn lemma1_check(
    sigma: &Mat,
    sigma_hat: &Mat,
    sigma_tilde: &Mat,
    p: &Mat,
    q: &Mat,
    beta: f64,
    rho: f64,
) -> Result<CertificateReport> {
    let k = sigma.nrows();
    let r = p.nrows();
    check_shape(sigma, k, k, "Sigma")?;
    check_shape(q, k, k, "Q")?;
    check_shape(p, r, r, "P")?;
    check_shape(sigma_hat, r, k, "SigmaHat")?;
    check_shape(sigma_tilde, r, k, "SigmaTilde")?;

    let mut report = CertificateReport::new("lemma1");
    let eye_k = Mat::identity(k, k);
    let eye_r = Mat::identity(r, r);
    let b2 = beta * beta;

    let diff = sigma_hat - sigma_tilde;
    let left = diff.transpose() * p * &diff;
    let right = sigma * (q - &eye_k) * sigma;
    let scale = spectral_norm(&left).max(spectral_norm(&right)).max(1.0);
    let identity_gap = spectral_norm(&(left - right)) / scale;
    report.hypothesis("identity", identity_gap <= PSD_SLACK, PSD_SLACK - identity_gap);

    let sigma_sq = sigma * sigma;
    report.psd_hypothesis("tilde_bound", psd_margin(&(&sigma_sq * (rho * rho)), &(sigma_tilde.transpose() * sigma_tilde)));
    report.psd_hypothesis("q_lower", psd_margin(q, &eye_k));
    report.psd_hypothesis("q_upper", psd_margin(&(&eye_k * b2), q));
    report.psd_hypothesis("p_upper", psd_margin(&(&eye_r * b2), p));
    report.psd_hypothesis("p_psd", min_eig(p));
    report.psd_hypothesis("sigma_psd", min_eig(sigma));

    let bound = sigma * q * sigma + &sigma_sq * (b2 * rho * (rho + 2.0) - 1.0);
    report.margins.conclusion = psd_margin(&bound, &(sigma_hat.transpose() * p * sigma_hat));
    report.detail("beta", beta);
    report.detail("rho", rho);
    report.detail("identity_gap", identity_gap);
    Ok(report)
}

/// `P − (A+BK)ᵀP(A+BK) − I − KᵀK ⪰ 0`; tight for the optimal gain.
///
/// The hypotheses record whether `P` solves the Riccati equation and `K` is
/// its optimal gain; for other gains the margin is informational.
pub fn lyapunov_decay_check(plant: &PlantModel, p: &ValueMatrix, k: &Gain) -> Result<CertificateReport> {
    let (n, m) = (plant.n(), plant.m());
    check_shape(p.matrix(), n, n, "P")?;
    check_shape(k.matrix(), m, n, "K")?;
    let cl = plant.closed_loop(k);
    let decay = p.matrix() - cl.transpose() * p.matrix() * &cl - Mat::identity(n, n) - k.matrix().transpose() * k.matrix();
    let mut report = CertificateReport::new("lyapunov_decay");
    // The decay is only claimed for the Riccati solution and its optimal gain.
    riccati_hypothesis(&mut report, plant, p);
    match q_from_p(plant, p).and_then(|q| gain_from_q(&q)) {
        Ok(kbar) => {
            let gap = spectral_norm(&(k.matrix() - kbar.matrix()));
            let slack = 1e-6 * (1.0 + spectral_norm(kbar.matrix()));
            report.hypothesis("gain_is_optimal", gap <= slack, slack - gap);
        }
        Err(_) => report.hypothesis("gain_is_optimal", false, -1.0),
    }
    report.margins.conclusion = min_eig(&decay);
    report.detail("closed_loop_norm", spectral_norm(&cl));
    Ok(report)
}

/// Maximizer and value of `w ↦ |y + w|²_P − γ²|w|²`:
/// `w* = (γ²I − P)⁻¹ P y`, value `yᵀ P (I − γ⁻²P)⁻¹ y`. Needs `P ≺ γ²I`.
pub fn worst_case_disturbance(p: &Mat, gamma: f64, y: &Vector) -> Result<(Vector, f64)> {
    let n = p.nrows();
    let g2 = gamma * gamma;
    let shifted = Mat::identity(n, n) * g2 - p;
    let chol = Cholesky::new(shifted).ok_or_else(|| Error::DomainError("P must be below gamma^2 I".into()))?;
    let w = chol.solve(&(p * y));
    let value = (y.transpose() * p * chol.solve(&(y * g2)))[(0, 0)];
    Ok((w, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::optimal_gain;

    #[test]
    fn theorem1_tight_at_optimal_gain() {
        let plant = PlantModel::scalar(1.0, 1.0).unwrap();
        let (p, _, k) = optimal_gain(&plant).unwrap();
        let r = theorem1_margin(&plant, &p, &k, 3.0, 0.0, None).unwrap();
        assert!(r.conclusion_margin().abs() <= 1e-9);
        assert!(r.hypotheses_hold);
    }

    #[test]
    fn theorem1_rejects_wrong_gain() {
        let plant = PlantModel::scalar(0.5, 1.0).unwrap();
        let (p, _, k) = optimal_gain(&plant).unwrap();
        let bad = Gain::new(k.matrix().add_scalar(10.0)).unwrap();
        let r = theorem1_margin(&plant, &p, &bad, 2.0, 0.0, None).unwrap();
        assert!(r.conclusion_margin() < 0.0);
        assert!(!r.hypotheses["gain_from_data"].holds && !r.falsifies(PSD_SLACK));
    }

    #[test]
    fn theorem1_reports_rho_condition() {
        let plant = PlantModel::scalar(0.5, 1.0).unwrap();
        let (p, _, k) = optimal_gain(&plant).unwrap();
        let r = theorem1_margin(&plant, &p, &k, 2.0, 1.0, None).unwrap();
        assert!(!r.hypotheses_hold);
        assert!(!r.hypotheses["rho_condition"].holds);
        assert!(r.conclusion_margin().is_finite());
    }

    #[test]
    fn alpha_examples() {
        let a = alpha_of(1.1, 0.0, 10.0).unwrap();
        assert!((a - (1.21 + (1.0 - 1.21) / (1.0 - 0.0121))).abs() < 1e-14);
        assert!((a - 0.997_43).abs() < 1e-5);
        assert!((alpha_of(1.0, 0.0, 3.0).unwrap() - 1.0).abs() < 1e-15);

        // 2β²ρ(ρ+2) = 0.5
        let beta: f64 = 1.1;
        let s = 0.5 / (2.0 * beta * beta);
        let rho = -1.0 + (1.0 + s).sqrt();
        let a = alpha_of(beta, rho, 10.0).unwrap();
        assert!((a - (1.21 + (1.0 - 2.42) / 0.9879)).abs() < 1e-12);
        assert!(a < 0.0);

        assert!(matches!(alpha_of(2.0, 0.0, 1.5), Err(Error::DomainError(_))));
        assert!(matches!(alpha_of(2.0, 1.0, 10.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn admissible_rho_examples() {
        // 8ρ² + 16ρ − 0.2 = 0
        let expect = (-16.0 + (256.0f64 + 6.4).sqrt()) / 16.0;
        assert!((admissible_rho(2.0).unwrap() - expect).abs() < 1e-14);
        let r2 = admissible_rho(2.0).unwrap();
        let r10 = admissible_rho(10.0).unwrap();
        let r100 = admissible_rho(100.0).unwrap();
        assert!(r100 < r10 && r10 < r2 && r100 > 0.0);
        assert!(matches!(admissible_rho(1.0), Err(Error::DomainError(_))));
    }

    #[test]
    fn lemma1_examples() {
        let one = |v: f64| Mat::from_element(1, 1, v);
        let r = lemma1_check(&one(1.0), &one(1.1), &one(0.1), &one(1.0), &one(2.0), 2f64.sqrt(), 0.1).unwrap();
        assert!(r.hypotheses_hold);
        assert!((r.conclusion_margin() - 0.21).abs() < 1e-12);

        let r = lemma1_check(&one(1.0), &one(1.0), &one(0.0), &one(1.0), &one(2.0), 2f64.sqrt(), 0.0).unwrap();
        assert!(r.conclusion_margin().abs() <= 1e-9);

        let r = lemma1_check(&one(1.0), &one(1.5), &one(0.5), &one(1.0), &one(2.0), 2f64.sqrt(), 0.1).unwrap();
        assert!(!r.hypotheses_hold);
        assert!(!r.hypotheses["tilde_bound"].holds);
    }

    #[test]
    fn lyapunov_examples() {
        let plant = PlantModel::scalar(1.0, 1.0).unwrap();
        let (p, _, k) = optimal_gain(&plant).unwrap();
        let r = lyapunov_decay_check(&plant, &p, &k).unwrap();
        assert!(r.hypotheses_hold && r.conclusion_margin().abs() <= 1e-9);

        let plant = PlantModel::scalar(0.5, 0.0).unwrap();
        let p = ValueMatrix::new(Mat::from_element(1, 1, 1.0 / 0.75)).unwrap();
        let r = lyapunov_decay_check(&plant, &p, &Gain::zeros(1, 1)).unwrap();
        assert!(r.conclusion_margin().abs() <= 1e-9);

        let plant = PlantModel::scalar(1.0, 1.0).unwrap();
        let (p, _, _) = optimal_gain(&plant).unwrap();
        let r = lyapunov_decay_check(&plant, &p, &Gain::new(Mat::from_element(1, 1, 0.5)).unwrap()).unwrap();
        assert!(r.conclusion_margin() < 0.0);
        assert!(!r.hypotheses["gain_is_optimal"].holds && !r.falsifies(PSD_SLACK));
    }

    #[test]
    fn worst_case_matches_grid_search() {
        let p = Mat::from_element(1, 1, 1.6);
        let gamma = 3.0;
        let y = Vector::from_element(1, 0.7);
        let (w, value) = worst_case_disturbance(&p, gamma, &y).unwrap();
        let f = |w: f64| 1.6 * (0.7 + w) * (0.7 + w) - 9.0 * w * w;
        let (mut best_w, mut best) = (0.0, f64::MIN);
        for i in -200_000..=200_000 {
            let c = i as f64 * 1e-5;
            if f(c) > best {
                best = f(c);
                best_w = c;
            }
        }
        assert!((w[0] - best_w).abs() < 1e-5);
        assert!((value - best).abs() < 1e-6);
        assert!((value - f(w[0])).abs() < 1e-12);
        assert!(worst_case_disturbance(&p, 1.0, &y).is_err());
    }
}
