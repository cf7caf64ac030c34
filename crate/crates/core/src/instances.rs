//! Seeded random instances for certificate sweeps and property tests.
//!
//! `A` has i.i.d. uniform [−1, 1] entries rescaled to a drawn spectral
//! radius, `B` has i.i.d. uniform [−1, 1] entries; membership in `M_β` is
//! enforced by rejection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::CorrelationState;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Mat, Vector};
use crate::sim::{ControllerConfig, DisturbanceModel, Scenario};
use crate::adaptive::ExcitationKind;
use crate::certificates::{admissible_rho, alpha_of, lemma1_check, theorem1_from_data, CertificateReport};
use crate::riccati::{
    check_membership, q_from_p, solve_dare, MembershipCertificate, PlantModel, DEFAULT_MAX_ITER,
    DEFAULT_MEMBERSHIP_TOL, DEFAULT_TOL,
};

pub use rand::SeedableRng;

pub type InstanceRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InstanceRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for item `stream` of a batch keyed by `seed`, so
/// batch items can be produced in any order or in parallel.
pub fn stream_rng(seed: u64, stream: u64) -> InstanceRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn uniform_matrix(rng: &mut InstanceRng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

pub fn spectral_radius(a: &Mat) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `A` rescaled to spectral radius `radius`, `B` scaled by `b_scale`.
pub fn random_plant(rng: &mut InstanceRng, n: usize, m: usize, radius: f64, b_scale: f64) -> PlantModel {
    let mut a = uniform_matrix(rng, n, n);
    let r = spectral_radius(&a);
    if r > 1e-12 {
        a *= radius / r;
    }
    let b = uniform_matrix(rng, n, m) * b_scale;
    PlantModel::new(a, b).expect("finite random plant")
}

/// Rejection-samples a plant in `M_β` with spectral radius of `A` at most
/// `max_radius`. The sampling box shrinks slowly after repeated rejections
/// so that tight `β` still terminates.
pub fn random_member_plant(
    rng: &mut InstanceRng,
    n: usize,
    m: usize,
    beta: f64,
    max_radius: f64,
) -> Result<(PlantModel, MembershipCertificate)> {
    let mut shrink = 1.0;
    for attempt in 0..20_000 {
        if attempt > 0 && attempt % 50 == 0 {
            shrink *= 0.9;
        }
        let radius = rng.gen_range(0.0..=max_radius) * shrink;
        let b_scale = rng.gen_range(0.05..=1.0) * shrink.sqrt();
        let plant = random_plant(rng, n, m, radius, b_scale);
        let cert = check_membership(&plant, beta, DEFAULT_MEMBERSHIP_TOL);
        if cert.member {
            return Ok((plant, cert));
        }
    }
    Err(Error::InvalidArgument(format!("no plant in M_beta found for beta = {beta}")))
}

/// Symmetric PD matrix `G Gᵀ + c I` with moderate conditioning.
pub fn random_pd(rng: &mut InstanceRng, d: usize) -> Mat {
    let g = uniform_matrix(rng, d, d);
    let c = rng.gen_range(0.05..=1.0);
    let s = &g * g.transpose() + Mat::identity(d, d) * c;
    (&s + s.transpose()) * 0.5
}

/// Random matrix with spectral norm exactly `norm`.
pub fn random_with_norm(rng: &mut InstanceRng, rows: usize, cols: usize, norm: f64) -> Mat {
    loop {
        let m = uniform_matrix(rng, rows, cols);
        let s = spectral_norm(&m);
        if s > 1e-6 {
            return m * (norm / s);
        }
    }
}

/// Positive root of `2β²ρ(ρ+2) = 1`.
pub fn rho_limit(beta: f64) -> f64 {
    let s = 1.0 / (2.0 * beta * beta);
    s / (1.0 + (1.0 + s).sqrt())
}

/// Data consistent with `[A B] + Δ` where `‖Δ‖ = rho`, so that the
/// estimate error is exactly `rho`.
pub fn perturbed_correlations(
    rng: &mut InstanceRng,
    plant: &PlantModel,
    rho: f64,
) -> Result<(CorrelationState, Mat)> {
    let (n, m) = (plant.n(), plant.m());
    let d = n + m;
    let sigma = random_pd(rng, d);
    let delta = random_with_norm(rng, n, d, rho);
    let sigma_hat = (plant.ab() + &delta) * &sigma;
    let lambda = 0.99;
    let state = CorrelationState::from_parts(sigma, sigma_hat, lambda, Mat::identity(d, d) * 1e-3, 100)?;
    Ok((state, delta))
}

/// A random data-driven instance for the one-step robustness certificate:
/// dimensions `1..=max_n`, `1..=max_m`, plant in `M_β`, `Σ` random PD and
/// `Σ̂ = ([A B] + Δ)Σ` with `‖Δ‖ = rho` (to within 1e-9 relative).
pub fn random_theorem1_report(
    rng: &mut InstanceRng,
    max_n: usize,
    max_m: usize,
    beta: f64,
    rho: f64,
) -> Result<CertificateReport> {
    let n = rng.gen_range(1..=max_n.max(1));
    let m = rng.gen_range(1..=max_m.max(1));
    let (plant, _) = random_member_plant(rng, n, m, beta, 1.5)?;
    let p = solve_dare(&plant, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    // a hair inside the radius so rounding in Σ̂Σ⁻¹ cannot flip the hypothesis
    let (state, _) = perturbed_correlations(rng, &plant, rho * (1.0 - 1e-9))?;
    let mut report = theorem1_from_data(&plant, &p, &state, beta, rho)?;
    report.details.insert("n".into(), n as f64);
    report.details.insert("m".into(), m as f64);
    Ok(report)
}

/// A random instance satisfying every hypothesis of the perturbation lemma:
/// `P` and `Q` from a plant in `M_β`, `Σ̃ = ΔΣ` with `‖Δ‖ ≤ ρ` and
/// `Σ̂ = [A B]Σ + Σ̃`.
pub fn random_lemma1_report(
    rng: &mut InstanceRng,
    max_n: usize,
    max_m: usize,
    beta: f64,
) -> Result<CertificateReport> {
    let n = rng.gen_range(1..=max_n.max(1));
    let m = rng.gen_range(1..=max_m.max(1));
    let (plant, _) = random_member_plant(rng, n, m, beta, 1.5)?;
    let p = solve_dare(&plant, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let q = q_from_p(&plant, &p)?;
    let rho = rng.gen_range(1e-3..=0.5);
    let sigma = random_pd(rng, n + m);
    let norm = rho * rng.gen_range(0.0..=1.0);
    let delta = random_with_norm(rng, n, n + m, norm);
    let sigma_tilde = &delta * &sigma;
    let sigma_hat = plant.ab() * &sigma + &sigma_tilde;
    lemma1_check(&sigma, &sigma_hat, &sigma_tilde, p.matrix(), q.matrix(), beta, rho)
}

/// A random closed-loop experiment for the gain-bound certificate: `β` from
/// {1.2, 2, 5}, a plant in `M_β`, `ρ` a random fraction of `ρ*(β)`, `γ` with
/// `α > 0`, decaying excitation, and either no disturbance or a small one
/// (static or filtered unmodeled dynamics, or a decaying external signal).
pub fn random_corollary_scenario(
    rng: &mut InstanceRng,
    max_n: usize,
    max_m: usize,
    horizon: usize,
    seed: u64,
) -> Result<Scenario> {
    let n = rng.gen_range(1..=max_n.max(1));
    let m = rng.gen_range(1..=max_m.max(1));
    let beta = [1.2, 2.0, 5.0][rng.gen_range(0..3)];
    let (plant, _) = random_member_plant(rng, n, m, beta, 1.5)?;
    let rho = admissible_rho(beta)? * rng.gen_range(0.3..=0.9);
    let mut gamma = beta * rng.gen_range(2.0..=20.0);
    while alpha_of(beta, rho, gamma)? <= 0.0 {
        gamma *= 2.0;
    }

    let size = rho * rng.gen_range(0.0..=0.5);
    let disturbance = match rng.gen_range(0..4) {
        0 => DisturbanceModel::Zero,
        1 => {
            let d = random_with_norm(rng, n, n + m, size);
            DisturbanceModel::LinearUnmodeled { delta_a: d.columns(0, n).into_owned(), delta_b: d.columns(n, m).into_owned() }
        }
        2 => {
            let pole: f64 = rng.gen_range(-0.9..=0.9);
            let d = random_with_norm(rng, n, n + m, size * (1.0 - pole.abs()));
            DisturbanceModel::FilteredUnmodeled {
                delta_a: d.columns(0, n).into_owned(),
                delta_b: d.columns(n, m).into_owned(),
                pole,
            }
        }
        _ => {
            let scale = rng.gen_range(1e-4..=1e-2);
            let decay = rng.gen_range(0.9..=0.98f64);
            let values = (0..horizon)
                .map(|t| (0..n).map(|_| rng.gen_range(-1.0..=1.0) * scale * decay.powi(t as i32)).collect())
                .collect();
            DisturbanceModel::ExternalSequence { values }
        }
    };

    let controller = ControllerConfig {
        sigma0_scale: [1e-9, 1e-6][rng.gen_range(0..2)],
        excitation: ExcitationKind::Decaying,
        amplitude: rng.gen_range(0.5..=2.0),
        decay_rate: rng.gen_range(0.85..=0.97),
        ..ControllerConfig::default()
    };
    let x0 = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
    Ok(Scenario { plant, disturbance, controller, x0, horizon, beta, rho, gamma, seed })
}
