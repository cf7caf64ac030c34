//! Standard LQ Riccati equation in value form (`P`) and joint state-input
//! form (`Q = I + [A B]ᵀ P [A B]`), gain extraction, and `M_β` membership.
//!
//! The stage cost is fixed to `|x|² + |u|²`, so every value matrix satisfies
//! `P ⪰ I` and every joint cost matrix satisfies `Q ⪰ I`.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    all_finite, check_shape, hstack, max_eig, min_eig, psd_margin, serde_rows, spectral_norm,
    sym_eigenvalues, symmetrize, vstack, Mat,
};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-8;

/// Iterates whose norm exceeds this are taken as divergence.
pub const NORM_CAP: f64 = 1e12;

/// `Q^uu` is rejected when its reciprocal condition drops below this.
const QUU_RCOND_MIN: f64 = 1e-12;

/// The pair `(A, B)` of `x⁺ = A x + B u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlantRepr", into = "PlantRepr")]
pub struct PlantModel {
    a: Mat,
    b: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantRepr {
    #[serde(with = "serde_rows")]
    a: Mat,
    #[serde(with = "serde_rows")]
    b: Mat,
}

impl TryFrom<PlantRepr> for PlantModel {
    type Error = Error;
    fn try_from(r: PlantRepr) -> Result<Self> {
        PlantModel::new(r.a, r.b)
    }
}

impl From<PlantModel> for PlantRepr {
    fn from(p: PlantModel) -> Self {
        PlantRepr { a: p.a, b: p.b }
    }
}

impl PlantModel {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || b.ncols() == 0 {
            return Err(Error::ShapeMismatch("plant needs n >= 1 and m >= 1".into()));
        }
        check_shape(&a, n, n, "A")?;
        check_shape(&b, n, b.ncols(), "B")?;
        if !all_finite(&a) || !all_finite(&b) {
            return Err(Error::NonFiniteInput("plant matrices".into()));
        }
        Ok(PlantModel { a, b })
    }

    /// Scalar plant `x⁺ = a x + b u`.
    pub fn scalar(a: f64, b: f64) -> Result<Self> {
        PlantModel::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, b))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    /// `[A B]`, n × (n+m).
    pub fn ab(&self) -> Mat {
        hstack(&self.a, &self.b)
    }

    /// Splits an n × (n+m) matrix back into a plant.
    pub fn from_ab(ab: &Mat, n: usize) -> Result<Self> {
        if ab.nrows() != n || ab.ncols() <= n {
            return Err(Error::ShapeMismatch(format!(
                "[A B] is {}x{}, expected {n}x(n+m)",
                ab.nrows(),
                ab.ncols()
            )));
        }
        let m = ab.ncols() - n;
        PlantModel::new(ab.columns(0, n).into_owned(), ab.columns(n, m).into_owned())
    }

    pub fn closed_loop(&self, k: &Gain) -> Mat {
        &self.a + &self.b * k.matrix()
    }
}

/// Optimal cost matrix `P` with `|x₀|²_P` the optimal value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueMatrix(#[serde(with = "serde_rows")] Mat);

impl ValueMatrix {
    /// Checks symmetry (1e-12 relative) and `P ⪰ I` (1e-9 slack).
    pub fn new(p: Mat) -> Result<Self> {
        if !p.is_square() || p.nrows() == 0 {
            return Err(Error::ShapeMismatch("P must be square and non-empty".into()));
        }
        if !all_finite(&p) {
            return Err(Error::NonFiniteInput("P".into()));
        }
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * p.amax().max(1.0) {
            return Err(Error::InvalidArgument(format!("P not symmetric ({asym:.3e})")));
        }
        let lo = min_eig(&p);
        if lo < 1.0 - 1e-9 {
            return Err(Error::InvalidArgument(format!("P must satisfy P >= I (min eig {lo})")));
        }
        Ok(ValueMatrix(symmetrize(&p)))
    }

    pub(crate) fn from_symmetric(p: Mat) -> Self {
        ValueMatrix(symmetrize(&p))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }
}

/// Joint cost matrix `Q` on `(x, u)` with blocks `Qxx, Qxu, Qux, Quu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QRepr", into = "QRepr")]
pub struct QMatrix {
    q: Mat,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QRepr {
    n: usize,
    #[serde(with = "serde_rows")]
    q: Mat,
}

impl TryFrom<QRepr> for QMatrix {
    type Error = Error;
    fn try_from(r: QRepr) -> Result<Self> {
        QMatrix::new(r.q, r.n)
    }
}

impl From<QMatrix> for QRepr {
    fn from(q: QMatrix) -> Self {
        QRepr { n: q.n, q: q.q }
    }
}

impl QMatrix {
    /// Checks symmetry and `Q ⪰ I` up to 1e-9; stores the symmetric part so
    /// that `Qux = Qxuᵀ` holds exactly.
    pub fn new(q: Mat, n: usize) -> Result<Self> {
        if !q.is_square() || q.nrows() <= n || n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "Q is {}x{}, expected (n+m)x(n+m) with n = {n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if !all_finite(&q) {
            return Err(Error::NonFiniteInput("Q".into()));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * q.amax().max(1.0) {
            return Err(Error::InvalidArgument(format!("Q not symmetric ({asym:.3e})")));
        }
        let lo = min_eig(&q);
        if lo < 1.0 - 1e-9 {
            return Err(Error::InvalidArgument(format!("Q must satisfy Q >= I (min eig {lo})")));
        }
        Ok(QMatrix::from_symmetric(q, n))
    }

    pub(crate) fn from_symmetric(q: Mat, n: usize) -> Self {
        let mut q = symmetrize(&q);
        // exact block consistency
        for i in 0..q.nrows() {
            for j in 0..i {
                q[(i, j)] = q[(j, i)];
            }
        }
        QMatrix { q, n }
    }

    pub fn matrix(&self) -> &Mat {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.q.nrows() - self.n
    }

    pub fn xx(&self) -> Mat {
        self.q.view((0, 0), (self.n, self.n)).into_owned()
    }

    pub fn xu(&self) -> Mat {
        self.q.view((0, self.n), (self.n, self.m())).into_owned()
    }

    pub fn ux(&self) -> Mat {
        self.q.view((self.n, 0), (self.m(), self.n)).into_owned()
    }

    pub fn uu(&self) -> Mat {
        self.q.view((self.n, self.n), (self.m(), self.m())).into_owned()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        QMatrix::new(&self.q * c, self.n)
    }
}

/// State feedback `u = K x`, K is m × n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gain(#[serde(with = "serde_rows")] Mat);

impl Gain {
    pub fn new(k: Mat) -> Result<Self> {
        if !all_finite(&k) {
            return Err(Error::NonFiniteInput("gain".into()));
        }
        Ok(Gain(k))
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Gain(Mat::zeros(m, n))
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    /// `[I; K]`, (n+m) × n.
    pub fn lift(&self) -> Mat {
        vstack(&Mat::identity(self.0.ncols(), self.0.ncols()), &self.0)
    }
}

/// Outcome of an `M_β` membership test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipCertificate {
    pub beta: f64,
    pub member: bool,
    pub q: Option<QMatrix>,
    pub max_eig_q: Option<f64>,
    pub min_eig_q: Option<f64>,
    pub residual: Option<f64>,
    pub reason: Option<String>,
}

/// `Q = I + [A B]ᵀ P [A B]`.
pub fn q_from_p(plant: &PlantModel, p: &ValueMatrix) -> Result<QMatrix> {
    let n = plant.n();
    check_shape(p.matrix(), n, n, "P")?;
    let ab = plant.ab();
    let q = Mat::identity(n + plant.m(), n + plant.m()) + ab.transpose() * p.matrix() * &ab;
    Ok(QMatrix::from_symmetric(q, n))
}

fn factor_quu(q: &QMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let quu = q.uu();
    let ev = sym_eigenvalues(&quu);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if !(lo > 0.0) || lo < QUU_RCOND_MIN * hi {
        return Err(Error::SingularQuu);
    }
    Cholesky::new(symmetrize(&quu)).ok_or(Error::SingularQuu)
}

/// Minimizer of `[I; K]ᵀ Q [I; K]`: `K = −(Quu)⁻¹ Qux`.
pub fn gain_from_q(q: &QMatrix) -> Result<Gain> {
    let chol = factor_quu(q)?;
    Ok(Gain(-chol.solve(&q.ux())))
}

/// `min_K [I; K]ᵀ Q [I; K] = Qxx − Qxu (Quu)⁻¹ Qux`.
pub fn min_over_gain(q: &QMatrix) -> Result<Mat> {
    let chol = factor_quu(q)?;
    Ok(symmetrize(&(q.xx() - q.xu() * chol.solve(&q.ux()))))
}

/// `[I; K]ᵀ Q [I; K]` for an arbitrary gain.
pub fn evaluate_gain(q: &QMatrix, k: &Gain) -> Mat {
    let lift = k.lift();
    symmetrize(&(lift.transpose() * q.matrix() * lift))
}

/// One Bellman step `P ↦ min_K [I + KᵀK + (A+BK)ᵀ P (A+BK)]`.
pub fn riccati_step(plant: &PlantModel, p: &Mat) -> Result<Mat> {
    let q = q_from_p(plant, &ValueMatrix::from_symmetric(p.clone()))?;
    min_over_gain(&q)
}

/// Spectral norm of `P − step(P)` relative to `‖P‖`.
pub fn dare_residual(plant: &PlantModel, p: &ValueMatrix) -> Result<f64> {
    let next = riccati_step(plant, p.matrix())?;
    Ok(spectral_norm(&(next - p.matrix())) / spectral_norm(p.matrix()).max(f64::MIN_POSITIVE))
}

/// Stopping rule for linearly converging iterations: both the last step and
/// the distance to the fixed point it implies, `step·r/(1−r)` with the rate
/// `r` estimated from consecutive steps, must be within `bound`. Steps at
/// the rounding floor of `norm` always stop.
fn converged(step: f64, prev: f64, norm: f64, bound: f64) -> bool {
    if step > bound {
        return false;
    }
    if step <= 64.0 * f64::EPSILON * norm {
        return true;
    }
    let rate = if prev.is_finite() && prev > 0.0 { step / prev } else { 1.0 };
    rate < 1.0 && step * rate / (1.0 - rate) <= bound
}

/// Value iteration for the stabilizing solution, starting from `P₀ = I`.
pub fn solve_dare(plant: &PlantModel, tol: f64, max_iter: usize) -> Result<ValueMatrix> {
    solve_dare_from(plant, &Mat::identity(plant.n(), plant.n()), tol, max_iter)
}

/// Value iteration from a caller-supplied PSD start.
pub fn solve_dare_from(
    plant: &PlantModel,
    init: &Mat,
    tol: f64,
    max_iter: usize,
) -> Result<ValueMatrix> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument("need tol > 0 and max_iter >= 1".into()));
    }
    let n = plant.n();
    check_shape(init, n, n, "initial P")?;
    // ‖Δ‖_F ≤ tol ‖P‖_F / √n implies ‖Δ‖₂ ≤ tol ‖P‖₂
    let scale = tol / (n as f64).sqrt();
    let mut p = symmetrize(init);
    let mut last_step = f64::INFINITY;
    let mut prev = f64::INFINITY;
    for _ in 0..max_iter {
        let next = riccati_step(plant, &p)?;
        let norm = next.norm();
        if !norm.is_finite() || norm > NORM_CAP {
            return Err(Error::NotStabilizable { iterations: max_iter, last_step });
        }
        let step = (&next - &p).norm();
        last_step = step / norm;
        p = next;
        if converged(step, prev, norm, scale * norm) {
            return Ok(ValueMatrix::from_symmetric(p));
        }
        prev = step;
    }
    Err(Error::NotStabilizable { iterations: max_iter, last_step })
}

/// Optimal gain `K̄` and joint matrix `Q` for a plant.
pub fn optimal_gain(plant: &PlantModel) -> Result<(ValueMatrix, QMatrix, Gain)> {
    let p = solve_dare(plant, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let q = q_from_p(plant, &p)?;
    let k = gain_from_q(&q)?;
    Ok((p, q, k))
}

/// Tests `(A, B) ∈ M_β`, i.e. the Riccati solution has `I ⪯ Q ⪯ β² I`.
pub fn check_membership(plant: &PlantModel, beta: f64, tol: f64) -> MembershipCertificate {
    let mut cert = MembershipCertificate {
        beta,
        member: false,
        q: None,
        max_eig_q: None,
        min_eig_q: None,
        residual: None,
        reason: None,
    };
    if !(beta > 1.0) {
        cert.reason = Some(format!("beta must exceed 1, got {beta}"));
        return cert;
    }
    let p = match solve_dare(plant, DEFAULT_TOL, DEFAULT_MAX_ITER) {
        Ok(p) => p,
        Err(e) => {
            cert.reason = Some(e.to_string());
            return cert;
        }
    };
    let q = match q_from_p(plant, &p) {
        Ok(q) => q,
        Err(e) => {
            cert.reason = Some(e.to_string());
            return cert;
        }
    };
    cert.residual = dare_residual(plant, &p).ok();
    let hi = max_eig(q.matrix());
    let lo = min_eig(q.matrix());
    cert.max_eig_q = Some(hi);
    cert.min_eig_q = Some(lo);
    cert.member = hi <= beta * beta + tol && lo >= 1.0 - tol;
    if !cert.member {
        cert.reason = Some(format!(
            "eigenvalues of Q lie in [{lo:.6}, {hi:.6}], outside [1, {:.6}]",
            beta * beta
        ));
    }
    cert.q = Some(q);
    cert
}

/// Unique `Q` with `I ⪯ Q ⪯ Q̄` solving the Q-form Riccati equation, found
/// by the decreasing value iteration started at `P₀ = [I; K̄]ᵀ Q̄ [I; K̄]`.
///
/// Requires `[A B]ᵀ [I; K̄]ᵀ Q̄ [I; K̄] [A B] ⪯ Q̄ − I`.
pub fn solve_from_upper(
    plant: &PlantModel,
    qbar: &QMatrix,
    kbar: &Gain,
    tol: f64,
    max_iter: usize,
) -> Result<QMatrix> {
    let n = plant.n();
    let m = plant.m();
    check_shape(qbar.matrix(), n + m, n + m, "Qbar")?;
    check_shape(kbar.matrix(), m, n, "Kbar")?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument("need tol > 0 and max_iter >= 1".into()));
    }
    let slack = tol * qbar.matrix().norm().max(1.0);

    let ab = plant.ab();
    let p0 = evaluate_gain(qbar, kbar);
    let lhs = ab.transpose() * &p0 * &ab;
    let hyp = psd_margin(&(qbar.matrix() - Mat::identity(n + m, n + m)), &lhs);
    if hyp < -slack {
        return Err(Error::HypothesisViolated {
            what: "[A B]ᵀ[I;K̄]ᵀQ̄[I;K̄][A B] ⪯ Q̄ − I".into(),
            margin: hyp,
        });
    }

    let scale = tol / (n as f64).sqrt();
    let mut p = p0;
    let mut prev = f64::INFINITY;
    for k in 0..max_iter {
        let next = riccati_step(plant, &p)?;
        let decrease = psd_margin(&p, &next);
        if decrease < -slack {
            return Err(Error::HypothesisViolated {
                what: format!("monotone decrease of the Riccati iteration at step {k}"),
                margin: decrease,
            });
        }
        let step = (&next - &p).norm();
        let norm = next.norm();
        p = next;
        if converged(step, prev, norm, scale * norm) {
            return q_from_p(plant, &ValueMatrix::from_symmetric(p));
        }
        prev = step;
    }
    Err(Error::NotConverged(max_iter))
}
