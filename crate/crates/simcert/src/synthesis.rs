//! Construction pipeline for abstractions of the slope-restricted system
//! class: dissipation-LMI verification, the bar-variable reformulation and a
//! projection-based feasibility solver, the geometric lemmas producing the
//! abstract matrices, behavior-preserving input matrices, and the duality
//! checks against strict positive realness / L2-gain assignment.

use crate::matgeo::{
    self, hstack, kernel_basis, max_abs, pseudoinverse, rank, solve_factor, vstack, Factor, Mat,
    Tolerance, Vec64,
};
use crate::report::VerificationReport;
use crate::storage::{compute_rtilde, CertError, LmiCertificate, StorageCertificate};
use crate::sysmodel::{rk4, ControlSystem, SignalSpec, SystemError};
use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug)]
pub enum SynthesisError {
    PNotInjective,
    C2NotInvertible,
    Infeasible { step: String, residual: f64 },
    NoCommonLeftInverse { residual: f64 },
    NotRestrictedForm { reason: String },
    Certificate(CertError),
    Simulation(SystemError),
}

impl fmt::Display for SynthesisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthesisError::PNotInjective => write!(f, "P is not injective under rank tolerance"),
            SynthesisError::C2NotInvertible => write!(f, "C2 must be square and invertible"),
            SynthesisError::Infeasible { step, residual } => {
                write!(f, "construction step '{step}' infeasible (residual {residual:.3e})")
            }
            SynthesisError::NoCommonLeftInverse { residual } => {
                write!(f, "no common left inverse P̂ (stacked residual {residual:.3e})")
            }
            SynthesisError::NotRestrictedForm { reason } => write!(f, "not in restricted form: {reason}"),
            SynthesisError::Certificate(e) => write!(f, "{e}"),
            SynthesisError::Simulation(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SynthesisError {}

impl From<CertError> for SynthesisError {
    fn from(e: CertError) -> Self {
        SynthesisError::Certificate(e)
    }
}

impl From<matgeo::MatError> for SynthesisError {
    fn from(e: matgeo::MatError) -> Self {
        SynthesisError::Certificate(CertError::CertificateInvalid { reason: e.to_string() })
    }
}

impl From<SystemError> for SynthesisError {
    fn from(e: SystemError) -> Self {
        SynthesisError::Simulation(e)
    }
}

fn place(g: &mut Mat, r0: usize, c0: usize, m: &Mat) {
    if m.nrows() > 0 && m.ncols() > 0 {
        g.view_mut((r0, c0), m.shape()).copy_from(m);
    }
}

/// `2/b`, read as zero when the slope bound is infinite.
fn two_over_b(sys: &ControlSystem) -> f64 {
    let b = sys.phi.slope_upper;
    if b.is_finite() {
        2.0 / b
    } else {
        0.0
    }
}

/// Assembles the difference (left minus right) of the dissipation LMI.
///
/// Layout: state block (n), internal-factor block (r), nonlinearity slot
/// (1, present only when the system carries a nonlinearity).
pub fn dissipation_lmi_difference(sys: &ControlSystem, cert: &LmiCertificate) -> Mat {
    let n = sys.n();
    let r = cert.r();
    let s = usize::from(sys.has_nonlinearity());
    let acl = &sys.a + &sys.b * &cert.k;
    let g11 = acl.transpose() * &cert.m_hat
        + &cert.m_hat * &acl
        + &cert.m_hat * cert.kappa_hat
        - sys.c2.transpose() * &cert.x22 * &sys.c2;
    let g12 = &cert.m_hat * &cert.z - sys.c2.transpose() * &cert.x21;

    let mut g = Mat::zeros(n + r + s, n + r + s);
    place(&mut g, 0, 0, &g11);
    place(&mut g, 0, n, &g12);
    place(&mut g, n, 0, &g12.transpose());
    place(&mut g, n, n, &(-&cert.x11));
    if s == 1 {
        let g13 = &cert.m_hat * (&sys.b * &cert.l1 + &sys.e) + sys.f.transpose();
        place(&mut g, 0, n + r, &g13);
        place(&mut g, n + r, 0, &g13.transpose());
        g[(n + r, n + r)] = -two_over_b(sys);
    }
    g
}

fn sym_max_eig(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sym_min_eig(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Verifies the coupling factorization `D = ZW` and the dissipation LMI.
///
/// Failures are report entries; margins are the relative equality residual
/// and the largest eigenvalue of the LMI difference.
pub fn check_dissipation_lmi(sys: &ControlSystem, cert: &LmiCertificate, tol: &Tolerance) -> VerificationReport {
    let mut report = VerificationReport::new();
    if sys.has_nonlinearity() {
        report.push("slope_normalized", sys.phi.slope_lower.abs(), tol.residual_tol, None);
    }
    if sys.p() > 0 {
        let residual = max_abs(&(&sys.d - &cert.z * &cert.w)) / (1.0 + max_abs(&sys.d));
        report.push("coupling_factorization", residual, tol.residual_tol, None);
    }
    let g = dissipation_lmi_difference(sys, cert);
    report.push("dissipation_lmi", sym_max_eig(&g), tol.definiteness_tol, None);
    report
}

/// Decision variables of the linearized (bar) form of the dissipation LMI.
#[derive(Debug, Clone)]
pub struct BarVariables {
    pub m_bar: Mat,
    pub k_bar: Mat,
    pub l1: Mat,
    pub z: Mat,
    pub x22_bar: Mat,
    pub x21_bar: Mat,
    pub x12_bar: Mat,
    pub x11: Mat,
}

fn require_c2_invertible(sys: &ControlSystem, tol: &Tolerance) -> Result<Mat, SynthesisError> {
    if sys.q2() != sys.n() || rank(&sys.c2, tol) != sys.n() {
        return Err(SynthesisError::C2NotInvertible);
    }
    Ok(pseudoinverse(&sys.c2, tol))
}

/// Substitutes `M̄ = M̂⁻¹`, `K̄ = KM̂⁻¹`, `X̄²² = M̂⁻¹C₂ᵀX²²C₂M̂⁻¹`,
/// `X̄²¹ = M̂⁻¹C₂ᵀX²¹`, `X̄¹² = X¹²C₂M̂⁻¹`, turning the LMI affine in the
/// bar variables for fixed `κ̂`. Requires square invertible `C₂`.
pub fn to_bar_lmi(sys: &ControlSystem, cert: &LmiCertificate, tol: &Tolerance) -> Result<BarVariables, SynthesisError> {
    require_c2_invertible(sys, tol)?;
    let m_bar = pseudoinverse(&cert.m_hat, tol);
    Ok(BarVariables {
        k_bar: &cert.k * &m_bar,
        x22_bar: &m_bar * sys.c2.transpose() * &cert.x22 * &sys.c2 * &m_bar,
        x21_bar: &m_bar * sys.c2.transpose() * &cert.x21,
        x12_bar: &cert.x12 * &sys.c2 * &m_bar,
        x11: cert.x11.clone(),
        l1: cert.l1.clone(),
        z: cert.z.clone(),
        m_bar,
    })
}

/// Recovers the original certificate variables from a bar-variable point.
///
/// `W` is recovered from the coupling factorization `D = ZW` by a
/// minimum-norm solve; its residual is returned alongside.
pub fn from_bar_lmi(
    sys: &ControlSystem,
    bar: &BarVariables,
    kappa_hat: f64,
    pi: f64,
    tol: &Tolerance,
) -> Result<(LmiCertificate, f64), SynthesisError> {
    let c2_inv = require_c2_invertible(sys, tol)?;
    let m_hat = pseudoinverse(&bar.m_bar, tol);
    let x21 = c2_inv.transpose() * &m_hat * &bar.x21_bar;
    let x22 = c2_inv.transpose() * &m_hat * &bar.x22_bar * &m_hat * &c2_inv;
    let x22 = (&x22 + x22.transpose()) * 0.5;
    let (w, w_residual) = if sys.p() == 0 {
        (Mat::zeros(bar.z.ncols(), 0), 0.0)
    } else {
        match solve_factor(&sys.d, &bar.z, tol)? {
            Factor::Feasible { gain, residual } => (gain, residual),
            Factor::Infeasible { residual } => {
                return Err(SynthesisError::Infeasible { step: "coupling_factorization".into(), residual })
            }
        }
    };
    let cert = LmiCertificate {
        m_hat: (&m_hat + m_hat.transpose()) * 0.5,
        k: &bar.k_bar * &m_hat,
        l1: bar.l1.clone(),
        z: bar.z.clone(),
        w,
        x11: (&bar.x11 + bar.x11.transpose()) * 0.5,
        x12: x21.transpose(),
        x21,
        x22,
        kappa_hat,
        pi,
    };
    Ok((cert, w_residual))
}

/// Difference (left minus right) of the bar-form LMI; affine in
/// [`BarVariables`] for fixed `κ̂`.
pub fn bar_lmi_difference(sys: &ControlSystem, bar: &BarVariables, kappa_hat: f64) -> Mat {
    let n = sys.n();
    let r = bar.z.ncols();
    let s = usize::from(sys.has_nonlinearity());
    let g11 = &bar.m_bar * sys.a.transpose()
        + &sys.a * &bar.m_bar
        + bar.k_bar.transpose() * sys.b.transpose()
        + &sys.b * &bar.k_bar
        + &bar.m_bar * kappa_hat
        - &bar.x22_bar;
    let g12 = &bar.z - &bar.x21_bar;
    let mut g = Mat::zeros(n + r + s, n + r + s);
    place(&mut g, 0, 0, &g11);
    place(&mut g, 0, n, &g12);
    place(&mut g, n, 0, &g12.transpose());
    place(&mut g, n, n, &(-&bar.x11));
    if s == 1 {
        let g13 = &sys.b * &bar.l1 + &sys.e + &bar.m_bar * sys.f.transpose();
        place(&mut g, 0, n + r, &g13);
        place(&mut g, n + r, 0, &g13.transpose());
        g[(n + r, n + r)] = -two_over_b(sys);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub enum LmiFailure {
    /// The alternating projections stalled at a positive gap. Advisory only:
    /// the method carries no infeasibility certificate.
    Infeasible { gap: f64, iterations: usize },
    NonConvergence { iterations: usize, worst_margin: f64 },
    C2NotInvertible,
    Unsupported { reason: String },
}

impl fmt::Display for LmiFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LmiFailure::Infeasible { gap, iterations } => {
                write!(f, "projections stalled after {iterations} iterations (gap {gap:.3e}); likely infeasible")
            }
            LmiFailure::NonConvergence { iterations, worst_margin } => {
                write!(f, "no feasible point within {iterations} iterations (worst margin {worst_margin:.3e})")
            }
            LmiFailure::C2NotInvertible => write!(f, "C2 must be square and invertible"),
            LmiFailure::Unsupported { reason } => write!(f, "{reason}"),
        }
    }
}

impl std::error::Error for LmiFailure {}

struct ThetaDims {
    n: usize,
    m: usize,
    r: usize,
    has_l1: bool,
}

impl ThetaDims {
    fn len(&self) -> usize {
        let (n, m, r) = (self.n, self.m, self.r);
        n * n + m * n + if self.has_l1 { m } else { 0 } + n * r + n * n + n * r + r * r
    }

    fn split(&self, v: &Vec64) -> BarVariables {
        let (n, m, r) = (self.n, self.m, self.r);
        let mut at = 0;
        let mut take = |rows: usize, cols: usize| {
            let mat = Mat::from_column_slice(rows, cols, &v.as_slice()[at..at + rows * cols]);
            at += rows * cols;
            mat
        };
        let m_bar = take(n, n);
        let k_bar = take(m, n);
        let l1 = if self.has_l1 { take(m, 1) } else { Mat::zeros(m, 1) };
        let z = take(n, r);
        let x22_bar = take(n, n);
        let x21_bar = take(n, r);
        let x11 = take(r, r);
        BarVariables { x12_bar: x21_bar.transpose(), m_bar, k_bar, l1, z, x22_bar, x21_bar, x11 }
    }

    fn join(&self, bar: &BarVariables) -> Vec64 {
        let mut out = Vec::with_capacity(self.len());
        out.extend(bar.m_bar.iter());
        out.extend(bar.k_bar.iter());
        if self.has_l1 {
            out.extend(bar.l1.iter());
        }
        out.extend(bar.z.iter());
        out.extend(bar.x22_bar.iter());
        out.extend(bar.x21_bar.iter());
        out.extend(bar.x11.iter());
        Vec64::from_vec(out)
    }
}

fn nearest_nsd(m: &Mat) -> Mat {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut d = Mat::zeros(m.nrows(), m.nrows());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        d[(i, i)] = l.min(0.0);
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn nearest_spd_floor(m: &Mat, floor: f64) -> Mat {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut d = Mat::zeros(m.nrows(), m.nrows());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        d[(i, i)] = l.max(floor);
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Heuristic feasibility solver for the bar-form LMI at fixed `κ̂`:
/// alternating projections between the affine set carved out by the LMI
/// structure and the cone constraints (`M̄ ≻ 0` by eigenvalue floor, the
/// block difference `⪯ 0` and `X̄²² ⪯ 0` by negative-part projection).
///
/// Only success is trusted: a returned certificate is re-verified through
/// [`check_dissipation_lmi`] after un-barring. Failures are advisory.
pub fn solve_restricted_lmi(
    sys: &ControlSystem,
    kappa_hat: f64,
    max_iters: usize,
    tol: &Tolerance,
) -> Result<LmiCertificate, LmiFailure> {
    if sys.q2() != sys.n() || rank(&sys.c2, tol) != sys.n() {
        return Err(LmiFailure::C2NotInvertible);
    }
    if sys.has_nonlinearity() && !sys.phi.slope_upper.is_finite() {
        return Err(LmiFailure::Unsupported {
            reason: "slope bound b must be finite for the LMI route; use the positive-real dual check".into(),
        });
    }
    if !(kappa_hat > 0.0) {
        return Err(LmiFailure::Unsupported { reason: format!("kappa_hat must be positive, got {kappa_hat}") });
    }

    let n = sys.n();
    let m = sys.m();
    let r = sys.p();
    let has_l1 = sys.has_nonlinearity();
    let s = usize::from(has_l1);
    let dims = ThetaDims { n, m, r, has_l1 };
    let d_theta = dims.len();
    let side = n + r + s;

    // constant part of the affine map θ ↦ G
    let zero_theta = dims.split(&Vec64::zeros(d_theta));
    let g0_full = bar_lmi_difference(sys, &zero_theta, kappa_hat);
    let g0 = Vec64::from_column_slice(g0_full.as_slice());

    // linear part, one column per θ coordinate
    let mut a_lin = Mat::zeros(side * side, d_theta);
    for j in 0..d_theta {
        let mut unit = Vec64::zeros(d_theta);
        unit[j] = 1.0;
        let bar = dims.split(&unit);
        let gj = bar_lmi_difference(sys, &bar, kappa_hat);
        let col = Vec64::from_column_slice(gj.as_slice()) - &g0;
        a_lin.set_column(j, &col);
    }
    let normal = Mat::identity(d_theta, d_theta) + a_lin.transpose() * &a_lin;
    let chol = Cholesky::new(normal).expect("normal matrix is positive definite");

    // warm start: K̄ scaled with κ̂ keeps the (1,1) block negative early
    let mut bar = BarVariables {
        m_bar: Mat::identity(n, n),
        k_bar: -sys.b.transpose() * (kappa_hat / 2.0 + 1.0),
        l1: Mat::zeros(m, 1),
        z: sys.d.clone(),
        x22_bar: Mat::zeros(n, n),
        x21_bar: sys.d.clone(),
        x12_bar: sys.d.transpose(),
        x11: Mat::identity(r, r),
    };
    let mut g = bar_lmi_difference(sys, &bar, kappa_hat);

    let feas_tol = tol.definiteness_tol * 0.25;
    let floor = tol.definiteness_tol;
    let mut stall_count = 0;
    let mut last_point = dims.join(&bar);
    let mut worst = f64::INFINITY;

    for iter in 0..max_iters {
        // affine projection of (θ, G) onto { G = A θ + g0 }
        let theta = dims.join(&bar);
        let g_vec = Vec64::from_column_slice(g.as_slice());
        let rhs = &theta + a_lin.transpose() * (&g_vec - &g0);
        let theta_new = chol.solve(&rhs);
        bar = dims.split(&theta_new);
        let g_new_vec = &a_lin * &theta_new + &g0;
        g = Mat::from_column_slice(side, side, g_new_vec.as_slice());

        // feasibility at the affine-consistent point
        let g_margin = sym_max_eig(&g);
        let m_margin = floor - sym_min_eig(&bar.m_bar);
        let x22_margin = sym_max_eig(&bar.x22_bar);
        worst = g_margin.max(m_margin).max(x22_margin);
        if g_margin <= feas_tol && m_margin <= feas_tol && x22_margin <= feas_tol {
            let pi = kappa_hat / 2.0;
            let (cert, _) = from_bar_lmi(sys, &bar, kappa_hat, pi, tol)
                .map_err(|_| LmiFailure::NonConvergence { iterations: iter, worst_margin: worst })?;
            let report = check_dissipation_lmi(sys, &cert, tol);
            if report.passed {
                return Ok(cert);
            }
            return Err(LmiFailure::NonConvergence { iterations: iter, worst_margin: report.worst_violation() });
        }

        // cone projection
        bar.m_bar = nearest_spd_floor(&bar.m_bar, floor);
        bar.x22_bar = nearest_nsd(&bar.x22_bar);
        bar.x11 = (&bar.x11 + bar.x11.transpose()) * 0.5;
        bar.x12_bar = bar.x21_bar.transpose();
        g = nearest_nsd(&g);

        let point = dims.join(&bar);
        let moved = (&point - &last_point).norm();
        last_point = point;
        if moved < 1e-12 * (1.0 + last_point.norm()) {
            stall_count += 1;
            if stall_count >= 10 {
                return Err(LmiFailure::Infeasible { gap: worst, iterations: iter });
            }
        } else {
            stall_count = 0;
        }
    }
    Err(LmiFailure::NonConvergence { iterations: max_iters, worst_margin: worst })
}

/// Bisects `κ̂` upward to the largest value the LMI solver still certifies.
pub fn maximize_kappa_hat(
    sys: &ControlSystem,
    lo: f64,
    hi: f64,
    bisection_steps: usize,
    lmi_iters: usize,
    tol: &Tolerance,
) -> Option<(f64, LmiCertificate)> {
    let mut best = solve_restricted_lmi(sys, lo, lmi_iters, tol).ok().map(|c| (lo, c))?;
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..bisection_steps {
        let mid = 0.5 * (lo + hi);
        match solve_restricted_lmi(sys, mid, lmi_iters, tol) {
            Ok(cert) => {
                best = (mid, cert);
                lo = mid;
            }
            Err(_) => hi = mid,
        }
    }
    Some(best)
}

fn require_injective(p: &Mat, tol: &Tolerance) -> Result<Mat, SynthesisError> {
    if rank(p, tol) != p.ncols() {
        return Err(SynthesisError::PNotInjective);
    }
    Ok(pseudoinverse(p, tol))
}

/// Solves `AP = PÂ - BQ`, preferring the solution with the smallest
/// interface correction: minimum-norm `Q` first, then `Â = P⁺(AP + BQ)`.
/// Infeasible exactly when `im AP ⊄ im P + im B`.
pub fn construct_ahat_q(a: &Mat, b: &Mat, p: &Mat, tol: &Tolerance) -> Result<(Mat, Mat, f64), SynthesisError> {
    let p_pinv = require_injective(p, tol)?;
    let proj = Mat::identity(p.nrows(), p.nrows()) - p * &p_pinv;
    let ap = a * p;
    let q = match solve_factor(&(-(&proj * &ap)), &(&proj * b), tol)? {
        Factor::Feasible { gain, .. } => gain,
        Factor::Infeasible { residual } => return Err(SynthesisError::Infeasible { step: "ahat_q".into(), residual }),
    };
    let a_hat = &p_pinv * (&ap + b * &q);
    let residual = max_abs(&(&ap - (p * &a_hat - b * &q))) / (1.0 + max_abs(&ap));
    if residual > tol.residual_tol {
        return Err(SynthesisError::Infeasible { step: "ahat_q".into(), residual });
    }
    Ok((a_hat, q, residual))
}

/// Solves `E = PÊ - B(L₁ - L₂)` for `Ê` and `L₂`, preferring the smallest
/// interface correction. Infeasible exactly when `im E ⊄ im P + im B`.
pub fn construct_ehat_l2(
    e: &Mat,
    p: &Mat,
    b: &Mat,
    l1: &Mat,
    tol: &Tolerance,
) -> Result<(Mat, Mat, f64), SynthesisError> {
    let p_pinv = require_injective(p, tol)?;
    let proj = Mat::identity(p.nrows(), p.nrows()) - p * &p_pinv;
    let delta = match solve_factor(&(&proj * e), &(&proj * b), tol)? {
        Factor::Feasible { gain, .. } => gain,
        Factor::Infeasible { residual } => return Err(SynthesisError::Infeasible { step: "ehat_l2".into(), residual }),
    };
    let e_hat = &p_pinv * (e - b * &delta);
    let l2 = l1 + &delta;
    let residual = max_abs(&(e - (p * &e_hat - b * (l1 - &l2)))) / (1.0 + max_abs(e));
    if residual > tol.residual_tol {
        return Err(SynthesisError::Infeasible { step: "ehat_l2".into(), residual });
    }
    Ok((e_hat, l2, residual))
}

/// One-entries aggregation pattern: every row selects exactly one column.
fn is_block_ones(p: &Mat) -> bool {
    if p.nrows() == 0 || p.ncols() == 0 {
        return false;
    }
    for i in 0..p.nrows() {
        let mut ones = 0;
        for j in 0..p.ncols() {
            let v = p[(i, j)];
            if (v - 1.0).abs() < 1e-12 {
                ones += 1;
            } else if v.abs() > 1e-12 {
                return false;
            }
        }
        if ones != 1 {
            return false;
        }
    }
    true
}

/// Finds `Ĉ₂` and `H` with `X¹²C₂P = X¹²HĈ₂` and `X²²C₂P = X²²HĈ₂`.
///
/// Defaults: with a caller-supplied `H` the equations are solved for `Ĉ₂`;
/// a non-square aggregation `P` picks the case-study pattern `H = C₂P`;
/// otherwise `H = I` with `Ĉ₂ = C₂P`, which satisfies both equations
/// identically.
pub fn construct_c2hat_h(
    c2: &Mat,
    p: &Mat,
    x12: &Mat,
    x22: &Mat,
    h_override: Option<&Mat>,
    tol: &Tolerance,
) -> Result<(Mat, Mat, f64), SynthesisError> {
    let q2 = c2.nrows();
    let c2p = c2 * p;
    let solve_for_c2hat = |h: &Mat| -> Result<(Mat, f64), SynthesisError> {
        let lhs = vstack(&[&(x12 * h), &(x22 * h)]);
        let rhs = vstack(&[&(x12 * &c2p), &(x22 * &c2p)]);
        match solve_factor(&rhs, &lhs, tol)? {
            Factor::Feasible { gain, residual } => Ok((gain, residual)),
            Factor::Infeasible { residual } => Err(SynthesisError::Infeasible { step: "c2hat_h".into(), residual }),
        }
    };
    if let Some(h) = h_override {
        let (c2_hat, residual) = solve_for_c2hat(h)?;
        return Ok((c2_hat, h.clone(), residual));
    }
    if is_block_ones(p) && p.nrows() != p.ncols() {
        let h = c2p.clone();
        let (c2_hat, residual) = solve_for_c2hat(&h)?;
        return Ok((c2_hat, h, residual));
    }
    Ok((c2p, Mat::identity(q2, q2), 0.0))
}

/// Finds the widest `Ŵ` with `im ZŴ ⊆ im P` (the kernel of `(I - PP⁺)Z`)
/// and the matching `D̂ = P⁺ZŴ`. `Ŵ` may legally have zero columns.
pub fn construct_dhat_what(
    p: &Mat,
    z: &Mat,
    what_override: Option<&Mat>,
    tol: &Tolerance,
) -> Result<(Mat, Mat, f64), SynthesisError> {
    let p_pinv = require_injective(p, tol)?;
    let w_hat = match what_override {
        Some(w) => w.clone(),
        None => {
            let proj = Mat::identity(p.nrows(), p.nrows()) - p * &p_pinv;
            kernel_basis(&(&proj * z), tol)
        }
    };
    let zw = z * &w_hat;
    let d_hat = &p_pinv * &zw;
    let residual = max_abs(&(p * &d_hat - &zw)) / (1.0 + max_abs(&zw));
    if residual > tol.residual_tol {
        return Err(SynthesisError::Infeasible { step: "dhat_what".into(), residual });
    }
    Ok((d_hat, w_hat, residual))
}

/// Left-inverse data certifying that every controllable behavior of the
/// concrete system survives on the abstraction.
#[derive(Debug, Clone)]
pub struct BehaviorPreservation {
    pub p_hat: Mat,
    pub g: Mat,
    pub t: Mat,
    pub b_hat: Mat,
    /// Worst output mismatch over the validation runs.
    pub trajectory_error: f64,
}

/// Constructs `P̂`, `G`, `T` and the behavior-preserving
/// `B̂ = [P̂B  P̂AG]`, then validates the output-matching identity on five
/// simulated runs.
///
/// Requires `im P + ker C₁ = ℝⁿ` (and `im P + ker F = ℝⁿ` for nonlinear
/// systems); `P̂` is the least-norm solution of the stacked system
/// `P̂P = I`, `Ĉ₁P̂ = C₁`, `F̂P̂ = F`.
pub fn construct_bhat_behavior(
    sys: &ControlSystem,
    p: &Mat,
    q: &Mat,
    l1: &Mat,
    l2: &Mat,
    tol: &Tolerance,
) -> Result<BehaviorPreservation, SynthesisError> {
    let n = sys.n();
    let n_hat = p.ncols();
    let p_pinv = require_injective(p, tol)?;
    let has_nl = sys.has_nonlinearity();

    let c1_kernel = kernel_basis(&sys.c1, tol);
    if rank(&hstack(&[p, &c1_kernel]), tol) != n {
        return Err(SynthesisError::Infeasible { step: "span_im_p_ker_c1".into(), residual: f64::NAN });
    }
    if has_nl {
        let f_kernel = kernel_basis(&sys.f, tol);
        if rank(&hstack(&[p, &f_kernel]), tol) != n {
            return Err(SynthesisError::Infeasible { step: "span_im_p_ker_f".into(), residual: f64::NAN });
        }
    }

    let c1_hat = &sys.c1 * p;
    let f_hat = &sys.f * p;

    // stacked least-norm solve for P̂ (column-major vectorization)
    let eye_nhat = Mat::identity(n_hat, n_hat);
    let eye_n = Mat::identity(n, n);
    let mut rows: Vec<Mat> = vec![p.transpose().kronecker(&eye_nhat), eye_n.kronecker(&c1_hat)];
    let mut rhs_parts: Vec<Vec<f64>> = vec![
        eye_nhat.iter().copied().collect(),
        sys.c1.as_slice().to_vec(),
    ];
    if has_nl {
        rows.push(eye_n.kronecker(&f_hat));
        rhs_parts.push(sys.f.as_slice().to_vec());
    }
    let stacked = vstack(&rows.iter().collect::<Vec<_>>());
    let rhs_vec: Vec<f64> = rhs_parts.concat();
    let rhs = Mat::from_column_slice(rhs_vec.len(), 1, &rhs_vec);
    let p_hat = match solve_factor(&rhs, &stacked, tol)? {
        Factor::Feasible { gain, .. } => Mat::from_column_slice(n_hat, n, gain.as_slice()),
        Factor::Infeasible { residual } => return Err(SynthesisError::NoCommonLeftInverse { residual }),
    };

    // rank factorization of I - PP̂ into G·T
    let complement = &eye_n - p * &p_hat;
    let (u, sigma, v) = matgeo::thin_svd(&complement);
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = tol.rank_tol * smax.max(1.0);
    let kept: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > cutoff).collect();
    let k = kept.len();
    let mut g = Mat::zeros(n, k);
    let mut t = Mat::zeros(k, n);
    for (col, &i) in kept.iter().enumerate() {
        g.set_column(col, &(u.column(i) * sigma[i]));
        t.set_row(col, &v.column(i).transpose());
    }

    let b_hat = hstack(&[&(&p_hat * &sys.b), &(&p_hat * &sys.a * &g)]);

    // validate the trajectory identity on five runs with ω ≡ 0
    let a_hat = &p_pinv * (&sys.a * p + &sys.b * q);
    let e_hat = &p_pinv * (&sys.e + &sys.b * (l1 - l2));
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let mut worst = 0.0f64;
    let m = sys.m();
    let steps = 500;
    let dt = 1e-2;
    for _ in 0..5 {
        let x0 = Vec64::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ups = SignalSpec::Sinusoid {
            amplitude: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            frequency: (0..m).map(|_| rng.random_range(0.1..0.8)).collect(),
            phase: (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let xh0 = &p_hat * &x0;
        let joint0 = Vec64::from_iterator(n + n_hat, x0.iter().chain(xh0.iter()).copied());
        let states = rk4(&joint0, 0.0, dt, steps, |tt, xs| {
            let x = xs.rows(0, n).into_owned();
            let xh = xs.rows(n, n_hat).into_owned();
            let v = ups.eval(tt);
            let phi_fx = if has_nl { sys.phi.eval((&sys.f * &x)[0]) } else { 0.0 };
            let dx = sys.dynamics(&x, &v, &Vec64::zeros(sys.p()));
            let u_top = &v - q * (&p_hat * &x) - (l1 - l2) * phi_fx;
            let u_hat = Vec64::from_iterator(m + k, u_top.iter().copied().chain((&t * &x).iter().copied()));
            let mut dxh = &a_hat * &xh + &b_hat * &u_hat;
            if has_nl {
                dxh += &e_hat * sys.phi.eval((&f_hat * &xh)[0]);
            }
            Vec64::from_iterator(n + n_hat, dx.iter().chain(dxh.iter()).copied())
        })?;
        for xs in &states {
            let z = &sys.c1 * xs.rows(0, n).into_owned();
            let zh = &c1_hat * xs.rows(n, n_hat).into_owned();
            worst = worst.max((z - zh).norm());
        }
    }
    if worst > 1e-6 {
        return Err(SynthesisError::Infeasible { step: "trajectory_identity".into(), residual: worst });
    }
    Ok(BehaviorPreservation { p_hat, g, t, b_hat, trajectory_error: worst })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LogEntry {
    pub step: String,
    pub residual: f64,
}

/// Output of the construction pipeline: the abstract system, the full
/// storage certificate, and the per-step residual log.
#[derive(Debug, Clone)]
pub struct AbstractionResult {
    pub abstract_system: ControlSystem,
    pub certificate: StorageCertificate,
    pub construction_log: Vec<LogEntry>,
    pub warnings: Vec<String>,
    pub behavior: Option<BehaviorPreservation>,
}

impl AbstractionResult {
    pub fn to_json(&self) -> String {
        let sys = &self.abstract_system;
        let slope_upper = if sys.phi.slope_upper.is_finite() {
            serde_json::json!(sys.phi.slope_upper)
        } else {
            serde_json::Value::Null
        };
        let value = serde_json::json!({
            "abstract_system": {
                "a": matgeo::mat_to_rows(&sys.a),
                "b": matgeo::mat_to_rows(&sys.b),
                "c1": matgeo::mat_to_rows(&sys.c1),
                "c2": matgeo::mat_to_rows(&sys.c2),
                "d": matgeo::mat_to_rows(&sys.d),
                "e": matgeo::mat_to_rows(&sys.e),
                "f": matgeo::mat_to_rows(&sys.f),
                "phi": sys.phi.kind,
                "slope_lower": sys.phi.slope_lower,
                "slope_upper": slope_upper,
            },
            "certificate": self.certificate,
            "construction_log": self.construction_log,
            "warnings": self.warnings,
        });
        serde_json::to_string_pretty(&value).expect("abstraction result serializes")
    }
}

/// Pipeline switches; the defaults reproduce the free-`B̂ = I` route.
#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Step-1 certificate; solved on the fly from `kappa_hat` when absent.
    pub certificate: Option<LmiCertificate>,
    pub kappa_hat: Option<f64>,
    pub lmi_max_iters: Option<usize>,
    pub h_override: Option<Mat>,
    pub w_hat_override: Option<Mat>,
    /// Construct `B̂ = [P̂B  P̂AG]` instead of the free choice `B̂ = I`.
    pub behavior_preserving: bool,
}

/// Runs the construction pipeline in order: step-1 certificate, validation
/// of `P`, then `Â,Q`; `Ê,L₂`; `F̂ = FP`; `Ĉ₁ = C₁P`; `Ĉ₂,H`; `D̂,Ŵ`;
/// `B̂`; `R̃`.
pub fn synthesize_abstraction(
    sys: &ControlSystem,
    p: &Mat,
    options: &PipelineOptions,
) -> Result<AbstractionResult, SynthesisError> {
    let tol = Tolerance::default();
    let mut log: Vec<LogEntry> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();

    let cert = match &options.certificate {
        Some(c) => c.clone(),
        None => {
            let kappa = options.kappa_hat.ok_or_else(|| SynthesisError::Infeasible {
                step: "dissipation_lmi (no certificate and no kappa_hat)".into(),
                residual: f64::NAN,
            })?;
            solve_restricted_lmi(sys, kappa, options.lmi_max_iters.unwrap_or(500), &tol)
                .map_err(|e| SynthesisError::Infeasible { step: format!("dissipation_lmi ({e})"), residual: f64::NAN })?
        }
    };
    let report = check_dissipation_lmi(sys, &cert, &tol);
    if !report.passed {
        return Err(SynthesisError::Infeasible { step: "dissipation_lmi".into(), residual: report.worst_violation() });
    }
    log.push(LogEntry { step: "dissipation_lmi".into(), residual: 0.0 });

    require_injective(p, &tol)?;
    log.push(LogEntry { step: "p_injective".into(), residual: 0.0 });

    let (a_hat, q, res_aq) = construct_ahat_q(&sys.a, &sys.b, p, &tol)?;
    log.push(LogEntry { step: "ahat_q".into(), residual: res_aq });

    let n_hat = p.ncols();
    let has_nl = sys.has_nonlinearity();
    let (e_hat, l2) = if has_nl {
        let (e_hat, l2, res) = construct_ehat_l2(&sys.e, p, &sys.b, &cert.l1, &tol)?;
        log.push(LogEntry { step: "ehat_l2".into(), residual: res });
        (e_hat, l2)
    } else {
        log.push(LogEntry { step: "ehat_l2 (skipped: no nonlinearity)".into(), residual: 0.0 });
        (Mat::zeros(n_hat, 1), cert.l1.clone())
    };

    let f_hat = &sys.f * p;
    log.push(LogEntry { step: "fhat".into(), residual: 0.0 });
    let c1_hat = &sys.c1 * p;
    log.push(LogEntry { step: "c1hat".into(), residual: 0.0 });

    let (c2_hat, h, res_c2) =
        construct_c2hat_h(&sys.c2, p, &cert.x12, &cert.x22, options.h_override.as_ref(), &tol)?;
    log.push(LogEntry { step: "c2hat_h".into(), residual: res_c2 });

    let (d_hat, w_hat, res_d) = construct_dhat_what(p, &cert.z, options.w_hat_override.as_ref(), &tol)?;
    log.push(LogEntry { step: "dhat_what".into(), residual: res_d });
    if w_hat.ncols() == 0 && sys.p() > 0 {
        warnings.push("Ŵ has zero columns; the abstract coupling equation degenerates downstream".into());
    }

    let mut behavior = None;
    let b_hat = if options.behavior_preserving {
        let bp = construct_bhat_behavior(sys, p, &q, &cert.l1, &l2, &tol)?;
        log.push(LogEntry { step: "bhat_behavior".into(), residual: bp.trajectory_error });
        let b_hat = bp.b_hat.clone();
        behavior = Some(bp);
        b_hat
    } else {
        log.push(LogEntry { step: "bhat_free_identity".into(), residual: 0.0 });
        Mat::identity(n_hat, n_hat)
    };

    let rtilde = compute_rtilde(&cert.m_hat, p, &sys.b, &b_hat, &tol)?;
    log.push(LogEntry { step: "rtilde".into(), residual: 0.0 });

    let abstract_system = {
        let base = ControlSystem::linear(a_hat, b_hat, c1_hat, c2_hat, d_hat)?;
        if has_nl {
            base.with_nonlinearity(e_hat, f_hat, sys.phi.clone())?
        } else {
            base
        }
    };

    let certificate = StorageCertificate { lmi: cert, p: p.clone(), q, l2, rtilde, w_hat, h };
    certificate.validate(sys, &abstract_system, &tol)?;

    Ok(AbstractionResult { abstract_system, certificate, construction_log: log, warnings, behavior })
}

/// Aggregation / eigenvector templates for the projection `P`.
///
/// Validation stays the caller's job; these are candidate shapes only.
pub fn candidate_projections(sys: &ControlSystem, partition: Option<&[usize]>) -> Vec<Mat> {
    let n = sys.n();
    let mut out = vec![Mat::identity(n, n)];
    if let Some(blocks) = partition {
        if blocks.iter().sum::<usize>() == n && !blocks.is_empty() {
            let mut p = Mat::zeros(n, blocks.len());
            let mut row = 0;
            for (j, &sz) in blocks.iter().enumerate() {
                for _ in 0..sz {
                    p[(row, j)] = 1.0;
                    row += 1;
                }
            }
            out.push(p);
        }
    }
    // leading eigenvector columns of the symmetric part of A
    let eig = SymmetricEigen::new((&sys.a + sys.a.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    for take in 1..n.min(3) {
        let mut p = Mat::zeros(n, take);
        for (col, &i) in order.iter().take(take).enumerate() {
            p.set_column(col, &eig.eigenvectors.column(i));
        }
        out.push(p);
    }
    out
}

/// Checks the restricted-form dissipation LMI through its dual control
/// problems: strict positive realness when `b = ∞`, L2-gain assignment
/// (single Schur-complement inequality) when `b < ∞`.
///
/// The restricted form requires `X¹² = 0` and `X¹¹ ⪰ ZᵀM̂Z/π`.
pub fn spr_duality_check(
    sys: &ControlSystem,
    cert: &LmiCertificate,
    tol: &Tolerance,
) -> Result<VerificationReport, SynthesisError> {
    if max_abs(&cert.x12) > tol.residual_tol * (1.0 + max_abs(&cert.x11)) {
        return Err(SynthesisError::NotRestrictedForm { reason: "X¹² must vanish".into() });
    }
    if cert.r() > 0 {
        let bound = &cert.x11 - cert.z.transpose() * &cert.m_hat * &cert.z / cert.pi;
        if sym_min_eig(&bound) < -tol.definiteness_tol {
            return Err(SynthesisError::NotRestrictedForm { reason: "X¹¹ must dominate ZᵀM̂Z/π".into() });
        }
    }

    let mut report = VerificationReport::new();
    let acl = &sys.a + &sys.b * &cert.k;
    let bl1e = &sys.b * &cert.l1 + &sys.e;
    let b = sys.phi.slope_upper;
    let finite_b = sys.has_nonlinearity() && b.is_finite();

    if !finite_b {
        let decay = acl.transpose() * &cert.m_hat + &cert.m_hat * &acl;
        report.push("spr_strict_decay", sym_max_eig(&decay), -tol.definiteness_tol, None);
        let eq = &cert.m_hat * &bl1e + sys.f.transpose();
        let residual = max_abs(&eq) / (1.0 + max_abs(&sys.f));
        report.push("positive_real_equality", residual, tol.residual_tol, None);
        return Ok(report);
    }

    // b < ∞: Schur complement of -2/b in the restricted LMI
    let shifted = &acl + &bl1e * (b / 2.0) * &sys.f;
    let sigma = shifted.transpose() * &cert.m_hat
        + &cert.m_hat * &shifted
        + &cert.m_hat * &bl1e * (b / 2.0) * bl1e.transpose() * &cert.m_hat
        + sys.f.transpose() * (b / 2.0) * &sys.f;
    report.push("l2_gain_schur", sym_max_eig(&sigma), -tol.definiteness_tol, None);

    // cross-validation against the restricted dissipation LMI
    let lmi = check_dissipation_lmi(sys, cert, tol);
    let lmi_margin = lmi.find("dissipation_lmi").map(|c| c.margin).unwrap_or(f64::INFINITY);
    report.push("restricted_lmi", lmi_margin, tol.definiteness_tol, None);

    // exact Schur route (keeps the κ̂M̂, X²², Z terms) must agree with the
    // assembled LMI by the Schur-complement identity
    let s11 = acl.transpose() * &cert.m_hat
        + &cert.m_hat * &acl
        + &cert.m_hat * cert.kappa_hat
        - sys.c2.transpose() * &cert.x22 * &sys.c2;
    let z_term = if cert.r() > 0 {
        &cert.m_hat * &cert.z * pseudoinverse(&cert.x11, tol) * cert.z.transpose() * &cert.m_hat
    } else {
        Mat::zeros(sys.n(), sys.n())
    };
    let c_vec = &cert.m_hat * &bl1e + sys.f.transpose();
    let sigma_exact = &s11 + &z_term + &c_vec * (b / 2.0) * c_vec.transpose();
    let exact_pass = sym_max_eig(&sigma_exact) <= tol.definiteness_tol;
    let lmi_pass = lmi_margin <= tol.definiteness_tol;
    report.push(
        "schur_cross_validation",
        if exact_pass == lmi_pass { 0.0 } else { 1.0 },
        0.5,
        None,
    );
    Ok(report)
}
