//! Network-level composition: the block supply matrix, the two
//! compositionality conditions over the interconnection matrix, the abstract
//! coupling solve, and composition of storage functions into a network
//! simulation function.

use crate::matgeo::{
    self, block_diag, image_subset, is_negative_semidefinite, max_abs, max_eig_sym, pseudoinverse,
    vstack, Mat, Tolerance, Vec64,
};
use crate::report::VerificationReport;
use crate::storage::{
    derive_comparison_functions, interface, CertError, ComparisonFunctions, SampleConfig,
    StorageCertificate,
};
use crate::sysmodel::ControlSystem;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug)]
pub enum ComposeError {
    DimensionMismatch { what: String, expected: usize, got: usize },
    ConditionsNotCertified { detail: String },
    InfeasibleCoupling { residual: f64 },
    MuNotPositive { index: usize },
    Certificate(CertError),
}

impl fmt::Display for ComposeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComposeError::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            ComposeError::ConditionsNotCertified { detail } => {
                write!(f, "compositionality conditions not certified: {detail}")
            }
            ComposeError::InfeasibleCoupling { residual } => {
                write!(f, "abstract coupling equation unsolvable (residual {residual:.3e})")
            }
            ComposeError::MuNotPositive { index } => {
                write!(f, "composite comparison functions need mu > 0 (violated at index {index})")
            }
            ComposeError::Certificate(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ComposeError {}

impl From<CertError> for ComposeError {
    fn from(e: CertError) -> Self {
        ComposeError::Certificate(e)
    }
}

/// One certified subsystem/abstraction pair.
#[derive(Debug, Clone)]
pub struct CertifiedPair {
    pub system: ControlSystem,
    pub abstraction: ControlSystem,
    pub certificate: StorageCertificate,
}

/// A network of certified pairs wired by the static coupling `w = M ζ₂`.
#[derive(Debug, Clone)]
pub struct InterconnectionSpec {
    pub subsystems: Vec<CertifiedPair>,
    pub coupling: Mat,
}

impl InterconnectionSpec {
    pub fn new(subsystems: Vec<CertifiedPair>, coupling: Mat) -> Result<Self, ComposeError> {
        assert!(!subsystems.is_empty(), "interconnection needs at least one subsystem");
        let p_total: usize = subsystems.iter().map(|s| s.system.p()).sum();
        let q2_total: usize = subsystems.iter().map(|s| s.system.q2()).sum();
        if coupling.nrows() != p_total {
            return Err(ComposeError::DimensionMismatch { what: "M rows".into(), expected: p_total, got: coupling.nrows() });
        }
        if coupling.ncols() != q2_total {
            return Err(ComposeError::DimensionMismatch { what: "M cols".into(), expected: q2_total, got: coupling.ncols() });
        }
        let tol = Tolerance::default();
        for (i, pair) in subsystems.iter().enumerate() {
            pair.certificate
                .validate(&pair.system, &pair.abstraction, &tol)
                .map_err(|e| ComposeError::ConditionsNotCertified { detail: format!("subsystem {i}: {e}") })?;
        }
        Ok(InterconnectionSpec { subsystems, coupling })
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn w_stacked(&self) -> Mat {
        block_diag(&self.subsystems.iter().map(|s| &s.certificate.lmi.w).collect::<Vec<_>>())
    }

    pub fn what_stacked(&self) -> Mat {
        block_diag(&self.subsystems.iter().map(|s| &s.certificate.w_hat).collect::<Vec<_>>())
    }

    pub fn h_stacked(&self) -> Mat {
        block_diag(&self.subsystems.iter().map(|s| &s.certificate.h).collect::<Vec<_>>())
    }
}

/// Assembles the network supply matrix: the 2x2 super-block layout whose
/// corners are block diagonals of `μᵢ Xᵢ¹¹`, `μᵢ Xᵢ¹²`, `μᵢ Xᵢ²¹`, `μᵢ Xᵢ²²`.
pub fn assemble_x(certs: &[&StorageCertificate], mu: &[f64]) -> Mat {
    assert_eq!(certs.len(), mu.len(), "one weight per certificate");
    assert!(mu.iter().all(|&m| m >= 0.0), "weights must be nonnegative");
    let x11: Vec<Mat> = certs.iter().zip(mu).map(|(c, &m)| &c.lmi.x11 * m).collect();
    let x12: Vec<Mat> = certs.iter().zip(mu).map(|(c, &m)| &c.lmi.x12 * m).collect();
    let x21: Vec<Mat> = certs.iter().zip(mu).map(|(c, &m)| &c.lmi.x21 * m).collect();
    let x22: Vec<Mat> = certs.iter().zip(mu).map(|(c, &m)| &c.lmi.x22 * m).collect();
    fn refs(v: &[Mat]) -> Vec<&Mat> {
        v.iter().collect()
    }
    let top = matgeo::hstack(&[&block_diag(&refs(&x11)), &block_diag(&refs(&x12))]);
    let bottom = matgeo::hstack(&[&block_diag(&refs(&x21)), &block_diag(&refs(&x22))]);
    vstack(&[&top, &bottom])
}

/// Condition on the concrete coupling:
/// `[WM; I]ᵀ X(μ₁X₁,…) [WM; I] ⪯ 0`. Returns the pass flag and the largest
/// eigenvalue as the margin.
pub fn check_coupling_dissipativity(spec: &InterconnectionSpec, mu: &[f64], tol: &Tolerance) -> (bool, f64) {
    let certs: Vec<&StorageCertificate> = spec.subsystems.iter().map(|s| &s.certificate).collect();
    let x = assemble_x(&certs, mu);
    let w = spec.w_stacked();
    let q_tilde: usize = spec.subsystems.iter().map(|s| s.system.q2()).sum();
    let wm = &w * &spec.coupling;
    let stack = vstack(&[&wm, &Mat::identity(q_tilde, q_tilde)]);
    let s = stack.transpose() * x * stack;
    let margin = max_eig_sym(&s, tol).unwrap_or(f64::INFINITY);
    (is_negative_semidefinite(&s, tol).unwrap_or(false), margin)
}

/// Condition matching the abstract coupling: `WMH = Ŵ M̂`. Returns the pass
/// flag and the max-norm residual.
pub fn check_coupling_match(spec: &InterconnectionSpec, mhat_coupling: &Mat, tol: &Tolerance) -> (bool, f64) {
    let lhs = spec.w_stacked() * &spec.coupling * spec.h_stacked();
    let rhs = spec.what_stacked() * mhat_coupling;
    if lhs.shape() != rhs.shape() {
        return (false, f64::INFINITY);
    }
    let residual = max_abs(&(lhs - rhs));
    (residual <= tol.residual_tol, residual)
}

/// Least-norm abstract coupling solving `Ŵ M̂ = WMH`; infeasible when
/// `im WMH ⊄ im Ŵ`.
pub fn solve_abstract_coupling(spec: &InterconnectionSpec, tol: &Tolerance) -> Result<Mat, ComposeError> {
    let w_hat = spec.what_stacked();
    let target = spec.w_stacked() * &spec.coupling * spec.h_stacked();
    let feasible = image_subset(&target, &w_hat, tol)
        .map_err(|e| ComposeError::Certificate(CertError::CertificateInvalid { reason: e.to_string() }))?;
    let mhat = pseudoinverse(&w_hat, tol) * &target;
    let residual = max_abs(&(&w_hat * &mhat - &target));
    if !feasible || residual > tol.residual_tol {
        return Err(ComposeError::InfeasibleCoupling { residual });
    }
    Ok(mhat)
}

/// Evaluator for the composed simulation function
/// `V(x, x̂) = Σ μᵢ (xᵢ - Pᵢx̂ᵢ)ᵀ M̂ᵢ (xᵢ - Pᵢx̂ᵢ)`.
#[derive(Debug, Clone)]
pub struct CompositeSimulationFunction {
    pub mu: Vec<f64>,
    parts: Vec<(Mat, Mat)>,
    n_dims: Vec<usize>,
    nhat_dims: Vec<usize>,
}

impl CompositeSimulationFunction {
    pub fn value(&self, x: &Vec64, x_hat: &Vec64) -> f64 {
        let mut total = 0.0;
        let (mut xo, mut ho) = (0, 0);
        for (i, (p, m_hat)) in self.parts.iter().enumerate() {
            let xi = x.rows(xo, self.n_dims[i]);
            let xhi = x_hat.rows(ho, self.nhat_dims[i]);
            let e = xi - p * xhi;
            total += self.mu[i] * (e.transpose() * m_hat * &e)[0];
            xo += self.n_dims[i];
            ho += self.nhat_dims[i];
        }
        total
    }
}

/// Composes the per-subsystem comparison functions:
/// `κ = minᵢ κᵢ` (the linear-cost optimization over the weighted simplex),
/// `c_ρ = maxᵢ μᵢ c_ρᵢ` (the sphere-constrained maximization), and the
/// quadratic lower bound `c_α = 1 / Σᵢ 1/(μᵢ c_αᵢ)` (tight by
/// Cauchy-Schwarz). Requires strictly positive weights and certified
/// conditions.
pub fn compose_simulation_function(
    spec: &InterconnectionSpec,
    mu: &[f64],
    mhat_coupling: &Mat,
    tol: &Tolerance,
) -> Result<(CompositeSimulationFunction, ComparisonFunctions), ComposeError> {
    if let Some(idx) = mu.iter().position(|&m| !(m > 0.0)) {
        return Err(ComposeError::MuNotPositive { index: idx });
    }
    let (ok5, margin5) = check_coupling_dissipativity(spec, mu, tol);
    if !ok5 {
        return Err(ComposeError::ConditionsNotCertified { detail: format!("coupling dissipativity margin {margin5:.3e}") });
    }
    let (ok6, res6) = check_coupling_match(spec, mhat_coupling, tol);
    if !ok6 {
        return Err(ComposeError::ConditionsNotCertified { detail: format!("coupling match residual {res6:.3e}") });
    }

    let mut kappa = f64::INFINITY;
    let mut rho = 0.0f64;
    let mut alpha_inv_sum = 0.0;
    let mut parts = Vec::new();
    let mut n_dims = Vec::new();
    let mut nhat_dims = Vec::new();
    for (i, pair) in spec.subsystems.iter().enumerate() {
        let cf = derive_comparison_functions(&pair.system, &pair.abstraction, &pair.certificate, tol)?;
        kappa = kappa.min(cf.eta_coeff);
        rho = rho.max(mu[i] * cf.rho_coeff);
        alpha_inv_sum += 1.0 / (mu[i] * cf.alpha_coeff);
        parts.push((pair.certificate.p.clone(), pair.certificate.lmi.m_hat.clone()));
        n_dims.push(pair.system.n());
        nhat_dims.push(pair.abstraction.n());
    }
    let cf = ComparisonFunctions { alpha_coeff: 1.0 / alpha_inv_sum, eta_coeff: kappa, rho_coeff: rho };
    cf.validate()?;
    Ok((CompositeSimulationFunction { mu: mu.to_vec(), parts, n_dims, nhat_dims }, cf))
}

/// Cyclic golden-section search over the weights minimizing the
/// coupling-dissipativity margin. Never required — the all-ones default is what the
/// worked examples use — but occasionally buys margin on heterogeneous
/// networks. Weights stay within `2^±4` of one.
pub fn search_dissipativity_weights(
    spec: &InterconnectionSpec,
    sweeps: usize,
    tol: &Tolerance,
) -> (Vec<f64>, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let n = spec.len();
    let mut exponents = vec![0.0f64; n];
    let margin_at = |exps: &[f64]| {
        let mu: Vec<f64> = exps.iter().map(|e| 2f64.powf(*e)).collect();
        check_coupling_dissipativity(spec, &mu, tol).1
    };
    let mut best = margin_at(&exponents);
    for _ in 0..sweeps {
        for i in 0..n {
            let (mut lo, mut hi) = (-4.0f64, 4.0f64);
            let probe = |e: f64, exps: &mut Vec<f64>| {
                let saved = exps[i];
                exps[i] = e;
                let v = margin_at(exps);
                exps[i] = saved;
                v
            };
            let mut x1 = hi - INV_PHI * (hi - lo);
            let mut x2 = lo + INV_PHI * (hi - lo);
            let mut f1 = probe(x1, &mut exponents);
            let mut f2 = probe(x2, &mut exponents);
            for _ in 0..24 {
                if f1 <= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - INV_PHI * (hi - lo);
                    f1 = probe(x1, &mut exponents);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + INV_PHI * (hi - lo);
                    f2 = probe(x2, &mut exponents);
                }
            }
            let candidate = 0.5 * (lo + hi);
            let value = probe(candidate, &mut exponents);
            if value < best {
                exponents[i] = candidate;
                best = value;
            }
        }
    }
    (exponents.iter().map(|e| 2f64.powf(*e)).collect(), best)
}

/// Pass/fail evidence for a composed network certificate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompositionCertificate {
    pub mu: Vec<f64>,
    #[serde(with = "matgeo::mat_serde")]
    pub mhat_coupling: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub x_assembled: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub w_stacked: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub what_stacked: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub h_stacked: Mat,
    pub dissipativity_margin: f64,
    pub coupling_match_residual: f64,
    pub composite_cf: ComparisonFunctions,
    /// The composed quadratic α is an upper-bound construction over the
    /// per-subsystem optimization, not claimed optimal.
    pub alpha_is_upper_bound: bool,
}

impl CompositionCertificate {
    pub fn passing(&self, tol: &Tolerance) -> bool {
        self.dissipativity_margin <= tol.definiteness_tol && self.coupling_match_residual <= tol.residual_tol
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("composition certificate serializes")
    }
}

/// End-to-end composition: solves the abstract coupling (unless supplied),
/// checks both conditions, and packages the composite comparison functions.
pub fn compose_network(
    spec: &InterconnectionSpec,
    mu: &[f64],
    mhat_coupling: Option<Mat>,
    tol: &Tolerance,
) -> Result<(CompositionCertificate, CompositeSimulationFunction), ComposeError> {
    let mhat = match mhat_coupling {
        Some(m) => m,
        None => solve_abstract_coupling(spec, tol)?,
    };
    let (_, margin5) = check_coupling_dissipativity(spec, mu, tol);
    let (_, res6) = check_coupling_match(spec, &mhat, tol);
    let (evaluator, cf) = compose_simulation_function(spec, mu, &mhat, tol)?;
    let certs: Vec<&StorageCertificate> = spec.subsystems.iter().map(|s| &s.certificate).collect();
    let cert = CompositionCertificate {
        mu: mu.to_vec(),
        x_assembled: assemble_x(&certs, mu),
        w_stacked: spec.w_stacked(),
        what_stacked: spec.what_stacked(),
        h_stacked: spec.h_stacked(),
        mhat_coupling: mhat,
        dissipativity_margin: margin5,
        coupling_match_residual: res6,
        composite_cf: cf,
        alpha_is_upper_bound: true,
    };
    Ok((cert, evaluator))
}

fn ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec64 {
    if dim == 0 {
        return Vec64::zeros(0);
    }
    let v = Vec64::from_fn(dim, |_, _| {
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let n = v.norm();
    if n <= 1e-9 {
        return Vec64::zeros(dim);
    }
    let u: f64 = rng.random_range(0.0..1.0f64);
    v / n * (radius * u.powf(1.0 / dim as f64))
}

/// Sampled verification that the composed `V` is a simulation function from
/// the abstract network to the concrete one: the lower output bound and the
/// decay inequality along interconnected dynamics, with internal inputs
/// substituted through `M` and `M̂` and the concrete input assembled from the
/// per-subsystem interfaces.
pub fn verify_composite(
    spec: &InterconnectionSpec,
    mu: &[f64],
    mhat_coupling: &Mat,
    config: &SampleConfig,
    tol: &Tolerance,
) -> VerificationReport {
    let mut report = VerificationReport::new();
    let (evaluator, cf) = match compose_simulation_function(spec, mu, mhat_coupling, tol) {
        Ok(pair) => pair,
        Err(e) => {
            report.push(format!("composition ({e})"), f64::INFINITY, tol.residual_tol, None);
            return report;
        }
    };
    verify_composite_inequalities(spec, mu, mhat_coupling, &evaluator, &cf, config, tol, &mut report);
    report
}

/// Raw sampled check of the two simulation-function inequalities for a given
/// composite evaluator, without requiring the coupling conditions to hold first.
/// Used to probe uncertified couplings.
#[allow(clippy::too_many_arguments)]
pub fn verify_composite_inequalities(
    spec: &InterconnectionSpec,
    mu: &[f64],
    mhat_coupling: &Mat,
    evaluator: &CompositeSimulationFunction,
    cf: &ComparisonFunctions,
    config: &SampleConfig,
    tol: &Tolerance,
    report: &mut VerificationReport,
) {
    let c2 = block_diag(&spec.subsystems.iter().map(|s| &s.system.c2).collect::<Vec<_>>());
    let c2_hat = block_diag(&spec.subsystems.iter().map(|s| &s.abstraction.c2).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst_decay = f64::NEG_INFINITY;
    let mut worst_lower = f64::NEG_INFINITY;

    for _ in 0..config.samples {
        // per-subsystem error coordinates with log-scaled magnitudes
        let mut x_parts = Vec::new();
        let mut xh_parts = Vec::new();
        let mut uh_parts = Vec::new();
        for pair in &spec.subsystems {
            let xh = ball(&mut rng, pair.abstraction.n(), config.radius);
            let dir = ball(&mut rng, pair.system.n(), 1.0);
            let expo: f64 = rng.random_range(-6.0..1.0);
            let e = dir * 10f64.powf(expo) * (config.radius / 10.0);
            x_parts.push(&pair.certificate.p * &xh + e);
            xh_parts.push(xh);
            uh_parts.push(ball(&mut rng, pair.abstraction.m(), config.radius));
        }
        let concat = |parts: &[Vec64]| {
            let total: usize = parts.iter().map(|v| v.len()).sum();
            Vec64::from_iterator(total, parts.iter().flat_map(|v| v.iter().copied()))
        };
        let x = concat(&x_parts);
        let x_hat = concat(&xh_parts);
        let u_hat = concat(&uh_parts);

        let w_all = &spec.coupling * (&c2 * &x);
        let wh_all = mhat_coupling * (&c2_hat * &x_hat);

        let mut vdot = 0.0;
        let (mut xo, mut ho, mut wo, mut who, mut uo) = (0, 0, 0, 0, 0);
        for (i, pair) in spec.subsystems.iter().enumerate() {
            let (n, nh) = (pair.system.n(), pair.abstraction.n());
            let xi = x.rows(xo, n).into_owned();
            let xhi = x_hat.rows(ho, nh).into_owned();
            let uhi = u_hat.rows(uo, pair.abstraction.m()).into_owned();
            let wi = w_all.rows(wo, pair.system.p()).into_owned();
            let whi = wh_all.rows(who, pair.abstraction.p()).into_owned();
            let ui = match interface(&pair.certificate, &xi, &xhi, &uhi, &pair.system.f, &pair.system.phi) {
                Ok(u) => u,
                Err(e) => {
                    report.push(format!("interface ({e})"), f64::INFINITY, tol.residual_tol, None);
                    return;
                }
            };
            let fx = pair.system.dynamics(&xi, &ui, &wi);
            let fh = pair.abstraction.dynamics(&xhi, &uhi, &whi);
            let e = &xi - &pair.certificate.p * &xhi;
            vdot += mu[i] * 2.0 * (e.transpose() * &pair.certificate.lmi.m_hat * (fx - &pair.certificate.p * fh))[0];
            xo += n;
            ho += nh;
            wo += pair.system.p();
            who += pair.abstraction.p();
            uo += pair.abstraction.m();
        }

        let v = evaluator.value(&x, &x_hat);
        let rhs = -cf.eta_coeff * v + cf.rho_coeff * u_hat.norm_squared();
        worst_decay = worst_decay.max(vdot - rhs);

        let h_err: f64 = {
            let mut total = 0.0;
            let (mut xo, mut ho) = (0, 0);
            for pair in &spec.subsystems {
                let zi = &pair.system.c1 * x.rows(xo, pair.system.n()).into_owned();
                let zhi = &pair.abstraction.c1 * x_hat.rows(ho, pair.abstraction.n()).into_owned();
                total += (zi - zhi).norm_squared();
                xo += pair.system.n();
                ho += pair.abstraction.n();
            }
            total.sqrt()
        };
        worst_lower = worst_lower.max(cf.alpha_coeff * h_err * h_err - v);
    }

    report.push("composite_decay", worst_decay, tol.definiteness_tol, None);
    report.push("composite_output_lower_bound", worst_lower, tol.definiteness_tol, None);
}
