//! Quadratic storage/simulation-function certificates, the interface
//! function, sampled verification of the dissipation inequality, and the
//! trajectory error-bound evaluator.
//!
//! A certificate carries every matrix of the quadratic storage function
//! `V(x, x̂) = (x - Px̂)ᵀ M̂ (x - Px̂)` together with the supply-rate blocks
//! and the interface gains that refine abstract inputs into concrete ones.

use crate::matgeo::{self, is_positive_definite, max_abs, Mat, Tolerance, Vec64};
use crate::report::VerificationReport;
use crate::sysmodel::{ControlSystem, SlopeRestrictedFn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CertError {
    CertificateInvalid { reason: String },
    DimensionMismatch { what: String, expected: usize, got: usize },
    SingularGram { condition: f64 },
}

impl fmt::Display for CertError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CertError::CertificateInvalid { reason } => write!(f, "certificate invalid: {reason}"),
            CertError::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            CertError::SingularGram { condition } => {
                write!(f, "Gram matrix BᵀM̂B ill-conditioned (condition {condition:.3e})")
            }
        }
    }
}

impl std::error::Error for CertError {}

/// Matrices witnessing the dissipation LMI for a single system
/// (the step-1 data of the construction pipeline).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LmiCertificate {
    #[serde(with = "matgeo::mat_serde")]
    pub m_hat: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub k: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub l1: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub z: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub w: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub x11: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub x12: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub x21: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub x22: Mat,
    pub kappa_hat: f64,
    pub pi: f64,
}

impl LmiCertificate {
    /// Internal-factor width `r` (columns of `Z`, rows of `W`).
    pub fn r(&self) -> usize {
        self.z.ncols()
    }

    pub fn validate(&self, sys: &ControlSystem, tol: &Tolerance) -> Result<(), CertError> {
        let n = sys.n();
        let m = sys.m();
        let r = self.r();
        let q2 = sys.q2();
        let dims: [(&str, &Mat, usize, usize); 9] = [
            ("M̂", &self.m_hat, n, n),
            ("K", &self.k, m, n),
            ("L1", &self.l1, m, 1),
            ("Z", &self.z, n, r),
            ("W", &self.w, r, sys.p()),
            ("X11", &self.x11, r, r),
            ("X12", &self.x12, r, q2),
            ("X21", &self.x21, q2, r),
            ("X22", &self.x22, q2, q2),
        ];
        for (what, mat, er, ec) in dims {
            if mat.nrows() != er || mat.ncols() != ec {
                return Err(CertError::DimensionMismatch {
                    what: format!("{what} rows x cols"),
                    expected: er * 10_000 + ec,
                    got: mat.nrows() * 10_000 + mat.ncols(),
                });
            }
        }
        if !is_positive_definite(&self.m_hat, tol).map_err(|e| CertError::CertificateInvalid { reason: e.to_string() })? {
            return Err(CertError::CertificateInvalid { reason: "M̂ is not positive definite".into() });
        }
        if q2 > 0 && r > 0 {
            let dev = max_abs(&(&self.x21 - self.x12.transpose()));
            if dev > tol.residual_tol * (1.0 + max_abs(&self.x12)) {
                return Err(CertError::CertificateInvalid { reason: format!("X21 differs from X12ᵀ by {dev:.3e}") });
            }
        }
        if q2 > 0 {
            let nsd = matgeo::is_negative_semidefinite(&self.x22, tol)
                .map_err(|e| CertError::CertificateInvalid { reason: e.to_string() })?;
            if !nsd {
                return Err(CertError::CertificateInvalid { reason: "X22 is not negative semidefinite".into() });
            }
        }
        if !(self.kappa_hat > 0.0 && self.pi > 0.0 && self.pi < self.kappa_hat) {
            return Err(CertError::CertificateInvalid {
                reason: format!("need 0 < pi < kappa_hat, got pi={}, kappa_hat={}", self.pi, self.kappa_hat),
            });
        }
        Ok(())
    }
}

/// Full storage-function certificate between a system and its abstraction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StorageCertificate {
    #[serde(flatten)]
    pub lmi: LmiCertificate,
    #[serde(with = "matgeo::mat_serde")]
    pub p: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub q: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub l2: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub rtilde: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub w_hat: Mat,
    #[serde(with = "matgeo::mat_serde")]
    pub h: Mat,
}

impl StorageCertificate {
    pub fn n_hat(&self) -> usize {
        self.p.ncols()
    }

    pub fn m_hat_inputs(&self) -> usize {
        self.rtilde.ncols()
    }

    /// `V(x, x̂) = (x - Px̂)ᵀ M̂ (x - Px̂)`.
    pub fn storage_value(&self, x: &Vec64, x_hat: &Vec64) -> f64 {
        let e = x - &self.p * x_hat;
        (e.transpose() * &self.lmi.m_hat * &e)[0]
    }

    pub fn validate(&self, sys: &ControlSystem, abs_sys: &ControlSystem, tol: &Tolerance) -> Result<(), CertError> {
        self.lmi.validate(sys, tol)?;
        let checks: [(&str, usize, usize); 6] = [
            ("P rows", self.p.nrows(), sys.n()),
            ("P cols", self.p.ncols(), abs_sys.n()),
            ("Q rows", self.q.nrows(), sys.m()),
            ("Rtilde rows", self.rtilde.nrows(), sys.m()),
            ("Rtilde cols", self.rtilde.ncols(), abs_sys.m()),
            ("H rows", self.h.nrows(), sys.q2()),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(CertError::DimensionMismatch { what: what.into(), expected, got });
            }
        }
        if self.h.ncols() != abs_sys.q2() {
            return Err(CertError::DimensionMismatch { what: "H cols".into(), expected: abs_sys.q2(), got: self.h.ncols() });
        }
        if self.w_hat.nrows() != self.lmi.r() || self.w_hat.ncols() != abs_sys.p() {
            return Err(CertError::DimensionMismatch {
                what: "Ŵ shape".into(),
                expected: self.lmi.r() * 10_000 + abs_sys.p(),
                got: self.w_hat.nrows() * 10_000 + self.w_hat.ncols(),
            });
        }
        Ok(())
    }
}

/// Closed-form comparison functions for the quadratic certificate class:
/// `α(r) = c_α r²`, `η(s) = κ s`, `ρ_ext(s) = c_ρ s²`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonFunctions {
    pub alpha_coeff: f64,
    pub eta_coeff: f64,
    pub rho_coeff: f64,
}

impl ComparisonFunctions {
    pub fn validate(&self) -> Result<(), CertError> {
        if !(self.alpha_coeff > 0.0 && self.eta_coeff > 0.0 && self.rho_coeff >= 0.0) {
            return Err(CertError::CertificateInvalid {
                reason: format!(
                    "comparison coefficients out of range: c_alpha={}, kappa={}, c_rho={}",
                    self.alpha_coeff, self.eta_coeff, self.rho_coeff
                ),
            });
        }
        Ok(())
    }

    pub fn alpha_inv(&self, s: f64) -> f64 {
        (s / self.alpha_coeff).max(0.0).sqrt()
    }

    pub fn eta_inv(&self, s: f64) -> f64 {
        s / self.eta_coeff
    }
}

/// Extracts `α`, `η`, `ρ_ext` from a certified instance:
/// `c_α = λ_min(M̂)/λ_max(C₁ᵀC₁)`, `κ = κ̂ - π`,
/// `c_ρ = ‖√M̂ (BR̃ - PB̂)‖² / π` (zero when `BR̃ = PB̂`).
pub fn derive_comparison_functions(
    sys: &ControlSystem,
    abs_sys: &ControlSystem,
    cert: &StorageCertificate,
    tol: &Tolerance,
) -> Result<ComparisonFunctions, CertError> {
    cert.validate(sys, abs_sys, tol)?;
    let as_cert = |e: matgeo::MatError| CertError::CertificateInvalid { reason: e.to_string() };
    let c1_gram = sys.c1.transpose() * &sys.c1;
    let lam_max_c = matgeo::max_eig_sym(&c1_gram, tol).map_err(as_cert)?;
    if !(lam_max_c > 0.0) {
        return Err(CertError::CertificateInvalid { reason: "C₁ᵀC₁ has no positive eigenvalue".into() });
    }
    let lam_min_m = matgeo::min_eig_sym(&cert.lmi.m_hat, tol).map_err(as_cert)?;
    let alpha_coeff = lam_min_m / lam_max_c;
    let eta_coeff = cert.lmi.kappa_hat - cert.lmi.pi;

    let mismatch = &sys.b * &cert.rtilde - &cert.p * &abs_sys.b;
    let rho_coeff = if max_abs(&mismatch) <= tol.residual_tol * (1.0 + max_abs(&(&cert.p * &abs_sys.b))) {
        0.0
    } else {
        // ‖√M̂ X‖² = λ_max(Xᵀ M̂ X)
        let gram = mismatch.transpose() * &cert.lmi.m_hat * &mismatch;
        matgeo::max_eig_sym(&gram, tol).map_err(as_cert)?.max(0.0) / cert.lmi.pi
    };

    let cf = ComparisonFunctions { alpha_coeff, eta_coeff, rho_coeff };
    cf.validate()?;
    Ok(cf)
}

/// Linear interface refining an abstract input into a concrete one:
/// `u = K(x - Px̂) + Qx̂ + R̃û + L₁φ(Fx) - L₂φ(FPx̂)`.
pub fn interface(
    cert: &StorageCertificate,
    x: &Vec64,
    x_hat: &Vec64,
    u_hat: &Vec64,
    f: &Mat,
    phi: &SlopeRestrictedFn,
) -> Result<Vec64, CertError> {
    if x.len() != cert.p.nrows() {
        return Err(CertError::DimensionMismatch { what: "x".into(), expected: cert.p.nrows(), got: x.len() });
    }
    if x_hat.len() != cert.p.ncols() {
        return Err(CertError::DimensionMismatch { what: "x̂".into(), expected: cert.p.ncols(), got: x_hat.len() });
    }
    if u_hat.len() != cert.rtilde.ncols() {
        return Err(CertError::DimensionMismatch { what: "û".into(), expected: cert.rtilde.ncols(), got: u_hat.len() });
    }
    let e = x - &cert.p * x_hat;
    let mut u = &cert.lmi.k * e + &cert.q * x_hat + &cert.rtilde * u_hat;
    if !phi.is_zero() {
        let fx = (f * x)[0];
        let fpx = (f * (&cert.p * x_hat))[0];
        u += &cert.lmi.l1 * phi.eval(fx) - &cert.l2 * phi.eval(fpx);
    }
    Ok(u)
}

/// `R̃ = (BᵀM̂B)⁻¹ BᵀM̂PB̂`, the choice minimizing `ρ_ext`.
pub fn compute_rtilde(m_hat: &Mat, p: &Mat, b: &Mat, b_hat: &Mat, tol: &Tolerance) -> Result<Mat, CertError> {
    let gram = b.transpose() * m_hat * b;
    let sv = matgeo::singular_values(&gram);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smax <= 0.0 || smin <= 0.0 || smax / smin > 1e12 {
        return Err(CertError::SingularGram { condition: if smin > 0.0 { smax / smin } else { f64::INFINITY } });
    }
    let rhs = b.transpose() * m_hat * p * b_hat;
    let inv = matgeo::pseudoinverse(&gram, tol);
    Ok(inv * rhs)
}

/// Sampling controls for [`verify_dissipation_inequality`].
///
/// Sample tuples are drawn in `(x - Px̂, x̂, û, w, ŵ)` coordinates inside the
/// ball of radius 10; the error coordinate gets a log-uniform magnitude so
/// violations caused by small certificate perturbations are found.
#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub samples: usize,
    pub seed: u64,
    pub radius: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { samples: 10_000, seed: 0, radius: 10.0 }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec64 {
    if dim == 0 {
        return Vec64::zeros(0);
    }
    loop {
        let v = Vec64::from_fn(dim, |_, _| {
            // Box-Muller standard normal
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec64 {
    if dim == 0 {
        return Vec64::zeros(0);
    }
    let dir = unit_direction(rng, dim);
    let u: f64 = rng.random_range(0.0..1.0f64);
    dir * (radius * u.powf(1.0 / dim as f64))
}

fn log_scaled_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec64 {
    if dim == 0 {
        return Vec64::zeros(0);
    }
    let dir = unit_direction(rng, dim);
    let exponent: f64 = rng.random_range(-6.0..1.0);
    dir * (radius * 10f64.powf(exponent) / 10.0)
}

/// Numerically checks both storage-function inequalities at pseudo-random
/// state/input tuples, via the interface-realized concrete input.
///
/// Failures are report entries, never errors; the worst sample point is
/// recorded as the witness.
pub fn verify_dissipation_inequality(
    sys: &ControlSystem,
    abs_sys: &ControlSystem,
    cert: &StorageCertificate,
    config: &SampleConfig,
    tol: &Tolerance,
) -> VerificationReport {
    let mut report = VerificationReport::new();
    let cf = match derive_comparison_functions(sys, abs_sys, cert, tol) {
        Ok(cf) => cf,
        Err(e) => {
            report.push(format!("comparison_functions ({e})"), f64::INFINITY, tol.residual_tol, None);
            return report;
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst_decay = f64::NEG_INFINITY;
    let mut worst_decay_witness = None;
    let mut worst_lower = f64::NEG_INFINITY;
    let mut worst_lower_witness = None;

    for _ in 0..config.samples {
        let x_hat = ball_sample(&mut rng, abs_sys.n(), config.radius);
        let e = log_scaled_sample(&mut rng, sys.n(), config.radius);
        let x = &cert.p * &x_hat + &e;
        let u_hat = if rng.random_range(0..4) == 0 {
            Vec64::zeros(abs_sys.m())
        } else {
            ball_sample(&mut rng, abs_sys.m(), config.radius)
        };
        let w = if rng.random_range(0..4) == 0 {
            Vec64::zeros(sys.p())
        } else {
            ball_sample(&mut rng, sys.p(), config.radius)
        };
        let w_hat = if rng.random_range(0..4) == 0 {
            Vec64::zeros(abs_sys.p())
        } else {
            ball_sample(&mut rng, abs_sys.p(), config.radius)
        };

        let u = match interface(cert, &x, &x_hat, &u_hat, &sys.f, &sys.phi) {
            Ok(u) => u,
            Err(e) => {
                report.push(format!("interface ({e})"), f64::INFINITY, tol.residual_tol, None);
                return report;
            }
        };

        let fx = sys.dynamics(&x, &u, &w);
        let fhat = abs_sys.dynamics(&x_hat, &u_hat, &w_hat);
        let v = cert.storage_value(&x, &x_hat);
        let vdot = 2.0 * (e.transpose() * &cert.lmi.m_hat * (&fx - &cert.p * &fhat))[0];

        let s1 = &cert.lmi.w * &w - &cert.w_hat * &w_hat;
        let s2 = &sys.c2 * &x - &cert.h * (&abs_sys.c2 * &x_hat);
        let supply = (s1.transpose() * &cert.lmi.x11 * &s1)[0]
            + 2.0 * (s1.transpose() * &cert.lmi.x12 * &s2)[0]
            + (s2.transpose() * &cert.lmi.x22 * &s2)[0];

        let rhs = -cf.eta_coeff * v + cf.rho_coeff * u_hat.norm_squared() + supply;
        let decay_margin = vdot - rhs;
        if decay_margin > worst_decay {
            worst_decay = decay_margin;
            worst_decay_witness = Some(witness(&x, &x_hat, &u_hat, &w, &w_hat));
        }

        let out_err = (&sys.c1 * &x - &abs_sys.c1 * &x_hat).norm();
        let lower_margin = cf.alpha_coeff * out_err * out_err - v;
        if lower_margin > worst_lower {
            worst_lower = lower_margin;
            worst_lower_witness = Some(witness(&x, &x_hat, &u_hat, &w, &w_hat));
        }
    }

    report.push("dissipation_inequality", worst_decay, tol.definiteness_tol, worst_decay_witness);
    report.push("output_lower_bound", worst_lower, tol.definiteness_tol, worst_lower_witness);
    report
}

fn witness(x: &Vec64, x_hat: &Vec64, u_hat: &Vec64, w: &Vec64, w_hat: &Vec64) -> Vec<f64> {
    x.iter()
        .chain(x_hat.iter())
        .chain(u_hat.iter())
        .chain(w.iter())
        .chain(w_hat.iter())
        .copied()
        .collect()
}

/// Trajectory error bound at time `t`:
/// `α⁻¹(c·ϑ(V₀,t)) + α⁻¹(c·η⁻¹(c·ρ_ext(û_sup)))` with `ϑ(s,t) = s·e^{-κt}`
/// and `c = 2`, or `c = 1` when `use_half` exploits subadditivity of the
/// closed-form inverses.
pub fn error_bound(cf: &ComparisonFunctions, v0: f64, uhat_sup: f64, t: f64, use_half: bool) -> f64 {
    assert!(v0 >= 0.0 && uhat_sup >= 0.0 && t >= 0.0);
    let c = if use_half { 1.0 } else { 2.0 };
    let theta = v0 * (-cf.eta_coeff * t).exp();
    let rho = cf.rho_coeff * uhat_sup * uhat_sup;
    cf.alpha_inv(c * theta) + cf.alpha_inv(c * cf.eta_inv(c * rho))
}

/// Safe-set inflation radius: the supremum of the error bound over time,
/// attained at `t = 0`.
pub fn safe_set_inflation(cf: &ComparisonFunctions, v0: f64, uhat_sup: f64, use_half: bool) -> f64 {
    error_bound(cf, v0, uhat_sup, 0.0, use_half)
}
