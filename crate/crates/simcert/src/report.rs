//! Structured pass/fail evidence for certificate checks.

use serde::{Deserialize, Serialize};

/// One verified relation: the achieved margin, the tolerance it was held to,
/// and (for sampled checks) the worst-case sample point.
///
/// A check passes when `margin <= tol`. Residual checks use
/// `tol = residual_tol`, semidefiniteness checks use the signed largest
/// eigenvalue against `definiteness_tol`, and strict checks use a negative
/// tolerance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    pub margin: f64,
    pub tol: f64,
    pub witness: Option<Vec<f64>>,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.margin <= self.tol
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct VerificationReport {
    pub passed: bool,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn new() -> Self {
        VerificationReport { passed: true, checks: Vec::new() }
    }

    pub fn push(&mut self, check: impl Into<String>, margin: f64, tol: f64, witness: Option<Vec<f64>>) {
        let record = CheckRecord { check: check.into(), margin, tol, witness };
        self.passed = self.passed && record.passed();
        self.checks.push(record);
    }

    pub fn find(&self, check: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.check == check)
    }

    /// Largest signed violation over all checks (negative when everything passes).
    pub fn worst_violation(&self) -> f64 {
        self.checks.iter().map(|c| c.margin - c.tol).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
