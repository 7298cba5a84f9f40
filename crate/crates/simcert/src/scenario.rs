//! Declarative scenario files: JSON descriptions of networks, abstractions,
//! and simulation settings consumed by the CLI. Matrices are nested
//! row-major arrays; unknown keys are rejected.

use crate::matgeo::Tolerance;
use crate::sysmodel::{FnKind, SignalSpec};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum ScenarioError {
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Parse(e) => write!(f, "scenario parse error: {e}"),
            ScenarioError::Invalid(e) => write!(f, "invalid scenario: {e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

/// Graph or explicit coupling selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CouplingDescriptor {
    Complete { n: usize },
    Path { n: usize },
    Cycle { n: usize },
    Explicit { entries: Vec<Vec<f64>> },
}

impl CouplingDescriptor {
    pub fn node_count(&self) -> usize {
        match self {
            CouplingDescriptor::Complete { n } | CouplingDescriptor::Path { n } | CouplingDescriptor::Cycle { n } => *n,
            CouplingDescriptor::Explicit { entries } => entries.len(),
        }
    }
}

/// Scalar nonlinearity description; omitted slope bounds are derived from
/// the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiSpec {
    #[serde(flatten)]
    pub kind: FnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_upper: Option<f64>,
}

/// Explicit system definition for the general (non-aggregation) route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSystem {
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiSpec>,
    /// Fixed decay constant for the feasibility solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_hat: Option<f64>,
}

/// Request to synthesize an abstraction of a named system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionRequest {
    pub system: String,
    /// Injective projection, `n x n̂` row-major.
    pub p: Vec<Vec<f64>>,
    #[serde(default)]
    pub behavior_preserving: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_hat: Option<Vec<Vec<f64>>>,
}

/// Initial-condition policy for the concrete network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum X0Policy {
    /// `x₀ = Px̂₀`, so the storage value starts at zero.
    #[default]
    Matched,
    /// `x₀ = Px̂₀ + δ` with `V(x₀, x̂₀) = v0`.
    Perturbed { v0: f64 },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub t_final: f64,
    pub dt: f64,
    #[serde(default)]
    pub x0: X0Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xhat0: Option<Vec<f64>>,
    /// Stacked abstract input; defaults to a bounded piecewise-constant
    /// schedule alternating between the two target regions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uhat: Option<SignalSpec>,
    /// Per-channel amplitude cap for the default schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uhat_bound: Option<f64>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec { t_final: 10.0, dt: 1e-3, x0: X0Policy::Matched, xhat0: None, uhat: None, uhat_bound: None }
    }
}

/// The abstract-input amplitude cap used when a scenario does not set one.
pub const DEFAULT_UHAT_BOUND: f64 = 14.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub coupling: CouplingDescriptor,
    /// Aggregation block sizes; must sum to the node count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<usize>>,
    /// Interface gain for the aggregation certificates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// External-output rows per block, row-major; defaults to one selector
    /// row per block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1_blocks: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systems: Option<Vec<NamedSystem>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstractions: Option<Vec<AbstractionRequest>>,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn tolerances(&self) -> Tolerance {
        self.tolerances.unwrap_or_default()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.coupling.node_count();
        if n < 2 && self.systems.is_none() {
            return Err(ScenarioError::Invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        if let Some(partition) = &self.partition {
            let total: usize = partition.iter().sum();
            if total != n {
                return Err(ScenarioError::Invalid(format!("partition sums to {total}, expected {n}")));
            }
            if partition.iter().any(|&b| b == 0) {
                return Err(ScenarioError::Invalid("partition blocks must be nonempty".into()));
            }
        }
        if let Some(lambda) = self.lambda {
            if !(lambda > 0.0) {
                return Err(ScenarioError::Invalid(format!("lambda must be positive, got {lambda}")));
            }
        }
        if !(self.simulation.dt > 0.0 && self.simulation.t_final >= self.simulation.dt) {
            return Err(ScenarioError::Invalid("need 0 < dt <= t_final".into()));
        }
        if self.partition.is_none() && self.systems.is_none() {
            return Err(ScenarioError::Invalid("scenario needs either a partition (aggregation route) or explicit systems".into()));
        }
        Ok(())
    }

    /// The canonical Laplacian aggregation scenario.
    pub fn laplacian_case_study(
        n: usize,
        partition: Vec<usize>,
        lambda: f64,
        t_final: f64,
        dt: f64,
        seed: u64,
    ) -> Scenario {
        Scenario {
            name: Some(format!("complete-graph aggregation, n = {n}")),
            coupling: CouplingDescriptor::Complete { n },
            partition: Some(partition),
            lambda: Some(lambda),
            c1_blocks: None,
            systems: None,
            abstractions: None,
            simulation: SimulationSpec { t_final, dt, ..Default::default() },
            tolerances: None,
            seed: Some(seed),
        }
    }
}
