//! The Laplacian-network case study: aggregation subsystems over a graph
//! coupling, their scalar abstractions and closed-form certificates,
//! network certification, co-simulation with error and bound traces, and
//! the small-gain comparison.

use crate::compose::{
    self, compose_network, solve_abstract_coupling, CertifiedPair, ComposeError, CompositionCertificate,
    CompositeSimulationFunction, InterconnectionSpec,
};
use crate::matgeo::{self, block_diag, max_eig_sym, ones_col, Mat, Tolerance, Vec64};
use crate::plot;
use crate::report::VerificationReport;
use crate::scenario::{
    CouplingDescriptor, NamedSystem, PhiSpec, Scenario, ScenarioError, X0Policy,
    DEFAULT_UHAT_BOUND,
};
use crate::storage::{error_bound, interface, CertError, LmiCertificate, SampleConfig, StorageCertificate};
use crate::synthesis::{self, synthesize_abstraction, AbstractionResult, PipelineOptions, SynthesisError};
use crate::sysmodel::{rk4, ControlSystem, FnKind, SignalSpec, SlopeRestrictedFn, SystemError, Trajectory};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug)]
pub enum CaseStudyError {
    BadDescriptor(String),
    Certification { condition: String, detail: String },
    Scenario(ScenarioError),
    Compose(ComposeError),
    Synthesis(SynthesisError),
    System(SystemError),
    Certificate(CertError),
    Io(std::io::Error),
}

impl fmt::Display for CaseStudyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseStudyError::BadDescriptor(d) => write!(f, "bad coupling descriptor: {d}"),
            CaseStudyError::Certification { condition, detail } => {
                write!(f, "certification failed at {condition}: {detail}")
            }
            CaseStudyError::Scenario(e) => write!(f, "{e}"),
            CaseStudyError::Compose(e) => write!(f, "{e}"),
            CaseStudyError::Synthesis(e) => write!(f, "{e}"),
            CaseStudyError::System(e) => write!(f, "{e}"),
            CaseStudyError::Certificate(e) => write!(f, "{e}"),
            CaseStudyError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CaseStudyError {}

impl From<ScenarioError> for CaseStudyError {
    fn from(e: ScenarioError) -> Self {
        CaseStudyError::Scenario(e)
    }
}
impl From<ComposeError> for CaseStudyError {
    fn from(e: ComposeError) -> Self {
        CaseStudyError::Compose(e)
    }
}
impl From<SynthesisError> for CaseStudyError {
    fn from(e: SynthesisError) -> Self {
        CaseStudyError::Synthesis(e)
    }
}
impl From<SystemError> for CaseStudyError {
    fn from(e: SystemError) -> Self {
        CaseStudyError::System(e)
    }
}
impl From<CertError> for CaseStudyError {
    fn from(e: CertError) -> Self {
        CaseStudyError::Certificate(e)
    }
}
impl From<std::io::Error> for CaseStudyError {
    fn from(e: std::io::Error) -> Self {
        CaseStudyError::Io(e)
    }
}

/// Builds the graph Laplacian named by the descriptor: symmetric, PSD,
/// zero row sums. Explicit entries are validated against those properties.
pub fn build_laplacian(descriptor: &CouplingDescriptor) -> Result<Mat, CaseStudyError> {
    let n = descriptor.node_count();
    if n < 2 {
        return Err(CaseStudyError::BadDescriptor(format!("need at least 2 nodes, got {n}")));
    }
    let l = match descriptor {
        CouplingDescriptor::Complete { n } => {
            Mat::from_fn(*n, *n, |i, j| if i == j { *n as f64 - 1.0 } else { -1.0 })
        }
        CouplingDescriptor::Path { n } => {
            let mut l = Mat::zeros(*n, *n);
            for i in 0..n - 1 {
                l[(i, i)] += 1.0;
                l[(i + 1, i + 1)] += 1.0;
                l[(i, i + 1)] = -1.0;
                l[(i + 1, i)] = -1.0;
            }
            l
        }
        CouplingDescriptor::Cycle { n } => {
            if *n < 3 {
                return Err(CaseStudyError::BadDescriptor("a cycle needs at least 3 nodes".into()));
            }
            let mut l = Mat::zeros(*n, *n);
            for i in 0..*n {
                let j = (i + 1) % n;
                l[(i, i)] += 1.0;
                l[(j, j)] += 1.0;
                l[(i, j)] = -1.0;
                l[(j, i)] = -1.0;
            }
            l
        }
        CouplingDescriptor::Explicit { entries } => {
            let l = matgeo::mat_from_rows(entries)
                .map_err(|e| CaseStudyError::BadDescriptor(e.to_string()))?;
            if l.nrows() != l.ncols() {
                return Err(CaseStudyError::BadDescriptor("explicit Laplacian must be square".into()));
            }
            let asym = matgeo::max_abs(&(&l - l.transpose()));
            if asym > 1e-9 {
                return Err(CaseStudyError::BadDescriptor(format!("not symmetric (deviation {asym:.3e})")));
            }
            for i in 0..l.nrows() {
                let row_sum: f64 = l.row(i).sum();
                if row_sum.abs() > 1e-9 {
                    return Err(CaseStudyError::BadDescriptor(format!("row {i} sums to {row_sum:.3e}")));
                }
            }
            let tol = Tolerance::default();
            let min_eig = -max_eig_sym(&(-l.clone()), &tol).map_err(|e| CaseStudyError::BadDescriptor(e.to_string()))?;
            if min_eig < -1e-9 {
                return Err(CaseStudyError::BadDescriptor(format!("not positive semidefinite (min eig {min_eig:.3e})")));
            }
            l
        }
    };
    Ok(l)
}

/// Default external-output rows: the classical 3-block selector pattern when
/// the partition is 3+3+3, otherwise the first coordinate of each block.
pub fn default_c1_blocks(partition: &[usize]) -> Vec<Mat> {
    let selector_pattern = partition.len() == 3 && partition.iter().all(|&b| b == 3);
    partition
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let pick = if selector_pattern { i.min(size - 1) } else { 0 };
            let mut row = Mat::zeros(1, size);
            row[(0, pick)] = 1.0;
            row
        })
        .collect()
}

/// Aggregation subsystem: `ẋᵢ = ωᵢ + υᵢ`, `ζ₁ᵢ = C₁ᵢxᵢ`, `ζ₂ᵢ = xᵢ`.
pub fn integrator_block(n: usize, c1: Mat) -> Result<ControlSystem, SystemError> {
    ControlSystem::linear(Mat::zeros(n, n), Mat::identity(n, n), c1, Mat::identity(n, n), Mat::identity(n, n))
}

/// Scalar aggregate of an integrator block: `x̂̇ᵢ = ŵᵢ + ûᵢ`,
/// `ζ̂₁ᵢ = C₁ᵢ1 x̂ᵢ`, `ζ̂₂ᵢ = x̂ᵢ`.
pub fn aggregation_abstraction(c1_block: &Mat) -> Result<ControlSystem, SystemError> {
    let c1_hat = c1_block * ones_col(c1_block.ncols());
    ControlSystem::linear(Mat::zeros(1, 1), Mat::identity(1, 1), c1_hat, Mat::identity(1, 1), Mat::identity(1, 1))
}

/// Closed-form aggregation certificate for one block of size `n`:
/// `M̂ = I`, `K = -λI`, `κ̂ = 2λ`, `π = λ`, `Z = W = I`, `X¹² = X²¹ = I`,
/// `P = R̃ = Ŵ = H = 1ₙ`.
pub fn aggregation_certificate(n: usize, lambda: f64) -> StorageCertificate {
    StorageCertificate {
        lmi: LmiCertificate {
            m_hat: Mat::identity(n, n),
            k: -Mat::identity(n, n) * lambda,
            l1: Mat::zeros(n, 1),
            z: Mat::identity(n, n),
            w: Mat::identity(n, n),
            x11: Mat::zeros(n, n),
            x12: Mat::identity(n, n),
            x21: Mat::identity(n, n),
            x22: Mat::zeros(n, n),
            kappa_hat: 2.0 * lambda,
            pi: lambda,
        },
        p: ones_col(n),
        q: Mat::zeros(n, 1),
        l2: Mat::zeros(n, 1),
        rtilde: ones_col(n),
        w_hat: ones_col(n),
        h: ones_col(n),
    }
}

/// Partitions the Laplacian network into certified integrator blocks with
/// the coupling `M = -L`.
pub fn aggregation_network(
    l: &Mat,
    partition: &[usize],
    lambda: f64,
    c1_blocks: Option<Vec<Mat>>,
) -> Result<InterconnectionSpec, CaseStudyError> {
    let n = l.nrows();
    let total: usize = partition.iter().sum();
    if total != n {
        return Err(CaseStudyError::BadDescriptor(format!("partition sums to {total}, expected {n}")));
    }
    if !(lambda > 0.0) {
        return Err(CaseStudyError::BadDescriptor(format!("lambda must be positive, got {lambda}")));
    }
    let blocks = c1_blocks.unwrap_or_else(|| default_c1_blocks(partition));
    if blocks.len() != partition.len() {
        return Err(CaseStudyError::BadDescriptor("one C₁ block per partition block required".into()));
    }
    let mut pairs = Vec::with_capacity(partition.len());
    for (c1, &size) in blocks.into_iter().zip(partition) {
        if c1.ncols() != size {
            return Err(CaseStudyError::BadDescriptor(format!(
                "C₁ block has {} columns, partition block has {size}",
                c1.ncols()
            )));
        }
        pairs.push(CertifiedPair {
            abstraction: aggregation_abstraction(&c1)?,
            system: integrator_block(size, c1)?,
            certificate: aggregation_certificate(size, lambda),
        });
    }
    Ok(InterconnectionSpec::new(pairs, -l)?)
}

/// The dissipativity margin against the complete-graph small-gain figure.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SmallGainRecord {
    pub n: usize,
    pub lambda: f64,
    /// Largest eigenvalue of `-L - Lᵀ`; nonpositive for every undirected graph.
    pub dissipativity_margin: f64,
    /// `(n-1)/(n-1+λ)`: approaches 1 as the graph grows.
    pub small_gain_value: f64,
    /// `ρ(L)`, numerically confirmed to equal `n` for the complete graph.
    pub spectral_radius: f64,
}

/// Evaluates the scale-free comparison for the complete graph on `n` nodes.
pub fn small_gain_compare(n: usize, lambda: f64) -> SmallGainRecord {
    assert!(n >= 2 && lambda > 0.0);
    let l = Mat::from_fn(n, n, |i, j| if i == j { n as f64 - 1.0 } else { -1.0 });
    let tol = Tolerance::default();
    let margin = max_eig_sym(&(-(&l + l.transpose())), &tol).expect("symmetric");
    let spectral_radius = {
        let eig = nalgebra::SymmetricEigen::new(l);
        eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max)
    };
    SmallGainRecord {
        n,
        lambda,
        dissipativity_margin: margin,
        small_gain_value: (n as f64 - 1.0) / (n as f64 - 1.0 + lambda),
        spectral_radius,
    }
}

/// Joint simulation record of the concrete network and its abstraction.
#[derive(Debug, Clone)]
pub struct CoSimulation {
    pub concrete: Trajectory,
    pub abstracted: Trajectory,
    /// `‖ζ(t) - ζ̂(t)‖` per grid point.
    pub error_trace: Vec<f64>,
}

/// Co-simulates the concrete and abstract networks with the concrete input
/// refined through the per-subsystem interfaces at every integrator stage.
pub fn co_simulate(
    spec: &InterconnectionSpec,
    mhat: &Mat,
    uhat: &SignalSpec,
    x0: &Vec64,
    xhat0: &Vec64,
    t_final: f64,
    dt: f64,
) -> Result<CoSimulation, CaseStudyError> {
    let n: usize = spec.subsystems.iter().map(|s| s.system.n()).sum();
    let n_hat: usize = spec.subsystems.iter().map(|s| s.abstraction.n()).sum();
    let m_hat_inputs: usize = spec.subsystems.iter().map(|s| s.abstraction.m()).sum();
    if uhat.dim() != m_hat_inputs {
        return Err(CaseStudyError::System(SystemError::DimensionMismatch {
            what: "abstract input signal".into(),
            expected: m_hat_inputs,
            got: uhat.dim(),
        }));
    }
    let c2 = block_diag(&spec.subsystems.iter().map(|s| &s.system.c2).collect::<Vec<_>>());
    let c2_hat = block_diag(&spec.subsystems.iter().map(|s| &s.abstraction.c2).collect::<Vec<_>>());
    let c1 = block_diag(&spec.subsystems.iter().map(|s| &s.system.c1).collect::<Vec<_>>());
    let c1_hat = block_diag(&spec.subsystems.iter().map(|s| &s.abstraction.c1).collect::<Vec<_>>());

    // stacked derivative with internal inputs substituted via M and M̂ and
    // concrete inputs refined through the interfaces
    let stacked_interface = |x: &Vec64, xh: &Vec64, uh: &Vec64| -> Result<Vec64, CertError> {
        let mut u = Vec64::zeros(spec.subsystems.iter().map(|s| s.system.m()).sum());
        let (mut xo, mut ho, mut uo, mut co) = (0, 0, 0, 0);
        for pair in &spec.subsystems {
            let xi = x.rows(xo, pair.system.n()).into_owned();
            let xhi = xh.rows(ho, pair.abstraction.n()).into_owned();
            let uhi = uh.rows(uo, pair.abstraction.m()).into_owned();
            let ui = interface(&pair.certificate, &xi, &xhi, &uhi, &pair.system.f, &pair.system.phi)?;
            u.rows_mut(co, pair.system.m()).copy_from(&ui);
            xo += pair.system.n();
            ho += pair.abstraction.n();
            uo += pair.abstraction.m();
            co += pair.system.m();
        }
        Ok(u)
    };

    let steps = (t_final / dt).round() as usize;
    let joint0 = Vec64::from_iterator(n + n_hat, x0.iter().chain(xhat0.iter()).copied());
    let mut failure: Option<CertError> = None;
    let states = rk4(&joint0, 0.0, dt, steps, |t, xs| {
        let x = xs.rows(0, n).into_owned();
        let xh = xs.rows(n, n_hat).into_owned();
        let uh = uhat.eval(t);
        let u = match stacked_interface(&x, &xh, &uh) {
            Ok(u) => u,
            Err(e) => {
                failure = Some(e);
                return Vec64::zeros(n + n_hat);
            }
        };
        let w_all = &spec.coupling * (&c2 * &x);
        let wh_all = mhat * (&c2_hat * &xh);
        let mut dx = Vec64::zeros(n + n_hat);
        let (mut xo, mut ho, mut wo, mut who, mut uo, mut uho) = (0, 0, 0, 0, 0, 0);
        for pair in &spec.subsystems {
            let xi = x.rows(xo, pair.system.n()).into_owned();
            let xhi = xh.rows(ho, pair.abstraction.n()).into_owned();
            let ui = u.rows(uo, pair.system.m()).into_owned();
            let uhi = uh.rows(uho, pair.abstraction.m()).into_owned();
            let wi = w_all.rows(wo, pair.system.p()).into_owned();
            let whi = wh_all.rows(who, pair.abstraction.p()).into_owned();
            dx.rows_mut(xo, pair.system.n()).copy_from(&pair.system.dynamics(&xi, &ui, &wi));
            dx.rows_mut(n + ho, pair.abstraction.n())
                .copy_from(&pair.abstraction.dynamics(&xhi, &uhi, &whi));
            xo += pair.system.n();
            ho += pair.abstraction.n();
            wo += pair.system.p();
            who += pair.abstraction.p();
            uo += pair.system.m();
            uho += pair.abstraction.m();
        }
        dx
    })?;
    if let Some(e) = failure {
        return Err(CaseStudyError::Certificate(e));
    }

    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut concrete_states = Vec::with_capacity(times.len());
    let mut abstract_states = Vec::with_capacity(times.len());
    let mut concrete_inputs = Vec::with_capacity(times.len());
    let mut abstract_inputs = Vec::with_capacity(times.len());
    let mut error_trace = Vec::with_capacity(times.len());
    for (k, xs) in states.iter().enumerate() {
        let x = xs.rows(0, n).into_owned();
        let xh = xs.rows(n, n_hat).into_owned();
        let uh = uhat.eval(times[k]);
        let u = stacked_interface(&x, &xh, &uh).map_err(CaseStudyError::Certificate)?;
        error_trace.push((&c1 * &x - &c1_hat * &xh).norm());
        concrete_states.push(x);
        abstract_states.push(xh);
        concrete_inputs.push(u);
        abstract_inputs.push(uh);
    }

    let concrete = Trajectory {
        internal_input: concrete_states.iter().map(|x| &spec.coupling * (&c2 * x)).collect(),
        external_output: concrete_states.iter().map(|x| &c1 * x).collect(),
        internal_output: concrete_states.iter().map(|x| &c2 * x).collect(),
        times: times.clone(),
        states: concrete_states,
        external_input: concrete_inputs,
    };
    let abstracted = Trajectory {
        internal_input: abstract_states.iter().map(|x| mhat * (&c2_hat * x)).collect(),
        external_output: abstract_states.iter().map(|x| &c1_hat * x).collect(),
        internal_output: abstract_states.iter().map(|x| &c2_hat * x).collect(),
        times,
        states: abstract_states,
        external_input: abstract_inputs,
    };
    Ok(CoSimulation { concrete, abstracted, error_trace })
}

/// Bounded piecewise-constant schedule standing in for an externally
/// synthesized abstract controller: alternating pushes within the amplitude
/// cap, steering between the two target regions.
pub fn default_uhat_schedule(dim: usize, bound: f64, t_final: f64) -> SignalSpec {
    let level = |k: usize, j: usize| {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sign * 0.6 * bound * (1.0 - 0.3 * j as f64 / dim.max(1) as f64)
    };
    let schedule = (0..4)
        .map(|k| (t_final * k as f64 / 4.0, (0..dim).map(|j| level(k, j)).collect()))
        .collect();
    SignalSpec::PiecewiseConstant { schedule }
}

/// Everything produced by one case-study run.
#[derive(Debug)]
pub struct RunArtifacts {
    pub name: String,
    pub certification: Vec<VerificationReport>,
    pub composite_verification: VerificationReport,
    pub composition: CompositionCertificate,
    pub cosim: CoSimulation,
    pub bound_trace: Vec<f64>,
    pub v0: f64,
    pub uhat_sup: f64,
    pub small_gain: SmallGainRecord,
    pub plot_metadata: Option<serde_json::Value>,
}

impl RunArtifacts {
    pub fn max_error(&self) -> f64 {
        self.cosim.error_trace.iter().copied().fold(0.0, f64::max)
    }

    /// Grid points where the measured error exceeds the bound beyond a
    /// 1e-9 numerical allowance (the allowance covers the exactly-zero
    /// bound of matched initializations).
    pub fn bound_violations(&self) -> usize {
        self.cosim
            .error_trace
            .iter()
            .zip(&self.bound_trace)
            .filter(|(err, bound)| **err > **bound + 1e-9)
            .count()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "margins": {
                "subsystem_dissipation": self.certification.iter().map(|r| r.worst_violation()).collect::<Vec<_>>(),
                "coupling_dissipativity": self.composition.dissipativity_margin,
                "composite_verification": self.composite_verification.worst_violation(),
            },
            "residuals": {
                "coupling_match": self.composition.coupling_match_residual,
            },
            "comparison_functions": self.composition.composite_cf,
            "v0": self.v0,
            "uhat_sup": self.uhat_sup,
            "max_error": self.max_error(),
            "bound_violations": self.bound_violations(),
            "small_gain": self.small_gain,
            "plot_metadata": self.plot_metadata,
        })
    }

    /// Writes `error_trace.csv`, `summary.json`, `trajectories/*.csv` and
    /// `plot.html` under `dir`.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("trajectories"))?;
        let mut trace = std::fs::File::create(dir.join("error_trace.csv"))?;
        writeln!(trace, "t,err,bound")?;
        for ((t, err), bound) in self.cosim.concrete.times.iter().zip(&self.cosim.error_trace).zip(&self.bound_trace) {
            writeln!(trace, "{t:.14e},{err:.14e},{bound:.14e}")?;
        }
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary_json()).expect("summary serializes"),
        )?;
        std::fs::write(dir.join("trajectories").join("concrete.csv"), self.cosim.concrete.to_csv())?;
        std::fs::write(dir.join("trajectories").join("abstract.csv"), self.cosim.abstracted.to_csv())?;
        let html = plot::line_plot_html(
            &self.name,
            "t [s]",
            "output error",
            &self.cosim.concrete.times,
            &[
                ("measured error", &self.cosim.error_trace, "#c0392b"),
                ("certified bound", &self.bound_trace, "#2c3e50"),
            ],
        );
        std::fs::write(dir.join("plot.html"), html)
    }
}

/// Network assembled from a scenario, plus synthesis byproducts on the
/// explicit route.
pub struct NetworkBundle {
    pub spec: InterconnectionSpec,
    pub laplacian: Option<Mat>,
    pub abstraction_results: Vec<(String, AbstractionResult)>,
}

fn phi_from_spec(spec: &PhiSpec) -> Result<SlopeRestrictedFn, CaseStudyError> {
    let base = match &spec.kind {
        FnKind::Zero => SlopeRestrictedFn::zero(),
        FnKind::Linear { gain } => SlopeRestrictedFn::linear(*gain),
        FnKind::Saturation { level } => SlopeRestrictedFn::saturation(*level)?,
        FnKind::TanhLike { scale } => SlopeRestrictedFn::tanh_like(*scale)?,
        FnKind::Tabulated { breakpoints } => SlopeRestrictedFn::tabulated(breakpoints.clone())?,
    };
    match (spec.slope_lower, spec.slope_upper) {
        (None, None) => Ok(base),
        (lo, hi) => Ok(base
            .clone()
            .with_declared_slopes(lo.unwrap_or(base.slope_lower), hi.unwrap_or(base.slope_upper))?),
    }
}

fn system_from_named(named: &NamedSystem) -> Result<ControlSystem, CaseStudyError> {
    let bad = |e: matgeo::MatError| CaseStudyError::BadDescriptor(e.to_string());
    let a = matgeo::mat_from_rows(&named.a).map_err(bad)?;
    let n = a.nrows();
    let b = matgeo::mat_from_rows(&named.b).map_err(bad)?;
    let c1 = matgeo::mat_from_rows(&named.c1).map_err(bad)?;
    let c2 = match &named.c2 {
        Some(rows) => matgeo::mat_from_rows(rows).map_err(bad)?,
        None => Mat::identity(n, n),
    };
    let d = match &named.d {
        Some(rows) => matgeo::mat_from_rows(rows).map_err(bad)?,
        None => Mat::zeros(n, 0),
    };
    let mut sys = ControlSystem::linear(a, b, c1, c2, d)?;
    if let (Some(e_rows), Some(f_rows), Some(phi)) = (&named.e, &named.f, &named.phi) {
        let e = matgeo::mat_from_rows(e_rows).map_err(bad)?;
        let f = matgeo::mat_from_rows(f_rows).map_err(bad)?;
        sys = sys.with_nonlinearity(e, f, phi_from_spec(phi)?)?;
    }
    Ok(sys)
}

/// Builds the certified network a scenario describes: the aggregation route
/// (partition + lambda over a graph Laplacian, coupling `M = -L`) or the
/// explicit route (named systems, synthesized abstractions, coupling taken
/// verbatim from explicit entries).
pub fn build_network(scenario: &Scenario) -> Result<NetworkBundle, CaseStudyError> {
    scenario.validate()?;
    if let Some(systems) = &scenario.systems {
        let requests = scenario
            .abstractions
            .as_ref()
            .ok_or_else(|| CaseStudyError::BadDescriptor("explicit systems need abstraction requests".into()))?;
        let mut pairs = Vec::new();
        let mut results = Vec::new();
        for request in requests {
            let named = systems
                .iter()
                .find(|s| s.name == request.system)
                .ok_or_else(|| CaseStudyError::BadDescriptor(format!("unknown system '{}'", request.system)))?;
            let sys = system_from_named(named)?;
            let kappa = named.kappa_hat.ok_or_else(|| {
                CaseStudyError::BadDescriptor(format!("system '{}' needs kappa_hat for the feasibility solve", named.name))
            })?;
            let p = matgeo::mat_from_rows(&request.p).map_err(|e| CaseStudyError::BadDescriptor(e.to_string()))?;
            let bad = |e: matgeo::MatError| CaseStudyError::BadDescriptor(e.to_string());
            let options = PipelineOptions {
                kappa_hat: Some(kappa),
                h_override: request.h.as_ref().map(|rows| matgeo::mat_from_rows(rows).map_err(bad)).transpose()?,
                w_hat_override: request
                    .w_hat
                    .as_ref()
                    .map(|rows| matgeo::mat_from_rows(rows).map_err(bad))
                    .transpose()?,
                behavior_preserving: request.behavior_preserving,
                ..Default::default()
            };
            let result = synthesize_abstraction(&sys, &p, &options)?;
            pairs.push(CertifiedPair {
                system: sys,
                abstraction: result.abstract_system.clone(),
                certificate: result.certificate.clone(),
            });
            results.push((request.system.clone(), result));
        }
        let coupling = match &scenario.coupling {
            CouplingDescriptor::Explicit { entries } => {
                matgeo::mat_from_rows(entries).map_err(|e| CaseStudyError::BadDescriptor(e.to_string()))?
            }
            other => -build_laplacian(other)?,
        };
        return Ok(NetworkBundle {
            spec: InterconnectionSpec::new(pairs, coupling)?,
            laplacian: None,
            abstraction_results: results,
        });
    }

    let l = build_laplacian(&scenario.coupling)?;
    let partition = scenario
        .partition
        .as_ref()
        .ok_or_else(|| CaseStudyError::BadDescriptor("aggregation route needs a partition".into()))?;
    let lambda = scenario
        .lambda
        .ok_or_else(|| CaseStudyError::BadDescriptor("aggregation route needs lambda".into()))?;
    let c1_blocks = scenario
        .c1_blocks
        .as_ref()
        .map(|blocks| {
            blocks
                .iter()
                .map(|rows| matgeo::mat_from_rows(rows).map_err(|e| CaseStudyError::BadDescriptor(e.to_string())))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let spec = aggregation_network(&l, partition, lambda, c1_blocks)?;
    Ok(NetworkBundle { spec, laplacian: Some(l), abstraction_results: Vec::new() })
}

/// Per-subsystem certification reports for a scenario network.
pub fn certify_scenario(scenario: &Scenario) -> Result<Vec<(String, VerificationReport)>, CaseStudyError> {
    let tol = scenario.tolerances();
    let bundle = build_network(scenario)?;
    Ok(bundle
        .spec
        .subsystems
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            (format!("subsystem_{i}"), synthesis::check_dissipation_lmi(&pair.system, &pair.certificate.lmi, &tol))
        })
        .collect())
}

/// Runs every abstraction request of an explicit-route scenario.
pub fn synthesize_scenario(scenario: &Scenario) -> Result<Vec<(String, AbstractionResult)>, CaseStudyError> {
    let bundle = build_network(scenario)?;
    if bundle.abstraction_results.is_empty() {
        return Err(CaseStudyError::BadDescriptor(
            "scenario has no abstraction requests; the aggregation route carries closed-form certificates".into(),
        ));
    }
    Ok(bundle.abstraction_results)
}

fn initial_states(
    scenario: &Scenario,
    spec: &InterconnectionSpec,
    evaluator: &CompositeSimulationFunction,
) -> Result<(Vec64, Vec64), CaseStudyError> {
    let n: usize = spec.subsystems.iter().map(|s| s.system.n()).sum();
    let n_hat: usize = spec.subsystems.iter().map(|s| s.abstraction.n()).sum();
    let xhat0 = match &scenario.simulation.xhat0 {
        Some(values) => {
            if values.len() != n_hat {
                return Err(CaseStudyError::BadDescriptor(format!(
                    "xhat0 has {} entries, expected {n_hat}",
                    values.len()
                )));
            }
            Vec64::from_column_slice(values)
        }
        // center of the first target region of the classical setup
        None => Vec64::from_element(n_hat, 1.5),
    };
    let p_stacked = block_diag(&spec.subsystems.iter().map(|s| &s.certificate.p).collect::<Vec<_>>());
    let matched = &p_stacked * &xhat0;
    let x0 = match &scenario.simulation.x0 {
        X0Policy::Matched => matched,
        X0Policy::Perturbed { v0 } => {
            if !(*v0 >= 0.0) {
                return Err(CaseStudyError::BadDescriptor(format!("perturbation energy must be nonnegative, got {v0}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed() ^ 0x5EED);
            let raw = Vec64::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let trial = &matched + &raw;
            let v_raw = evaluator.value(&trial, &xhat0);
            if v_raw <= 0.0 {
                matched
            } else {
                // V is quadratic and homogeneous in the offset
                &matched + raw * (v0 / v_raw).sqrt()
            }
        }
        X0Policy::Explicit { values } => {
            if values.len() != n {
                return Err(CaseStudyError::BadDescriptor(format!("x0 has {} entries, expected {n}", values.len())));
            }
            Vec64::from_column_slice(values)
        }
    };
    Ok((x0, xhat0))
}

/// Plot metadata for the classical 3-output instance: the safe box, the
/// obstacles, and the two recurrence targets.
fn classic_boxes() -> serde_json::Value {
    serde_json::json!({
        "S": [[0.0, 10.0], [0.0, 10.0], [0.0, 10.0]],
        "T1": [[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]],
        "T2": [[8.0, 9.0], [8.0, 9.0], [8.0, 9.0]],
        "O1": [[4.0, 6.0], [4.0, 6.0], [4.0, 6.0]],
        "O2": [[7.0, 9.0], [1.0, 3.0], [0.0, 10.0]],
        "O3": [[2.0, 3.0], [7.0, 8.0], [0.0, 10.0]],
        "O4": [[1.0, 2.0], [1.0, 2.0], [5.0, 10.0]],
        "O5": [[8.0, 9.0], [8.0, 9.0], [0.0, 5.0]],
    })
}

/// Full case-study run: build, certify, compose, co-simulate, and trace the
/// error against its certified bound. Certification failures abort with the
/// failing condition named.
pub fn run_case_study(scenario: &Scenario) -> Result<RunArtifacts, CaseStudyError> {
    let tol = scenario.tolerances();
    let bundle = build_network(scenario)?;
    let spec = bundle.spec;

    let mut certification = Vec::new();
    for (i, pair) in spec.subsystems.iter().enumerate() {
        let report = synthesis::check_dissipation_lmi(&pair.system, &pair.certificate.lmi, &tol);
        if !report.passed {
            return Err(CaseStudyError::Certification {
                condition: "subsystem dissipation LMI".into(),
                detail: format!("subsystem {i}: worst violation {:.3e}", report.worst_violation()),
            });
        }
        certification.push(report);
    }

    let mhat = solve_abstract_coupling(&spec, &tol).map_err(|e| CaseStudyError::Certification {
        condition: "abstract coupling match".into(),
        detail: e.to_string(),
    })?;
    let mu = vec![1.0; spec.len()];
    let (composition, evaluator) = compose_network(&spec, &mu, Some(mhat.clone()), &tol).map_err(|e| {
        CaseStudyError::Certification { condition: "coupling dissipativity".into(), detail: e.to_string() }
    })?;
    if !composition.passing(&tol) {
        return Err(CaseStudyError::Certification {
            condition: "network coupling conditions".into(),
            detail: format!(
                "margin {:.3e}, residual {:.3e}",
                composition.dissipativity_margin, composition.coupling_match_residual
            ),
        });
    }

    let composite_verification = compose::verify_composite(
        &spec,
        &mu,
        &mhat,
        &SampleConfig { samples: 2000, seed: scenario.seed(), radius: 10.0 },
        &tol,
    );

    let m_hat_inputs: usize = spec.subsystems.iter().map(|s| s.abstraction.m()).sum();
    let bound = scenario.simulation.uhat_bound.unwrap_or(DEFAULT_UHAT_BOUND);
    let uhat = scenario
        .simulation
        .uhat
        .clone()
        .unwrap_or_else(|| default_uhat_schedule(m_hat_inputs, bound, scenario.simulation.t_final));

    let (x0, xhat0) = initial_states(scenario, &spec, &evaluator)?;
    let cosim = co_simulate(&spec, &mhat, &uhat, &x0, &xhat0, scenario.simulation.t_final, scenario.simulation.dt)?;

    let v0 = evaluator.value(&x0, &xhat0);
    let uhat_sup = uhat.sup_norm();
    let cf = composition.composite_cf;
    let bound_trace: Vec<f64> = cosim
        .concrete
        .times
        .iter()
        .map(|&t| error_bound(&cf, v0, uhat_sup, t, true))
        .collect();

    let n_total: usize = spec.subsystems.iter().map(|s| s.system.n()).sum();
    let lambda = scenario.lambda.unwrap_or(1.0);
    let plot_metadata = match (&scenario.partition, n_total) {
        (Some(p), 9) if p.as_slice() == [3, 3, 3] => Some(classic_boxes()),
        _ => None,
    };

    Ok(RunArtifacts {
        name: scenario.name.clone().unwrap_or_else(|| "case study".into()),
        certification,
        composite_verification,
        composition,
        cosim,
        bound_trace,
        v0,
        uhat_sup,
        small_gain: small_gain_compare(n_total.max(2), lambda),
        plot_metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn laplacian_examples() {
        let l = build_laplacian(&CouplingDescriptor::Complete { n: 3 }).unwrap();
        let expected = matgeo::mat_from_rows(&[
            vec![2.0, -1.0, -1.0],
            vec![-1.0, 2.0, -1.0],
            vec![-1.0, -1.0, 2.0],
        ])
        .unwrap();
        assert_eq!(l, expected);

        let p2 = build_laplacian(&CouplingDescriptor::Path { n: 2 }).unwrap();
        assert_eq!(p2, matgeo::mat_from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap());

        for descriptor in [
            CouplingDescriptor::Complete { n: 5 },
            CouplingDescriptor::Path { n: 6 },
            CouplingDescriptor::Cycle { n: 7 },
        ] {
            let l = build_laplacian(&descriptor).unwrap();
            for i in 0..l.nrows() {
                assert_abs_diff_eq!(l.row(i).sum(), 0.0, epsilon = 1e-12);
            }
            let tol = Tolerance::default();
            let min_eig = -max_eig_sym(&(-l), &tol).unwrap();
            assert_abs_diff_eq!(min_eig, 0.0, epsilon = 1e-9);
        }

        assert!(matches!(
            build_laplacian(&CouplingDescriptor::Complete { n: 1 }),
            Err(CaseStudyError::BadDescriptor(_))
        ));
        assert!(matches!(
            build_laplacian(&CouplingDescriptor::Explicit { entries: vec![vec![1.0, 0.0], vec![0.0, 1.0]] }),
            Err(CaseStudyError::BadDescriptor(_))
        ));
    }

    #[test]
    fn small_gain_examples() {
        let rec = small_gain_compare(9, 2.0);
        assert_abs_diff_eq!(rec.small_gain_value, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.spectral_radius, 9.0, epsilon = 1e-9);
        assert!(rec.dissipativity_margin <= 1e-9);

        // λ → ∞ drives the small-gain figure to zero
        let rec = small_gain_compare(9, 1e9);
        assert!(rec.small_gain_value < 1e-8);

        let rec = small_gain_compare(1000, 2.0);
        assert_abs_diff_eq!(rec.small_gain_value, 999.0 / 1001.0, epsilon = 1e-12);
        assert!(rec.dissipativity_margin <= 1e-9);
    }

    #[test]
    fn small_gain_is_monotone_in_n() {
        let mut prev = 0.0;
        for n in [4usize, 8, 16, 64, 256] {
            let rec = small_gain_compare(n, 2.0);
            assert!(rec.small_gain_value > prev);
            assert!(rec.dissipativity_margin <= 1e-9);
            prev = rec.small_gain_value;
        }
    }

    #[test]
    fn matched_case_study_tracks_exactly() {
        let scenario = Scenario::laplacian_case_study(9, vec![3, 3, 3], 2.0, 2.0, 1e-3, 11);
        let artifacts = run_case_study(&scenario).unwrap();
        assert!(artifacts.max_error() <= 1e-6, "max error {}", artifacts.max_error());
        assert_abs_diff_eq!(artifacts.v0, 0.0, epsilon = 1e-12);
        assert!(artifacts.composite_verification.passed);
        assert_eq!(artifacts.bound_violations(), 0);
        assert!(artifacts.plot_metadata.is_some());
    }

    #[test]
    fn perturbed_case_study_stays_under_bound() {
        let mut scenario = Scenario::laplacian_case_study(9, vec![3, 3, 3], 2.0, 4.0, 1e-3, 13);
        scenario.simulation.x0 = X0Policy::Perturbed { v0: 1.0 };
        let artifacts = run_case_study(&scenario).unwrap();
        assert_abs_diff_eq!(artifacts.v0, 1.0, epsilon = 1e-9);
        assert!(artifacts.max_error() > 1e-6);
        assert_eq!(artifacts.bound_violations(), 0);
    }

    #[test]
    fn non_equitable_partition_aborts_at_coupling_match() {
        let mut scenario = Scenario::laplacian_case_study(4, vec![2, 2], 2.0, 1.0, 1e-2, 3);
        scenario.coupling = CouplingDescriptor::Path { n: 4 };
        let err = run_case_study(&scenario).unwrap_err();
        match err {
            CaseStudyError::Certification { condition, .. } => assert!(condition.contains("coupling match")),
            other => panic!("expected a coupling-match abort, got {other}"),
        }
    }

    #[test]
    fn artifacts_write_expected_files() {
        let scenario = Scenario::laplacian_case_study(6, vec![2, 2, 2], 2.0, 1.0, 1e-2, 5);
        let artifacts = run_case_study(&scenario).unwrap();
        let dir = std::env::temp_dir().join(format!("simcert-test-{}", std::process::id()));
        artifacts.write_to(&dir).unwrap();
        for file in ["error_trace.csv", "summary.json", "plot.html"] {
            assert!(dir.join(file).exists(), "{file} missing");
        }
        assert!(dir.join("trajectories").join("concrete.csv").exists());
        assert!(dir.join("trajectories").join("abstract.csv").exists());
        let trace = std::fs::read_to_string(dir.join("error_trace.csv")).unwrap();
        assert!(trace.starts_with("t,err,bound"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn default_c1_blocks_follow_selector_pattern() {
        let blocks = default_c1_blocks(&[3, 3, 3]);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.shape(), (1, 3));
            assert_eq!(b[(0, i)], 1.0);
        }
        let blocks = default_c1_blocks(&[2, 4]);
        for b in &blocks {
            assert_eq!(b[(0, 0)], 1.0);
        }
    }
}
