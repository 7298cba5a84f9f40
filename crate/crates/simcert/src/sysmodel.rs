//! Control systems with internal/external channels, slope-restricted scalar
//! nonlinearities, fixed-step trajectory simulation, and interconnection.

use crate::matgeo::{block_diag, Mat, Vec64};
use std::fmt;

/// Divergence guard: any state coordinate beyond this magnitude aborts a run.
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemError {
    DimensionMismatch { what: String, expected: usize, got: usize },
    NonFiniteState { time: f64 },
    MultipleNonlinearities { count: usize },
    InvalidSlope { detail: String },
}

impl fmt::Display for SystemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemError::DimensionMismatch { what, expected, got } => {
                write!(f, "dimension mismatch in {what}: expected {expected}, got {got}")
            }
            SystemError::NonFiniteState { time } => {
                write!(f, "state diverged (|x| > {DIVERGENCE_LIMIT:.0e}) at t = {time}")
            }
            SystemError::MultipleNonlinearities { count } => {
                write!(f, "network has {count} nonlinear subsystems; a single system carries at most one nonlinearity")
            }
            SystemError::InvalidSlope { detail } => write!(f, "invalid slope data: {detail}"),
        }
    }
}

impl std::error::Error for SystemError {}

/// Shape of the scalar nonlinearity before any slope normalization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FnKind {
    Zero,
    Linear { gain: f64 },
    Saturation { level: f64 },
    TanhLike { scale: f64 },
    Tabulated { breakpoints: Vec<(f64, f64)> },
}

/// Scalar function with difference quotients confined to `[slope_lower, slope_upper]`.
///
/// `slope_upper` may be `f64::INFINITY`. Normalization subtracts a linear
/// term, tracked in `linear_offset`, so the evaluated function is
/// `base(r) - linear_offset * r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeRestrictedFn {
    pub kind: FnKind,
    pub linear_offset: f64,
    pub slope_lower: f64,
    pub slope_upper: f64,
}

impl SlopeRestrictedFn {
    pub fn zero() -> Self {
        SlopeRestrictedFn { kind: FnKind::Zero, linear_offset: 0.0, slope_lower: 0.0, slope_upper: f64::INFINITY }
    }

    pub fn linear(gain: f64) -> Self {
        SlopeRestrictedFn { kind: FnKind::Linear { gain }, linear_offset: 0.0, slope_lower: gain, slope_upper: gain }
    }

    /// `clamp(r, -level, level)`; slopes in `[0, 1]`.
    pub fn saturation(level: f64) -> Result<Self, SystemError> {
        if level <= 0.0 {
            return Err(SystemError::InvalidSlope { detail: format!("saturation level {level} must be positive") });
        }
        Ok(SlopeRestrictedFn { kind: FnKind::Saturation { level }, linear_offset: 0.0, slope_lower: 0.0, slope_upper: 1.0 })
    }

    /// `tanh(scale * r)`; slopes in `[0, scale]`.
    pub fn tanh_like(scale: f64) -> Result<Self, SystemError> {
        if scale <= 0.0 {
            return Err(SystemError::InvalidSlope { detail: format!("tanh scale {scale} must be positive") });
        }
        Ok(SlopeRestrictedFn { kind: FnKind::TanhLike { scale }, linear_offset: 0.0, slope_lower: 0.0, slope_upper: scale })
    }

    /// Piecewise-linear interpolant through strictly increasing breakpoints,
    /// extrapolated with the end-segment slopes.
    pub fn tabulated(breakpoints: Vec<(f64, f64)>) -> Result<Self, SystemError> {
        if breakpoints.len() < 2 {
            return Err(SystemError::InvalidSlope { detail: "need at least two breakpoints".into() });
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for w in breakpoints.windows(2) {
            let dx = w[1].0 - w[0].0;
            if dx <= 0.0 {
                return Err(SystemError::InvalidSlope { detail: "breakpoint abscissae must be strictly increasing".into() });
            }
            let s = (w[1].1 - w[0].1) / dx;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        Ok(SlopeRestrictedFn { kind: FnKind::Tabulated { breakpoints }, linear_offset: 0.0, slope_lower: lo, slope_upper: hi })
    }

    /// Overrides the declared slope interval (caller-asserted).
    pub fn with_declared_slopes(mut self, a: f64, b: f64) -> Result<Self, SystemError> {
        if a > b {
            return Err(SystemError::InvalidSlope { detail: format!("slope_lower {a} exceeds slope_upper {b}") });
        }
        self.slope_lower = a;
        self.slope_upper = b;
        Ok(self)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FnKind::Zero) && self.linear_offset == 0.0
    }

    fn base_eval(&self, r: f64) -> f64 {
        match &self.kind {
            FnKind::Zero => 0.0,
            FnKind::Linear { gain } => gain * r,
            FnKind::Saturation { level } => r.clamp(-level, *level),
            FnKind::TanhLike { scale } => (scale * r).tanh(),
            FnKind::Tabulated { breakpoints } => {
                let pts = breakpoints;
                let seg = |k: usize, r: f64| {
                    let (x0, y0) = pts[k];
                    let (x1, y1) = pts[k + 1];
                    y0 + (y1 - y0) / (x1 - x0) * (r - x0)
                };
                if r <= pts[0].0 {
                    return seg(0, r);
                }
                for k in 0..pts.len() - 1 {
                    if r <= pts[k + 1].0 {
                        return seg(k, r);
                    }
                }
                seg(pts.len() - 2, r)
            }
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.base_eval(r) - self.linear_offset * r
    }

    /// Subtracts `a * r`, shifting the slope interval down by `a`.
    pub fn shifted(&self, a: f64) -> Self {
        SlopeRestrictedFn {
            kind: self.kind.clone(),
            linear_offset: self.linear_offset + a,
            slope_lower: self.slope_lower - a,
            slope_upper: self.slope_upper - a,
        }
    }
}

/// Control system `ẋ = Ax + Eφ(Fx) + Bu + Dw`, `ζ₁ = C₁x`, `ζ₂ = C₂x`.
///
/// Internal channels (`w`, `ζ₂`) exist for interconnection; external ones
/// (`u`, `ζ₁`) survive it. The linear tuple is the `φ ≡ 0` special case,
/// in which `E` and `F` are ignored.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub a: Mat,
    pub b: Mat,
    pub c1: Mat,
    pub c2: Mat,
    pub d: Mat,
    pub e: Mat,
    pub f: Mat,
    pub phi: SlopeRestrictedFn,
}

impl ControlSystem {
    /// Linear system `(A, B, C1, C2, D)`.
    pub fn linear(a: Mat, b: Mat, c1: Mat, c2: Mat, d: Mat) -> Result<Self, SystemError> {
        let n = a.nrows();
        let sys = ControlSystem {
            e: Mat::zeros(n, 1),
            f: Mat::zeros(1, n),
            phi: SlopeRestrictedFn::zero(),
            a,
            b,
            c1,
            c2,
            d,
        };
        sys.check_dims()?;
        Ok(sys)
    }

    /// Closed linear system without internal channels (`p = q₂ = 0`).
    pub fn linear_closed(a: Mat, b: Mat, c1: Mat) -> Result<Self, SystemError> {
        let n = a.nrows();
        ControlSystem::linear(a, b, c1, Mat::zeros(0, n), Mat::zeros(n, 0))
    }

    pub fn with_nonlinearity(mut self, e: Mat, f: Mat, phi: SlopeRestrictedFn) -> Result<Self, SystemError> {
        self.e = e;
        self.f = f;
        self.phi = phi;
        self.check_dims()?;
        Ok(self)
    }

    fn check_dims(&self) -> Result<(), SystemError> {
        let n = self.n();
        let expect = |what: &str, expected: usize, got: usize| {
            if expected != got {
                Err(SystemError::DimensionMismatch { what: what.into(), expected, got })
            } else {
                Ok(())
            }
        };
        expect("A (square)", n, self.a.ncols())?;
        expect("B rows", n, self.b.nrows())?;
        expect("C1 cols", n, self.c1.ncols())?;
        expect("C2 cols", n, self.c2.ncols())?;
        expect("D rows", n, self.d.nrows())?;
        expect("E rows", n, self.e.nrows())?;
        expect("E cols", 1, self.e.ncols())?;
        expect("F rows", 1, self.f.nrows())?;
        expect("F cols", n, self.f.ncols())?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.d.ncols()
    }
    pub fn q1(&self) -> usize {
        self.c1.nrows()
    }
    pub fn q2(&self) -> usize {
        self.c2.nrows()
    }

    pub fn has_nonlinearity(&self) -> bool {
        !self.phi.is_zero() && self.e.iter().any(|&v| v != 0.0)
    }

    /// Drift `Ax + Eφ(Fx) + Bu + Dw`.
    pub fn dynamics(&self, x: &Vec64, u: &Vec64, w: &Vec64) -> Vec64 {
        let mut dx = &self.a * x + &self.b * u;
        if self.p() > 0 {
            dx += &self.d * w;
        }
        if self.has_nonlinearity() {
            let r = (&self.f * x)[0];
            dx += &self.e * self.phi.eval(r);
        }
        dx
    }

    /// Rewrites the system so the slope interval starts at zero:
    /// `Ã = A + a·E·F`, `φ̃(r) = φ(r) - a·r`. Trajectories are unchanged.
    pub fn normalize_slope(&self) -> Result<ControlSystem, SystemError> {
        let a = self.phi.slope_lower;
        if !a.is_finite() {
            return Err(SystemError::InvalidSlope { detail: "slope_lower must be finite to normalize".into() });
        }
        if a == 0.0 || !self.has_nonlinearity() {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        out.a = &self.a + &self.e * a * &self.f;
        out.phi = self.phi.shifted(a);
        Ok(out)
    }
}

/// Time-indexed simulation record on a uniform grid.
///
/// Output rows satisfy `ζ₁ = C₁ξ` and `ζ₂ = C₂ξ` exactly at every grid point.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec64>,
    pub external_input: Vec<Vec64>,
    pub internal_input: Vec<Vec64>,
    pub external_output: Vec<Vec64>,
    pub internal_output: Vec<Vec64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with header `t,x1..xn,u1..um,w1..wp,z1..zq1,y1..yq2`,
    /// 15 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |v| v.len());
        let m = self.external_input.first().map_or(0, |v| v.len());
        let p = self.internal_input.first().map_or(0, |v| v.len());
        let q1 = self.external_output.first().map_or(0, |v| v.len());
        let q2 = self.internal_output.first().map_or(0, |v| v.len());
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 1..=p {
            out.push_str(&format!(",w{i}"));
        }
        for i in 1..=q1 {
            out.push_str(&format!(",z{i}"));
        }
        for i in 1..=q2 {
            out.push_str(&format!(",y{i}"));
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format!("{:.14e}", self.times[k]));
            for block in [
                &self.states[k],
                &self.external_input[k],
                &self.internal_input[k],
                &self.external_output[k],
                &self.internal_output[k],
            ] {
                for v in block.iter() {
                    out.push_str(&format!(",{v:.14e}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Desk-scale realization of the measurable input-signal spaces.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSpec {
    Zero { dim: usize },
    Constant { value: Vec<f64> },
    /// Holds the value of the latest breakpoint with `start <= t`.
    PiecewiseConstant { schedule: Vec<(f64, Vec<f64>)> },
    /// Per-channel `amplitude * sin(2π * frequency * t + phase)`.
    Sinusoid { amplitude: Vec<f64>, frequency: Vec<f64>, phase: Vec<f64> },
}

impl SignalSpec {
    pub fn dim(&self) -> usize {
        match self {
            SignalSpec::Zero { dim } => *dim,
            SignalSpec::Constant { value } => value.len(),
            SignalSpec::PiecewiseConstant { schedule } => schedule.first().map_or(0, |(_, v)| v.len()),
            SignalSpec::Sinusoid { amplitude, .. } => amplitude.len(),
        }
    }

    pub fn eval(&self, t: f64) -> Vec64 {
        match self {
            SignalSpec::Zero { dim } => Vec64::zeros(*dim),
            SignalSpec::Constant { value } => Vec64::from_column_slice(value),
            SignalSpec::PiecewiseConstant { schedule } => {
                let mut current = schedule.first().map(|(_, v)| v.clone()).unwrap_or_default();
                for (start, v) in schedule {
                    if *start <= t {
                        current = v.clone();
                    }
                }
                Vec64::from_column_slice(&current)
            }
            SignalSpec::Sinusoid { amplitude, frequency, phase } => Vec64::from_iterator(
                amplitude.len(),
                amplitude
                    .iter()
                    .zip(frequency)
                    .zip(phase)
                    .map(|((&a, &f), &p)| a * (2.0 * std::f64::consts::PI * f * t + p).sin()),
            ),
        }
    }

    /// Supremum of the Euclidean norm over time (exact for this catalogue).
    pub fn sup_norm(&self) -> f64 {
        match self {
            SignalSpec::Zero { .. } => 0.0,
            SignalSpec::Constant { value } => Vec64::from_column_slice(value).norm(),
            SignalSpec::PiecewiseConstant { schedule } => schedule
                .iter()
                .map(|(_, v)| Vec64::from_column_slice(v).norm())
                .fold(0.0, f64::max),
            SignalSpec::Sinusoid { amplitude, .. } => Vec64::from_column_slice(amplitude).norm(),
        }
    }

    fn checked(&self, expected: usize, what: &str) -> Result<(), SystemError> {
        if self.dim() != expected {
            return Err(SystemError::DimensionMismatch { what: what.into(), expected, got: self.dim() });
        }
        Ok(())
    }
}

fn guard_state(x: &Vec64, t: f64) -> Result<(), SystemError> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(SystemError::NonFiniteState { time: t });
    }
    Ok(())
}

/// Classic fourth-order fixed-step integrator for a time-dependent field.
pub fn rk4<FD: FnMut(f64, &Vec64) -> Vec64>(
    x0: &Vec64,
    t0: f64,
    dt: f64,
    steps: usize,
    mut field: FD,
) -> Result<Vec<Vec64>, SystemError> {
    let mut xs = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    guard_state(&x, t0)?;
    xs.push(x.clone());
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let k1 = field(t, &x);
        let k2 = field(t + 0.5 * dt, &(&x + &k1 * (0.5 * dt)));
        let k3 = field(t + 0.5 * dt, &(&x + &k2 * (0.5 * dt)));
        let k4 = field(t + dt, &(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        guard_state(&x, t + dt)?;
        xs.push(x.clone());
    }
    Ok(xs)
}

/// Simulates `ẋ = Ax + Eφ(Fx) + Bu(t) + Dw(t)` on a uniform grid of width `dt`.
pub fn simulate(
    sys: &ControlSystem,
    x0: &Vec64,
    u: &SignalSpec,
    w: &SignalSpec,
    horizon: f64,
    dt: f64,
) -> Result<Trajectory, SystemError> {
    assert!(dt > 0.0 && horizon >= dt, "need 0 < dt <= horizon");
    u.checked(sys.m(), "external input signal")?;
    w.checked(sys.p(), "internal input signal")?;
    if x0.len() != sys.n() {
        return Err(SystemError::DimensionMismatch { what: "initial state".into(), expected: sys.n(), got: x0.len() });
    }
    let steps = (horizon / dt).round() as usize;
    let states = rk4(x0, 0.0, dt, steps, |t, x| sys.dynamics(x, &u.eval(t), &w.eval(t)))?;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    Ok(assemble_trajectory(sys, times, states, u, w))
}

fn assemble_trajectory(
    sys: &ControlSystem,
    times: Vec<f64>,
    states: Vec<Vec64>,
    u: &SignalSpec,
    w: &SignalSpec,
) -> Trajectory {
    let external_input = times.iter().map(|&t| u.eval(t)).collect();
    let internal_input = times.iter().map(|&t| w.eval(t)).collect();
    let external_output = states.iter().map(|x| &sys.c1 * x).collect();
    let internal_output = states.iter().map(|x| &sys.c2 * x).collect();
    Trajectory { times, states, external_input, internal_input, external_output, internal_output }
}

/// Closes a network of subsystems over the coupling `w = M ζ₂` into a single
/// system without internal channels.
///
/// At most one subsystem may carry a nonlinearity; its `E`, `F` are lifted
/// into the network state. Networks with several nonlinear subsystems are
/// handled by [`simulate_network`] instead.
pub fn interconnect(subsystems: &[ControlSystem], m: &Mat) -> Result<ControlSystem, SystemError> {
    assert!(!subsystems.is_empty());
    let p_total: usize = subsystems.iter().map(|s| s.p()).sum();
    let q2_total: usize = subsystems.iter().map(|s| s.q2()).sum();
    if m.nrows() != p_total {
        return Err(SystemError::DimensionMismatch { what: "coupling rows".into(), expected: p_total, got: m.nrows() });
    }
    if m.ncols() != q2_total {
        return Err(SystemError::DimensionMismatch { what: "coupling cols".into(), expected: q2_total, got: m.ncols() });
    }
    let nonlinear: Vec<usize> = (0..subsystems.len()).filter(|&i| subsystems[i].has_nonlinearity()).collect();
    if nonlinear.len() > 1 {
        return Err(SystemError::MultipleNonlinearities { count: nonlinear.len() });
    }

    let a_blocks: Vec<&Mat> = subsystems.iter().map(|s| &s.a).collect();
    let b_blocks: Vec<&Mat> = subsystems.iter().map(|s| &s.b).collect();
    let c1_blocks: Vec<&Mat> = subsystems.iter().map(|s| &s.c1).collect();
    let c2_blocks: Vec<&Mat> = subsystems.iter().map(|s| &s.c2).collect();
    let d_blocks: Vec<&Mat> = subsystems.iter().map(|s| &s.d).collect();

    let a_net = block_diag(&a_blocks) + block_diag(&d_blocks) * m * block_diag(&c2_blocks);
    let n = a_net.nrows();
    let mut sys = ControlSystem::linear(
        a_net,
        block_diag(&b_blocks),
        block_diag(&c1_blocks),
        Mat::zeros(0, n),
        Mat::zeros(n, 0),
    )?;

    if let Some(&i) = nonlinear.first() {
        let offset: usize = subsystems[..i].iter().map(|s| s.n()).sum();
        let sub = &subsystems[i];
        let mut e = Mat::zeros(n, 1);
        e.view_mut((offset, 0), (sub.n(), 1)).copy_from(&sub.e);
        let mut f = Mat::zeros(1, n);
        f.view_mut((0, offset), (1, sub.n())).copy_from(&sub.f);
        sys = sys.with_nonlinearity(e, f, sub.phi.clone())?;
    }
    Ok(sys)
}

/// Co-simulates the subsystems directly, substituting `w = M ζ₂` at every
/// integrator stage. Returns one trajectory per subsystem.
pub fn simulate_network(
    subsystems: &[ControlSystem],
    m: &Mat,
    x0: &[Vec64],
    u: &[SignalSpec],
    horizon: f64,
    dt: f64,
) -> Result<Vec<Trajectory>, SystemError> {
    assert_eq!(subsystems.len(), x0.len());
    assert_eq!(subsystems.len(), u.len());
    for (sys, sig) in subsystems.iter().zip(u) {
        sig.checked(sys.m(), "external input signal")?;
    }
    let dims: Vec<usize> = subsystems.iter().map(|s| s.n()).collect();
    let n_total: usize = dims.iter().sum();
    let mut x_init = Vec64::zeros(n_total);
    let mut offset = 0;
    for (x, d) in x0.iter().zip(&dims) {
        x_init.rows_mut(offset, *d).copy_from(x);
        offset += d;
    }

    let c2_stacked = block_diag(&subsystems.iter().map(|s| &s.c2).collect::<Vec<_>>());
    let steps = (horizon / dt).round() as usize;
    let states = rk4(&x_init, 0.0, dt, steps, |t, x| {
        let w_all = m * (&c2_stacked * x);
        let mut dx = Vec64::zeros(n_total);
        let (mut xo, mut wo) = (0, 0);
        for (i, sys) in subsystems.iter().enumerate() {
            let xi = x.rows(xo, sys.n()).into_owned();
            let wi = w_all.rows(wo, sys.p()).into_owned();
            let ui = u[i].eval(t);
            dx.rows_mut(xo, sys.n()).copy_from(&sys.dynamics(&xi, &ui, &wi));
            xo += sys.n();
            wo += sys.p();
        }
        dx
    })?;

    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let mut out = Vec::with_capacity(subsystems.len());
    let mut xo = 0;
    let mut wo = 0;
    for (i, sys) in subsystems.iter().enumerate() {
        let sub_states: Vec<Vec64> = states.iter().map(|x| x.rows(xo, sys.n()).into_owned()).collect();
        let internal_input: Vec<Vec64> = states
            .iter()
            .map(|x| (m * (&c2_stacked * x)).rows(wo, sys.p()).into_owned())
            .collect();
        let external_input: Vec<Vec64> = times.iter().map(|&t| u[i].eval(t)).collect();
        let external_output = sub_states.iter().map(|x| &sys.c1 * x).collect();
        let internal_output = sub_states.iter().map(|x| &sys.c2 * x).collect();
        out.push(Trajectory {
            times: times.clone(),
            states: sub_states,
            external_input,
            internal_input,
            external_output,
            internal_output,
        });
        xo += sys.n();
        wo += sys.p();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matgeo::{mat_from_rows, max_abs};
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_sys(a: f64, b: f64) -> ControlSystem {
        ControlSystem::linear_closed(
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::identity(1, 1),
        )
        .unwrap()
    }

    fn complete_laplacian(n: usize) -> Mat {
        Mat::from_fn(n, n, |i, j| if i == j { n as f64 - 1.0 } else { -1.0 })
    }

    /// Integrator block: ẋ = w + u, ζ₁ = C₁x, ζ₂ = x.
    fn integrator_block(n: usize, c1: Mat) -> ControlSystem {
        ControlSystem::linear(
            Mat::zeros(n, n),
            Mat::identity(n, n),
            c1,
            Mat::identity(n, n),
            Mat::identity(n, n),
        )
        .unwrap()
    }

    #[test]
    fn integrates_constant_input_exactly() {
        let sys = scalar_sys(0.0, 1.0);
        let traj = simulate(
            &sys,
            &Vec64::zeros(1),
            &SignalSpec::Constant { value: vec![1.0] },
            &SignalSpec::Zero { dim: 0 },
            1.0,
            0.1,
        )
        .unwrap();
        assert_abs_diff_eq!(traj.states.last().unwrap()[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn matches_exponential_decay() {
        let sys = scalar_sys(-1.0, 1.0);
        let traj = simulate(
            &sys,
            &Vec64::from_element(1, 1.0),
            &SignalSpec::Zero { dim: 1 },
            &SignalSpec::Zero { dim: 0 },
            1.0,
            1e-3,
        )
        .unwrap();
        assert_abs_diff_eq!(traj.states.last().unwrap()[0], (-1.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn integrator_block_ramps_under_constant_input() {
        let sys = integrator_block(3, Mat::identity(3, 3));
        let c = 0.7;
        let traj = simulate(
            &sys,
            &Vec64::zeros(3),
            &SignalSpec::Constant { value: vec![c; 3] },
            &SignalSpec::Zero { dim: 3 },
            2.0,
            1e-2,
        )
        .unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            for i in 0..3 {
                assert_abs_diff_eq!(x[i], c * t, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rk4_order_check() {
        // halving dt reduces the error against e^{-1} by roughly 16x
        let sys = scalar_sys(-1.0, 1.0);
        let run = |dt: f64| {
            let traj = simulate(
                &sys,
                &Vec64::from_element(1, 1.0),
                &SignalSpec::Zero { dim: 1 },
                &SignalSpec::Zero { dim: 0 },
                1.0,
                dt,
            )
            .unwrap();
            (traj.states.last().unwrap()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = run(0.05) / run(0.025);
        assert!((12.0..=20.0).contains(&ratio), "order ratio {ratio}");
    }

    #[test]
    fn divergence_is_detected() {
        let sys = scalar_sys(10.0, 0.0);
        let res = simulate(
            &sys,
            &Vec64::from_element(1, 1.0),
            &SignalSpec::Zero { dim: 1 },
            &SignalSpec::Zero { dim: 0 },
            10.0,
            1e-2,
        );
        assert!(matches!(res, Err(SystemError::NonFiniteState { .. })));
    }

    #[test]
    fn output_identities_hold_exactly() {
        let sys = integrator_block(2, mat_from_rows(&[vec![1.0, -1.0]]).unwrap());
        let traj = simulate(
            &sys,
            &Vec64::from_column_slice(&[1.0, 2.0]),
            &SignalSpec::Sinusoid { amplitude: vec![1.0, 0.5], frequency: vec![0.5, 1.0], phase: vec![0.0, 1.0] },
            &SignalSpec::Zero { dim: 2 },
            1.0,
            1e-2,
        )
        .unwrap();
        for (x, (z, y)) in traj.states.iter().zip(traj.external_output.iter().zip(&traj.internal_output)) {
            assert_eq!(&(&sys.c1 * x), z);
            assert_eq!(&(&sys.c2 * x), y);
        }
    }

    #[test]
    fn normalize_identity_when_slope_lower_zero() {
        let sys = ControlSystem::linear_closed(Mat::zeros(1, 1), Mat::identity(1, 1), Mat::identity(1, 1))
            .unwrap()
            .with_nonlinearity(Mat::identity(1, 1), Mat::identity(1, 1), SlopeRestrictedFn::tanh_like(1.0).unwrap())
            .unwrap();
        let norm = sys.normalize_slope().unwrap();
        assert_eq!(norm.a, sys.a);
        assert_eq!(norm.phi, sys.phi);
    }

    #[test]
    fn normalize_shifts_declared_slope() {
        // tanh with declared slopes [0.2, 1]: Ã = A + aEF = 0.2, b̃ = 0.8
        let phi = SlopeRestrictedFn::tanh_like(1.0).unwrap().with_declared_slopes(0.2, 1.0).unwrap();
        let sys = ControlSystem::linear_closed(Mat::zeros(1, 1), Mat::identity(1, 1), Mat::identity(1, 1))
            .unwrap()
            .with_nonlinearity(Mat::identity(1, 1), Mat::identity(1, 1), phi)
            .unwrap();
        let norm = sys.normalize_slope().unwrap();
        assert_abs_diff_eq!(norm.a[(0, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(norm.phi.slope_lower, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(norm.phi.slope_upper, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(norm.phi.eval(2.0), (2.0f64).tanh() - 0.4, epsilon = 1e-15);
    }

    #[test]
    fn normalize_absorbs_linear_nonlinearity() {
        let g = 0.6;
        let sys = ControlSystem::linear_closed(Mat::zeros(1, 1), Mat::identity(1, 1), Mat::identity(1, 1))
            .unwrap()
            .with_nonlinearity(Mat::identity(1, 1), Mat::identity(1, 1), SlopeRestrictedFn::linear(g))
            .unwrap();
        let norm = sys.normalize_slope().unwrap();
        assert_abs_diff_eq!(norm.a[(0, 0)], g, epsilon = 1e-15);
        for r in [-3.0, 0.5, 7.0] {
            assert_abs_diff_eq!(norm.phi.eval(r), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_preserves_trajectories() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.random_range(1..=3);
            let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) - Mat::identity(n, n) * 2.0;
            let e = Mat::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
            let f = Mat::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
            let phi = SlopeRestrictedFn::tanh_like(1.0).unwrap().with_declared_slopes(-0.3, 1.0).unwrap();
            let sys = ControlSystem::linear_closed(a, Mat::identity(n, n), Mat::identity(n, n))
                .unwrap()
                .with_nonlinearity(e, f, phi)
                .unwrap();
            let norm = sys.normalize_slope().unwrap();
            let x0 = Vec64::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let u = SignalSpec::Sinusoid {
                amplitude: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                frequency: vec![0.3; n],
                phase: vec![0.0; n],
            };
            let w = SignalSpec::Zero { dim: 0 };
            let t1 = simulate(&sys, &x0, &u, &w, 5.0, 1e-2).unwrap();
            let t2 = simulate(&norm, &x0, &u, &w, 5.0, 1e-2).unwrap();
            let dev = t1
                .states
                .iter()
                .zip(&t2.states)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            assert!(dev <= 1e-9, "trajectory deviation {dev}");
        }
    }

    #[test]
    fn interconnect_single_system_severs_channels() {
        let sys = integrator_block(2, Mat::identity(2, 2));
        let net = interconnect(&[sys.clone()], &Mat::zeros(2, 2)).unwrap();
        assert_eq!(net.a, Mat::zeros(2, 2));
        assert_eq!(net.p(), 0);
        assert_eq!(net.q2(), 0);
    }

    #[test]
    fn interconnect_laplacian_network() {
        let l = complete_laplacian(9);
        let subs: Vec<ControlSystem> = (0..3)
            .map(|i| {
                let mut c1 = Mat::zeros(1, 3);
                c1[(0, i)] = 1.0;
                integrator_block(3, c1)
            })
            .collect();
        let net = interconnect(&subs, &(-l.clone())).unwrap();
        assert!(max_abs(&(net.a.clone() + l)) < 1e-14);
        assert_eq!(net.n(), 9);
        assert_eq!(net.m(), 9);
        assert_eq!(net.q1(), 3);
    }

    #[test]
    fn interconnect_two_scalar_integrators() {
        let subs = vec![integrator_block(1, Mat::identity(1, 1)), integrator_block(1, Mat::identity(1, 1))];
        let m = mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let net = interconnect(&subs, &m).unwrap();
        assert_eq!(net.a, mat_from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn interconnect_rejects_multiple_nonlinearities() {
        let nonlinear = |n: usize| {
            integrator_block(n, Mat::identity(n, n))
                .with_nonlinearity(
                    Mat::from_element(n, 1, 1.0),
                    Mat::from_element(1, n, 0.5),
                    SlopeRestrictedFn::tanh_like(1.0).unwrap(),
                )
                .unwrap()
        };
        let subs = vec![nonlinear(2), nonlinear(2)];
        let m = Mat::zeros(4, 4);
        assert!(matches!(
            interconnect(&subs, &m),
            Err(SystemError::MultipleNonlinearities { count: 2 })
        ));
        // the co-simulation path handles the same network
        let x0 = vec![Vec64::zeros(2), Vec64::zeros(2)];
        let u = vec![SignalSpec::Constant { value: vec![0.1, 0.2] }, SignalSpec::Zero { dim: 2 }];
        assert!(simulate_network(&subs, &m, &x0, &u, 1.0, 1e-2).is_ok());
    }

    #[test]
    fn cosimulation_matches_symbolic_interconnection() {
        let mut rng = StdRng::seed_from_u64(31);
        let l = complete_laplacian(6);
        let subs: Vec<ControlSystem> = (0..2).map(|_| integrator_block(3, Mat::identity(3, 3))).collect();
        let m = -l;
        let x0: Vec<Vec64> = (0..2).map(|_| Vec64::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect();
        let u: Vec<SignalSpec> = (0..2)
            .map(|_| SignalSpec::Constant { value: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect() })
            .collect();

        let co = simulate_network(&subs, &m, &x0, &u, 2.0, 1e-2).unwrap();

        let net = interconnect(&subs, &m).unwrap();
        let mut x0_full = Vec64::zeros(6);
        x0_full.rows_mut(0, 3).copy_from(&x0[0]);
        x0_full.rows_mut(3, 3).copy_from(&x0[1]);
        let mut uval = Vec::new();
        for s in &u {
            if let SignalSpec::Constant { value } = s {
                uval.extend_from_slice(value);
            }
        }
        let direct = simulate(
            &net,
            &x0_full,
            &SignalSpec::Constant { value: uval },
            &SignalSpec::Zero { dim: 0 },
            2.0,
            1e-2,
        )
        .unwrap();

        for k in 0..direct.len() {
            let mut dev: f64 = 0.0;
            for i in 0..3 {
                dev = dev.max((co[0].states[k][i] - direct.states[k][i]).abs());
                dev = dev.max((co[1].states[k][i] - direct.states[k][3 + i]).abs());
            }
            assert!(dev <= 1e-9, "step {k} deviation {dev}");
        }
    }

    #[test]
    fn csv_header_and_precision() {
        let sys = integrator_block(1, Mat::identity(1, 1));
        let traj = simulate(
            &sys,
            &Vec64::from_element(1, 1.0 / 3.0),
            &SignalSpec::Zero { dim: 1 },
            &SignalSpec::Zero { dim: 1 },
            0.1,
            0.1,
        )
        .unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,u1,w1,z1,y1");
        let first_row = lines.next().unwrap();
        assert!(first_row.contains("3.33333333333333"), "{first_row}");
    }

    #[test]
    fn saturation_and_tabulated_slopes() {
        let sat = SlopeRestrictedFn::saturation(2.0).unwrap();
        assert_eq!(sat.eval(5.0), 2.0);
        assert_eq!(sat.eval(-5.0), -2.0);
        assert_eq!(sat.eval(1.0), 1.0);

        let tab = SlopeRestrictedFn::tabulated(vec![(-1.0, -0.5), (0.0, 0.0), (1.0, 2.0)]).unwrap();
        assert_abs_diff_eq!(tab.slope_lower, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(tab.slope_upper, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tab.eval(0.5), 1.0, epsilon = 1e-15);
        // linear extrapolation keeps end-segment slopes
        assert_abs_diff_eq!(tab.eval(2.0), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn slope_bound_property_all_kinds() {
        let mut rng = StdRng::seed_from_u64(37);
        let kinds = vec![
            SlopeRestrictedFn::linear(0.8),
            SlopeRestrictedFn::saturation(3.0).unwrap(),
            SlopeRestrictedFn::tanh_like(1.7).unwrap(),
            SlopeRestrictedFn::tabulated(vec![(-2.0, -1.0), (0.0, 0.0), (2.0, 3.0)]).unwrap(),
        ];
        for phi in kinds {
            for _ in 0..10_000 {
                let v = rng.random_range(-1e3..1e3);
                let w = rng.random_range(-1e3..1e3);
                if v == w {
                    continue;
                }
                let q = (phi.eval(v) - phi.eval(w)) / (v - w);
                assert!(q >= phi.slope_lower - 1e-9, "quotient {q} under {}", phi.slope_lower);
                if phi.slope_upper.is_finite() {
                    assert!(q <= phi.slope_upper + 1e-9, "quotient {q} over {}", phi.slope_upper);
                }
            }
        }
    }
}
