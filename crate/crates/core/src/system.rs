//! Control systems `ẋ = f(x, u)`, piecewise-constant input signals and
//! fixed-step RK4 trajectories.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoxError, BoxRegion};
use crate::expr::{self, Dims, Env, Expr, ExprError, VarKind};
use crate::metric::{euclidean, MetricError};
use crate::rng::{task_rng, Stream};

/// States with any component beyond this magnitude count as a blow-up.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;
pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("field component {component}: {source}")]
    Field { component: usize, source: ExprError },
    #[error("field may only use x1..xn and u1..um, found `{0}`")]
    FieldVariable(String),
    #[error("field has {got} components, state dimension is {expected}")]
    FieldLength { expected: usize, got: usize },
    #[error("input set has dimension {got}, input dimension is {expected}")]
    InputSetDimension { expected: usize, got: usize },
    #[error("invalid input set: {0}")]
    InputSet(String),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid signal: {0}")]
    Signal(String),
    #[error("signal value at cell {cell} lies outside the input set")]
    SignalOutsideInputSet { cell: usize },
    #[error("invalid integration grid: {0}")]
    Grid(String),
    #[error("not forward complete at this scale: state exceeded {threshold:e} at t = {time}")]
    Divergence { time: f64, threshold: f64 },
    #[error("non-finite field evaluation at t = {time}: {source}")]
    NonFiniteField { time: f64, source: Box<SystemError> },
}

/// Compact convex input set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InputSetSpec", into = "InputSetSpec")]
pub enum InputSet {
    Box(BoxRegion),
    /// Origin-centred Euclidean ball.
    Ball { radius: f64, dim: usize },
    /// Cartesian product, used for the disturbance input space `U × B₁(0)`.
    Product(Box<InputSet>, Box<InputSet>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSetSpec {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Ball {
        radius: f64,
        /// Filled in from the system's input dimension when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
    },
    Product {
        first: Box<InputSetSpec>,
        second: Box<InputSetSpec>,
    },
}

impl TryFrom<InputSetSpec> for InputSet {
    type Error = SystemError;
    fn try_from(spec: InputSetSpec) -> Result<Self, SystemError> {
        match spec {
            InputSetSpec::Box { lo, hi } => Ok(InputSet::Box(BoxRegion::new(lo, hi)?)),
            InputSetSpec::Ball { radius, dim } => InputSet::ball(radius, dim.unwrap_or(0)),
            InputSetSpec::Product { first, second } => Ok(InputSet::Product(
                Box::new(InputSet::try_from(*first)?),
                Box::new(InputSet::try_from(*second)?),
            )),
        }
    }
}

impl From<InputSet> for InputSetSpec {
    fn from(set: InputSet) -> Self {
        match set {
            InputSet::Box(region) => InputSetSpec::Box {
                lo: region.lo().to_vec(),
                hi: region.hi().to_vec(),
            },
            InputSet::Ball { radius, dim } => InputSetSpec::Ball { radius, dim: Some(dim) },
            InputSet::Product(a, b) => InputSetSpec::Product {
                first: Box::new((*a).into()),
                second: Box::new((*b).into()),
            },
        }
    }
}

impl InputSet {
    pub fn ball(radius: f64, dim: usize) -> Result<Self, SystemError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(SystemError::InputSet(format!("ball radius must be positive, got {radius}")));
        }
        Ok(InputSet::Ball { radius, dim })
    }

    /// The empty-input set for autonomous systems.
    pub fn none() -> Self {
        InputSet::Box(BoxRegion::new(vec![], vec![]).expect("empty box"))
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSet::Box(region) => region.dim(),
            InputSet::Ball { dim, .. } => *dim,
            InputSet::Product(a, b) => a.dim() + b.dim(),
        }
    }

    fn with_dim(self, m: usize) -> Self {
        match self {
            InputSet::Ball { radius, dim: 0 } => InputSet::Ball { radius, dim: m },
            other => other,
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self {
            InputSet::Box(region) => region.contains(u),
            InputSet::Ball { radius, .. } => u.iter().map(|a| a * a).sum::<f64>().sqrt() <= radius * (1.0 + 1e-12),
            InputSet::Product(a, b) => {
                let k = a.dim();
                a.contains(&u[..k]) && b.contains(&u[k..])
            }
        }
    }

    /// Uniform sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InputSet::Box(region) => region.sample(rng),
            InputSet::Ball { radius, dim } => {
                if *dim == 0 {
                    return vec![];
                }
                loop {
                    let g: Vec<f64> = (0..*dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let len = g.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if len > 0.0 {
                        let s: f64 = rng.random::<f64>();
                        let scale = radius * s.powf(1.0 / *dim as f64) / len;
                        return g.into_iter().map(|a| a * scale).collect();
                    }
                }
            }
            InputSet::Product(a, b) => {
                let mut out = a.sample(rng);
                out.extend(b.sample(rng));
                out
            }
        }
    }

    /// Corners for box sets with at most 2^6 of them.
    pub fn vertices(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            InputSet::Box(region) if region.dim() <= 6 => Some(region.vertices()),
            _ => None,
        }
    }

    /// A box containing the set, for coordinate-wise search.
    pub fn bounding_box(&self) -> BoxRegion {
        match self {
            InputSet::Box(region) => region.clone(),
            InputSet::Ball { radius, dim } => BoxRegion::cube(*dim, -radius, *radius).expect("valid radius"),
            InputSet::Product(a, b) => a.bounding_box().product(&b.bounding_box()),
        }
    }
}

/// Anything that can be integrated: a vector field with a declared input set.
pub trait VectorField: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_set(&self) -> &InputSet;
    fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), SystemError>;

    fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, SystemError> {
        let mut out = vec![0.0; self.state_dim()];
        self.eval_into(x, u, &mut out)?;
        Ok(out)
    }
}

/// JSON form of a system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub input_set: InputSetSpec,
    pub field: Vec<String>,
}

/// `Σ = (ℝⁿ, U, 𝒰, f)` with `f` given componentwise by expressions over
/// `x1..xn, u1..um`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSystem {
    name: String,
    n: usize,
    m: usize,
    input_set: InputSet,
    field: Vec<Expr>,
}

impl ControlSystem {
    pub fn new<S: AsRef<str>>(name: &str, n: usize, m: usize, input_set: InputSet, field: &[S]) -> Result<Self, SystemError> {
        let input_set = input_set.with_dim(m);
        if input_set.dim() != m {
            return Err(SystemError::InputSetDimension { expected: m, got: input_set.dim() });
        }
        if field.len() != n {
            return Err(SystemError::FieldLength { expected: n, got: field.len() });
        }
        let field = field
            .iter()
            .enumerate()
            .map(|(component, text)| {
                let e = expr::parse(text.as_ref(), Dims::new(n, m))
                    .map_err(|source| SystemError::Field { component, source })?;
                if let Some(v) = e.variables().into_iter().find(|v| matches!(v.kind, VarKind::Y | VarKind::V)) {
                    return Err(SystemError::FieldVariable(v.to_string()));
                }
                Ok(e)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ControlSystem {
            name: name.to_string(),
            n,
            m,
            input_set,
            field,
        })
    }

    pub fn from_spec(spec: SystemSpec) -> Result<Self, SystemError> {
        let set = InputSet::try_from(spec.input_set)?;
        ControlSystem::new(&spec.name, spec.state_dim, spec.input_dim, set, &spec.field)
    }

    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            name: self.name.clone(),
            state_dim: self.n,
            input_dim: self.m,
            input_set: self.input_set.clone().into(),
            field: self.field.iter().map(ToString::to_string).collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn field(&self) -> &[Expr] {
        &self.field
    }
}

impl VectorField for ControlSystem {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn input_dim(&self) -> usize {
        self.m
    }

    fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), SystemError> {
        if x.len() != self.n {
            return Err(SystemError::Dimension { what: "state", expected: self.n, got: x.len() });
        }
        if u.len() != self.m {
            return Err(SystemError::Dimension { what: "input", expected: self.m, got: u.len() });
        }
        let env = Env::new(x, &[], u, &[]);
        for (component, (e, slot)) in self.field.iter().zip(out.iter_mut()).enumerate() {
            *slot = e.eval(&env).map_err(|source| SystemError::Field { component, source })?;
        }
        Ok(())
    }
}

/// Piecewise-constant signal on a uniform grid of cells of length `cell`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    cell: f64,
    values: Vec<Vec<f64>>,
}

impl InputSignal {
    pub fn new(cell: f64, values: Vec<Vec<f64>>) -> Result<Self, SystemError> {
        if !(cell.is_finite() && cell > 0.0) {
            return Err(SystemError::Signal(format!("cell length must be positive, got {cell}")));
        }
        let Some(first) = values.first() else {
            return Err(SystemError::Signal("signal has no cells".into()));
        };
        let m = first.len();
        if let Some(k) = values.iter().position(|v| v.len() != m || v.iter().any(|a| !a.is_finite())) {
            return Err(SystemError::Signal(format!("cell {k} has wrong length or a non-finite value")));
        }
        Ok(InputSignal { cell, values })
    }

    /// `u` held for `duration` (rounded up to whole cells).
    pub fn constant(u: Vec<f64>, duration: f64, cell: f64) -> Result<Self, SystemError> {
        let cells = ((duration / cell) - 1e-9).ceil().max(1.0) as usize;
        InputSignal::new(cell, vec![u; cells])
    }

    /// Independent uniform samples from `set` in each cell.
    pub fn random<R: Rng + ?Sized>(set: &InputSet, duration: f64, cell: f64, rng: &mut R) -> Result<Self, SystemError> {
        let cells = ((duration / cell) - 1e-9).ceil().max(1.0) as usize;
        let values = (0..cells).map(|_| set.sample(rng)).collect();
        InputSignal::new(cell, values)
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.cell * self.values.len() as f64
    }

    /// Value on the cell containing `t` (clamped to the grid).
    pub fn value_at(&self, t: f64) -> &[f64] {
        let k = (t / self.cell).floor().max(0.0) as usize;
        &self.values[k.min(self.values.len() - 1)]
    }

    pub fn check_membership(&self, set: &InputSet) -> Result<(), SystemError> {
        if self.dim() != set.dim() {
            return Err(SystemError::Dimension { what: "signal", expected: set.dim(), got: self.dim() });
        }
        match self.values.iter().position(|v| !set.contains(v)) {
            Some(cell) => Err(SystemError::SignalOutsideInputSet { cell }),
            None => Ok(()),
        }
    }

    /// Sup over cells of `‖self(t) - other(t)‖`.
    pub fn sup_norm_diff(&self, other: &InputSignal) -> Result<f64, SystemError> {
        if self.values.len() != other.values.len() || (self.cell - other.cell).abs() > 1e-12 * self.cell {
            return Err(SystemError::Signal("signals are on different grids".into()));
        }
        if self.dim() != other.dim() {
            return Err(SystemError::Dimension { what: "signal", expected: self.dim(), got: other.dim() });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| euclidean(a, b))
            .fold(0.0, f64::max))
    }
}

/// States `ξ(t_k)` at `t_k = k·step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub signal: InputSignal,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one sample")
    }

    /// CSV with header `t,x1..xn` and one row per step.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let n = self.states[0].len();
        let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect();
        writeln!(w, "{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for v in x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Number of steps for `horizon`, which must be a whole multiple of `step`.
pub fn step_count(horizon: f64, step: f64) -> Result<usize, SystemError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(SystemError::Grid(format!("step must be positive, got {step}")));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(SystemError::Grid(format!("horizon must be non-negative, got {horizon}")));
    }
    let steps = (horizon / step).round();
    if (steps * step - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(SystemError::Grid(format!("horizon {horizon} is not a multiple of step {step}")));
    }
    Ok(steps as usize)
}

/// Classical fixed-step RK4. The input on `[t_k, t_k + step]` is the signal
/// value at the step midpoint, so cells aligned with the step grid are held
/// constant over each step.
pub fn integrate<F: VectorField + ?Sized>(
    sys: &F,
    x0: &[f64],
    signal: &InputSignal,
    horizon: f64,
    step: f64,
) -> Result<Trajectory, SystemError> {
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(SystemError::Dimension { what: "initial state", expected: n, got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SystemError::Grid("initial state is not finite".into()));
    }
    let steps = step_count(horizon, step)?;
    if signal.duration() < horizon - 1e-9 * horizon.max(1.0) {
        return Err(SystemError::Signal(format!(
            "signal lasts {} but horizon is {horizon}",
            signal.duration()
        )));
    }
    signal.check_membership(sys.input_set())?;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(x0.to_vec());

    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut stage = vec![0.0; n];
    let half = 0.5 * step;
    for k in 0..steps {
        let t = k as f64 * step;
        let u = signal.value_at(t + half);
        let wrap = |e: SystemError| SystemError::NonFiniteField { time: t, source: Box::new(e) };

        sys.eval_into(&x, u, &mut k1).map_err(wrap)?;
        for i in 0..n {
            stage[i] = x[i] + half * k1[i];
        }
        sys.eval_into(&stage, u, &mut k2).map_err(wrap)?;
        for i in 0..n {
            stage[i] = x[i] + half * k2[i];
        }
        sys.eval_into(&stage, u, &mut k3).map_err(wrap)?;
        for i in 0..n {
            stage[i] = x[i] + step * k3[i];
        }
        sys.eval_into(&stage, u, &mut k4).map_err(wrap)?;
        for i in 0..n {
            x[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        let t_next = (k + 1) as f64 * step;
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_THRESHOLD)) {
            return Err(SystemError::Divergence { time: t_next, threshold: DIVERGENCE_THRESHOLD });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        signal: signal.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// Largest observed `‖f(x,u) - f(y,u)‖ / ‖x - y‖`: a lower bound on the
    /// Lipschitz constant over the box.
    pub value: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub samples: usize,
}

/// Sampled Lipschitz constant of `f(·, u)` over `region`, followed by a
/// coordinate-wise ascent from the best sample.
pub fn lipschitz_estimate<F: VectorField + ?Sized>(
    sys: &F,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate, SystemError> {
    let n = sys.state_dim();
    if region.dim() != n {
        return Err(SystemError::Dimension { what: "region", expected: n, got: region.dim() });
    }
    let m = sys.input_dim();
    let set = sys.input_set();
    let search = region.product(region).product(&set.bounding_box());
    let min_gap = 1e-6 * region.min_width().max(1e-12);

    let ratio = |p: &[f64]| -> Option<f64> {
        let (x, rest) = p.split_at(n);
        let (y, u) = rest.split_at(n);
        if !set.contains(u) {
            return None;
        }
        let gap = euclidean(x, y);
        if gap < min_gap {
            return None;
        }
        let fx = sys.eval(x, u).ok()?;
        let fy = sys.eval(y, u).ok()?;
        Some(euclidean(&fx, &fy) / gap)
    };

    let mut rng = task_rng(seed, Stream::Samples, 0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..samples {
        let mut p = region.sample(&mut rng);
        p.extend(region.sample(&mut rng));
        p.extend(set.sample(&mut rng));
        if let Some(r) = ratio(&p) {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, p));
            }
        }
    }
    let Some((mut value, mut point)) = best else {
        return Ok(LipschitzEstimate { value: 0.0, x: vec![], y: vec![], u: vec![], samples });
    };

    let mut steps: Vec<f64> = search.lo().iter().zip(search.hi()).map(|(l, h)| 0.1 * (h - l)).collect();
    while steps.iter().any(|&s| s > 1e-8) {
        let mut improved = false;
        for i in 0..point.len() {
            if steps[i] <= 1e-8 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut trial = point.clone();
                trial[i] = (trial[i] + dir * steps[i]).clamp(search.lo()[i], search.hi()[i]);
                if let Some(r) = ratio(&trial) {
                    if r > value {
                        value = r;
                        point = trial;
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            for s in &mut steps {
                *s *= 0.5;
            }
        }
    }
    let (x, rest) = point.split_at(n);
    let (y, u) = rest.split_at(n);
    debug_assert_eq!(u.len(), m);
    Ok(LipschitzEstimate {
        value,
        x: x.to_vec(),
        y: y.to_vec(),
        u: u.to_vec(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(field: &str, m: usize, set: InputSet) -> ControlSystem {
        ControlSystem::new("test", 1, m, set, &[field]).unwrap()
    }

    fn unit_box(m: usize) -> InputSet {
        InputSet::Box(BoxRegion::cube(m, -1.0, 1.0).unwrap())
    }

    #[test]
    fn decay_matches_closed_form() {
        let sys = scalar("-x1", 0, InputSet::none());
        let sig = InputSignal::constant(vec![], 1.0, 1.0).unwrap();
        let traj = integrate(&sys, &[1.0], &sig, 1.0, 1e-3).unwrap();
        assert!((traj.final_state()[0] - (-1f64).exp()).abs() < 1e-6);
        assert_eq!(traj.states[0], vec![1.0]);
        assert_eq!(traj.times.len(), 1001);
    }

    #[test]
    fn constant_drift_is_exact() {
        let sys = scalar("-1 + u1", 1, unit_box(1));
        let sig = InputSignal::constant(vec![0.5], 2.0, 0.5).unwrap();
        let traj = integrate(&sys, &[0.0], &sig, 2.0, 1e-3).unwrap();
        assert!((traj.final_state()[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn blow_up_is_reported_near_one() {
        let sys = scalar("x1^2", 0, InputSet::none());
        let sig = InputSignal::constant(vec![], 2.0, 2.0).unwrap();
        match integrate(&sys, &[1.0], &sig, 2.0, 1e-3) {
            Err(SystemError::Divergence { time, .. }) => assert!((0.99..=1.05).contains(&time), "{time}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn integrate_rejects_bad_inputs() {
        let sys = scalar("-1 + u1", 1, unit_box(1));
        let sig = InputSignal::constant(vec![0.5], 1.0, 0.5).unwrap();
        assert!(matches!(integrate(&sys, &[0.0], &sig, 2.0, 1e-3), Err(SystemError::Signal(_))));
        assert!(matches!(integrate(&sys, &[0.0], &sig, 1.0, 0.3), Err(SystemError::Grid(_))));
        assert!(matches!(integrate(&sys, &[0.0], &sig, 1.0, 0.0), Err(SystemError::Grid(_))));
        assert!(matches!(integrate(&sys, &[0.0, 1.0], &sig, 1.0, 1e-3), Err(SystemError::Dimension { .. })));
        let outside = InputSignal::constant(vec![1.5], 1.0, 0.5).unwrap();
        assert!(matches!(
            integrate(&sys, &[0.0], &outside, 1.0, 1e-3),
            Err(SystemError::SignalOutsideInputSet { cell: 0 })
        ));
        let sys = scalar("log(x1)", 0, InputSet::none());
        let sig = InputSignal::constant(vec![], 1.0, 1.0).unwrap();
        assert!(matches!(integrate(&sys, &[-1.0], &sig, 1.0, 0.5), Err(SystemError::NonFiniteField { .. })));
    }

    #[test]
    fn rk4_fourth_order() {
        // error ratio at h vs h/2 on ẋ = -x + u, u = 0.3
        let sys = scalar("-x1 + u1", 1, unit_box(1));
        let sig = InputSignal::constant(vec![0.3], 1.0, 1.0).unwrap();
        let exact = 0.3 + (1.0 - 0.3) * (-1f64).exp();
        let err = |h: f64| (integrate(&sys, &[1.0], &sig, 1.0, h).unwrap().final_state()[0] - exact).abs();
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn repeated_integration_is_bit_identical() {
        let sys = ControlSystem::new("osc", 2, 1, unit_box(1), &["x2", "-sin(x1) - 0.1*x2 + u1"]).unwrap();
        let mut rng = task_rng(1, Stream::Signals, 0);
        let sig = InputSignal::random(sys.input_set(), 5.0, 0.25, &mut rng).unwrap();
        let a = integrate(&sys, &[0.5, -0.2], &sig, 5.0, 1e-2).unwrap();
        let b = integrate(&sys, &[0.5, -0.2], &sig, 5.0, 1e-2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lipschitz_examples() {
        let q = BoxRegion::cube(1, -1.0, 1.0).unwrap();
        let est = lipschitz_estimate(&scalar("-x1", 0, InputSet::none()), &q, 1000, 1).unwrap();
        assert!((est.value - 1.0).abs() <= 0.05);
        let est = lipschitz_estimate(&scalar("-1", 0, InputSet::none()), &q, 1000, 1).unwrap();
        assert_eq!(est.value, 0.0);
        let est = lipschitz_estimate(&scalar("x1^2", 0, InputSet::none()), &q, 1000, 1).unwrap();
        assert!((est.value - 2.0).abs() <= 0.1, "{}", est.value);
    }

    #[test]
    fn sup_norm_examples() {
        let a = InputSignal::new(1.0, vec![vec![0.3], vec![-0.5]]).unwrap();
        let zero = InputSignal::new(1.0, vec![vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(a.sup_norm_diff(&zero).unwrap(), 0.5);
        assert_eq!(a.sup_norm_diff(&a).unwrap(), 0.0);
        let e1 = InputSignal::constant(vec![1.0, 0.0], 2.0, 1.0).unwrap();
        let e2 = InputSignal::constant(vec![0.0, 1.0], 2.0, 1.0).unwrap();
        assert_eq!(e1.sup_norm_diff(&e2).unwrap(), 2f64.sqrt());
        let other_grid = InputSignal::constant(vec![0.0], 2.0, 0.5).unwrap();
        assert!(a.sup_norm_diff(&other_grid).is_err());
    }

    #[test]
    fn sampled_signals_stay_in_input_set() {
        let mut rng = task_rng(3, Stream::Signals, 0);
        for set in [unit_box(2), InputSet::ball(2.0, 3).unwrap(), InputSet::Product(Box::new(unit_box(1)), Box::new(InputSet::ball(1.0, 1).unwrap()))] {
            for _ in 0..50 {
                let sig = InputSignal::random(&set, 10.0, 0.5, &mut rng).unwrap();
                sig.check_membership(&set).unwrap();
            }
        }
    }

    #[test]
    fn system_json_round_trip() {
        let text = r#"{"name":"drift","state_dim":1,"input_dim":1,
            "input_set":{"type":"box","lo":[-0.5],"hi":[0.5]},"field":["-1 + u1"]}"#;
        let spec: SystemSpec = serde_json::from_str(text).unwrap();
        let sys = ControlSystem::from_spec(spec).unwrap();
        assert_eq!(sys.eval(&[0.0], &[0.25]).unwrap(), vec![-0.75]);
        let again = ControlSystem::from_spec(sys.to_spec()).unwrap();
        assert_eq!(again, sys);

        let ball: SystemSpec = serde_json::from_str(
            r#"{"name":"b","state_dim":1,"input_dim":2,"input_set":{"type":"ball","radius":2.0},"field":["u1*u2"]}"#,
        )
        .unwrap();
        let sys = ControlSystem::from_spec(ball).unwrap();
        assert_eq!(sys.input_set().dim(), 2);
    }

    #[test]
    fn system_validation() {
        assert!(matches!(
            ControlSystem::new("s", 1, 1, unit_box(1), &["x1 + y1"]),
            Err(SystemError::FieldVariable(_))
        ));
        assert!(matches!(
            ControlSystem::new("s", 2, 1, unit_box(1), &["x1"]),
            Err(SystemError::FieldLength { .. })
        ));
        assert!(matches!(
            ControlSystem::new("s", 1, 2, unit_box(1), &["x1"]),
            Err(SystemError::InputSetDimension { .. })
        ));
        assert!(matches!(
            ControlSystem::new("s", 1, 1, unit_box(1), &["x1 +"]),
            Err(SystemError::Field { component: 0, .. })
        ));
    }

    #[test]
    fn trajectory_csv() {
        let sys = ControlSystem::new("s", 2, 0, InputSet::none(), &["-x1", "-x2"]).unwrap();
        let sig = InputSignal::constant(vec![], 1.0, 1.0).unwrap();
        let traj = integrate(&sys, &[1.0, 2.0], &sig, 1.0, 0.5).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,x2");
        assert_eq!(lines[1], "0,1,2");
        assert_eq!(lines.len(), 4);
    }
}
