//! Projection onto the input set and the two augmented systems on `ℝ²ⁿ`
//! whose stability with respect to the diagonal encodes incremental
//! stability of the base system.

use serde::Serialize;

use crate::comparison::KInfFn;
use crate::expr::{Expr, Var, VarKind};
use crate::metric::Metric;
use crate::system::{
    integrate, ControlSystem, InputSet, InputSetSpec, InputSignal, SystemError, Trajectory, VectorField,
};

/// Euclidean projection onto `set`. Points already in the set are returned
/// unchanged.
pub fn sat(u: &[f64], set: &InputSet) -> Vec<f64> {
    let mut out = u.to_vec();
    sat_into(&mut out, set);
    out
}

pub fn sat_into(u: &mut [f64], set: &InputSet) {
    match set {
        InputSet::Box(region) => region.clamp(u),
        InputSet::Ball { radius, .. } => {
            let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !set.contains(u) {
                for a in u.iter_mut() {
                    *a = *a * radius / norm;
                }
            }
        }
        InputSet::Product(a, b) => {
            let (head, tail) = u.split_at_mut(a.dim());
            sat_into(head, a);
            sat_into(tail, b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Both copies driven by the same input.
    Gas,
    /// Inputs `sat(ω₁ ± ρ(d(ξ₁,ξ₂))·ω₂)` with `ω ∈ U × B₁(0)`.
    Iss { metric: Metric, rho: KInfFn },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    base: ControlSystem,
    mode: Mode,
    input_set: InputSet,
}

pub fn augment_gas(sys: &ControlSystem) -> AugmentedSystem {
    AugmentedSystem {
        base: sys.clone(),
        mode: Mode::Gas,
        input_set: sys.input_set().clone(),
    }
}

pub fn augment_iss(sys: &ControlSystem, metric: &Metric, rho: &KInfFn) -> Result<AugmentedSystem, SystemError> {
    metric.check_dim(sys.state_dim())?;
    let m = sys.input_dim();
    let disturbance = InputSet::Product(Box::new(sys.input_set().clone()), Box::new(InputSet::ball(1.0, m)?));
    Ok(AugmentedSystem {
        base: sys.clone(),
        mode: Mode::Iss {
            metric: metric.clone(),
            rho: *rho,
        },
        input_set: disturbance,
    })
}

impl AugmentedSystem {
    pub fn base(&self) -> &ControlSystem {
        &self.base
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    /// The inputs fed to the two copies at state `z` and augmented input `w`.
    pub fn copy_inputs(&self, z: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SystemError> {
        match &self.mode {
            Mode::Gas => Ok((w.to_vec(), w.to_vec())),
            Mode::Iss { metric, rho } => {
                let n = self.base.state_dim();
                let m = self.base.input_dim();
                let scale = rho.apply(metric.dist(&z[..n], &z[n..])?);
                let (w1, w2) = w.split_at(m);
                let set = self.base.input_set();
                let plus: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a + scale * b).collect();
                let minus: Vec<f64> = w1.iter().zip(w2).map(|(a, b)| a - scale * b).collect();
                Ok((sat(&plus, set), sat(&minus, set)))
            }
        }
    }

    /// JSON description. Gas mode yields an ordinary system file; iss mode
    /// names the copy inputs `u` and `v` and records how they are formed.
    pub fn to_spec(&self) -> AugmentedSpec {
        let n = self.base.state_dim();
        let m = self.base.input_dim();
        let shift = |second_input: VarKind| {
            move |v: Var| match v.kind {
                VarKind::X => Expr::var(Var::x(v.index + n)),
                VarKind::U => Expr::var(Var::new(second_input, v.index)),
                _ => Expr::var(v),
            }
        };
        let mut field: Vec<String> = self.base.field().iter().map(ToString::to_string).collect();
        let (mode, second, sat_nodes, rho_dist) = match &self.mode {
            Mode::Gas => ("gas", VarKind::U, None, None),
            Mode::Iss { metric, rho } => {
                let arg = |sign: char| -> Vec<String> {
                    (1..=m).map(|j| format!("omega1_{j} {sign} rho_dist*omega2_{j}")).collect()
                };
                let set: InputSetSpec = self.base.input_set().clone().into();
                let sats = vec![
                    SatNode {
                        target: "u".into(),
                        set: set.clone(),
                        arg: arg('+'),
                    },
                    SatNode {
                        target: "v".into(),
                        set,
                        arg: arg('-'),
                    },
                ];
                let rd = RhoDistNode {
                    rho: *rho,
                    metric: metric.clone(),
                    between: [
                        (1..=n).map(|i| format!("x{i}")).collect(),
                        (n + 1..=2 * n).map(|i| format!("x{i}")).collect(),
                    ],
                };
                ("iss", VarKind::V, Some(sats), Some(rd))
            }
        };
        field.extend(self.base.field().iter().map(|e| e.substitute(&shift(second)).to_string()));
        AugmentedSpec {
            name: format!("{}_{mode}_augmented", self.base.name()),
            mode: mode.into(),
            state_dim: 2 * n,
            input_dim: self.input_set.dim(),
            input_set: self.input_set.clone().into(),
            field,
            sat: sat_nodes,
            rho_dist,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentedSpec {
    pub name: String,
    pub mode: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub input_set: InputSetSpec,
    pub field: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sat: Option<Vec<SatNode>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_dist: Option<RhoDistNode>,
}

/// `target = sat_set(arg)`, componentwise in `arg`.
#[derive(Debug, Clone, Serialize)]
pub struct SatNode {
    pub target: String,
    pub set: InputSetSpec,
    pub arg: Vec<String>,
}

/// `rho_dist = rho(d(between[0], between[1]))`.
#[derive(Debug, Clone, Serialize)]
pub struct RhoDistNode {
    pub rho: KInfFn,
    pub metric: Metric,
    pub between: [Vec<String>; 2],
}

impl VectorField for AugmentedSystem {
    fn state_dim(&self) -> usize {
        2 * self.base.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.input_set.dim()
    }

    fn input_set(&self) -> &InputSet {
        &self.input_set
    }

    fn eval_into(&self, z: &[f64], w: &[f64], out: &mut [f64]) -> Result<(), SystemError> {
        let n = self.base.state_dim();
        if z.len() != 2 * n {
            return Err(SystemError::Dimension { what: "state", expected: 2 * n, got: z.len() });
        }
        if w.len() != self.input_dim() {
            return Err(SystemError::Dimension { what: "input", expected: self.input_dim(), got: w.len() });
        }
        let (o1, o2) = out.split_at_mut(n);
        match &self.mode {
            Mode::Gas => {
                self.base.eval_into(&z[..n], w, o1)?;
                self.base.eval_into(&z[n..], w, o2)
            }
            Mode::Iss { .. } => {
                let (a, b) = self.copy_inputs(z, w)?;
                self.base.eval_into(&z[..n], &a, o1)?;
                self.base.eval_into(&z[n..], &b, o2)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTrajectory {
    pub trajectory: Trajectory,
    /// `d(ξ₁(t_k), ξ₂(t_k))`, the distance of the state to the diagonal.
    pub diag_trace: Vec<f64>,
}

pub fn integrate_augmented(
    asys: &AugmentedSystem,
    z0: &[f64],
    signal: &InputSignal,
    horizon: f64,
    step: f64,
    metric: &Metric,
) -> Result<AugmentedTrajectory, SystemError> {
    metric.check_dim(asys.base.state_dim())?;
    let trajectory = integrate(asys, z0, signal, horizon, step)?;
    let diag_trace = trajectory
        .states
        .iter()
        .map(|z| metric.diag_dist(z))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AugmentedTrajectory { trajectory, diag_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BoxRegion;
    use crate::rng::{task_rng, Stream};
    use rand::Rng;

    fn unit_box(m: usize) -> InputSet {
        InputSet::Box(BoxRegion::cube(m, -1.0, 1.0).unwrap())
    }

    fn linear() -> ControlSystem {
        ControlSystem::new("linear", 1, 1, unit_box(1), &["-x1 + u1"]).unwrap()
    }

    #[test]
    fn sat_examples() {
        assert_eq!(sat(&[1.5], &unit_box(1)), vec![1.0]);
        assert_eq!(sat(&[0.3], &unit_box(1)), vec![0.3]);
        let ball = InputSet::ball(2.0, 2).unwrap();
        let p = sat(&[3.0, 4.0], &ball);
        assert!((p[0] - 1.2).abs() < 1e-15 && (p[1] - 1.6).abs() < 1e-15, "{p:?}");
        assert_eq!(sat(&[0.0, 0.0], &ball), vec![0.0, 0.0]);
    }

    #[test]
    fn sat_is_the_argmin() {
        // grid search over the box and sampled search over the ball
        let mut rng = task_rng(4, Stream::Samples, 0);
        let bx = BoxRegion::new(vec![-1.0, 0.0], vec![1.0, 0.5]).unwrap();
        let set = InputSet::Box(bx.clone());
        let ball = InputSet::ball(1.5, 2).unwrap();
        for _ in 0..20 {
            let u = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            for s in [&set, &ball] {
                let p = sat(&u, s);
                let dp = ((p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2)).sqrt();
                for _ in 0..2000 {
                    let q = s.sample(&mut rng);
                    let dq = ((q[0] - u[0]).powi(2) + (q[1] - u[1]).powi(2)).sqrt();
                    assert!(dp <= dq + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sat_nonexpansive_and_idempotent() {
        let mut rng = task_rng(5, Stream::Samples, 0);
        let sets = [unit_box(3), InputSet::ball(1.0, 3).unwrap()];
        for set in &sets {
            for _ in 0..100_000 {
                let a: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
                let (pa, pb) = (sat(&a, set), sat(&b, set));
                let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                assert!(d(&pa, &pb) <= d(&a, &b) * (1.0 + 1e-12) + 1e-15);
                assert_eq!(sat(&pa, set), pa);
            }
        }
    }

    #[test]
    fn gas_field_stacks() {
        let asys = augment_gas(&linear());
        assert_eq!(asys.state_dim(), 2);
        assert_eq!(asys.eval(&[1.0, -2.0], &[0.5]).unwrap(), vec![-0.5, 2.5]);
        let spec = asys.to_spec();
        assert_eq!(spec.field, vec!["-x1+u1", "-x2+u1"]);
    }

    #[test]
    fn gas_mode_decouples_bitwise() {
        let sys = ControlSystem::new("osc", 2, 1, unit_box(1), &["x2", "-sin(x1) - 0.2*x2 + u1"]).unwrap();
        let asys = augment_gas(&sys);
        let mut rng = task_rng(9, Stream::Signals, 0);
        let sig = InputSignal::random(sys.input_set(), 4.0, 0.5, &mut rng).unwrap();
        let joint = integrate(&asys, &[0.3, -0.1, -1.0, 0.7], &sig, 4.0, 1e-2).unwrap();
        let a = integrate(&sys, &[0.3, -0.1], &sig, 4.0, 1e-2).unwrap();
        let b = integrate(&sys, &[-1.0, 0.7], &sig, 4.0, 1e-2).unwrap();
        for k in 0..joint.states.len() {
            assert_eq!(joint.states[k][..2], a.states[k][..]);
            assert_eq!(joint.states[k][2..], b.states[k][..]);
        }
    }

    #[test]
    fn iss_field_hand_example() {
        let asys = augment_iss(&linear(), &Metric::Euclidean, &KInfFn::linear(1.0 / 16.0).unwrap()).unwrap();
        assert_eq!(asys.input_dim(), 2);
        let f = asys.eval(&[0.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!(f, vec![0.125, -2.125]);
    }

    #[test]
    fn iss_with_zero_disturbance_matches_gas() {
        let sys = linear();
        let iss = augment_iss(&sys, &Metric::Euclidean, &KInfFn::linear(0.25).unwrap()).unwrap();
        let gas = augment_gas(&sys);
        let w1 = InputSignal::new(0.5, vec![vec![0.3], vec![-0.8], vec![0.1], vec![1.0]]).unwrap();
        let w = InputSignal::new(0.5, w1.values().iter().map(|u| vec![u[0], 0.0]).collect()).unwrap();
        let a = integrate(&iss, &[1.0, -1.0], &w, 2.0, 1e-2).unwrap();
        let b = integrate(&gas, &[1.0, -1.0], &w1, 2.0, 1e-2).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn diagonal_is_invariant() {
        let sys = ControlSystem::new("osc", 2, 1, unit_box(1), &["x2", "-sin(x1) - 0.2*x2 + u1"]).unwrap();
        let metric = Metric::Euclidean;
        let mut rng = task_rng(11, Stream::Signals, 0);
        for asys in [
            augment_gas(&sys),
            augment_iss(&sys, &metric, &KInfFn::linear(0.1).unwrap()).unwrap(),
        ] {
            let sig = InputSignal::random(asys.input_set(), 5.0, 0.5, &mut rng).unwrap();
            let run = integrate_augmented(&asys, &[0.4, -0.3, 0.4, -0.3], &sig, 5.0, 1e-2, &metric).unwrap();
            assert!(run.diag_trace.iter().all(|&d| d <= 1e-9));
        }
    }

    #[test]
    fn gas_trace_decays_exponentially() {
        let sys = ControlSystem::new("decay", 1, 0, InputSet::none(), &["-x1"]).unwrap();
        let sig = InputSignal::constant(vec![], 3.0, 3.0).unwrap();
        let run = integrate_augmented(&augment_gas(&sys), &[0.0, 2.0], &sig, 3.0, 1e-3, &Metric::Euclidean).unwrap();
        for (t, d) in run.trajectory.times.iter().zip(&run.diag_trace) {
            assert!((d - 2.0 * (-t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn iss_rejects_signals_outside_d() {
        let asys = augment_iss(&linear(), &Metric::Euclidean, &KInfFn::linear(0.1).unwrap()).unwrap();
        let bad = InputSignal::constant(vec![0.0, 1.5], 1.0, 1.0).unwrap();
        assert!(matches!(
            integrate(&asys, &[0.0, 1.0], &bad, 1.0, 0.1),
            Err(SystemError::SignalOutsideInputSet { .. })
        ));
    }

    #[test]
    fn iss_spec_names_the_construction() {
        let asys = augment_iss(&linear(), &Metric::Euclidean, &KInfFn::linear(0.5).unwrap()).unwrap();
        let spec = asys.to_spec();
        assert_eq!(spec.field, vec!["-x1+u1", "-x2+v1"]);
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["sat"][0]["arg"][0], "omega1_1 + rho_dist*omega2_1");
        assert_eq!(json["sat"][1]["target"], "v");
        assert_eq!(json["rho_dist"]["metric"]["kind"], "euclidean");
        assert_eq!(json["input_set"]["type"], "product");
    }
}
