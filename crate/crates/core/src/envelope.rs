//! Empirical KL envelopes and ISS gains fitted to simulated trajectory
//! ensembles.
//!
//! Envelopes are `β(r, t) = c·r·e^(-λt)`. The amplification `c` is the
//! smallest value covering every observed ratio `d(t)/d(0)`, and `λ` is the
//! largest rate for which `c·e^(-λt)` still dominates every ratio. Results are
//! evidence from samples, not proofs.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::augment::{integrate_augmented, AugmentedSystem};
use crate::comparison::{construct_rho, ComparisonError, KInfFn, KLFn};
use crate::domain::BoxRegion;
use crate::metric::{Metric, MetricError};
use crate::rng::{task_rng, Stream};
use crate::system::{integrate, InputSet, InputSignal, SystemError, VectorField};

pub const C_MAX: f64 = 1e3;
pub const LAMBDA_MIN: f64 = 1e-3;
pub const LAMBDA_MAX: f64 = 10.0;
/// Fitted rates are rounded down to this lattice so that tiny integration
/// noise never lets an envelope undercut the data.
pub const LAMBDA_QUANTUM: f64 = 1e-6;
pub const DOMINATION_TOLERANCE: f64 = 1e-9;
pub const MIN_PAIRS: usize = 50;
const EVIDENCE: &str = "empirical, sampled";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("ensemble needs at least {MIN_PAIRS} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("pair {pair}: {source}")]
    Trajectory { pair: usize, source: SystemError },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSpec {
    pub pairs: usize,
    pub horizon: f64,
    pub step: f64,
    /// Cell length of random piecewise-constant signals.
    pub cell: f64,
    /// Box for the first initial state of each pair.
    pub region: BoxRegion,
    /// Initial offsets are log-uniform within three consecutive decades
    /// starting here, one decade per pair in rotation.
    pub r0_min: f64,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        EnsembleSpec {
            pairs: 100,
            horizon: 10.0,
            step: 1e-2,
            cell: 0.5,
            region: BoxRegion::cube(n, -2.0, 2.0).expect("valid cube"),
            r0_min: 1e-2,
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<(), EnvelopeError> {
        if self.pairs < MIN_PAIRS {
            return Err(EnvelopeError::TooFewPairs(self.pairs));
        }
        if self.region.dim() != n {
            return Err(EnvelopeError::Invalid(format!(
                "region has dimension {}, state dimension is {n}",
                self.region.dim()
            )));
        }
        if !(self.cell.is_finite() && self.cell > 0.0 && self.r0_min.is_finite() && self.r0_min > 0.0) {
            return Err(EnvelopeError::Invalid("cell and r0_min must be positive".into()));
        }
        Ok(())
    }

    /// Initial pair for index `i`: `x` uniform in the region, `y = x + r·e`
    /// with `e` a random unit direction.
    fn initial_pair(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = task_rng(self.seed, Stream::InitialStates, i as u64);
        let x = self.region.sample(&mut rng);
        let decade = (i % 3) as f64;
        let r = self.r0_min * 10f64.powf(decade + rng.random::<f64>());
        let dir = InputSet::Ball { radius: 1.0, dim: x.len() };
        let y = loop {
            let e = dir.sample(&mut rng);
            let len = e.iter().map(|a| a * a).sum::<f64>().sqrt();
            if len > 1e-3 || x.is_empty() {
                break x.iter().zip(&e).map(|(a, b)| a + r * b / len.max(f64::MIN_POSITIVE)).collect();
            }
        };
        (x, y)
    }
}

/// Distance samples along one simulated pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairTrace {
    pub pair: usize,
    pub r0: f64,
    /// `‖υ - υ'‖∞` (zero for shared inputs).
    pub input_gap: f64,
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    pub traces: Vec<PairTrace>,
}

impl Ensemble {
    /// CSV with header `pair_id,t,r0,distance`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "pair_id,t,r0,distance")?;
        for tr in &self.traces {
            for (t, d) in tr.times.iter().zip(&tr.distances) {
                writeln!(w, "{},{t},{},{d}", tr.pair, tr.r0)?;
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.traces.iter().map(|t| t.times.len()).sum()
    }

    /// Keep only the first `pairs` traces.
    pub fn truncated(&self, pairs: usize) -> Ensemble {
        Ensemble {
            spec: EnsembleSpec { pairs, ..self.spec.clone() },
            traces: self.traces[..pairs.min(self.traces.len())].to_vec(),
        }
    }
}

/// Every fourth pair is driven by a constant vertex input (for box input
/// sets), the rest by random piecewise-constant signals.
fn vertex_slot(i: usize) -> Option<usize> {
    i.is_multiple_of(4).then_some(i / 4)
}

fn run_pairs<F>(spec: &EnsembleSpec, f: F) -> Result<Vec<PairTrace>, EnvelopeError>
where
    F: Fn(usize) -> Result<PairTrace, EnvelopeError> + Sync + Send,
{
    (0..spec.pairs).into_par_iter().map(f).collect()
}

fn distances(metric: &Metric, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>, MetricError> {
    a.iter().zip(b).map(|(x, y)| metric.dist(x, y)).collect()
}

/// Pairs sharing one input signal.
pub fn gas_ensemble(sys: &dyn VectorField, metric: &Metric, spec: &EnsembleSpec) -> Result<Ensemble, EnvelopeError> {
    spec.validate(sys.state_dim())?;
    metric.check_dim(sys.state_dim())?;
    let traces = run_pairs(spec, |i| {
        let (x, y) = spec.initial_pair(i);
        let mut rng = task_rng(spec.seed, Stream::Signals, i as u64);
        let sig = match vertex_slot(i).zip(sys.input_set().vertices()) {
            Some((k, vs)) => InputSignal::constant(vs[k % vs.len()].clone(), spec.horizon, spec.cell)?,
            None => InputSignal::random(sys.input_set(), spec.horizon, spec.cell, &mut rng)?,
        };
        let wrap = |source| EnvelopeError::Trajectory { pair: i, source };
        let a = integrate(sys, &x, &sig, spec.horizon, spec.step).map_err(wrap)?;
        let b = integrate(sys, &y, &sig, spec.horizon, spec.step).map_err(wrap)?;
        let d = distances(metric, &a.states, &b.states)?;
        Ok(PairTrace {
            pair: i,
            r0: d[0],
            input_gap: 0.0,
            times: a.times,
            distances: d,
        })
    })?;
    Ok(Ensemble { spec: spec.clone(), traces })
}

/// Pairs with distinct input signals: constant vertex pairs, constant random
/// pairs and random piecewise-constant pairs in rotation.
pub fn iss_ensemble(sys: &dyn VectorField, metric: &Metric, spec: &EnsembleSpec) -> Result<Ensemble, EnvelopeError> {
    spec.validate(sys.state_dim())?;
    metric.check_dim(sys.state_dim())?;
    let set = sys.input_set();
    let traces = run_pairs(spec, |i| {
        let (x, y) = spec.initial_pair(i);
        let mut rng = task_rng(spec.seed, Stream::Signals, i as u64);
        let (sa, sb) = match (i % 3, set.vertices()) {
            (0, Some(vs)) => {
                let k = i / 3;
                (
                    InputSignal::constant(vs[k % vs.len()].clone(), spec.horizon, spec.cell)?,
                    InputSignal::constant(vs[(k + 1) % vs.len()].clone(), spec.horizon, spec.cell)?,
                )
            }
            (1, _) => {
                let (u, v) = (set.sample(&mut rng), set.sample(&mut rng));
                (
                    InputSignal::constant(u, spec.horizon, spec.cell)?,
                    InputSignal::constant(v, spec.horizon, spec.cell)?,
                )
            }
            _ => (
                InputSignal::random(set, spec.horizon, spec.cell, &mut rng)?,
                InputSignal::random(set, spec.horizon, spec.cell, &mut rng)?,
            ),
        };
        let wrap = |source| EnvelopeError::Trajectory { pair: i, source };
        let a = integrate(sys, &x, &sa, spec.horizon, spec.step).map_err(wrap)?;
        let b = integrate(sys, &y, &sb, spec.horizon, spec.step).map_err(wrap)?;
        let d = distances(metric, &a.states, &b.states)?;
        Ok(PairTrace {
            pair: i,
            r0: d[0],
            input_gap: sa.sup_norm_diff(&sb)?,
            times: a.times,
            distances: d,
        })
    })?;
    Ok(Ensemble { spec: spec.clone(), traces })
}

/// Diagonal-distance traces of an augmented system over random signals in
/// its input space. `spec.region` is the box for the first copy.
pub fn ugas_ensemble(asys: &AugmentedSystem, metric: &Metric, spec: &EnsembleSpec) -> Result<Ensemble, EnvelopeError> {
    let n = asys.base().state_dim();
    spec.validate(n)?;
    let traces = run_pairs(spec, |i| {
        let (x, y) = spec.initial_pair(i);
        let z0: Vec<f64> = x.into_iter().chain(y).collect();
        let mut rng = task_rng(spec.seed, Stream::Signals, i as u64);
        let sig = InputSignal::random(asys.input_set(), spec.horizon, spec.cell, &mut rng)?;
        let run = integrate_augmented(asys, &z0, &sig, spec.horizon, spec.step, metric)
            .map_err(|source| EnvelopeError::Trajectory { pair: i, source })?;
        Ok(PairTrace {
            pair: i,
            r0: run.diag_trace[0],
            input_gap: 0.0,
            times: run.trajectory.times,
            distances: run.diag_trace,
        })
    })?;
    Ok(Ensemble { spec: spec.clone(), traces })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeFit {
    pub exists: bool,
    pub verdict: String,
    pub beta: Option<KLFn>,
    pub c: Option<f64>,
    pub lambda: Option<f64>,
    /// Largest observed amplification `d(t)/d(0)`.
    pub max_amplification: f64,
    /// `max (distance - β(r0, t))` over the ensemble; at most the domination
    /// tolerance when an envelope exists.
    pub max_violation: Option<f64>,
    pub pairs: usize,
    pub samples: usize,
    pub seed: u64,
    pub horizon: f64,
    pub step: f64,
    pub evidence: String,
}

fn no_envelope(ensemble: &Ensemble, amplification: f64, reason: &str) -> EnvelopeFit {
    EnvelopeFit {
        exists: false,
        verdict: format!("no envelope in family: {reason}"),
        beta: None,
        c: None,
        lambda: None,
        max_amplification: amplification,
        max_violation: None,
        pairs: ensemble.traces.len(),
        samples: ensemble.samples(),
        seed: ensemble.spec.seed,
        horizon: ensemble.spec.horizon,
        step: ensemble.spec.step,
        evidence: EVIDENCE.into(),
    }
}

/// Fit `c·r·e^(-λt)` to every `(r0, t, distance)` sample.
pub fn fit_envelope(ensemble: &Ensemble) -> EnvelopeFit {
    let mut amplification: f64 = 1.0;
    for tr in &ensemble.traces {
        if tr.r0 == 0.0 {
            if tr.distances.iter().any(|&d| d > DOMINATION_TOLERANCE) {
                return no_envelope(ensemble, f64::INFINITY, "a pair starting at distance zero separated");
            }
            continue;
        }
        for &d in &tr.distances {
            amplification = amplification.max(d / tr.r0);
        }
    }
    if amplification > C_MAX {
        return no_envelope(ensemble, amplification, "amplification exceeds the bound on c");
    }
    let c = amplification;
    let mut lambda = LAMBDA_MAX;
    for tr in ensemble.traces.iter().filter(|tr| tr.r0 > 0.0) {
        for (&t, &d) in tr.times.iter().zip(&tr.distances) {
            if t > 0.0 && d > 0.0 {
                lambda = lambda.min((c.ln() - (d / tr.r0).ln()) / t);
            }
        }
    }
    let lambda = (lambda / LAMBDA_QUANTUM).floor() / LAMBDA_QUANTUM.recip();
    if lambda < LAMBDA_MIN {
        return no_envelope(ensemble, amplification, "distances do not decay");
    }
    let beta = KLFn::linear_exp(c, lambda).expect("positive parameters");
    let max_violation = ensemble
        .traces
        .iter()
        .flat_map(|tr| tr.times.iter().zip(&tr.distances).map(move |(&t, &d)| d - beta.apply(tr.r0, t)))
        .fold(f64::NEG_INFINITY, f64::max);
    EnvelopeFit {
        exists: true,
        verdict: "envelope".into(),
        beta: Some(beta),
        c: Some(c),
        lambda: Some(lambda),
        max_amplification: amplification,
        max_violation: Some(max_violation),
        pairs: ensemble.traces.len(),
        samples: ensemble.samples(),
        seed: ensemble.spec.seed,
        horizon: ensemble.spec.horizon,
        step: ensemble.spec.step,
        evidence: EVIDENCE.into(),
    }
}

pub fn estimate_gas_envelope(
    sys: &dyn VectorField,
    metric: &Metric,
    spec: &EnsembleSpec,
) -> Result<(EnvelopeFit, Ensemble), EnvelopeError> {
    let ensemble = gas_ensemble(sys, metric, spec)?;
    Ok((fit_envelope(&ensemble), ensemble))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainFit {
    pub exists: bool,
    pub verdict: String,
    /// Sum form `d ≤ β + γ(gap)`; `None` with `exists` means a zero gain suffices.
    pub gamma: Option<KInfFn>,
    /// Max form `d ≤ max{β, γ̃(gap)}`, fitted separately.
    pub gamma_max_form: Option<KInfFn>,
    pub max_violation_sum: Option<f64>,
    pub max_violation_max_form: Option<f64>,
    pub beta: KLFn,
    pub pairs: usize,
    pub samples: usize,
    pub seed: u64,
    pub evidence: String,
}

/// Fit the smallest `γ(r) = c·r^p` over the powers given (by `c`, then `p`)
/// such that every sample satisfies the sum-form bound.
pub fn fit_gain(ensemble: &Ensemble, beta: &KLFn, powers: &[f64]) -> Result<GainFit, EnvelopeError> {
    if powers.is_empty() || powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(EnvelopeError::Invalid("gain powers must be positive".into()));
    }
    let samples: Vec<(f64, f64, f64)> = ensemble
        .traces
        .iter()
        .flat_map(|tr| {
            tr.times
                .iter()
                .zip(&tr.distances)
                .map(move |(&t, &d)| (tr.input_gap, d, beta.apply(tr.r0, t)))
        })
        .collect();
    let base = GainFit {
        exists: false,
        verdict: String::new(),
        gamma: None,
        gamma_max_form: None,
        max_violation_sum: None,
        max_violation_max_form: None,
        beta: *beta,
        pairs: ensemble.traces.len(),
        samples: samples.len(),
        seed: ensemble.spec.seed,
        evidence: EVIDENCE.into(),
    };
    if samples.iter().any(|&(w, d, b)| w == 0.0 && d > b + DOMINATION_TOLERANCE) {
        return Ok(GainFit {
            verdict: "no gain in family: β is exceeded with identical inputs".into(),
            ..base
        });
    }

    // (c, p) for each form, chosen by smallest c then smallest p
    let pick = |need: &dyn Fn(f64, f64, f64, f64) -> f64| -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        let mut ps = powers.to_vec();
        ps.sort_by(f64::total_cmp);
        for p in ps {
            let c = samples
                .iter()
                .filter(|s| s.0 > 0.0)
                .map(|&(w, d, b)| need(w.powf(p), d, b, p))
                .fold(0.0, f64::max);
            if best.is_none_or(|(bc, _)| c < bc) {
                best = Some((c, p));
            }
        }
        best
    };
    let gain = |(c, p): (f64, f64)| -> Option<KInfFn> { (c > 0.0).then(|| KInfFn::power(c, p).expect("positive")) };
    let eval = |g: &Option<KInfFn>, w: f64| g.as_ref().map_or(0.0, |g| g.apply(w));

    let sum = pick(&|wp, d, b, _| (d - b) / wp).expect("non-empty powers");
    let max_form = pick(&|wp, d, b, _| if d > b + DOMINATION_TOLERANCE { d / wp } else { 0.0 }).expect("non-empty powers");
    if sum.0 > C_MAX {
        return Ok(GainFit {
            verdict: format!("no gain in family: coefficient {} exceeds {C_MAX}", sum.0),
            ..base
        });
    }
    let gamma = gain(sum);
    let gamma_max_form = gain(max_form);
    let max_violation_sum = samples.iter().map(|&(w, d, b)| d - b - eval(&gamma, w)).fold(f64::NEG_INFINITY, f64::max);
    let max_violation_max_form = samples
        .iter()
        .map(|&(w, d, b)| d - b.max(eval(&gamma_max_form, w)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(GainFit {
        exists: true,
        verdict: "gain".into(),
        gamma,
        gamma_max_form,
        max_violation_sum: Some(max_violation_sum),
        max_violation_max_form: Some(max_violation_max_form),
        ..base
    })
}

pub fn estimate_iss_gain(
    sys: &dyn VectorField,
    metric: &Metric,
    beta: &KLFn,
    spec: &EnsembleSpec,
    powers: &[f64],
) -> Result<(GainFit, Ensemble), EnvelopeError> {
    let ensemble = iss_ensemble(sys, metric, spec)?;
    Ok((fit_gain(&ensemble, beta, powers)?, ensemble))
}

/// Envelope of the diagonal distance of an augmented system.
pub fn validate_ugas(asys: &AugmentedSystem, metric: &Metric, spec: &EnsembleSpec) -> Result<(EnvelopeFit, Ensemble), EnvelopeError> {
    let ensemble = ugas_ensemble(asys, metric, spec)?;
    Ok((fit_envelope(&ensemble), ensemble))
}

/// `ρ` for fitted `β`, `γ`. The fitted envelope typically has `β(r, 0) = r`
/// exactly, which the construction rejects, so `β` is first doubled (still a
/// valid envelope).
pub fn rho_from_fit(beta: &KLFn, gamma: &KInfFn) -> Result<KInfFn, EnvelopeError> {
    Ok(construct_rho(&beta.scaled(2.0)?, gamma)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::augment_iss;
    use crate::system::ControlSystem;

    fn unit_box(m: usize) -> InputSet {
        InputSet::Box(BoxRegion::cube(m, -1.0, 1.0).unwrap())
    }

    fn drift() -> ControlSystem {
        let set = InputSet::Box(BoxRegion::cube(1, -0.5, 0.5).unwrap());
        ControlSystem::new("drift", 1, 1, set, &["-1 + u1"]).unwrap()
    }

    fn linear() -> ControlSystem {
        ControlSystem::new("linear", 1, 1, unit_box(1), &["-x1 + u1"]).unwrap()
    }

    fn assert_dominates(fit: &EnvelopeFit, ens: &Ensemble) {
        let beta = fit.beta.unwrap();
        for tr in &ens.traces {
            for (&t, &d) in tr.times.iter().zip(&tr.distances) {
                assert!(d <= beta.apply(tr.r0, t) + DOMINATION_TOLERANCE);
            }
        }
    }

    #[test]
    fn decay_fit() {
        let sys = ControlSystem::new("decay", 1, 0, InputSet::none(), &["-x1"]).unwrap();
        let (fit, ens) = estimate_gas_envelope(&sys, &Metric::Euclidean, &EnsembleSpec::new(1, 1)).unwrap();
        assert!(fit.exists);
        let (c, l) = (fit.c.unwrap(), fit.lambda.unwrap());
        assert!((0.9..=1.0).contains(&l), "{l}");
        assert!((1.0..=1.1).contains(&c), "{c}");
        assert_dominates(&fit, &ens);
    }

    #[test]
    fn drift_fits_depend_on_the_metric() {
        let spec = EnsembleSpec::new(1, 2);
        let pull = Metric::pullback(&["exp(x1)"]).unwrap();
        let (fit, ens) = estimate_gas_envelope(&drift(), &pull, &spec).unwrap();
        let l = fit.lambda.unwrap();
        assert!((0.45..=0.5).contains(&l), "{l}");
        assert_dominates(&fit, &ens);
        let (fit, _) = estimate_gas_envelope(&drift(), &Metric::Euclidean, &spec).unwrap();
        assert!(!fit.exists);
        assert!(fit.verdict.starts_with("no envelope in family"));
    }

    #[test]
    fn linear_gain_close_to_identity() {
        let sys = linear();
        let spec = EnsembleSpec::new(1, 3);
        let (gas, _) = estimate_gas_envelope(&sys, &Metric::Euclidean, &spec).unwrap();
        let beta = gas.beta.unwrap();
        let (gain, ens) = estimate_iss_gain(&sys, &Metric::Euclidean, &beta, &spec, &[1.0]).unwrap();
        assert!(gain.exists);
        let gamma = gain.gamma.unwrap();
        assert!((gamma.apply(1.0) - 1.0).abs() <= 0.15, "{gamma:?}");
        assert!(gain.max_violation_sum.unwrap() <= DOMINATION_TOLERANCE);
        assert!(gain.max_violation_max_form.unwrap() <= DOMINATION_TOLERANCE);
        // the sum form covers the max-form bound pointwise
        let tilde = gain.gamma_max_form.unwrap();
        for tr in &ens.traces {
            for (&t, &d) in tr.times.iter().zip(&tr.distances) {
                let b = beta.apply(tr.r0, t);
                assert!(d <= b.max(tilde.apply(tr.input_gap)) + DOMINATION_TOLERANCE);
                assert!(d <= b + gamma.apply(tr.input_gap) + DOMINATION_TOLERANCE);
            }
        }
    }

    #[test]
    fn identical_signals_need_no_gain() {
        let sys = linear();
        let spec = EnsembleSpec::new(1, 4);
        let (gas, ens) = estimate_gas_envelope(&sys, &Metric::Euclidean, &spec).unwrap();
        let gain = fit_gain(&ens, &gas.beta.unwrap(), &[1.0]).unwrap();
        assert!(gain.exists && gain.gamma.is_none());
    }

    #[test]
    fn iss_fit_specializes_to_gas() {
        // shared-signal pairs pass against the β fitted on the ISS data
        let sys = linear();
        let spec = EnsembleSpec::new(1, 5);
        let (gas, _) = estimate_gas_envelope(&sys, &Metric::Euclidean, &spec).unwrap();
        let beta = gas.beta.unwrap();
        let shared = gas_ensemble(&sys, &Metric::Euclidean, &EnsembleSpec::new(1, 6)).unwrap();
        let g = fit_gain(&shared, &beta, &[1.0]).unwrap();
        assert!(g.exists && g.gamma.is_none());
    }

    #[test]
    fn augmented_linear_system_has_an_envelope() {
        let sys = linear();
        let spec = EnsembleSpec::new(1, 7);
        let (gas, _) = estimate_gas_envelope(&sys, &Metric::Euclidean, &spec).unwrap();
        let beta = gas.beta.unwrap();
        let (gain, _) = estimate_iss_gain(&sys, &Metric::Euclidean, &beta, &spec, &[1.0]).unwrap();
        let rho = rho_from_fit(&beta, &gain.gamma.unwrap()).unwrap();
        let asys = augment_iss(&sys, &Metric::Euclidean, &rho).unwrap();
        let (fit, ens) = validate_ugas(&asys, &Metric::Euclidean, &EnsembleSpec { pairs: 200, ..spec }).unwrap();
        assert!(fit.exists && fit.lambda.unwrap() > 0.0, "{fit:?}");
        assert_dominates(&fit, &ens);
    }

    #[test]
    fn fit_is_monotone_in_the_ensemble() {
        let ens = gas_ensemble(&drift(), &Metric::pullback(&["exp(x1)"]).unwrap(), &EnsembleSpec::new(1, 9)).unwrap();
        let mut prev: Option<EnvelopeFit> = None;
        for k in [50, 60, 80, 100] {
            let fit = fit_envelope(&ens.truncated(k));
            if let Some(p) = &prev {
                assert!(fit.max_amplification >= p.max_amplification);
                if fit.c == p.c {
                    assert!(fit.lambda <= p.lambda);
                }
            }
            prev = Some(fit);
        }
    }

    #[test]
    fn ensemble_validation_and_determinism() {
        let spec = EnsembleSpec { pairs: 10, ..EnsembleSpec::new(1, 1) };
        assert!(matches!(gas_ensemble(&linear(), &Metric::Euclidean, &spec), Err(EnvelopeError::TooFewPairs(10))));
        let spec = EnsembleSpec::new(1, 11);
        let a = gas_ensemble(&linear(), &Metric::Euclidean, &spec).unwrap();
        let b = gas_ensemble(&linear(), &Metric::Euclidean, &spec).unwrap();
        assert_eq!(a, b);
        // r0 spread over three decades
        let r0s: Vec<f64> = a.traces.iter().map(|t| t.r0).collect();
        assert!(r0s.iter().any(|&r| r < 0.1) && r0s.iter().any(|&r| r > 1.0));
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("pair_id,t,r0,distance\n0,0,"));
    }

    #[test]
    fn diverging_pairs_are_reported() {
        let sys = ControlSystem::new("blow", 1, 0, InputSet::none(), &["x1^2"]).unwrap();
        let spec = EnsembleSpec { region: BoxRegion::cube(1, 1.0, 2.0).unwrap(), ..EnsembleSpec::new(1, 1) };
        assert!(matches!(
            gas_ensemble(&sys, &Metric::Euclidean, &spec),
            Err(EnvelopeError::Trajectory { .. })
        ));
    }
}
