//! Lyapunov certificates for incremental stability and set stability, checked
//! by sampling over a compact box and falsified by sampling plus local ascent.
//!
//! Every condition is phrased as a signed violation: positive means the
//! inequality is broken at that point. A check passes when no sampled
//! violation exceeds [`TOLERANCE`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::sat;
use crate::comparison::KInfFn;
use crate::domain::BoxRegion;
use crate::expr::{self, Dims, Env, Expr, ExprError, Var, VarKind};
use crate::metric::{point_to_set, Metric, MetricError, SearchBudget, SetDescriptor};
use crate::rng::{task_rng, Stream, TaskRng};
use crate::system::{InputSet, SystemError, VectorField};

pub const TOLERANCE: f64 = 1e-9;
/// Allowed relative disagreement between symbolic and finite-difference gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_POINTS: usize = 100;
const CHUNK: usize = 1024;
const STEP_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("V: {0}")]
    Expr(#[from] ExprError),
    #[error("V may not use `{0}`")]
    Variable(String),
    #[error("V contains abs, which has no gradient at zero")]
    NonSmooth,
    #[error("kappa must be positive and finite, got {0}")]
    Kappa(f64),
    #[error("certificate needs `{0}` for this check")]
    Missing(&'static str),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("evaluation failed at {point:?}: {reason}")]
    Evaluation { point: Vec<f64>, reason: String },
    #[error("gradient of V with respect to {var} disagrees with finite differences at {point:?}: symbolic {symbolic}, numeric {numeric}")]
    GradientMismatch { var: String, point: Vec<f64>, symbolic: f64, numeric: f64 },
    #[error("budget must be at least one sample")]
    EmptyBudget,
}

/// JSON form shared by all certificate kinds; which fields are required
/// depends on the check.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    #[serde(rename = "V")]
    pub v: String,
    pub metric: Metric,
    pub alpha_lo: KInfFn,
    pub alpha_hi: KInfFn,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<KInfFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<KInfFn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set: Option<SetDescriptor>,
}

impl CertificateFile {
    pub fn gas(&self, n: usize) -> Result<GasCertificate, CertificateError> {
        GasCertificate::new(&self.v, n, self.metric.clone(), self.alpha_lo, self.alpha_hi, self.kappa)
    }

    pub fn iss(&self, n: usize) -> Result<IssCertificate, CertificateError> {
        let sigma = self.sigma.ok_or(CertificateError::Missing("sigma"))?;
        Ok(IssCertificate {
            gas: self.gas(n)?,
            sigma,
            phi: self.phi,
        })
    }

    pub fn ugas(&self, n: usize) -> Result<UgasCertificate, CertificateError> {
        let set = self.set.clone().ok_or(CertificateError::Missing("set"))?;
        UgasCertificate::new(&self.v, n, self.metric.clone(), set, self.alpha_lo, self.alpha_hi, self.kappa)
    }
}

fn parse_v(text: &str, n: usize, allow_y: bool) -> Result<(Expr, Vec<(Var, Expr)>), CertificateError> {
    let v = expr::parse(text, Dims::new(n, 0))?;
    if let Some(bad) = v
        .variables()
        .into_iter()
        .find(|var| matches!(var.kind, VarKind::U | VarKind::V) || (!allow_y && var.kind == VarKind::Y))
    {
        return Err(CertificateError::Variable(bad.to_string()));
    }
    if v.contains_abs() {
        return Err(CertificateError::NonSmooth);
    }
    let mut vars: Vec<Var> = (0..n).map(Var::x).collect();
    if allow_y {
        vars.extend((0..n).map(Var::y));
    }
    let grads = vars
        .into_iter()
        .map(|var| Ok((var, v.diff(var)?)))
        .collect::<Result<Vec<_>, ExprError>>()?;
    Ok((v, grads))
}

fn check_kappa(kappa: f64) -> Result<(), CertificateError> {
    if kappa.is_finite() && kappa > 0.0 {
        Ok(())
    } else {
        Err(CertificateError::Kappa(kappa))
    }
}

/// Incremental (two-argument) Lyapunov function with sandwich bounds and a
/// shared-input decay rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GasCertificate {
    n: usize,
    v: Expr,
    grads: Vec<(Var, Expr)>,
    pub metric: Metric,
    pub alpha_lo: KInfFn,
    pub alpha_hi: KInfFn,
    pub kappa: f64,
}

impl GasCertificate {
    pub fn new(
        v: &str,
        n: usize,
        metric: Metric,
        alpha_lo: KInfFn,
        alpha_hi: KInfFn,
        kappa: f64,
    ) -> Result<Self, CertificateError> {
        check_kappa(kappa)?;
        metric.check_dim(n)?;
        let (v, grads) = parse_v(v, n, true)?;
        Ok(GasCertificate {
            n,
            v,
            grads,
            metric,
            alpha_lo,
            alpha_hi,
            kappa,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn expr(&self) -> &Expr {
        &self.v
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64, ExprError> {
        self.v.eval(&Env::new(x, y, &[], &[]))
    }

    /// `∇ₓV·f(x,u) + ∇_yV·f(y,v)`.
    pub fn derivative(
        &self,
        sys: &dyn VectorField,
        x: &[f64],
        y: &[f64],
        u: &[f64],
        v: &[f64],
    ) -> Result<f64, CertificateError> {
        let fx = sys.eval(x, u)?;
        let fy = sys.eval(y, v)?;
        let env = Env::new(x, y, &[], &[]);
        let mut total = 0.0;
        for (var, g) in &self.grads {
            let rate = match var.kind {
                VarKind::X => fx[var.index],
                _ => fy[var.index],
            };
            total += g.eval(&env)? * rate;
        }
        Ok(total)
    }

    /// Symbolic gradients against central differences at points of `domain²`.
    pub fn gradient_check(&self, domain: &BoxRegion, seed: u64) -> Result<GradientCheck, CertificateError> {
        expect_dim("domain", self.n, domain.dim())?;
        let mut rng = task_rng(seed, Stream::Diagnostics, 0);
        let points = (0..GRADIENT_POINTS)
            .map(|_| {
                let mut p = domain.sample(&mut rng);
                p.extend(domain.sample(&mut rng));
                p
            })
            .collect::<Vec<_>>();
        Ok(fd_check(&self.v, &self.grads, self.n, &points))
    }
}

/// [`GasCertificate`] plus a gain on the input difference, and optionally
/// the `φ` of the implication form.
#[derive(Debug, Clone, PartialEq)]
pub struct IssCertificate {
    pub gas: GasCertificate,
    pub sigma: KInfFn,
    pub phi: Option<KInfFn>,
}

/// Single-argument Lyapunov function for stability with respect to a set.
#[derive(Debug, Clone, PartialEq)]
pub struct UgasCertificate {
    n: usize,
    v: Expr,
    grads: Vec<(Var, Expr)>,
    pub metric: Metric,
    pub set: SetDescriptor,
    pub alpha_lo: KInfFn,
    pub alpha_hi: KInfFn,
    pub kappa: f64,
}

impl UgasCertificate {
    pub fn new(
        v: &str,
        n: usize,
        metric: Metric,
        set: SetDescriptor,
        alpha_lo: KInfFn,
        alpha_hi: KInfFn,
        kappa: f64,
    ) -> Result<Self, CertificateError> {
        check_kappa(kappa)?;
        metric.check_dim(n)?;
        expect_dim("set", n, set.ambient_dim())?;
        let (v, grads) = parse_v(v, n, false)?;
        Ok(UgasCertificate {
            n,
            v,
            grads,
            metric,
            set,
            alpha_lo,
            alpha_hi,
            kappa,
        })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.v.eval(&Env::new(x, &[], &[], &[]))
    }

    /// `d(x, A)`: closed form for the diagonal under a product metric,
    /// otherwise the point-to-set search (an upper bound when inexact).
    pub fn set_distance(&self, x: &[f64]) -> Result<f64, MetricError> {
        match (&self.metric, &self.set) {
            (Metric::Product(inner), SetDescriptor::Diagonal { .. }) => inner.diag_dist(x),
            _ => Ok(point_to_set(&self.metric, x, &self.set, &SearchBudget::default())?.value),
        }
    }

    pub fn derivative(&self, sys: &dyn VectorField, x: &[f64], u: &[f64]) -> Result<f64, CertificateError> {
        let fx = sys.eval(x, u)?;
        let env = Env::new(x, &[], &[], &[]);
        let mut total = 0.0;
        for (var, g) in &self.grads {
            total += g.eval(&env)? * fx[var.index];
        }
        Ok(total)
    }

    pub fn gradient_check(&self, domain: &BoxRegion, seed: u64) -> Result<GradientCheck, CertificateError> {
        expect_dim("domain", self.n, domain.dim())?;
        let mut rng = task_rng(seed, Stream::Diagnostics, 0);
        let points = (0..GRADIENT_POINTS).map(|_| domain.sample(&mut rng)).collect::<Vec<_>>();
        Ok(fd_check(&self.v, &self.grads, self.n, &points))
    }
}

fn expect_dim(what: &'static str, expected: usize, got: usize) -> Result<(), CertificateError> {
    if expected == got {
        Ok(())
    } else {
        Err(CertificateError::Dimension { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub points: usize,
    /// Points where V could not be evaluated on the difference stencil.
    pub skipped: usize,
    /// `|a - b| / max(1, |a|, |b|)` over all points and variables.
    pub max_rel_err: f64,
    pub worst: Option<GradientSample>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSample {
    pub var: String,
    pub point: Vec<f64>,
    pub symbolic: f64,
    pub numeric: f64,
}

impl GradientCheck {
    pub fn into_result(self) -> Result<GradientCheck, CertificateError> {
        match (&self.worst, self.passed) {
            (Some(w), false) => Err(CertificateError::GradientMismatch {
                var: w.var.clone(),
                point: w.point.clone(),
                symbolic: w.symbolic,
                numeric: w.numeric,
            }),
            _ => Ok(self),
        }
    }
}

/// Points are `[x; y]` (or just `x` when V has no `y` gradient).
fn fd_check(v: &Expr, grads: &[(Var, Expr)], n: usize, points: &[Vec<f64>]) -> GradientCheck {
    let eval = |p: &[f64]| {
        let (x, y) = if p.len() > n { p.split_at(n) } else { (p, &[][..]) };
        v.eval(&Env::new(x, y, &[], &[]))
    };
    let slot = |var: Var| match var.kind {
        VarKind::X => var.index,
        _ => n + var.index,
    };
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut skipped = 0;
    'points: for p in points {
        let mut found = Vec::with_capacity(grads.len());
        for (var, g) in grads {
            let i = slot(*var);
            let h = 1e-5 * p[i].abs().max(1.0);
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi[i] += h;
            lo[i] -= h;
            let (x, y) = if p.len() > n { p.split_at(n) } else { (&p[..], &[][..]) };
            let (Ok(a), Ok(b), Ok(s)) = (eval(&hi), eval(&lo), g.eval(&Env::new(x, y, &[], &[]))) else {
                skipped += 1;
                continue 'points;
            };
            let numeric = (a - b) / (hi[i] - lo[i]);
            let rel = (s - numeric).abs() / 1f64.max(s.abs()).max(numeric.abs());
            found.push((rel, var, s, numeric));
        }
        for (rel, var, s, numeric) in found {
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = f64::max(max_rel_err, rel);
                worst = Some(GradientSample {
                    var: var.to_string(),
                    point: p.clone(),
                    symbolic: s,
                    numeric,
                });
            }
        }
    }
    GradientCheck {
        points: points.len(),
        skipped,
        max_rel_err,
        worst,
        passed: max_rel_err <= GRADIENT_TOLERANCE,
    }
}

/// A sampled inequality over a parameter vector made of named blocks.
pub trait Condition: Sync {
    fn name(&self) -> &'static str;
    /// Block names and sizes, in parameter order.
    fn layout(&self) -> Vec<(&'static str, usize)>;
    /// Box containing every admissible parameter.
    fn search_box(&self) -> BoxRegion;
    /// Admissible parameter drawn from the sampling distribution.
    fn sample(&self, rng: &mut TaskRng) -> Vec<f64>;
    /// Signed violation, or `None` for parameters outside the constraint set.
    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError>;

    fn split(&self, p: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        let mut at = 0;
        for (name, len) in self.layout() {
            out.insert(name.to_string(), p[at..at + len].to_vec());
            at += len;
        }
        out
    }
}

fn eval_err(p: &[f64]) -> impl Fn(CertificateError) -> CertificateError + '_ {
    move |e| match e {
        CertificateError::Expr(err) => CertificateError::Evaluation {
            point: p.to_vec(),
            reason: err.to_string(),
        },
        CertificateError::System(err) => CertificateError::Evaluation {
            point: p.to_vec(),
            reason: err.to_string(),
        },
        other => other,
    }
}

fn pair_box(domain: &BoxRegion) -> BoxRegion {
    domain.product(domain)
}

/// `α̲(d(x,y)) ≤ V(x,y) ≤ ᾱ(d(x,y))`.
pub struct Sandwich<'a> {
    pub cert: &'a GasCertificate,
    pub domain: BoxRegion,
}

impl Condition for Sandwich<'_> {
    fn name(&self) -> &'static str {
        "sandwich"
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        vec![("x", self.cert.n), ("y", self.cert.n)]
    }

    fn search_box(&self) -> BoxRegion {
        pair_box(&self.domain)
    }

    fn sample(&self, rng: &mut TaskRng) -> Vec<f64> {
        self.search_box().sample(rng)
    }

    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError> {
        let (x, y) = p.split_at(self.cert.n);
        let d = self.cert.metric.dist(x, y).map_err(CertificateError::from).map_err(eval_err(p))?;
        let v = self.cert.value(x, y).map_err(CertificateError::from).map_err(eval_err(p))?;
        Ok(Some(f64::max(self.cert.alpha_lo.apply(d) - v, v - self.cert.alpha_hi.apply(d))))
    }
}

/// `∇ₓV·f(x,u) + ∇_yV·f(y,u) + κV ≤ 0`.
pub struct GasDecrease<'a> {
    pub cert: &'a GasCertificate,
    pub sys: &'a dyn VectorField,
    pub domain: BoxRegion,
}

impl Condition for GasDecrease<'_> {
    fn name(&self) -> &'static str {
        "decrease_gas"
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        vec![("x", self.cert.n), ("y", self.cert.n), ("u", self.sys.input_dim())]
    }

    fn search_box(&self) -> BoxRegion {
        pair_box(&self.domain).product(&self.sys.input_set().bounding_box())
    }

    fn sample(&self, rng: &mut TaskRng) -> Vec<f64> {
        let mut p = pair_box(&self.domain).sample(rng);
        p.extend(self.sys.input_set().sample(rng));
        p
    }

    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError> {
        let n = self.cert.n;
        let (x, rest) = p.split_at(n);
        let (y, u) = rest.split_at(n);
        if !self.sys.input_set().contains(u) {
            return Ok(None);
        }
        let run = || -> Result<f64, CertificateError> {
            Ok(self.cert.derivative(self.sys, x, y, u, u)? + self.cert.kappa * self.cert.value(x, y)?)
        };
        run().map(Some).map_err(eval_err(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssForm {
    /// `… ≤ -κV + σ(‖u - v‖)`.
    Sum,
    /// `φ(d(x,y)) ≥ ‖u - v‖ ⇒ … ≤ -κV`.
    Implication,
}

/// Decrease with distinct inputs, in sum or implication form.
pub struct IssDecrease<'a> {
    pub cert: &'a IssCertificate,
    pub sys: &'a dyn VectorField,
    pub domain: BoxRegion,
    pub form: IssForm,
}

impl IssDecrease<'_> {
    fn phi(&self) -> Result<&KInfFn, CertificateError> {
        self.cert.phi.as_ref().ok_or(CertificateError::Missing("phi"))
    }
}

impl Condition for IssDecrease<'_> {
    fn name(&self) -> &'static str {
        match self.form {
            IssForm::Sum => "decrease_iss_sum",
            IssForm::Implication => "decrease_iss_implication",
        }
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        let (n, m) = (self.cert.gas.n, self.sys.input_dim());
        vec![("x", n), ("y", n), ("u", m), ("v", m)]
    }

    fn search_box(&self) -> BoxRegion {
        let inputs = self.sys.input_set().bounding_box();
        pair_box(&self.domain).product(&inputs).product(&inputs)
    }

    /// In implication form `v = sat(u + φ(d)·w)` with `w` in the unit ball,
    /// which satisfies the constraint because projection is nonexpansive.
    fn sample(&self, rng: &mut TaskRng) -> Vec<f64> {
        let set = self.sys.input_set();
        let mut p = pair_box(&self.domain).sample(rng);
        let u = set.sample(rng);
        let v = match self.form {
            IssForm::Sum => set.sample(rng),
            IssForm::Implication => {
                let n = self.cert.gas.n;
                let w = InputSet::Ball { radius: 1.0, dim: u.len() }.sample(rng);
                let reach = match (self.cert.gas.metric.dist(&p[..n], &p[n..]), self.phi()) {
                    (Ok(d), Ok(phi)) => phi.apply(d),
                    _ => 0.0,
                };
                let shifted: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + reach * b).collect();
                sat(&shifted, set)
            }
        };
        p.extend(u);
        p.extend(v);
        p
    }

    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError> {
        let (n, m) = (self.cert.gas.n, self.sys.input_dim());
        let (x, rest) = p.split_at(n);
        let (y, rest) = rest.split_at(n);
        let (u, v) = rest.split_at(m);
        let set = self.sys.input_set();
        if !set.contains(u) || !set.contains(v) {
            return Ok(None);
        }
        let gap = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let gas = &self.cert.gas;
        let run = || -> Result<Option<f64>, CertificateError> {
            let core = gas.derivative(self.sys, x, y, u, v)? + gas.kappa * gas.value(x, y)?;
            match self.form {
                IssForm::Sum => Ok(Some(core - self.cert.sigma.apply(gap))),
                IssForm::Implication => {
                    let reach = self.phi()?.apply(gas.metric.dist(x, y)?);
                    if gap <= reach * (1.0 + 1e-9) {
                        Ok(Some(core))
                    } else {
                        Ok(None)
                    }
                }
            }
        };
        run().map_err(eval_err(p))
    }
}

/// `α̲(d(x,A)) ≤ V(x) ≤ ᾱ(d(x,A))`.
pub struct UgasSandwich<'a> {
    pub cert: &'a UgasCertificate,
    pub domain: BoxRegion,
}

impl Condition for UgasSandwich<'_> {
    fn name(&self) -> &'static str {
        "ugas_sandwich"
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        vec![("x", self.cert.n)]
    }

    fn search_box(&self) -> BoxRegion {
        self.domain.clone()
    }

    fn sample(&self, rng: &mut TaskRng) -> Vec<f64> {
        self.domain.sample(rng)
    }

    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError> {
        let d = self.cert.set_distance(p).map_err(CertificateError::from).map_err(eval_err(p))?;
        let v = self.cert.value(p).map_err(CertificateError::from).map_err(eval_err(p))?;
        Ok(Some(f64::max(self.cert.alpha_lo.apply(d) - v, v - self.cert.alpha_hi.apply(d))))
    }
}

/// `∇V·f(x,u) + κV(x) ≤ 0`.
pub struct UgasDecrease<'a> {
    pub cert: &'a UgasCertificate,
    pub sys: &'a dyn VectorField,
    pub domain: BoxRegion,
}

impl Condition for UgasDecrease<'_> {
    fn name(&self) -> &'static str {
        "ugas_decrease"
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        vec![("x", self.cert.n), ("u", self.sys.input_dim())]
    }

    fn search_box(&self) -> BoxRegion {
        self.domain.product(&self.sys.input_set().bounding_box())
    }

    fn sample(&self, rng: &mut TaskRng) -> Vec<f64> {
        let mut p = self.domain.sample(rng);
        p.extend(self.sys.input_set().sample(rng));
        p
    }

    fn violation(&self, p: &[f64]) -> Result<Option<f64>, CertificateError> {
        let (x, u) = p.split_at(self.cert.n);
        if !self.sys.input_set().contains(u) {
            return Ok(None);
        }
        let run = || -> Result<f64, CertificateError> {
            Ok(self.cert.derivative(self.sys, x, u)? + self.cert.kappa * self.cert.value(x)?)
        };
        run().map(Some).map_err(eval_err(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub condition: String,
    pub verdict: Verdict,
    /// Largest sampled violation; the check passes iff this is at most `tolerance`.
    pub worst_violation: f64,
    pub tolerance: f64,
    /// Parameters attaining `worst_violation`.
    pub witness: Option<BTreeMap<String, Vec<f64>>>,
    pub samples: usize,
    /// Samples that satisfied the condition's constraint set.
    pub evaluated: usize,
    pub seed: u64,
    pub domain: BoxRegion,
    pub evidence: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

struct Best {
    violation: f64,
    index: usize,
    point: Vec<f64>,
}

fn better(a: Option<Best>, b: Option<Best>) -> Option<Best> {
    match (a, b) {
        (Some(a), Some(b)) => {
            if b.violation > a.violation || (b.violation == a.violation && b.index < a.index) {
                Some(b)
            } else {
                Some(a)
            }
        }
        (a, None) => a,
        (None, b) => b,
    }
}

/// Samples drawn in fixed chunks with per-chunk seeds, so the first `k`
/// samples do not depend on the total and results are monotone in `samples`.
fn sample_worst(cond: &dyn Condition, samples: usize, seed: u64) -> Result<(Option<Best>, usize), CertificateError> {
    let chunks = samples.div_ceil(CHUNK);
    let results: Vec<Result<(Option<Best>, usize), CertificateError>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = task_rng(seed, Stream::Samples, c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut best = None;
            let mut evaluated = 0;
            for k in 0..count {
                let p = cond.sample(&mut rng);
                if let Some(violation) = cond.violation(&p)? {
                    evaluated += 1;
                    best = better(best, Some(Best { violation, index: c * CHUNK + k, point: p }));
                }
            }
            Ok((best, evaluated))
        })
        .collect();
    let mut best = None;
    let mut evaluated = 0;
    for r in results {
        let (b, e) = r?;
        best = better(best, b);
        evaluated += e;
    }
    Ok((best, evaluated))
}

/// Sampled check of one condition.
pub fn check(cond: &dyn Condition, samples: usize, seed: u64) -> Result<CheckReport, CertificateError> {
    if samples == 0 {
        return Err(CertificateError::EmptyBudget);
    }
    let (best, evaluated) = sample_worst(cond, samples, seed)?;
    let worst_violation = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.violation);
    let domain = cond.search_box();
    Ok(CheckReport {
        condition: cond.name().to_string(),
        verdict: if worst_violation <= TOLERANCE { Verdict::Pass } else { Verdict::Fail },
        worst_violation,
        tolerance: TOLERANCE,
        witness: best.map(|b| cond.split(&b.point)),
        samples,
        evaluated,
        seed,
        domain,
        evidence: "empirical, sampled".into(),
    })
}

pub fn check_sandwich(cert: &GasCertificate, domain: &BoxRegion, samples: usize, seed: u64) -> Result<CheckReport, CertificateError> {
    expect_dim("domain", cert.n, domain.dim())?;
    check(&Sandwich { cert, domain: domain.clone() }, samples, seed)
}

pub fn check_decrease_gas(
    cert: &GasCertificate,
    sys: &dyn VectorField,
    domain: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<CheckReport, CertificateError> {
    expect_dim("system", cert.n, sys.state_dim())?;
    cert.gradient_check(domain, seed)?.into_result()?;
    check(&GasDecrease { cert, sys, domain: domain.clone() }, samples, seed)
}

pub fn check_decrease_iss(
    cert: &IssCertificate,
    sys: &dyn VectorField,
    domain: &BoxRegion,
    samples: usize,
    seed: u64,
    form: IssForm,
) -> Result<CheckReport, CertificateError> {
    expect_dim("system", cert.gas.n, sys.state_dim())?;
    if form == IssForm::Implication && cert.phi.is_none() {
        return Err(CertificateError::Missing("phi"));
    }
    cert.gas.gradient_check(domain, seed)?.into_result()?;
    check(
        &IssDecrease {
            cert,
            sys,
            domain: domain.clone(),
            form,
        },
        samples,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UgasReport {
    pub sandwich: CheckReport,
    pub decrease: CheckReport,
}

impl UgasReport {
    pub fn passed(&self) -> bool {
        self.sandwich.passed() && self.decrease.passed()
    }
}

pub fn check_ugas(
    cert: &UgasCertificate,
    sys: &dyn VectorField,
    domain: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<UgasReport, CertificateError> {
    expect_dim("system", cert.n, sys.state_dim())?;
    expect_dim("domain", cert.n, domain.dim())?;
    cert.gradient_check(domain, seed)?.into_result()?;
    Ok(UgasReport {
        sandwich: check(&UgasSandwich { cert, domain: domain.clone() }, samples, seed)?,
        decrease: check(&UgasDecrease { cert, sys, domain: domain.clone() }, samples, seed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalsifyBudget {
    pub samples: usize,
    /// Violation evaluations allowed during local ascent.
    pub refine_evals: usize,
}

impl Default for FalsifyBudget {
    fn default() -> Self {
        FalsifyBudget {
            samples: 10_000,
            refine_evals: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    /// Re-evaluated violation at `point`, always above the tolerance.
    pub violation: f64,
    pub point: BTreeMap<String, Vec<f64>>,
    /// `sampling` if the best random sample already violated, else `refinement`.
    pub found_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FalsifyReport {
    pub condition: String,
    pub counterexample: Option<Counterexample>,
    /// Best violation after both phases (negative when the condition held).
    pub best_violation: f64,
    pub samples: usize,
    pub refine_evals: usize,
    pub seed: u64,
    pub domain: BoxRegion,
    pub evidence: String,
}

/// Random sampling, then coordinate-wise ascent on the violation from the best
/// sample with step halving down to `1e-8`.
pub fn falsify(cond: &dyn Condition, budget: FalsifyBudget, seed: u64) -> Result<FalsifyReport, CertificateError> {
    if budget.samples == 0 {
        return Err(CertificateError::EmptyBudget);
    }
    let (best, _) = sample_worst(cond, budget.samples, seed)?;
    let search = cond.search_box();
    let report = |counterexample, best_violation, refine_evals| FalsifyReport {
        condition: cond.name().to_string(),
        counterexample,
        best_violation,
        samples: budget.samples,
        refine_evals,
        seed,
        domain: search.clone(),
        evidence: "empirical, sampled".into(),
    };
    let Some(best) = best else {
        return Ok(report(None, f64::NEG_INFINITY, 0));
    };
    let sampled = best.violation;
    let mut point = best.point;
    let mut value = best.violation;

    let mut steps: Vec<f64> = search.lo().iter().zip(search.hi()).map(|(l, h)| 0.1 * (h - l)).collect();
    let mut evals = 0;
    'ascent: while evals < budget.refine_evals && steps.iter().any(|&s| s >= STEP_FLOOR) {
        let mut improved = false;
        for i in 0..point.len() {
            if steps[i] < STEP_FLOOR {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut trial = point.clone();
                trial[i] = (trial[i] + dir * steps[i]).clamp(search.lo()[i], search.hi()[i]);
                if trial[i] == point[i] {
                    continue;
                }
                if evals >= budget.refine_evals {
                    break 'ascent;
                }
                evals += 1;
                if let Some(v) = cond.violation(&trial)? {
                    if v > value {
                        value = v;
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

    let counterexample = match cond.violation(&point)? {
        Some(v) if v > TOLERANCE => Some(Counterexample {
            violation: v,
            point: cond.split(&point),
            found_by: if sampled > TOLERANCE { "sampling" } else { "refinement" }.into(),
        }),
        _ => None,
    };
    Ok(report(counterexample, value, evals))
}
