//! Metrics on ℝⁿ, the product metric on ℝ²ⁿ and point-to-set distances.
//!
//! Supported kinds are Euclidean, weighted (`sqrt((x-y)ᵀP(x-y))` for SPD `P`),
//! pullback (`‖T(x) - T(y)‖` for a user map `T`) and the product metric
//! `d̂(z, z') = d(z₁, z₁') + d(z₂, z₂')` built from any of them.
//!
//! These kinds are a pragmatic slice; nothing here decides which metric makes a
//! given system incrementally stable.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BoxError, BoxRegion};
use crate::expr::{self, Dims, Env, Expr, ExprError, VarKind};
use crate::rng::{task_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("diagonal set needs an even ambient dimension, got {0}")]
    OddDimension(usize),
    #[error("weighted metric matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("pullback map: {0}")]
    Map(#[from] ExprError),
    #[error("pullback map may only use x1..xn, found `{0}`")]
    MapVariable(String),
    #[error("set is empty")]
    EmptySet,
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("no search start produced a finite distance")]
    SearchFailed,
}

/// A distance function on ℝⁿ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricSpec", into = "MetricSpec")]
pub enum Metric {
    Euclidean,
    Weighted {
        p: Vec<Vec<f64>>,
        /// Lower Cholesky factor of `p`.
        chol: Vec<Vec<f64>>,
    },
    Pullback {
        map: Vec<Expr>,
    },
    Product(Box<Metric>),
}

/// JSON form, e.g. `{"kind":"pullback","map":["exp(x1)"]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    Euclidean,
    Weighted {
        #[serde(rename = "P")]
        p: Vec<Vec<f64>>,
    },
    Pullback {
        map: Vec<String>,
    },
    Product {
        base: Box<MetricSpec>,
    },
}

impl TryFrom<MetricSpec> for Metric {
    type Error = MetricError;
    fn try_from(spec: MetricSpec) -> Result<Self, MetricError> {
        match spec {
            MetricSpec::Euclidean => Ok(Metric::Euclidean),
            MetricSpec::Weighted { p } => Metric::weighted(p),
            MetricSpec::Pullback { map } => Metric::pullback(&map),
            MetricSpec::Product { base } => Ok(Metric::try_from(*base)?.product()),
        }
    }
}

impl From<Metric> for MetricSpec {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Euclidean => MetricSpec::Euclidean,
            Metric::Weighted { p, .. } => MetricSpec::Weighted { p },
            Metric::Pullback { map } => MetricSpec::Pullback {
                map: map.iter().map(ToString::to_string).collect(),
            },
            Metric::Product(base) => MetricSpec::Product {
                base: Box::new(MetricSpec::from(*base)),
            },
        }
    }
}

fn cholesky(p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricError> {
    let n = p.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let pivot = p[i][i] - s;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(MetricError::NotPositiveDefinite(format!("pivot {i} is {pivot}")));
                }
                l[i][i] = pivot.sqrt();
            } else {
                l[i][j] = (p[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Metric {
    pub fn euclidean() -> Self {
        Metric::Euclidean
    }

    pub fn weighted(p: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        let n = p.len();
        if n == 0 {
            return Err(MetricError::NotPositiveDefinite("empty matrix".into()));
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::NotPositiveDefinite(format!("row {i} has length {}", row.len())));
            }
        }
        for i in 0..n {
            for j in 0..i {
                let scale = p[i][j].abs().max(p[j][i].abs()).max(1.0);
                if (p[i][j] - p[j][i]).abs() > 1e-12 * scale {
                    return Err(MetricError::NotPositiveDefinite(format!("P[{i}][{j}] != P[{j}][{i}]")));
                }
            }
        }
        let chol = cholesky(&p)?;
        Ok(Metric::Weighted { p, chol })
    }

    /// Pullback of the Euclidean metric through `T = (map_1, ..., map_n)`, each
    /// component an expression over `x1..xn`.
    pub fn pullback<S: AsRef<str>>(map: &[S]) -> Result<Self, MetricError> {
        let n = map.len();
        let exprs = map
            .iter()
            .map(|s| {
                let e = expr::parse(s.as_ref(), Dims::new(n, 0))?;
                if let Some(v) = e.variables().into_iter().find(|v| v.kind != VarKind::X) {
                    return Err(MetricError::MapVariable(v.to_string()));
                }
                Ok(e)
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        Ok(Metric::Pullback { map: exprs })
    }

    /// The product metric `d̂` on ℝ²ⁿ.
    pub fn product(self) -> Self {
        Metric::Product(Box::new(self))
    }

    /// Fixed dimension, if the metric has one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Metric::Euclidean => None,
            Metric::Weighted { p, .. } => Some(p.len()),
            Metric::Pullback { map } => Some(map.len()),
            Metric::Product(base) => base.dim().map(|n| 2 * n),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Weighted { .. } => "weighted",
            Metric::Pullback { .. } => "pullback",
            Metric::Product(_) => "product",
        }
    }

    pub fn check_dim(&self, n: usize) -> Result<(), MetricError> {
        match self.dim() {
            Some(expected) if expected != n => Err(MetricError::DimensionMismatch { expected, got: n }),
            _ => {
                if matches!(self, Metric::Product(_)) && n % 2 == 1 {
                    Err(MetricError::OddDimension(n))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `T(x)` for pullback metrics.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, MetricError> {
        match self {
            Metric::Pullback { map } => {
                let env = Env::new(x, &[], &[], &[]);
                map.iter().map(|e| e.eval(&env).map_err(MetricError::from)).collect()
            }
            _ => Ok(x.to_vec()),
        }
    }

    pub fn dist(&self, x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
        if x.len() != y.len() {
            return Err(MetricError::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        self.check_dim(x.len())?;
        Ok(match self {
            Metric::Euclidean => euclidean(x, y),
            Metric::Weighted { chol, .. } => {
                // ‖Lᵀ(x - y)‖ with P = L·Lᵀ
                let n = x.len();
                let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let projected: Vec<f64> = (0..n)
                    .map(|j| (j..n).map(|i| chol[i][j] * delta[i]).sum())
                    .collect();
                norm(&projected)
            }
            Metric::Pullback { .. } => euclidean(&self.transform(x)?, &self.transform(y)?),
            Metric::Product(base) => {
                let n = x.len() / 2;
                base.dist(&x[..n], &y[..n])? + base.dist(&x[n..], &y[n..])?
            }
        })
    }

    /// Distance from `z = [x₁; x₂]` to the diagonal of ℝ²ⁿ under the product of
    /// `self`, by the closed form `d(x₁, x₂)`.
    pub fn diag_dist(&self, z: &[f64]) -> Result<f64, MetricError> {
        if z.len() % 2 == 1 {
            return Err(MetricError::OddDimension(z.len()));
        }
        let n = z.len() / 2;
        self.dist(&z[..n], &z[n..])
    }
}

/// A set `A` for point-to-set distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SetDescriptor {
    Point { a: Vec<f64> },
    /// `{[x; x] : x ∈ ℝⁿ} ⊂ ℝ²ⁿ`, `dim` being the ambient dimension `2n`.
    Diagonal { dim: usize },
    Box { region: BoxRegion },
}

impl SetDescriptor {
    pub fn diagonal(ambient: usize) -> Result<Self, MetricError> {
        if ambient % 2 == 1 {
            return Err(MetricError::OddDimension(ambient));
        }
        Ok(SetDescriptor::Diagonal { dim: ambient })
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            SetDescriptor::Point { a } => a.len(),
            SetDescriptor::Diagonal { dim } => *dim,
            SetDescriptor::Box { region } => region.dim(),
        }
    }
}

/// Budget for the generic point-to-set search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchBudget {
    pub starts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Compact search region for the free parameter. Defaults depend on the set.
    pub bounds: Option<BoxRegion>,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            starts: 16,
            max_iters: 500,
            seed: 0,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetDistance {
    pub value: f64,
    /// Closed form rather than a search estimate.
    pub exact: bool,
    /// Search reached stationarity before exhausting its budget.
    pub converged: bool,
    /// Index of the start that produced `value`.
    pub best_start: usize,
    pub iterations: usize,
    /// Minimiser in the ambient space.
    pub nearest: Vec<f64>,
}

impl SetDistance {
    fn exact(value: f64, nearest: Vec<f64>) -> Self {
        SetDistance {
            value,
            exact: true,
            converged: true,
            best_start: 0,
            iterations: 0,
            nearest,
        }
    }
}

/// `d(x, A) = inf_{y ∈ A} d(x, y)`; exact for points (and for boxes containing
/// `x` or under the Euclidean metric), a multi-start Nelder–Mead upper bound
/// otherwise.
pub fn point_to_set(
    metric: &Metric,
    x: &[f64],
    set: &SetDescriptor,
    budget: &SearchBudget,
) -> Result<SetDistance, MetricError> {
    if set.ambient_dim() != x.len() {
        return Err(MetricError::DimensionMismatch {
            expected: set.ambient_dim(),
            got: x.len(),
        });
    }
    match set {
        SetDescriptor::Point { a } => Ok(SetDistance::exact(metric.dist(x, a)?, a.clone())),
        SetDescriptor::Box { region } => {
            if region.contains(x) {
                return Ok(SetDistance::exact(0.0, x.to_vec()));
            }
            if *metric == Metric::Euclidean {
                let mut nearest = x.to_vec();
                region.clamp(&mut nearest);
                return Ok(SetDistance::exact(euclidean(x, &nearest), nearest));
            }
            let bounds = budget.bounds.clone().unwrap_or_else(|| region.clone());
            if bounds.dim() != x.len() {
                return Err(MetricError::DimensionMismatch { expected: x.len(), got: bounds.dim() });
            }
            let search = multi_start(&bounds, budget, |y| {
                let mut y = y.to_vec();
                region.clamp(&mut y);
                metric.dist(x, &y).ok()
            })?;
            let mut nearest = search.point.clone();
            region.clamp(&mut nearest);
            Ok(search.into_distance(nearest))
        }
        SetDescriptor::Diagonal { dim } => {
            if dim % 2 == 1 {
                return Err(MetricError::OddDimension(*dim));
            }
            let n = dim / 2;
            let bounds = match &budget.bounds {
                Some(b) if b.dim() != n => {
                    return Err(MetricError::DimensionMismatch { expected: n, got: b.dim() })
                }
                Some(b) => b.clone(),
                None => default_diagonal_bounds(x)?,
            };
            let mut w2 = vec![0.0; 2 * n];
            let search = multi_start(&bounds, budget, |w| {
                let mut point = w2.clone();
                point[..n].copy_from_slice(w);
                point[n..].copy_from_slice(w);
                metric.dist(x, &point).ok()
            })?;
            w2[..n].copy_from_slice(&search.point);
            w2[n..].copy_from_slice(&search.point);
            Ok(search.into_distance(w2))
        }
    }
}

/// Box spanned by the two halves of `z`, padded by one unit plus half their gap.
fn default_diagonal_bounds(z: &[f64]) -> Result<BoxRegion, MetricError> {
    let n = z.len() / 2;
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            let (a, b) = (z[i], z[n + i]);
            let pad = 1.0 + 0.5 * (a - b).abs();
            (a.min(b) - pad, a.max(b) + pad)
        })
        .unzip();
    Ok(BoxRegion::new(lo, hi)?)
}

struct SearchOutcome {
    value: f64,
    point: Vec<f64>,
    converged: bool,
    best_start: usize,
    iterations: usize,
}

impl SearchOutcome {
    fn into_distance(self, nearest: Vec<f64>) -> SetDistance {
        SetDistance {
            value: self.value,
            exact: false,
            converged: self.converged,
            best_start: self.best_start,
            iterations: self.iterations,
            nearest,
        }
    }
}

/// Runs `budget.starts` seeded Nelder–Mead descents in parallel; the result is
/// the minimum over starts, ties going to the lower start index.
fn multi_start<F>(bounds: &BoxRegion, budget: &SearchBudget, objective: F) -> Result<SearchOutcome, MetricError>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let starts = budget.starts.max(1);
    let runs: Vec<(usize, NmResult)> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(budget.seed, Stream::MultiStart, i as u64);
            let start = bounds.sample(&mut rng);
            (i, nelder_mead(&objective, start, bounds, budget.max_iters))
        })
        .collect();
    let total_iters = runs.iter().map(|(_, r)| r.iterations).sum();
    runs.into_iter()
        .filter(|(_, r)| r.value.is_finite())
        .min_by(|(i, a), (j, b)| a.value.total_cmp(&b.value).then(i.cmp(j)))
        .map(|(i, r)| SearchOutcome {
            value: r.value,
            point: r.point,
            converged: r.converged,
            best_start: i,
            iterations: total_iters,
        })
        .ok_or(MetricError::SearchFailed)
}

struct NmResult {
    value: f64,
    point: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Box-constrained Nelder–Mead (trial points are clamped into `bounds`).
/// Converges when both the value spread and the simplex diameter are tiny.
fn nelder_mead<F>(objective: &F, start: Vec<f64>, bounds: &BoxRegion, max_iters: usize) -> NmResult
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = start.len();
    let eval = |p: &[f64]| objective(p).filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
    let clamp = |mut p: Vec<f64>| {
        bounds.clamp(&mut p);
        p
    };
    if n == 0 {
        let value = eval(&start);
        return NmResult { value, point: start, converged: true, iterations: 0 };
    }

    // adaptive coefficients (Gao & Han) behave better as n grows
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.clone(), eval(&start)));
    for i in 0..n {
        let width = bounds.hi()[i] - bounds.lo()[i];
        let step = if width > 0.0 { 0.1 * width } else { 0.0 };
        let mut p = start.clone();
        p[i] = if p[i] + step <= bounds.hi()[i] { p[i] + step } else { p[i] - step };
        let p = clamp(p);
        let v = eval(&p);
        simplex.push((p, v));
    }

    let scale = bounds
        .lo()
        .iter()
        .zip(bounds.hi())
        .map(|(l, h)| (h - l).abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let diameter = simplex[1..]
            .iter()
            .map(|(p, _)| euclidean(p, &simplex[0].0))
            .fold(0.0, f64::max);
        if best.is_finite() && (worst - best).abs() <= 1e-14 * (1.0 + best.abs()) && diameter <= 1e-11 * scale {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / nf)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect(),
            )
        };
        let reflected = along(alpha);
        let fr = eval(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(alpha * beta);
            let fe = eval(&expanded);
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < simplex[n].1 {
                let p = along(alpha * gamma);
                let f = eval(&p);
                (p, f)
            } else {
                let p = along(-gamma);
                let f = eval(&p);
                (p, f)
            };
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (contracted, fc);
            } else {
                let best_point = simplex[0].0.clone();
                for (p, v) in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = best_point.iter().zip(p.iter()).map(|(b, x)| b + delta * (x - b)).collect();
                    *p = clamp(shrunk);
                    *v = eval(p);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (point, value) = simplex.swap_remove(0);
    NmResult { value, point, converged, iterations }
}

/// Result of a sampled metric-axiom check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomReport {
    pub samples: usize,
    pub identity_violations: usize,
    pub symmetry_violations: usize,
    pub triangle_violations: usize,
    /// Largest amount by which any axiom was broken (0 if none).
    pub worst_excess: f64,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.identity_violations == 0 && self.symmetry_violations == 0 && self.triangle_violations == 0
    }
}

/// Checks identity, symmetry and the triangle inequality on `samples` random
/// triples from `region`, to absolute tolerance `tol`.
pub fn check_axioms(
    metric: &Metric,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<AxiomReport, MetricError> {
    let mut rng = task_rng(seed, Stream::Diagnostics, 0);
    let mut report = AxiomReport {
        samples,
        identity_violations: 0,
        symmetry_violations: 0,
        triangle_violations: 0,
        worst_excess: 0.0,
    };
    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let y = region.sample(&mut rng);
        let z = region.sample(&mut rng);
        let dxx = metric.dist(&x, &x)?;
        let dxy = metric.dist(&x, &y)?;
        let dyx = metric.dist(&y, &x)?;
        let dyz = metric.dist(&y, &z)?;
        let dxz = metric.dist(&x, &z)?;
        let checks = [
            (dxx.abs(), &mut report.identity_violations),
            ((dxy - dyx).abs(), &mut report.symmetry_violations),
            (dxz - dxy - dyz, &mut report.triangle_violations),
        ];
        for (excess, counter) in checks {
            if excess > tol {
                *counter += 1;
            }
            report.worst_excess = report.worst_excess.max(excess);
        }
    }
    Ok(report)
}

/// Largest observed `|d(x,y) - d(x',y)| / ‖x - x'‖` over nearby pairs
/// (`‖x - x'‖ <= 1e-3`), a sampled continuity modulus of `x ↦ d(x, y)`.
pub fn continuity_modulus(metric: &Metric, region: &BoxRegion, samples: usize, seed: u64) -> Result<f64, MetricError> {
    let mut rng = task_rng(seed, Stream::Diagnostics, 1);
    let n = region.dim();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let y = region.sample(&mut rng);
        let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let len = norm(&dir);
        if len == 0.0 {
            continue;
        }
        let radius = 1e-3 * rng.random_range(0.01..=1.0);
        let x2: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + radius * d / len).collect();
        let gap = euclidean(&x, &x2);
        if gap == 0.0 {
            continue;
        }
        let ratio = (metric.dist(&x, &y)? - metric.dist(&x2, &y)?).abs() / gap;
        worst = worst.max(ratio);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectivityReport {
    pub samples: usize,
    pub collisions: usize,
    /// First colliding pair, if any.
    pub example: Option<(Vec<f64>, Vec<f64>)>,
}

/// Collision check for a pullback map over a regular grid of about `samples`
/// points in `region`: no two distinct grid points may map within `1e-9` of
/// each other. Global injectivity is not decided.
pub fn injectivity_check(metric: &Metric, region: &BoxRegion, samples: usize) -> Result<InjectivityReport, MetricError> {
    let n = region.dim();
    let per_axis = if n == 0 { 1 } else { ((samples as f64).powf(1.0 / n as f64).floor() as usize).max(2) };
    let total = per_axis.pow(n as u32);
    let points: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|axis| {
                    let k = idx % per_axis;
                    idx /= per_axis;
                    let (lo, hi) = (region.lo()[axis], region.hi()[axis]);
                    lo + (hi - lo) * k as f64 / (per_axis - 1) as f64
                })
                .collect()
        })
        .collect();
    let images = points
        .iter()
        .map(|p| metric.transform(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = InjectivityReport { samples: total, collisions: 0, example: None };
    for i in 0..total {
        for j in (i + 1)..total {
            if points[i] != points[j] && euclidean(&images[i], &images[j]) <= 1e-9 {
                report.collisions += 1;
                if report.example.is_none() {
                    report.example = Some((points[i].clone(), points[j].clone()));
                }
            }
        }
    }
    Ok(report)
}
