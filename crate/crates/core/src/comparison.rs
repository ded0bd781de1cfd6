//! Parametric class-K, K∞ and KL comparison functions.
//!
//! K∞ functions come from three families: `c·r`, `c·r^p` and `c·log(1+r)`.
//! KL functions are separable, `β(r, t) = k(r)·exp(-λt)` with `k` a K∞ function.
//! Linear and power functions are closed under composition and inversion, which
//! is all the disturbance-scaling construction in [`construct_rho`] needs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComparisonError {
    #[error("comparison function evaluated at negative argument {0}")]
    NegativeArgument(f64),
    #[error("invalid parameter {name} = {value} (must be finite and > 0)")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("the {0} family has no closed-form inverse in the supported families")]
    NotInvertible(&'static str),
    #[error("precondition β(r,0) > r violated at r = {r}: β(r,0) = {alpha}")]
    PreconditionViolated { r: f64, alpha: f64 },
}

/// A class-K∞ function from one of the supported parametric families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", try_from = "KInfRepr", into = "KInfRepr")]
pub enum KInfFn {
    /// `c·r`
    Linear { c: f64 },
    /// `c·r^p`
    Power { c: f64, p: f64 },
    /// `c·log(1 + r)`; not used on inversion paths.
    AffineLog { c: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum KInfRepr {
    Linear { c: f64 },
    Power { c: f64, p: f64 },
    AffineLog { c: f64 },
}

impl TryFrom<KInfRepr> for KInfFn {
    type Error = ComparisonError;
    fn try_from(r: KInfRepr) -> Result<Self, Self::Error> {
        match r {
            KInfRepr::Linear { c } => KInfFn::linear(c),
            KInfRepr::Power { c, p } => KInfFn::power(c, p),
            KInfRepr::AffineLog { c } => KInfFn::affine_log(c),
        }
    }
}

impl From<KInfFn> for KInfRepr {
    fn from(f: KInfFn) -> Self {
        match f {
            KInfFn::Linear { c } => KInfRepr::Linear { c },
            KInfFn::Power { c, p } => KInfRepr::Power { c, p },
            KInfFn::AffineLog { c } => KInfRepr::AffineLog { c },
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64, ComparisonError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ComparisonError::InvalidParameter { name, value })
    }
}

impl KInfFn {
    pub fn linear(c: f64) -> Result<Self, ComparisonError> {
        Ok(KInfFn::Linear { c: positive("c", c)? })
    }

    /// `c·r^p`; normalised to [`KInfFn::Linear`] when `p == 1`.
    pub fn power(c: f64, p: f64) -> Result<Self, ComparisonError> {
        let c = positive("c", c)?;
        let p = positive("p", p)?;
        Ok(if p == 1.0 { KInfFn::Linear { c } } else { KInfFn::Power { c, p } })
    }

    pub fn affine_log(c: f64) -> Result<Self, ComparisonError> {
        Ok(KInfFn::AffineLog { c: positive("c", c)? })
    }

    pub fn identity() -> Self {
        KInfFn::Linear { c: 1.0 }
    }

    pub fn family(&self) -> &'static str {
        match self {
            KInfFn::Linear { .. } => "linear",
            KInfFn::Power { .. } => "power",
            KInfFn::AffineLog { .. } => "affine_log",
        }
    }

    pub fn eval(&self, r: f64) -> Result<f64, ComparisonError> {
        if r < 0.0 || r.is_nan() {
            return Err(ComparisonError::NegativeArgument(r));
        }
        Ok(self.apply(r))
    }

    /// Evaluation without the sign check. Callers guarantee `r >= 0`.
    pub fn apply(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0, "comparison function at {r}");
        match *self {
            KInfFn::Linear { c } => c * r,
            KInfFn::Power { c, p } => c * r.powf(p),
            KInfFn::AffineLog { c } => c * r.ln_1p(),
        }
    }

    /// `(c, p)` for the power-law families.
    fn power_params(&self) -> Option<(f64, f64)> {
        match *self {
            KInfFn::Linear { c } => Some((c, 1.0)),
            KInfFn::Power { c, p } => Some((c, p)),
            KInfFn::AffineLog { .. } => None,
        }
    }

    pub fn invert(&self) -> Result<KInfFn, ComparisonError> {
        match *self {
            KInfFn::Linear { c } => KInfFn::linear(1.0 / c),
            KInfFn::Power { c, p } => KInfFn::power(c.powf(-1.0 / p), 1.0 / p),
            KInfFn::AffineLog { .. } => Err(ComparisonError::NotInvertible("affine_log")),
        }
    }

    /// `self ∘ inner`, for linear and power functions.
    pub fn compose(&self, inner: &KInfFn) -> Result<KInfFn, ComparisonError> {
        let (a, p) = self.power_params().ok_or(ComparisonError::NotInvertible(self.family()))?;
        let (b, q) = inner.power_params().ok_or(ComparisonError::NotInvertible(inner.family()))?;
        // a·(b·r^q)^p = a·b^p·r^(pq)
        let scale = if p == 1.0 { a * b } else { a * b.powf(p) };
        KInfFn::power(scale, p * q)
    }

    /// `k·self(r)`.
    pub fn scaled(&self, k: f64) -> Result<KInfFn, ComparisonError> {
        let k = positive("scale", k)?;
        match *self {
            KInfFn::Linear { c } => KInfFn::linear(k * c),
            KInfFn::Power { c, p } => KInfFn::power(k * c, p),
            KInfFn::AffineLog { c } => KInfFn::affine_log(k * c),
        }
    }
}

/// Separable KL function `β(r, t) = k(r)·exp(-λt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KlRepr", into = "KlRepr")]
pub struct KLFn {
    k: KInfFn,
    lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct KlRepr {
    k: KInfFn,
    lambda: f64,
}

impl TryFrom<KlRepr> for KLFn {
    type Error = ComparisonError;
    fn try_from(r: KlRepr) -> Result<Self, Self::Error> {
        KLFn::new(r.k, r.lambda)
    }
}

impl From<KLFn> for KlRepr {
    fn from(f: KLFn) -> Self {
        KlRepr { k: f.k, lambda: f.lambda }
    }
}

impl KLFn {
    pub fn new(k: KInfFn, lambda: f64) -> Result<Self, ComparisonError> {
        Ok(KLFn {
            k,
            lambda: positive("lambda", lambda)?,
        })
    }

    /// `c·r·exp(-λt)`, the family used by envelope fits.
    pub fn linear_exp(c: f64, lambda: f64) -> Result<Self, ComparisonError> {
        KLFn::new(KInfFn::linear(c)?, lambda)
    }

    pub fn k(&self) -> &KInfFn {
        &self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `α(r) = β(r, 0)`.
    pub fn at_zero(&self) -> KInfFn {
        self.k
    }

    pub fn eval(&self, r: f64, t: f64) -> Result<f64, ComparisonError> {
        if r < 0.0 || r.is_nan() {
            return Err(ComparisonError::NegativeArgument(r));
        }
        if t < 0.0 || t.is_nan() {
            return Err(ComparisonError::NegativeArgument(t));
        }
        Ok(self.apply(r, t))
    }

    pub fn apply(&self, r: f64, t: f64) -> f64 {
        self.k.apply(r) * (-self.lambda * t).exp()
    }

    /// `factor·β`; the explicit way to enlarge β so that `β(r,0) > r`.
    pub fn scaled(&self, factor: f64) -> Result<KLFn, ComparisonError> {
        KLFn::new(self.k.scaled(factor)?, self.lambda)
    }
}

/// Sample grid for [`verify_k`] and [`verify_kl`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassGrid {
    /// Largest radius `R`; radii are `R·i/r_points` for `i = 1..=r_points`.
    pub r_max: f64,
    pub r_points: usize,
    pub t_max: f64,
    pub t_points: usize,
    /// Unboundedness proxy: `f(R) >= threshold`.
    pub threshold: f64,
}

impl Default for ClassGrid {
    fn default() -> Self {
        ClassGrid {
            r_max: 100.0,
            r_points: 1000,
            t_max: 10.0,
            t_points: 100,
            threshold: 10.0,
        }
    }
}

impl ClassGrid {
    fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (1..=self.r_points).map(move |i| self.r_max * i as f64 / self.r_points as f64)
    }

    fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.t_points).map(move |j| self.t_max * j as f64 / self.t_points as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassProperty {
    ZeroAtZero,
    StrictlyIncreasing,
    Unbounded,
    DecreasingInTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassViolation {
    pub property: ClassProperty,
    pub r: f64,
    /// Time coordinate for KL checks.
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub zero_at_zero: bool,
    pub strictly_increasing: bool,
    pub unbounded: bool,
    /// `None` for K∞ candidates.
    pub decreasing_in_time: Option<bool>,
    pub first_violation: Option<ClassViolation>,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.zero_at_zero && self.strictly_increasing && self.unbounded && self.decreasing_in_time.unwrap_or(true)
    }
}

/// Sampled K∞ membership check for an arbitrary candidate function.
pub fn verify_k(f: impl Fn(f64) -> f64, grid: &ClassGrid) -> ClassReport {
    let mut first = None;
    let mut note = |v: ClassViolation| {
        if first.is_none() {
            first = Some(v);
        }
    };

    let zero_at_zero = f(0.0) == 0.0;
    if !zero_at_zero {
        note(ClassViolation { property: ClassProperty::ZeroAtZero, r: 0.0, t: None });
    }
    let mut strictly_increasing = true;
    let mut prev = f(0.0);
    for r in grid.radii() {
        let value = f(r);
        if !(value > prev) {
            strictly_increasing = false;
            note(ClassViolation { property: ClassProperty::StrictlyIncreasing, r, t: None });
            break;
        }
        prev = value;
    }
    let unbounded = f(grid.r_max) >= grid.threshold;
    if !unbounded {
        note(ClassViolation { property: ClassProperty::Unbounded, r: grid.r_max, t: None });
    }
    ClassReport {
        zero_at_zero,
        strictly_increasing,
        unbounded,
        decreasing_in_time: None,
        first_violation: first,
    }
}

/// Sampled KL membership check. Values that have underflowed to zero count as
/// decreasing.
pub fn verify_kl(f: impl Fn(f64, f64) -> f64, grid: &ClassGrid) -> ClassReport {
    let mut first = None;
    let mut note = |v: ClassViolation| {
        if first.is_none() {
            first = Some(v);
        }
    };

    let mut zero_at_zero = true;
    let mut strictly_increasing = true;
    for t in grid.times() {
        if f(0.0, t) != 0.0 {
            if zero_at_zero {
                note(ClassViolation { property: ClassProperty::ZeroAtZero, r: 0.0, t: Some(t) });
            }
            zero_at_zero = false;
        }
        if strictly_increasing {
            let mut prev = f(0.0, t);
            for r in grid.radii() {
                let value = f(r, t);
                if !(value > prev) && !(value == 0.0 && prev == 0.0 && t > 0.0) {
                    strictly_increasing = false;
                    note(ClassViolation { property: ClassProperty::StrictlyIncreasing, r, t: Some(t) });
                    break;
                }
                prev = value;
            }
        }
    }
    let unbounded = f(grid.r_max, 0.0) >= grid.threshold;
    if !unbounded {
        note(ClassViolation { property: ClassProperty::Unbounded, r: grid.r_max, t: Some(0.0) });
    }
    let mut decreasing = true;
    'outer: for r in grid.radii() {
        let mut prev = f(r, 0.0);
        for t in grid.times().skip(1) {
            let value = f(r, t);
            if !(value < prev) && !(value == 0.0 && prev == 0.0) {
                decreasing = false;
                note(ClassViolation { property: ClassProperty::DecreasingInTime, r, t: Some(t) });
                break 'outer;
            }
            prev = value;
        }
    }
    ClassReport {
        zero_at_zero,
        strictly_increasing,
        unbounded,
        decreasing_in_time: Some(decreasing),
        first_violation: first,
    }
}

impl KInfFn {
    pub fn verify_class(&self, grid: &ClassGrid) -> ClassReport {
        verify_k(|r| self.apply(r), grid)
    }
}

impl KLFn {
    pub fn verify_class(&self, grid: &ClassGrid) -> ClassReport {
        verify_kl(|r, t| self.apply(r, t), grid)
    }
}

/// Radii at which `β(r,0) > r` is checked before building ρ.
const RHO_CHECK_POINTS: usize = 1000;
const RHO_CHECK_RANGE: f64 = 100.0;

/// Builds `ρ(r) = ½·γ⁻¹(α⁻¹(r)/4)` with `α(r) = β(r, 0)`.
///
/// `α(r) > r` is required on a sampled range; β is never enlarged implicitly,
/// use [`KLFn::scaled`] first if needed.
pub fn construct_rho(beta: &KLFn, gamma: &KInfFn) -> Result<KInfFn, ComparisonError> {
    let alpha = beta.at_zero();
    let log_lo = (1e-6f64).ln();
    let log_hi = RHO_CHECK_RANGE.ln();
    let small = (0..RHO_CHECK_POINTS).map(|i| (log_lo + (log_hi - log_lo) * i as f64 / (RHO_CHECK_POINTS - 1) as f64).exp());
    let uniform = (1..=RHO_CHECK_POINTS).map(|i| RHO_CHECK_RANGE * i as f64 / RHO_CHECK_POINTS as f64);
    let mut radii: Vec<f64> = small.chain(uniform).collect();
    radii.sort_by(f64::total_cmp);
    for r in radii {
        let a = alpha.apply(r);
        if !(a > r) {
            return Err(ComparisonError::PreconditionViolated { r, alpha: a });
        }
    }
    let alpha_inv = alpha.invert()?;
    let gamma_inv = gamma.invert()?;
    let quarter = KInfFn::linear(0.25)?.compose(&alpha_inv)?;
    let half = KInfFn::linear(0.5)?;
    half.compose(&gamma_inv.compose(&quarter)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eval_examples() {
        assert_eq!(KInfFn::power(1.0, 2.0).unwrap().eval(3.0).unwrap(), 9.0);
        assert_eq!(KInfFn::linear(5.0).unwrap().eval(0.0).unwrap(), 0.0);
        assert_eq!(KInfFn::power(2.0, 0.5).unwrap().eval(4.0).unwrap(), 4.0);
        assert!(matches!(
            KInfFn::linear(1.0).unwrap().eval(-1.0),
            Err(ComparisonError::NegativeArgument(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let beta = KLFn::linear_exp(2.0, 1.0).unwrap();
        assert_eq!(beta.eval(1.0, 0.0).unwrap(), 2.0);
        assert_eq!(beta.eval(0.0, 3.7).unwrap(), 0.0);
        assert!((beta.eval(1.0, 2f64.ln()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KInfFn::linear(0.0).is_err());
        assert!(KInfFn::power(1.0, -1.0).is_err());
        assert!(KLFn::linear_exp(1.0, 0.0).is_err());
        assert!(serde_json::from_str::<KInfFn>(r#"{"family":"power","c":-1.0,"p":2.0}"#).is_err());
    }

    #[test]
    fn json_encoding() {
        let f: KInfFn = serde_json::from_str(r#"{"family":"power","c":1.0,"p":2.0}"#).unwrap();
        assert_eq!(f, KInfFn::Power { c: 1.0, p: 2.0 });
        let kl: KLFn = serde_json::from_str(r#"{"k":{"family":"linear","c":2.0},"lambda":1.0}"#).unwrap();
        assert_eq!(kl, KLFn::linear_exp(2.0, 1.0).unwrap());
        assert_eq!(
            serde_json::to_string(&KInfFn::linear(0.5).unwrap()).unwrap(),
            r#"{"family":"linear","c":0.5}"#
        );
    }

    #[test]
    fn invert_examples() {
        assert_eq!(KInfFn::linear(2.0).unwrap().invert().unwrap(), KInfFn::Linear { c: 0.5 });
        assert_eq!(
            KInfFn::power(1.0, 2.0).unwrap().invert().unwrap(),
            KInfFn::Power { c: 1.0, p: 0.5 }
        );
        assert!(matches!(
            KInfFn::affine_log(1.0).unwrap().invert(),
            Err(ComparisonError::NotInvertible("affine_log"))
        ));
    }

    #[test]
    fn invert_composition_oracle() {
        for f in [
            KInfFn::linear(2.0).unwrap(),
            KInfFn::linear(0.3).unwrap(),
            KInfFn::power(1.0, 2.0).unwrap(),
            KInfFn::power(2.0, 0.5).unwrap(),
            KInfFn::power(0.7, 1.3).unwrap(),
        ] {
            let g = f.invert().unwrap();
            let worst = (0..1000)
                .map(|i| 100.0 * i as f64 / 999.0)
                .map(|r| (g.apply(f.apply(r)) - r).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-9, "{f:?}: {worst}");
        }
    }

    #[test]
    fn verify_class_examples() {
        let grid = ClassGrid::default();
        assert!(KInfFn::linear(1.0).unwrap().verify_class(&grid).passed());

        let growing = verify_kl(|r, t| r * t.exp(), &grid);
        assert_eq!(growing.decreasing_in_time, Some(false));
        let v = growing.first_violation.unwrap();
        assert_eq!(v.property, ClassProperty::DecreasingInTime);
        assert_eq!(v.r, 0.1);
        assert_eq!(v.t, Some(0.1));

        // tanh(100) < 10, so the bounded candidate fails the proxy
        assert!(100f64.tanh() < 10.0);
        let bounded = verify_k(f64::tanh, &grid);
        assert!(!bounded.unbounded);
        // tanh saturates to 1.0 in f64 well before r_max
        assert!(!bounded.strictly_increasing);
        assert_eq!(bounded.first_violation.unwrap().property, ClassProperty::StrictlyIncreasing);

        let offset = verify_k(|r| r + 1.0, &grid);
        assert!(!offset.zero_at_zero);
    }

    #[test]
    fn rho_examples() {
        let beta = KLFn::linear_exp(2.0, 1.0).unwrap();
        let rho = construct_rho(&beta, &KInfFn::identity()).unwrap();
        assert_eq!(rho, KInfFn::Linear { c: 1.0 / 16.0 });

        let beta = KLFn::linear_exp(4.0, 2.0).unwrap();
        let rho = construct_rho(&beta, &KInfFn::linear(2.0).unwrap()).unwrap();
        assert_eq!(rho, KInfFn::Linear { c: 1.0 / 64.0 });

        let beta = KLFn::linear_exp(0.5, 1.0).unwrap();
        assert!(matches!(
            construct_rho(&beta, &KInfFn::identity()),
            Err(ComparisonError::PreconditionViolated { .. })
        ));

        // 2r^2 < r for small r
        let beta = KLFn::new(KInfFn::power(2.0, 2.0).unwrap(), 1.0).unwrap();
        assert!(construct_rho(&beta, &KInfFn::identity()).is_err());

        let beta = KLFn::linear_exp(2.0, 1.0).unwrap();
        assert!(matches!(
            construct_rho(&beta, &KInfFn::affine_log(1.0).unwrap()),
            Err(ComparisonError::NotInvertible(_))
        ));
    }

    fn kinf_strategy() -> impl Strategy<Value = KInfFn> {
        prop_oneof![
            (0.05f64..20.0).prop_map(|c| KInfFn::linear(c).unwrap()),
            (0.05f64..20.0, 0.2f64..5.0).prop_map(|(c, p)| KInfFn::power(c, p).unwrap()),
        ]
    }

    fn params(f: &KInfFn) -> (f64, f64) {
        f.power_params().unwrap()
    }

    proptest! {
        #[test]
        fn invert_is_an_involution(f in kinf_strategy()) {
            let back = f.invert().unwrap().invert().unwrap();
            let (c0, p0) = params(&f);
            let (c1, p1) = params(&back);
            prop_assert!((c0 - c1).abs() <= 8.0 * f64::EPSILON * c0);
            prop_assert!((p0 - p1).abs() <= 4.0 * f64::EPSILON * p0);
        }

        #[test]
        fn every_family_member_passes_default_grid(f in kinf_strategy()) {
            // the growth proxy only holds once c·100^p reaches the threshold
            let report = f.verify_class(&ClassGrid::default());
            prop_assert!(report.zero_at_zero && report.strictly_increasing);
            prop_assert_eq!(report.unbounded, f.apply(100.0) >= 10.0);
        }

        #[test]
        fn rho_satisfies_defining_inequality(
            c_beta in 1.05f64..10.0,
            lambda in 0.1f64..3.0,
            gamma in kinf_strategy(),
        ) {
            let beta = KLFn::linear_exp(c_beta, lambda).unwrap();
            let rho = construct_rho(&beta, &gamma).unwrap();
            let alpha_inv = beta.at_zero().invert().unwrap();
            for i in 1..=1000 {
                let r = 100.0 * i as f64 / 1000.0;
                let lhs = gamma.apply(2.0 * rho.apply(r));
                let rhs = alpha_inv.apply(r) / 4.0;
                prop_assert!(lhs <= rhs + 1e-12, "r={} lhs={} rhs={}", r, lhs, rhs);
            }
        }
    }

    #[test]
    fn default_instances_pass_class_check() {
        let grid = ClassGrid::default();
        for f in [
            KInfFn::linear(1.0).unwrap(),
            KInfFn::power(1.0, 2.0).unwrap(),
            KInfFn::power(2.0, 0.5).unwrap(),
            KInfFn::affine_log(3.0).unwrap(),
        ] {
            assert!(f.verify_class(&grid).passed(), "{f:?}");
        }
        assert!(KLFn::linear_exp(2.0, 1.0).unwrap().verify_class(&grid).passed());
    }
}
