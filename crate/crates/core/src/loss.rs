//! Convex surrogate losses `f` applied to the scaled log-ratio margin `β·ρ`.
//!
//! Six classical binary-classification surrogates are built in:
//!
//! | name                  | f(x)                  |
//! |-----------------------|-----------------------|
//! | `logistic`            | log(1 + exp(-x))      |
//! | `hinge`               | max(0, 1 - x)         |
//! | `squared`             | (x - 1)²              |
//! | `exponential`         | exp(-x)               |
//! | `truncated_quadratic` | max(0, 1 - x)²        |
//! | `savage`              | 1 / (1 + exp(x))²     |
//!
//! Further losses can be registered in a [`LossRegistry`] once they pass
//! [`check_admissible`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};

/// Argument clamp for the exponential loss.
pub const EXP_CLAMP: f64 = 60.0;

/// Number of uniform points on `[GRID_LO, GRID_HI]` used by grid checks.
pub const GRID_POINTS: usize = 2001;
pub const GRID_LO: f64 = -10.0;
pub const GRID_HI: f64 = 10.0;

/// Slack allowed in the midpoint-convexity inequality.
pub const CONVEXITY_SLACK: f64 = 1e-12;

pub type ScalarFn = fn(f64) -> f64;

/// The six built-in losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Hinge,
    Squared,
    Exponential,
    TruncatedQuadratic,
    Savage,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Logistic,
        LossKind::Hinge,
        LossKind::Squared,
        LossKind::Exponential,
        LossKind::TruncatedQuadratic,
        LossKind::Savage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Hinge => "hinge",
            LossKind::Squared => "squared",
            LossKind::Exponential => "exponential",
            LossKind::TruncatedQuadratic => "truncated_quadratic",
            LossKind::Savage => "savage",
        }
    }

    pub fn loss(self) -> ConvexLoss {
        match self {
            LossKind::Logistic => ConvexLoss {
                name: "logistic",
                value: logistic,
                first_deriv: logistic_d1,
                second_deriv: Some(logistic_d2),
                smooth: true,
                kinks: &[],
            },
            LossKind::Hinge => ConvexLoss {
                name: "hinge",
                value: hinge,
                first_deriv: hinge_d1,
                second_deriv: Some(hinge_d2),
                smooth: false,
                kinks: &[1.0],
            },
            LossKind::Squared => ConvexLoss {
                name: "squared",
                value: squared,
                first_deriv: squared_d1,
                second_deriv: Some(squared_d2),
                smooth: true,
                kinks: &[],
            },
            LossKind::Exponential => ConvexLoss {
                name: "exponential",
                value: exponential,
                first_deriv: exponential_d1,
                second_deriv: Some(exponential_d2),
                smooth: true,
                kinks: &[],
            },
            LossKind::TruncatedQuadratic => ConvexLoss {
                name: "truncated_quadratic",
                value: truncated_quadratic,
                first_deriv: truncated_quadratic_d1,
                second_deriv: Some(truncated_quadratic_d2),
                smooth: true,
                kinks: &[],
            },
            LossKind::Savage => ConvexLoss {
                name: "savage",
                value: savage,
                first_deriv: savage_d1,
                second_deriv: Some(savage_d2),
                smooth: true,
                kinks: &[],
            },
        }
    }

    fn valid_names() -> String {
        LossKind::ALL.map(LossKind::name).join(", ")
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownLoss {
                name: s.to_string(),
                valid: LossKind::valid_names(),
            })
    }
}

/// A named convex surrogate with analytic derivatives.
///
/// `first_deriv` returns the left derivative at kinks. `second_deriv` is
/// `None` only for user losses that do not supply one.
#[derive(Clone, Copy)]
pub struct ConvexLoss {
    pub name: &'static str,
    pub value: ScalarFn,
    pub first_deriv: ScalarFn,
    pub second_deriv: Option<ScalarFn>,
    pub smooth: bool,
    /// Points where the first derivative jumps.
    pub kinks: &'static [f64],
}

impl fmt::Debug for ConvexLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexLoss")
            .field("name", &self.name)
            .field("smooth", &self.smooth)
            .field("kinks", &self.kinks)
            .finish()
    }
}

impl ConvexLoss {
    pub fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn deriv(&self, x: f64) -> f64 {
        (self.first_deriv)(x)
    }

    pub fn second_deriv(&self, x: f64) -> Result<f64> {
        if !self.smooth && self.kinks.contains(&x) {
            return Err(Error::Undefined(format!(
                "second derivative of `{}` at its kink x = {x}",
                self.name
            )));
        }
        match self.second_deriv {
            Some(d2) => Ok(d2(x)),
            None => Err(Error::Undefined(format!(
                "`{}` does not provide a second derivative",
                self.name
            ))),
        }
    }
}

/// Looks up one of the built-in losses by its canonical name.
pub fn make_loss(name: &str) -> Result<ConvexLoss> {
    name.parse::<LossKind>().map(LossKind::loss)
}

/// `f'(x)`, with the left derivative at kinks.
pub fn eval_deriv(f: &ConvexLoss, x: f64) -> f64 {
    f.deriv(x)
}

pub fn eval_second_deriv(f: &ConvexLoss, x: f64) -> Result<f64> {
    f.second_deriv(x)
}

/// The squared-loss regularizer `β' = f''(0)·β / |f'(0)|` that matches the
/// second-order expansion of `f` at zero margin.
pub fn taylor_equivalent_beta(f: &ConvexLoss, beta: f64) -> Result<f64> {
    taylor_ratio(f).map(|r| r * beta)
}

/// `f''(0) / |f'(0)|`.
pub fn taylor_ratio(f: &ConvexLoss) -> Result<f64> {
    if !f.smooth {
        return Err(Error::NotApplicable(format!(
            "`{}` is not smooth; no second-order expansion at 0",
            f.name
        )));
    }
    let d1 = f.deriv(0.0);
    let d2 = f.second_deriv(0.0)?;
    if !(d1 < 0.0) {
        return Err(Error::NotApplicable(format!(
            "`{}` has f'(0) = {d1}, expected < 0",
            f.name
        )));
    }
    if !(d2 > 0.0) {
        return Err(Error::NotApplicable(format!(
            "`{}` has f''(0) = {d2}, expected > 0",
            f.name
        )));
    }
    Ok(d2 / d1.abs())
}

/// Scale `f'(0)² / (2 f''(0))` relating the expanded GPO objective to the
/// squared loss at `β'`: `E f(βρ) ≈ const + scale · E (β'ρ − 1)²`.
pub fn taylor_objective_scale(f: &ConvexLoss) -> Result<f64> {
    taylor_ratio(f)?;
    let d1 = f.deriv(0.0);
    let d2 = f.second_deriv(0.0)?;
    Ok(d1 * d1 / (2.0 * d2))
}

/// The check grid: [`GRID_POINTS`] uniform points on `[GRID_LO, GRID_HI]`.
pub fn check_grid() -> Vec<f64> {
    let step = (GRID_HI - GRID_LO) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS)
        .map(|i| GRID_LO + step * i as f64)
        .collect()
}

/// Outcome of [`check_admissible`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub name: &'static str,
    pub fp0: f64,
    /// Total count of grid pairs `(a, b)` violating midpoint convexity.
    pub convexity_violation_count: usize,
    /// First few violating pairs.
    pub convexity_violations: Vec<(f64, f64)>,
    /// Grid points where `f(x) < 0`.
    pub negative_points: Vec<f64>,
}

impl AdmissibilityReport {
    pub fn convex(&self) -> bool {
        self.convexity_violation_count == 0
    }

    pub fn nonnegative(&self) -> bool {
        self.negative_points.is_empty()
    }

    pub fn descending_at_zero(&self) -> bool {
        self.fp0 < 0.0
    }

    pub fn admissible(&self) -> bool {
        self.convex() && self.nonnegative() && self.descending_at_zero()
    }
}

const MAX_REPORTED: usize = 16;

/// Grid-sampled admissibility: midpoint convexity over every pair of grid
/// points, nonnegativity, and `f'(0) < 0`.
pub fn check_admissible(f: &ConvexLoss) -> AdmissibilityReport {
    let grid = check_grid();
    let values: Vec<f64> = grid.iter().map(|&x| f.value(x)).collect();

    let mut count = 0;
    let mut violations = Vec::new();
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            let mid = f.value(0.5 * (grid[i] + grid[j]));
            if mid > 0.5 * (values[i] + values[j]) + CONVEXITY_SLACK {
                count += 1;
                if violations.len() < MAX_REPORTED {
                    violations.push((grid[i], grid[j]));
                }
            }
        }
    }

    let negative_points = grid
        .iter()
        .zip(&values)
        .filter(|(_, v)| **v < 0.0)
        .map(|(x, _)| *x)
        .collect();

    AdmissibilityReport {
        name: f.name,
        fp0: f.deriv(0.0),
        convexity_violation_count: count,
        convexity_violations: violations,
        negative_points,
    }
}

/// Large-margin behaviour of `f'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailClass {
    /// `f'(ρ) < 0` for every sampled large margin: ρ keeps growing with a
    /// vanishing push.
    Decaying,
    /// `f'(ρ) ≥ 0` from some `ρ₀ ≥ 1` on: updates stop or reverse.
    Upward,
}

/// Classifies the tail from `f'` on the probe margins `{1, 2, 5, 10}`.
pub fn tail_class(f: &ConvexLoss) -> TailClass {
    const PROBES: [f64; 4] = [1.0, 2.0, 5.0, 10.0];
    let upward = PROBES
        .iter()
        .position(|&r| f.deriv(r) >= 0.0)
        .is_some_and(|i| PROBES[i..].iter().all(|&r| f.deriv(r) >= 0.0));
    if upward {
        TailClass::Upward
    } else {
        TailClass::Decaying
    }
}

/// Named losses: the built-ins plus any admissible user extensions.
#[derive(Debug, Clone, Default)]
pub struct LossRegistry {
    custom: BTreeMap<String, ConvexLoss>,
}

impl LossRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `loss` under its name after checking admissibility.
    /// Built-in names cannot be shadowed.
    pub fn register(&mut self, loss: ConvexLoss) -> Result<()> {
        if loss.name.parse::<LossKind>().is_ok() {
            return Err(Error::Config(format!(
                "`{}` is a built-in loss name",
                loss.name
            )));
        }
        let report = check_admissible(&loss);
        if !report.admissible() {
            return Err(Error::Config(format!(
                "`{}` is not admissible (convex: {}, nonnegative: {}, f'(0) = {})",
                loss.name,
                report.convex(),
                report.nonnegative(),
                report.fp0
            )));
        }
        self.custom.insert(loss.name.to_string(), loss);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<ConvexLoss> {
        if let Some(loss) = self.custom.get(name) {
            return Ok(*loss);
        }
        name.parse::<LossKind>().map(LossKind::loss).map_err(|_| {
            let mut valid = LossKind::valid_names();
            for extra in self.custom.keys() {
                valid.push_str(", ");
                valid.push_str(extra);
            }
            Error::UnknownLoss {
                name: name.to_string(),
                valid,
            }
        })
    }

    pub fn names(&self) -> Vec<String> {
        LossKind::ALL
            .iter()
            .map(|k| k.name().to_string())
            .chain(self.custom.keys().cloned())
            .collect()
    }
}

fn logistic(x: f64) -> f64 {
    softplus(-x)
}

fn logistic_d1(x: f64) -> f64 {
    -sigmoid(-x)
}

fn logistic_d2(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

fn hinge(x: f64) -> f64 {
    (1.0 - x).max(0.0)
}

fn hinge_d1(x: f64) -> f64 {
    if x <= 1.0 {
        -1.0
    } else {
        0.0
    }
}

fn hinge_d2(_x: f64) -> f64 {
    0.0
}

fn squared(x: f64) -> f64 {
    (x - 1.0) * (x - 1.0)
}

fn squared_d1(x: f64) -> f64 {
    2.0 * (x - 1.0)
}

fn squared_d2(_x: f64) -> f64 {
    2.0
}

fn exponential(x: f64) -> f64 {
    (-x.clamp(-EXP_CLAMP, EXP_CLAMP)).exp()
}

fn exponential_d1(x: f64) -> f64 {
    -exponential(x)
}

fn exponential_d2(x: f64) -> f64 {
    exponential(x)
}

fn truncated_quadratic(x: f64) -> f64 {
    let h = (1.0 - x).max(0.0);
    h * h
}

fn truncated_quadratic_d1(x: f64) -> f64 {
    -2.0 * (1.0 - x).max(0.0)
}

// Left value at x = 1.
fn truncated_quadratic_d2(x: f64) -> f64 {
    if x <= 1.0 {
        2.0
    } else {
        0.0
    }
}

fn savage(x: f64) -> f64 {
    let s = sigmoid(-x);
    s * s
}

fn savage_d1(x: f64) -> f64 {
    let s = sigmoid(-x);
    -2.0 * s * s * sigmoid(x)
}

fn savage_d2(x: f64) -> f64 {
    let s = sigmoid(-x);
    let t = sigmoid(x);
    2.0 * s * s * t * (2.0 * t - s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff, second_central_diff};

    fn all() -> Vec<ConvexLoss> {
        LossKind::ALL.iter().map(|k| k.loss()).collect()
    }

    #[test]
    fn values_at_zero() {
        assert_eq!(make_loss("logistic").unwrap().value(0.0), 2f64.ln());
        assert_eq!(make_loss("squared").unwrap().value(0.0), 1.0);
        assert_eq!(make_loss("savage").unwrap().value(0.0), 0.25);
        assert_eq!(make_loss("hinge").unwrap().value(2.0), 0.0);
        assert_eq!(make_loss("exponential").unwrap().value(0.0), 1.0);
        assert_eq!(make_loss("truncated_quadratic").unwrap().value(0.0), 1.0);
    }

    #[test]
    fn unknown_name_lists_valid_set() {
        let err = make_loss("huber").unwrap_err().to_string();
        assert!(err.contains("huber"));
        for k in LossKind::ALL {
            assert!(err.contains(k.name()), "{err}");
        }
    }

    #[test]
    fn first_derivatives_at_zero_match_finite_differences() {
        let cases = [("logistic", -0.5), ("squared", -2.0), ("savage", -0.25)];
        for (name, expected) in cases {
            let f = make_loss(name).unwrap();
            let fd = central_diff(|x| f.value(x), 0.0, 1e-6);
            assert!((fd - expected).abs() < 1e-8, "{name}: fd {fd}");
            assert!((f.deriv(0.0) - expected).abs() < 1e-15, "{name}");
        }
        assert_eq!(make_loss("hinge").unwrap().deriv(1.0), -1.0);
    }

    #[test]
    fn second_derivatives_at_zero_match_finite_differences() {
        let cases = [("logistic", 0.25), ("exponential", 1.0), ("savage", 0.125)];
        for (name, expected) in cases {
            let f = make_loss(name).unwrap();
            let fd = second_central_diff(|x| f.value(x), 0.0, 1e-4);
            assert!((fd - expected).abs() < 1e-6, "{name}: fd {fd}");
            assert!((f.second_deriv(0.0).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn hinge_second_derivative_undefined_at_kink() {
        let h = make_loss("hinge").unwrap();
        assert!(matches!(h.second_deriv(1.0), Err(Error::Undefined(_))));
        assert_eq!(h.second_deriv(0.0).unwrap(), 0.0);
    }

    #[test]
    fn taylor_betas() {
        let sq = make_loss("squared").unwrap();
        assert_eq!(taylor_equivalent_beta(&sq, 1.0).unwrap(), 1.0);
        for beta in [0.01, 0.3, 7.0, 1e3] {
            assert_eq!(taylor_equivalent_beta(&sq, beta).unwrap(), beta);
        }
        let lg = make_loss("logistic").unwrap();
        assert_eq!(taylor_equivalent_beta(&lg, 1.0).unwrap(), 0.5);
        let ex = make_loss("exponential").unwrap();
        assert_eq!(taylor_equivalent_beta(&ex, 3.0).unwrap(), 3.0);
        let hinge = make_loss("hinge").unwrap();
        assert!(matches!(
            taylor_equivalent_beta(&hinge, 1.0),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn derivatives_match_fd_on_grid() {
        for f in all().into_iter().filter(|f| f.smooth) {
            for x in check_grid() {
                let d = f.deriv(x);
                let fd = central_diff(|t| f.value(t), x, 1e-6);
                let rel = (d - fd).abs() / d.abs().max(1.0);
                assert!(rel < 1e-5, "{} at {x}: {d} vs {fd}", f.name);
            }
        }
    }

    #[test]
    fn nonnegative_on_grid() {
        for f in all() {
            assert!(
                check_grid().iter().all(|&x| f.value(x) >= 0.0),
                "{}",
                f.name
            );
        }
    }

    #[test]
    fn midpoint_convexity_of_convex_table_losses() {
        for f in all().into_iter().filter(|f| f.name != "savage") {
            let report = check_admissible(&f);
            assert!(report.admissible(), "{report:?}");
        }
    }

    // 1/(1+e^x)² has f'' < 0 for x < -ln 2, so the grid check must flag it.
    #[test]
    fn savage_fails_midpoint_convexity_left_of_minus_ln2() {
        let f = make_loss("savage").unwrap();
        let report = check_admissible(&f);
        assert!(!report.convex());
        assert!(report.nonnegative());
        assert!(report.descending_at_zero());
        assert!(report
            .convexity_violations
            .iter()
            .all(|&(a, b)| 0.5 * (a + b) < -(2f64.ln()) + 1e-9));
        assert!(f.second_deriv(-1.0).unwrap() < 0.0);
        assert!(f.second_deriv(-0.6).unwrap() > 0.0);
    }

    #[test]
    fn injected_doubles_are_rejected() {
        let linear = ConvexLoss {
            name: "neg_linear",
            value: |x| -x,
            first_deriv: |_| -1.0,
            second_deriv: Some(|_| 0.0),
            smooth: true,
            kinks: &[],
        };
        let r = check_admissible(&linear);
        assert!(r.convex());
        assert!(!r.nonnegative());
        assert!(!r.admissible());

        let parabola = ConvexLoss {
            name: "parabola",
            value: |x| x * x,
            first_deriv: |x| 2.0 * x,
            second_deriv: Some(|_| 2.0),
            smooth: true,
            kinks: &[],
        };
        let r = check_admissible(&parabola);
        assert!(r.convex() && r.nonnegative());
        assert!(!r.descending_at_zero());
        assert!(!r.admissible());

        assert!(check_admissible(&make_loss("logistic").unwrap()).admissible());
    }

    #[test]
    fn tail_classes() {
        use LossKind::*;
        for k in [Hinge, TruncatedQuadratic, Squared] {
            let f = k.loss();
            assert_eq!(tail_class(&f), TailClass::Upward, "{k}");
            for rho in [2.0, 5.0, 10.0] {
                assert!(f.deriv(rho) >= 0.0);
            }
        }
        for k in [Logistic, Exponential, Savage] {
            let f = k.loss();
            assert_eq!(tail_class(&f), TailClass::Decaying, "{k}");
            for rho in [1.0, 2.0, 5.0, 10.0] {
                assert!(f.deriv(rho) < 0.0);
            }
            assert!(f.deriv(10.0).abs() < f.deriv(1.0).abs());
        }
    }

    #[test]
    fn exponential_is_clamped() {
        let f = make_loss("exponential").unwrap();
        assert!(f.value(-1e6).is_finite());
        assert_eq!(f.value(-1e6), f.value(-EXP_CLAMP));
        assert!(f.deriv(-1e6).is_finite());
    }

    #[test]
    fn registry_accepts_admissible_extensions_only() {
        let mut reg = LossRegistry::new();
        let smoothed_hinge = ConvexLoss {
            name: "softplus2",
            value: |x| softplus(2.0 * (1.0 - x)) / 2.0,
            first_deriv: |x| -sigmoid(2.0 * (1.0 - x)),
            second_deriv: None,
            smooth: true,
            kinks: &[],
        };
        reg.register(smoothed_hinge).unwrap();
        assert_eq!(reg.get("softplus2").unwrap().name, "softplus2");
        assert_eq!(reg.names().len(), 7);

        let bad = ConvexLoss {
            name: "cubic",
            value: |x| x * x * x,
            first_deriv: |x| 3.0 * x * x,
            second_deriv: None,
            smooth: true,
            kinks: &[],
        };
        assert!(reg.register(bad).is_err());
        assert!(reg.register(LossKind::Squared.loss()).is_err());
        let err = reg.get("nope").unwrap_err().to_string();
        assert!(err.contains("softplus2"));
    }
}
