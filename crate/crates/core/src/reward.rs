//! Reward modeling as binary classification over response pairs.
//!
//! With preference matrix `p` and behavior distribution `μ`, the pointwise
//! reward loss is
//! `Σ_{i,j} μi μj [p_ij f(r_i − r_j) + p_ji f(r_j − r_i)]`.
//! Its minimizer, turned into a policy `π ∝ πref · exp(r/β)`, coincides with
//! the minimizer of the GPO objective on the dataset weighted by
//! `μi μj p_ij`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ConvexLoss;
use crate::math::{sigmoid, softmax};
use crate::optim::{descend, DescentOptions};
use crate::policy::{gpo_loss_and_gradient, Pair, PreferenceDataset, SoftmaxPolicy};

const COMPLEMENT_TOL: f64 = 1e-12;

/// `p[i][j]` is the probability that response `i` beats response `j`.
/// The diagonal is fixed at 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PreferenceMatrix {
    p: Array2<f64>,
}

impl PreferenceMatrix {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        let (n, m) = p.dim();
        if n < 2 || n != m {
            return Err(Error::Dimension(format!(
                "preference matrix must be square with n ≥ 2, got {n}×{m}"
            )));
        }
        let mut p = p;
        for i in 0..n {
            p[[i, i]] = 0.5;
            for j in 0..n {
                let v = p[[i, j]];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "p[{i}][{j}] = {v} is not a probability"
                    )));
                }
                if (v + p[[j, i]] - 1.0).abs() > COMPLEMENT_TOL {
                    return Err(Error::Config(format!(
                        "p[{i}][{j}] + p[{j}][{i}] = {} ≠ 1",
                        v + p[[j, i]]
                    )));
                }
            }
        }
        Ok(Self { p })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(
                "preference matrix rows must have equal length".into(),
            ));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(Array2::from_shape_vec((n, n), flat).expect("shape checked"))
    }

    /// All off-diagonal entries 0.5.
    pub fn indifferent(n: usize) -> Result<Self> {
        Self::new(Array2::from_elem((n, n), 0.5))
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[[i, j]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }
}

impl TryFrom<Vec<Vec<f64>>> for PreferenceMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<PreferenceMatrix> for Vec<Vec<f64>> {
    fn from(m: PreferenceMatrix) -> Self {
        m.p.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector {
    pub r: Vec<f64>,
}

impl RewardVector {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("reward vector has non-finite entries".into()));
        }
        Ok(Self { r })
    }

    /// `r − r[0]`.
    pub fn gauge_fixed(&self) -> Vec<f64> {
        self.r.iter().map(|v| v - self.r[0]).collect()
    }
}

/// `p[i][j] = σ(r*[i] − r*[j])`.
pub fn bt_preferences(r_star: &RewardVector) -> Result<PreferenceMatrix> {
    let n = r_star.r.len();
    let p = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.5
        } else {
            sigmoid(r_star.r[i] - r_star.r[j])
        }
    });
    // σ(x) + σ(−x) can miss 1 by an ulp; take the complement of the upper
    // triangle so the invariant holds exactly.
    let mut p = p;
    for i in 0..n {
        for j in 0..i {
            p[[i, j]] = 1.0 - p[[j, i]];
        }
    }
    PreferenceMatrix::new(p)
}

fn check_distribution(mu: &[f64], n: usize) -> Result<()> {
    if mu.len() != n {
        return Err(Error::Dimension(format!(
            "mu has {} entries, expected {n}",
            mu.len()
        )));
    }
    if mu.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(Error::Config("mu entries must be nonnegative".into()));
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("mu sums to {total}, not 1")));
    }
    Ok(())
}

fn check_rewards(r: &[f64], n: usize) -> Result<()> {
    if r.len() != n {
        return Err(Error::Dimension(format!(
            "reward has {} entries, expected {n}",
            r.len()
        )));
    }
    Ok(())
}

fn loss_and_gradient(
    f: &ConvexLoss,
    r: &[f64],
    prefs: &PreferenceMatrix,
    mu: &[f64],
) -> (f64, Vec<f64>) {
    let n = prefs.n();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let w = mu[i] * mu[j];
            let d = r[i] - r[j];
            let (pij, pji) = (prefs.get(i, j), prefs.get(j, i));
            loss += w * (pij * f.value(d) + pji * f.value(-d));
            let g = w * (pij * f.deriv(d) - pji * f.deriv(-d));
            grad[i] += g;
            grad[j] -= g;
        }
    }
    (loss, grad)
}

pub fn reward_loss(
    f: &ConvexLoss,
    r: &RewardVector,
    prefs: &PreferenceMatrix,
    mu: &[f64],
) -> Result<f64> {
    check_distribution(mu, prefs.n())?;
    check_rewards(&r.r, prefs.n())?;
    Ok(loss_and_gradient(f, &r.r, prefs, mu).0)
}

pub fn reward_loss_gradient(
    f: &ConvexLoss,
    r: &RewardVector,
    prefs: &PreferenceMatrix,
    mu: &[f64],
) -> Result<Vec<f64>> {
    check_distribution(mu, prefs.n())?;
    check_rewards(&r.r, prefs.n())?;
    Ok(loss_and_gradient(f, &r.r, prefs, mu).1)
}

/// Minimizes [`reward_loss`] with `r[0] = 0` until the gradient norm drops
/// below `tol`. Separable preferences with a loss whose derivative never
/// vanishes have no minimizer; that surfaces as [`Error::Unbounded`].
pub fn fit_pointwise_reward(
    f: &ConvexLoss,
    prefs: &PreferenceMatrix,
    mu: &[f64],
    tol: f64,
) -> Result<RewardVector> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    let n = prefs.n();
    check_distribution(mu, n)?;
    let objective = |free: &[f64]| {
        let mut r = Vec::with_capacity(n);
        r.push(0.0);
        r.extend_from_slice(free);
        let (v, g) = loss_and_gradient(f, &r, prefs, mu);
        (v, g[1..].to_vec())
    };
    let opts = DescentOptions {
        tol,
        ..DescentOptions::default()
    };
    let m = descend(objective, vec![0.0; n - 1], &opts)?;
    let mut r = vec![0.0];
    r.extend(m.x);

    // Past a finite minimizer the objective rises along the ray s·r; when it
    // is still falling at s = 2 the gradient test stopped on a vanishing tail.
    let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let (_, g) = loss_and_gradient(f, &doubled, prefs, mu);
    let slope: f64 = g.iter().zip(&r).map(|(a, b)| a * b).sum();
    if slope < 0.0 {
        return Err(Error::Unbounded(
            "reward loss keeps decreasing along the fitted direction; preferences are separable for this loss"
                .into(),
        ));
    }
    RewardVector::new(r)
}

/// `out[i] = Σ_j μ[j] p[i][j]`, counting the diagonal at 0.5.
pub fn p_succ_mu(prefs: &PreferenceMatrix, mu: &[f64]) -> Result<Vec<f64>> {
    check_distribution(mu, prefs.n())?;
    Ok((0..prefs.n())
        .map(|i| {
            mu.iter()
                .enumerate()
                .map(|(j, m)| m * prefs.get(i, j))
                .sum()
        })
        .collect())
}

/// Bracket limit for [`pairwise_bayes_minimizer`]; a derivative still
/// negative here means the minimizer is at infinity.
pub const BAYES_T_MAX: f64 = 200.0;

/// Minimizer of `p f(t) + (1 − p) f(−t)` by bisection on its derivative.
/// Returns `+∞` (or `−∞`) when the objective keeps decreasing past
/// [`BAYES_T_MAX`].
pub fn pairwise_bayes_minimizer(f: &ConvexLoss, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p must be a probability, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        // The objective at 1 − p is the mirror image of the one at p.
        return pairwise_bayes_minimizer(f, 1.0 - p).map(|t| -t);
    }
    let slope = |t: f64| p * f.deriv(t) - (1.0 - p) * f.deriv(-t);
    let mut lo = 0.0;
    let mut hi = 1.0;
    while slope(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > BAYES_T_MAX {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The GPO dataset equivalent to `(prefs, μ)`: ordered pairs `(i, j)`,
/// `i ≠ j`, weighted by `μi μj p_ij` and normalized.
pub fn pairwise_dataset(prefs: &PreferenceMatrix, mu: &[f64]) -> Result<PreferenceDataset> {
    check_distribution(mu, prefs.n())?;
    let n = prefs.n();
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let w = mu[i] * mu[j] * prefs.get(i, j);
            if i != j && w > 0.0 {
                pairs.push(Pair::new(0, i, j));
                weights.push(w);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config(
            "preference data has no weighted pairs".into(),
        ));
    }
    PreferenceDataset::new(pairs, weights.into_iter().map(|w| w / total).collect())
}

/// Policy probabilities from both routes to the optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct Equivalence {
    /// `softmax(ref + r*/β)` with `r*` from [`fit_pointwise_reward`].
    pub via_reward: Vec<f64>,
    /// Direct minimizer of the GPO objective over policy logits.
    pub via_policy: Vec<f64>,
}

impl Equivalence {
    pub fn max_abs_diff(&self) -> f64 {
        self.via_reward
            .iter()
            .zip(&self.via_policy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves the reward fit and the GPO objective independently.
pub fn optimal_policy_equivalence(
    f: &ConvexLoss,
    prefs: &PreferenceMatrix,
    mu: &[f64],
    reference_logits: &[f64],
    beta: f64,
    tol: f64,
) -> Result<Equivalence> {
    let n = prefs.n();
    if reference_logits.len() != n {
        return Err(Error::Dimension(
            "reference logits must match preference size".into(),
        ));
    }
    let r = fit_pointwise_reward(f, prefs, mu, tol)?;
    let tilted: Vec<f64> = reference_logits
        .iter()
        .zip(&r.r)
        .map(|(l, r)| l + r / beta)
        .collect();

    let data = pairwise_dataset(prefs, mu)?;
    let reference = SoftmaxPolicy::from_rows(&[reference_logits.to_vec()])?;
    let objective = |x: &[f64]| {
        let theta = SoftmaxPolicy::from_rows(&[x.to_vec()]).expect("shape fixed");
        let (v, g) =
            gpo_loss_and_gradient(f, beta, &data, &theta, &reference).expect("shape fixed");
        (v, g.into_raw_vec_and_offset().0)
    };
    let opts = DescentOptions {
        tol,
        ..DescentOptions::default()
    };
    let m = descend(objective, reference_logits.to_vec(), &opts)?;

    Ok(Equivalence {
        via_reward: softmax(&tilted),
        via_policy: softmax(&m.x),
    })
}
