//! Tabular softmax policies and the exact quantities GPO manipulates.
//!
//! A policy holds one row of logits per context. For a labelled pair
//! `(winner, loser)` in context `c` the log-ratio difference is
//!
//! ```text
//! ρ = log πθ(w)/πref(w) − log πθ(l)/πref(l)
//! ```
//!
//! Within a context the log-normalizers cancel, so `ρ` is the change in the
//! logit gap and `∂ρ/∂θ[c] = e_w − e_l` exactly. Everything here is computed
//! by exact sums over the finite action set.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::ConvexLoss;
use crate::math::log_softmax;

/// Softmax policy parameterized by a `[contexts × actions]` logit matrix.
///
/// Two logit rows that differ by a constant encode the same distribution;
/// compare policies through [`SoftmaxPolicy::probs`], never raw logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyJson", into = "PolicyJson")]
pub struct SoftmaxPolicy {
    logits: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    contexts: usize,
    actions: usize,
    logits: Vec<Vec<f64>>,
}

impl TryFrom<PolicyJson> for SoftmaxPolicy {
    type Error = Error;

    fn try_from(json: PolicyJson) -> Result<Self> {
        if json.logits.len() != json.contexts
            || json.logits.iter().any(|row| row.len() != json.actions)
        {
            return Err(Error::Dimension(format!(
                "logits do not form a {}×{} matrix",
                json.contexts, json.actions
            )));
        }
        SoftmaxPolicy::from_rows(&json.logits)
    }
}

impl From<SoftmaxPolicy> for PolicyJson {
    fn from(p: SoftmaxPolicy) -> Self {
        PolicyJson {
            contexts: p.contexts(),
            actions: p.actions(),
            logits: p.logits.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl SoftmaxPolicy {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        let (contexts, actions) = logits.dim();
        if contexts < 1 {
            return Err(Error::Config("a policy needs at least one context".into()));
        }
        if actions < 2 {
            return Err(Error::Config(format!(
                "a policy needs at least two actions, got {actions}"
            )));
        }
        Ok(Self { logits })
    }

    pub fn uniform(contexts: usize, actions: usize) -> Result<Self> {
        Self::new(Array2::zeros((contexts, actions)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != actions) {
            return Err(Error::Dimension("ragged logit rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits = Array2::from_shape_vec((rows.len(), actions), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(logits)
    }

    pub fn contexts(&self) -> usize {
        self.logits.nrows()
    }

    pub fn actions(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array2<f64> {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> Vec<f64> {
        self.logits.row(context).to_vec()
    }

    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        log_softmax(&self.row(context))
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    /// Fails with the first context holding a non-finite logit.
    pub fn check_finite(&self) -> Result<()> {
        for (c, row) in self.logits.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: c });
            }
        }
        Ok(())
    }

    pub fn max_abs_logit(&self) -> f64 {
        self.logits.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_shape(&self, other: &SoftmaxPolicy) -> Result<()> {
        if self.logits.dim() != other.logits.dim() {
            return Err(Error::Dimension(format!(
                "policy shapes differ: {:?} vs {:?}",
                self.logits.dim(),
                other.logits.dim()
            )));
        }
        Ok(())
    }
}

/// One labelled comparison: `winner ≻ loser` in `context`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize, usize)", into = "(usize, usize, usize)")]
pub struct Pair {
    pub context: usize,
    pub winner: usize,
    pub loser: usize,
}

impl Pair {
    pub fn new(context: usize, winner: usize, loser: usize) -> Self {
        Self {
            context,
            winner,
            loser,
        }
    }

    pub fn swapped(self) -> Self {
        Self {
            winner: self.loser,
            loser: self.winner,
            ..self
        }
    }
}

impl From<(usize, usize, usize)> for Pair {
    fn from((context, winner, loser): (usize, usize, usize)) -> Self {
        Self {
            context,
            winner,
            loser,
        }
    }
}

impl From<Pair> for (usize, usize, usize) {
    fn from(p: Pair) -> Self {
        (p.context, p.winner, p.loser)
    }
}

/// Weighted list of labelled pairs; the weights are the behaviour
/// distribution μ over pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetJson")]
pub struct PreferenceDataset {
    pairs: Vec<Pair>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct DatasetJson {
    pairs: Vec<Pair>,
    weights: Vec<f64>,
}

impl TryFrom<DatasetJson> for PreferenceDataset {
    type Error = Error;

    fn try_from(json: DatasetJson) -> Result<Self> {
        PreferenceDataset::new(json.pairs, json.weights)
    }
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl PreferenceDataset {
    pub fn new(pairs: Vec<Pair>, weights: Vec<f64>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("a dataset needs at least one pair".into()));
        }
        if pairs.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} pairs but {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        if let Some(p) = pairs.iter().find(|p| p.winner == p.loser) {
            return Err(Error::Config(format!("pair {p:?} has winner == loser")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { pairs, weights })
    }

    /// Equal weight on every pair, the exact expectation of uniform sampling.
    pub fn uniform(pairs: Vec<Pair>) -> Result<Self> {
        let w = 1.0 / pairs.len().max(1) as f64;
        let weights = vec![w; pairs.len()];
        Self::new(pairs, weights)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Pair, f64)> {
        self.pairs.iter().zip(self.weights.iter().copied())
    }

    /// Same objective with identical pairs folded into one entry, in order of
    /// first appearance.
    pub fn merged(&self) -> Self {
        let mut index = std::collections::HashMap::new();
        let mut pairs = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (p, w) in self.iter() {
            match index.entry(*p) {
                std::collections::hash_map::Entry::Occupied(e) => weights[*e.get()] += w,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(pairs.len());
                    pairs.push(*p);
                    weights.push(w);
                }
            }
        }
        Self { pairs, weights }
    }

    /// Checks every index against a policy shape.
    pub fn check_against(&self, policy: &SoftmaxPolicy) -> Result<()> {
        for p in &self.pairs {
            if p.context >= policy.contexts()
                || p.winner >= policy.actions()
                || p.loser >= policy.actions()
            {
                return Err(Error::Dimension(format!(
                    "pair {p:?} out of range for a {}×{} policy",
                    policy.contexts(),
                    policy.actions()
                )));
            }
        }
        Ok(())
    }
}

/// Neumaier summation.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_inputs(
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<()> {
    theta.same_shape(reference)?;
    data.check_against(theta)?;
    theta.check_finite()?;
    reference.check_finite()
}

#[inline]
fn rho_unchecked(theta: &SoftmaxPolicy, reference: &SoftmaxPolicy, p: &Pair) -> f64 {
    let t = &theta.logits;
    let r = &reference.logits;
    let c = p.context;
    (t[[c, p.winner]] - t[[c, p.loser]]) - (r[[c, p.winner]] - r[[c, p.loser]])
}

/// `ρθ` for one pair.
pub fn log_ratio_diff(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    pair: &Pair,
) -> Result<f64> {
    theta.same_shape(reference)?;
    if pair.context >= theta.contexts()
        || pair.winner >= theta.actions()
        || pair.loser >= theta.actions()
    {
        return Err(Error::Dimension(format!("pair {pair:?} out of range")));
    }
    Ok(rho_unchecked(theta, reference, pair))
}

/// `Σ weight · f(β ρθ(pair))`.
pub fn gpo_loss(
    f: &ConvexLoss,
    beta: f64,
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<f64> {
    check_inputs(data, theta, reference)?;
    Ok(data
        .iter()
        .map(|(p, w)| w * f.value(beta * rho_unchecked(theta, reference, p)))
        .sum())
}

/// Exact gradient of [`gpo_loss`] with respect to `theta`'s logits.
pub fn gpo_gradient(
    f: &ConvexLoss,
    beta: f64,
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<Array2<f64>> {
    gpo_loss_and_gradient(f, beta, data, theta, reference).map(|(_, g)| g)
}

/// [`gpo_loss`] and [`gpo_gradient`] in one pass.
pub fn gpo_loss_and_gradient(
    f: &ConvexLoss,
    beta: f64,
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(data, theta, reference)?;
    let mut grad = Array2::zeros(theta.logits.dim());
    let mut loss = 0.0;
    for (p, w) in data.iter() {
        let margin = beta * rho_unchecked(theta, reference, p);
        loss += w * f.value(margin);
        let g = w * f.deriv(margin) * beta;
        grad[[p.context, p.winner]] += g;
        grad[[p.context, p.loser]] -= g;
    }
    Ok((loss, grad))
}

/// `KL(πθ(·|c) ‖ πref(·|c))` by exact summation.
pub fn kl_divergence(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<f64> {
    let (probs, log_ratio) = context_log_ratio(theta, reference, context)?;
    let kl: f64 = probs.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
    // Rounding can leave a tiny negative value at equality.
    Ok(kl.max(0.0))
}

/// KL summed over all contexts.
pub fn total_kl(theta: &SoftmaxPolicy, reference: &SoftmaxPolicy) -> Result<f64> {
    (0..theta.contexts())
        .map(|c| kl_divergence(theta, reference, c))
        .sum()
}

/// Exact `∂KL/∂θ[c] = πθ ⊙ (L − KL)` where `L = log πθ/πref`.
pub fn kl_gradient(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<Vec<f64>> {
    let (probs, log_ratio) = context_log_ratio(theta, reference, context)?;
    let kl: f64 = probs.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
    Ok(probs
        .iter()
        .zip(&log_ratio)
        .map(|(p, l)| p * (l - kl))
        .collect())
}

/// `Σ weight · ½ ρθ²`.
pub fn mu_weighted_squared_loss(
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<f64> {
    check_inputs(data, theta, reference)?;
    Ok(data
        .iter()
        .map(|(p, w)| {
            let rho = rho_unchecked(theta, reference, p);
            0.5 * w * rho * rho
        })
        .sum())
}

/// Exact gradient of [`mu_weighted_squared_loss`].
pub fn mu_weighted_squared_gradient(
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<Array2<f64>> {
    check_inputs(data, theta, reference)?;
    let mut grad = Array2::zeros(theta.logits.dim());
    for (p, w) in data.iter() {
        let g = w * rho_unchecked(theta, reference, p);
        grad[[p.context, p.winner]] += g;
        grad[[p.context, p.loser]] -= g;
    }
    Ok(grad)
}

/// Gradient of `Σ_{y1,y2} π(y1)π(y2) · ½ρ(y1,y2)²` over all ordered pairs in
/// `context`, with the weights `π(y1)π(y2)` held fixed.
///
/// Equals `2 · ∇KL`: the ordered double sum is twice the variance of the log
/// ratio, and [`kl_gradient`] is half the fixed-weight variance gradient.
pub fn on_policy_squared_gradient(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<Vec<f64>> {
    let (probs, log_ratio) = context_log_ratio(theta, reference, context)?;
    let n = probs.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let g = probs[i] * probs[j] * (log_ratio[i] - log_ratio[j]);
            grad[i] += g;
            grad[j] -= g;
        }
    }
    Ok(grad)
}

/// The score-function term `Σ ∇[π(y1)π(y2)] · ½ρ²` that the fixed-weight
/// gradient leaves out. Nonzero in general.
pub fn on_policy_score_term(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<Vec<f64>> {
    let (probs, log_ratio) = context_log_ratio(theta, reference, context)?;
    let n = probs.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let d = log_ratio[i] - log_ratio[j];
            let half_sq = 0.5 * d * d;
            let w = probs[i] * probs[j];
            // ∂(πiπj)/∂θk = πiπj (δik − πk + δjk − πk)
            for (k, gk) in grad.iter_mut().enumerate() {
                let di = if i == k { 1.0 } else { 0.0 };
                let dj = if j == k { 1.0 } else { 0.0 };
                *gk += w * (di + dj - 2.0 * probs[k]) * half_sq;
            }
        }
    }
    Ok(grad)
}

/// `(½ E_{πθ×πθ}[(L(y) − L(y'))²], Var_{πθ}[L])` with `L = log πθ/πref`,
/// both by exact summation.
pub fn variance_identity_check(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<(f64, f64)> {
    let (probs, log_ratio) = context_log_ratio(theta, reference, context)?;
    let mut lhs = 0.0;
    for (pi, li) in probs.iter().zip(&log_ratio) {
        for (pj, lj) in probs.iter().zip(&log_ratio) {
            let d = li - lj;
            lhs += pi * pj * d * d;
        }
    }
    lhs *= 0.5;
    let mean: f64 = probs.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
    let rhs = probs
        .iter()
        .zip(&log_ratio)
        .map(|(p, l)| p * (l - mean) * (l - mean))
        .sum();
    Ok((lhs, rhs))
}

fn context_log_ratio(
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    context: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    theta.same_shape(reference)?;
    if context >= theta.contexts() {
        return Err(Error::Dimension(format!(
            "context {context} out of range for {} contexts",
            theta.contexts()
        )));
    }
    let lt = theta.log_probs(context);
    let lr = reference.log_probs(context);
    let probs = lt.iter().map(|v| v.exp()).collect();
    let ratio = lt.iter().zip(&lr).map(|(a, b)| a - b).collect();
    Ok((probs, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{make_loss, LossKind};

    fn two_action() -> (SoftmaxPolicy, SoftmaxPolicy) {
        (
            SoftmaxPolicy::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            SoftmaxPolicy::uniform(1, 2).unwrap(),
        )
    }

    fn bandit() -> PreferenceDataset {
        PreferenceDataset::uniform(vec![
            Pair::new(0, 0, 1),
            Pair::new(0, 1, 2),
            Pair::new(0, 0, 2),
        ])
        .unwrap()
    }

    #[test]
    fn merged_dataset_keeps_the_objective() {
        let data = PreferenceDataset::new(
            vec![Pair::new(0, 0, 1), Pair::new(0, 1, 2), Pair::new(0, 0, 1)],
            vec![0.25, 0.5, 0.25],
        )
        .unwrap();
        let m = data.merged();
        assert_eq!(m.pairs(), &[Pair::new(0, 0, 1), Pair::new(0, 1, 2)]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
        let theta = SoftmaxPolicy::from_rows(&[vec![0.3, -0.1, 0.7]]).unwrap();
        let reference = SoftmaxPolicy::uniform(1, 3).unwrap();
        let f = crate::loss::make_loss("logistic").unwrap();
        let a = gpo_loss(&f, 0.7, &data, &theta, &reference).unwrap();
        let b = gpo_loss(&f, 0.7, &m, &theta, &reference).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn rho_is_logit_gap_change_and_antisymmetric() {
        let (theta, reference) = two_action();
        let p = Pair::new(0, 0, 1);
        assert_eq!(log_ratio_diff(&theta, &reference, &p).unwrap(), 1.0);
        assert_eq!(
            log_ratio_diff(&theta, &reference, &p.swapped()).unwrap(),
            -1.0
        );
        assert_eq!(log_ratio_diff(&theta, &theta, &p).unwrap(), 0.0);
    }

    #[test]
    fn rho_matches_log_probability_route() {
        let theta = SoftmaxPolicy::from_rows(&[vec![0.3, -1.2, 2.0, 0.1]]).unwrap();
        let reference = SoftmaxPolicy::from_rows(&[vec![-0.5, 0.4, 0.0, 1.1]]).unwrap();
        let (lt, lr) = (theta.log_probs(0), reference.log_probs(0));
        let p = Pair::new(0, 2, 1);
        let direct = (lt[2] - lr[2]) - (lt[1] - lr[1]);
        assert!((log_ratio_diff(&theta, &reference, &p).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let a = SoftmaxPolicy::uniform(1, 2).unwrap();
        let b = SoftmaxPolicy::uniform(1, 3).unwrap();
        assert!(matches!(
            log_ratio_diff(&a, &b, &Pair::new(0, 0, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn loss_at_reference() {
        let reference = SoftmaxPolicy::uniform(1, 3).unwrap();
        let data = bandit();
        for beta in [0.1, 1.0, 10.0] {
            let lg = gpo_loss(
                &make_loss("logistic").unwrap(),
                beta,
                &data,
                &reference,
                &reference,
            )
            .unwrap();
            assert!((lg - 2f64.ln()).abs() < 1e-15);
            let sq = gpo_loss(
                &make_loss("squared").unwrap(),
                beta,
                &data,
                &reference,
                &reference,
            )
            .unwrap();
            assert!((sq - 1.0).abs() < 1e-15);
        }
        let h = gpo_loss(
            &make_loss("hinge").unwrap(),
            1.0,
            &data,
            &reference,
            &reference,
        )
        .unwrap();
        assert!((h - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_logits_name_the_context() {
        let mut theta = SoftmaxPolicy::uniform(3, 2).unwrap();
        theta.logits_mut()[[2, 1]] = f64::NAN;
        let reference = SoftmaxPolicy::uniform(3, 2).unwrap();
        let data = PreferenceDataset::uniform(vec![Pair::new(0, 0, 1)]).unwrap();
        let err = gpo_loss(&LossKind::Logistic.loss(), 1.0, &data, &theta, &reference).unwrap_err();
        assert!(matches!(err, Error::NonFinite { context: 2 }));
    }

    #[test]
    fn squared_gradient_at_reference() {
        // f'(0) = -2, so ∇ = -2β Σ w (e_w - e_l).
        let reference = SoftmaxPolicy::uniform(1, 3).unwrap();
        let beta = 0.7;
        let g = gpo_gradient(
            &make_loss("squared").unwrap(),
            beta,
            &bandit(),
            &reference,
            &reference,
        )
        .unwrap();
        let third = 1.0 / 3.0;
        let expected = [-2.0 * beta * 2.0 * third, 0.0, 2.0 * beta * 2.0 * third];
        for (a, e) in g.iter().zip(expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn reversed_pair_cancels_first_order_term() {
        let reference = SoftmaxPolicy::uniform(1, 3).unwrap();
        let data =
            PreferenceDataset::new(vec![Pair::new(0, 0, 1), Pair::new(0, 1, 0)], vec![0.5, 0.5])
                .unwrap();
        let sq = make_loss("squared").unwrap();
        let g0 = gpo_gradient(&sq, 1.0, &data, &reference, &reference).unwrap();
        assert!(g0.iter().all(|v| v.abs() < 1e-15));

        // Away from the reference only the regularization ∝ ρ remains.
        let theta = SoftmaxPolicy::from_rows(&[vec![0.4, -0.2, 0.0]]).unwrap();
        let g = gpo_gradient(&sq, 1.0, &data, &theta, &reference).unwrap();
        let reg = mu_weighted_squared_gradient(&data, &theta, &reference).unwrap();
        for (a, b) in g.iter().zip(reg.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_examples() {
        let reference = SoftmaxPolicy::uniform(1, 2).unwrap();
        let theta = SoftmaxPolicy::from_rows(&[vec![9f64.ln(), 0.0]]).unwrap();
        let kl = kl_divergence(&theta, &reference, 0).unwrap();
        assert!((kl - 0.368_064_207_168_497).abs() < 1e-12, "{kl}");
        assert_eq!(kl_divergence(&reference, &reference, 0).unwrap(), 0.0);
        let reverse = kl_divergence(&reference, &theta, 0).unwrap();
        assert!((reverse - kl).abs() > 1e-3);
    }

    #[test]
    fn mu_sq_examples() {
        let (theta, reference) = two_action();
        let single = PreferenceDataset::new(vec![Pair::new(0, 0, 1)], vec![1.0]).unwrap();
        let mut doubled = theta.clone();
        doubled.logits_mut()[[0, 0]] = 2.0;
        assert_eq!(
            mu_weighted_squared_loss(&single, &doubled, &reference).unwrap(),
            2.0
        );
        assert_eq!(
            mu_weighted_squared_loss(&single, &reference, &reference).unwrap(),
            0.0
        );
        let swapped = PreferenceDataset::new(vec![Pair::new(0, 1, 0)], vec![1.0]).unwrap();
        assert_eq!(
            mu_weighted_squared_loss(&single, &theta, &reference).unwrap(),
            mu_weighted_squared_loss(&swapped, &theta, &reference).unwrap()
        );
    }

    #[test]
    fn kl_gradient_vanishes_at_reference() {
        let reference = SoftmaxPolicy::from_rows(&[vec![0.2, -0.1, 1.0]]).unwrap();
        assert!(kl_gradient(&reference, &reference, 0)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn variance_identity_trivial_cases() {
        let reference = SoftmaxPolicy::from_rows(&[vec![0.2, -0.1, 1.0]]).unwrap();
        assert_eq!(
            variance_identity_check(&reference, &reference, 0).unwrap(),
            (0.0, 0.0)
        );
        let mut shifted = reference.clone();
        shifted.logits_mut().mapv_inplace(|v| v + 3.0);
        let (l, r) = variance_identity_check(&shifted, &reference, 0).unwrap();
        assert!(l.abs() < 1e-24 && r.abs() < 1e-24);
    }

    #[test]
    fn dataset_validation() {
        assert!(PreferenceDataset::new(vec![Pair::new(0, 1, 1)], vec![1.0]).is_err());
        assert!(PreferenceDataset::new(vec![Pair::new(0, 0, 1)], vec![0.9]).is_err());
        assert!(PreferenceDataset::new(vec![Pair::new(0, 0, 1)], vec![-1.0]).is_err());
        assert!(PreferenceDataset::new(vec![], vec![]).is_err());
        let d =
            PreferenceDataset::uniform((0..7).map(|i| Pair::new(0, i % 3, (i + 1) % 3)).collect())
                .unwrap();
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let small = SoftmaxPolicy::uniform(1, 2).unwrap();
        assert!(d.check_against(&small).is_err());
    }

    #[test]
    fn json_shapes() {
        let p = SoftmaxPolicy::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 0.25]]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"contexts":2,"actions":3,"logits":[[0.5,-1.0,2.0],[0.0,0.0,0.25]]}"#
        );
        let back: SoftmaxPolicy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<SoftmaxPolicy>(
            r#"{"contexts":2,"actions":3,"logits":[[0.5,-1.0,2.0]]}"#
        )
        .is_err());

        let d: PreferenceDataset =
            serde_json::from_str(r#"{"pairs":[[0,0,1],[0,1,2]],"weights":[0.25,0.75]}"#).unwrap();
        assert_eq!(d.pairs()[1], Pair::new(0, 1, 2));
        assert_eq!(
            serde_json::to_string(&d).unwrap(),
            r#"{"pairs":[[0,0,1],[0,1,2]],"weights":[0.25,0.75]}"#
        );
        assert!(serde_json::from_str::<PreferenceDataset>(
            r#"{"pairs":[[0,1,1]],"weights":[1.0]}"#
        )
        .is_err());
    }
}
