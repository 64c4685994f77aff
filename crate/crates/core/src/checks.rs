//! Invariant suite: analytic quantities against independent oracles.
//!
//! Every check is deterministic. Random instances come from named streams of
//! a fixed seed.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::bandit;
use crate::error::Result;
use crate::gaussian;
use crate::loss::{
    check_admissible, make_loss, taylor_equivalent_beta, taylor_objective_scale, ConvexLoss,
    LossKind,
};
use crate::math::sigmoid;
use crate::numdiff;
use crate::policy::{
    gpo_gradient, gpo_loss, kl_divergence, kl_gradient, mu_weighted_squared_gradient,
    on_policy_squared_gradient, variance_identity_check, Pair, PreferenceDataset, SoftmaxPolicy,
};
use crate::reward::{
    bt_preferences, fit_pointwise_reward, optimal_policy_equivalence, p_succ_mu,
    pairwise_bayes_minimizer, PreferenceMatrix, RewardVector,
};
use crate::rng::{self, StreamRng};
use crate::trainer::{trace_from_csv, trace_to_csv};

pub const CHECK_SEED: u64 = 0;
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
pub const TAYLOR_EPSILONS: [f64; 3] = [0.1, 0.05, 0.025];
pub const TAYLOR_MIN_ORDER: f64 = 1.8;
/// Discrepancies below this are exact agreement (squared-type losses).
pub const TAYLOR_EXACT: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// The losses with a second-order expansion at zero.
pub fn smooth_losses() -> Vec<ConvexLoss> {
    LossKind::ALL
        .iter()
        .map(|k| k.loss())
        .filter(|f| f.smooth)
        .collect()
}

/// A random tabular problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub data: PreferenceDataset,
    pub theta: SoftmaxPolicy,
    pub reference: SoftmaxPolicy,
    pub beta: f64,
}

fn normal_matrix(r: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * r.sample::<f64, _>(StandardNormal))
}

/// `1..=3` contexts, `2..=max_actions` actions, up to 30 weighted pairs.
pub fn random_instance(r: &mut StreamRng, max_actions: usize) -> Instance {
    let contexts = r.random_range(1..=3);
    let actions = r.random_range(2..=max_actions.max(2));
    let n_pairs = r.random_range(1..=30);
    let pairs: Vec<Pair> = (0..n_pairs)
        .map(|_| {
            let c = r.random_range(0..contexts);
            let w = r.random_range(0..actions);
            let mut l = r.random_range(0..actions - 1);
            if l >= w {
                l += 1;
            }
            Pair::new(c, w, l)
        })
        .collect();
    let raw: Vec<f64> = (0..n_pairs).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    Instance {
        data: PreferenceDataset::new(pairs, weights).expect("valid random dataset"),
        theta: SoftmaxPolicy::new(normal_matrix(r, contexts, actions, 1.0)).expect("valid shape"),
        reference: SoftmaxPolicy::new(normal_matrix(r, contexts, actions, 1.0))
            .expect("valid shape"),
        beta: r.random_range(0.1..3.0),
    }
}

fn near_kink(f: &ConvexLoss, inst: &Instance) -> bool {
    inst.data.pairs().iter().any(|p| {
        let rho = crate::policy::log_ratio_diff(&inst.theta, &inst.reference, p).expect("in range");
        f.kinks.iter().any(|k| (inst.beta * rho - k).abs() < 1e-3)
    })
}

fn flat(policy: &SoftmaxPolicy) -> Vec<f64> {
    policy.logits().iter().copied().collect()
}

fn with_logits(like: &SoftmaxPolicy, x: &[f64]) -> SoftmaxPolicy {
    SoftmaxPolicy::new(Array2::from_shape_vec(like.logits().dim(), x.to_vec()).expect("same size"))
        .expect("valid")
}

/// Relative error of [`gpo_gradient`] against central differences.
pub fn gpo_gradient_fd_error(f: &ConvexLoss, inst: &Instance) -> Result<f64> {
    let analytic = gpo_gradient(f, inst.beta, &inst.data, &inst.theta, &inst.reference)?;
    let numeric = numdiff::gradient(
        |x| {
            gpo_loss(
                f,
                inst.beta,
                &inst.data,
                &with_logits(&inst.theta, x),
                &inst.reference,
            )
            .expect("valid")
        },
        &flat(&inst.theta),
        FD_STEP,
    );
    Ok(numdiff::max_relative_error(
        &analytic.iter().copied().collect::<Vec<_>>(),
        &numeric,
    ))
}

/// Largest error over `count` random instances per built-in loss.
pub fn gradient_suite(count: usize) -> Result<Vec<(String, f64)>> {
    LossKind::ALL
        .iter()
        .map(|kind| {
            let f = kind.loss();
            let mut r = rng::stream(CHECK_SEED, "checks.gradient", *kind as u64);
            let mut worst: f64 = 0.0;
            let mut done = 0;
            while done < count {
                let inst = random_instance(&mut r, 20);
                if near_kink(&f, &inst) {
                    continue;
                }
                worst = worst.max(gpo_gradient_fd_error(&f, &inst)?);
                done += 1;
            }
            Ok((f.name.to_string(), worst))
        })
        .collect()
}

/// `(max |∇KL − ½ on-policy gradient|, max FD error of ∇KL)` over random
/// single-context policies with up to 20 actions.
pub fn kl_gradient_suite(count: usize) -> Result<(f64, f64)> {
    let mut r = rng::stream(CHECK_SEED, "checks.kl", 0);
    let mut identity: f64 = 0.0;
    let mut fd: f64 = 0.0;
    for _ in 0..count {
        let actions = r.random_range(2..=20);
        let theta = SoftmaxPolicy::new(normal_matrix(&mut r, 1, actions, 1.0))?;
        let reference = SoftmaxPolicy::new(normal_matrix(&mut r, 1, actions, 1.0))?;
        let g = kl_gradient(&theta, &reference, 0)?;
        let sq = on_policy_squared_gradient(&theta, &reference, 0)?;
        for (a, b) in g.iter().zip(&sq) {
            identity = identity.max((a - 0.5 * b).abs());
        }
        let numeric = numdiff::gradient(
            |x| kl_divergence(&with_logits(&theta, x), &reference, 0).expect("valid"),
            &flat(&theta),
            FD_STEP,
        );
        fd = fd.max(numdiff::max_relative_error(&g, &numeric));
    }
    Ok((identity, fd))
}

/// `‖∇ E f(βρ) − s · ∇ E(β′ρ − 1)²‖∞` at `θ = ref + ε·direction`, with
/// `β′` from [`taylor_equivalent_beta`] and `s` from
/// [`taylor_objective_scale`].
pub fn taylor_discrepancy(
    f: &ConvexLoss,
    beta: f64,
    data: &PreferenceDataset,
    reference: &SoftmaxPolicy,
    direction: &Array2<f64>,
    eps: f64,
) -> Result<f64> {
    let beta_prime = taylor_equivalent_beta(f, beta)?;
    let scale = taylor_objective_scale(f)?;
    let squared = LossKind::Squared.loss();
    let theta = SoftmaxPolicy::new(reference.logits() + &(direction * eps))?;
    let g = gpo_gradient(f, beta, data, &theta, reference)?;
    let h = gpo_gradient(&squared, beta_prime, data, &theta, reference)?;
    Ok(g.iter()
        .zip(h.iter())
        .map(|(a, b)| (a - scale * b).abs())
        .fold(0.0, f64::max))
}

/// Observed convergence orders `log2(d(ε)/d(ε/2))`, or `None` when every
/// discrepancy is below [`TAYLOR_EXACT`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub loss: String,
    pub discrepancies: Vec<f64>,
    pub orders: Option<Vec<f64>>,
}

impl TaylorReport {
    pub fn passed(&self) -> bool {
        match &self.orders {
            None => true,
            Some(o) => o.iter().all(|v| *v >= TAYLOR_MIN_ORDER),
        }
    }
}

pub fn taylor_suite() -> Result<Vec<TaylorReport>> {
    let mut r = rng::stream(CHECK_SEED, "checks.taylor", 0);
    let inst = random_instance(&mut r, 8);
    let direction = normal_matrix(
        &mut r,
        inst.reference.contexts(),
        inst.reference.actions(),
        1.0,
    );
    smooth_losses()
        .iter()
        .map(|f| {
            let d = TAYLOR_EPSILONS
                .iter()
                .map(|&e| {
                    taylor_discrepancy(f, inst.beta, &inst.data, &inst.reference, &direction, e)
                })
                .collect::<Result<Vec<_>>>()?;
            let orders = if d.iter().all(|v| *v < TAYLOR_EXACT) {
                None
            } else {
                Some(d.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
            };
            Ok(TaylorReport {
                loss: f.name.to_string(),
                discrepancies: d,
                orders,
            })
        })
        .collect()
}

/// `(k + ½) / 100` for `k < 100`: 100 probabilities, none equal to ½.
pub fn bayes_grid() -> Vec<f64> {
    (0..100).map(|k| (k as f64 + 0.5) / 100.0).collect()
}

/// `(sign mismatches, max |t* − logit p|)` for one loss; the second entry
/// is only meaningful for the logistic loss.
pub fn bayes_suite(f: &ConvexLoss) -> Result<(usize, f64)> {
    let mut mismatches = 0;
    let mut logit_err: f64 = 0.0;
    for p in bayes_grid() {
        let t = pairwise_bayes_minimizer(f, p)?;
        if t.signum() != (2.0 * p - 1.0).signum() || t == 0.0 {
            mismatches += 1;
        }
        logit_err = logit_err.max((t - (p / (1.0 - p)).ln()).abs());
    }
    Ok((mismatches, logit_err))
}

fn random_simplex(r: &mut StreamRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut mu: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let rest: f64 = mu[1..].iter().sum();
    mu[0] = 1.0 - rest;
    mu
}

/// Max over trials of `|r̂ − (r* − r*[0])|∞` for a logistic fit of BT data.
pub fn bt_recovery_suite(trials: usize) -> Result<f64> {
    let mut r = rng::stream(CHECK_SEED, "checks.bt", 0);
    let logistic = LossKind::Logistic.loss();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = r.random_range(3..=6);
        let r_star =
            RewardVector::new((0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect())?;
        let mu = random_simplex(&mut r, n);
        let fit = fit_pointwise_reward(&logistic, &bt_preferences(&r_star)?, &mu, 1e-10)?;
        for (a, b) in fit.gauge_fixed().iter().zip(r_star.gauge_fixed()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// A random preference matrix with entries in `(0.05, 0.95)`.
pub fn random_preferences(r: &mut StreamRng, n: usize) -> Result<PreferenceMatrix> {
    let mut p = Array2::from_elem((n, n), 0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = r.random_range(0.05..0.95);
            p[[i, j]] = v;
            p[[j, i]] = 1.0 - v;
        }
    }
    PreferenceMatrix::new(p)
}

/// Max over trials of `|r̂ − 2 (p(y ≻ μ) − p(y₀ ≻ μ))|∞` for squared fits.
pub fn squared_fit_suite(trials: usize) -> Result<f64> {
    let mut r = rng::stream(CHECK_SEED, "checks.squared_fit", 0);
    let squared = LossKind::Squared.loss();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = r.random_range(3..=6);
        let prefs = random_preferences(&mut r, n)?;
        let mu = random_simplex(&mut r, n);
        let fit = fit_pointwise_reward(&squared, &prefs, &mu, 1e-12)?;
        let succ = p_succ_mu(&prefs, &mu)?;
        for (a, s) in fit.r.iter().zip(&succ) {
            worst = worst.max((a - 2.0 * (s - succ[0])).abs());
        }
    }
    Ok(worst)
}

/// Max probability gap between the reward route and the direct policy
/// route, per smooth loss, on random 3-response BT instances.
pub fn equivalence_suite(trials: usize, beta: f64) -> Result<Vec<(String, f64)>> {
    smooth_losses()
        .iter()
        .map(|f| {
            let mut r = rng::stream(CHECK_SEED, "checks.equivalence", 0);
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let r_star = RewardVector::new(
                    (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
                )?;
                let mu = random_simplex(&mut r, 3);
                let ref_logits: Vec<f64> =
                    (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let e = optimal_policy_equivalence(
                    f,
                    &bt_preferences(&r_star)?,
                    &mu,
                    &ref_logits,
                    beta,
                    1e-10,
                )?;
                worst = worst.max(e.max_abs_diff());
            }
            Ok((f.name.to_string(), worst))
        })
        .collect()
}

fn loss_table_check() -> CheckResult {
    let expected = [
        ("logistic", std::f64::consts::LN_2),
        ("hinge", 1.0),
        ("squared", 1.0),
        ("exponential", 1.0),
        ("truncated_quadratic", 1.0),
        ("savage", 0.25),
    ];
    let mut bad = Vec::new();
    for (name, f0) in expected {
        let f = make_loss(name).expect("built-in");
        if f.value(0.0) != f0 {
            bad.push(format!("{name}: f(0) = {}", f.value(0.0)));
        }
        for x in [-2.5, -0.7, 0.0, 0.4, 1.7, 3.0] {
            if f.kinks.iter().any(|k| (x - k).abs() < 1e-3) {
                continue;
            }
            let d1 = numdiff::central_diff(|t| f.value(t), x, 1e-6);
            if (f.deriv(x) - d1).abs() / f.deriv(x).abs().max(1e-3) > FD_TOL {
                bad.push(format!("{name}: f'({x})"));
            }
            if let Ok(d2) = f.second_deriv(x) {
                let n2 = numdiff::central_diff(|t| f.deriv(t), x, 1e-6);
                if (d2 - n2).abs() / d2.abs().max(1e-3) > FD_TOL {
                    bad.push(format!("{name}: f''({x})"));
                }
            }
        }
    }
    CheckResult::new(
        "loss table values and derivatives",
        bad.is_empty(),
        bad.join("; "),
    )
}

fn admissibility_check() -> CheckResult {
    let mut detail = Vec::new();
    let mut ok = true;
    for kind in LossKind::ALL {
        let report = check_admissible(&kind.loss());
        let expect_convex = kind != LossKind::Savage;
        if report.convex() != expect_convex || !report.nonnegative() || !report.descending_at_zero()
        {
            ok = false;
        }
        if !report.convex() {
            detail.push(format!(
                "{} non-convex at {} grid pairs",
                report.name, report.convexity_violation_count
            ));
        }
    }
    CheckResult::new(
        "admissibility (savage flagged non-convex)",
        ok,
        detail.join("; "),
    )
}

fn bandit_check() -> Result<CheckResult> {
    let losses: Vec<String> = LossKind::ALL.iter().map(|k| k.name().to_string()).collect();
    let cells = bandit::bandit_report(
        &losses,
        &[1.0],
        bandit::DEFAULT_LEARNING_RATE,
        bandit::DEFAULT_STEPS,
        bandit::DEFAULT_STEPS,
    )?;
    let p = |name: &str| {
        cells
            .iter()
            .find(|c| c.cell.loss == name)
            .expect("present")
            .cell
            .p_y1
    };
    let case_one = ["logistic", "exponential", "savage"];
    let case_two = ["hinge", "truncated_quadratic", "squared"];
    let gap = case_one
        .iter()
        .flat_map(|a| case_two.iter().map(move |b| p(a) - p(b)))
        .fold(f64::INFINITY, f64::min);
    let greedy = p("logistic") > 0.99 && p("exponential") > 0.99;
    let detail = cells
        .iter()
        .map(|c| format!("{}={:.4}", c.cell.loss, c.cell.p_y1))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(CheckResult::new(
        "bandit case separation at beta=1",
        gap > 0.1 && greedy,
        format!("min gap {gap:.4}; {detail}"),
    ))
}

fn gaussian_check() -> Result<CheckResult> {
    let reference = gaussian::trimodal_reference();
    let mu = gaussian::random_mu(gaussian::COUNTEREXAMPLE_SEED);
    let rows = gaussian::scan_shift(&reference, &mu, &[-0.5, 0.0, 0.5], 200, 0)?;
    let zero = rows[1];
    let nonneg = rows.iter().all(|r| r.mu_sq >= 0.0);
    Ok(CheckResult::new(
        "gaussian estimators vanish at c=0",
        zero.kl == 0.0 && zero.mu_sq == 0.0 && nonneg,
        format!("kl(0)={} mu_sq(0)={}", zero.kl, zero.mu_sq),
    ))
}

fn csv_check() -> Result<CheckResult> {
    let run = bandit::run_bandit("logistic", 1.0, 0.1, 50, 10).map_err(|e| match e {
        crate::trainer::TrainError::Invalid(e) => e,
        other => crate::Error::Config(other.to_string()),
    })?;
    let csv = trace_to_csv(&run.trace)?;
    let back = trace_from_csv(&csv)?;
    Ok(CheckResult::new(
        "trace CSV round trip",
        back == run.trace,
        "",
    ))
}

fn mu_sq_gradient_check() -> Result<CheckResult> {
    let mut r = rng::stream(CHECK_SEED, "checks.mu_sq", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let inst = random_instance(&mut r, 10);
        let g = mu_weighted_squared_gradient(&inst.data, &inst.theta, &inst.reference)?;
        let numeric = numdiff::gradient(
            |x| {
                crate::policy::mu_weighted_squared_loss(
                    &inst.data,
                    &with_logits(&inst.theta, x),
                    &inst.reference,
                )
                .expect("valid")
            },
            &flat(&inst.theta),
            FD_STEP,
        );
        worst = worst.max(numdiff::max_relative_error(
            &g.iter().copied().collect::<Vec<_>>(),
            &numeric,
        ));
    }
    Ok(CheckResult::new(
        "mu-weighted squared gradient vs FD",
        worst < FD_TOL,
        format!("max rel err {worst:.2e}"),
    ))
}

fn variance_check() -> Result<CheckResult> {
    let mut r = rng::stream(CHECK_SEED, "checks.variance", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let actions = r.random_range(2..=20);
        let theta = SoftmaxPolicy::new(normal_matrix(&mut r, 1, actions, 1.0))?;
        let reference = SoftmaxPolicy::new(normal_matrix(&mut r, 1, actions, 1.0))?;
        let (a, b) = variance_identity_check(&theta, &reference, 0)?;
        worst = worst.max((a - b).abs() / b.abs().max(1.0));
    }
    Ok(CheckResult::new(
        "on-policy squared loss equals log-ratio variance",
        worst < 1e-12,
        format!("max err {worst:.2e}"),
    ))
}

/// Bayes-consistency table for the `rewards` command.
pub fn bayes_checks() -> Result<Vec<CheckResult>> {
    smooth_losses()
        .iter()
        .map(|f| {
            let (mismatches, logit_err) = bayes_suite(f)?;
            let logistic = f.name == "logistic";
            let passed = mismatches == 0 && (!logistic || logit_err < 1e-6);
            let detail = if logistic {
                format!("{mismatches} sign mismatches; max |t* - logit p| = {logit_err:.2e}")
            } else {
                format!("{mismatches} sign mismatches")
            };
            Ok(CheckResult::new(
                format!("bayes consistency: {}", f.name),
                passed,
                detail,
            ))
        })
        .collect()
}

pub fn bt_checks() -> Result<Vec<CheckResult>> {
    let bt = bt_recovery_suite(10)?;
    let sq = squared_fit_suite(10)?;
    let sep = {
        let prefs = PreferenceMatrix::from_rows(vec![vec![0.5, 1.0], vec![0.0, 0.5]])?;
        matches!(
            fit_pointwise_reward(&LossKind::Logistic.loss(), &prefs, &[0.5, 0.5], 1e-8),
            Err(crate::Error::Unbounded(_))
        )
    };
    Ok(vec![
        CheckResult::new(
            "BT recovery with logistic fit",
            bt < 1e-4,
            format!("max err {bt:.2e}"),
        ),
        CheckResult::new(
            "squared fit equals 2 p(y>mu) + const",
            sq < 1e-8,
            format!("max err {sq:.2e}"),
        ),
        CheckResult::new("separable data is unbounded for logistic", sep, ""),
    ])
}

pub fn equivalence_checks() -> Result<Vec<CheckResult>> {
    Ok(equivalence_suite(5, 1.0)?
        .into_iter()
        .map(|(name, gap)| {
            CheckResult::new(
                format!("optimal policy equivalence: {name}"),
                gap < 1e-4,
                format!("max gap {gap:.2e}"),
            )
        })
        .collect())
}

/// Everything `gpo-lab check` runs.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = vec![loss_table_check(), admissibility_check()];
    for (name, err) in gradient_suite(50)? {
        out.push(CheckResult::new(
            format!("gpo gradient vs FD: {name}"),
            err < FD_TOL,
            format!("max rel err {err:.2e}"),
        ));
    }
    let (identity, fd) = kl_gradient_suite(50)?;
    out.push(CheckResult::new(
        "kl gradient is half the fixed-weight on-policy squared gradient",
        identity < 1e-10,
        format!("max err {identity:.2e}"),
    ));
    out.push(CheckResult::new(
        "kl gradient vs FD",
        fd < FD_TOL,
        format!("max rel err {fd:.2e}"),
    ));
    out.push(mu_sq_gradient_check()?);
    out.push(variance_check()?);
    for t in taylor_suite()? {
        let detail = match &t.orders {
            None => "exact".to_string(),
            Some(o) => format!("orders {o:.3?}"),
        };
        out.push(CheckResult::new(
            format!("taylor equivalence: {}", t.loss),
            t.passed(),
            detail,
        ));
    }
    out.extend(bayes_checks()?);
    out.extend(bt_checks()?);
    out.extend(equivalence_checks()?);
    out.push(bandit_check()?);
    out.push(gaussian_check()?);
    out.push(csv_check()?);
    Ok(out)
}

/// `σ`, re-exported for callers building BT data by hand.
pub fn bt_probability(r_winner: f64, r_loser: f64) -> f64 {
    sigmoid(r_winner - r_loser)
}
