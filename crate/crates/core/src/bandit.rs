//! Three-action bandit with deterministic preferences `y1 ≻ y2 ≻ y3`.
//!
//! Case-I losses (derivative negative everywhere) keep pushing `p(y1)`
//! toward one. Case-II losses stop once the margin reaches the point where
//! `f′ = 0`, leaving the policy near the uniform reference.

use rayon::prelude::*;
use serde::Serialize;

use crate::csvfmt::fmt_float;
use crate::error::Result;
use crate::loss::make_loss;
use crate::policy::{log_ratio_diff, Pair, PreferenceDataset, SoftmaxPolicy};
use crate::trainer::{train_observed, TrainConfig, TrainError, TrainRun};

pub const ACTIONS: usize = 3;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_STEPS: usize = 10_000;

/// The pairs `(y1≻y2), (y2≻y3), (y1≻y3)` at weight 1/3 each.
pub fn bandit_dataset() -> PreferenceDataset {
    PreferenceDataset::uniform(bandit_pairs().to_vec()).expect("fixed bandit pairs are valid")
}

fn bandit_pairs() -> [Pair; 3] {
    [Pair::new(0, 0, 1), Pair::new(0, 1, 2), Pair::new(0, 0, 2)]
}

pub fn bandit_reference() -> SoftmaxPolicy {
    SoftmaxPolicy::uniform(1, ACTIONS).expect("3 actions is a valid shape")
}

fn action_probs(policy: &SoftmaxPolicy) -> Vec<(String, f64)> {
    policy
        .probs(0)
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("p_y{}", i + 1), p))
        .collect()
}

/// Trains from the uniform policy. Each trace record carries `p_y1..p_y3`.
pub fn run_bandit(
    loss: &str,
    beta: f64,
    lr: f64,
    steps: usize,
    eval_every: usize,
) -> Result<TrainRun, TrainError> {
    let f = make_loss(loss)?;
    let config = TrainConfig::new(loss, beta, lr, steps, eval_every);
    let reference = bandit_reference();
    train_observed(
        &config,
        &f,
        &bandit_dataset(),
        &reference,
        &reference,
        action_probs,
    )
}

/// Terminal state of one `(loss, β)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditCell {
    pub loss: String,
    pub beta: f64,
    pub p_y1: f64,
    pub p_y2: f64,
    pub p_y3: f64,
    /// Largest `ρθ` over the three pairs at the terminal policy.
    pub max_rho: f64,
    /// Step at which training stopped (`steps` unless it diverged).
    pub steps_completed: usize,
    pub diverged: bool,
}

/// A finished cell together with its trace, for callers that write traces.
#[derive(Debug, Clone)]
pub struct BanditOutcome {
    pub cell: BanditCell,
    pub run: TrainRun,
}

pub fn run_cell(
    loss: &str,
    beta: f64,
    lr: f64,
    steps: usize,
    eval_every: usize,
) -> Result<BanditOutcome> {
    let (run, steps_completed, diverged) = match run_bandit(loss, beta, lr, steps, eval_every) {
        Ok(run) => (run, steps, false),
        Err(TrainError::Diverged {
            step,
            trace,
            policy,
            ..
        }) => (
            TrainRun {
                final_policy: policy,
                trace,
            },
            step,
            true,
        ),
        Err(TrainError::Invalid(e)) => return Err(e),
    };
    let reference = bandit_reference();
    let probs = run.final_policy.probs(0);
    let max_rho = bandit_pairs()
        .iter()
        .map(|p| log_ratio_diff(&run.final_policy, &reference, p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(BanditOutcome {
        cell: BanditCell {
            loss: loss.to_string(),
            beta,
            p_y1: probs[0],
            p_y2: probs[1],
            p_y3: probs[2],
            max_rho,
            steps_completed,
            diverged,
        },
        run,
    })
}

/// Runs every `(loss, β)` cell in parallel. Output is in `losses × betas`
/// order regardless of scheduling.
pub fn bandit_report(
    losses: &[String],
    betas: &[f64],
    lr: f64,
    steps: usize,
    eval_every: usize,
) -> Result<Vec<BanditOutcome>> {
    if losses.is_empty() || betas.is_empty() {
        return Err(crate::Error::Config(
            "bandit report needs at least one loss and one beta".into(),
        ));
    }
    for name in losses {
        make_loss(name)?;
    }
    let cells: Vec<(&String, f64)> = losses
        .iter()
        .flat_map(|l| betas.iter().map(move |&b| (l, b)))
        .collect();
    cells
        .par_iter()
        .map(|(loss, beta)| run_cell(loss, *beta, lr, steps, eval_every))
        .collect()
}

/// CSV `loss,beta,p_y1,p_y2,p_y3,max_rho,steps_completed,diverged`.
pub fn summary_csv(cells: &[BanditCell]) -> String {
    let mut out = String::from("loss,beta,p_y1,p_y2,p_y3,max_rho,steps_completed,diverged\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.loss,
            fmt_float(c.beta),
            fmt_float(c.p_y1),
            fmt_float(c.p_y2),
            fmt_float(c.p_y3),
            fmt_float(c.max_rho),
            c.steps_completed,
            c.diverged
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_fixed() {
        let d = bandit_dataset();
        assert_eq!(d.pairs(), &bandit_pairs());
        assert!(d.weights().iter().all(|&w| w == 1.0 / 3.0));
    }

    #[test]
    fn step_zero_is_uniform() {
        for name in ["logistic", "hinge", "squared"] {
            let run = run_bandit(name, 1.0, 0.1, 10, 10).unwrap();
            let first = &run.trace[0].extra;
            for key in ["p_y1", "p_y2", "p_y3"] {
                assert!((first[key] - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_cell_report() {
        let cells = bandit_report(&["logistic".into()], &[1.0], 0.1, 100, 50).unwrap();
        assert_eq!(cells.len(), 1);
        let csv = summary_csv(&[cells[0].cell.clone()]);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("logistic,1,"));
    }

    #[test]
    fn squared_loss_reaches_least_squares_margins() {
        // Minimizing (a−1)² + (b−1)² + (a+b−1)² over ρ12 = a, ρ23 = b gives
        // a = b = 2/3, so the logits are (2/3, 0, −2/3) up to a shift.
        let out = run_cell("squared", 1.0, 0.1, 10_000, 10_000).unwrap();
        let e = (2.0f64 / 3.0).exp();
        let expected = e / (e + 1.0 + 1.0 / e);
        assert!((out.cell.p_y1 - expected).abs() < 1e-10);
        assert!((out.cell.max_rho - 4.0 / 3.0).abs() < 1e-10);
        assert!(!out.cell.diverged);
    }

    #[test]
    fn huge_step_is_reported_as_divergence() {
        let out = run_cell("squared", 100.0, 0.1, 1000, 10).unwrap();
        assert!(out.cell.diverged);
        assert!(out.cell.steps_completed < 1000);
    }
}
