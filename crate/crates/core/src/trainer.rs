//! Deterministic gradient descent on the GPO objective with telemetry.
//!
//! Each step applies `θ ← θ − lr · ∇ E_μ[f(β ρθ)]`. A [`TraceRecord`] is
//! emitted at step 0, every `eval_every` steps, and at the final step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvfmt::fmt_float;
use crate::error::{Error, Result};
use crate::loss::{make_loss, ConvexLoss};
use crate::policy::{
    gpo_loss, gpo_loss_and_gradient, mu_weighted_squared_loss, total_kl, PreferenceDataset,
    SoftmaxPolicy,
};
use crate::rng;

/// Training aborts once any logit exceeds this magnitude.
pub const LOGIT_GUARD: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: String,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sample this many pairs per step (with replacement, by weight)
    /// instead of using the exact expectation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
}

impl TrainConfig {
    pub fn new(loss: &str, beta: f64, learning_rate: f64, steps: usize, eval_every: usize) -> Self {
        Self {
            loss: loss.to_string(),
            beta,
            learning_rate,
            steps,
            eval_every,
            seed: 0,
            minibatch: None,
        }
    }

    /// Positivity checks. A zero learning rate is allowed: it freezes the
    /// policy, which is handy for tracing a fixed point.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(Error::Config(format!(
                "eval_every must be in 1..={}, got {}",
                self.steps, self.eval_every
            )));
        }
        if self.minibatch == Some(0) {
            return Err(Error::Config("minibatch must be positive".into()));
        }
        Ok(())
    }
}

/// Telemetry at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub gpo_loss: f64,
    /// KL summed over contexts.
    pub kl: f64,
    pub mu_sq: f64,
    /// Experiment-specific scalars, rendered as extra CSV columns.
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub final_policy: SoftmaxPolicy,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// Records up to (not including) the failing step.
        trace: Vec<TraceRecord>,
        policy: SoftmaxPolicy,
    },
}

/// Trains with the loss named in `config`.
pub fn train(
    config: &TrainConfig,
    data: &PreferenceDataset,
    reference: &SoftmaxPolicy,
    init: &SoftmaxPolicy,
) -> Result<TrainRun, TrainError> {
    let loss = make_loss(&config.loss)?;
    train_observed(config, &loss, data, reference, init, |_| Vec::new())
}

/// Trains with an explicit loss; `observe` adds extra scalars to each record.
pub fn train_observed<F>(
    config: &TrainConfig,
    loss: &ConvexLoss,
    data: &PreferenceDataset,
    reference: &SoftmaxPolicy,
    init: &SoftmaxPolicy,
    observe: F,
) -> Result<TrainRun, TrainError>
where
    F: Fn(&SoftmaxPolicy) -> Vec<(String, f64)>,
{
    config.validate()?;
    init.same_shape(reference)?;
    data.check_against(init)?;
    init.check_finite()?;
    reference.check_finite()?;

    let mut sampler = match config.minibatch {
        Some(size) => Some(MinibatchSampler::new(data, size, config.seed)?),
        None => None,
    };

    let mut theta = init.clone();
    let mut trace = Vec::new();
    let beta = config.beta;

    for step in 0..=config.steps {
        let (full_loss, full_grad) = gpo_loss_and_gradient(loss, beta, data, &theta, reference)?;
        if !full_loss.is_finite() {
            return Err(diverged(step, "non-finite loss".into(), trace, theta));
        }

        if step % config.eval_every == 0 || step == config.steps {
            let extra = observe(&theta).into_iter().collect();
            trace.push(TraceRecord {
                step,
                gpo_loss: full_loss,
                kl: total_kl(&theta, reference)?,
                mu_sq: mu_weighted_squared_loss(data, &theta, reference)?,
                extra,
            });
        }
        if step == config.steps {
            break;
        }

        let grad = match sampler.as_mut() {
            Some(s) => s.gradient(loss, beta, &theta, reference)?,
            None => full_grad,
        };
        theta.logits_mut().scaled_add(-config.learning_rate, &grad);

        let max_abs = theta.max_abs_logit();
        if !max_abs.is_finite() || max_abs > LOGIT_GUARD {
            return Err(diverged(
                step + 1,
                format!("max |logit| = {max_abs:e} exceeds {LOGIT_GUARD:e}"),
                trace,
                theta,
            ));
        }
    }

    Ok(TrainRun {
        final_policy: theta,
        trace,
    })
}

fn diverged(
    step: usize,
    reason: String,
    trace: Vec<TraceRecord>,
    policy: SoftmaxPolicy,
) -> TrainError {
    TrainError::Diverged {
        step,
        reason,
        trace,
        policy,
    }
}

struct MinibatchSampler<'a> {
    data: &'a PreferenceDataset,
    index: WeightedIndex<f64>,
    size: usize,
    rng: rng::StreamRng,
}

impl<'a> MinibatchSampler<'a> {
    fn new(data: &'a PreferenceDataset, size: usize, seed: u64) -> Result<Self> {
        let index = WeightedIndex::new(data.weights())
            .map_err(|e| Error::Config(format!("cannot sample pairs: {e}")))?;
        Ok(Self {
            data,
            index,
            size,
            rng: rng::stream(seed, "trainer.minibatch", 0),
        })
    }

    fn gradient(
        &mut self,
        loss: &ConvexLoss,
        beta: f64,
        theta: &SoftmaxPolicy,
        reference: &SoftmaxPolicy,
    ) -> Result<Array2<f64>> {
        let pairs = (0..self.size)
            .map(|_| self.data.pairs()[self.index.sample(&mut self.rng)])
            .collect();
        let batch = PreferenceDataset::uniform(pairs)?;
        gpo_loss_and_gradient(loss, beta, &batch, theta, reference).map(|(_, g)| g)
    }
}

/// Convenience for tests and reports: the GPO loss of `theta` under `config`.
pub fn evaluate_loss(
    config: &TrainConfig,
    data: &PreferenceDataset,
    theta: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
) -> Result<f64> {
    gpo_loss(
        &make_loss(&config.loss)?,
        config.beta,
        data,
        theta,
        reference,
    )
}

/// CSV with header `step,gpo_loss,kl,mu_sq[,extra columns sorted by name]`.
pub fn trace_to_csv(trace: &[TraceRecord]) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let columns: BTreeSet<&str> = trace
        .iter()
        .flat_map(|r| r.extra.keys().map(String::as_str))
        .collect();

    let mut out = String::from("step,gpo_loss,kl,mu_sq");
    for c in &columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');

    let mut rows: Vec<&TraceRecord> = trace.iter().collect();
    rows.sort_by_key(|r| r.step);
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.step,
            fmt_float(r.gpo_loss),
            fmt_float(r.kl),
            fmt_float(r.mu_sq)
        );
        for c in &columns {
            out.push(',');
            if let Some(v) = r.extra.get(*c) {
                out.push_str(&fmt_float(*v));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the output of [`trace_to_csv`].
pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or(Error::EmptyTrace)?.split(',').collect();
    if header.len() < 4 || header[..4] != ["step", "gpo_loss", "kl", "mu_sq"] {
        return Err(Error::Config("unexpected trace header".into()));
    }
    let bad = |line: &str| Error::Config(format!("malformed trace row `{line}`"));
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let mut extra = BTreeMap::new();
            for (name, field) in header[4..].iter().zip(&fields[4..]) {
                if !field.is_empty() {
                    extra.insert(name.to_string(), num(field)?);
                }
            }
            Ok(TraceRecord {
                step: fields[0].parse().map_err(|_| bad(line))?,
                gpo_loss: num(fields[1])?,
                kl: num(fields[2])?,
                mu_sq: num(fields[3])?,
                extra,
            })
        })
        .collect()
}
