//! Synthetic over-optimization study.
//!
//! A golden Bradley-Terry reward defines the true preferences. Policies are
//! trained on a finite dataset sampled from an off-policy behavior
//! distribution `μ` and scored by their exact win rate against the golden
//! policy `softmax(r*/τ)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvfmt::fmt_float;
use crate::error::{Error, Result};
use crate::loss::make_loss;
use crate::policy::{Pair, PreferenceDataset, SoftmaxPolicy};
use crate::reward::PreferenceMatrix;
use crate::rng;
use crate::trainer::{train_observed, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceParams {
    pub contexts: usize,
    pub actions: usize,
    /// Standard deviation of the golden rewards.
    pub reward_scale: f64,
    /// Standard deviation of the behavior-policy logits.
    pub mu_scale: f64,
    /// Golden-policy temperature `τ`.
    pub temperature: f64,
    pub dataset_size: usize,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            contexts: 8,
            actions: 16,
            reward_scale: 1.0,
            mu_scale: 2.0,
            temperature: 1.0,
            dataset_size: 2048,
        }
    }
}

impl InstanceParams {
    pub fn validate(&self) -> Result<()> {
        if self.contexts == 0 {
            return Err(Error::Config("instance needs at least one context".into()));
        }
        if self.actions < 3 {
            return Err(Error::Config(format!(
                "instance needs at least 3 actions, got {}",
                self.actions
            )));
        }
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be positive".into()));
        }
        if !(self.reward_scale >= 0.0 && self.reward_scale.is_finite()) {
            return Err(Error::Config("reward_scale must be nonnegative".into()));
        }
        if !(self.mu_scale >= 0.0 && self.mu_scale.is_finite()) {
            return Err(Error::Config("mu_scale must be nonnegative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GoldenInstance {
    pub params: InstanceParams,
    pub seed: u64,
    /// `r*[context][action]`.
    pub golden_reward: Vec<Vec<f64>>,
    /// `σ(r*_i − r*_j)` per context.
    pub golden_prefs: Vec<PreferenceMatrix>,
    pub golden_policy: SoftmaxPolicy,
    /// Behavior distribution per context.
    pub mu: Vec<Vec<f64>>,
    /// Training starts here; equal to `μ`.
    pub reference: SoftmaxPolicy,
    pub dataset: PreferenceDataset,
}

/// Golden rewards, `μ` and reference come from `seed`; the dataset is
/// [`sample_dataset`] at the same seed.
pub fn make_instance(params: &InstanceParams, seed: u64) -> Result<GoldenInstance> {
    params.validate()?;
    let (c, a) = (params.contexts, params.actions);
    let mut golden = rng::stream(seed, "goodhart.golden", 0);
    let mut normals = |scale: f64| -> Vec<Vec<f64>> {
        (0..c)
            .map(|_| {
                (0..a)
                    .map(|_| scale * golden.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let golden_reward = normals(params.reward_scale);
    let mu_logits = normals(params.mu_scale);

    let golden_prefs = golden_reward
        .iter()
        .map(|r| crate::reward::bt_preferences(&crate::reward::RewardVector::new(r.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let scaled: Vec<Vec<f64>> = golden_reward
        .iter()
        .map(|row| row.iter().map(|v| v / params.temperature).collect())
        .collect();
    let golden_policy = SoftmaxPolicy::from_rows(&scaled)?;
    let reference = SoftmaxPolicy::from_rows(&mu_logits)?;
    let mu = (0..c).map(|k| reference.probs(k)).collect();

    let mut instance = GoldenInstance {
        params: params.clone(),
        seed,
        golden_reward,
        golden_prefs,
        golden_policy,
        mu,
        reference,
        dataset: PreferenceDataset::uniform(vec![Pair::new(0, 0, 1)])?,
    };
    instance.dataset = sample_dataset(&instance, seed)?;
    Ok(instance)
}

/// `dataset_size` labeled pairs: context uniform, `(i, j) ~ μ×μ` with
/// `i ≠ j`, `i` wins with probability `σ(r*_i − r*_j)`. Uniform weights.
pub fn sample_dataset(instance: &GoldenInstance, seed: u64) -> Result<PreferenceDataset> {
    let p = &instance.params;
    let mut r = rng::stream(seed, "goodhart.dataset", 0);
    let samplers = instance
        .mu
        .iter()
        .map(|m| WeightedIndex::new(m).map_err(|e| Error::Config(format!("invalid mu: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(p.dataset_size);
    while pairs.len() < p.dataset_size {
        let c = r.random_range(0..p.contexts);
        let i = samplers[c].sample(&mut r);
        let j = samplers[c].sample(&mut r);
        if i == j {
            continue;
        }
        let u: f64 = r.random();
        if u < instance.golden_prefs[c].get(i, j) {
            pairs.push(Pair::new(c, i, j));
        } else {
            pairs.push(Pair::new(c, j, i));
        }
    }
    PreferenceDataset::uniform(pairs)
}

/// `(1/C) Σ_c Σ_{i,j} πθ(i|c) πopp(j|c) p_c(i ≻ j)`, evaluated as
/// `½ + Σ_{i<j} (p_ij − ½)(πθ(i)πopp(j) − πθ(j)πopp(i))` so that a policy
/// scores exactly ½ against itself.
pub fn win_rate(
    theta: &SoftmaxPolicy,
    opponent: &SoftmaxPolicy,
    golden_prefs: &[PreferenceMatrix],
) -> Result<f64> {
    theta.same_shape(opponent)?;
    if golden_prefs.len() != theta.contexts()
        || golden_prefs.iter().any(|m| m.n() != theta.actions())
    {
        return Err(Error::Dimension(
            "golden preferences do not match the policy shape".into(),
        ));
    }
    let n = theta.actions();
    let total: f64 = (0..theta.contexts())
        .map(|c| {
            let (pt, po) = (theta.probs(c), opponent.probs(c));
            let m = &golden_prefs[c];
            let mut edge = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    edge += (m.get(i, j) - 0.5) * (pt[i] * po[j] - pt[j] * po[i]);
                }
            }
            0.5 + edge
        })
        .sum();
    Ok(total / theta.contexts() as f64)
}

/// How the per-cell step size relates to the configured learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrScaling {
    /// `lr / β²`: the margins `βρ` follow the same trajectory for every `β`,
    /// and the policy at each step is `πref · exp(v/β)` for a shared `v`.
    #[default]
    Margin,
    /// `lr / β`: the logit step no longer carries the `β` factor of the
    /// gradient.
    InverseBeta,
    /// `lr` as given.
    Constant,
}

impl LrScaling {
    pub fn effective(self, lr: f64, beta: f64) -> f64 {
        match self {
            LrScaling::Margin => lr / (beta * beta),
            LrScaling::InverseBeta => lr / beta,
            LrScaling::Constant => lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub losses: Vec<String>,
    pub betas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub steps: usize,
    pub eval_every: usize,
    /// Each seed draws its own dataset from the golden instance.
    pub seeds: Vec<u64>,
    pub instance_seed: u64,
    pub instance: InstanceParams,
    pub lr_scaling: LrScaling,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            losses: crate::loss::LossKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            betas: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            lrs: vec![1.0, 3.0],
            steps: 10_000,
            eval_every: 250,
            seeds: vec![0],
            instance_seed: 0,
            instance: InstanceParams::default(),
            lr_scaling: LrScaling::Margin,
            minibatch: None,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty()
            || self.betas.is_empty()
            || self.lrs.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config(
                "losses, betas, lrs and seeds must be nonempty".into(),
            ));
        }
        for name in &self.losses {
            make_loss(name)?;
        }
        if self.betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Config("betas must be positive".into()));
        }
        if self.lrs.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("lrs must be positive".into()));
        }
        self.instance.validate()?;
        TrainConfig::new(&self.losses[0], 1.0, 1.0, self.steps, self.eval_every).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub loss: String,
    pub beta: f64,
    pub lr: f64,
    pub seed: u64,
    pub step: usize,
    pub kl: f64,
    pub win_rate: f64,
    pub mu_sq: f64,
    /// Set on every row of a cell whose training hit the divergence guard.
    pub diverged: bool,
}

struct Cell<'a> {
    loss: &'a str,
    beta: f64,
    lr: f64,
    seed: u64,
}

fn run_cell(
    config: &SweepConfig,
    instance: &GoldenInstance,
    data: &PreferenceDataset,
    cell: &Cell,
) -> Result<Vec<SweepRow>> {
    let f = make_loss(cell.loss)?;
    let mut train_cfg = TrainConfig::new(
        cell.loss,
        cell.beta,
        config.lr_scaling.effective(cell.lr, cell.beta),
        config.steps,
        config.eval_every,
    );
    train_cfg.seed = cell.seed;
    train_cfg.minibatch = config.minibatch;
    let observe = |p: &SoftmaxPolicy| {
        let w =
            win_rate(p, &instance.golden_policy, &instance.golden_prefs).expect("shapes checked");
        vec![("win_rate".to_string(), w)]
    };
    let (trace, diverged) = match train_observed(
        &train_cfg,
        &f,
        data,
        &instance.reference,
        &instance.reference,
        observe,
    ) {
        Ok(run) => (run.trace, false),
        Err(TrainError::Diverged { trace, .. }) => (trace, true),
        Err(TrainError::Invalid(e)) => return Err(e),
    };
    Ok(trace
        .into_iter()
        .map(|r| SweepRow {
            loss: cell.loss.to_string(),
            beta: cell.beta,
            lr: cell.lr,
            seed: cell.seed,
            step: r.step,
            kl: r.kl,
            win_rate: r.extra["win_rate"],
            mu_sq: r.mu_sq,
            diverged,
        })
        .collect())
}

/// Trains every `(loss, β, lr, seed)` cell in parallel. Rows come back
/// grouped by cell in grid order, each cell in step order.
pub fn run_sweep(config: &SweepConfig, instance: &GoldenInstance) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let datasets = config
        .seeds
        .iter()
        .map(|&s| sample_dataset(instance, s).map(|d| (s, d.merged())))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for loss in &config.losses {
        for &beta in &config.betas {
            for &lr in &config.lrs {
                for (seed, data) in &datasets {
                    cells.push((
                        Cell {
                            loss,
                            beta,
                            lr,
                            seed: *seed,
                        },
                        data,
                    ));
                }
            }
        }
    }
    let per_cell = cells
        .par_iter()
        .map(|(cell, data)| run_cell(config, instance, data, cell))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

pub const SWEEP_HEADER: &str = "loss,beta,lr,seed,step,kl,win_rate,mu_sq,diverged";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.loss,
            fmt_float(r.beta),
            fmt_float(r.lr),
            r.seed,
            r.step,
            fmt_float(r.kl),
            fmt_float(r.win_rate),
            fmt_float(r.mu_sq),
            r.diverged
        ));
    }
    out
}

/// Nearest-rank percentile: the smallest value with at least `q`% of the
/// sample at or below it.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("percentile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must be in (0, 100], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub loss: String,
    pub beta: f64,
    pub peak_win_rate: f64,
    pub kl_at_peak: f64,
    pub p90_win_rate: f64,
    pub median_kl: f64,
    pub rows: usize,
}

/// One summary per `(loss, β)`, pooling all learning rates, seeds and
/// evaluation steps, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Result<Vec<CellSummary>> {
    if rows.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut keys: Vec<(&str, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(l, b)| *l == r.loss && *b == r.beta) {
            keys.push((&r.loss, r.beta));
        }
    }
    keys.into_iter()
        .map(|(loss, beta)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.loss == loss && r.beta == beta)
                .collect();
            let peak = group
                .iter()
                .copied()
                .reduce(|a, b| if b.win_rate > a.win_rate { b } else { a })
                .expect("group is nonempty");
            let wins: Vec<f64> = group.iter().map(|r| r.win_rate).collect();
            let kls: Vec<f64> = group.iter().map(|r| r.kl).collect();
            Ok(CellSummary {
                loss: loss.to_string(),
                beta,
                peak_win_rate: peak.win_rate,
                kl_at_peak: peak.kl,
                p90_win_rate: nearest_rank(&wins, 90.0)?,
                median_kl: nearest_rank(&kls, 50.0)?,
                rows: group.len(),
            })
        })
        .collect()
}

pub fn summary_to_csv(summary: &[CellSummary]) -> String {
    let mut out = String::from("loss,beta,peak_win_rate,kl_at_peak,p90_win_rate,median_kl,rows\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.loss,
            fmt_float(s.beta),
            fmt_float(s.peak_win_rate),
            fmt_float(s.kl_at_peak),
            fmt_float(s.p90_win_rate),
            fmt_float(s.median_kl),
            s.rows
        ));
    }
    out
}

/// A terminal-KL increase between consecutive betas for one
/// `(loss, lr, seed)`, beyond the allowed relative slack.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityViolation {
    pub loss: String,
    pub lr: f64,
    pub seed: u64,
    pub beta_low: f64,
    pub beta_high: f64,
    pub kl_low: f64,
    pub kl_high: f64,
}

fn terminal_rows(rows: &[SweepRow]) -> Vec<&SweepRow> {
    let mut out: Vec<&SweepRow> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last)
                if last.loss == r.loss
                    && last.beta == r.beta
                    && last.lr == r.lr
                    && last.seed == r.seed =>
            {
                *last = r;
            }
            _ => out.push(r),
        }
    }
    out
}

/// Checks that terminal KL does not grow with `β`, skipping diverged cells.
pub fn kl_monotonicity_violations(rows: &[SweepRow], slack: f64) -> Vec<MonotonicityViolation> {
    let terminal: Vec<&SweepRow> = terminal_rows(rows)
        .into_iter()
        .filter(|r| !r.diverged)
        .collect();
    let mut violations = Vec::new();
    for r in &terminal {
        let mut series: Vec<&&SweepRow> = terminal
            .iter()
            .filter(|s| s.loss == r.loss && s.lr == r.lr && s.seed == r.seed)
            .collect();
        if !std::ptr::eq(*series[0], *r) {
            continue;
        }
        series.sort_by(|a, b| a.beta.total_cmp(&b.beta));
        for w in series.windows(2) {
            if w[1].kl > w[0].kl * (1.0 + slack) {
                violations.push(MonotonicityViolation {
                    loss: r.loss.clone(),
                    lr: r.lr,
                    seed: r.seed,
                    beta_low: w[0].beta,
                    beta_high: w[1].beta,
                    kl_low: w[0].kl,
                    kl_high: w[1].kl,
                });
            }
        }
    }
    violations
}

/// Location of the best win rate within the pooled KL range of one
/// `(loss, β)` group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hump {
    pub kl_min: f64,
    pub kl_at_peak: f64,
    pub kl_max: f64,
    pub peak_win_rate: f64,
    /// Win rate of the row with the largest KL.
    pub win_rate_at_max_kl: f64,
}

impl Hump {
    /// The peak sits strictly inside the KL range.
    pub fn is_interior(&self) -> bool {
        self.kl_min < self.kl_at_peak && self.kl_at_peak < self.kl_max
    }
}

pub fn goodhart_hump(rows: &[SweepRow], loss: &str, beta: f64) -> Option<Hump> {
    let group: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.loss == loss && r.beta == beta)
        .collect();
    let peak = group
        .iter()
        .copied()
        .reduce(|a, b| if b.win_rate > a.win_rate { b } else { a })?;
    let far = group
        .iter()
        .copied()
        .reduce(|a, b| if b.kl > a.kl { b } else { a })?;
    Some(Hump {
        kl_min: group.iter().map(|r| r.kl).fold(f64::INFINITY, f64::min),
        kl_at_peak: peak.kl,
        kl_max: far.kl,
        peak_win_rate: peak.win_rate,
        win_rate_at_max_kl: far.win_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> InstanceParams {
        InstanceParams {
            contexts: 2,
            actions: 4,
            dataset_size: 200,
            ..InstanceParams::default()
        }
    }

    #[test]
    fn zero_scale_is_indifferent() {
        let params = InstanceParams {
            reward_scale: 0.0,
            ..small_params()
        };
        let inst = make_instance(&params, 1).unwrap();
        for m in &inst.golden_prefs {
            assert_eq!(*m, PreferenceMatrix::indifferent(4).unwrap());
        }
        for c in 0..2 {
            assert!(inst
                .golden_policy
                .probs(c)
                .iter()
                .all(|p| (p - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn instance_is_deterministic() {
        let a = make_instance(&small_params(), 5).unwrap();
        let b = make_instance(&small_params(), 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = make_instance(&small_params(), 6).unwrap();
        assert_ne!(a.golden_reward, c.golden_reward);
    }

    #[test]
    fn degenerate_params_rejected() {
        assert!(make_instance(
            &InstanceParams {
                actions: 2,
                ..small_params()
            },
            0
        )
        .is_err());
        assert!(make_instance(
            &InstanceParams {
                dataset_size: 0,
                ..small_params()
            },
            0
        )
        .is_err());
        assert!(make_instance(
            &InstanceParams {
                temperature: 0.0,
                ..small_params()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn win_rate_identities() {
        let inst = make_instance(&small_params(), 2).unwrap();
        let uniform = SoftmaxPolicy::uniform(2, 4).unwrap();
        let g = &inst.golden_policy;
        assert_eq!(win_rate(g, g, &inst.golden_prefs).unwrap(), 0.5);
        let a = win_rate(g, &uniform, &inst.golden_prefs).unwrap();
        let b = win_rate(&uniform, g, &inst.golden_prefs).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
        assert!(a > 0.5);
    }

    #[test]
    fn nearest_rank_conventions() {
        assert_eq!(nearest_rank(&[3.0], 90.0).unwrap(), 3.0);
        assert_eq!(nearest_rank(&[2.0; 7], 50.0).unwrap(), 2.0);
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(nearest_rank(&v, 50.0).unwrap(), 3.0);
        assert_eq!(nearest_rank(&v, 90.0).unwrap(), 5.0);
        assert_eq!(nearest_rank(&v, 20.0).unwrap(), 1.0);
        assert!(nearest_rank(&[], 50.0).is_err());
    }

    #[test]
    fn tiny_sweep_counts_rows() {
        let config = SweepConfig {
            losses: vec!["logistic".into()],
            betas: vec![1.0],
            lrs: vec![0.1],
            steps: 10,
            eval_every: 5,
            seeds: vec![0],
            instance: small_params(),
            ..SweepConfig::default()
        };
        let inst = make_instance(&config.instance, 0).unwrap();
        let rows = run_sweep(&config, &inst).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 5, 10]
        );
        let start = win_rate(&inst.reference, &inst.golden_policy, &inst.golden_prefs).unwrap();
        assert_eq!((rows[0].kl, rows[0].win_rate), (0.0, start));
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with(
            "loss,beta,lr,seed,step,kl,win_rate,mu_sq,diverged\nlogistic,1,0.1,0,0,0,"
        ));
        let summary = summarize(&rows).unwrap();
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].rows, 3);
    }

    #[test]
    fn single_row_summary() {
        let row = SweepRow {
            loss: "squared".into(),
            beta: 1.0,
            lr: 0.1,
            seed: 0,
            step: 0,
            kl: 0.0,
            win_rate: 0.3,
            mu_sq: 0.0,
            diverged: false,
        };
        let s = summarize(&[row]).unwrap();
        assert_eq!(
            (s[0].peak_win_rate, s[0].p90_win_rate, s[0].median_kl),
            (0.3, 0.3, 0.0)
        );
    }
}
