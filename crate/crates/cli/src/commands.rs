//! Subcommand implementations. Each returns [`Outcome::Diverged`] when a
//! run hit the numeric guard; outputs are still written in that case.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gpo_core::checks::{self, CheckResult};
use gpo_core::csvfmt::fmt_float;
use gpo_core::gaussian::{self, ScanRow};
use gpo_core::goodhart::{self, SweepConfig};
use gpo_core::loss::taylor_ratio;
use gpo_core::reward::{fit_pointwise_reward, p_succ_mu, PreferenceMatrix};
use gpo_core::trainer::{trace_to_csv, TrainRun};
use gpo_core::{bandit, LossKind, PreferenceDataset, SoftmaxPolicy, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, Object};
use crate::output::RunDir;
use crate::{
    BanditArgs, CheckArgs, GaussiansArgs, GoodhartArgs, LossesArgs, RewardsArgs, SuiteName,
    TrainArgs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Diverged,
}

impl Outcome {
    fn from_flag(diverged: bool) -> Self {
        if diverged {
            Outcome::Diverged
        } else {
            Outcome::Done
        }
    }
}

fn opt_float(v: gpo_core::Result<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn losses_csv() -> String {
    let mut out = String::from("name,f0,fp0,fpp0,taylor_ratio\n");
    for kind in LossKind::ALL {
        let f = kind.loss();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            f.name,
            fmt_float(f.value(0.0)),
            fmt_float(f.deriv(0.0)),
            opt_float(f.second_deriv(0.0)),
            opt_float(taylor_ratio(&f)),
        ));
    }
    out
}

pub fn losses(args: &LossesArgs) -> Result<Outcome> {
    let csv = losses_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        let mut run = RunDir::create("losses", Some(out), &json!({}), 0)?;
        run.write("losses.csv", &csv)?;
        run.finish()?;
    }
    Ok(Outcome::Done)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid {what} JSON in {}", path.display()))
}

/// Pulls a path-valued key out of the config, resolved against the config
/// file's directory.
fn take_path(map: &mut Object, key: &str, config: Option<&Path>) -> Result<Option<PathBuf>> {
    match map.remove(key) {
        None => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(config::relative_to(config, Path::new(&s)))),
        Some(other) => bail!("`{key}` must be a path string, got {other}"),
    }
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let file = args.config.as_deref();
    let mut map = config::load(file)?;
    let dataset_path = args
        .dataset
        .clone()
        .or(take_path(&mut map, "dataset", file)?);
    let reference_path = args
        .reference
        .clone()
        .or(take_path(&mut map, "reference", file)?);
    let init_path = args.init.clone().or(take_path(&mut map, "init", file)?);
    config::overlay(&mut map, "loss", args.loss.as_ref())?;
    config::overlay(&mut map, "beta", args.beta)?;
    config::overlay(&mut map, "learning_rate", args.learning_rate)?;
    config::overlay(&mut map, "steps", args.steps)?;
    config::overlay(&mut map, "eval_every", args.eval_every)?;
    config::overlay(&mut map, "seed", args.seed)?;
    config::overlay(&mut map, "minibatch", args.minibatch)?;
    let cfg: TrainConfig = config::parse(&map, "train")?;

    let Some(dataset_path) = dataset_path else {
        bail!("train needs a dataset (`dataset` key or --dataset)")
    };
    let Some(reference_path) = reference_path else {
        bail!("train needs a reference policy (`reference` key or --reference)")
    };
    let data: PreferenceDataset = read_json(&dataset_path, "dataset")?;
    let reference: SoftmaxPolicy = read_json(&reference_path, "reference policy")?;
    let init: SoftmaxPolicy = match &init_path {
        Some(p) => read_json(p, "initial policy")?,
        None => reference.clone(),
    };

    let identity = json!({ "train": cfg, "dataset": data, "reference": reference, "init": init });
    let (run, outcome) = match gpo_core::train(&cfg, &data, &reference, &init) {
        Ok(run) => (run, Outcome::Done),
        Err(TrainError::Diverged {
            step,
            reason,
            trace,
            policy,
        }) => {
            eprintln!("training diverged at step {step}: {reason}");
            (
                TrainRun {
                    final_policy: policy,
                    trace,
                },
                Outcome::Diverged,
            )
        }
        Err(TrainError::Invalid(e)) => return Err(e.into()),
    };
    let mut out = RunDir::create("train", args.out.as_deref(), &identity, cfg.seed)?;
    out.write("trace.csv", &trace_to_csv(&run.trace)?)?;
    out.write_json("final_policy.json", &run.final_policy)?;
    let dir = out.finish()?;
    println!("{}", dir.display());
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditSettings {
    pub losses: Vec<String>,
    pub betas: Vec<f64>,
    pub learning_rate: f64,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for BanditSettings {
    fn default() -> Self {
        Self {
            losses: LossKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            betas: vec![1.0],
            learning_rate: bandit::DEFAULT_LEARNING_RATE,
            steps: bandit::DEFAULT_STEPS,
            eval_every: 100,
        }
    }
}

pub fn bandit(args: &BanditArgs) -> Result<Outcome> {
    let mut map = config::load(args.config.as_deref())?;
    config::overlay(&mut map, "losses", args.losses.as_ref())?;
    config::overlay(&mut map, "betas", args.betas.as_ref())?;
    config::overlay(&mut map, "learning_rate", args.learning_rate)?;
    config::overlay(&mut map, "steps", args.steps)?;
    config::overlay(&mut map, "eval_every", args.eval_every)?;
    let s: BanditSettings = config::parse(&map, "bandit")?;

    let outcomes =
        bandit::bandit_report(&s.losses, &s.betas, s.learning_rate, s.steps, s.eval_every)?;
    let mut out = RunDir::create("bandit", args.out.as_deref(), &s, 0)?;
    let mut any_diverged = false;
    for o in &outcomes {
        let c = &o.cell;
        eprintln!(
            "{} beta={} p_y1={} steps={}{}",
            c.loss,
            fmt_float(c.beta),
            fmt_float(c.p_y1),
            c.steps_completed,
            if c.diverged { " DIVERGED" } else { "" }
        );
        any_diverged |= c.diverged;
        out.write(
            &format!("trace_{}_beta{}.csv", c.loss, fmt_float(c.beta)),
            &trace_to_csv(&o.run.trace)?,
        )?;
    }
    let cells: Vec<_> = outcomes.into_iter().map(|o| o.cell).collect();
    out.write("bandit_summary.csv", &bandit::summary_csv(&cells))?;
    println!("{}", out.finish()?.display());
    Ok(Outcome::from_flag(any_diverged))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSettings {
    pub seed: u64,
    pub n: usize,
    pub grid: usize,
    pub window: usize,
    /// Try `seed, seed+1, …` (this many seeds) and keep the first
    /// counterexample.
    pub search: Option<u64>,
}

impl Default for GaussianSettings {
    fn default() -> Self {
        Self {
            seed: gaussian::COUNTEREXAMPLE_SEED,
            n: gaussian::DEFAULT_SAMPLES,
            grid: gaussian::DEFAULT_GRID_POINTS,
            window: gaussian::DEFAULT_WINDOW,
            search: None,
        }
    }
}

pub fn gaussians(args: &GaussiansArgs) -> Result<Outcome> {
    let mut map = config::load(args.config.as_deref())?;
    config::overlay(&mut map, "seed", args.seed)?;
    config::overlay(&mut map, "n", args.n)?;
    config::overlay(&mut map, "grid", args.grid)?;
    config::overlay(&mut map, "window", args.window)?;
    config::overlay(&mut map, "search", args.search)?;
    let s: GaussianSettings = config::parse(&map, "gaussians")?;

    let seed = match s.search {
        None => s.seed,
        Some(count) => {
            let seeds = s.seed..s.seed.saturating_add(count);
            match gaussian::search_counterexample(seeds, s.n, s.grid, s.window)? {
                Some(found) => found.seed,
                None => bail!(
                    "no counterexample among {count} seeds starting at {}",
                    s.seed
                ),
            }
        }
    };
    let reference = gaussian::trimodal_reference();
    let mu = gaussian::random_mu(seed);
    let grid = gaussian::symmetric_grid(s.grid)?;
    let rows: Vec<ScanRow> = gaussian::scan_shift(&reference, &mu, &grid, s.n, seed)?;
    let report = gaussian::analyze_scan(&rows, s.window)?;
    eprintln!(
        "seed {seed}: mu_sq minima {:?}, kl minima {:?}, counterexamples {:?}",
        report.mu_sq_minima, report.kl_minima, report.counterexamples
    );

    let mut out = RunDir::create("gaussians", args.out.as_deref(), &s, seed)?;
    out.write("scan.csv", &gaussian::scan_to_csv(&rows))?;
    out.write_json(
        "minima.json",
        &json!({
            "seed": seed,
            "n": s.n,
            "reference": reference,
            "mu": mu,
            "is_counterexample": report.is_counterexample(),
            "report": report,
        }),
    )?;
    println!("{}", out.finish()?.display());
    Ok(Outcome::Done)
}

fn print_table(results: &[CheckResult]) -> bool {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    failed == 0
}

fn parse_mu(values: Option<&Vec<f64>>, path: Option<&Path>, n: usize) -> Result<Vec<f64>> {
    match (values, path) {
        (Some(v), _) => Ok(v.clone()),
        (None, Some(p)) => read_json(p, "mu"),
        (None, None) => Ok(vec![1.0 / n as f64; n]),
    }
}

pub fn rewards(args: &RewardsArgs) -> Result<Outcome> {
    if let Some(suite) = args.check {
        let results = match suite {
            SuiteName::Bayes => checks::bayes_checks()?,
            SuiteName::Bt => checks::bt_checks()?,
            SuiteName::Equivalence => checks::equivalence_checks()?,
            SuiteName::All => {
                let mut all = checks::bayes_checks()?;
                all.extend(checks::bt_checks()?);
                all.extend(checks::equivalence_checks()?);
                all
            }
        };
        let ok = print_table(&results);
        if let Some(dir) = &args.out {
            let mut out = RunDir::create(
                "rewards",
                Some(dir),
                &json!({ "check": format!("{suite:?}") }),
                checks::CHECK_SEED,
            )?;
            out.write_json("checks.json", &results)?;
            out.finish()?;
        }
        if !ok {
            bail!("reward checks failed");
        }
        return Ok(Outcome::Done);
    }

    let Some(prefs_path) = &args.prefs else {
        bail!("rewards needs --check or --prefs")
    };
    let prefs: PreferenceMatrix = read_json(prefs_path, "preference matrix")?;
    let mu = parse_mu(args.mu.as_ref(), args.mu_file.as_deref(), prefs.n())?;
    let f = gpo_core::make_loss(&args.loss)?;
    let identity = json!({ "loss": args.loss, "prefs": prefs, "mu": mu, "tol": args.tol });
    let (reward, outcome) = match fit_pointwise_reward(&f, &prefs, &mu, args.tol) {
        Ok(r) => (Some(r), Outcome::Done),
        Err(gpo_core::Error::Unbounded(msg)) => {
            eprintln!("{msg}");
            (None, Outcome::Diverged)
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = RunDir::create("rewards", args.out.as_deref(), &identity, 0)?;
    out.write_json(
        "reward.json",
        &json!({
            "loss": args.loss,
            "mu": mu,
            "reward": reward,
            "p_succ_mu": p_succ_mu(&prefs, &mu)?,
        }),
    )?;
    println!("{}", out.finish()?.display());
    Ok(outcome)
}

pub fn goodhart(args: &GoodhartArgs) -> Result<Outcome> {
    let mut map = config::load(args.config.as_deref())?;
    config::overlay(&mut map, "losses", args.losses.as_ref())?;
    config::overlay(&mut map, "betas", args.betas.as_ref())?;
    config::overlay(&mut map, "lrs", args.lrs.as_ref())?;
    config::overlay(&mut map, "steps", args.steps)?;
    config::overlay(&mut map, "eval_every", args.eval_every)?;
    config::overlay(&mut map, "seeds", args.seeds.as_ref())?;
    config::overlay(&mut map, "instance_seed", args.instance_seed)?;
    let cfg: SweepConfig = config::parse(&map, "goodhart")?;
    cfg.validate()?;

    let instance = goodhart::make_instance(&cfg.instance, cfg.instance_seed)?;
    let rows = goodhart::run_sweep(&cfg, &instance)?;
    let summary = goodhart::summarize(&rows)?;
    for s in &summary {
        eprintln!(
            "{} beta={} peak_win_rate={} kl_at_peak={} median_kl={}",
            s.loss,
            fmt_float(s.beta),
            fmt_float(s.peak_win_rate),
            fmt_float(s.kl_at_peak),
            fmt_float(s.median_kl)
        );
    }
    let diverged = rows.iter().any(|r| r.diverged);

    let mut out = RunDir::create("goodhart", args.out.as_deref(), &cfg, cfg.instance_seed)?;
    out.write("sweep.csv", &goodhart::sweep_to_csv(&rows))?;
    out.write("summary.csv", &goodhart::summary_to_csv(&summary))?;
    out.write_json("instance.json", &instance)?;
    println!("{}", out.finish()?.display());
    Ok(Outcome::from_flag(diverged))
}

pub fn check(args: &CheckArgs) -> Result<Outcome> {
    let results = checks::run_all()?;
    let ok = print_table(&results);
    if let Some(dir) = &args.out {
        let mut out = RunDir::create("check", Some(dir), &json!({}), checks::CHECK_SEED)?;
        out.write_json("checks.json", &results)?;
        out.finish()?;
    }
    if !ok {
        bail!("invariant suite failed");
    }
    Ok(Outcome::Done)
}
