use std::collections::HashMap;

use gpo_core::goodhart::*;

/// Spread of per-loss best peak win rates in the reference sweep is 0.041.
const PEAK_BAND: f64 = 0.05;

#[test]
fn default_sweep_properties() {
    let cfg = SweepConfig::default();
    let instance = make_instance(&cfg.instance, cfg.instance_seed).unwrap();
    let rows = run_sweep(&cfg, &instance).unwrap();
    assert!(rows.iter().all(|r| !r.diverged));

    let violations = kl_monotonicity_violations(&rows, 0.05);
    assert!(violations.is_empty(), "{violations:?}");

    let smallest = cfg.betas.iter().cloned().fold(f64::INFINITY, f64::min);
    for loss in &cfg.losses {
        let hump = goodhart_hump(&rows, loss, smallest).unwrap();
        assert!(hump.is_interior(), "{loss}: {hump:?}");
        assert!(
            hump.peak_win_rate > hump.win_rate_at_max_kl,
            "{loss}: {hump:?}"
        );
    }

    let summary = summarize(&rows).unwrap();
    let largest = cfg.betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let median = |loss: &str| {
        summary
            .iter()
            .find(|s| s.loss == loss && s.beta == largest)
            .unwrap()
            .median_kl
    };
    assert!(median("squared") <= median("logistic"));

    let best: Vec<f64> = cfg
        .losses
        .iter()
        .map(|l| {
            summary
                .iter()
                .filter(|s| &s.loss == l)
                .map(|s| s.peak_win_rate)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let spread = best.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - best.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(spread <= PEAK_BAND, "{best:?}");
}

#[test]
fn sampled_pairs_follow_mu_and_golden_preferences() {
    let params = InstanceParams {
        dataset_size: 40_000,
        ..InstanceParams::default()
    };
    let instance = make_instance(&params, 3).unwrap();
    let data = sample_dataset(&instance, 9).unwrap();
    let n = data.len() as f64;

    let mut counts: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for p in data.pairs() {
        *counts.entry((p.context, p.winner, p.loser)).or_default() += 1.0;
    }
    // A draw with i = j is rejected together with its context, so the
    // normalizer is the total distinct-pair mass over contexts.
    let distinct: f64 = instance
        .mu
        .iter()
        .map(|mu| 1.0 - mu.iter().map(|m| m * m).sum::<f64>())
        .sum();
    for ctx in 0..params.contexts {
        let mu = &instance.mu[ctx];
        for i in 0..params.actions {
            for j in 0..params.actions {
                if i == j {
                    continue;
                }
                // Either draw order can produce the pair with i as winner.
                let prob = 2.0 * mu[i] * mu[j] / distinct * instance.golden_prefs[ctx].get(i, j);
                if prob * n < 20.0 {
                    continue;
                }
                let observed = counts.get(&(ctx, i, j)).copied().unwrap_or(0.0);
                let se = (n * prob * (1.0 - prob)).sqrt();
                assert!(
                    (observed - n * prob).abs() < 4.0 * se,
                    "({ctx},{i},{j}): {observed} vs {}",
                    n * prob
                );
            }
        }
    }
}

#[test]
fn sweep_csv_is_deterministic() {
    let cfg = SweepConfig {
        losses: vec!["logistic".into(), "hinge".into()],
        betas: vec![0.1, 1.0],
        lrs: vec![1.0],
        steps: 200,
        eval_every: 50,
        ..SweepConfig::default()
    };
    let instance = make_instance(&cfg.instance, cfg.instance_seed).unwrap();
    let a = sweep_to_csv(&run_sweep(&cfg, &instance).unwrap());
    let b = sweep_to_csv(&run_sweep(&cfg, &instance).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().next().unwrap(), SWEEP_HEADER);
}
