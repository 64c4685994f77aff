//! One-dimensional mixture-of-Gaussians setting in which the μ-weighted
//! squared loss has local minimizers that the KL divergence does not.
//!
//! The policy family is `πc(x) = πref(x − c)`. Both objectives are estimated
//! by Monte Carlo with common random numbers: the same base draws are reused
//! at every `c`, so the scanned curves are smooth in `c` and both estimates
//! are exactly zero at `c = 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvfmt::fmt_float;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::rng;

/// Seed whose `μ` draw produces the counterexample with the default scan.
pub const COUNTEREXAMPLE_SEED: u64 = 0;
pub const DEFAULT_SAMPLES: usize = 2000;
pub const DEFAULT_GRID_POINTS: usize = 401;
pub const DEFAULT_WINDOW: usize = 5;
/// Component standard deviation of `μ`.
pub const MU_STD: f64 = 0.05;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Config(format!(
                "mixture needs equal nonempty lists, got {} weights, {} means, {} stds",
                weights.len(),
                means.len(),
                stds.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(Self {
            weights,
            means,
            stds,
        })
    }

    pub fn normal(mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                let z = (x - m) / s;
                w.ln() - 0.5 * z * z - s.ln() - LN_SQRT_2PI
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        self.means[k] + self.stds[k] * z
    }
}

/// `density(x) = base.density(x − shift)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPolicy {
    pub base: GaussianMixture,
    pub shift: f64,
}

impl ShiftPolicy {
    pub fn new(base: GaussianMixture, shift: f64) -> Self {
        Self { base, shift }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        self.base.log_pdf(x - self.shift)
    }
}

pub fn mixture_pdf(m: &GaussianMixture, x: f64) -> f64 {
    m.pdf(x)
}

/// `n` draws from the stream `label`.
fn draws(m: &GaussianMixture, n: usize, seed: u64, label: &str) -> Vec<f64> {
    let mut r = rng::stream(seed, label, 0);
    (0..n).map(|_| m.sample(&mut r)).collect()
}

pub fn sample_mixture(m: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    Ok(draws(m, n, seed, "gaussian.sample"))
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone) -> Estimate {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return Estimate { mean, std_err: 0.0 };
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Estimate {
        mean,
        std_err: (var / n).sqrt(),
    }
}

fn kl_from_base_draws(theta: &ShiftPolicy, reference: &GaussianMixture, base: &[f64]) -> Estimate {
    mean_and_se(base.iter().map(|z| {
        let x = z + theta.shift;
        theta.log_pdf(x) - reference.log_pdf(x)
    }))
}

fn mu_sq_from_draws(
    theta: &ShiftPolicy,
    reference: &GaussianMixture,
    mu_draws: &[f64],
) -> Estimate {
    let log_ratio = |x: f64| theta.log_pdf(x) - reference.log_pdf(x);
    mean_and_se(mu_draws.chunks_exact(2).map(move |pair| {
        let d = log_ratio(pair[0]) - log_ratio(pair[1]);
        0.5 * d * d
    }))
}

/// `E_{x~πθ}[log πθ(x)/πref(x)]` from `n` draws of `x = z + c`, `z ~ θ.base`.
pub fn estimate_kl_with_error(
    theta: &ShiftPolicy,
    reference: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    Ok(kl_from_base_draws(
        theta,
        reference,
        &draws(&theta.base, n, seed, "gaussian.kl"),
    ))
}

pub fn estimate_kl(
    theta: &ShiftPolicy,
    reference: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<f64> {
    estimate_kl_with_error(theta, reference, n, seed).map(|e| e.mean)
}

/// `E_{x,x′~μ}[½(L(x) − L(x′))²]` with `L = log πθ/πref`, over `n`
/// disjoint consecutive pairs of a `2n`-draw stream.
pub fn estimate_mu_sq_with_error(
    theta: &ShiftPolicy,
    reference: &GaussianMixture,
    mu: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<Estimate> {
    if n < 2 {
        return Err(Error::Config("mu_sq needs at least 2 samples".into()));
    }
    Ok(mu_sq_from_draws(
        theta,
        reference,
        &draws(mu, 2 * n, seed, "gaussian.mu_sq"),
    ))
}

pub fn estimate_mu_sq(
    theta: &ShiftPolicy,
    reference: &GaussianMixture,
    mu: &GaussianMixture,
    n: usize,
    seed: u64,
) -> Result<f64> {
    estimate_mu_sq_with_error(theta, reference, mu, n, seed).map(|e| e.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanRow {
    pub c: f64,
    pub kl: f64,
    pub mu_sq: f64,
}

/// Evaluates both estimators at every `c` with one shared set of draws,
/// the same draws [`estimate_kl`] and [`estimate_mu_sq`] use for `seed`.
pub fn scan_shift(
    reference: &GaussianMixture,
    mu: &GaussianMixture,
    c_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<ScanRow>> {
    if c_grid.is_empty() {
        return Err(Error::Config("scan grid is empty".into()));
    }
    if n < 2 {
        return Err(Error::Config("scan needs at least 2 samples".into()));
    }
    let base = draws(reference, n, seed, "gaussian.kl");
    let mu_draws = draws(mu, 2 * n, seed, "gaussian.mu_sq");
    Ok(c_grid
        .par_iter()
        .map(|&c| {
            let theta = ShiftPolicy::new(reference.clone(), c);
            ScanRow {
                c,
                kl: kl_from_base_draws(&theta, reference, &base).mean,
                mu_sq: mu_sq_from_draws(&theta, reference, &mu_draws).mean,
            }
        })
        .collect())
}

/// `points` uniform values on `[−1, 1]`; for odd `points` the middle one is
/// exactly 0.
pub fn symmetric_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Config("grid needs at least 2 points".into()));
    }
    let m = (points - 1) as f64;
    Ok((0..points).map(|i| (2.0 * i as f64 - m) / m).collect())
}

pub fn scan_to_csv(rows: &[ScanRow]) -> String {
    let mut out = String::from("c,kl,mu_sq\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_float(r.c),
            fmt_float(r.kl),
            fmt_float(r.mu_sq)
        ));
    }
    out
}

fn check_window(len: usize, window: usize) -> Result<usize> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "window must be odd and at least 3, got {window}"
        )));
    }
    if window > len {
        return Err(Error::Config(format!(
            "window {window} exceeds table length {len}"
        )));
    }
    Ok(window / 2)
}

/// Indices `i` whose value is strictly below every other value in the
/// centred window. Points closer than half a window to either end are never
/// reported.
pub fn local_minima_indices(values: &[f64], window: usize) -> Result<Vec<usize>> {
    let h = check_window(values.len(), window)?;
    Ok((h..values.len() - h)
        .filter(|&i| {
            (i - h..=i + h)
                .filter(|&j| j != i)
                .all(|j| values[i] < values[j])
        })
        .collect())
}

/// The `c` values of local minima of `column` over a table sorted by `c`.
pub fn find_local_minima(
    rows: &[ScanRow],
    column: impl Fn(&ScanRow) -> f64,
    window: usize,
) -> Result<Vec<f64>> {
    if rows.windows(2).any(|w| !(w[0].c < w[1].c)) {
        return Err(Error::Config(
            "scan table must be strictly increasing in c".into(),
        ));
    }
    let values: Vec<f64> = rows.iter().map(column).collect();
    Ok(local_minima_indices(&values, window)?
        .into_iter()
        .map(|i| rows[i].c)
        .collect())
}

/// Whether `values` is strictly monotone (either direction) on `lo..=hi`.
fn strictly_monotone(values: &[f64], lo: usize, hi: usize) -> bool {
    let diffs: Vec<f64> = (lo..hi).map(|i| values[i + 1] - values[i]).collect();
    diffs.iter().all(|d| *d > 0.0) || diffs.iter().all(|d| *d < 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimaReport {
    pub mu_sq_minima: Vec<f64>,
    pub kl_minima: Vec<f64>,
    /// `mu_sq` minima at which `kl` is strictly monotone across the window.
    pub counterexamples: Vec<f64>,
    pub window: usize,
}

impl MinimaReport {
    /// At least two `mu_sq` minima, one of them a point where `kl` has none.
    pub fn is_counterexample(&self) -> bool {
        self.mu_sq_minima.len() >= 2 && !self.counterexamples.is_empty()
    }
}

pub fn analyze_scan(rows: &[ScanRow], window: usize) -> Result<MinimaReport> {
    let kl: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    let mu_sq: Vec<f64> = rows.iter().map(|r| r.mu_sq).collect();
    let h = check_window(rows.len(), window)?;
    let mu_idx = local_minima_indices(&mu_sq, window)?;
    let counterexamples = mu_idx
        .iter()
        .filter(|&&i| strictly_monotone(&kl, i - h, i + h))
        .map(|&i| rows[i].c)
        .collect();
    Ok(MinimaReport {
        mu_sq_minima: mu_idx.iter().map(|&i| rows[i].c).collect(),
        kl_minima: find_local_minima(rows, |r| r.kl, window)?,
        counterexamples,
        window,
    })
}

/// `0.3 N(−0.8, 0.1²) + 0.4 N(0, 0.1²) + 0.3 N(0.8, 0.1²)`.
pub fn trimodal_reference() -> GaussianMixture {
    GaussianMixture::new(vec![0.3, 0.4, 0.3], vec![-0.8, 0.0, 0.8], vec![0.1; 3])
        .expect("fixed mixture is valid")
}

/// `⅓ Σ N(uᵢ, 0.05²)` with `uᵢ ~ U(−1, 1)` drawn from `seed`.
pub fn random_mu(seed: u64) -> GaussianMixture {
    let mut r = rng::stream(seed, "gaussian.mu", 0);
    let means = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    GaussianMixture::new(vec![1.0 / 3.0; 3], means, vec![MU_STD; 3]).expect("valid mixture")
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub seed: u64,
    pub mu: GaussianMixture,
    pub report: MinimaReport,
}

/// Scans `seeds` in order and returns the first whose `μ` yields a
/// counterexample, or `None`.
pub fn search_counterexample(
    seeds: impl IntoIterator<Item = u64>,
    n: usize,
    grid_points: usize,
    window: usize,
) -> Result<Option<SearchResult>> {
    let reference = trimodal_reference();
    let grid = symmetric_grid(grid_points)?;
    for seed in seeds {
        let mu = random_mu(seed);
        let rows = scan_shift(&reference, &mu, &grid, n, seed)?;
        let report = analyze_scan(&rows, window)?;
        if report.is_counterexample() {
            return Ok(Some(SearchResult { seed, mu, report }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_peak() {
        let m = GaussianMixture::normal(0.0, 1.0).unwrap();
        assert!((mixture_pdf(&m, 0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn trimodal_reference_at_zero() {
        // 0.4 · φ(0)/0.1 plus two components 8 standard deviations out.
        let outer = 0.3 * (-32.0f64).exp() / (0.1 * (2.0 * std::f64::consts::PI).sqrt());
        let expected = 0.4 * 3.989_422_804_014_327 + 2.0 * outer;
        assert!((mixture_pdf(&trimodal_reference(), 0.0) - expected).abs() < 1e-13);
    }

    #[test]
    fn symmetric_mixture_pdf() {
        let m = GaussianMixture::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.3, 0.3]).unwrap();
        for x in [0.1, 0.7, 2.5] {
            assert_eq!(m.pdf(x), m.pdf(-x));
        }
    }

    #[test]
    fn invalid_mixtures() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn degenerate_sampling() {
        let m = GaussianMixture::normal(5.0, 1e-9).unwrap();
        let xs = sample_mixture(&m, 100, 3).unwrap();
        assert!(xs.iter().all(|x| (x - 5.0).abs() < 1e-7));
    }

    #[test]
    fn seeds_give_different_sequences() {
        let m = trimodal_reference();
        assert_ne!(
            sample_mixture(&m, 10, 1).unwrap(),
            sample_mixture(&m, 10, 2).unwrap()
        );
        assert_eq!(
            sample_mixture(&m, 10, 1).unwrap(),
            sample_mixture(&m, 10, 1).unwrap()
        );
    }

    #[test]
    fn sample_mean_of_symmetric_reference() {
        let xs = sample_mixture(&trimodal_reference(), 2000, 11).unwrap();
        let e = mean_and_se(xs.iter().copied());
        assert!(e.mean.abs() < 3.0 * e.std_err, "{e:?}");
    }

    #[test]
    fn exact_zero_at_no_shift() {
        let reference = trimodal_reference();
        let theta = ShiftPolicy::new(reference.clone(), 0.0);
        assert_eq!(estimate_kl(&theta, &reference, 500, 4).unwrap(), 0.0);
        assert_eq!(
            estimate_mu_sq(&theta, &reference, &random_mu(4), 500, 4).unwrap(),
            0.0
        );
        let rows = scan_shift(&reference, &random_mu(4), &[0.0], 500, 4).unwrap();
        assert_eq!(
            rows,
            vec![ScanRow {
                c: 0.0,
                kl: 0.0,
                mu_sq: 0.0
            }]
        );
    }

    #[test]
    fn single_gaussian_closed_forms() {
        let sigma = 0.5;
        let c = 0.3;
        let base = GaussianMixture::normal(0.0, sigma).unwrap();
        let theta = ShiftPolicy::new(base.clone(), c);

        let kl = estimate_kl_with_error(&theta, &base, 4000, 8).unwrap();
        let exact_kl = c * c / (2.0 * sigma * sigma);
        assert!(
            (kl.mean - exact_kl).abs() < 4.0 * kl.std_err,
            "{kl:?} vs {exact_kl}"
        );

        let sq = estimate_mu_sq_with_error(&theta, &base, &base, 4000, 8).unwrap();
        let exact_sq = c * c / (sigma * sigma);
        assert!(
            (sq.mean - exact_sq).abs() < 4.0 * sq.std_err,
            "{sq:?} vs {exact_sq}"
        );
    }

    #[test]
    fn kl_positive_away_from_zero() {
        let reference = trimodal_reference();
        for c in [-0.5, -0.1, 0.1, 0.5] {
            let theta = ShiftPolicy::new(reference.clone(), c);
            let e = estimate_kl_with_error(&theta, &reference, 2000, 1).unwrap();
            assert!(e.mean > 4.0 * e.std_err, "c={c}: {e:?}");
        }
    }

    #[test]
    fn grid_contains_exact_zero() {
        let g = symmetric_grid(401).unwrap();
        assert_eq!((g[0], g[200], g[400]), (-1.0, 0.0, 1.0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn minima_detection() {
        let rows = |vals: &[f64]| -> Vec<ScanRow> {
            vals.iter()
                .enumerate()
                .map(|(i, &v)| ScanRow {
                    c: i as f64,
                    kl: v,
                    mu_sq: v,
                })
                .collect()
        };
        let v = rows(&[4.0, 3.0, 2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(find_local_minima(&v, |r| r.mu_sq, 5).unwrap(), vec![4.0]);
        let inc = rows(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(find_local_minima(&inc, |r| r.mu_sq, 3).unwrap().is_empty());
        let flat = rows(&[1.0, 0.0, 0.0, 1.0]);
        assert!(find_local_minima(&flat, |r| r.mu_sq, 3).unwrap().is_empty());
        assert!(find_local_minima(&inc, |r| r.mu_sq, 7).is_err());
        assert!(find_local_minima(&inc, |r| r.mu_sq, 4).is_err());
    }
}
