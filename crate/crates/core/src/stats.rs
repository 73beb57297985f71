//! Distribution and smoothness statistics for trajectory series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{differentiate, smooth};

/// Default moving-average window for filtered jerk (2.5 s at 0.1 s).
pub const DEFAULT_JERK_WINDOW: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population standard deviation (divisor `n`).
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
}

impl KdeConfig {
    pub fn new(bandwidth: f64, grid: Vec<f64>) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("KDE bandwidth must be positive, got {bandwidth}")));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("KDE grid must be strictly increasing"));
        }
        Ok(Self { bandwidth, grid })
    }

    /// Silverman bandwidth with a grid spanning the data plus three bandwidths each side.
    pub fn silverman(series: &[f64], points: usize) -> Result<Self> {
        let h = silverman_bandwidth(series)?;
        let st = summarize(series)?;
        let (lo, hi) = (st.min - 3.0 * h, st.max + 3.0 * h);
        let points = points.max(2);
        let grid = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        Self::new(h, grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JerkProfile {
    pub raw: Vec<f64>,
    pub filtered: Vec<f64>,
    /// Trapezoidal integral of the squared raw jerk.
    pub jsi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcfResult {
    pub lags: Vec<usize>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    /// Pooled, sorted, de-duplicated support.
    pub support: Vec<f64>,
    pub cdf_a: Vec<f64>,
    pub cdf_b: Vec<f64>,
    pub statistic: f64,
}

fn sorted(series: &[f64]) -> Result<Vec<f64>> {
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let mut v = series.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Quantile by linear interpolation between order statistics at rank `(n - 1) p`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

pub fn summarize(series: &[f64]) -> Result<SummaryStats> {
    if series.is_empty() {
        return Err(Error::invalid("cannot summarize an empty series"));
    }
    let v = sorted(series)?;
    let n = v.len();
    // Sum in sorted order so the result does not depend on input order.
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    Ok(SummaryStats {
        n,
        max: v[n - 1],
        min: v[0],
        mean,
        std: var.sqrt(),
        q1,
        median: quantile_sorted(&v, 0.5),
        q3,
        iqr: q3 - q1,
    })
}

/// Box-plot outlier fences `[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`.
pub fn outlier_fences(stats: &SummaryStats) -> (f64, f64) {
    (stats.q1 - 1.5 * stats.iqr, stats.q3 + 1.5 * stats.iqr)
}

/// Fraction of points outside the fences.
pub fn outlier_fraction(series: &[f64]) -> Result<f64> {
    let (lo, hi) = outlier_fences(&summarize(series)?);
    let out = series.iter().filter(|&&x| x < lo || x > hi).count();
    Ok(out as f64 / series.len() as f64)
}

/// Silverman's rule of thumb, `0.9 min(sigma, IQR / 1.34) n^(-1/5)`.
pub fn silverman_bandwidth(series: &[f64]) -> Result<f64> {
    let st = summarize(series)?;
    let spread = if st.iqr > 0.0 { st.std.min(st.iqr / 1.34) } else { st.std };
    if !(spread > 0.0) {
        return Err(Error::invalid("series has zero spread; bandwidth undefined"));
    }
    Ok(0.9 * spread * (st.n as f64).powf(-0.2))
}

/// Gaussian-kernel density estimate at each grid point.
pub fn kde(series: &[f64], config: &KdeConfig) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return Err(Error::invalid("KDE needs at least 2 samples"));
    }
    let h = config.bandwidth;
    if !(h > 0.0) {
        return Err(Error::invalid(format!("KDE bandwidth must be positive, got {h}")));
    }
    let norm = 1.0 / (series.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(config
        .grid
        .iter()
        .map(|&x| {
            series
                .iter()
                .map(|&xi| {
                    let u = (x - xi) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Right-continuous empirical CDFs on the pooled support plus the two-sample KS distance.
pub fn ecdf_and_ks(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS statistic needs two non-empty samples"));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let mut support: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    support.sort_by(f64::total_cmp);
    support.dedup();

    let ecdf = |s: &[f64]| -> Vec<f64> {
        let n = s.len() as f64;
        let mut k = 0;
        support
            .iter()
            .map(|&x| {
                while k < s.len() && s[k] <= x {
                    k += 1;
                }
                k as f64 / n
            })
            .collect()
    };
    let cdf_a = ecdf(&sa);
    let cdf_b = ecdf(&sb);
    let statistic = cdf_a
        .iter()
        .zip(&cdf_b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(KsResult {
        support,
        cdf_a,
        cdf_b,
        statistic,
    })
}

/// Trapezoidal integral of uniformly sampled values.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Jerk by backward differences of acceleration, its moving-average filtered
/// version, and the jerk-squared integral of the raw jerk.
pub fn jerk(accel: &[f64], dt: f64, filter_window: usize) -> Result<JerkProfile> {
    let raw = differentiate(accel, dt)?;
    let filtered = smooth(&raw, filter_window)?;
    let squared: Vec<f64> = raw.iter().map(|j| j * j).collect();
    let jsi = trapezoid(&squared, dt);
    Ok(JerkProfile { raw, filtered, jsi })
}

/// Autocorrelation with the global mean and the biased (divide-by-`n`) estimator.
pub fn acf(series: &[f64], max_lag: usize) -> Result<AcfResult> {
    let n = series.len();
    if max_lag >= n {
        return Err(Error::invalid(format!(
            "max lag {max_lag} must be shorter than the series ({n})"
        )));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::invalid("series has zero variance; autocorrelation undefined"));
    }
    let mut rho = Vec::with_capacity(max_lag + 1);
    rho.push(1.0);
    for k in 1..=max_lag {
        let c: f64 = centered[..n - k]
            .iter()
            .zip(&centered[k..])
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / n as f64;
        rho.push(c / var);
    }
    Ok(AcfResult {
        lags: (0..=max_lag).collect(),
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn summarize_small_case() {
        let st = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(st.mean, 3.0);
        assert_eq!(st.median, 3.0);
        assert!((st.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((st.q1, st.q3, st.iqr), (2.0, 4.0, 2.0));
        assert_eq!((st.min, st.max, st.n), (1.0, 5.0, 5));
    }

    #[test]
    fn summarize_constant_and_empty() {
        let st = summarize(&[2.5; 7]).unwrap();
        assert_eq!((st.std, st.iqr), (0.0, 0.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn fences_direct_and_degenerate() {
        let mut st = summarize(&[0.0, 4.0]).unwrap();
        st.q1 = 0.0;
        st.q3 = 4.0;
        st.iqr = 4.0;
        assert_eq!(outlier_fences(&st), (-6.0, 10.0));
        let st = summarize(&[1.0; 5]).unwrap();
        assert_eq!(outlier_fences(&st), (1.0, 1.0));
    }

    #[test]
    fn fences_monte_carlo() {
        // Gaussian tails beyond Q3 + 1.5 IQR carry 2 * (1 - Phi(2.698)) = 0.70 %.
        let frac = outlier_fraction(&normals(200_000, 11)).unwrap();
        assert!((frac - 0.0070).abs() < 0.005, "{frac}");
        // Uniform data never crosses the fences: they sit half a range outside the support.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..50_000).map(|_| rng.gen::<f64>()).collect();
        assert_eq!(outlier_fraction(&u).unwrap(), 0.0);
    }

    #[test]
    fn kde_normalization_and_symmetry() {
        let data = [-0.3, -0.1, 0.0, 0.05, 0.2, 0.4];
        let grid: Vec<f64> = (0..=4000).map(|i| -10.0 + 20.0 * i as f64 / 4000.0).collect();
        let cfg = KdeConfig::new(0.5, grid.clone()).unwrap();
        let f = kde(&data, &cfg).unwrap();
        assert!((trapezoid(&f, 20.0 / 4000.0) - 1.0).abs() < 1e-3);
        assert!(f.iter().all(|&y| y >= 0.0));

        let two: Vec<f64> = [-5.0, 5.0].into_iter().flat_map(|c| [c - 0.1, c, c + 0.1]).collect();
        let cfg = KdeConfig::new(0.2, vec![-5.0, 5.0]).unwrap();
        let f = kde(&two, &cfg).unwrap();
        assert!((f[0] - f[1]).abs() < 1e-6);
    }

    #[test]
    fn kde_recovers_normal_pdf() {
        let data = normals(1000, 3);
        let h = silverman_bandwidth(&data).unwrap();
        let grid: Vec<f64> = (0..=120).map(|i| -3.0 + 0.05 * i as f64).collect();
        let f = kde(&data, &KdeConfig::new(h, grid.clone()).unwrap()).unwrap();
        let worst = grid
            .iter()
            .zip(&f)
            .map(|(x, y)| (y - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn kde_rejects_bad_bandwidth() {
        assert!(KdeConfig::new(0.0, vec![0.0]).is_err());
        let cfg = KdeConfig { bandwidth: -1.0, grid: vec![0.0] };
        assert!(kde(&[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn ks_cases() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ecdf_and_ks(&a, &a).unwrap().statistic, 0.0);
        assert_eq!(ecdf_and_ks(&a, &[10.0, 11.0]).unwrap().statistic, 1.0);
        // Step functions differ only on [3, 4): F_a = 1, F_b = 2/3.
        let r = ecdf_and_ks(&a, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.support, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(ecdf_and_ks(&[], &a).is_err());
    }

    #[test]
    fn jerk_cases() {
        let p = jerk(&[0.7; 40], 0.1, 25).unwrap();
        assert!(p.raw.iter().all(|&j| j == 0.0));
        assert_eq!(p.jsi, 0.0);
        let p = jerk(&[0.0, 1.0], 0.1, 1).unwrap();
        assert!((p.raw[1] - 10.0).abs() < 1e-12);
        assert_eq!(p.raw.len(), p.filtered.len());
        assert!(jerk(&[0.0, 1.0, 2.0], 0.1, 2).is_err());
    }

    #[test]
    fn acf_cases() {
        let sine: Vec<f64> = (0..10_000).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 50.0).sin()).collect();
        let r = acf(&sine, 100).unwrap();
        assert_eq!(r.rho[0], 1.0);
        assert!((r.rho[50] - 1.0).abs() < 1e-2, "{}", r.rho[50]);
        assert!(acf(&sine, 10_000).is_err());

        let noise = normals(10_000, 21);
        let r = acf(&noise, 100).unwrap();
        assert!(r.rho[1..].iter().all(|x| x.abs() < 0.05));
    }

    proptest! {
        #[test]
        fn summarize_permutation_invariant(mut v in proptest::collection::vec(-100.0f64..100.0, 1..60), seed in 0u64..1000) {
            let a = summarize(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            v.shuffle(&mut rng);
            let b = summarize(&v).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.min <= a.q1 && a.q1 <= a.median && a.median <= a.q3 && a.q3 <= a.max);
        }

        #[test]
        fn ks_bounded_and_symmetric(
            a in proptest::collection::vec(-5.0f64..5.0, 1..40),
            b in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let ab = ecdf_and_ks(&a, &b).unwrap().statistic;
            let ba = ecdf_and_ks(&b, &a).unwrap().statistic;
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn acf_affine_invariant(v in proptest::collection::vec(-10.0f64..10.0, 30..120), alpha in 0.1f64..10.0, beta in -50.0f64..50.0) {
            prop_assume!(summarize(&v).unwrap().std > 1e-3);
            let w: Vec<f64> = v.iter().map(|x| alpha * x + beta).collect();
            let r1 = acf(&v, 20).unwrap();
            let r2 = acf(&w, 20).unwrap();
            for (x, y) in r1.rho.iter().zip(&r2.rho) {
                prop_assert!(x.abs() <= 1.0 + 1e-12);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn jsi_scales_quadratically(a in proptest::collection::vec(-3.0f64..3.0, 2..100), c in 0.1f64..10.0) {
            let base = jerk(&a, 0.1, 1).unwrap().jsi;
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            let s = jerk(&scaled, 0.1, 1).unwrap().jsi;
            prop_assert!((s - c * c * base).abs() <= 1e-9 * (c * c * base).max(1e-300));
        }
    }
}
