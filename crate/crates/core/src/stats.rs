//! Summary statistics for comparing runs: variance summaries, reduction
//! percentages, Mann-Whitney U, Levene's test and learning-curve gains.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

use crate::error::{Error, Result};

/// Largest sample size per group for which Mann-Whitney p-values are exact.
pub const EXACT_MWU_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub median_var: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub max_var: f64,
    pub cv: f64,
}

/// Linear-interpolation quantile on sorted data, inclusive method
/// (position `p (n - 1)`).
pub fn quantile_inclusive(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median, quartiles, IQR, max and coefficient of variation (population std
/// over mean) of per-checkpoint variances.
pub fn variance_stats(variances: &[f64]) -> Result<VarianceStats> {
    if variances.is_empty() {
        return Err(Error::invalid_input("variance list is empty"));
    }
    if variances.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("variances must be finite"));
    }
    let mut sorted = variances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let q1 = quantile_inclusive(&sorted, 0.25);
    let q3 = quantile_inclusive(&sorted, 0.75);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let cv = if mean == 0.0 { 0.0 } else { std / mean.abs() };
    Ok(VarianceStats {
        median_var: median,
        q1,
        q3,
        iqr: q3 - q1,
        max_var: sorted[n - 1],
        cv,
    })
}

/// `100 (1 - test / baseline)`.
pub fn reduction_pct(test_metric: f64, baseline_metric: f64) -> Result<f64> {
    if baseline_metric == 0.0 {
        return Err(Error::invalid_input("baseline metric is zero"));
    }
    Ok(100.0 * (1.0 - test_metric / baseline_metric))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of `values`, and the tie term `sum (t^3 - t)`.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// Calls `visit` with every size-`k` subset of `0..n`.
fn for_each_combination(n: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for i in start..=(n - (k - cur.len())) {
            cur.push(i);
            rec(i + 1, n, k, cur, visit);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), visit);
}

/// Two-sided Mann-Whitney U test. Exact by enumerating every assignment of
/// the pooled mid-ranks when both samples have at most [`EXACT_MWU_MAX`]
/// elements; otherwise a normal approximation with tie and continuity
/// corrections.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid_input("both samples must be nonempty"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::invalid_input("samples contain NaN"));
    }
    if x.len() <= EXACT_MWU_MAX && y.len() <= EXACT_MWU_MAX {
        Ok(mann_whitney_exact(x, y))
    } else {
        mann_whitney_normal(x, y)
    }
}

fn u_statistic(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, f64) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, tie_term) = mid_ranks(&pooled);
    let n1 = x.len() as f64;
    let r1: f64 = ranks[..x.len()].iter().sum();
    (r1 - n1 * (n1 + 1.0) / 2.0, ranks, tie_term)
}

/// Exact two-sided p-value: the share of rank assignments whose U is at
/// least as far from `n1 n2 / 2` as the observed one.
pub fn mann_whitney_exact(x: &[f64], y: &[f64]) -> MannWhitney {
    let (u, ranks, _) = u_statistic(x, y);
    let (n1, n2) = (x.len(), y.len());
    let center = (n1 * n2) as f64 / 2.0;
    let observed = (u - center).abs();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let (mut extreme, mut total) = (0u64, 0u64);
    // tolerance guards float sums of half-integer mid-ranks
    let eps = 1e-9;
    for_each_combination(n1 + n2, n1, &mut |subset| {
        let r: f64 = subset.iter().map(|&i| ranks[i]).sum();
        if (r - offset - center).abs() >= observed - eps {
            extreme += 1;
        }
        total += 1;
    });
    MannWhitney {
        u,
        p: (extreme as f64 / total as f64).min(1.0),
        exact: true,
    }
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn mann_whitney_normal(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    let (u, _, tie_term) = u_statistic(x, y);
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let n = n1 + n2;
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0, exact: false });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::NumericFailure(e.to_string()))?;
    Ok(MannWhitney {
        u,
        p: (2.0 * (1.0 - normal.cdf(z))).min(1.0),
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Levene {
    pub f: f64,
    pub p: f64,
}

/// Mean-centered Levene test: one-way ANOVA on `|x_ij - mean_j|`.
pub fn levene_test(groups: &[Vec<f64>]) -> Result<Levene> {
    if groups.len() < 2 {
        return Err(Error::invalid_input("Levene's test needs at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid_input("every group needs at least two samples"));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("samples must be finite"));
    }
    let deviations: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|x| (x - m).abs()).collect()
        })
        .collect();
    let k = groups.len() as f64;
    let n: f64 = groups.iter().map(|g| g.len() as f64).sum();
    let group_means: Vec<f64> = deviations.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
    let grand = deviations.iter().flatten().sum::<f64>() / n;
    let between: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(d, m)| d.len() as f64 * (m - grand) * (m - grand))
        .sum();
    let within: f64 = deviations
        .iter()
        .zip(&group_means)
        .map(|(d, m)| d.iter().map(|z| (z - m) * (z - m)).sum::<f64>())
        .sum();
    let df1 = k - 1.0;
    let df2 = n - k;
    if within == 0.0 {
        // no spread inside any group: either identical groups or a perfect split
        return Ok(if between == 0.0 {
            Levene { f: 0.0, p: 1.0 }
        } else {
            Levene { f: f64::INFINITY, p: 0.0 }
        });
    }
    let f = (between / df1) / (within / df2);
    let dist = FisherSnedecor::new(df1, df2).map_err(|e| Error::NumericFailure(e.to_string()))?;
    Ok(Levene { f, p: dist.sf(f) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub peak_gain_pct: f64,
    pub auc_gain_pct: f64,
    pub early_gain: f64,
}

/// Trapezoid area under `values` over unit-spaced checkpoints.
pub fn trapezoid_auc(values: &[f64]) -> f64 {
    values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum()
}

/// Peak, AUC and early gains of `test` over `baseline`, with "early" the
/// first `early_fraction` of checkpoints (at least one).
pub fn curve_metrics_with(test: &[f64], baseline: &[f64], early_fraction: f64) -> Result<CurveMetrics> {
    if test.len() != baseline.len() || test.is_empty() {
        return Err(Error::invalid_input("curves must share a nonempty checkpoint grid"));
    }
    if !(early_fraction > 0.0 && early_fraction <= 1.0) {
        return Err(Error::invalid_input("early fraction must lie in (0, 1]"));
    }
    let peak = |c: &[f64]| c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gain = |t: f64, b: f64| {
        if b == 0.0 {
            if t == b {
                0.0
            } else {
                f64::INFINITY.copysign(t - b)
            }
        } else {
            100.0 * (t - b) / b.abs()
        }
    };
    let (auc_t, auc_b) = if test.len() == 1 {
        (test[0], baseline[0])
    } else {
        (trapezoid_auc(test), trapezoid_auc(baseline))
    };
    let n_early = ((test.len() as f64 * early_fraction).ceil() as usize).clamp(1, test.len());
    let early_gain = test[..n_early].iter().zip(&baseline[..n_early]).map(|(t, b)| t - b).sum::<f64>() / n_early as f64;
    Ok(CurveMetrics {
        peak_gain_pct: gain(peak(test), peak(baseline)),
        auc_gain_pct: gain(auc_t, auc_b),
        early_gain,
    })
}

/// [`curve_metrics_with`] using the first quarter of checkpoints as "early".
pub fn curve_metrics(test: &[f64], baseline: &[f64]) -> Result<CurveMetrics> {
    curve_metrics_with(test, baseline, 0.25)
}

/// First index at which `curve` reaches `fraction` of its final value, for
/// curves whose final value is positive.
pub fn steps_to_fraction_of_final(curve: &[f64], fraction: f64) -> Option<usize> {
    let last = *curve.last()?;
    if last <= 0.0 {
        return None;
    }
    curve.iter().position(|v| *v >= fraction * last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_one_to_four() {
        let s = variance_stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median_var, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
        assert_eq!(s.iqr, 1.5);
        assert_eq!(s.max_var, 4.0);
    }

    #[test]
    fn constant_and_singleton_lists() {
        let s = variance_stats(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.iqr, s.cv, s.median_var, s.max_var), (0.0, 0.0, 2.0, 2.0));
        let s = variance_stats(&[7.0]).unwrap();
        assert_eq!((s.median_var, s.max_var, s.iqr), (7.0, 7.0, 0.0));
        assert!(variance_stats(&[]).is_err());
    }

    #[test]
    fn reduction_formula() {
        assert_eq!(reduction_pct(3.0, 3.0).unwrap(), 0.0);
        assert!((reduction_pct(8.78e-6, 1.26e-5).unwrap() - 30.3).abs() < 0.1);
        assert!(reduction_pct(1.0, 0.0).is_err());
    }

    #[test]
    fn mid_ranks_with_ties() {
        let (r, t) = mid_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, 6.0);
    }

    #[test]
    fn mwu_small_cases() {
        let m = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.u, 0.0);
        assert!((m.p - 0.1).abs() < 1e-15);
        assert!(m.exact);
        let same = mann_whitney_u(&[1.0, 5.0, 2.0], &[2.0, 1.0, 5.0]).unwrap();
        assert_eq!(same.u, 4.5);
        assert_eq!(same.p, 1.0);
        let ties = mann_whitney_u(&[3.0; 10], &[3.0; 12]).unwrap();
        assert_eq!(ties.u, 60.0);
        assert_eq!(ties.p, 1.0);
    }

    #[test]
    fn levene_cases() {
        let g = vec![vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]];
        let l = levene_test(&g).unwrap();
        assert!(l.f.abs() < 1e-12);
        assert!((l.p - 1.0).abs() < 1e-12);
        let l = levene_test(&[vec![0.0; 4], vec![-10.0, 10.0, -10.0, 10.0]]).unwrap();
        assert!(l.f > 100.0 && l.p < 0.01);
        assert!(levene_test(&[vec![1.0, 2.0]]).is_err());
        assert!(levene_test(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn curve_cases() {
        let base = [10.0, 20.0, 50.0, 40.0];
        let m = curve_metrics(&base, &base).unwrap();
        assert_eq!((m.peak_gain_pct, m.auc_gain_pct, m.early_gain), (0.0, 0.0, 0.0));
        let shifted: Vec<f64> = base.iter().map(|v| v + 10.0).collect();
        let m = curve_metrics(&shifted, &base).unwrap();
        assert!((m.peak_gain_pct - 20.0).abs() < 1e-12);
        assert!((m.early_gain - 10.0).abs() < 1e-12);
        assert_eq!(trapezoid_auc(&[0.0, 2.0, 2.0, 0.0]), 4.0);
        assert!(curve_metrics(&base, &base[..3]).is_err());
        assert_eq!(steps_to_fraction_of_final(&[0.0, 50.0, 95.0, 100.0], 0.9), Some(2));
    }
}
