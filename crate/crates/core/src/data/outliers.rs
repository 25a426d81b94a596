use std::collections::BTreeMap;

use super::panel::FeaturePanel;
use crate::error::{Error, Result};

pub const DEFAULT_IQR_MULTIPLIER: f64 = 7.5;

/// Interquartile-range clipping thresholds for one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierBounds {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower: f64,
    pub upper: f64,
    pub multiplier: f64,
}

impl OutlierBounds {
    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    pub fn is_outlier(&self, v: f64) -> bool {
        v < self.lower || v > self.upper
    }
}

/// Quantile of already-sorted data, linear interpolation between order
/// statistics at position `p * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn compute_outlier_bounds(series: &[f64], multiplier: f64) -> Result<OutlierBounds> {
    if series.is_empty() {
        return Err(Error::Empty("outlier bounds need a non-empty series".into()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Ok(OutlierBounds {
        q1,
        q3,
        iqr,
        lower: q1 - multiplier * iqr,
        upper: q3 + multiplier * iqr,
        multiplier,
    })
}

/// Per-feature summary of one cleaning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCleanStats {
    pub bounds: OutlierBounds,
    pub clipped: usize,
    pub mean_before: f64,
    pub std_before: f64,
    pub mean_after: f64,
    pub std_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanReport {
    pub features: BTreeMap<String, FeatureCleanStats>,
}

impl CleanReport {
    pub fn total_clipped(&self) -> usize {
        self.features.values().map(|s| s.clipped).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,lower,upper,clipped,mean_before,std_before,mean_after,std_after\n");
        for (name, f) in &self.features {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{}\n",
                f.bounds.lower, f.bounds.upper, f.clipped, f.mean_before, f.std_before, f.mean_after, f.std_after
            ));
        }
        s
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Clips every observed dynamic feature and every target to its pooled
/// (all counties, all dates) IQR bounds. Static covariates are untouched.
pub fn clean_outliers(panel: &FeaturePanel, multiplier: f64) -> Result<(FeaturePanel, CleanReport)> {
    panel.validate()?;
    let mut out = panel.clone();
    let mut report = CleanReport::default();
    for (cube, names) in [
        (&mut out.dynamic, &panel.observed_names),
        (&mut out.targets, &panel.target_names),
    ] {
        for (f, name) in names.iter().enumerate() {
            let before = cube.feature_values(f);
            let bounds = compute_outlier_bounds(&before, multiplier)?;
            let clipped = before.iter().filter(|&&v| bounds.is_outlier(v)).count();
            cube.map_feature(f, |v| bounds.clip(v));
            let after = cube.feature_values(f);
            let (mean_before, std_before) = mean_std(&before);
            let (mean_after, std_after) = mean_std(&after);
            report.features.insert(
                name.clone(),
                FeatureCleanStats {
                    bounds,
                    clipped,
                    mean_before,
                    std_before,
                    mean_after,
                    std_after,
                },
            );
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::tests::tiny_panel;
    use proptest::prelude::*;

    /// Independent quantile: rank-based interpolation written from the
    /// definition h = (n-1)p, x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
    fn oracle_quantile(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        // insertion sort, deliberately not the library sort
        for i in 1..v.len() {
            let mut j = i;
            while j > 0 && v[j - 1] > v[j] {
                v.swap(j - 1, j);
                j -= 1;
            }
        }
        let h = (v.len() as f64 - 1.0) * p;
        let k = h as usize;
        if k + 1 >= v.len() {
            return v[v.len() - 1];
        }
        v[k] + (h - k as f64) * (v[k + 1] - v[k])
    }

    #[test]
    fn constant_series_has_zero_spread() {
        let b = compute_outlier_bounds(&[5.0; 4], 7.5).unwrap();
        assert_eq!((b.iqr, b.lower, b.upper), (0.0, 5.0, 5.0));
    }

    #[test]
    fn ramp_matches_oracle() {
        let series: Vec<f64> = (0..100).map(f64::from).collect();
        let b = compute_outlier_bounds(&series, 7.5).unwrap();
        // oracle: h = 99/4 = 24.75 -> 24.75, h = 74.25 -> 74.25
        let (q1, q3) = (oracle_quantile(&series, 0.25), oracle_quantile(&series, 0.75));
        assert_eq!((q1, q3), (24.75, 74.25));
        assert_eq!(b.q1, q1);
        assert_eq!(b.q3, q3);
        assert_eq!(b.lower, 24.75 - 7.5 * 49.5);
        assert_eq!(b.upper, 74.25 + 7.5 * 49.5);
    }

    #[test]
    fn spike_series_matches_oracle() {
        let series = [1.0, 2.0, 3.0, 1000.0];
        let b = compute_outlier_bounds(&series, 7.5).unwrap();
        // oracle: q1 at h=0.75 -> 1.75, q3 at h=2.25 -> 3 + 0.25*997 = 252.25
        assert_eq!(oracle_quantile(&series, 0.25), 1.75);
        assert_eq!(oracle_quantile(&series, 0.75), 252.25);
        assert_eq!(b.upper, 252.25 + 7.5 * 250.5);
        assert!(!b.is_outlier(1000.0));
        let tight = compute_outlier_bounds(&series, 0.5).unwrap();
        assert!(tight.is_outlier(1000.0));
    }

    #[test]
    fn empty_series_is_an_error() {
        assert!(compute_outlier_bounds(&[], 7.5).is_err());
    }

    #[test]
    fn clean_panel_without_outliers_is_fixed_point() {
        let p = tiny_panel(3, 20);
        let (q, report) = clean_outliers(&p, 7.5).unwrap();
        assert_eq!(p, q);
        assert_eq!(report.total_clipped(), 0);
    }

    #[test]
    fn injected_spike_is_clipped_to_upper() {
        let mut p = tiny_panel(3, 20);
        let b = compute_outlier_bounds(&p.dynamic.feature_values(1), 7.5).unwrap();
        p.dynamic.set(1, 4, 1, 10.0 * b.upper);
        let (q, report) = clean_outliers(&p, 7.5).unwrap();
        let stats = &report.features["mobility"];
        assert_eq!(stats.clipped, 1);
        assert_eq!(q.dynamic.get(1, 4, 1), stats.bounds.upper);
        assert!(stats.std_after <= stats.std_before);
    }

    proptest! {
        #[test]
        fn quantiles_match_oracle(values in prop::collection::vec(-1e3f64..1e3, 1..60), p in 0.0f64..=1.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let q = quantile_sorted(&sorted, p);
            prop_assert!((q - oracle_quantile(&values, p)).abs() <= 1e-9 * (1.0 + q.abs()));
        }

        #[test]
        fn cleaning_is_idempotent_and_contracts(seed in 0u64..500, spike in 1.0f64..1e6) {
            let mut p = tiny_panel(4, 15);
            p.dynamic.set((seed % 4) as usize, (seed % 15) as usize, 0, spike * 1e3);
            p.targets.set(((seed + 1) % 4) as usize, 3, 0, -spike);
            let (once, r1) = clean_outliers(&p, 1.5).unwrap();
            let (twice, _) = clean_outliers(&once, 1.5).unwrap();
            prop_assert_eq!(&once, &twice);
            for s in r1.features.values() {
                prop_assert!(s.std_after <= s.std_before + 1e-12);
            }
        }
    }
}
