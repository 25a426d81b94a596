use chrono::NaiveDate;

use super::panel::{Cube, FeaturePanel};
use crate::error::{Error, Result};

/// Min and max of one feature over the fitting range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        MinMax { min, max }
    }

    pub fn scale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (v - self.min) / span
        } else {
            0.0
        }
    }

    pub fn unscale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            v * span + self.min
        } else {
            self.min
        }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-feature min-max scaling fitted on one date range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerState {
    pub observed: Vec<(String, MinMax)>,
    pub statics: Vec<(String, MinMax)>,
    pub targets: Vec<(String, MinMax)>,
    /// Human-readable description of the fitting range.
    pub fitted_on: String,
}

pub fn fit_scaler(panel: &FeaturePanel, start: NaiveDate, end: NaiveDate) -> Result<ScalerState> {
    let fit = panel
        .slice_dates(start, end)
        .map_err(|_| Error::Empty(format!("scaler fit range {start}..{end} selects no dates")))?;
    let cube_stats = |cube: &Cube, names: &[String]| {
        names
            .iter()
            .enumerate()
            .map(|(f, n)| (n.clone(), MinMax::fit(cube.feature_values(f).into_iter())))
            .collect::<Vec<_>>()
    };
    let ns = panel.static_names.len();
    let statics = panel
        .static_names
        .iter()
        .enumerate()
        .map(|(f, n)| {
            (
                n.clone(),
                MinMax::fit(panel.statics.iter().skip(f).step_by(ns).copied()),
            )
        })
        .collect();
    Ok(ScalerState {
        observed: cube_stats(&fit.dynamic, &fit.observed_names),
        statics,
        targets: cube_stats(&fit.targets, &fit.target_names),
        fitted_on: format!("{}..{}", fit.dates[0], fit.dates.last().unwrap()),
    })
}

impl ScalerState {
    fn check_names(&self, panel: &FeaturePanel) -> Result<()> {
        let same = |stats: &[(String, MinMax)], names: &[String]| {
            stats.len() == names.len() && stats.iter().zip(names).all(|((a, _), b)| a == b)
        };
        if !same(&self.observed, &panel.observed_names)
            || !same(&self.statics, &panel.static_names)
            || !same(&self.targets, &panel.target_names)
        {
            return Err(Error::InvalidArgument(
                "scaler was fitted on a different feature set".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, panel: &FeaturePanel) -> Result<FeaturePanel> {
        self.transform(panel, MinMax::scale)
    }

    pub fn invert(&self, panel: &FeaturePanel) -> Result<FeaturePanel> {
        self.transform(panel, MinMax::unscale)
    }

    fn transform(&self, panel: &FeaturePanel, op: fn(&MinMax, f64) -> f64) -> Result<FeaturePanel> {
        self.check_names(panel)?;
        let mut out = panel.clone();
        for (f, (_, mm)) in self.observed.iter().enumerate() {
            out.dynamic.map_feature(f, |v| op(mm, v));
        }
        for (f, (_, mm)) in self.targets.iter().enumerate() {
            out.targets.map_feature(f, |v| op(mm, v));
        }
        let ns = self.statics.len();
        for (i, v) in out.statics.iter_mut().enumerate() {
            *v = op(&self.statics[i % ns].1, *v);
        }
        Ok(out)
    }

    pub fn target(&self, f: usize) -> &MinMax {
        &self.targets[f].1
    }
}

/// Convenience wrapper matching the free-function style of the pipeline.
pub fn apply_scaler(panel: &FeaturePanel, state: &ScalerState) -> Result<FeaturePanel> {
    state.apply(panel)
}
