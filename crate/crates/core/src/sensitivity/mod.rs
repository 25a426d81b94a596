//! Spatio-temporal Morris sensitivity.
//!
//! A feature is shifted by `Δ` in scaled units everywhere it occurs, the
//! one-step-ahead forecast of every county and date in an evaluation range is
//! recomputed, and the absolute changes are summed into `G`. The normalized
//! index is `μ̂* = G / (C·T·Δ)`; multiplying by the raw standard deviation of
//! the feature gives the scaled index.

mod subgroup;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;

use crate::data::{make_windows, mean_std, DateRange, FeaturePanel, WindowBatch, WindowSpec};
use crate::error::{Error, Result};
use crate::model::Tft;

pub use subgroup::{subgroup_experiment, SubgroupConfig, SubgroupReport, SubgroupRow};

/// `(y(x + Δ·e_i) − y(x)) / Δ` for a scalar model.
pub fn elementary_effect(model: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, delta: f64) -> Result<f64> {
    if delta == 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "delta must be finite and non-zero, got {delta}"
        )));
    }
    if i >= x.len() {
        return Err(Error::InvalidArgument(format!(
            "feature index {i} out of range for {} inputs",
            x.len()
        )));
    }
    let y0 = model(x);
    let mut shifted = x.to_vec();
    shifted[i] += delta;
    let y1 = model(&shifted);
    if !y0.is_finite() || !y1.is_finite() {
        return Err(Error::NonFinite {
            layer: "model output".into(),
        });
    }
    Ok((y1 - y0) / delta)
}

/// A perturbable input column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRef {
    Observed(usize),
    Static(usize),
}

impl FeatureRef {
    /// Looks up an observed or static feature by name.
    pub fn resolve(panel: &FeaturePanel, name: &str) -> Result<Self> {
        if let Some(i) = panel.observed_index(name) {
            Ok(FeatureRef::Observed(i))
        } else if let Some(i) = panel.static_index(name) {
            Ok(FeatureRef::Static(i))
        } else {
            Err(Error::UnknownFeature(name.to_string()))
        }
    }
}

/// Copy of `panel` with `delta` added to every cell of `feature`.
pub fn perturb_panel(panel: &FeaturePanel, feature: FeatureRef, delta: f64) -> Result<FeaturePanel> {
    let mut out = panel.clone();
    match feature {
        FeatureRef::Observed(f) if f < panel.observed_names.len() => out.dynamic.map_feature(f, |v| v + delta),
        FeatureRef::Static(f) if f < panel.static_names.len() => {
            let k = panel.static_names.len();
            out.statics.iter_mut().skip(f).step_by(k).for_each(|v| *v += delta);
        }
        _ => return Err(Error::UnknownFeature(format!("{feature:?}"))),
    }
    Ok(out)
}

/// Copy of `batch` with `delta` added to every occurrence of `feature`.
///
/// Observed features live in the encoder inputs at the same index as in the
/// panel, so this equals windowing a [`perturb_panel`] copy.
pub fn perturb_batch(batch: &WindowBatch, feature: FeatureRef, delta: f64) -> Result<WindowBatch> {
    let mut out = batch.clone();
    let observed = batch.past_features - batch.target_features - crate::data::KNOWN_FEATURES.len();
    match feature {
        FeatureRef::Observed(f) if f < observed => out
            .past
            .iter_mut()
            .skip(f)
            .step_by(batch.past_features)
            .for_each(|v| *v += delta),
        FeatureRef::Static(f) if f < batch.static_features => out
            .statics
            .iter_mut()
            .skip(f)
            .step_by(batch.static_features)
            .for_each(|v| *v += delta),
        _ => return Err(Error::UnknownFeature(format!("{feature:?}"))),
    }
    Ok(out)
}

/// Which forecast columns enter `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorrisTarget {
    Column(usize),
    AllTargets,
}

/// Anything that yields one-step-ahead forecasts `[windows × targets]`.
pub trait OneStepModel: Sync {
    fn one_step(&self, batch: &WindowBatch) -> Result<Vec<f64>>;
}

impl OneStepModel for Tft {
    fn one_step(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let pred = self.predict(batch)?;
        let (h, k) = (batch.horizon, batch.target_features);
        Ok((0..batch.len())
            .flat_map(|w| pred[w * h * k..w * h * k + k].to_vec())
            .collect())
    }
}

/// `y = a·x_i` on every target, reading `x_i` from the last encoder day (or
/// the county's static value).
#[derive(Debug, Clone, Copy)]
pub struct LinearSurrogate {
    pub feature: FeatureRef,
    pub coeff: f64,
}

impl OneStepModel for LinearSurrogate {
    fn one_step(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.len() * batch.target_features);
        for w in 0..batch.len() {
            let x = match self.feature {
                FeatureRef::Observed(f) => batch.past_at(w, batch.past_len - 1, f),
                FeatureRef::Static(f) => batch.static_row(w)[f],
            };
            out.extend(std::iter::repeat_n(self.coeff * x, batch.target_features));
        }
        Ok(out)
    }
}

/// Ignores its inputs.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel(pub f64);

impl OneStepModel for ConstantModel {
    fn one_step(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        Ok(vec![self.0; batch.len() * batch.target_features])
    }
}

/// Windows whose one-step-ahead date lies in `range`: one per county and
/// date that has a full encoder history in `panel`.
///
/// Decoder inputs past the end of the panel are not needed for the first
/// forecast step, so the panel must only cover `horizon − 1` days beyond the
/// range; windows that would run past its end are dropped.
pub fn evaluation_windows(panel: &FeaturePanel, range: &DateRange, spec: &WindowSpec) -> Result<WindowBatch> {
    let first = panel.dates[0];
    let start = range
        .start
        .checked_sub_days(Days::new(spec.past_len as u64))
        .map_or(first, |d| d.max(first));
    let end = range
        .end
        .checked_add_days(Days::new(spec.horizon as u64 - 1))
        .unwrap_or(range.end);
    let sliced = panel.slice_dates(start, end)?;
    if sliced.num_days() < spec.total_len() {
        return Err(Error::Empty(format!(
            "no evaluation windows in {}..{}",
            range.start, range.end
        )));
    }
    let all = make_windows(&sliced, &WindowSpec { stride: 1, ..*spec })?;
    let keep: Vec<usize> = (0..all.len())
        .filter(|&w| range.contains(all.meta[w].forecast_start))
        .collect();
    if keep.is_empty() {
        return Err(Error::Empty(format!(
            "no evaluation windows in {}..{}",
            range.start, range.end
        )));
    }
    Ok(all.select(&keep))
}

/// Counties and dates spanned by a batch; errors unless it holds exactly one
/// window per `(county, date)` pair.
pub fn grid_dims(batch: &WindowBatch) -> Result<(usize, usize)> {
    let counties: BTreeSet<usize> = batch.meta.iter().map(|m| m.county).collect();
    let dates: BTreeSet<NaiveDate> = batch.meta.iter().map(|m| m.forecast_start).collect();
    let cells: BTreeSet<(usize, NaiveDate)> = batch.meta.iter().map(|m| (m.county, m.forecast_start)).collect();
    let (c, t) = (counties.len(), dates.len());
    if c == 0 || cells.len() != batch.len() || c * t != batch.len() {
        return Err(Error::Shape(format!(
            "{} windows do not form a complete county × date grid ({c} × {t})",
            batch.len()
        )));
    }
    Ok((c, t))
}

/// `Σ |Y_Δ − Y|` over the selected target columns.
pub fn total_change(base: &[f64], perturbed: &[f64], targets: usize, target: MorrisTarget) -> Result<f64> {
    if base.len() != perturbed.len() || targets == 0 || !base.len().is_multiple_of(targets) {
        return Err(Error::Shape("baseline and perturbed outputs differ in shape".into()));
    }
    if let MorrisTarget::Column(k) = target {
        if k >= targets {
            return Err(Error::InvalidArgument(format!("target column {k} out of range")));
        }
    }
    let mut g = 0.0;
    for (cell, (a, b)) in base.chunks(targets).zip(perturbed.chunks(targets)).enumerate() {
        let row = match target {
            MorrisTarget::Column(k) => (b[k] - a[k]).abs(),
            MorrisTarget::AllTargets => a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum(),
        };
        if !row.is_finite() {
            return Err(Error::NonFinite {
                layer: format!("forecast cell {cell}"),
            });
        }
        g += row;
    }
    Ok(g)
}

/// Population standard deviation of a raw feature over `range` (over
/// counties for static features).
pub fn feature_sigma(raw: &FeaturePanel, feature: FeatureRef, range: &DateRange) -> Result<f64> {
    let values = match feature {
        FeatureRef::Observed(f) => raw.slice_dates(range.start, range.end)?.dynamic.feature_values(f),
        FeatureRef::Static(f) => (0..raw.num_counties()).map(|c| raw.static_value(c, f)).collect(),
    };
    Ok(mean_std(&values).1)
}

#[derive(Debug, Clone)]
pub struct MorrisConfig {
    pub feature: String,
    pub deltas: Vec<f64>,
    pub target: MorrisTarget,
    pub range: DateRange,
}

impl MorrisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::InvalidArgument("at least one delta is required".into()));
        }
        if let Some(d) = self.deltas.iter().find(|d| **d == 0.0 || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "delta must be finite and non-zero, got {d}"
            )));
        }
        Ok(())
    }
}

/// Morris statistics of one feature at one `Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorrisRow {
    pub delta: f64,
    pub g: f64,
    pub counties: usize,
    pub days: usize,
    pub mu_star: f64,
    pub sigma: f64,
    pub scaled_index: f64,
}

impl MorrisRow {
    pub fn new(delta: f64, g: f64, counties: usize, days: usize, sigma: f64) -> Self {
        let mu_star = g / ((counties * days) as f64 * delta.abs());
        MorrisRow {
            delta,
            g,
            counties,
            days,
            mu_star,
            sigma,
            scaled_index: mu_star * sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorrisResult {
    pub feature: String,
    pub rows: Vec<MorrisRow>,
}

impl MorrisResult {
    pub const CSV_HEADER: &'static str = "feature,delta,G,C,T,mu_star,sigma,scaled_index";

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.feature, r.delta, r.g, r.counties, r.days, r.mu_star, r.sigma, r.scaled_index
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }

    pub fn row(&self, delta: f64) -> Option<&MorrisRow> {
        self.rows.iter().find(|r| r.delta == delta)
    }
}

/// Runs the baseline once and one perturbed pass per `Δ` on prebuilt
/// evaluation windows.
pub fn delta_sweep(
    model: &dyn OneStepModel,
    windows: &WindowBatch,
    feature: FeatureRef,
    feature_name: &str,
    deltas: &[f64],
    target: MorrisTarget,
    sigma: f64,
) -> Result<MorrisResult> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("at least one delta is required".into()));
    }
    if let Some(d) = deltas.iter().find(|d| **d == 0.0 || !d.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "delta must be finite and non-zero, got {d}"
        )));
    }
    let (c, t) = grid_dims(windows)?;
    let base = model.one_step(windows)?;
    let gs: Vec<Result<f64>> = deltas
        .par_iter()
        .map(|&d| {
            let y = model.one_step(&perturb_batch(windows, feature, d)?)?;
            total_change(&base, &y, windows.target_features, target)
        })
        .collect();
    let rows = deltas
        .iter()
        .zip(gs)
        .map(|(&d, g)| Ok(MorrisRow::new(d, g?, c, t, sigma)))
        .collect::<Result<_>>()?;
    Ok(MorrisResult {
        feature: feature_name.to_string(),
        rows,
    })
}

/// Full Morris run on a scaled panel.
///
/// `raw` is the same panel in original units and supplies `σ_i` over the
/// evaluation range.
pub fn normalized_morris(
    model: &dyn OneStepModel,
    scaled: &FeaturePanel,
    raw: &FeaturePanel,
    spec: &WindowSpec,
    cfg: &MorrisConfig,
) -> Result<MorrisResult> {
    cfg.validate()?;
    let feature = FeatureRef::resolve(scaled, &cfg.feature)?;
    let windows = evaluation_windows(scaled, &cfg.range, spec)?;
    let sigma = feature_sigma(raw, feature, &cfg.range)?;
    delta_sweep(model, &windows, feature, &cfg.feature, &cfg.deltas, cfg.target, sigma)
}
