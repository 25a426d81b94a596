//! Forecast accuracy metrics and the persistence baseline.

use std::fmt::Write as _;

use crate::data::{ScalerState, WindowBatch};
use crate::error::{Error, Result};
use crate::model::Tft;

/// How SMAPE is computed; written next to every report.
pub const SMAPE_CONVENTION: &str = "mean over cells of 2|yhat-y|/(|y|+|yhat|); a cell where both are 0 contributes 0";

fn check(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} observations",
            pred.len(),
            obs.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no cells to score".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    Ok(pred.iter().zip(obs).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    Ok((pred.iter().zip(obs).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Symmetric mean absolute percentage error in `[0, 2]`.
pub fn smape(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    let total: f64 = pred
        .iter()
        .zip(obs)
        .map(|(p, y)| {
            let den = p.abs() + y.abs();
            if den == 0.0 {
                0.0
            } else {
                2.0 * (p - y).abs() / den
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Nash–Sutcliffe efficiency `1 − Σ(y−ŷ)²/Σ(y−ȳ)²`.
pub fn nse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check(pred, obs)?;
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument(
            "observations have zero variance; NSE is undefined".into(),
        ));
    }
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// `1 / (2 − nse)`
pub fn nnse_from_nse(nse: f64) -> f64 {
    1.0 / (2.0 - nse)
}

/// Returns `(nse, nnse)`.
pub fn nnse(pred: &[f64], obs: &[f64]) -> Result<(f64, f64)> {
    let e = nse(pred, obs)?;
    Ok((e, nnse_from_nse(e)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMetrics {
    pub target: String,
    pub cells: usize,
    pub mae: f64,
    pub rmse: f64,
    pub smape: f64,
    pub nse: f64,
    pub nnse: f64,
}

impl TargetMetrics {
    pub fn compute(target: &str, pred: &[f64], obs: &[f64]) -> Result<Self> {
        let (nse, nnse) = nnse(pred, obs)?;
        Ok(TargetMetrics {
            target: target.to_string(),
            cells: pred.len(),
            mae: mae(pred, obs)?,
            rmse: rmse(pred, obs)?,
            smape: smape(pred, obs)?,
            nse,
            nnse,
        })
    }
}

/// Metrics of one forecaster, one entry per target.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub targets: Vec<TargetMetrics>,
}

impl MetricsReport {
    /// Pools every `(window, horizon)` cell of each target.
    ///
    /// `pred` and `obs` are `[windows × horizon × targets]` in original units.
    pub fn from_cells(model: &str, target_names: &[String], pred: &[f64], obs: &[f64]) -> Result<Self> {
        check(pred, obs)?;
        let k = target_names.len();
        if k == 0 || !pred.len().is_multiple_of(k) {
            return Err(Error::Shape(format!(
                "{} cells do not divide into {k} targets",
                pred.len()
            )));
        }
        let column = |v: &[f64], f: usize| v.iter().skip(f).step_by(k).copied().collect::<Vec<_>>();
        let targets = target_names
            .iter()
            .enumerate()
            .map(|(f, name)| TargetMetrics::compute(name, &column(pred, f), &column(obs, f)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            model: model.to_string(),
            targets,
        })
    }

    pub fn target(&self, name: &str) -> Option<&TargetMetrics> {
        self.targets.iter().find(|t| t.target == name)
    }

    /// Flat JSON object keyed `<target>.<metric>`.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        let _ = writeln!(s, "  \"model\": \"{}\",", self.model);
        let _ = writeln!(s, "  \"smape_convention\": \"{SMAPE_CONVENTION}\",");
        let mut fields = Vec::new();
        for t in &self.targets {
            for (k, v) in [
                ("cells", t.cells as f64),
                ("mae", t.mae),
                ("rmse", t.rmse),
                ("smape", t.smape),
                ("nse", t.nse),
                ("nnse", t.nnse),
            ] {
                fields.push(format!("  \"{}.{k}\": {}", t.target, json_number(v)));
            }
        }
        s.push_str(&fields.join(",\n"));
        s.push_str("\n}\n");
        s
    }

    pub const CSV_HEADER: &'static str = "model,target,cells,mae,rmse,smape,nse,nnse";

    /// One row per target, without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for t in &self.targets {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.model, t.target, t.cells, t.mae, t.rmse, t.smape, t.nse, t.nnse
            );
        }
        s
    }
}

fn json_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "null".into()
    }
}

/// Repeats the last observed value of each target across the horizon.
pub fn persistence_forecast(past_targets: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *past_targets
        .last()
        .ok_or_else(|| Error::Empty("persistence needs at least one past value".into()))?;
    Ok(vec![last; horizon])
}

/// Produces `[windows × horizon × targets]` forecasts in scaled units.
pub trait Forecaster {
    fn name(&self) -> &str;
    fn forecast(&self, batch: &WindowBatch) -> Result<Vec<f64>>;
}

/// The zero-parameter last-value baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let (h, k) = (batch.horizon, batch.target_features);
        let mut out = Vec::with_capacity(batch.len() * h * k);
        for w in 0..batch.len() {
            let last: Vec<f64> = (0..k)
                .map(|f| batch.past_at(w, batch.past_len - 1, batch.past_target_index(f)))
                .collect();
            for _ in 0..h {
                out.extend_from_slice(&last);
            }
        }
        Ok(out)
    }
}

impl Forecaster for Tft {
    fn name(&self) -> &str {
        "tft"
    }

    fn forecast(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        self.predict(batch)
    }
}

/// Maps scaled `[windows × horizon × targets]` values back to original units.
pub fn unscale_targets(values: &[f64], scaler: &ScalerState) -> Vec<f64> {
    let k = scaler.targets.len();
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| scaler.target(i % k).unscale(v))
        .collect()
}

/// Forecasts `test`, inverse-scales predictions and observations and scores
/// them per target.
pub fn evaluate(forecaster: &dyn Forecaster, test: &WindowBatch, scaler: &ScalerState) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test split yields no windows".into()));
    }
    if scaler.targets.len() != test.target_features {
        return Err(Error::Shape("scaler and batch disagree on target count".into()));
    }
    let pred = unscale_targets(&forecaster.forecast(test)?, scaler);
    let obs = unscale_targets(&test.targets, scaler);
    let names: Vec<String> = scaler.targets.iter().map(|(n, _)| n.clone()).collect();
    MetricsReport::from_cells(forecaster.name(), &names, &pred, &obs)
}
