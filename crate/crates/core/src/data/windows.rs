use chrono::NaiveDate;

use super::known::{cos_weekly, linear_space, sin_weekly, KNOWN_FEATURES};
use super::panel::FeaturePanel;
use crate::error::{Error, Result};

/// Sliding-window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub past_len: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            past_len: 13,
            horizon: 15,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn new(past_len: usize, horizon: usize) -> Result<Self> {
        let spec = WindowSpec {
            past_len,
            horizon,
            stride: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "window lengths and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Combined encoder + decoder length.
    pub fn total_len(&self) -> usize {
        self.past_len + self.horizon
    }

    /// Windows per county for `days` observations.
    pub fn windows_per_county(&self, days: usize) -> usize {
        if days < self.total_len() {
            0
        } else {
            (days - self.total_len()) / self.stride + 1
        }
    }
}

/// Where a window came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowMeta {
    pub county: usize,
    /// Panel index of the first encoder day.
    pub start: usize,
    /// First forecast date (the one-step-ahead target date).
    pub forecast_start: NaiveDate,
}

/// A set of windows packaged as flat arrays.
///
/// Encoder inputs per step are `[observed…, targets…, known…]`; decoder
/// inputs per step are `[known…]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub past_len: usize,
    pub horizon: usize,
    pub past_features: usize,
    pub future_features: usize,
    pub static_features: usize,
    pub target_features: usize,
    /// `[n × past_len × past_features]`
    pub past: Vec<f64>,
    /// `[n × horizon × future_features]`
    pub future: Vec<f64>,
    /// `[n × static_features]`
    pub statics: Vec<f64>,
    /// `[n × horizon × target_features]`
    pub targets: Vec<f64>,
    pub meta: Vec<WindowMeta>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    #[inline]
    pub fn past_at(&self, w: usize, t: usize, f: usize) -> f64 {
        self.past[(w * self.past_len + t) * self.past_features + f]
    }

    #[inline]
    pub fn future_at(&self, w: usize, t: usize, f: usize) -> f64 {
        self.future[(w * self.horizon + t) * self.future_features + f]
    }

    #[inline]
    pub fn target_at(&self, w: usize, h: usize, f: usize) -> f64 {
        self.targets[(w * self.horizon + h) * self.target_features + f]
    }

    pub fn static_row(&self, w: usize) -> &[f64] {
        &self.statics[w * self.static_features..(w + 1) * self.static_features]
    }

    /// Index within the encoder inputs of target `f` (the past target value).
    pub fn past_target_index(&self, f: usize) -> usize {
        self.past_features - KNOWN_FEATURES.len() - self.target_features + f
    }

    /// Copies the listed windows, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let pick = |src: &[f64], block: usize| {
            let mut out = Vec::with_capacity(indices.len() * block);
            for &i in indices {
                out.extend_from_slice(&src[i * block..(i + 1) * block]);
            }
            out
        };
        WindowBatch {
            past: pick(&self.past, self.past_len * self.past_features),
            future: pick(&self.future, self.horizon * self.future_features),
            statics: pick(&self.statics, self.static_features),
            targets: pick(&self.targets, self.horizon * self.target_features),
            meta: indices.iter().map(|&i| self.meta[i]).collect(),
            ..*self
        }
    }

    fn empty_like(&self) -> WindowBatch {
        WindowBatch {
            past: Vec::new(),
            future: Vec::new(),
            statics: Vec::new(),
            targets: Vec::new(),
            meta: Vec::new(),
            ..*self
        }
    }

    /// Concatenates batches with identical geometry.
    pub fn concat(parts: &[WindowBatch]) -> Result<WindowBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no batches to concatenate".into()))?;
        let mut out = first.empty_like();
        for p in parts {
            if (
                p.past_len,
                p.horizon,
                p.past_features,
                p.future_features,
                p.static_features,
                p.target_features,
            ) != (
                out.past_len,
                out.horizon,
                out.past_features,
                out.future_features,
                out.static_features,
                out.target_features,
            ) {
                return Err(Error::Shape("batch geometries differ".into()));
            }
            out.past.extend_from_slice(&p.past);
            out.future.extend_from_slice(&p.future);
            out.statics.extend_from_slice(&p.statics);
            out.targets.extend_from_slice(&p.targets);
            out.meta.extend_from_slice(&p.meta);
        }
        Ok(out)
    }
}

/// Builds every sliding window of every county: `C · (T − d_s + 1)` windows
/// at unit stride.
pub fn make_windows(panel: &FeaturePanel, spec: &WindowSpec) -> Result<WindowBatch> {
    spec.validate()?;
    let (c_count, t_count) = (panel.num_counties(), panel.num_days());
    if t_count < spec.total_len() {
        return Err(Error::InvalidArgument(format!(
            "panel has {t_count} days but a window needs {}",
            spec.total_len()
        )));
    }
    let n_obs = panel.observed_names.len();
    let n_tgt = panel.target_names.len();
    let n_known = KNOWN_FEATURES.len();
    let past_features = n_obs + n_tgt + n_known;
    let per_county = spec.windows_per_county(t_count);
    let n = c_count * per_county;

    let sin: Vec<f64> = panel.dates.iter().map(|&d| sin_weekly(d)).collect();
    let cos: Vec<f64> = panel.dates.iter().map(|&d| cos_weekly(d)).collect();

    let mut batch = WindowBatch {
        past_len: spec.past_len,
        horizon: spec.horizon,
        past_features,
        future_features: n_known,
        static_features: panel.static_names.len(),
        target_features: n_tgt,
        past: Vec::with_capacity(n * spec.past_len * past_features),
        future: Vec::with_capacity(n * spec.horizon * n_known),
        statics: Vec::with_capacity(n * panel.static_names.len()),
        targets: Vec::with_capacity(n * spec.horizon * n_tgt),
        meta: Vec::with_capacity(n),
    };
    for c in 0..c_count {
        let lin = linear_space(c, c_count);
        for k in 0..per_county {
            let start = k * spec.stride;
            for t in start..start + spec.past_len {
                for f in 0..n_obs {
                    batch.past.push(panel.dynamic.get(c, t, f));
                }
                for f in 0..n_tgt {
                    batch.past.push(panel.targets.get(c, t, f));
                }
                batch.past.extend_from_slice(&[sin[t], cos[t], lin]);
            }
            let fut = start + spec.past_len;
            for t in fut..fut + spec.horizon {
                batch.future.extend_from_slice(&[sin[t], cos[t], lin]);
                for f in 0..n_tgt {
                    batch.targets.push(panel.targets.get(c, t, f));
                }
            }
            batch.statics.extend_from_slice(panel.static_row(c));
            batch.meta.push(WindowMeta {
                county: c,
                start,
                forecast_start: panel.dates[fut],
            });
        }
    }
    Ok(batch)
}
