//! Attention profiles and variable-selection importance of a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;

use crate::data::{FeaturePanel, FeatureRole, WindowBatch, WindowMeta, KNOWN_FEATURES};
use crate::error::{Error, Result};
use crate::model::{AttentionTensor, Mode, Tft, VsnWeights, PREDICT_CHUNK};

/// Holidays marked on daily attention plots, one `YYYY-MM-DD name` per line.
pub const DEFAULT_HOLIDAYS: &str = include_str!("../../assets/holidays.txt");

/// Number of past lags in a one-step-ahead profile.
pub const PROFILE_LAGS: usize = 13;

/// Mean attention `[len × len]` over heads and windows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub len: usize,
    pub windows: usize,
    pub mean: Vec<f64>,
}

impl AttentionProfile {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mean[i * self.len + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.mean[i * self.len..(i + 1) * self.len]
    }

    /// Full matrix without header, one row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len {
            let row: Vec<String> = self.row(i).iter().map(f64::to_string).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Averages attention over heads, then over all windows of all tensors.
pub fn aggregate_attention(tensors: &[AttentionTensor]) -> Result<AttentionProfile> {
    let first = tensors
        .iter()
        .find(|t| t.windows > 0)
        .ok_or_else(|| Error::Empty("no attention windows to aggregate".into()))?;
    let len = first.len;
    let mut sum = vec![0.0; len * len];
    let mut windows = 0;
    for t in tensors {
        if t.windows == 0 {
            continue;
        }
        if t.len != len {
            return Err(Error::Shape(format!("attention length {} differs from {len}", t.len)));
        }
        let block = len * len;
        for (w, chunk) in t.head_mean().chunks(block).enumerate() {
            let _ = w;
            sum.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
        }
        windows += t.windows;
    }
    let inv = 1.0 / windows as f64;
    sum.iter_mut().for_each(|v| *v *= inv);
    Ok(AttentionProfile {
        len,
        windows,
        mean: sum,
    })
}

/// One-step-ahead attention over lags `−13…−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagProfile {
    pub lags: Vec<i64>,
    pub values: Vec<f64>,
}

impl LagProfile {
    /// Lag with the largest weight among `lo..=hi`.
    pub fn argmax_in(&self, lo: i64, hi: i64) -> Option<i64> {
        self.lags
            .iter()
            .zip(&self.values)
            .filter(|(l, _)| (lo..=hi).contains(*l))
            .fold(None, |best: Option<(i64, f64)>, (&l, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((l, v)),
            })
            .map(|(l, _)| l)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lag,value\n");
        for (l, v) in self.lags.iter().zip(&self.values) {
            let _ = writeln!(s, "{l},{v}");
        }
        s
    }
}

/// Row of the first forecast position (`past_len`) restricted to the last 13
/// encoder positions.
pub fn lag_profile(profile: &AttentionProfile, past_len: usize) -> Result<LagProfile> {
    lag_row(profile.row_checked(past_len)?, past_len)
}

impl AttentionProfile {
    fn row_checked(&self, past_len: usize) -> Result<&[f64]> {
        if past_len < PROFILE_LAGS || self.len <= past_len {
            return Err(Error::InvalidArgument(format!(
                "a lag profile needs at least {} encoder steps and one forecast step (len {}, past {past_len})",
                PROFILE_LAGS, self.len
            )));
        }
        Ok(self.row(past_len))
    }
}

fn lag_row(row: &[f64], past_len: usize) -> Result<LagProfile> {
    let lags: Vec<i64> = (-(PROFILE_LAGS as i64)..0).collect();
    let values = lags.iter().map(|&l| row[(past_len as i64 + l) as usize]).collect();
    Ok(LagProfile { lags, values })
}

/// Mean one-step-ahead attention attributed to a calendar date.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyAttention {
    pub date: NaiveDate,
    pub attention: f64,
    pub windows: usize,
    pub observed: Option<f64>,
}

/// Spreads each window's one-step-ahead row over the dates of its encoder
/// days and averages per date over the windows in which that date is visible.
///
/// `rows` is `[windows × past_len]`.
pub fn daily_attention(meta: &[WindowMeta], rows: &[f64], past_len: usize) -> Result<Vec<DailyAttention>> {
    if rows.len() != meta.len() * past_len {
        return Err(Error::Shape(format!(
            "{} attention values for {} windows of {past_len} steps",
            rows.len(),
            meta.len()
        )));
    }
    let mut acc: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    for (m, row) in meta.iter().zip(rows.chunks(past_len.max(1))) {
        for (j, &v) in row.iter().enumerate() {
            let date = m
                .forecast_start
                .checked_sub_days(Days::new((past_len - j) as u64))
                .ok_or_else(|| Error::InvalidArgument("window date underflow".into()))?;
            let e = acc.entry(date).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(date, (s, n))| DailyAttention {
            date,
            attention: s / n as f64,
            windows: n,
            observed: None,
        })
        .collect())
}

/// Fills `observed` with the across-county mean of target `target` on each
/// date present in `panel`.
pub fn attach_observed(series: &mut [DailyAttention], panel: &FeaturePanel, target: usize) {
    let c = panel.num_counties();
    for d in series.iter_mut() {
        d.observed = panel
            .date_index(d.date)
            .map(|t| (0..c).map(|k| panel.targets.get(k, t, target)).sum::<f64>() / c as f64);
    }
}

pub fn daily_attention_csv(series: &[DailyAttention]) -> String {
    let mut s = String::from("date,attention,observed_target\n");
    for d in series {
        let obs = d.observed.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{obs}", d.date, d.attention);
    }
    s
}

/// Parses `YYYY-MM-DD name` lines; blank lines and `#` comments are skipped.
pub fn parse_holidays(text: &str) -> Result<Vec<(NaiveDate, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (date, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let date = NaiveDate::parse_from_str(date, "%Y-%m-%d").map_err(|e| Error::MalformedRow {
            file: "holidays".into(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push((date, name.trim().to_string()));
    }
    Ok(out)
}

/// Per-role percentages of summed selection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub roles: Vec<(FeatureRole, Vec<(String, f64)>)>,
}

impl ImportanceTable {
    /// Normalizes each role's weight sums to 100.
    pub fn from_sums(roles: Vec<(FeatureRole, Vec<(String, f64)>)>) -> Result<Self> {
        let roles = roles
            .into_iter()
            .map(|(role, feats)| {
                let total: f64 = feats.iter().map(|(_, v)| v).sum();
                if !total.is_finite() || total <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{role} selection weights sum to {total}"
                    )));
                }
                Ok((role, feats.into_iter().map(|(n, v)| (n, 100.0 * v / total)).collect()))
            })
            .collect::<Result<_>>()?;
        Ok(ImportanceTable { roles })
    }

    pub fn role(&self, role: FeatureRole) -> Option<&[(String, f64)]> {
        self.roles.iter().find(|(r, _)| *r == role).map(|(_, v)| v.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("role,feature,percent\n");
        for (role, feats) in &self.roles {
            for (name, pct) in feats {
                let _ = writeln!(s, "{role},{name},{pct}");
            }
        }
        s
    }
}

/// Running sums of selection weights per input column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VsnSums {
    pub statics: Vec<f64>,
    pub past: Vec<f64>,
    pub future: Vec<f64>,
}

impl VsnSums {
    pub fn add(&mut self, w: &VsnWeights, static_features: usize, past_inputs: usize, future_inputs: usize) {
        fn fold(sum: &mut Vec<f64>, src: &[f64], k: usize) {
            if k == 0 {
                return;
            }
            sum.resize(k, 0.0);
            for row in src.chunks(k) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
        }
        fold(&mut self.statics, &w.statics, static_features);
        fold(&mut self.past, &w.past, past_inputs);
        fold(&mut self.future, &w.future, future_inputs);
    }
}

/// Builds the importance table from summed weights.
///
/// Encoder columns are `[observed…, targets…, known…]`; past targets count as
/// observed inputs. Known inputs combine their encoder and decoder weights.
pub fn variable_importance(sums: &VsnSums, panel: &FeaturePanel) -> Result<ImportanceTable> {
    let n_obs = panel.observed_names.len() + panel.target_names.len();
    let n_known = KNOWN_FEATURES.len();
    if sums.past.len() != n_obs + n_known || sums.future.len() != n_known {
        return Err(Error::Shape("selection weight sums do not match the panel".into()));
    }
    let mut roles = Vec::new();
    if !panel.static_names.is_empty() {
        roles.push((
            FeatureRole::Static,
            panel
                .static_names
                .iter()
                .cloned()
                .zip(sums.statics.iter().copied())
                .collect(),
        ));
    }
    let observed_names = panel.observed_names.iter().chain(&panel.target_names).cloned();
    roles.push((
        FeatureRole::Observed,
        observed_names.zip(sums.past[..n_obs].iter().copied()).collect(),
    ));
    roles.push((
        FeatureRole::Known,
        KNOWN_FEATURES
            .iter()
            .enumerate()
            .map(|(k, n)| (n.to_string(), sums.past[n_obs + k] + sums.future[k]))
            .collect(),
    ));
    ImportanceTable::from_sums(roles)
}

/// Everything the analysis needs from one eval-mode pass over a batch.
#[derive(Debug, Clone)]
pub struct AttentionAnalysis {
    pub profile: AttentionProfile,
    /// One-step-ahead rows over the encoder days, `[windows × past_len]`.
    pub one_step_rows: Vec<f64>,
    pub vsn: VsnSums,
}

type ChunkSums = (Vec<f64>, Vec<f64>, VsnSums);

/// Runs the model over `batch` in chunks and accumulates head-averaged
/// attention and selection weights. Chunks are reduced in order, so the
/// result does not depend on thread count.
pub fn analyze(model: &Tft, batch: &WindowBatch) -> Result<AttentionAnalysis> {
    if batch.is_empty() {
        return Err(Error::Empty("no windows to analyze".into()));
    }
    let cfg = model.config();
    let (p, len) = (cfg.past_len, cfg.total_len());
    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<Result<ChunkSums>> = idx
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let sub = batch.select(chunk);
            let out = model.forward(&sub, Mode::Eval, 0)?;
            let mut sum = vec![0.0; len * len];
            let mut rows = Vec::with_capacity(sub.len() * p);
            for w in out.mean_attention.chunks(len * len) {
                sum.iter_mut().zip(w).for_each(|(s, v)| *s += v);
                rows.extend_from_slice(&w[p * len..p * len + p]);
            }
            let mut vsn = VsnSums::default();
            vsn.add(&out.vsn, cfg.static_features, cfg.past_inputs(), cfg.future_inputs());
            Ok((sum, rows, vsn))
        })
        .collect();
    let mut mean = vec![0.0; len * len];
    let mut one_step_rows = Vec::with_capacity(batch.len() * p);
    let mut vsn = VsnSums::default();
    for part in parts {
        let (s, r, v) = part?;
        mean.iter_mut().zip(&s).for_each(|(m, x)| *m += x);
        one_step_rows.extend(r);
        for (dst, src) in [
            (&mut vsn.statics, v.statics),
            (&mut vsn.past, v.past),
            (&mut vsn.future, v.future),
        ] {
            dst.resize(src.len(), 0.0);
            dst.iter_mut().zip(&src).for_each(|(d, x)| *d += x);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(AttentionAnalysis {
        profile: AttentionProfile {
            len,
            windows: batch.len(),
            mean,
        },
        one_step_rows,
        vsn,
    })
}
