use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;

use super::known::KNOWN_FEATURES;
use crate::error::{Error, Result};

/// Role a named feature plays in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureRole {
    Static,
    Observed,
    Known,
    Target,
}

impl fmt::Display for FeatureRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureRole::Static => "static",
            FeatureRole::Observed => "observed",
            FeatureRole::Known => "known",
            FeatureRole::Target => "target",
        };
        f.write_str(s)
    }
}

/// Dense `[county × date × feature]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    counties: usize,
    days: usize,
    features: usize,
    data: Vec<f64>,
}

impl Cube {
    pub fn zeros(counties: usize, days: usize, features: usize) -> Self {
        Cube {
            counties,
            days,
            features,
            data: vec![0.0; counties * days * features],
        }
    }

    pub fn from_vec(counties: usize, days: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != counties * days * features {
            return Err(Error::Shape(format!(
                "cube {counties}x{days}x{features} needs {} values, got {}",
                counties * days * features,
                data.len()
            )));
        }
        Ok(Cube {
            counties,
            days,
            features,
            data,
        })
    }

    #[inline]
    fn idx(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.days + t) * self.features + f
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, f: usize) -> f64 {
        self.data[self.idx(c, t, f)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, f: usize, v: f64) {
        let i = self.idx(c, t, f);
        self.data[i] = v;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.counties, self.days, self.features)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All values of feature `f`, county-major.
    pub fn feature_values(&self, f: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(f)
            .step_by(self.features.max(1))
            .copied()
            .collect()
    }

    pub fn map_feature(&mut self, f: usize, mut op: impl FnMut(f64) -> f64) {
        let nf = self.features;
        for v in self.data.iter_mut().skip(f).step_by(nf.max(1)) {
            *v = op(*v);
        }
    }

    /// Keeps days `start .. start + len`.
    pub fn slice_days(&self, start: usize, len: usize) -> Cube {
        let mut out = Cube::zeros(self.counties, len, self.features);
        for c in 0..self.counties {
            let src = self.idx(c, start, 0);
            let dst = out.idx(c, 0, 0);
            out.data[dst..dst + len * self.features].copy_from_slice(&self.data[src..src + len * self.features]);
        }
        out
    }

    pub fn select_counties(&self, order: &[usize]) -> Cube {
        let block = self.days * self.features;
        let mut data = Vec::with_capacity(order.len() * block);
        for &c in order {
            data.extend_from_slice(&self.data[c * block..(c + 1) * block]);
        }
        Cube {
            counties: order.len(),
            days: self.days,
            features: self.features,
            data,
        }
    }
}

/// County-level panel: dynamic observed features, static covariates and
/// target series over a contiguous daily date range.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    pub county_ids: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub observed_names: Vec<String>,
    pub static_names: Vec<String>,
    pub target_names: Vec<String>,
    /// `[C × T × F_obs]`
    pub dynamic: Cube,
    /// `[C × F_stat]`, row-major.
    pub statics: Vec<f64>,
    /// `[C × T × F_tgt]`
    pub targets: Cube,
}

impl FeaturePanel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        county_ids: Vec<String>,
        dates: Vec<NaiveDate>,
        observed_names: Vec<String>,
        static_names: Vec<String>,
        target_names: Vec<String>,
        dynamic: Cube,
        statics: Vec<f64>,
        targets: Cube,
    ) -> Result<Self> {
        let panel = FeaturePanel {
            county_ids,
            dates,
            observed_names,
            static_names,
            target_names,
            dynamic,
            statics,
            targets,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, t) = (self.county_ids.len(), self.dates.len());
        if c == 0 || t == 0 {
            return Err(Error::Empty("panel needs at least one county and one date".into()));
        }
        check_contiguous(&self.dates)?;
        if self.dynamic.dims() != (c, t, self.observed_names.len()) {
            return Err(Error::Shape(format!(
                "dynamic array {:?} does not match {c} counties, {t} dates, {} features",
                self.dynamic.dims(),
                self.observed_names.len()
            )));
        }
        if self.targets.dims() != (c, t, self.target_names.len()) {
            return Err(Error::Shape(format!(
                "target array {:?} does not match {c} counties, {t} dates, {} targets",
                self.targets.dims(),
                self.target_names.len()
            )));
        }
        if self.statics.len() != c * self.static_names.len() {
            return Err(Error::Shape(format!(
                "static array has {} values, expected {}",
                self.statics.len(),
                c * self.static_names.len()
            )));
        }
        let mut seen = BTreeMap::new();
        for (name, role) in self.named_roles() {
            if let Some(prev) = seen.insert(name.clone(), role) {
                return Err(Error::InvalidArgument(format!(
                    "feature `{name}` has two roles ({prev} and {role})"
                )));
            }
        }
        Ok(())
    }

    fn named_roles(&self) -> Vec<(String, FeatureRole)> {
        let mut out = Vec::new();
        out.extend(self.static_names.iter().map(|n| (n.clone(), FeatureRole::Static)));
        out.extend(self.observed_names.iter().map(|n| (n.clone(), FeatureRole::Observed)));
        out.extend(self.target_names.iter().map(|n| (n.clone(), FeatureRole::Target)));
        out.extend(KNOWN_FEATURES.iter().map(|n| (n.to_string(), FeatureRole::Known)));
        out
    }

    /// Every feature name mapped to its role, including the derived
    /// known-future calendar and county-index features.
    pub fn feature_roles(&self) -> BTreeMap<String, FeatureRole> {
        self.named_roles().into_iter().collect()
    }

    pub fn num_counties(&self) -> usize {
        self.county_ids.len()
    }

    pub fn num_days(&self) -> usize {
        self.dates.len()
    }

    pub fn static_value(&self, c: usize, f: usize) -> f64 {
        self.statics[c * self.static_names.len() + f]
    }

    pub fn static_row(&self, c: usize) -> &[f64] {
        let n = self.static_names.len();
        &self.statics[c * n..(c + 1) * n]
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let off = (date - first).num_days();
        (off >= 0 && (off as usize) < self.dates.len()).then_some(off as usize)
    }

    /// Restricts the panel to the inclusive date range, clamped to the
    /// panel's own dates.
    pub fn slice_dates(&self, start: NaiveDate, end: NaiveDate) -> Result<FeaturePanel> {
        let first = self.dates[0];
        let last = *self.dates.last().unwrap();
        let s = start.max(first);
        let e = end.min(last);
        if s > e {
            return Err(Error::InvalidArgument(format!(
                "date range {start}..{end} does not intersect panel {first}..{last}"
            )));
        }
        let si = self.date_index(s).unwrap();
        let len = self.date_index(e).unwrap() - si + 1;
        Ok(FeaturePanel {
            county_ids: self.county_ids.clone(),
            dates: self.dates[si..si + len].to_vec(),
            observed_names: self.observed_names.clone(),
            static_names: self.static_names.clone(),
            target_names: self.target_names.clone(),
            dynamic: self.dynamic.slice_days(si, len),
            statics: self.statics.clone(),
            targets: self.targets.slice_days(si, len),
        })
    }

    /// Reorders counties; `order[k]` is the source index of new county `k`.
    pub fn permute_counties(&self, order: &[usize]) -> FeaturePanel {
        let ns = self.static_names.len();
        let mut statics = Vec::with_capacity(self.statics.len());
        for &c in order {
            statics.extend_from_slice(&self.statics[c * ns..(c + 1) * ns]);
        }
        FeaturePanel {
            county_ids: order.iter().map(|&c| self.county_ids[c].clone()).collect(),
            dates: self.dates.clone(),
            observed_names: self.observed_names.clone(),
            static_names: self.static_names.clone(),
            target_names: self.target_names.clone(),
            dynamic: self.dynamic.select_counties(order),
            statics,
            targets: self.targets.select_counties(order),
        }
    }

    /// Keeps only the listed static columns, in the given order.
    pub fn with_static_subset(&self, names: &[&str]) -> Result<FeaturePanel> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.static_names
                    .iter()
                    .position(|s| s == n)
                    .ok_or_else(|| Error::UnknownFeature(n.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut statics = Vec::with_capacity(self.num_counties() * idx.len());
        for c in 0..self.num_counties() {
            statics.extend(idx.iter().map(|&f| self.static_value(c, f)));
        }
        let mut out = self.clone();
        out.static_names = names.iter().map(|s| s.to_string()).collect();
        out.statics = statics;
        Ok(out)
    }

    pub fn observed_index(&self, name: &str) -> Option<usize> {
        self.observed_names.iter().position(|n| n == name)
    }

    pub fn static_index(&self, name: &str) -> Option<usize> {
        self.static_names.iter().position(|n| n == name)
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.target_names.iter().position(|n| n == name)
    }
}

pub(crate) fn check_contiguous(dates: &[NaiveDate]) -> Result<()> {
    for w in dates.windows(2) {
        let next = w[0].succ_opt().expect("date overflow");
        if w[1] != next {
            if w[1] <= w[0] {
                return Err(Error::InvalidArgument(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
            return Err(Error::DateGap { missing: next });
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_panel(c: usize, t: usize) -> FeaturePanel {
        let start = NaiveDate::from_ymd_opt(2020, 3, 2).unwrap();
        let dates = (0..t).map(|i| start + chrono::Days::new(i as u64)).collect();
        let mut dynamic = Cube::zeros(c, t, 2);
        let mut targets = Cube::zeros(c, t, 2);
        for ci in 0..c {
            for ti in 0..t {
                dynamic.set(ci, ti, 0, (ci * 100 + ti) as f64);
                dynamic.set(ci, ti, 1, ((ci + ti) % 7) as f64);
                targets.set(ci, ti, 0, (ti as f64).sin() * 10.0 + 20.0 + ci as f64);
                targets.set(ci, ti, 1, 1.0 + (ti % 3) as f64);
            }
        }
        FeaturePanel::new(
            (0..c).map(|i| format!("{:05}", 1001 + i)).collect(),
            dates,
            vec!["vaccination".into(), "mobility".into()],
            vec!["age".into()],
            vec!["cases".into(), "deaths".into()],
            dynamic,
            (0..c).map(|i| i as f64 * 0.1).collect(),
            targets,
        )
        .unwrap()
    }

    #[test]
    fn roles_include_known_features() {
        let p = tiny_panel(2, 5);
        let roles = p.feature_roles();
        assert_eq!(roles["SinWeekly"], FeatureRole::Known);
        assert_eq!(roles["age"], FeatureRole::Static);
        assert_eq!(roles["cases"], FeatureRole::Target);
        assert_eq!(roles["mobility"], FeatureRole::Observed);
        assert_eq!(roles.len(), 8);
    }

    #[test]
    fn duplicate_role_is_rejected() {
        let mut p = tiny_panel(1, 3);
        p.static_names = vec!["cases".into()];
        assert!(p.validate().is_err());
    }

    #[test]
    fn gap_is_reported() {
        let d = |day| NaiveDate::from_ymd_opt(2021, 1, day).unwrap();
        let err = check_contiguous(&[d(1), d(2), d(4)]).unwrap_err();
        assert!(matches!(err, Error::DateGap { missing } if missing == d(3)));
    }

    #[test]
    fn slicing_and_permuting() {
        let p = tiny_panel(3, 10);
        let s = p.slice_dates(p.dates[2], p.dates[5]).unwrap();
        assert_eq!(s.num_days(), 4);
        assert_eq!(s.dynamic.get(1, 0, 0), p.dynamic.get(1, 2, 0));
        let q = p.permute_counties(&[2, 0, 1]);
        assert_eq!(q.county_ids[0], p.county_ids[2]);
        assert_eq!(q.targets.get(0, 4, 0), p.targets.get(2, 4, 0));
        assert_eq!(q.static_value(0, 0), p.static_value(2, 0));
    }
}
