use chrono::NaiveDate;

use super::panel::FeaturePanel;
use crate::error::{Error, Result};

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn days(&self) -> usize {
        ((self.end - self.start).num_days() + 1).max(0) as usize
    }
}

/// Train / validation / test date ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid preset date")
}

impl SplitSpec {
    /// The primary split. The published test range reads 2022, which lies
    /// outside the dataset; the contiguous 2021 reading is used.
    pub fn primary() -> Self {
        SplitSpec {
            train: DateRange::new(ymd(2020, 2, 29), ymd(2021, 11, 29)),
            validation: DateRange::new(ymd(2021, 11, 30), ymd(2021, 12, 14)),
            test: DateRange::new(ymd(2021, 12, 15), ymd(2021, 12, 29)),
        }
    }

    pub fn rising_third_wave() -> Self {
        SplitSpec {
            train: DateRange::new(ymd(2020, 2, 29), ymd(2021, 12, 31)),
            validation: DateRange::new(ymd(2022, 1, 1), ymd(2022, 1, 15)),
            test: DateRange::new(ymd(2022, 1, 16), ymd(2022, 1, 30)),
        }
    }

    pub fn falling_third_wave() -> Self {
        SplitSpec {
            train: DateRange::new(ymd(2020, 2, 29), ymd(2022, 1, 31)),
            validation: DateRange::new(ymd(2022, 2, 1), ymd(2022, 2, 15)),
            test: DateRange::new(ymd(2022, 2, 16), ymd(2022, 3, 2)),
        }
    }

    pub fn post_third_wave() -> Self {
        SplitSpec {
            train: DateRange::new(ymd(2020, 2, 29), ymd(2022, 2, 28)),
            validation: DateRange::new(ymd(2022, 3, 1), ymd(2022, 3, 15)),
            test: DateRange::new(ymd(2022, 3, 16), ymd(2022, 3, 30)),
        }
    }

    /// Contiguous split of `dates`: the last `test_days` for test, the
    /// `val_days` before them for validation, everything earlier for training.
    pub fn tail(dates: &[NaiveDate], val_days: usize, test_days: usize) -> Result<Self> {
        let t = dates.len();
        if val_days == 0 || test_days == 0 || t <= val_days + test_days {
            return Err(Error::InvalidSplit(format!(
                "{t} dates cannot hold {val_days} validation and {test_days} test days"
            )));
        }
        let test_start = t - test_days;
        let val_start = test_start - val_days;
        Ok(SplitSpec {
            train: DateRange::new(dates[0], dates[val_start - 1]),
            validation: DateRange::new(dates[val_start], dates[test_start - 1]),
            test: DateRange::new(dates[test_start], dates[t - 1]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.named() {
            if r.start > r.end {
                return Err(Error::InvalidSplit(format!("{name} range ends before it starts")));
            }
        }
        if self.train.end >= self.validation.start {
            return Err(Error::InvalidSplit("train range overlaps validation".into()));
        }
        if self.validation.end >= self.test.start {
            return Err(Error::InvalidSplit("validation range overlaps test".into()));
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, DateRange); 3] {
        [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ]
    }
}

/// The three panels produced by [`split`].
#[derive(Debug, Clone)]
pub struct PanelSplits {
    pub train: FeaturePanel,
    pub validation: FeaturePanel,
    pub test: FeaturePanel,
}

/// Cuts `panel` into train, validation and test panels. Each panel starts up
/// to `context_days` before its range (clamped at the first panel date) so
/// that its first windows can forecast from the range start.
pub fn split(panel: &FeaturePanel, spec: &SplitSpec, context_days: usize) -> Result<PanelSplits> {
    spec.validate()?;
    let first = panel.dates[0];
    let last = *panel.dates.last().unwrap();
    let cut = |name: &str, r: DateRange| -> Result<FeaturePanel> {
        if r.start < first || r.end > last {
            return Err(Error::InvalidSplit(format!(
                "{name} range {}..{} lies outside panel dates {first}..{last}",
                r.start, r.end
            )));
        }
        let ctx_start = r.start - chrono::Days::new(context_days as u64);
        panel.slice_dates(ctx_start.max(first), r.end)
    };
    Ok(PanelSplits {
        train: cut("train", spec.train)?,
        validation: cut("validation", spec.validation)?,
        test: cut("test", spec.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::panel::tests::tiny_panel;
    use crate::data::windows::{make_windows, WindowSpec};

    #[test]
    fn presets_are_ordered() {
        for s in [
            SplitSpec::primary(),
            SplitSpec::rising_third_wave(),
            SplitSpec::falling_third_wave(),
            SplitSpec::post_third_wave(),
        ] {
            s.validate().unwrap();
            assert_eq!(s.validation.days(), 15);
            assert_eq!(s.test.days(), 15);
        }
    }

    #[test]
    fn fifteen_day_test_range_gives_one_window_per_county() {
        let p = tiny_panel(3, 80);
        let spec = SplitSpec::tail(&p.dates, 15, 15).unwrap();
        let s = split(&p, &spec, 13).unwrap();
        assert_eq!(s.test.num_days(), 28);
        let w = make_windows(&s.test, &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.meta[0].forecast_start, spec.test.start);
    }

    #[test]
    fn forecast_starts_are_disjoint_across_splits() {
        let p = tiny_panel(2, 120);
        let spec = SplitSpec::tail(&p.dates, 20, 18).unwrap();
        let s = split(&p, &spec, 13).unwrap();
        let ws = WindowSpec::default();
        let starts = |fp: &FeaturePanel| {
            make_windows(fp, &ws)
                .unwrap()
                .meta
                .iter()
                .map(|m| m.forecast_start)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let (a, b, c) = (starts(&s.train), starts(&s.validation), starts(&s.test));
        assert!(a.is_disjoint(&b) && b.is_disjoint(&c) && a.is_disjoint(&c));
        assert!(b.iter().all(|d| spec.validation.contains(*d)));
        assert!(c.iter().all(|d| spec.test.contains(*d)));
    }

    #[test]
    fn overlapping_or_outside_ranges_fail() {
        let p = tiny_panel(1, 60);
        let mut spec = SplitSpec::tail(&p.dates, 15, 15).unwrap();
        spec.validation.end = spec.test.start;
        assert!(split(&p, &spec, 13).is_err());
        let spec = SplitSpec::primary();
        assert!(split(&p, &spec, 13).is_err());
    }
}
