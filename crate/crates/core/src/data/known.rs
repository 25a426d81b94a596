use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate};

/// Names of the derived known-future inputs, in model input order.
pub const KNOWN_FEATURES: [&str; 3] = ["SinWeekly", "CosWeekly", "LinearSpace"];

/// Calendar and county-index encodings available for any date, past or future.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownFeatures {
    pub sin_weekly: Vec<f64>,
    pub cos_weekly: Vec<f64>,
    /// One value per county.
    pub linear_space: Vec<f64>,
}

/// Day of week with Monday = 0.
pub fn day_of_week(date: NaiveDate) -> u32 {
    date.weekday().num_days_from_monday()
}

pub fn sin_weekly(date: NaiveDate) -> f64 {
    (2.0 * PI * day_of_week(date) as f64 / 7.0).sin()
}

pub fn cos_weekly(date: NaiveDate) -> f64 {
    (2.0 * PI * day_of_week(date) as f64 / 7.0).cos()
}

/// County ordinal min-max scaled to `[0, 1]`; a single county maps to 0.
pub fn linear_space(index: usize, counties: usize) -> f64 {
    if counties <= 1 {
        0.0
    } else {
        index as f64 / (counties - 1) as f64
    }
}

pub fn derive_known_future(dates: &[NaiveDate], county_ids: &[String]) -> KnownFeatures {
    KnownFeatures {
        sin_weekly: dates.iter().map(|&d| sin_weekly(d)).collect(),
        cos_weekly: dates.iter().map(|&d| cos_weekly(d)).collect(),
        linear_space: (0..county_ids.len())
            .map(|i| linear_space(i, county_ids.len()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;

    #[test]
    fn monday_encodes_to_origin() {
        let monday = NaiveDate::from_ymd_opt(2021, 11, 29).unwrap();
        assert_eq!(day_of_week(monday), 0);
        assert_eq!(sin_weekly(monday), 0.0);
        assert_eq!(cos_weekly(monday), 1.0);
    }

    #[test]
    fn weekly_period() {
        let start = NaiveDate::from_ymd_opt(2020, 2, 29).unwrap();
        for i in 0..30 {
            let d = start + Days::new(i);
            let w = d + Days::new(7);
            assert!((sin_weekly(d) - sin_weekly(w)).abs() < 1e-15);
            assert!((cos_weekly(d) - cos_weekly(w)).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_space_endpoints() {
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let k = derive_known_future(&[], &ids);
        assert_eq!(k.linear_space[0], 0.0);
        assert_eq!(k.linear_space[4], 1.0);
        assert_eq!(linear_space(0, 1), 0.0);
    }
}
