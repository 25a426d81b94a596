//! Seeded synthetic county panels with known ground truth.
//!
//! For county `c` and day `t` the generator draws
//!
//! ```text
//! obs_k[c,t]   = φ·obs_k[c,t-1] + sqrt(1-φ²)·ε          (unit-variance AR(1), obs_k[c,0] ~ N(0,1))
//! cases[c,t]   = base_c + A·w_c(dow(t)) + Σ_k β_k·obs_k[c,t] + σ_noise·η
//! deaths[c,t]  = death_ratio · cases[c,t]
//! ```
//!
//! with `base_c = base_level·(0.5 + static_0[c])`, static covariates
//! `static_j[c] ~ U(0,1)` and `ε, η ~ N(0,1)`. The weekly profile `w_c` is
//! either `sin(2π·dow/7 + phase_c)` with `phase_c ~ U(0, 2π)`
//! ([`WeeklyShape::Sine`]) or seven i.i.d. normal draws per county, centred
//! and rescaled to the root-mean-square of the sine ([`WeeklyShape::Random`]).
//! [`WeeklyShape::Drifting`] starts from the random profile and lets each
//! weekday's value follow an AR(1) across its successive occurrences with
//! correlation `weekly_drift`, so the profile cannot be memorised per county
//! but the value seven days back stays informative.
//! The same seed always produces the same panel.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::known::day_of_week;
use super::panel::{Cube, FeaturePanel};
use crate::error::{Error, Result};

/// Per-county day-of-week pattern of the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeeklyShape {
    Sine,
    Random,
    Drifting,
}

impl std::str::FromStr for WeeklyShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(WeeklyShape::Sine),
            "random" => Ok(WeeklyShape::Random),
            "drifting" => Ok(WeeklyShape::Drifting),
            _ => Err(Error::Config(format!(
                "unknown weekly_shape `{s}` (expected sine, random or drifting)"
            ))),
        }
    }
}

impl std::fmt::Display for WeeklyShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeeklyShape::Sine => "sine",
            WeeklyShape::Random => "random",
            WeeklyShape::Drifting => "drifting",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub counties: usize,
    pub days: usize,
    pub seed: u64,
    pub weekly_amplitude: f64,
    pub weekly_shape: WeeklyShape,
    /// Week-to-week correlation of each weekday under [`WeeklyShape::Drifting`].
    pub weekly_drift: f64,
    pub noise_std: f64,
    /// One observed feature `obs_k` per coefficient.
    pub feature_coeffs: Vec<f64>,
    pub static_features: usize,
    pub base_level: f64,
    pub ar_coeff: f64,
    pub death_ratio: f64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            counties: 20,
            days: 300,
            seed: 0,
            weekly_amplitude: 10.0,
            weekly_shape: WeeklyShape::Sine,
            weekly_drift: 0.95,
            noise_std: 1.0,
            feature_coeffs: vec![5.0, 0.5],
            static_features: 2,
            base_level: 60.0,
            ar_coeff: 0.9,
            death_ratio: 0.02,
            start_date: NaiveDate::from_ymd_opt(2020, 2, 29).unwrap(),
        }
    }
}

const KEYS: [&str; 13] = [
    "counties",
    "days",
    "seed",
    "weekly_amplitude",
    "weekly_shape",
    "weekly_drift",
    "noise_std",
    "feature_coeffs",
    "static_features",
    "base_level",
    "ar_coeff",
    "death_ratio",
    "start_date",
];

impl SynthConfig {
    /// Parses `key=value` lines (`#` starts a comment). Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for (k, v) in map {
            let bad = || Error::Config(format!("invalid value `{v}` for key `{k}`"));
            match k.as_str() {
                "counties" => cfg.counties = v.parse().map_err(|_| bad())?,
                "days" => cfg.days = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "weekly_amplitude" => cfg.weekly_amplitude = v.parse().map_err(|_| bad())?,
                "weekly_shape" => cfg.weekly_shape = v.parse()?,
                "weekly_drift" => cfg.weekly_drift = v.parse().map_err(|_| bad())?,
                "noise_std" => cfg.noise_std = v.parse().map_err(|_| bad())?,
                "feature_coeffs" => {
                    cfg.feature_coeffs = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|s| s.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad())?
                    }
                }
                "static_features" => cfg.static_features = v.parse().map_err(|_| bad())?,
                "base_level" => cfg.base_level = v.parse().map_err(|_| bad())?,
                "ar_coeff" => cfg.ar_coeff = v.parse().map_err(|_| bad())?,
                "death_ratio" => cfg.death_ratio = v.parse().map_err(|_| bad())?,
                "start_date" => cfg.start_date = v.parse().map_err(|_| bad())?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown synthetic config key `{k}` (expected one of {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let coeffs: Vec<String> = self.feature_coeffs.iter().map(|c| c.to_string()).collect();
        format!(
            "counties={}\ndays={}\nseed={}\nweekly_amplitude={}\nweekly_shape={}\nweekly_drift={}\nnoise_std={}\nfeature_coeffs={}\nstatic_features={}\nbase_level={}\nar_coeff={}\ndeath_ratio={}\nstart_date={}\n",
            self.counties,
            self.days,
            self.seed,
            self.weekly_amplitude,
            self.weekly_shape,
            self.weekly_drift,
            self.noise_std,
            coeffs.join(","),
            self.static_features,
            self.base_level,
            self.ar_coeff,
            self.death_ratio,
            self.start_date
        )
    }
}

/// Names of the generated observed features.
pub fn synthetic_feature_name(k: usize) -> String {
    format!("obs_{k}")
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeaturePanel> {
    if cfg.counties == 0 || cfg.days == 0 {
        return Err(Error::InvalidArgument("counties and days must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.ar_coeff.abs()) {
        return Err(Error::InvalidArgument("ar_coeff must lie in (-1, 1)".into()));
    }
    if !(0.0..=1.0).contains(&cfg.weekly_drift) {
        return Err(Error::InvalidArgument("weekly_drift must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c_n, t_n, k_n) = (cfg.counties, cfg.days, cfg.feature_coeffs.len());
    let dates: Vec<NaiveDate> = (0..t_n).map(|t| cfg.start_date + Days::new(t as u64)).collect();

    let statics: Vec<f64> = (0..c_n * cfg.static_features).map(|_| rng.random::<f64>()).collect();
    let innovation = (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt();
    let drift_innovation = ((1.0 - cfg.weekly_drift * cfg.weekly_drift) / 2.0).sqrt();
    let mut dynamic = Cube::zeros(c_n, t_n, k_n);
    let mut targets = Cube::zeros(c_n, t_n, 2);
    for c in 0..c_n {
        let level = if cfg.static_features > 0 {
            0.5 + statics[c * cfg.static_features]
        } else {
            rng.random_range(0.5..1.5)
        };
        let base = cfg.base_level * level;
        let mut profile: [f64; 7] = match cfg.weekly_shape {
            WeeklyShape::Sine => {
                let phase = rng.random_range(0.0..2.0 * PI);
                std::array::from_fn(|d| (2.0 * PI * d as f64 / 7.0 + phase).sin())
            }
            WeeklyShape::Random | WeeklyShape::Drifting => {
                let mut z: [f64; 7] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let mean = z.iter().sum::<f64>() / 7.0;
                z.iter_mut().for_each(|v| *v -= mean);
                let rms = (z.iter().map(|v| v * v).sum::<f64>() / 7.0).sqrt();
                // a unit sine over the seven weekdays has RMS 1/√2
                z.iter_mut().for_each(|v| *v /= rms * 2f64.sqrt());
                z
            }
        };
        let mut state: Vec<f64> = (0..k_n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (t, &date) in dates.iter().enumerate() {
            if t > 0 {
                for s in state.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *s = cfg.ar_coeff * *s + innovation * e;
                }
            }
            let dow = day_of_week(date) as usize;
            if cfg.weekly_shape == WeeklyShape::Drifting && t >= 7 {
                let z: f64 = StandardNormal.sample(&mut rng);
                profile[dow] = cfg.weekly_drift * profile[dow] + drift_innovation * z;
            }
            let season = cfg.weekly_amplitude * profile[dow];
            let mut y = base + season;
            for (k, (&beta, &x)) in cfg.feature_coeffs.iter().zip(&state).enumerate() {
                dynamic.set(c, t, k, x);
                y += beta * x;
            }
            let eta: f64 = StandardNormal.sample(&mut rng);
            y += cfg.noise_std * eta;
            targets.set(c, t, 0, y);
            targets.set(c, t, 1, cfg.death_ratio * y);
        }
    }
    FeaturePanel::new(
        (0..c_n).map(|c| format!("{:05}", 10001 + c)).collect(),
        dates,
        (0..k_n).map(synthetic_feature_name).collect(),
        (0..cfg.static_features).map(|j| format!("static_{j}")).collect(),
        vec!["cases".into(), "deaths".into()],
        dynamic,
        statics,
        targets,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum();
        cov / var
    }

    #[test]
    fn same_seed_same_panel() {
        let cfg = SynthConfig {
            counties: 4,
            days: 50,
            seed: 17,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weekly_signal_dominates_lag_seven() {
        let cfg = SynthConfig {
            counties: 3,
            days: 200,
            seed: 5,
            ..Default::default()
        };
        let p = generate_synthetic(&cfg).unwrap();
        for c in 0..3 {
            let series: Vec<f64> = (0..200).map(|t| p.targets.get(c, t, 0)).collect();
            assert!(autocorr(&series, 7) > autocorr(&series, 5));
        }
    }

    #[test]
    fn noiseless_featureless_target_is_base_plus_sinusoid() {
        let cfg = SynthConfig {
            counties: 2,
            days: 21,
            seed: 3,
            noise_std: 0.0,
            feature_coeffs: vec![0.0, 0.0],
            ..Default::default()
        };
        let p = generate_synthetic(&cfg).unwrap();
        for c in 0..2 {
            // base + A sin(·) has period 7 and mean base over any 7 days
            let y: Vec<f64> = (0..21).map(|t| p.targets.get(c, t, 0)).collect();
            for t in 0..14 {
                assert!((y[t] - y[t + 7]).abs() < 1e-9);
            }
            let base = cfg.base_level * (0.5 + p.static_value(c, 0));
            let mean = y[..7].iter().sum::<f64>() / 7.0;
            assert!((mean - base).abs() < 1e-9);
            let amp = y[..7].iter().map(|v| (v - base).abs()).fold(0.0, f64::max);
            assert!(amp <= cfg.weekly_amplitude + 1e-9);
        }
    }

    #[test]
    fn drifting_profile_decorrelates_over_weeks() {
        let cfg = SynthConfig {
            counties: 1,
            days: 7 * 400,
            seed: 9,
            weekly_shape: WeeklyShape::Drifting,
            weekly_drift: 0.9,
            noise_std: 0.0,
            feature_coeffs: vec![],
            ..Default::default()
        };
        let p = generate_synthetic(&cfg).unwrap();
        let series: Vec<f64> = (0..cfg.days).map(|t| p.targets.get(0, t, 0)).collect();
        let r7 = autocorr(&series, 7);
        let r70 = autocorr(&series, 70);
        assert!((r7 - 0.9).abs() < 0.1, "{r7}");
        assert!(r70.abs() < 0.5 && r70 < r7 - 0.3, "{r70}");
        let same = generate_synthetic(&SynthConfig {
            weekly_drift: 1.0,
            ..cfg.clone()
        })
        .unwrap();
        for t in 0..cfg.days - 7 {
            assert!((same.targets.get(0, t, 0) - same.targets.get(0, t + 7, 0)).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_sizes_and_keys() {
        assert!(generate_synthetic(&SynthConfig {
            counties: 0,
            ..Default::default()
        })
        .is_err());
        assert!(SynthConfig::parse("counties=3\nbogus=1\n").is_err());
        let cfg = SynthConfig::parse("counties=3\ndays=40 # short\nfeature_coeffs=1,2,3\n").unwrap();
        assert_eq!((cfg.counties, cfg.days), (3, 40));
        assert_eq!(cfg.feature_coeffs, vec![1.0, 2.0, 3.0]);
        assert_eq!(SynthConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
