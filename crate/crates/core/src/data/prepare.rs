use super::outliers::{clean_outliers, CleanReport, DEFAULT_IQR_MULTIPLIER};
use super::panel::FeaturePanel;
use super::scaler::{fit_scaler, ScalerState};
use super::split::{split, PanelSplits, SplitSpec};
use super::windows::{make_windows, WindowBatch, WindowSpec};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub split: SplitSpec,
    pub window: WindowSpec,
    /// IQR multiplier for outlier clipping; `None` skips cleaning.
    pub iqr_multiplier: Option<f64>,
}

impl PrepareConfig {
    pub fn new(split: SplitSpec, window: WindowSpec) -> Self {
        PrepareConfig {
            split,
            window,
            iqr_multiplier: Some(DEFAULT_IQR_MULTIPLIER),
        }
    }
}

/// A panel after cleaning, scaling, splitting and windowing.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Cleaned panel in original units.
    pub cleaned: FeaturePanel,
    /// Cleaned panel in scaled units.
    pub scaled: FeaturePanel,
    pub scaler: ScalerState,
    pub clean_report: CleanReport,
    /// Scaled split panels, each with `past_len` days of leading context.
    pub splits: PanelSplits,
    pub train: WindowBatch,
    pub validation: WindowBatch,
    pub test: WindowBatch,
}

/// Cleans outliers, fits min-max scaling on the training range, splits with
/// encoder context and builds the windows of each split.
pub fn prepare(panel: &FeaturePanel, cfg: &PrepareConfig) -> Result<Prepared> {
    cfg.split.validate()?;
    cfg.window.validate()?;
    let (cleaned, clean_report) = match cfg.iqr_multiplier {
        Some(m) => clean_outliers(panel, m)?,
        None => (panel.clone(), CleanReport::default()),
    };
    let scaler = fit_scaler(&cleaned, cfg.split.train.start, cfg.split.train.end)?;
    let scaled = scaler.apply(&cleaned)?;
    let splits = split(&scaled, &cfg.split, cfg.window.past_len)?;
    let train = make_windows(&splits.train, &cfg.window)?;
    let validation = make_windows(&splits.validation, &cfg.window)?;
    let test = make_windows(&splits.test, &cfg.window)?;
    Ok(Prepared {
        cleaned,
        scaled,
        scaler,
        clean_report,
        splits,
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    #[test]
    fn windows_per_split() {
        let panel = generate_synthetic(&SynthConfig {
            counties: 3,
            days: 120,
            ..Default::default()
        })
        .unwrap();
        let spec = SplitSpec::tail(&panel.dates, 15, 15).unwrap();
        let p = prepare(&panel, &PrepareConfig::new(spec, WindowSpec::default())).unwrap();
        assert_eq!(p.test.len(), 3);
        assert_eq!(p.validation.len(), 3);
        assert_eq!(p.train.len(), 3 * (90 - 28 + 1));
        let train_max = p
            .splits
            .train
            .targets
            .feature_values(0)
            .into_iter()
            .fold(f64::MIN, f64::max);
        assert!((train_max - 1.0).abs() < 1e-12);
    }
}
