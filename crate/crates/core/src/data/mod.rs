//! Panel ingestion, cleaning, scaling, splitting and windowing.

mod known;
mod load;
mod outliers;
mod panel;
mod prepare;
mod scaler;
mod split;
mod synth;
mod windows;

pub use known::{derive_known_future, KnownFeatures, KNOWN_FEATURES};
pub use load::{csv_files, load_panel, write_panel, LoadReport, PanelSources};
pub use outliers::{
    clean_outliers, compute_outlier_bounds, quantile_sorted, CleanReport, FeatureCleanStats, OutlierBounds,
    DEFAULT_IQR_MULTIPLIER,
};
pub use panel::{Cube, FeaturePanel, FeatureRole};
pub use prepare::{prepare, PrepareConfig, Prepared};
pub use scaler::{apply_scaler, fit_scaler, MinMax, ScalerState};
pub use split::{split, DateRange, PanelSplits, SplitSpec};
pub use synth::{generate_synthetic, synthetic_feature_name, SynthConfig, WeeklyShape};
pub use windows::{make_windows, WindowBatch, WindowMeta, WindowSpec};

pub(crate) use outliers::mean_std;

#[cfg(test)]
pub(crate) use panel::tests::tiny_panel;
