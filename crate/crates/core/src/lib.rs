//! Temporal fusion transformer forecasting for county panels, with
//! spatio-temporal Morris sensitivity and attention analysis.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sensitivity;
pub mod train;

pub use data::{FeaturePanel, FeatureRole, ScalerState, SplitSpec, WindowBatch, WindowSpec};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, Tft};
pub use sensitivity::{MorrisConfig, MorrisResult};
pub use train::{TrainConfig, TrainReport};
