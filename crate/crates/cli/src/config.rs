//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use stsens_core::data::{DateRange, FeaturePanel, SplitSpec, SynthConfig, WindowSpec};
use stsens_core::model::ModelConfig;
use stsens_core::sensitivity::MorrisTarget;
use stsens_core::train::{HyperGrid, TrainConfig};
use stsens_core::WindowBatch;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.dir", ""),
    ("checkpoint", ""),
    ("split.mode", "custom"),
    ("split.val_days", "30"),
    ("split.test_days", "30"),
    ("split.train_start", ""),
    ("split.train_end", ""),
    ("split.val_start", ""),
    ("split.val_end", ""),
    ("split.test_start", ""),
    ("split.test_end", ""),
    ("window.past_len", "13"),
    ("window.horizon", "15"),
    ("clean.iqr_multiplier", "7.5"),
    ("model.d_model", "16"),
    ("model.heads", "4"),
    ("model.dropout", "0.0"),
    ("train.learning_rate", "0.003"),
    ("train.batch_size", "16"),
    ("train.max_epochs", "15"),
    ("train.patience", "10"),
    ("train.grad_clip_norm", "1.0"),
    ("train.windows_per_epoch", "2048"),
    ("train.chunk_size", "32"),
    ("morris.features", ""),
    ("morris.deltas", "0.005"),
    ("morris.target", "cases"),
    ("morris.range", "train"),
    ("grid.learning_rate", "0.001,0.0001"),
    ("grid.d_model", "16,32,64"),
    ("grid.heads", "1,4"),
    ("grid.grad_clip_norm", "0.01,1.0"),
    ("subgroup.columns", ""),
    ("subgroup.shared_feature", ""),
];

/// Keys of the synthetic generator, minus its seed (the run seed is used).
fn synth_defaults() -> Vec<(String, String)> {
    let base = SynthConfig {
        weekly_amplitude: 30.0,
        weekly_shape: stsens_core::data::WeeklyShape::Drifting,
        ..Default::default()
    };
    base.to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| *k != "seed")
        .map(|(k, v)| (format!("synth.{k}"), v.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(synth_defaults());
        RunConfig { values }
    }
}

impl RunConfig {
    /// Defaults overridden by `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key=value, got `{line}`", i + 1))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| anyhow!("invalid value `{v}` for config key `{key}`: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| anyhow!("invalid entry `{s}` in config key `{key}`: {e}"))
            })
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        self.path("data.dir")
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        self.path("checkpoint")
    }

    /// Every key, sorted, one `key=value` per line.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let mut map: BTreeMap<String, String> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("synth.").map(|k| (k.to_string(), v.clone())))
            .collect();
        map.insert("seed".into(), self.raw("seed").into());
        Ok(SynthConfig::from_map(&map)?)
    }

    pub fn split(&self, panel: &FeaturePanel) -> Result<SplitSpec> {
        match self.raw("split.mode") {
            "primary" => Ok(SplitSpec::primary()),
            "custom" => {
                let dates = [
                    "split.train_start",
                    "split.train_end",
                    "split.val_start",
                    "split.val_end",
                    "split.test_start",
                    "split.test_end",
                ];
                if dates.iter().all(|k| self.raw(k).is_empty()) {
                    return Ok(SplitSpec::tail(
                        &panel.dates,
                        self.get("split.val_days")?,
                        self.get("split.test_days")?,
                    )?);
                }
                let d = |k: &str| self.get::<chrono::NaiveDate>(k);
                let spec = SplitSpec {
                    train: DateRange::new(d(dates[0])?, d(dates[1])?),
                    validation: DateRange::new(d(dates[2])?, d(dates[3])?),
                    test: DateRange::new(d(dates[4])?, d(dates[5])?),
                };
                spec.validate()?;
                Ok(spec)
            }
            other => bail!("invalid value `{other}` for config key `split.mode` (expected primary or custom)"),
        }
    }

    pub fn window(&self) -> Result<WindowSpec> {
        Ok(WindowSpec::new(
            self.get("window.past_len")?,
            self.get("window.horizon")?,
        )?)
    }

    pub fn iqr_multiplier(&self) -> Result<Option<f64>> {
        match self.raw("clean.iqr_multiplier") {
            "none" | "" => Ok(None),
            _ => Ok(Some(self.get("clean.iqr_multiplier")?)),
        }
    }

    pub fn model(&self, batch: &WindowBatch) -> Result<ModelConfig> {
        let cfg = ModelConfig::for_batch(
            batch,
            self.get("model.d_model")?,
            self.get("model.heads")?,
            self.get("model.dropout")?,
            self.seed()?,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let wpe: usize = self.get("train.windows_per_epoch")?;
        let cfg = TrainConfig {
            learning_rate: self.get("train.learning_rate")?,
            batch_size: self.get("train.batch_size")?,
            max_epochs: self.get("train.max_epochs")?,
            early_stop_patience: self.get("train.patience")?,
            grad_clip_norm: self.get("train.grad_clip_norm")?,
            seed: self.seed()?,
            windows_per_epoch: (wpe > 0).then_some(wpe),
            chunk_size: self.get("train.chunk_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<HyperGrid> {
        Ok(HyperGrid {
            learning_rate: self.list("grid.learning_rate")?,
            d_model: self.list("grid.d_model")?,
            heads: self.list("grid.heads")?,
            grad_clip_norm: self.list("grid.grad_clip_norm")?,
        })
    }

    pub fn morris_target(&self, panel: &FeaturePanel) -> Result<MorrisTarget> {
        match self.raw("morris.target") {
            "all" => Ok(MorrisTarget::AllTargets),
            name => panel
                .target_index(name)
                .map(MorrisTarget::Column)
                .ok_or_else(|| anyhow!("invalid value `{name}` for config key `morris.target`: no such target")),
        }
    }

    pub fn morris_range(&self, split: &SplitSpec) -> Result<DateRange> {
        match self.raw("morris.range") {
            "train" => Ok(split.train),
            "validation" => Ok(split.validation),
            "test" => Ok(split.test),
            other => {
                bail!("invalid value `{other}` for config key `morris.range` (expected train, validation or test)")
            }
        }
    }
}
