use std::fmt::Write as _;

use super::{normalized_morris, MorrisConfig, MorrisTarget};
use crate::data::{prepare, FeaturePanel, PrepareConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{train, TrainConfig};

/// One model per static subgroup column, each trained with that column as
/// its only static input.
#[derive(Debug, Clone)]
pub struct SubgroupConfig {
    pub subgroups: Vec<String>,
    /// Observed feature measured alongside every subgroup.
    pub shared_feature: Option<String>,
    pub prepare: PrepareConfig,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub train: TrainConfig,
    pub delta: f64,
    pub target: MorrisTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupRow {
    pub subgroup: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub subgroup_index: f64,
    pub shared_index: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupReport {
    pub delta: f64,
    pub shared_feature: Option<String>,
    /// Sorted by descending subgroup index; failed rows last.
    pub rows: Vec<SubgroupRow>,
}

impl SubgroupReport {
    pub fn to_csv(&self) -> String {
        let shared = self.shared_feature.as_deref().unwrap_or("shared");
        let mut s = format!("subgroup,train_loss,val_loss,scaled_index,{shared}_scaled_index,delta,error\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.subgroup,
                r.train_loss,
                r.val_loss,
                r.subgroup_index,
                opt(r.shared_index),
                self.delta,
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }
}

fn run_one(raw: &FeaturePanel, name: &str, cfg: &SubgroupConfig) -> Result<SubgroupRow> {
    let panel = raw.with_static_subset(&[name])?;
    let prepared = prepare(&panel, &cfg.prepare)?;
    let model_cfg = ModelConfig::for_batch(&prepared.train, cfg.d_model, cfg.heads, cfg.dropout, cfg.train.seed);
    let (model, report) = train(&prepared.train, &prepared.validation, &model_cfg, &cfg.train)?;
    let morris = |feature: &str| -> Result<f64> {
        let mc = MorrisConfig {
            feature: feature.to_string(),
            deltas: vec![cfg.delta],
            target: cfg.target,
            range: cfg.prepare.split.train,
        };
        let r = normalized_morris(&model, &prepared.scaled, &prepared.cleaned, &cfg.prepare.window, &mc)?;
        Ok(r.rows[0].scaled_index)
    };
    let best = &report.epochs[report.best_epoch];
    Ok(SubgroupRow {
        subgroup: name.to_string(),
        train_loss: best.train_loss,
        val_loss: best.val_loss,
        subgroup_index: morris(name)?,
        shared_index: cfg.shared_feature.as_deref().map(morris).transpose()?,
        error: None,
    })
}

/// Trains and measures every subgroup in turn. A subgroup whose training or
/// analysis fails is reported with its error; the others proceed.
pub fn subgroup_experiment(raw: &FeaturePanel, cfg: &SubgroupConfig) -> Result<SubgroupReport> {
    if cfg.subgroups.is_empty() {
        return Err(Error::Empty("no subgroups given".into()));
    }
    let mut rows: Vec<SubgroupRow> = cfg
        .subgroups
        .iter()
        .map(|name| {
            run_one(raw, name, cfg).unwrap_or_else(|e| SubgroupRow {
                subgroup: name.clone(),
                train_loss: f64::NAN,
                val_loss: f64::NAN,
                subgroup_index: f64::NAN,
                shared_index: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    rows.sort_by(|a, b| match (a.error.is_some(), b.error.is_some()) {
        (false, false) => b.subgroup_index.total_cmp(&a.subgroup_index),
        (x, y) => x.cmp(&y),
    });
    Ok(SubgroupReport {
        delta: cfg.delta,
        shared_feature: cfg.shared_feature.clone(),
        rows,
    })
}
