use std::fmt::Write as _;

use super::{train, TrainConfig, TrainReport};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Candidate values per tuned hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub learning_rate: Vec<f64>,
    pub d_model: Vec<usize>,
    pub heads: Vec<usize>,
    pub grad_clip_norm: Vec<f64>,
}

impl Default for HyperGrid {
    /// learning rate {1e-3, 1e-4}, hidden size {16, 32, 64}, heads {1, 4},
    /// clip norm {0.01, 1.0}.
    fn default() -> Self {
        HyperGrid {
            learning_rate: vec![1e-3, 1e-4],
            d_model: vec![16, 32, 64],
            heads: vec![1, 4],
            grad_clip_norm: vec![0.01, 1.0],
        }
    }
}

impl HyperGrid {
    /// Cartesian product in nesting order learning rate → d_model → heads →
    /// clip norm, applied on top of the base configurations.
    pub fn expand(&self, model: &ModelConfig, train: &TrainConfig) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.learning_rate {
            for &d in &self.d_model {
                for &h in &self.heads {
                    for &clip in &self.grad_clip_norm {
                        out.push(GridPoint {
                            model: ModelConfig {
                                d_model: d,
                                heads: h,
                                ..model.clone()
                            },
                            train: TrainConfig {
                                learning_rate: lr,
                                grad_clip_norm: clip,
                                ..train.clone()
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    /// Best validation loss per point; `+∞` for points that failed or
    /// diverged.
    pub val_losses: Vec<f64>,
    pub reports: Vec<Option<TrainReport>>,
    pub errors: Vec<Option<String>>,
    pub best: usize,
}

impl GridResult {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }

    /// `index,learning_rate,d_model,heads,grad_clip_norm,val_loss,best,error`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,learning_rate,d_model,heads,grad_clip_norm,val_loss,best,error\n");
        for (i, p) in self.points.iter().enumerate() {
            let err = self.errors[i].as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{},{},{err}",
                p.train.learning_rate,
                p.model.d_model,
                p.model.heads,
                p.train.grad_clip_norm,
                self.val_losses[i],
                u8::from(i == self.best)
            );
        }
        s
    }
}

/// Trains every point and picks the lowest validation loss; ties go to the
/// earlier point. A point whose training errors (for example on non-finite
/// gradients) scores `+∞`.
pub fn grid_search(points: &[GridPoint], train_windows: &WindowBatch, validation: &WindowBatch) -> Result<GridResult> {
    if points.is_empty() {
        return Err(Error::Empty("hyperparameter grid is empty".into()));
    }
    let mut val_losses = Vec::with_capacity(points.len());
    let mut reports = Vec::with_capacity(points.len());
    let mut errors = Vec::with_capacity(points.len());
    for p in points {
        match train(train_windows, validation, &p.model, &p.train) {
            Ok((_, report)) => {
                let v = report.best_val_loss();
                val_losses.push(if v.is_finite() { v } else { f64::INFINITY });
                reports.push(Some(report));
                errors.push(None);
            }
            Err(e) => {
                val_losses.push(f64::INFINITY);
                reports.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    Ok(GridResult {
        points: points.to_vec(),
        val_losses,
        reports,
        errors,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, tiny_panel, WindowSpec};

    fn batches() -> (WindowBatch, WindowBatch) {
        let panel = tiny_panel(2, 12);
        let mut all = make_windows(&panel, &WindowSpec::new(4, 3).unwrap()).unwrap();
        all.past.iter_mut().for_each(|v| *v = (*v * 0.01).fract());
        all.targets.iter_mut().for_each(|v| *v = (*v * 0.01).fract());
        let val: Vec<usize> = vec![0, all.len() - 1];
        let train: Vec<usize> = (1..all.len() - 1).collect();
        (all.select(&train), all.select(&val))
    }

    #[test]
    fn default_grid_has_24_points() {
        let g = HyperGrid::default().expand(&ModelConfig::default(), &TrainConfig::default());
        assert_eq!(g.len(), 24);
        assert_eq!(g[0].train.learning_rate, 1e-3);
        assert_eq!(g[0].model.d_model, 16);
    }

    #[test]
    fn singleton_grid_and_divergence() {
        let (train, val) = batches();
        let model = ModelConfig::for_batch(&train, 4, 1, 0.0, 0);
        let good = GridPoint {
            model: model.clone(),
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 4,
                ..Default::default()
            },
        };
        let single = grid_search(std::slice::from_ref(&good), &train, &val).unwrap();
        assert_eq!(single.best, 0);
        assert_eq!(single.best_point(), &good);

        let diverging = GridPoint {
            model,
            train: TrainConfig {
                learning_rate: 1e300,
                grad_clip_norm: 1e300,
                ..good.train.clone()
            },
        };
        let r = grid_search(&[diverging, good.clone()], &train, &val).unwrap();
        assert_eq!(r.val_losses[0], f64::INFINITY);
        assert_eq!(r.best, 1);
        let argmin = r
            .val_losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(r.best, argmin);
        assert!(r.to_csv().contains(",1,"));
        assert!(grid_search(&[], &train, &val).is_err());
    }
}
