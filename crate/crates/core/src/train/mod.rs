//! MSE training with Adam, global-norm gradient clipping, seeded shuffling
//! and validation-based model selection.

mod grid;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Matrix;
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Tft};

pub use grid::{grid_search, GridPoint, GridResult, HyperGrid};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Random subset of training windows drawn each epoch (all when `None`).
    pub windows_per_epoch: Option<usize>,
    /// Windows per gradient work unit; units run in parallel and are summed
    /// in a fixed order, so results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 10,
            grad_clip_norm: 1.0,
            seed: 0,
            windows_per_epoch: None,
            chunk_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and chunk_size must be at least 1".into(),
            ));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be at least 1".into()));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::InvalidArgument("windows_per_epoch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    /// `epoch,train_loss,val_loss,seconds`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.3}", e.epoch, e.train_loss, e.val_loss, e.seconds);
        }
        s
    }
}

/// Mean of squared differences.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("mse of empty arrays".into()));
    }
    let s: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / predictions.len() as f64)
}

/// Train-mode MSE over `batch` and its exact gradient.
///
/// The batch is split into chunks of `chunk_size` windows, each with its own
/// dropout stream derived from `dropout_seed`; chunk gradients are computed in
/// parallel and summed in chunk order.
pub fn backward(model: &Tft, batch: &WindowBatch, dropout_seed: u64, chunk_size: usize) -> Result<(f64, Vec<Matrix>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch has no windows".into()));
    }
    let cells = (n * model.config().horizon * model.config().target_features) as f64;
    let scale = 1.0 / cells;
    let chunk_size = chunk_size.max(1);
    let bounds: Vec<(usize, usize)> = (0..n)
        .step_by(chunk_size)
        .map(|s| (s, (s + chunk_size).min(n)))
        .collect();
    let parts: Vec<Result<(f64, Vec<Matrix>)>> = bounds
        .par_iter()
        .enumerate()
        .map(|(k, &(s, e))| {
            let sub = if s == 0 && e == n {
                batch.clone()
            } else {
                batch.select(&(s..e).collect::<Vec<_>>())
            };
            model.scaled_loss_and_grads(&sub, scale, mix_seed(dropout_seed, k as u64))
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap()?;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Ok((loss, grads))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Clips `grads` to `cfg.grad_clip_norm` and applies one Adam update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &mut [Matrix],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    clip_global_norm(grads, cfg.grad_clip_norm);
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            layer: format!("{} (clipped gradient)", params.names()[i]),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = cfg.learning_rate;
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Eval-mode MSE over a whole batch, chunked for memory.
pub fn evaluate_loss(model: &Tft, batch: &WindowBatch) -> Result<f64> {
    let pred = model.predict(batch)?;
    mse_loss(&pred, &batch.targets)
}

/// Initializes a model from `model_cfg` and trains it.
pub fn train(
    train: &WindowBatch,
    validation: &WindowBatch,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Tft, TrainReport)> {
    train_from(Tft::new(model_cfg.clone())?, train, validation, cfg)
}

/// Trains `model` and returns the parameters of the epoch with the lowest
/// validation loss. Training stops after `max_epochs` or once
/// `early_stop_patience` epochs pass without improvement.
pub fn train_from(
    mut model: Tft,
    train: &WindowBatch,
    validation: &WindowBatch,
    cfg: &TrainConfig,
) -> Result<(Tft, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split yields no windows".into()));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation split yields no windows".into()));
    }
    model.config().check_batch(train)?;
    model.config().check_batch(validation)?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let take = cfg.windows_per_epoch.map_or(order.len(), |w| w.min(order.len()));
        let mut weighted = 0.0;
        for idx in order[..take].chunks(cfg.batch_size) {
            let batch = train.select(idx);
            let dropout_seed: u64 = rng.random();
            let (loss, mut grads) = backward(&model, &batch, dropout_seed, cfg.chunk_size)?;
            adam_step(model.params_mut(), &mut grads, &mut adam, cfg)?;
            weighted += loss * idx.len() as f64;
        }
        let train_loss = weighted / take as f64;
        let val_loss = evaluate_loss(&model, validation)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch runs");
    let model = Tft::from_params(model.config().clone(), params)?;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, tiny_panel, WindowSpec};
    use proptest::prelude::*;

    fn tiny_batches() -> (WindowBatch, WindowBatch) {
        let panel = tiny_panel(3, 14);
        let mut all = make_windows(&panel, &WindowSpec::new(4, 3).unwrap()).unwrap();
        all.past.iter_mut().for_each(|v| *v = (*v * 0.01).fract());
        all.targets.iter_mut().for_each(|v| *v = (*v * 0.01).fract());
        all.statics.iter_mut().for_each(|v| *v += 0.2);
        let train: Vec<usize> = (0..all.len()).filter(|i| i % 4 != 0).collect();
        let val: Vec<usize> = (0..all.len()).filter(|i| i % 4 == 0).collect();
        (all.select(&train), all.select(&val))
    }

    fn tiny_cfg(batch: &WindowBatch) -> ModelConfig {
        ModelConfig::for_batch(batch, 8, 2, 0.1, 1)
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn mse_is_homogeneous(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40), c in -5.0f64..5.0) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let base = mse_loss(&p, &t).unwrap();
            let ps: Vec<f64> = p.iter().map(|x| x * c).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * c).collect();
            let scaled = mse_loss(&ps, &ts).unwrap();
            prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        }

        #[test]
        fn clipping_never_increases_norm(v in prop::collection::vec(-100.0f64..100.0, 1..30), clip in 0.01f64..50.0) {
            let mut g = vec![Matrix::from_vec(1, v.len(), v)];
            let before = global_norm(&g);
            clip_global_norm(&mut g, clip);
            let after = global_norm(&g);
            prop_assert!(after <= before + 1e-12);
            prop_assert!(after <= clip * (1.0 + 1e-12));
        }
    }

    #[test]
    fn clip_to_unit_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![6.0, 8.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }

    /// Two Adam steps on one scalar, computed by hand.
    #[test]
    fn adam_matches_hand_recurrence() {
        let mut params = ParamStore::new();
        params.push("x", Matrix::from_vec(1, 1, vec![1.0]));
        let mut state = AdamState::new(&params);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            grad_clip_norm: 100.0,
            ..Default::default()
        };
        adam_step(&mut params, &mut [Matrix::from_vec(1, 1, vec![0.5])], &mut state, &cfg).unwrap();
        adam_step(&mut params, &mut [Matrix::from_vec(1, 1, vec![-0.2])], &mut state, &cfg).unwrap();
        // step 1: m=0.05, v=0.00025, m̂=0.5, v̂=0.25 → x = 1 - 0.1·0.5/(0.5+1e-8)
        let x1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        // step 2: m=0.9·0.05+0.1·(-0.2)=0.025, v=0.999·0.00025+0.001·0.04=0.00028975
        let m_hat = 0.025 / (1.0 - 0.81);
        let v_hat: f64 = 0.00028975 / (1.0 - 0.998001);
        let x2 = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!(
            (params.get(0).get(0, 0) - x2).abs() < 1e-12,
            "{} vs {x2}",
            params.get(0).get(0, 0)
        );
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = ParamStore::new();
        params.push("w", Matrix::from_vec(1, 3, vec![0.1, -0.2, 0.3]));
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &mut [Matrix::zeros(1, 3)],
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn chunked_backward_matches_single_pass() {
        let (train, _) = tiny_batches();
        let model = Tft::new(ModelConfig {
            dropout: 0.0,
            ..tiny_cfg(&train)
        })
        .unwrap();
        let (l1, g1) = backward(&model, &train, 0, 1000).unwrap();
        let (l2, g2) = backward(&model, &train, 0, 3).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn duplicated_window_counts_twice() {
        let (train, _) = tiny_batches();
        let model = Tft::new(ModelConfig {
            dropout: 0.0,
            ..tiny_cfg(&train)
        })
        .unwrap();
        let one = train.select(&[0]);
        let two = train.select(&[0, 0]);
        let three = train.select(&[0, 1]);
        let (_, g_one) = backward(&model, &one, 0, 8).unwrap();
        let (_, g_two) = backward(&model, &two, 0, 8).unwrap();
        for (a, b) in g_one.iter().zip(&g_two) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        // mean over [w0, w1] = ½ grad(w0) + ½ grad(w1)
        let (_, g1) = backward(&model, &train.select(&[1]), 0, 8).unwrap();
        let (_, g01) = backward(&model, &three, 0, 8).unwrap();
        for ((a, b), c) in g_one.iter().zip(&g1).zip(&g01) {
            let mut avg = a.clone();
            avg.add_assign(b);
            avg.scale_in_place(0.5);
            assert!(avg.max_abs_diff(c) < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let (train, val) = tiny_batches();
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 8,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let (m1, r1) = super::train(&train, &val, &tiny_cfg(&train), &cfg).unwrap();
        let (m2, r2) = super::train(&train, &val, &tiny_cfg(&train), &cfg).unwrap();
        assert_eq!(r1.train_losses(), r2.train_losses());
        assert_eq!(r1.val_losses(), r2.val_losses());
        assert_eq!(m1.params(), m2.params());
        let best = r1.best_val_loss();
        assert!(r1.val_losses().iter().all(|&v| best <= v));
        assert!((evaluate_loss(&m1, &val).unwrap() - best).abs() < 1e-12);
        assert_eq!(r1.to_csv().lines().count(), r1.epochs.len() + 1);
    }

    #[test]
    fn zero_patience_trains_one_epoch() {
        let (train, val) = tiny_batches();
        let cfg = TrainConfig {
            max_epochs: 10,
            early_stop_patience: 0,
            ..Default::default()
        };
        let (_, report) = super::train(&train, &val, &tiny_cfg(&train), &cfg).unwrap();
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let (train, val) = tiny_batches();
        let empty = train.select(&[]);
        assert!(super::train(&empty, &val, &tiny_cfg(&train), &TrainConfig::default()).is_err());
    }
}
