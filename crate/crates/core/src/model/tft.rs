use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Mode, ModelConfig};
use super::layers::{AttentionIds, Dropout, EmbeddingIds, GateAddNormIds, GrnIds, LstmIds, VsnIds};
use super::params::{Init, ParamStore};
use crate::autodiff::{Matrix, Tape, Var};
use crate::data::WindowBatch;
use crate::error::{Error, Result};

/// Windows per forward pass when [`Tft::predict`] splits a large batch.
pub const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone)]
struct Layout {
    static_emb: EmbeddingIds,
    static_vsn: VsnIds,
    ctx_select: GrnIds,
    ctx_enrich: GrnIds,
    ctx_hidden: GrnIds,
    ctx_cell: GrnIds,
    past_emb: EmbeddingIds,
    future_emb: EmbeddingIds,
    past_vsn: VsnIds,
    future_vsn: VsnIds,
    encoder: LstmIds,
    decoder: LstmIds,
    lstm_gate: GateAddNormIds,
    enrichment: GrnIds,
    attention: AttentionIds,
    attention_gate: GateAddNormIds,
    positionwise: GrnIds,
    output_gate: GateAddNormIds,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn build(cfg: &ModelConfig, init: &mut Init<'_>) -> Self {
        let d = cfg.d_model;
        Layout {
            static_emb: EmbeddingIds::new(init, "static.embedding", cfg.static_features, d),
            static_vsn: VsnIds::new(init, "static.vsn", cfg.static_features, d, None),
            ctx_select: GrnIds::new(init, "context.selection", d, d, d, None),
            ctx_enrich: GrnIds::new(init, "context.enrichment", d, d, d, None),
            ctx_hidden: GrnIds::new(init, "context.hidden", d, d, d, None),
            ctx_cell: GrnIds::new(init, "context.cell", d, d, d, None),
            past_emb: EmbeddingIds::new(init, "past.embedding", cfg.past_inputs(), d),
            future_emb: EmbeddingIds::new(init, "future.embedding", cfg.future_inputs(), d),
            past_vsn: VsnIds::new(init, "past.vsn", cfg.past_inputs(), d, Some(d)),
            future_vsn: VsnIds::new(init, "future.vsn", cfg.future_inputs(), d, Some(d)),
            encoder: LstmIds::new(init, "encoder", d, d),
            decoder: LstmIds::new(init, "decoder", d, d),
            lstm_gate: GateAddNormIds::new(init, "lstm.gate", d, d, 1),
            enrichment: GrnIds::new(init, "enrichment", d, d, d, Some(d)),
            attention: AttentionIds::new(init, "attention", d, cfg.heads),
            attention_gate: GateAddNormIds::new(init, "attention.gate", d, d, 1),
            positionwise: GrnIds::new(init, "positionwise", d, d, d, None),
            output_gate: GateAddNormIds::new(init, "output.gate", d, d, 1),
            head_w: init.weight("head.w", d, cfg.target_features, d),
            head_b: init.zeros("head.b", 1, cfg.target_features),
        }
    }
}

/// Per-head attention weights `[heads × windows × len × len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub heads: usize,
    pub windows: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

impl AttentionTensor {
    #[inline]
    pub fn get(&self, head: usize, window: usize, i: usize, j: usize) -> f64 {
        self.weights[((head * self.windows + window) * self.len + i) * self.len + j]
    }

    /// Mean over heads, `[windows × len × len]`.
    pub fn head_mean(&self) -> Vec<f64> {
        let block = self.windows * self.len * self.len;
        let mut out = vec![0.0; block];
        for h in 0..self.heads {
            for (o, w) in out.iter_mut().zip(&self.weights[h * block..(h + 1) * block]) {
                *o += w;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Variable-selection weights per role.
#[derive(Debug, Clone, PartialEq)]
pub struct VsnWeights {
    /// `[windows × static_features]`
    pub statics: Vec<f64>,
    /// `[windows × past_len × past_inputs]`
    pub past: Vec<f64>,
    /// `[windows × horizon × future_inputs]`
    pub future: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[windows × horizon × targets]`, scaled units.
    pub predictions: Vec<f64>,
    pub attention: AttentionTensor,
    /// Head-averaged attention `[windows × len × len]`.
    pub mean_attention: Vec<f64>,
    pub vsn: VsnWeights,
}

struct Recorded {
    /// Time-major `[horizon·n × targets]`.
    prediction: Var,
    heads: Vec<Var>,
    static_w: Var,
    past_w: Var,
    future_w: Var,
}

/// The forecasting network with its parameters.
#[derive(Debug, Clone)]
pub struct Tft {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Tft {
    /// Freshly initialized model seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout::build(
            &config,
            &mut Init {
                store: &mut params,
                rng: &mut rng,
            },
        );
        Ok(Tft { config, params, layout })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Tft::new(config)?;
        if template.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (name, m)) in template.params.names().iter().zip(template.params.values()).enumerate() {
            let (got_name, got) = (&params.names()[i], params.get(i));
            if name != got_name || m.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected `{name}` {:?}, found `{got_name}` {:?}",
                    m.shape(),
                    got.shape()
                )));
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                layer: "parameters".into(),
            });
        }
        Ok(Tft {
            layout: template.layout,
            config: template.config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn record<'p>(&'p self, t: &mut Tape<'p>, batch: &WindowBatch, drop: &mut Dropout) -> Recorded {
        let cfg = &self.config;
        let l = &self.layout;
        let n = batch.len();
        let (p_len, f_len) = (cfg.past_len, cfg.horizon);

        t.push_scope("static");
        let statics = t.input(Matrix::from_vec(n, cfg.static_features, batch.statics.clone()));
        let s_emb = l.static_emb.forward(t, statics);
        let (s, static_w) = l.static_vsn.forward(t, s_emb, None, drop);
        t.pop_scope();
        t.push_scope("context");
        let c_select = l.ctx_select.forward(t, s, None, drop);
        let c_enrich = l.ctx_enrich.forward(t, s, None, drop);
        let c_hidden = l.ctx_hidden.forward(t, s, None, drop);
        let c_cell = l.ctx_cell.forward(t, s, None, drop);
        t.pop_scope();

        t.push_scope("past");
        let pf = batch.past_features;
        let past = t.input(Matrix::from_fn(p_len * n, pf, |r, f| batch.past_at(r % n, r / n, f)));
        let p_emb = l.past_emb.forward(t, past);
        let ctx = t.tile_rows(c_select, p_len);
        let (p_sel, past_w) = l.past_vsn.forward(t, p_emb, Some(ctx), drop);
        t.pop_scope();

        t.push_scope("future");
        let ff = batch.future_features;
        let future = t.input(Matrix::from_fn(f_len * n, ff, |r, f| batch.future_at(r % n, r / n, f)));
        let f_emb = l.future_emb.forward(t, future);
        let ctx = t.tile_rows(c_select, f_len);
        let (f_sel, future_w) = l.future_vsn.forward(t, f_emb, Some(ctx), drop);
        t.pop_scope();

        t.push_scope("encoder");
        let (enc, h, c) = l.encoder.forward(t, p_sel, n, p_len, c_hidden, c_cell);
        t.pop_scope();
        t.push_scope("decoder");
        let (dec, _, _) = l.decoder.forward(t, f_sel, n, f_len, h, c);
        t.pop_scope();

        let len = p_len + f_len;
        t.push_scope("lstm_gate");
        let lstm_out = t.concat_rows(&[enc, dec]);
        let selected = t.concat_rows(&[p_sel, f_sel]);
        let phi = l.lstm_gate.forward(t, lstm_out, selected);
        t.pop_scope();

        t.push_scope("enrichment");
        let ctx = t.tile_rows(c_enrich, len);
        let theta = l.enrichment.forward(t, phi, Some(ctx), drop);
        t.pop_scope();

        t.push_scope("attention");
        let (att, heads) = l.attention.forward(t, theta, theta, theta, n, len);
        let delta = l.attention_gate.forward(t, att, theta);
        t.pop_scope();

        t.push_scope("positionwise");
        let psi = l.positionwise.forward(t, delta, None, drop);
        let out = l.output_gate.forward(t, psi, phi);
        t.pop_scope();

        t.push_scope("head");
        let dec_out = t.slice_rows(out, p_len * n, f_len * n);
        let (w, b) = (t.param(l.head_w), t.param(l.head_b));
        let prediction = t.linear(dec_out, w, Some(b));
        t.pop_scope();

        Recorded {
            prediction,
            heads,
            static_w,
            past_w,
            future_w,
        }
    }

    /// Time-major target matrix matching the recorded prediction layout.
    fn target_matrix(&self, batch: &WindowBatch) -> Matrix {
        let n = batch.len();
        Matrix::from_fn(self.config.horizon * n, self.config.target_features, |r, f| {
            batch.target_at(r % n, r / n, f)
        })
    }

    fn unstack_predictions(&self, m: &Matrix, n: usize) -> Vec<f64> {
        let (h_len, tgt) = (self.config.horizon, self.config.target_features);
        let mut out = vec![0.0; n * h_len * tgt];
        for h in 0..h_len {
            for b in 0..n {
                let dst = (b * h_len + h) * tgt;
                out[dst..dst + tgt].copy_from_slice(m.row(h * n + b));
            }
        }
        out
    }

    fn dropout(&self, mode: Mode, seed: u64) -> Dropout {
        Dropout::new(mode, self.config.dropout, seed)
    }

    /// Full forward pass returning predictions, attention and selection
    /// weights. `dropout_seed` only matters in train mode.
    pub fn forward(&self, batch: &WindowBatch, mode: Mode, dropout_seed: u64) -> Result<ForwardOutput> {
        self.config.check_batch(batch)?;
        let n = batch.len();
        let len = self.config.total_len();
        let mut t = Tape::new(self.params.values());
        let mut drop = self.dropout(mode, dropout_seed);
        let rec = self.record(&mut t, batch, &mut drop);
        t.check_finite()?;

        let heads = rec.heads.len();
        let mut weights = Vec::with_capacity(heads * n * len * len);
        for &h in &rec.heads {
            weights.extend_from_slice(t.value(h).data());
        }
        let attention = AttentionTensor {
            heads,
            windows: n,
            len,
            weights,
        };
        let unstack = |v: Var, steps: usize| {
            let m = t.value(v);
            let f = m.cols();
            let mut out = vec![0.0; n * steps * f];
            for s in 0..steps {
                for b in 0..n {
                    let dst = (b * steps + s) * f;
                    out[dst..dst + f].copy_from_slice(m.row(s * n + b));
                }
            }
            out
        };
        let vsn = VsnWeights {
            statics: t.value(rec.static_w).data().to_vec(),
            past: unstack(rec.past_w, self.config.past_len),
            future: unstack(rec.future_w, self.config.horizon),
        };
        Ok(ForwardOutput {
            predictions: self.unstack_predictions(t.value(rec.prediction), n),
            mean_attention: attention.head_mean(),
            attention,
            vsn,
        })
    }

    /// Eval-mode predictions `[windows × horizon × targets]`, computed in
    /// parallel chunks of [`PREDICT_CHUNK`] windows.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        self.config.check_batch(batch)?;
        let n = batch.len();
        let chunks: Vec<Vec<usize>> = (0..n)
            .collect::<Vec<_>>()
            .chunks(PREDICT_CHUNK)
            .map(<[usize]>::to_vec)
            .collect();
        let parts: Vec<Result<Vec<f64>>> = chunks
            .par_iter()
            .map(|idx| {
                let sub = if idx.len() == n {
                    batch.clone()
                } else {
                    batch.select(idx)
                };
                let mut t = Tape::new(self.params.values());
                let rec = self.record(&mut t, &sub, &mut Dropout::off());
                t.check_finite()?;
                Ok(self.unstack_predictions(t.value(rec.prediction), sub.len()))
            })
            .collect();
        let mut out = Vec::with_capacity(n * self.config.horizon * self.config.target_features);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Mean squared error over every prediction cell.
    pub fn loss(&self, batch: &WindowBatch, mode: Mode, dropout_seed: u64) -> Result<f64> {
        let scale = 1.0 / self.cells(batch) as f64;
        self.config.check_batch(batch)?;
        let mut t = Tape::new(self.params.values());
        let mut drop = self.dropout(mode, dropout_seed);
        let rec = self.record(&mut t, batch, &mut drop);
        let loss = t.squared_error(rec.prediction, self.target_matrix(batch), scale);
        t.check_finite()?;
        Ok(t.value(loss).get(0, 0))
    }

    fn cells(&self, batch: &WindowBatch) -> usize {
        batch.len() * self.config.horizon * self.config.target_features
    }

    /// `scale · Σ (ŷ − y)²` in train mode and its gradient with respect to
    /// every parameter.
    pub fn scaled_loss_and_grads(
        &self,
        batch: &WindowBatch,
        scale: f64,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Matrix>)> {
        self.config.check_batch(batch)?;
        let mut t = Tape::new(self.params.values());
        let mut drop = self.dropout(Mode::Train, dropout_seed);
        let rec = self.record(&mut t, batch, &mut drop);
        let loss = t.squared_error(rec.prediction, self.target_matrix(batch), scale);
        t.check_finite()?;
        let grads = t.backward(loss)?;
        let grads = grads
            .into_iter()
            .zip(self.params.values())
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((t.value(loss).get(0, 0), grads))
    }

    /// Train-mode MSE and its gradients.
    pub fn loss_and_grads(&self, batch: &WindowBatch, dropout_seed: u64) -> Result<(f64, Vec<Matrix>)> {
        let scale = 1.0 / self.cells(batch) as f64;
        self.scaled_loss_and_grads(batch, scale, dropout_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tiny_panel;
    use crate::data::{make_windows, WindowSpec};

    fn tiny(d_model: usize, heads: usize, dropout: f64) -> (Tft, WindowBatch) {
        let panel = tiny_panel(2, 12);
        let mut batch = make_windows(&panel, &WindowSpec::new(4, 4).unwrap()).unwrap();
        batch.past.iter_mut().for_each(|v| *v = (*v * 0.37).sin());
        batch.targets.iter_mut().for_each(|v| *v = (*v * 0.11).cos());
        batch
            .statics
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.3 + 0.2 * i as f64);
        let cfg = ModelConfig::for_batch(&batch, d_model, heads, dropout, 3);
        (Tft::new(cfg).unwrap(), batch)
    }

    #[test]
    fn shapes_and_invariants() {
        let (m, batch) = tiny(8, 2, 0.1);
        let out = m.forward(&batch, Mode::Eval, 0).unwrap();
        let n = batch.len();
        assert_eq!(out.predictions.len(), n * 4 * 2);
        let a = &out.attention;
        for h in 0..a.heads {
            for w in 0..n {
                for i in 0..8 {
                    let s: f64 = (0..8).map(|j| a.get(h, w, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    for j in i + 1..8 {
                        assert_eq!(a.get(h, w, i, j), 0.0);
                    }
                }
            }
        }
        for chunk in out.vsn.past.chunks(batch.past_features) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(m.predict(&batch).unwrap(), out.predictions);
    }

    #[test]
    fn window_permutation_permutes_outputs() {
        let (m, batch) = tiny(8, 2, 0.0);
        let n = batch.len();
        let order: Vec<usize> = (0..n).rev().collect();
        let a = m.forward(&batch, Mode::Eval, 0).unwrap();
        let b = m.forward(&batch.select(&order), Mode::Eval, 0).unwrap();
        let block = 4 * 2;
        for (k, &src) in order.iter().enumerate() {
            let x = &a.predictions[src * block..(src + 1) * block];
            let y = &b.predictions[k * block..(k + 1) * block];
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn future_inputs_do_not_change_earlier_attention() {
        let (m, batch) = tiny(8, 2, 0.0);
        let mut altered = batch.clone();
        let last = batch.horizon - 1;
        for w in 0..batch.len() {
            altered.future[(w * batch.horizon + last) * batch.future_features] += 0.7;
        }
        let a = m.forward(&batch, Mode::Eval, 0).unwrap();
        let b = m.forward(&altered, Mode::Eval, 0).unwrap();
        let len = 8;
        for w in 0..batch.len() {
            for i in 0..len - 1 {
                for j in 0..len {
                    let idx = (w * len + i) * len + j;
                    assert_eq!(a.mean_attention[idx], b.mean_attention[idx]);
                }
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let (m, batch) = tiny(8, 2, 0.3);
        let a = m.forward(&batch, Mode::Train, 5).unwrap();
        let b = m.forward(&batch, Mode::Train, 5).unwrap();
        let c = m.forward(&batch, Mode::Train, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.predictions, c.predictions);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut m, batch) = tiny(8, 2, 0.2);
        let (_, grads) = m.loss_and_grads(&batch, 9).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..m.params().len() {
            let count = m.params().get(p).len();
            for k in (0..count).step_by(count.div_ceil(3).max(1)) {
                let orig = m.params().get(p).data()[k];
                m.params_mut().values_mut()[p].data_mut()[k] = orig + h;
                let up = m.loss(&batch, Mode::Train, 9).unwrap();
                m.params_mut().values_mut()[p].data_mut()[k] = orig - h;
                let down = m.loss(&batch, Mode::Train, 9).unwrap();
                m.params_mut().values_mut()[p].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[p].data()[k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(err);
                assert!(err < 1e-4, "{} [{k}]: {analytic} vs {numeric}", m.params().names()[p]);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let (m, mut batch) = tiny(8, 2, 0.0);
        batch.targets = m.forward(&batch, Mode::Eval, 0).unwrap().predictions;
        let (loss, grads) = m.loss_and_grads(&batch, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_mismatched_batch() {
        let (m, batch) = tiny(8, 2, 0.0);
        let mut cfg = m.config().clone();
        cfg.static_features += 1;
        let other = Tft::new(cfg).unwrap();
        assert!(other.forward(&batch, Mode::Eval, 0).is_err());
        assert!(Tft::from_params(m.config().clone(), other.params().clone()).is_err());
        assert!(Tft::from_params(m.config().clone(), m.params().clone()).is_ok());
    }
}
