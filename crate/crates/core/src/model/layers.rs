//! Building blocks of the network, recorded on an autodiff [`Tape`].
//!
//! Each block is a set of parameter ids into a [`ParamStore`] plus a function
//! that records its forward computation. Standalone wrappers
//! ([`GrnLayer`], [`VsnLayer`], [`AttentionLayer`]) own a private store so
//! the blocks can be exercised in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::Mode;
use super::params::{Init, ParamStore};
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Inverted dropout; a no-op in eval mode or at rate 0.
pub(crate) struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(mode: Mode, rate: f64, seed: u64) -> Self {
        let rng = (mode == Mode::Train && rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed));
        Dropout { rate, rng }
    }

    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, t: &mut Tape<'_>, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let (r, c) = t.shape(x);
        let keep = 1.0 - self.rate;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        t.mul_const(x, mask)
    }
}

fn lin(t: &mut Tape<'_>, x: Var, w: usize, b: usize, groups: usize) -> Var {
    let (w, b) = (t.param(w), t.param(b));
    if groups == 1 {
        t.linear(x, w, Some(b))
    } else {
        t.grouped_linear(x, w, b, groups)
    }
}

/// Gated linear unit followed by residual add and layer norm.
#[derive(Debug, Clone)]
pub(crate) struct GateAddNormIds {
    gate_w: usize,
    gate_b: usize,
    value_w: usize,
    value_b: usize,
    ln_g: usize,
    ln_b: usize,
    groups: usize,
    width: usize,
}

impl GateAddNormIds {
    /// `groups` independent blocks of `input → output`.
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, output: usize, groups: usize) -> Self {
        GateAddNormIds {
            gate_w: init.weight(&format!("{name}.gate.w"), groups * input, output, input),
            gate_b: init.zeros(&format!("{name}.gate.b"), 1, groups * output),
            value_w: init.weight(&format!("{name}.value.w"), groups * input, output, input),
            value_b: init.zeros(&format!("{name}.value.b"), 1, groups * output),
            ln_g: init.ones(&format!("{name}.norm.gain"), 1, groups * output),
            ln_b: init.zeros(&format!("{name}.norm.bias"), 1, groups * output),
            groups,
            width: output,
        }
    }

    pub fn glu(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let g = lin(t, x, self.gate_w, self.gate_b, self.groups);
        let g = t.sigmoid(g);
        let v = lin(t, x, self.value_w, self.value_b, self.groups);
        t.mul(g, v)
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, residual: Var) -> Var {
        let y = self.glu(t, x);
        let s = t.add(residual, y);
        let (g, b) = (t.param(self.ln_g), t.param(self.ln_b));
        t.layer_norm(s, g, b, self.width)
    }
}

/// Gated residual network:
/// `LayerNorm(skip(x) + GLU(W2·ELU(W1·x + Wc·c + b1) + b2))`.
#[derive(Debug, Clone)]
pub(crate) struct GrnIds {
    w1: usize,
    b1: usize,
    context_w: Option<usize>,
    w2: usize,
    b2: usize,
    skip: Option<(usize, usize)>,
    gate: GateAddNormIds,
    groups: usize,
}

impl GrnIds {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        context: Option<usize>,
    ) -> Self {
        Self::grouped(init, name, input, hidden, output, context, 1)
    }

    /// `groups` independent GRNs applied to consecutive column blocks.
    /// Grouped GRNs take no context.
    pub fn grouped(
        init: &mut Init<'_>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        context: Option<usize>,
        groups: usize,
    ) -> Self {
        assert!(groups == 1 || context.is_none(), "grouped GRNs take no context");
        let w1 = init.weight(&format!("{name}.dense1.w"), groups * input, hidden, input);
        let b1 = init.zeros(&format!("{name}.dense1.b"), 1, groups * hidden);
        let context_w = context.map(|c| init.weight(&format!("{name}.context.w"), c, hidden, c));
        let w2 = init.weight(&format!("{name}.dense2.w"), groups * hidden, hidden, hidden);
        let b2 = init.zeros(&format!("{name}.dense2.b"), 1, groups * hidden);
        let skip = (input != output).then(|| {
            (
                init.weight(&format!("{name}.skip.w"), groups * input, output, input),
                init.zeros(&format!("{name}.skip.b"), 1, groups * output),
            )
        });
        let gate = GateAddNormIds::new(init, name, hidden, output, groups);
        GrnIds {
            w1,
            b1,
            context_w,
            w2,
            b2,
            skip,
            gate,
            groups,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, context: Option<Var>, drop: &mut Dropout) -> Var {
        let mut h = lin(t, x, self.w1, self.b1, self.groups);
        if let (Some(cw), Some(c)) = (self.context_w, context) {
            let cw = t.param(cw);
            let ch = t.matmul(c, cw);
            h = t.add(h, ch);
        }
        let h = t.elu(h);
        let h = drop.apply(t, h);
        let h = lin(t, h, self.w2, self.b2, self.groups);
        let residual = match self.skip {
            Some((w, b)) => lin(t, x, w, b, self.groups),
            None => x,
        };
        self.gate.forward(t, h, residual)
    }
}

/// Variable selection: softmax weights from a GRN over the flattened
/// embeddings, applied to per-feature GRN transforms.
#[derive(Debug, Clone)]
pub(crate) struct VsnIds {
    selector: GrnIds,
    transforms: GrnIds,
    features: usize,
}

impl VsnIds {
    pub fn new(init: &mut Init<'_>, name: &str, features: usize, d: usize, context: Option<usize>) -> Self {
        VsnIds {
            selector: GrnIds::new(init, &format!("{name}.selector"), features * d, d, features, context),
            transforms: GrnIds::grouped(init, &format!("{name}.transform"), d, d, d, None, features),
            features,
        }
    }

    /// Returns `(combined [N × d], weights [N × F])` for embeddings `[N × F·d]`.
    pub fn forward(&self, t: &mut Tape<'_>, emb: Var, context: Option<Var>, drop: &mut Dropout) -> (Var, Var) {
        let logits = self.selector.forward(t, emb, context, drop);
        let weights = t.softmax(logits);
        let transformed = self.transforms.forward(t, emb, None, drop);
        debug_assert_eq!(t.shape(weights).1, self.features);
        (t.weighted_group_sum(weights, transformed), weights)
    }
}

/// Per-feature scalar-to-vector embedding: `e_f = x_f · w_f + b_f`.
#[derive(Debug, Clone)]
pub(crate) struct EmbeddingIds {
    w: usize,
    b: usize,
    features: usize,
}

impl EmbeddingIds {
    pub fn new(init: &mut Init<'_>, name: &str, features: usize, d: usize) -> Self {
        EmbeddingIds {
            w: init.weight(&format!("{name}.w"), features, d, 1),
            b: init.weight(&format!("{name}.b"), 1, features * d, 1),
            features,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        lin(t, x, self.w, self.b, self.features)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LstmIds {
    w_ih: usize,
    w_hh: usize,
    b: usize,
    hidden: usize,
}

impl LstmIds {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, hidden: usize) -> Self {
        LstmIds {
            w_ih: init.weight(&format!("{name}.w_ih"), input, 4 * hidden, hidden),
            w_hh: init.weight(&format!("{name}.w_hh"), hidden, 4 * hidden, hidden),
            b: init.zeros(&format!("{name}.b"), 1, 4 * hidden),
            hidden,
        }
    }

    /// Runs over a time-major sequence `[len·batch × input]`; returns the
    /// stacked hidden states and the final `(h, c)`.
    pub fn forward(&self, t: &mut Tape<'_>, x: Var, batch: usize, len: usize, h0: Var, c0: Var) -> (Var, Var, Var) {
        let d = self.hidden;
        let (w_ih, w_hh, b) = (t.param(self.w_ih), t.param(self.w_hh), t.param(self.b));
        let xp = t.linear(x, w_ih, Some(b));
        let (mut h, mut c) = (h0, c0);
        let mut outs = Vec::with_capacity(len);
        for step in 0..len {
            let xs = t.slice_rows(xp, step * batch, batch);
            let hh = t.matmul(h, w_hh);
            let gates = t.add(xs, hh);
            let i = t.slice_cols(gates, 0, d);
            let i = t.sigmoid(i);
            let f = t.slice_cols(gates, d, d);
            let f = t.sigmoid(f);
            let g = t.slice_cols(gates, 2 * d, d);
            let g = t.tanh(g);
            let o = t.slice_cols(gates, 3 * d, d);
            let o = t.sigmoid(o);
            let fc = t.mul(f, c);
            let ig = t.mul(i, g);
            c = t.add(fc, ig);
            let tc = t.tanh(c);
            h = t.mul(o, tc);
            outs.push(h);
        }
        (t.concat_rows(&outs), h, c)
    }
}

/// Multi-head attention with head-specific query/key maps, one value map
/// shared by every head, and additive head aggregation.
#[derive(Debug, Clone)]
pub(crate) struct AttentionIds {
    wq: Vec<usize>,
    wk: Vec<usize>,
    wv: usize,
    wh: usize,
    d_attn: usize,
}

impl AttentionIds {
    pub fn new(init: &mut Init<'_>, name: &str, d_model: usize, heads: usize) -> Self {
        let d_attn = d_model / heads;
        let wq = (0..heads)
            .map(|h| init.weight(&format!("{name}.head{h}.query"), d_model, d_attn, d_model))
            .collect();
        let wk = (0..heads)
            .map(|h| init.weight(&format!("{name}.head{h}.key"), d_model, d_attn, d_model))
            .collect();
        AttentionIds {
            wq,
            wk,
            wv: init.weight(&format!("{name}.value"), d_model, d_model, d_model),
            wh: init.weight(&format!("{name}.output"), d_model, d_model, d_model),
            d_attn,
        }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    /// Inputs are time-major `[len·batch × d_model]`. Returns the output and
    /// the per-head attention matrices `[batch·len × len]`.
    pub fn forward(
        &self,
        t: &mut Tape<'_>,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        batch: usize,
        len: usize,
    ) -> (Var, Vec<Var>) {
        let wv = t.param(self.wv);
        let values = t.matmul(v_in, wv);
        let scale = 1.0 / (self.d_attn as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let (wq, wk) = (t.param(self.wq[h]), t.param(self.wk[h]));
            let q = t.matmul(q_in, wq);
            let k = t.matmul(k_in, wk);
            let s = t.attn_scores(q, k, batch, len, scale);
            let s = t.causal_mask(s, len);
            per_head.push(t.softmax(s));
        }
        let mut mean = per_head[0];
        for &a in &per_head[1..] {
            mean = t.add(mean, a);
        }
        let mean = t.scale(mean, 1.0 / self.heads() as f64);
        let h_tilde = t.attn_apply(mean, values, batch, len);
        let wh = t.param(self.wh);
        (t.matmul(h_tilde, wh), per_head)
    }
}

// ---------------------------------------------------------------------------
// Standalone layers
// ---------------------------------------------------------------------------

fn row_input(t: &mut Tape<'_>, x: &[f64]) -> Var {
    t.input(Matrix::row_vector(x.to_vec()))
}

/// A single gated residual network with its own weights.
#[derive(Debug, Clone)]
pub struct GrnLayer {
    store: ParamStore,
    ids: GrnIds,
    input: usize,
    output: usize,
    context: Option<usize>,
    dropout: f64,
}

impl GrnLayer {
    pub fn new(input: usize, hidden: usize, output: usize, context: Option<usize>, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = GrnIds::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "grn",
            input,
            hidden,
            output,
            context,
        );
        GrnLayer {
            store,
            ids,
            input,
            output,
            context,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    /// Parameters by name (`grn.dense1.w`, `grn.gate.b`, …).
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Evaluates a [`GrnLayer`] on one input vector.
pub fn grn_forward(x: &[f64], context: Option<&[f64]>, layer: &GrnLayer, mode: Mode, seed: u64) -> Result<Vec<f64>> {
    if x.len() != layer.input {
        return Err(Error::Shape(format!(
            "GRN expects {} inputs, got {}",
            layer.input,
            x.len()
        )));
    }
    match (context, layer.context) {
        (Some(c), Some(w)) if c.len() != w => {
            return Err(Error::Shape(format!("GRN expects context width {w}, got {}", c.len())))
        }
        (Some(_), None) => return Err(Error::Shape("GRN has no context input".into())),
        _ => {}
    }
    let mut t = Tape::new(layer.store.values());
    let xv = row_input(&mut t, x);
    let cv = context.map(|c| row_input(&mut t, c));
    let mut drop = Dropout::new(mode, layer.dropout, seed);
    let y = layer.ids.forward(&mut t, xv, cv, &mut drop);
    t.check_finite()?;
    Ok(t.value(y).data().to_vec())
}

/// A variable-selection network over `features` embeddings of width `d`.
#[derive(Debug, Clone)]
pub struct VsnLayer {
    store: ParamStore,
    ids: VsnIds,
    d: usize,
    context: Option<usize>,
}

impl VsnLayer {
    pub fn new(features: usize, d: usize, context: Option<usize>, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = VsnIds::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "vsn",
            features,
            d,
            context,
        );
        VsnLayer { store, ids, d, context }
    }

    pub fn features(&self) -> usize {
        self.ids.features
    }

    /// Parameters by name (`vsn.selector.*`, `vsn.transform.*`).
    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Returns `(combined, selection weights)` for one timestep.
pub fn vsn_forward(embeddings: &[Vec<f64>], context: Option<&[f64]>, layer: &VsnLayer) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.is_empty() {
        return Err(Error::Empty("variable selection needs at least one feature".into()));
    }
    if embeddings.len() != layer.features() || embeddings.iter().any(|e| e.len() != layer.d) {
        return Err(Error::Shape(format!(
            "VSN expects {} embeddings of width {}",
            layer.features(),
            layer.d
        )));
    }
    if context.is_some() != layer.context.is_some() || context.zip(layer.context).is_some_and(|(c, w)| c.len() != w) {
        return Err(Error::Shape("VSN context does not match layer".into()));
    }
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let mut t = Tape::new(layer.store.values());
    let ev = row_input(&mut t, &flat);
    let cv = context.map(|c| row_input(&mut t, c));
    let (combined, weights) = layer.ids.forward(&mut t, ev, cv, &mut Dropout::off());
    t.check_finite()?;
    Ok((t.value(combined).data().to_vec(), t.value(weights).data().to_vec()))
}

/// Attention mask; only the causal (lower-triangular including the
/// diagonal) pattern is accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        AttentionMask { len }
    }

    /// `allowed[i][j]` says whether position `i` may attend to `j`.
    pub fn from_allowed(allowed: &[Vec<bool>]) -> Result<Self> {
        let n = allowed.len();
        for (i, row) in allowed.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape("attention mask must be square".into()));
            }
            for (j, &a) in row.iter().enumerate() {
                if a != (j <= i) {
                    return Err(Error::InvalidArgument(format!(
                        "attention mask is not causal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(AttentionMask { len: n })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Interpretable multi-head attention weights.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    store: ParamStore,
    ids: AttentionIds,
    d_model: usize,
}

impl AttentionLayer {
    pub fn new(d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = AttentionIds::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "attn",
            d_model,
            heads,
        );
        Ok(AttentionLayer { store, ids, d_model })
    }

    pub fn heads(&self) -> usize {
        self.ids.heads()
    }

    pub fn query_weight(&self, head: usize) -> &Matrix {
        self.store.get(self.ids.wq[head])
    }

    pub fn key_weight(&self, head: usize) -> &Matrix {
        self.store.get(self.ids.wk[head])
    }

    pub fn value_weight(&self) -> &Matrix {
        self.store.get(self.ids.wv)
    }

    pub fn output_weight(&self) -> &Matrix {
        self.store.get(self.ids.wh)
    }
}

/// Output of [`interpretable_mha`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[len × d_model]`
    pub output: Matrix,
    /// One `[len × len]` matrix per head.
    pub per_head: Vec<Matrix>,
}

/// `(1/H Σ_h softmax(Q W_Q^h (K W_K^h)ᵀ / √d_attn + mask)) (V W_V) W_H` for one
/// sequence of `len` positions.
pub fn interpretable_mha(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttentionMask,
    layer: &AttentionLayer,
) -> Result<AttentionOutput> {
    let len = mask.len();
    for (name, m) in [("query", q), ("key", k), ("value", v)] {
        if m.shape() != (len, layer.d_model) {
            return Err(Error::Shape(format!(
                "{name} input is {:?}, expected ({len}, {})",
                m.shape(),
                layer.d_model
            )));
        }
    }
    let mut t = Tape::new(layer.store.values());
    let (qv, kv, vv) = (t.input(q.clone()), t.input(k.clone()), t.input(v.clone()));
    let (out, heads) = layer.ids.forward(&mut t, qv, kv, vv, 1, len);
    t.check_finite()?;
    Ok(AttentionOutput {
        output: t.value(out).clone(),
        per_head: heads.iter().map(|&h| t.value(h).clone()).collect(),
    })
}
