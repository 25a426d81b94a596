//! Reverse-mode differentiation on a Wengert list of matrix operations.
//!
//! Every value is a 2-D [`Matrix`]. Sequence tensors are stored time-major:
//! the rows of timestep `t` for a batch of `B` windows occupy rows
//! `t*B .. (t+1)*B`. Attention is the one place where per-window blocks are
//! needed, and it is handled by the dedicated `attn_scores`/`attn_apply`
//! operations.

use std::borrow::Cow;

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Additive logit used for masked attention positions.
pub const MASK_LOGIT: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
    },
    Softmax(Var),
    WeightedGroupSum {
        w: Var,
        v: Var,
        groups: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    TileRows(Var, usize),
    AttnScores {
        q: Var,
        k: Var,
        batch: usize,
        len: usize,
        scale: f64,
    },
    AttnApply {
        a: Var,
        v: Var,
        batch: usize,
        len: usize,
    },
    SquaredError {
        pred: Var,
        target: Matrix,
        scale: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Elu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::TileRows(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GroupedLinear { x, w, b, .. } => vec![*x, *w, *b],
            Op::WeightedGroupSum { w, v, .. } => vec![*w, *v],
            Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
            Op::AttnScores { q, k, .. } => vec![*q, *k],
            Op::AttnApply { a, v, .. } => vec![*a, *v],
            Op::SquaredError { pred, .. } => vec![*pred],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    scope: usize,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape<'p> {
    params: &'p [Matrix],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Tape {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(1024),
            scopes: vec!["<root>".to_string()],
            scope_stack: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently created nodes with `name` (nested under the
    /// current scope) until the matching [`Tape::pop_scope`].
    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().unwrap()];
        let full = if parent == "<root>" {
            name.to_string()
        } else {
            format!("{parent}/{name}")
        };
        self.scopes.push(full);
        self.scope_stack.push(self.scopes.len() - 1);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    fn push(&mut self, value: Cow<'p, Matrix>, op: Op) -> Var {
        let scope = *self.scope_stack.last().unwrap();
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => op.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            scope,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Input)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let params: &'p [Matrix] = self.params;
        let v = self.push(Cow::Borrowed(&params[id]), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `a + bias` with `bias` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!(bm.rows(), 1);
        assert_eq!(am.cols(), bm.cols());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bm.data()) {
                *o += b;
            }
        }
        self.push(Cow::Owned(out), Op::AddBias(a, bias))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shapes");
        out.add_assign(self.value(b));
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "mul shapes");
        let data = am.data().iter().zip(bm.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(am.rows(), am.cols(), data);
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(Cow::Owned(out), Op::Scale(a, s))
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), c.shape());
        let data = am.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(am.rows(), am.cols(), data);
        self.push(Cow::Owned(out), Op::MulConst(a, c))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(Cow::Owned(out), Op::Elu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Cow::Owned(out), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Cow::Owned(out), Op::Tanh(a))
    }

    /// Layer normalization applied independently to each consecutive block
    /// of `group` columns. `gamma` and `beta` are `[1 × cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, group: usize) -> Var {
        let xm = self.value(x);
        let (n, cols) = xm.shape();
        assert_eq!(cols % group, 0);
        assert_eq!(self.shape(gamma), (1, cols));
        assert_eq!(self.shape(beta), (1, cols));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let blocks = cols / group;
        let mut xhat = Matrix::zeros(n, cols);
        let mut out = Matrix::zeros(n, cols);
        let mut inv_std = Vec::with_capacity(n * blocks);
        for r in 0..n {
            let row = xm.row(r);
            for blk in 0..blocks {
                let s = blk * group;
                let seg = &row[s..s + group];
                let mean = seg.iter().sum::<f64>() / group as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                inv_std.push(inv);
                for k in 0..group {
                    let h = (seg[k] - mean) * inv;
                    xhat.set(r, s + k, h);
                    out.set(r, s + k, h * g[s + k] + b[s + k]);
                }
            }
        }
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                group,
                xhat,
                inv_std,
            },
        )
    }

    /// Block-diagonal linear map: column block `g` of `x` (width `din`) is
    /// multiplied by rows `g*din .. (g+1)*din` of `w` (`[groups*din × dout]`),
    /// giving column block `g` (width `dout`) of the output.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Var {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        let (n, xc) = xm.shape();
        assert_eq!(xc % groups, 0);
        let din = xc / groups;
        let dout = wm.cols();
        assert_eq!(wm.rows(), groups * din, "grouped weight rows");
        assert_eq!(bm.shape(), (1, groups * dout), "grouped bias");
        let mut out = Matrix::zeros(n, groups * dout);
        for r in 0..n {
            let xr = xm.row(r);
            let orow = out.row_mut(r);
            for g in 0..groups {
                let o = &mut orow[g * dout..(g + 1) * dout];
                o.copy_from_slice(&bm.data()[g * dout..(g + 1) * dout]);
                for p in 0..din {
                    let a = xr[g * din + p];
                    if a == 0.0 {
                        continue;
                    }
                    let wr = wm.row(g * din + p);
                    for (ov, wv) in o.iter_mut().zip(wr) {
                        *ov += a * wv;
                    }
                }
            }
        }
        self.push(Cow::Owned(out), Op::GroupedLinear { x, w, b, groups })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Cow::Owned(out), Op::Softmax(x))
    }

    /// `out[r] = Σ_g w[r, g] · v[r, g*d .. (g+1)*d]`
    pub fn weighted_group_sum(&mut self, w: Var, v: Var) -> Var {
        let (wm, vm) = (self.value(w), self.value(v));
        let (n, groups) = wm.shape();
        assert_eq!(vm.rows(), n);
        assert_eq!(vm.cols() % groups, 0);
        let d = vm.cols() / groups;
        let mut out = Matrix::zeros(n, d);
        for r in 0..n {
            let vr = vm.row(r);
            let orow = out.row_mut(r);
            for g in 0..groups {
                let wg = wm.get(r, g);
                for (o, x) in orow.iter_mut().zip(&vr[g * d..(g + 1) * d]) {
                    *o += wg * x;
                }
            }
        }
        self.push(Cow::Owned(out), Op::WeightedGroupSum { w, v, groups })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(n, total);
        for r in 0..n {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), n, "concat_cols rows");
                out.row_mut(r)[off..off + pm.cols()].copy_from_slice(pm.row(r));
                off += pm.cols();
            }
        }
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.cols());
        let out = Matrix::from_fn(xm.rows(), len, |r, c| xm.get(r, start + c));
        self.push(Cow::Owned(out), Op::SliceCols(x, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows cols");
            data.extend_from_slice(pm.data());
            rows += pm.rows();
        }
        self.push(
            Cow::Owned(Matrix::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.rows());
        let c = xm.cols();
        let out = Matrix::from_vec(len, c, xm.data()[start * c..(start + len) * c].to_vec());
        self.push(Cow::Owned(out), Op::SliceRows(x, start))
    }

    /// Stacks `reps` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Var {
        let xm = self.value(x);
        let mut data = Vec::with_capacity(xm.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(xm.data());
        }
        let out = Matrix::from_vec(xm.rows() * reps, xm.cols(), data);
        self.push(Cow::Owned(out), Op::TileRows(x, reps))
    }

    /// Scaled dot-product logits for a time-major batch of sequences.
    ///
    /// `q`, `k` are `[len*batch × d]`; the result is `[batch*len × len]` with
    /// row `b*len + i`, column `j` equal to `scale · q[i,b] · k[j,b]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, len: usize, scale: f64) -> Var {
        let (qm, km) = (self.value(q), self.value(k));
        assert_eq!(qm.rows(), batch * len);
        assert_eq!(qm.shape(), km.shape());
        let mut out = Matrix::zeros(batch * len, len);
        for b in 0..batch {
            for i in 0..len {
                let qi = qm.row(i * batch + b);
                let orow = out.row_mut(b * len + i);
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = scale * dot(qi, km.row(j * batch + b));
                }
            }
        }
        self.push(
            Cow::Owned(out),
            Op::AttnScores {
                q,
                k,
                batch,
                len,
                scale,
            },
        )
    }

    /// Adds the causal mask to `attn_scores` output: entry `(b*len+i, j)` is
    /// replaced by [`MASK_LOGIT`] whenever `j > i`.
    pub fn causal_mask(&mut self, scores: Var, len: usize) -> Var {
        let sm = self.value(scores);
        let mut mask = Matrix::zeros(sm.rows(), sm.cols());
        for r in 0..sm.rows() {
            let i = r % len;
            for j in (i + 1)..len {
                mask.set(r, j, MASK_LOGIT);
            }
        }
        let offset = self.input(mask);
        self.add(scores, offset)
    }

    /// `out[i,b] = Σ_j a[b*len+i, j] · v[j,b]` for time-major `v`.
    pub fn attn_apply(&mut self, a: Var, v: Var, batch: usize, len: usize) -> Var {
        let (am, vm) = (self.value(a), self.value(v));
        assert_eq!(am.shape(), (batch * len, len));
        assert_eq!(vm.rows(), batch * len);
        let d = vm.cols();
        let mut out = Matrix::zeros(len * batch, d);
        for b in 0..batch {
            for i in 0..len {
                let arow = am.row(b * len + i);
                let orow = out.row_mut(i * batch + b);
                for (j, &w) in arow.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(vm.row(j * batch + b)) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(Cow::Owned(out), Op::AttnApply { a, v, batch, len })
    }

    /// `scale · Σ (pred - target)²` as a `[1 × 1]` value.
    pub fn squared_error(&mut self, pred: Var, target: Matrix, scale: f64) -> Var {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), target.shape(), "squared_error shapes");
        let s: f64 = pm
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(
            Cow::Owned(Matrix::from_vec(1, 1, vec![scale * s])),
            Op::SquaredError { pred, target, scale },
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Matrix) -> Var {
        let n = target.len().max(1) as f64;
        self.squared_error(pred, target, 1.0 / n)
    }

    /// Returns an error naming the scope of the first node holding a
    /// non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().find(|n| !n.value.is_finite()) {
            Some(n) => Err(Error::NonFinite {
                layer: self.scopes[n.scope].clone(),
            }),
            None => Ok(()),
        }
    }

    /// Back-propagates from the scalar `root`, returning one gradient per
    /// parameter (`None` for parameters the computation did not touch).
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Matrix>>> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out: Vec<Option<Matrix>> = vec![None; self.params.len()];
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    layer: format!("{} (gradient)", self.scopes[self.nodes[idx].scope]),
                });
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out[*id] = Some(g),
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        let da = g.matmul_nt(self.value(*b));
                        accumulate(&mut grads, &needs, *a, da);
                    }
                    if needs[b.0] {
                        let db = self.value(*a).matmul_tn(&g);
                        accumulate(&mut grads, &needs, *b, db);
                    }
                }
                Op::AddBias(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, &needs, *b, db);
                    accumulate(&mut grads, &needs, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &needs, *b, g.clone());
                    accumulate(&mut grads, &needs, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    accumulate(&mut grads, &needs, *a, da);
                    accumulate(&mut grads, &needs, *b, db);
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    da.scale_in_place(*s);
                    accumulate(&mut grads, &needs, *a, da);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, &needs, *a, hadamard(&g, c)),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = g;
                    for ((d, &xv), &yv) in da.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        if xv <= 0.0 {
                            *d *= yv + 1.0;
                        }
                    }
                    accumulate(&mut grads, &needs, *a, da);
                }
                Op::Sigmoid(a) => {
                    let mut da = g;
                    for (d, &y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, &needs, *a, da);
                }
                Op::Tanh(a) => {
                    let mut da = g;
                    for (d, &y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, &needs, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    group,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma).data();
                    let (n, cols) = g.shape();
                    let blocks = cols / group;
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(n, cols);
                    let mut dxhat = vec![0.0; *group];
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * hr[c];
                            dbeta.data_mut()[c] += gr[c];
                        }
                        for blk in 0..blocks {
                            let s = blk * group;
                            let inv = inv_std[r * blocks + blk];
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for k in 0..*group {
                                dxhat[k] = gr[s + k] * gm[s + k];
                                sum_d += dxhat[k];
                                sum_dh += dxhat[k] * hr[s + k];
                            }
                            let gf = *group as f64;
                            let dxr = dx.row_mut(r);
                            for k in 0..*group {
                                dxr[s + k] = inv / gf * (gf * dxhat[k] - sum_d - hr[s + k] * sum_dh);
                            }
                        }
                    }
                    accumulate(&mut grads, &needs, *gamma, dgamma);
                    accumulate(&mut grads, &needs, *beta, dbeta);
                    accumulate(&mut grads, &needs, *x, dx);
                }
                Op::GroupedLinear { x, w, b, groups } => {
                    let (xm, wm) = (self.value(*x), self.value(*w));
                    let n = xm.rows();
                    let din = xm.cols() / groups;
                    let dout = wm.cols();
                    let mut dx = Matrix::zeros(n, xm.cols());
                    let mut dw = Matrix::zeros(wm.rows(), dout);
                    let mut db = Matrix::zeros(1, groups * dout);
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xm.row(r);
                        for (d, v) in db.data_mut().iter_mut().zip(gr) {
                            *d += v;
                        }
                        for gi in 0..*groups {
                            let gseg = &gr[gi * dout..(gi + 1) * dout];
                            for p in 0..din {
                                let wrow = gi * din + p;
                                dx.set(r, gi * din + p, dot(gseg, wm.row(wrow)));
                                let xv = xr[gi * din + p];
                                if xv != 0.0 {
                                    for (dwv, gv) in dw.row_mut(wrow).iter_mut().zip(gseg) {
                                        *dwv += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, &needs, *x, dx);
                    accumulate(&mut grads, &needs, *w, dw);
                    accumulate(&mut grads, &needs, *b, db);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s = dot(dx.row(r), yr);
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - s);
                        }
                    }
                    accumulate(&mut grads, &needs, *x, dx);
                }
                Op::WeightedGroupSum { w, v, groups } => {
                    let (wm, vm) = (self.value(*w), self.value(*v));
                    let n = wm.rows();
                    let d = vm.cols() / groups;
                    let mut dw = Matrix::zeros(n, *groups);
                    let mut dv = Matrix::zeros(n, vm.cols());
                    for r in 0..n {
                        let gr = g.row(r);
                        let vr = vm.row(r);
                        for gi in 0..*groups {
                            dw.set(r, gi, dot(gr, &vr[gi * d..(gi + 1) * d]));
                            let wg = wm.get(r, gi);
                            for (dvv, gv) in dv.row_mut(r)[gi * d..(gi + 1) * d].iter_mut().zip(gr) {
                                *dvv = wg * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, &needs, *w, dw);
                    accumulate(&mut grads, &needs, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        let dp = Matrix::from_fn(g.rows(), pc, |r, c| g.get(r, off + c));
                        off += pc;
                        accumulate(&mut grads, &needs, p, dp);
                    }
                }
                Op::SliceCols(x, start) => {
                    let (n, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(n, c);
                    for r in 0..n {
                        dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, &needs, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pr = self.shape(p).0;
                        let dp = Matrix::from_vec(pr, cols, g.data()[off * cols..(off + pr) * cols].to_vec());
                        off += pr;
                        accumulate(&mut grads, &needs, p, dp);
                    }
                }
                Op::SliceRows(x, start) => {
                    let (n, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(n, c);
                    dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, &needs, *x, dx);
                }
                Op::TileRows(x, reps) => {
                    let (n, c) = self.shape(*x);
                    let mut dx = Matrix::zeros(n, c);
                    for rep in 0..*reps {
                        let block = &g.data()[rep * n * c..(rep + 1) * n * c];
                        for (d, v) in dx.data_mut().iter_mut().zip(block) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, &needs, *x, dx);
                }
                Op::AttnScores {
                    q,
                    k,
                    batch,
                    len,
                    scale,
                } => {
                    let (qm, km) = (self.value(*q), self.value(*k));
                    let d = qm.cols();
                    let mut dq = Matrix::zeros(qm.rows(), d);
                    let mut dk = Matrix::zeros(km.rows(), d);
                    for b in 0..*batch {
                        for i in 0..*len {
                            let gr = g.row(b * len + i);
                            let qi = qm.row(i * batch + b).to_vec();
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let s = scale * gv;
                                let kj = km.row(j * batch + b);
                                for (dqv, kv) in dq.row_mut(i * batch + b).iter_mut().zip(kj) {
                                    *dqv += s * kv;
                                }
                                for (dkv, qv) in dk.row_mut(j * batch + b).iter_mut().zip(&qi) {
                                    *dkv += s * qv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, &needs, *q, dq);
                    accumulate(&mut grads, &needs, *k, dk);
                }
                Op::AttnApply { a, v, batch, len } => {
                    let (am, vm) = (self.value(*a), self.value(*v));
                    let mut da = Matrix::zeros(am.rows(), am.cols());
                    let mut dv = Matrix::zeros(vm.rows(), vm.cols());
                    for b in 0..*batch {
                        for i in 0..*len {
                            let gi = g.row(i * batch + b);
                            let arow = am.row(b * len + i).to_vec();
                            for (j, &w) in arow.iter().enumerate() {
                                da.set(b * len + i, j, dot(gi, vm.row(j * batch + b)));
                                if w != 0.0 {
                                    for (dvv, gv) in dv.row_mut(j * batch + b).iter_mut().zip(gi) {
                                        *dvv += w * gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, &needs, *a, da);
                    accumulate(&mut grads, &needs, *v, dv);
                }
                Op::SquaredError { pred, target, scale } => {
                    let pm = self.value(*pred);
                    let up = g.get(0, 0);
                    let data = pm
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| 2.0 * scale * (p - t) * up)
                        .collect();
                    accumulate(&mut grads, &needs, *pred, Matrix::from_vec(pm.rows(), pm.cols(), data));
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Matrix>], needs: &[bool], v: Var, g: Matrix) {
    if !needs[v.0] {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
