//! Minimal reverse-mode automatic differentiation over dense matrices.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Tape, Var, MASK_LOGIT};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter gradient of `f` against central differences.
    fn gradcheck(params: Vec<Matrix>, f: impl Fn(&mut Tape<'_>) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(&params);
            let root = f(&mut tape);
            tape.backward(root).unwrap()
        };
        let eval = |ps: &[Matrix]| {
            let mut tape = Tape::new(ps);
            let root = f(&mut tape);
            tape.value(root).get(0, 0)
        };
        let h = 1e-5;
        for (pid, p) in params.iter().enumerate() {
            for idx in 0..p.len() {
                let mut plus = params.clone();
                plus[pid].data_mut()[idx] += h;
                let mut minus = params.clone();
                minus[pid].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = tape_grads[pid].as_ref().map_or(0.0, |g| g.data()[idx]);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {pid}[{idx}]: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
        // contracts with a fixed random matrix so every output element matters
        let (r, c) = tape.shape(x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, r, c);
        tape.squared_error(x, w, 0.5)
    }

    #[test]
    fn grad_matmul_bias_and_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)];
        gradcheck(params, |t| {
            let (x, w, b) = (t.param(0), t.param(1), t.param(2));
            let y = t.linear(x, w, Some(b));
            let e = t.elu(y);
            let s = t.sigmoid(y);
            let th = t.tanh(e);
            let m = t.mul(s, th);
            let sc = t.scale(m, 1.7);
            let a = t.add(sc, e);
            weighted_sum(t, a, 9)
        });
    }

    #[test]
    fn grad_layer_norm_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, 3, 6), random(&mut rng, 1, 6), random(&mut rng, 1, 6)];
        gradcheck(params, |t| {
            let (x, g, b) = (t.param(0), t.param(1), t.param(2));
            let y = t.layer_norm(x, g, b, 3);
            weighted_sum(t, y, 3)
        });
    }

    #[test]
    fn grad_grouped_linear_and_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            random(&mut rng, 2, 6),
            random(&mut rng, 6, 4),
            random(&mut rng, 1, 12),
            random(&mut rng, 2, 3),
        ];
        gradcheck(params, |t| {
            let (x, w, b, s) = (t.param(0), t.param(1), t.param(2), t.param(3));
            let y = t.grouped_linear(x, w, b, 3);
            let p = t.softmax(s);
            let z = t.weighted_group_sum(p, y);
            weighted_sum(t, z, 4)
        });
    }

    #[test]
    fn grad_reshaping_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![random(&mut rng, 2, 3), random(&mut rng, 2, 2)];
        gradcheck(params, |t| {
            let (a, b) = (t.param(0), t.param(1));
            let c = t.concat_cols(&[a, b]);
            let s = t.slice_cols(c, 1, 3);
            let r = t.concat_rows(&[s, a]);
            let tr = t.tile_rows(r, 3);
            let sr = t.slice_rows(tr, 2, 5);
            weighted_sum(t, sr, 5)
        });
    }

    #[test]
    fn grad_attention_ops_with_causal_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, len, d) = (2, 4, 3);
        let params = vec![
            random(&mut rng, batch * len, d),
            random(&mut rng, batch * len, d),
            random(&mut rng, batch * len, d),
        ];
        gradcheck(params, |t| {
            let (q, k, v) = (t.param(0), t.param(1), t.param(2));
            let s = t.attn_scores(q, k, batch, len, 0.5);
            let m = t.causal_mask(s, len);
            let a = t.softmax(m);
            let o = t.attn_apply(a, v, batch, len);
            let dropout = Matrix::from_fn(batch * len, d, |r, c| ((r + c) % 3) as f64 * 0.5);
            let o = t.mul_const(o, dropout);
            weighted_sum(t, o, 6)
        });
    }

    #[test]
    fn masked_entries_are_exact_zeros() {
        let params = vec![Matrix::filled(6, 2, 0.3)];
        let mut t = Tape::new(&params);
        let q = t.param(0);
        let s = t.attn_scores(q, q, 2, 3, 1.0);
        let m = t.causal_mask(s, 3);
        let a = t.softmax(m);
        let am = t.value(a);
        for r in 0..6 {
            let i = r % 3;
            for j in 0..3 {
                if j > i {
                    assert_eq!(am.get(r, j), 0.0);
                } else {
                    assert!((am.get(r, j) - 1.0 / (i + 1) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_finite_reports_scope() {
        let params = vec![Matrix::filled(1, 1, f64::NAN)];
        let mut t = Tape::new(&params);
        t.push_scope("encoder");
        t.push_scope("gate");
        let p = t.param(0);
        let _ = t.sigmoid(p);
        t.pop_scope();
        t.pop_scope();
        let err = t.check_finite().unwrap_err().to_string();
        assert!(err.contains("encoder/gate"), "{err}");
    }
}
