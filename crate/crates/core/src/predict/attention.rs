//! Attention primitives: scaled dot-product attention, multi-head
//! attention, and the multi-encoder attention that fuses one query against
//! the key/value pairs of every encoder. Each forward has a matching
//! backward over cached activations.

use super::mat::Mat;

/// Mask value low enough that softmax underflows to exactly zero.
const MASK_NEG: f64 = -1e30;

/// Row-wise softmax of `logits / sqrt(d_k)` with an optional causal mask
/// (row `r` may attend to columns `0..=r`).
fn attention_weights(q: &Mat, k: &Mat, causal: bool) -> Mat {
    let d_k = k.cols() as f64;
    let mut logits = q.matmul(&k.transpose()).scale(1.0 / d_k.sqrt());
    if causal {
        for r in 0..logits.rows() {
            for c in (r + 1)..logits.cols() {
                logits.set(r, c, MASK_NEG);
            }
        }
    }
    softmax_rows(&logits)
}

pub(crate) fn softmax_rows(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// `softmax(Q K^T / sqrt(d_k)) V`. Output rows are convex combinations of
/// the rows of `V`. Shapes: Q is (t_q, d_k), K is (t_k, d_k), V is (t_k, d_v).
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let (out, _) = scaled_dot_forward(q, k, v, false);
    out
}

pub(crate) fn scaled_dot_forward(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> (Mat, Mat) {
    assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
    assert_eq!(k.rows(), v.rows(), "key/value length mismatch");
    let attn = attention_weights(q, k, causal);
    (attn.matmul(v), attn)
}

/// Backward of scaled dot-product attention. Returns (dQ, dK, dV).
pub(crate) fn scaled_dot_backward(
    d_out: &Mat,
    attn: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
) -> (Mat, Mat, Mat) {
    let d_v = attn.transpose().matmul(d_out);
    let d_attn = d_out.matmul(&v.transpose());
    // Softmax Jacobian per row: dl = a .* (da - sum(da .* a)).
    let mut d_logits = Mat::zeros(attn.rows(), attn.cols());
    for r in 0..attn.rows() {
        let a = attn.row(r);
        let da = d_attn.row(r);
        let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for c in 0..attn.cols() {
            d_logits.set(r, c, a[c] * (da[c] - dot));
        }
    }
    let scale = 1.0 / (k.cols() as f64).sqrt();
    let d_q = d_logits.matmul(k).scale(scale);
    let d_k = d_logits.transpose().matmul(q).scale(scale);
    (d_q, d_k, d_v)
}

/// Projection weights of one multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl MhaWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Mat::identity(d),
            w_k: Mat::identity(d),
            w_v: Mat::identity(d),
            w_o: Mat::identity(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_o: Mat::zeros(d, d),
        }
    }
}

pub(crate) struct MhaCache {
    pub q_in: Mat,
    pub k_in: Mat,
    pub v_in: Mat,
    pub q_proj: Mat,
    pub k_proj: Mat,
    pub v_proj: Mat,
    pub attn: Vec<Mat>,
    pub concat: Mat,
}

/// `concat(head_1, ..., head_h) W_O` with
/// `head_l = Attention(Q W_Q[l], K W_K[l], V W_V[l])`, where `W[l]` is the
/// l-th column block of width `d_model / heads`.
pub fn multi_head(q: &Mat, k: &Mat, v: &Mat, weights: &MhaWeights, heads: usize) -> Mat {
    let (out, _) = multi_head_forward(q, k, v, weights, heads, false);
    out
}

pub(crate) fn multi_head_forward(
    q_in: &Mat,
    k_in: &Mat,
    v_in: &Mat,
    weights: &MhaWeights,
    heads: usize,
    causal: bool,
) -> (Mat, MhaCache) {
    let d = weights.w_q.cols();
    assert_eq!(q_in.cols(), weights.w_q.rows(), "query width mismatch");
    assert!(heads >= 1 && d % heads == 0, "d_model must divide by heads");
    let d_head = d / heads;
    let q_proj = q_in.matmul(&weights.w_q);
    let k_proj = k_in.matmul(&weights.w_k);
    let v_proj = v_in.matmul(&weights.w_v);
    let mut outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let (o, a) = scaled_dot_forward(
            &q_proj.col_slice(lo, hi),
            &k_proj.col_slice(lo, hi),
            &v_proj.col_slice(lo, hi),
            causal,
        );
        outs.push(o);
        attns.push(a);
    }
    let concat = Mat::concat_cols(&outs);
    let out = concat.matmul(&weights.w_o);
    let cache = MhaCache {
        q_in: q_in.clone(),
        k_in: k_in.clone(),
        v_in: v_in.clone(),
        q_proj,
        k_proj,
        v_proj,
        attn: attns,
        concat,
    };
    (out, cache)
}

/// Backward of multi-head attention. Accumulates weight gradients into
/// `grads` and returns (dQ_in, dK_in, dV_in).
pub(crate) fn multi_head_backward(
    d_out: &Mat,
    cache: &MhaCache,
    weights: &MhaWeights,
    grads: &mut MhaWeights,
    heads: usize,
) -> (Mat, Mat, Mat) {
    let d = weights.w_q.cols();
    let d_head = d / heads;
    grads.w_o.add_assign(&cache.concat.transpose().matmul(d_out));
    let d_concat = d_out.matmul(&weights.w_o.transpose());
    let mut d_q_proj = Mat::zeros(cache.q_proj.rows(), d);
    let mut d_k_proj = Mat::zeros(cache.k_proj.rows(), d);
    let mut d_v_proj = Mat::zeros(cache.v_proj.rows(), d);
    for h in 0..heads {
        let lo = h * d_head;
        let hi = lo + d_head;
        let (dq, dk, dv) = scaled_dot_backward(
            &d_concat.col_slice(lo, hi),
            &cache.attn[h],
            &cache.q_proj.col_slice(lo, hi),
            &cache.k_proj.col_slice(lo, hi),
            &cache.v_proj.col_slice(lo, hi),
        );
        d_q_proj.add_col_slice(lo, &dq);
        d_k_proj.add_col_slice(lo, &dk);
        d_v_proj.add_col_slice(lo, &dv);
    }
    grads.w_q.add_assign(&cache.q_in.transpose().matmul(&d_q_proj));
    grads.w_k.add_assign(&cache.k_in.transpose().matmul(&d_k_proj));
    grads.w_v.add_assign(&cache.v_in.transpose().matmul(&d_v_proj));
    (
        d_q_proj.matmul(&weights.w_q.transpose()),
        d_k_proj.matmul(&weights.w_k.transpose()),
        d_v_proj.matmul(&weights.w_v.transpose()),
    )
}

/// `concat(M_0, ..., M_N) W_M` with `M_i = Multihead(Q_0, K_i, V_i)`.
/// All encoder interactions share one set of multi-head weights; `w_m` is
/// sliced to the active encoder count (its first `n_enc * d_model` rows).
pub fn multi_encoder_attention(
    q0: &Mat,
    encoder_outputs: &[(Mat, Mat)],
    weights: &MhaWeights,
    w_m: &Mat,
    heads: usize,
) -> Mat {
    assert!(!encoder_outputs.is_empty(), "need at least one encoder");
    let d = weights.w_q.cols();
    assert!(
        encoder_outputs.len() * d <= w_m.rows(),
        "encoder count {} exceeds the W_M capacity of {}",
        encoder_outputs.len(),
        w_m.rows() / d
    );
    let blocks: Vec<Mat> = encoder_outputs
        .iter()
        .map(|(k, v)| multi_head(q0, k, v, weights, heads))
        .collect();
    let concat = Mat::concat_cols(&blocks);
    let w_m_slice = w_m.row_slice(0, encoder_outputs.len() * d);
    concat.matmul(&w_m_slice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn singleton_key_value_returns_that_row() {
        let q = Mat::from_rows(&[vec![0.3, -2.0], vec![5.0, 1.0]]);
        let k = Mat::from_rows(&[vec![1.0, 4.0]]);
        let v = Mat::from_rows(&[vec![7.0, -3.0]]);
        let out = scaled_dot_attention(&q, &k, &v);
        for r in 0..out.rows() {
            assert_eq!(out.row(r), &[7.0, -3.0]);
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        // Q row orthogonal to every K row: uniform softmax, mean of V rows.
        let q = Mat::from_rows(&[vec![0.0, 0.0, 1.0]]);
        let k = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let v = Mat::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]);
        let out = scaled_dot_attention(&q, &k, &v);
        assert!((out.at(0, 0) - 4.0).abs() < 1e-12);
        assert!((out.at(0, 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_hand_case() {
        let q = Mat::from_rows(&[vec![1.0, 0.0]]);
        let k = Mat::identity(2);
        let v = Mat::identity(2);
        let out = scaled_dot_attention(&q, &k, &v);
        // softmax([1/sqrt(2), 0]) = [e^0.7071.., 1] / Z
        let w0 = (1.0 / 2f64.sqrt()).exp();
        let z = w0 + 1.0;
        assert!((out.at(0, 0) - w0 / z).abs() < 1e-12);
        assert!((out.at(0, 1) - 1.0 / z).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = random_mat(4, 6, &mut rng);
            let k = random_mat(5, 6, &mut rng);
            let attn = attention_weights(&q, &k, false);
            for r in 0..attn.rows() {
                let sum: f64 = attn.row(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_mat(4, 4, &mut rng);
        let k = random_mat(4, 4, &mut rng);
        let attn = attention_weights(&q, &k, true);
        for r in 0..4 {
            for c in (r + 1)..4 {
                assert_eq!(attn.at(r, c), 0.0);
            }
            let sum: f64 = attn.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_head_identity_weights_reduce_to_scaled_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_mat(3, 4, &mut rng);
        let k = random_mat(5, 4, &mut rng);
        let v = random_mat(5, 4, &mut rng);
        let w = MhaWeights::identity(4);
        let a = multi_head(&q, &k, &v, &w, 1);
        let b = scaled_dot_attention(&q, &k, &v);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_mat(3, 4, &mut rng);
        let mut w = MhaWeights::identity(4);
        w.w_o = Mat::zeros(4, 4);
        let out = multi_head(&q, &q, &q, &w, 2);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_head_case_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 6;
        let q = random_mat(4, d, &mut rng);
        let k = random_mat(5, d, &mut rng);
        let v = random_mat(5, d, &mut rng);
        let w = MhaWeights {
            w_q: random_mat(d, d, &mut rng),
            w_k: random_mat(d, d, &mut rng),
            w_v: random_mat(d, d, &mut rng),
            w_o: random_mat(d, d, &mut rng),
        };
        let out = multi_head(&q, &k, &v, &w, 2);
        // Independent re-implementation: project, split, attend, concat.
        let qp = q.matmul(&w.w_q);
        let kp = k.matmul(&w.w_k);
        let vp = v.matmul(&w.w_v);
        let head = |lo: usize, hi: usize| {
            scaled_dot_attention(
                &qp.col_slice(lo, hi),
                &kp.col_slice(lo, hi),
                &vp.col_slice(lo, hi),
            )
        };
        let oracle = Mat::concat_cols(&[head(0, 3), head(3, 6)]).matmul(&w.w_o);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_encoder_identity_wm_reduces_to_multi_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let q0 = random_mat(3, d, &mut rng);
        let k = random_mat(5, d, &mut rng);
        let v = random_mat(5, d, &mut rng);
        let w = MhaWeights {
            w_q: random_mat(d, d, &mut rng),
            w_k: random_mat(d, d, &mut rng),
            w_v: random_mat(d, d, &mut rng),
            w_o: random_mat(d, d, &mut rng),
        };
        let w_m = Mat::identity(d);
        let a = multi_encoder_attention(&q0, &[(k.clone(), v.clone())], &w, &w_m, 2);
        let b = multi_head(&q0, &k, &v, &w, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_encoder_with_split_wm_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let q0 = random_mat(3, d, &mut rng);
        let k = random_mat(5, d, &mut rng);
        let v = random_mat(5, d, &mut rng);
        let w = MhaWeights::identity(d);
        let w_m_single = random_mat(d, d, &mut rng);
        let single = multi_encoder_attention(&q0, &[(k.clone(), v.clone())], &w, &w_m_single, 2);
        let mut w_m_double = Mat::zeros(2 * d, d);
        w_m_double.add_row_slice(0, &w_m_single.scale(0.5));
        w_m_double.add_row_slice(d, &w_m_single.scale(0.5));
        let double = multi_encoder_attention(
            &q0,
            &[(k.clone(), v.clone()), (k, v)],
            &w,
            &w_m_double,
            2,
        );
        for (a, b) in single.data().iter().zip(double.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_encoder_case_matches_concat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let q0 = random_mat(3, d, &mut rng);
        let encs: Vec<(Mat, Mat)> = (0..3)
            .map(|_| (random_mat(5, d, &mut rng), random_mat(5, d, &mut rng)))
            .collect();
        let w = MhaWeights {
            w_q: random_mat(d, d, &mut rng),
            w_k: random_mat(d, d, &mut rng),
            w_v: random_mat(d, d, &mut rng),
            w_o: random_mat(d, d, &mut rng),
        };
        let w_m = random_mat(3 * d, d, &mut rng);
        let out = multi_encoder_attention(&q0, &encs, &w, &w_m, 2);
        let oracle = Mat::concat_cols(
            &encs
                .iter()
                .map(|(k, v)| multi_head(&q0, k, v, &w, 2))
                .collect::<Vec<_>>(),
        )
        .matmul(&w_m);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "exceeds the W_M capacity")]
    fn too_many_encoders_panics() {
        let d = 4;
        let q0 = Mat::zeros(2, d);
        let k = Mat::zeros(3, d);
        let v = Mat::zeros(3, d);
        let w = MhaWeights::identity(d);
        let w_m = Mat::zeros(d, d); // capacity for one encoder only
        multi_encoder_attention(
            &q0,
            &[(k.clone(), v.clone()), (k, v)],
            &w,
            &w_m,
            2,
        );
    }
}
