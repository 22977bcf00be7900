//! The multi-encoder attention network: one encoder per vehicle history
//! (encoder 0 for the target, one shared-weight encoder applied to each
//! neighbor), a single decoder whose multi-encoder attention fuses all
//! encoder outputs, and a 5-value output head mapped to bivariate-Gaussian
//! parameters via identity / exp / tanh links.
//!
//! Every forward stores the activations needed by the matching hand-written
//! backward; `gradients` returns the teacher-forced loss and the full
//! parameter gradient in one pass.

use super::attention::{multi_head_backward, multi_head_forward, MhaCache, MhaWeights};
use super::mat::Mat;
use super::{PredictorConfig, TrainingSample};
use crate::sensing::FusedInput;
use crate::types::{BivariateGaussian, Position2D, PredictionSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-6;
/// Pre-activation clamp for the sigma links, keeping exp finite.
const EXP_CLAMP: f64 = 30.0;
/// Keeps |rho| strictly below one after tanh.
const RHO_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat, // 1 x out
}

impl Linear {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(input, output),
            b: Mat::zeros(1, output),
        }
    }

    fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.set(r, c, y.at(r, c) + self.b.at(0, c));
            }
        }
        y
    }

    /// Accumulates dW and db into `grads`, returns dX.
    fn backward(&self, d_out: &Mat, x: &Mat, grads: &mut Linear) -> Mat {
        grads.w.add_assign(&x.transpose().matmul(d_out));
        for r in 0..d_out.rows() {
            for c in 0..d_out.cols() {
                grads.b.set(0, c, grads.b.at(0, c) + d_out.at(r, c));
            }
        }
        d_out.matmul(&self.w.transpose())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

struct FfCache {
    x: Mat,
    h_pre: Mat,
    h_post: Mat,
}

impl FeedForward {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            lin1: Linear::zeros(d, hidden),
            lin2: Linear::zeros(hidden, d),
        }
    }

    fn forward(&self, x: &Mat) -> (Mat, FfCache) {
        let h_pre = self.lin1.forward(x);
        let mut h_post = h_pre.clone();
        for v in h_post.data_mut() {
            *v = v.max(0.0);
        }
        let y = self.lin2.forward(&h_post);
        (
            y,
            FfCache {
                x: x.clone(),
                h_pre,
                h_post,
            },
        )
    }

    fn backward(&self, d_out: &Mat, cache: &FfCache, grads: &mut FeedForward) -> Mat {
        let mut d_h = self.lin2.backward(d_out, &cache.h_post, &mut grads.lin2);
        for (dh, pre) in d_h.data_mut().iter_mut().zip(cache.h_pre.data()) {
            if *pre <= 0.0 {
                *dh = 0.0;
            }
        }
        self.lin1.backward(&d_h, &cache.x, &mut grads.lin1)
    }
}

struct LnCache {
    x_hat: Mat,
    inv_std: Vec<f64>,
}

/// Parameterless layer normalization over each row.
fn layer_norm_forward(x: &Mat) -> (Mat, LnCache) {
    let d = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..x.cols() {
            out.set(r, c, (row[c] - mean) * s);
        }
        inv_std.push(s);
    }
    let cache = LnCache {
        x_hat: out.clone(),
        inv_std,
    };
    (out, cache)
}

fn layer_norm_backward(d_out: &Mat, cache: &LnCache) -> Mat {
    let d = d_out.cols() as f64;
    let mut dx = Mat::zeros(d_out.rows(), d_out.cols());
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        let xh = cache.x_hat.row(r);
        let mean_dy = dy.iter().sum::<f64>() / d;
        let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = cache.inv_std[r];
        for c in 0..d_out.cols() {
            dx.set(r, c, s * (dy[c] - mean_dy - xh[c] * mean_dy_xh));
        }
    }
    dx
}

/// Standard sinusoidal positional encoding over the window index.
fn positional_encoding(rows: usize, d: usize) -> Mat {
    Mat::from_fn(rows, d, |t, i| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = t as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub attn: MhaWeights,
    pub ff: FeedForward,
}

impl EncoderWeights {
    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            attn: MhaWeights::zeros(d),
            ff: FeedForward::zeros(d, hidden),
        }
    }
}

/// All trainable parameters of the network. Neighbor encoders share one set
/// of weights, so neighbor count can vary per sample; `w_m` holds one row
/// block per encoder slot and is sliced to the active count.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub embed: Linear,
    pub enc_tv: EncoderWeights,
    pub enc_nb: EncoderWeights,
    pub dec_self: MhaWeights,
    pub dec_cross: MhaWeights,
    pub w_m: Mat,
    pub dec_ff: FeedForward,
    pub head: Linear,
}

impl AttentionWeights {
    pub fn zeros(config: &PredictorConfig) -> Self {
        let d = config.d_model;
        let h = config.ff_hidden;
        Self {
            embed: Linear::zeros(2, d),
            enc_tv: EncoderWeights::zeros(d, h),
            enc_nb: EncoderWeights::zeros(d, h),
            dec_self: MhaWeights::zeros(d),
            dec_cross: MhaWeights::zeros(d),
            w_m: Mat::zeros(config.max_encoders * d, d),
            dec_ff: FeedForward::zeros(d, h),
            head: Linear::zeros(d, 5),
        }
    }

    /// Xavier-uniform initialization, deterministic in the seed.
    pub fn init(config: &PredictorConfig) -> Self {
        let mut w = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for (name, t) in w.tensors_mut() {
            if name.ends_with(".b") {
                continue; // biases start at zero
            }
            let limit = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        w
    }

    /// Named tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("embed.w", &self.embed.w),
            ("embed.b", &self.embed.b),
            ("enc_tv.attn.w_q", &self.enc_tv.attn.w_q),
            ("enc_tv.attn.w_k", &self.enc_tv.attn.w_k),
            ("enc_tv.attn.w_v", &self.enc_tv.attn.w_v),
            ("enc_tv.attn.w_o", &self.enc_tv.attn.w_o),
            ("enc_tv.ff.lin1.w", &self.enc_tv.ff.lin1.w),
            ("enc_tv.ff.lin1.b", &self.enc_tv.ff.lin1.b),
            ("enc_tv.ff.lin2.w", &self.enc_tv.ff.lin2.w),
            ("enc_tv.ff.lin2.b", &self.enc_tv.ff.lin2.b),
            ("enc_nb.attn.w_q", &self.enc_nb.attn.w_q),
            ("enc_nb.attn.w_k", &self.enc_nb.attn.w_k),
            ("enc_nb.attn.w_v", &self.enc_nb.attn.w_v),
            ("enc_nb.attn.w_o", &self.enc_nb.attn.w_o),
            ("enc_nb.ff.lin1.w", &self.enc_nb.ff.lin1.w),
            ("enc_nb.ff.lin1.b", &self.enc_nb.ff.lin1.b),
            ("enc_nb.ff.lin2.w", &self.enc_nb.ff.lin2.w),
            ("enc_nb.ff.lin2.b", &self.enc_nb.ff.lin2.b),
            ("dec_self.w_q", &self.dec_self.w_q),
            ("dec_self.w_k", &self.dec_self.w_k),
            ("dec_self.w_v", &self.dec_self.w_v),
            ("dec_self.w_o", &self.dec_self.w_o),
            ("dec_cross.w_q", &self.dec_cross.w_q),
            ("dec_cross.w_k", &self.dec_cross.w_k),
            ("dec_cross.w_v", &self.dec_cross.w_v),
            ("dec_cross.w_o", &self.dec_cross.w_o),
            ("w_m", &self.w_m),
            ("dec_ff.lin1.w", &self.dec_ff.lin1.w),
            ("dec_ff.lin1.b", &self.dec_ff.lin1.b),
            ("dec_ff.lin2.w", &self.dec_ff.lin2.w),
            ("dec_ff.lin2.b", &self.dec_ff.lin2.b),
            ("head.w", &self.head.w),
            ("head.b", &self.head.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("embed.w", &mut self.embed.w),
            ("embed.b", &mut self.embed.b),
            ("enc_tv.attn.w_q", &mut self.enc_tv.attn.w_q),
            ("enc_tv.attn.w_k", &mut self.enc_tv.attn.w_k),
            ("enc_tv.attn.w_v", &mut self.enc_tv.attn.w_v),
            ("enc_tv.attn.w_o", &mut self.enc_tv.attn.w_o),
            ("enc_tv.ff.lin1.w", &mut self.enc_tv.ff.lin1.w),
            ("enc_tv.ff.lin1.b", &mut self.enc_tv.ff.lin1.b),
            ("enc_tv.ff.lin2.w", &mut self.enc_tv.ff.lin2.w),
            ("enc_tv.ff.lin2.b", &mut self.enc_tv.ff.lin2.b),
            ("enc_nb.attn.w_q", &mut self.enc_nb.attn.w_q),
            ("enc_nb.attn.w_k", &mut self.enc_nb.attn.w_k),
            ("enc_nb.attn.w_v", &mut self.enc_nb.attn.w_v),
            ("enc_nb.attn.w_o", &mut self.enc_nb.attn.w_o),
            ("enc_nb.ff.lin1.w", &mut self.enc_nb.ff.lin1.w),
            ("enc_nb.ff.lin1.b", &mut self.enc_nb.ff.lin1.b),
            ("enc_nb.ff.lin2.w", &mut self.enc_nb.ff.lin2.w),
            ("enc_nb.ff.lin2.b", &mut self.enc_nb.ff.lin2.b),
            ("dec_self.w_q", &mut self.dec_self.w_q),
            ("dec_self.w_k", &mut self.dec_self.w_k),
            ("dec_self.w_v", &mut self.dec_self.w_v),
            ("dec_self.w_o", &mut self.dec_self.w_o),
            ("dec_cross.w_q", &mut self.dec_cross.w_q),
            ("dec_cross.w_k", &mut self.dec_cross.w_k),
            ("dec_cross.w_v", &mut self.dec_cross.w_v),
            ("dec_cross.w_o", &mut self.dec_cross.w_o),
            ("w_m", &mut self.w_m),
            ("dec_ff.lin1.w", &mut self.dec_ff.lin1.w),
            ("dec_ff.lin1.b", &mut self.dec_ff.lin1.b),
            ("dec_ff.lin2.w", &mut self.dec_ff.lin2.w),
            ("dec_ff.lin2.b", &mut self.dec_ff.lin2.b),
            ("head.w", &mut self.head.w),
            ("head.b", &mut self.head.b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn param_get(&self, flat: usize) -> f64 {
        let mut offset = flat;
        for (_, t) in self.tensors() {
            if offset < t.data().len() {
                return t.data()[offset];
            }
            offset -= t.data().len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn param_add(&mut self, flat: usize, delta: f64) {
        let mut offset = flat;
        for (_, t) in self.tensors_mut() {
            if offset < t.data().len() {
                t.data_mut()[offset] += delta;
                return;
            }
            offset -= t.data().len();
        }
        panic!("flat index {flat} out of range");
    }

    /// `self += a * other`, tensor by tensor.
    pub fn axpy(&mut self, a: f64, other: &AttentionWeights) {
        let theirs = other.tensors();
        for ((_, mine), (_, other)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.axpy(a, other);
        }
    }

    /// Applies `f(mine, theirs)` over every parameter pair.
    pub fn zip_apply(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        let theirs = other.tensors();
        for ((_, mine), (_, other)) in self.tensors_mut().into_iter().zip(theirs) {
            for (m, o) in mine.data_mut().iter_mut().zip(other.data()) {
                f(m, *o);
            }
        }
    }

    /// Applies `f(mine, a, b)` over every parameter triple.
    pub fn zip2_apply(&mut self, a: &Self, b: &Self, mut f: impl FnMut(&mut f64, f64, f64)) {
        let a_t = a.tensors();
        let b_t = b.tensors();
        for (((_, mine), (_, av)), (_, bv)) in
            self.tensors_mut().into_iter().zip(a_t).zip(b_t)
        {
            for ((m, x), y) in mine.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                f(m, *x, *y);
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Input preparation
// ---------------------------------------------------------------------------

pub(crate) fn window_to_mat(positions: &[Position2D], scale: f64) -> Mat {
    Mat::from_fn(positions.len(), 2, |r, c| {
        scale * if c == 0 { positions[r].x } else { positions[r].y }
    })
}

/// Encoder input mats for one fused input: target first, then neighbors.
pub(crate) fn encoder_inputs(input: &FusedInput, config: &PredictorConfig) -> Vec<Mat> {
    assert_eq!(
        input.tv_history.positions.len(),
        config.t_h + 1,
        "target window length must be t_h + 1"
    );
    assert!(
        input.neighbor_histories.len() + 1 <= config.max_encoders,
        "encoder count {} exceeds max_encoders {}",
        input.neighbor_histories.len() + 1,
        config.max_encoders
    );
    let mut mats = Vec::with_capacity(1 + input.neighbor_histories.len());
    mats.push(window_to_mat(&input.tv_history.positions, config.input_scale));
    for nb in &input.neighbor_histories {
        assert_eq!(nb.positions.len(), config.t_h + 1, "neighbor window length");
        mats.push(window_to_mat(&nb.positions, config.input_scale));
    }
    mats
}

/// Teacher-forced decoder input: a zero start token followed by the true
/// positions shifted right by one step.
fn decoder_input_teacher(targets: &[Position2D], scale: f64) -> Mat {
    Mat::from_fn(targets.len(), 2, |r, c| {
        if r == 0 {
            0.0
        } else {
            scale * if c == 0 { targets[r - 1].x } else { targets[r - 1].y }
        }
    })
}

fn decoder_input_infer(means: &[Position2D], scale: f64) -> Mat {
    Mat::from_fn(means.len() + 1, 2, |r, c| {
        if r == 0 {
            0.0
        } else {
            scale * if c == 0 { means[r - 1].x } else { means[r - 1].y }
        }
    })
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct EncoderCache {
    x_raw: Mat,
    mha: MhaCache,
    ln1: LnCache,
    ff: FfCache,
    ln2: LnCache,
    out: Mat,
}

fn encoder_forward(
    x_raw: &Mat,
    weights: &EncoderWeights,
    embed: &Linear,
    heads: usize,
) -> EncoderCache {
    let pe = positional_encoding(x_raw.rows(), embed.w.cols());
    let x0 = embed.forward(x_raw).add(&pe);
    let (a, mha) = multi_head_forward(&x0, &x0, &x0, &weights.attn, heads, false);
    let (x1, ln1) = layer_norm_forward(&x0.add(&a));
    let (f, ff) = weights.ff.forward(&x1);
    let (out, ln2) = layer_norm_forward(&x1.add(&f));
    EncoderCache {
        x_raw: x_raw.clone(),
        mha,
        ln1,
        ff,
        ln2,
        out,
    }
}

fn encoder_backward(
    d_out: &Mat,
    cache: &EncoderCache,
    weights: &EncoderWeights,
    embed: &Linear,
    grads_enc: &mut EncoderWeights,
    grads_embed: &mut Linear,
    heads: usize,
) {
    let d_s2 = layer_norm_backward(d_out, &cache.ln2);
    let mut d_x1 = d_s2.clone();
    d_x1.add_assign(&weights.ff.backward(&d_s2, &cache.ff, &mut grads_enc.ff));
    let d_s1 = layer_norm_backward(&d_x1, &cache.ln1);
    let (dq, dk, dv) =
        multi_head_backward(&d_s1, &cache.mha, &weights.attn, &mut grads_enc.attn, heads);
    let mut d_x0 = d_s1;
    d_x0.add_assign(&dq);
    d_x0.add_assign(&dk);
    d_x0.add_assign(&dv);
    // The positional encoding adds no parameters; gradient passes straight
    // through to the embedding.
    embed.backward(&d_x0, &cache.x_raw, grads_embed);
}

struct DecoderCache {
    dec_raw: Mat,
    self_attn: MhaCache,
    ln1: LnCache,
    cross: Vec<MhaCache>,
    concat: Mat,
    ln2: LnCache,
    ff: FfCache,
    ln3: LnCache,
    d3: Mat,
}

fn decoder_forward(
    dec_raw: &Mat,
    encoder_outs: &[&Mat],
    weights: &AttentionWeights,
    heads: usize,
) -> (Mat, DecoderCache) {
    let d = weights.embed.w.cols();
    let pe = positional_encoding(dec_raw.rows(), d);
    let d0 = weights.embed.forward(dec_raw).add(&pe);
    let (a, self_attn) = multi_head_forward(&d0, &d0, &d0, &weights.dec_self, heads, true);
    let (d1, ln1) = layer_norm_forward(&d0.add(&a));
    let mut blocks = Vec::with_capacity(encoder_outs.len());
    let mut cross = Vec::with_capacity(encoder_outs.len());
    for enc in encoder_outs {
        let (m, c) = multi_head_forward(&d1, enc, enc, &weights.dec_cross, heads, false);
        blocks.push(m);
        cross.push(c);
    }
    let concat = Mat::concat_cols(&blocks);
    let w_m_slice = weights.w_m.row_slice(0, encoder_outs.len() * d);
    let mea = concat.matmul(&w_m_slice);
    let (d2, ln2) = layer_norm_forward(&d1.add(&mea));
    let (f, ff) = weights.dec_ff.forward(&d2);
    let (d3, ln3) = layer_norm_forward(&d2.add(&f));
    let raw = weights.head.forward(&d3);
    (
        raw,
        DecoderCache {
            dec_raw: dec_raw.clone(),
            self_attn,
            ln1,
            cross,
            concat,
            ln2,
            ff,
            ln3,
            d3,
        },
    )
}

/// Returns the gradients flowing into each encoder output.
fn decoder_backward(
    d_raw: &Mat,
    cache: &DecoderCache,
    weights: &AttentionWeights,
    grads: &mut AttentionWeights,
    heads: usize,
    n_enc: usize,
) -> Vec<Mat> {
    let d = weights.embed.w.cols();
    let d_d3 = weights.head.backward(d_raw, &cache.d3, &mut grads.head);
    let d_s3 = layer_norm_backward(&d_d3, &cache.ln3);
    let mut d_d2 = d_s3.clone();
    d_d2.add_assign(&weights.dec_ff.backward(&d_s3, &cache.ff, &mut grads.dec_ff));
    let d_s2 = layer_norm_backward(&d_d2, &cache.ln2);
    let mut d_d1 = d_s2.clone();
    // Multi-encoder attention: out = concat * w_m[..n_enc * d].
    let w_m_slice = weights.w_m.row_slice(0, n_enc * d);
    let d_w_m_slice = cache.concat.transpose().matmul(&d_s2);
    grads.w_m.add_row_slice(0, &d_w_m_slice);
    let d_concat = d_s2.matmul(&w_m_slice.transpose());
    let mut d_enc_outs = Vec::with_capacity(n_enc);
    for i in 0..n_enc {
        let d_m = d_concat.col_slice(i * d, (i + 1) * d);
        let (dq, dk, dv) =
            multi_head_backward(&d_m, &cache.cross[i], &weights.dec_cross, &mut grads.dec_cross, heads);
        d_d1.add_assign(&dq);
        let mut d_enc = dk;
        d_enc.add_assign(&dv);
        d_enc_outs.push(d_enc);
    }
    let d_s1 = layer_norm_backward(&d_d1, &cache.ln1);
    let (dq, dk, dv) = multi_head_backward(
        &d_s1,
        &cache.self_attn,
        &weights.dec_self,
        &mut grads.dec_self,
        heads,
    );
    let mut d_d0 = d_s1;
    d_d0.add_assign(&dq);
    d_d0.add_assign(&dk);
    d_d0.add_assign(&dv);
    weights.embed.backward(&d_d0, &cache.dec_raw, &mut grads.embed);
    d_enc_outs
}

// ---------------------------------------------------------------------------
// Output links and loss
// ---------------------------------------------------------------------------

/// Maps one 5-value head row to a distribution. The decoder emits means
/// as offsets from its input position for that step (`prev`), so each step
/// predicts a bounded displacement rather than an absolute coordinate.
fn apply_links_row(raw: &[f64], prev: Position2D) -> BivariateGaussian {
    let sigma_x = raw[2].clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    let sigma_y = raw[3].clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    let rho = raw[4].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
    BivariateGaussian {
        mu_x: prev.x + raw[0],
        mu_y: prev.y + raw[1],
        sigma_x,
        sigma_y,
        rho,
    }
}

/// Decoder input positions under teacher forcing: the zero start token
/// followed by the true positions shifted right.
fn teacher_prevs(targets: &[Position2D]) -> Vec<Position2D> {
    std::iter::once(Position2D::new(0.0, 0.0))
        .chain(targets.iter().copied())
        .take(targets.len())
        .collect()
}

/// Weighted sum of the negative log likelihood of the true positions under
/// the predicted distributions (L1) and the displacement norm between the
/// true positions and the predicted means (L2): `w1 * L1 + w2 * L2`.
pub fn loss(pred: &PredictionSeries, target: &[Position2D], weights: (f64, f64)) -> f64 {
    assert_eq!(pred.steps.len(), target.len(), "horizon mismatch");
    let (w1, w2) = weights;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (g, z) in pred.steps.iter().zip(target) {
        l1 += g.neg_log_density(*z);
        l2 += z.distance(&g.mean());
    }
    w1 * l1 + w2 * l2
}

/// Loss and its gradient w.r.t. the raw 5-column head output. `prevs`
/// holds the decoder input position of each step (the offset anchors).
fn loss_backward_raw(
    raw: &Mat,
    prevs: &[Position2D],
    target: &[Position2D],
    weights: (f64, f64),
) -> (f64, Mat) {
    assert_eq!(raw.rows(), target.len());
    let (w1, w2) = weights;
    let mut d_raw = Mat::zeros(raw.rows(), raw.cols());
    let mut total = 0.0;
    for r in 0..raw.rows() {
        let row = raw.row(r);
        let g = apply_links_row(row, prevs[r]);
        let z = target[r];
        // Distances computed directly so a diverged forward yields a NaN
        // loss instead of a panic; train() turns that into an error.
        let dx = z.x - g.mu_x;
        let dy = z.y - g.mu_y;
        total += w1 * g.neg_log_density_unchecked(dx, dy) + w2 * dx.hypot(dy);
        let (sx, sy, rho) = (g.sigma_x, g.sigma_y, g.rho);
        let om = 1.0 - rho * rho;
        let q = dx * dx / (sx * sx) - 2.0 * rho * dx * dy / (sx * sy) + dy * dy / (sy * sy);

        // L1 partials in distribution parameters.
        let dl1_dmux = -(dx / (sx * sx) - rho * dy / (sx * sy)) / om;
        let dl1_dmuy = -(dy / (sy * sy) - rho * dx / (sx * sy)) / om;
        let dl1_dsx = 1.0 / sx - (dx * dx / (sx * sx * sx) - rho * dx * dy / (sx * sx * sy)) / om;
        let dl1_dsy = 1.0 / sy - (dy * dy / (sy * sy * sy) - rho * dx * dy / (sy * sy * sx)) / om;
        let dl1_drho = -rho / om - dx * dy / (sx * sy * om) + rho * q / (om * om);

        // L2 partials (zero at the kink).
        let norm = (dx * dx + dy * dy).sqrt();
        let (dl2_dmux, dl2_dmuy) = if norm > 1e-12 {
            (-dx / norm, -dy / norm)
        } else {
            (0.0, 0.0)
        };

        // Chain through the links.
        let dsx_draw = if row[2].abs() < EXP_CLAMP { sx } else { 0.0 };
        let dsy_draw = if row[3].abs() < EXP_CLAMP { sy } else { 0.0 };
        let tanh_r = row[4].tanh();
        let drho_draw = if tanh_r.abs() < RHO_LIMIT {
            1.0 - tanh_r * tanh_r
        } else {
            0.0
        };
        d_raw.set(r, 0, w1 * dl1_dmux + w2 * dl2_dmux);
        d_raw.set(r, 1, w1 * dl1_dmuy + w2 * dl2_dmuy);
        d_raw.set(r, 2, w1 * dl1_dsx * dsx_draw);
        d_raw.set(r, 3, w1 * dl1_dsy * dsy_draw);
        d_raw.set(r, 4, w1 * dl1_drho * drho_draw);
    }
    (total, d_raw)
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// Autoregressive inference: encoders run once over the fused histories;
/// the decoder consumes its own predicted means step by step, starting from
/// a zero token, and emits one bivariate Gaussian per future step.
pub fn forward(
    input: &FusedInput,
    weights: &AttentionWeights,
    config: &PredictorConfig,
) -> PredictionSeries {
    let enc_raw = encoder_inputs(input, config);
    let enc_caches = run_encoders(&enc_raw, weights, config.heads);
    let enc_outs: Vec<&Mat> = enc_caches.iter().map(|c| &c.out).collect();
    let mut means: Vec<Position2D> = Vec::with_capacity(config.t_f);
    let mut steps: Vec<BivariateGaussian> = Vec::with_capacity(config.t_f);
    for _ in 0..config.t_f {
        let dec_raw = decoder_input_infer(&means, config.input_scale);
        let (raw, _) = decoder_forward(&dec_raw, &enc_outs, weights, config.heads);
        let prev = means.last().copied().unwrap_or(Position2D::new(0.0, 0.0));
        let g = apply_links_row(raw.row(raw.rows() - 1), prev);
        means.push(g.mean());
        steps.push(g);
    }
    PredictionSeries { steps }
}

fn run_encoders(
    enc_raw: &[Mat],
    weights: &AttentionWeights,
    heads: usize,
) -> Vec<EncoderCache> {
    enc_raw
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let w = if i == 0 { &weights.enc_tv } else { &weights.enc_nb };
            encoder_forward(x, w, &weights.embed, heads)
        })
        .collect()
}

/// Teacher-forced forward returning the raw head output (one row per
/// forecast step). Used by training and gradient checking.
pub(crate) fn forward_teacher_raw(
    sample: &TrainingSample,
    weights: &AttentionWeights,
    config: &PredictorConfig,
) -> Mat {
    assert_eq!(sample.target.len(), config.t_f, "target length must be t_f");
    let enc_raw = encoder_inputs(&sample.input, config);
    let enc_caches = run_encoders(&enc_raw, weights, config.heads);
    let enc_outs: Vec<&Mat> = enc_caches.iter().map(|c| &c.out).collect();
    let dec_raw = decoder_input_teacher(&sample.target, config.input_scale);
    let (raw, _) = decoder_forward(&dec_raw, &enc_outs, weights, config.heads);
    raw
}

/// Teacher-forced loss of one sample.
pub(crate) fn sample_loss(
    sample: &TrainingSample,
    weights: &AttentionWeights,
    config: &PredictorConfig,
) -> f64 {
    let raw = forward_teacher_raw(sample, weights, config);
    let prevs = teacher_prevs(&sample.target);
    let (value, _) = loss_backward_raw(&raw, &prevs, &sample.target, (config.w1, config.w2));
    value
}

/// Teacher-forced loss and full parameter gradient of one sample.
pub(crate) fn gradients(
    sample: &TrainingSample,
    weights: &AttentionWeights,
    config: &PredictorConfig,
) -> (f64, AttentionWeights) {
    let heads = config.heads;
    let enc_raw = encoder_inputs(&sample.input, config);
    let enc_caches = run_encoders(&enc_raw, weights, heads);
    let enc_outs: Vec<&Mat> = enc_caches.iter().map(|c| &c.out).collect();
    let dec_raw = decoder_input_teacher(&sample.target, config.input_scale);
    let (raw, dec_cache) = decoder_forward(&dec_raw, &enc_outs, weights, heads);
    let prevs = teacher_prevs(&sample.target);
    let (value, d_raw) = loss_backward_raw(&raw, &prevs, &sample.target, (config.w1, config.w2));

    let mut grads = AttentionWeights::zeros(config);
    let d_enc_outs = decoder_backward(&d_raw, &dec_cache, weights, &mut grads, heads, enc_raw.len());
    for (i, (cache, d_out)) in enc_caches.iter().zip(&d_enc_outs).enumerate() {
        // Shared weights accumulate: every neighbor encoder adds into
        // enc_nb, and every encoder adds into the shared embedding.
        if i == 0 {
            encoder_backward(
                d_out,
                cache,
                &weights.enc_tv,
                &weights.embed,
                &mut grads.enc_tv,
                &mut grads.embed,
                heads,
            );
        } else {
            encoder_backward(
                d_out,
                cache,
                &weights.enc_nb,
                &weights.embed,
                &mut grads.enc_nb,
                &mut grads.embed,
                heads,
            );
        }
    }
    (value, grads)
}
