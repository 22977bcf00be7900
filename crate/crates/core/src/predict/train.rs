//! Training by plain mini-batch gradient descent and finite-difference
//! verification of the hand-written backpropagation.

use super::network::{gradients, sample_loss, AttentionWeights};
use super::{PredictError, PredictorConfig, TrainingSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss over all samples before the first step.
    pub initial_loss: f64,
    /// Mean loss over all samples after the last step.
    pub final_loss: f64,
    pub steps: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Global-norm gradient clip; tames the first steps when the likelihood
/// term is far off scale.
const MAX_GRAD_NORM: f64 = 10.0;

/// Mini-batch Adam at the configured learning rate, batches taken in a
/// fixed cyclic order. Deterministic for a fixed config (seeded init, no
/// shuffling, no RNG in the update); aborts if the loss turns non-finite.
pub fn train(
    samples: &[TrainingSample],
    config: &PredictorConfig,
) -> Result<(AttentionWeights, TrainReport), PredictError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(PredictError::NoSamples);
    }
    let mut weights = AttentionWeights::init(config);
    let mean_loss = |w: &AttentionWeights| {
        samples.iter().map(|s| sample_loss(s, w, config)).sum::<f64>() / samples.len() as f64
    };
    let initial_loss = mean_loss(&weights);
    let mut m = AttentionWeights::zeros(config);
    let mut v = AttentionWeights::zeros(config);
    let mut cursor = 0usize;
    for step in 0..config.train_steps {
        let batch = config.batch_size.min(samples.len());
        let mut grad = AttentionWeights::zeros(config);
        let mut batch_loss = 0.0;
        for _ in 0..batch {
            let (value, g) = gradients(&samples[cursor], &weights, config);
            batch_loss += value;
            grad.axpy(1.0 / batch as f64, &g);
            cursor = (cursor + 1) % samples.len();
        }
        if !batch_loss.is_finite() {
            return Err(PredictError::Diverged { step });
        }
        let norm = grad.l2_norm();
        if norm > MAX_GRAD_NORM {
            let scale = MAX_GRAD_NORM / norm;
            grad.zip_apply(&grad.clone(), |g, _| *g *= scale);
        }
        m.zip_apply(&grad, |m, g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        v.zip_apply(&grad, |v, g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32 + 1);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32 + 1);
        let lr = config.learning_rate;
        weights.zip2_apply(&m, &v, |w, m, v| {
            *w -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        });
        if !weights.is_finite() {
            return Err(PredictError::Diverged { step });
        }
    }
    let final_loss = mean_loss(&weights);
    if !final_loss.is_finite() {
        return Err(PredictError::Diverged {
            step: config.train_steps,
        });
    }
    Ok((
        weights,
        TrainReport {
            initial_loss,
            final_loss,
            steps: config.train_steps,
        },
    ))
}

/// One compared gradient coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckPoint {
    pub tensor: &'static str,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckPoint {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient against central finite differences over
/// `n_coords` randomly chosen weight coordinates (seeded choice); returns
/// the full per-coordinate comparison.
pub fn grad_check_detail(
    weights: &AttentionWeights,
    sample: &TrainingSample,
    config: &PredictorConfig,
    n_coords: usize,
    seed: u64,
) -> Vec<GradCheckPoint> {
    let (_, analytic) = gradients(sample, weights, config);
    let names: Vec<(&'static str, usize)> = weights
        .tensors()
        .iter()
        .map(|(name, t)| (*name, t.data().len()))
        .collect();
    let total = weights.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let flat = rng.gen_range(0..total);
        let mut w_plus = weights.clone();
        w_plus.param_add(flat, FD_STEP);
        let mut w_minus = weights.clone();
        w_minus.param_add(flat, -FD_STEP);
        let numeric = (sample_loss(sample, &w_plus, config)
            - sample_loss(sample, &w_minus, config))
            / (2.0 * FD_STEP);
        let mut offset = flat;
        let mut tensor = "";
        for (name, len) in &names {
            if offset < *len {
                tensor = name;
                break;
            }
            offset -= len;
        }
        out.push(GradCheckPoint {
            tensor,
            flat_index: flat,
            analytic: analytic.param_get(flat),
            numeric,
        });
    }
    out
}

/// Max relative error between analytic and finite-difference gradients over
/// `n_coords` sampled coordinates.
pub fn grad_check(
    weights: &AttentionWeights,
    sample: &TrainingSample,
    config: &PredictorConfig,
    n_coords: usize,
    seed: u64,
) -> f64 {
    grad_check_detail(weights, sample, config, n_coords, seed)
        .iter()
        .map(GradCheckPoint::relative_error)
        .fold(0.0, f64::max)
}
