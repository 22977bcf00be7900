//! Constant-velocity kinematic baseline.

use crate::sensing::FusedInput;
use crate::types::{BivariateGaussian, PredictionSeries};

/// Extrapolates the target's last position with the velocity estimated from
/// its final two samples. Uncertainty grows linearly with the horizon:
/// `sigma_x = sigma_y = fixed_sigma * k`, `rho = 0`.
pub fn predict_cv(input: &FusedInput, t_f: usize, fixed_sigma: f64) -> PredictionSeries {
    assert!(fixed_sigma > 0.0, "fixed_sigma must be positive");
    let w = &input.tv_history;
    let n = w.positions.len();
    assert!(n >= 2, "need at least two samples to estimate velocity");
    let last = w.positions[n - 1];
    let prev = w.positions[n - 2];
    let vx = (last.x - prev.x) / w.dt;
    let vy = (last.y - prev.y) / w.dt;
    let steps = (1..=t_f)
        .map(|k| BivariateGaussian {
            mu_x: last.x + k as f64 * w.dt * vx,
            mu_y: last.y + k as f64 * w.dt * vy,
            sigma_x: fixed_sigma * k as f64,
            sigma_y: fixed_sigma * k as f64,
            rho: 0.0,
        })
        .collect();
    PredictionSeries { steps }
}
