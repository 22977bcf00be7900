//! Displacement metrics over a prediction batch.

use super::PredictError;
use crate::types::{Position2D, PredictionSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMetrics {
    /// Root mean square displacement at each horizon step (1-based order).
    pub rmse_per_horizon: Vec<f64>,
    /// Mean displacement over all steps and samples.
    pub ade: f64,
    /// Mean displacement at the final step.
    pub fde: f64,
}

/// RMSE per horizon, average displacement error, and final displacement
/// error of predicted means against true positions.
pub fn rmse_ade_fde(
    predictions: &[PredictionSeries],
    targets: &[Vec<Position2D>],
) -> Result<DisplacementMetrics, PredictError> {
    if predictions.is_empty() {
        return Err(PredictError::EmptyInput);
    }
    if predictions.len() != targets.len() {
        return Err(PredictError::LengthMismatch {
            pred: predictions.len(),
            target: targets.len(),
        });
    }
    let horizon = predictions[0].steps.len();
    for (p, t) in predictions.iter().zip(targets) {
        if p.steps.len() != horizon || t.len() != horizon {
            return Err(PredictError::LengthMismatch {
                pred: p.steps.len(),
                target: t.len(),
            });
        }
    }
    let n = predictions.len() as f64;
    let mut rmse = Vec::with_capacity(horizon);
    let mut ade = 0.0;
    let mut fde = 0.0;
    for k in 0..horizon {
        let mut sq = 0.0;
        for (p, t) in predictions.iter().zip(targets) {
            let d = t[k].distance(&p.steps[k].mean());
            sq += d * d;
            ade += d;
            if k == horizon - 1 {
                fde += d;
            }
        }
        rmse.push((sq / n).sqrt());
    }
    Ok(DisplacementMetrics {
        rmse_per_horizon: rmse,
        ade: ade / (n * horizon as f64),
        fde: fde / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BivariateGaussian;

    fn series(means: &[(f64, f64)]) -> PredictionSeries {
        PredictionSeries {
            steps: means
                .iter()
                .map(|&(x, y)| BivariateGaussian {
                    mu_x: x,
                    mu_y: y,
                    sigma_x: 1.0,
                    sigma_y: 1.0,
                    rho: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_predictions_are_zero() {
        let pred = vec![series(&[(1.0, 2.0), (3.0, 4.0)])];
        let targets = vec![vec![Position2D::new(1.0, 2.0), Position2D::new(3.0, 4.0)]];
        let m = rmse_ade_fde(&pred, &targets).unwrap();
        assert_eq!(m.rmse_per_horizon, vec![0.0, 0.0]);
        assert_eq!(m.ade, 0.0);
        assert_eq!(m.fde, 0.0);
    }

    #[test]
    fn pythagorean_errors() {
        // One sample with a (3, 4) offset at every step: all metrics are 5.
        let pred = vec![series(&[(0.0, 0.0), (0.0, 0.0)])];
        let targets = vec![vec![Position2D::new(3.0, 4.0), Position2D::new(3.0, 4.0)]];
        let m = rmse_ade_fde(&pred, &targets).unwrap();
        assert_eq!(m.rmse_per_horizon, vec![5.0, 5.0]);
        assert_eq!(m.ade, 5.0);
        assert_eq!(m.fde, 5.0);
    }

    #[test]
    fn fde_is_mean_of_final_displacements() {
        let pred = vec![series(&[(0.0, 0.0)]), series(&[(0.0, 0.0)])];
        let targets = vec![
            vec![Position2D::new(0.0, 0.0)],
            vec![Position2D::new(0.0, 2.0)],
        ];
        let m = rmse_ade_fde(&pred, &targets).unwrap();
        assert_eq!(m.fde, 1.0);
        // RMSE of the same step is sqrt((0 + 4) / 2).
        assert!((m.rmse_per_horizon[0] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(
            rmse_ade_fde(&[], &[]),
            Err(PredictError::EmptyInput)
        ));
    }
}
