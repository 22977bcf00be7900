//! Shared domain types: positions, reference frames, trajectory windows,
//! and per-step predicted distributions.
//!
//! Coordinates follow the road convention: `x` is the lateral direction,
//! `y` the longitudinal direction. All types here are immutable values and
//! safe to share across threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vehicles are identified by a dense integer id assigned at insertion.
pub type VehicleId = u64;

/// Longitudinal half-width of the interaction band around a target vehicle.
pub const NEIGHBOR_RANGE_M: f64 = 30.0;

#[derive(Debug, Error)]
pub enum TypeError {
    #[error("non-finite coordinate ({x}, {y})")]
    NonFinite { x: f64, y: f64 },
    #[error("trajectory window must hold at least 2 samples, got {0}")]
    WindowTooShort(usize),
    #[error("trajectory window requires dt > 0, got {0}")]
    BadDt(f64),
    #[error("sigma must be positive, got ({sigma_x}, {sigma_y})")]
    BadSigma { sigma_x: f64, sigma_y: f64 },
    #[error("correlation must satisfy |rho| < 1, got {0}")]
    BadRho(f64),
}

/// A 2-D position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position2D {
    pub x: f64,
    pub y: f64,
}

impl Position2D {
    pub fn new(x: f64, y: f64) -> Self {
        assert!(
            x.is_finite() && y.is_finite(),
            "non-finite position ({x}, {y})"
        );
        Self { x, y }
    }

    pub fn distance(&self, other: &Position2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Rigid transform from global coordinates into a vehicle-anchored frame.
///
/// `heading` is the rotation (radians) mapping the road direction onto the
/// frame's +y axis. On a straight road the heading is a per-scenario
/// constant, so the transform reduces to a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub origin: Position2D,
    pub heading: f64,
}

impl FrameTransform {
    pub fn new(origin: Position2D, heading: f64) -> Self {
        assert!(heading.is_finite(), "non-finite heading");
        Self { origin, heading }
    }

    /// Maps a global position into frame-local coordinates:
    /// `rotate(-heading) * (p - origin)`.
    pub fn to_frame(&self, p: Position2D) -> Position2D {
        let dx = p.x - self.origin.x;
        let dy = p.y - self.origin.y;
        let (sin_h, cos_h) = self.heading.sin_cos();
        Position2D::new(dx * cos_h + dy * sin_h, -dx * sin_h + dy * cos_h)
    }

    /// Inverse of [`to_frame`](Self::to_frame).
    pub fn from_frame(&self, p: Position2D) -> Position2D {
        let (sin_h, cos_h) = self.heading.sin_cos();
        Position2D::new(
            self.origin.x + p.x * cos_h - p.y * sin_h,
            self.origin.y + p.x * sin_h + p.y * cos_h,
        )
    }
}

/// Fixed-length, uniformly sampled 2-D position history for one vehicle.
///
/// Samples are ordered oldest to newest; the last entry is the position at
/// sample index `t0`. A window of length `n` covers `t_h = n - 1` history
/// steps of `dt` seconds each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub vehicle_id: VehicleId,
    pub t0: u64,
    pub dt: f64,
    pub positions: Vec<Position2D>,
}

impl TrajectoryWindow {
    pub fn new(
        vehicle_id: VehicleId,
        t0: u64,
        dt: f64,
        positions: Vec<Position2D>,
    ) -> Result<Self, TypeError> {
        if positions.len() < 2 {
            return Err(TypeError::WindowTooShort(positions.len()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(TypeError::BadDt(dt));
        }
        Ok(Self {
            vehicle_id,
            t0,
            dt,
            positions,
        })
    }

    /// Number of history steps (window length minus one).
    pub fn history_len(&self) -> usize {
        self.positions.len() - 1
    }

    /// Position at `t0`, the newest sample.
    pub fn latest(&self) -> Position2D {
        *self.positions.last().expect("window is never empty")
    }

    /// The same window with every sample expressed in `frame`.
    pub fn transformed(&self, frame: &FrameTransform) -> TrajectoryWindow {
        TrajectoryWindow {
            vehicle_id: self.vehicle_id,
            t0: self.t0,
            dt: self.dt,
            positions: self.positions.iter().map(|p| frame.to_frame(*p)).collect(),
        }
    }
}

/// Predicted position distribution for one future step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGaussian {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl BivariateGaussian {
    pub fn new(
        mu_x: f64,
        mu_y: f64,
        sigma_x: f64,
        sigma_y: f64,
        rho: f64,
    ) -> Result<Self, TypeError> {
        if !(mu_x.is_finite() && mu_y.is_finite()) {
            return Err(TypeError::NonFinite { x: mu_x, y: mu_y });
        }
        if !(sigma_x > 0.0 && sigma_y > 0.0 && sigma_x.is_finite() && sigma_y.is_finite()) {
            return Err(TypeError::BadSigma { sigma_x, sigma_y });
        }
        if !(rho.abs() < 1.0) {
            return Err(TypeError::BadRho(rho));
        }
        Ok(Self {
            mu_x,
            mu_y,
            sigma_x,
            sigma_y,
            rho,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.mu_x.is_finite()
            && self.mu_y.is_finite()
            && self.sigma_x > 0.0
            && self.sigma_x.is_finite()
            && self.sigma_y > 0.0
            && self.sigma_y.is_finite()
            && self.rho.abs() < 1.0
    }

    pub fn mean(&self) -> Position2D {
        Position2D::new(self.mu_x, self.mu_y)
    }

    /// Negative log density of the bivariate Gaussian at `p`.
    pub fn neg_log_density(&self, p: Position2D) -> f64 {
        self.neg_log_density_unchecked(p.x - self.mu_x, p.y - self.mu_y)
    }

    /// Negative log density in terms of raw deviations from the mean; does
    /// not require the deviations to be finite.
    pub fn neg_log_density_unchecked(&self, dx: f64, dy: f64) -> f64 {
        let om = 1.0 - self.rho * self.rho;
        let q = dx * dx / (self.sigma_x * self.sigma_x)
            - 2.0 * self.rho * dx * dy / (self.sigma_x * self.sigma_y)
            + dy * dy / (self.sigma_y * self.sigma_y);
        (2.0 * std::f64::consts::PI).ln()
            + self.sigma_x.ln()
            + self.sigma_y.ln()
            + 0.5 * om.ln()
            + q / (2.0 * om)
    }
}

/// Forecast over the next `t_f` steps, one distribution per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSeries {
    pub steps: Vec<BivariateGaussian>,
}

impl PredictionSeries {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Predicted mean at horizon `k` (1-based).
    pub fn mean_at(&self, k: usize) -> Position2D {
        assert!(k >= 1 && k <= self.steps.len(), "horizon {k} out of range");
        self.steps[k - 1].mean()
    }
}

/// Ids of vehicles interacting with the target: those whose frame-local
/// longitudinal offset lies in `[-NEIGHBOR_RANGE_M, +NEIGHBOR_RANGE_M]`
/// (closed at both ends), excluding the target itself.
///
/// The result is ordered by ascending frame-local y, ties broken by id, so
/// it is invariant under permutations of the input list.
pub fn neighbor_set(
    tv: VehicleId,
    frame: &FrameTransform,
    vehicles: &[(VehicleId, Position2D)],
) -> Vec<VehicleId> {
    let mut near: Vec<(f64, VehicleId)> = vehicles
        .iter()
        .filter(|(id, _)| *id != tv)
        .map(|(id, pos)| (frame.to_frame(*pos).y, *id))
        .filter(|(y, _)| y.abs() <= NEIGHBOR_RANGE_M)
        .collect();
    near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    near.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_frame_is_identity() {
        let frame = FrameTransform::new(Position2D::new(0.0, 0.0), 0.0);
        let p = frame.to_frame(Position2D::new(3.0, 4.0));
        assert_eq!(p, Position2D::new(3.0, 4.0));
    }

    #[test]
    fn origin_maps_to_zero() {
        let frame = FrameTransform::new(Position2D::new(3.0, 4.0), 0.0);
        let p = frame.to_frame(Position2D::new(3.0, 4.0));
        assert_eq!(p, Position2D::new(0.0, 0.0));
    }

    #[test]
    fn quarter_turn_rotation() {
        // Hand rotation of (1, 0) by -pi/2 gives (0, -1).
        let frame = FrameTransform::new(Position2D::new(0.0, 0.0), std::f64::consts::FRAC_PI_2);
        let p = frame.to_frame(Position2D::new(1.0, 0.0));
        assert!(p.x.abs() < 1e-12);
        assert!((p.y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_round_trip_1000_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let frame = FrameTransform::new(
                Position2D::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3)),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let p = Position2D::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3));
            let back = frame.from_frame(frame.to_frame(p));
            assert!((back.x - p.x).abs() < 1e-9, "x drift {}", back.x - p.x);
            assert!((back.y - p.y).abs() < 1e-9, "y drift {}", back.y - p.y);
        }
    }

    #[test]
    fn neighbor_band_boundaries() {
        let frame = FrameTransform::new(Position2D::new(0.0, 0.0), 0.0);
        let vehicles = vec![
            (1, Position2D::new(0.0, 29.9)),
            (2, Position2D::new(0.0, 30.0)),
            (3, Position2D::new(0.0, 31.0)),
            (4, Position2D::new(0.0, -30.0)),
            (0, Position2D::new(0.0, 0.0)), // the TV itself
        ];
        let ids = neighbor_set(0, &frame, &vehicles);
        assert_eq!(ids, vec![4, 1, 2]);
    }

    #[test]
    fn neighbor_set_permutation_invariant() {
        let frame = FrameTransform::new(Position2D::new(5.0, 100.0), 0.0);
        let mut vehicles = vec![
            (3, Position2D::new(5.0, 110.0)),
            (1, Position2D::new(2.0, 95.0)),
            (7, Position2D::new(8.0, 128.0)),
            (2, Position2D::new(5.0, 131.0)),
            (9, Position2D::new(5.0, 110.0)),
        ];
        let base = neighbor_set(0, &frame, &vehicles);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            // Fisher-Yates shuffle.
            for i in (1..vehicles.len()).rev() {
                let j = rng.gen_range(0..=i);
                vehicles.swap(i, j);
            }
            assert_eq!(neighbor_set(0, &frame, &vehicles), base);
        }
    }

    #[test]
    fn window_validation() {
        assert!(TrajectoryWindow::new(0, 0, 0.1, vec![Position2D::new(0.0, 0.0)]).is_err());
        assert!(TrajectoryWindow::new(
            0,
            0,
            0.0,
            vec![Position2D::new(0.0, 0.0), Position2D::new(0.0, 1.0)]
        )
        .is_err());
        let w = TrajectoryWindow::new(
            0,
            5,
            0.1,
            vec![Position2D::new(0.0, 0.0), Position2D::new(0.0, 1.0)],
        )
        .unwrap();
        assert_eq!(w.history_len(), 1);
        assert_eq!(w.latest(), Position2D::new(0.0, 1.0));
    }

    #[test]
    fn gaussian_validation() {
        assert!(BivariateGaussian::new(0.0, 0.0, 1.0, 1.0, 0.0).is_ok());
        assert!(BivariateGaussian::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(BivariateGaussian::new(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BivariateGaussian::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn neg_log_density_at_mode() {
        let g = BivariateGaussian::new(1.0, 2.0, 1.0, 1.0, 0.0).unwrap();
        let v = g.neg_log_density(Position2D::new(1.0, 2.0));
        assert!((v - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }
}
