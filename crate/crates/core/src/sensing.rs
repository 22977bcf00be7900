//! V2V observation sharing: what each connected vehicle can see (range and
//! line-of-sight occlusion), the measurement noise on sensed human-driven
//! vehicles, the shared message format, and the ego-side fusion of messages
//! into predictor inputs anchored at the target vehicle.

use crate::types::{
    neighbor_set, FrameTransform, Position2D, TrajectoryWindow, VehicleId,
};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

/// Default sensing range of a connected vehicle.
pub const SENSING_RANGE_M: f64 = 60.0;
/// Radius of the disk an intermediate vehicle blocks around itself.
pub const OCCLUDER_RADIUS_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("noise level must be 0..=4, got {0}")]
    BadLevel(u8),
    #[error("messages disagree on window geometry (t0/dt/length)")]
    WindowMismatch,
    #[error("duplicate message from sender {0}")]
    DuplicateSender(u64),
    #[error("target vehicle {0} unobserved in the shared messages")]
    TvUnobserved(u64),
}

/// Gaussian magnitude of the sensing displacement at one of the five
/// configured levels. Level 0 is exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub level: u8,
    pub magnitude_mean: f64,
    pub magnitude_sd: f64,
}

impl NoiseLevel {
    pub fn from_level(level: u8) -> Result<Self, SensingError> {
        let (magnitude_mean, magnitude_sd) = match level {
            0 => (0.0, 0.0),
            1 => (0.3, 0.2),
            2 => (0.3, 0.4),
            3 => (0.6, 0.2),
            4 => (0.6, 0.4),
            other => return Err(SensingError::BadLevel(other)),
        };
        Ok(Self {
            level,
            magnitude_mean,
            magnitude_sd,
        })
    }
}

/// One noisy position measurement: the true position displaced by a vector
/// of magnitude `max(0, N(mean, sd))` in a uniformly random direction.
/// Level 0 returns the input exactly and consumes no randomness.
pub fn sense(true_pos: Position2D, noise: NoiseLevel, rng: &mut ChaCha8Rng) -> Position2D {
    if noise.level == 0 {
        return true_pos;
    }
    let r = Normal::new(noise.magnitude_mean, noise.magnitude_sd)
        .expect("valid noise level")
        .sample(rng)
        .max(0.0);
    let psi: f64 = rand::Rng::gen_range(rng, 0.0..std::f64::consts::TAU);
    Position2D::new(true_pos.x + r * psi.cos(), true_pos.y + r * psi.sin())
}

/// Ids visible to `observer`: within `range` and with a line of sight that
/// passes no other vehicle's occluder disk. The observer is never in its
/// own set; visibility is not symmetric in general.
pub fn visible_set(
    observer: VehicleId,
    positions: &[(VehicleId, Position2D)],
    range: f64,
) -> Vec<VehicleId> {
    assert!(range > 0.0, "range must be positive");
    let Some(&(_, obs_pos)) = positions.iter().find(|(id, _)| *id == observer) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    'target: for &(target, target_pos) in positions {
        if target == observer || obs_pos.distance(&target_pos) > range {
            continue;
        }
        for &(other, other_pos) in positions {
            if other == observer || other == target {
                continue;
            }
            if segment_point_distance(obs_pos, target_pos, other_pos) < OCCLUDER_RADIUS_M {
                continue 'target;
            }
        }
        out.push(target);
    }
    out.sort_unstable();
    out
}

fn segment_point_distance(a: Position2D, b: Position2D, p: Position2D) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len_sq = abx * abx + aby * aby;
    if len_sq == 0.0 {
        return a.distance(&p);
    }
    let t = (((p.x - a.x) * abx + (p.y - a.y) * aby) / len_sq).clamp(0.0, 1.0);
    let cx = a.x + t * abx;
    let cy = a.y + t * aby;
    (p.x - cx).hypot(p.y - cy)
}

/// What one connected vehicle shares: its own exact history window and the
/// noisy windows of the human-driven vehicles it has tracked continuously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareMessage {
    pub sender_id: VehicleId,
    pub sender_history: TrajectoryWindow,
    pub sensed: BTreeMap<VehicleId, TrajectoryWindow>,
}

impl ShareMessage {
    fn windows(&self) -> impl Iterator<Item = &TrajectoryWindow> {
        std::iter::once(&self.sender_history).chain(self.sensed.values())
    }
}

/// Fused predictor input: the target's window and its neighbors' windows,
/// all expressed in the target-anchored frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub tv_history: TrajectoryWindow,
    pub neighbor_histories: Vec<TrajectoryWindow>,
    pub frame: FrameTransform,
}

impl FusedInput {
    /// The target's current position in global coordinates.
    pub fn tv_current_global(&self) -> Position2D {
        self.frame.from_frame(self.tv_history.latest())
    }
}

/// Fuses shared messages into a predictor input for target `tv`.
///
/// Per vehicle and time step, sensed histories from multiple senders are
/// averaged (in sender-id order, so the result is permutation-invariant);
/// a sender's own exact history overrides any sensed copy of it. All
/// windows are transformed into a frame anchored at the target's current
/// fused position with the given road `heading`. Neighbors are those within
/// the longitudinal interaction band, truncated to the `max_neighbors`
/// closest by |local y|.
pub fn fuse(
    messages: &[ShareMessage],
    tv: VehicleId,
    max_neighbors: usize,
    heading: f64,
) -> Result<FusedInput, SensingError> {
    let Some(first) = messages.first() else {
        return Err(SensingError::TvUnobserved(tv));
    };
    let t0 = first.sender_history.t0;
    let dt = first.sender_history.dt;
    let len = first.sender_history.positions.len();
    for m in messages {
        for w in m.windows() {
            if w.t0 != t0 || w.dt != dt || w.positions.len() != len {
                return Err(SensingError::WindowMismatch);
            }
        }
    }

    // Exact self-reports win; sensed windows are averaged per step across
    // senders, accumulated in sender-id order.
    let mut exact: BTreeMap<VehicleId, &TrajectoryWindow> = BTreeMap::new();
    let mut sensed: BTreeMap<VehicleId, Vec<(VehicleId, &TrajectoryWindow)>> = BTreeMap::new();
    for m in messages {
        if exact.insert(m.sender_id, &m.sender_history).is_some() {
            return Err(SensingError::DuplicateSender(m.sender_id));
        }
        for (id, w) in &m.sensed {
            sensed.entry(*id).or_default().push((m.sender_id, w));
        }
    }
    let mut fused: BTreeMap<VehicleId, TrajectoryWindow> = BTreeMap::new();
    for (id, w) in &exact {
        fused.insert(*id, (*w).clone());
    }
    for (id, mut sources) in sensed {
        if fused.contains_key(&id) {
            continue;
        }
        sources.sort_by_key(|(sender, _)| *sender);
        let mut positions = vec![(0.0, 0.0); len];
        for (_, w) in &sources {
            for (acc, p) in positions.iter_mut().zip(&w.positions) {
                acc.0 += p.x;
                acc.1 += p.y;
            }
        }
        let n = sources.len() as f64;
        let positions = positions
            .into_iter()
            .map(|(x, y)| Position2D::new(x / n, y / n))
            .collect();
        fused.insert(
            id,
            TrajectoryWindow::new(id, t0, dt, positions).expect("same geometry as inputs"),
        );
    }

    let tv_global = fused
        .get(&tv)
        .ok_or(SensingError::TvUnobserved(tv))?
        .clone();
    let frame = FrameTransform::new(tv_global.latest(), heading);

    let candidates: Vec<(VehicleId, Position2D)> = fused
        .iter()
        .filter(|(id, _)| **id != tv)
        .map(|(id, w)| (*id, w.latest()))
        .collect();
    let in_band = neighbor_set(tv, &frame, &candidates);
    let mut by_distance: Vec<(f64, VehicleId)> = in_band
        .into_iter()
        .map(|id| (frame.to_frame(fused[&id].latest()).y.abs(), id))
        .collect();
    by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let neighbor_histories = by_distance
        .into_iter()
        .take(max_neighbors)
        .map(|(_, id)| fused[&id].transformed(&frame))
        .collect();

    Ok(FusedInput {
        tv_history: tv_global.transformed(&frame),
        neighbor_histories,
        frame,
    })
}

/// Debug dump of a message as one JSON line:
/// `{"sender":..,"t0":..,"self":[[x,y]..],"sensed":{"id":[[x,y]..]}}`.
pub fn write_message_jsonl<W: Write>(w: &mut W, msg: &ShareMessage) -> std::io::Result<()> {
    let pairs = |win: &TrajectoryWindow| -> Vec<[f64; 2]> {
        win.positions.iter().map(|p| [p.x, p.y]).collect()
    };
    let value = serde_json::json!({
        "sender": msg.sender_id,
        "t0": msg.sender_history.t0,
        "self": pairs(&msg.sender_history),
        "sensed": msg.sensed.iter()
            .map(|(id, win)| (id.to_string(), pairs(win)))
            .collect::<BTreeMap<String, Vec<[f64; 2]>>>(),
    });
    writeln!(w, "{value}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn noise_level_table() {
        assert_eq!(NoiseLevel::from_level(0).unwrap().magnitude_mean, 0.0);
        assert_eq!(
            (NoiseLevel::from_level(1).unwrap().magnitude_mean, NoiseLevel::from_level(1).unwrap().magnitude_sd),
            (0.3, 0.2)
        );
        assert_eq!(
            (NoiseLevel::from_level(4).unwrap().magnitude_mean, NoiseLevel::from_level(4).unwrap().magnitude_sd),
            (0.6, 0.4)
        );
        assert!(NoiseLevel::from_level(5).is_err());
    }

    #[test]
    fn level_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Position2D::new(3.2, -7.1);
        assert_eq!(sense(p, NoiseLevel::from_level(0).unwrap(), &mut rng), p);
    }

    #[test]
    fn level_one_mean_displacement_near_point_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = NoiseLevel::from_level(1).unwrap();
        let origin = Position2D::new(0.0, 0.0);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sense(origin, noise, &mut rng).distance(&origin))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.3).abs() < 0.02, "mean displacement {mean}");
    }

    #[test]
    fn level_four_displacements_vary_more_than_level_one() {
        let origin = Position2D::new(0.0, 0.0);
        let sample_var = |level: u8, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = NoiseLevel::from_level(level).unwrap();
            let n = 50_000;
            let d: Vec<f64> = (0..n)
                .map(|_| sense(origin, noise, &mut rng).distance(&origin))
                .collect();
            let m = d.iter().sum::<f64>() / n as f64;
            d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0)
        };
        assert!(sample_var(4, 1) > sample_var(1, 1));
    }

    #[test]
    fn collinear_vehicle_occludes() {
        let positions = vec![
            (0, Position2D::new(0.0, 0.0)),
            (1, Position2D::new(0.0, 20.0)),
            (2, Position2D::new(0.0, 40.0)),
        ];
        let vis = visible_set(0, &positions, SENSING_RANGE_M);
        assert_eq!(vis, vec![1]); // 2 is hidden behind 1
    }

    #[test]
    fn adjacent_lane_clear_line_is_visible() {
        let positions = vec![
            (0, Position2D::new(0.0, 0.0)),
            (1, Position2D::new(0.0, 15.0)),
            (2, Position2D::new(3.5, 30.0)),
        ];
        let vis = visible_set(0, &positions, SENSING_RANGE_M);
        assert!(vis.contains(&2), "line to 2 clears the occluder at 1");
    }

    #[test]
    fn beyond_range_is_invisible() {
        let positions = vec![
            (0, Position2D::new(0.0, 0.0)),
            (1, Position2D::new(0.0, SENSING_RANGE_M + 0.001)),
        ];
        assert!(visible_set(0, &positions, SENSING_RANGE_M).is_empty());
    }

    fn window(id: VehicleId, t0: u64, pts: &[(f64, f64)]) -> TrajectoryWindow {
        TrajectoryWindow::new(
            id,
            t0,
            0.1,
            pts.iter().map(|&(x, y)| Position2D::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_sender_passthrough() {
        let tv_win = window(7, 10, &[(0.0, 90.0), (0.0, 95.0), (0.0, 100.0)]);
        let msg = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 10, &[(3.5, 80.0), (3.5, 85.0), (3.5, 90.0)]),
            sensed: BTreeMap::from([(7, tv_win.clone())]),
        };
        let fused = fuse(&[msg], 7, 4, 0.0).unwrap();
        assert_eq!(fused.frame.origin, Position2D::new(0.0, 100.0));
        // TV window re-expressed in its own frame ends at the origin.
        assert_eq!(fused.tv_history.latest(), Position2D::new(0.0, 0.0));
        assert_eq!(fused.neighbor_histories.len(), 1);
        assert_eq!(
            fused.neighbor_histories[0].latest(),
            Position2D::new(3.5, -10.0)
        );
    }

    #[test]
    fn two_senders_average_per_step() {
        let mk = |sender: VehicleId, offset: f64| ShareMessage {
            sender_id: sender,
            sender_history: window(sender, 5, &[(3.5, 0.0), (3.5, 5.0), (3.5, 10.0)]),
            sensed: BTreeMap::from([(
                7,
                window(7, 5, &[(0.0, offset), (0.0, 5.0 + offset), (0.0, 10.0 + offset)]),
            )]),
        };
        let fused = fuse(&[mk(1, 0.0), mk(2, 1.0)], 7, 4, 0.0).unwrap();
        // Fused TV position is the midpoint (p + q) / 2 at every step.
        assert_eq!(fused.frame.origin, Position2D::new(0.0, 10.5));
    }

    #[test]
    fn self_report_overrides_sensed() {
        let exact = window(2, 5, &[(3.5, 0.0), (3.5, 5.0), (3.5, 10.0)]);
        let wrong = window(2, 5, &[(3.5, 2.0), (3.5, 7.0), (3.5, 12.0)]);
        let tv = window(7, 5, &[(0.0, 1.0), (0.0, 6.0), (0.0, 11.0)]);
        let av = ShareMessage {
            sender_id: 2,
            sender_history: exact.clone(),
            sensed: BTreeMap::from([(7, tv.clone())]),
        };
        let observer = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 5, &[(7.0, 0.0), (7.0, 5.0), (7.0, 10.0)]),
            sensed: BTreeMap::from([(7, tv.clone()), (2, wrong)]),
        };
        let fused = fuse(&[observer, av], 7, 4, 0.0).unwrap();
        let nb2 = fused
            .neighbor_histories
            .iter()
            .find(|w| w.vehicle_id == 2)
            .unwrap();
        // Exactly the self-report, shifted into the TV frame.
        let expected = exact.transformed(&fused.frame);
        assert_eq!(nb2, &expected);
    }

    #[test]
    fn fusion_failure_when_tv_unseen() {
        let msg = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 5, &[(0.0, 0.0), (0.0, 5.0), (0.0, 10.0)]),
            sensed: BTreeMap::new(),
        };
        assert!(matches!(
            fuse(&[msg], 7, 4, 0.0),
            Err(SensingError::TvUnobserved(7))
        ));
    }

    #[test]
    fn fuse_is_permutation_invariant() {
        let mk = |sender: VehicleId, dy: f64| ShareMessage {
            sender_id: sender,
            sender_history: window(
                sender,
                5,
                &[(3.5, dy), (3.5, 5.0 + dy), (3.5, 10.0 + dy)],
            ),
            sensed: BTreeMap::from([(
                7,
                window(7, 5, &[(0.0, dy * 0.1), (0.0, 5.0 + dy * 0.1), (0.0, 10.0 + dy * 0.1)]),
            )]),
        };
        let msgs = vec![mk(1, 0.0), mk(2, 3.0), mk(3, 9.0)];
        let base = fuse(&msgs, 7, 4, 0.0).unwrap();
        let perms: [[usize; 3]; 5] = [
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            let reordered: Vec<ShareMessage> = perm.iter().map(|&i| msgs[i].clone()).collect();
            let fused = fuse(&reordered, 7, 4, 0.0).unwrap();
            assert_eq!(fused, base);
        }
    }

    #[test]
    fn adding_a_message_never_removes_windows() {
        let m1 = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 5, &[(3.5, 5.0), (3.5, 10.0), (3.5, 15.0)]),
            sensed: BTreeMap::from([(7, window(7, 5, &[(0.0, 0.0), (0.0, 5.0), (0.0, 10.0)]))]),
        };
        let m2 = ShareMessage {
            sender_id: 2,
            sender_history: window(2, 5, &[(7.0, 0.0), (7.0, 6.0), (7.0, 12.0)]),
            sensed: BTreeMap::from([
                (7, window(7, 5, &[(0.0, 0.0), (0.0, 5.0), (0.0, 10.0)])),
                (9, window(9, 5, &[(0.0, 18.0), (0.0, 24.0), (0.0, 30.0)])),
            ]),
        };
        let before = fuse(std::slice::from_ref(&m1), 7, 8, 0.0).unwrap();
        let after = fuse(&[m1, m2], 7, 8, 0.0).unwrap();
        let ids = |f: &FusedInput| {
            f.neighbor_histories
                .iter()
                .map(|w| w.vehicle_id)
                .collect::<Vec<_>>()
        };
        for id in ids(&before) {
            assert!(ids(&after).contains(&id));
        }
        assert!(ids(&after).contains(&9));
    }

    #[test]
    fn level_zero_full_visibility_reproduces_ground_truth() {
        // An AV that senses everything at level 0 reproduces the exact
        // windows: fused output equals ground truth transformed to frame.
        let truth_tv = window(7, 5, &[(0.0, 0.0), (0.0, 6.0), (0.0, 12.0)]);
        let truth_nb = window(3, 5, &[(3.5, 4.0), (3.5, 9.0), (3.5, 14.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = NoiseLevel::from_level(0).unwrap();
        let sensed_tv = TrajectoryWindow::new(
            7,
            5,
            0.1,
            truth_tv.positions.iter().map(|p| sense(*p, noise, &mut rng)).collect(),
        )
        .unwrap();
        let sensed_nb = TrajectoryWindow::new(
            3,
            5,
            0.1,
            truth_nb.positions.iter().map(|p| sense(*p, noise, &mut rng)).collect(),
        )
        .unwrap();
        let msg = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 5, &[(7.0, 0.0), (7.0, 5.0), (7.0, 10.0)]),
            sensed: BTreeMap::from([(7, sensed_tv), (3, sensed_nb)]),
        };
        let fused = fuse(&[msg], 7, 4, 0.0).unwrap();
        let frame = fused.frame;
        assert_eq!(fused.tv_history, truth_tv.transformed(&frame));
        let nb = fused
            .neighbor_histories
            .iter()
            .find(|w| w.vehicle_id == 3)
            .unwrap();
        assert_eq!(nb, &truth_nb.transformed(&frame));
    }

    #[test]
    fn message_jsonl_dump_shape() {
        let msg = ShareMessage {
            sender_id: 1,
            sender_history: window(1, 5, &[(0.0, 0.0), (0.0, 5.0)]),
            sensed: BTreeMap::from([(7, window(7, 5, &[(1.0, 2.0), (1.0, 7.0)]))]),
        };
        let mut buf = Vec::new();
        write_message_jsonl(&mut buf, &msg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["sender"], 1);
        assert_eq!(v["t0"], 5);
        assert_eq!(v["self"][1][1], 5.0);
        assert_eq!(v["sensed"]["7"][0][0], 1.0);
    }
}
