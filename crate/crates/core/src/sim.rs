//! Deterministic, seeded microscopic traffic simulator on a straight
//! multilane road.
//!
//! Longitudinal motion follows a Krauss-style speed update: the follower's
//! speed is capped by a collision-safe value derived from the gap to its
//! leader, then degraded by a stochastic driver-imperfection term. Lateral
//! motion is a lane index plus a smoothed lane-change transition of the
//! reported x coordinate. Vehicles flagged as to-become-abnormal swap to
//! the abnormal parameter column the first sample their position passes a
//! per-vehicle random switch location.
//!
//! A scenario is a pure function of its config (seed included): repeated
//! runs produce bitwise-identical trajectory logs.

use crate::io::TrajectoryRecord;
use crate::types::{Position2D, VehicleId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bumper-to-bumper vehicle length used for gap computation.
pub const VEHICLE_LENGTH_M: f64 = 5.0;
/// Lane center spacing.
pub const LANE_WIDTH_M: f64 = 3.5;
/// Seconds a lane change takes to traverse laterally.
const LANE_CHANGE_DURATION_S: f64 = 2.0;
/// Minimum seconds between committed lane changes of one vehicle.
const LANE_CHANGE_COOLDOWN_S: f64 = 3.0;
/// Speed-gain threshold (m/s, after scaling by lc_speed_gain) to change lane.
const LANE_CHANGE_GAIN_THRESHOLD: f64 = 1.0;
/// Planning horizon for projected lane speeds in the lane-change rule.
const LANE_CHANGE_PLAN_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("invalid driving params: {0}")]
    InvalidParams(String),
    #[error("config parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Car-following and lane-change parameters of one driving behavior type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingParams {
    pub accel: f64,
    pub decel: f64,
    pub min_gap: f64,
    pub sigma: f64,
    pub max_speed: f64,
    pub speed_factor: f64,
    pub lc_cooperative: f64,
    pub lc_speed_gain: f64,
    pub lc_sigma: f64,
}

impl DrivingParams {
    pub fn normal_highway() -> Self {
        Self {
            accel: 2.6,
            decel: 4.5,
            min_gap: 2.5,
            sigma: 0.1,
            max_speed: 30.0,
            speed_factor: 1.0,
            lc_cooperative: 1.0,
            lc_speed_gain: 1.0,
            lc_sigma: 0.1,
        }
    }

    /// Abnormal column; `max_speed` is one of the two per-vehicle options
    /// (20 or 45 on the highway scenario), drawn at flagging time.
    pub fn abnormal_highway(max_speed: f64) -> Self {
        Self {
            accel: 7.0,
            decel: 8.0,
            min_gap: 1.0,
            sigma: 0.8,
            max_speed,
            speed_factor: 1.2,
            lc_cooperative: 0.1,
            lc_speed_gain: 5.0,
            lc_sigma: 0.8,
        }
    }

    pub fn normal_urban() -> Self {
        Self {
            max_speed: 16.0,
            ..Self::normal_highway()
        }
    }

    pub fn abnormal_urban(max_speed: f64) -> Self {
        Self {
            max_speed,
            ..Self::abnormal_highway(max_speed)
        }
    }

    /// The two abnormal max-speed options for a road style.
    pub fn abnormal_speed_options(urban: bool) -> [f64; 2] {
        if urban {
            [7.0, 25.0]
        } else {
            [20.0, 45.0]
        }
    }

    pub fn desired_speed(&self) -> f64 {
        self.max_speed * self.speed_factor
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("accel", self.accel),
            ("decel", self.decel),
            ("min_gap", self.min_gap),
            ("max_speed", self.max_speed),
        ] {
            if !(v > 0.0) {
                return Err(SimError::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma) || !(0.0..=1.0).contains(&self.lc_sigma) {
            return Err(SimError::InvalidParams(
                "sigma and lc_sigma must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub lanes: usize,
    pub road_length: f64,
    /// Demand in vehicles per hour across all lanes.
    pub volume: f64,
    pub duration: f64,
    pub seed: u64,
    /// Connected-AV share of inserted vehicles, as the ratio n_av : n_hv.
    pub n_av: usize,
    pub n_hv: usize,
    /// Fraction of inserted human-driven vehicles flagged to become abnormal.
    pub abnormal_fraction: f64,
    pub dt: f64,
    /// Urban parameter set (lower speed columns); highway otherwise.
    pub urban: bool,
}

impl ScenarioConfig {
    pub fn default_highway() -> Self {
        Self {
            lanes: 5,
            road_length: 1000.0,
            volume: 8000.0,
            duration: 3600.0,
            seed: 1,
            n_av: 1,
            n_hv: 1,
            abnormal_fraction: 0.125,
            dt: 0.1,
            urban: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.lanes < 1 {
            return Err(SimError::InvalidConfig("lanes must be >= 1".into()));
        }
        if self.n_av + self.n_hv == 0 {
            return Err(SimError::InvalidConfig("n_av + n_hv must be > 0".into()));
        }
        if !(self.road_length > 0.0) {
            return Err(SimError::InvalidConfig("road_length must be > 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidConfig("dt must be > 0".into()));
        }
        if !(self.volume >= 0.0) || !(self.duration > 0.0) {
            return Err(SimError::InvalidConfig("volume/duration out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(SimError::InvalidConfig(
                "abnormal_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Flat `key=value` rendering, one pair per line.
    pub fn to_kv(&self) -> String {
        format!(
            "lanes={}\nroad_length={}\nvolume={}\nduration={}\nseed={}\nn_av={}\nn_hv={}\nabnormal_fraction={}\ndt={}\nurban={}\n",
            self.lanes,
            self.road_length,
            self.volume,
            self.duration,
            self.seed,
            self.n_av,
            self.n_hv,
            self.abnormal_fraction,
            self.dt,
            self.urban
        )
    }

    pub fn parse_kv(text: &str) -> Result<Self, SimError> {
        let mut cfg = Self::default_highway();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SimError::Parse {
                line: i + 1,
                reason: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |reason: String| SimError::Parse { line: i + 1, reason };
            match key {
                "lanes" => cfg.lanes = value.parse().map_err(|e| bad(format!("lanes: {e}")))?,
                "road_length" => {
                    cfg.road_length = value.parse().map_err(|e| bad(format!("road_length: {e}")))?
                }
                "volume" => cfg.volume = value.parse().map_err(|e| bad(format!("volume: {e}")))?,
                "duration" => {
                    cfg.duration = value.parse().map_err(|e| bad(format!("duration: {e}")))?
                }
                "seed" => cfg.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                "n_av" => cfg.n_av = value.parse().map_err(|e| bad(format!("n_av: {e}")))?,
                "n_hv" => cfg.n_hv = value.parse().map_err(|e| bad(format!("n_hv: {e}")))?,
                "abnormal_fraction" => {
                    cfg.abnormal_fraction =
                        value.parse().map_err(|e| bad(format!("abnormal_fraction: {e}")))?
                }
                "dt" => cfg.dt = value.parse().map_err(|e| bad(format!("dt: {e}")))?,
                "urban" => cfg.urban = value.parse().map_err(|e| bad(format!("urban: {e}")))?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ground-truth switch time of one vehicle; `None` means it never switched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimLabel {
    pub vehicle_id: VehicleId,
    pub gamma: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    ConnectedAv,
    HumanDriven,
}

/// Public per-vehicle kinematic state used by the stepping rules.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub lane: usize,
    pub pos: Position2D,
    pub speed: f64,
    pub params: DrivingParams,
    pub mode: Mode,
    pub kind: VehicleKind,
}

/// Krauss speed update. The follower accelerates toward its desired speed,
/// capped by the collision-safe speed w.r.t. its leader, then loses a
/// stochastic imperfection term:
///
/// `v_safe = v_l + (gap_eff - v_l * dt) / ((v + v_l) / (2 decel) + dt)`
/// `v'     = max(0, min(v + accel dt, desired, v_safe) - sigma accel dt U)`
///
/// where `gap_eff` is the bumper-to-bumper gap minus the follower's desired
/// standstill gap (floored at zero) and `U ~ U[0, 1)`.
pub fn krauss_step(
    follower: &VehicleState,
    leader: Option<&VehicleState>,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let p = &follower.params;
    let mut v_next = (follower.speed + p.accel * dt).min(p.desired_speed());
    if let Some(l) = leader {
        let gap = l.pos.y - VEHICLE_LENGTH_M - follower.pos.y;
        debug_assert!(gap >= -1e-9, "leader overlaps follower: gap {gap}");
        let gap_eff = (gap - p.min_gap).max(0.0);
        let v_safe = safe_speed(follower.speed, l.speed, gap_eff, p.decel, dt);
        v_next = v_next.min(v_safe);
    }
    let imperfection = p.sigma * p.accel * dt * rng.gen::<f64>();
    (v_next - imperfection).max(0.0)
}

fn safe_speed(v: f64, v_leader: f64, gap_eff: f64, decel: f64, dt: f64) -> f64 {
    let tau_b = (v + v_leader) / (2.0 * decel);
    (v_leader + (gap_eff - v_leader * dt) / (tau_b + dt)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneChange {
    Stay,
    Left,
    Right,
}

/// Leader/follower gaps and speeds around a vehicle, per adjacent lane.
/// Gaps are bumper-to-bumper; `None` means the slot is empty.
#[derive(Debug, Clone, Copy, Default)]
pub struct LaneContext {
    pub lanes: usize,
    pub dt: f64,
    pub leader_current: Option<(f64, f64)>,
    pub leader_left: Option<(f64, f64)>,
    pub follower_left: Option<(f64, f64)>,
    pub leader_right: Option<(f64, f64)>,
    pub follower_right: Option<(f64, f64)>,
}

/// Lane-change rule: change toward the adjacent lane with the highest
/// projected speed gain when `gain * lc_speed_gain` exceeds 1 m/s and the
/// target slot is safe (front gap >= min_gap; rear gap >= min_gap plus a
/// cooperative margin scaled by lc_cooperative). Execution is perturbed to
/// a wrong (later) time with probability `lc_sigma * 0.1`.
pub fn lane_change_decision(
    vehicle: &VehicleState,
    ctx: &LaneContext,
    rng: &mut ChaCha8Rng,
) -> LaneChange {
    let p = &vehicle.params;
    let project = |leader: Option<(f64, f64)>| -> f64 {
        let mut v = (vehicle.speed + p.accel * LANE_CHANGE_PLAN_S).min(p.desired_speed());
        if let Some((gap, v_leader)) = leader {
            let gap_eff = (gap - p.min_gap).max(0.0);
            v = v.min(safe_speed(vehicle.speed, v_leader, gap_eff, p.decel, ctx.dt));
        }
        v
    };
    let current = project(ctx.leader_current);
    let safe = |leader: Option<(f64, f64)>, follower: Option<(f64, f64)>| -> bool {
        if let Some((gap, _)) = leader {
            if gap < p.min_gap {
                return false;
            }
        }
        if let Some((gap, v_rear)) = follower {
            if gap < p.min_gap + p.lc_cooperative * v_rear * 0.5 {
                return false;
            }
        }
        true
    };
    let mut best = LaneChange::Stay;
    let mut best_gain = 0.0;
    if vehicle.lane + 1 < ctx.lanes && safe(ctx.leader_left, ctx.follower_left) {
        let gain = project(ctx.leader_left) - current;
        if gain * p.lc_speed_gain > LANE_CHANGE_GAIN_THRESHOLD && gain > best_gain {
            best = LaneChange::Left;
            best_gain = gain;
        }
    }
    if vehicle.lane > 0 && safe(ctx.leader_right, ctx.follower_right) {
        let gain = project(ctx.leader_right) - current;
        if gain * p.lc_speed_gain > LANE_CHANGE_GAIN_THRESHOLD && gain > best_gain {
            best = LaneChange::Right;
        }
    }
    if best != LaneChange::Stay && rng.gen::<f64>() < p.lc_sigma * 0.1 {
        // Mistimed execution: the change happens on a later decision instead.
        return LaneChange::Stay;
    }
    best
}

/// Draws the longitudinal switch location for a flagged vehicle,
/// uniform over the middle [0.2, 0.8] of the road.
pub fn schedule_switch_location(road_length: f64, rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.2..0.8) * road_length
}

/// Summary of one simulated vehicle's lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub spawned_at: u64,
    pub exited_at: Option<u64>,
    pub gamma: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Samples in time order (one block per step, vehicles by id).
    pub trajectories: Vec<TrajectoryRecord>,
    pub labels: Vec<SimLabel>,
    pub vehicles: Vec<VehicleInfo>,
    pub config: ScenarioConfig,
}

impl SimOutput {
    pub fn kind_of(&self, id: VehicleId) -> Option<VehicleKind> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .ok()
            .map(|i| self.vehicles[i].kind)
    }

    pub fn gamma_of(&self, id: VehicleId) -> Option<u64> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .ok()
            .and_then(|i| self.vehicles[i].gamma)
    }
}

/// Per-step internal trace used by invariant tests.
#[derive(Debug, Clone)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct StepSnapshot {
    pub t: u64,
    pub vehicles: Vec<(VehicleId, usize, f64, DrivingParams)>, // id, lane, y, params
}

struct Veh {
    id: VehicleId,
    kind: VehicleKind,
    lane: usize,
    y: f64,
    x: f64,
    x_from: f64,
    x_target: f64,
    lc_remaining: f64,
    lc_cooldown: f64,
    speed: f64,
    params: DrivingParams,
    mode: Mode,
    switch_at_y: Option<f64>,
    abnormal_params: Option<DrivingParams>,
    gamma: Option<u64>,
    spawned_at: u64,
}

impl Veh {
    fn state(&self) -> VehicleState {
        VehicleState {
            id: self.id,
            lane: self.lane,
            pos: Position2D::new(self.x, self.y),
            speed: self.speed,
            params: self.params,
            mode: self.mode,
            kind: self.kind,
        }
    }
}

fn lane_center(lane: usize) -> f64 {
    lane as f64 * LANE_WIDTH_M
}

/// Runs a scenario to completion. Deterministic in the config.
pub fn run_scenario(config: &ScenarioConfig) -> Result<SimOutput, SimError> {
    run_scenario_impl(config, false).map(|(out, _)| out)
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn run_scenario_traced(
    config: &ScenarioConfig,
) -> Result<(SimOutput, Vec<StepSnapshot>), SimError> {
    run_scenario_impl(config, true)
}

fn run_scenario_impl(
    config: &ScenarioConfig,
    trace: bool,
) -> Result<(SimOutput, Vec<StepSnapshot>), SimError> {
    config.validate()?;
    let normal = if config.urban {
        DrivingParams::normal_urban()
    } else {
        DrivingParams::normal_highway()
    };
    normal.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_steps = (config.duration / config.dt).round() as u64;
    let arrival_rate = config.volume / 3600.0 / config.lanes as f64 * config.dt;
    let av_ratio = config.n_av as f64 / (config.n_av + config.n_hv) as f64;

    let mut active: Vec<Veh> = Vec::new();
    let mut done: Vec<VehicleInfo> = Vec::new();
    let mut trajectories: Vec<TrajectoryRecord> = Vec::new();
    let mut snapshots: Vec<StepSnapshot> = Vec::new();
    let mut next_id: VehicleId = 0;
    let mut inserted_total: u64 = 0;
    let mut inserted_hv: u64 = 0;
    let mut flagged_abnormal: u64 = 0;

    for t in 0..n_steps {
        // Lane-change phase: front to back, committed sequentially so later
        // deciders see earlier changes.
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            active[b]
                .y
                .partial_cmp(&active[a].y)
                .unwrap()
                .then(active[a].id.cmp(&active[b].id))
        });
        for &i in &order {
            if active[i].lc_cooldown > 0.0 || active[i].lc_remaining > 0.0 {
                continue;
            }
            let ctx = lane_context(&active, i, config.lanes, config.dt);
            let state = active[i].state();
            let decision = lane_change_decision(&state, &ctx, &mut rng);
            let new_lane = match decision {
                LaneChange::Stay => continue,
                LaneChange::Left => active[i].lane + 1,
                LaneChange::Right => active[i].lane - 1,
            };
            let v = &mut active[i];
            v.lane = new_lane;
            v.x_from = v.x;
            v.x_target = lane_center(new_lane);
            v.lc_remaining = LANE_CHANGE_DURATION_S;
            v.lc_cooldown = LANE_CHANGE_COOLDOWN_S + LANE_CHANGE_DURATION_S;
        }

        // Speed phase: new speeds from the current state, fixed order.
        let mut new_speeds = vec![0.0; active.len()];
        let mut by_lane = lanes_sorted(&active, config.lanes);
        for lane in by_lane.iter() {
            for (rank, &i) in lane.iter().enumerate() {
                let leader = if rank > 0 {
                    Some(active[lane[rank - 1]].state())
                } else {
                    None
                };
                new_speeds[i] = krauss_step(&active[i].state(), leader.as_ref(), config.dt, &mut rng);
            }
        }

        // Advance phase: leaders first; an emergency clamp keeps followers
        // from overlapping when a leader brakes harder than planned for.
        for lane in by_lane.iter_mut() {
            let mut front_limit = f64::INFINITY;
            for &i in lane.iter() {
                let v = &mut active[i];
                v.speed = new_speeds[i];
                let mut y_new = v.y + v.speed * config.dt;
                if y_new > front_limit {
                    y_new = front_limit;
                    v.speed = ((y_new - v.y) / config.dt).max(0.0);
                }
                v.y = y_new.max(v.y);
                front_limit = v.y - VEHICLE_LENGTH_M;
                if v.lc_remaining > 0.0 {
                    v.lc_remaining = (v.lc_remaining - config.dt).max(0.0);
                    let progress = 1.0 - v.lc_remaining / LANE_CHANGE_DURATION_S;
                    v.x = v.x_from + (v.x_target - v.x_from) * progress;
                } else {
                    v.x = lane_center(v.lane);
                }
                v.lc_cooldown = (v.lc_cooldown - config.dt).max(0.0);
                // Mode switch the first sample the vehicle passes its
                // scheduled location.
                if let Some(switch_y) = v.switch_at_y {
                    if v.y >= switch_y && v.gamma.is_none() {
                        v.params = v.abnormal_params.expect("flagged vehicles carry params");
                        v.mode = Mode::Abnormal;
                        v.gamma = Some(t);
                    }
                }
            }
        }

        // Exits.
        let road_length = config.road_length;
        let mut i = 0;
        while i < active.len() {
            if active[i].y >= road_length {
                let v = active.swap_remove(i);
                done.push(VehicleInfo {
                    id: v.id,
                    kind: v.kind,
                    spawned_at: v.spawned_at,
                    exited_at: Some(t),
                    gamma: v.gamma,
                });
            } else {
                i += 1;
            }
        }

        // Insertions: Poisson arrivals per lane, rejected when the entry
        // gap is below the newcomer's min_gap.
        for lane_idx in 0..config.lanes {
            let arrivals = if arrival_rate > 0.0 {
                Poisson::new(arrival_rate).expect("positive rate").sample(&mut rng) as u64
            } else {
                0
            };
            for _ in 0..arrivals {
                let tail = active
                    .iter()
                    .filter(|v| v.lane == lane_idx)
                    .min_by(|a, b| a.y.partial_cmp(&b.y).unwrap());
                let entry_gap = tail.map(|v| v.y - VEHICLE_LENGTH_M).unwrap_or(f64::INFINITY);
                if entry_gap < normal.min_gap {
                    continue;
                }
                let is_av = floor_stride(inserted_total, av_ratio);
                inserted_total += 1;
                let kind = if is_av {
                    VehicleKind::ConnectedAv
                } else {
                    VehicleKind::HumanDriven
                };
                let mut switch_at_y = None;
                let mut abnormal_params = None;
                if kind == VehicleKind::HumanDriven {
                    let flag = floor_stride(inserted_hv, config.abnormal_fraction);
                    inserted_hv += 1;
                    if flag {
                        flagged_abnormal += 1;
                        let _ = flagged_abnormal;
                        switch_at_y = Some(schedule_switch_location(road_length, &mut rng));
                        let options = DrivingParams::abnormal_speed_options(config.urban);
                        let max_speed = options[rng.gen_range(0..2usize)];
                        abnormal_params = Some(if config.urban {
                            DrivingParams::abnormal_urban(max_speed)
                        } else {
                            DrivingParams::abnormal_highway(max_speed)
                        });
                    }
                }
                let entry_speed = match tail {
                    Some(leader) => {
                        let gap_eff = (entry_gap - normal.min_gap).max(0.0);
                        safe_speed(normal.desired_speed(), leader.speed, gap_eff, normal.decel, config.dt)
                            .min(normal.desired_speed())
                    }
                    None => normal.desired_speed(),
                };
                active.push(Veh {
                    id: next_id,
                    kind,
                    lane: lane_idx,
                    y: 0.0,
                    x: lane_center(lane_idx),
                    x_from: lane_center(lane_idx),
                    x_target: lane_center(lane_idx),
                    lc_remaining: 0.0,
                    lc_cooldown: 0.0,
                    speed: entry_speed,
                    params: normal,
                    mode: Mode::Normal,
                    switch_at_y,
                    abnormal_params,
                    gamma: None,
                    spawned_at: t,
                });
                next_id += 1;
            }
        }

        // Record phase: every active vehicle, ordered by id.
        let mut ids: Vec<usize> = (0..active.len()).collect();
        ids.sort_by_key(|&i| active[i].id);
        for &i in &ids {
            let v = &active[i];
            trajectories.push(TrajectoryRecord {
                vehicle_id: v.id,
                t,
                x: v.x,
                y: v.y,
            });
        }
        if trace {
            snapshots.push(StepSnapshot {
                t,
                vehicles: ids
                    .iter()
                    .map(|&i| (active[i].id, active[i].lane, active[i].y, active[i].params))
                    .collect(),
            });
        }
    }

    for v in active {
        done.push(VehicleInfo {
            id: v.id,
            kind: v.kind,
            spawned_at: v.spawned_at,
            exited_at: None,
            gamma: v.gamma,
        });
    }
    done.sort_by_key(|v| v.id);
    let labels = done
        .iter()
        .map(|v| SimLabel {
            vehicle_id: v.id,
            gamma: v.gamma,
        })
        .collect();
    Ok((
        SimOutput {
            trajectories,
            labels,
            vehicles: done,
            config: config.clone(),
        },
        snapshots,
    ))
}

/// Deterministic proportional assignment: true for index `k` when the
/// integer part of `(k+1) * ratio` advances past that of `k * ratio`.
fn floor_stride(k: u64, ratio: f64) -> bool {
    ((k + 1) as f64 * ratio).floor() > (k as f64 * ratio).floor()
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Writes `labels.csv` rows `vehicle_id,gamma` (gamma `inf` when the
/// vehicle never switched).
pub fn write_labels_csv<W: std::io::Write>(w: &mut W, labels: &[SimLabel]) -> std::io::Result<()> {
    writeln!(w, "vehicle_id,gamma")?;
    for l in labels {
        match l.gamma {
            Some(g) => writeln!(w, "{},{}", l.vehicle_id, g)?,
            None => writeln!(w, "{},inf", l.vehicle_id)?,
        }
    }
    Ok(())
}

pub fn read_labels_csv<R: std::io::BufRead>(r: R) -> Result<Vec<SimLabel>, SimError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SimError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, gamma) = line.split_once(',').ok_or_else(|| SimError::Parse {
            line: i + 1,
            reason: "expected vehicle_id,gamma".into(),
        })?;
        let bad = |reason: String| SimError::Parse { line: i + 1, reason };
        out.push(SimLabel {
            vehicle_id: id.trim().parse().map_err(|e| bad(format!("id: {e}")))?,
            gamma: match gamma.trim() {
                "inf" => None,
                v => Some(v.parse().map_err(|e| bad(format!("gamma: {e}")))?),
            },
        });
    }
    Ok(out)
}

/// Writes `vehicles.csv` rows `vehicle_id,kind,spawned_at,exited_at`.
pub fn write_vehicles_csv<W: std::io::Write>(
    w: &mut W,
    vehicles: &[VehicleInfo],
) -> std::io::Result<()> {
    writeln!(w, "vehicle_id,kind,spawned_at,exited_at")?;
    for v in vehicles {
        let kind = match v.kind {
            VehicleKind::ConnectedAv => "av",
            VehicleKind::HumanDriven => "hv",
        };
        match v.exited_at {
            Some(t) => writeln!(w, "{},{},{},{}", v.id, kind, v.spawned_at, t)?,
            None => writeln!(w, "{},{},{},", v.id, kind, v.spawned_at)?,
        }
    }
    Ok(())
}

pub fn read_vehicles_csv<R: std::io::BufRead>(r: R) -> Result<Vec<VehicleInfo>, SimError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SimError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |reason: String| SimError::Parse { line: i + 1, reason };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        out.push(VehicleInfo {
            id: fields[0].trim().parse().map_err(|e| bad(format!("id: {e}")))?,
            kind: match fields[1].trim() {
                "av" => VehicleKind::ConnectedAv,
                "hv" => VehicleKind::HumanDriven,
                other => return Err(bad(format!("unknown kind {other:?}"))),
            },
            spawned_at: fields[2].trim().parse().map_err(|e| bad(format!("spawned: {e}")))?,
            exited_at: match fields[3].trim() {
                "" => None,
                v => Some(v.parse().map_err(|e| bad(format!("exited: {e}")))?),
            },
            gamma: None, // carried by labels.csv
        });
    }
    Ok(out)
}

/// Runs a scenario and writes `trajectories.csv`, `trajectories.jsonl`,
/// `labels.csv`, `vehicles.csv`, and `scenario.cfg` into `dir`.
pub fn simulate_to_dir(config: &ScenarioConfig, dir: &std::path::Path) -> Result<SimOutput, SimError> {
    let out = run_scenario(config)?;
    let io_err = |e: std::io::Error| SimError::InvalidConfig(format!("cannot write output: {e}"));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut traj = Vec::new();
    crate::io::write_trajectory_csv(&mut traj, &out.trajectories)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    std::fs::write(dir.join("trajectories.csv"), traj).map_err(io_err)?;
    let mut jsonl = Vec::new();
    crate::io::write_trajectory_jsonl(&mut jsonl, &out.trajectories)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    std::fs::write(dir.join("trajectories.jsonl"), jsonl).map_err(io_err)?;
    let mut labels = Vec::new();
    write_labels_csv(&mut labels, &out.labels).map_err(io_err)?;
    std::fs::write(dir.join("labels.csv"), labels).map_err(io_err)?;
    let mut vehicles = Vec::new();
    write_vehicles_csv(&mut vehicles, &out.vehicles).map_err(io_err)?;
    std::fs::write(dir.join("vehicles.csv"), vehicles).map_err(io_err)?;
    std::fs::write(dir.join("scenario.cfg"), config.to_kv()).map_err(io_err)?;
    Ok(out)
}

/// Loads a directory written by [`simulate_to_dir`] back into a
/// [`SimOutput`].
pub fn load_sim_dir(dir: &std::path::Path) -> Result<SimOutput, SimError> {
    let io_err = |e: std::io::Error| SimError::InvalidConfig(format!("cannot read input: {e}"));
    let config =
        ScenarioConfig::parse_kv(&std::fs::read_to_string(dir.join("scenario.cfg")).map_err(io_err)?)?;
    let traj_file = std::fs::File::open(dir.join("trajectories.csv")).map_err(io_err)?;
    let trajectories = crate::io::read_trajectory_csv(std::io::BufReader::new(traj_file))
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let labels_file = std::fs::File::open(dir.join("labels.csv")).map_err(io_err)?;
    let labels = read_labels_csv(std::io::BufReader::new(labels_file))?;
    let vehicles_file = std::fs::File::open(dir.join("vehicles.csv")).map_err(io_err)?;
    let mut vehicles = read_vehicles_csv(std::io::BufReader::new(vehicles_file))?;
    let gamma_by_id: std::collections::BTreeMap<VehicleId, Option<u64>> =
        labels.iter().map(|l| (l.vehicle_id, l.gamma)).collect();
    for v in &mut vehicles {
        v.gamma = gamma_by_id.get(&v.id).copied().flatten();
    }
    vehicles.sort_by_key(|v| v.id);
    Ok(SimOutput {
        trajectories,
        labels,
        vehicles,
        config,
    })
}

fn lanes_sorted(active: &[Veh], lanes: usize) -> Vec<Vec<usize>> {
    let mut by_lane: Vec<Vec<usize>> = vec![Vec::new(); lanes];
    for (i, v) in active.iter().enumerate() {
        by_lane[v.lane].push(i);
    }
    for lane in &mut by_lane {
        lane.sort_by(|&a, &b| {
            active[b]
                .y
                .partial_cmp(&active[a].y)
                .unwrap()
                .then(active[a].id.cmp(&active[b].id))
        });
    }
    by_lane
}

fn lane_context(active: &[Veh], i: usize, lanes: usize, dt: f64) -> LaneContext {
    let me = &active[i];
    let mut ctx = LaneContext {
        lanes,
        dt,
        ..LaneContext::default()
    };
    let scan = |lane: i64| -> (Option<(f64, f64)>, Option<(f64, f64)>) {
        if lane < 0 || lane >= lanes as i64 {
            return (None, None);
        }
        let mut leader: Option<(f64, f64)> = None;
        let mut follower: Option<(f64, f64)> = None;
        for (j, v) in active.iter().enumerate() {
            if j == i || v.lane as i64 != lane {
                continue;
            }
            if v.y >= me.y {
                let gap = v.y - VEHICLE_LENGTH_M - me.y;
                if leader.map_or(true, |(g, _)| gap < g) {
                    leader = Some((gap, v.speed));
                }
            } else {
                let gap = me.y - VEHICLE_LENGTH_M - v.y;
                if follower.map_or(true, |(g, _)| gap < g) {
                    follower = Some((gap, v.speed));
                }
            }
        }
        (leader, follower)
    };
    let (lc, _) = scan(me.lane as i64);
    ctx.leader_current = lc;
    let (ll, fl) = scan(me.lane as i64 + 1);
    ctx.leader_left = ll;
    ctx.follower_left = fl;
    let (lr, fr) = scan(me.lane as i64 - 1);
    ctx.leader_right = lr;
    ctx.follower_right = fr;
    ctx
}
