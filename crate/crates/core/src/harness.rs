//! End-to-end experiment orchestration: simulate, observe and fuse, train
//! or calibrate a predictor, run a change detector per target vehicle, and
//! aggregate detection quality into result rows.
//!
//! A [`Study`] owns one simulated scenario plus caches for trained models
//! and per-vehicle prediction-error streams, so that sweeping detectors and
//! noise levels reuses the expensive stages. Every stage is deterministic
//! in the experiment seed.

use crate::predict::{
    forward, predict_cv, train, AttentionWeights, PredictError, PredictorConfig, TrainingSample,
};
use crate::qcd::{calibrate, detect_stream, DetectorConfig, DetectorSpec, GaussianSpec, QcdError};
use crate::sensing::{
    fuse, sense, FusedInput, NoiseLevel, SensingError, ShareMessage, SENSING_RANGE_M,
};
use crate::sim::{run_scenario, ScenarioConfig, SimError, SimOutput, VehicleKind};
use crate::types::{FrameTransform, Position2D, TrajectoryWindow, VehicleId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Connected vehicles within this radius of the target contribute shared
/// messages when sharing is on.
pub const SHARING_RADIUS_M: f64 = 100.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Qcd(#[from] QcdError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error("not enough {0} calibration samples ({1})")]
    InsufficientCalibration(&'static str, usize),
    #[error("no vehicles to evaluate")]
    NoEvalVehicles,
    #[error("sweep config: {0}")]
    SweepConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorKind {
    ConstantVelocity,
    MeatpMini,
}

impl PredictorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PredictorKind::ConstantVelocity => "cv",
            PredictorKind::MeatpMini => "meatp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorKind {
    CuSum,
    MCuSum,
    Glrt,
}

impl DetectorKind {
    pub fn label(&self) -> &'static str {
        match self {
            DetectorKind::CuSum => "cusum",
            DetectorKind::MCuSum => "mcusum",
            DetectorKind::Glrt => "glrt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub noise_level: u8,
    pub predictor: PredictorKind,
    pub sharing: bool,
    pub detector: DetectorKind,
    pub alpha: f64,
    /// Detection threshold override; the detector's canonical rule applies
    /// when absent.
    pub b_override: Option<f64>,
    pub n_eval_vehicles: usize,
    /// Collection samples per prediction step (2 means predicting at 5 Hz
    /// from a 10 Hz log).
    pub stride: usize,
    /// Detection horizon in prediction steps (errors score the prediction
    /// made `horizon_steps` strides earlier).
    pub horizon_steps: usize,
    pub predictor_config: PredictorConfig,
    /// Growth rate of the constant-velocity baseline's sigma per step.
    pub cv_sigma: f64,
    pub train_sample_cap: usize,
    /// Subsampling stride (in prediction steps) for training samples.
    pub sample_every: usize,
    pub calib_normal_cap: usize,
    pub calib_abnormal_cap: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale highway experiment with the attention predictor.
    pub fn desk_default() -> Self {
        Self {
            scenario: ScenarioConfig {
                lanes: 5,
                road_length: 1000.0,
                volume: 6000.0,
                duration: 1200.0,
                seed: 7,
                n_av: 1,
                n_hv: 1,
                abnormal_fraction: 0.3,
                dt: 0.1,
                urban: false,
            },
            noise_level: 0,
            predictor: PredictorKind::MeatpMini,
            sharing: true,
            detector: DetectorKind::CuSum,
            alpha: 0.01,
            b_override: None,
            n_eval_vehicles: 300,
            stride: 2,
            horizon_steps: 1,
            predictor_config: PredictorConfig {
                t_h: 10,
                t_f: 15,
                train_steps: 250,
                batch_size: 32,
                seed: 11,
                ..PredictorConfig::default()
            },
            cv_sigma: 0.5,
            train_sample_cap: 2000,
            sample_every: 5,
            calib_normal_cap: 80,
            calib_abnormal_cap: 80,
            seed: 7,
        }
    }
}

/// Aggregated detection outcome over the evaluated vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub detected: usize,
    pub false_alarm: usize,
    pub missed: usize,
    pub n_abnormal: usize,
    pub n_eval: usize,
    /// Mean detection delay in collection samples, over detected vehicles.
    pub add_samples: Option<f64>,
    pub add_seconds: Option<f64>,
    /// `detected / n_abnormal`; absent when no abnormal vehicle was evaluated.
    pub detection_rate: Option<f64>,
    /// Detection steps skipped because fusion failed.
    pub skipped_steps: usize,
}

/// Per-vehicle detection outcome (one row of `detections.csv`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub vehicle_id: VehicleId,
    /// Stopping time as a collection sample index.
    pub tau: Option<u64>,
    pub gamma: Option<u64>,
    pub delay: Option<u64>,
    pub false_alarm: bool,
}

/// Prediction errors of one vehicle, per horizon: `by_horizon[k-1]` holds
/// `(scored collection index, error)` pairs for horizon `k`.
#[derive(Debug, Clone, Default)]
pub struct ErrorStream {
    pub by_horizon: Vec<Vec<(u64, f64)>>,
    pub skipped: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// 7:3 train/test split by vehicle id hash.
pub fn is_train_vehicle(id: VehicleId) -> bool {
    splitmix64(id) % 10 < 7
}

struct VehicleTrack {
    start: u64,
    positions: Vec<Position2D>,
}

impl VehicleTrack {
    fn pos_at(&self, t: u64) -> Option<Position2D> {
        if t < self.start {
            return None;
        }
        self.positions.get((t - self.start) as usize).copied()
    }

    fn last_step(&self) -> u64 {
        self.start + self.positions.len() as u64 - 1
    }
}

struct Pipeline {
    sim: SimOutput,
    tracks: BTreeMap<VehicleId, VehicleTrack>,
    worlds: BTreeMap<u64, Vec<(VehicleId, Position2D)>>,
    avs: Vec<VehicleId>,
}

impl Pipeline {
    fn new(sim: SimOutput) -> Self {
        let mut tracks: BTreeMap<VehicleId, VehicleTrack> = BTreeMap::new();
        let mut worlds: BTreeMap<u64, Vec<(VehicleId, Position2D)>> = BTreeMap::new();
        for r in &sim.trajectories {
            let pos = Position2D::new(r.x, r.y);
            tracks
                .entry(r.vehicle_id)
                .or_insert_with(|| VehicleTrack {
                    start: r.t,
                    positions: Vec::new(),
                })
                .positions
                .push(pos);
            worlds.entry(r.t).or_default().push((r.vehicle_id, pos));
        }
        let avs = sim
            .vehicles
            .iter()
            .filter(|v| v.kind == VehicleKind::ConnectedAv)
            .map(|v| v.id)
            .collect();
        Self {
            sim,
            tracks,
            worlds,
            avs,
        }
    }

    fn kind(&self, id: VehicleId) -> VehicleKind {
        self.sim.kind_of(id).expect("known vehicle")
    }

    fn hv_ids(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.sim
            .vehicles
            .iter()
            .filter(|v| v.kind == VehicleKind::HumanDriven)
            .map(|v| v.id)
    }
}

enum PredictorImpl<'a> {
    Cv {
        t_f: usize,
        sigma: f64,
    },
    Meatp {
        weights: &'a AttentionWeights,
        config: &'a PredictorConfig,
    },
}

impl PredictorImpl<'_> {
    fn predict(&self, input: &FusedInput) -> crate::types::PredictionSeries {
        match self {
            PredictorImpl::Cv { t_f, sigma } => predict_cv(input, *t_f, *sigma),
            PredictorImpl::Meatp { weights, config } => forward(input, weights, config),
        }
    }
}

/// One scenario with cached models, visibility, and error streams.
pub struct Study {
    pipeline: Pipeline,
    visibility: BTreeMap<u64, BTreeMap<VehicleId, Vec<VehicleId>>>,
    models: BTreeMap<String, AttentionWeights>,
    streams: BTreeMap<String, BTreeMap<VehicleId, ErrorStream>>,
}

impl Study {
    pub fn new(scenario: &ScenarioConfig) -> Result<Self, HarnessError> {
        let sim = run_scenario(scenario)?;
        Ok(Self::from_sim(sim))
    }

    /// Builds a study over pre-simulated (or file-loaded) output.
    pub fn from_sim(sim: SimOutput) -> Self {
        Self {
            pipeline: Pipeline::new(sim),
            visibility: BTreeMap::new(),
            models: BTreeMap::new(),
            streams: BTreeMap::new(),
        }
    }

    pub fn sim(&self) -> &SimOutput {
        &self.pipeline.sim
    }

    pub fn dt(&self) -> f64 {
        self.pipeline.sim.config.dt
    }

    /// Train-split human-driven vehicles: those that stayed normal, and
    /// those that switched (capped per config).
    fn calib_vehicles(&self, config: &ExperimentConfig) -> (Vec<VehicleId>, Vec<VehicleId>) {
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        for id in self.pipeline.hv_ids() {
            if !is_train_vehicle(id) {
                continue;
            }
            match self.pipeline.sim.gamma_of(id) {
                None => normal.push(id),
                Some(_) => abnormal.push(id),
            }
        }
        normal.truncate(config.calib_normal_cap);
        abnormal.truncate(config.calib_abnormal_cap);
        (normal, abnormal)
    }

    /// Test-split human-driven vehicles, up to `n_eval_vehicles`.
    pub fn eval_vehicles(&self, config: &ExperimentConfig) -> Vec<VehicleId> {
        let mut out: Vec<VehicleId> = self
            .pipeline
            .hv_ids()
            .filter(|id| !is_train_vehicle(*id))
            .collect();
        out.truncate(config.n_eval_vehicles);
        out
    }

    fn visible_from(&mut self, t: u64) -> &BTreeMap<VehicleId, Vec<VehicleId>> {
        if !self.visibility.contains_key(&t) {
            let world = self.pipeline.worlds.get(&t).cloned().unwrap_or_default();
            let mut per_av = BTreeMap::new();
            for &av in &self.pipeline.avs {
                let Some(&(_, av_pos)) = world.iter().find(|(id, _)| *id == av) else {
                    continue;
                };
                // Only vehicles near the observer can be targets or block a
                // segment that stays inside the sensing disk.
                let nearby: Vec<(VehicleId, Position2D)> = world
                    .iter()
                    .filter(|(_, p)| av_pos.distance(p) <= SENSING_RANGE_M + 2.0)
                    .copied()
                    .collect();
                per_av.insert(av, crate::sensing::visible_set(av, &nearby, SENSING_RANGE_M));
            }
            self.visibility.insert(t, per_av);
        }
        &self.visibility[&t]
    }

    /// The shared message of one connected vehicle at collection step `t0`,
    /// or `None` when its own window is incomplete. Sensed windows cover
    /// the human-driven vehicles visible at every window step; noise draws
    /// are keyed by (seed, sender, target, step) so the same measurement
    /// reappears identically in overlapping windows.
    fn message_of(
        &mut self,
        sender: VehicleId,
        t0: u64,
        config: &ExperimentConfig,
        noise: NoiseLevel,
    ) -> Option<ShareMessage> {
        let t_h = config.predictor_config.t_h;
        let stride = config.stride as u64;
        let mut window_steps = Vec::with_capacity(t_h + 1);
        for j in (0..=t_h as u64).rev() {
            window_steps.push(t0.checked_sub(j * stride)?);
        }
        let dt = self.dt() * config.stride as f64;

        let own: Option<Vec<Position2D>> = window_steps
            .iter()
            .map(|&t| self.pipeline.tracks.get(&sender).and_then(|tr| tr.pos_at(t)))
            .collect();
        let sender_history = TrajectoryWindow::new(sender, t0, dt, own?).expect("window geometry");

        // Human-driven vehicles tracked continuously over the window.
        let mut candidates: Option<Vec<VehicleId>> = None;
        for &t in &window_steps {
            let vis = self.visible_from(t).get(&sender).cloned().unwrap_or_default();
            let hvs: Vec<VehicleId> = vis
                .into_iter()
                .filter(|id| self.pipeline.kind(*id) == VehicleKind::HumanDriven)
                .collect();
            candidates = Some(match candidates {
                None => hvs,
                Some(prev) => prev.into_iter().filter(|id| hvs.contains(id)).collect(),
            });
        }
        let mut sensed = BTreeMap::new();
        for target in candidates.unwrap_or_default() {
            let positions: Vec<Position2D> = window_steps
                .iter()
                .map(|&t| {
                    let truth = self
                        .pipeline
                        .tracks
                        .get(&target)
                        .and_then(|tr| tr.pos_at(t))
                        .expect("visible implies present");
                    let mut rng = rand::SeedableRng::seed_from_u64(splitmix64(
                        config.seed ^ splitmix64(sender ^ splitmix64(target ^ t)),
                    ));
                    sense(truth, noise, &mut rng)
                })
                .collect();
            sensed.insert(
                target,
                TrajectoryWindow::new(target, t0, dt, positions).expect("window geometry"),
            );
        }
        Some(ShareMessage {
            sender_id: sender,
            sender_history,
            sensed,
        })
    }

    /// Fused predictor input for `tv` at step `t0`, or `None` when no
    /// contributor covers the target over the whole window. With sharing
    /// on, every connected vehicle within [`SHARING_RADIUS_M`] contributes;
    /// with sharing off, only the nearest one (the ego) observes.
    fn fused_input(
        &mut self,
        tv: VehicleId,
        t0: u64,
        config: &ExperimentConfig,
        noise: NoiseLevel,
    ) -> Option<FusedInput> {
        let tv_pos = self.pipeline.tracks.get(&tv)?.pos_at(t0)?;
        let radius = if config.sharing {
            SHARING_RADIUS_M
        } else {
            SENSING_RANGE_M
        };
        let mut contributors: Vec<(f64, VehicleId)> = Vec::new();
        let avs = self.pipeline.avs.clone();
        for av in avs {
            let Some(av_pos) = self.pipeline.tracks.get(&av).and_then(|tr| tr.pos_at(t0)) else {
                continue;
            };
            let d = av_pos.distance(&tv_pos);
            if d <= radius {
                contributors.push((d, av));
            }
        }
        contributors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if !config.sharing {
            contributors.truncate(1);
        }
        let messages: Vec<ShareMessage> = contributors
            .iter()
            .filter_map(|(_, av)| self.message_of(*av, t0, config, noise))
            .collect();
        let max_neighbors = config.predictor_config.max_encoders - 1;
        fuse(&messages, tv, max_neighbors, 0.0).ok()
    }

    fn model_key(config: &ExperimentConfig) -> String {
        format!(
            "sharing={} cap={} every={} pcfg={}",
            config.sharing,
            config.train_sample_cap,
            config.sample_every,
            serde_json::to_string(&config.predictor_config).expect("serializable config")
        )
    }

    fn stream_key(config: &ExperimentConfig) -> String {
        format!(
            "pred={} sharing={} noise={} stride={} pcfg={}",
            config.predictor.label(),
            config.sharing,
            config.noise_level,
            config.stride,
            serde_json::to_string(&config.predictor_config).expect("serializable config")
        )
    }

    /// Training samples from normal train-split vehicles, observed through
    /// the level-0 sharing pipeline; targets are ground truth in the fused
    /// frame.
    pub fn training_samples(&mut self, config: &ExperimentConfig) -> Vec<TrainingSample> {
        let pcfg = config.predictor_config.clone();
        let noise = NoiseLevel::from_level(0).expect("level 0");
        let stride = config.stride as u64;
        let mut samples = Vec::new();
        let normal_hvs: Vec<VehicleId> = self
            .pipeline
            .hv_ids()
            .filter(|id| is_train_vehicle(*id) && self.pipeline.sim.gamma_of(*id).is_none())
            .collect();
        'outer: for tv in normal_hvs {
            let track = &self.pipeline.tracks[&tv];
            let (start, last) = (track.start, track.last_step());
            let mut t0 = start + pcfg.t_h as u64 * stride;
            while t0 + pcfg.t_f as u64 * stride <= last {
                if let Some(input) = self.fused_input(tv, t0, config, noise) {
                    let track = &self.pipeline.tracks[&tv];
                    let truth: Option<Vec<Position2D>> = (1..=pcfg.t_f as u64)
                        .map(|k| track.pos_at(t0 + k * stride))
                        .collect();
                    if let Some(truth) = truth {
                        let target = truth.iter().map(|p| input.frame.to_frame(*p)).collect();
                        samples.push(TrainingSample { input, target });
                        if samples.len() >= config.train_sample_cap {
                            break 'outer;
                        }
                    }
                }
                t0 += stride * config.sample_every as u64;
            }
        }
        samples
    }

    /// Injects pre-trained weights (for example from a checkpoint) so that
    /// [`model`](Self::model) skips training for this configuration.
    pub fn set_model(&mut self, config: &ExperimentConfig, weights: AttentionWeights) {
        self.models.insert(Self::model_key(config), weights);
    }

    /// Trained weights for the experiment's predictor settings (cached).
    pub fn model(&mut self, config: &ExperimentConfig) -> Result<&AttentionWeights, HarnessError> {
        let key = Self::model_key(config);
        if !self.models.contains_key(&key) {
            let samples = self.training_samples(config);
            if samples.is_empty() {
                return Err(PredictError::NoSamples.into());
            }
            let (weights, _) = train(&samples, &config.predictor_config)?;
            self.models.insert(key.clone(), weights);
        }
        Ok(&self.models[&key])
    }

    /// Error stream of one vehicle under the experiment's observation and
    /// predictor settings. At each prediction step the fused current
    /// position scores the predictions made 1..=t_f steps earlier, each in
    /// the frame it was issued in.
    fn compute_stream(
        &mut self,
        tv: VehicleId,
        config: &ExperimentConfig,
        weights: Option<&AttentionWeights>,
    ) -> ErrorStream {
        let pcfg = config.predictor_config.clone();
        let noise = NoiseLevel::from_level(config.noise_level).expect("valid level");
        let stride = config.stride as u64;
        let predictor = match config.predictor {
            PredictorKind::ConstantVelocity => PredictorImpl::Cv {
                t_f: pcfg.t_f,
                sigma: config.cv_sigma,
            },
            PredictorKind::MeatpMini => PredictorImpl::Meatp {
                weights: weights.expect("model trained before streaming"),
                config: &pcfg,
            },
        };
        let Some(track) = self.pipeline.tracks.get(&tv) else {
            return ErrorStream::default();
        };
        let (start, last) = (track.start, track.last_step());
        let mut stream = ErrorStream {
            by_horizon: vec![Vec::new(); pcfg.t_f],
            skipped: 0,
        };
        // due step -> (horizon index, issuing frame, predicted local mean)
        let mut pending: BTreeMap<u64, Vec<(usize, FrameTransform, Position2D)>> = BTreeMap::new();
        let mut t0 = start + pcfg.t_h as u64 * stride;
        while t0 <= last {
            match self.fused_input(tv, t0, config, noise) {
                Some(input) => {
                    let z_global = input.tv_current_global();
                    if let Some(entries) = pending.remove(&t0) {
                        for (k_idx, frame, mu_local) in entries {
                            let z_local = frame.to_frame(z_global);
                            stream.by_horizon[k_idx]
                                .push((t0, crate::qcd::prediction_error(z_local, mu_local)));
                        }
                    }
                    let prediction = predictor.predict(&input);
                    for (k_idx, step) in prediction.steps.iter().enumerate() {
                        let due = t0 + (k_idx as u64 + 1) * stride;
                        pending
                            .entry(due)
                            .or_default()
                            .push((k_idx, input.frame, step.mean()));
                    }
                }
                None => {
                    stream.skipped += 1;
                    pending.remove(&t0);
                }
            }
            t0 += stride;
        }
        stream
    }

    /// Error streams for a set of vehicles (cached incrementally).
    pub fn streams(
        &mut self,
        vehicles: &[VehicleId],
        config: &ExperimentConfig,
    ) -> Result<BTreeMap<VehicleId, ErrorStream>, HarnessError> {
        let weights = if config.predictor == PredictorKind::MeatpMini {
            Some(self.model(config)?.clone())
        } else {
            None
        };
        let key = Self::stream_key(config);
        let missing: Vec<VehicleId> = {
            let cache = self.streams.entry(key.clone()).or_default();
            vehicles
                .iter()
                .filter(|id| !cache.contains_key(id))
                .copied()
                .collect()
        };
        for tv in missing {
            let stream = self.compute_stream(tv, config, weights.as_ref());
            self.streams
                .get_mut(&key)
                .expect("created above")
                .insert(tv, stream);
        }
        let cache = &self.streams[&key];
        Ok(vehicles
            .iter()
            .map(|id| (*id, cache.get(id).cloned().unwrap_or_default()))
            .collect())
    }

    /// Pre-change and post-change Gaussians calibrated on the train split
    /// at the experiment's detection horizon.
    pub fn calibrate_pair(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<(GaussianSpec, GaussianSpec), HarnessError> {
        let (normal, abnormal) = self.calib_vehicles(config);
        let k_idx = config.horizon_steps - 1;
        let normal_streams = self.streams(&normal, config)?;
        let mut f_samples = Vec::new();
        for stream in normal_streams.values() {
            f_samples.extend(stream.by_horizon[k_idx].iter().map(|(_, e)| *e));
        }
        if f_samples.len() < 2 {
            return Err(HarnessError::InsufficientCalibration(
                "normal",
                f_samples.len(),
            ));
        }
        let abnormal_streams = self.streams(&abnormal, config)?;
        let mut g_samples = Vec::new();
        for (id, stream) in &abnormal_streams {
            let gamma = self.pipeline.sim.gamma_of(*id).expect("abnormal has gamma");
            g_samples.extend(
                stream.by_horizon[k_idx]
                    .iter()
                    .filter(|(t, _)| *t >= gamma)
                    .map(|(_, e)| *e),
            );
        }
        if g_samples.len() < 2 {
            return Err(HarnessError::InsufficientCalibration(
                "abnormal",
                g_samples.len(),
            ));
        }
        Ok((calibrate(&f_samples)?, calibrate(&g_samples)?))
    }

    /// Detector configuration from calibrated distributions, following the
    /// experiment's knowledge scenario.
    pub fn detector_config(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<DetectorConfig, HarnessError> {
        let (f, g) = self.calibrate_pair(config)?;
        Ok(build_detector_config(config, f, g)?)
    }

    /// Runs the configured detector over every evaluated vehicle,
    /// calibrating (f, g) on the train split first. A vehicle counts as
    /// detected when it stops at or after its switch time; any stop before
    /// the switch, or any stop on a normal vehicle, is a false alarm; an
    /// abnormal vehicle with no stop is missed.
    pub fn detections(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<(Vec<Detection>, ResultRow), HarnessError> {
        let detector = self.detector_config(config)?;
        self.detections_with(config, &detector)
    }

    /// As [`detections`](Self::detections) but with an externally supplied
    /// detector (for example from a saved calibration file).
    pub fn detections_with(
        &mut self,
        config: &ExperimentConfig,
        detector: &DetectorConfig,
    ) -> Result<(Vec<Detection>, ResultRow), HarnessError> {
        let detector = detector.clone();
        let eval = self.eval_vehicles(config);
        if eval.is_empty() {
            return Err(HarnessError::NoEvalVehicles);
        }
        let streams = self.streams(&eval, config)?;
        let k_idx = config.horizon_steps - 1;
        let mut detections = Vec::with_capacity(eval.len());
        let mut row = ResultRow {
            detected: 0,
            false_alarm: 0,
            missed: 0,
            n_abnormal: 0,
            n_eval: eval.len(),
            add_samples: None,
            add_seconds: None,
            detection_rate: None,
            skipped_steps: 0,
        };
        let mut delays = Vec::new();
        for id in &eval {
            let stream = &streams[id];
            row.skipped_steps += stream.skipped;
            let errors = &stream.by_horizon[k_idx];
            let (tau_idx, _) = detect_stream(errors.iter().map(|(_, e)| *e), &detector);
            let tau = tau_idx.map(|n| errors[n as usize - 1].0);
            let gamma = self.pipeline.sim.gamma_of(*id);
            let mut delay = None;
            let mut false_alarm = false;
            match (gamma, tau) {
                (None, Some(_)) => {
                    false_alarm = true;
                    row.false_alarm += 1;
                }
                (None, None) => {}
                (Some(g), Some(t)) if t >= g => {
                    row.n_abnormal += 1;
                    row.detected += 1;
                    delay = Some(t - g);
                    delays.push((t - g) as f64);
                }
                (Some(_), Some(_)) => {
                    row.n_abnormal += 1;
                    false_alarm = true;
                    row.false_alarm += 1;
                }
                (Some(_), None) => {
                    row.n_abnormal += 1;
                    row.missed += 1;
                }
            }
            detections.push(Detection {
                vehicle_id: *id,
                tau,
                gamma,
                delay,
                false_alarm,
            });
        }
        if !delays.is_empty() {
            let add = delays.iter().sum::<f64>() / delays.len() as f64;
            row.add_samples = Some(add);
            row.add_seconds = Some(add * self.dt());
        }
        if row.n_abnormal > 0 {
            row.detection_rate = Some(row.detected as f64 / row.n_abnormal as f64);
        }
        Ok((detections, row))
    }

    pub fn run(&mut self, config: &ExperimentConfig) -> Result<ResultRow, HarnessError> {
        Ok(self.detections(config)?.1)
    }

    /// Statistic trace of one vehicle under a detector, as
    /// `(collection index, W)` pairs, for plotting.
    pub fn trace_of(
        &mut self,
        tv: VehicleId,
        config: &ExperimentConfig,
        detector: &DetectorConfig,
    ) -> Result<Vec<(u64, f64)>, HarnessError> {
        let streams = self.streams(&[tv], config)?;
        let errors = &streams[&tv].by_horizon[config.horizon_steps - 1];
        let (_, trace) = detect_stream(errors.iter().map(|(_, e)| *e), &detector);
        Ok(errors.iter().map(|(t, _)| *t).zip(trace).collect())
    }

    /// Prediction quality of the experiment's predictor on the evaluated
    /// vehicles, against ground-truth futures.
    pub fn eval_metrics(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<crate::predict::DisplacementMetrics, HarnessError> {
        let pcfg = config.predictor_config.clone();
        let noise = NoiseLevel::from_level(config.noise_level).expect("valid level");
        let stride = config.stride as u64;
        let weights = if config.predictor == PredictorKind::MeatpMini {
            Some(self.model(config)?.clone())
        } else {
            None
        };
        let predictor = match config.predictor {
            PredictorKind::ConstantVelocity => PredictorImpl::Cv {
                t_f: pcfg.t_f,
                sigma: config.cv_sigma,
            },
            PredictorKind::MeatpMini => PredictorImpl::Meatp {
                weights: weights.as_ref().expect("trained above"),
                config: &pcfg,
            },
        };
        let mut predictions = Vec::new();
        let mut targets = Vec::new();
        for tv in self.eval_vehicles(config) {
            let track = &self.pipeline.tracks[&tv];
            let (start, last) = (track.start, track.last_step());
            let mut t0 = start + pcfg.t_h as u64 * stride;
            while t0 + pcfg.t_f as u64 * stride <= last {
                if let Some(input) = self.fused_input(tv, t0, config, noise) {
                    let track = &self.pipeline.tracks[&tv];
                    let truth: Option<Vec<Position2D>> = (1..=pcfg.t_f as u64)
                        .map(|k| track.pos_at(t0 + k * stride))
                        .collect();
                    if let Some(truth) = truth {
                        targets.push(truth.iter().map(|p| input.frame.to_frame(*p)).collect());
                        predictions.push(predictor.predict(&input));
                    }
                }
                t0 += stride * config.sample_every as u64;
            }
        }
        Ok(crate::predict::rmse_ade_fde(&predictions, &targets)?)
    }
}

/// Detector knowledge scenarios: full (f, g) for CuSum; a deterministic
/// +-0.3 perturbation grid around g for MCuSum (M = 4); minimum-shift
/// bounds at half the calibrated gaps for the GLRT.
pub fn build_detector_config(
    config: &ExperimentConfig,
    f: GaussianSpec,
    g: GaussianSpec,
) -> Result<DetectorConfig, QcdError> {
    let spec = match config.detector {
        DetectorKind::CuSum => DetectorSpec::CuSum { f, g },
        DetectorKind::MCuSum => {
            let candidates = vec![
                GaussianSpec::new(g.mu + 0.3, g.sigma)?,
                GaussianSpec::new((g.mu - 0.3).max(f.mu + 0.01), g.sigma)?,
                GaussianSpec::new(g.mu, g.sigma + 0.3)?,
                GaussianSpec::new(g.mu, (g.sigma - 0.3).max(0.05))?,
            ];
            DetectorSpec::MCuSum { f, candidates }
        }
        DetectorKind::Glrt => DetectorSpec::Glrt {
            f,
            nu_min: (0.5 * (g.mu - f.mu)).max(0.05),
            delta_min: (0.5 * (g.sigma - f.sigma)).max(0.05),
            lookback: 200,
        },
    };
    match config.b_override {
        Some(b) => DetectorConfig::with_threshold(spec, config.alpha, b),
        None => DetectorConfig::new(spec, config.alpha),
    }
}

/// One sweep output row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub predictor: String,
    pub detector: String,
    pub noise_level: u8,
    pub sharing: bool,
    pub result: Result<ResultRow, String>,
}

/// Runs every experiment in order, sharing one study per scenario. Failed
/// runs are recorded as failure rows and the sweep continues.
pub fn sweep(configs: &[ExperimentConfig]) -> Vec<SweepRow> {
    let mut studies: BTreeMap<String, Study> = BTreeMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let key = serde_json::to_string(&config.scenario).expect("serializable scenario");
        let result = match studies.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => {
                e.into_mut().run(config).map_err(|e| e.to_string())
            }
            std::collections::btree_map::Entry::Vacant(slot) => match Study::new(&config.scenario)
            {
                Ok(study) => slot.insert(study).run(config).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            },
        };
        rows.push(SweepRow {
            predictor: config.predictor.label().to_string(),
            detector: config.detector.label().to_string(),
            noise_level: config.noise_level,
            sharing: config.sharing,
            result,
        });
    }
    rows
}

/// Renders sweep rows as CSV with a stable column set; failed rows carry
/// the error in the last column.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "predictor,detector,noise_level,sharing,detected,false_alarm,missed,n_abnormal,n_eval,add_samples,add_seconds,detection_rate,skipped_steps,error\n",
    );
    for row in rows {
        match &row.result {
            Ok(r) => {
                let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},\n",
                    row.predictor,
                    row.detector,
                    row.noise_level,
                    row.sharing,
                    r.detected,
                    r.false_alarm,
                    r.missed,
                    r.n_abnormal,
                    r.n_eval,
                    fmt_opt(r.add_samples),
                    fmt_opt(r.add_seconds),
                    fmt_opt(r.detection_rate),
                    r.skipped_steps,
                ));
            }
            Err(e) => {
                out.push_str(&format!(
                    "{},{},{},{},,,,,,,,,,{}\n",
                    row.predictor,
                    row.detector,
                    row.noise_level,
                    row.sharing,
                    e.replace(',', ";"),
                ));
            }
        }
    }
    out
}

/// Cartesian sweep specification parsed from a flat key=value file: the
/// scenario keys of [`ScenarioConfig::parse_kv`] plus `predictors`,
/// `detectors`, `noise_levels`, and `sharing` lists and scalar harness
/// overrides.
pub fn parse_sweep(text: &str) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let mut scenario_lines = String::new();
    let mut base = ExperimentConfig::desk_default();
    let mut predictors = vec![PredictorKind::MeatpMini];
    let mut detectors = vec![DetectorKind::CuSum];
    let mut noise_levels = vec![0u8];
    let mut sharing = vec![true];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::SweepConfig(format!("line {}: expected key=value", i + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: String| HarnessError::SweepConfig(format!("line {}: {what}", i + 1));
        match key {
            "predictors" => {
                predictors = value
                    .split(',')
                    .map(|p| match p.trim() {
                        "cv" => Ok(PredictorKind::ConstantVelocity),
                        "meatp" => Ok(PredictorKind::MeatpMini),
                        other => Err(bad(format!("unknown predictor {other:?}"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "detectors" => {
                detectors = value
                    .split(',')
                    .map(|d| match d.trim() {
                        "cusum" => Ok(DetectorKind::CuSum),
                        "mcusum" => Ok(DetectorKind::MCuSum),
                        "glrt" => Ok(DetectorKind::Glrt),
                        other => Err(bad(format!("unknown detector {other:?}"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "noise_levels" => {
                noise_levels = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad("bad noise level".into())))
                    .collect::<Result<_, _>>()?;
            }
            "sharing" => {
                sharing = value
                    .split(',')
                    .map(|v| match v.trim() {
                        "on" | "true" => Ok(true),
                        "off" | "false" => Ok(false),
                        other => Err(bad(format!("unknown sharing flag {other:?}"))),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "alpha" => base.alpha = value.parse().map_err(|_| bad("bad alpha".into()))?,
            "b" => base.b_override = Some(value.parse().map_err(|_| bad("bad b".into()))?),
            "n_eval" => {
                base.n_eval_vehicles = value.parse().map_err(|_| bad("bad n_eval".into()))?
            }
            "stride" => base.stride = value.parse().map_err(|_| bad("bad stride".into()))?,
            "horizon_steps" => {
                base.horizon_steps = value.parse().map_err(|_| bad("bad horizon_steps".into()))?
            }
            "train_steps" => {
                base.predictor_config.train_steps =
                    value.parse().map_err(|_| bad("bad train_steps".into()))?
            }
            "train_sample_cap" => {
                base.train_sample_cap =
                    value.parse().map_err(|_| bad("bad train_sample_cap".into()))?
            }
            "t_h" => {
                base.predictor_config.t_h = value.parse().map_err(|_| bad("bad t_h".into()))?
            }
            "t_f" => {
                base.predictor_config.t_f = value.parse().map_err(|_| bad("bad t_f".into()))?
            }
            "experiment_seed" => base.seed = value.parse().map_err(|_| bad("bad seed".into()))?,
            _ => {
                // Remaining keys describe the scenario.
                scenario_lines.push_str(line);
                scenario_lines.push('\n');
            }
        }
    }
    if !scenario_lines.is_empty() {
        base.scenario = ScenarioConfig::parse_kv(&scenario_lines)?;
    }
    if base.horizon_steps < 1 || base.horizon_steps > base.predictor_config.t_f {
        return Err(HarnessError::SweepConfig(format!(
            "horizon_steps must lie in 1..=t_f, got {}",
            base.horizon_steps
        )));
    }
    let mut configs = Vec::new();
    for &p in &predictors {
        for &s in &sharing {
            for &d in &detectors {
                for &n in &noise_levels {
                    let mut c = base.clone();
                    c.predictor = p;
                    c.sharing = s;
                    c.detector = d;
                    c.noise_level = n;
                    configs.push(c);
                }
            }
        }
    }
    Ok(configs)
}

// ---------------------------------------------------------------------------
// Experiment artifacts on disk
// ---------------------------------------------------------------------------

/// Calibrated pre/post-change distributions with their horizon, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub horizon_steps: usize,
    pub stride: usize,
    pub f: GaussianSpec,
    pub g: GaussianSpec,
}

impl CalibrationFile {
    pub fn save(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::SweepConfig(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| HarnessError::SweepConfig(e.to_string()))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::SweepConfig(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::SweepConfig(e.to_string()))
    }
}

/// `detections.csv`: rows `vehicle_id,tau,gamma,delay,false_alarm`.
pub fn write_detections_csv<W: std::io::Write>(
    w: &mut W,
    detections: &[Detection],
) -> std::io::Result<()> {
    writeln!(w, "vehicle_id,tau,gamma,delay,false_alarm")?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "inf".into());
    for d in detections {
        writeln!(
            w,
            "{},{},{},{},{}",
            d.vehicle_id,
            opt(d.tau),
            opt(d.gamma),
            d.delay.map(|x| x.to_string()).unwrap_or_default(),
            d.false_alarm as u8,
        )?;
    }
    Ok(())
}

/// Statistic trace dump `vehicle_id,n,W` for plotting.
pub fn write_traces_csv<W: std::io::Write>(
    w: &mut W,
    traces: &[(VehicleId, Vec<(u64, f64)>)],
) -> std::io::Result<()> {
    writeln!(w, "vehicle_id,n,W")?;
    for (id, trace) in traces {
        for (n, stat) in trace {
            writeln!(w, "{id},{n},{}", crate::io::fmt_f64(*stat))?;
        }
    }
    Ok(())
}

/// Plain-text one-line summary of a result row.
pub fn summarize(row: &ResultRow) -> String {
    format!(
        "evaluated {} vehicles ({} abnormal): detected {} (rate {}), false alarms {}, missed {}, ADD {} samples ({} s), skipped steps {}",
        row.n_eval,
        row.n_abnormal,
        row.detected,
        row.detection_rate.map(|r| format!("{:.1}%", 100.0 * r)).unwrap_or_else(|| "n/a".into()),
        row.false_alarm,
        row.missed,
        row.add_samples.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into()),
        row.add_seconds.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into()),
        row.skipped_steps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::desk_default();
        config.scenario.volume = 2500.0;
        config.scenario.duration = 260.0;
        config.scenario.lanes = 3;
        config.scenario.abnormal_fraction = 0.5;
        config.n_eval_vehicles = 40;
        config.predictor = PredictorKind::ConstantVelocity;
        config.horizon_steps = 15;
        config.calib_normal_cap = 30;
        config.calib_abnormal_cap = 30;
        config
    }

    #[test]
    fn accounting_identity_holds() {
        let config = tiny_config();
        let mut study = Study::new(&config.scenario).unwrap();
        let (detections, row) = study.detections(&config).unwrap();
        let abnormal_detections = detections.iter().filter(|d| d.gamma.is_some()).count();
        assert_eq!(abnormal_detections, row.n_abnormal);
        // Detected, missed, and pre-switch false alarms partition abnormal.
        let pre_gamma_alarms = detections
            .iter()
            .filter(|d| d.gamma.is_some() && d.false_alarm)
            .count();
        assert_eq!(row.detected + row.missed + pre_gamma_alarms, row.n_abnormal);
        assert!(row.n_eval <= 40);
        if let Some(rate) = row.detection_rate {
            assert!((rate - row.detected as f64 / row.n_abnormal as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_abnormal_cannot_calibrate_g() {
        let mut config = tiny_config();
        config.scenario.abnormal_fraction = 0.0;
        let mut study = Study::new(&config.scenario).unwrap();
        match study.run(&config) {
            Err(HarnessError::InsufficientCalibration("abnormal", _)) => {}
            other => panic!("expected calibration failure, got {other:?}"),
        }
    }

    #[test]
    fn normal_vehicle_only_contributes_false_alarm_or_nothing() {
        let config = tiny_config();
        let mut study = Study::new(&config.scenario).unwrap();
        let (detections, _) = study.detections(&config).unwrap();
        for d in detections.iter().filter(|d| d.gamma.is_none()) {
            assert!(d.delay.is_none());
            assert_eq!(d.false_alarm, d.tau.is_some());
        }
    }

    #[test]
    fn sweep_emits_one_row_per_config_and_is_deterministic() {
        let mut base = tiny_config();
        base.n_eval_vehicles = 15;
        base.calib_normal_cap = 15;
        base.calib_abnormal_cap = 15;
        let mut configs = Vec::new();
        for detector in [DetectorKind::CuSum, DetectorKind::MCuSum, DetectorKind::Glrt] {
            for noise in [0u8, 4] {
                let mut c = base.clone();
                c.detector = detector;
                c.noise_level = noise;
                configs.push(c);
            }
        }
        let rows = sweep(&configs);
        assert_eq!(rows.len(), 6);
        let csv1 = sweep_csv(&rows);
        let csv2 = sweep_csv(&sweep(&configs));
        assert_eq!(csv1, csv2);
        assert_eq!(csv1.lines().count(), 7);
    }

    #[test]
    fn sweep_parse_cardinality() {
        let text = "\
predictors=cv,meatp
detectors=cusum,mcusum,glrt
noise_levels=0,1,2,3,4
lanes=3
volume=2000
duration=200
seed=5
";
        let configs = parse_sweep(text).unwrap();
        assert_eq!(configs.len(), 2 * 3 * 5);
        assert_eq!(configs[0].scenario.lanes, 3);
        assert!(parse_sweep("predictors=warp").is_err());
    }

    #[test]
    fn train_split_is_roughly_seventy_percent() {
        let train = (0..10_000).filter(|id| is_train_vehicle(*id)).count();
        assert!((train as f64 - 7000.0).abs() < 300.0, "train count {train}");
    }
}
