//! Command-line front end: simulate scenarios, train and evaluate
//! predictors, calibrate error distributions, run detectors, and sweep
//! experiment grids. Every subcommand accepts `--seed` and produces
//! byte-identical outputs when re-run with the same arguments.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use modewatch::harness::{
    build_detector_config, parse_sweep, summarize, sweep, sweep_csv, write_detections_csv,
    write_traces_csv, CalibrationFile, DetectorKind, ExperimentConfig, PredictorKind, Study,
};
use modewatch::predict::{load_checkpoint, save_checkpoint, train};
use modewatch::sim::{load_sim_dir, simulate_to_dir, ScenarioConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "modewatch", version, about = "Abnormal driving-mode switch detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a traffic scenario and write trajectory and label files.
    Simulate(SimulateArgs),
    /// Train the attention predictor on a simulated dataset.
    Train(TrainArgs),
    /// Calibrate pre/post-change error distributions on the train split.
    Calibrate(CalibrateArgs),
    /// Run a change detector over the evaluated vehicles.
    Detect(DetectArgs),
    /// Report RMSE / ADE / FDE of a predictor on the test split.
    Eval(EvalArgs),
    /// Run a grid of experiments and collect one result row each.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config file (flat key=value).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ObservationArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Sensing noise level applied to human-driven vehicle observations.
    #[arg(long, default_value_t = 0)]
    noise_level: u8,
    /// Fuse messages from every connected vehicle near the target.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    sharing: bool,
    /// Collection samples per prediction step.
    #[arg(long, default_value_t = 2)]
    stride: usize,
    /// History window length in prediction steps.
    #[arg(long, default_value_t = 10)]
    t_h: usize,
    /// Forecast length in prediction steps.
    #[arg(long, default_value_t = 15)]
    t_f: usize,
    /// Experiment seed (sensing noise streams).
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    obs: ObservationArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value_t = 2000)]
    samples_cap: usize,
    /// Learning rate of the optimizer.
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Cv,
    Meatp,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorArg {
    Cusum,
    Mcusum,
    Glrt,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    obs: ObservationArgs,
    /// Trained checkpoint (required for the meatp predictor).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorArg::Meatp)]
    predictor: PredictorArg,
    /// Detection horizon in prediction steps.
    #[arg(long, default_value_t = 15)]
    horizon_steps: usize,
    /// Calibration JSON output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Trajectory CSV (its directory must hold labels.csv, vehicles.csv,
    /// and scenario.cfg from `simulate`).
    #[arg(long)]
    traj: PathBuf,
    /// Calibration JSON from `calibrate`.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorArg::Meatp)]
    predictor: PredictorArg,
    #[arg(long, value_enum)]
    detector: DetectorArg,
    /// False alarm budget.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Threshold override (defaults to the detector's canonical rule).
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_level: u8,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    sharing: bool,
    /// Cap on evaluated vehicles.
    #[arg(long, default_value_t = 300)]
    n_eval: usize,
    /// Detections CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional statistic trace CSV (vehicle_id,n,W).
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    obs: ObservationArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorArg::Meatp)]
    predictor: PredictorArg,
    /// Metrics CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config file (scenario keys plus predictors/detectors/
    /// noise_levels/sharing lists).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results.csv and summary.txt.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => run_simulate(args),
        Command::Train(args) => run_train(args),
        Command::Calibrate(args) => run_calibrate(args),
        Command::Detect(args) => run_detect(args),
        Command::Eval(args) => run_eval(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = ScenarioConfig::parse_kv(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = simulate_to_dir(&config, &args.out)?;
    let abnormal = out.labels.iter().filter(|l| l.gamma.is_some()).count();
    println!(
        "simulated {} vehicles over {:.0} s ({} switched to abnormal); wrote {}",
        out.vehicles.len(),
        config.duration,
        abnormal,
        args.out.display()
    );
    Ok(())
}

/// Experiment skeleton shared by the observation-driven subcommands.
fn experiment_from(obs: &ObservationArgs, scenario: ScenarioConfig) -> ExperimentConfig {
    let mut config = ExperimentConfig::desk_default();
    config.scenario = scenario;
    config.noise_level = obs.noise_level;
    config.sharing = obs.sharing;
    config.stride = obs.stride;
    config.predictor_config.t_h = obs.t_h;
    config.predictor_config.t_f = obs.t_f;
    config.seed = obs.seed;
    config.predictor_config.seed = obs.seed;
    config
}

fn load_study(data: &Path) -> Result<(Study, ScenarioConfig)> {
    let sim = load_sim_dir(data).with_context(|| format!("loading {}", data.display()))?;
    let scenario = sim.config.clone();
    Ok((Study::from_sim(sim), scenario))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (mut study, scenario) = load_study(&args.obs.data)?;
    let mut config = experiment_from(&args.obs, scenario);
    config.predictor = PredictorKind::MeatpMini;
    config.train_sample_cap = args.samples_cap;
    config.predictor_config.train_steps = args.steps;
    config.predictor_config.learning_rate = args.learning_rate;
    let samples = study.training_samples(&config);
    if samples.is_empty() {
        bail!("no training samples could be built from {}", args.obs.data.display());
    }
    let (weights, report) = train(&samples, &config.predictor_config)?;
    save_checkpoint(&args.out, &weights, &config.predictor_config)?;
    println!(
        "trained on {} samples for {} steps: loss {:.3} -> {:.3}; wrote {}",
        samples.len(),
        report.steps,
        report.initial_loss,
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

/// Wires the chosen predictor into the experiment; a meatp checkpoint is
/// loaded and injected into the study so no retraining happens.
fn wire_predictor(
    config: &mut ExperimentConfig,
    study: &mut Study,
    predictor: PredictorArg,
    model: Option<&PathBuf>,
) -> Result<()> {
    match predictor {
        PredictorArg::Cv => {
            config.predictor = PredictorKind::ConstantVelocity;
        }
        PredictorArg::Meatp => {
            let path = model.context("--model is required for the meatp predictor")?;
            let (weights, pcfg) = load_checkpoint(path)?;
            config.predictor = PredictorKind::MeatpMini;
            config.predictor_config = pcfg;
            study.set_model(config, weights);
        }
    }
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let (mut study, scenario) = load_study(&args.obs.data)?;
    let mut config = experiment_from(&args.obs, scenario);
    wire_predictor(&mut config, &mut study, args.predictor, args.model.as_ref())?;
    if args.horizon_steps < 1 || args.horizon_steps > config.predictor_config.t_f {
        bail!("horizon_steps must lie in 1..={}", config.predictor_config.t_f);
    }
    config.horizon_steps = args.horizon_steps;
    let (f, g) = study.calibrate_pair(&config)?;
    let file = CalibrationFile {
        horizon_steps: config.horizon_steps,
        stride: config.stride,
        f,
        g,
    };
    file.save(&args.out)?;
    println!(
        "calibrated at horizon {} steps: f = ({:.4}, {:.4}), g = ({:.4}, {:.4}); wrote {}",
        args.horizon_steps,
        f.mu,
        f.sigma,
        g.mu,
        g.sigma,
        args.out.display()
    );
    Ok(())
}

fn run_detect(args: DetectArgs) -> Result<()> {
    let data = args
        .traj
        .parent()
        .context("trajectory path has no parent directory")?;
    let (mut study, scenario) = load_study(data)?;
    let calib = CalibrationFile::load(&args.calib)?;
    let obs = ObservationArgs {
        data: data.to_path_buf(),
        noise_level: args.noise_level,
        sharing: args.sharing,
        stride: calib.stride,
        t_h: 10,
        t_f: 15,
        seed: args.seed,
    };
    let mut config = experiment_from(&obs, scenario);
    wire_predictor(&mut config, &mut study, args.predictor, args.model.as_ref())?;
    config.horizon_steps = calib.horizon_steps;
    config.n_eval_vehicles = args.n_eval;
    config.detector = match args.detector {
        DetectorArg::Cusum => DetectorKind::CuSum,
        DetectorArg::Mcusum => DetectorKind::MCuSum,
        DetectorArg::Glrt => DetectorKind::Glrt,
    };
    config.alpha = args.alpha;
    config.b_override = args.b;
    let detector = build_detector_config(&config, calib.f, calib.g)?;
    let (detections, row) = study.detections_with(&config, &detector)?;
    let mut out = Vec::new();
    write_detections_csv(&mut out, &detections)?;
    std::fs::write(&args.out, out)?;
    if let Some(trace_path) = &args.traces {
        let mut traces = Vec::new();
        for d in &detections {
            traces.push((d.vehicle_id, study.trace_of(d.vehicle_id, &config, &detector)?));
        }
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &traces)?;
        std::fs::write(trace_path, buf)?;
    }
    println!("{}", summarize(&row));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (mut study, scenario) = load_study(&args.obs.data)?;
    let mut config = experiment_from(&args.obs, scenario);
    wire_predictor(&mut config, &mut study, args.predictor, args.model.as_ref())?;
    let metrics = study.eval_metrics(&config)?;
    let dt = study.dt() * config.stride as f64;
    let mut csv = String::from("metric,horizon_steps,horizon_seconds,value\n");
    for (i, rmse) in metrics.rmse_per_horizon.iter().enumerate() {
        csv.push_str(&format!(
            "rmse,{},{:.2},{:.6}\n",
            i + 1,
            (i + 1) as f64 * dt,
            rmse
        ));
    }
    csv.push_str(&format!("ade,,,{:.6}\n", metrics.ade));
    csv.push_str(&format!("fde,,,{:.6}\n", metrics.fde));
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut configs = parse_sweep(&text)?;
    if let Some(seed) = args.seed {
        for c in &mut configs {
            c.scenario.seed = seed;
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let rows = sweep(&configs);
    std::fs::write(args.out.join("results.csv"), sweep_csv(&rows))?;
    let mut summary = String::new();
    let mut failures = 0usize;
    for row in &rows {
        match &row.result {
            Ok(r) => summary.push_str(&format!(
                "{} {} noise={} sharing={}: {}\n",
                row.predictor,
                row.detector,
                row.noise_level,
                row.sharing,
                summarize(r)
            )),
            Err(e) => {
                failures += 1;
                summary.push_str(&format!(
                    "{} {} noise={} sharing={}: FAILED ({e})\n",
                    row.predictor, row.detector, row.noise_level, row.sharing
                ));
            }
        }
    }
    std::fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote {}", args.out.display());
    if failures > 0 {
        bail!("{failures} sweep rows failed");
    }
    Ok(())
}
