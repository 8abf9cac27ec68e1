use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use thermoden::blocks::{Activation, BlockKind};
use thermoden::data::{self, TimeSeriesDataset};
use thermoden::eigen::{analyze_model, write_scatter_csv};
use thermoden::emulator::{build_rc_network, generate_dataset, ExcitationConfig};
use thermoden::linmap::WeightKind;
use thermoden::ssm::{open_loop_simulate, NeuralSsm, Structure};
use thermoden::trainer::{
    default_grid, evaluate, sweep, train, write_sweep_csv, Checkpoint, Prepared, SweepOptions, TrainConfig,
};
use thermoden::Error;

const DATA_FILE: &str = "data.csv";
const BUILDING_FILE: &str = "building.csv";
const RUN_MANIFEST: &str = "run_manifest.json";
const TRAIN_LOG: &str = "training_log.csv";

#[derive(Parser)]
#[command(name = "thermoden", version, about = "Constrained neural state-space models of building thermal dynamics")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the RC building emulator and write a dataset.
    GenData(GenDataArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Eigenvalue analysis of a checkpoint's dynamics weights.
    Eigen(EigenArgs),
    /// Train the experiment grid over several seeds.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of zones.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    zones: u64,
    /// Recorded days at 96 samples per day.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    days: u64,
    #[arg(long, env = "THERMODEN_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Mean steps each zone holds a random input level [default: 1].
    #[arg(long)]
    switch_period: Option<usize>,
    /// Ambient temperature noise standard deviation, K.
    #[arg(long)]
    ambient_noise: Option<f64>,
    /// Zone sensor noise standard deviation, K.
    #[arg(long)]
    measurement_noise: Option<f64>,
    /// Disable the solar gain.
    #[arg(long)]
    no_solar: bool,
}

/// Flags mirroring [`TrainConfig`]; each overrides the config file.
#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON file with flat training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed for initialization and minibatch order
    #[arg(long, env = "THERMODEN_SEED")]
    seed: Option<u64>,
    /// Optimizer steps [default: 5000]
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate [default: 0.003]
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// Windows per minibatch [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Steps between dev evaluations [default: 250]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Prediction horizon N [default: 32]
    #[arg(long)]
    horizon: Option<usize>,
    /// Training window stride, 0 for N [default: 0]
    #[arg(long)]
    stride: Option<usize>,
    /// structured or unstructured [default: structured]
    #[arg(long)]
    structure: Option<Structure>,
    /// mlp, rnn or resnet [default: mlp]
    #[arg(long)]
    block: Option<BlockKind>,
    /// linear or pf [default: linear]
    #[arg(long)]
    weights: Option<WeightKind>,
    /// Hidden activation [default: gelu]
    #[arg(long)]
    activation: Option<Activation>,
    /// Layers per block [default: 2]
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width [default: 80]
    #[arg(long)]
    width: Option<usize>,
    /// State dimension [default: 80]
    #[arg(long = "nx")]
    n_x: Option<usize>,
    /// Use a two-layer output map
    #[arg(long)]
    neural_output: bool,
    /// Lower eigenvalue bound for pf weights [default: 0.8]
    #[arg(long)]
    lambda_min: Option<f64>,
    /// Upper eigenvalue bound for pf weights [default: 1.0]
    #[arg(long)]
    lambda_max: Option<f64>,
    /// State smoothness weight [default: 0.2]
    #[arg(long)]
    q_dx: Option<f64>,
    /// Output bound penalty weight [default: 1.0]
    #[arg(long)]
    q_ineq_y: Option<f64>,
    /// Input contribution penalty weight [default: 0.2]
    #[arg(long)]
    q_ineq_u: Option<f64>,
    /// Disturbance contribution penalty weight [default: 0.2]
    #[arg(long)]
    q_ineq_d: Option<f64>,
    /// Normalized output lower bound [default: -0.05]
    #[arg(long)]
    y_lower: Option<f64>,
    /// Normalized output upper bound [default: 1.05]
    #[arg(long)]
    y_upper: Option<f64>,
    /// Bound on |f_u| contributions [default: 0.05]
    #[arg(long)]
    fu_cap: Option<f64>,
    /// Bound on |f_d| contributions [default: 0.05]
    #[arg(long)]
    fd_cap: Option<f64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field { cfg.$field = v; }
            )*};
        }
        set!(
            seed, steps, learning_rate, batch_size, eval_every, horizon, stride, structure, block, weights,
            activation, layers, width, n_x, lambda_min, lambda_max, q_dx, q_ineq_y, q_ineq_u, q_ineq_d, y_lower,
            y_upper, fu_cap, fd_cap
        );
        if self.neural_output {
            cfg.neural_output = true;
        }
        for w in cfg.validate().map_err(Failure::from)? {
            log::warn!("{w}");
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing data.csv) or CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the open-loop trajectory CSV here.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct EigenArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory for the scatter CSV; defaults to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Modulus above which a mode counts as dominant.
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Results CSV.
    #[arg(long, default_value = "sweep_results.csv")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Self { code: 2, message }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Parse { .. } => 1,
            Error::Data(_) | Error::DegenerateChannel(_) => 1,
            Error::NumericOverflow { .. } | Error::NonConvergence { .. } | Error::Oracle(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    version: &'static str,
    duration_seconds: f64,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), Failure> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::from(Error::from(e)))?;
        std::fs::write(&tmp, text).map_err(|e| Failure::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Failure::io(path, e))
    }
}

struct Run {
    name: &'static str,
    started: Instant,
}

impl Run {
    fn start(name: &'static str) -> Self {
        Self {
            name,
            started: Instant::now(),
        }
    }

    fn finish(
        &self,
        path: &Path,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<(), Failure> {
        RunManifest {
            command: self.name.to_owned(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION"),
            duration_seconds: self.started.elapsed().as_secs_f64(),
        }
        .write(path)
    }
}

fn data_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATA_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_data(p: &Path) -> Result<(PathBuf, TimeSeriesDataset<f64>), Failure> {
    let path = data_path(p);
    if !path.exists() {
        return Err(Failure::io(&path, "dataset not found"));
    }
    let ds = data::read_csv(&path)?;
    Ok((path, ds))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn to_json<S: Serialize>(v: &S) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn gen_data(args: &GenDataArgs) -> Result<(), Failure> {
    let run = Run::start("gen-data");
    let mut cfg = ExcitationConfig {
        days: args.days as usize,
        seed: args.seed,
        solar: !args.no_solar,
        ..ExcitationConfig::default()
    };
    if let Some(v) = args.switch_period {
        cfg.switch_period_steps = v;
    }
    if let Some(v) = args.ambient_noise {
        cfg.noise_std = v;
    }
    if let Some(v) = args.measurement_noise {
        cfg.measurement_noise_std = v;
    }
    cfg.validate()?;
    let params = build_rc_network(args.zones as usize, args.seed)?;
    let generated = generate_dataset(&params, &cfg)?;
    create_dir(&args.out)?;
    let data_file = args.out.join(DATA_FILE);
    let building_file = args.out.join(BUILDING_FILE);
    data::write_csv(&generated.dataset, &data_file)?;
    params.write_csv(&building_file)?;
    println!(
        "wrote {} rows ({} zones, spectral radius {:.4}) to {}",
        generated.dataset.len(),
        params.n_zones,
        params.spectral_radius()?,
        data_file.display()
    );
    run.finish(
        &args.out.join(RUN_MANIFEST),
        json!({ "zones": args.zones, "excitation": to_json(&cfg) }),
        args.seed,
        vec![],
        vec![data_file, building_file],
    )
}

fn train_cmd(args: &TrainArgs) -> Result<(), Failure> {
    let run = Run::start("train");
    let cfg = args.config.resolve()?;
    let (path, raw) = load_data(&args.data)?;
    let prepared = Prepared::new(&raw, cfg.horizon)?;
    let spec = cfg.model_spec(raw.n_y(), raw.n_u(), raw.n_d());
    let mut model = NeuralSsm::<f64>::init(spec, cfg.seed)?;
    let outcome = train(&mut model, &prepared, &cfg)?;

    create_dir(&args.out)?;
    let ckpt = Checkpoint {
        model,
        config: cfg.clone(),
        stats: prepared.stats.clone(),
        dev_open_loop_mse: outcome.best_dev_mse,
        best_step: outcome.best_step,
        data: Some(path.display().to_string()),
    };
    let manifest = ckpt.save(&args.out)?;
    let log_path = args.out.join(TRAIN_LOG);
    outcome.log.write_csv(&log_path)?;

    let dev = evaluate(&ckpt.model, &prepared.dev, &prepared.stats)?;
    let test = evaluate(&ckpt.model, &prepared.test, &prepared.stats)?;
    println!(
        "best step {}: dev open-loop MSE {:.6} ({:.4} K RMSE), test open-loop MSE {:.6} ({:.4} K RMSE)",
        outcome.best_step, dev.open_loop_mse, dev.open_loop_rmse_k, test.open_loop_mse, test.open_loop_rmse_k
    );
    if !outcome.bounds_held() {
        log::warn!("eigenvalue bounds were violated at some evaluation");
    }
    run.finish(
        &args.out.join(RUN_MANIFEST),
        to_json(&cfg),
        cfg.seed,
        vec![path],
        vec![manifest, log_path],
    )
}

fn eval_cmd(args: &EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::<f64>::load(&args.ckpt)?;
    let (path, raw) = load_data(&args.data)?;
    let prepared = Prepared::new(&raw, ckpt.config.horizon)?;
    if prepared.stats != ckpt.stats {
        log::warn!("dataset statistics differ from the checkpoint's; scoring with the checkpoint's");
    }
    let splits = data::split_even(&raw, ckpt.config.horizon)?;
    let split = ckpt.stats.apply(splits.select(&args.split)?)?;
    let e = evaluate(&ckpt.model, &split, &ckpt.stats)?;
    println!("split {} of {}", args.split, path.display());
    println!(
        "N-step    MSE {:.6} normalized, {:.6} K^2 ({:.4} K RMSE)",
        e.n_step_mse, e.n_step_mse_k2, e.n_step_rmse_k
    );
    println!(
        "open-loop MSE {:.6} normalized, {:.6} K^2 ({:.4} K RMSE)",
        e.open_loop_mse, e.open_loop_mse_k2, e.open_loop_rmse_k
    );
    if let Some(out) = &args.trajectory {
        open_loop_simulate(&ckpt.model, &split)?.write_csv(out)?;
    }
    Ok(())
}

fn eigen_cmd(args: &EigenArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::<f64>::load(&args.ckpt)?;
    let report = analyze_model(&ckpt.model, args.threshold)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    for (s, n) in report.spectra.iter().zip(&report.dominant_counts) {
        println!(
            "{}: spectral radius {:.6}, {} modes above {}",
            s.source_label, s.spectral_radius, n, args.threshold
        );
    }
    if let Some(b) = report.common_bounds() {
        if report.bounds_satisfied() {
            println!("bound satisfied: [{:?}, {:?}]", b.lambda_min, b.lambda_max);
        } else {
            println!("bound violated: [{:?}, {:?}] by {}", b.lambda_min, b.lambda_max, report.violations.join(", "));
        }
    }
    if !report.unstable.is_empty() {
        println!("spectral radius above 1: {}", report.unstable.join(", "));
    }
    let dir = args.out.clone().unwrap_or_else(|| args.ckpt.clone());
    create_dir(&dir)?;
    let path = write_scatter_csv(&report, &dir, "model")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> Result<(), Failure> {
    let run = Run::start("sweep");
    let cfg = args.config.resolve()?;
    let (path, raw) = load_data(&args.data)?;
    let opts = SweepOptions {
        cells: default_grid(),
        seeds: (0..args.seeds).map(|i| cfg.seed + i).collect(),
        jobs: args.jobs,
    };
    let results = sweep(&raw, &cfg, &opts)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_sweep_csv(&results, &args.out)?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    println!("{} runs, {} failed; results in {}", results.len(), failed, args.out.display());
    run.finish(
        &args.out.with_extension("manifest.json"),
        json!({ "train": to_json(&cfg), "seeds": opts.seeds, "cells": opts.cells.len() }),
        cfg.seed,
        vec![path],
        vec![args.out.clone()],
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Eigen(a) => eigen_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
