//! Command-line entry point: dataset generation, training, evaluation,
//! experiment suites, and closed-loop control.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use phlab::core::dataset::{build_dataset, DatasetSpec};
use phlab::core::integrator::{Discretization, RolloutSolver};
use phlab::core::model::DynModel;
use phlab::core::system::SystemSpec;
use phlab::core::train::{evaluate, LambdaSchedule, TrainConfig};
use phlab::experiments::{self, ExperimentId, ExperimentSpec, Scale};
use phlab::io;
use phlab::trainer::{self, ModelKind};

#[derive(Parser)]
#[command(
    name = "phlab",
    version,
    about = "Pseudo-Hamiltonian system identification and control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in system description to a JSON file.
    System(SystemArgs),
    /// Sample trajectories from a system into a dataset file.
    Gen(GenArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset's trajectories.
    Eval(EvalArgs),
    /// Run a named benchmark experiment end to end.
    Exp(ExpArgs),
    /// Drive a plant to reference tank levels with a learned model.
    Mpc(MpcArgs),
}

#[derive(Args)]
struct SystemArgs {
    /// One of: msd, tank, tank-leak, tank-two-leaks.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// System description JSON (see `phlab system`).
    #[arg(long)]
    system: PathBuf,
    /// Total number of state samples across all trajectories.
    #[arg(long)]
    samples: usize,
    /// Sampling interval.
    #[arg(long)]
    dt: f64,
    /// Length of each trajectory in time units.
    #[arg(long)]
    length: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (written by `phlab gen`).
    #[arg(long)]
    data: PathBuf,
    /// One of: phnn, phnn-ft, baseline1, baseline2.
    #[arg(long)]
    model: String,
    /// One of: euler, rk4, midpoint, srk4.
    #[arg(long, default_value = "midpoint")]
    integrator: String,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Either a constant λ ("0.1") or a schedule ("0:0.3,150:0.1,300:0.03").
    #[arg(long, default_value = "0")]
    lambda_schedule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional validation dataset, scored at λ = 0 every epoch.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Checkpoint path; the report and metrics land next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `phlab train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose trajectories serve as the test set.
    #[arg(long)]
    data: PathBuf,
    /// Rollout solver: rk4 or midpoint.
    #[arg(long, default_value = "rk4")]
    solver: String,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment id, e.g. msd-datasize or tank-leak.
    experiment: String,
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Override the scale's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Output directory; defaults to the experiment id.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MpcArgs {
    /// Checkpoint providing the prediction model.
    #[arg(long)]
    model: PathBuf,
    /// System description JSON acting as the true plant.
    #[arg(long)]
    plant: PathBuf,
    /// Reference tank levels, comma-separated, one per tank.
    #[arg(long = "ref")]
    mu_ref: String,
    /// Planning horizon in control steps.
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Control bounds "u_min,u_max".
    #[arg(long, default_value = "-2,2", allow_hyphen_values = true)]
    bounds: String,
    /// Closed-loop duration in time units.
    #[arg(long = "T", default_value_t = 10.0)]
    t_end: f64,
    /// 1-based index of the tank receiving the controllable inflow.
    #[arg(long, default_value_t = 1)]
    tank: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::System(args) => cmd_system(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Exp(args) => cmd_exp(args),
        Command::Mpc(args) => cmd_mpc(args),
    }
}

fn cmd_system(args: SystemArgs) -> Result<()> {
    let system = match args.kind.as_str() {
        "msd" => experiments::msd_system(),
        "tank" => experiments::tank_system(&[]),
        "tank-leak" => experiments::tank_system(&[experiments::STUDY_LEAK]),
        "tank-two-leaks" => {
            experiments::tank_system(&[(0, 10.0), experiments::STUDY_LEAK])
        }
        other => bail!("unknown system kind `{other}` (msd, tank, tank-leak, tank-two-leaks)"),
    };
    io::write_system(&args.out, &system)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let system = io::read_system(&args.system)?;
    let spec = DatasetSpec {
        n_samples: args.samples,
        trajectory_length: args.length,
        sample_dt: args.dt,
        noise_std: args.noise,
        seed: args.seed,
    };
    let dataset = build_dataset(&system, &spec).map_err(|e| anyhow!("{e}"))?;
    io::write_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} ({} trajectories, {} samples)",
        args.out.display(),
        dataset.trajectories.len(),
        dataset.trajectories.iter().map(|t| t.times.len()).sum::<usize>()
    );
    Ok(())
}

fn parse_lambda(s: &str) -> Result<LambdaSchedule> {
    if s.contains(':') {
        LambdaSchedule::parse(s).map_err(|e| anyhow!("--lambda-schedule: {e}"))
    } else {
        let lambda: f64 = s
            .parse()
            .with_context(|| format!("--lambda-schedule: `{s}` is not a number"))?;
        Ok(LambdaSchedule::constant(lambda))
    }
}

/// The training artifact written next to the checkpoint.
#[derive(Serialize)]
struct TrainReport {
    model: String,
    data: PathBuf,
    integrator: String,
    epochs: usize,
    batch: usize,
    seed: u64,
    checkpoint: PathBuf,
    wall_seconds: f64,
    final_train_loss: Option<f64>,
    final_val_loss: Option<f64>,
    damping: Vec<f64>,
    train_loss: Vec<f64>,
    val_loss: Vec<Option<f64>>,
    lambda: Vec<f64>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = io::read_dataset(&args.data)?;
    let validation = args.validation.as_ref().map(|p| io::read_dataset(p)).transpose()?;
    let kind: ModelKind = args.model.parse()?;
    let disc = Discretization::parse(&args.integrator).map_err(|e| anyhow!("{e}"))?;
    let mut cfg = TrainConfig::new(args.epochs, args.batch, disc);
    cfg.lambda = parse_lambda(&args.lambda_schedule)?;
    cfg.seed = args.seed;

    let descriptor = trainer::descriptor_for(kind, &dataset.meta.system);
    let mut model = DynModel::from_descriptor(&descriptor).map_err(|e| anyhow!("{e}"))?;
    let summary = trainer::run_training(&mut model, &dataset, validation.as_ref(), &cfg)?;
    io::write_checkpoint(&args.out, &model)?;

    let report = TrainReport {
        model: kind.name().to_string(),
        data: args.data.clone(),
        integrator: disc.name().to_string(),
        epochs: args.epochs,
        batch: args.batch,
        seed: args.seed,
        checkpoint: args.out.clone(),
        wall_seconds: summary.wall_seconds,
        final_train_loss: summary.final_train_loss(),
        final_val_loss: summary.final_val_loss(),
        damping: summary.final_damping().to_vec(),
        train_loss: summary.records.iter().map(|r| r.train_loss).collect(),
        val_loss: summary.records.iter().map(|r| r.val_loss).collect(),
        lambda: summary.records.iter().map(|r| r.lambda).collect(),
    };
    let report_path = args.out.with_extension("report.json");
    io::write_json(&report_path, &report)?;
    let metrics_path = args.out.with_extension("metrics.csv");
    io::write_train_records(&metrics_path, &summary.records)?;
    println!(
        "wrote {} (final train loss {:.6e})",
        args.out.display(),
        report.final_train_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = io::read_dataset(&args.data)?;
    let model = io::read_checkpoint(&args.model)?;
    let solver = match args.solver.as_str() {
        "rk4" => RolloutSolver::Rk4Explicit,
        "midpoint" => RolloutSolver::MidpointImplicit,
        other => bail!("unknown solver `{other}` (rk4 or midpoint)"),
    };
    let metrics = evaluate(&model, &dataset.meta.system, &dataset, solver)
        .map_err(|e| anyhow!("{e}"))?;
    let json = serde_json::to_string_pretty(&metrics)?;
    println!("{json}");
    if let Some(out) = args.out {
        io::write_json(&out, &metrics)?;
    }
    Ok(())
}

fn cmd_exp(args: ExpArgs) -> Result<()> {
    let id: ExperimentId = args.experiment.parse()?;
    let scale: Scale = args.scale.parse()?;
    let mut spec = ExperimentSpec::new(id, scale);
    spec.replicates = args.replicates;
    spec.base_seed = args.seed;
    let out_dir = args.out_dir.unwrap_or_else(|| PathBuf::from(id.name()));
    let rows = experiments::run(&spec, &out_dir)?;
    println!("wrote {} result rows under {}", rows.len(), out_dir.display());
    Ok(())
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        bail!("{what} must be two comma-separated numbers, got `{s}`");
    }
    let a = parts[0].trim().parse().with_context(|| format!("parsing {what}"))?;
    let b = parts[1].trim().parse().with_context(|| format!("parsing {what}"))?;
    Ok((a, b))
}

fn cmd_mpc(args: MpcArgs) -> Result<()> {
    let plant = io::read_system(&args.plant)?;
    let model = io::read_checkpoint(&args.model)?;
    let tank = match &plant {
        SystemSpec::TankNetwork(t) => t.clone(),
        SystemSpec::MassSpring(_) => bail!("the mpc command drives a tank-network plant"),
    };
    let mu_ref: Vec<f64> = args
        .mu_ref
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("parsing --ref `{p}`")))
        .collect::<Result<_>>()?;
    let mut spec = phlab::core::mpc::ControlSpec::for_tank_network(&tank, mu_ref)
        .map_err(|e| anyhow!("{e}"))?;
    spec.horizon = args.horizon;
    spec.bounds = parse_pair(&args.bounds, "--bounds")?;
    if args.tank == 0 || args.tank > tank.n_tanks {
        bail!("--tank must be between 1 and {}", tank.n_tanks);
    }
    spec.controlled_tank = args.tank - 1;
    spec.validate().map_err(|e| anyhow!("{e}"))?;

    // Start from the benchmark initial condition used throughout.
    let x0 = vec![-1.0, -1.0, 0.0, 0.5, -1.0, 1.0, 1.0, -0.5, -1.0];
    let x0 = if x0.len() == plant.dim() { x0 } else { vec![0.0; plant.dim()] };
    let trace = phlab::core::mpc::run_closed_loop(&plant, &model, &spec, &x0, args.t_end)
        .map_err(|e| anyhow!("{e}"))?;
    io::write_trace(&args.out, &trace)?;
    let last = trace.plant_states.last().expect("nonempty trace");
    let err = (0..spec.n_tanks)
        .map(|k| (last[spec.n_pipes + k] - spec.mu_ref[k]).abs())
        .fold(0.0f64, f64::max);
    println!(
        "wrote {} ({} steps, terminal level error {:.4})",
        args.out.display(),
        trace.controls.len(),
        err
    );
    Ok(())
}
