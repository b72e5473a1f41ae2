//! End-to-end benchmark drivers behind `phlab exp`.
//!
//! Each experiment trains the relevant models, evaluates them on held-out
//! trajectories, and emits three kinds of artifacts into the output
//! directory: `results.csv` with one long-format row per measured value,
//! `curves/*.csv` with trajectories, force curves, and Hamiltonian grids for
//! plotting, and `report.json` with replicate summary statistics. Every row
//! carries a hash of the full job configuration so any number can be traced
//! back to the run that produced it.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use phlab_core::dataset::{build_dataset, points_per_trajectory, DatasetSpec, TrajectoryDataset};
use phlab_core::integrator::{Discretization, RolloutSolver};
use phlab_core::model::{DynModel, ForceConfig, ForceInput, ForceTerm, ModelDescriptor, PhModel};
use phlab_core::mpc::{run_closed_loop, ControlSpec, ControlTrace};
use phlab_core::system::{LeakForce, MassSpringSpec, SystemSpec, TankNetworkSpec};
use phlab_core::train::{evaluate, EvalMetrics, LambdaSchedule, TrainConfig};

use crate::io;
use crate::trainer::{self, descriptor_for, ModelKind, RunSummary, HIDDEN};

// ---------------------------------------------------------------------------
// Experiment registry
// ---------------------------------------------------------------------------

/// All benchmark experiments, by CLI id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    MsdDatasize,
    MsdTrajectory,
    MsdHamiltonian,
    MsdDamping,
    MsdForce,
    MsdFreq,
    TankIntegrators,
    TankDatasize,
    TankHamiltonian,
    TankLeak,
    TankMpc,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 11] = [
        ExperimentId::MsdDatasize,
        ExperimentId::MsdTrajectory,
        ExperimentId::MsdHamiltonian,
        ExperimentId::MsdDamping,
        ExperimentId::MsdForce,
        ExperimentId::MsdFreq,
        ExperimentId::TankIntegrators,
        ExperimentId::TankDatasize,
        ExperimentId::TankHamiltonian,
        ExperimentId::TankLeak,
        ExperimentId::TankMpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::MsdDatasize => "msd-datasize",
            ExperimentId::MsdTrajectory => "msd-trajectory",
            ExperimentId::MsdHamiltonian => "msd-hamiltonian",
            ExperimentId::MsdDamping => "msd-damping",
            ExperimentId::MsdForce => "msd-force",
            ExperimentId::MsdFreq => "msd-freq",
            ExperimentId::TankIntegrators => "tank-integrators",
            ExperimentId::TankDatasize => "tank-datasize",
            ExperimentId::TankHamiltonian => "tank-hamiltonian",
            ExperimentId::TankLeak => "tank-leak",
            ExperimentId::TankMpc => "tank-mpc",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .iter()
            .copied()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ExperimentId::ALL.iter().map(|id| id.name()).collect();
                anyhow!("unknown experiment `{s}`; expected one of {}", names.join(", "))
            })
    }
}

/// How much compute an experiment run spends.
///
/// `Paper` reproduces the published protocol (10 replicates, full epoch
/// budgets); `Desk` is the default (3 replicates, a tenth of the epochs,
/// reduced dataset grids); `Smoke` only checks that the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Smoke,
    Desk,
    Paper,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Smoke => "smoke",
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }

    fn default_replicates(self) -> usize {
        match self {
            Scale::Smoke => 1,
            Scale::Desk => 3,
            Scale::Paper => 10,
        }
    }

    /// Scale a paper epoch budget: desk runs a tenth, smoke a handful.
    fn epochs(self, paper: usize) -> usize {
        match self {
            Scale::Smoke => paper.min(4),
            Scale::Desk => (paper / 10).max(1),
            Scale::Paper => paper,
        }
    }
}

impl FromStr for Scale {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => bail!("unknown scale `{other}` (expected smoke, desk or paper)"),
        }
    }
}

/// One requested experiment run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub scale: Scale,
    /// Overrides the scale's replicate default when set.
    pub replicates: Option<usize>,
    pub base_seed: u64,
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId, scale: Scale) -> Self {
        ExperimentSpec { id, scale, replicates: None, base_seed: 0 }
    }

    fn replicates(&self) -> usize {
        self.replicates.unwrap_or_else(|| self.scale.default_replicates())
    }
}

/// One measured value in long format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub model: String,
    pub dataset_size: usize,
    pub replicate: usize,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

/// Hash of a serializable job configuration; ties result rows to their runs.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Stable per-job RNG seed derived from the run's base seed and a label.
fn seed_from(base: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{base}/{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Shared building blocks
// ---------------------------------------------------------------------------

/// The driven, damped oscillator benchmark: m = k = 1, c = 0.3, f = sin(3t).
pub fn msd_system() -> SystemSpec {
    SystemSpec::MassSpring(MassSpringSpec::default())
}

/// The four-tank network, optionally with saturating leaks
/// `(tank index, coefficient)`, each `-c·clamp(μ, ±0.3)`.
pub fn tank_system(leaks: &[(usize, f64)]) -> SystemSpec {
    let spec = TankNetworkSpec::default_four_tank();
    let leaks = leaks
        .iter()
        .map(|&(tank, coefficient)| LeakForce { tank, coefficient, saturation: 0.3 })
        .collect();
    SystemSpec::TankNetwork(spec.with_leaks(leaks).expect("valid leak placement"))
}

/// Build a training set of roughly `n_samples` state samples.
///
/// The published sample budgets are not always whole multiples of the
/// trajectory length (1000 samples of 1001-point trajectories); the driver
/// raises the budget to at least one full trajectory.
fn training_set(
    system: &SystemSpec,
    n_samples: usize,
    length: f64,
    dt: f64,
    noise: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let ppt = points_per_trajectory(length, dt);
    let spec = DatasetSpec {
        n_samples: n_samples.max(ppt),
        trajectory_length: length,
        sample_dt: dt,
        noise_std: noise,
        seed,
    };
    build_dataset(system, &spec).map_err(|e| anyhow!("building dataset: {e}"))
}

/// A noise-free held-out test set of `n_traj` trajectories.
fn test_set(
    system: &SystemSpec,
    n_traj: usize,
    length: f64,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let ppt = points_per_trajectory(length, dt);
    training_set(system, n_traj * ppt, length, dt, 0.0, seed)
}

/// Everything identifying one training job, hashed into its result rows.
#[derive(Debug, Clone, Serialize)]
struct JobConfig {
    experiment: &'static str,
    scale: &'static str,
    model: String,
    descriptor: ModelDescriptor,
    dataset_size: usize,
    noise_std: f64,
    sample_dt: f64,
    replicate: usize,
    train: TrainConfig,
}

/// A trained replicate with its evaluation metrics.
struct TrainedJob {
    replicate: usize,
    model: DynModel,
    summary: RunSummary,
    metrics: EvalMetrics,
    hash: String,
}

/// Train `replicates` models from one descriptor and evaluate each on `test`.
#[allow(clippy::too_many_arguments)]
fn run_jobs(
    spec: &ExperimentSpec,
    label: &str,
    descriptor: &ModelDescriptor,
    train_ds: &TrajectoryDataset,
    validation: Option<&TrajectoryDataset>,
    test: &TrajectoryDataset,
    cfg: &TrainConfig,
    replicates: usize,
) -> Result<Vec<TrainedJob>> {
    let system = &train_ds.meta.system;
    (0..replicates)
        .into_par_iter()
        .map(|replicate| {
            let mut cfg = cfg.clone();
            cfg.seed = seed_from(spec.base_seed, &format!("{label}/train/{replicate}"));
            let job = JobConfig {
                experiment: spec.id.name(),
                scale: spec.scale.name(),
                model: label.to_string(),
                descriptor: descriptor.clone(),
                dataset_size: train_ds.meta.spec.n_samples,
                noise_std: train_ds.meta.spec.noise_std,
                sample_dt: train_ds.meta.spec.sample_dt,
                replicate,
                train: cfg.clone(),
            };
            let mut model = DynModel::from_descriptor(descriptor)
                .map_err(|e| anyhow!("building model `{label}`: {e}"))?;
            let summary = trainer::run_training(&mut model, train_ds, validation, &cfg)?;
            let metrics = evaluate(&model, system, test, RolloutSolver::Rk4Explicit)
                .map_err(|e| anyhow!("evaluating `{label}`: {e}"))?;
            Ok(TrainedJob { replicate, model, summary, metrics, hash: config_hash(&job) })
        })
        .collect()
}

/// Standard result rows for one trained-and-evaluated job.
fn metric_rows(
    spec: &ExperimentSpec,
    model_label: &str,
    dataset_size: usize,
    job: &TrainedJob,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: f64| {
        rows.push(ResultRow {
            experiment: spec.id.name().to_string(),
            model: model_label.to_string(),
            dataset_size,
            replicate: job.replicate,
            metric: metric.to_string(),
            value,
            config_hash: job.hash.clone(),
        });
    };
    push("trajectory_mse", job.metrics.trajectory_mse);
    push("diverged", job.metrics.n_diverged as f64);
    if let Some(v) = job.metrics.grad_h_mse {
        push("grad_h_mse", v);
    }
    if let Some(v) = job.metrics.damping_abs_error {
        push("damping_abs_error", v);
    }
    if let Some(v) = job.metrics.adjusted_force_mae {
        push("adjusted_force_mae", v);
    }
    for (i, r) in job.model.damping_values().iter().enumerate() {
        push(&format!("damping_{}", i + 1), *r);
    }
    if let Some(v) = job.summary.final_train_loss() {
        push("final_train_loss", v);
    }
    if let Some(v) = job.summary.final_val_loss() {
        push("final_val_loss", v);
    }
    push("train_seconds", job.summary.wall_seconds);
    rows
}

/// Mean and (population) standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Mass-spring experiments
// ---------------------------------------------------------------------------

/// Paper protocol constants for the mass-spring study.
const MSD_LENGTH: f64 = 10.0;
const MSD_DT: f64 = 1.0 / 100.0;
const MSD_EPOCHS: usize = 20_000;
const MSD_TEST_TRAJ: usize = 10;

fn msd_train_config(scale: Scale, kind: ModelKind, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(scale.epochs(epochs), 32, Discretization::Midpoint);
    // The force networks are L1-regularized; the baselines have none.
    if matches!(kind, ModelKind::Phnn | ModelKind::PhnnFt) {
        cfg.lambda = LambdaSchedule::constant(0.1);
    }
    cfg
}

fn msd_sizes(scale: Scale) -> Vec<usize> {
    match scale {
        Scale::Smoke => vec![2500],
        Scale::Desk => vec![2000, 10_000],
        Scale::Paper => vec![1000, 2000, 5000, 10_000, 20_000],
    }
}

fn run_msd_datasize(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = msd_system();
    let test = test_set(
        &system,
        MSD_TEST_TRAJ,
        MSD_LENGTH,
        MSD_DT,
        seed_from(spec.base_seed, "msd/test"),
    )?;
    let mut rows = Vec::new();
    for size in msd_sizes(spec.scale) {
        let train_ds = training_set(
            &system,
            size,
            MSD_LENGTH,
            MSD_DT,
            0.0,
            seed_from(spec.base_seed, &format!("msd/train/{size}")),
        )?;
        for kind in ModelKind::ALL {
            let descriptor = descriptor_for(kind, &system);
            let cfg = msd_train_config(spec.scale, kind, MSD_EPOCHS);
            let jobs = run_jobs(
                spec,
                &format!("{}/{size}", kind.name()),
                &descriptor,
                &train_ds,
                None,
                &test,
                &cfg,
                spec.replicates(),
            )?;
            for job in &jobs {
                rows.extend(metric_rows(spec, kind.name(), size, job));
            }
        }
    }
    let _ = out;
    Ok(rows)
}

fn rollout_states(
    model: &DynModel,
    test: &TrajectoryDataset,
    traj: usize,
) -> Result<Vec<Vec<f64>>> {
    let tr = &test.trajectories[traj];
    let mut g = |x: &[f64], t: f64| model.eval(x, t);
    let (_, states) = phlab_core::integrator::rollout(
        &mut g,
        &tr.states[0],
        tr.times[0],
        *tr.times.last().expect("nonempty"),
        test.sample_dt(),
        RolloutSolver::Rk4Explicit,
    )
    .map_err(|e| anyhow!("rollout failed: {e}"))?;
    Ok(states)
}

fn run_msd_trajectory(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = msd_system();
    let seed = spec.base_seed;
    let test = test_set(&system, MSD_TEST_TRAJ, MSD_LENGTH, MSD_DT, seed_from(seed, "msd/test"))?;
    let train_ds =
        training_set(&system, 10_000, MSD_LENGTH, MSD_DT, 0.0, seed_from(seed, "msd/train/10000"))?;
    let mut rows = Vec::new();
    let shown = &test.trajectories[0];
    // Per-kind mean and spread of the predicted test trajectory.
    for kind in ModelKind::ALL {
        let descriptor = descriptor_for(kind, &system);
        let cfg = msd_train_config(spec.scale, kind, MSD_EPOCHS);
        let jobs = run_jobs(
            spec,
            kind.name(),
            &descriptor,
            &train_ds,
            None,
            &test,
            &cfg,
            spec.replicates(),
        )?;
        let mut predictions = Vec::new();
        for job in &jobs {
            rows.extend(metric_rows(spec, kind.name(), 10_000, job));
            if let Ok(states) = rollout_states(&job.model, &test, 0) {
                predictions.push(states);
            }
        }
        let mut curve = Vec::new();
        for (k, t) in shown.times.iter().enumerate() {
            let mut row = vec![*t, shown.states[k][0], shown.states[k][1]];
            for dim in 0..2 {
                let vals: Vec<f64> = predictions.iter().map(|p| p[k][dim]).collect();
                let (mean, std) = mean_std(&vals);
                row.push(mean);
                row.push(std);
            }
            curve.push(row);
        }
        out.curve(
            &format!("msd-trajectory-{}", kind.name()),
            &["t", "q_true", "p_true", "q_mean", "q_std", "p_mean", "p_std"],
            &curve,
        )?;
    }
    Ok(rows)
}

/// Evaluate a scalar state function on an `n`×`n` grid over a 2-state plane,
/// all other coordinates zero. Rows are `(x_i, x_j, value)`.
pub fn contour_grid(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    dim: usize,
    plane: (usize, usize),
    range: (f64, f64),
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let (i, j) = plane;
    if i >= dim || j >= dim || i == j {
        bail!("invalid plane ({i}, {j}) for dimension {dim}");
    }
    let mut rows = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let frac = |k: usize| {
                if n == 1 {
                    0.5
                } else {
                    k as f64 / (n - 1) as f64
                }
            };
            let xi = range.0 + (range.1 - range.0) * frac(a);
            let xj = range.0 + (range.1 - range.0) * frac(b);
            let mut x = vec![0.0; dim];
            x[i] = xi;
            x[j] = xj;
            rows.push(vec![xi, xj, f(&x)?]);
        }
    }
    Ok(rows)
}

/// Adjusted-Hamiltonian contour of a pseudo-Hamiltonian model.
fn model_contour(
    model: &DynModel,
    plane: (usize, usize),
    range: (f64, f64),
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let ph = model
        .as_pseudo_hamiltonian()
        .ok_or_else(|| anyhow!("model has no Hamiltonian"))?;
    contour_grid(
        &|x| ph.adjusted_hamiltonian(x).map_err(|e| anyhow!("{e}")),
        model.dim(),
        plane,
        range,
        n,
    )
}

/// Root-mean-square difference of the value column of two grids.
fn grid_rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::NAN;
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x[2] - y[2]) * (x[2] - y[2])).sum();
    (sum / n as f64).sqrt()
}

const CONTOUR_N: usize = 101;

fn run_msd_hamiltonian(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = msd_system();
    let seed = spec.base_seed;
    let test = test_set(&system, MSD_TEST_TRAJ, MSD_LENGTH, MSD_DT, seed_from(seed, "msd/test"))?;
    let train_ds =
        training_set(&system, 10_000, MSD_LENGTH, MSD_DT, 0.0, seed_from(seed, "msd/train/10000"))?;
    // Training initial conditions live on radii up to 4.5.
    let range = (-4.5, 4.5);
    let n = if spec.scale == Scale::Smoke { 11 } else { CONTOUR_N };
    let exact = model_contour(
        &DynModel::PseudoHamiltonian(system.planted_model()),
        (0, 1),
        range,
        n,
    )?;
    out.curve("msd-hamiltonian-exact", &["q", "p", "h"], &exact)?;

    let mut rows = Vec::new();
    for kind in [ModelKind::Phnn, ModelKind::PhnnFt] {
        let descriptor = descriptor_for(kind, &system);
        let cfg = msd_train_config(spec.scale, kind, MSD_EPOCHS);
        let jobs = run_jobs(
            spec,
            kind.name(),
            &descriptor,
            &train_ds,
            None,
            &test,
            &cfg,
            spec.replicates(),
        )?;
        let mut best: Option<(f64, usize)> = None;
        for (k, job) in jobs.iter().enumerate() {
            let grid = model_contour(&job.model, (0, 1), range, n)?;
            let rmse = grid_rmse(&grid, &exact);
            let mut extra = metric_rows(spec, kind.name(), 10_000, job);
            extra.push(ResultRow {
                experiment: spec.id.name().to_string(),
                model: kind.name().to_string(),
                dataset_size: 10_000,
                replicate: job.replicate,
                metric: "h_grid_rmse".to_string(),
                value: rmse,
                config_hash: job.hash.clone(),
            });
            rows.extend(extra);
            let score = job.metrics.grad_h_mse.unwrap_or(f64::INFINITY);
            if best.map_or(true, |(s, _)| score < s) {
                best = Some((score, k));
            }
        }
        // Emit the grid of the replicate that estimates ∇H best.
        if let Some((_, k)) = best {
            let grid = model_contour(&jobs[k].model, (0, 1), range, n)?;
            out.curve(&format!("msd-hamiltonian-{}", kind.name()), &["q", "p", "h"], &grid)?;
        }
    }
    Ok(rows)
}

/// Damping-recovery study (also backs the acceptance gate): PHNN with a
/// time-only force, midpoint training, λ = 0.1.
pub struct MsdDampingStudy {
    pub models: Vec<DynModel>,
    pub rows: Vec<ResultRow>,
    /// (epoch, learned damping per replicate…)
    pub damping_curve: Vec<Vec<f64>>,
    pub test: TrajectoryDataset,
}

pub fn msd_damping_study(
    spec: &ExperimentSpec,
    n_samples: usize,
    epochs: usize,
) -> Result<MsdDampingStudy> {
    let system = msd_system();
    let seed = spec.base_seed;
    let test = test_set(&system, MSD_TEST_TRAJ, MSD_LENGTH, MSD_DT, seed_from(seed, "msd/test"))?;
    let train_ds = training_set(
        &system,
        n_samples,
        MSD_LENGTH,
        MSD_DT,
        0.0,
        seed_from(seed, &format!("msd/train/{n_samples}")),
    )?;
    let descriptor = descriptor_for(ModelKind::PhnnFt, &system);
    let mut cfg = msd_train_config(spec.scale, ModelKind::PhnnFt, MSD_EPOCHS);
    cfg.epochs = epochs;
    let jobs = run_jobs(
        spec,
        ModelKind::PhnnFt.name(),
        &descriptor,
        &train_ds,
        None,
        &test,
        &cfg,
        spec.replicates(),
    )?;

    let mut rows = Vec::new();
    let mut damping_curve = Vec::new();
    if let Some(first) = jobs.first() {
        for (e, record) in first.summary.records.iter().enumerate() {
            let mut row = vec![record.epoch as f64];
            for job in &jobs {
                row.push(job.summary.records[e].damping.first().copied().unwrap_or(f64::NAN));
            }
            damping_curve.push(row);
        }
    }
    for job in &jobs {
        rows.extend(metric_rows(spec, ModelKind::PhnnFt.name(), n_samples, job));
    }
    Ok(MsdDampingStudy {
        models: jobs.into_iter().map(|j| j.model).collect(),
        rows,
        damping_curve,
        test,
    })
}

fn run_msd_damping(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let study = msd_damping_study(spec, 10_000, spec.scale.epochs(MSD_EPOCHS))?;
    let mut columns = vec!["epoch".to_string()];
    columns.extend((0..study.models.len()).map(|r| format!("damping_rep{r}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    out.curve("msd-damping", &cols, &study.damping_curve)?;
    Ok(study.rows)
}

fn run_msd_force(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = msd_system();
    let seed = spec.base_seed;
    let test = test_set(&system, MSD_TEST_TRAJ, MSD_LENGTH, MSD_DT, seed_from(seed, "msd/test"))?;
    let train_ds =
        training_set(&system, 10_000, MSD_LENGTH, MSD_DT, 0.0, seed_from(seed, "msd/train/10000"))?;
    let mut rows = Vec::new();
    // Estimated force along the first test trajectory, adjusted to zero mean
    // (the constant component of a force is not identifiable).
    let shown = &test.trajectories[0];
    let inputs: Vec<(Vec<f64>, f64)> = shown
        .states
        .iter()
        .zip(&shown.times)
        .map(|(x, t)| (x.clone(), *t))
        .collect();
    let true_vals: Vec<f64> = {
        let mut forces = Vec::with_capacity(inputs.len());
        for (x, t) in &inputs {
            forces.push(system.force_values(x, *t).map_err(|e| anyhow!("{e}"))?[1]);
        }
        let mean = forces.iter().sum::<f64>() / forces.len() as f64;
        forces.iter().map(|f| f - mean).collect()
    };
    for kind in [ModelKind::Phnn, ModelKind::PhnnFt] {
        let descriptor = descriptor_for(kind, &system);
        let cfg = msd_train_config(spec.scale, kind, MSD_EPOCHS);
        let jobs = run_jobs(
            spec,
            kind.name(),
            &descriptor,
            &train_ds,
            None,
            &test,
            &cfg,
            spec.replicates(),
        )?;
        let mut estimates: Vec<Vec<f64>> = Vec::new();
        for job in &jobs {
            rows.extend(metric_rows(spec, kind.name(), 10_000, job));
            let ph = job.model.as_pseudo_hamiltonian().expect("phnn kind");
            let est = ph.adjusted_force(&inputs).map_err(|e| anyhow!("{e}"))?;
            estimates.push(est.iter().map(|f| f[1]).collect());
        }
        let mut curve = Vec::new();
        for (k, t) in shown.times.iter().enumerate() {
            let vals: Vec<f64> = estimates.iter().map(|e| e[k]).collect();
            let (mean, std) = mean_std(&vals);
            curve.push(vec![*t, true_vals[k], mean, std]);
        }
        out.curve(
            &format!("msd-force-{}", kind.name()),
            &["t", "f_true", "f_mean", "f_std"],
            &curve,
        )?;
    }
    Ok(rows)
}

/// Frequency-replacement study: swap the learned force for candidate inputs
/// sin(ωt) and measure how well each variant reproduces the actual system,
/// whose drive stays at its true frequency. The error dips when the injected
/// frequency matches the truth; mismatched low frequencies excite the
/// resonance and hurt far more than high ones, whose response rolls off.
pub struct FreqStudy {
    pub omegas: Vec<f64>,
    pub mse: Vec<f64>,
    pub rows: Vec<ResultRow>,
}

pub const FREQ_GRID: [f64; 7] = [0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0];

pub fn msd_freq_study(
    spec: &ExperimentSpec,
    model: &DynModel,
    replicate: usize,
) -> Result<FreqStudy> {
    let ph = model
        .as_pseudo_hamiltonian()
        .ok_or_else(|| anyhow!("frequency study needs a pseudo-Hamiltonian model"))?;
    let hash = config_hash(&(spec.id.name(), spec.scale.name(), "freq", spec.base_seed));
    // The learned force is only identified up to a constant: the energy
    // gradient compensates any bias it picks up during training. Measure that
    // constant as the time-average of f̂ over the training window and keep it
    // in every replacement, so the sweep compares sine frequencies rather
    // than punishing the gauge choice.
    let offset = {
        let probe = vec![0.0; ph.dim()];
        let n = 1_000;
        let mut sum = 0.0;
        for k in 0..=n {
            let t = MSD_LENGTH as f64 * k as f64 / n as f64;
            sum += ph.force_eval(&probe, t).map_err(|e| anyhow!("{e}"))?[1];
        }
        sum / (n + 1) as f64
    };
    let plant = msd_system();
    let test = test_set(
        &plant,
        MSD_TEST_TRAJ,
        MSD_LENGTH,
        MSD_DT,
        seed_from(spec.base_seed, "msd/freq-test"),
    )?;
    let mut omegas = Vec::new();
    let mut mses = Vec::new();
    let mut rows = Vec::new();
    for omega in FREQ_GRID {
        let replaced = ph
            .replace_force(ForceTerm::Sine {
                index: 1,
                amplitude: 1.0,
                angular_frequency: omega,
                offset,
            })
            .map_err(|e| anyhow!("{e}"))?;
        let metrics = evaluate(
            &DynModel::PseudoHamiltonian(replaced),
            &plant,
            &test,
            RolloutSolver::Rk4Explicit,
        )
        .map_err(|e| anyhow!("{e}"))?;
        omegas.push(omega);
        mses.push(metrics.trajectory_mse);
        rows.push(ResultRow {
            experiment: spec.id.name().to_string(),
            model: ModelKind::PhnnFt.name().to_string(),
            dataset_size: 10_000,
            replicate,
            metric: format!("rollout_mse@omega={omega}"),
            value: metrics.trajectory_mse,
            config_hash: hash.clone(),
        });
    }
    Ok(FreqStudy { omegas, mse: mses, rows })
}

fn run_msd_freq(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let study = msd_damping_study(spec, 10_000, spec.scale.epochs(MSD_EPOCHS))?;
    let mut rows = study.rows;
    let mut curve: Vec<Vec<f64>> = Vec::new();
    for (replicate, model) in study.models.iter().enumerate() {
        let freq = msd_freq_study(spec, model, replicate)?;
        for (k, omega) in freq.omegas.iter().enumerate() {
            match curve.iter_mut().find(|row| row[0] == *omega) {
                Some(row) => row.push(freq.mse[k]),
                None => curve.push(vec![*omega, freq.mse[k]]),
            }
        }
        rows.extend(freq.rows);
    }
    let mut columns = vec!["omega".to_string()];
    columns.extend((0..study.models.len()).map(|r| format!("mse_rep{r}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    out.curve("msd-freq", &cols, &curve)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Tank experiments
// ---------------------------------------------------------------------------

const TANK_LENGTH: f64 = 1.0;
const TANK_TEST_TRAJ: usize = 10;

/// The standard tank benchmark carries a saturating leak on the last tank.
pub fn tank_benchmark_system() -> SystemSpec {
    tank_system(&[(3, 10.0)])
}

fn tank_train_config(epochs: usize, disc: Discretization) -> TrainConfig {
    TrainConfig::new(epochs, 256, disc)
}

/// Friction-recovery study behind the integrator-comparison acceptance
/// criterion: learned pipe frictions relative to the ground truth
/// (0.03, 0.03, 0.09, 0.03, 0.03), trained on the stated dataset.
pub struct FrictionStudy {
    /// Per discretization: per-replicate mean relative friction.
    pub per_disc: Vec<(Discretization, Vec<f64>)>,
    pub rows: Vec<ResultRow>,
}

pub fn tank_friction_study(
    spec: &ExperimentSpec,
    discs: &[Discretization],
    n_samples: usize,
    dt: f64,
    noise: f64,
    epochs: usize,
) -> Result<FrictionStudy> {
    let system = tank_benchmark_system();
    let seed = spec.base_seed;
    let test =
        test_set(&system, TANK_TEST_TRAJ, TANK_LENGTH, dt, seed_from(seed, "tank/test"))?;
    let train_ds = training_set(
        &system,
        n_samples,
        TANK_LENGTH,
        dt,
        noise,
        seed_from(seed, &format!("tank/train/{n_samples}/{dt}/{noise}")),
    )?;
    let true_frictions = system.damping_coefficients();
    let descriptor = descriptor_for(ModelKind::Phnn, &system);

    let mut per_disc = Vec::new();
    let mut rows = Vec::new();
    for &disc in discs {
        // The integrator comparison keeps the small default batch; with the
        // scarce dataset the extra optimizer steps per epoch are what let the
        // friction estimates reach each discretization's own fixed point.
        let mut cfg = tank_train_config(epochs, disc);
        cfg.batch_size = 32;
        let jobs = run_jobs(
            spec,
            &format!("phnn-{}", disc.name()),
            &descriptor,
            &train_ds,
            None,
            &test,
            &cfg,
            spec.replicates(),
        )?;
        let mut rep_means = Vec::new();
        for job in &jobs {
            let label = format!("phnn-{}", disc.name());
            rows.extend(metric_rows(spec, &label, n_samples, job));
            let learned = job.model.damping_values();
            let mut rel_sum = 0.0;
            for (k, (r, r_true)) in learned.iter().zip(&true_frictions).enumerate() {
                let rel = r / r_true;
                rel_sum += rel;
                rows.push(ResultRow {
                    experiment: spec.id.name().to_string(),
                    model: label.clone(),
                    dataset_size: n_samples,
                    replicate: job.replicate,
                    metric: format!("relative_friction_{}", k + 1),
                    value: rel,
                    config_hash: job.hash.clone(),
                });
            }
            let rel_mean = rel_sum / true_frictions.len() as f64;
            rep_means.push(rel_mean);
            rows.push(ResultRow {
                experiment: spec.id.name().to_string(),
                model: label.clone(),
                dataset_size: n_samples,
                replicate: job.replicate,
                metric: "relative_friction_mean".to_string(),
                value: rel_mean,
                config_hash: job.hash.clone(),
            });
        }
        per_disc.push((disc, rep_means));
    }
    Ok(FrictionStudy { per_disc, rows })
}

const ALL_DISCS: [Discretization; 4] = [
    Discretization::Euler,
    Discretization::Rk4,
    Discretization::Midpoint,
    Discretization::Srk4,
];

fn run_tank_integrators(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    // The six published data sets; desk scale runs the scarce noise-free one,
    // which is where the integrators separate most clearly.
    let datasets: Vec<(usize, f64, f64)> = match spec.scale {
        Scale::Smoke => vec![(341, 1.0 / 30.0, 0.0)],
        Scale::Desk => vec![(3000, 1.0 / 30.0, 0.0)],
        Scale::Paper => vec![
            (30_000, 1.0 / 100.0, 0.0),
            (30_000, 1.0 / 100.0, 0.03),
            (30_000, 1.0 / 100.0, 0.05),
            (3000, 1.0 / 30.0, 0.0),
            (3000, 1.0 / 30.0, 0.03),
            (3000, 1.0 / 30.0, 0.05),
        ],
    };
    let epochs = if spec.scale == Scale::Smoke { 4 } else { 1000 };
    let mut rows = Vec::new();
    for (n_samples, dt, noise) in datasets {
        let study =
            tank_friction_study(spec, &ALL_DISCS, n_samples, dt, noise, epochs)?;
        let mut noisy_rows = study.rows;
        for row in &mut noisy_rows {
            // Distinguish the noise levels sharing a sample count.
            if noise > 0.0 {
                row.metric = format!("{}@sigma={noise}", row.metric);
            }
        }
        rows.extend(noisy_rows);
    }

    // Fixed-initial-condition rollout of the last tank's volume, as a curve.
    let system = tank_benchmark_system();
    let x0 = vec![-1.0, -1.0, 0.0, 0.5, -1.0, 1.0, 1.0, -0.5, -1.0];
    let dt = 1.0 / 100.0;
    let (times, states) = system
        .simulate(&x0, 0.0, 101, dt, 20)
        .map_err(|e| anyhow!("{e}"))?;
    let curve: Vec<Vec<f64>> =
        times.iter().zip(&states).map(|(t, x)| vec![*t, x[8]]).collect();
    out.curve("tank-integrators-exact-mu4", &["t", "mu_4"], &curve)?;
    Ok(rows)
}

fn run_tank_datasize(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = tank_benchmark_system();
    let dt = 1.0 / 100.0;
    let seed = spec.base_seed;
    let sizes: Vec<usize> = match spec.scale {
        Scale::Smoke => vec![505],
        Scale::Desk => vec![1000, 10_000],
        Scale::Paper => vec![100, 250, 500, 1000, 2500, 5000, 10_000, 20_000],
    };
    let test = test_set(&system, TANK_TEST_TRAJ, TANK_LENGTH, dt, seed_from(seed, "tank/test"))?;
    let validation =
        training_set(&system, 500, TANK_LENGTH, dt, 0.0, seed_from(seed, "tank/val"))?;
    let mut rows = Vec::new();
    for size in sizes {
        let train_ds = training_set(
            &system,
            size,
            TANK_LENGTH,
            dt,
            0.0,
            seed_from(seed, &format!("tank/train/{size}")),
        )?;
        for kind in [ModelKind::Phnn, ModelKind::Baseline1] {
            let descriptor = descriptor_for(kind, &system);
            let cfg = tank_train_config(spec.scale.epochs(20_000), Discretization::Midpoint);
            let jobs = run_jobs(
                spec,
                &format!("{}/{size}", kind.name()),
                &descriptor,
                &train_ds,
                Some(&validation),
                &test,
                &cfg,
                spec.replicates(),
            )?;
            for job in &jobs {
                rows.extend(metric_rows(spec, kind.name(), size, job));
            }
        }
    }
    let _ = out;
    Ok(rows)
}

/// State labels for the tank network, pipes then tanks.
fn tank_state_labels(tank: &TankNetworkSpec) -> Vec<String> {
    let mut labels: Vec<String> = (1..=tank.n_pipes()).map(|i| format!("phi_{i}")).collect();
    labels.extend((1..=tank.n_tanks).map(|i| format!("mu_{i}")));
    labels
}

fn run_tank_hamiltonian(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let system = tank_benchmark_system();
    let tank = match &system {
        SystemSpec::TankNetwork(t) => t.clone(),
        SystemSpec::MassSpring(_) => unreachable!("tank experiment"),
    };
    let dt = 1.0 / 100.0;
    let seed = spec.base_seed;
    let test = test_set(&system, TANK_TEST_TRAJ, TANK_LENGTH, dt, seed_from(seed, "tank/test"))?;
    let train_ds = training_set(
        &system,
        10_000,
        TANK_LENGTH,
        dt,
        0.0,
        seed_from(seed, "tank/train/10000"),
    )?;
    let descriptor = descriptor_for(ModelKind::Phnn, &system);
    let cfg = tank_train_config(spec.scale.epochs(20_000), Discretization::Midpoint);
    let jobs = run_jobs(
        spec,
        ModelKind::Phnn.name(),
        &descriptor,
        &train_ds,
        None,
        &test,
        &cfg,
        spec.replicates(),
    )?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (k, job) in jobs.iter().enumerate() {
        rows.extend(metric_rows(spec, ModelKind::Phnn.name(), 10_000, job));
        let score = job.metrics.grad_h_mse.unwrap_or(f64::INFINITY);
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, k));
        }
    }
    let (_, best_idx) = best.ok_or_else(|| anyhow!("no replicate trained"))?;
    let best_model = &jobs[best_idx].model;

    let labels = tank_state_labels(&tank);
    let dim = system.dim();
    let planes: Vec<(usize, usize)> = match spec.scale {
        // The published figure shows every plane; the desk default keeps the
        // four discussed in the text.
        Scale::Paper => {
            (0..dim).flat_map(|i| (i + 1..dim).map(move |j| (i, j))).collect()
        }
        _ => vec![(3, 4), (5, 6), (0, 1), (0, 5)],
    };
    let n = if spec.scale == Scale::Smoke { 11 } else { CONTOUR_N };
    let range = (-1.0, 1.0);
    let exact_model = DynModel::PseudoHamiltonian(system.planted_model());
    for (i, j) in planes {
        let exact = model_contour(&exact_model, (i, j), range, n)?;
        let learned = model_contour(best_model, (i, j), range, n)?;
        let tag = format!("{}-{}", labels[i], labels[j]);
        out.curve(
            &format!("tank-hamiltonian-exact-{tag}"),
            &[&labels[i], &labels[j], "h"],
            &exact,
        )?;
        out.curve(
            &format!("tank-hamiltonian-learned-{tag}"),
            &[&labels[i], &labels[j], "h"],
            &learned,
        )?;
        rows.push(ResultRow {
            experiment: spec.id.name().to_string(),
            model: ModelKind::Phnn.name().to_string(),
            dataset_size: 10_000,
            replicate: jobs[best_idx].replicate,
            metric: format!("h_grid_rmse@{tag}"),
            value: grid_rmse(&learned, &exact),
            config_hash: jobs[best_idx].hash.clone(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Leak identification
// ---------------------------------------------------------------------------

/// A PHNN descriptor whose force network watches the given tanks.
pub fn leak_descriptor(system: &SystemSpec, tanks: &[usize]) -> Result<ModelDescriptor> {
    let tank = match system {
        SystemSpec::TankNetwork(t) => t,
        SystemSpec::MassSpring(_) => bail!("leak models are tank models"),
    };
    let mask = tanks.iter().map(|&t| tank.tank_state_index(t)).collect();
    Ok(ModelDescriptor::PseudoHamiltonian {
        dim: system.dim(),
        structure: system.structure_matrix().entries().to_vec(),
        damping_indices: system.damping_indices(),
        hidden: HIDDEN,
        force: Some(ForceConfig { input: ForceInput::StateOnly, mask, hidden: HIDDEN }),
    })
}

/// Sweep one tank's level and report the model's force on that tank,
/// all other states zero.
pub fn leak_curve(
    model: &PhModel,
    tank: &TankNetworkSpec,
    tank_index: usize,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let state_index = tank.tank_state_index(tank_index);
    let mut out = Vec::with_capacity(grid.len());
    for &mu in grid {
        let mut x = vec![0.0; tank.dim()];
        x[state_index] = mu;
        let f = model.force_eval(&x, 0.0).map_err(|e| anyhow!("{e}"))?;
        out.push(f[state_index]);
    }
    Ok(out)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1).max(1) as f64).collect()
}

/// Outcome of the leak-identification scenarios used by the acceptance gate.
pub struct LeakStudy {
    /// Force mask over all tanks, L1-regularized.
    pub unknown_model: DynModel,
    /// Force mask pinned to the true leak location.
    pub known_model: DynModel,
    /// Same architecture trained on leak-free data at the same budget.
    pub twin_model: DynModel,
    /// max |f̂ᵢ| over tanks 1–3 relative to the tank-4 magnitude.
    pub spurious_ratio: f64,
    /// max |f̂₄(μ) − f_leak(μ)| over μ ∈ [−0.5, 0.5], known mask.
    pub known_max_abs_err: f64,
    /// Rollout MSE of the known-mask model, force removed, on the leak-free
    /// plant, against the twin's MSE on the same test set.
    pub removal_mse: f64,
    pub twin_mse: f64,
    pub rows: Vec<ResultRow>,
}

/// The leak under study: `-30·clamp(μ₄, ±0.3)` on the fourth tank.
pub const STUDY_LEAK: (usize, f64) = (3, 30.0);

/// Epoch budgets for the two leak scenarios. The unknown-mask run needs
/// enough epochs for the λ schedule to zero out the spurious tanks; the
/// known-mask run converges within tens of epochs.
#[derive(Debug, Clone, Copy)]
pub struct LeakBudget {
    pub unknown_epochs: usize,
    pub known_epochs: usize,
}

impl LeakBudget {
    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Smoke => LeakBudget { unknown_epochs: 4, known_epochs: 2 },
            Scale::Desk => LeakBudget { unknown_epochs: 60, known_epochs: 30 },
            Scale::Paper => LeakBudget { unknown_epochs: 600, known_epochs: 30 },
        }
    }
}

pub fn tank_leak_study(
    spec: &ExperimentSpec,
    budget: LeakBudget,
    out: Option<&OutputSink>,
) -> Result<LeakStudy> {
    let leaky = tank_system(&[STUDY_LEAK]);
    let leak_free = tank_system(&[]);
    let tank = match &leaky {
        SystemSpec::TankNetwork(t) => t.clone(),
        SystemSpec::MassSpring(_) => unreachable!("tank experiment"),
    };
    let seed = spec.base_seed;
    let dt = 1.0 / 400.0;
    // 300 trajectories of length 1 at dt = 1/400.
    let n_samples = match spec.scale {
        Scale::Smoke => 3 * points_per_trajectory(TANK_LENGTH, dt),
        _ => 300 * points_per_trajectory(TANK_LENGTH, dt),
    };
    let train_leaky = training_set(
        &leaky,
        n_samples,
        TANK_LENGTH,
        dt,
        0.0,
        seed_from(seed, "leak/train"),
    )?;
    let train_free = training_set(
        &leak_free,
        n_samples,
        TANK_LENGTH,
        dt,
        0.0,
        seed_from(seed, "leak/train-free"),
    )?;
    let test_leaky =
        test_set(&leaky, TANK_TEST_TRAJ, TANK_LENGTH, dt, seed_from(seed, "leak/test"))?;
    let test_free = test_set(
        &leak_free,
        TANK_TEST_TRAJ,
        TANK_LENGTH,
        dt,
        seed_from(seed, "leak/test-free"),
    )?;

    // Scenario: leak location unknown — watch every tank, L1-regularize.
    let unknown_epochs = budget.unknown_epochs;
    let quarter = (unknown_epochs / 4).max(1);
    let mut cfg_unknown = tank_train_config(unknown_epochs, Discretization::Midpoint);
    cfg_unknown.lambda = LambdaSchedule::new(vec![
        (0, 0.3),
        (quarter, 0.1),
        (2 * quarter, 0.03),
        (3 * quarter, 0.01),
    ])
    .map_err(|e| anyhow!("{e}"))?;
    let all_tanks: Vec<usize> = (0..tank.n_tanks).collect();
    let unknown_jobs = run_jobs(
        spec,
        "phnn-leak-unknown",
        &leak_descriptor(&leaky, &all_tanks)?,
        &train_leaky,
        None,
        &test_leaky,
        &cfg_unknown,
        1,
    )?;
    let unknown = unknown_jobs.into_iter().next().expect("one replicate");

    // Scenario: leak known to sit in tank 4 — no regularization, few epochs.
    let cfg_known = tank_train_config(budget.known_epochs, Discretization::Midpoint);
    let known_jobs = run_jobs(
        spec,
        "phnn-leak-known",
        &leak_descriptor(&leaky, &[STUDY_LEAK.0])?,
        &train_leaky,
        None,
        &test_leaky,
        &cfg_known,
        1,
    )?;
    let known = known_jobs.into_iter().next().expect("one replicate");

    // Twin: the same known-mask architecture trained on leak-free data.
    let twin_jobs = run_jobs(
        spec,
        "phnn-leak-twin",
        &leak_descriptor(&leak_free, &[STUDY_LEAK.0])?,
        &train_free,
        None,
        &test_free,
        &cfg_known,
        1,
    )?;
    let twin = twin_jobs.into_iter().next().expect("one replicate");

    // Learned force curves over the level grid.
    let grid = linspace(-0.5, 0.5, 201);
    let leak = LeakForce { tank: STUDY_LEAK.0, coefficient: STUDY_LEAK.1, saturation: 0.3 };
    let true_curve: Vec<f64> = grid.iter().map(|&mu| leak.value(mu)).collect();
    let unknown_ph = unknown.model.as_pseudo_hamiltonian().expect("phnn");
    let known_ph = known.model.as_pseudo_hamiltonian().expect("phnn");

    let mut tank_curves = Vec::new();
    for t in 0..tank.n_tanks {
        tank_curves.push(leak_curve(unknown_ph, &tank, t, &grid)?);
    }
    let known_curve = leak_curve(known_ph, &tank, STUDY_LEAK.0, &grid)?;

    let magnitude = |curve: &[f64]| curve.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tank4_mag = magnitude(&tank_curves[STUDY_LEAK.0]);
    let spurious_ratio = (0..tank.n_tanks)
        .filter(|&t| t != STUDY_LEAK.0)
        .map(|t| magnitude(&tank_curves[t]))
        .fold(0.0f64, f64::max)
        / tank4_mag;
    let known_max_abs_err = known_curve
        .iter()
        .zip(&true_curve)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // After stopping the leak, drop the force network and predict the
    // leak-free plant; compare to the twin trained directly on it.
    let removed = known_ph.replace_force(ForceTerm::None).map_err(|e| anyhow!("{e}"))?;
    let removal_metrics = evaluate(
        &DynModel::PseudoHamiltonian(removed),
        &leak_free,
        &test_free,
        RolloutSolver::Rk4Explicit,
    )
    .map_err(|e| anyhow!("{e}"))?;
    let removal_mse = removal_metrics.trajectory_mse;
    let twin_mse = twin.metrics.trajectory_mse;

    let mut rows = Vec::new();
    rows.extend(metric_rows(spec, "phnn-leak-unknown", n_samples, &unknown));
    rows.extend(metric_rows(spec, "phnn-leak-known", n_samples, &known));
    rows.extend(metric_rows(spec, "phnn-leak-twin", n_samples, &twin));
    for (metric, value, job) in [
        ("spurious_leak_ratio", spurious_ratio, &unknown),
        ("leak_max_abs_err", known_max_abs_err, &known),
        ("removal_rollout_mse", removal_mse, &known),
        ("twin_rollout_mse", twin_mse, &twin),
    ] {
        rows.push(ResultRow {
            experiment: spec.id.name().to_string(),
            model: "phnn-leak".to_string(),
            dataset_size: n_samples,
            replicate: 0,
            metric: metric.to_string(),
            value,
            config_hash: job.hash.clone(),
        });
    }

    if let Some(out) = out {
        let mut curve = Vec::with_capacity(grid.len());
        for (k, mu) in grid.iter().enumerate() {
            curve.push(vec![
                *mu,
                true_curve[k],
                tank_curves[0][k],
                tank_curves[1][k],
                tank_curves[2][k],
                tank_curves[3][k],
                known_curve[k],
            ]);
        }
        out.curve(
            "tank-leak-curves",
            &["mu", "f_true", "f1_unknown", "f2_unknown", "f3_unknown", "f4_unknown", "f4_known"],
            &curve,
        )?;
    }

    Ok(LeakStudy {
        unknown_model: unknown.model,
        known_model: known.model,
        twin_model: twin.model,
        spurious_ratio,
        known_max_abs_err,
        removal_mse,
        twin_mse,
        rows,
    })
}

/// Noisy and two-leak scenarios, run at paper scale only.
fn tank_leak_extra_scenarios(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let seed = spec.base_seed;
    let dt = 1.0 / 100.0;
    let n_samples = 1000 * points_per_trajectory(TANK_LENGTH, dt);
    let mut rows = Vec::new();
    let scenarios: [(&str, Vec<(usize, f64)>); 2] =
        [("one-leak", vec![STUDY_LEAK]), ("two-leaks", vec![(0, 10.0), STUDY_LEAK])];
    for (tag, leaks) in scenarios {
        let system = tank_system(&leaks);
        let tank = match &system {
            SystemSpec::TankNetwork(t) => t.clone(),
            SystemSpec::MassSpring(_) => unreachable!("tank experiment"),
        };
        let train_ds = training_set(
            &system,
            n_samples,
            TANK_LENGTH,
            dt,
            0.01,
            seed_from(seed, &format!("leak/noisy-train/{tag}")),
        )?;
        let test = test_set(
            &system,
            TANK_TEST_TRAJ,
            TANK_LENGTH,
            dt,
            seed_from(seed, &format!("leak/noisy-test/{tag}")),
        )?;
        let epochs = spec.scale.epochs(2000);
        let quarter = (epochs / 4).max(1);
        let lambda = LambdaSchedule::new(vec![
            (0, 0.3),
            (quarter, 0.1),
            (2 * quarter, 0.03),
            (3 * quarter, 0.01),
        ])
        .map_err(|e| anyhow!("{e}"))?;
        let known_tanks: Vec<usize> = leaks.iter().map(|&(t, _)| t).collect();
        let all_tanks: Vec<usize> = (0..tank.n_tanks).collect();
        for (mask_tag, tanks, with_reg) in
            [("unknown", &all_tanks, true), ("known", &known_tanks, false)]
        {
            let mut cfg = tank_train_config(epochs, Discretization::Srk4);
            if with_reg {
                cfg.lambda = lambda.clone();
            }
            let label = format!("phnn-leak-{tag}-{mask_tag}-noisy");
            let jobs = run_jobs(
                spec,
                &label,
                &leak_descriptor(&system, tanks)?,
                &train_ds,
                None,
                &test,
                &cfg,
                1,
            )?;
            let job = jobs.into_iter().next().expect("one replicate");
            rows.extend(metric_rows(spec, &label, n_samples, &job));
            let ph = job.model.as_pseudo_hamiltonian().expect("phnn");
            let grid = linspace(-0.5, 0.5, 201);
            let mut curve_cols: Vec<Vec<f64>> = vec![grid.clone()];
            let mut names = vec!["mu".to_string()];
            for &t in tanks {
                curve_cols.push(leak_curve(ph, &tank, t, &grid)?);
                names.push(format!("f{}_learned", t + 1));
            }
            let rows_curve: Vec<Vec<f64>> = (0..grid.len())
                .map(|k| curve_cols.iter().map(|col| col[k]).collect())
                .collect();
            let cols: Vec<&str> = names.iter().map(String::as_str).collect();
            out.curve(&format!("tank-leak-{tag}-{mask_tag}-noisy"), &cols, &rows_curve)?;
        }
    }
    Ok(rows)
}

fn run_tank_leak(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    let study = tank_leak_study(spec, LeakBudget::for_scale(spec.scale), Some(out))?;
    let mut rows = study.rows;
    if spec.scale == Scale::Paper {
        rows.extend(tank_leak_extra_scenarios(spec, out)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Control
// ---------------------------------------------------------------------------

/// Closed-loop demonstration: drive the tank levels to a reachable reference
/// through a bounded inflow on the first tank, planning on `model`.
pub fn mpc_demo(
    plant: &SystemSpec,
    model: &DynModel,
    mu_ref: Vec<f64>,
    t_end: f64,
) -> Result<(ControlSpec, ControlTrace)> {
    let tank = match plant {
        SystemSpec::TankNetwork(t) => t,
        SystemSpec::MassSpring(_) => bail!("the control demo drives the tank network"),
    };
    let spec = ControlSpec::for_tank_network(tank, mu_ref).map_err(|e| anyhow!("{e}"))?;
    // The published closed-loop figure starts from the stated trajectory
    // initial condition.
    let x0 = vec![-1.0, -1.0, 0.0, 0.5, -1.0, 1.0, 1.0, -0.5, -1.0];
    let trace = run_closed_loop(plant, model, &spec, &x0, t_end).map_err(|e| anyhow!("{e}"))?;
    Ok((spec, trace))
}

fn run_tank_mpc(spec: &ExperimentSpec, out: &OutputSink) -> Result<Vec<ResultRow>> {
    // Reproduction scenario: the plant is the leak-free network and the
    // controller plans on the exact model; the reference is an equilibrium.
    let plant = tank_system(&[]);
    let model = DynModel::PseudoHamiltonian(plant.planted_model());
    let t_end = match spec.scale {
        Scale::Smoke => 0.2,
        _ => 10.0,
    };
    let mu_ref = vec![0.5; 4];
    let (control, trace) = mpc_demo(&plant, &model, mu_ref.clone(), t_end)?;
    out.trace("tank-mpc-trace", &trace)?;

    let hash = config_hash(&(spec.id.name(), spec.scale.name(), &control, t_end));
    let final_state = trace.plant_states.last().expect("nonempty trace");
    let terminal_err = (0..4)
        .map(|k| (final_state[5 + k] - mu_ref[k]).abs())
        .fold(0.0f64, f64::max);
    let mut rows = vec![ResultRow {
        experiment: spec.id.name().to_string(),
        model: "planted".to_string(),
        dataset_size: 0,
        replicate: 0,
        metric: "terminal_level_error".to_string(),
        value: terminal_err,
        config_hash: hash.clone(),
    }];
    rows.push(ResultRow {
        experiment: spec.id.name().to_string(),
        model: "planted".to_string(),
        dataset_size: 0,
        replicate: 0,
        metric: "final_stage_cost".to_string(),
        value: *trace.stage_cost.last().expect("nonempty"),
        config_hash: hash,
    });

    // At paper scale, also control the leaky plant through a learned model,
    // mirroring the published setup (trained on 1000 samples with the leak).
    if spec.scale == Scale::Paper {
        let leaky = tank_benchmark_system();
        let dt = 1.0 / 100.0;
        let train_ds = training_set(
            &leaky,
            1000,
            TANK_LENGTH,
            dt,
            0.0,
            seed_from(spec.base_seed, "mpc/train"),
        )?;
        let test = test_set(
            &leaky,
            TANK_TEST_TRAJ,
            TANK_LENGTH,
            dt,
            seed_from(spec.base_seed, "mpc/test"),
        )?;
        let cfg = tank_train_config(2000, Discretization::Srk4);
        let jobs = run_jobs(
            spec,
            "phnn-mpc",
            &leak_descriptor(&leaky, &[STUDY_LEAK.0])?,
            &train_ds,
            None,
            &test,
            &cfg,
            1,
        )?;
        let job = jobs.into_iter().next().expect("one replicate");
        rows.extend(metric_rows(spec, "phnn-mpc", 1000, &job));
        // The leak drains hard at high levels, so reference the fourth tank
        // inside the inflow budget.
        let mu_ref = vec![0.3, 0.3, 0.3, 0.05];
        let (_, trace) = mpc_demo(&leaky, &job.model, mu_ref.clone(), t_end)?;
        out.trace("tank-mpc-trace-learned", &trace)?;
        let final_state = trace.plant_states.last().expect("nonempty trace");
        let terminal_err = (0..4)
            .map(|k| (final_state[5 + k] - mu_ref[k]).abs())
            .fold(0.0f64, f64::max);
        rows.push(ResultRow {
            experiment: spec.id.name().to_string(),
            model: "phnn-mpc".to_string(),
            dataset_size: 1000,
            replicate: 0,
            metric: "terminal_level_error".to_string(),
            value: terminal_err,
            config_hash: job.hash.clone(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Output plumbing and the top-level runner
// ---------------------------------------------------------------------------

/// Where an experiment's artifacts land.
pub struct OutputSink {
    curves_dir: PathBuf,
}

impl OutputSink {
    fn new(out_dir: &Path) -> Result<Self> {
        let curves_dir = out_dir.join("curves");
        std::fs::create_dir_all(&curves_dir)
            .with_context(|| format!("creating {}", curves_dir.display()))?;
        Ok(OutputSink { curves_dir })
    }

    fn curve(&self, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        io::write_table(&self.curves_dir.join(format!("{name}.csv")), columns, rows)
    }

    fn trace(&self, name: &str, trace: &ControlTrace) -> Result<()> {
        io::write_trace(&self.curves_dir.join(format!("{name}.csv")), trace)
    }
}

/// Replicate summary statistics for the report.
#[derive(Debug, Serialize)]
struct MetricSummary {
    model: String,
    dataset_size: usize,
    metric: String,
    mean: f64,
    std: f64,
    n: usize,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    experiment: &'a str,
    scale: &'a str,
    replicates: usize,
    base_seed: u64,
    rows: usize,
    summaries: Vec<MetricSummary>,
}

fn summarize(rows: &[ResultRow]) -> Vec<MetricSummary> {
    let mut groups: Vec<((String, usize, String), Vec<f64>)> = Vec::new();
    for row in rows {
        let key = (row.model.clone(), row.dataset_size, row.metric.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, values)) => values.push(row.value),
            None => groups.push((key, vec![row.value])),
        }
    }
    groups
        .into_iter()
        .map(|((model, dataset_size, metric), values)| {
            let (mean, std) = mean_std(&values);
            MetricSummary { model, dataset_size, metric, mean, std, n: values.len() }
        })
        .collect()
}

/// Run one experiment end to end, writing `results.csv`, `curves/*.csv`, and
/// `report.json` into `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<Vec<ResultRow>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let sink = OutputSink::new(out_dir)?;
    let rows = match spec.id {
        ExperimentId::MsdDatasize => run_msd_datasize(spec, &sink)?,
        ExperimentId::MsdTrajectory => run_msd_trajectory(spec, &sink)?,
        ExperimentId::MsdHamiltonian => run_msd_hamiltonian(spec, &sink)?,
        ExperimentId::MsdDamping => run_msd_damping(spec, &sink)?,
        ExperimentId::MsdForce => run_msd_force(spec, &sink)?,
        ExperimentId::MsdFreq => run_msd_freq(spec, &sink)?,
        ExperimentId::TankIntegrators => run_tank_integrators(spec, &sink)?,
        ExperimentId::TankDatasize => run_tank_datasize(spec, &sink)?,
        ExperimentId::TankHamiltonian => run_tank_hamiltonian(spec, &sink)?,
        ExperimentId::TankLeak => run_tank_leak(spec, &sink)?,
        ExperimentId::TankMpc => run_tank_mpc(spec, &sink)?,
    };

    let results_path = out_dir.join("results.csv");
    let file = std::fs::File::create(&results_path)
        .with_context(|| format!("creating {}", results_path.display()))?;
    let mut csv = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in &rows {
        csv.serialize(row)?;
    }
    csv.flush()?;

    let report = Report {
        experiment: spec.id.name(),
        scale: spec.scale.name(),
        replicates: spec.replicates(),
        base_seed: spec.base_seed,
        rows: rows.len(),
        summaries: summarize(&rows),
    };
    io::write_json(&out_dir.join("report.json"), &report)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_ids_round_trip_through_names() {
        for id in ExperimentId::ALL {
            let parsed: ExperimentId = id.name().parse().unwrap();
            assert_eq!(parsed, id);
        }
        assert!("tank-nonsense".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn job_seeds_differ_by_label_and_agree_by_construction() {
        let a = seed_from(0, "msd/train/0");
        let b = seed_from(0, "msd/train/1");
        let c = seed_from(1, "msd/train/0");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, seed_from(0, "msd/train/0"));
    }

    #[test]
    fn planted_oscillator_contour_matches_closed_form() {
        let system = msd_system();
        let model = DynModel::PseudoHamiltonian(system.planted_model());
        let grid = model_contour(&model, (0, 1), (-2.0, 2.0), 9).unwrap();
        for row in &grid {
            let (q, p, h) = (row[0], row[1], row[2]);
            assert!((h - 0.5 * (q * q + p * p)).abs() <= 1e-12, "H({q},{p}) = {h}");
        }
    }

    #[test]
    fn empty_grid_produces_no_rows() {
        let grid = contour_grid(&|_| Ok(0.0), 3, (0, 1), (-1.0, 1.0), 0).unwrap();
        assert!(grid.is_empty());
    }

    #[test]
    fn exact_tank_hamiltonian_is_even_in_each_state() {
        let system = tank_benchmark_system();
        let model = DynModel::PseudoHamiltonian(system.planted_model());
        let ph = model.as_pseudo_hamiltonian().unwrap();
        let dim = system.dim();
        let base = vec![0.3; dim];
        let h0 = ph.adjusted_hamiltonian(&base).unwrap();
        for i in 0..dim {
            let mut flipped = base.clone();
            flipped[i] = -flipped[i];
            // Each state enters the quadratic energy through its square.
            let h1 = ph.adjusted_hamiltonian(&flipped).unwrap();
            assert!((h0 - h1).abs() <= 1e-13, "state {i}: {h0} vs {h1}");
        }
    }

    #[test]
    fn contour_rejects_degenerate_planes() {
        assert!(contour_grid(&|_| Ok(0.0), 3, (1, 1), (-1.0, 1.0), 4).is_err());
        assert!(contour_grid(&|_| Ok(0.0), 3, (0, 3), (-1.0, 1.0), 4).is_err());
    }

    #[test]
    fn summaries_group_by_model_size_and_metric() {
        let row = |model: &str, metric: &str, value: f64, replicate: usize| ResultRow {
            experiment: "x".into(),
            model: model.into(),
            dataset_size: 10,
            replicate,
            metric: metric.into(),
            value,
            config_hash: "h".into(),
        };
        let rows = vec![
            row("a", "m", 1.0, 0),
            row("a", "m", 3.0, 1),
            row("b", "m", 5.0, 0),
        ];
        let summaries = summarize(&rows);
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].n, 2);
        assert!((summaries[0].mean - 2.0).abs() < 1e-15);
        assert!((summaries[0].std - 1.0).abs() < 1e-15);
        assert_eq!(summaries[1].n, 1);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = config_hash(&("x", 1));
        let b = config_hash(&("x", 2));
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&("x", 1)));
    }
}
