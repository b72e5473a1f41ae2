//! Model-type presets, the rayon-backed gradient runner, and a timed
//! training entry point shared by the CLI and the experiment drivers.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use serde::{Deserialize, Serialize};

use phlab_core::dataset::TrajectoryDataset;
use phlab_core::model::{DynModel, ForceConfig, ForceInput, ModelDescriptor};
use phlab_core::system::SystemSpec;
use phlab_core::train::{self, ChunkResult, ChunkRunner, TrainConfig, TrainRecord};

/// The four model families of the benchmark study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Pseudo-Hamiltonian network with a force network on the default mask,
    /// taking state (and time, where the system is driven) as input.
    Phnn,
    /// Pseudo-Hamiltonian network whose force network sees time only.
    PhnnFt,
    /// One-network baseline `ĝ(x, t)`.
    Baseline1,
    /// Two-network baseline `ĝ₁(x) + ĝ₂(t)`.
    Baseline2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::Phnn, ModelKind::PhnnFt, ModelKind::Baseline1, ModelKind::Baseline2];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Phnn => "phnn",
            ModelKind::PhnnFt => "phnn-ft",
            ModelKind::Baseline1 => "baseline1",
            ModelKind::Baseline2 => "baseline2",
        }
    }
}

impl FromStr for ModelKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phnn" => Ok(ModelKind::Phnn),
            "phnn-ft" => Ok(ModelKind::PhnnFt),
            "baseline1" => Ok(ModelKind::Baseline1),
            "baseline2" => Ok(ModelKind::Baseline2),
            other => bail!(
                "unknown model kind `{other}` (expected phnn, phnn-ft, baseline1 or baseline2)"
            ),
        }
    }
}

/// Hidden width of Hamiltonian and force networks.
pub const HIDDEN: usize = 100;
/// Hidden width of the one-network baseline, sized so its parameter count is
/// comparable to the two-network models it competes with.
pub const HIDDEN_SINGLE: usize = 150;

/// The default force mask for a system: where external forces may act.
///
/// For the mass-spring benchmark the force drives the momentum; for the tank
/// network it acts on the last tank's volume.
pub fn default_force_mask(system: &SystemSpec) -> Vec<usize> {
    match system {
        SystemSpec::MassSpring(_) => vec![1],
        SystemSpec::TankNetwork(tank) => vec![tank.tank_state_index(tank.n_tanks - 1)],
    }
}

/// Build the model descriptor a CLI model name denotes for `system`.
pub fn descriptor_for(kind: ModelKind, system: &SystemSpec) -> ModelDescriptor {
    let dim = system.dim();
    match kind {
        ModelKind::Phnn | ModelKind::PhnnFt => {
            let input = match (kind, system) {
                (ModelKind::PhnnFt, _) => ForceInput::TimeOnly,
                // The tank network's external forces are state-dependent and
                // autonomous; the mass-spring system is driven.
                (_, SystemSpec::MassSpring(_)) => ForceInput::StateAndTime,
                (_, SystemSpec::TankNetwork(_)) => ForceInput::StateOnly,
            };
            ModelDescriptor::PseudoHamiltonian {
                dim,
                structure: system.structure_matrix().entries().to_vec(),
                damping_indices: system.damping_indices(),
                hidden: HIDDEN,
                force: Some(ForceConfig { input, mask: default_force_mask(system), hidden: HIDDEN }),
            }
        }
        ModelKind::Baseline1 => ModelDescriptor::BaselineSingle {
            dim,
            hidden: HIDDEN_SINGLE,
            // Time as input only pays off on driven systems.
            include_time: matches!(system, SystemSpec::MassSpring(_)),
        },
        ModelKind::Baseline2 => ModelDescriptor::BaselineSplit { dim, hidden: HIDDEN },
    }
}

/// A [`ChunkRunner`] that spreads gradient chunks over the rayon pool.
///
/// Chunk results come back in index order and are folded in that order, so
/// training output is bit-identical to [`train::SequentialRunner`].
#[derive(Debug, Clone, Copy, Default)]
pub struct RayonRunner;

impl ChunkRunner for RayonRunner {
    fn map_chunks(
        &self,
        n_chunks: usize,
        f: &(dyn Fn(usize) -> phlab_core::Result<ChunkResult> + Sync),
    ) -> phlab_core::Result<Vec<ChunkResult>> {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(f).collect()
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: Vec<TrainRecord>,
    pub wall_seconds: f64,
}

impl RunSummary {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.val_loss)
    }

    pub fn final_damping(&self) -> &[f64] {
        self.records.last().map_or(&[], |r| &r.damping)
    }
}

/// Initialize `model` from the config seed and train it on `dataset`,
/// spreading per-batch gradient work over the rayon pool.
pub fn run_training(
    model: &mut DynModel,
    dataset: &TrajectoryDataset,
    validation: Option<&TrajectoryDataset>,
    cfg: &TrainConfig,
) -> Result<RunSummary> {
    model.initialize(cfg.seed);
    let start = Instant::now();
    let records = train::train(model, dataset, validation, cfg, &RayonRunner)
        .map_err(|e| anyhow!("training failed: {e}"))?;
    Ok(RunSummary { records, wall_seconds: start.elapsed().as_secs_f64() })
}
