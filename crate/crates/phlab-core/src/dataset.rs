//! Trajectory datasets: generation from the exact systems, and the pairing
//! of consecutive samples into training units.
//!
//! A dataset is a list of trajectories sampled at a fixed interval, plus the
//! metadata needed to regenerate or audit it. Noise, when requested, is
//! added to the stored measurements only — the underlying simulation stays
//! exact. All randomness is drawn from per-trajectory streams keyed on
//! (seed, trajectory index), so generating trajectories in any order or in
//! parallel yields identical bytes.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, TAG_INITIAL_CONDITION, TAG_NOISE};
use crate::system::SystemSpec;

/// Internal RK4 substeps per sample interval used for ground-truth
/// simulation.
pub const SIM_SUBSTEPS: usize = 20;

/// Generation parameters for [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSpec {
    /// Total state-sample budget; the trajectory count is
    /// `n_samples / points_per_trajectory`, rounded down.
    pub n_samples: usize,
    /// Duration of each trajectory.
    pub trajectory_length: f64,
    /// Sampling interval.
    pub sample_dt: f64,
    /// Standard deviation of the measurement noise (0 = noise-free).
    pub noise_std: f64,
    pub seed: u64,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetMeta {
    pub system: SystemSpec,
    pub spec: DatasetSpec,
}

/// One sampled trajectory; `times[k]` goes with `states[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// One training unit: two consecutive samples of one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SamplePair<'a> {
    pub xn: &'a [f64],
    pub xnp1: &'a [f64],
    pub tn: f64,
    pub dt: f64,
}

/// A set of equally sampled trajectories plus its generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn dim(&self) -> usize {
        self.meta.system.dim()
    }

    pub fn sample_dt(&self) -> f64 {
        self.meta.spec.sample_dt
    }

    /// Total number of state samples.
    pub fn n_samples(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Total number of consecutive pairs.
    pub fn n_pairs(&self) -> usize {
        self.trajectories
            .iter()
            .map(|t| t.len().saturating_sub(1))
            .sum()
    }

    /// All consecutive sample pairs; pairs never straddle a trajectory
    /// boundary.
    pub fn pairs(&self) -> Vec<SamplePair<'_>> {
        let dt = self.sample_dt();
        let mut out = Vec::with_capacity(self.n_pairs());
        for traj in &self.trajectories {
            for k in 0..traj.len().saturating_sub(1) {
                out.push(SamplePair {
                    xn: &traj.states[k],
                    xnp1: &traj.states[k + 1],
                    tn: traj.times[k],
                    dt,
                });
            }
        }
        out
    }
}

/// Points per trajectory for a given duration and sampling interval
/// (both endpoints included).
pub fn points_per_trajectory(trajectory_length: f64, sample_dt: f64) -> usize {
    libm::round(trajectory_length / sample_dt) as usize + 1
}

/// Simulate as many whole trajectories as the sample budget allows, then
/// add measurement noise. Initial conditions follow the system's sampling
/// protocol; trajectories all start at t = 0.
pub fn build_dataset(system: &SystemSpec, spec: &DatasetSpec) -> Result<TrajectoryDataset> {
    if !(spec.sample_dt > 0.0) || !(spec.trajectory_length > 0.0) {
        return Err(Error::invalid("trajectory length and dt must be positive"));
    }
    if spec.noise_std < 0.0 {
        return Err(Error::invalid("noise std must be non-negative"));
    }
    let ppt = points_per_trajectory(spec.trajectory_length, spec.sample_dt);
    if ppt < 2 {
        return Err(Error::invalid("trajectories need at least two samples"));
    }
    let n_traj = spec.n_samples / ppt;
    if n_traj == 0 {
        return Err(Error::invalid(alloc::format!(
            "{} samples cannot fit one {ppt}-sample trajectory",
            spec.n_samples
        )));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for j in 0..n_traj {
        trajectories.push(generate_trajectory(system, spec, ppt, j as u64)?);
    }
    Ok(TrajectoryDataset {
        meta: DatasetMeta {
            system: system.clone(),
            spec: spec.clone(),
        },
        trajectories,
    })
}

/// Generate trajectory `index` of a dataset. Exposed so a parallel driver
/// can fan trajectories out and still produce the exact sequential result.
pub fn generate_trajectory(
    system: &SystemSpec,
    spec: &DatasetSpec,
    points: usize,
    index: u64,
) -> Result<Trajectory> {
    let mut ic_rng = rng::stream(spec.seed, TAG_INITIAL_CONDITION, index);
    let x0 = system.sample_initial(&mut ic_rng);
    let (times, mut states) =
        system.simulate(&x0, 0.0, points, spec.sample_dt, SIM_SUBSTEPS)?;
    if spec.noise_std > 0.0 {
        let mut noise_rng = rng::stream(spec.seed, TAG_NOISE, index);
        for state in states.iter_mut() {
            for v in state.iter_mut() {
                let z: f64 = noise_rng.sample(StandardNormal);
                *v += spec.noise_std * z;
            }
        }
    }
    Ok(Trajectory { times, states })
}
