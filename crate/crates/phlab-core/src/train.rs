//! Mini-batch training of dynamics models on one-step residuals.
//!
//! The loss for a batch of sample pairs is
//!
//! ```text
//! mean over pairs of [ mean_i ((xⁿ⁺¹ − xⁿ)/Δt − Φ_Δt(ĝ, xⁿ, xⁿ⁺¹))ᵢ²
//!                      + (λ/d)·‖f̂(midpoint)‖₁ ]
//! ```
//!
//! where the regularization evaluates the raw force-network outputs at the
//! interval midpoint ((xⁿ+xⁿ⁺¹)/2, tⁿ+Δt/2). Both terms are divided by the
//! state dimension d, so λ weighs the penalty against the residual the same
//! way at every d and every dataset size. Gradients come from one reverse
//! sweep per pair; pairs are grouped into fixed-size chunks whose partial
//! gradients are summed in chunk order, so the result is bit-identical
//! whether chunks are evaluated sequentially or in parallel.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adam::{Adam, AdamState};
use crate::dataset::{SamplePair, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::integrator::{rollout, Discretization, RolloutSolver};
use crate::model::DynModel;
use crate::rng::{self, TAG_EVAL, TAG_SHUFFLE};
use crate::system::SystemSpec;
use crate::tape::{Gradients, Tape, TapeStorage, VarId};

/// Pairs per gradient chunk. Fixed so that the summation tree — and thus
/// the floating-point result — does not depend on how chunks are scheduled.
pub const GRAD_CHUNK: usize = 32;

/// Piecewise-constant regularization schedule: (start epoch, λ) entries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LambdaSchedule {
    entries: Vec<(usize, f64)>,
}

impl LambdaSchedule {
    /// λ fixed for the whole run.
    pub fn constant(lambda: f64) -> Self {
        LambdaSchedule {
            entries: vec![(0, lambda)],
        }
    }

    /// Entries must have non-decreasing epochs and non-negative λ. Before
    /// the first entry's epoch, λ = 0.
    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        for (i, &(epoch, lambda)) in entries.iter().enumerate() {
            if lambda < 0.0 || !lambda.is_finite() {
                return Err(Error::invalid("λ must be finite and non-negative"));
            }
            if i > 0 && entries[i - 1].0 > epoch {
                return Err(Error::invalid("schedule epochs must be non-decreasing"));
            }
        }
        Ok(LambdaSchedule { entries })
    }

    /// Parse `"0:0.3,150:0.1,300:0.03"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let Some((epoch, lambda)) = part.split_once(':') else {
                return Err(Error::invalid(alloc::format!(
                    "schedule entry {part:?} is not of the form epoch:lambda"
                )));
            };
            let epoch: usize = epoch
                .trim()
                .parse()
                .map_err(|_| Error::invalid(alloc::format!("bad epoch in {part:?}")))?;
            let lambda: f64 = lambda
                .trim()
                .parse()
                .map_err(|_| Error::invalid(alloc::format!("bad λ in {part:?}")))?;
            entries.push((epoch, lambda));
        }
        LambdaSchedule::new(entries)
    }

    pub fn value_at(&self, epoch: usize) -> f64 {
        let mut value = 0.0;
        for &(start, lambda) in &self.entries {
            if start <= epoch {
                value = lambda;
            } else {
                break;
            }
        }
        value
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub discretization: Discretization,
    pub lambda: LambdaSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, discretization: Discretization) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: 1e-3,
            discretization,
            lambda: LambdaSchedule::constant(0.0),
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean per-pair loss over the epoch, measured as the batches were seen.
    pub train_loss: f64,
    /// Full-batch validation loss at λ = 0, when a validation set is given.
    pub val_loss: Option<f64>,
    /// Learned damping coefficients after the epoch's updates.
    pub damping: Vec<f64>,
}

/// Loss and gradient contribution of one chunk of pairs (sums, not means).
pub struct ChunkResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Strategy for evaluating independent gradient chunks. Implementations
/// must return results indexed by chunk; the caller folds them in chunk
/// order, so any execution order produces identical output.
pub trait ChunkRunner: Sync {
    fn map_chunks(
        &self,
        n_chunks: usize,
        f: &(dyn Fn(usize) -> Result<ChunkResult> + Sync),
    ) -> Result<Vec<ChunkResult>>;
}

/// Evaluates chunks one after the other on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl ChunkRunner for SequentialRunner {
    fn map_chunks(
        &self,
        n_chunks: usize,
        f: &(dyn Fn(usize) -> Result<ChunkResult> + Sync),
    ) -> Result<Vec<ChunkResult>> {
        (0..n_chunks).map(f).collect()
    }
}

fn pair_loss_tape(
    model: &DynModel,
    pair: &SamplePair<'_>,
    disc: Discretization,
    lambda: f64,
    storage: TapeStorage,
    grads: &mut Gradients,
) -> (f64, TapeStorage) {
    let d = pair.xn.len();
    let mut tape = Tape::with_storage(model.params().values(), storage);
    let xn = tape.leaf(pair.xn);
    let xnp1 = tape.leaf(pair.xnp1);
    let mut g = |tape: &mut Tape<'_>, x: VarId, t: f64| model.eval_tape(tape, x, t);
    let r = disc.residual_tape(&mut tape, &mut g, xn, xnp1, pair.tn, pair.dt);
    let sq = tape.dot(r, r);
    let mut loss = tape.scale(sq, 1.0 / d as f64);
    if lambda > 0.0 {
        let mid: Vec<f64> = (0..d)
            .map(|i| 0.5 * (pair.xn[i] + pair.xnp1[i]))
            .collect();
        let tm = pair.tn + 0.5 * pair.dt;
        let mid_leaf = tape.leaf(&mid);
        if let Some(fout) = model.reg_output_tape(&mut tape, mid_leaf, tm) {
            let a = tape.abs(fout);
            let l1 = tape.sum_all(a);
            loss = tape.add_scaled(loss, l1, lambda / d as f64);
        }
    }
    let value = tape.value(loss)[0];
    tape.backward(loss, grads);
    (value, tape.into_storage())
}

/// Mean loss over `batch` and the gradient of that mean. The regularization
/// enters the full-dataset loss as (λ/N)·Σ‖f̂‖₁ over all N training pairs, so
/// a batch contributes λ times its own mean ℓ₁ norm — the dataset size
/// cancels out of the unbiased estimate. `n_total` states the full pair
/// count the batch was drawn from.
pub fn loss_and_grad(
    model: &DynModel,
    batch: &[SamplePair<'_>],
    disc: Discretization,
    lambda: f64,
    n_total: usize,
    runner: &dyn ChunkRunner,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    debug_assert!(n_total >= batch.len());
    let n_chunks = batch.len().div_ceil(GRAD_CHUNK);
    let results = runner.map_chunks(n_chunks, &|c| {
        let lo = c * GRAD_CHUNK;
        let hi = (lo + GRAD_CHUNK).min(batch.len());
        let mut grads = Gradients::zeros(model.params().len());
        let mut storage = TapeStorage::default();
        let mut loss = 0.0;
        for pair in &batch[lo..hi] {
            let (value, recycled) =
                pair_loss_tape(model, pair, disc, lambda, storage, &mut grads);
            loss += value;
            storage = recycled;
        }
        Ok(ChunkResult {
            loss,
            grad: grads.params,
        })
    })?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];
    for r in results {
        loss += r.loss;
        for (g, v) in grad.iter_mut().zip(&r.grad) {
            *g += v;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Mean loss over `pairs` without gradients (plain evaluation route).
pub fn loss_value(
    model: &DynModel,
    pairs: &[SamplePair<'_>],
    disc: Discretization,
    lambda: f64,
    n_total: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    debug_assert!(n_total >= pairs.len());
    let mut sum = 0.0;
    for pair in pairs {
        let d = pair.xn.len();
        let mut g = |x: &[f64], t: f64| model.eval(x, t);
        let r = disc.residual(&mut g, pair.xn, pair.xnp1, pair.tn, pair.dt)?;
        let mut v = r.iter().map(|x| x * x).sum::<f64>() / d as f64;
        if lambda > 0.0 {
            if let DynModel::PseudoHamiltonian(m) = model {
                let mid: Vec<f64> = (0..d)
                    .map(|i| 0.5 * (pair.xn[i] + pair.xnp1[i]))
                    .collect();
                v += lambda / d as f64 * m.force_l1(&mid, pair.tn + 0.5 * pair.dt)?;
            }
        }
        sum += v;
    }
    Ok(sum / pairs.len() as f64)
}

/// Shuffled mini-batch Adam over all pairs of `dataset` for `cfg.epochs`
/// epochs. Deterministic given the config seed; the validation loss, when a
/// validation set is supplied, is the full-batch λ=0 loss after each epoch.
pub fn train(
    model: &mut DynModel,
    dataset: &TrajectoryDataset,
    validation: Option<&TrajectoryDataset>,
    cfg: &TrainConfig,
    runner: &dyn ChunkRunner,
) -> Result<Vec<TrainRecord>> {
    let pairs = dataset.pairs();
    let n_total = pairs.len();
    if n_total == 0 {
        return Err(Error::invalid("dataset has no sample pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let val_pairs = validation.map(|v| v.pairs());
    let opt = Adam::with_learning_rate(cfg.learning_rate);
    let mut state = AdamState::new(model.params().len());
    let mut order: Vec<usize> = (0..n_total).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut batch_buf: Vec<SamplePair<'_>> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lambda = cfg.lambda.value_at(epoch);
        let mut shuffle_rng = rng::stream(cfg.seed, TAG_SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            batch_buf.clear();
            batch_buf.extend(batch_idx.iter().map(|&i| pairs[i]));
            let (loss, grad) =
                loss_and_grad(model, &batch_buf, cfg.discretization, lambda, n_total, runner)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * batch_idx.len() as f64;
            state.step(&opt, model.params_mut().values_mut(), &grad);
        }
        let val_loss = match &val_pairs {
            Some(vp) => Some(loss_value(model, vp, cfg.discretization, 0.0, vp.len())?),
            None => None,
        };
        records.push(TrainRecord {
            epoch,
            lambda,
            train_loss: epoch_loss / n_total as f64,
            val_loss,
            damping: model.damping_values(),
        });
    }
    Ok(records)
}

/// Prediction-quality metrics of a model against reference trajectories.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    /// Mean over non-diverged trajectories, times and components of the
    /// squared rollout error (NaN when every trajectory diverged).
    pub trajectory_mse: f64,
    pub n_diverged: usize,
    /// Per-trajectory MSE; None marks a diverged rollout.
    pub per_trajectory_mse: Vec<Option<f64>>,
    /// Mean squared error of ∇Ĥ against the exact gradient on a sampled
    /// state grid (pseudo-Hamiltonian models only).
    pub grad_h_mse: Option<f64>,
    /// Mean |ĉᵢ − cᵢ| over the learnable damping entries.
    pub damping_abs_error: Option<f64>,
    /// Mean |f̂ − f| after removing each side's mean, over a sampled grid
    /// (models with a trainable force only).
    pub adjusted_force_mae: Option<f64>,
}

/// Roll the model out from each test trajectory's initial state and score
/// it against the reference. Structural metrics (∇Ĥ, damping, force) are
/// measured against the exact `system` on a deterministic sample grid.
pub fn evaluate(
    model: &DynModel,
    system: &SystemSpec,
    test: &TrajectoryDataset,
    solver: RolloutSolver,
) -> Result<EvalMetrics> {
    if test.trajectories.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let dt = test.sample_dt();
    let mut per_traj = Vec::with_capacity(test.trajectories.len());
    let mut n_diverged = 0;
    let mut mse_sum = 0.0;
    for traj in &test.trajectories {
        let t0 = traj.times[0];
        let t1 = *traj.times.last().unwrap();
        let mut g = |x: &[f64], t: f64| model.eval(x, t);
        match rollout(&mut g, &traj.states[0], t0, t1, dt, solver) {
            Err(_) => {
                n_diverged += 1;
                per_traj.push(None);
            }
            Ok((_, predicted)) => {
                let mut sq = 0.0;
                let mut n = 0usize;
                for (a, b) in traj.states.iter().zip(&predicted) {
                    for (u, v) in a.iter().zip(b) {
                        sq += (u - v) * (u - v);
                        n += 1;
                    }
                }
                let mse = sq / n as f64;
                if mse.is_finite() {
                    mse_sum += mse;
                    per_traj.push(Some(mse));
                } else {
                    n_diverged += 1;
                    per_traj.push(None);
                }
            }
        }
    }
    let n_ok = per_traj.iter().filter(|m| m.is_some()).count();
    let trajectory_mse = if n_ok > 0 {
        mse_sum / n_ok as f64
    } else {
        f64::NAN
    };

    // Structural metrics on a deterministic grid of sampled states.
    let mut grid_rng = rng::stream(test.meta.spec.seed, TAG_EVAL, 0);
    let grid: Vec<Vec<f64>> = (0..200).map(|_| system.sample_initial(&mut grid_rng)).collect();
    let (grad_h_mse, damping_abs_error, adjusted_force_mae) = match model {
        DynModel::Baseline(_) => (None, None, None),
        DynModel::PseudoHamiltonian(m) => {
            let mut gh_sq = 0.0;
            let mut gh_n = 0usize;
            for x in &grid {
                let approx = m.grad_hamiltonian(x)?;
                let exact: Vec<f64> = system
                    .hamiltonian_coefficients()
                    .iter()
                    .zip(x)
                    .map(|(c, v)| c * v)
                    .collect();
                for (a, b) in approx.iter().zip(&exact) {
                    gh_sq += (a - b) * (a - b);
                    gh_n += 1;
                }
            }
            let damping_err = {
                let learned = m.damping_values();
                if learned.is_empty() {
                    None
                } else {
                    let truth = system.damping_coefficients();
                    Some(
                        learned
                            .iter()
                            .zip(&truth)
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>()
                            / learned.len() as f64,
                    )
                }
            };
            let force_mae = adjusted_force_error(m, system, &grid, test)?;
            (Some(gh_sq / gh_n as f64), damping_err, force_mae)
        }
    };
    Ok(EvalMetrics {
        trajectory_mse,
        n_diverged,
        per_trajectory_mse: per_traj,
        grad_h_mse,
        damping_abs_error,
        adjusted_force_mae,
    })
}

fn adjusted_force_error(
    model: &crate::model::PhModel,
    system: &SystemSpec,
    grid: &[Vec<f64>],
    test: &TrajectoryDataset,
) -> Result<Option<f64>> {
    use crate::model::ForceTerm;
    let ForceTerm::Network(_) = model.force() else {
        return Ok(None);
    };
    use rand::Rng;
    let mut t_rng = rng::stream(test.meta.spec.seed, TAG_EVAL, 1);
    let horizon = test.meta.spec.trajectory_length;
    let inputs: Vec<(Vec<f64>, f64)> = grid
        .iter()
        .map(|x| (x.clone(), t_rng.random_range(0.0..horizon)))
        .collect();
    let approx = model.adjusted_force(&inputs)?;
    // Exact force on the same mask, also mean-adjusted.
    let mask = match model.force() {
        ForceTerm::Network(f) => f.mask.clone(),
        _ => unreachable!(),
    };
    let mut exact: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for (x, t) in &inputs {
        let full = system.force_values(x, *t)?;
        exact.push(mask.iter().map(|&i| full[i]).collect());
    }
    let k = mask.len();
    let mut mean = vec![0.0; k];
    for e in &exact {
        for i in 0..k {
            mean[i] += e[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= exact.len() as f64;
    }
    let mut abs_sum = 0.0;
    let mut n = 0usize;
    for (a, e) in approx.iter().zip(&exact) {
        for i in 0..k {
            abs_sum += (a[i] - (e[i] - mean[i])).abs();
            n += 1;
        }
    }
    Ok(Some(abs_sum / n as f64))
}
