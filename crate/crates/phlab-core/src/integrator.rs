//! Training-time discretizations and rollout solvers.
//!
//! A discretization maps `(g, xⁿ, xⁿ⁺¹, tⁿ, Δt)` to a derivative estimate
//! `Φ_Δt` so that training can fit `(xⁿ⁺¹ − xⁿ)/Δt ≈ Φ_Δt(g, xⁿ, xⁿ⁺¹)`.
//! All four schemes are explicit in the data: they evaluate `g` at affine
//! combinations of the two known samples and never solve an internal
//! nonlinear system (the mono-implicit property). Rollouts for prediction
//! are a separate concern and live in [`rollout`], where the implicit
//! midpoint variant does solve its per-step equation with Newton iteration.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};

/// √3/6, the stage offset of the symmetric fourth-order scheme.
const SRK4_C: f64 = 0.28867513459481287;

/// The four supported training discretizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Discretization {
    Euler,
    Rk4,
    Midpoint,
    Srk4,
}

impl Discretization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Discretization::Euler),
            "rk4" => Ok(Discretization::Rk4),
            "midpoint" => Ok(Discretization::Midpoint),
            "srk4" => Ok(Discretization::Srk4),
            _ => Err(Error::invalid(alloc::format!(
                "unknown integrator {s:?} (expected euler, rk4, midpoint or srk4)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Discretization::Euler => "euler",
            Discretization::Rk4 => "rk4",
            Discretization::Midpoint => "midpoint",
            Discretization::Srk4 => "srk4",
        }
    }

    /// Number of g-evaluations per Φ evaluation.
    pub fn eval_count(&self) -> usize {
        match self {
            Discretization::Euler | Discretization::Midpoint => 1,
            Discretization::Rk4 | Discretization::Srk4 => 4,
        }
    }

    /// Classical order of the scheme.
    pub fn order(&self) -> u32 {
        match self {
            Discretization::Euler => 1,
            Discretization::Midpoint => 2,
            Discretization::Rk4 => 4,
            Discretization::Srk4 => 4,
        }
    }

    /// Φ_Δt(g, xⁿ, xⁿ⁺¹) at time tⁿ. `dt` may be negative; that case arises
    /// in the symmetry identity Φ(g, a, b, t, dt) = Φ(g, b, a, t+dt, −dt).
    pub fn phi<G>(&self, g: &mut G, xn: &[f64], xnp1: &[f64], tn: f64, dt: f64) -> Result<Vec<f64>>
    where
        G: FnMut(&[f64], f64) -> Result<Vec<f64>>,
    {
        let d = xn.len();
        debug_assert_eq!(xnp1.len(), d);
        match self {
            Discretization::Euler => g(xn, tn),
            Discretization::Rk4 => {
                // Classic four-stage step taken from (xn, tn); xnp1 unused.
                let k1 = g(xn, tn)?;
                let half = 0.5 * dt;
                let mut stage = vec![0.0; d];
                for i in 0..d {
                    stage[i] = xn[i] + half * k1[i];
                }
                let k2 = g(&stage, tn + half)?;
                for i in 0..d {
                    stage[i] = xn[i] + half * k2[i];
                }
                let k3 = g(&stage, tn + half)?;
                for i in 0..d {
                    stage[i] = xn[i] + dt * k3[i];
                }
                let k4 = g(&stage, tn + dt)?;
                let mut out = vec![0.0; d];
                for i in 0..d {
                    out[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
                }
                Ok(out)
            }
            Discretization::Midpoint => {
                let mut mid = vec![0.0; d];
                for i in 0..d {
                    mid[i] = 0.5 * (xn[i] + xnp1[i]);
                }
                g(&mid, tn + 0.5 * dt)
            }
            Discretization::Srk4 => {
                // Time arguments use the same affine combinations as the
                // states, applied to (tn, tn + dt); this reduces to the
                // autonomous formula and keeps the scheme symmetric.
                let tnp1 = tn + dt;
                let (wp, wm) = (0.5 + SRK4_C, 0.5 - SRK4_C);
                // The backward-shifted outer stage approximates the early
                // collocation node, so its inner argument interpolates the
                // *late* node (weight wp on xⁿ⁺¹), and vice versa.
                let mut inner = vec![0.0; d];
                for i in 0..d {
                    inner[i] = wm * xn[i] + wp * xnp1[i];
                }
                let g1 = g(&inner, wm * tn + wp * tnp1)?;
                for i in 0..d {
                    inner[i] = wp * xn[i] + wm * xnp1[i];
                }
                let g2 = g(&inner, wp * tn + wm * tnp1)?;
                let tm = 0.5 * (tn + tnp1);
                let shift = SRK4_C * dt;
                let mut mid = vec![0.0; d];
                let mut outer = vec![0.0; d];
                for i in 0..d {
                    mid[i] = 0.5 * (xn[i] + xnp1[i]);
                    outer[i] = mid[i] - shift * g1[i];
                }
                let o1 = g(&outer, tm)?;
                for i in 0..d {
                    outer[i] = mid[i] + shift * g2[i];
                }
                let o2 = g(&outer, tm)?;
                let mut out = vec![0.0; d];
                for i in 0..d {
                    out[i] = 0.5 * (o1[i] + o2[i]);
                }
                Ok(out)
            }
        }
    }

    /// (xⁿ⁺¹ − xⁿ)/Δt − Φ_Δt(g, xⁿ, xⁿ⁺¹): the quantity training drives to
    /// zero.
    pub fn residual<G>(
        &self,
        g: &mut G,
        xn: &[f64],
        xnp1: &[f64],
        tn: f64,
        dt: f64,
    ) -> Result<Vec<f64>>
    where
        G: FnMut(&[f64], f64) -> Result<Vec<f64>>,
    {
        let mut out = self.phi(g, xn, xnp1, tn, dt)?;
        for i in 0..out.len() {
            out[i] = (xnp1[i] - xn[i]) / dt - out[i];
        }
        Ok(out)
    }

    /// Φ recorded on the tape. `g` receives the tape, a state variable and a
    /// time; both endpoints may themselves be differentiable variables.
    pub fn phi_tape<G>(
        &self,
        tape: &mut Tape<'_>,
        g: &mut G,
        xn: VarId,
        xnp1: VarId,
        tn: f64,
        dt: f64,
    ) -> VarId
    where
        G: FnMut(&mut Tape<'_>, VarId, f64) -> VarId,
    {
        match self {
            Discretization::Euler => g(tape, xn, tn),
            Discretization::Rk4 => {
                let half = 0.5 * dt;
                let k1 = g(tape, xn, tn);
                let s2 = tape.add_scaled(xn, k1, half);
                let k2 = g(tape, s2, tn + half);
                let s3 = tape.add_scaled(xn, k2, half);
                let k3 = g(tape, s3, tn + half);
                let s4 = tape.add_scaled(xn, k3, dt);
                let k4 = g(tape, s4, tn + dt);
                let mut acc = tape.add(k1, k4);
                acc = tape.add_scaled(acc, k2, 2.0);
                acc = tape.add_scaled(acc, k3, 2.0);
                tape.scale(acc, 1.0 / 6.0)
            }
            Discretization::Midpoint => {
                let sum = tape.add(xn, xnp1);
                let mid = tape.scale(sum, 0.5);
                g(tape, mid, tn + 0.5 * dt)
            }
            Discretization::Srk4 => {
                let tnp1 = tn + dt;
                let (wp, wm) = (0.5 + SRK4_C, 0.5 - SRK4_C);
                let a = tape.scale(xn, wm);
                let x1 = tape.add_scaled(a, xnp1, wp);
                let g1 = g(tape, x1, wm * tn + wp * tnp1);
                let b = tape.scale(xn, wp);
                let x2 = tape.add_scaled(b, xnp1, wm);
                let g2 = g(tape, x2, wp * tn + wm * tnp1);
                let sum = tape.add(xn, xnp1);
                let mid = tape.scale(sum, 0.5);
                let tm = 0.5 * (tn + tnp1);
                let shift = SRK4_C * dt;
                let y1 = tape.add_scaled(mid, g1, -shift);
                let o1 = g(tape, y1, tm);
                let y2 = tape.add_scaled(mid, g2, shift);
                let o2 = g(tape, y2, tm);
                let s = tape.add(o1, o2);
                tape.scale(s, 0.5)
            }
        }
    }

    /// (xⁿ⁺¹ − xⁿ)/Δt − Φ on the tape.
    pub fn residual_tape<G>(
        &self,
        tape: &mut Tape<'_>,
        g: &mut G,
        xn: VarId,
        xnp1: VarId,
        tn: f64,
        dt: f64,
    ) -> VarId
    where
        G: FnMut(&mut Tape<'_>, VarId, f64) -> VarId,
    {
        let phi = self.phi_tape(tape, g, xn, xnp1, tn, dt);
        let diff = tape.sub(xnp1, xn);
        let slope = tape.scale(diff, 1.0 / dt);
        tape.sub(slope, phi)
    }
}

/// Solve the one-step relation y = xn + dt·Φ(g, xn, y) for y with Newton
/// iteration (forward-difference Jacobian, h = 1e-7). On failure the error
/// carries step index 0; rollout callers rewrite it with the real index.
pub fn solve_step<G>(
    g: &mut G,
    disc: Discretization,
    xn: &[f64],
    tn: f64,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let d = xn.len();
    // Euler predictor as the starting guess.
    let g0 = g(xn, tn)?;
    let mut y: Vec<f64> = (0..d).map(|i| xn[i] + dt * g0[i]).collect();
    let residual = |y: &[f64], g: &mut G| -> Result<Vec<f64>> {
        let phi = disc.phi(g, xn, y, tn, dt)?;
        Ok((0..d).map(|i| y[i] - xn[i] - dt * phi[i]).collect())
    };
    let mut best = f64::INFINITY;
    for _ in 0..max_iter {
        let f = residual(&y, g)?;
        let norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        best = best.min(norm);
        if !norm.is_finite() {
            return Err(Error::StepFailed {
                step: 0,
                residual: norm,
            });
        }
        if norm <= tol {
            return Ok(y);
        }
        // J = I − dt·∂Φ/∂y by forward differences.
        const H: f64 = 1e-7;
        let mut jac = vec![0.0; d * d];
        let mut yh = y.clone();
        for j in 0..d {
            let old = yh[j];
            yh[j] = old + H;
            let fh = residual(&yh, g)?;
            yh[j] = old;
            for i in 0..d {
                jac[i * d + j] = (fh[i] - f[i]) / H;
            }
        }
        let mut delta: Vec<f64> = f.iter().map(|v| -v).collect();
        crate::linalg::solve_dense(&mut jac, d, &mut delta)?;
        for i in 0..d {
            y[i] += delta[i];
        }
    }
    let f = residual(&y, g)?;
    let norm = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if norm <= tol {
        return Ok(y);
    }
    Err(Error::StepFailed {
        step: 0,
        residual: norm.min(best),
    })
}

/// How to advance a learned model in time for prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum RolloutSolver {
    /// Classic explicit Runge–Kutta at the sample step (the default).
    #[default]
    Rk4Explicit,
    /// Implicit midpoint, Newton-solved per step (tolerance 1e-10, 50
    /// iterations); preserves quadratic invariants of the model.
    MidpointImplicit,
}

/// Integrate `g` from x0 at t0 to t1 with step dt, recording every step
/// (including the initial state). Returns (times, states).
pub fn rollout<G>(
    g: &mut G,
    x0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
    solver: RolloutSolver,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    G: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(dt > 0.0) || !(t1 > t0) {
        return Err(Error::invalid("rollout needs t1 > t0 and dt > 0"));
    }
    let n_steps = libm::round((t1 - t0) / dt) as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for n in 0..n_steps {
        let t = t0 + n as f64 * dt;
        x = match solver {
            RolloutSolver::Rk4Explicit => {
                let phi = Discretization::Rk4.phi(g, &x, &x, t, dt)?;
                (0..x.len()).map(|i| x[i] + dt * phi[i]).collect()
            }
            RolloutSolver::MidpointImplicit => {
                solve_step(g, Discretization::Midpoint, &x, t, dt, 1e-10, 50).map_err(|e| {
                    match e {
                        Error::StepFailed { residual, .. } => Error::StepFailed {
                            step: n,
                            residual,
                        },
                        other => other,
                    }
                })?
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { t: t + dt });
        }
        times.push(t0 + (n + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok((times, states))
}
