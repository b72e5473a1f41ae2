//! Ground-truth benchmark systems.
//!
//! Two systems are modeled: a damped, periodically forced mass-spring
//! oscillator, and a network of tanks connected by pipes where saturating
//! leaks act as state-dependent external forces. Each system provides its
//! exact right-hand side, Hamiltonian and force — written directly from the
//! physics, *not* through the model assembly in [`crate::model`] — plus a
//! high-resolution reference simulator for data generation. The planted
//! model constructors mirror the same dynamics through the model code path,
//! which gives the tests two independent routes to the same numbers.
//!
//! State conventions: mass-spring `x = (q, p)`; tank network `x = (φ, μ)`
//! with the `M` pipe momenta first and the `N` tank volumes after, so state
//! index `M + j` is the volume of tank `j` (0-based).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ForceTerm, HamiltonianTerm, PhModel, StructureMatrix};

/// External force acting on the mass-spring momentum equation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ExternalForce {
    None,
    /// `amplitude · sin(angular_frequency · t)`
    Sine { amplitude: f64, angular_frequency: f64 },
}

/// Damped mass-spring oscillator `m q̈ + c q̇ + k q = f(t)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MassSpringSpec {
    pub mass: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub force: ExternalForce,
}

impl Default for MassSpringSpec {
    /// The benchmark configuration: m = k = 1, c = 0.3, f(t) = sin(3t).
    fn default() -> Self {
        MassSpringSpec {
            mass: 1.0,
            stiffness: 1.0,
            damping: 0.3,
            force: ExternalForce::Sine {
                amplitude: 1.0,
                angular_frequency: 3.0,
            },
        }
    }
}

impl MassSpringSpec {
    pub fn force_at(&self, t: f64) -> f64 {
        match self.force {
            ExternalForce::None => 0.0,
            ExternalForce::Sine {
                amplitude,
                angular_frequency,
            } => amplitude * libm::sin(angular_frequency * t),
        }
    }

    /// Exact flow of the *unforced* system (force ignored), valid in the
    /// underdamped regime `c² < 4km`. Used as an integration-free reference
    /// in order-of-accuracy measurements.
    pub fn unforced_exact_flow(&self, x0: &[f64; 2], t: f64) -> Result<[f64; 2]> {
        let (m, k, c) = (self.mass, self.stiffness, self.damping);
        let disc = c * c - 4.0 * k * m;
        if disc >= 0.0 {
            return Err(Error::invalid(
                "exact flow implemented for the underdamped regime only",
            ));
        }
        // A = [[0, 1/m], [-k, -c/m]] has eigenvalues α ± iβ; then
        // e^{At} = e^{αt} ( cos(βt) I + sin(βt)/β (A - αI) ).
        let alpha = -c / (2.0 * m);
        let beta = libm::sqrt(-disc) / (2.0 * m);
        let (s, co) = (libm::sin(beta * t), libm::cos(beta * t));
        let e = libm::exp(alpha * t);
        let sb = s / beta;
        let a = [[0.0, 1.0 / m], [-k, -c / m]];
        let mut out = [0.0; 2];
        for i in 0..2 {
            for j in 0..2 {
                let aij = a[i][j] - if i == j { alpha } else { 0.0 };
                out[i] += (if i == j { co } else { 0.0 } + sb * aij) * x0[j];
            }
        }
        out[0] *= e;
        out[1] *= e;
        Ok(out)
    }
}

/// A saturating leak on one tank: adds `-coefficient · clamp(μ_tank, ±saturation)`
/// to that tank's volume equation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LeakForce {
    /// 0-based tank index.
    pub tank: usize,
    pub coefficient: f64,
    pub saturation: f64,
}

impl LeakForce {
    pub fn value(&self, mu: f64) -> f64 {
        -self.coefficient * mu.clamp(-self.saturation, self.saturation)
    }
}

/// Tanks connected by pipes; volumes change by the flows, flows are driven
/// by pressure differences and slowed by friction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TankNetworkSpec {
    pub n_tanks: usize,
    /// Directed pipes as 0-based (source tank, target tank).
    pub pipes: Vec<(usize, usize)>,
    /// Pipe inertances J (length M).
    pub inertances: Vec<f64>,
    /// Tank footprints A (length N).
    pub areas: Vec<f64>,
    pub density: f64,
    pub gravity: f64,
    /// Pipe friction coefficients, the diagonal of R_p (length M).
    pub frictions: Vec<f64>,
    pub leaks: Vec<LeakForce>,
}

impl TankNetworkSpec {
    pub fn new(
        n_tanks: usize,
        pipes: Vec<(usize, usize)>,
        inertances: Vec<f64>,
        areas: Vec<f64>,
        density: f64,
        gravity: f64,
        frictions: Vec<f64>,
        leaks: Vec<LeakForce>,
    ) -> Result<Self> {
        let m = pipes.len();
        if n_tanks == 0 || m == 0 {
            return Err(Error::invalid("need at least one tank and one pipe"));
        }
        for &(a, b) in &pipes {
            if a >= n_tanks || b >= n_tanks {
                return Err(Error::invalid(format!(
                    "pipe ({a}, {b}) references a tank outside 0..{n_tanks}"
                )));
            }
            if a == b {
                return Err(Error::invalid("pipe must connect two distinct tanks"));
            }
        }
        if inertances.len() != m || frictions.len() != m {
            return Err(Error::invalid("inertances/frictions must have one entry per pipe"));
        }
        if areas.len() != n_tanks {
            return Err(Error::invalid("areas must have one entry per tank"));
        }
        if inertances.iter().any(|&j| j <= 0.0) || areas.iter().any(|&a| a <= 0.0) {
            return Err(Error::invalid("inertances and areas must be positive"));
        }
        for l in &leaks {
            if l.tank >= n_tanks {
                return Err(Error::invalid("leak references a tank out of range"));
            }
            if l.saturation < 0.0 {
                return Err(Error::invalid("leak saturation must be non-negative"));
            }
        }
        Ok(TankNetworkSpec {
            n_tanks,
            pipes,
            inertances,
            areas,
            density,
            gravity,
            frictions,
            leaks,
        })
    }

    /// The benchmark network: four tanks in a ring plus a diagonal pipe,
    /// J = 0.02, A = 1, ρ = g = 1, R_p = diag(0.03, 0.03, 0.09, 0.03, 0.03),
    /// no leaks.
    pub fn default_four_tank() -> Self {
        TankNetworkSpec::new(
            4,
            vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)],
            vec![0.02; 5],
            vec![1.0; 4],
            1.0,
            1.0,
            vec![0.03, 0.03, 0.09, 0.03, 0.03],
            Vec::new(),
        )
        .expect("default network is valid")
    }

    pub fn with_leaks(mut self, leaks: Vec<LeakForce>) -> Result<Self> {
        for l in &leaks {
            if l.tank >= self.n_tanks {
                return Err(Error::invalid("leak references a tank out of range"));
            }
        }
        self.leaks = leaks;
        Ok(self)
    }

    pub fn n_pipes(&self) -> usize {
        self.pipes.len()
    }

    pub fn dim(&self) -> usize {
        self.pipes.len() + self.n_tanks
    }

    /// Incidence matrix B, row-major (n_tanks, n_pipes): +1 where the pipe
    /// leaves the tank, −1 where it arrives. Volume conservation is
    /// `μ̇ = −Bν` for pipe flows ν.
    pub fn incidence(&self) -> Vec<f64> {
        let (n, m) = (self.n_tanks, self.pipes.len());
        let mut b = vec![0.0; n * m];
        for (e, &(src, dst)) in self.pipes.iter().enumerate() {
            b[src * m + e] = 1.0;
            b[dst * m + e] = -1.0;
        }
        b
    }

    /// State index of tank `tank`'s volume.
    pub fn tank_state_index(&self, tank: usize) -> usize {
        self.pipes.len() + tank
    }
}

/// A ground-truth system: the source of data and of exact references.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SystemSpec {
    MassSpring(MassSpringSpec),
    TankNetwork(TankNetworkSpec),
}

impl SystemSpec {
    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::MassSpring(_) => 2,
            SystemSpec::TankNetwork(t) => t.dim(),
        }
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Exact right-hand side ẋ = g(x, t), written directly from the physics.
    pub fn rhs(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_state(x)?;
        match self {
            SystemSpec::MassSpring(s) => {
                let (q, p) = (x[0], x[1]);
                Ok(vec![
                    p / s.mass,
                    -s.stiffness * q - s.damping * p / s.mass + s.force_at(t),
                ])
            }
            SystemSpec::TankNetwork(s) => {
                let m = s.n_pipes();
                let mut dx = vec![0.0; s.dim()];
                // Pipe flows and tank pressures from the energy gradient.
                for (e, &(src, dst)) in s.pipes.iter().enumerate() {
                    let flow = x[e] / s.inertances[e];
                    let p_src = s.gravity * s.density * x[m + src] / s.areas[src];
                    let p_dst = s.gravity * s.density * x[m + dst] / s.areas[dst];
                    // φ̇_e: pressure difference drives the flow, friction slows it.
                    dx[e] = (p_src - p_dst) - s.frictions[e] * flow;
                    // Volume moves from source to target.
                    dx[m + src] -= flow;
                    dx[m + dst] += flow;
                }
                for l in &s.leaks {
                    dx[m + l.tank] += l.value(x[m + l.tank]);
                }
                Ok(dx)
            }
        }
    }

    /// Exact Hamiltonian (total energy).
    pub fn exact_hamiltonian(&self, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        match self {
            SystemSpec::MassSpring(s) => {
                Ok(0.5 * s.stiffness * x[0] * x[0] + x[1] * x[1] / (2.0 * s.mass))
            }
            SystemSpec::TankNetwork(s) => {
                let m = s.n_pipes();
                let mut h = 0.0;
                for e in 0..m {
                    h += x[e] * x[e] / (2.0 * s.inertances[e]);
                }
                for j in 0..s.n_tanks {
                    h += s.gravity * s.density * x[m + j] * x[m + j] / (2.0 * s.areas[j]);
                }
                Ok(h)
            }
        }
    }

    /// Exact external force vector f(x, t).
    pub fn force_values(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut f = vec![0.0; self.dim()];
        match self {
            SystemSpec::MassSpring(s) => f[1] = s.force_at(t),
            SystemSpec::TankNetwork(s) => {
                let m = s.n_pipes();
                for l in &s.leaks {
                    f[m + l.tank] += l.value(x[m + l.tank]);
                }
            }
        }
        Ok(f)
    }

    /// The structure matrix of the pseudo-Hamiltonian form of this system.
    pub fn structure_matrix(&self) -> StructureMatrix {
        match self {
            SystemSpec::MassSpring(_) => StructureMatrix::canonical_pair(),
            SystemSpec::TankNetwork(s) => {
                StructureMatrix::from_incidence(s.n_tanks, &s.pipes)
            }
        }
    }

    /// Full-dimension damping diagonal of the pseudo-Hamiltonian form.
    pub fn damping_diag(&self) -> Vec<f64> {
        match self {
            SystemSpec::MassSpring(s) => vec![0.0, s.damping],
            SystemSpec::TankNetwork(s) => {
                let mut d = vec![0.0; s.dim()];
                d[..s.n_pipes()].copy_from_slice(&s.frictions);
                d
            }
        }
    }

    /// State indices whose damping coefficients a learned model should fit.
    pub fn damping_indices(&self) -> Vec<usize> {
        match self {
            SystemSpec::MassSpring(_) => vec![1],
            SystemSpec::TankNetwork(s) => (0..s.n_pipes()).collect(),
        }
    }

    /// Ground-truth damping at the learnable indices.
    pub fn damping_coefficients(&self) -> Vec<f64> {
        let diag = self.damping_diag();
        self.damping_indices().iter().map(|&i| diag[i]).collect()
    }

    /// The coefficients c with H(x) = ½ Σ cᵢ xᵢ².
    pub fn hamiltonian_coefficients(&self) -> Vec<f64> {
        match self {
            SystemSpec::MassSpring(s) => vec![s.stiffness, 1.0 / s.mass],
            SystemSpec::TankNetwork(s) => {
                let mut c: Vec<f64> = s.inertances.iter().map(|&j| 1.0 / j).collect();
                c.extend(
                    s.areas
                        .iter()
                        .map(|&a| s.gravity * s.density / a),
                );
                c
            }
        }
    }

    /// The exact force as a model term.
    pub fn force_term(&self) -> ForceTerm {
        match self {
            SystemSpec::MassSpring(s) => match s.force {
                ExternalForce::None => ForceTerm::None,
                ExternalForce::Sine {
                    amplitude,
                    angular_frequency,
                } => ForceTerm::Sine {
                    index: 1,
                    amplitude,
                    angular_frequency,
                    offset: 0.0,
                },
            },
            SystemSpec::TankNetwork(s) => {
                if s.leaks.is_empty() {
                    ForceTerm::None
                } else {
                    ForceTerm::Leaks(
                        s.leaks
                            .iter()
                            .map(|l| (s.tank_state_index(l.tank), l.clone()))
                            .collect(),
                    )
                }
            }
        }
    }

    /// The exact system expressed through the model code path. This is the
    /// second, independent route to the dynamics used by cross-checks, the
    /// conservation tests and the control demo.
    pub fn planted_model(&self) -> PhModel {
        PhModel::planted(
            self.structure_matrix(),
            HamiltonianTerm::Quadratic {
                coefficients: self.hamiltonian_coefficients(),
            },
            self.damping_diag(),
            self.force_term(),
        )
    }

    /// Draw one initial condition from the system's sampling protocol:
    /// mass-spring on an annulus 1 ≤ |x₀| ≤ 4.5, tank states uniform in
    /// [−1, 1].
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            SystemSpec::MassSpring(_) => {
                let r = rng.random_range(1.0..4.5);
                let angle = rng.random_range(0.0..core::f64::consts::TAU);
                vec![r * libm::cos(angle), r * libm::sin(angle)]
            }
            SystemSpec::TankNetwork(t) => {
                (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
            }
        }
    }

    /// Reference simulation sampled every `sample_dt`, including t0. Uses
    /// classic RK4 with `substeps` internal steps per sample interval.
    pub fn simulate(
        &self,
        x0: &[f64],
        t0: f64,
        n_samples: usize,
        sample_dt: f64,
        substeps: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_state(x0)?;
        if sample_dt <= 0.0 || substeps == 0 {
            return Err(Error::invalid("sample_dt and substeps must be positive"));
        }
        let mut times = Vec::with_capacity(n_samples);
        let mut states = Vec::with_capacity(n_samples);
        let mut x = x0.to_vec();
        for n in 0..n_samples {
            let t = t0 + n as f64 * sample_dt;
            if n > 0 {
                let t_prev = t0 + (n - 1) as f64 * sample_dt;
                let h = sample_dt / substeps as f64;
                for s in 0..substeps {
                    x = rk4_step(|y, tau| self.rhs(y, tau), &x, t_prev + s as f64 * h, h)?;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SimulationDiverged { t });
                }
            }
            times.push(t);
            states.push(x.clone());
        }
        Ok((times, states))
    }

    /// Advance one control interval with an extra constant source `u` on
    /// state `source_index` (the plant side of the control loop).
    pub fn advance_controlled(
        &self,
        x: &[f64],
        t: f64,
        dt: f64,
        u: f64,
        source_index: usize,
        substeps: usize,
    ) -> Result<Vec<f64>> {
        self.check_state(x)?;
        if source_index >= self.dim() {
            return Err(Error::invalid("control source index out of range"));
        }
        let rhs_u = |y: &[f64], tau: f64| -> Result<Vec<f64>> {
            let mut g = self.rhs(y, tau)?;
            g[source_index] += u;
            Ok(g)
        };
        let h = dt / substeps as f64;
        let mut y = x.to_vec();
        for s in 0..substeps {
            y = rk4_step(rhs_u, &y, t + s as f64 * h, h)?;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { t: t + dt });
        }
        Ok(y)
    }
}

/// One classic RK4 step for a fallible right-hand side.
fn rk4_step<F>(mut f: F, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let d = x.len();
    let k1 = f(x, t)?;
    let mut y = vec![0.0; d];
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k1[i];
    }
    let k2 = f(&y, t + 0.5 * h)?;
    for i in 0..d {
        y[i] = x[i] + 0.5 * h * k2[i];
    }
    let k3 = f(&y, t + 0.5 * h)?;
    for i in 0..d {
        y[i] = x[i] + h * k3[i];
    }
    let k4 = f(&y, t + h)?;
    let mut out = vec![0.0; d];
    for i in 0..d {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}
