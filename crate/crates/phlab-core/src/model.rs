//! Dynamics models: the pseudo-Hamiltonian assembly and the baselines.
//!
//! A [`PhModel`] evaluates `ĝ(x, t) = (S − R̂) ∇Ĥ(x) + f̂(x, t)` where each
//! of `R̂`, `Ĥ`, `f̂` is either trainable (learnable diagonal entries, a
//! [`ScalarNet`]) or a fixed closed form (known diagonal, quadratic energy,
//! sine force, saturating leaks). The closed forms exist so the exact
//! benchmark systems can be *planted* into the model code path and compared
//! against their direct physics implementation.
//!
//! [`BaselineModel`] is the unstructured alternative: one network for the
//! whole right-hand side, or one state-dependent plus one time-dependent
//! network.
//!
//! Every model evaluates through two routes that must agree: a plain route
//! on `&[f64]` (rollouts, validation) and a tape route (training and
//! control, where gradients are needed).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::ScalarNet;
use crate::params::{ParamBuilder, ParamSlice, ParamVector};
use crate::rng;
use crate::system::LeakForce;
use crate::tape::{Tape, VarId};

/// Fixed skew-symmetric structure matrix S.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl StructureMatrix {
    /// Validates exact skew-symmetry (S = −Sᵀ entrywise).
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: entries.len(),
            });
        }
        for i in 0..dim {
            for j in 0..=i {
                if entries[i * dim + j] != -entries[j * dim + i] {
                    return Err(Error::invalid("structure matrix must be skew-symmetric"));
                }
            }
        }
        Ok(StructureMatrix { dim, entries })
    }

    /// The canonical 2×2 symplectic form [[0, 1], [−1, 0]].
    pub fn canonical_pair() -> Self {
        StructureMatrix {
            dim: 2,
            entries: vec![0.0, 1.0, -1.0, 0.0],
        }
    }

    /// Structure of a tank network with the given directed pipes:
    /// [[0, Bᵀ], [−B, 0]] for the (tanks × pipes) incidence matrix B.
    pub fn from_incidence(n_tanks: usize, pipes: &[(usize, usize)]) -> Self {
        let m = pipes.len();
        let d = m + n_tanks;
        let mut s = vec![0.0; d * d];
        for (e, &(src, dst)) in pipes.iter().enumerate() {
            // Top-right block Bᵀ: pipe row e sees +P_src − P_dst.
            s[e * d + m + src] = 1.0;
            s[e * d + m + dst] = -1.0;
            // Bottom-left block −B: volume leaves src, enters dst.
            s[(m + src) * d + e] = -1.0;
            s[(m + dst) * d + e] = 1.0;
        }
        StructureMatrix { dim: d, entries: s }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// out = S v
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        crate::linalg::matvec(&self.entries, self.dim, self.dim, v, out);
    }
}

/// What the external-force network sees as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ForceInput {
    StateAndTime,
    TimeOnly,
    StateOnly,
}

impl ForceInput {
    fn input_dim(self, state_dim: usize) -> usize {
        match self {
            ForceInput::StateAndTime => state_dim + 1,
            ForceInput::TimeOnly => 1,
            ForceInput::StateOnly => state_dim,
        }
    }
}

/// Trainable external force: a network whose outputs land on the masked
/// state components.
#[derive(Debug, Clone)]
pub struct ForceNet {
    pub input: ForceInput,
    /// State indices that receive the network outputs, in output order.
    pub mask: Vec<usize>,
    net: ScalarNet,
}

/// The external-force term of a [`PhModel`].
#[derive(Debug, Clone)]
pub enum ForceTerm {
    None,
    Network(ForceNet),
    /// `amplitude · sin(angular_frequency · t) + offset` on one state
    /// component. The offset matters when grafting a sine in place of a
    /// learned force: a time-dependent force is only identified up to a
    /// constant (the energy gradient can absorb it), so the replacement
    /// should carry the learned constant along.
    Sine {
        index: usize,
        amplitude: f64,
        angular_frequency: f64,
        offset: f64,
    },
    /// Saturating leaks, each given as (state index, leak law).
    Leaks(Vec<(usize, LeakForce)>),
}

/// The energy term of a [`PhModel`].
#[derive(Debug, Clone)]
pub enum HamiltonianTerm {
    Network(ScalarNet),
    /// H(x) = ½ Σ cᵢ xᵢ²
    Quadratic { coefficients: Vec<f64> },
}

/// The damping term: learnable entries at fixed positions, or a known diagonal.
#[derive(Debug, Clone)]
pub enum DampingTerm {
    Learned {
        indices: Vec<usize>,
        slice: ParamSlice,
    },
    Fixed {
        diag: Vec<f64>,
    },
}

/// Serializable description of a trainable model's architecture; building a
/// model from it and loading a flat parameter vector reproduces the model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum ModelDescriptor {
    PseudoHamiltonian {
        dim: usize,
        /// Row-major skew-symmetric structure matrix.
        structure: Vec<f64>,
        /// State indices with a learnable damping coefficient.
        damping_indices: Vec<usize>,
        /// Hidden width of the Hamiltonian network.
        hidden: usize,
        force: Option<ForceConfig>,
    },
    BaselineSingle {
        dim: usize,
        hidden: usize,
        include_time: bool,
    },
    BaselineSplit {
        dim: usize,
        hidden: usize,
    },
}

/// Architecture of a trainable force network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ForceConfig {
    pub input: ForceInput,
    pub mask: Vec<usize>,
    pub hidden: usize,
}

fn check_indices(indices: &[usize], dim: usize, what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid(alloc::format!("{what} must not be empty")));
    }
    for (i, &idx) in indices.iter().enumerate() {
        if idx >= dim {
            return Err(Error::invalid(alloc::format!(
                "{what} index {idx} out of range for dimension {dim}"
            )));
        }
        if indices[..i].contains(&idx) {
            return Err(Error::invalid(alloc::format!("{what} has duplicate index {idx}")));
        }
    }
    Ok(())
}

/// Pseudo-Hamiltonian model ĝ(x, t) = (S − R̂) ∇Ĥ(x) + f̂(x, t).
#[derive(Debug, Clone)]
pub struct PhModel {
    dim: usize,
    structure: StructureMatrix,
    damping: DampingTerm,
    hamiltonian: HamiltonianTerm,
    force: ForceTerm,
    params: ParamVector,
}

impl PhModel {
    /// Trainable model from an architecture description.
    pub fn from_descriptor(
        dim: usize,
        structure: Vec<f64>,
        damping_indices: Vec<usize>,
        hidden: usize,
        force: Option<&ForceConfig>,
    ) -> Result<Self> {
        let structure = StructureMatrix::new(dim, structure)?;
        check_indices(&damping_indices, dim, "damping")?;
        if hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        let mut b = ParamBuilder::new();
        let hnet = ScalarNet::register(&mut b, "hamiltonian", dim, hidden, 1);
        let slice = b.register("damping", damping_indices.len());
        let force_term = match force {
            None => ForceTerm::None,
            Some(cfg) => {
                check_indices(&cfg.mask, dim, "force mask")?;
                if cfg.hidden == 0 {
                    return Err(Error::invalid("force hidden width must be positive"));
                }
                let net = ScalarNet::register(
                    &mut b,
                    "force",
                    cfg.input.input_dim(dim),
                    cfg.hidden,
                    cfg.mask.len(),
                );
                ForceTerm::Network(ForceNet {
                    input: cfg.input,
                    mask: cfg.mask.clone(),
                    net,
                })
            }
        };
        Ok(PhModel {
            dim,
            structure,
            damping: DampingTerm::Learned {
                indices: damping_indices,
                slice,
            },
            hamiltonian: HamiltonianTerm::Network(hnet),
            force: force_term,
            params: b.finish(),
        })
    }

    /// Exact model with closed-form terms and no trainable parameters.
    pub fn planted(
        structure: StructureMatrix,
        hamiltonian: HamiltonianTerm,
        damping_diag: Vec<f64>,
        force: ForceTerm,
    ) -> Self {
        let dim = structure.dim();
        assert_eq!(damping_diag.len(), dim, "damping diagonal must match dim");
        if let HamiltonianTerm::Quadratic { coefficients } = &hamiltonian {
            assert_eq!(coefficients.len(), dim, "quadratic energy must match dim");
        }
        PhModel {
            dim,
            structure,
            damping: DampingTerm::Fixed { diag: damping_diag },
            hamiltonian,
            force,
            params: ParamBuilder::new().finish(),
        }
    }

    /// Glorot-initialize the networks (independent streams for energy and
    /// force nets), zero the damping coefficients.
    pub fn initialize(&mut self, seed: u64) {
        if let HamiltonianTerm::Network(net) = &self.hamiltonian {
            let net = net.clone();
            net.init_glorot(&mut self.params, &mut rng::stream(seed, rng::TAG_INIT, 0));
        }
        if let ForceTerm::Network(f) = &self.force {
            let net = f.net.clone();
            net.init_glorot(&mut self.params, &mut rng::stream(seed, rng::TAG_INIT, 1));
        }
        if let DampingTerm::Learned { slice, .. } = self.damping {
            self.params.slice_mut(slice).fill(0.0);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn structure(&self) -> &StructureMatrix {
        &self.structure
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn force(&self) -> &ForceTerm {
        &self.force
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// ∇Ĥ(x), plain route.
    pub fn grad_hamiltonian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        match &self.hamiltonian {
            HamiltonianTerm::Network(net) => net.grad_input(self.params.values(), x),
            HamiltonianTerm::Quadratic { coefficients } => {
                Ok(coefficients.iter().zip(x).map(|(c, v)| c * v).collect())
            }
        }
    }

    /// Ĥ(x) including its arbitrary constant offset.
    pub fn hamiltonian_value(&self, x: &[f64]) -> Result<f64> {
        self.check_state(x)?;
        match &self.hamiltonian {
            HamiltonianTerm::Network(net) => Ok(net.forward(self.params.values(), x)?[0]),
            HamiltonianTerm::Quadratic { coefficients } => Ok(0.5
                * coefficients
                    .iter()
                    .zip(x)
                    .map(|(c, v)| c * v * v)
                    .sum::<f64>()),
        }
    }

    /// Ĥ(x) − Ĥ(0): the energy estimate with the unidentifiable constant
    /// removed, comparable to the exact Hamiltonian.
    pub fn adjusted_hamiltonian(&self, x: &[f64]) -> Result<f64> {
        let zero = vec![0.0; self.dim];
        Ok(self.hamiltonian_value(x)? - self.hamiltonian_value(&zero)?)
    }

    /// Full-dimension damping diagonal (current parameter values).
    pub fn damping_diag(&self) -> Vec<f64> {
        match &self.damping {
            DampingTerm::Fixed { diag } => diag.clone(),
            DampingTerm::Learned { indices, slice } => {
                let mut diag = vec![0.0; self.dim];
                for (k, &i) in indices.iter().enumerate() {
                    diag[i] = self.params.values()[slice.offset + k];
                }
                diag
            }
        }
    }

    /// The learnable damping coefficients, in index order (empty when fixed).
    pub fn damping_values(&self) -> Vec<f64> {
        match &self.damping {
            DampingTerm::Fixed { .. } => Vec::new(),
            DampingTerm::Learned { slice, .. } => self.params.slice(*slice).to_vec(),
        }
    }

    /// f̂(x, t) as a full state-dimension vector, plain route.
    pub fn force_eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut f = vec![0.0; self.dim];
        match &self.force {
            ForceTerm::None => {}
            ForceTerm::Sine {
                index,
                amplitude,
                angular_frequency,
                offset,
            } => f[*index] = amplitude * libm::sin(angular_frequency * t) + offset,
            ForceTerm::Leaks(leaks) => {
                for (idx, leak) in leaks {
                    f[*idx] += leak.value(x[*idx]);
                }
            }
            ForceTerm::Network(fnet) => {
                let out = self.force_net_outputs(fnet, x, t)?;
                for (k, &i) in fnet.mask.iter().enumerate() {
                    f[i] += out[k];
                }
            }
        }
        Ok(f)
    }

    fn force_net_outputs(&self, fnet: &ForceNet, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = self.params.values();
        match fnet.input {
            ForceInput::StateAndTime => {
                let mut input = x.to_vec();
                input.push(t);
                fnet.net.forward(p, &input)
            }
            ForceInput::TimeOnly => fnet.net.forward(p, &[t]),
            ForceInput::StateOnly => fnet.net.forward(p, x),
        }
    }

    /// ĝ(x, t) = (S − R̂) ∇Ĥ(x) + f̂(x, t), plain route.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let gh = self.grad_hamiltonian(x)?;
        let mut out = vec![0.0; self.dim];
        self.structure.apply(&gh, &mut out);
        match &self.damping {
            DampingTerm::Fixed { diag } => {
                for i in 0..self.dim {
                    out[i] -= diag[i] * gh[i];
                }
            }
            DampingTerm::Learned { indices, slice } => {
                let r = self.params.slice(*slice);
                for (k, &i) in indices.iter().enumerate() {
                    out[i] -= r[k] * gh[i];
                }
            }
        }
        if !matches!(self.force, ForceTerm::None) {
            let f = self.force_eval(x, t)?;
            for i in 0..self.dim {
                out[i] += f[i];
            }
        }
        Ok(out)
    }

    /// ĝ(x, t) recorded on the tape; `x` may be any tape variable.
    pub fn eval_tape(&self, tape: &mut Tape<'_>, x: VarId, t: f64) -> VarId {
        debug_assert_eq!(tape.len_of(x), self.dim);
        let gh = match &self.hamiltonian {
            HamiltonianTerm::Network(net) => net.grad_input_tape(tape, x),
            HamiltonianTerm::Quadratic { coefficients } => tape.hadamard_const(x, coefficients),
        };
        let mut out = tape.mat_const_vec(self.structure.entries(), self.dim, self.dim, gh);
        match &self.damping {
            DampingTerm::Fixed { diag } => {
                if diag.iter().any(|&v| v != 0.0) {
                    let rterm = tape.hadamard_const(gh, diag);
                    out = tape.sub(out, rterm);
                }
            }
            DampingTerm::Learned { indices, slice } => {
                let r = tape.gather_params(*slice);
                let rfull = tape.scatter(r, indices, self.dim);
                let rterm = tape.hadamard(rfull, gh);
                out = tape.sub(out, rterm);
            }
        }
        match &self.force {
            ForceTerm::None => {}
            ForceTerm::Sine {
                index,
                amplitude,
                angular_frequency,
                offset,
            } => {
                let mut f = vec![0.0; self.dim];
                f[*index] = amplitude * libm::sin(angular_frequency * t) + offset;
                let fl = tape.leaf(&f);
                out = tape.add(out, fl);
            }
            ForceTerm::Leaks(leaks) => {
                for (idx, leak) in leaks {
                    let seg = tape.segment(x, *idx, 1);
                    let cl = tape.clamp_sat(seg, -leak.saturation, leak.saturation);
                    let sc = tape.scale(cl, -leak.coefficient);
                    let scat = tape.scatter(sc, &[*idx], self.dim);
                    out = tape.add(out, scat);
                }
            }
            ForceTerm::Network(fnet) => {
                let fout = self.force_net_tape(tape, fnet, x, t);
                let scat = tape.scatter(fout, &fnet.mask, self.dim);
                out = tape.add(out, scat);
            }
        }
        out
    }

    fn force_net_tape(&self, tape: &mut Tape<'_>, fnet: &ForceNet, x: VarId, t: f64) -> VarId {
        let input = match fnet.input {
            ForceInput::StateAndTime => tape.append_scalar(x, t),
            ForceInput::TimeOnly => tape.leaf(&[t]),
            ForceInput::StateOnly => x,
        };
        fnet.net.forward_tape(tape, input)
    }

    /// Raw force-network outputs on the tape (the L1-regularization target);
    /// `None` when the force is not trainable.
    pub fn force_output_tape(&self, tape: &mut Tape<'_>, x: VarId, t: f64) -> Option<VarId> {
        match &self.force {
            ForceTerm::Network(fnet) => Some(self.force_net_tape(tape, fnet, x, t)),
            _ => None,
        }
    }

    /// ‖f̂(x, t)‖₁ over the raw force-network outputs — the plain-route twin
    /// of [`Self::force_output_tape`]. Zero when the force is not trainable.
    pub fn force_l1(&self, x: &[f64], t: f64) -> Result<f64> {
        match &self.force {
            ForceTerm::Network(fnet) => Ok(self
                .force_net_outputs(fnet, x, t)?
                .iter()
                .map(|v| v.abs())
                .sum()),
            _ => Ok(0.0),
        }
    }

    /// Swap the external-force term, e.g. to remove a learned leak or to
    /// inject a known control input. The new term must be closed-form.
    pub fn replace_force(&self, force: ForceTerm) -> Result<PhModel> {
        if matches!(force, ForceTerm::Network(_)) {
            return Err(Error::invalid(
                "cannot graft a new trainable force onto an existing model",
            ));
        }
        if let ForceTerm::Sine { index, .. } = &force {
            if *index >= self.dim {
                return Err(Error::invalid("force index out of range"));
            }
        }
        if let ForceTerm::Leaks(leaks) = &force {
            if leaks.iter().any(|(i, _)| *i >= self.dim) {
                return Err(Error::invalid("leak index out of range"));
            }
        }
        let mut m = self.clone();
        m.force = force;
        Ok(m)
    }

    /// Network force outputs with the per-component average over `inputs`
    /// subtracted — the force estimate modulo the unidentifiable constant.
    pub fn adjusted_force(&self, inputs: &[(Vec<f64>, f64)]) -> Result<Vec<Vec<f64>>> {
        let ForceTerm::Network(fnet) = &self.force else {
            return Err(Error::invalid("adjusted_force needs a trainable force term"));
        };
        if inputs.is_empty() {
            return Err(Error::invalid("adjusted_force needs at least one sample"));
        }
        let mut outputs = Vec::with_capacity(inputs.len());
        for (x, t) in inputs {
            outputs.push(self.force_net_outputs(fnet, x, *t)?);
        }
        let k = fnet.mask.len();
        let mut mean = vec![0.0; k];
        for o in &outputs {
            for i in 0..k {
                mean[i] += o[i];
            }
        }
        for m in mean.iter_mut() {
            *m /= outputs.len() as f64;
        }
        for o in outputs.iter_mut() {
            for i in 0..k {
                o[i] -= mean[i];
            }
        }
        Ok(outputs)
    }

    fn descriptor(&self) -> Result<ModelDescriptor> {
        let HamiltonianTerm::Network(hnet) = &self.hamiltonian else {
            return Err(Error::invalid("planted models have no descriptor"));
        };
        let DampingTerm::Learned { indices, .. } = &self.damping else {
            return Err(Error::invalid("fixed-damping models have no descriptor"));
        };
        let force = match &self.force {
            ForceTerm::Network(f) => Some(ForceConfig {
                input: f.input,
                mask: f.mask.clone(),
                hidden: f.net.hidden,
            }),
            ForceTerm::None => None,
            _ => {
                return Err(Error::invalid(
                    "models with a replaced force cannot be described for checkpointing",
                ))
            }
        };
        let desc = ModelDescriptor::PseudoHamiltonian {
            dim: self.dim,
            structure: self.structure.entries().to_vec(),
            damping_indices: indices.clone(),
            hidden: hnet.hidden,
            force,
        };
        // Guard against layouts that have drifted from the architecture
        // (e.g. a force term removed after training): the rebuilt layout
        // must match the live parameter vector exactly.
        let rebuilt = DynModel::from_descriptor(&desc)?;
        if rebuilt.params().components() != self.params.components() {
            return Err(Error::invalid(
                "parameter layout no longer matches the architecture",
            ));
        }
        Ok(desc)
    }
}

/// Unstructured baselines: the whole right-hand side as network output.
#[derive(Debug, Clone)]
pub enum BaselineModel {
    /// One network, optionally with time appended to the state input.
    Single {
        dim: usize,
        include_time: bool,
        net: ScalarNet,
        params: ParamVector,
    },
    /// A state-only network plus a time-only network, summed.
    Split {
        dim: usize,
        state_net: ScalarNet,
        time_net: ScalarNet,
        params: ParamVector,
    },
}

impl BaselineModel {
    pub fn single(dim: usize, hidden: usize, include_time: bool) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("dimension and hidden width must be positive"));
        }
        let mut b = ParamBuilder::new();
        let input_dim = if include_time { dim + 1 } else { dim };
        let net = ScalarNet::register(&mut b, "net", input_dim, hidden, dim);
        Ok(BaselineModel::Single {
            dim,
            include_time,
            net,
            params: b.finish(),
        })
    }

    pub fn split(dim: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::invalid("dimension and hidden width must be positive"));
        }
        let mut b = ParamBuilder::new();
        let state_net = ScalarNet::register(&mut b, "state", dim, hidden, dim);
        let time_net = ScalarNet::register(&mut b, "time", 1, hidden, dim);
        Ok(BaselineModel::Split {
            dim,
            state_net,
            time_net,
            params: b.finish(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            BaselineModel::Single { dim, .. } | BaselineModel::Split { dim, .. } => *dim,
        }
    }

    pub fn params(&self) -> &ParamVector {
        match self {
            BaselineModel::Single { params, .. } | BaselineModel::Split { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        match self {
            BaselineModel::Single { params, .. } | BaselineModel::Split { params, .. } => params,
        }
    }

    pub fn initialize(&mut self, seed: u64) {
        match self {
            BaselineModel::Single { net, params, .. } => {
                let net = net.clone();
                net.init_glorot(params, &mut rng::stream(seed, rng::TAG_INIT, 0));
            }
            BaselineModel::Split {
                state_net,
                time_net,
                params,
                ..
            } => {
                let (s, t) = (state_net.clone(), time_net.clone());
                s.init_glorot(params, &mut rng::stream(seed, rng::TAG_INIT, 0));
                t.init_glorot(params, &mut rng::stream(seed, rng::TAG_INIT, 1));
            }
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        match self {
            BaselineModel::Single {
                include_time,
                net,
                params,
                ..
            } => {
                if *include_time {
                    let mut input = x.to_vec();
                    input.push(t);
                    net.forward(params.values(), &input)
                } else {
                    net.forward(params.values(), x)
                }
            }
            BaselineModel::Split {
                state_net,
                time_net,
                params,
                ..
            } => {
                let mut out = state_net.forward(params.values(), x)?;
                let ft = time_net.forward(params.values(), &[t])?;
                for (o, f) in out.iter_mut().zip(&ft) {
                    *o += f;
                }
                Ok(out)
            }
        }
    }

    pub fn eval_tape(&self, tape: &mut Tape<'_>, x: VarId, t: f64) -> VarId {
        match self {
            BaselineModel::Single {
                include_time, net, ..
            } => {
                let input = if *include_time {
                    tape.append_scalar(x, t)
                } else {
                    x
                };
                net.forward_tape(tape, input)
            }
            BaselineModel::Split {
                state_net,
                time_net,
                ..
            } => {
                let s = state_net.forward_tape(tape, x);
                let tl = tape.leaf(&[t]);
                let ft = time_net.forward_tape(tape, tl);
                tape.add(s, ft)
            }
        }
    }

    fn descriptor(&self) -> ModelDescriptor {
        match self {
            BaselineModel::Single {
                dim,
                include_time,
                net,
                ..
            } => ModelDescriptor::BaselineSingle {
                dim: *dim,
                hidden: net.hidden,
                include_time: *include_time,
            },
            BaselineModel::Split { dim, state_net, .. } => ModelDescriptor::BaselineSplit {
                dim: *dim,
                hidden: state_net.hidden,
            },
        }
    }
}

/// Any trainable dynamics model.
#[derive(Debug, Clone)]
pub enum DynModel {
    PseudoHamiltonian(PhModel),
    Baseline(BaselineModel),
}

impl DynModel {
    pub fn from_descriptor(desc: &ModelDescriptor) -> Result<DynModel> {
        match desc {
            ModelDescriptor::PseudoHamiltonian {
                dim,
                structure,
                damping_indices,
                hidden,
                force,
            } => Ok(DynModel::PseudoHamiltonian(PhModel::from_descriptor(
                *dim,
                structure.clone(),
                damping_indices.clone(),
                *hidden,
                force.as_ref(),
            )?)),
            ModelDescriptor::BaselineSingle {
                dim,
                hidden,
                include_time,
            } => Ok(DynModel::Baseline(BaselineModel::single(
                *dim,
                *hidden,
                *include_time,
            )?)),
            ModelDescriptor::BaselineSplit { dim, hidden } => {
                Ok(DynModel::Baseline(BaselineModel::split(*dim, *hidden)?))
            }
        }
    }

    pub fn descriptor(&self) -> Result<ModelDescriptor> {
        match self {
            DynModel::PseudoHamiltonian(m) => m.descriptor(),
            DynModel::Baseline(b) => Ok(b.descriptor()),
        }
    }

    pub fn initialize(&mut self, seed: u64) {
        match self {
            DynModel::PseudoHamiltonian(m) => m.initialize(seed),
            DynModel::Baseline(b) => b.initialize(seed),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DynModel::PseudoHamiltonian(m) => m.dim(),
            DynModel::Baseline(b) => b.dim(),
        }
    }

    pub fn params(&self) -> &ParamVector {
        match self {
            DynModel::PseudoHamiltonian(m) => m.params(),
            DynModel::Baseline(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        match self {
            DynModel::PseudoHamiltonian(m) => m.params_mut(),
            DynModel::Baseline(b) => b.params_mut(),
        }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            DynModel::PseudoHamiltonian(m) => m.eval(x, t),
            DynModel::Baseline(b) => b.eval(x, t),
        }
    }

    pub fn eval_tape(&self, tape: &mut Tape<'_>, x: VarId, t: f64) -> VarId {
        match self {
            DynModel::PseudoHamiltonian(m) => m.eval_tape(tape, x, t),
            DynModel::Baseline(b) => b.eval_tape(tape, x, t),
        }
    }

    /// Tape node for the regularization target (the raw force-net outputs),
    /// when the model has one.
    pub fn reg_output_tape(&self, tape: &mut Tape<'_>, x: VarId, t: f64) -> Option<VarId> {
        match self {
            DynModel::PseudoHamiltonian(m) => m.force_output_tape(tape, x, t),
            DynModel::Baseline(_) => None,
        }
    }

    pub fn damping_values(&self) -> Vec<f64> {
        match self {
            DynModel::PseudoHamiltonian(m) => m.damping_values(),
            DynModel::Baseline(_) => Vec::new(),
        }
    }

    pub fn as_pseudo_hamiltonian(&self) -> Option<&PhModel> {
        match self {
            DynModel::PseudoHamiltonian(m) => Some(m),
            DynModel::Baseline(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{LeakForce, MassSpringSpec, SystemSpec, TankNetworkSpec};

    fn leaky_tank() -> SystemSpec {
        SystemSpec::TankNetwork(
            TankNetworkSpec::default_four_tank()
                .with_leaks(vec![LeakForce {
                    tank: 3,
                    coefficient: 30.0,
                    saturation: 0.3,
                }])
                .unwrap(),
        )
    }

    #[test]
    fn structure_matrix_rejects_non_skew() {
        assert!(StructureMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).is_err());
        assert!(StructureMatrix::new(2, vec![0.1, 1.0, -1.0, 0.0]).is_err());
        assert!(StructureMatrix::new(2, vec![0.0, 1.0, -1.0]).is_err());
        assert!(StructureMatrix::new(2, vec![0.0, 1.0, -1.0, 0.0]).is_ok());
    }

    #[test]
    fn incidence_structure_is_skew_and_matches_system() {
        let tank = TankNetworkSpec::default_four_tank();
        let s = StructureMatrix::from_incidence(tank.n_tanks, &tank.pipes);
        // Rebuilding through the validating constructor must succeed.
        StructureMatrix::new(s.dim(), s.entries().to_vec()).unwrap();
        // Top-right block equals Bᵀ from the system module.
        let b = tank.incidence();
        let (m, d) = (tank.n_pipes(), tank.dim());
        for e in 0..m {
            for j in 0..tank.n_tanks {
                assert_eq!(s.entries()[e * d + m + j], b[j * m + e]);
            }
        }
    }

    #[test]
    fn planted_models_match_direct_physics() {
        // Two independent code paths to the same dynamics: direct rhs vs
        // planted (S - R)∇H + f assembly.
        let systems = [
            SystemSpec::MassSpring(MassSpringSpec::default()),
            SystemSpec::TankNetwork(TankNetworkSpec::default_four_tank()),
            leaky_tank(),
        ];
        let mut r = crate::rng::stream(21, crate::rng::TAG_EVAL, 0);
        for sys in &systems {
            let model = sys.planted_model();
            for k in 0..50 {
                let x = sys.sample_initial(&mut r);
                let t = 0.37 * k as f64;
                let direct = sys.rhs(&x, t).unwrap();
                let assembled = model.eval(&x, t).unwrap();
                for (a, b) in direct.iter().zip(&assembled) {
                    assert!(
                        (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                        "planted mismatch {a} vs {b}"
                    );
                }
                // Energy agreement as well.
                let he = sys.exact_hamiltonian(&x).unwrap();
                let hm = model.hamiltonian_value(&x).unwrap();
                assert!((he - hm).abs() <= 1e-12 * he.abs().max(1.0));
                assert!((model.adjusted_hamiltonian(&x).unwrap() - he).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_plain_eval_agree_for_every_flavor() {
        let tank = leaky_tank();
        let msd = SystemSpec::MassSpring(MassSpringSpec::default());
        let mut models: Vec<(DynModel, usize)> = Vec::new();
        // Trainable PHNN with state+time force.
        let mut ph = DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1],
            hidden: 12,
            force: Some(ForceConfig {
                input: ForceInput::StateAndTime,
                mask: vec![1],
                hidden: 12,
            }),
        })
        .unwrap();
        ph.initialize(3);
        // Nudge damping off zero so the learned branch is exercised.
        if let Some(slice) = ph.params().component("damping") {
            ph.params_mut().slice_mut(slice)[0] = 0.17;
        }
        models.push((ph, 2));
        // Trainable PHNN, state-only force on the tank.
        let mut pht = DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 9,
            structure: tank.structure_matrix().entries().to_vec(),
            damping_indices: (0..5).collect(),
            hidden: 10,
            force: Some(ForceConfig {
                input: ForceInput::StateOnly,
                mask: vec![5, 6, 7, 8],
                hidden: 10,
            }),
        })
        .unwrap();
        pht.initialize(4);
        models.push((pht, 9));
        // Time-only force variant.
        let mut phft = DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1],
            hidden: 8,
            force: Some(ForceConfig {
                input: ForceInput::TimeOnly,
                mask: vec![1],
                hidden: 8,
            }),
        })
        .unwrap();
        phft.initialize(5);
        models.push((phft, 2));
        // Baselines.
        let mut b1 = DynModel::Baseline(BaselineModel::single(2, 15, true).unwrap());
        b1.initialize(6);
        models.push((b1, 2));
        let mut b2 = DynModel::Baseline(BaselineModel::split(2, 15).unwrap());
        b2.initialize(7);
        models.push((b2, 2));
        // Planted systems (sine force, leaks, fixed damping).
        models.push((DynModel::PseudoHamiltonian(msd.planted_model()), 2));
        models.push((DynModel::PseudoHamiltonian(tank.planted_model()), 9));

        let mut r = crate::rng::stream(33, crate::rng::TAG_EVAL, 1);
        use rand::Rng;
        for (model, dim) in &models {
            for k in 0..10 {
                let x: Vec<f64> = (0..*dim).map(|_| r.random_range(-1.0..1.0)).collect();
                let t = 0.29 * k as f64;
                let plain = model.eval(&x, t).unwrap();
                let mut tape = Tape::new(model.params().values());
                let leaf = tape.leaf(&x);
                let out = model.eval_tape(&mut tape, leaf, t);
                for (a, b) in tape.value(out).iter().zip(&plain) {
                    assert!((a - b).abs() < 1e-13, "tape {a} vs plain {b}");
                }
            }
        }
    }

    #[test]
    fn replace_force_changes_eval_by_exactly_the_force_difference() {
        let sys = leaky_tank();
        let model = sys.planted_model();
        let stripped = model.replace_force(ForceTerm::None).unwrap();
        let x = sys.sample_initial(&mut crate::rng::stream(2, crate::rng::TAG_EVAL, 5));
        let with = model.eval(&x, 0.0).unwrap();
        let without = stripped.eval(&x, 0.0).unwrap();
        let f = model.force_eval(&x, 0.0).unwrap();
        for i in 0..9 {
            assert!(((with[i] - without[i]) - f[i]).abs() < 1e-15);
        }
        // Grafting a network force is refused.
        assert!(model
            .replace_force(ForceTerm::Sine {
                index: 99,
                amplitude: 1.0,
                angular_frequency: 1.0,
                offset: 0.0
            })
            .is_err());
    }

    #[test]
    fn descriptor_roundtrip_preserves_architecture() {
        let tank = TankNetworkSpec::default_four_tank();
        let desc = ModelDescriptor::PseudoHamiltonian {
            dim: 9,
            structure: StructureMatrix::from_incidence(tank.n_tanks, &tank.pipes)
                .entries()
                .to_vec(),
            damping_indices: (0..5).collect(),
            hidden: 20,
            force: Some(ForceConfig {
                input: ForceInput::StateOnly,
                mask: vec![8],
                hidden: 20,
            }),
        };
        let model = DynModel::from_descriptor(&desc).unwrap();
        assert_eq!(model.descriptor().unwrap(), desc);
        let baseline = DynModel::Baseline(BaselineModel::single(2, 150, true).unwrap());
        assert_eq!(
            baseline.descriptor().unwrap(),
            ModelDescriptor::BaselineSingle {
                dim: 2,
                hidden: 150,
                include_time: true
            }
        );
    }

    #[test]
    fn descriptor_is_refused_after_force_replacement() {
        let desc = ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1],
            hidden: 6,
            force: Some(ForceConfig {
                input: ForceInput::TimeOnly,
                mask: vec![1],
                hidden: 6,
            }),
        };
        let DynModel::PseudoHamiltonian(model) = DynModel::from_descriptor(&desc).unwrap()
        else {
            unreachable!()
        };
        let swapped = model.replace_force(ForceTerm::None).unwrap();
        assert!(swapped.descriptor().is_err());
    }

    #[test]
    fn bad_descriptors_are_rejected() {
        // Mask out of range.
        assert!(DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1],
            hidden: 4,
            force: Some(ForceConfig {
                input: ForceInput::TimeOnly,
                mask: vec![2],
                hidden: 4,
            }),
        })
        .is_err());
        // Duplicate damping index.
        assert!(DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1, 1],
            hidden: 4,
            force: None,
        })
        .is_err());
        // Non-skew structure.
        assert!(DynModel::from_descriptor(&ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, 1.0, 0.0],
            damping_indices: vec![1],
            hidden: 4,
            force: None,
        })
        .is_err());
    }

    #[test]
    fn initialization_is_deterministic_and_stream_separated() {
        let desc = ModelDescriptor::PseudoHamiltonian {
            dim: 2,
            structure: vec![0.0, 1.0, -1.0, 0.0],
            damping_indices: vec![1],
            hidden: 10,
            force: Some(ForceConfig {
                input: ForceInput::TimeOnly,
                mask: vec![1],
                hidden: 10,
            }),
        };
        let mut a = DynModel::from_descriptor(&desc).unwrap();
        let mut b = DynModel::from_descriptor(&desc).unwrap();
        a.initialize(99);
        b.initialize(99);
        assert_eq!(a.params().values(), b.params().values());
        let mut c = DynModel::from_descriptor(&desc).unwrap();
        c.initialize(100);
        assert_ne!(a.params().values(), c.params().values());
        // Damping starts at zero.
        assert_eq!(a.damping_values(), vec![0.0]);
    }
}
