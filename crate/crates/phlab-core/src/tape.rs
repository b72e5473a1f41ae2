//! Reverse-mode automatic differentiation on a write-once tape.
//!
//! Expressions are recorded as vector-valued nodes in an append-only arena;
//! values are computed eagerly as nodes are pushed. A single reverse sweep
//! ([`Tape::backward`]) then accumulates the gradient of a scalar output
//! with respect to the flat parameter vector, and adjoints of every node —
//! including leaves, which is how the control planner reads gradients with
//! respect to its decision variables.
//!
//! The op set is deliberately small and first-order. Expressions that are
//! mathematically higher-order (the input gradient of a network appearing
//! inside a discretization) are spelled out with these primitives, so one
//! reverse sweep differentiates them exactly; no nested tapes are needed.
//!
//! Parameters enter through [`ParamSlice`] handles (`affine`, `mat_t_vec`,
//! `gather_params`), never as leaves, so the tape knows exactly where each
//! parameter is used and writes its gradient straight into a flat buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg;
use crate::params::ParamSlice;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// params[p], as a value on the tape
    GatherParams { p: ParamSlice },
    /// W x (+ b), W row-major (rows, cols)
    Affine {
        w: ParamSlice,
        b: Option<ParamSlice>,
        x: VarId,
        rows: u32,
        cols: u32,
    },
    /// Wᵀ x, W row-major (rows, cols), x of length rows
    MatTVec {
        w: ParamSlice,
        x: VarId,
        rows: u32,
        cols: u32,
    },
    /// M x for a constant matrix M, row-major (rows, cols)
    MatConstVec { m: Vec<f64>, x: VarId, cols: u32 },
    /// dim-length vector with y[idx[k]] = x[k], zero elsewhere
    Scatter { x: VarId, idx: Vec<u32> },
    /// contiguous sub-vector x[start .. start+len]
    Segment { x: VarId, start: u32 },
    /// [x; value]
    AppendScalar { x: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    /// c · a
    Scale { a: VarId, c: f64 },
    /// a + c · b
    AddScaled { a: VarId, b: VarId, c: f64 },
    Hadamard { a: VarId, b: VarId },
    HadamardConst { a: VarId, c: Vec<f64> },
    Tanh { a: VarId },
    /// 1 - a²  (pair with `tanh` to get tanh′ without re-evaluating it)
    OneMinusSquare { a: VarId },
    Relu { a: VarId },
    /// 1 if a > 0 else 0, with zero local derivative
    ReluStep,
    Abs { a: VarId },
    /// clamp(a, lo, hi), zero derivative outside (lo, hi)
    ClampSat { a: VarId, lo: f64, hi: f64 },
    /// scalar ⟨a, b⟩
    Dot { a: VarId, b: VarId },
    /// scalar Σᵢ aᵢ
    SumAll { a: VarId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    off: u32,
    len: u32,
}

/// Recyclable backing buffers of a tape (capacity reuse across steps).
#[derive(Debug, Default)]
pub struct TapeStorage {
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

/// Gradient accumulator for [`Tape::backward`].
///
/// `params` accumulates across backward calls (callers zero it at batch
/// boundaries); node adjoints refer to the most recent call only.
#[derive(Debug)]
pub struct Gradients {
    pub params: Vec<f64>,
    adj: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients {
            params: vec![0.0; n_params],
            adj: Vec::new(),
        }
    }

    /// Zero the accumulated parameter gradient.
    pub fn reset(&mut self) {
        self.params.fill(0.0);
    }

    /// Adjoint of `v` from the most recent backward sweep.
    pub fn adjoint(&self, tape: &Tape<'_>, v: VarId) -> &[f64] {
        let n = &tape.nodes[v.0 as usize];
        &self.adj[n.off as usize..(n.off + n.len) as usize]
    }
}

/// Append-only autodiff tape borrowing the flat parameter vector.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self::with_storage(params, TapeStorage::default())
    }

    /// Build on recycled buffers to avoid reallocation in hot loops.
    pub fn with_storage(params: &'p [f64], mut storage: TapeStorage) -> Self {
        storage.nodes.clear();
        storage.vals.clear();
        Tape {
            params,
            nodes: storage.nodes,
            vals: storage.vals,
        }
    }

    pub fn into_storage(self) -> TapeStorage {
        TapeStorage {
            nodes: self.nodes,
            vals: self.vals,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn len_of(&self, v: VarId) -> usize {
        self.nodes[v.0 as usize].len as usize
    }

    /// Current value of a node.
    #[inline]
    pub fn value(&self, v: VarId) -> &[f64] {
        let n = &self.nodes[v.0 as usize];
        &self.vals[n.off as usize..(n.off + n.len) as usize]
    }

    #[inline]
    fn val_range(&self, v: VarId) -> (usize, usize) {
        let n = &self.nodes[v.0 as usize];
        (n.off as usize, n.len as usize)
    }

    /// Append a node of length `len`; returns (id, value offset).
    fn push(&mut self, op: Op, len: usize) -> (VarId, usize) {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            off: off as u32,
            len: len as u32,
        });
        (id, off)
    }

    /// Constant / input leaf. Its adjoint is available after `backward`.
    pub fn leaf(&mut self, values: &[f64]) -> VarId {
        let (id, off) = self.push(Op::Leaf, values.len());
        self.vals[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn leaf_scalar(&mut self, value: f64) -> VarId {
        self.leaf(&[value])
    }

    pub fn gather_params(&mut self, p: ParamSlice) -> VarId {
        let (id, off) = self.push(Op::GatherParams { p }, p.len);
        self.vals[off..off + p.len].copy_from_slice(&self.params[p.range()]);
        id
    }

    pub fn affine(
        &mut self,
        w: ParamSlice,
        b: Option<ParamSlice>,
        x: VarId,
        rows: usize,
        cols: usize,
    ) -> VarId {
        debug_assert_eq!(w.len, rows * cols);
        debug_assert_eq!(self.len_of(x), cols);
        let (x_off, _) = self.val_range(x);
        let (id, off) = self.push(
            Op::Affine {
                w,
                b,
                x,
                rows: rows as u32,
                cols: cols as u32,
            },
            rows,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        linalg::matvec(
            &self.params[w.range()],
            rows,
            cols,
            &prev[x_off..x_off + cols],
            out,
        );
        if let Some(b) = b {
            debug_assert_eq!(b.len, rows);
            for (o, bv) in out.iter_mut().zip(&self.params[b.range()]) {
                *o += bv;
            }
        }
        id
    }

    pub fn mat_t_vec(&mut self, w: ParamSlice, x: VarId, rows: usize, cols: usize) -> VarId {
        debug_assert_eq!(w.len, rows * cols);
        debug_assert_eq!(self.len_of(x), rows);
        let (x_off, _) = self.val_range(x);
        let (id, off) = self.push(
            Op::MatTVec {
                w,
                x,
                rows: rows as u32,
                cols: cols as u32,
            },
            cols,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        linalg::mat_t_vec(
            &self.params[w.range()],
            rows,
            cols,
            &prev[x_off..x_off + rows],
            out,
        );
        id
    }

    pub fn mat_const_vec(&mut self, m: &[f64], rows: usize, cols: usize, x: VarId) -> VarId {
        debug_assert_eq!(m.len(), rows * cols);
        debug_assert_eq!(self.len_of(x), cols);
        let (x_off, _) = self.val_range(x);
        let (id, off) = self.push(
            Op::MatConstVec {
                m: m.to_vec(),
                x,
                cols: cols as u32,
            },
            rows,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        let Op::MatConstVec { m, .. } = &self.nodes[id.0 as usize].op else {
            unreachable!()
        };
        linalg::matvec(m, rows, cols, &prev[x_off..x_off + cols], out);
        id
    }

    /// Place x[k] at position idx[k] of a zero vector of length `dim`.
    pub fn scatter(&mut self, x: VarId, idx: &[usize], dim: usize) -> VarId {
        debug_assert_eq!(self.len_of(x), idx.len());
        debug_assert!(idx.iter().all(|&i| i < dim));
        let (x_off, x_len) = self.val_range(x);
        let (id, off) = self.push(
            Op::Scatter {
                x,
                idx: idx.iter().map(|&i| i as u32).collect(),
            },
            dim,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = prev[x_off + k];
        }
        debug_assert_eq!(x_len, idx.len());
        id
    }

    pub fn segment(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        debug_assert!(start + len <= self.len_of(x));
        let (x_off, _) = self.val_range(x);
        let (id, off) = self.push(
            Op::Segment {
                x,
                start: start as u32,
            },
            len,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        out.copy_from_slice(&prev[x_off + start..x_off + start + len]);
        id
    }

    /// [x; value] — append one scalar (used for time-augmented inputs).
    pub fn append_scalar(&mut self, x: VarId, value: f64) -> VarId {
        let (x_off, x_len) = self.val_range(x);
        let (id, off) = self.push(Op::AppendScalar { x }, x_len + 1);
        let (prev, out) = self.vals.split_at_mut(off);
        out[..x_len].copy_from_slice(&prev[x_off..x_off + x_len]);
        out[x_len] = value;
        id
    }

    fn binary_elementwise(
        &mut self,
        a: VarId,
        b: VarId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> VarId {
        let n = self.len_of(a);
        debug_assert_eq!(self.len_of(b), n);
        let (a_off, _) = self.val_range(a);
        let (b_off, _) = self.val_range(b);
        let (id, off) = self.push(op, n);
        let (prev, out) = self.vals.split_at_mut(off);
        for i in 0..n {
            out[i] = f(prev[a_off + i], prev[b_off + i]);
        }
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// a + c·b
    pub fn add_scaled(&mut self, a: VarId, b: VarId, c: f64) -> VarId {
        self.binary_elementwise(a, b, Op::AddScaled { a, b, c }, |x, y| x + c * y)
    }

    pub fn hadamard(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_elementwise(a, b, Op::Hadamard { a, b }, |x, y| x * y)
    }

    fn unary_elementwise(&mut self, a: VarId, op: Op, f: impl Fn(f64) -> f64) -> VarId {
        let n = self.len_of(a);
        let (a_off, _) = self.val_range(a);
        let (id, off) = self.push(op, n);
        let (prev, out) = self.vals.split_at_mut(off);
        for i in 0..n {
            out[i] = f(prev[a_off + i]);
        }
        id
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        self.unary_elementwise(a, Op::Scale { a, c }, |x| c * x)
    }

    pub fn hadamard_const(&mut self, a: VarId, c: &[f64]) -> VarId {
        let n = self.len_of(a);
        debug_assert_eq!(c.len(), n);
        let (a_off, _) = self.val_range(a);
        let (id, off) = self.push(
            Op::HadamardConst { a, c: c.to_vec() },
            n,
        );
        let (prev, out) = self.vals.split_at_mut(off);
        let Op::HadamardConst { c, .. } = &self.nodes[id.0 as usize].op else {
            unreachable!()
        };
        for i in 0..n {
            out[i] = c[i] * prev[a_off + i];
        }
        id
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        self.unary_elementwise(a, Op::Tanh { a }, libm::tanh)
    }

    pub fn one_minus_square(&mut self, a: VarId) -> VarId {
        self.unary_elementwise(a, Op::OneMinusSquare { a }, |x| 1.0 - x * x)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary_elementwise(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn relu_step(&mut self, a: VarId) -> VarId {
        self.unary_elementwise(a, Op::ReluStep, |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary_elementwise(a, Op::Abs { a }, libm::fabs)
    }

    pub fn clamp_sat(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        debug_assert!(lo <= hi);
        self.unary_elementwise(a, Op::ClampSat { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> VarId {
        let n = self.len_of(a);
        debug_assert_eq!(self.len_of(b), n);
        let (a_off, _) = self.val_range(a);
        let (b_off, _) = self.val_range(b);
        let (id, off) = self.push(Op::Dot { a, b }, 1);
        let (prev, out) = self.vals.split_at_mut(off);
        out[0] = linalg::dot(&prev[a_off..a_off + n], &prev[b_off..b_off + n]);
        id
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let (a_off, n) = self.val_range(a);
        let (id, off) = self.push(Op::SumAll { a }, 1);
        let (prev, out) = self.vals.split_at_mut(off);
        out[0] = prev[a_off..a_off + n].iter().sum();
        id
    }

    /// Reverse sweep from a scalar output.
    ///
    /// Parameter gradients are *accumulated* into `grads.params`; node
    /// adjoints are overwritten and refer to this sweep only.
    pub fn backward(&self, out: VarId, grads: &mut Gradients) {
        assert_eq!(self.len_of(out), 1, "backward needs a scalar output");
        assert_eq!(
            grads.params.len(),
            self.params.len(),
            "gradient buffer sized for a different parameter vector"
        );
        grads.adj.clear();
        grads.adj.resize(self.vals.len(), 0.0);
        let out_node = &self.nodes[out.0 as usize];
        grads.adj[out_node.off as usize] = 1.0;

        for k in (0..=out.0 as usize).rev() {
            let node = &self.nodes[k];
            let off = node.off as usize;
            let len = node.len as usize;
            // Children precede this node in the arena, so split once: the
            // node's own adjoint is read-only, children are written.
            let (child_adj, rest) = grads.adj.split_at_mut(off);
            let ybar = &rest[..len];
            if ybar.iter().all(|&v| v == 0.0) {
                continue;
            }
            let vals = &self.vals;
            match &node.op {
                Op::Leaf => {}
                Op::GatherParams { p } => {
                    linalg::axpy(&mut grads.params[p.range()], 1.0, ybar);
                }
                Op::Affine { w, b, x, rows, cols } => {
                    let (rows, cols) = (*rows as usize, *cols as usize);
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize;
                    let x_vals = &vals[x_off..x_off + cols];
                    // x̄ += Wᵀ ȳ
                    let mut xbar = vec![0.0; cols];
                    linalg::mat_t_vec(&self.params[w.range()], rows, cols, ybar, &mut xbar);
                    linalg::axpy(&mut child_adj[x_off..x_off + cols], 1.0, &xbar);
                    // dW += ȳ xᵀ, db += ȳ
                    linalg::outer_acc(&mut grads.params[w.range()], ybar, x_vals);
                    if let Some(b) = b {
                        linalg::axpy(&mut grads.params[b.range()], 1.0, ybar);
                    }
                }
                Op::MatTVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows as usize, *cols as usize);
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize;
                    let x_vals = &vals[x_off..x_off + rows];
                    // x̄ += W ȳ
                    let mut xbar = vec![0.0; rows];
                    linalg::matvec(&self.params[w.range()], rows, cols, ybar, &mut xbar);
                    linalg::axpy(&mut child_adj[x_off..x_off + rows], 1.0, &xbar);
                    // dW += x ȳᵀ
                    linalg::outer_acc(&mut grads.params[w.range()], x_vals, ybar);
                }
                Op::MatConstVec { m, x, cols } => {
                    let cols = *cols as usize;
                    let rows = len;
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize;
                    let mut xbar = vec![0.0; cols];
                    linalg::mat_t_vec(m, rows, cols, ybar, &mut xbar);
                    linalg::axpy(&mut child_adj[x_off..x_off + cols], 1.0, &xbar);
                }
                Op::Scatter { x, idx } => {
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize;
                    for (k, &i) in idx.iter().enumerate() {
                        child_adj[x_off + k] += ybar[i as usize];
                    }
                }
                Op::Segment { x, start } => {
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize + *start as usize;
                    linalg::axpy(&mut child_adj[x_off..x_off + len], 1.0, ybar);
                }
                Op::AppendScalar { x } => {
                    let xn = &self.nodes[x.0 as usize];
                    let x_off = xn.off as usize;
                    linalg::axpy(&mut child_adj[x_off..x_off + len - 1], 1.0, &ybar[..len - 1]);
                }
                Op::Add { a, b } => {
                    for v in [a, b] {
                        let vn = &self.nodes[v.0 as usize];
                        let v_off = vn.off as usize;
                        linalg::axpy(&mut child_adj[v_off..v_off + len], 1.0, ybar);
                    }
                }
                Op::Sub { a, b } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    linalg::axpy(&mut child_adj[a_off..a_off + len], 1.0, ybar);
                    let bn = &self.nodes[b.0 as usize];
                    let b_off = bn.off as usize;
                    linalg::axpy(&mut child_adj[b_off..b_off + len], -1.0, ybar);
                }
                Op::Scale { a, c } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    linalg::axpy(&mut child_adj[a_off..a_off + len], *c, ybar);
                }
                Op::AddScaled { a, b, c } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    linalg::axpy(&mut child_adj[a_off..a_off + len], 1.0, ybar);
                    let bn = &self.nodes[b.0 as usize];
                    let b_off = bn.off as usize;
                    linalg::axpy(&mut child_adj[b_off..b_off + len], *c, ybar);
                }
                Op::Hadamard { a, b } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    let bn = &self.nodes[b.0 as usize];
                    let b_off = bn.off as usize;
                    for i in 0..len {
                        child_adj[a_off + i] += vals[b_off + i] * ybar[i];
                        child_adj[b_off + i] += vals[a_off + i] * ybar[i];
                    }
                }
                Op::HadamardConst { a, c } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        child_adj[a_off + i] += c[i] * ybar[i];
                    }
                }
                Op::Tanh { a } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        let t = vals[off + i];
                        child_adj[a_off + i] += (1.0 - t * t) * ybar[i];
                    }
                }
                Op::OneMinusSquare { a } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        child_adj[a_off + i] += -2.0 * vals[a_off + i] * ybar[i];
                    }
                }
                Op::Relu { a } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        if vals[a_off + i] > 0.0 {
                            child_adj[a_off + i] += ybar[i];
                        }
                    }
                }
                // The step mask is piecewise constant: no gradient flows.
                Op::ReluStep => {}
                Op::Abs { a } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        let v = vals[a_off + i];
                        if v > 0.0 {
                            child_adj[a_off + i] += ybar[i];
                        } else if v < 0.0 {
                            child_adj[a_off + i] -= ybar[i];
                        }
                    }
                }
                Op::ClampSat { a, lo, hi } => {
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    for i in 0..len {
                        let v = vals[a_off + i];
                        if v > *lo && v < *hi {
                            child_adj[a_off + i] += ybar[i];
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let g = ybar[0];
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    let bn = &self.nodes[b.0 as usize];
                    let b_off = bn.off as usize;
                    let n = an.len as usize;
                    if a == b {
                        for i in 0..n {
                            child_adj[a_off + i] += 2.0 * g * vals[a_off + i];
                        }
                    } else {
                        for i in 0..n {
                            child_adj[a_off + i] += g * vals[b_off + i];
                            child_adj[b_off + i] += g * vals[a_off + i];
                        }
                    }
                }
                Op::SumAll { a } => {
                    let g = ybar[0];
                    let an = &self.nodes[a.0 as usize];
                    let a_off = an.off as usize;
                    let n = an.len as usize;
                    for v in &mut child_adj[a_off..a_off + n] {
                        *v += g;
                    }
                }
            }
        }
    }
}
