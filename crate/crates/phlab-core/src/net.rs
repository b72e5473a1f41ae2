//! Dense scalar network and its closed-form input gradient.
//!
//! The architecture is fixed: two hidden layers of equal width, `tanh` after
//! the first, `relu` after the second, linear output. For a scalar-output
//! net the input gradient has the closed form
//!
//! ```text
//!     ∇_x N(x) = W1ᵀ diag(1 - tanh²(z1)) W2ᵀ diag(step(z2)) w3ᵀ
//! ```
//!
//! with `step(z) = 1 if z > 0 else 0` (so the relu kink contributes zero).
//! Both the value and this gradient exist in two forms: a plain evaluation
//! on `&[f64]`, and a tape builder that records the same expression on the
//! autodiff tape. The tape form makes the input gradient an ordinary
//! first-order expression, so reverse mode through it yields exact
//! parameter gradients (and exact Hessian-vector products in `x`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{ParamBuilder, ParamSlice, ParamVector};
use crate::tape::{Tape, VarId};

/// Dense net `input_dim -> hidden (tanh) -> hidden (relu) -> output_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalarNet {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    w1: ParamSlice,
    b1: ParamSlice,
    w2: ParamSlice,
    b2: ParamSlice,
    w3: ParamSlice,
    b3: ParamSlice,
}

impl ScalarNet {
    /// Register the layer parameters under `name.*` and return the net.
    pub fn register(
        b: &mut ParamBuilder,
        name: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
    ) -> Self {
        assert!(input_dim > 0 && hidden > 0 && output_dim > 0);
        ScalarNet {
            input_dim,
            hidden,
            output_dim,
            w1: b.register(&format!("{name}.w1"), hidden * input_dim),
            b1: b.register(&format!("{name}.b1"), hidden),
            w2: b.register(&format!("{name}.w2"), hidden * hidden),
            b2: b.register(&format!("{name}.b2"), hidden),
            w3: b.register(&format!("{name}.w3"), output_dim * hidden),
            b3: b.register(&format!("{name}.b3"), output_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len + self.b1.len + self.w2.len + self.b2.len + self.w3.len + self.b3.len
    }

    /// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero biases.
    ///
    /// Weights are drawn in layer order from the given stream, so the same
    /// stream always produces the same initialization.
    pub fn init_glorot<R: Rng + ?Sized>(&self, params: &mut ParamVector, rng: &mut R) {
        let layers = [
            (self.w1, self.input_dim, self.hidden),
            (self.w2, self.hidden, self.hidden),
            (self.w3, self.hidden, self.output_dim),
        ];
        for (w, fan_in, fan_out) in layers {
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for v in params.slice_mut(w) {
                *v = rng.random_range(-bound..bound);
            }
        }
        for b in [self.b1, self.b2, self.b3] {
            params.slice_mut(b).fill(0.0);
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations and activations of both hidden layers.
    fn hidden_pass(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut z1 = vec![0.0; h];
        linalg::matvec(&p[self.w1.range()], h, self.input_dim, x, &mut z1);
        for (z, b) in z1.iter_mut().zip(&p[self.b1.range()]) {
            *z += b;
        }
        let a1: Vec<f64> = z1.iter().map(|&z| libm::tanh(z)).collect();
        let mut z2 = vec![0.0; h];
        linalg::matvec(&p[self.w2.range()], h, h, &a1, &mut z2);
        for (z, b) in z2.iter_mut().zip(&p[self.b2.range()]) {
            *z += b;
        }
        (a1, z2, z1)
    }

    /// Plain forward pass.
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (_, z2, _) = self.hidden_pass(params, x);
        let a2: Vec<f64> = z2.iter().map(|&z| z.max(0.0)).collect();
        let mut y = vec![0.0; self.output_dim];
        linalg::matvec(
            &params[self.w3.range()],
            self.output_dim,
            self.hidden,
            &a2,
            &mut y,
        );
        for (yi, b) in y.iter_mut().zip(&params[self.b3.range()]) {
            *yi += b;
        }
        Ok(y)
    }

    /// Plain closed-form input gradient; requires `output_dim == 1`.
    pub fn grad_input(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if self.output_dim != 1 {
            return Err(Error::invalid(
                "grad_input requires a scalar-output network",
            ));
        }
        let h = self.hidden;
        let (a1, z2, _) = self.hidden_pass(params, x);
        // v2 = step(z2) ⊙ w3ᵀ
        let w3 = &params[self.w3.range()];
        let v2: Vec<f64> = z2
            .iter()
            .zip(w3)
            .map(|(&z, &w)| if z > 0.0 { w } else { 0.0 })
            .collect();
        // v1 = (1 - a1²) ⊙ W2ᵀ v2
        let mut v1 = vec![0.0; h];
        linalg::mat_t_vec(&params[self.w2.range()], h, h, &v2, &mut v1);
        for (v, a) in v1.iter_mut().zip(&a1) {
            *v *= 1.0 - a * a;
        }
        // g = W1ᵀ v1
        let mut g = vec![0.0; self.input_dim];
        linalg::mat_t_vec(&params[self.w1.range()], h, self.input_dim, &v1, &mut g);
        Ok(g)
    }

    /// Record the forward pass on the tape; returns the output variable.
    pub fn forward_tape(&self, tape: &mut Tape, x: VarId) -> VarId {
        debug_assert_eq!(tape.len_of(x), self.input_dim);
        let z1 = tape.affine(self.w1, Some(self.b1), x, self.hidden, self.input_dim);
        let a1 = tape.tanh(z1);
        let z2 = tape.affine(self.w2, Some(self.b2), a1, self.hidden, self.hidden);
        let a2 = tape.relu(z2);
        tape.affine(self.w3, Some(self.b3), a2, self.output_dim, self.hidden)
    }

    /// Record the closed-form input gradient on the tape.
    ///
    /// The gradient is expressed through first-order primitives
    /// (`1 - tanh²` via the tanh activation, the relu step mask with zero
    /// local derivative), so a single reverse sweep through the result
    /// differentiates it in both parameters and `x`.
    pub fn grad_input_tape(&self, tape: &mut Tape, x: VarId) -> VarId {
        debug_assert_eq!(tape.len_of(x), self.input_dim);
        assert_eq!(self.output_dim, 1, "grad_input requires scalar output");
        let h = self.hidden;
        let z1 = tape.affine(self.w1, Some(self.b1), x, h, self.input_dim);
        let a1 = tape.tanh(z1);
        let t1p = tape.one_minus_square(a1);
        let z2 = tape.affine(self.w2, Some(self.b2), a1, h, h);
        let s2 = tape.relu_step(z2);
        let w3 = tape.gather_params(self.w3);
        let v2 = tape.hadamard(s2, w3);
        let v2b = tape.mat_t_vec(self.w2, v2, h, h);
        let v1 = tape.hadamard(t1p, v2b);
        tape.mat_t_vec(self.w1, v1, h, self.input_dim)
    }

    /// Smallest |pre-activation| of the relu layer: distance to the nearest
    /// kink. Finite-difference checks use this to reject sample points where
    /// the stencil would straddle the non-differentiability.
    pub fn kink_margin(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let (_, z2, _) = self.hidden_pass(params, x);
        Ok(z2.iter().fold(f64::INFINITY, |m, &z| m.min(libm::fabs(z))))
    }
}
