//! Adam optimizer with bias correction.

use alloc::vec;
use alloc::vec::Vec;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            ..Adam::default()
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: moments decay toward the gradient, bias-corrected step.
    pub fn step(&mut self, opt: &Adam, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - libm::pow(opt.beta1, self.t as f64);
        let b2t = 1.0 - libm::pow(opt.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = opt.beta1 * self.m[i] + (1.0 - opt.beta1) * g;
            self.v[i] = opt.beta2 * self.v[i] + (1.0 - opt.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= opt.learning_rate * mhat / (libm::sqrt(vhat) + opt.epsilon);
        }
    }
}
