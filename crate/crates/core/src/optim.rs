//! Adam over flat parameter buffers and an exponential learning-rate decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update `p -= lr · m̂ / (√v̂ + ε)`; `lr_of(i)` gives the rate for
    /// element `i`. Elements with a zero rate keep their moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_of: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let lr = lr_of(i);
            if lr == 0.0 {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Zeroes both moments of elements in `range`.
    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Log-linear interpolation from `initial` to `initial · final_ratio` over
/// `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpDecay {
    pub initial: f64,
    pub final_ratio: f64,
}

impl ExpDecay {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.initial;
        }
        let u = (step as f64 / total as f64).clamp(0.0, 1.0);
        self.initial * self.final_ratio.powf(u)
    }
}
