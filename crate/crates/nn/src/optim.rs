//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::NnError;

/// Moment estimates and step count, for resuming an optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> AdamState {
        AdamState { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn restore(&mut self, state: AdamState) -> Result<(), NnError> {
        let sizes = |x: &Vec<Vec<f64>>| x.iter().map(Vec::len).collect::<Vec<_>>();
        if sizes(&state.m) != sizes(&self.m) || sizes(&state.v) != sizes(&self.v) {
            return Err(NnError::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    /// Applies one update; `grads` are aligned with `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(5.0));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let w = ps.get(id).item();
            opt.step(&mut ps, &[Tensor::scalar(2.0 * (w - 1.0))]);
        }
        assert!((ps.get(id).item() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row(&[3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 2.0), 5.0);
        assert!((g[0].norm_sq().sqrt() - 2.0).abs() < 1e-12);
        let mut small = vec![Tensor::row(&[0.3, 0.4])];
        clip_grad_norm(&mut small, 2.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
