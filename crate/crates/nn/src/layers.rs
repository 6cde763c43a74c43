//! Dense building blocks: affine maps, MLPs, layer normalization, scalar encoders.

use rand::Rng;

use crate::init::orthogonal;
use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), orthogonal(rng, in_dim, out_dim, gain));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self { in_dim, out_dim, weight, bias }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, NnError> {
        if tape.value(x).cols() != self.in_dim {
            return Err(NnError::Shape(format!(
                "linear expects {} inputs, got {}",
                self.in_dim,
                tape.value(x).cols()
            )));
        }
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }

    /// Tape-free forward pass for inference.
    pub fn eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = x.matmul(ps.get(self.weight))?;
        let b = ps.get(self.bias).data();
        let cols = y.cols();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[k % cols];
        }
        Ok(y)
    }
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `hidden` lists the widths of the hidden layers; `out_gain` scales the
    /// orthogonal init of the output layer.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (k, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(ps, &format!("{name}.{k}"), prev, h, 2f64.sqrt(), rng));
            prev = h;
        }
        layers.push(Linear::new(ps, &format!("{name}.out"), prev, out_dim, out_gain, rng));
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var, NnError> {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, p, x)?;
            if k < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Tape-free forward pass for inference.
    pub fn eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor, NnError> {
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.eval(ps, &x)?;
            if k < last {
                x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(x)
    }
}

/// Layer normalization with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    offset: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let offset = ps.add(format!("{name}.offset"), Tensor::zeros(1, dim));
        Self { gain, offset }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, NnError> {
        let n = tape.layer_norm(x, Self::EPS);
        let g = tape.mul_row(n, p.var(self.gain))?;
        tape.add_row(g, p.var(self.offset))
    }
}

/// Learned affine encoding of the scalar budget `z` into a feature vector.
#[derive(Clone, Debug)]
pub struct ScalarEncoder {
    map: Linear,
}

impl ScalarEncoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { map: Linear::new(ps, name, 1, dim, 1.0, rng) }
    }

    pub fn dim(&self) -> usize {
        self.map.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.map.weight()
    }

    pub fn bias(&self) -> ParamId {
        self.map.bias()
    }

    /// `z` is an `n x 1` column; the result is `n x dim`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var, NnError> {
        self.map.forward(tape, p, z)
    }

    pub fn eval(&self, ps: &ParamSet, z: &Tensor) -> Result<Tensor, NnError> {
        self.map.eval(ps, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoder_is_affine_and_zero_at_origin() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let enc = ScalarEncoder::new(&mut ps, "z", 8, &mut rng);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let z = tape.constant(Tensor::column(&[0.0, 0.7, 1.4]));
        let e = enc.forward(&mut tape, &p, z).unwrap();
        let out = tape.value(e);
        assert_eq!(out.shape(), [3, 8]);
        for j in 0..8 {
            assert_eq!(out.get(0, j), 0.0);
            let lhs = out.get(2, j) - out.get(0, j);
            let rhs = 2.0 * (out.get(1, j) - out.get(0, j));
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradient_is_weight_column_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let enc = ScalarEncoder::new(&mut ps, "z", 8, &mut rng);
        let z0 = 0.3;
        let eval = |z: f64| {
            let mut tape = Tape::new();
            let p = ps.bind_frozen(&mut tape);
            let zv = tape.constant(Tensor::scalar(z));
            let e = enc.forward(&mut tape, &p, zv).unwrap();
            let s = tape.sum(e);
            tape.value(s).item()
        };
        let eps = 1e-5;
        let fd = (eval(z0 + eps) - eval(z0 - eps)) / (2.0 * eps);
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let zv = tape.leaf(Tensor::scalar(z0));
        let e = enc.forward(&mut tape, &p, zv).unwrap();
        let s = tape.sum(e);
        let g = tape.backward(s).unwrap().get(zv).unwrap().item();
        let w_sum: f64 = ps.get(enc.weight()).data().iter().sum();
        assert!((g - w_sum).abs() < 1e-12);
        assert!((fd - w_sum).abs() < 1e-8);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(1, 4));
        assert!(lin.forward(&mut tape, &p, x).is_err());
    }

    #[test]
    fn eval_matches_tape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(&mut ps, "m", 3, &[5, 4], 2, 1.0, &mut rng);
        for t in ps.tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(k, v)| *v += 0.01 * k as f64);
        }
        let x = Tensor::new(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &mlp.eval(&ps, &x).unwrap());
    }
}
