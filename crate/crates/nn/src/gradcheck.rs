//! Central finite-difference checking of tape gradients.
//!
//! The reference derivative only ever evaluates the forward pass, so it is
//! independent of every backward rule it is used to check.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::NnError;

/// Tolerances: an entry passes when its absolute error is at most `abs_tol`
/// or its relative error is at most `rel_tol`.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-4, abs_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.entries += other.entries;
        self.failures += other.failures;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every entry of every input.
pub fn check<F>(inputs: &[Tensor], tol: Tolerance, f: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[k]);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + tol.eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - tol.eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * tol.eps);
            let ad = analytic.data()[i];
            let abs = (fd - ad).abs();
            let rel = abs / fd.abs().max(ad.abs()).max(f64::MIN_POSITIVE);
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > tol.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > tol.rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued node to a scalar with fixed weights, so a
/// gradient check covers every output entry.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, NnError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

mod suite {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    use super::*;
    use crate::graph::{GraphAttention, GraphAttnDims, GraphBuilder};
    use crate::params::ParamSet;

    type Case = fn(&mut dyn rand::RngCore) -> Result<GradCheckReport, NnError>;

    fn randn(rng: &mut dyn rand::RngCore, r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_parts(r, c, data)
    }

    /// Entries kept at least `gap` away from every point in `kinks`.
    fn randn_away(rng: &mut dyn rand::RngCore, r: usize, c: usize, kinks: &[f64]) -> Tensor {
        let gap = 1e-3;
        let data = (0..r * c)
            .map(|_| loop {
                let x: f64 = rng.sample(StandardNormal);
                if kinks.iter().all(|k| (x - k).abs() > gap) {
                    break x;
                }
            })
            .collect();
        Tensor::from_parts(r, c, data)
    }

    fn dims(rng: &mut dyn rand::RngCore) -> (usize, usize) {
        (rng.gen_range(1..5), rng.gen_range(1..5))
    }

    fn unary(
        rng: &mut dyn rand::RngCore,
        x: Tensor,
        op: fn(&mut Tape, Var) -> Var,
    ) -> Result<GradCheckReport, NnError> {
        let probe = {
            let mut t = Tape::new();
            let vx = t.constant(x.clone());
            let y = op(&mut t, vx);
            t.value(y).shape()
        };
        let w = randn(rng, probe[0], probe[1]);
        check(&[x], Tolerance::default(), move |t, v| {
            let y = op(t, v[0]);
            project(t, y, &w)
        })
    }

    fn binary(
        rng: &mut dyn rand::RngCore,
        a: Tensor,
        b: Tensor,
        op: fn(&mut Tape, Var, Var) -> Result<Var, NnError>,
    ) -> Result<GradCheckReport, NnError> {
        let probe = {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = op(&mut t, va, vb)?;
            t.value(y).shape()
        };
        let w = randn(rng, probe[0], probe[1]);
        check(&[a, b], Tolerance::default(), move |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, &w)
        })
    }

    fn case_matmul(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..5);
        let (a, b) = (randn(rng, m, k), randn(rng, k, n));
        binary(rng, a, b, |t, a, b| t.matmul(a, b))
    }

    fn same_pair(rng: &mut dyn rand::RngCore) -> (Tensor, Tensor) {
        let (r, c) = dims(rng);
        (randn(rng, r, c), randn(rng, r, c))
    }

    fn case_add(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (a, b) = same_pair(rng);
        binary(rng, a, b, |t, a, b| t.add(a, b))
    }

    fn case_sub(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (a, b) = same_pair(rng);
        binary(rng, a, b, |t, a, b| t.sub(a, b))
    }

    fn case_mul(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (a, b) = same_pair(rng);
        binary(rng, a, b, |t, a, b| t.mul(a, b))
    }

    fn separated_pair(rng: &mut dyn rand::RngCore) -> (Tensor, Tensor) {
        let (r, c) = dims(rng);
        let a = randn(rng, r, c);
        let mut b = randn(rng, r, c);
        for (x, y) in a.data().iter().zip(b.data_mut()) {
            if (*x - *y).abs() < 1e-3 {
                *y = x + 0.5;
            }
        }
        (a, b)
    }

    fn case_min(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (a, b) = separated_pair(rng);
        binary(rng, a, b, |t, a, b| t.minimum(a, b))
    }

    fn case_max(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (a, b) = separated_pair(rng);
        binary(rng, a, b, |t, a, b| t.maximum(a, b))
    }

    fn case_add_row(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let (a, b) = (randn(rng, r, c), randn(rng, 1, c));
        binary(rng, a, b, |t, a, b| t.add_row(a, b))
    }

    fn case_mul_row(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let (a, b) = (randn(rng, r, c), randn(rng, 1, c));
        binary(rng, a, b, |t, a, b| t.mul_row(a, b))
    }

    fn case_mul_col(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let (a, b) = (randn(rng, r, c), randn(rng, r, 1));
        binary(rng, a, b, |t, a, b| t.mul_col(a, b))
    }

    fn case_scale(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.scale(a, -1.7))
    }

    fn case_add_scalar(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.add_scalar(a, 0.3))
    }

    fn case_relu(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn_away(rng, r, c, &[0.0]);
        unary(rng, x, |t, a| t.relu(a))
    }

    fn case_tanh(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.tanh(a))
    }

    fn case_exp(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.exp(a))
    }

    fn case_log(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let mut x = randn(rng, r, c);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
        unary(rng, x, |t, a| t.log(a))
    }

    fn case_square(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.square(a))
    }

    fn case_clamp(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn_away(rng, r, c, &[-0.5, 0.75]);
        unary(rng, x, |t, a| t.clamp(a, -0.5, 0.75))
    }

    fn case_sum(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        check(&[x], Tolerance::default(), |t, v| {
            let s = t.sum(v[0]);
            Ok(t.square(s))
        })
    }

    fn case_mean(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        check(&[x], Tolerance::default(), |t, v| {
            let s = t.mean(v[0]);
            Ok(t.square(s))
        })
    }

    fn case_sum_cols(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.sum_cols(a))
    }

    fn case_gather(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let x = randn(rng, r, c);
        let idx: Rc<[usize]> = (0..r + 2).map(|_| rng.gen_range(0..r)).collect();
        let w = randn(rng, idx.len(), c);
        check(&[x], Tolerance::default(), move |t, v| {
            let y = t.gather_rows(v[0], idx.clone())?;
            project(t, y, &w)
        })
    }

    fn case_scatter(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let (r, c) = dims(rng);
        let n_out = rng.gen_range(1..4);
        let x = randn(rng, r, c);
        let idx: Rc<[usize]> = (0..r).map(|_| rng.gen_range(0..n_out)).collect();
        let w = randn(rng, n_out, c);
        check(&[x], Tolerance::default(), move |t, v| {
            let y = t.scatter_add_rows(v[0], idx.clone(), n_out)?;
            project(t, y, &w)
        })
    }

    fn case_concat(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let r = rng.gen_range(1..4);
        let (c1, c2) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (a, b) = (randn(rng, r, c1), randn(rng, r, c2));
        binary(rng, a, b, |t, a, b| t.concat_cols(&[a, b, a]))
    }

    fn case_slice(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let r = rng.gen_range(1..4);
        let x = randn(rng, r, 5);
        unary(rng, x, |t, a| t.slice_cols(a, 1, 4).expect("in range"))
    }

    fn case_layer_norm(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let r = rng.gen_range(1..4);
        let c = rng.gen_range(2..6);
        let x = randn(rng, r, c);
        unary(rng, x, |t, a| t.layer_norm(a, 1e-5))
    }

    fn case_head_dot(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let m = rng.gen_range(1..4);
        let (a, b) = (randn(rng, m, 6), randn(rng, m, 6));
        binary(rng, a, b, |t, a, b| t.head_dot(a, b, 3))
    }

    fn case_head_scale(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let m = rng.gen_range(1..4);
        let (a, b) = (randn(rng, m, 6), randn(rng, m, 2));
        binary(rng, a, b, |t, a, b| t.head_scale(a, b, 2))
    }

    fn case_segment_softmax(rng: &mut dyn rand::RngCore) -> Result<GradCheckReport, NnError> {
        let m = rng.gen_range(1..7);
        let n_seg = rng.gen_range(1..4);
        let x = randn(rng, m, 2);
        let seg: Rc<[usize]> = (0..m).map(|_| rng.gen_range(0..n_seg)).collect();
        let w = randn(rng, m, 2);
        check(&[x], Tolerance::default(), move |t, v| {
            let y = t.segment_softmax(v[0], seg.clone(), n_seg)?;
            project(t, y, &w)
        })
    }

    /// Every differentiable primitive of the tape, by name.
    pub fn primitive_cases() -> Vec<(&'static str, Case)> {
        vec![
            ("matmul", case_matmul as Case),
            ("add", case_add),
            ("sub", case_sub),
            ("mul", case_mul),
            ("minimum", case_min),
            ("maximum", case_max),
            ("add_row", case_add_row),
            ("mul_row", case_mul_row),
            ("mul_col", case_mul_col),
            ("scale", case_scale),
            ("add_scalar", case_add_scalar),
            ("relu", case_relu),
            ("tanh", case_tanh),
            ("exp", case_exp),
            ("log", case_log),
            ("square", case_square),
            ("clamp", case_clamp),
            ("sum", case_sum),
            ("mean", case_mean),
            ("sum_cols", case_sum_cols),
            ("gather_rows", case_gather),
            ("scatter_add_rows", case_scatter),
            ("concat_cols", case_concat),
            ("slice_cols", case_slice),
            ("layer_norm", case_layer_norm),
            ("head_dot", case_head_dot),
            ("head_scale", case_head_scale),
            ("segment_softmax", case_segment_softmax),
        ]
    }

    /// Runs every primitive on `trials` random inputs.
    pub fn run_primitive_suite(
        trials: usize,
        seed: u64,
    ) -> Result<Vec<(&'static str, GradCheckReport)>, NnError> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        primitive_cases()
            .into_iter()
            .map(|(name, case)| {
                let mut total = GradCheckReport::default();
                for _ in 0..trials {
                    total.merge(&case(&mut rng)?);
                }
                Ok((name, total))
            })
            .collect()
    }

    /// Checks a full attention layer (projection, norm, activation included)
    /// with respect to node features, edge features, and every weight.
    pub fn run_graph_layer_check(trials: usize, seed: u64) -> Result<GradCheckReport, NnError> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut total = GradCheckReport::default();
        for _ in 0..trials {
            let n = rng.gen_range(2..6);
            let dims = GraphAttnDims { in_dim: 3, edge_dim: 2, heads: 2, head_dim: 3, out_dim: 4 };
            let mut ps = ParamSet::new();
            let layer = GraphAttention::new(&mut ps, "g", dims, &mut rng);
            // perturb biases and norm parameters away from their init values
            for t in ps.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.sample::<f64, _>(StandardNormal));
            }
            let mut b = GraphBuilder::new(3, 2);
            for _ in 0..n {
                let f: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                b.add_node(&f)?;
            }
            for r in 0..n {
                for s in 0..n {
                    if r != s && rng.gen_bool(0.6) {
                        let f = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                        b.add_edge(r, s, f)?;
                    }
                }
            }
            let g = b.finish();
            let w = randn(&mut rng, n, 4);
            let mut inputs = vec![g.node_features.clone(), g.edge_features.clone()];
            inputs.extend(ps.tensors().iter().cloned());
            let report = check(&inputs, Tolerance::default(), |t, v| {
                let params = crate::params::Bound::from_vars(v[2..].to_vec());
                let y = layer.forward(t, &params, &g, v[0], v[1])?;
                project(t, y, &w)
            })?;
            total.merge(&report);
        }
        Ok(total)
    }
}

pub use suite::{primitive_cases, run_graph_layer_check, run_primitive_suite};
