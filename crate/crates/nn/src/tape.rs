//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse insertion order, which is a topological order by
//! construction. Nodes that cannot reach a gradient-requiring leaf are
//! skipped entirely.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};
use crate::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm(Var, Vec<f64>),
    HeadDot(Var, Var, usize),
    HeadScale(Var, Var, usize),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copy of `v` that is cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.rows(), t.cols(), data);
        self.push(out, op, &[a])
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "min", f64::min, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, "max", f64::max, Op::Max(a, b))
    }

    fn broadcast_row(
        &mut self,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(NnError::Shape(format!(
                "row broadcast {:?} with {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % c]))
            .collect();
        let out = Tensor::from_parts(ta.rows(), c, data);
        Ok(self.push(out, op, &[a, row]))
    }

    /// `a + row` with `row` (`1 x c`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.broadcast_row(a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.broadcast_row(a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// Scales row `r` of `a` by `col[r]` (`col` is `n x 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NnError> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(NnError::Shape(format!(
                "column broadcast {:?} with {:?}",
                ta.shape(),
                tc.shape()
            )));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / c.max(1)])
            .collect();
        let out = Tensor::from_parts(ta.rows(), c, data);
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a), &[a])
    }

    /// Row sums, `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_parts(t.rows(), 1, data);
        self.push(out, Op::SumCols(a), &[a])
    }

    /// Selects rows `idx` of `a` (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var, NnError> {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= t.rows() {
                return Err(NnError::Shape(format!("gather index {i} >= {}", t.rows())));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_parts(idx.len(), c, data);
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    /// Sums row `k` of `a` into output row `idx[k]`; the output has `n_out` rows.
    /// Rows are accumulated in input order.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        idx: Rc<[usize]>,
        n_out: usize,
    ) -> Result<Var, NnError> {
        let t = self.value(a);
        if idx.len() != t.rows() {
            return Err(NnError::Shape(format!(
                "scatter index length {} vs {} rows",
                idx.len(),
                t.rows()
            )));
        }
        let c = t.cols();
        let mut data = vec![0.0; n_out * c];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n_out {
                return Err(NnError::Shape(format!("scatter index {i} >= {n_out}")));
            }
            let dst = &mut data[i * c..(i + 1) * c];
            for (d, s) in dst.iter_mut().zip(t.row_slice(k)) {
                *d += s;
            }
        }
        let out = Tensor::from_parts(n_out, c, data);
        Ok(self.push(out, Op::ScatterAddRows(a, idx), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(NnError::Shape("concat of nothing".into())),
        };
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(NnError::Shape(format!(
                    "concat rows {} vs {}",
                    t.rows(),
                    rows
                )));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::from_parts(rows, total, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(NnError::Shape(format!(
                "slice {start}..{end} of {} columns",
                t.cols()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let out = Tensor::from_parts(t.rows(), end - start, data);
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|x| (x - mean) * is));
        }
        let out = Tensor::from_parts(t.rows(), c, data);
        self.push(out, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Per-head dot products: `q`, `k` are `m x (heads * d)`, output `m x heads`.
    pub fn head_dot(&mut self, q: Var, k: Var, heads: usize) -> Result<Var, NnError> {
        let (tq, tk) = (self.value(q), self.value(k));
        check_same(tq, tk, "head_dot")?;
        if heads == 0 || tq.cols() % heads != 0 {
            return Err(NnError::Shape(format!(
                "{} columns not divisible into {heads} heads",
                tq.cols()
            )));
        }
        let d = tq.cols() / heads;
        let mut data = Vec::with_capacity(tq.rows() * heads);
        for r in 0..tq.rows() {
            let (qr, kr) = (tq.row_slice(r), tk.row_slice(r));
            for h in 0..heads {
                let s = h * d;
                data.push(qr[s..s + d].iter().zip(&kr[s..s + d]).map(|(a, b)| a * b).sum());
            }
        }
        let out = Tensor::from_parts(tq.rows(), heads, data);
        Ok(self.push(out, Op::HeadDot(q, k, heads), &[q, k]))
    }

    /// Scales head block `h` of row `r` in `x` (`m x (heads * d)`) by `w[r, h]`.
    pub fn head_scale(&mut self, x: Var, w: Var, heads: usize) -> Result<Var, NnError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.cols() != heads || tw.rows() != tx.rows() || heads == 0 || tx.cols() % heads != 0
        {
            return Err(NnError::Shape(format!(
                "head_scale {:?} by {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let d = tx.cols() / heads;
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (r, c) = (i / tx.cols(), i % tx.cols());
                v * tw.get(r, c / d)
            })
            .collect();
        let out = Tensor::from_parts(tx.rows(), tx.cols(), data);
        Ok(self.push(out, Op::HeadScale(x, w, heads), &[x, w]))
    }

    /// Softmax of each column of `logits` (`m x heads`) within groups of rows
    /// sharing the same `segment` id. Reductions run in row order.
    pub fn segment_softmax(
        &mut self,
        logits: Var,
        segment: Rc<[usize]>,
        n_segments: usize,
    ) -> Result<Var, NnError> {
        let t = self.value(logits);
        if segment.len() != t.rows() {
            return Err(NnError::Shape(format!(
                "segment ids {} vs {} rows",
                segment.len(),
                t.rows()
            )));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(NnError::Shape(format!("segment id {bad} >= {n_segments}")));
        }
        let h = t.cols();
        let mut max = vec![f64::NEG_INFINITY; n_segments * h];
        for (r, &s) in segment.iter().enumerate() {
            for (j, &v) in t.row_slice(r).iter().enumerate() {
                let m = &mut max[s * h + j];
                *m = m.max(v);
            }
        }
        let mut data = vec![0.0; t.len()];
        let mut denom = vec![0.0; n_segments * h];
        for (r, &s) in segment.iter().enumerate() {
            for (j, &v) in t.row_slice(r).iter().enumerate() {
                let e = (v - max[s * h + j]).exp();
                data[r * h + j] = e;
                denom[s * h + j] += e;
            }
        }
        for (r, &s) in segment.iter().enumerate() {
            for j in 0..h {
                data[r * h + j] /= denom[s * h + j];
            }
        }
        let out = Tensor::from_parts(t.rows(), h, data);
        Ok(self.push(out, Op::SegmentSoftmax(logits, segment, n_segments), &[logits]))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NnError> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(NnError::NonScalarOutput(out.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let t = &self.nodes[v.0].value;
            *slot = Some(Tensor::zeros(t.rows(), t.cols()));
        }
        if let Some(t) = slot.as_mut() {
            f(t.data_mut());
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, gd, (n as isize, 1), tb.data(), (1, n as isize), ga, 1.0)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, ta.data(), (1, k as isize), gd, (n as isize, 1), gb, 1.0)
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).for_each(|(x, g)| *x -= g)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * tb[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += gd[i] * ta[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let c = self.value(*r).cols();
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *r, |gr| {
                    for (i, g) in gd.iter().enumerate() {
                        gr[i % c] += g;
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a).data(), self.value(*r).data());
                let c = tr.len();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * tr[i % c];
                    }
                });
                self.accumulate(grads, *r, |gr| {
                    for i in 0..gd.len() {
                        gr[i % c] += gd[i] * ta[i];
                    }
                });
            }
            Op::MulCol(a, col) => {
                let ta = self.value(*a);
                let tc = self.value(*col).data();
                let c = ta.cols().max(1);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * tc[i / c];
                    }
                });
                self.accumulate(grads, *col, |gc| {
                    for (i, g) in gd.iter().enumerate() {
                        gc[i / c] += g * ta.data()[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(x, g)| *x += g * k)
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| add_into(ga, gd)),
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ta[i] > 0.0 {
                            ga[i] += gd[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += gd[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] / ta[i];
                    }
                });
            }
            Op::Square(a) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * gd[i] * ta[i];
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                // ties route to the first operand
                let pick_a = |i: usize| if is_min { ta[i] <= tb[i] } else { ta[i] >= tb[i] };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if pick_a(i) {
                            ga[i] += gd[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        if !pick_a(i) {
                            gb[i] += gd[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if ta[i] >= *lo && ta[i] <= *hi {
                            ga[i] += gd[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |ga| {
                ga.iter_mut().for_each(|x| *x += gd[0])
            }),
            Op::MeanAll(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols().max(1);
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += gd[i / c];
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &gd[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[k * c..(k + 1) * c], &gd[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let rows = node.value.rows();
                    self.accumulate(grads, *p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &gd[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let total = self.value(*a).cols();
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..node.value.rows() {
                        add_into(
                            &mut ga[r * total + start..r * total + start + c],
                            &gd[r * c..(r + 1) * c],
                        );
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        for j in 0..c {
                            ga[r * c + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::HeadDot(q, k, heads) => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let w = tq.cols();
                let d = w / heads;
                self.accumulate(grads, *q, |gq| {
                    for i in 0..gq.len() {
                        gq[i] += gd[(i / w) * heads + (i % w) / d] * tk.data()[i];
                    }
                });
                self.accumulate(grads, *k, |gk| {
                    for i in 0..gk.len() {
                        gk[i] += gd[(i / w) * heads + (i % w) / d] * tq.data()[i];
                    }
                });
            }
            Op::HeadScale(x, wv, heads) => {
                let (tx, tw) = (self.value(*x), self.value(*wv));
                let w = tx.cols();
                let d = w / heads;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * tw.data()[(i / w) * heads + (i % w) / d];
                    }
                });
                self.accumulate(grads, *wv, |gw| {
                    for i in 0..gd.len() {
                        gw[(i / w) * heads + (i % w) / d] += gd[i] * tx.data()[i];
                    }
                });
            }
            Op::SegmentSoftmax(a, segment, n_segments) => {
                let h = node.value.cols();
                let mut dot = vec![0.0; n_segments * h];
                for (r, &s) in segment.iter().enumerate() {
                    for j in 0..h {
                        dot[s * h + j] += gd[r * h + j] * y[r * h + j];
                    }
                }
                self.accumulate(grads, *a, |ga| {
                    for (r, &s) in segment.iter().enumerate() {
                        for j in 0..h {
                            let i = r * h + j;
                            ga[i] += y[i] * (gd[i] - dot[s * h + j]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 6.0);
    }

    #[test]
    fn detached_branch_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0));
        let d = tape.detach(w);
        let y = tape.mul(w, d).unwrap();
        let g = tape.backward(y).unwrap();
        // only the live branch contributes: d(w * stop(w))/dw = stop(w)
        assert_eq!(g.get(w).unwrap().item(), 2.0);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(w), Err(NnError::NonScalarOutput([2, 1]))));
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[1.0, 2.0, -3.0, 0.5, 7.0]));
        let seg: Rc<[usize]> = vec![0, 0, 1, 1, 1].into();
        let y = tape.segment_softmax(x, seg, 2).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] + v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let a = tape.add(x, x).unwrap();
        let b = tape.mul(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        // d(2x^2)/dx = 4x
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }
}
