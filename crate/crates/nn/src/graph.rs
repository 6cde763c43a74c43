//! Graph inputs and the attention message-passing layer.
//!
//! One layer computes, per attention head,
//!
//! ```text
//! v_i' = W1 v_i + sum_{j in N(i)} a_ij (W2 v_j + W3 e_ij)
//! a_ij = softmax_j( (W4 v_i) . (W5 v_j) / sqrt(c) )
//! ```
//!
//! where `c` is the per-head width. Heads are concatenated, projected to the
//! output width, layer-normalized, and passed through a ReLU. Stacking `M`
//! layers propagates information `M` hops.

use std::rc::Rc;

use rand::Rng;

use crate::init::orthogonal;
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::NnError;

/// A (possibly disjoint) union of directed graphs. Edges point from sender to
/// receiver and are kept sorted by `(receiver, sender)`, so every reduction
/// over a receiver's neighborhood runs in sender order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub node_features: Tensor,
    pub edge_features: Tensor,
    receivers: Rc<[usize]>,
    senders: Rc<[usize]>,
}

impl GraphBatch {
    pub fn n_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    pub fn receivers(&self) -> &Rc<[usize]> {
        &self.receivers
    }

    pub fn senders(&self) -> &Rc<[usize]> {
        &self.senders
    }

    /// `(receiver, sender)` pairs in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.receivers.iter().copied().zip(self.senders.iter().copied())
    }

    /// Senders of edges into `node`, in ascending order.
    pub fn in_neighbors(&self, node: usize) -> Vec<usize> {
        self.edges().filter(|&(r, _)| r == node).map(|(_, s)| s).collect()
    }
}

/// Incremental construction of a [`GraphBatch`].
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    node_dim: usize,
    edge_dim: usize,
    nodes: Vec<f64>,
    edges: Vec<(usize, usize, Vec<f64>)>,
}

impl GraphBuilder {
    pub fn new(node_dim: usize, edge_dim: usize) -> Self {
        Self { node_dim, edge_dim, nodes: Vec::new(), edges: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len() / self.node_dim.max(1)
    }

    pub fn add_node(&mut self, features: &[f64]) -> Result<usize, NnError> {
        if features.len() != self.node_dim {
            return Err(NnError::Shape(format!(
                "node feature width {} != {}",
                features.len(),
                self.node_dim
            )));
        }
        self.nodes.extend_from_slice(features);
        Ok(self.n_nodes() - 1)
    }

    pub fn add_edge(
        &mut self,
        receiver: usize,
        sender: usize,
        features: Vec<f64>,
    ) -> Result<(), NnError> {
        let n = self.n_nodes();
        if receiver >= n || sender >= n {
            return Err(NnError::Shape(format!(
                "edge ({receiver}, {sender}) out of range for {n} nodes"
            )));
        }
        if features.len() != self.edge_dim {
            return Err(NnError::Shape(format!(
                "edge feature width {} != {}",
                features.len(),
                self.edge_dim
            )));
        }
        self.edges.push((receiver, sender, features));
        Ok(())
    }

    pub fn finish(mut self) -> GraphBatch {
        self.edges.sort_by_key(|&(r, s, _)| (r, s));
        let n = self.n_nodes();
        let m = self.edges.len();
        let mut edge_data = Vec::with_capacity(m * self.edge_dim);
        let mut receivers = Vec::with_capacity(m);
        let mut senders = Vec::with_capacity(m);
        for (r, s, f) in self.edges {
            receivers.push(r);
            senders.push(s);
            edge_data.extend(f);
        }
        GraphBatch {
            node_features: Tensor::from_parts(n, self.node_dim, self.nodes),
            edge_features: Tensor::from_parts(m, self.edge_dim, edge_data),
            receivers: receivers.into(),
            senders: senders.into(),
        }
    }
}

/// Shape of a [`GraphAttention`] layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphAttnDims {
    pub in_dim: usize,
    pub edge_dim: usize,
    pub heads: usize,
    /// Per-head message width `c`.
    pub head_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct GraphAttention {
    dims: GraphAttnDims,
    w_self: ParamId,
    w_msg: ParamId,
    w_edge: ParamId,
    w_query: ParamId,
    w_key: ParamId,
    proj: Linear,
    norm: LayerNorm,
}

impl GraphAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dims: GraphAttnDims,
        rng: &mut R,
    ) -> Self {
        let wide = dims.heads * dims.head_dim;
        let mut w = |ps: &mut ParamSet, tag: &str, rows: usize| {
            ps.add(format!("{name}.{tag}"), orthogonal(rng, rows, wide, 1.0))
        };
        let w_self = w(ps, "w1", dims.in_dim);
        let w_msg = w(ps, "w2", dims.in_dim);
        let w_edge = w(ps, "w3", dims.edge_dim);
        let w_query = w(ps, "w4", dims.in_dim);
        let w_key = w(ps, "w5", dims.in_dim);
        let proj = Linear::new(ps, &format!("{name}.proj"), wide, dims.out_dim, 1.0, rng);
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), dims.out_dim);
        Self { dims, w_self, w_msg, w_edge, w_query, w_key, proj, norm }
    }

    pub fn dims(&self) -> GraphAttnDims {
        self.dims
    }

    pub fn self_weight(&self) -> ParamId {
        self.w_self
    }

    fn check(&self, tape: &Tape, nodes: Var, edges: Var, graph: &GraphBatch) -> Result<(), NnError> {
        let (tn, te) = (tape.value(nodes), tape.value(edges));
        if tn.cols() != self.dims.in_dim || tn.rows() != graph.n_nodes() {
            return Err(NnError::Shape(format!(
                "node input {:?}, layer expects width {} and {} nodes",
                tn.shape(),
                self.dims.in_dim,
                graph.n_nodes()
            )));
        }
        if te.cols() != self.dims.edge_dim || te.rows() != graph.n_edges() {
            return Err(NnError::Shape(format!(
                "edge input {:?}, layer expects width {} and {} edges",
                te.shape(),
                self.dims.edge_dim,
                graph.n_edges()
            )));
        }
        Ok(())
    }

    /// Raw multi-head update `W1 v_i + sum_j a_ij (W2 v_j + W3 e_ij)`, heads
    /// concatenated (`n x heads*c`). A receiver without in-edges keeps `W1 v_i`.
    pub fn attention_update(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphBatch,
        nodes: Var,
        edges: Var,
    ) -> Result<Var, NnError> {
        self.check(tape, nodes, edges, graph)?;
        let GraphAttnDims { heads, head_dim, .. } = self.dims;
        let self_term = tape.matmul(nodes, p.var(self.w_self))?;
        if graph.n_edges() == 0 {
            return Ok(self_term);
        }
        let query = tape.matmul(nodes, p.var(self.w_query))?;
        let key = tape.matmul(nodes, p.var(self.w_key))?;
        let msg = tape.matmul(nodes, p.var(self.w_msg))?;
        let edge_msg = tape.matmul(edges, p.var(self.w_edge))?;

        let q_e = tape.gather_rows(query, graph.receivers.clone())?;
        let k_e = tape.gather_rows(key, graph.senders.clone())?;
        let logits = tape.head_dot(q_e, k_e, heads)?;
        let logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt());
        let alpha = tape.segment_softmax(logits, graph.receivers.clone(), graph.n_nodes())?;

        let m_e = tape.gather_rows(msg, graph.senders.clone())?;
        let m_e = tape.add(m_e, edge_msg)?;
        let weighted = tape.head_scale(m_e, alpha, heads)?;
        let agg = tape.scatter_add_rows(weighted, graph.receivers.clone(), graph.n_nodes())?;
        tape.add(self_term, agg)
    }

    /// Full layer: attention update, output projection, layer norm, ReLU.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &GraphBatch,
        nodes: Var,
        edges: Var,
    ) -> Result<Var, NnError> {
        let h = self.attention_update(tape, p, graph, nodes, edges)?;
        let h = self.proj.forward(tape, p, h)?;
        let h = self.norm.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }
}

/// A stack of attention layers sharing the same edge features.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    layers: Vec<GraphAttention>,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        node_dim: usize,
        edge_dim: usize,
        heads: usize,
        head_dim: usize,
        out_dim: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|k| {
                let in_dim = if k == 0 { node_dim } else { out_dim };
                let dims = GraphAttnDims { in_dim, edge_dim, heads, head_dim, out_dim };
                GraphAttention::new(ps, &format!("{name}.layer{k}"), dims, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dims.out_dim)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Node embeddings (`n_nodes x out_dim`) after every layer.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, graph: &GraphBatch) -> Result<Var, NnError> {
        let mut h = tape.constant(graph.node_features.clone());
        let e = tape.constant(graph.edge_features.clone());
        for layer in &self.layers {
            h = layer.forward(tape, p, graph, h, e)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(seed: u64) -> (ParamSet, GraphAttention) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dims = GraphAttnDims { in_dim: 3, edge_dim: 2, heads: 2, head_dim: 4, out_dim: 5 };
        let l = GraphAttention::new(&mut ps, "g", dims, &mut rng);
        (ps, l)
    }

    fn run(ps: &ParamSet, l: &GraphAttention, g: &GraphBatch) -> Tensor {
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let n = tape.constant(g.node_features.clone());
        let e = tape.constant(g.edge_features.clone());
        let out = l.attention_update(&mut tape, &p, g, n, e).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn isolated_node_keeps_self_term() {
        let (ps, l) = layer(0);
        let mut b = GraphBuilder::new(3, 2);
        b.add_node(&[0.3, -1.0, 2.0]).unwrap();
        let g = b.finish();
        let out = run(&ps, &l, &g);
        let expect = g.node_features.matmul(ps.get(l.self_weight())).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let (ps, l) = layer(1);
        let mut b = GraphBuilder::new(3, 2);
        let i = b.add_node(&[0.3, -1.0, 2.0]).unwrap();
        let j = b.add_node(&[1.0, 0.5, -0.2]).unwrap();
        b.add_edge(i, j, vec![0.1, 0.2]).unwrap();
        let g = b.finish();
        let out = run(&ps, &l, &g);
        // alpha = 1: v' = W1 v_i + W2 v_j + W3 e
        let w = |name: &str| ps.get(ps.find(name).unwrap()).clone();
        let vi = Tensor::row(&[0.3, -1.0, 2.0]);
        let vj = Tensor::row(&[1.0, 0.5, -0.2]);
        let e = Tensor::row(&[0.1, 0.2]);
        let a = vi.matmul(&w("g.w1")).unwrap();
        let b2 = vj.matmul(&w("g.w2")).unwrap();
        let c = e.matmul(&w("g.w3")).unwrap();
        for k in 0..8 {
            let expect = a.data()[k] + b2.data()[k] + c.data()[k];
            assert!((out.get(0, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_order_does_not_change_output() {
        let (ps, l) = layer(2);
        let feats = [[0.3, -1.0, 2.0], [1.0, 0.5, -0.2], [-0.7, 0.1, 0.9], [0.2, 0.2, 0.2]];
        let build = |order: &[usize]| {
            let mut b = GraphBuilder::new(3, 2);
            for f in &feats {
                b.add_node(f).unwrap();
            }
            for &j in order {
                b.add_edge(0, j, vec![j as f64, -(j as f64)]).unwrap();
            }
            b.finish()
        };
        let a = run(&ps, &l, &build(&[1, 2, 3]));
        let b = run(&ps, &l, &build(&[3, 1, 2]));
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_width_is_an_error() {
        let (ps, l) = layer(3);
        let mut b = GraphBuilder::new(4, 2);
        b.add_node(&[0.0; 4]).unwrap();
        let g = b.finish();
        let mut tape = Tape::new();
        let p = ps.bind_frozen(&mut tape);
        let n = tape.constant(g.node_features.clone());
        let e = tape.constant(g.edge_features.clone());
        assert!(l.forward(&mut tape, &p, &g, n, e).is_err());
    }
}
