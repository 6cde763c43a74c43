//! Budget-conditioned graph networks: the distributed policy `pi(o_i, z)`,
//! the centralized cost critic `V^l(x, z)` and the distributed constraint
//! critic `V^h(o_i, z)`.
//!
//! All three run on the batched global graph and read out agent nodes. With
//! `M` attention layers an agent's readout depends only on its `M`-hop
//! neighborhood, which is what a distributed implementation would compute.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::rc::Rc;

use epigraph_nn::{
    Bound, Checkpoint, GraphBatch, GraphEncoder, Mlp, ParamId, ParamSet, ScalarEncoder, Tape,
    Tensor, Var,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{graph_batch, EnvParams, GlobalState, Task, EDGE_DIM, NODE_DIM};
use crate::Error;

/// Shape of one budget-conditioned network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub gnn_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub gnn_out: usize,
    pub z_dim: usize,
    pub hidden: Vec<usize>,
}

impl NetConfig {
    fn standard(gnn_layers: usize) -> Self {
        Self { gnn_layers, heads: 3, head_dim: 32, gnn_out: 64, z_dim: 8, hidden: vec![32, 32] }
    }

    fn compact(gnn_layers: usize) -> Self {
        Self { gnn_layers, heads: 3, head_dim: 8, gnn_out: 32, z_dim: 8, hidden: vec![32, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub policy: NetConfig,
    pub cost_value: NetConfig,
    pub constraint_value: NetConfig,
    /// Initial log standard deviation of the pre-squash Gaussian.
    pub init_log_std: f64,
}

impl ModelConfig {
    /// Full-size networks.
    pub fn standard(task: Task) -> Self {
        Self {
            policy: NetConfig::standard(2),
            cost_value: NetConfig::standard(2),
            constraint_value: NetConfig::standard(vh_layers(task)),
            init_log_std: 0.0,
        }
    }

    /// Narrower attention layers for single-core runs.
    pub fn compact(task: Task) -> Self {
        Self {
            policy: NetConfig::compact(2),
            cost_value: NetConfig::compact(2),
            constraint_value: NetConfig::compact(vh_layers(task)),
            init_log_std: 0.0,
        }
    }
}

fn vh_layers(task: Task) -> usize {
    if task == Task::ConnectSpread {
        2
    } else {
        1
    }
}

/// Networks read out either one row per agent or one mean-pooled row per env.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    PerAgent,
    MeanPool,
}

/// A batch of environments prepared for the networks.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub graph: GraphBatch,
    /// Node index of each agent row, env-major.
    pub agent_rows: Rc<[usize]>,
    /// Env index of each agent row.
    pub env_of_row: Rc<[usize]>,
    pub n_envs: usize,
    pub n_agents: usize,
    /// Budget per env (cost critic).
    pub z_env: Vec<f64>,
    /// Budget per agent row (policy and constraint critic).
    pub z_agent: Vec<f64>,
}

impl BatchInput {
    /// Every agent of env `e` is conditioned on `z_env[e]`.
    pub fn new(states: &[&GlobalState], z_env: &[f64], params: &EnvParams) -> Self {
        assert_eq!(states.len(), z_env.len(), "one budget per env");
        let n = states.first().map_or(0, |s| s.n_agents());
        let (graph, offsets) = graph_batch(states, params);
        let mut agent_rows = Vec::with_capacity(states.len() * n);
        let mut env_of_row = Vec::with_capacity(states.len() * n);
        let mut z_agent = Vec::with_capacity(states.len() * n);
        for (e, &off) in offsets.iter().enumerate() {
            for i in 0..n {
                agent_rows.push(off + i);
                env_of_row.push(e);
                z_agent.push(z_env[e]);
            }
        }
        Self {
            graph,
            agent_rows: agent_rows.into(),
            env_of_row: env_of_row.into(),
            n_envs: states.len(),
            n_agents: n,
            z_env: z_env.to_vec(),
            z_agent,
        }
    }

    /// Overrides the per-agent budgets (distributed execution).
    pub fn with_agent_z(mut self, z: Vec<f64>) -> Self {
        assert_eq!(z.len(), self.z_agent.len());
        self.z_agent = z;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.agent_rows.len()
    }
}

/// Graph encoder, budget encoder and MLP head.
#[derive(Clone, Debug)]
pub struct ZNet {
    pub params: ParamSet,
    encoder: GraphEncoder,
    z_enc: ScalarEncoder,
    head: Mlp,
    readout: Readout,
}

impl ZNet {
    fn new<R: Rng + ?Sized>(
        name: &str,
        cfg: &NetConfig,
        readout: Readout,
        out_dim: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut ps = ParamSet::new();
        let encoder = GraphEncoder::new(
            &mut ps,
            &format!("{name}.gnn"),
            NODE_DIM,
            EDGE_DIM,
            cfg.heads,
            cfg.head_dim,
            cfg.gnn_out,
            cfg.gnn_layers,
            rng,
        );
        let z_enc = ScalarEncoder::new(&mut ps, &format!("{name}.z"), cfg.z_dim, rng);
        let head = Mlp::new(
            &mut ps,
            &format!("{name}.head"),
            cfg.gnn_out + cfg.z_dim,
            &cfg.hidden,
            out_dim,
            out_gain,
            rng,
        );
        Self { params: ps, encoder, z_enc, head, readout }
    }

    pub fn readout(&self) -> Readout {
        self.readout
    }

    /// Graph features per output row (before the budget enters).
    pub fn embed(&self, tape: &mut Tape, p: &Bound, input: &BatchInput) -> Result<Var, Error> {
        let nodes = self.encoder.forward(tape, p, &input.graph)?;
        let agents = tape.gather_rows(nodes, input.agent_rows.clone())?;
        Ok(match self.readout {
            Readout::PerAgent => agents,
            Readout::MeanPool => {
                let sum = tape.scatter_add_rows(agents, input.env_of_row.clone(), input.n_envs)?;
                tape.scale(sum, 1.0 / input.n_agents.max(1) as f64)
            }
        })
    }

    /// Head applied to embeddings and one budget per row.
    pub fn head(&self, tape: &mut Tape, p: &Bound, emb: Var, z: &[f64]) -> Result<Var, Error> {
        let zc = tape.constant(Tensor::column(z));
        let ze = self.z_enc.forward(tape, p, zc)?;
        let x = tape.concat_cols(&[emb, ze])?;
        Ok(self.head.forward(tape, p, x)?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &BatchInput) -> Result<Var, Error> {
        let emb = self.embed(tape, p, input)?;
        let z = match self.readout {
            Readout::PerAgent => &input.z_agent,
            Readout::MeanPool => &input.z_env,
        };
        self.head(tape, p, emb, z)
    }

    /// Embeddings without recording gradients.
    pub fn embed_frozen(&self, input: &BatchInput) -> Result<Tensor, Error> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let e = self.embed(&mut tape, &p, input)?;
        Ok(tape.value(e).clone())
    }

    /// Tape-free head: row `r` of `emb` paired with `z[r]`.
    pub fn head_eval(&self, emb: &Tensor, z: &[f64]) -> Result<Tensor, Error> {
        let ze = self.z_enc.eval(&self.params, &Tensor::column(z))?;
        let (rows, a, b) = (emb.rows(), emb.cols(), ze.cols());
        let mut data = Vec::with_capacity(rows * (a + b));
        for r in 0..rows {
            data.extend_from_slice(emb.row_slice(r));
            data.extend_from_slice(ze.row_slice(r));
        }
        let x = Tensor::new(rows, a + b, data)?;
        Ok(self.head.eval(&self.params, &x)?)
    }

    pub fn forward_frozen(&self, input: &BatchInput) -> Result<Tensor, Error> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, input)?;
        Ok(tape.value(y).clone())
    }
}

pub const ACTION_DIM: usize = 2;
const LOG_STD_RANGE: (f64, f64) = (-5.0, 1.0);

/// `log(1 - tanh(a)^2)` computed stably.
fn log_dtanh(a: f64) -> f64 {
    let x = -2.0 * a;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (std::f64::consts::LN_2 - a - softplus)
}

/// Diagonal Gaussian squashed by `tanh`, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDist {
    pub mean: Tensor,
    pub log_std: [f64; ACTION_DIM],
}

/// Sampled actions with the pre-squash values needed for later ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub actions: Vec<[f64; 2]>,
    pub pre_tanh: Tensor,
    pub log_prob: Vec<f64>,
}

impl PolicyDist {
    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionSample {
        let mut pre = self.mean.clone();
        for r in 0..pre.rows() {
            for d in 0..ACTION_DIM {
                let eps: f64 = rng.sample(StandardNormal);
                pre.set(r, d, self.mean.get(r, d) + self.log_std[d].exp() * eps);
            }
        }
        let log_prob = self.log_prob(&pre);
        ActionSample { actions: squash(&pre), pre_tanh: pre, log_prob }
    }

    /// Deterministic action used for evaluation.
    pub fn mode(&self) -> Vec<[f64; 2]> {
        squash(&self.mean)
    }

    /// Density of the squashed action, by change of variables.
    pub fn log_prob(&self, pre: &Tensor) -> Vec<f64> {
        (0..pre.rows())
            .map(|r| {
                (0..ACTION_DIM)
                    .map(|d| {
                        let a = pre.get(r, d);
                        let s = self.log_std[d];
                        let u = (a - self.mean.get(r, d)) / s.exp();
                        -0.5 * u * u - s - 0.5 * (2.0 * PI).ln() - log_dtanh(a)
                    })
                    .sum()
            })
            .collect()
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 * (1.0 + (2.0 * PI).ln())).sum()
    }
}

fn squash(pre: &Tensor) -> Vec<[f64; 2]> {
    (0..pre.rows()).map(|r| [pre.get(r, 0).tanh(), pre.get(r, 1).tanh()]).collect()
}

/// The policy and both critics.
#[derive(Clone, Debug)]
pub struct ValueHeads {
    pub config: ModelConfig,
    pub policy: ZNet,
    log_std: ParamId,
    pub cost_value: ZNet,
    pub constraint_value: ZNet,
}

/// Taped policy quantities for a PPO loss.
pub struct PolicyTerms {
    /// `rows x 1` log-probabilities of the given pre-squash actions.
    pub log_prob: Var,
    /// `1 x 1` entropy per agent.
    pub entropy: Var,
}

impl ValueHeads {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut policy =
            ZNet::new("policy", &config.policy, Readout::PerAgent, ACTION_DIM, 0.01, rng);
        let log_std = policy
            .params
            .add("policy.log_std", Tensor::filled(1, ACTION_DIM, config.init_log_std));
        let cost_value = ZNet::new("vl", &config.cost_value, Readout::MeanPool, 1, 1.0, rng);
        let constraint_value =
            ZNet::new("vh", &config.constraint_value, Readout::PerAgent, 1, 1.0, rng);
        Self { config, policy, log_std, cost_value, constraint_value }
    }

    pub fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    pub fn policy_dist(&self, input: &BatchInput) -> Result<PolicyDist, Error> {
        let mean = self.policy.forward_frozen(input)?;
        if !mean.is_finite() {
            return Err(Error::NonFinite("policy output".into()));
        }
        let raw = self.policy.params.get(self.log_std).data();
        let log_std = [
            raw[0].clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1),
            raw[1].clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1),
        ];
        Ok(PolicyDist { mean, log_std })
    }

    /// Taped log-probabilities of stored pre-squash actions and the entropy.
    pub fn policy_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: &BatchInput,
        pre_tanh: &Tensor,
    ) -> Result<PolicyTerms, Error> {
        let mean = self.policy.forward(tape, p, input)?;
        let log_std = tape.clamp(p.var(self.log_std), LOG_STD_RANGE.0, LOG_STD_RANGE.1);
        let a = tape.constant(pre_tanh.clone());
        let diff = tape.sub(a, mean)?;
        let neg = tape.scale(log_std, -1.0);
        let inv_std = tape.exp(neg);
        let u = tape.mul_row(diff, inv_std)?;
        let u2 = tape.square(u);
        let quad = tape.sum_cols(u2);
        let quad = tape.scale(quad, -0.5);
        let log_det = tape.sum(log_std);
        let neg_log_det = tape.scale(log_det, -1.0);
        let lp = tape.add_row(quad, neg_log_det)?;
        let correction: Vec<f64> = (0..pre_tanh.rows())
            .map(|r| {
                -(0..ACTION_DIM).map(|d| log_dtanh(pre_tanh.get(r, d))).sum::<f64>()
                    - ACTION_DIM as f64 * 0.5 * (2.0 * PI).ln()
            })
            .collect();
        let c = tape.constant(Tensor::column(&correction));
        let log_prob = tape.add(lp, c)?;
        let entropy = tape.add_scalar(log_det, ACTION_DIM as f64 * 0.5 * (1.0 + (2.0 * PI).ln()));
        Ok(PolicyTerms { log_prob, entropy })
    }

    /// Cost critic per env.
    pub fn cost_values(&self, input: &BatchInput) -> Result<Vec<f64>, Error> {
        Ok(self.cost_value.forward_frozen(input)?.into_data())
    }

    /// Constraint critic per agent row.
    pub fn constraint_values(&self, input: &BatchInput) -> Result<Vec<f64>, Error> {
        Ok(self.constraint_value.forward_frozen(input)?.into_data())
    }

    pub fn checkpoint(&self, metadata: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        let mut ck = Checkpoint::new(metadata);
        ck.metadata.insert(
            "model".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        ck.push_params("net", &self.policy.params);
        ck.push_params("net", &self.cost_value.params);
        ck.push_params("net", &self.constraint_value.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        let cfg = ck
            .metadata
            .get("model")
            .ok_or_else(|| Error::MetadataMismatch("checkpoint has no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut heads = Self::new(config, &mut rng);
        ck.load_params("net", &mut heads.policy.params)?;
        ck.load_params("net", &mut heads.cost_value.params)?;
        ck.load_params("net", &mut heads.constraint_value.params)?;
        Ok(heads)
    }
}

/// Per-agent total value `max{V^h, V^l - z}`.
pub fn total_value(vh: f64, vl: f64, z: f64) -> f64 {
    vh.max(vl - z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ValueHeads, EnvParams, Vec<GlobalState>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EnvParams::new(Task::Target, 3);
        let heads = ValueHeads::new(ModelConfig::compact(Task::Target), &mut rng);
        let states = (0..2).map(|s| reset(&p, s).unwrap()).collect();
        (heads, p, states)
    }

    #[test]
    fn total_value_examples() {
        assert_eq!(total_value(-0.6, 1.0, 2.0), -0.6);
        assert_eq!(total_value(0.54, 1.0, 2.0), 0.54);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let v = total_value(-0.3, 1.2, -1.0 + 0.1 * k as f64);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(prev, -0.3);
    }

    #[test]
    fn shapes_and_purity() {
        let (heads, p, states) = setup();
        let refs: Vec<&GlobalState> = states.iter().collect();
        let input = BatchInput::new(&refs, &[0.5, 1.0], &p);
        let d = heads.policy_dist(&input).unwrap();
        assert_eq!(d.mean.shape(), [6, 2]);
        assert_eq!(d, heads.policy_dist(&input).unwrap());
        assert_eq!(heads.cost_values(&input).unwrap().len(), 2);
        assert_eq!(heads.constraint_values(&input).unwrap().len(), 6);
    }

    #[test]
    fn readout_matches_single_env() {
        let (heads, p, states) = setup();
        let refs: Vec<&GlobalState> = states.iter().collect();
        let both = heads.constraint_values(&BatchInput::new(&refs, &[0.5, 1.0], &p)).unwrap();
        let second = heads.constraint_values(&BatchInput::new(&refs[1..], &[1.0], &p)).unwrap();
        for i in 0..3 {
            assert!((both[3 + i] - second[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn head_eval_matches_forward() {
        let (heads, p, states) = setup();
        let refs: Vec<&GlobalState> = states.iter().collect();
        let input = BatchInput::new(&refs, &[0.5, 1.0], &p);
        let emb = heads.constraint_value.embed_frozen(&input).unwrap();
        let direct = heads.constraint_value.head_eval(&emb, &input.z_agent).unwrap();
        let full = heads.constraint_values(&input).unwrap();
        for (a, b) in direct.data().iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_log_prob_matches_closed_form() {
        let (heads, p, states) = setup();
        let refs: Vec<&GlobalState> = states.iter().collect();
        let input = BatchInput::new(&refs, &[0.5, 1.0], &p);
        let d = heads.policy_dist(&input).unwrap();
        let s = d.sample(&mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let b = heads.policy.params.bind(&mut tape);
        let t = heads.policy_terms(&mut tape, &b, &input, &s.pre_tanh).unwrap();
        for (a, b) in tape.value(t.log_prob).data().iter().zip(&s.log_prob) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((tape.value(t.entropy).item() - d.entropy()).abs() < 1e-12);
        assert!(s.actions.iter().all(|a| a.iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (heads, p, states) = setup();
        let ck = heads.checkpoint(BTreeMap::new());
        let json = ck.to_json().unwrap();
        let back = ValueHeads::from_checkpoint(&Checkpoint::from_json(&json).unwrap()).unwrap();
        let refs: Vec<&GlobalState> = states.iter().collect();
        let input = BatchInput::new(&refs, &[0.5, 1.0], &p);
        assert_eq!(heads.policy_dist(&input).unwrap(), back.policy_dist(&input).unwrap());
        assert_eq!(heads.cost_values(&input).unwrap(), back.cost_values(&input).unwrap());
    }
}
