//! Trajectory collection under the joint state-and-budget dynamics.
//!
//! Each environment starts from a fresh reset and a budget `z^0`; after every
//! step the budget pays for the incurred cost, `z^{k+1} = z^k - l(x^k, u^k)`.

use epigraph_nn::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{cost_l, reset, step, team_constraint, Control, CostWeights, EnvParams, GlobalState};
use crate::metrics::{StepRecord, Trajectory};
use crate::model::{ActionSample, BatchInput, ValueHeads};
use crate::Error;

/// Sampling range of the initial budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZRange {
    pub z_min: f64,
    pub z_max: f64,
}

impl ZRange {
    pub const DEFAULT_Z_MIN: f64 = -0.5;

    pub fn for_env(params: &EnvParams) -> Self {
        Self {
            z_min: Self::DEFAULT_Z_MIN,
            z_max: estimate_zmax(params, &CostWeights::default()),
        }
    }

    /// The range used for training with discount `gamma`. The upper end
    /// must also bound the discounted cost value, which looks up to
    /// `1 / (1 - gamma)` steps ahead, so short horizons are widened to that
    /// many steps. Horizons at least that long get [`ZRange::for_env`].
    pub fn for_training(params: &EnvParams, gamma: f64) -> Self {
        let base = Self::for_env(params);
        let steps = params.horizon as f64;
        let effective = if gamma < 1.0 { (1.0 / (1.0 - gamma)).max(steps) } else { steps };
        Self { z_max: base.z_max * effective / steps, ..base }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.z_min < self.z_max && self.z_min.is_finite() && self.z_max.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "z range [{}, {}] is empty",
                self.z_min, self.z_max
            )))
        }
    }
}

/// Conservative bound on the total cost of one episode: the per-step cost at
/// the largest possible goal distance with saturated control, times `T`.
pub fn estimate_zmax(params: &EnvParams, weights: &CostWeights) -> f64 {
    let d = params.layout().max_initial_distance();
    weights.max_step_cost(d) * params.horizon as f64
}

/// How the budget is handled during collection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BudgetMode {
    /// `z^0 ~ U[z_min, z_max]`, then the budget dynamics.
    Epigraph(ZRange),
    /// Budget held at zero (baselines that ignore it).
    Frozen,
}

/// Anything that maps a batch of observations to sampled actions.
pub trait Actor {
    fn act(&self, input: &BatchInput, rng: &mut dyn RngCore) -> Result<ActionSample, Error>;
}

impl Actor for ValueHeads {
    fn act(&self, input: &BatchInput, rng: &mut dyn RngCore) -> Result<ActionSample, Error> {
        Ok(self.policy_dist(input)?.sample(rng))
    }
}

/// On-policy data from `n_envs` environments over `T` steps.
///
/// Per-step vectors are indexed `[k][env]`, or `[k][env * N + i]` for
/// per-agent quantities. States, budgets and `h` include the terminal step
/// `k = T`; actions and costs stop at `T - 1`.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub seed: u64,
    pub n_envs: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub z0: Vec<f64>,
    pub states: Vec<Vec<GlobalState>>,
    pub z: Vec<Vec<f64>>,
    pub actions: Vec<Vec<[f64; 2]>>,
    pub pre_tanh: Vec<Tensor>,
    pub log_prob: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl RolloutBatch {
    pub fn n_transitions(&self) -> usize {
        self.n_envs * self.horizon * self.n_agents
    }

    /// Terminal flag: only the last recorded step ends an episode.
    pub fn done(&self, k: usize) -> bool {
        k + 1 == self.horizon
    }

    /// Team constraint `max_i h_i` at step `k` of env `e`.
    pub fn team_h(&self, k: usize, e: usize) -> f64 {
        let n = self.n_agents;
        self.h[k][e * n..(e + 1) * n].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One log per environment, steps `0..T`, with log-probabilities.
    pub fn trajectories(&self) -> Vec<Trajectory> {
        let n = self.n_agents;
        (0..self.n_envs)
            .map(|e| Trajectory {
                env: e,
                n_agents: n,
                steps: (0..self.horizon)
                    .map(|k| StepRecord {
                        k,
                        x: self.states[k][e].flat_agents(),
                        z: self.z[k][e],
                        u: self.actions[k][e * n..(e + 1) * n]
                            .iter()
                            .flat_map(|a| a.iter().copied())
                            .collect(),
                        l: self.cost[k][e],
                        h: self.h[k][e * n..(e + 1) * n].to_vec(),
                        log_prob: Some(self.log_prob[k][e * n..(e + 1) * n].to_vec()),
                    })
                    .collect(),
            })
            .collect()
    }
}

pub fn collect(
    actor: &dyn Actor,
    params: &EnvParams,
    mode: BudgetMode,
    n_envs: usize,
    seed: u64,
) -> Result<RolloutBatch, Error> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n_envs);
    for _ in 0..n_envs {
        states.push(reset(params, rng.gen())?);
    }
    let z0: Vec<f64> = match mode {
        BudgetMode::Epigraph(range) => {
            range.validate()?;
            (0..n_envs).map(|_| rng.gen_range(range.z_min..range.z_max)).collect()
        }
        BudgetMode::Frozen => vec![0.0; n_envs],
    };
    let t_max = params.horizon;
    let n = params.n_agents;
    let mut batch = RolloutBatch {
        seed,
        n_envs,
        n_agents: n,
        horizon: t_max,
        z0: z0.clone(),
        states: Vec::with_capacity(t_max + 1),
        z: Vec::with_capacity(t_max + 1),
        actions: Vec::with_capacity(t_max),
        pre_tanh: Vec::with_capacity(t_max),
        log_prob: Vec::with_capacity(t_max),
        cost: Vec::with_capacity(t_max),
        h: Vec::with_capacity(t_max + 1),
    };
    let mut z = z0;
    let team_h = |states: &[GlobalState]| -> Vec<f64> {
        states.iter().flat_map(|s| team_constraint(s, params).1).collect()
    };
    for _ in 0..t_max {
        let refs: Vec<&GlobalState> = states.iter().collect();
        let input = BatchInput::new(&refs, &z, params);
        let sample = actor.act(&input, &mut rng)?;
        if sample.log_prob.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action log-probability".into()));
        }
        let mut next_states = Vec::with_capacity(n_envs);
        let mut costs = Vec::with_capacity(n_envs);
        for (e, s) in states.iter().enumerate() {
            let u = Control(sample.actions[e * n..(e + 1) * n].to_vec());
            costs.push(cost_l(s, &u, params));
            next_states.push(step(s, &u, params));
        }
        let next_z: Vec<f64> = match mode {
            BudgetMode::Epigraph(_) => z.iter().zip(&costs).map(|(z, l)| z - l).collect(),
            BudgetMode::Frozen => z.clone(),
        };
        batch.h.push(team_h(&states));
        batch.states.push(std::mem::replace(&mut states, next_states));
        batch.z.push(std::mem::replace(&mut z, next_z));
        batch.actions.push(sample.actions);
        batch.pre_tanh.push(sample.pre_tanh);
        batch.log_prob.push(sample.log_prob);
        batch.cost.push(costs);
    }
    batch.h.push(team_h(&states));
    batch.states.push(states);
    batch.z.push(z);
    Ok(batch)
}

/// Finite-horizon total value from its definition:
/// `V_k = max{ max_{p >= k} h_p, sum_{p >= k} l_p - z_k }`.
/// `h` has `T + 1` entries, `l` and `z` have at least `T`.
pub fn suffix_values(h: &[f64], l: &[f64], z: &[f64]) -> Vec<f64> {
    let t_max = h.len() - 1;
    (0..=t_max)
        .map(|k| {
            let max_h = h[k..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let cost: f64 = l[k..t_max].iter().sum();
            max_h.max(cost - z[k])
        })
        .collect()
}

/// The same values by the backward recursion `V_k = max{h_k, V_{k+1}}` with
/// the next budget `z_k - l_k` and terminal `V_T = max{h_T, -z_T}`.
pub fn recursive_values(h: &[f64], l: &[f64], z0: f64) -> Vec<f64> {
    let t_max = h.len() - 1;
    let mut z = vec![z0; t_max + 1];
    for k in 0..t_max {
        z[k + 1] = z[k] - l[k];
    }
    let mut v = vec![0.0; t_max + 1];
    v[t_max] = h[t_max].max(-z[t_max]);
    for k in (0..t_max).rev() {
        v[k] = h[k].max(v[k + 1]);
    }
    v
}
