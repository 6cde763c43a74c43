//! Centralized training: value targets, total-value advantages, the clipped
//! policy update, and the penalty and Lagrangian baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use epigraph_nn::{clip_grad_norm, Adam, AdamState, Checkpoint, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::env::{EnvParams, GlobalState};
use crate::model::{BatchInput, ModelConfig, ValueHeads, ZNet};
use crate::rollout::{collect, BudgetMode, RolloutBatch, ZRange};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub entropy_coef: f64,
    pub policy_lr: f64,
    pub vl_lr: f64,
    pub vh_lr: f64,
    pub grad_clip: f64,
    pub n_envs: usize,
    pub updates: usize,
    /// Bootstrap the constraint-value target with the learned `V^h` at
    /// truncation. Off by default: the episode end is treated as absorbing
    /// and the target stops at `h(x_T)`.
    pub bootstrap_vh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.25,
            ppo_epochs: 1,
            entropy_coef: 0.01,
            policy_lr: 3e-4,
            vl_lr: 1e-3,
            vh_lr: 1e-3,
            grad_clip: 2.0,
            n_envs: 128,
            updates: 100_000,
            bootstrap_vh: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let unit = [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let positive = [
            ("clip_eps", self.clip_eps),
            ("policy_lr", self.policy_lr),
            ("vl_lr", self.vl_lr),
            ("vh_lr", self.vh_lr),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_envs == 0 || self.ppo_epochs == 0 {
            return Err(Error::InvalidParams("n_envs and ppo_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Training algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    DefMarl,
    /// Cost `l + beta * max{h, 0}`.
    Penalty { beta: f64 },
    /// Cost `l + lambda * max{h, 0}` with dual ascent on `lambda`.
    Lagrangian { lambda0: f64, lr: f64 },
}

impl Algorithm {
    pub const LAGR_DEFAULT_LR: f64 = 1e-7;

    pub fn initial_lambda(&self) -> f64 {
        match *self {
            Algorithm::Lagrangian { lambda0, .. } => lambda0,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let ok = match *self {
            Algorithm::DefMarl => true,
            Algorithm::Penalty { beta } => beta >= 0.0,
            Algorithm::Lagrangian { lambda0, lr } => lambda0 >= 0.0 && lr >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("negative coefficient in {self}")))
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Algorithm::DefMarl => f.write_str("def-marl"),
            Algorithm::Penalty { beta } => write!(f, "penalty({beta})"),
            Algorithm::Lagrangian { lambda0, lr } => write!(f, "lagr({lambda0},{lr})"),
        }
    }
}

/// Accepts `def-marl`, `penalty(0.5)`, `lagr(5)`, `lagr(0.78,3e-3)` and
/// `lagr-lr` (initial multiplier 0.78, step 3e-3).
impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let bad = || Error::InvalidParams(format!("unknown algorithm {s:?}"));
        if key == "def-marl" || key == "defmarl" {
            return Ok(Algorithm::DefMarl);
        }
        if key == "lagr-lr" || key == "lagr(lr)" {
            return Ok(Algorithm::Lagrangian { lambda0: 0.78, lr: 3e-3 });
        }
        let (name, args) = key.split_once('(').ok_or_else(bad)?;
        let args = args.strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let algo = match (name, nums.as_slice()) {
            ("penalty", [beta]) => Algorithm::Penalty { beta: *beta },
            ("lagr" | "lagrangian", [l0]) => {
                Algorithm::Lagrangian { lambda0: *l0, lr: Self::LAGR_DEFAULT_LR }
            }
            ("lagr" | "lagrangian", [l0, lr]) => Algorithm::Lagrangian { lambda0: *l0, lr: *lr },
            _ => return Err(bad()),
        };
        algo.validate()?;
        Ok(algo)
    }
}

/// Discounted TD(lambda) targets. `values` has one more entry than `cost`;
/// the last is the bootstrap at truncation.
pub fn targets_vl(cost: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(values.len(), cost.len() + 1);
    let t = cost.len();
    let mut out = vec![0.0; t];
    let mut adv = 0.0;
    for k in (0..t).rev() {
        let delta = cost[k] + gamma * values[k + 1] - values[k];
        adv = delta + gamma * lambda * adv;
        out[k] = adv + values[k];
    }
    out
}

/// Undiscounted lambda-weighted max backup for the constraint value:
/// `T_k = (1 - lambda) max{h_k, V_{k+1}} + lambda max{h_k, T_{k+1}}` with
/// `T_T = V_T`, the bootstrap.
pub fn targets_vh(h: &[f64], values: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(values.len(), h.len() + 1);
    let t = h.len();
    let mut out = vec![0.0; t];
    let mut next = values[t];
    for k in (0..t).rev() {
        let one_step = h[k].max(values[k + 1]);
        let multi = h[k].max(next);
        next = (1.0 - lambda) * one_step + lambda * multi;
        out[k] = next;
    }
    out
}

/// Standardizes advantages with a floor on the standard deviation.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len().max(1) as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Advantage of reaching a lower total value than predicted:
/// `max{V^h, V^l - z} - max{T^h, T^l - z}`, before normalization.
pub fn total_value_advantage(vh: f64, vl: f64, th: f64, tl: f64, z: f64) -> f64 {
    vh.max(vl - z) - th.max(tl - z)
}

/// Clipped surrogate for one transition (to be maximized).
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// One Adam optimizer per network.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub policy: Adam,
    pub cost_value: Adam,
    pub constraint_value: Adam,
}

impl Optimizers {
    pub fn new(heads: &ValueHeads, cfg: &TrainConfig) -> Self {
        Self {
            policy: Adam::new(&heads.policy.params, cfg.policy_lr),
            cost_value: Adam::new(&heads.cost_value.params, cfg.vl_lr),
            constraint_value: Adam::new(&heads.constraint_value.params, cfg.vh_lr),
        }
    }
}

/// What the advantage is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Total value `max{V^h, V^l - z}` with both critics trained.
    Epigraph,
    /// Cost critic on `l + coef * max{h, 0}`; the constraint critic is idle.
    Shaped { coef: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub vl_loss: f64,
    pub vh_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Per-step cost seen by the critic for env `e`.
fn critic_costs(batch: &RolloutBatch, e: usize, objective: Objective) -> Vec<f64> {
    (0..batch.horizon)
        .map(|k| match objective {
            Objective::Epigraph => batch.cost[k][e],
            Objective::Shaped { coef } => batch.cost[k][e] + coef * batch.team_h(k, e).max(0.0),
        })
        .collect()
}

/// Regresses `net` onto `targets` for the non-terminal rows and returns the
/// loss together with the pre-update predictions of every row.
fn fit_critic(
    net: &mut ZNet,
    opt: &mut Adam,
    input: &BatchInput,
    targets_of: impl FnOnce(&[f64]) -> Vec<f64>,
    n_fit_rows: usize,
    grad_clip: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), Error> {
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape);
    let pred = net.forward(&mut tape, &b, input)?;
    let values = tape.value(pred).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("critic prediction".into()));
    }
    let targets = targets_of(&values);
    // rows past the fitted range regress onto themselves
    let mut full = values.clone();
    full[..n_fit_rows].copy_from_slice(&targets[..n_fit_rows]);
    let t = tape.constant(Tensor::column(&full));
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let sum = tape.sum(sq);
    let loss = tape.scale(sum, 1.0 / n_fit_rows as f64);
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let g = tape.backward(loss)?;
    let mut grads = b.gradients(&g, &net.params);
    clip_grad_norm(&mut grads, grad_clip);
    opt.step(&mut net.params, &grads);
    Ok((loss_value, values, targets))
}

/// One pass of critic regression and clipped policy improvement on `batch`.
pub fn ppo_update(
    heads: &mut ValueHeads,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    params: &EnvParams,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<UpdateStats, Error> {
    let (t_max, m, n) = (batch.horizon, batch.n_envs, batch.n_agents);
    // rows are step-major: env row k*m + e, agent row (k*m + e)*n + i
    let all_states: Vec<&GlobalState> = batch.states.iter().flatten().collect();
    let all_z: Vec<f64> = batch.z.iter().flatten().copied().collect();
    let input_all = BatchInput::new(&all_states, &all_z, params);

    let costs: Vec<Vec<f64>> = (0..m).map(|e| critic_costs(batch, e, objective)).collect();
    let (vl_loss, vl, tl) = fit_critic(
        &mut heads.cost_value,
        &mut opt.cost_value,
        &input_all,
        |v| {
            let mut out = vec![0.0; v.len()];
            for e in 0..m {
                let seq: Vec<f64> = (0..=t_max).map(|k| v[k * m + e]).collect();
                for (k, t) in targets_vl(&costs[e], &seq, cfg.gamma, cfg.gae_lambda).into_iter().enumerate() {
                    out[k * m + e] = t;
                }
            }
            out
        },
        t_max * m,
        cfg.grad_clip,
    )?;

    let n_rows = t_max * m * n;
    let mut adv = vec![0.0; n_rows];
    let mut vh_loss = 0.0;
    match objective {
        Objective::Epigraph => {
            let (loss, vh, th) = fit_critic(
                &mut heads.constraint_value,
                &mut opt.constraint_value,
                &input_all,
                |v| {
                    let mut out = vec![0.0; v.len()];
                    for e in 0..m {
                        for i in 0..n {
                            let row = |k: usize| (k * m + e) * n + i;
                            let h: Vec<f64> = (0..t_max).map(|k| batch.h[k][e * n + i]).collect();
                            let mut seq: Vec<f64> = (0..=t_max).map(|k| v[row(k)]).collect();
                            let h_last = batch.h[t_max][e * n + i];
                            seq[t_max] = if cfg.bootstrap_vh { seq[t_max].max(h_last) } else { h_last };
                            for (k, t) in targets_vh(&h, &seq, cfg.gae_lambda).into_iter().enumerate() {
                                out[row(k)] = t;
                            }
                        }
                    }
                    out
                },
                n_rows,
                cfg.grad_clip,
            )?;
            vh_loss = loss;
            for k in 0..t_max {
                for e in 0..m {
                    let z = batch.z[k][e];
                    for i in 0..n {
                        let r = (k * m + e) * n + i;
                        adv[r] = total_value_advantage(vh[r], vl[k * m + e], th[r], tl[k * m + e], z);
                    }
                }
            }
        }
        Objective::Shaped { .. } => {
            for k in 0..t_max {
                for e in 0..m {
                    let a = vl[k * m + e] - tl[k * m + e];
                    for i in 0..n {
                        adv[(k * m + e) * n + i] = a;
                    }
                }
            }
        }
    }
    let adv = normalize(&adv);

    let act_states: Vec<&GlobalState> = batch.states[..t_max].iter().flatten().collect();
    let act_z: Vec<f64> = batch.z[..t_max].iter().flatten().copied().collect();
    let input_act = BatchInput::new(&act_states, &act_z, params);
    let mut pre = Vec::with_capacity(n_rows * 2);
    for t in &batch.pre_tanh {
        pre.extend_from_slice(t.data());
    }
    let pre = Tensor::new(n_rows, 2, pre)?;
    let old: Vec<f64> = batch.log_prob.iter().flatten().copied().collect();

    let mut stats = UpdateStats { vl_loss, vh_loss, ..Default::default() };
    for _ in 0..cfg.ppo_epochs {
        let mut tape = Tape::new();
        let b = heads.policy.params.bind(&mut tape);
        let terms = heads.policy_terms(&mut tape, &b, &input_act, &pre)?;
        let old_v = tape.constant(Tensor::column(&old));
        let log_ratio = tape.sub(terms.log_prob, old_v)?;
        let ratio = tape.exp(log_ratio);
        let a = tape.constant(Tensor::column(&adv));
        let s1 = tape.mul(ratio, a)?;
        let clipped = tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let s2 = tape.mul(clipped, a)?;
        let obj = tape.minimum(s1, s2)?;
        let surrogate = tape.mean(obj);
        let bonus = tape.scale(terms.entropy, cfg.entropy_coef);
        let total = tape.add(surrogate, bonus)?;
        let loss = tape.scale(total, -1.0);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("policy loss".into()));
        }
        let lr = tape.value(log_ratio).data();
        stats.approx_kl = -lr.iter().sum::<f64>() / lr.len() as f64;
        stats.policy_loss = -tape.value(surrogate).item();
        stats.entropy = tape.value(terms.entropy).item();
        let g = tape.backward(loss)?;
        let mut grads = b.gradients(&g, &heads.policy.params);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.policy.step(&mut heads.policy.params, &grads);
    }
    Ok(stats)
}

/// Mean over environments and agents of the summed positive part of `h`.
pub fn mean_violation(batch: &RolloutBatch) -> f64 {
    let n = batch.n_agents;
    let total: f64 = (0..batch.horizon)
        .map(|k| batch.h[k].iter().map(|h| h.max(0.0)).sum::<f64>())
        .sum();
    total / (batch.n_envs * n) as f64
}

/// Dual ascent step, kept non-negative.
pub fn lagrange_step(lambda: f64, lr: f64, violation: f64) -> f64 {
    (lambda + lr * violation).max(0.0)
}

/// Baseline update: shaped-cost PPO, then the multiplier step in Lagrangian
/// mode. Returns the stats and the new multiplier.
pub fn baseline_update(
    heads: &mut ValueHeads,
    opt: &mut Optimizers,
    batch: &RolloutBatch,
    params: &EnvParams,
    cfg: &TrainConfig,
    algo: Algorithm,
    lambda: f64,
) -> Result<(UpdateStats, f64), Error> {
    let coef = match algo {
        Algorithm::Penalty { beta } => beta,
        Algorithm::Lagrangian { .. } => lambda,
        Algorithm::DefMarl => {
            return Err(Error::InvalidParams("def-marl is not a baseline".into()));
        }
    };
    let stats = ppo_update(heads, opt, batch, params, cfg, Objective::Shaped { coef })?;
    let next = match algo {
        Algorithm::Lagrangian { lr, .. } => lagrange_step(lambda, lr, mean_violation(batch)),
        _ => lambda,
    };
    Ok((stats, next))
}

/// One row of the training metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub policy_loss: f64,
    pub vl_loss: f64,
    pub vh_loss: f64,
    pub entropy: f64,
    pub mean_cost: f64,
    pub safety_rate: f64,
    pub lambda: f64,
    pub wall_clock: f64,
}

/// Mean episode cost and the fraction of agents that stayed safe throughout.
pub fn batch_outcome(batch: &RolloutBatch) -> (f64, f64) {
    let (m, n) = (batch.n_envs, batch.n_agents);
    let cost = (0..m).map(|e| (0..batch.horizon).map(|k| batch.cost[k][e]).sum::<f64>()).sum::<f64>()
        / m as f64;
    let safe = (0..m * n).filter(|&r| batch.h.iter().all(|hk| hk[r] <= 0.0)).count();
    (cost, safe as f64 / (m * n) as f64)
}

/// Seed of the rollout collected at a given update.
pub fn rollout_seed(seed: u64, update: usize) -> u64 {
    let mut x = seed ^ (update as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Training loop state for one run.
pub struct Trainer {
    pub heads: ValueHeads,
    pub opt: Optimizers,
    pub env: EnvParams,
    pub cfg: TrainConfig,
    pub algo: Algorithm,
    pub zrange: ZRange,
    pub lambda: f64,
    pub seed: u64,
    pub updates_done: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(
        env: EnvParams,
        model: ModelConfig,
        cfg: TrainConfig,
        algo: Algorithm,
        seed: u64,
    ) -> Result<Self, Error> {
        env.validate()?;
        cfg.validate()?;
        algo.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let heads = ValueHeads::new(model, &mut rng);
        let opt = Optimizers::new(&heads, &cfg);
        let zrange = ZRange::for_training(&env, cfg.gamma);
        Ok(Self {
            heads,
            opt,
            zrange,
            lambda: algo.initial_lambda(),
            env,
            cfg,
            algo,
            seed,
            updates_done: 0,
            started: Instant::now(),
        })
    }

    pub fn budget_mode(&self) -> BudgetMode {
        match self.algo {
            Algorithm::DefMarl => BudgetMode::Epigraph(self.zrange),
            _ => BudgetMode::Frozen,
        }
    }

    /// Collects a fresh batch.
    pub fn collect(&self) -> Result<RolloutBatch, Error> {
        let seed = rollout_seed(self.seed, self.updates_done);
        collect(&self.heads, &self.env, self.budget_mode(), self.cfg.n_envs, seed)
    }

    /// Trains on an already collected batch and advances the update counter.
    pub fn train_on(&mut self, batch: &RolloutBatch) -> Result<MetricsRow, Error> {
        let lambda_used = self.lambda;
        let stats = match self.algo {
            Algorithm::DefMarl => ppo_update(
                &mut self.heads,
                &mut self.opt,
                batch,
                &self.env,
                &self.cfg,
                Objective::Epigraph,
            )?,
            algo => {
                let (stats, next) = baseline_update(
                    &mut self.heads,
                    &mut self.opt,
                    batch,
                    &self.env,
                    &self.cfg,
                    algo,
                    self.lambda,
                )?;
                self.lambda = next;
                stats
            }
        };
        self.updates_done += 1;
        let (mean_cost, safety_rate) = batch_outcome(batch);
        Ok(MetricsRow {
            step: self.updates_done,
            policy_loss: stats.policy_loss,
            vl_loss: stats.vl_loss,
            vh_loss: stats.vh_loss,
            entropy: stats.entropy,
            mean_cost,
            safety_rate,
            lambda: lambda_used,
            wall_clock: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn update(&mut self) -> Result<MetricsRow, Error> {
        let batch = self.collect()?;
        self.train_on(&batch)
    }

    /// Parameters, optimizer moments and run state.
    pub fn checkpoint(&self, extra: BTreeMap<String, serde_json::Value>) -> Result<Checkpoint, Error> {
        let mut meta = extra;
        let put = |meta: &mut BTreeMap<String, serde_json::Value>, k: &str, v: serde_json::Value| {
            meta.insert(k.to_string(), v);
        };
        put(&mut meta, "task", self.env.task.name().into());
        put(&mut meta, "n_agents", self.env.n_agents.into());
        put(&mut meta, "nu", self.env.nu.into());
        put(&mut meta, "env", serde_json::to_value(&self.env)?);
        put(&mut meta, "z_range", serde_json::to_value(self.zrange)?);
        put(&mut meta, "algorithm", serde_json::to_value(self.algo)?);
        put(&mut meta, "train", serde_json::to_value(&self.cfg)?);
        put(&mut meta, "lambda", self.lambda.into());
        put(&mut meta, "seed", self.seed.into());
        put(&mut meta, "updates_done", self.updates_done.into());
        let opt = [
            ("policy", self.opt.policy.state()),
            ("cost_value", self.opt.cost_value.state()),
            ("constraint_value", self.opt.constraint_value.state()),
        ];
        let opt: BTreeMap<&str, AdamState> = opt.into_iter().collect();
        put(&mut meta, "optimizer", serde_json::to_value(opt)?);
        Ok(self.heads.checkpoint(meta))
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self, Error> {
        let get = |k: &str| {
            ck.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::MetadataMismatch(format!("checkpoint lacks {k:?}")))
        };
        let env: EnvParams = serde_json::from_value(get("env")?)?;
        let cfg: TrainConfig = serde_json::from_value(get("train")?)?;
        let algo: Algorithm = serde_json::from_value(get("algorithm")?)?;
        let heads = ValueHeads::from_checkpoint(ck)?;
        let mut opt = Optimizers::new(&heads, &cfg);
        let mut states: BTreeMap<String, AdamState> = serde_json::from_value(get("optimizer")?)?;
        let mut restore = |name: &str, adam: &mut Adam| -> Result<(), Error> {
            let s = states
                .remove(name)
                .ok_or_else(|| Error::MetadataMismatch(format!("no optimizer state for {name}")))?;
            Ok(adam.restore(s)?)
        };
        restore("policy", &mut opt.policy)?;
        restore("cost_value", &mut opt.cost_value)?;
        restore("constraint_value", &mut opt.constraint_value)?;
        Ok(Self {
            heads,
            opt,
            zrange: serde_json::from_value(get("z_range")?)?,
            lambda: serde_json::from_value(get("lambda")?)?,
            seed: serde_json::from_value(get("seed")?)?,
            updates_done: serde_json::from_value(get("updates_done")?)?,
            env,
            cfg,
            algo,
            started: Instant::now(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;

    #[test]
    fn vl_targets_degenerate_cases() {
        let l = [0.1, 0.2, 0.3];
        let v = [0.5, -0.2, 0.7, 0.0];
        let mc = targets_vl(&l, &v, 1.0, 1.0);
        assert!((mc[0] - 0.6).abs() < 1e-12 && (mc[1] - 0.5).abs() < 1e-12);
        let td = targets_vl(&l, &v, 0.9, 0.0);
        for k in 0..3 {
            assert!((td[k] - (l[k] + 0.9 * v[k + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn vl_targets_match_enumerated_lambda_return() {
        // lambda-return as a weighted mix of n-step returns
        let l = [0.1, 0.2, 0.3];
        let v = [0.4, -0.3, 0.25, 0.8];
        let (g, lam) = (0.99, 0.95);
        let t = targets_vl(&l, &v, g, lam);
        let n_step = |k: usize, nn: usize| -> f64 {
            let end = (k + nn).min(3);
            let mut r = 0.0;
            for p in k..end {
                r += g.powi((p - k) as i32) * l[p];
            }
            r + g.powi((end - k) as i32) * v[end]
        };
        for k in 0..3 {
            let horizon = 3 - k;
            let mut want = 0.0;
            for nn in 1..horizon {
                want += (1.0 - lam) * lam.powi(nn as i32 - 1) * n_step(k, nn);
            }
            want += lam.powi(horizon as i32 - 1) * n_step(k, horizon);
            assert!((t[k] - want).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn vh_targets() {
        let h = [-0.6, 0.54, -0.6];
        let v = [0.0, -0.3, -0.2, -0.5];
        let exact = targets_vh(&h, &v, 1.0);
        assert_eq!(exact, vec![0.54, 0.54, -0.5]);
        let one = targets_vh(&h, &v, 0.0);
        assert_eq!(one, vec![-0.3, 0.54, -0.5]);
        let lam = 0.95;
        let t2 = (-0.6f64).max(-0.5);
        let t1 = (1.0 - lam) * 0.54f64.max(-0.2) + lam * 0.54f64.max(t2);
        let t0 = (1.0 - lam) * (-0.6f64).max(-0.3) + lam * (-0.6f64).max(t1);
        let got = targets_vh(&h, &v, lam);
        for (a, b) in got.iter().zip([t0, t1, t2]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(normalize(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        // dominated cost branch: neither the cost critic nor z matter
        let a = total_value_advantage(0.5, 0.1, 0.2, 0.3, 1.0);
        let b = total_value_advantage(0.5, 0.0, 0.2, 0.0, 2.0);
        assert!((a - 0.3).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
        // shifting critic and target by c leaves normalized advantages unchanged
        let vl = [0.3, 0.9, -0.2];
        let tl = [0.1, 1.2, 0.0];
        let raw: Vec<f64> = (0..3).map(|k| vl[k] - tl[k]).collect();
        let shifted: Vec<f64> = (0..3).map(|k| (vl[k] + 5.0) - (tl[k] + 5.0)).collect();
        let (x, y) = (normalize(&raw), normalize(&shifted));
        for k in 0..3 {
            assert!((x[k] - y[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.25), 1.25);
        assert_eq!(clipped_objective(1.5, -1.0, 0.25), -1.5);
        assert_eq!(clipped_objective(1.0, 0.7, 0.25), 0.7);
    }

    #[test]
    fn algorithm_parsing() {
        assert_eq!("def-marl".parse::<Algorithm>().unwrap(), Algorithm::DefMarl);
        assert_eq!("penalty(0.5)".parse::<Algorithm>().unwrap(), Algorithm::Penalty { beta: 0.5 });
        assert_eq!(
            "lagr(5)".parse::<Algorithm>().unwrap(),
            Algorithm::Lagrangian { lambda0: 5.0, lr: 1e-7 }
        );
        assert_eq!(
            "lagr-lr".parse::<Algorithm>().unwrap(),
            Algorithm::Lagrangian { lambda0: 0.78, lr: 3e-3 }
        );
        assert!("penalty(-1)".parse::<Algorithm>().is_err());
        assert!("ppo".parse::<Algorithm>().is_err());
        for a in ["def-marl", "penalty(0.02)", "lagr(1,0.003)"] {
            let algo: Algorithm = a.parse().unwrap();
            assert_eq!(algo.to_string().parse::<Algorithm>().unwrap(), algo);
        }
    }

    #[test]
    fn lagrange_step_sign() {
        assert_eq!(lagrange_step(1.0, 0.1, 0.0), 1.0);
        assert!(lagrange_step(1.0, 0.1, 0.5) > 1.0);
        assert_eq!(lagrange_step(0.0, 0.1, -3.0), 0.0);
    }

    fn small_trainer(algo: Algorithm) -> Trainer {
        let env = EnvParams::new(Task::Target, 2).with_horizon(8);
        let cfg = TrainConfig { n_envs: 4, updates: 3, ..Default::default() };
        Trainer::new(env, ModelConfig::compact(Task::Target), cfg, algo, 3).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = small_trainer(Algorithm::DefMarl);
            (0..3).map(|_| t.update().unwrap().policy_loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_continues_bit_identically() {
        let mut a = small_trainer(Algorithm::Lagrangian { lambda0: 1.0, lr: 0.1 });
        a.update().unwrap();
        let ck = a.checkpoint(BTreeMap::new()).unwrap();
        let json = ck.to_json().unwrap();
        let mut b = Trainer::resume(&Checkpoint::from_json(&json).unwrap()).unwrap();
        let ra = a.update().unwrap();
        let rb = b.update().unwrap();
        assert_eq!((ra.policy_loss, ra.vl_loss, ra.lambda), (rb.policy_loss, rb.vl_loss, rb.lambda));
        assert_eq!(a.heads.policy.params, b.heads.policy.params);
    }

    #[test]
    fn identity_ratio_gives_zero_mean_surrogate() {
        let mut t = small_trainer(Algorithm::DefMarl);
        let batch = t.collect().unwrap();
        let stats = ppo_update(
            &mut t.heads,
            &mut t.opt,
            &batch,
            &t.env,
            &t.cfg,
            Objective::Epigraph,
        )
        .unwrap();
        assert!(stats.policy_loss.abs() < 1e-9);
        assert!(stats.approx_kl.abs() < 1e-9);
    }

    #[test]
    fn value_losses_fall_on_a_frozen_batch() {
        let mut t = small_trainer(Algorithm::DefMarl);
        let batch = t.collect().unwrap();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let s = ppo_update(&mut t.heads, &mut t.opt, &batch, &t.env, &t.cfg, Objective::Epigraph)
                .unwrap();
            losses.push((s.vl_loss, s.vh_loss));
        }
        assert!(losses[9].0 < losses[0].0);
        assert!(losses[9].1 < losses[0].1);
    }

    #[test]
    fn zero_penalty_is_plain_ppo_on_cost() {
        let mut a = small_trainer(Algorithm::Penalty { beta: 0.0 });
        let mut b = small_trainer(Algorithm::Penalty { beta: 0.0 });
        let mut batch = a.collect().unwrap();
        // make the constraint irrelevant to the comparison
        for hk in batch.h.iter_mut() {
            hk.iter_mut().for_each(|h| *h = h.abs() + 0.1);
        }
        let ra = a.train_on(&batch).unwrap();
        let rb = ppo_update(&mut b.heads, &mut b.opt, &batch, &b.env, &b.cfg, Objective::Shaped { coef: 0.0 })
            .unwrap();
        assert_eq!(ra.policy_loss, rb.policy_loss);
        assert_eq!(a.heads.policy.params, b.heads.policy.params);
    }
}
