//! Distributed execution: each agent finds the smallest budget its
//! constraint critic certifies as safe, optionally agrees on the maximum with
//! its connected component, and acts with the budget-conditioned policy.

use serde::{Deserialize, Serialize};

use crate::env::{cost_l, dist, reset, step, team_constraint, Control, EnvParams, GlobalState, Vec2};
use crate::metrics::{evaluate, mean_std, EvalMetrics, StepRecord, Trajectory};
use crate::model::{BatchInput, ValueHeads};
use crate::rollout::ZRange;
use crate::Error;

/// Result of a scalar root search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iterations: usize,
    /// Function evaluations including the two endpoints.
    pub evaluations: usize,
}

fn same_sign(a: f64, b: f64) -> bool {
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

/// Chandrupatla's bracketing method: inverse quadratic interpolation when
/// the last three points make it safe, bisection otherwise. Stops once the
/// bracket is narrower than `tol` and returns its better endpoint.
pub fn find_root(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Root, Error> {
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo.is_finite() && f_hi.is_finite()) {
        return Err(Error::NonFinite("root-finder endpoint".into()));
    }
    if f_lo == 0.0 {
        return Ok(Root { x: lo, iterations: 0, evaluations: 2 });
    }
    if f_hi == 0.0 {
        return Ok(Root { x: hi, iterations: 0, evaluations: 2 });
    }
    if same_sign(f_lo, f_hi) {
        return Err(Error::NoBracket { lo, hi, f_lo, f_hi });
    }
    let (mut a, mut fa) = (hi, f_hi);
    let (mut b, mut fb) = (lo, f_lo);
    let (mut c, mut fc);
    let mut t = 0.5;
    let mut evaluations = 2;
    for it in 1..=max_iters {
        let xt = a + t * (b - a);
        let ft = f(xt);
        evaluations += 1;
        if !ft.is_finite() {
            return Err(Error::NonFinite(format!("root-finder at {xt}")));
        }
        if same_sign(ft, fa) {
            c = a;
            fc = fa;
        } else {
            c = b;
            b = a;
            fc = fb;
            fb = fa;
        }
        a = xt;
        fa = ft;
        let (xm, fm) = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
        if fm == 0.0 {
            return Ok(Root { x: xm, iterations: it, evaluations });
        }
        let tol_here = 2.0 * f64::EPSILON * xm.abs() + 0.5 * tol;
        let tlim = tol_here / (b - c).abs();
        if tlim > 0.5 {
            return Ok(Root { x: xm, iterations: it, evaluations });
        }
        let xi = (a - b) / (c - b);
        let phi = (fa - fb) / (fc - fb);
        t = if phi * phi < xi && (1.0 - phi) * (1.0 - phi) < 1.0 - xi {
            fa / (fb - fa) * fc / (fb - fc) + (c - a) / (b - a) * fa / (fc - fa) * fb / (fc - fb)
        } else {
            0.5
        };
        t = t.clamp(tlim, 1.0 - tlim);
    }
    let (xm, _) = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    Ok(Root { x: xm, iterations: max_iters, evaluations })
}

/// Plain bisection to a bracket narrower than `tol`; returns the midpoint.
pub fn bisect(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Root, Error> {
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if same_sign(fa, fb) {
        return Err(Error::NoBracket { lo, hi, f_lo: fa, f_hi: fb });
    }
    let mut fa = fa;
    let mut evaluations = 2;
    let mut it = 0;
    while (b - a).abs() > tol && it < max_iters {
        it += 1;
        let m = 0.5 * (a + b);
        let fm = f(m);
        evaluations += 1;
        if fm == 0.0 {
            return Ok(Root { x: m, iterations: it, evaluations });
        }
        if same_sign(fm, fa) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(Root { x: 0.5 * (a + b), iterations: it, evaluations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZSolverConfig {
    pub z_min: f64,
    pub z_max: f64,
    /// Safety buffer: solve `V^h <= -xi` instead of `V^h <= 0`.
    pub xi: f64,
    pub nu: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Share budgets within connected components and take the maximum.
    pub communicate_z: bool,
}

impl Default for ZSolverConfig {
    fn default() -> Self {
        Self {
            z_min: ZRange::DEFAULT_Z_MIN,
            z_max: 1.0,
            xi: 0.4,
            nu: 0.5,
            tol: 1e-6,
            max_iters: 100,
            communicate_z: false,
        }
    }
}

impl ZSolverConfig {
    pub fn for_range(range: ZRange, nu: f64) -> Self {
        Self { z_min: range.z_min, z_max: range.z_max, nu, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(0.0..=self.nu).contains(&self.xi) {
            return Err(Error::InvalidParams(format!(
                "xi = {} must lie in [0, nu = {}]",
                self.xi, self.nu
            )));
        }
        if !(self.z_min < self.z_max) || !(self.tol > 0.0) {
            return Err(Error::InvalidParams("empty z bracket or non-positive tolerance".into()));
        }
        Ok(())
    }
}

/// Budget chosen by one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZSolveResult {
    pub z: f64,
    /// False when even `z_max` is not certified; `z` is then `z_max`.
    pub feasible: bool,
    pub iterations: usize,
}

/// Smallest `z` in the bracket with `vh(z) + xi <= 0`.
pub fn solve_zi(mut vh: impl FnMut(f64) -> f64, cfg: &ZSolverConfig) -> Result<ZSolveResult, Error> {
    let g_lo = vh(cfg.z_min) + cfg.xi;
    let g_hi = vh(cfg.z_max) + cfg.xi;
    if !(g_lo.is_finite() && g_hi.is_finite()) {
        return Err(Error::NonFinite("constraint critic at the bracket ends".into()));
    }
    if g_lo <= 0.0 {
        return Ok(ZSolveResult { z: cfg.z_min, feasible: true, iterations: 0 });
    }
    if g_hi > 0.0 {
        return Ok(ZSolveResult { z: cfg.z_max, feasible: false, iterations: 0 });
    }
    let root = find_root(|z| vh(z) + cfg.xi, cfg.z_min, cfg.z_max, cfg.tol, cfg.max_iters)?;
    Ok(ZSolveResult { z: root.x, feasible: true, iterations: root.iterations })
}

/// Connected components of agents whose distance is within `radius`.
pub fn components(positions: &[Vec2], radius: f64) -> Vec<usize> {
    let n = positions.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn find(label: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while label[r] != r {
            r = label[r];
        }
        let mut j = i;
        while label[j] != r {
            let next = label[j];
            label[j] = r;
            j = next;
        }
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if dist(positions[i], positions[j]) <= radius {
                let (ri, rj) = (find(&mut label, i), find(&mut label, j));
                if ri != rj {
                    label[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut label, i)).collect()
}

/// Every agent adopts the largest budget in its connected component.
pub fn consensus(z: &[f64], positions: &[Vec2], radius: f64) -> Vec<f64> {
    let comp = components(positions, radius);
    (0..z.len())
        .map(|i| {
            (0..z.len())
                .filter(|&j| comp[j] == comp[i])
                .map(|j| z[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// How the policy's budget is chosen at execution time.
#[derive(Clone, Debug, PartialEq)]
pub enum ExecMode {
    /// Per-agent root-finding on the constraint critic.
    Solver(ZSolverConfig),
    /// The same budget for everyone (baselines use zero).
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub reset_seed: u64,
    pub cost: f64,
    pub safety_rate: f64,
    /// Budget used by each agent at each step.
    pub z_trace: Vec<Vec<f64>>,
    pub mean_solver_iterations: f64,
    pub infeasible_solves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n_agents: usize,
    pub mode: String,
    pub xi: Option<f64>,
    pub communicate_z: bool,
    pub n_episodes: usize,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub safety_mean: f64,
    pub safety_std: f64,
    pub episodes: Vec<EpisodeReport>,
}

/// Reset seed of evaluation episode `k`; shared by every algorithm so that
/// they face identical initial conditions.
pub fn episode_seed(seed: u64, k: usize) -> u64 {
    crate::train::rollout_seed(seed ^ 0x5EED_E7A1, k)
}

/// Runs `n_episodes` deterministic episodes in lockstep.
///
/// Each trajectory has `T + 1` records (`k = 0..=T`). Its `z` column holds
/// the largest budget among the agents.
pub fn execute(
    heads: &ValueHeads,
    env: &EnvParams,
    mode: &ExecMode,
    n_episodes: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, EvalReport), Error> {
    if let ExecMode::Solver(cfg) = mode {
        cfg.validate()?;
    }
    let n = env.n_agents;
    let seeds: Vec<u64> = (0..n_episodes).map(|k| episode_seed(seed, k)).collect();
    let mut states: Vec<GlobalState> =
        seeds.iter().map(|&s| reset(env, s)).collect::<Result<_, _>>()?;
    let mut trajs: Vec<Trajectory> = (0..n_episodes)
        .map(|e| Trajectory { env: e, n_agents: n, steps: Vec::with_capacity(env.horizon + 1) })
        .collect();
    let mut z_traces = vec![Vec::with_capacity(env.horizon + 1); n_episodes];
    let mut iters = vec![0usize; n_episodes];
    let mut solves = vec![0usize; n_episodes];
    let mut infeasible = vec![0usize; n_episodes];

    for k in 0..=env.horizon {
        let refs: Vec<&GlobalState> = states.iter().collect();
        let base = BatchInput::new(&refs, &vec![0.0; n_episodes], env);
        let z_agent: Vec<f64> = match mode {
            ExecMode::Fixed(z) => vec![*z; n_episodes * n],
            ExecMode::Solver(cfg) => {
                let emb = heads.constraint_value.embed_frozen(&base)?;
                let mut z = Vec::with_capacity(n_episodes * n);
                for r in 0..n_episodes * n {
                    let row = epigraph_nn::Tensor::row(emb.row_slice(r));
                    let net = &heads.constraint_value;
                    let res = solve_zi(
                        |zq| net.head_eval(&row, &[zq]).map_or(f64::NAN, |t| t.item()),
                        cfg,
                    )?;
                    let e = r / n;
                    iters[e] += res.iterations;
                    solves[e] += 1;
                    infeasible[e] += usize::from(!res.feasible);
                    z.push(res.z);
                }
                if cfg.communicate_z {
                    for (e, s) in states.iter().enumerate() {
                        let pos: Vec<Vec2> = s.agents.iter().map(|a| a.pos).collect();
                        let shared = consensus(&z[e * n..(e + 1) * n], &pos, env.comm_radius);
                        z[e * n..(e + 1) * n].copy_from_slice(&shared);
                    }
                }
                z
            }
        };
        let input = base.with_agent_z(z_agent.clone());
        let actions = heads.policy_dist(&input)?.mode();
        for (e, s) in states.iter_mut().enumerate() {
            let u = Control(actions[e * n..(e + 1) * n].to_vec());
            let zs = &z_agent[e * n..(e + 1) * n];
            let (_, h) = team_constraint(s, env);
            trajs[e].steps.push(StepRecord {
                k,
                x: s.flat_agents(),
                z: zs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                u: u.clipped().flat(),
                l: cost_l(s, &u, env),
                h,
                log_prob: None,
            });
            z_traces[e].push(zs.to_vec());
            if k < env.horizon {
                *s = step(s, &u, env);
            }
        }
    }

    let metrics: Vec<EvalMetrics> = trajs.iter().map(evaluate).collect::<Result<_, _>>()?;
    let costs: Vec<f64> = metrics.iter().map(|m| m.cost).collect();
    let safety: Vec<f64> = metrics.iter().map(|m| m.safety_rate).collect();
    let (cost_mean, cost_std) = mean_std(&costs);
    let (safety_mean, safety_std) = mean_std(&safety);
    let episodes = (0..n_episodes)
        .map(|e| EpisodeReport {
            reset_seed: seeds[e],
            cost: costs[e],
            safety_rate: safety[e],
            z_trace: std::mem::take(&mut z_traces[e]),
            mean_solver_iterations: if solves[e] > 0 { iters[e] as f64 / solves[e] as f64 } else { 0.0 },
            infeasible_solves: infeasible[e],
        })
        .collect();
    let (mode_name, xi, communicate_z) = match mode {
        ExecMode::Solver(c) => ("solver".to_string(), Some(c.xi), c.communicate_z),
        ExecMode::Fixed(z) => (format!("fixed({z})"), None, false),
    };
    let report = EvalReport {
        task: env.task.name().into(),
        n_agents: n,
        mode: mode_name,
        xi,
        communicate_z,
        n_episodes,
        cost_mean,
        cost_std,
        safety_mean,
        safety_std,
        episodes,
    };
    Ok((trajs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn linear_and_quadratic_roots() {
        let r = find_root(|z| z - 2.0, 0.0, 5.0, 1e-6, 100).unwrap();
        assert!((r.x - 2.0).abs() <= 1e-6);
        let r = find_root(|z| z * z - 4.0, 0.0, 5.0, 1e-6, 100).unwrap();
        let b = bisect(|z| z * z - 4.0, 0.0, 5.0, 1e-6, 200).unwrap();
        assert!((r.x - 2.0).abs() <= 1e-6 && (r.x - b.x).abs() <= 2e-6);
        assert!(r.evaluations < b.evaluations);
        assert!(matches!(
            find_root(|_| 1.0, 0.0, 5.0, 1e-6, 100),
            Err(Error::NoBracket { .. })
        ));
    }

    #[test]
    fn solve_zi_cases() {
        let cfg = ZSolverConfig { z_min: -0.5, z_max: 3.0, ..Default::default() };
        let r = solve_zi(|z| -z, &cfg).unwrap();
        assert!(r.feasible && (r.z - 0.4).abs() <= 1e-6);
        assert_eq!(solve_zi(|_| -1.0, &cfg).unwrap(), ZSolveResult { z: -0.5, feasible: true, iterations: 0 });
        assert_eq!(solve_zi(|_| 1.0, &cfg).unwrap(), ZSolveResult { z: 3.0, feasible: false, iterations: 0 });
        assert!(solve_zi(|_| f64::NAN, &cfg).is_err());
        let bad = ZSolverConfig { xi: 0.7, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn consensus_examples() {
        let z = [0.1, 0.5, 0.3];
        let close = [[0.0, 0.0], [0.3, 0.0], [0.6, 0.0]];
        assert_eq!(consensus(&z, &close, 0.5), vec![0.5, 0.5, 0.5]);
        let split = [[0.0, 0.0], [0.3, 0.0], [1.2, 0.0]];
        assert_eq!(consensus(&z, &split, 0.5), vec![0.5, 0.5, 0.3]);
        let apart = [[0.0, 0.0], [0.7, 0.0], [1.4, 0.0]];
        assert_eq!(consensus(&z, &apart, 0.5), z.to_vec());
    }

    #[test]
    fn execute_records_full_horizon() {
        let env = EnvParams::new(Task::Target, 2).with_horizon(6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let heads = ValueHeads::new(ModelConfig::compact(Task::Target), &mut rng);
        let mut cfg = ZSolverConfig::for_range(ZRange::for_env(&env), env.nu);
        cfg.communicate_z = true;
        let (trajs, report) = execute(&heads, &env, &ExecMode::Solver(cfg), 3, 1).unwrap();
        assert_eq!(trajs.len(), 3);
        assert!(trajs.iter().all(|t| t.steps.len() == 7));
        assert_eq!(report.episodes[0].z_trace.len(), 7);
        for (t, ep) in trajs.iter().zip(&report.episodes) {
            assert_eq!(evaluate(t).unwrap().cost, ep.cost);
        }
        let (again, _) = execute(&heads, &env, &ExecMode::Solver(report_cfg(&report, &env)), 3, 1).unwrap();
        assert_eq!(again, trajs);
    }

    fn report_cfg(r: &EvalReport, env: &EnvParams) -> ZSolverConfig {
        let mut cfg = ZSolverConfig::for_range(ZRange::for_env(env), env.nu);
        cfg.xi = r.xi.unwrap();
        cfg.communicate_z = r.communicate_z;
        cfg
    }
}
