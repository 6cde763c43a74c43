//! Brute-force ground truth on a tiny deterministic two-agent system.
//!
//! Two agents move on a line of cells with actions {-1, 0, +1}. Open-loop
//! action sequences are enumerated exhaustively, which for deterministic
//! dynamics and a fixed start is the same as enumerating closed-loop
//! policies. Every cost and constraint level is a multiple of 1/4, so all
//! sums are exact in `f64` and the oracles can be compared with `==`.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rollout::{recursive_values, suffix_values};
use crate::Error;

pub const N_TAB_AGENTS: usize = 2;
/// Joint actions per step: three moves for each of two agents.
pub const JOINT_ACTIONS: usize = 9;
pub const MAX_SEQUENCES: usize = 1_000_000;
/// Every tabulated value is a multiple of this.
pub const QUANTUM: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMas {
    pub n_cells: usize,
    pub horizon: usize,
    /// `cost[x][a]` for joint state `x` and joint action `a`.
    pub cost: Vec<[f64; JOINT_ACTIONS]>,
    /// `h[x][i]` for each agent.
    pub h: Vec<[f64; N_TAB_AGENTS]>,
    pub x0: usize,
}

/// Outcome of one open-loop action sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqOutcome {
    pub cost: f64,
    /// Worst constraint value of each agent over steps `0..=H`.
    pub h_max: [f64; N_TAB_AGENTS],
}

impl SeqOutcome {
    pub fn team_h(&self) -> f64 {
        self.h_max[0].max(self.h_max[1])
    }

    pub fn value(&self, z: f64) -> f64 {
        self.team_h().max(self.cost - z)
    }
}

impl TabularMas {
    pub fn n_states(&self) -> usize {
        self.n_cells * self.n_cells
    }

    pub fn n_sequences(&self) -> usize {
        JOINT_ACTIONS.saturating_pow(self.horizon as u32)
    }

    pub fn positions(&self, x: usize) -> (usize, usize) {
        (x / self.n_cells, x % self.n_cells)
    }

    pub fn state(&self, p1: usize, p2: usize) -> usize {
        p1 * self.n_cells + p2
    }

    pub fn next(&self, x: usize, a: usize) -> usize {
        let (p1, p2) = self.positions(x);
        let mv = |p: usize, d: usize| (p + d).saturating_sub(1).min(self.n_cells - 1);
        self.state(mv(p1, a / 3), mv(p2, a % 3))
    }

    pub fn team_h(&self, x: usize) -> f64 {
        self.h[x][0].max(self.h[x][1])
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(2..=12).contains(&self.n_cells) || self.horizon == 0 {
            return Err(Error::InvalidParams("tabular system needs 2..=12 cells and H >= 1".into()));
        }
        if self.n_sequences() > MAX_SEQUENCES || self.horizon > 6 {
            return Err(Error::TooLarge(format!(
                "{} sequences at horizon {}",
                self.n_sequences(),
                self.horizon
            )));
        }
        if self.cost.len() != self.n_states() || self.h.len() != self.n_states() || self.x0 >= self.n_states() {
            return Err(Error::InvalidParams("tables do not match the state count".into()));
        }
        if self.cost.iter().flatten().any(|&l| l < 0.0) {
            return Err(Error::InvalidParams("costs must be non-negative".into()));
        }
        Ok(())
    }

    /// Joint actions of sequence `idx`, first step most significant, so
    /// index order is lexicographic order.
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut a = vec![0; self.horizon];
        for k in (0..self.horizon).rev() {
            a[k] = idx % JOINT_ACTIONS;
            idx /= JOINT_ACTIONS;
        }
        a
    }

    /// States `x_0..=x_H` visited by an action sequence.
    pub fn states_of(&self, actions: &[usize]) -> Vec<usize> {
        let mut xs = vec![self.x0];
        for &a in actions {
            xs.push(self.next(*xs.last().unwrap(), a));
        }
        xs
    }

    /// Every sequence's outcome, in index order.
    pub fn enumerate(&self) -> Result<Vec<SeqOutcome>, Error> {
        self.validate()?;
        Ok((0..self.n_sequences())
            .map(|s| {
                let acts = self.decode(s);
                let xs = self.states_of(&acts);
                let cost = acts.iter().zip(&xs).map(|(&a, &x)| self.cost[x][a]).sum();
                let mut h_max = [f64::NEG_INFINITY; N_TAB_AGENTS];
                for &x in &xs {
                    for i in 0..N_TAB_AGENTS {
                        h_max[i] = h_max[i].max(self.h[x][i]);
                    }
                }
                SeqOutcome { cost, h_max }
            })
            .collect())
    }

    /// A random instance whose start state is safe.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_cells: usize, horizon: usize) -> Self {
        let n_states = n_cells * n_cells;
        let q = |k: i32| k as f64 * QUANTUM;
        // Per-agent hazard map over cells, then a collision penalty.
        let cell_h: Vec<[f64; 2]> = (0..n_cells)
            .map(|_| {
                let mut v = [0.0; 2];
                for h in &mut v {
                    let level = rng.gen_range(1..=3);
                    *h = if rng.gen_bool(0.25) { q(level) } else { -q(level) };
                }
                v
            })
            .collect();
        let goals = [rng.gen_range(0..n_cells), rng.gen_range(0..n_cells)];
        let mut h = Vec::with_capacity(n_states);
        let mut cost = Vec::with_capacity(n_states);
        for x in 0..n_states {
            let (p1, p2) = (x / n_cells, x % n_cells);
            let mut hx = [cell_h[p1][0], cell_h[p2][1]];
            if p1 == p2 {
                hx = [hx[0].max(0.5), hx[1].max(0.5)];
            }
            h.push(hx);
            let dist = p1.abs_diff(goals[0]) + p2.abs_diff(goals[1]);
            let mut row = [0.0; JOINT_ACTIONS];
            for (a, l) in row.iter_mut().enumerate() {
                let effort = usize::from(a / 3 != 1) + usize::from(a % 3 != 1);
                *l = q((dist + effort) as i32 + rng.gen_range(0..=2));
            }
            cost.push(row);
        }
        let safe: Vec<usize> = (0..n_states).filter(|&x| h[x][0].max(h[x][1]) <= 0.0).collect();
        let x0 = if safe.is_empty() { 0 } else { safe[rng.gen_range(0..safe.len())] };
        Self { n_cells, horizon, cost, h, x0 }
    }
}

/// Exact solution of the inner problem at one budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inner {
    pub value: f64,
    /// Lexicographically first minimizing sequence.
    pub seq: usize,
}

/// `min over sequences of max{max_k h_k, sum l - z}`.
pub fn exact_inner(outcomes: &[SeqOutcome], z: f64) -> Inner {
    let mut best = Inner { value: f64::INFINITY, seq: 0 };
    for (s, o) in outcomes.iter().enumerate() {
        let v = o.value(z);
        if v < best.value {
            best = Inner { value: v, seq: s };
        }
    }
    best
}

/// The same optimal value by a memoized backward pass over `(k, x, z)`.
pub fn dp_inner(mas: &TabularMas, z: f64) -> f64 {
    fn go(mas: &TabularMas, memo: &mut HashMap<(usize, usize, u64), f64>, k: usize, x: usize, z: f64) -> f64 {
        if k == mas.horizon {
            return mas.team_h(x).max(-z);
        }
        if let Some(&v) = memo.get(&(k, x, z.to_bits())) {
            return v;
        }
        let best = (0..JOINT_ACTIONS)
            .map(|a| go(mas, memo, k + 1, mas.next(x, a), z - mas.cost[x][a]))
            .fold(f64::INFINITY, f64::min);
        let v = mas.team_h(x).max(best);
        memo.insert((k, x, z.to_bits()), v);
        v
    }
    go(mas, &mut HashMap::new(), 0, mas.x0, z)
}

/// Budget grid; every point is a multiple of `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZGrid {
    pub points: Vec<f64>,
    pub step: f64,
}

impl ZGrid {
    /// Spans every achievable cost and every switching point `cost - h`.
    /// The step is half the smallest gap between distinct costs or
    /// constraint levels, so the grid contains every switching point.
    pub fn for_outcomes(mas: &TabularMas, outcomes: &[SeqOutcome]) -> Self {
        let mut levels: Vec<f64> = outcomes.iter().map(|o| o.cost).collect();
        levels.extend(mas.h.iter().flatten());
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let gap = levels.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let step = 0.5 * gap.min(QUANTUM);
        let h_abs = mas.h.iter().flatten().fold(0.0f64, |m, h| m.max(h.abs()));
        let c_min = outcomes.iter().map(|o| o.cost).fold(f64::INFINITY, f64::min);
        let c_max = outcomes.iter().map(|o| o.cost).fold(0.0, f64::max);
        let lo = ((c_min - h_abs) / step).floor() as i64 - 1;
        let hi = ((c_max + h_abs) / step).ceil() as i64 + 1;
        Self { points: (lo..=hi).map(|j| j as f64 * step).collect(), step }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralOuter {
    /// Smallest grid budget whose optimal value is non-positive.
    pub z_epigraph: Option<f64>,
    /// Smallest grid budget whose optimal policy keeps the team safe.
    pub z_star: Option<f64>,
    /// Cheapest safe sequence, by direct enumeration.
    pub constrained_optimum: Option<f64>,
}

pub fn exact_outer_central(outcomes: &[SeqOutcome], grid: &ZGrid, argmins: &[Inner]) -> CentralOuter {
    let z_epigraph = grid.points.iter().zip(argmins).find(|(_, a)| a.value <= 0.0).map(|(&z, _)| z);
    let z_star = grid
        .points
        .iter()
        .zip(argmins)
        .find(|(_, a)| outcomes[a.seq].team_h() <= 0.0)
        .map(|(&z, _)| z);
    let constrained_optimum = outcomes
        .iter()
        .filter(|o| o.team_h() <= 0.0)
        .map(|o| o.cost)
        .reduce(f64::min);
    CentralOuter { z_epigraph, z_star, constrained_optimum }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedOuter {
    /// Per agent: smallest grid budget from which the agent's constraint
    /// holds under the optimal policy at every larger grid budget.
    pub z_i: Vec<Option<f64>>,
    pub z_distr: Option<f64>,
    /// Per agent: the first grid budget at which the constraint holds.
    pub z_i_first: Vec<Option<f64>>,
    pub z_distr_first: Option<f64>,
}

pub fn exact_outer_distributed(outcomes: &[SeqOutcome], grid: &ZGrid, argmins: &[Inner]) -> DistributedOuter {
    let n = grid.points.len();
    let mut z_i = Vec::new();
    let mut z_i_first = Vec::new();
    for i in 0..N_TAB_AGENTS {
        let ok: Vec<bool> = argmins.iter().map(|a| outcomes[a.seq].h_max[i] <= 0.0).collect();
        z_i_first.push(ok.iter().position(|&b| b).map(|j| grid.points[j]));
        let mut start = n;
        while start > 0 && ok[start - 1] {
            start -= 1;
        }
        z_i.push((start < n).then(|| grid.points[start]));
    }
    let max_all = |v: &[Option<f64>]| -> Option<f64> {
        v.iter().try_fold(f64::NEG_INFINITY, |m, z| z.map(|z| m.max(z)))
    };
    DistributedOuter { z_distr: max_all(&z_i), z_distr_first: max_all(&z_i_first), z_i, z_i_first }
}

/// Distinct minimizing sequences over the grid with equal cost make the
/// budget-to-policy map ambiguous; such instances are rejected.
pub fn premise_holds(outcomes: &[SeqOutcome], argmins: &[Inner]) -> bool {
    let mut seqs: Vec<usize> = argmins.iter().map(|a| a.seq).collect();
    seqs.sort_unstable();
    seqs.dedup();
    let mut costs: Vec<f64> = seqs.iter().map(|&s| outcomes[s].cost).collect();
    costs.sort_by(f64::total_cmp);
    costs.windows(2).all(|w| w[0] != w[1])
}

/// Compares the suffix definition of the total value with the backward
/// recursion for `seq` at every grid budget.
pub fn recursion_matches(mas: &TabularMas, seq: usize, grid: &ZGrid) -> bool {
    let acts = mas.decode(seq);
    let xs = mas.states_of(&acts);
    let h: Vec<f64> = xs.iter().map(|&x| mas.team_h(x)).collect();
    let l: Vec<f64> = acts.iter().zip(&xs).map(|(&a, &x)| mas.cost[x][a]).collect();
    grid.points.iter().all(|&z0| {
        let mut z = vec![z0];
        for lk in &l {
            z.push(z.last().unwrap() - lk);
        }
        suffix_values(&h, &l, &z) == recursive_values(&h, &l, z0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub seed: u64,
    pub n_cells: usize,
    pub horizon: usize,
    pub z_epigraph: f64,
    pub z_star: f64,
    pub z_i: Vec<f64>,
    pub z_distr: f64,
    pub z_distr_first: Option<f64>,
    pub constrained_optimum: f64,
    /// Cost of the optimal policy at `z_star`.
    pub policy_cost: f64,
    pub budgets_agree: bool,
    pub same_policy: bool,
    pub cost_optimal: bool,
    pub team_monotone: bool,
    pub recursion: bool,
    pub dp_agrees: bool,
    pub premise: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub n_instances: usize,
    pub regenerated_premise: usize,
    pub regenerated_infeasible: usize,
    pub passed: usize,
    /// Instances where the first-feasible-budget reading also matches.
    pub first_budget_agrees: usize,
    pub all_pass: bool,
    pub instances: Vec<InstanceReport>,
}

pub enum Checked {
    Report(Box<InstanceReport>),
    Infeasible,
    PremiseFails,
}

/// Runs every exact check on one instance.
pub fn check_instance(mas: &TabularMas, index: usize, seed: u64, dp_points: usize) -> Result<Checked, Error> {
    let outcomes = mas.enumerate()?;
    let grid = ZGrid::for_outcomes(mas, &outcomes);
    let argmins: Vec<Inner> = grid.points.iter().map(|&z| exact_inner(&outcomes, z)).collect();
    let central = exact_outer_central(&outcomes, &grid, &argmins);
    let (Some(z_epi), Some(z_star), Some(opt)) =
        (central.z_epigraph, central.z_star, central.constrained_optimum)
    else {
        return Ok(Checked::Infeasible);
    };
    if !premise_holds(&outcomes, &argmins) {
        return Ok(Checked::PremiseFails);
    }
    let distr = exact_outer_distributed(&outcomes, &grid, &argmins);
    let z_distr = distr.z_distr.ok_or_else(|| Error::InvalidParams("distributed budget missing".into()))?;
    let at = |z: f64| grid.points.iter().position(|&p| p == z).expect("grid point");
    let (j_star, j_epi) = (at(z_star), at(z_epi));
    let pi_star = argmins[j_star].seq;
    let policy_cost = outcomes[pi_star].cost;
    let h_star = outcomes[pi_star].team_h();
    let team_monotone = argmins[j_star..].iter().all(|a| outcomes[a.seq].team_h() <= h_star);
    let same_policy = pi_star == argmins[j_epi].seq;
    let cost_optimal = policy_cost == opt && outcomes[argmins[j_epi].seq].cost == opt;
    let stride = (grid.points.len() / dp_points.max(1)).max(1);
    let dp_agrees = grid
        .points
        .iter()
        .zip(&argmins)
        .step_by(stride)
        .all(|(&z, a)| dp_inner(mas, z) == a.value);
    let mut probe: Vec<usize> = argmins.iter().map(|a| a.seq).collect();
    probe.sort_unstable();
    probe.dedup();
    probe.push(0);
    probe.push(outcomes.len() - 1);
    let recursion = probe.iter().all(|&s| recursion_matches(mas, s, &grid));
    let budgets_agree = z_distr == z_star;
    let pass = budgets_agree && same_policy && cost_optimal && team_monotone && recursion && dp_agrees;
    Ok(Checked::Report(Box::new(InstanceReport {
        index,
        seed,
        n_cells: mas.n_cells,
        horizon: mas.horizon,
        z_epigraph: z_epi,
        z_star,
        z_i: distr.z_i.iter().map(|z| z.unwrap_or(f64::NAN)).collect(),
        z_distr,
        z_distr_first: distr.z_distr_first,
        constrained_optimum: opt,
        policy_cost,
        budgets_agree,
        same_policy,
        cost_optimal,
        team_monotone,
        recursion,
        dp_agrees,
        premise: "ok".into(),
        pass,
    })))
}

/// Generates instances until `n_instances` pass the premise and have a safe
/// sequence, checking each one.
pub fn verify(n_instances: usize, seed: u64) -> Result<VerifyReport, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(n_instances);
    let (mut regen_premise, mut regen_infeasible) = (0, 0);
    let limit = 50 * n_instances + 100;
    let mut attempts = 0;
    while instances.len() < n_instances {
        attempts += 1;
        if attempts > limit {
            return Err(Error::InvalidParams(format!(
                "only {} usable instances in {limit} attempts",
                instances.len()
            )));
        }
        let inst_seed: u64 = rng.gen();
        let mut irng = ChaCha8Rng::seed_from_u64(inst_seed);
        let n_cells = irng.gen_range(5..=7);
        let horizon = irng.gen_range(3..=5);
        let mas = TabularMas::random(&mut irng, n_cells, horizon);
        match check_instance(&mas, instances.len(), inst_seed, 8)? {
            Checked::Report(r) => instances.push(*r),
            Checked::Infeasible => regen_infeasible += 1,
            Checked::PremiseFails => regen_premise += 1,
        }
    }
    let passed = instances.iter().filter(|r| r.pass).count();
    let first_budget_agrees = instances.iter().filter(|r| r.z_distr_first == Some(r.z_star)).count();
    Ok(VerifyReport {
        seed,
        n_instances,
        regenerated_premise: regen_premise,
        regenerated_infeasible: regen_infeasible,
        passed,
        first_budget_agrees,
        all_pass: passed == n_instances,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n_cells: usize, horizon: usize, l: f64, h: f64) -> TabularMas {
        let n = n_cells * n_cells;
        TabularMas { n_cells, horizon, cost: vec![[l; 9]; n], h: vec![[h, h]; n], x0: 0 }
    }

    #[test]
    fn transitions_clamp_at_walls() {
        let m = flat(5, 1, 0.0, -0.5);
        let joint = |a: usize, b: usize| a * 3 + b;
        assert_eq!(m.next(m.state(0, 4), joint(0, 2)), m.state(0, 4));
        assert_eq!(m.next(m.state(2, 2), joint(2, 0)), m.state(3, 1));
    }

    #[test]
    fn decode_is_lexicographic() {
        let m = flat(5, 3, 0.0, -0.5);
        assert_eq!(m.decode(0), vec![0, 0, 0]);
        assert_eq!(m.decode(9 * 9 * 2 + 9 * 4 + 7), vec![2, 4, 7]);
        assert_eq!(m.n_sequences(), 729);
    }

    #[test]
    fn one_step_unrolling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TabularMas::random(&mut rng, 5, 1);
        let out = m.enumerate().unwrap();
        for z in [-1.0, 0.0, 0.75, 2.5] {
            let direct = (0..9)
                .map(|a| {
                    let x1 = m.next(m.x0, a);
                    m.team_h(m.x0).max(m.team_h(x1)).max(m.cost[m.x0][a] - z)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(exact_inner(&out, z).value, direct);
        }
    }

    #[test]
    fn large_budget_is_pure_reachability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TabularMas::random(&mut rng, 6, 3);
        let out = m.enumerate().unwrap();
        let best_h = out.iter().map(SeqOutcome::team_h).fold(f64::INFINITY, f64::min);
        assert_eq!(exact_inner(&out, 1e6).value, best_h);
    }

    #[test]
    fn enumeration_matches_dynamic_programming() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = TabularMas::random(&mut rng, 5, 3);
            let out = m.enumerate().unwrap();
            let grid = ZGrid::for_outcomes(&m, &out);
            for &z in &grid.points {
                assert_eq!(dp_inner(&m, z), exact_inner(&out, z).value, "seed {seed} z {z}");
            }
        }
    }

    #[test]
    fn all_safe_means_inactive_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = TabularMas::random(&mut rng, 5, 3);
        m.h = vec![[-0.5, -0.25]; 25];
        let out = m.enumerate().unwrap();
        let grid = ZGrid::for_outcomes(&m, &out);
        let argmins: Vec<Inner> = grid.points.iter().map(|&z| exact_inner(&out, z)).collect();
        let c = exact_outer_central(&out, &grid, &argmins);
        let min_cost = out.iter().map(|o| o.cost).fold(f64::INFINITY, f64::min);
        assert_eq!(c.constrained_optimum, Some(min_cost));
        assert_eq!(c.z_epigraph, grid.points.iter().copied().find(|&z| z >= min_cost));
    }

    #[test]
    fn no_safe_sequence_is_infeasible() {
        let m = flat(5, 2, 0.25, 0.5);
        assert!(matches!(check_instance(&m, 0, 0, 4).unwrap(), Checked::Infeasible));
    }

    #[test]
    fn symmetric_agents_share_budget() {
        let mut m = flat(5, 3, 0.0, -0.5);
        for x in 0..25 {
            let (p1, p2) = m.positions(x);
            let hz = |p: usize| if p == 2 { 0.5 } else { -0.5 };
            m.h[x] = [hz(p1), hz(p2)];
            for a in 0..9 {
                let d = |p: usize, mv: usize| ((p + mv).saturating_sub(1).min(4)).abs_diff(4) as f64;
                m.cost[x][a] = 0.25 * (d(p1, a / 3) + d(p2, a % 3));
            }
        }
        m.x0 = m.state(0, 0);
        let out = m.enumerate().unwrap();
        let grid = ZGrid::for_outcomes(&m, &out);
        let argmins: Vec<Inner> = grid.points.iter().map(|&z| exact_inner(&out, z)).collect();
        let d = exact_outer_distributed(&out, &grid, &argmins);
        assert_eq!(d.z_i[0], d.z_i[1]);
        assert_eq!(d.z_distr, d.z_i[0]);
    }

    #[test]
    fn oversized_instance_is_refused() {
        let m = flat(5, 7, 0.0, -0.5);
        assert!(matches!(m.enumerate(), Err(Error::TooLarge(_))));
    }

    #[test]
    fn small_verification_run_passes() {
        let r = verify(10, 11).unwrap();
        assert_eq!(r.instances.len(), 10);
        assert!(r.all_pass, "{:#?}", r.instances.iter().find(|i| !i.pass));
    }
}
