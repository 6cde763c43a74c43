//! The verification suite behind `defmarl verify`: value-recursion and
//! budget-telescoping identities on simulator rollouts, root-finder agreement
//! with bisection, and the tabular brute-force checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvParams, Task};
use crate::model::{ModelConfig, ValueHeads};
use crate::oracle::{verify, VerifyReport};
use crate::rollout::{collect, recursive_values, suffix_values, BudgetMode, RolloutBatch, ZRange};
use crate::solver::{bisect, find_root};
use crate::Error;

pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionSummary {
    pub rollouts: usize,
    pub values_checked: usize,
    /// Largest gap between the suffix definition and the recursion.
    pub max_value_gap: f64,
    /// Largest gap between logged budgets and `z0 - sum l`.
    pub max_budget_gap: f64,
    pub pass: bool,
}

/// Largest gap between the two value computations for one logged episode,
/// using the logged budgets for the suffix form.
pub fn value_gap(h: &[f64], l: &[f64], z: &[f64]) -> f64 {
    let a = suffix_values(h, l, z);
    let b = recursive_values(h, l, z[0]);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest gap between logged budgets and the telescoped sum.
pub fn budget_gap(l: &[f64], z: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..z.len() {
        let spent: f64 = l[..k].iter().sum();
        worst = worst.max((z[k] - (z[0] - spent)).abs());
    }
    worst
}

/// Checks both identities on every environment of a batch.
pub fn check_batch(batch: &RolloutBatch) -> RecursionSummary {
    let (mut vg, mut bg) = (0.0f64, 0.0f64);
    for e in 0..batch.n_envs {
        let h: Vec<f64> = (0..=batch.horizon).map(|k| batch.team_h(k, e)).collect();
        let l: Vec<f64> = (0..batch.horizon).map(|k| batch.cost[k][e]).collect();
        let z: Vec<f64> = (0..=batch.horizon).map(|k| batch.z[k][e]).collect();
        vg = vg.max(value_gap(&h, &l, &z));
        bg = bg.max(budget_gap(&l, &z));
    }
    RecursionSummary {
        rollouts: batch.n_envs,
        values_checked: batch.n_envs * (batch.horizon + 1),
        max_value_gap: vg,
        max_budget_gap: bg,
        pass: vg <= IDENTITY_TOL && bg <= IDENTITY_TOL,
    }
}

/// Seeded rollouts of an untrained policy with a sampled initial budget.
pub fn recursion_on_rollouts(env: &EnvParams, n_rollouts: usize, seed: u64) -> Result<RecursionSummary, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = ValueHeads::new(ModelConfig::compact(env.task), &mut rng);
    let batch = collect(&heads, env, BudgetMode::Epigraph(ZRange::for_env(env)), n_rollouts, seed)?;
    Ok(check_batch(&batch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootFinderSummary {
    pub functions: usize,
    pub max_gap_to_bisection: f64,
    pub fewer_evaluations: usize,
    pub fewer_fraction: f64,
    pub pass: bool,
}

/// A random strictly monotone odd polynomial around a random root, with
/// a bracket containing the root.
pub struct MonotonePoly {
    pub root: f64,
    pub sign: f64,
    pub coef: [f64; 3],
    pub lo: f64,
    pub hi: f64,
}

impl MonotonePoly {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let root = rng.gen_range(-0.5..3.0);
        let lo = root - rng.gen_range(0.05..2.0);
        let hi = root + rng.gen_range(0.05..2.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let coef = [rng.gen_range(0.05..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)];
        Self { root, sign, coef, lo, hi }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let d = z - self.root;
        self.sign * (self.coef[0] * d + self.coef[1] * d.powi(3) + self.coef[2] * d.powi(5))
    }
}

pub fn root_finder_agreement(n: usize, tol: f64, seed: u64) -> Result<RootFinderSummary, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap, mut fewer) = (0.0f64, 0);
    for _ in 0..n {
        let p = MonotonePoly::random(&mut rng);
        let c = find_root(|z| p.eval(z), p.lo, p.hi, tol, 200)?;
        let b = bisect(|z| p.eval(z), p.lo, p.hi, tol, 200)?;
        gap = gap.max((c.x - b.x).abs());
        fewer += usize::from(c.evaluations < b.evaluations);
    }
    let frac = fewer as f64 / n.max(1) as f64;
    Ok(RootFinderSummary {
        functions: n,
        max_gap_to_bisection: gap,
        fewer_evaluations: fewer,
        fewer_fraction: frac,
        pass: gap <= 2.0 * tol && frac >= 0.9,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub recursion: RecursionSummary,
    pub root_finder: RootFinderSummary,
    pub tabular: VerifyReport,
    pub pass: bool,
}

/// Runs every check; `n_instances` tabular instances, 100 rollouts of the
/// target task with three agents.
pub fn run_suite(n_instances: usize, seed: u64) -> Result<SuiteReport, Error> {
    let env = EnvParams::new(Task::Target, 3);
    let recursion = recursion_on_rollouts(&env, 100, seed)?;
    let root_finder = root_finder_agreement(1000, 1e-6, seed)?;
    let tabular = verify(n_instances, seed)?;
    let pass = recursion.pass && root_finder.pass && tabular.all_pass;
    Ok(SuiteReport { seed, recursion, root_finder, tabular, pass })
}
