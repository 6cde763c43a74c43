use serde::{Deserialize, Serialize};

use super::{dist, Control, EnvParams, GlobalState, Task, Vec2};

/// Weights of the goal-reaching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub distance: f64,
    /// Charged whenever the agent is farther than `reach_tol` from its goal.
    pub reach: f64,
    pub control: f64,
    pub reach_tol: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { distance: 0.01, reach: 0.001, control: 0.0001, reach_tol: 0.01 }
    }
}

impl CostWeights {
    fn term(&self, p: Vec2, goal: Vec2, u: Vec2) -> f64 {
        let d = dist(p, goal);
        let missed = if d - self.reach_tol > 0.0 { 1.0 } else { 0.0 };
        self.distance * d + self.reach * missed + self.control * (u[0] * u[0] + u[1] * u[1])
    }

    /// Largest per-step cost implied by a maximal goal distance and a
    /// saturated control.
    pub fn max_step_cost(&self, max_distance: f64) -> f64 {
        max_distance * self.distance + self.reach + 2.0 * self.control
    }
}

/// Team cost of applying `control` in `state`. `Target` matches agent `i`
/// to goal `i`; every other task lets each goal pick its nearest agent.
pub fn cost_l(state: &GlobalState, control: &Control, params: &EnvParams) -> f64 {
    cost_with(state, control, params.task, &CostWeights::default())
}

pub(crate) fn cost_with(state: &GlobalState, control: &Control, task: Task, w: &CostWeights) -> f64 {
    let u = control.clipped();
    let n = state.n_agents();
    let total: f64 = if task == Task::Target {
        state
            .agents
            .iter()
            .zip(&state.goals)
            .zip(&u.0)
            .map(|((a, g), ui)| w.term(a.pos, *g, *ui))
            .sum()
    } else {
        state
            .goals
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let uj = u.0.get(j).copied().unwrap_or([0.0, 0.0]);
                state
                    .agents
                    .iter()
                    .map(|a| w.term(a.pos, *g, uj))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AgentState;

    fn state(agents: &[Vec2], goals: &[Vec2]) -> GlobalState {
        GlobalState {
            agents: agents.iter().map(|p| AgentState::at(*p)).collect(),
            goals: goals.to_vec(),
            obstacles: vec![],
            landmarks: vec![],
            step: 0,
        }
    }

    #[test]
    fn target_on_goal_is_free() {
        let s = state(&[[0.3, 0.3]], &[[0.3, 0.3]]);
        let p = EnvParams::new(Task::Target, 1);
        assert_eq!(cost_l(&s, &Control::zeros(1), &p), 0.0);
    }

    #[test]
    fn target_example() {
        let s = state(&[[0.0, 0.0]], &[[0.3, 0.4]]);
        let p = EnvParams::new(Task::Target, 1);
        let l = cost_l(&s, &Control(vec![[1.0, 1.0]]), &p);
        assert!((l - 0.0062).abs() < 1e-15);
    }

    #[test]
    fn spread_picks_nearest_agent() {
        let goals = [[0.0, 0.0], [0.0, 0.2]];
        let s = state(&[[0.0, 0.1], [1.0, 1.0]], &goals);
        let p = EnvParams::new(Task::Spread, 2);
        let l = cost_l(&s, &Control::zeros(2), &p);
        assert!((l - (0.01 * 0.1 + 0.001)).abs() < 1e-15);
    }

    #[test]
    fn spread_is_permutation_invariant_target_is_not() {
        let goals = [[0.0, 0.0], [1.0, 0.0]];
        let a = state(&[[0.1, 0.0], [0.8, 0.0]], &goals);
        let b = state(&[[0.8, 0.0], [0.1, 0.0]], &goals);
        let spread = EnvParams::new(Task::Spread, 2);
        let u = Control::zeros(2);
        assert_eq!(cost_l(&a, &u, &spread), cost_l(&b, &u, &spread));
        let target = EnvParams::new(Task::Target, 2);
        assert_ne!(cost_l(&a, &u, &target), cost_l(&b, &u, &target));
    }

    #[test]
    fn max_step_cost_formula() {
        let w = CostWeights::default();
        let d = 1.5 * 2f64.sqrt();
        assert!((w.max_step_cost(d) - (d * 0.01 + 0.001 + 0.0002)).abs() < 1e-15);
    }
}
