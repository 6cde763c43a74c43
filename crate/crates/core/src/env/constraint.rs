use super::sim::worst_nearest_neighbor;
use super::{dist, EnvParams, GlobalState, Task};

/// Linear part `s` shifted by `nu * sign(s)`, with `sign(0) = 0`.
pub(crate) fn with_jump(s: f64, nu: f64) -> f64 {
    let sign = if s > 0.0 {
        1.0
    } else if s < 0.0 {
        -1.0
    } else {
        0.0
    };
    s + nu * sign
}

/// The individual constraint parts for one agent. A part is `None` when the
/// agent observes nothing of that category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintTerms {
    pub agent: Option<f64>,
    pub obstacle: Option<f64>,
    pub connectivity: Option<f64>,
}

impl ConstraintTerms {
    /// Maximum over the present parts, or `floor` if none is present.
    pub fn combine(&self, floor: f64) -> f64 {
        [self.agent, self.obstacle, self.connectivity]
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .unwrap_or(floor)
    }
}

pub fn constraint_terms(state: &GlobalState, agent: usize, params: &EnvParams) -> ConstraintTerms {
    let me = state.agents[agent].pos;
    let r = params.comm_radius;
    let nearest_agent = state
        .agents
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, a)| dist(me, a.pos))
        .filter(|&d| d <= r)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
    let agent_term = nearest_agent.map(|d| with_jump(2.0 * params.agent_radius - d, params.nu));

    // Obstacles are observed when their center is within R; the surface gap
    // is what the constraint measures.
    let obstacle_term = state
        .obstacles
        .iter()
        .filter(|o| dist(me, o.center) <= r)
        .map(|o| with_jump(params.agent_radius + o.radius - dist(me, o.center), params.nu))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));

    let connectivity = if params.task == Task::ConnectSpread {
        let pts: Vec<_> = state.agents.iter().map(|a| a.pos).collect();
        worst_nearest_neighbor(&pts).map(|d| with_jump(d - params.connect_radius, params.nu))
    } else {
        None
    };

    ConstraintTerms { agent: agent_term, obstacle: obstacle_term, connectivity }
}

/// Value used when an agent observes nothing that can be violated: the
/// agent-agent term of a neighbor sitting exactly at the communication radius.
pub(crate) fn empty_floor(params: &EnvParams) -> f64 {
    2.0 * params.agent_radius - params.comm_radius - params.nu
}

/// Per-agent constraint value `h_i`; positive means unsafe.
pub fn constraint_h(state: &GlobalState, agent: usize, params: &EnvParams) -> f64 {
    constraint_terms(state, agent, params).combine(empty_floor(params))
}

/// Team constraint `max_i h_i` together with the per-agent values.
pub fn team_constraint(state: &GlobalState, params: &EnvParams) -> (f64, Vec<f64>) {
    let hs: Vec<f64> = (0..state.n_agents()).map(|i| constraint_h(state, i, params)).collect();
    let team = hs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (team, hs)
}
