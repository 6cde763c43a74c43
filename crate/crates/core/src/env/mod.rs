//! Modified multi-agent particle environments.
//!
//! Agents are double integrators in a square arena. Each task pairs the
//! shared collision constraints with either a preassigned-goal cost
//! (`Target`) or a coverage cost (every other task).

mod constraint;
mod cost;
mod graph;
pub mod layout;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

pub use constraint::{constraint_h, constraint_terms, team_constraint, ConstraintTerms};
pub use cost::{cost_l, CostWeights};
pub use graph::{
    global_graph, graph_batch, observe, NodeKind, EDGE_DIM, NODE_DIM, ONE_HOT_AGENT,
    ONE_HOT_GOAL, ONE_HOT_OBSTACLE,
};
pub use layout::Layout;
pub use sim::{reset, step, MAX_PLACEMENT_ATTEMPTS};

pub type Vec2 = [f64; 2];

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// The six particle-environment tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Target,
    Spread,
    Formation,
    Line,
    Corridor,
    ConnectSpread,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Target,
        Task::Spread,
        Task::Formation,
        Task::Line,
        Task::Corridor,
        Task::ConnectSpread,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Target => "target",
            Task::Spread => "spread",
            Task::Formation => "formation",
            Task::Line => "line",
            Task::Corridor => "corridor",
            Task::ConnectSpread => "connect_spread",
        }
    }

    /// Whether the goal positions are given as landmarks from which the
    /// target points are derived.
    pub fn uses_landmarks(self) -> bool {
        matches!(self, Task::Formation | Task::Line)
    }

    /// Default number of training updates for the full-size setting.
    pub fn default_updates(self) -> usize {
        match self {
            Task::Target | Task::Spread => 100_000,
            Task::Line => 150_000,
            _ => 200_000,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.name() == key || t.name().replace('_', "") == key)
            .ok_or_else(|| Error::InvalidParams(format!("unknown task {s:?}")))
    }
}

/// Physical and task parameters of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub task: Task,
    pub n_agents: usize,
    pub agent_radius: f64,
    pub comm_radius: f64,
    pub arena_side: f64,
    pub obstacle_radius: f64,
    /// Maximum distance for two agents to count as connected (ConnectSpread).
    pub connect_radius: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Size of the jump of `h` at the safe/unsafe boundary.
    pub nu: f64,
    /// Number of message-passing hops available to the policy.
    pub hop_count: usize,
}

impl EnvParams {
    pub fn new(task: Task, n_agents: usize) -> Self {
        let layout = Layout::builtin(task);
        Self {
            task,
            n_agents,
            agent_radius: 0.05,
            comm_radius: 0.5,
            arena_side: layout.arena_side,
            obstacle_radius: layout.obstacle_radius,
            connect_radius: 0.45,
            dt: 0.03,
            horizon: 128,
            nu: 0.5,
            hop_count: 2,
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn layout(&self) -> Layout {
        Layout::builtin(self.task)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("agent_radius", self.agent_radius),
            ("comm_radius", self.comm_radius),
            ("arena_side", self.arena_side),
            ("obstacle_radius", self.obstacle_radius),
            ("dt", self.dt),
            ("nu", self.nu),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_agents == 0 {
            return Err(Error::InvalidParams("n_agents must be at least 1".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParams("horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl AgentState {
    pub fn at(pos: Vec2) -> Self {
        Self { pos, vel: [0.0, 0.0] }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

/// Full state of one environment instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub agents: Vec<AgentState>,
    /// Points the cost measures against. For Formation and Line these are
    /// derived from the landmarks.
    pub goals: Vec<Vec2>,
    pub obstacles: Vec<Obstacle>,
    /// Landmarks (Formation: one center, Line: two endpoints).
    pub landmarks: Vec<Vec2>,
    pub step: usize,
}

impl GlobalState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Agent states concatenated as `[px, py, vx, vy]` per agent.
    pub fn flat_agents(&self) -> Vec<f64> {
        self.agents.iter().flat_map(|a| a.as_array()).collect()
    }
}

/// Per-agent accelerations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Control(pub Vec<Vec2>);

impl Control {
    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0, 0.0]; n])
    }

    /// Component-wise clip into `[-1, 1]`.
    pub fn clipped(&self) -> Control {
        Control(self.0.iter().map(|a| [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|a| a.iter().copied()).collect()
    }
}
