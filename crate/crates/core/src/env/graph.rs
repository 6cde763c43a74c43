use epigraph_nn::{GraphBatch, GraphBuilder};

use super::{dist, EnvParams, GlobalState, Task, Vec2};

/// State slots plus a three-way type code.
pub const NODE_DIM: usize = 7;
/// Relative state `x_i - x_j`.
pub const EDGE_DIM: usize = 4;

pub const ONE_HOT_AGENT: [f64; 3] = [0.0, 0.0, 1.0];
pub const ONE_HOT_GOAL: [f64; 3] = [0.0, 1.0, 0.0];
pub const ONE_HOT_OBSTACLE: [f64; 3] = [1.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Agent,
    /// Goals and landmarks share a code.
    Goal,
    Obstacle,
}

impl NodeKind {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            NodeKind::Agent => ONE_HOT_AGENT,
            NodeKind::Goal => ONE_HOT_GOAL,
            NodeKind::Obstacle => ONE_HOT_OBSTACLE,
        }
    }
}

#[derive(Clone, Copy)]
struct Node {
    kind: NodeKind,
    x: [f64; 4],
}

impl Node {
    fn features(&self) -> [f64; NODE_DIM] {
        let c = self.kind.one_hot();
        [self.x[0], self.x[1], self.x[2], self.x[3], c[0], c[1], c[2]]
    }

    fn pos(&self) -> Vec2 {
        [self.x[0], self.x[1]]
    }
}

fn static_node(kind: NodeKind, p: Vec2) -> Node {
    Node { kind, x: [p[0], p[1], 0.0, 0.0] }
}

fn edge(recv: &Node, send: &Node) -> Vec<f64> {
    (0..4).map(|k| recv.x[k] - send.x[k]).collect()
}

/// Nodes of one environment: agents, then goals or landmarks, then obstacles.
fn nodes(state: &GlobalState, params: &EnvParams) -> Vec<Node> {
    let mut out: Vec<Node> = state
        .agents
        .iter()
        .map(|a| Node { kind: NodeKind::Agent, x: a.as_array() })
        .collect();
    let goals = if params.task.uses_landmarks() { &state.landmarks } else { &state.goals };
    out.extend(goals.iter().map(|g| static_node(NodeKind::Goal, *g)));
    out.extend(state.obstacles.iter().map(|o| static_node(NodeKind::Obstacle, o.center)));
    out
}

/// Whether agent `i` receives from node `j`. Agents and obstacles are seen
/// within the communication radius (inclusive). Goal information is always
/// available: in `Target` an agent sees only its own goal, otherwise all.
fn connected(i: usize, j: usize, all: &[Node], n_agents: usize, params: &EnvParams) -> bool {
    if i == j {
        return false;
    }
    match all[j].kind {
        NodeKind::Goal => params.task != Task::Target || j - n_agents == i,
        _ => dist(all[i].pos(), all[j].pos()) <= params.comm_radius,
    }
}

fn append(b: &mut GraphBuilder, state: &GlobalState, params: &EnvParams) -> usize {
    let offset = b.n_nodes();
    let all = nodes(state, params);
    let n = state.n_agents();
    for node in &all {
        b.add_node(&node.features()).expect("node width is fixed");
    }
    for i in 0..n {
        for j in 0..all.len() {
            if connected(i, j, &all, n, params) {
                b.add_edge(offset + i, offset + j, edge(&all[i], &all[j])).expect("edge in range");
            }
        }
    }
    offset
}

/// Graph of the whole environment. Agent `i` is node `i`; only agents
/// receive messages.
pub fn global_graph(state: &GlobalState, params: &EnvParams) -> GraphBatch {
    let mut b = GraphBuilder::new(NODE_DIM, EDGE_DIM);
    append(&mut b, state, params);
    b.finish()
}

/// Disjoint union of several environments' graphs. Returns the graph and the
/// node offset of each environment; agent `i` of env `e` is node `offset[e] + i`.
pub fn graph_batch(states: &[&GlobalState], params: &EnvParams) -> (GraphBatch, Vec<usize>) {
    let mut b = GraphBuilder::new(NODE_DIM, EDGE_DIM);
    let offsets = states.iter().map(|s| append(&mut b, s, params)).collect();
    (b.finish(), offsets)
}

/// Local observation of one agent: a star graph with the agent at node 0 and
/// every node it receives from, each sending one edge to the center.
pub fn observe(state: &GlobalState, agent: usize, params: &EnvParams) -> GraphBatch {
    let all = nodes(state, params);
    let n = state.n_agents();
    let mut b = GraphBuilder::new(NODE_DIM, EDGE_DIM);
    b.add_node(&all[agent].features()).expect("node width is fixed");
    for j in 0..all.len() {
        if connected(agent, j, &all, n, params) {
            let k = b.add_node(&all[j].features()).expect("node width is fixed");
            b.add_edge(0, k, edge(&all[agent], &all[j])).expect("edge in range");
        }
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AgentState, Obstacle};

    fn scene(d: f64) -> (GlobalState, EnvParams) {
        let p = EnvParams::new(Task::Target, 2);
        let s = GlobalState {
            agents: vec![
                AgentState { pos: [0.2, 0.2], vel: [0.3, -0.1] },
                AgentState::at([0.2 + d, 0.2]),
            ],
            goals: vec![[0.3, 0.2], [1.4, 1.4]],
            obstacles: vec![Obstacle { center: [1.4, 0.1], radius: 0.05 }],
            landmarks: vec![],
            step: 0,
        };
        (s, p)
    }

    #[test]
    fn radius_cutoff_is_inclusive() {
        let (s, p) = scene(0.6);
        assert_eq!(observe(&s, 0, &p).n_nodes(), 2);
        let (s, p) = scene(0.5);
        let o = observe(&s, 0, &p);
        assert_eq!(o.n_nodes(), 3);
        assert_eq!(o.node_features.row_slice(1)[4..], ONE_HOT_AGENT);
    }

    #[test]
    fn goal_edge_has_zero_velocity_slots() {
        let (s, p) = scene(0.6);
        let o = observe(&s, 0, &p);
        assert_eq!(o.node_features.row_slice(1), &[0.3, 0.2, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let e = o.edge_features.row_slice(0);
        let want = [0.2 - 0.3, 0.0, 0.3, -0.1];
        for k in 0..4 {
            assert!((e[k] - want[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn only_agents_receive() {
        let (s, p) = scene(0.3);
        let g = global_graph(&s, &p);
        assert_eq!(g.n_nodes(), 5);
        assert!(g.edges().all(|(r, _)| r < 2));
        // each agent: the other agent plus its own goal
        assert_eq!(g.in_neighbors(0), vec![1, 2]);
        assert_eq!(g.in_neighbors(1), vec![0, 3]);
    }

    #[test]
    fn permuting_agents_permutes_observations() {
        let p = EnvParams::new(Task::Spread, 3);
        let s = crate::env::reset(&p, 4).unwrap();
        let mut t = s.clone();
        t.agents.swap(0, 2);
        let a = observe(&s, 0, &p);
        let b = observe(&t, 2, &p);
        assert_eq!(a.node_features.row_slice(0), b.node_features.row_slice(0));
        let rows = |g: &GraphBatch| {
            let mut r: Vec<Vec<f64>> =
                (0..g.n_edges()).map(|k| g.edge_features.row_slice(k).to_vec()).collect();
            r.sort_by(|x, y| x.partial_cmp(y).unwrap());
            r
        };
        assert_eq!(rows(&a), rows(&b));
    }

    #[test]
    fn batch_offsets() {
        let p = EnvParams::new(Task::Target, 2);
        let s0 = crate::env::reset(&p, 0).unwrap();
        let s1 = crate::env::reset(&p, 1).unwrap();
        let (g, off) = graph_batch(&[&s0, &s1], &p);
        assert_eq!(off, vec![0, 7]);
        assert_eq!(g.n_nodes(), 14);
        assert_eq!(g.node_features.row_slice(7), global_graph(&s1, &p).node_features.row_slice(0));
    }
}
