use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dist, AgentState, Control, EnvParams, GlobalState, Obstacle, Task, Vec2};
use crate::Error;

/// Total number of candidate positions drawn by [`reset`] before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

struct Sampler {
    rng: ChaCha8Rng,
    attempts: usize,
}

impl Sampler {
    fn draw(&mut self, region: [f64; 4]) -> Result<Vec2, Error> {
        self.attempts += 1;
        if self.attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementInfeasible { attempts: MAX_PLACEMENT_ATTEMPTS });
        }
        Ok([
            self.rng.gen_range(region[0]..region[2]),
            self.rng.gen_range(region[1]..region[3]),
        ])
    }

    /// Draws until `ok` accepts the point.
    fn draw_until(
        &mut self,
        region: [f64; 4],
        mut ok: impl FnMut(Vec2) -> bool,
    ) -> Result<Vec2, Error> {
        loop {
            let p = self.draw(region)?;
            if ok(p) {
                return Ok(p);
            }
        }
    }
}

fn clear_of(p: Vec2, obstacles: &[Obstacle], r_a: f64) -> bool {
    obstacles.iter().all(|o| dist(p, o.center) > r_a + o.radius)
}

fn apart(p: Vec2, others: &[Vec2], min_dist: f64) -> bool {
    others.iter().all(|q| dist(p, *q) > min_dist)
}

/// Largest nearest-other-agent distance (ConnectSpread connectivity).
pub(crate) fn worst_nearest_neighbor(points: &[Vec2]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut worst = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let nearest = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| dist(*p, *q))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    Some(worst)
}

/// Samples a strictly safe initial state: every agent is clear of every
/// obstacle and every other agent, goals are reachable without collision,
/// and velocities start at zero. Deterministic in `seed`.
pub fn reset(params: &EnvParams, seed: u64) -> Result<GlobalState, Error> {
    params.validate()?;
    let layout = params.layout();
    let r_a = params.agent_radius;
    let n = params.n_agents;
    let arena = [0.0, 0.0, params.arena_side, params.arena_side];
    let mut s = Sampler { rng: ChaCha8Rng::seed_from_u64(seed), attempts: 0 };

    let mut obstacles = layout.fixed_obstacles();
    for _ in 0..layout.random_obstacles {
        let c = s.draw(arena)?;
        obstacles.push(Obstacle { center: c, radius: params.obstacle_radius });
    }

    let goal_ok = |p: Vec2, placed: &[Vec2]| clear_of(p, &obstacles, r_a) && apart(p, placed, 2.0 * r_a);
    let mut landmarks = Vec::new();
    let goals = match params.task {
        Task::Formation => {
            let radius = layout.formation_radius.unwrap_or(0.25);
            loop {
                let c = s.draw(layout.goal_region)?;
                let pts: Vec<Vec2> = (0..n)
                    .map(|k| {
                        let th = std::f64::consts::TAU * k as f64 / n as f64;
                        [c[0] + radius * th.cos(), c[1] + radius * th.sin()]
                    })
                    .collect();
                let inside = pts.iter().all(|p| (0.0..=params.arena_side).contains(&p[0]) && (0.0..=params.arena_side).contains(&p[1]));
                if inside && pts.iter().enumerate().all(|(k, p)| goal_ok(*p, &pts[..k])) {
                    landmarks.push(c);
                    break pts;
                }
            }
        }
        Task::Line => {
            let min_len = layout.line_min_length.unwrap_or(0.5);
            loop {
                let a = s.draw(layout.goal_region)?;
                let b = s.draw(layout.goal_region)?;
                if dist(a, b) < min_len {
                    continue;
                }
                let pts: Vec<Vec2> = (0..n)
                    .map(|k| {
                        let t = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
                        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
                    })
                    .collect();
                if pts.iter().enumerate().all(|(k, p)| goal_ok(*p, &pts[..k])) {
                    landmarks.extend([a, b]);
                    break pts;
                }
            }
        }
        _ => {
            let mut goals: Vec<Vec2> = Vec::with_capacity(n);
            for _ in 0..n {
                let g = s.draw_until(layout.goal_region, |p| goal_ok(p, &goals))?;
                goals.push(g);
            }
            goals
        }
    };

    let agents = loop {
        let mut pts: Vec<Vec2> = Vec::with_capacity(n);
        for _ in 0..n {
            let p = s.draw_until(layout.agent_region, |p| {
                clear_of(p, &obstacles, r_a) && apart(p, &pts, 2.0 * r_a)
            })?;
            pts.push(p);
        }
        let connected = params.task != Task::ConnectSpread
            || worst_nearest_neighbor(&pts).is_none_or(|d| d < params.connect_radius);
        if connected {
            break pts;
        }
    };

    Ok(GlobalState {
        agents: agents.into_iter().map(AgentState::at).collect(),
        goals,
        obstacles,
        landmarks,
        step: 0,
    })
}

/// Explicit Euler step of the double integrators. Controls are clipped to
/// `[-1, 1]` per component; velocities are clipped after the update.
pub fn step(state: &GlobalState, control: &Control, params: &EnvParams) -> GlobalState {
    let u = control.clipped();
    let dt = params.dt;
    let agents = state
        .agents
        .iter()
        .zip(&u.0)
        .map(|(a, acc)| AgentState {
            pos: [a.pos[0] + a.vel[0] * dt, a.pos[1] + a.vel[1] * dt],
            vel: [
                (a.vel[0] + acc[0] * dt).clamp(-1.0, 1.0),
                (a.vel[1] + acc[1] * dt).clamp(-1.0, 1.0),
            ],
        })
        .collect();
    GlobalState {
        agents,
        goals: state.goals.clone(),
        obstacles: state.obstacles.clone(),
        landmarks: state.landmarks.clone(),
        step: state.step + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::constraint_h;

    #[test]
    fn reset_is_safe_and_deterministic() {
        let p = EnvParams::new(Task::Target, 3);
        let s = reset(&p, 0).unwrap();
        assert_eq!((s.agents.len(), s.goals.len(), s.obstacles.len()), (3, 3, 3));
        for i in 0..3 {
            assert!(constraint_h(&s, i, &p) < 0.0);
        }
        assert_eq!(s, reset(&p, 0).unwrap());
        assert_ne!(s, reset(&p, 1).unwrap());
    }

    #[test]
    fn every_task_resets_safely() {
        for task in Task::ALL {
            let p = EnvParams::new(task, 3);
            for seed in 0..20 {
                let s = reset(&p, seed).unwrap();
                for i in 0..3 {
                    assert!(constraint_h(&s, i, &p) < 0.0, "{task} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn overcrowded_arena_is_infeasible() {
        let mut p = EnvParams::new(Task::Spread, 200);
        p.arena_side = 1.0;
        assert!(matches!(reset(&p, 0), Err(Error::PlacementInfeasible { .. })));
    }

    #[test]
    fn euler_step() {
        let p = EnvParams::new(Task::Target, 1);
        let mut s = reset(&p, 3).unwrap();
        s.agents[0] = AgentState { pos: [0.0, 0.0], vel: [1.0, 0.0] };
        let next = step(&s, &Control(vec![[0.0, 0.0]]), &p);
        assert!((next.agents[0].pos[0] - 0.03).abs() < 1e-15);
        assert_eq!(next.agents[0].pos[1], 0.0);
        assert_eq!(next.agents[0].vel, [1.0, 0.0]);
        assert_eq!(next.step, 1);
        // saturated velocity stays at the bound
        let sat = step(&s, &Control(vec![[1.0, 0.0]]), &p);
        assert_eq!(sat.agents[0].vel, [1.0, 0.0]);
        // oversized control is clipped before use
        s.agents[0].vel = [0.0, 0.0];
        let a = step(&s, &Control(vec![[2.0, 0.0]]), &p);
        let b = step(&s, &Control(vec![[1.0, 0.0]]), &p);
        assert_eq!(a, b);
        assert!((a.agents[0].vel[0] - 0.03).abs() < 1e-15);
    }
}
