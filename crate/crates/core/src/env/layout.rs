//! Obstacle and spawn-region layouts.
//!
//! Layout files are TOML with the following keys (schema version 1):
//!
//! | key                 | type                         | meaning                                   |
//! |---------------------|------------------------------|-------------------------------------------|
//! | `version`           | integer                      | must be `1`                               |
//! | `task`              | string                       | task tag, e.g. `"corridor"`               |
//! | `arena_side`        | float                        | arena is `[0, L]^2`                       |
//! | `obstacle_radius`   | float                        | radius of randomly placed obstacles       |
//! | `random_obstacles`  | integer                      | number of obstacles placed uniformly      |
//! | `agent_region`      | `[x0, y0, x1, y1]`           | spawn box for agents                      |
//! | `goal_region`       | `[x0, y0, x1, y1]`           | spawn box for goals / landmarks           |
//! | `obstacles`         | array of `{center, radius}`  | fixed obstacles                           |
//! | `formation_radius`  | float, optional              | circle radius (Formation)                 |
//! | `line_min_length`   | float, optional              | minimum landmark separation (Line)        |

use serde::{Deserialize, Serialize};

use super::{Obstacle, Task, Vec2};
use crate::Error;

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedObstacle {
    pub center: Vec2,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub version: u32,
    pub task: Task,
    pub arena_side: f64,
    pub obstacle_radius: f64,
    pub random_obstacles: usize,
    pub agent_region: [f64; 4],
    pub goal_region: [f64; 4],
    #[serde(default)]
    pub obstacles: Vec<FixedObstacle>,
    #[serde(default)]
    pub formation_radius: Option<f64>,
    #[serde(default)]
    pub line_min_length: Option<f64>,
}

impl Layout {
    pub fn builtin_text(task: Task) -> &'static str {
        match task {
            Task::Target => include_str!("../../layouts/target.toml"),
            Task::Spread => include_str!("../../layouts/spread.toml"),
            Task::Formation => include_str!("../../layouts/formation.toml"),
            Task::Line => include_str!("../../layouts/line.toml"),
            Task::Corridor => include_str!("../../layouts/corridor.toml"),
            Task::ConnectSpread => include_str!("../../layouts/connect_spread.toml"),
        }
    }

    pub fn builtin(task: Task) -> Layout {
        Self::parse(Self::builtin_text(task)).expect("built-in layouts are valid")
    }

    pub fn parse(text: &str) -> Result<Layout, Error> {
        let layout: Layout =
            toml::from_str(text).map_err(|e| Error::Config(format!("layout: {e}")))?;
        if layout.version != LAYOUT_VERSION {
            return Err(Error::Config(format!(
                "layout version {} unsupported (expected {LAYOUT_VERSION})",
                layout.version
            )));
        }
        for r in [layout.agent_region, layout.goal_region] {
            if !(r[0] < r[2] && r[1] < r[3]) {
                return Err(Error::Config(format!("degenerate region {r:?}")));
            }
        }
        Ok(layout)
    }

    pub fn fixed_obstacles(&self) -> Vec<Obstacle> {
        self.obstacles.iter().map(|o| Obstacle { center: o.center, radius: o.radius }).collect()
    }

    /// Largest possible distance between a spawned agent and a goal.
    pub fn max_initial_distance(&self) -> f64 {
        let (a, g) = (self.agent_region, self.goal_region);
        let dx = (g[2] - a[0]).max(a[2] - g[0]);
        let dy = (g[3] - a[1]).max(a[3] - g[1]);
        dx.hypot(dy)
    }
}
