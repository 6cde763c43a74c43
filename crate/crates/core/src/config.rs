//! Run configuration (TOML, schema version 1).
//!
//! ```toml
//! version = 1
//! task = "target"
//! n_agents = 2
//! horizon = 64            # optional, default 128
//! algorithm = "def-marl"  # or "penalty(0.5)", "lagr(5)", "lagr(0.78,3e-3)", "lagr-lr"
//! model = "compact"       # or "standard"
//! seeds = [0, 1, 2]
//! out_dir = "runs/target"
//! updates = 5000          # optional, default depends on the task
//! checkpoint_every = 1000
//! eval_episodes = 32
//!
//! [train]                 # any TrainConfig field
//! n_envs = 32
//!
//! [solver]
//! xi = 0.4
//! communicate_z = false
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{EnvParams, Task};
use crate::model::ModelConfig;
use crate::rollout::ZRange;
use crate::solver::ZSolverConfig;
use crate::train::{Algorithm, TrainConfig};
use crate::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Standard,
    Compact,
}

/// Execution-time budget solver settings; the bracket comes from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub xi: f64,
    pub communicate_z: bool,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = ZSolverConfig::default();
        Self { xi: d.xi, communicate_z: d.communicate_z, tol: d.tol, max_iters: d.max_iters }
    }
}

fn algo_de<'de, D: Deserializer<'de>>(d: D) -> Result<Algorithm, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

fn algo_ser<S: Serializer>(a: &Algorithm, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&a.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub task: Task,
    pub n_agents: usize,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(deserialize_with = "algo_de", serialize_with = "algo_ser")]
    pub algorithm: Algorithm,
    #[serde(default = "default_model")]
    pub model: ModelPreset,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub updates: Option<usize>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverSection,
}

fn default_model() -> ModelPreset {
    ModelPreset::Standard
}

fn default_checkpoint_every() -> usize {
    1000
}

fn default_eval_episodes() -> usize {
    32
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub algorithm: Option<Algorithm>,
    pub xi: Option<f64>,
    pub communicate_z: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub updates: Option<usize>,
}

impl RunConfig {
    /// A config with defaults for everything but the task and team size.
    pub fn new(task: Task, n_agents: usize, algorithm: Algorithm) -> Self {
        Self {
            version: CONFIG_VERSION,
            task,
            n_agents,
            horizon: None,
            algorithm,
            model: ModelPreset::Standard,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            updates: None,
            checkpoint_every: default_checkpoint_every(),
            eval_episodes: default_eval_episodes(),
            train: TrainConfig::default(),
            solver: SolverSection::default(),
        }
    }

    /// Parses and validates; errors carry the line and column.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config as `config.toml` under `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, Error> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), Error> {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(t) = o.task {
            self.task = t;
        }
        if let Some(a) = o.algorithm {
            self.algorithm = a;
        }
        if let Some(x) = o.xi {
            self.solver.xi = x;
        }
        if let Some(c) = o.communicate_z {
            self.solver.communicate_z = c;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(u) = o.updates {
            self.updates = Some(u);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.checkpoint_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("checkpoint_every and eval_episodes must be positive".into()));
        }
        self.env().validate()?;
        self.train.validate()?;
        self.algorithm.validate()?;
        self.solver_config().validate()
    }

    pub fn env(&self) -> EnvParams {
        let env = EnvParams::new(self.task, self.n_agents);
        match self.horizon {
            Some(h) => env.with_horizon(h),
            None => env,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.model {
            ModelPreset::Standard => ModelConfig::standard(self.task),
            ModelPreset::Compact => ModelConfig::compact(self.task),
        }
    }

    pub fn total_updates(&self) -> usize {
        self.updates.unwrap_or_else(|| self.task.default_updates())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { updates: self.total_updates(), ..self.train.clone() }
    }

    pub fn solver_config(&self) -> ZSolverConfig {
        let env = self.env();
        ZSolverConfig {
            xi: self.solver.xi,
            communicate_z: self.solver.communicate_z,
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
            ..ZSolverConfig::for_range(ZRange::for_training(&env, self.train.gamma), env.nu)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
version = 1
task = "target"
n_agents = 2
horizon = 64
algorithm = "penalty(0.5)"
model = "compact"
seeds = [0, 1, 2]
out_dir = "runs/x"
updates = 100

[train]
n_envs = 32

[solver]
xi = 0.2
"#;

    #[test]
    fn parses_sample() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.algorithm, Algorithm::Penalty { beta: 0.5 });
        assert_eq!(c.env().horizon, 64);
        assert_eq!(c.train_config().updates, 100);
        assert_eq!(c.train.n_envs, 32);
        assert_eq!(c.train.gamma, 0.99);
        assert_eq!(c.solver_config().xi, 0.2);
        let again = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_task_names_field_and_line() {
        let bad = SAMPLE.replace("\"target\"", "\"nowhere\"");
        let msg = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("nowhere"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = format!("{SAMPLE}\n[train2]\nx = 1\n");
        assert!(RunConfig::parse(&bad).unwrap_err().to_string().contains("train2"));
    }

    #[test]
    fn empty_seeds_rejected() {
        let bad = SAMPLE.replace("[0, 1, 2]", "[]");
        assert!(RunConfig::parse(&bad).unwrap_err().to_string().contains("seeds"));
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.apply(&Overrides { seed: Some(9), xi: Some(0.0), communicate_z: Some(true), ..Default::default() })
            .unwrap();
        assert_eq!(c.seeds, vec![9]);
        assert_eq!(c.solver_config().xi, 0.0);
        assert!(c.solver_config().communicate_z);
        assert!(c.apply(&Overrides { xi: Some(0.9), ..Default::default() }).is_err());
    }

    #[test]
    fn task_default_updates() {
        let c = RunConfig::new(Task::Line, 3, Algorithm::DefMarl);
        assert_eq!(c.total_updates(), 150_000);
    }
}
