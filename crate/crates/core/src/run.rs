//! Training, evaluation and metrics export on disk.
//!
//! A run directory looks like
//!
//! ```text
//! <out_dir>/config.toml          resolved configuration
//! <out_dir>/seed<s>/metrics.csv  one row per update
//! <out_dir>/seed<s>/checkpoint.json  latest checkpoint (resumable)
//! <out_dir>/seed<s>/final.json   checkpoint tagged final
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use epigraph_nn::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::env::Task;
use crate::model::ValueHeads;
use crate::rollout::ZRange;
use crate::solver::{execute, EvalReport, ExecMode};
use crate::train::{Algorithm, MetricsRow, Trainer};
use crate::Error;

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed{seed}"))
}

fn write_atomic(path: &Path, text: &str) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String, Error> {
    let text = ck.to_json()?;
    write_atomic(path, &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint::from_json(&text)?)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, Error> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub resumed_from: Option<usize>,
}

/// Checks that a saved run belongs to this configuration and seed.
fn check_resumable(tr: &Trainer, cfg: &RunConfig, seed: u64) -> Result<(), Error> {
    let mut diffs = Vec::new();
    if tr.env != cfg.env() {
        diffs.push("environment".to_string());
    }
    if tr.algo != cfg.algorithm {
        diffs.push(format!("algorithm {} vs {}", tr.algo, cfg.algorithm));
    }
    if tr.seed != seed {
        diffs.push(format!("seed {} vs {seed}", tr.seed));
    }
    let want = cfg.train_config();
    let have = crate::train::TrainConfig { updates: want.updates, ..tr.cfg.clone() };
    if have != want {
        diffs.push("training hyperparameters".into());
    }
    if tr.heads.config != cfg.model_config() {
        diffs.push("model".into());
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::MetadataMismatch(format!("existing checkpoint differs: {}", diffs.join(", "))))
    }
}

/// Trains one seed, resuming from `checkpoint.json` when present.
pub fn train_seed(
    cfg: &RunConfig,
    seed: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutputs, Error> {
    cfg.validate()?;
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir)?;
    cfg.write_resolved(&cfg.out_dir)?;
    let ck_path = dir.join("checkpoint.json");
    let metrics_path = dir.join("metrics.csv");
    let total = cfg.total_updates();

    let (mut tr, mut rows, resumed_from) = if ck_path.exists() {
        let mut tr = Trainer::resume(&load_checkpoint(&ck_path)?)?;
        check_resumable(&tr, cfg, seed)?;
        tr.cfg.updates = total;
        let mut rows = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
        rows.retain(|r| r.step <= tr.updates_done);
        let done = tr.updates_done;
        (tr, rows, Some(done))
    } else {
        let tr = Trainer::new(cfg.env(), cfg.model_config(), cfg.train_config(), cfg.algorithm, seed)?;
        (tr, Vec::new(), None)
    };

    let meta = |final_tag: bool| {
        let mut m = BTreeMap::new();
        m.insert("final".to_string(), final_tag.into());
        m.insert("xi".to_string(), cfg.solver.xi.into());
        m
    };
    while tr.updates_done < total {
        let row = tr.update()?;
        on_row(&row);
        rows.push(row);
        if tr.updates_done % cfg.checkpoint_every == 0 && tr.updates_done < total {
            write_metrics(&metrics_path, &rows)?;
            save_checkpoint(&tr.checkpoint(meta(false))?, &ck_path)?;
        }
    }
    write_metrics(&metrics_path, &rows)?;
    let final_ck = tr.checkpoint(meta(true))?;
    save_checkpoint(&final_ck, &ck_path)?;
    let final_path = dir.join("final.json");
    let checkpoint_sha256 = save_checkpoint(&final_ck, &final_path)?;
    Ok(TrainOutputs { dir, rows, final_checkpoint: final_path, checkpoint_sha256, resumed_from })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvalReport {
    pub algorithm: String,
    pub train_seed: Option<u64>,
    pub eval_seed: u64,
    pub warnings: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
}

fn meta_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T, Error> {
    let v = ck
        .metadata
        .get(key)
        .cloned()
        .ok_or_else(|| Error::MetadataMismatch(format!("checkpoint lacks {key:?}")))?;
    Ok(serde_json::from_value(v)?)
}

/// Evaluates a checkpoint on the configured environment. A larger team than
/// in training is allowed with a warning; any other mismatch is refused.
pub fn eval_checkpoint(
    ck: &Checkpoint,
    cfg: &RunConfig,
    n_episodes: usize,
    eval_seed: u64,
) -> Result<(Vec<crate::metrics::Trajectory>, RunEvalReport), Error> {
    let task: String = meta_field(ck, "task")?;
    let n_trained: usize = meta_field(ck, "n_agents")?;
    let nu: f64 = meta_field(ck, "nu")?;
    let algo: Algorithm = meta_field(ck, "algorithm")?;
    let train_seed: Option<u64> = meta_field(ck, "seed").ok();
    let env = cfg.env();
    let mut diffs = Vec::new();
    if task.parse::<Task>()? != env.task {
        diffs.push(format!("task: checkpoint {task}, config {}", env.task.name()));
    }
    if nu != env.nu {
        diffs.push(format!("nu: checkpoint {nu}, config {}", env.nu));
    }
    if env.n_agents < n_trained {
        diffs.push(format!("n_agents: checkpoint {n_trained}, config {}", env.n_agents));
    }
    if !diffs.is_empty() {
        return Err(Error::MetadataMismatch(diffs.join("; ")));
    }
    let mut warnings = Vec::new();
    if env.n_agents > n_trained {
        warnings.push(format!(
            "evaluating with {} agents on a policy trained with {n_trained}",
            env.n_agents
        ));
    }
    let heads = ValueHeads::from_checkpoint(ck)?;
    // the bracket is the budget range the policy was trained on
    let mut solver = cfg.solver_config();
    if let Ok(r) = meta_field::<ZRange>(ck, "z_range") {
        solver.z_min = r.z_min;
        solver.z_max = r.z_max;
    }
    let mode = match algo {
        Algorithm::DefMarl => ExecMode::Solver(solver),
        _ => ExecMode::Fixed(0.0),
    };
    let (trajs, report) = execute(&heads, &env, &mode, n_episodes, eval_seed)?;
    Ok((trajs, RunEvalReport { algorithm: algo.to_string(), train_seed, eval_seed, warnings, report }))
}

/// Merges the per-seed metrics of each run directory into one CSV with
/// `algorithm` and `seed` columns. Returns the number of rows written.
pub fn export_metrics(run_dirs: &[PathBuf], out: &Path) -> Result<usize, Error> {
    let mut w = csv::Writer::from_path(out)?;
    let mut n = 0;
    for dir in run_dirs {
        let cfg = RunConfig::load(&dir.join("config.toml"))?;
        let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if let Some(s) = name.strip_prefix("seed").and_then(|s| s.parse().ok()) {
                if path.join("metrics.csv").exists() {
                    seeds.push((s, path.join("metrics.csv")));
                }
            }
        }
        seeds.sort();
        for (seed, path) in seeds {
            for row in read_metrics(&path)? {
                if n == 0 {
                    w.write_record(export_header())?;
                }
                w.write_record(export_record(&cfg.algorithm.to_string(), seed, &row))?;
                n += 1;
            }
        }
    }
    if n == 0 {
        w.write_record(export_header())?;
    }
    w.flush()?;
    Ok(n)
}

pub fn export_header() -> Vec<&'static str> {
    vec![
        "algorithm",
        "seed",
        "step",
        "policy_loss",
        "vl_loss",
        "vh_loss",
        "entropy",
        "mean_cost",
        "safety_rate",
        "lambda",
        "wall_clock",
    ]
}

fn export_record(algo: &str, seed: u64, r: &MetricsRow) -> Vec<String> {
    let mut v = vec![algo.to_string(), seed.to_string(), r.step.to_string()];
    v.extend(
        [r.policy_loss, r.vl_loss, r.vh_loss, r.entropy, r.mean_cost, r.safety_rate, r.lambda, r.wall_clock]
            .iter()
            .map(f64::to_string),
    );
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelPreset;

    fn tiny(dir: &Path, algo: Algorithm) -> RunConfig {
        let mut c = RunConfig::new(Task::Target, 2, algo);
        c.horizon = Some(8);
        c.model = ModelPreset::Compact;
        c.updates = Some(6);
        c.checkpoint_every = 4;
        c.train.n_envs = 4;
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn train_writes_rows_and_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let a = train_seed(&tiny(&tmp.path().join("a"), Algorithm::DefMarl), 0, |_| {}).unwrap();
        let b = train_seed(&tiny(&tmp.path().join("b"), Algorithm::DefMarl), 0, |_| {}).unwrap();
        assert_eq!(a.rows.len(), 6);
        assert_eq!(read_metrics(&a.dir.join("metrics.csv")).unwrap().len(), 6);
        assert_eq!(a.checkpoint_sha256, b.checkpoint_sha256);
        assert!(tmp.path().join("a/config.toml").exists());
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let full = train_seed(&tiny(&tmp.path().join("full"), Algorithm::DefMarl), 1, |_| {}).unwrap();
        let mut part = tiny(&tmp.path().join("part"), Algorithm::DefMarl);
        part.updates = Some(4);
        train_seed(&part, 1, |_| {}).unwrap();
        part.updates = Some(6);
        let resumed = train_seed(&part, 1, |_| {}).unwrap();
        assert_eq!(resumed.resumed_from, Some(4));
        assert_eq!(resumed.rows.len(), 6);
        assert_eq!(resumed.checkpoint_sha256, full.checkpoint_sha256);
        let other = tiny(&tmp.path().join("part"), Algorithm::Penalty { beta: 1.0 });
        assert!(matches!(train_seed(&other, 1, |_| {}), Err(Error::MetadataMismatch(_))));
    }

    #[test]
    fn eval_checks_metadata_and_records_xi() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path(), Algorithm::DefMarl);
        let out = train_seed(&cfg, 0, |_| {}).unwrap();
        let ck = load_checkpoint(&out.final_checkpoint).unwrap();
        cfg.solver.xi = 0.0;
        let (_, r0) = eval_checkpoint(&ck, &cfg, 3, 5).unwrap();
        assert_eq!(r0.report.xi, Some(0.0));
        assert_eq!(r0.report.n_episodes, 3);
        cfg.n_agents = 3;
        let (_, r3) = eval_checkpoint(&ck, &cfg, 2, 5).unwrap();
        assert_eq!(r3.warnings.len(), 1);
        cfg.task = Task::Spread;
        assert!(matches!(eval_checkpoint(&ck, &cfg, 2, 5), Err(Error::MetadataMismatch(_))));
    }

    #[test]
    fn export_adds_algorithm_and_seed() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&tmp.path().join("pen"), Algorithm::Penalty { beta: 0.5 });
        cfg.updates = Some(2);
        train_seed(&cfg, 0, |_| {}).unwrap();
        train_seed(&cfg, 3, |_| {}).unwrap();
        let out = tmp.path().join("all.csv");
        assert_eq!(export_metrics(&[cfg.out_dir.clone()], &out).unwrap(), 4);
        let text = fs::read_to_string(out).unwrap();
        assert!(text.starts_with("algorithm,seed,step,"));
        assert!(text.contains("penalty(0.5),3,2,"));
    }
}
