use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use epigraph_marl::config::{Overrides, RunConfig};
use epigraph_marl::env::Task;
use epigraph_marl::metrics::write_trajectories;
use epigraph_marl::run::{eval_checkpoint, export_metrics, load_checkpoint, train_seed};
use epigraph_marl::suite::run_suite;
use epigraph_marl::train::Algorithm;

#[derive(Parser)]
#[command(name = "defmarl", version, about = "Epigraph-form multi-agent safe RL")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<Task>,
    /// def-marl, penalty(B), lagr(L0), lagr(L0,LR) or lagr-lr.
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    communicate_z: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed; resumes interrupted runs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        updates: Option<usize>,
        /// Print a progress line every this many updates.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        /// Team size at evaluation; may exceed the training size.
        #[arg(long)]
        n_agents: Option<usize>,
        /// Also write the evaluation trajectories as CSV.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Run the verification suite; exits non-zero on any failure.
    Verify {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run metrics into one CSV with algorithm and seed columns.
    ExportMetrics {
        #[arg(long)]
        out: PathBuf,
        /// Run output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn resolve(common: &Common, updates: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let task = common.task.context("either --config or --task is required")?;
            RunConfig::new(task, 3, common.algo.unwrap_or(Algorithm::DefMarl))
        }
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        task: common.task,
        algorithm: common.algo,
        xi: common.xi,
        communicate_z: common.communicate_z.then_some(true),
        out_dir: common.out.clone(),
        updates,
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { common, updates, log_every } => {
            let cfg = resolve(&common, updates)?;
            for &seed in &cfg.seeds {
                let out = train_seed(&cfg, seed, |r| {
                    if log_every > 0 && r.step % log_every == 0 {
                        eprintln!(
                            "seed {seed} step {} cost {:.4} safety {:.3} lambda {:.4}",
                            r.step, r.mean_cost, r.safety_rate, r.lambda
                        );
                    }
                })?;
                if let Some(k) = out.resumed_from {
                    eprintln!("seed {seed}: resumed from update {k}");
                }
                println!(
                    "seed {seed}: {} updates, checkpoint {} sha256 {}",
                    out.rows.last().map_or(0, |r| r.step),
                    out.final_checkpoint.display(),
                    out.checkpoint_sha256
                );
            }
            Ok(true)
        }
        Cmd::Eval { common, checkpoint, episodes, n_agents, trajectories } => {
            let mut common = common;
            let out = common.out.take();
            let mut cfg = resolve(&common, None)?;
            if let Some(n) = n_agents {
                cfg.n_agents = n;
            }
            let ck = load_checkpoint(&checkpoint)?;
            let eval_seed = cfg.seeds[0];
            let (trajs, report) = eval_checkpoint(&ck, &cfg, episodes, eval_seed)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| p.display().to_string())?,
                None => println!("{text}"),
            }
            if let Some(p) = trajectories {
                let f = fs::File::create(&p).with_context(|| p.display().to_string())?;
                write_trajectories(f, &trajs)?;
            }
            eprintln!(
                "cost {:.4} ± {:.4}, safety {:.3} ± {:.3}",
                report.report.cost_mean, report.report.cost_std, report.report.safety_mean, report.report.safety_std
            );
            Ok(true)
        }
        Cmd::Verify { instances, seed, out } => {
            let report = run_suite(instances, seed)?;
            let t = &report.tabular;
            eprintln!(
                "recursion: {} (value gap {:.2e}, budget gap {:.2e})",
                verdict(report.recursion.pass),
                report.recursion.max_value_gap,
                report.recursion.max_budget_gap
            );
            eprintln!(
                "root finder: {} (gap {:.2e}, fewer evaluations on {:.1}%)",
                verdict(report.root_finder.pass),
                report.root_finder.max_gap_to_bisection,
                100.0 * report.root_finder.fewer_fraction
            );
            eprintln!(
                "tabular: {} ({}/{} passed, {} regenerated for the premise, {} infeasible)",
                verdict(t.all_pass),
                t.passed,
                t.n_instances,
                t.regenerated_premise,
                t.regenerated_infeasible
            );
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                fs::write(&p, text).with_context(|| p.display().to_string())?;
            }
            Ok(report.pass)
        }
        Cmd::ExportMetrics { out, runs } => {
            let n = export_metrics(&runs, &out)?;
            if n == 0 {
                bail!("no metrics found in the given run directories");
            }
            eprintln!("wrote {n} rows to {}", out.display());
            Ok(true)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
