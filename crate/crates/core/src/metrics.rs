//! Episode metrics and the trajectory log format.
//!
//! A trajectory CSV has one row per environment step:
//!
//! `env,k,x_0..x_{4N-1},z,u_0..u_{2N-1},l,h_1..h_N[,logp_1..logp_N]`
//!
//! where `x` is the flattened agent state `[px, py, vx, vy]` per agent and `u`
//! the applied (clipped) control. The `logp` columns appear only in rollout
//! dumps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub z: f64,
    pub u: Vec<f64>,
    pub l: f64,
    pub h: Vec<f64>,
    pub log_prob: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env: usize,
    pub n_agents: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Sum of the team cost over every recorded step.
    pub cost: f64,
    /// Fraction of agents whose `h` stayed non-positive at every step.
    pub safety_rate: f64,
}

pub fn evaluate(traj: &Trajectory) -> Result<EvalMetrics, Error> {
    if traj.steps.is_empty() || traj.n_agents == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let cost = traj.steps.iter().map(|s| s.l).sum();
    let safe = (0..traj.n_agents)
        .filter(|&i| traj.steps.iter().all(|s| s.h[i] <= 0.0))
        .count();
    Ok(EvalMetrics { cost, safety_rate: safe as f64 / traj.n_agents as f64 })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn header(n: usize, with_logp: bool) -> Vec<String> {
    let mut h = vec!["env".to_string(), "k".to_string()];
    h.extend((0..4 * n).map(|j| format!("x_{j}")));
    h.push("z".into());
    h.extend((0..2 * n).map(|j| format!("u_{j}")));
    h.push("l".into());
    h.extend((1..=n).map(|i| format!("h_{i}")));
    if with_logp {
        h.extend((1..=n).map(|i| format!("logp_{i}")));
    }
    h
}

/// Writes trajectories that share an agent count.
pub fn write_trajectories<W: Write>(w: W, trajs: &[Trajectory]) -> Result<(), Error> {
    let n = trajs.first().map_or(0, |t| t.n_agents);
    let with_logp = trajs.iter().flat_map(|t| &t.steps).any(|s| s.log_prob.is_some());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(n, with_logp))?;
    for t in trajs {
        if t.n_agents != n {
            return Err(Error::InvalidParams("trajectories differ in agent count".into()));
        }
        for s in &t.steps {
            let mut row = vec![t.env.to_string(), s.k.to_string()];
            row.extend(s.x.iter().map(f64::to_string));
            row.push(s.z.to_string());
            row.extend(s.u.iter().map(f64::to_string));
            row.push(s.l.to_string());
            row.extend(s.h.iter().map(f64::to_string));
            if with_logp {
                let lp = s.log_prob.clone().unwrap_or_else(|| vec![f64::NAN; n]);
                row.extend(lp.iter().map(f64::to_string));
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectories<R: Read>(r: R) -> Result<Vec<Trajectory>, Error> {
    let mut rd = csv::Reader::from_reader(r);
    let cols = rd.headers()?.len();
    let n_h = rd.headers()?.iter().filter(|c| c.starts_with("h_")).count();
    let with_logp = rd.headers()?.iter().any(|c| c.starts_with("logp_"));
    let n = n_h;
    if cols != header(n, with_logp).len() {
        return Err(Error::Config(format!("trajectory header has {cols} columns for {n} agents")));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64, Error> {
            rec[j].parse::<f64>().map_err(|e| Error::Config(format!("column {j}: {e}")))
        };
        let env: usize = rec[0].parse().map_err(|e| Error::Config(format!("env: {e}")))?;
        let k: usize = rec[1].parse().map_err(|e| Error::Config(format!("k: {e}")))?;
        let mut c = 2;
        let mut take = |len: usize| -> Result<Vec<f64>, Error> {
            let v = (c..c + len).map(&num).collect::<Result<Vec<_>, _>>()?;
            c += len;
            Ok(v)
        };
        let x = take(4 * n)?;
        let z = take(1)?[0];
        let u = take(2 * n)?;
        let l = take(1)?[0];
        let h = take(n)?;
        let log_prob = if with_logp { Some(take(n)?) } else { None };
        let step = StepRecord { k, x, z, u, l, h, log_prob };
        match out.last_mut() {
            Some(t) if t.env == env => t.steps.push(step),
            _ => out.push(Trajectory { env, n_agents: n, steps: vec![step] }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(hs: &[Vec<f64>], l: f64) -> Trajectory {
        let n = hs[0].len();
        Trajectory {
            env: 0,
            n_agents: n,
            steps: hs
                .iter()
                .enumerate()
                .map(|(k, h)| StepRecord {
                    k,
                    x: vec![0.1 * k as f64; 4 * n],
                    z: 1.0 - l * k as f64,
                    u: vec![0.0; 2 * n],
                    l,
                    h: h.clone(),
                    log_prob: None,
                })
                .collect(),
        }
    }

    #[test]
    fn all_safe() {
        let t = traj(&vec![vec![-0.6; 3]; 5], 0.0);
        assert_eq!(evaluate(&t).unwrap().safety_rate, 1.0);
    }

    #[test]
    fn one_unsafe_agent() {
        let mut hs = vec![vec![-0.6; 3]; 5];
        hs[2][1] = 0.54;
        let m = evaluate(&traj(&hs, 0.0)).unwrap();
        assert!((m.safety_rate - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inclusive_cost_sum() {
        let t = traj(&vec![vec![-0.6]; 129], 0.01);
        let m = evaluate(&t).unwrap();
        assert!((m.cost - 1.29).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        let t = Trajectory { env: 0, n_agents: 2, steps: vec![] };
        assert!(matches!(evaluate(&t), Err(Error::EmptyTrajectory)));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let mut a = traj(&vec![vec![-0.6, 0.1 + 0.2]; 4], 1.0 / 3.0);
        let mut b = a.clone();
        b.env = 1;
        a.steps[0].log_prob = Some(vec![-1.25, 0.5]);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("env,k,x_0,x_1,x_2,x_3,x_4,x_5,x_6,x_7,z,u_0,u_1,u_2,u_3,l,h_1,h_2,logp_1,logp_2\n"));
        let back = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].steps[0], a.steps[0]);
        assert_eq!(back[1].steps[1].x, b.steps[1].x);
        assert_eq!(evaluate(&back[1]).unwrap(), evaluate(&b).unwrap());
    }

    #[test]
    fn mean_std_basic() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
