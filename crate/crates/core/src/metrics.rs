//! Evaluation metrics: empirical and exact L1 error against the
//! reward-proportional target, modes found, and averaged terminal reward.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{State, Task};
use crate::error::{Error, Result};
use crate::objective::{sample_with_table, PolicyTable};
use crate::oracle::{exact_policy_distribution, exact_target_distribution};

pub const METRIC_CSV_HEADER: &str = "round,task_id,l1,l1_exact,modes,visited,avg_reward";

/// One evaluation of one task's policy after a training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub task_id: usize,
    pub l1_error: f64,
    pub l1_exact: f64,
    pub modes_found: usize,
    pub visited_states: usize,
    pub avg_reward: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.task_id,
            self.l1_error,
            self.l1_exact,
            self.modes_found,
            self.visited_states,
            self.avg_reward
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("metric row needs 7 fields, got {}: {line}", f.len())));
        }
        let int = |i: usize| f[i].parse::<usize>().map_err(|e| Error::Format(format!("field {i} of `{line}`: {e}")));
        let real = |i: usize| f[i].parse::<f64>().map_err(|e| Error::Format(format!("field {i} of `{line}`: {e}")));
        Ok(MetricRecord {
            round: int(0)?,
            task_id: int(1)?,
            l1_error: real(2)?,
            l1_exact: real(3)?,
            modes_found: int(4)?,
            visited_states: int(5)?,
            avg_reward: real(6)?,
        })
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRIC_CSV_HEADER => {}
        Some(h) => return Err(Error::Format(format!("{}: unexpected header `{h}`", path.display()))),
        None => return Ok(Vec::new()),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricRecord::parse_row).collect()
}

/// `(1/|X|) * sum_x |p(x) - q(x)|` over the target's support `X`.
pub fn l1_distance(target: &[(State, f64)], estimate: &HashMap<State, f64>) -> f64 {
    let total: f64 = target
        .iter()
        .map(|(s, p)| (p - estimate.get(s).copied().unwrap_or(0.0)).abs())
        .sum();
    total / target.len() as f64
}

/// Draw terminal states by rollout and return their empirical frequencies.
pub fn terminal_frequencies(
    task: &Task,
    policy: &PolicyTable,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<HashMap<State, f64>> {
    if n_samples == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    let mut counts: HashMap<State, usize> = HashMap::new();
    for _ in 0..n_samples {
        *counts.entry(sample_with_table(task, policy, rng, 0.0)?.terminal).or_default() += 1;
    }
    Ok(counts.into_iter().map(|(s, c)| (s, c as f64 / n_samples as f64)).collect())
}

/// L1 error between the target distribution and sampled terminal frequencies.
pub fn empirical_l1(task: &Task, policy: &PolicyTable, n_samples: usize, rng: &mut impl Rng) -> Result<f64> {
    let freq = terminal_frequencies(task, policy, n_samples, rng)?;
    Ok(l1_distance(&exact_target_distribution(task), &freq))
}

/// L1 error using the policy's exact terminal distribution.
pub fn exact_l1(task: &Task, policy: &PolicyTable) -> Result<f64> {
    let pi: HashMap<State, f64> = exact_policy_distribution(task, policy)?.into_iter().collect();
    Ok(l1_distance(&exact_target_distribution(task), &pi))
}

/// Step curve of `(visited states, distinct modes seen)`, starting at `(0, 0)`
/// and adding a point whenever a new mode appears plus a closing point at the
/// end of the log.
pub fn modes_found_curve(task: &Task, visit_log: &[State]) -> Vec<(usize, usize)> {
    let modes: HashSet<State> = task.modes().iter().copied().collect();
    let mut seen = HashSet::new();
    let mut curve = vec![(0, 0)];
    for (i, s) in visit_log.iter().enumerate() {
        if modes.contains(s) && seen.insert(*s) {
            curve.push((i + 1, seen.len()));
        }
    }
    if curve.last().unwrap().0 != visit_log.len() {
        curve.push((visit_log.len(), seen.len()));
    }
    curve
}

/// Number of distinct modes in `visit_log`.
pub fn modes_found(task: &Task, visit_log: &[State]) -> usize {
    modes_found_curve(task, visit_log).last().unwrap().1
}

/// Reward of the path that always takes the most probable action.
pub fn greedy_reward(task: &Task, policy: &PolicyTable) -> Result<f64> {
    let mut s = State::ROOT;
    while !task.is_terminal(&s) {
        s = task.transition(&s, policy.argmax(&s)?)?;
    }
    task.reward(&s)
}

/// Mean terminal reward over `n_batches * batch_size` rollouts. With
/// `deterministic` every rollout follows the argmax path, so the rng is unused.
pub fn averaged_reward(
    task: &Task,
    policy: &PolicyTable,
    n_batches: usize,
    batch_size: usize,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Result<f64> {
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::contract("n_batches and batch_size must be positive"));
    }
    if deterministic {
        return greedy_reward(task, policy);
    }
    let n = n_batches * batch_size;
    let mut total = 0.0;
    for _ in 0..n {
        total += sample_with_table(task, policy, rng, 0.0)?.reward;
    }
    Ok(total / n as f64)
}

/// `sum_x pi(x) R(x)` under the policy's exact terminal distribution.
pub fn expected_reward(task: &Task, policy: &PolicyTable) -> Result<f64> {
    Ok(exact_policy_distribution(task, policy)?
        .iter()
        .map(|(s, p)| p * task.reward(s).unwrap_or(0.0))
        .sum())
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std, n }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}
