//! Personalized meta-training: each task keeps its own parameters `theta`
//! tied to the meta parameters `w` by a proximal penalty, and `w` follows the
//! Moreau-envelope gradient `lambda * (w - theta_hat)`.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::ParamVector;
use crate::meta::{sum_in_order, MetaConfig, TaskObjective};

/// Gradient norms above this abort an inner solve as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PMetaConfig {
    pub meta: MetaConfig,
    pub lambda: f64,
    pub beta: f64,
    /// Step size of the personalized gradient descent.
    pub inner_lr: f64,
    /// Inner solve stops once the proximal gradient norm is at most `delta`.
    pub delta: f64,
    pub max_inner_solve_steps: usize,
    /// Start each inner solve from the previous solution within a round.
    pub warm_start: bool,
    /// Keep every `(w_{i,r}, theta_hat, w_{i,r+1})` triple in the result.
    pub record_iterates: bool,
}

impl Default for PMetaConfig {
    fn default() -> Self {
        PMetaConfig {
            meta: MetaConfig::default(),
            lambda: 15.0,
            beta: 1.0,
            inner_lr: 1e-3,
            delta: 1e-2,
            max_inner_solve_steps: 50,
            warm_start: true,
            record_iterates: false,
        }
    }
}

impl PMetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("inner_lr", self.inner_lr), ("delta", self.delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `l(theta) + lambda/2 * ||w - theta||^2` and its gradient
/// `grad l(theta) + lambda * (theta - w)`.
pub fn prox_objective_grad<O: TaskObjective>(
    obj: &O,
    theta: &ParamVector,
    w_anchor: &ParamVector,
    lambda: f64,
    batch: &O::Batch,
) -> Result<(f64, ParamVector)> {
    if theta.len() != w_anchor.len() {
        return Err(Error::contract(format!("theta has {} entries, anchor has {}", theta.len(), w_anchor.len())));
    }
    let (loss, mut grad) = obj.loss_grad(theta, batch)?;
    let mut pen = 0.0;
    for ((g, t), w) in grad.as_mut_slice().iter_mut().zip(theta.as_slice()).zip(w_anchor.as_slice()) {
        let d = t - w;
        pen += d * d;
        *g += lambda * d;
    }
    let value = loss + 0.5 * lambda * pen;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::numeric(format!("non-finite proximal objective {value}")));
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Descent steps taken.
    pub steps: usize,
    /// Proximal gradient norm at the returned point.
    pub grad_norm: f64,
}

/// Gradient descent on the proximal objective over a fixed batch, from
/// `init`, until the gradient norm is at most `delta` or the step cap is hit.
pub fn solve_personalized<O: TaskObjective>(
    obj: &O,
    w_anchor: &ParamVector,
    init: ParamVector,
    batch: &O::Batch,
    cfg: &PMetaConfig,
) -> Result<(ParamVector, SolveStats)> {
    let mut theta = init;
    let mut steps = 0;
    loop {
        let (_, grad) = prox_objective_grad(obj, &theta, w_anchor, cfg.lambda, batch)?;
        let norm = grad.norm();
        if norm > DIVERGENCE_LIMIT {
            return Err(Error::numeric(format!("inner solve diverged: gradient norm {norm:.3e} after {steps} steps")));
        }
        if norm <= cfg.delta || steps == cfg.max_inner_solve_steps {
            return Ok((theta, SolveStats { steps, grad_norm: norm }));
        }
        theta.axpy_assign(-cfg.inner_lr, &grad)?;
        steps += 1;
    }
}

/// `lambda * (w - theta_hat)`.
pub fn meta_gradient(w: &ParamVector, theta_hat: &ParamVector, lambda: f64) -> Result<ParamVector> {
    check_len(w, theta_hat)?;
    Ok(ParamVector::from_vec(w.as_slice().iter().zip(theta_hat.as_slice()).map(|(a, b)| lambda * (a - b)).collect()))
}

/// `w - eta * lambda * (w - theta_hat)`.
pub fn meta_step(w: &ParamVector, theta_hat: &ParamVector, eta: f64, lambda: f64) -> Result<ParamVector> {
    check_len(w, theta_hat)?;
    let c = eta * lambda;
    Ok(ParamVector::from_vec(w.as_slice().iter().zip(theta_hat.as_slice()).map(|(a, b)| a - c * (a - b)).collect()))
}

/// `(1 - beta) * w + (beta / N) * sum_i finals_i`, summed in ascending order.
pub fn aggregate_relaxed(w: &ParamVector, finals: &[ParamVector], beta: f64) -> Result<ParamVector> {
    let sum = sum_in_order(finals)?;
    check_len(w, &sum)?;
    let keep = 1.0 - beta;
    let scale = beta / finals.len() as f64;
    Ok(ParamVector::from_vec(w.as_slice().iter().zip(sum.as_slice()).map(|(a, s)| keep * a + s * scale).collect()))
}

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub const PMETA_TRACE_HEADER: &str = "round,task_id,inner_r,solve_steps,solve_grad_norm,g_norm,pp_loss,mp_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct PTraceRow {
    pub round: usize,
    pub task_id: usize,
    pub inner_r: usize,
    pub solve_steps: usize,
    pub solve_grad_norm: f64,
    /// `||w_{i,r} - theta_hat||`.
    pub g_norm: f64,
    pub pp_loss: f64,
    pub mp_loss: f64,
}

pub fn pmeta_trace_csv(rows: &[PTraceRow]) -> String {
    let mut out = String::from(PMETA_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round, r.task_id, r.inner_r, r.solve_steps, r.solve_grad_norm, r.g_norm, r.pp_loss, r.mp_loss
        );
    }
    out
}

/// Per-round convergence quantities measured at `w^t`, from each task's
/// first inner solve of the round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    /// `||(1/N) sum_i lambda (w^t - theta_hat_i(w^t))||^2`.
    pub grad_sq: f64,
    /// `(1/N) sum_i ||theta_hat_i(w^t) - w^t||^2`.
    pub gap_avg: f64,
    /// `||w^{t+1} - w^t||`.
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub round: usize,
    pub task_id: usize,
    pub inner_r: usize,
    pub w_aux: ParamVector,
    pub theta_hat: ParamVector,
    pub w_next: ParamVector,
}

#[derive(Debug, Clone)]
pub struct PMetaResult {
    pub w: ParamVector,
    pub thetas: Vec<ParamVector>,
    pub trace: Vec<PTraceRow>,
    pub rounds: Vec<RoundStats>,
    pub iterates: Vec<Iterate>,
}

pub struct PRoundView<'a> {
    pub round: usize,
    pub w_prev: &'a ParamVector,
    pub w_next: &'a ParamVector,
    /// Each task's final auxiliary iterate `w_{i,R}`.
    pub finals: &'a [ParamVector],
    pub thetas: &'a [ParamVector],
    pub stats: &'a RoundStats,
}

struct TaskRound {
    w_final: ParamVector,
    theta: ParamVector,
    rows: Vec<PTraceRow>,
    g_first: ParamVector,
    gap_first: f64,
    iterates: Vec<Iterate>,
}

fn run_task_round<O: TaskObjective>(
    obj: &O,
    i: usize,
    t: usize,
    w: &ParamVector,
    rng: &mut ChaCha8Rng,
    cfg: &PMetaConfig,
) -> Result<TaskRound> {
    let (eta, lambda) = (cfg.meta.eta, cfg.lambda);
    let mut w_aux = w.clone();
    let mut theta = w.clone();
    let mut rows = Vec::with_capacity(cfg.meta.inner_steps);
    let mut iterates = Vec::new();
    let mut first = None;
    for r in 1..=cfg.meta.inner_steps {
        let ctx = |e: Error| e.with_context(&format!("round {t}, task {i}, step {r}"));
        let init = if cfg.warm_start { theta.clone() } else { w_aux.clone() };
        let batch = obj.sample(&init, rng).map_err(ctx)?;
        let (theta_hat, stats) = solve_personalized(obj, &w_aux, init, &batch, cfg).map_err(ctx)?;
        let pp_loss = obj.loss(&theta_hat, &batch).map_err(ctx)?;
        let mp_loss = obj.loss(w, &batch).map_err(ctx)?;
        let g_norm = w_aux.as_slice().iter().zip(theta_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if r == 1 {
            first = Some((meta_gradient(&w_aux, &theta_hat, lambda)?, g_norm * g_norm));
        }
        let w_next = meta_step(&w_aux, &theta_hat, eta, lambda)?;
        if !w_next.is_finite() {
            return Err(ctx(Error::numeric("non-finite meta iterate")));
        }
        rows.push(PTraceRow {
            round: t,
            task_id: i,
            inner_r: r,
            solve_steps: stats.steps,
            solve_grad_norm: stats.grad_norm,
            g_norm,
            pp_loss,
            mp_loss,
        });
        if cfg.record_iterates {
            iterates.push(Iterate {
                round: t,
                task_id: i,
                inner_r: r,
                w_aux: w_aux.clone(),
                theta_hat: theta_hat.clone(),
                w_next: w_next.clone(),
            });
        }
        w_aux = w_next;
        theta = theta_hat;
    }
    let (g_first, gap_first) = first.expect("at least one inner step");
    Ok(TaskRound { w_final: w_aux, theta, rows, g_first, gap_first, iterates })
}

/// Personalized meta-training. Tasks run their inner loops independently (possibly in parallel)
/// and meet at the relaxed aggregation each round.
pub fn pgflowmeta_train<O: TaskObjective>(
    objectives: &[O],
    init: ParamVector,
    cfg: &PMetaConfig,
    on_round: &mut dyn FnMut(&PRoundView) -> Result<()>,
) -> Result<PMetaResult> {
    cfg.validate()?;
    let n = objectives.len();
    if n == 0 {
        return Err(Error::contract("need at least one task"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| cfg.meta.task_rng(i)).collect();
    let mut w = init;
    let mut thetas = vec![w.clone(); n];
    let mut trace = Vec::new();
    let mut rounds = Vec::new();
    let mut iterates = Vec::new();

    for t in 1..=cfg.meta.rounds {
        let results: Vec<Result<TaskRound>> = objectives
            .par_iter()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(i, (obj, rng))| run_task_round(obj, i, t, &w, rng, cfg))
            .collect();
        let mut finals = Vec::with_capacity(n);
        let mut g_first = Vec::with_capacity(n);
        let mut gap_sum = 0.0;
        for (i, res) in results.into_iter().enumerate() {
            let tr = res?;
            finals.push(tr.w_final);
            thetas[i] = tr.theta;
            trace.extend(tr.rows);
            iterates.extend(tr.iterates);
            g_first.push(tr.g_first);
            gap_sum += tr.gap_first;
        }
        let w_next = aggregate_relaxed(&w, &finals, cfg.beta)?;
        let mut g_mean = sum_in_order(&g_first)?;
        g_mean.scale_assign(1.0 / n as f64);
        let stats = RoundStats {
            round: t,
            grad_sq: g_mean.norm_sq(),
            gap_avg: gap_sum / n as f64,
            step_norm: w.as_slice().iter().zip(w_next.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        };
        on_round(&PRoundView { round: t, w_prev: &w, w_next: &w_next, finals: &finals, thetas: &thetas, stats: &stats })?;
        rounds.push(stats);
        w = w_next;
    }
    Ok(PMetaResult { w, thetas, trace, rounds, iterates })
}
