//! Numeric companions to the convergence analysis: environment constants,
//! sampled smoothness estimates for the flow network, the inexact-solve
//! error bound, and post-hoc convergence traces.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{State, Task};
use crate::error::{Error, Result};
use crate::flownet::{encode_state, FlowNet, ParamVector};
use crate::meta::{FlowTaskObjective, TaskObjective};
use crate::objective::{expected_loss_grad, PolicyTable};
use crate::pmeta::{PMetaConfig, RoundStats};

/// Reward ceiling `H0`, longest trajectory `H1` (in transitions, which is
/// also the number of residual terms a trajectory contributes) and the
/// largest parent or child count `H2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConstants {
    pub h0: f64,
    pub h1: usize,
    pub h2: usize,
}

pub fn compute_env_constants(task: &Task) -> EnvConstants {
    let h0 = task.max_reward();
    let mut depth: std::collections::HashMap<State, usize> = std::collections::HashMap::new();
    let mut h1 = 0;
    let mut h2 = 0;
    for s in task.states() {
        let parents = task.parents(s).unwrap_or_default();
        let d = parents.iter().map(|(p, _)| depth[p] + 1).max().unwrap_or(0);
        depth.insert(*s, d);
        let children = if task.is_terminal(s) { 0 } else { task.children(s).map(|c| c.len()).unwrap_or(0) };
        h2 = h2.max(parents.len()).max(children);
        if task.is_terminal(s) {
            h1 = h1.max(d);
        }
    }
    EnvConstants { h0, h1, h2 }
}

/// Smoothness constant of the single-task loss:
/// `H1 * [(H0 + 2 H2 B) * 2 H2 L1 + 4 H2^2 L0^2]`.
pub fn compute_l_ell(h0: f64, h1: f64, h2: f64, b: f64, l0: f64, l1: f64) -> f64 {
    h1 * ((h0 + 2.0 * h2 * b) * 2.0 * h2 * l1 + 4.0 * h2 * h2 * l0 * l0)
}

/// Inexact-solve error bound `zeta^2 = 2 (kappa1^2 + delta^2) / (lambda - L)^2`.
/// When `lambda <= L` the bound does not apply and `zeta_sq` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaBound {
    pub zeta_sq: Option<f64>,
    pub constraint_ok: bool,
}

pub fn zeta_bound(kappa1: f64, delta: f64, lambda: f64, l_ell: f64) -> ZetaBound {
    if lambda > l_ell {
        ZetaBound { zeta_sq: Some(2.0 * (kappa1 * kappa1 + delta * delta) / (lambda - l_ell).powi(2)), constraint_ok: true }
    } else {
        ZetaBound { zeta_sq: None, constraint_ok: false }
    }
}

/// Sampling box for the flow-network constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConfig {
    /// Parameter draws per estimate.
    pub samples: usize,
    /// Half-width of the box around the centre parameters.
    pub box_radius: f64,
    /// Half-width of the perturbation defining each pair.
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        LipschitzConfig { samples: 20, box_radius: 0.1, perturbation: 1e-3, seed: 0 }
    }
}

/// Sampled maxima of `F`, of `|F(p) - F(q)| / |p - q|` and of
/// `|grad F(p) - grad F(q)| / |p - q|` over edges and parameter pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConstants {
    pub b: f64,
    pub l0: f64,
    pub l1: f64,
}

pub fn estimate_flow_constants(task: &Task, net: &FlowNet, centre: &ParamVector, cfg: &LipschitzConfig) -> Result<FlowConstants> {
    if centre.len() != net.param_count() {
        return Err(Error::contract("centre parameters do not match the network"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let edges: Vec<(Vec<f64>, Vec<usize>)> = task
        .states()
        .iter()
        .filter(|s| !task.is_terminal(s))
        .map(|s| Ok((encode_state(task, s)?, task.valid_actions(s)?.iter().map(|a| a.index()).collect())))
        .collect::<Result<_>>()?;
    let mut out = FlowConstants { b: 0.0, l0: 0.0, l1: 0.0 };
    let perturb = |p: &ParamVector, r: f64, rng: &mut ChaCha8Rng| {
        ParamVector::from_vec(p.as_slice().iter().map(|v| v + rng.gen_range(-r..=r)).collect())
    };
    for _ in 0..cfg.samples {
        let p = perturb(centre, cfg.box_radius, &mut rng);
        let q = perturb(&p, cfg.perturbation, &mut rng);
        let dist = p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for (x, acts) in &edges {
            let fp = net.edge_flows(&p, x)?;
            let fq = net.edge_flows(&q, x)?;
            for &a in acts {
                out.b = out.b.max(fp[a]).max(fq[a]);
                out.l0 = out.l0.max((fp[a] - fq[a]).abs() / dist);
                let mut cp = vec![0.0; fp.len()];
                cp[a] = fp[a];
                let mut cq = vec![0.0; fq.len()];
                cq[a] = fq[a];
                let gp = net.backprop(&p, x, &cp)?;
                let gq = net.backprop(&q, x, &cq)?;
                let dg = gp.as_slice().iter().zip(gq.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                out.l1 = out.l1.max(dg / dist);
            }
        }
    }
    Ok(out)
}

/// Exact gradient of the expected loss when trajectories come from the
/// objective's own sampler at `params`.
pub fn exact_task_gradient(obj: &FlowTaskObjective, params: &ParamVector) -> Result<ParamVector> {
    let table = PolicyTable::from_net(&obj.task, &obj.net, params)?;
    Ok(expected_loss_grad(&obj.task, &obj.net, params, &table, obj.explore_eps)?.1)
}

/// `sqrt(mean_b ||grad l~_b - grad l||^2)` over `n_batches` sampled batches.
pub fn estimate_kappa1(obj: &FlowTaskObjective, params: &ParamVector, n_batches: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if n_batches == 0 {
        return Err(Error::contract("need at least one batch"));
    }
    let exact = exact_task_gradient(obj, params)?;
    let mut total = 0.0;
    for _ in 0..n_batches {
        let b = obj.sample(params, rng)?;
        let (_, g) = obj.loss_grad(params, &b)?;
        total += g.as_slice().iter().zip(exact.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((total / n_batches as f64).sqrt())
}

/// Largest deviation of a task's exact gradient from the task-mean gradient
/// at shared parameters.
pub fn estimate_kappa2(objs: &[FlowTaskObjective], params: &ParamVector) -> Result<f64> {
    let grads: Vec<ParamVector> = objs.iter().map(|o| exact_task_gradient(o, params)).collect::<Result<_>>()?;
    let mean = crate::meta::aggregate_mean(&grads)?;
    let mut worst: f64 = 0.0;
    for g in &grads {
        worst = worst.max(g.as_slice().iter().zip(mean.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    #[serde(rename = "H0")]
    pub h0: f64,
    #[serde(rename = "H1")]
    pub h1: usize,
    #[serde(rename = "H2")]
    pub h2: usize,
    pub b_hat: f64,
    pub l0_hat: f64,
    pub l1_hat: f64,
    pub l_ell: f64,
    pub lambda: f64,
    /// `lambda > 2 L_ell`.
    pub lambda_constraint_ok: bool,
    pub kappa1_hat: f64,
    pub kappa2_hat: f64,
    pub delta: f64,
    /// `None` when `lambda <= L_ell`.
    pub zeta_sq_bound: Option<f64>,
    /// Smoothness of the envelope objective, equal to `lambda`.
    pub l_envelope: f64,
    /// `1 / (70 L lambda^2)` with `L = lambda`.
    pub eta_tilde_0: f64,
    /// Largest step size the convergence theorem admits.
    pub eta_max_theory: f64,
    /// Step size actually used.
    pub eta: f64,
    pub eta_condition_ok: bool,
}

/// Gather the constants for a set of tasks sharing one network, evaluated
/// around `params`.
pub fn theory_report(
    objs: &[FlowTaskObjective],
    params: &ParamVector,
    cfg: &PMetaConfig,
    lip: &LipschitzConfig,
    kappa_batches: usize,
) -> Result<TheoryReport> {
    if objs.is_empty() {
        return Err(Error::contract("need at least one task"));
    }
    let mut env = EnvConstants { h0: 0.0, h1: 0, h2: 0 };
    let mut fc = FlowConstants { b: 0.0, l0: 0.0, l1: 0.0 };
    let mut kappa1: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(lip.seed ^ 0x6b61_7070_6131);
    for o in objs {
        let e = compute_env_constants(&o.task);
        env.h0 = env.h0.max(e.h0);
        env.h1 = env.h1.max(e.h1);
        env.h2 = env.h2.max(e.h2);
        let f = estimate_flow_constants(&o.task, &o.net, params, lip)?;
        fc.b = fc.b.max(f.b);
        fc.l0 = fc.l0.max(f.l0);
        fc.l1 = fc.l1.max(f.l1);
        kappa1 = kappa1.max(estimate_kappa1(o, params, kappa_batches, &mut rng)?);
    }
    let kappa2 = estimate_kappa2(objs, params)?;
    let l_ell = compute_l_ell(env.h0, env.h1 as f64, env.h2 as f64, fc.b, fc.l0, fc.l1);
    let lambda = cfg.lambda;
    let zeta = zeta_bound(kappa1, cfg.delta, lambda, l_ell);
    let l_env = lambda;
    let eta_tilde_0 = 1.0 / (70.0 * l_env * lambda * lambda);
    let r = cfg.meta.inner_steps as f64;
    let eta_max = (eta_tilde_0 / (cfg.beta * r)).min(1.0 / (2.0 * l_env * ((1.0 + r) * r).sqrt()));
    Ok(TheoryReport {
        h0: env.h0,
        h1: env.h1,
        h2: env.h2,
        b_hat: fc.b,
        l0_hat: fc.l0,
        l1_hat: fc.l1,
        l_ell,
        lambda,
        lambda_constraint_ok: lambda > 2.0 * l_ell,
        kappa1_hat: kappa1,
        kappa2_hat: kappa2,
        delta: cfg.delta,
        zeta_sq_bound: zeta.zeta_sq,
        l_envelope: l_env,
        eta_tilde_0,
        eta_max_theory: eta_max,
        eta: cfg.meta.eta,
        eta_condition_ok: cfg.meta.eta <= eta_max,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub t: usize,
    pub grad_sq: f64,
    pub grad_sq_runmin: f64,
    pub theta_w_gap_avg: f64,
    /// Mean of `theta_w_gap_avg` over rounds `1..=t`.
    pub gap_running_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares `C` in `runmin(t) ~ C / sqrt(t)`.
    pub fit_c: f64,
    pub fit_r2: f64,
    /// Slope of `ln runmin` against `ln t` (positive entries only).
    pub loglog_slope: f64,
}

impl ConvergenceReport {
    pub fn runmin_at(&self, t: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.t == t).map(|r| r.grad_sq_runmin)
    }

    /// Whether the running average gap stays within `factor` times its value
    /// at round `from` for every later round.
    pub fn gap_bounded(&self, from: usize, factor: f64) -> bool {
        let Some(base) = self.rows.iter().find(|r| r.t == from).map(|r| r.gap_running_avg) else {
            return false;
        };
        self.rows.iter().filter(|r| r.t >= from).all(|r| r.gap_running_avg <= factor * base)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,grad_sq,grad_sq_runmin,theta_w_gap_avg\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.t, r.grad_sq, r.grad_sq_runmin, r.theta_w_gap_avg);
        }
        out
    }
}

pub fn convergence_trace_report(stats: &[RoundStats]) -> ConvergenceReport {
    let mut rows = Vec::with_capacity(stats.len());
    let mut runmin = f64::INFINITY;
    let mut gap_sum = 0.0;
    for (k, s) in stats.iter().enumerate() {
        runmin = runmin.min(s.grad_sq);
        gap_sum += s.gap_avg;
        rows.push(ConvergenceRow {
            t: s.round,
            grad_sq: s.grad_sq,
            grad_sq_runmin: runmin,
            theta_w_gap_avg: s.gap_avg,
            gap_running_avg: gap_sum / (k + 1) as f64,
        });
    }

    let xs: Vec<f64> = rows.iter().map(|r| 1.0 / (r.t as f64).sqrt()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.grad_sq_runmin).collect();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let fit_c = if sxx > 0.0 { xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / sxx } else { 0.0 };
    let mean_y = if ys.is_empty() { 0.0 } else { ys.iter().sum::<f64>() / ys.len() as f64 };
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - fit_c * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    let fit_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };

    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.grad_sq_runmin > 0.0).map(|r| ((r.t as f64).ln(), r.grad_sq_runmin.ln())).collect();
    let loglog_slope = linear_slope(&pts);
    ConvergenceReport { rows, fit_c, fit_r2, loglog_slope }
}

fn linear_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
