//! Meta-training across tasks by averaging inner SGD results (GFlowMeta), plus
//! the two reference baselines: one policy trained on pooled task batches and
//! one policy per task trained to a loss plateau.

use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{State, Task};
use crate::error::{Error, Result};
use crate::flownet::{FlowNet, ParamVector};
use crate::objective::{fm_loss, fm_loss_grad, sample_batch, Batch};

/// A stochastic per-task training objective. Batches are drawn under the
/// current parameters and then held fixed while losses and gradients are
/// evaluated.
pub trait TaskObjective: Sync {
    type Batch: Send + Sync;

    fn sample(&self, params: &ParamVector, rng: &mut ChaCha8Rng) -> Result<Self::Batch>;

    fn loss_grad(&self, params: &ParamVector, batch: &Self::Batch) -> Result<(f64, ParamVector)>;

    fn loss(&self, params: &ParamVector, batch: &Self::Batch) -> Result<f64> {
        Ok(self.loss_grad(params, batch)?.0)
    }
}

/// Flow-matching loss on one task; records the terminal state of every
/// sampled trajectory for the modes-found metric.
pub struct FlowTaskObjective {
    pub task: Task,
    pub net: FlowNet,
    pub batch_size: usize,
    pub explore_eps: f64,
    pub task_id: usize,
    visits: Mutex<Vec<State>>,
}

impl FlowTaskObjective {
    pub fn new(task: Task, net: FlowNet, batch_size: usize, explore_eps: f64, task_id: usize) -> Self {
        FlowTaskObjective { task, net, batch_size, explore_eps, task_id, visits: Mutex::new(Vec::new()) }
    }

    pub fn visit_log(&self) -> Vec<State> {
        self.visits.lock().unwrap().clone()
    }

    pub fn clear_visits(&self) {
        self.visits.lock().unwrap().clear();
    }
}

impl TaskObjective for FlowTaskObjective {
    type Batch = Batch;

    fn sample(&self, params: &ParamVector, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let b = sample_batch(&self.task, &self.net, params, self.batch_size, rng, self.explore_eps, self.task_id)?;
        self.visits.lock().unwrap().extend(b.trajectories.iter().map(|t| t.terminal));
        Ok(b)
    }

    fn loss_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        fm_loss_grad(&self.task, &self.net, params, batch)
    }

    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        fm_loss(&self.task, &self.net, params, batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Outer rounds `T`.
    pub rounds: usize,
    /// Inner steps per task per round `R`.
    pub inner_steps: usize,
    /// Trajectories per batch `K`.
    pub batch_size: usize,
    /// Inner step size `eta`.
    pub eta: f64,
    pub seed: u64,
    pub explore_eps: f64,
    /// Every task draws from the same rng stream instead of its own.
    pub shared_rng_stream: bool,
    /// Fill `wall_ms` in traces; off by default so outputs are reproducible.
    pub record_wall_time: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            rounds: 30,
            inner_steps: 20,
            batch_size: 16,
            eta: 0.005,
            seed: 1,
            explore_eps: 0.1,
            shared_rng_stream: false,
            record_wall_time: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.inner_steps == 0 || self.batch_size == 0 {
            return Err(Error::Param("rounds, inner_steps and batch_size must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Param(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.explore_eps) {
            return Err(Error::Param(format!("explore_eps must lie in [0, 1], got {}", self.explore_eps)));
        }
        Ok(())
    }

    /// The rng owned by task `i` for the whole run.
    pub fn task_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(if self.shared_rng_stream { 0 } else { i as u64 });
        rng
    }
}

pub const META_TRACE_HEADER: &str = "round,task_id,inner_step,loss,grad_norm,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub task_id: usize,
    pub inner_step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub fn meta_trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(META_TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.round, r.task_id, r.inner_step, r.loss, r.grad_norm, r.wall_ms);
    }
    out
}

/// What the per-round callback sees after aggregation.
pub struct RoundView<'a> {
    /// 1-based round index.
    pub round: usize,
    pub w_prev: &'a ParamVector,
    pub w_next: &'a ParamVector,
    /// Each task's final inner iterate, in task order.
    pub finals: &'a [ParamVector],
}

/// `(1/N) * sum_i v_i`, summed in ascending index order.
pub fn aggregate_mean(vs: &[ParamVector]) -> Result<ParamVector> {
    sum_in_order(vs).map(|mut s| {
        s.scale_assign(1.0 / vs.len() as f64);
        s
    })
}

pub(crate) fn sum_in_order(vs: &[ParamVector]) -> Result<ParamVector> {
    let first = vs.first().ok_or_else(|| Error::contract("cannot aggregate zero vectors"))?;
    let mut acc = ParamVector::zeros(first.len());
    for v in vs {
        acc.axpy_assign(1.0, v)?;
    }
    Ok(acc)
}

fn elapsed_ms(start: Option<Instant>) -> f64 {
    start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
}

fn checked(loss: f64, grad: &ParamVector) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    if !grad.is_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(())
}

/// One SGD step on a freshly drawn batch; returns the loss and gradient norm.
pub fn sgd_step<O: TaskObjective>(
    obj: &O,
    params: &mut ParamVector,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let batch = obj.sample(params, rng)?;
    let (loss, grad) = obj.loss_grad(params, &batch)?;
    checked(loss, &grad)?;
    params.axpy_assign(-eta, &grad)?;
    Ok((loss, grad.norm()))
}

/// Meta-training by iterate averaging: every round each task runs `R` SGD steps from the shared `w`, and
/// the new `w` is the mean of the tasks' final iterates.
pub fn gflowmeta_train<O: TaskObjective>(
    objectives: &[O],
    init: ParamVector,
    cfg: &MetaConfig,
    on_round: &mut dyn FnMut(&RoundView) -> Result<()>,
) -> Result<(ParamVector, Vec<TraceRow>)> {
    cfg.validate()?;
    if objectives.is_empty() {
        return Err(Error::contract("need at least one task"));
    }
    let clock = cfg.record_wall_time.then(Instant::now);
    let mut rngs: Vec<ChaCha8Rng> = (0..objectives.len()).map(|i| cfg.task_rng(i)).collect();
    let mut w = init;
    let mut trace = Vec::new();

    for t in 1..=cfg.rounds {
        let results: Vec<Result<(ParamVector, Vec<TraceRow>)>> = objectives
            .par_iter()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(i, (obj, rng))| {
                let mut p = w.clone();
                let mut rows = Vec::with_capacity(cfg.inner_steps);
                for r in 1..=cfg.inner_steps {
                    let (loss, gn) = sgd_step(obj, &mut p, cfg.eta, rng)
                        .map_err(|e| e.with_context(&format!("round {t}, task {i}, step {r}")))?;
                    rows.push(TraceRow { round: t, task_id: i, inner_step: r, loss, grad_norm: gn, wall_ms: elapsed_ms(clock) });
                }
                Ok((p, rows))
            })
            .collect();
        let mut finals = Vec::with_capacity(objectives.len());
        for res in results {
            let (p, rows) = res?;
            finals.push(p);
            trace.extend(rows);
        }
        let w_next = aggregate_mean(&finals)?;
        on_round(&RoundView { round: t, w_prev: &w, w_next: &w_next, finals: &finals })?;
        w = w_next;
    }
    Ok((w, trace))
}

/// One policy trained on batches drawn round-robin from all tasks, with the
/// same `N * T * R` batch budget as [`gflowmeta_train`]. The callback fires
/// every `N * R` steps with `finals` empty.
pub fn pooled_gflownet_train<O: TaskObjective>(
    objectives: &[O],
    init: ParamVector,
    cfg: &MetaConfig,
    on_round: &mut dyn FnMut(&RoundView) -> Result<()>,
) -> Result<(ParamVector, Vec<TraceRow>)> {
    cfg.validate()?;
    let n = objectives.len();
    if n == 0 {
        return Err(Error::contract("need at least one task"));
    }
    let clock = cfg.record_wall_time.then(Instant::now);
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| cfg.task_rng(i)).collect();
    let mut w = init;
    let mut trace = Vec::new();
    for t in 1..=cfg.rounds {
        let w_prev = w.clone();
        for j in 0..n * cfg.inner_steps {
            let i = j % n;
            let step = j / n + 1;
            let (loss, gn) = sgd_step(&objectives[i], &mut w, cfg.eta, &mut rngs[i])
                .map_err(|e| e.with_context(&format!("round {t}, task {i}, step {step}")))?;
            trace.push(TraceRow { round: t, task_id: i, inner_step: step, loss, grad_norm: gn, wall_ms: elapsed_ms(clock) });
        }
        on_round(&RoundView { round: t, w_prev: &w_prev, w_next: &w, finals: &[] })?;
    }
    Ok((w, trace))
}

/// Flags a plateau once the mean loss over the newer half of a sliding
/// window improves on the older half by less than `rel_tol` (relative).
#[derive(Debug, Clone)]
pub struct PlateauDetector {
    window: usize,
    rel_tol: f64,
    min_steps: usize,
    history: Vec<f64>,
}

impl PlateauDetector {
    pub fn new(window: usize, rel_tol: f64, min_steps: usize) -> Self {
        PlateauDetector { window: window.max(2), rel_tol, min_steps, history: Vec::new() }
    }

    pub fn standard(min_steps: usize) -> Self {
        PlateauDetector::new(50, 1e-4, min_steps)
    }

    /// Record a loss; true when training should stop.
    pub fn push(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        if n < self.window || n < self.min_steps {
            return false;
        }
        let h = self.window / 2;
        let recent = &self.history[n - self.window..];
        let older = recent[..h].iter().sum::<f64>() / h as f64;
        let newer = recent[h..].iter().sum::<f64>() / (self.window - h) as f64;
        let scale = older.abs().max(f64::MIN_POSITIVE);
        (older - newer) / scale < self.rel_tol
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }
}

/// Single-task SGD until the loss plateaus or `max_steps` is reached. Uses
/// the rng stream of `task_index`; returns the parameters and steps taken.
pub fn per_task_optimum_train<O: TaskObjective>(
    obj: &O,
    task_index: usize,
    init: ParamVector,
    cfg: &MetaConfig,
    max_steps: usize,
    plateau: &mut PlateauDetector,
) -> Result<(ParamVector, usize, Vec<TraceRow>)> {
    cfg.validate()?;
    let clock = cfg.record_wall_time.then(Instant::now);
    let mut rng = cfg.task_rng(task_index);
    let mut p = init;
    let mut trace = Vec::new();
    for step in 1..=max_steps {
        let (loss, gn) =
            sgd_step(obj, &mut p, cfg.eta, &mut rng).map_err(|e| e.with_context(&format!("task {task_index}, step {step}")))?;
        trace.push(TraceRow { round: 0, task_id: task_index, inner_step: step, loss, grad_norm: gn, wall_ms: elapsed_ms(clock) });
        if plateau.push(loss) {
            return Ok((p, step, trace));
        }
    }
    Ok((p, max_steps, trace))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::{generate_frozen_lake, make_task, EnvKind, TaskParams};
    use crate::metrics::exact_l1;
    use crate::objective::PolicyTable;
    use rand::Rng;

    /// `0.5 * sum_j a_j (x_j - c_j)^2` with additive gradient noise, a cheap
    /// stand-in objective for the aggregation tests.
    pub(crate) struct Quad {
        pub a: Vec<f64>,
        pub c: Vec<f64>,
        pub noise: f64,
    }

    impl TaskObjective for Quad {
        type Batch = Vec<f64>;

        fn sample(&self, _: &ParamVector, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
            Ok((0..self.a.len()).map(|_| self.noise * rng.gen_range(-1.0..1.0)).collect())
        }

        fn loss_grad(&self, p: &ParamVector, xi: &Vec<f64>) -> Result<(f64, ParamVector)> {
            let mut loss = 0.0;
            let mut g = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                let d = p[j] - self.c[j];
                loss += 0.5 * self.a[j] * d * d + xi[j] * p[j];
                g.push(self.a[j] * d + xi[j]);
            }
            Ok((loss, ParamVector::from_vec(g)))
        }
    }

    fn quads(n: usize) -> Vec<Quad> {
        (0..n)
            .map(|i| Quad { a: vec![1.0, 2.0, 0.5], c: vec![i as f64, -1.0, 0.3 * i as f64], noise: 0.1 })
            .collect()
    }

    fn cfg(rounds: usize, inner: usize) -> MetaConfig {
        MetaConfig { rounds, inner_steps: inner, eta: 0.1, seed: 3, ..MetaConfig::default() }
    }

    #[test]
    fn aggregation_is_the_ordered_mean() {
        let objs = quads(3);
        let mut checked_rounds = 0;
        gflowmeta_train(&objs, ParamVector::zeros(3), &cfg(4, 5), &mut |v: &RoundView| {
            let mut s = ParamVector::zeros(3);
            for f in v.finals {
                for j in 0..3 {
                    s.as_mut_slice()[j] += f[j];
                }
            }
            for j in 0..3 {
                assert_eq!((v.w_next[j] - s[j] * (1.0 / 3.0)).to_bits(), 0f64.to_bits());
            }
            checked_rounds += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(checked_rounds, 4);
    }

    #[test]
    fn single_task_matches_plain_sgd() {
        let objs = quads(1);
        let c = cfg(3, 4);
        let (w, trace) = gflowmeta_train(&objs, ParamVector::zeros(3), &c, &mut |_| Ok(())).unwrap();
        let mut p = ParamVector::zeros(3);
        let mut rng = c.task_rng(0);
        for _ in 0..12 {
            sgd_step(&objs[0], &mut p, c.eta, &mut rng).unwrap();
        }
        assert_eq!(w, p);
        assert_eq!(trace.len(), 12);
    }

    #[test]
    fn identical_tasks_on_a_shared_stream() {
        let objs: Vec<Quad> = (0..2).map(|_| Quad { a: vec![1.0, 3.0], c: vec![0.5, -2.0], noise: 0.3 }).collect();
        let c = MetaConfig { shared_rng_stream: true, ..cfg(3, 3) };
        gflowmeta_train(&objs, ParamVector::zeros(2), &c, &mut |v: &RoundView| {
            assert_eq!(v.finals[0], v.finals[1]);
            assert_eq!(v.w_next, &v.finals[0]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn every_task_starts_from_the_shared_point() {
        // with zero noise and eta small, each final iterate is a deterministic
        // function of w^t; recompute it independently
        let objs: Vec<Quad> = quads(2).into_iter().map(|q| Quad { noise: 0.0, ..q }).collect();
        let c = cfg(2, 3);
        gflowmeta_train(&objs, ParamVector::from_vec(vec![1.0, 1.0, 1.0]), &c, &mut |v: &RoundView| {
            for (i, f) in v.finals.iter().enumerate() {
                let mut p = v.w_prev.clone();
                let mut rng = c.task_rng(i);
                for _ in 0..3 {
                    sgd_step(&objs[i], &mut p, c.eta, &mut rng).unwrap();
                }
                assert_eq!(&p, f);
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn pooled_budget_and_round_robin() {
        let objs = quads(3);
        let (_, trace) = pooled_gflownet_train(&objs, ParamVector::zeros(3), &cfg(2, 4), &mut |_| Ok(())).unwrap();
        assert_eq!(trace.len(), 3 * 2 * 4);
        assert_eq!(trace.iter().map(|r| r.task_id).take(6).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn pooled_single_task_equals_per_task_run() {
        let objs = quads(1);
        let c = cfg(3, 5);
        let (w, _) = pooled_gflownet_train(&objs, ParamVector::zeros(3), &c, &mut |_| Ok(())).unwrap();
        let mut never = PlateauDetector::new(50, f64::NEG_INFINITY, 0);
        let (p, steps, _) = per_task_optimum_train(&objs[0], 0, ParamVector::zeros(3), &c, 15, &mut never).unwrap();
        assert_eq!(steps, 15);
        assert_eq!(w, p);
    }

    #[test]
    fn plateau_on_constant_stream() {
        let mut d = PlateauDetector::standard(0);
        let stop = (1..=200).find(|_| d.push(1.0)).unwrap();
        assert!(stop <= 50);
        let mut d = PlateauDetector::standard(0);
        assert!((1..=200).all(|i| !d.push(1.0 / i as f64)));
    }

    #[test]
    fn non_finite_loss_reports_provenance() {
        struct Bad;
        impl TaskObjective for Bad {
            type Batch = ();
            fn sample(&self, _: &ParamVector, _: &mut ChaCha8Rng) -> Result<()> {
                Ok(())
            }
            fn loss_grad(&self, p: &ParamVector, _: &()) -> Result<(f64, ParamVector)> {
                Ok((f64::NAN, p.clone()))
            }
        }
        let err = gflowmeta_train(&[Bad], ParamVector::zeros(1), &cfg(2, 2), &mut |_| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("round 1, task 0, step 1"), "{msg}");
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig { rounds: 0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig { eta: 0.0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig::default().validate().is_ok());
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow { round: 1, task_id: 0, inner_step: 2, loss: 0.5, grad_norm: 1.5, wall_ms: 0.0 }];
        assert_eq!(meta_trace_csv(&rows), "round,task_id,inner_step,loss,grad_norm,wall_ms\n1,0,2,0.5,1.5,0\n");
    }

    #[test]
    fn training_beats_the_untrained_policy_on_small_lakes() {
        let tasks: Vec<Task> = (0..3).map(|s| generate_frozen_lake(4, 4, 2, 10 + s).unwrap()).collect();
        let net = FlowNet::for_task(&tasks[0], &[32, 32]).unwrap();
        let objs: Vec<FlowTaskObjective> =
            tasks.iter().enumerate().map(|(i, t)| FlowTaskObjective::new(t.clone(), net.clone(), 16, 0.1, i)).collect();
        let init = net.init_params(5);
        let mean_l1 = |p: &ParamVector| -> f64 {
            tasks.iter().map(|t| exact_l1(t, &PolicyTable::from_net(t, &net, p).unwrap()).unwrap()).sum::<f64>() / 3.0
        };
        let uniform = tasks.iter().map(|t| exact_l1(t, &PolicyTable::uniform(t)).unwrap()).sum::<f64>() / 3.0;
        let c = MetaConfig { rounds: 30, inner_steps: 20, seed: 2, ..MetaConfig::default() };
        let (w, _) = gflowmeta_train(&objs, init, &c, &mut |_| Ok(())).unwrap();
        assert!(mean_l1(&w) < uniform, "{} vs {}", mean_l1(&w), uniform);
        assert!(objs.iter().all(|o| o.visit_log().len() == 30 * 20 * 16));
    }

    #[test]
    fn flow_objective_matches_direct_loss() {
        let t = make_task(EnvKind::GridWorld, 3, 3, TaskParams::GridWorld { r0: 0.01 }, 0).unwrap();
        let net = FlowNet::for_task(&t, &[8]).unwrap();
        let obj = FlowTaskObjective::new(t.clone(), net.clone(), 4, 0.1, 0);
        let p = net.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = obj.sample(&p, &mut rng).unwrap();
        assert_eq!(obj.loss(&p, &b).unwrap(), fm_loss(&t, &net, &p, &b).unwrap());
        assert_eq!(obj.loss_grad(&p, &b).unwrap().0, obj.loss(&p, &b).unwrap());
    }
}
