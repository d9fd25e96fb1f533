//! Experiment orchestration: configuration, task suites, seeded runs,
//! persisted artifacts, plots, sweeps and comparison tables.
//!
//! A run directory contains
//!
//! ```text
//! config.snapshot   resolved configuration (TOML)
//! tasks/            one TaskSpec per task and seed
//! traces/           per-step training traces
//! metrics/          per-round evaluation records
//! checkpoints/      final parameters
//! theory/           diagnostics for pgflowmeta runs
//! summary.json      mean ± std over seeds per method
//! MANIFEST          status and file listing
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{generate_frozen_lake, make_task, EnvKind, State, Task, TaskParams, TaskSpec};
use crate::error::{Error, Result};
use crate::flownet::{FlowNet, ParamVector};
use crate::meta::{
    gflowmeta_train, meta_trace_csv, per_task_optimum_train, pooled_gflownet_train, FlowTaskObjective, MetaConfig,
    PlateauDetector, TraceRow,
};
use crate::metrics::{
    averaged_reward, empirical_l1, exact_l1, metrics_csv, modes_found, read_metrics_csv, MeanStd, MetricRecord,
};
use crate::objective::PolicyTable;
use crate::plot::{line_chart, Series};
use crate::pmeta::{pgflowmeta_train, pmeta_trace_csv, PMetaConfig};
use crate::theory::{convergence_trace_report, theory_report, ConvergenceReport, LipschitzConfig, TheoryReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GflownetsPooled,
    GflownetsStar,
    Gflowmeta,
    Pgflowmeta,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] =
        [Algorithm::GflownetsPooled, Algorithm::GflownetsStar, Algorithm::Gflowmeta, Algorithm::Pgflowmeta];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::GflownetsPooled => "gflownets_pooled",
            Algorithm::GflownetsStar => "gflownets_star",
            Algorithm::Gflowmeta => "gflowmeta",
            Algorithm::Pgflowmeta => "pgflowmeta",
        }
    }

    /// Names of the policies an algorithm produces, as used in summaries.
    pub fn methods(&self) -> &'static [&'static str] {
        match self {
            Algorithm::GflownetsPooled => &["gflownets"],
            Algorithm::GflownetsStar => &["gflownets_star"],
            Algorithm::Gflowmeta => &["gflowmeta"],
            Algorithm::Pgflowmeta => &["pgflowmeta_mp", "pgflowmeta_pp"],
        }
    }
}

/// Every method name in presentation order.
pub const METHODS: [&str; 5] = ["gflownets", "gflownets_star", "gflowmeta", "pgflowmeta_mp", "pgflowmeta_pp"];

fn method_index(m: &str) -> usize {
    METHODS.iter().position(|x| *x == m).unwrap_or(METHODS.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Tasks share one parameter draw and differ only in sampling randomness.
    Similar,
    /// Each task draws its own parameters.
    #[default]
    Distinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub rows: usize,
    pub cols: usize,
    /// FrozenLake hole count.
    pub holes: usize,
    /// GridWorld `r0` range `[r0_min, r0_max)`.
    pub r0_min: f64,
    pub r0_max: f64,
    /// CliffWalking cliff length range, inclusive.
    pub cliff_min: usize,
    pub cliff_max: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { kind: EnvKind::FrozenLake, rows: 8, cols: 8, holes: 1, r0_min: 0.0, r0_max: 0.1, cliff_min: 5, cliff_max: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rollouts behind each empirical L1 estimate.
    pub n_samples: usize,
    pub n_batches: usize,
    pub batch_size: usize,
    /// Evaluate rewards along the argmax path.
    pub deterministic: bool,
    /// Evaluate every `every` rounds; the last round is always evaluated.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_samples: 1000, n_batches: 10, batch_size: 16, deterministic: true, every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub enabled: bool,
    pub samples: usize,
    pub box_radius: f64,
    pub perturbation: f64,
    pub kappa_batches: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig { enabled: true, samples: 20, box_radius: 0.1, perturbation: 1e-3, kappa_batches: 16 }
    }
}

/// Full description of an experiment. Parsed from TOML; unknown keys are
/// rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithms: Vec<Algorithm>,
    pub task_mode: TaskMode,
    pub n_tasks: usize,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub rounds: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub explore_eps: f64,
    pub shared_rng_stream: bool,
    pub record_wall_time: bool,
    pub lambda: f64,
    pub beta: f64,
    pub inner_lr: f64,
    pub delta: f64,
    pub max_inner_solve_steps: usize,
    pub warm_start: bool,
    /// Discount factor; recorded for completeness, flow matching ignores it.
    pub gamma: f64,
    /// Single-task baseline runs at least this many steps before it may stop
    /// on a plateau, and at most `star_max_steps`.
    pub star_min_steps: usize,
    pub star_max_steps: usize,
    pub env: EnvConfig,
    pub eval: EvalConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = MetaConfig::default();
        let p = PMetaConfig::default();
        ExperimentConfig {
            name: "experiment".into(),
            algorithms: Algorithm::ALL.to_vec(),
            task_mode: TaskMode::Distinct,
            n_tasks: 4,
            seeds: (1..=5).collect(),
            hidden: vec![256, 256],
            rounds: m.rounds,
            inner_steps: m.inner_steps,
            batch_size: m.batch_size,
            eta: m.eta,
            explore_eps: m.explore_eps,
            shared_rng_stream: m.shared_rng_stream,
            record_wall_time: m.record_wall_time,
            lambda: p.lambda,
            beta: p.beta,
            inner_lr: p.inner_lr,
            delta: p.delta,
            max_inner_solve_steps: p.max_inner_solve_steps,
            warm_start: p.warm_start,
            gamma: 0.99,
            star_min_steps: 5000,
            star_max_steps: 10_000,
            env: EnvConfig::default(),
            eval: EvalConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is always serializable")
    }

    pub fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            rounds: self.rounds,
            inner_steps: self.inner_steps,
            batch_size: self.batch_size,
            eta: self.eta,
            seed,
            explore_eps: self.explore_eps,
            shared_rng_stream: self.shared_rng_stream,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn pmeta_config(&self, seed: u64) -> PMetaConfig {
        PMetaConfig {
            meta: self.meta_config(seed),
            lambda: self.lambda,
            beta: self.beta,
            inner_lr: self.inner_lr,
            delta: self.delta,
            max_inner_solve_steps: self.max_inner_solve_steps,
            warm_start: self.warm_start,
            record_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.algorithms.is_empty() {
            return bad("`algorithms` is empty".into());
        }
        if self.n_tasks == 0 {
            return bad("`n_tasks` must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("`seeds` is empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("`seeds` contains duplicates".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if self.star_min_steps > self.star_max_steps {
            return bad("`star_min_steps` exceeds `star_max_steps`".into());
        }
        if self.eval.n_samples == 0 || self.eval.n_batches == 0 || self.eval.batch_size == 0 || self.eval.every == 0 {
            return bad("eval sizes must be positive".into());
        }
        let e = &self.env;
        if e.rows == 0 || e.cols == 0 {
            return bad(format!("grid {}x{} is empty", e.rows, e.cols));
        }
        match e.kind {
            EnvKind::GridWorld if !(0.0 <= e.r0_min && e.r0_min < e.r0_max && e.r0_max <= crate::env::GRID_WORLD_R0_MAX) => {
                return bad(format!("r0 range [{}, {}) is not inside [0, 0.1)", e.r0_min, e.r0_max));
            }
            EnvKind::CliffWalking if e.cliff_min == 0 || e.cliff_min > e.cliff_max => {
                return bad(format!("cliff range {}..={} is invalid", e.cliff_min, e.cliff_max));
            }
            _ => {}
        }
        self.meta_config(0).validate()?;
        self.pmeta_config(0).validate()?;
        Ok(())
    }
}

/// Draw the task parameters of one seed.
///
/// Distinct mode draws parameters per task. Discrete ranges (cliff lengths,
/// hole layouts) are drawn without repeats while enough distinct values
/// remain. Similar mode draws once and copies the parameters, giving each
/// task its own `seed` field.
pub fn generate_task_suite(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let e = &cfg.env;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7461_736b);
    let n = cfg.n_tasks;
    let draws = if cfg.task_mode == TaskMode::Similar { 1 } else { n };

    let mut specs: Vec<TaskSpec> = Vec::with_capacity(n);
    match e.kind {
        EnvKind::GridWorld => {
            for i in 0..draws {
                let r0 = rng.gen_range(e.r0_min..e.r0_max);
                specs.push(make_task(EnvKind::GridWorld, e.rows, e.cols, TaskParams::GridWorld { r0 }, i as u64)?.spec().clone());
            }
        }
        EnvKind::CliffWalking => {
            let mut pool: Vec<usize> = (e.cliff_min..=e.cliff_max).collect();
            let lengths: Vec<usize> = if draws <= pool.len() {
                pool.shuffle(&mut rng);
                pool[..draws].to_vec()
            } else {
                (0..draws).map(|_| rng.gen_range(e.cliff_min..=e.cliff_max)).collect()
            };
            for (i, l) in lengths.into_iter().enumerate() {
                let t = make_task(EnvKind::CliffWalking, e.rows, e.cols, TaskParams::CliffWalking { cliff_length: l }, i as u64)
                    .map_err(|err| Error::Config(format!("cliff length {l}: {err}")))?;
                specs.push(t.spec().clone());
            }
        }
        EnvKind::FrozenLake => {
            const REDRAWS: usize = 100;
            for _ in 0..draws {
                let mut task = generate_frozen_lake(e.rows, e.cols, e.holes, u64::from(rng.gen::<u32>()))?;
                for _ in 0..REDRAWS {
                    if !specs.iter().any(|s| s.params == task.spec().params) {
                        break;
                    }
                    task = generate_frozen_lake(e.rows, e.cols, e.holes, u64::from(rng.gen::<u32>()))?;
                }
                specs.push(task.spec().clone());
            }
        }
    }
    if cfg.task_mode == TaskMode::Similar {
        let base = specs.remove(0);
        specs = (0..n).map(|i| TaskSpec { seed: i as u64, ..base.clone() }).collect();
    }
    Ok(specs)
}

/// Mean ± std with a pre-rendered display string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub display: String,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let m = MeanStd::of(values);
        Stat { mean: m.mean, std: m.std, n: m.n, display: m.to_string() }
    }
}

/// Final-round metrics of one method and seed, averaged over tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub avg_reward: f64,
    pub l1_error: f64,
    pub l1_exact: f64,
    pub modes_found: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub avg_reward: Stat,
    pub l1_error: Stat,
    pub l1_exact: Stat,
    pub modes_found: Stat,
    pub per_seed: Vec<SeedFinal>,
}

/// Contents of `summary.json`, keyed by method name.
pub type RunSummary = BTreeMap<String, MethodSummary>;

/// Everything one seed produced, kept in memory for the summary.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub records: BTreeMap<String, Vec<MetricRecord>>,
}

fn final_of(seed: u64, records: &[MetricRecord]) -> SeedFinal {
    let last = records.iter().map(|r| r.round).max().unwrap_or(0);
    let fin: Vec<&MetricRecord> = records.iter().filter(|r| r.round == last).collect();
    let n = fin.len().max(1) as f64;
    SeedFinal {
        seed,
        avg_reward: fin.iter().map(|r| r.avg_reward).sum::<f64>() / n,
        l1_error: fin.iter().map(|r| r.l1_error).sum::<f64>() / n,
        l1_exact: fin.iter().map(|r| r.l1_exact).sum::<f64>() / n,
        modes_found: fin.iter().map(|r| r.modes_found as f64).sum::<f64>() / n,
    }
}

pub fn summarize(results: &[SeedResult]) -> RunSummary {
    let mut by_method: BTreeMap<String, Vec<SeedFinal>> = BTreeMap::new();
    for res in results {
        for (m, recs) in &res.records {
            by_method.entry(m.clone()).or_default().push(final_of(res.seed, recs));
        }
    }
    by_method
        .into_iter()
        .map(|(m, per_seed)| {
            let col = |f: fn(&SeedFinal) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
            let s = MethodSummary {
                avg_reward: col(|s| s.avg_reward),
                l1_error: col(|s| s.l1_error),
                l1_exact: col(|s| s.l1_exact),
                modes_found: col(|s| s.modes_found),
                per_seed,
            };
            (m, s)
        })
        .collect()
}

struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    tasks: &'a [Task],
    net: &'a FlowNet,
}

impl Evaluator<'_> {
    fn due(&self, round: usize) -> bool {
        round.is_multiple_of(self.cfg.eval.every) || round == self.cfg.rounds
    }

    fn record(&self, method: &str, round: usize, task_id: usize, params: &ParamVector, visits: &[State]) -> Result<MetricRecord> {
        let task = &self.tasks[task_id];
        let policy = PolicyTable::from_net(task, self.net, params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((method_index(method) as u64) << 48) | ((round as u64) << 16) | task_id as u64);
        let ev = &self.cfg.eval;
        Ok(MetricRecord {
            round,
            task_id,
            l1_error: empirical_l1(task, &policy, ev.n_samples, &mut rng)?,
            l1_exact: exact_l1(task, &policy)?,
            modes_found: modes_found(task, visits),
            visited_states: visits.len(),
            avg_reward: averaged_reward(task, &policy, ev.n_batches, ev.batch_size, &mut rng, ev.deterministic)?,
        })
    }

    /// Evaluate one parameter vector per task, in parallel over tasks.
    fn round(
        &self,
        method: &str,
        round: usize,
        params: &dyn Fn(usize) -> ParamVector,
        objs: &[FlowTaskObjective],
    ) -> Result<Vec<MetricRecord>> {
        let params: Vec<ParamVector> = (0..self.tasks.len()).map(params).collect();
        (0..self.tasks.len())
            .into_par_iter()
            .map(|i| self.record(method, round, i, &params[i], &objs[i].visit_log()))
            .collect()
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write(path, s)
}

/// Build the validated tasks of one seed's suite.
pub fn seed_suite(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Task>> {
    generate_task_suite(cfg, seed)?.into_iter().map(Task::new).collect()
}

/// Train and evaluate every configured algorithm for one seed, writing its
/// files under `out`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedResult> {
    let tasks = seed_suite(cfg, seed)?;
    for (i, t) in tasks.iter().enumerate() {
        write(out.join(format!("tasks/seed{seed}_task{i}.toml")), t.spec().to_toml())?;
    }
    let net = FlowNet::for_task(&tasks[0], &cfg.hidden)?;
    if tasks.iter().any(|t| FlowNet::for_task(t, &cfg.hidden).map(|n| n != net).unwrap_or(true)) {
        return Err(Error::Config("tasks of one suite need a common network shape".into()));
    }
    let init = net.init_params(seed);
    let mcfg = cfg.meta_config(seed);
    let fresh_objs = || -> Vec<FlowTaskObjective> {
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| FlowTaskObjective::new(t.clone(), net.clone(), cfg.batch_size, cfg.explore_eps, i))
            .collect()
    };
    let ev = Evaluator { cfg, seed, tasks: &tasks, net: &net };
    let mut records: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    let ckpt = |name: String, p: &ParamVector| net.save_checkpoint(&out.join("checkpoints").join(name), p, seed);
    let trace_path = |name: &str| out.join(format!("traces/seed{seed}_{name}.csv"));

    for alg in &cfg.algorithms {
        let ctx = |e: Error| e.with_context(&format!("seed {seed}, {}", alg.as_str()));
        match alg {
            Algorithm::GflownetsPooled | Algorithm::Gflowmeta => {
                let method = alg.methods()[0];
                let objs = fresh_objs();
                let mut recs = Vec::new();
                let mut cb = |v: &crate::meta::RoundView| -> Result<()> {
                    if ev.due(v.round) {
                        recs.extend(ev.round(method, v.round, &|_| v.w_next.clone(), &objs)?);
                    }
                    Ok(())
                };
                let (w, trace) = if *alg == Algorithm::Gflowmeta {
                    gflowmeta_train(&objs, init.clone(), &mcfg, &mut cb)
                } else {
                    pooled_gflownet_train(&objs, init.clone(), &mcfg, &mut cb)
                }
                .map_err(ctx)?;
                write(trace_path(method), meta_trace_csv(&trace))?;
                ckpt(format!("seed{seed}_{method}.ckpt"), &w)?;
                records.insert(method.to_string(), recs);
            }
            Algorithm::GflownetsStar => {
                let method = "gflownets_star";
                let objs = fresh_objs();
                let results: Vec<Result<(ParamVector, usize, Vec<TraceRow>)>> = objs
                    .par_iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let mut plateau = PlateauDetector::standard(cfg.star_min_steps);
                        per_task_optimum_train(o, i, init.clone(), &mcfg, cfg.star_max_steps, &mut plateau)
                    })
                    .collect();
                let mut params = Vec::with_capacity(objs.len());
                let mut trace = Vec::new();
                for r in results {
                    let (p, _, rows) = r.map_err(ctx)?;
                    params.push(p);
                    trace.extend(rows);
                }
                write(trace_path(method), meta_trace_csv(&trace))?;
                for (i, p) in params.iter().enumerate() {
                    ckpt(format!("seed{seed}_{method}_task{i}.ckpt"), p)?;
                }
                records.insert(method.to_string(), ev.round(method, cfg.rounds, &|i| params[i].clone(), &objs)?);
            }
            Algorithm::Pgflowmeta => {
                let objs = fresh_objs();
                let pcfg = cfg.pmeta_config(seed);
                let (mut mp, mut pp) = (Vec::new(), Vec::new());
                let res = pgflowmeta_train(&objs, init.clone(), &pcfg, &mut |v| {
                    if ev.due(v.round) {
                        mp.extend(ev.round("pgflowmeta_mp", v.round, &|_| v.w_next.clone(), &objs)?);
                        pp.extend(ev.round("pgflowmeta_pp", v.round, &|i| v.thetas[i].clone(), &objs)?);
                    }
                    Ok(())
                })
                .map_err(ctx)?;
                write(trace_path("pgflowmeta"), pmeta_trace_csv(&res.trace))?;
                ckpt(format!("seed{seed}_pgflowmeta_mp.ckpt"), &res.w)?;
                for (i, th) in res.thetas.iter().enumerate() {
                    ckpt(format!("seed{seed}_pgflowmeta_pp_task{i}.ckpt"), th)?;
                }
                let conv = convergence_trace_report(&res.rounds);
                write(out.join(format!("theory/seed{seed}_convergence.csv")), conv.to_csv())?;
                write_json(out.join(format!("theory/seed{seed}_convergence.json")), &conv)?;
                if cfg.theory.enabled {
                    let lip = LipschitzConfig {
                        samples: cfg.theory.samples,
                        box_radius: cfg.theory.box_radius,
                        perturbation: cfg.theory.perturbation,
                        seed,
                    };
                    let rep = theory_report(&objs, &res.w, &pcfg, &lip, cfg.theory.kappa_batches).map_err(ctx)?;
                    write_json(out.join(format!("theory/seed{seed}.json")), &rep)?;
                }
                records.insert("pgflowmeta_mp".into(), mp);
                records.insert("pgflowmeta_pp".into(), pp);
            }
        }
    }
    for (m, recs) in &records {
        write(out.join(format!("metrics/seed{seed}_{m}.csv")), metrics_csv(recs))?;
    }
    Ok(SeedResult { seed, records })
}

const SUBDIRS: [&str; 6] = ["tasks", "traces", "metrics", "checkpoints", "theory", "plots"];

fn list_files(root: &Path) -> Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                if rel != "MANIFEST" {
                    out.push((rel, entry.metadata()?.len()));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

fn write_manifest(out: &Path, status: &str) -> Result<()> {
    let mut text = format!("status: {status}\n");
    for (f, size) in list_files(out)? {
        let _ = writeln!(text, "{size:>10}  {f}");
    }
    write(out.join("MANIFEST"), text)
}

/// Run every seed (concurrently) and write the run directory. On failure
/// the files written so far remain and `MANIFEST` names the first failing
/// seed.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    for d in SUBDIRS {
        fs::create_dir_all(out.join(d))?;
    }
    write(out.join("config.snapshot"), cfg.to_toml())?;
    let results: Vec<Result<SeedResult>> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, out)).collect();
    let mut ok = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => {
                write_manifest(out, &format!("failed: {e}"))?;
                return Err(e);
            }
        }
    }
    let summary = summarize(&ok);
    write_json(out.join("summary.json"), &summary)?;
    render_plots(out)?;
    write_manifest(out, "complete")?;
    Ok(summary)
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-method metric records of a run directory, keyed by method and seed.
pub fn read_run_metrics(run_dir: &Path) -> Result<BTreeMap<String, BTreeMap<u64, Vec<MetricRecord>>>> {
    let mut out: BTreeMap<String, BTreeMap<u64, Vec<MetricRecord>>> = BTreeMap::new();
    let dir = run_dir.join("metrics");
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in names {
        let stem = name.trim_end_matches(".csv");
        let parsed = stem
            .strip_prefix("seed")
            .and_then(|r| r.split_once('_'))
            .and_then(|(s, m)| s.parse::<u64>().ok().map(|s| (s, m.to_string())));
        let Some((seed, method)) = parsed else {
            return Err(Error::Format(format!("metric file `{name}` is not named seed<N>_<method>.csv")));
        };
        out.entry(method).or_default().insert(seed, read_metrics_csv(&dir.join(&name))?);
    }
    Ok(out)
}

/// Per-round means over seeds and tasks of `(l1_error, avg_reward,
/// visited_states, modes_found)`.
pub fn round_means(by_seed: &BTreeMap<u64, Vec<MetricRecord>>) -> Vec<(usize, [f64; 4])> {
    let mut acc: BTreeMap<usize, ([f64; 4], usize)> = BTreeMap::new();
    for recs in by_seed.values() {
        for r in recs {
            let e = acc.entry(r.round).or_insert(([0.0; 4], 0));
            e.0[0] += r.l1_error;
            e.0[1] += r.avg_reward;
            e.0[2] += r.visited_states as f64;
            e.0[3] += r.modes_found as f64;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(t, (s, n))| (t, s.map(|v| v / n as f64))).collect()
}

fn ordered_methods<V>(m: &BTreeMap<String, V>) -> Vec<&String> {
    let mut keys: Vec<&String> = m.keys().collect();
    keys.sort_by_key(|k| (method_index(k), (*k).clone()));
    keys
}

/// Write `plots/l1.svg`, `plots/modes.svg` and `plots/reward.svg`.
pub fn render_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = read_run_metrics(run_dir)?;
    let (mut l1, mut modes, mut reward) = (Vec::new(), Vec::new(), Vec::new());
    for m in ordered_methods(&metrics) {
        let means = round_means(&metrics[m]);
        l1.push(Series::line(m.clone(), means.iter().map(|(t, v)| (*t as f64, v[0])).collect()));
        reward.push(Series::line(m.clone(), means.iter().map(|(t, v)| (*t as f64, v[1])).collect()));
        let mut pts = vec![(0.0, 0.0)];
        pts.extend(means.iter().map(|(_, v)| (v[2], v[3])));
        modes.push(Series::step(m.clone(), pts));
    }
    let dir = run_dir.join("plots");
    fs::create_dir_all(&dir)?;
    let files = [
        ("l1.svg", line_chart("Empirical L1 error", "round", "L1", &l1)),
        ("modes.svg", line_chart("Modes found", "visited states", "modes", &modes)),
        ("reward.svg", line_chart("Averaged reward", "round", "reward", &reward)),
    ];
    let mut written = Vec::new();
    for (name, svg) in files {
        write(dir.join(name), svg)?;
        written.push(dir.join(name));
    }
    Ok(written)
}

/// Text table of averaged reward and L1 per method across run directories.
pub fn compare_table(run_dirs: &[PathBuf]) -> Result<String> {
    let summaries: Vec<(String, RunSummary)> = run_dirs
        .iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
            read_summary(d).map(|s| (name, s))
        })
        .collect::<Result<_>>()?;
    let mut methods: Vec<String> = summaries.iter().flat_map(|(_, s)| s.keys().cloned()).collect();
    methods.sort_by_key(|k| (method_index(k), k.clone()));
    methods.dedup();
    let width = summaries.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(14);
    let mut out = String::new();
    for (title, pick) in [
        ("Averaged reward", (|m: &MethodSummary| &m.avg_reward) as fn(&MethodSummary) -> &Stat),
        ("Empirical L1 error", |m: &MethodSummary| &m.l1_error),
    ] {
        let _ = write!(out, "{title:<16}");
        for (n, _) in &summaries {
            let _ = write!(out, " | {n:^width$}");
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(16 + summaries.len() * (width + 3)));
        for m in &methods {
            let _ = write!(out, "{m:<16}");
            for (_, s) in &summaries {
                let cell = s.get(m).map(|x| pick(x).display.clone()).unwrap_or_else(|| "-".into());
                let _ = write!(out, " | {cell:^width$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Replace a numeric (or boolean) key addressed by a dotted path, keeping
/// the key's type.
pub fn with_param(cfg: &ExperimentConfig, path: &str, value: f64) -> Result<ExperimentConfig> {
    let mut doc: toml::Value = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut slot = &mut doc;
    for key in path.split('.') {
        slot = slot
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{path}`")))?;
    }
    *slot = match slot {
        toml::Value::Integer(_) if value.fract() == 0.0 && value >= 0.0 => toml::Value::Integer(value as i64),
        toml::Value::Float(_) => toml::Value::Float(value),
        _ => return Err(Error::Config(format!("parameter `{path}` cannot take the value {value}"))),
    };
    let next: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    next.validate()?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub run_dir: String,
    /// First evaluated round whose mean exact L1 is at most the threshold.
    pub rounds_to_threshold: BTreeMap<String, Option<usize>>,
    pub summary: RunSummary,
}

/// First round whose mean `l1_exact` (over seeds and tasks) is at most
/// `threshold`.
pub fn rounds_to_l1(by_seed: &BTreeMap<u64, Vec<MetricRecord>>, threshold: f64) -> Option<usize> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for recs in by_seed.values() {
        for r in recs {
            let e = acc.entry(r.round).or_insert((0.0, 0));
            e.0 += r.l1_exact;
            e.1 += 1;
        }
    }
    acc.into_iter().find(|(_, (s, n))| s / *n as f64 <= threshold).map(|(t, _)| t)
}

fn value_label(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Run the experiment once per value of `param` under `out/<param>=<value>`
/// and overlay the per-round L1 curves in `out/sweep_<method>.svg`.
pub fn run_sweep(cfg: &ExperimentConfig, param: &str, values: &[f64], threshold: f64, out: &Path) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cfgs: Vec<ExperimentConfig> = values.iter().map(|v| with_param(cfg, param, *v)).collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let mut points = Vec::new();
    let mut curves: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for (v, c) in values.iter().zip(&cfgs) {
        let dir = out.join(format!("{param}={}", value_label(*v)));
        let summary = run_experiment(c, &dir)?;
        let metrics = read_run_metrics(&dir)?;
        let mut rtt = BTreeMap::new();
        for (m, by_seed) in &metrics {
            rtt.insert(m.clone(), rounds_to_l1(by_seed, threshold));
            let means = round_means(by_seed);
            curves.entry(m.clone()).or_default().push(Series::line(
                format!("{param}={}", value_label(*v)),
                means.iter().map(|(t, x)| (*t as f64, x[0])).collect(),
            ));
        }
        points.push(SweepPoint { value: *v, run_dir: dir.to_string_lossy().into_owned(), rounds_to_threshold: rtt, summary });
    }
    for (m, series) in &curves {
        write(out.join(format!("sweep_{m}.svg")), line_chart(&format!("{m}: L1 by {param}"), "round", "L1", series))?;
    }
    write_json(out.join("sweep.json"), &points)?;
    Ok(points)
}

/// Human-readable digest of the theory diagnostics of a run directory.
pub fn theory_summary(run_dir: &Path) -> Result<String> {
    let dir = run_dir.join("theory");
    let mut names: Vec<String> = if dir.is_dir() {
        fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned())).collect()
    } else {
        Vec::new()
    };
    names.sort();
    let mut out = String::new();
    for name in names.iter().filter(|n| n.ends_with("_convergence.json")) {
        let seed = name.trim_end_matches("_convergence.json");
        let read = |p: PathBuf| fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
        let conv: ConvergenceReport = serde_json::from_str(&read(dir.join(name))?).map_err(|e| Error::Format(e.to_string()))?;
        let _ = writeln!(out, "{seed}");
        let last = conv.rows.last().map(|r| r.t).unwrap_or(0);
        let _ = writeln!(
            out,
            "  grad_sq running min: t=5 {:.4e}, t={last} {:.4e}; C/sqrt(t) fit C={:.4e} R2={:.3}; log-log slope {:.3}",
            conv.runmin_at(5).unwrap_or(f64::NAN),
            conv.runmin_at(last).unwrap_or(f64::NAN),
            conv.fit_c,
            conv.fit_r2,
            conv.loglog_slope
        );
        let _ = writeln!(out, "  gap running average bounded by 10x its t=5 value: {}", conv.gap_bounded(5, 10.0));
        let rep_path = dir.join(format!("{seed}.json"));
        if rep_path.is_file() {
            let rep: TheoryReport = serde_json::from_str(&read(rep_path)?).map_err(|e| Error::Format(e.to_string()))?;
            let _ = writeln!(
                out,
                "  H0={} H1={} H2={} B^={:.3e} L0^={:.3e} L1^={:.3e} L_ell={:.3e}",
                rep.h0, rep.h1, rep.h2, rep.b_hat, rep.l0_hat, rep.l1_hat, rep.l_ell
            );
            let zeta = rep.zeta_sq_bound.map(|z| format!("{z:.3e}")).unwrap_or_else(|| "n/a (lambda <= L_ell)".into());
            let _ = writeln!(
                out,
                "  lambda={} (lambda > 2 L_ell: {}), kappa1^={:.3e}, kappa2^={:.3e}, zeta^2={zeta}",
                rep.lambda, rep.lambda_constraint_ok, rep.kappa1_hat, rep.kappa2_hat
            );
            let _ = writeln!(
                out,
                "  eta={} vs admissible {:.3e} (eta_tilde_0={:.3e}): {}",
                rep.eta,
                rep.eta_max_theory,
                rep.eta_tilde_0,
                if rep.eta_condition_ok { "within" } else { "exceeds" }
            );
        }
    }
    if out.is_empty() {
        out.push_str("no theory diagnostics in this run directory\n");
    }
    Ok(out)
}
