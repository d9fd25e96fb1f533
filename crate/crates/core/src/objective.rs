//! Flow-matching objective, the policy it induces, and trajectory sampling.
//!
//! For a visited non-initial state `s'` the residual is
//! `sum_{(s,a) -> s'} F(s,a) - R(s') - sum_{a'} F(s',a')`, with `R = 0` for
//! interior nodes and an empty outflow sum for leaves. The batch loss is the
//! mean over trajectories of the summed squared residuals.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::env::{Action, State, Task};
use crate::error::{Error, Result};
use crate::flownet::{encode_state, FlowNet, ForwardCache, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub state: State,
    pub action: Action,
    pub next: State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal: State,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// One record per step (`row,col,action,`) and a closing
    /// `row,col,end,reward` record. Meant for debugging dumps.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for st in &self.steps {
            let _ = writeln!(out, "{},{},{},", st.state.row, st.state.col, st.action.as_str());
        }
        let t = self.terminal;
        let tag = if t.done { "end*" } else { "end" };
        let _ = writeln!(out, "{},{},{},{}", t.row, t.col, tag, self.reward);
        out
    }

    /// Rebuild a trajectory from [`Trajectory::to_text`] output, replaying the
    /// actions through `task`.
    pub fn from_text(task: &Task, text: &str) -> Result<Trajectory> {
        let bad = |m: String| Error::Format(format!("trajectory: {m}"));
        let mut steps = Vec::new();
        let mut state = State::ROOT;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        while let Some(line) = lines.next() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("malformed record `{line}`")));
            }
            let row: usize = f[0].parse().map_err(|_| bad(format!("bad row in `{line}`")))?;
            let col: usize = f[1].parse().map_err(|_| bad(format!("bad col in `{line}`")))?;
            if f[2].starts_with("end") {
                if lines.peek().is_some() {
                    return Err(bad("records after the terminal record".into()));
                }
                let expected = State { row, col, done: f[2] == "end*" };
                if expected != state {
                    return Err(bad(format!("terminal {expected} does not match replayed {state}")));
                }
                let reward = task.reward(&state)?;
                return Ok(Trajectory { steps, terminal: state, reward });
            }
            if (row, col) != (state.row, state.col) {
                return Err(bad(format!("record ({row},{col}) does not match replayed {state}")));
            }
            let action: Action = f[2].parse()?;
            let next = task.transition(&state, action)?;
            steps.push(Step { state, action, next });
            state = next;
        }
        Err(bad("missing terminal record".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
    pub task_id: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Edge flows per state, evaluated lazily and shared across a batch.
struct FlowMemo<'a> {
    task: &'a Task,
    net: &'a FlowNet,
    params: &'a ParamVector,
    flows: HashMap<State, Vec<f64>>,
}

impl<'a> FlowMemo<'a> {
    fn new(task: &'a Task, net: &'a FlowNet, params: &'a ParamVector) -> Self {
        FlowMemo { task, net, params, flows: HashMap::new() }
    }

    fn get(&mut self, s: &State) -> Result<&[f64]> {
        if !self.flows.contains_key(s) {
            let x = encode_state(self.task, s)?;
            let f = self.net.edge_flows(self.params, &x)?;
            self.flows.insert(*s, f);
        }
        Ok(&self.flows[s])
    }
}

fn normalize(task: &Task, s: &State, flows: &[f64]) -> Result<Vec<(Action, f64)>> {
    let acts = task.valid_actions(s)?;
    if acts.is_empty() {
        return Err(Error::contract(format!("state {s} has no valid actions")));
    }
    let total: f64 = acts.iter().map(|a| flows[a.index()]).sum();
    Ok(acts.into_iter().map(|a| (a, flows[a.index()] / total)).collect())
}

/// `pi(a|s) = F(s,a) / sum_{a' valid} F(s,a')`.
pub fn policy_probs(task: &Task, net: &FlowNet, params: &ParamVector, state: &State) -> Result<Vec<(Action, f64)>> {
    let x = encode_state(task, state)?;
    let flows = net.edge_flows(params, &x)?;
    normalize(task, state, &flows)
}

/// Action distribution for every reachable non-terminal state.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    probs: HashMap<State, Vec<(Action, f64)>>,
}

impl PolicyTable {
    pub fn from_net(task: &Task, net: &FlowNet, params: &ParamVector) -> Result<Self> {
        let mut probs = HashMap::new();
        for s in task.states() {
            if !task.is_terminal(s) {
                probs.insert(*s, policy_probs(task, net, params, s)?);
            }
        }
        Ok(PolicyTable { probs })
    }

    /// Build from explicit per-state distributions.
    pub fn from_fn(task: &Task, f: impl Fn(&State) -> Vec<(Action, f64)>) -> Self {
        let probs = task
            .states()
            .iter()
            .filter(|s| !task.is_terminal(s))
            .map(|s| (*s, f(s)))
            .collect();
        PolicyTable { probs }
    }

    /// The uniform policy over valid actions.
    pub fn uniform(task: &Task) -> Self {
        PolicyTable::from_fn(task, |s| {
            let acts = task.valid_actions(s).unwrap();
            let p = 1.0 / acts.len() as f64;
            acts.into_iter().map(|a| (a, p)).collect()
        })
    }

    pub fn probs(&self, s: &State) -> Result<&[(Action, f64)]> {
        self.probs
            .get(s)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::contract(format!("no policy entry for state {s}")))
    }

    /// Highest-probability action, ties broken by action order.
    pub fn argmax(&self, s: &State) -> Result<Action> {
        let p = self.probs(s)?;
        let mut best = p[0];
        for &(a, q) in &p[1..] {
            if q > best.1 {
                best = (a, q);
            }
        }
        Ok(best.0)
    }
}

fn draw(rng: &mut impl Rng, probs: &[(Action, f64)], eps: f64) -> Action {
    let n = probs.len() as f64;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(a, p) in probs {
        acc += (1.0 - eps) * p + eps / n;
        if u < acc {
            return a;
        }
    }
    probs.last().unwrap().0
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::contract(format!("exploration rate {eps} outside [0, 1]")));
    }
    Ok(())
}

/// Roll out one trajectory, drawing actions from `(1 - eps) * pi + eps * uniform`.
pub fn sample_trajectory(
    task: &Task,
    net: &FlowNet,
    params: &ParamVector,
    rng: &mut impl Rng,
    explore_eps: f64,
) -> Result<Trajectory> {
    check_eps(explore_eps)?;
    let mut memo = FlowMemo::new(task, net, params);
    rollout(task, rng, explore_eps, |s| {
        let f = memo.get(s)?.to_vec();
        normalize(task, s, &f)
    })
}

/// Roll out with a precomputed policy table.
pub fn sample_with_table(task: &Task, table: &PolicyTable, rng: &mut impl Rng, explore_eps: f64) -> Result<Trajectory> {
    check_eps(explore_eps)?;
    rollout(task, rng, explore_eps, |s| Ok(table.probs(s)?.to_vec()))
}

fn rollout(
    task: &Task,
    rng: &mut impl Rng,
    eps: f64,
    mut probs: impl FnMut(&State) -> Result<Vec<(Action, f64)>>,
) -> Result<Trajectory> {
    let mut s = State::ROOT;
    let mut steps = Vec::new();
    while !task.is_terminal(&s) {
        let p = probs(&s)?;
        let a = draw(rng, &p, eps);
        let next = task.transition(&s, a)?;
        steps.push(Step { state: s, action: a, next });
        s = next;
    }
    Ok(Trajectory { steps, terminal: s, reward: task.reward(&s)? })
}

/// Sample `k` trajectories sharing one flow evaluation cache.
pub fn sample_batch(
    task: &Task,
    net: &FlowNet,
    params: &ParamVector,
    k: usize,
    rng: &mut impl Rng,
    explore_eps: f64,
    task_id: usize,
) -> Result<Batch> {
    check_eps(explore_eps)?;
    let mut memo = FlowMemo::new(task, net, params);
    let mut trajectories = Vec::with_capacity(k);
    for _ in 0..k {
        trajectories.push(rollout(task, rng, explore_eps, |s| {
            let f = memo.get(s)?.to_vec();
            normalize(task, s, &f)
        })?);
    }
    Ok(Batch { trajectories, task_id })
}

struct Node {
    cache: ForwardCache,
    flows: Vec<f64>,
    cot: Vec<f64>,
}

/// Weighted sum of squared flow-consistency residuals over `(state, weight)`
/// occurrences, optionally with its parameter gradient.
///
/// `reward` supplies `R(s')` for every visited state, which lets tests inject
/// rewards for interior nodes.
pub fn residual_loss_grad(
    task: &Task,
    net: &FlowNet,
    params: &ParamVector,
    occurrences: &[(State, f64)],
    reward: &dyn Fn(&State) -> f64,
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    let mut index: HashMap<State, usize> = HashMap::new();
    let mut nodes: Vec<Node> = Vec::new();
    let mut node = |s: &State, nodes: &mut Vec<Node>| -> Result<usize> {
        if let Some(&i) = index.get(s) {
            return Ok(i);
        }
        let input = encode_state(task, s)?;
        let cache = net.forward_cached(params, &input)?;
        let flows = cache.flows();
        nodes.push(Node { cache, flows, cot: vec![0.0; net.output_dim()] });
        index.insert(*s, nodes.len() - 1);
        Ok(nodes.len() - 1)
    };

    let mut loss = 0.0;
    for &(s, weight) in occurrences {
        if s.is_root() {
            return Err(Error::contract("the initial state has no residual"));
        }
        let parents = task.parents(&s)?;
        let mut inflow = 0.0;
        let mut parent_slots = Vec::with_capacity(parents.len());
        for (p, a) in &parents {
            let i = node(p, &mut nodes)?;
            inflow += nodes[i].flows[a.index()];
            parent_slots.push((i, a.index()));
        }
        let mut outflow = 0.0;
        let mut child = None;
        if !task.is_terminal(&s) {
            let i = node(&s, &mut nodes)?;
            let acts = task.valid_actions(&s)?;
            outflow = acts.iter().map(|a| nodes[i].flows[a.index()]).sum();
            child = Some((i, acts));
        }
        let res = inflow - reward(&s) - outflow;
        if !res.is_finite() {
            return Err(Error::numeric(format!("non-finite residual at state {s}")));
        }
        loss += weight * res * res;
        if want_grad {
            let d = 2.0 * weight * res;
            for (i, a) in parent_slots {
                let f = nodes[i].flows[a];
                nodes[i].cot[a] += d * f;
            }
            if let Some((i, acts)) = child {
                for a in acts {
                    let f = nodes[i].flows[a.index()];
                    nodes[i].cot[a.index()] -= d * f;
                }
            }
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad = ParamVector::zeros(net.param_count());
    for n in &nodes {
        if n.cot.iter().all(|c| *c == 0.0) {
            continue;
        }
        net.backprop_into(params, &n.cache, &n.cot, &mut grad)?;
    }
    if !grad.is_finite() {
        let bad = index
            .iter()
            .find(|(_, &i)| nodes[i].cot.iter().any(|c| !c.is_finite()))
            .map(|(s, _)| s.to_string())
            .unwrap_or_else(|| "unknown".into());
        return Err(Error::numeric(format!("non-finite gradient, first offending state {bad}")));
    }
    Ok((loss, Some(grad)))
}

fn batch_occurrences(batch: &Batch) -> Result<Vec<(State, f64)>> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let w = 1.0 / batch.len() as f64;
    Ok(batch
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter().map(move |st| (st.next, w)))
        .collect())
}

/// Mean over trajectories of the per-trajectory flow-matching loss.
pub fn fm_loss(task: &Task, net: &FlowNet, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let occ = batch_occurrences(batch)?;
    Ok(residual_loss_grad(task, net, params, &occ, &|s| task.node_reward(s), false)?.0)
}

pub fn fm_loss_grad(task: &Task, net: &FlowNet, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    fm_loss_grad_with_rewards(task, net, params, batch, &|s| task.node_reward(s))
}

/// [`fm_loss_grad`] with caller-supplied node rewards.
pub fn fm_loss_grad_with_rewards(
    task: &Task,
    net: &FlowNet,
    params: &ParamVector,
    batch: &Batch,
    reward: &dyn Fn(&State) -> f64,
) -> Result<(f64, ParamVector)> {
    let occ = batch_occurrences(batch)?;
    let (loss, grad) = residual_loss_grad(task, net, params, &occ, reward, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Probability that a trajectory drawn from `(1 - eps) * table + eps * uniform`
/// visits each reachable state.
pub fn visit_probabilities(task: &Task, table: &PolicyTable, explore_eps: f64) -> Result<HashMap<State, f64>> {
    check_eps(explore_eps)?;
    let mut mass: HashMap<State, f64> = HashMap::new();
    mass.insert(State::ROOT, 1.0);
    for s in task.states() {
        let m = mass.get(s).copied().unwrap_or(0.0);
        if m == 0.0 || task.is_terminal(s) {
            continue;
        }
        let probs = table.probs(s)?;
        let n = probs.len() as f64;
        for &(a, p) in probs {
            let next = task.transition(s, a)?;
            *mass.entry(next).or_insert(0.0) += m * ((1.0 - explore_eps) * p + explore_eps / n);
        }
    }
    Ok(mass)
}

/// Expected flow-matching loss and gradient under the trajectory distribution
/// of a fixed sampling policy (the full-enumeration counterpart of
/// [`fm_loss_grad`]).
pub fn expected_loss_grad(
    task: &Task,
    net: &FlowNet,
    params: &ParamVector,
    sampler: &PolicyTable,
    explore_eps: f64,
) -> Result<(f64, ParamVector)> {
    let visits = visit_probabilities(task, sampler, explore_eps)?;
    let occ: Vec<(State, f64)> = task
        .states()
        .iter()
        .filter(|s| !s.is_root())
        .filter_map(|s| visits.get(s).filter(|p| **p > 0.0).map(|p| (*s, *p)))
        .collect();
    let (loss, grad) = residual_loss_grad(task, net, params, &occ, &|s| task.node_reward(s), true)?;
    Ok((loss, grad.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{default_frozen_goals, generate_frozen_lake, make_task, EnvKind, TaskParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strip(n: usize) -> Task {
        make_task(
            EnvKind::FrozenLake,
            1,
            n,
            TaskParams::FrozenLake { holes: vec![], goals: vec![(0, n - 1)] },
            0,
        )
        .unwrap()
    }

    fn lake2() -> Task {
        make_task(
            EnvKind::FrozenLake,
            2,
            2,
            TaskParams::FrozenLake { holes: vec![], goals: vec![(1, 1)] },
            0,
        )
        .unwrap()
    }

    fn zero_net(task: &Task) -> (FlowNet, ParamVector) {
        let net = FlowNet::for_task(task, &[4]).unwrap();
        let p = ParamVector::zeros(net.param_count());
        (net, p)
    }

    /// Direct transcription of the residual sum: loop over visited states,
    /// parents and children with fresh network evaluations each time.
    fn naive_loss(task: &Task, net: &FlowNet, params: &ParamVector, batch: &Batch) -> f64 {
        let flow = |s: &State, a: Action| net.edge_flows(params, &encode_state(task, s).unwrap()).unwrap()[a.index()];
        let mut total = 0.0;
        for t in &batch.trajectories {
            let mut per = 0.0;
            for st in &t.steps {
                let s = st.next;
                let mut inflow = 0.0;
                for p in task.states() {
                    if task.is_terminal(p) {
                        continue;
                    }
                    for a in task.valid_actions(p).unwrap() {
                        if task.transition(p, a).unwrap() == s {
                            inflow += flow(p, a);
                        }
                    }
                }
                let (r, out) = if task.is_terminal(&s) {
                    (task.reward(&s).unwrap(), 0.0)
                } else {
                    (0.0, task.valid_actions(&s).unwrap().iter().map(|a| flow(&s, *a)).sum())
                };
                per += (inflow - r - out).powi(2);
            }
            total += per;
        }
        total / batch.len() as f64
    }

    #[test]
    fn uniform_policy_at_zero_params() {
        let t = make_task(EnvKind::GridWorld, 4, 4, TaskParams::GridWorld { r0: 0.0 }, 0).unwrap();
        let (net, p) = zero_net(&t);
        let probs = policy_probs(&t, &net, &p, &State::new(1, 1)).unwrap();
        assert_eq!(probs.len(), 3);
        for (_, q) in probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        let lake = lake2();
        let (net, p) = zero_net(&lake);
        assert_eq!(policy_probs(&lake, &net, &p, &State::new(1, 0)).unwrap(), vec![(Action::Right, 1.0)]);
        assert!(matches!(policy_probs(&lake, &net, &p, &State::new(1, 1)), Err(Error::Contract(_))));
    }

    #[test]
    fn policy_matches_raw_flow_ratios() {
        let t = generate_frozen_lake(4, 4, 1, 3).unwrap();
        let net = FlowNet::for_task(&t, &[8]).unwrap();
        let p = net.init_params(7);
        for s in t.states().iter().filter(|s| !t.is_terminal(s)) {
            let f = net.edge_flows(&p, &encode_state(&t, s).unwrap()).unwrap();
            let acts = t.valid_actions(s).unwrap();
            let z: f64 = acts.iter().map(|a| f[a.index()]).sum();
            let probs = policy_probs(&t, &net, &p, s).unwrap();
            let total: f64 = probs.iter().map(|(_, q)| q).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (a, q) in probs {
                assert!((q - f[a.index()] / z).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_path_strip_is_deterministic() {
        let t = strip(3);
        let (net, p) = zero_net(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let tr = sample_trajectory(&t, &net, &p, &mut rng, 0.0).unwrap();
            assert_eq!(tr.len(), 2);
            assert_eq!(tr.terminal, State::new(0, 2));
            assert_eq!(tr.reward, 1.0);
        }
    }

    #[test]
    fn full_exploration_covers_every_path() {
        let t = make_task(
            EnvKind::FrozenLake,
            2,
            2,
            TaskParams::FrozenLake { holes: vec![], goals: default_frozen_goals(2, 2) },
            0,
        )
        .unwrap();
        let net = FlowNet::for_task(&t, &[4]).unwrap();
        let p = net.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts: HashMap<Vec<Action>, usize> = HashMap::new();
        for _ in 0..10_000 {
            let tr = sample_trajectory(&t, &net, &p, &mut rng, 1.0).unwrap();
            *counts.entry(tr.steps.iter().map(|s| s.action).collect()).or_default() += 1;
        }
        // right into the goal at (0,1), or down then right into (1,1)
        assert_eq!(counts.len(), 2);
        assert!(counts.values().all(|&c| c > 0));
    }

    #[test]
    fn strip_loss_hand_expansion() {
        let t = strip(2);
        let net = FlowNet::new(vec![3, 2]).unwrap();
        // linear head: log F(s0, right) = bias
        let mut p = ParamVector::zeros(net.param_count());
        let c: f64 = 1.7;
        p.as_mut_slice()[net.param_count() - 1] = c.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&t, &net, &p, 1, &mut rng, 0.0, 0).unwrap();
        let l = fm_loss(&t, &net, &p, &batch).unwrap();
        assert!((l - (c - 1.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_naive_transcription() {
        for seed in 0..10u64 {
            let t = generate_frozen_lake(4, 4, 1, seed).unwrap();
            let net = FlowNet::for_task(&t, &[6]).unwrap();
            let p = net.init_params(seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&t, &net, &p, 4, &mut rng, 0.3, 0).unwrap();
            let a = fm_loss(&t, &net, &p, &batch).unwrap();
            let b = naive_loss(&t, &net, &p, &batch);
            assert!((a - b).abs() <= 1e-10 * b.max(1.0), "{a} vs {b}");
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = lake2();
        let net = FlowNet::new(vec![4, 8, 2]).unwrap();
        let p = net.init_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_batch(&t, &net, &p, 5, &mut rng, 0.5, 0).unwrap();
        let (_, g) = fm_loss_grad(&t, &net, &p, &batch).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut a = p.clone();
            a.as_mut_slice()[i] += h;
            let mut b = p.clone();
            b.as_mut_slice()[i] -= h;
            let fd = (fm_loss(&t, &net, &a, &batch).unwrap() - fm_loss(&t, &net, &b, &batch).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_residual_rewards_give_zero_gradient() {
        let t = generate_frozen_lake(4, 4, 1, 1).unwrap();
        let net = FlowNet::for_task(&t, &[6]).unwrap();
        let p = net.init_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&t, &net, &p, 3, &mut rng, 0.2, 0).unwrap();
        let flow = |s: &State| net.edge_flows(&p, &encode_state(&t, s).unwrap()).unwrap();
        let reward = |s: &State| {
            let inflow: f64 = t.parents(s).unwrap().iter().map(|(q, a)| flow(q)[a.index()]).sum();
            let out: f64 = if t.is_terminal(s) {
                0.0
            } else {
                t.valid_actions(s).unwrap().iter().map(|a| flow(s)[a.index()]).sum()
            };
            inflow - out
        };
        let (l, g) = fm_loss_grad_with_rewards(&t, &net, &p, &batch, &reward).unwrap();
        assert!(l < 1e-28);
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn repeated_trajectory_counts_twice() {
        let t = generate_frozen_lake(4, 4, 1, 5).unwrap();
        let net = FlowNet::for_task(&t, &[6]).unwrap();
        let p = net.init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = sample_trajectory(&t, &net, &p, &mut rng, 0.0).unwrap();
        let single = Batch { trajectories: vec![tr.clone()], task_id: 0 };
        let double = Batch { trajectories: vec![tr.clone(), tr], task_id: 0 };
        let occ = |b: &Batch| {
            b.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| (s.next, 1.0))).collect::<Vec<_>>()
        };
        let (l1, _) = residual_loss_grad(&t, &net, &p, &occ(&single), &|s| t.node_reward(s), false).unwrap();
        let (l2, _) = residual_loss_grad(&t, &net, &p, &occ(&double), &|s| t.node_reward(s), false).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12 * l1);
        // the batch mean is unchanged
        let m1 = fm_loss(&t, &net, &p, &single).unwrap();
        let m2 = fm_loss(&t, &net, &p, &double).unwrap();
        assert!((m1 - m2).abs() < 1e-12 * m1);
    }

    #[test]
    fn empty_batch_rejected() {
        let t = lake2();
        let (net, p) = zero_net(&t);
        let b = Batch { trajectories: vec![], task_id: 0 };
        assert!(matches!(fm_loss(&t, &net, &p, &b), Err(Error::Contract(_))));
        assert!(matches!(fm_loss_grad(&t, &net, &p, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn trajectory_text_round_trip() {
        let t = make_task(EnvKind::GridWorld, 4, 4, TaskParams::GridWorld { r0: 0.01 }, 0).unwrap();
        let net = FlowNet::for_task(&t, &[4]).unwrap();
        let p = net.init_params(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let tr = sample_trajectory(&t, &net, &p, &mut rng, 0.5).unwrap();
            let back = Trajectory::from_text(&t, &tr.to_text()).unwrap();
            assert_eq!(back, tr);
        }
    }

    #[test]
    fn policy_normalization_everywhere() {
        let t = make_task(EnvKind::CliffWalking, 4, 12, TaskParams::CliffWalking { cliff_length: 7 }, 0).unwrap();
        let net = FlowNet::for_task(&t, &[8, 8]).unwrap();
        for seed in 0..5 {
            let mut p = net.init_params(seed);
            p.scale_assign(4.0);
            let table = PolicyTable::from_net(&t, &net, &p).unwrap();
            for s in t.states().iter().filter(|s| !t.is_terminal(s)) {
                let total: f64 = table.probs(s).unwrap().iter().map(|(_, q)| q).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }
}
