//! Brute-force ground truth for small instances: the reward-proportional
//! target distribution, a canonical flow solution, and the exact terminal
//! distribution of any policy.

use std::collections::HashMap;

use crate::env::{Action, State, Task};
use crate::error::Result;
use crate::flownet::{encode_state, FlowNet, ParamVector};
use crate::objective::{visit_probabilities, PolicyTable};

/// `p(x) = R(x) / sum R` over the given terminals.
pub fn target_from_rewards(terminals: &[(State, f64)]) -> Vec<(State, f64)> {
    let z: f64 = terminals.iter().map(|(_, r)| r).sum();
    terminals.iter().map(|(s, r)| (*s, r / z)).collect()
}

/// Reward-proportional distribution over all reachable terminals.
pub fn exact_target_distribution(task: &Task) -> Vec<(State, f64)> {
    target_from_rewards(&task.enumerate_terminals())
}

/// Canonical edge flows satisfying flow consistency at every non-root node.
///
/// Sweeps the DAG in reverse topological order; each node's total flow
/// (reward plus outflow) is split equally among its parents.
pub fn exact_flows(task: &Task) -> HashMap<(State, Action), f64> {
    let mut edge: HashMap<(State, Action), f64> = HashMap::new();
    for s in task.states().iter().rev() {
        let total = if task.is_terminal(s) {
            task.node_reward(s)
        } else {
            task.valid_actions(s)
                .expect("non-terminal state has actions")
                .iter()
                .map(|a| edge.get(&(*s, *a)).copied().unwrap_or(0.0))
                .sum()
        };
        let parents = task.parents(s).expect("reachable state");
        if parents.is_empty() {
            continue;
        }
        let share = total / parents.len() as f64;
        for (p, a) in parents {
            edge.insert((p, a), share);
        }
    }
    edge
}

/// Total flow through the root, equal to the sum of terminal rewards.
pub fn root_flow(task: &Task, flows: &HashMap<(State, Action), f64>) -> f64 {
    task.valid_actions(&State::ROOT)
        .map(|acts| acts.iter().map(|a| flows[&(State::ROOT, *a)]).sum())
        .unwrap_or(0.0)
}

/// Largest `|inflow - R - outflow|` over reachable non-root states.
pub fn max_flow_residual(task: &Task, flows: &HashMap<(State, Action), f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for s in task.states().iter().filter(|s| !s.is_root()) {
        let inflow: f64 = task.parents(s).unwrap().iter().map(|e| flows[e]).sum();
        let outflow: f64 = if task.is_terminal(s) {
            0.0
        } else {
            task.valid_actions(s).unwrap().iter().map(|a| flows[&(*s, *a)]).sum()
        };
        worst = worst.max((inflow - task.node_reward(s) - outflow).abs());
    }
    worst
}

/// The forward policy `F(s,a) / sum_a' F(s,a')` induced by a flow table.
pub fn policy_from_flows(task: &Task, flows: &HashMap<(State, Action), f64>) -> PolicyTable {
    PolicyTable::from_fn(task, |s| {
        let acts = task.valid_actions(s).unwrap();
        let total: f64 = acts.iter().map(|a| flows[&(*s, *a)]).sum();
        acts.into_iter().map(|a| (a, flows[&(*s, a)] / total)).collect()
    })
}

/// Exact terminal-state marginal of `policy`, by pushing unit mass forward
/// from the root in topological order.
pub fn exact_policy_distribution(task: &Task, policy: &PolicyTable) -> Result<Vec<(State, f64)>> {
    let mass = visit_probabilities(task, policy, 0.0)?;
    Ok(task
        .enumerate_terminals()
        .into_iter()
        .map(|(s, _)| (s, mass.get(&s).copied().unwrap_or(0.0)))
        .collect())
}

/// A one-hidden-layer network whose log-flow outputs reproduce `flows` on
/// every reachable non-terminal state.
///
/// Each hidden unit is a saturated tanh detector for one state's encoding,
/// so the hidden layer is exactly +1 on that state's unit and -1 elsewhere.
pub fn flow_network(task: &Task, flows: &HashMap<(State, Action), f64>) -> Result<(FlowNet, ParamVector)> {
    const GAIN: f64 = 80.0;
    let interior: Vec<State> = task.states().iter().filter(|s| !task.is_terminal(s)).copied().collect();
    let net = FlowNet::for_task(task, &[interior.len()])?;
    let (n_in, n_hidden, n_out) = (net.input_dim(), interior.len(), net.output_dim());
    let mut p = vec![0.0; net.param_count()];

    for (j, s) in interior.iter().enumerate() {
        let enc = encode_state(task, s)?;
        let ones = enc.iter().filter(|v| **v == 1.0).count() as f64;
        for (i, v) in enc.iter().enumerate() {
            p[j * n_in + i] = if *v == 1.0 { GAIN } else { -GAIN };
        }
        p[n_in * n_hidden + j] = -GAIN * (ones - 0.5);
    }

    let out_base = (n_in + 1) * n_hidden;
    let mut bias = vec![0.0; n_out];
    for (j, s) in interior.iter().enumerate() {
        for a in task.valid_actions(s)? {
            let half = flows[&(*s, a)].ln() / 2.0;
            p[out_base + a.index() * n_hidden + j] = half;
            bias[a.index()] += half;
        }
    }
    p[out_base + n_out * n_hidden..].copy_from_slice(&bias);
    Ok((net, ParamVector::from_vec(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{default_frozen_goals, generate_frozen_lake, make_task, EnvKind, TaskParams};

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

    fn full_scale() -> Vec<Task> {
        vec![
            make_task(EnvKind::GridWorld, 8, 8, TaskParams::GridWorld { r0: 0.05 }, 0).unwrap(),
            make_task(EnvKind::CliffWalking, 4, 12, TaskParams::CliffWalking { cliff_length: 8 }, 0).unwrap(),
            generate_frozen_lake(8, 8, 1, 4).unwrap(),
        ]
    }

    #[test]
    fn single_terminal_strip() {
        let d = exact_target_distribution(&strip(2));
        assert_eq!(d, vec![(State::new(0, 1), 1.0)]);
    }

    #[test]
    fn proportional_weights() {
        let d = target_from_rewards(&[(State::new(0, 1), 1.0), (State::new(1, 0), 3.0)]);
        assert_eq!(d[0].1, 0.25);
        assert_eq!(d[1].1, 0.75);
    }

    #[test]
    fn lake_goal_probability() {
        let t = generate_frozen_lake(8, 8, 1, 0).unwrap();
        let terms = t.enumerate_terminals();
        let z: f64 = terms.iter().map(|(_, r)| r).sum();
        let d = exact_target_distribution(&t);
        let p = d.iter().find(|(s, _)| *s == State::new(7, 7)).unwrap().1;
        assert!((p - 1.0 / z).abs() < 1e-15);
        assert!((d.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_flows_carry_the_reward() {
        let t = strip(3);
        let f = exact_flows(&t);
        assert_eq!(f[&(State::new(0, 0), Action::Right)], 1.0);
        assert_eq!(f[&(State::new(0, 1), Action::Right)], 1.0);
    }

    #[test]
    fn diamond_splits_equally() {
        let t = make_task(
            EnvKind::FrozenLake,
            2,
            2,
            TaskParams::FrozenLake { holes: vec![], goals: vec![(1, 1)] },
            0,
        )
        .unwrap();
        let f = exact_flows(&t);
        assert_eq!(f[&(State::new(0, 1), Action::Down)], 0.5);
        assert_eq!(f[&(State::new(1, 0), Action::Right)], 0.5);
        assert_eq!(root_flow(&t, &f), 1.0);
    }

    #[test]
    fn flows_are_consistent_at_full_scale() {
        for t in full_scale() {
            let f = exact_flows(&t);
            assert!(max_flow_residual(&t, &f) <= 1e-10);
            let z: f64 = t.enumerate_terminals().iter().map(|(_, r)| r).sum();
            assert!((root_flow(&t, &f) - z).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_composition() {
        for t in full_scale() {
            let f = exact_flows(&t);
            let pi = exact_policy_distribution(&t, &policy_from_flows(&t, &f)).unwrap();
            let p = exact_target_distribution(&t);
            assert_eq!(pi.len(), p.len());
            for ((s1, a), (s2, b)) in pi.iter().zip(&p) {
                assert_eq!(s1, s2);
                assert!((a - b).abs() <= 1e-8, "{s1}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_policy_on_two_by_two() {
        // paths: R -> (0,1) goal; D -> (1,0) -> R -> (1,1) goal
        let t = make_task(
            EnvKind::FrozenLake,
            2,
            2,
            TaskParams::FrozenLake { holes: vec![], goals: default_frozen_goals(2, 2) },
            0,
        )
        .unwrap();
        let d = exact_policy_distribution(&t, &PolicyTable::uniform(&t)).unwrap();
        let get = |r, c| d.iter().find(|(s, _)| *s == State::new(r, c)).unwrap().1;
        assert_eq!(get(0, 1), 0.5);
        assert_eq!(get(1, 1), 0.5);

        // grid world: stop at root 1/3, (0,1)* = 1/3*1/2, (1,0)* = 1/3*1/2,
        // (1,1)* collects the rest
        let g = make_task(EnvKind::GridWorld, 2, 2, TaskParams::GridWorld { r0: 0.0 }, 0).unwrap();
        let d = exact_policy_distribution(&g, &PolicyTable::uniform(&g)).unwrap();
        let get = |r, c| d.iter().find(|(s, _)| *s == State::terminal(r, c)).unwrap().1;
        assert!((get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((get(0, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((get(1, 0) - 1.0 / 6.0).abs() < 1e-15);
        assert!((get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_policy_is_point_mass() {
        let t = generate_frozen_lake(4, 4, 1, 2).unwrap();
        let table = PolicyTable::from_fn(&t, |s| {
            let acts = t.valid_actions(s).unwrap();
            acts.iter().map(|a| (*a, if *a == acts[acts.len() - 1] { 1.0 } else { 0.0 })).collect()
        });
        let d = exact_policy_distribution(&t, &table).unwrap();
        assert_eq!(d.iter().filter(|(_, p)| *p == 1.0).count(), 1);
        assert!((d.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn injected_network_reproduces_flows() {
        for t in full_scale() {
            let f = exact_flows(&t);
            let (net, p) = flow_network(&t, &f).unwrap();
            for s in t.states().iter().filter(|s| !t.is_terminal(s)) {
                let out = net.edge_flows(&p, &encode_state(&t, s).unwrap()).unwrap();
                for a in t.valid_actions(s).unwrap() {
                    let want = f[&(*s, a)];
                    assert!((out[a.index()] - want).abs() <= 1e-12 * want, "{s} {a:?}");
                }
            }
        }
    }
}
