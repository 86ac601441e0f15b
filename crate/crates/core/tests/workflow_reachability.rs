use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sloop_core::workflow::{builtin_workflow, validate_workflow, Edge, Executor, ViewPolicy, WorkflowDef};

fn bfs(start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    let mut q = VecDeque::from([start]);
    while let Some(s) = q.pop_front() {
        for &t in &adj[s] {
            if !seen[t] {
                seen[t] = true;
                q.push_back(t);
            }
        }
    }
    seen
}

/// A random DAG over `raw`, some middle states and `indexed` (last), with
/// one guaranteed raw-to-indexed chain and random extra forward edges.
fn random_dag(seed: u64) -> (WorkflowDef, Vec<(usize, usize)>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let middle = r.gen_range(0..8);
    let n = middle + 2;
    let mut names = vec!["raw".to_string()];
    names.extend((0..middle).map(|i| format!("s{i}")));
    names.push("indexed".to_string());
    let mut edges = BTreeSet::new();
    let mut at = 0;
    while at != n - 1 {
        let next = r.gen_range(at + 1..n);
        edges.insert((at, next));
        at = next;
    }
    for _ in 0..r.gen_range(0..2 * n) {
        let a = r.gen_range(0..n - 1);
        let b = r.gen_range(a + 1..n);
        edges.insert((a, b));
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let def = WorkflowDef {
        name: format!("dag{seed}"),
        states: names.clone(),
        edges: edges
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Edge {
                from: names[a].clone(),
                to: names[b].clone(),
                step: format!("e{i}"),
                executor: if r.gen_bool(0.3) { Executor::Human } else { Executor::Machine },
                payload_schema: "none".into(),
            })
            .collect(),
        view_policy: ViewPolicy::WithinView,
        matching: None,
    };
    (def, edges)
}

#[test]
fn random_dags_validate_exactly_when_reachability_holds() {
    let mut passed = 0;
    for seed in 0..1000 {
        let (def, edges) = random_dag(seed);
        let n = def.states.len();
        let mut fwd = vec![Vec::new(); n];
        let mut rev = vec![Vec::new(); n];
        for &(a, b) in &edges {
            fwd[a].push(b);
            rev[b].push(a);
        }
        let from_raw = bfs(0, &fwd);
        let to_indexed = bfs(n - 1, &rev);
        let mut want = Vec::new();
        for (i, s) in def.states.iter().enumerate() {
            if !from_raw[i] {
                want.push(format!("unreachable: {s}"));
            }
        }
        for (i, s) in def.states.iter().enumerate() {
            if i != n - 1 && !to_indexed[i] {
                want.push(format!("cannot reach indexed: {s}"));
            }
        }
        assert_eq!(validate_workflow(&def), want, "seed {seed}");
        if want.is_empty() {
            passed += 1;
        }
    }
    assert!(passed > 100, "too few fully connected graphs: {passed}");
}

#[test]
fn every_builtin_trace_is_a_legal_path() {
    for name in ["default", "synthetic"] {
        let def = builtin_workflow(name).unwrap();
        assert!(validate_workflow(&def).is_empty());
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut trace = vec!["raw".to_string()];
            while trace.last().unwrap() != "indexed" && trace.len() < 50 {
                let steps = def.next_steps(trace.last().unwrap()).unwrap();
                let (step, _) = &steps[r.gen_range(0..steps.len())];
                trace.push(def.edge(trace.last().unwrap(), step).unwrap().to.clone());
            }
            let path: Vec<&str> = trace.iter().map(String::as_str).collect();
            if path.last() == Some(&"indexed") {
                assert!(def.is_complete_trace(&path), "{path:?}");
            }
        }
    }
}
