//! Per-species image state machines: loading, validation, and the pure engine
//! that maps a state to its pending steps.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::MatchParams;

pub const INITIAL_STATE: &str = "raw";
pub const TERMINAL_STATE: &str = "indexed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    Machine,
    Human,
}

impl fmt::Display for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Executor::Machine => "machine",
            Executor::Human => "human",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPolicy {
    /// Images are only compared with images of the same view.
    #[default]
    WithinView,
    AcrossViews,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub step: String,
    pub executor: Executor,
    pub payload_schema: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDef {
    pub name: String,
    pub states: Vec<String>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub view_policy: ViewPolicy,
    /// Matcher settings; absent fields keep their defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching: Option<MatchParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub state: String,
    pub entered_at: u64,
    pub actor: String,
}

pub const DEFAULT_WORKFLOW: &str = include_str!("../../../workflows/default.cfg");
pub const SYNTHETIC_WORKFLOW: &str = include_str!("../../../workflows/synthetic.cfg");

/// Parses and validates a workflow document; violations become one error.
pub fn load_workflow(doc: &str) -> Result<WorkflowDef> {
    let def: WorkflowDef = toml::from_str(doc).map_err(|e| Error::validation(format!("workflow document: {e}")))?;
    let violations = validate_workflow(&def);
    if violations.is_empty() {
        Ok(def)
    } else {
        Err(Error::validation(violations.join("; ")))
    }
}

pub fn load_workflow_file(path: &Path) -> Result<WorkflowDef> {
    load_workflow(&std::fs::read_to_string(path)?)
}

/// Looks up a shipped workflow by name.
pub fn builtin_workflow(name: &str) -> Result<WorkflowDef> {
    match name {
        "default" => load_workflow(DEFAULT_WORKFLOW),
        "synthetic" => load_workflow(SYNTHETIC_WORKFLOW),
        other => Err(Error::not_found(format!("workflow {other}"))),
    }
}

fn reachable(start: &str, adj: &BTreeMap<&str, Vec<&str>>) -> BTreeSet<String> {
    let mut seen = BTreeSet::from([start.to_string()]);
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for &t in adj.get(s).into_iter().flatten() {
            if seen.insert(t.to_string()) {
                queue.push_back(t);
            }
        }
    }
    seen
}

/// Every broken invariant, described by the element at fault.
pub fn validate_workflow(def: &WorkflowDef) -> Vec<String> {
    let mut out = Vec::new();
    let states: BTreeSet<&str> = def.states.iter().map(String::as_str).collect();
    if states.len() != def.states.len() {
        out.push("duplicate state".to_string());
    }
    for required in [INITIAL_STATE, TERMINAL_STATE] {
        if !states.contains(required) {
            out.push(format!("missing state: {required}"));
        }
    }
    let mut steps = BTreeSet::new();
    let mut fwd: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut rev: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &def.edges {
        if !steps.insert(e.step.as_str()) {
            out.push(format!("duplicate step: {}", e.step));
        }
        for s in [&e.from, &e.to] {
            if !states.contains(s.as_str()) {
                out.push(format!("unknown state: {s} (step {})", e.step));
            }
        }
        fwd.entry(&e.from).or_default().push(&e.to);
        rev.entry(&e.to).or_default().push(&e.from);
    }
    if !out.is_empty() {
        return out;
    }
    let from_raw = reachable(INITIAL_STATE, &fwd);
    let to_indexed = reachable(TERMINAL_STATE, &rev);
    for s in &def.states {
        if !from_raw.contains(s) {
            out.push(format!("unreachable: {s}"));
        }
    }
    for s in &def.states {
        if s != TERMINAL_STATE && !to_indexed.contains(s) {
            out.push(format!("cannot reach indexed: {s}"));
        }
    }
    if fwd.get(TERMINAL_STATE).is_some_and(|v| !v.is_empty()) {
        out.push(format!("terminal state has out-edges: {TERMINAL_STATE}"));
    }
    out
}

impl WorkflowDef {
    pub fn match_params(&self) -> MatchParams {
        self.matching.clone().unwrap_or_default()
    }

    pub fn has_state(&self, state: &str) -> bool {
        self.states.iter().any(|s| s == state)
    }

    /// The out-edges of `state` as (step, executor).
    pub fn next_steps(&self, state: &str) -> Result<Vec<(String, Executor)>> {
        if !self.has_state(state) {
            return Err(Error::validation(format!("unknown state: {state}")));
        }
        Ok(self
            .edges
            .iter()
            .filter(|e| e.from == state)
            .map(|e| (e.step.clone(), e.executor))
            .collect())
    }

    /// The edge `step` leaving `state`, if it exists.
    pub fn edge(&self, state: &str, step: &str) -> Result<&Edge> {
        self.edges
            .iter()
            .find(|e| e.from == state && e.step == step)
            .ok_or_else(|| Error::validation(format!("no step {step} from {state}")))
    }

    pub fn edge_by_step(&self, step: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.step == step)
    }

    pub fn human_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.executor == Executor::Human)
    }

    /// Whether `states` is a walk along edges from raw to indexed.
    pub fn is_complete_trace(&self, states: &[&str]) -> bool {
        states.first() == Some(&INITIAL_STATE)
            && states.last() == Some(&TERMINAL_STATE)
            && states
                .windows(2)
                .all(|w| self.edges.iter().any(|e| e.from == w[0] && e.to == w[1]))
    }
}
