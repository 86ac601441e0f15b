//! Relevance feedback: choosing pairs to verify, collecting crowd judgments
//! with gold-task quality control, reaching consensus, and merging verified
//! sightings into cohorts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ensemble::{RankedEntry, RankedList};
use crate::error::{Error, Result};
use crate::params::CrowdParams;

/// Unordered image pair stored as `(min, max)`.
pub type PairKey = (String, String);

pub fn pair_key(a: &str, b: &str) -> PairKey {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Same,
    Different,
    Unsure,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Same => "same",
            Label::Different => "different",
            Label::Unsure => "unsure",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Label::Same),
            "different" => Ok(Label::Different),
            "unsure" => Ok(Label::Unsure),
            _ => Err(Error::validation(format!("unknown label {s:?}"))),
        }
    }
}

/// Sort key of a ranked entry: deeper cascade stages first, then combined score.
fn entry_key(e: &RankedEntry) -> (usize, f64) {
    (e.depth, e.combined)
}

/// The `ceil(f * pool_size)` highest-scoring unverified pairs across all
/// rankings. A pair seen from both sides takes its better score; ties go to
/// the lexicographically smaller pair.
pub fn select_verification_pairs(
    rankings: &[RankedList],
    pool_size: usize,
    budget_fraction: f64,
    already_verified: &BTreeSet<PairKey>,
) -> Result<Vec<PairKey>> {
    if rankings.is_empty() {
        return Err(Error::Insufficient("no rankings to select from".into()));
    }
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::validation("budget fraction must lie in (0, 1]"));
    }
    let budget = (budget_fraction * pool_size as f64).ceil() as usize;
    let mut best: BTreeMap<PairKey, (usize, f64)> = BTreeMap::new();
    for list in rankings {
        for e in &list.entries {
            if e.candidate == list.query {
                continue;
            }
            let key = pair_key(&list.query, &e.candidate);
            if already_verified.contains(&key) {
                continue;
            }
            let k = entry_key(e);
            best.entry(key)
                .and_modify(|cur| {
                    if k.0 > cur.0 || (k.0 == cur.0 && k.1 > cur.1) {
                        *cur = k;
                    }
                })
                .or_insert(k);
        }
    }
    let mut all: Vec<(PairKey, (usize, f64))> = best.into_iter().collect();
    all.sort_by(|(pa, ka), (pb, kb)| {
        kb.0.cmp(&ka.0)
            .then(kb.1.total_cmp(&ka.1))
            .then(pa.cmp(pb))
    });
    Ok(all.into_iter().take(budget).map(|(p, _)| p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Assigned,
    Resolved,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub annotator_id: String,
    pub label: Label,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTask {
    pub task_id: u64,
    pub pair: PairKey,
    pub state: TaskState,
    pub responses: Vec<TaskResponse>,
    pub consensus: Option<Label>,
    pub gold: bool,
    /// Known answer of a gold task; never sent to annotators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Label>,
    /// Annotators who declined the task.
    #[serde(default)]
    pub skipped_by: BTreeSet<String>,
    /// Annotators holding the task (gold tasks are held by exactly one).
    #[serde(default)]
    pub held_by: BTreeSet<String>,
}

impl VerificationTask {
    /// Copy safe to show an annotator.
    pub fn public(&self) -> Self {
        Self {
            truth: None,
            ..self.clone()
        }
    }

    fn answered_by(&self, annotator: &str) -> bool {
        self.responses.iter().any(|r| r.annotator_id == annotator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    /// Beta posterior over correctness.
    pub a: f64,
    pub b: f64,
    pub gold_correct: u32,
    pub gold_total: u32,
    pub answered: u64,
    pub active: bool,
}

impl AnnotatorProfile {
    pub fn new(id: impl Into<String>, params: &CrowdParams) -> Self {
        Self {
            annotator_id: id.into(),
            a: params.prior_correct,
            b: params.prior_wrong,
            gold_correct: 0,
            gold_total: 0,
            answered: 0,
            active: true,
        }
    }

    pub fn reliability(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Beta posterior update from one gold outcome, with deactivation once the
/// posterior mean falls below threshold after enough golds.
pub fn update_reliability(profile: &AnnotatorProfile, correct: bool, params: &CrowdParams) -> AnnotatorProfile {
    let mut p = profile.clone();
    p.gold_total += 1;
    if correct {
        p.a += 1.0;
        p.gold_correct += 1;
    } else {
        p.b += 1.0;
    }
    if p.reliability() < params.deactivate_below && p.gold_total >= params.min_gold_for_deactivation {
        p.active = false;
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Resolved(Label),
    Open,
}

/// Reliability-weighted vote; `unsure` abstains. Resolves early on a
/// qualified majority of at least two votes, otherwise by plain weighted
/// majority once `redundancy` votes are in, ties going to `different`.
pub fn resolve(task: &VerificationTask, profiles: &BTreeMap<String, AnnotatorProfile>, params: &CrowdParams) -> Resolution {
    let mut same = 0.0;
    let mut diff = 0.0;
    let mut votes = 0usize;
    for r in &task.responses {
        let w = profiles
            .get(&r.annotator_id)
            .map_or(params.prior_correct / (params.prior_correct + params.prior_wrong), AnnotatorProfile::reliability);
        match r.label {
            Label::Same => same += w,
            Label::Different => diff += w,
            Label::Unsure => continue,
        }
        votes += 1;
    }
    let cast = same + diff;
    if votes >= 2 && cast > 0.0 {
        if same >= params.consensus_fraction * cast {
            return Resolution::Resolved(Label::Same);
        }
        if diff >= params.consensus_fraction * cast {
            return Resolution::Resolved(Label::Different);
        }
    }
    if votes >= params.redundancy && votes > 0 {
        return Resolution::Resolved(if same > diff { Label::Same } else { Label::Different });
    }
    Resolution::Open
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub task_id: u64,
    pub resolution: Resolution,
    /// Set for gold tasks.
    pub gold_correct: Option<bool>,
    pub deactivated: bool,
}

/// Tasks, annotators and the gold pool. Every mutation is a deterministic
/// function of its arguments so the whole state can be rebuilt by replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Crowd {
    pub params: CrowdParams,
    pub profiles: BTreeMap<String, AnnotatorProfile>,
    pub tasks: BTreeMap<u64, VerificationTask>,
    next_task_id: u64,
    gold_pool: Vec<(PairKey, Label)>,
    gold_cursor: usize,
    pending_gold: BTreeMap<String, u64>,
}

impl Crowd {
    pub fn new(params: CrowdParams) -> Self {
        Self {
            params,
            next_task_id: 1,
            ..Self::default()
        }
    }

    pub fn register_annotator(&mut self, id: &str) {
        if !self.profiles.contains_key(id) {
            self.profiles.insert(id.to_string(), AnnotatorProfile::new(id, &self.params));
        }
    }

    pub fn add_gold(&mut self, pair: PairKey, truth: Label) -> Result<()> {
        if truth == Label::Unsure {
            return Err(Error::validation("gold answers must be same or different"));
        }
        self.gold_pool.push((pair, truth));
        Ok(())
    }

    pub fn active_annotators(&self) -> usize {
        self.profiles.values().filter(|p| p.active).count()
    }

    fn live_task_for(&self, pair: &PairKey) -> Option<u64> {
        self.tasks
            .values()
            .find(|t| !t.gold && &t.pair == pair && t.state != TaskState::Expired)
            .map(|t| t.task_id)
    }

    /// Opens a verification task; a pair may have only one live task.
    pub fn create_task(&mut self, pair: PairKey) -> Result<u64> {
        if pair.0 == pair.1 {
            return Err(Error::validation("a pair needs two distinct images"));
        }
        if let Some(id) = self.live_task_for(&pair) {
            return Err(Error::Conflict(format!("pair already has live task {id}")));
        }
        let id = self.next_task_id;
        self.next_task_id += 1;
        self.tasks.insert(
            id,
            VerificationTask {
                task_id: id,
                pair,
                state: TaskState::Open,
                responses: Vec::new(),
                consensus: None,
                gold: false,
                truth: None,
                skipped_by: BTreeSet::new(),
                held_by: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn expire_task(&mut self, task_id: u64) -> Result<()> {
        let t = self.tasks.get_mut(&task_id).ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
        if t.state == TaskState::Resolved {
            return Err(Error::Conflict(format!("task {task_id} already resolved")));
        }
        t.state = TaskState::Expired;
        Ok(())
    }

    fn gold_due(&self, p: &AnnotatorProfile) -> bool {
        let k = self.params.gold_every as u64;
        k > 0 && !self.gold_pool.is_empty() && (p.answered + 1) % k == 0
    }

    /// Tasks offered to `annotator`, up to `max`. When the annotator's next
    /// answer falls on the gold cadence only that gold task is offered.
    pub fn offer(&mut self, annotator: &str, max: usize) -> Result<Vec<VerificationTask>> {
        let profile = self
            .profiles
            .get(annotator)
            .ok_or_else(|| Error::not_found(format!("annotator {annotator}")))?
            .clone();
        if !profile.active {
            return Err(Error::Authorization(format!("annotator {annotator} is deactivated")));
        }
        if max == 0 {
            return Ok(Vec::new());
        }
        if self.gold_due(&profile) {
            let id = match self.pending_gold.get(annotator) {
                Some(id) => *id,
                None => {
                    let (pair, truth) = self.gold_pool[self.gold_cursor % self.gold_pool.len()].clone();
                    self.gold_cursor += 1;
                    let id = self.next_task_id;
                    self.next_task_id += 1;
                    self.tasks.insert(
                        id,
                        VerificationTask {
                            task_id: id,
                            pair,
                            state: TaskState::Assigned,
                            responses: Vec::new(),
                            consensus: None,
                            gold: true,
                            truth: Some(truth),
                            skipped_by: BTreeSet::new(),
                            held_by: [annotator.to_string()].into(),
                        },
                    );
                    self.pending_gold.insert(annotator.to_string(), id);
                    id
                }
            };
            return Ok(vec![self.tasks[&id].public()]);
        }
        Ok(self
            .tasks
            .values()
            .filter(|t| {
                !t.gold
                    && matches!(t.state, TaskState::Open | TaskState::Assigned)
                    && !t.answered_by(annotator)
                    && !t.skipped_by.contains(annotator)
            })
            .take(max)
            .map(VerificationTask::public)
            .collect())
    }

    /// Self-selection: the annotator declines a task and is not offered it again.
    pub fn skip(&mut self, annotator: &str, task_id: u64) -> Result<()> {
        let t = self.tasks.get_mut(&task_id).ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
        if t.gold {
            return Err(Error::Conflict("gold tasks cannot be skipped".into()));
        }
        t.skipped_by.insert(annotator.to_string());
        Ok(())
    }

    pub fn submit(&mut self, annotator: &str, task_id: u64, label: Label, timestamp: u64) -> Result<SubmitOutcome> {
        let profile = self
            .profiles
            .get(annotator)
            .ok_or_else(|| Error::not_found(format!("annotator {annotator}")))?;
        if !profile.active {
            return Err(Error::Authorization(format!("annotator {annotator} is deactivated")));
        }
        let t = self.tasks.get(&task_id).ok_or_else(|| Error::not_found(format!("task {task_id}")))?;
        if t.answered_by(annotator) {
            return Err(Error::Conflict(format!("{annotator} already answered task {task_id}")));
        }
        match t.state {
            TaskState::Resolved => return Err(Error::Conflict(format!("task {task_id} already resolved"))),
            TaskState::Expired => return Err(Error::Conflict(format!("task {task_id} expired"))),
            _ => {}
        }
        if t.gold && !t.held_by.contains(annotator) {
            return Err(Error::Authorization(format!("gold task {task_id} belongs to another annotator")));
        }
        let response = TaskResponse {
            annotator_id: annotator.to_string(),
            label,
            timestamp,
        };
        let params = self.params.clone();
        let p = self.profiles.get_mut(annotator).expect("checked");
        p.answered += 1;
        let t = self.tasks.get_mut(&task_id).expect("checked");
        t.responses.push(response);
        if t.gold {
            let truth = t.truth.expect("gold has truth");
            let correct = label == truth;
            t.state = TaskState::Resolved;
            t.consensus = Some(truth);
            self.pending_gold.remove(annotator);
            let before = self.profiles[annotator].active;
            let updated = update_reliability(&self.profiles[annotator], correct, &params);
            let deactivated = before && !updated.active;
            self.profiles.insert(annotator.to_string(), updated);
            return Ok(SubmitOutcome {
                task_id,
                resolution: Resolution::Resolved(truth),
                gold_correct: Some(correct),
                deactivated,
            });
        }
        let resolution = resolve(&self.tasks[&task_id], &self.profiles, &params);
        let t = self.tasks.get_mut(&task_id).expect("checked");
        match resolution {
            Resolution::Resolved(l) => {
                t.state = TaskState::Resolved;
                t.consensus = Some(l);
            }
            Resolution::Open => t.state = TaskState::Assigned,
        }
        Ok(SubmitOutcome {
            task_id,
            resolution,
            gold_correct: None,
            deactivated: false,
        })
    }

    /// Open tasks that cannot progress because nobody active can take them.
    pub fn alerts(&self) -> Vec<u64> {
        self.tasks
            .values()
            .filter(|t| !t.gold && matches!(t.state, TaskState::Open | TaskState::Assigned))
            .filter(|t| {
                !self
                    .profiles
                    .values()
                    .any(|p| p.active && !t.answered_by(&p.annotator_id) && !t.skipped_by.contains(&p.annotator_id))
            })
            .map(|t| t.task_id)
            .collect()
    }

    /// Consensus labels of resolved non-gold tasks.
    pub fn resolved(&self) -> Vec<(PairKey, Label)> {
        self.tasks
            .values()
            .filter(|t| !t.gold && t.state == TaskState::Resolved)
            .filter_map(|t| t.consensus.map(|l| (t.pair.clone(), l)))
            .collect()
    }

    pub fn open_tasks(&self) -> usize {
        self.tasks
            .values()
            .filter(|t| !t.gold && matches!(t.state, TaskState::Open | TaskState::Assigned))
            .count()
    }
}

/// How a simulated annotator behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnnotatorPolicy {
    /// Always answers the truth.
    Oracle,
    /// Answers the truth with the given probability.
    Accurate { accuracy: f64 },
    /// Always answers the opposite of the truth.
    AlwaysWrong,
    /// Declines every task.
    Skipper,
}

pub struct SimAnnotator {
    pub id: String,
    pub policy: AnnotatorPolicy,
    rng: crate::rng::SeededRng,
}

impl SimAnnotator {
    pub fn new(id: impl Into<String>, policy: AnnotatorPolicy, seed: u64) -> Self {
        let id = id.into();
        let rng = crate::rng::derived_rng(seed, &[crate::rng::hash_str(&id)]);
        Self { id, policy, rng }
    }

    /// `None` means the annotator declines.
    pub fn answer(&mut self, truth: Label) -> Option<Label> {
        use rand::Rng;
        let flip = |l: Label| match l {
            Label::Same => Label::Different,
            Label::Different => Label::Same,
            Label::Unsure => Label::Unsure,
        };
        match self.policy {
            AnnotatorPolicy::Oracle => Some(truth),
            AnnotatorPolicy::Accurate { accuracy } => Some(if self.rng.gen_bool(accuracy.clamp(0.0, 1.0)) { truth } else { flip(truth) }),
            AnnotatorPolicy::AlwaysWrong => Some(flip(truth)),
            AnnotatorPolicy::Skipper => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrowdRunReport {
    pub responses: usize,
    pub skips: usize,
    pub rounds: usize,
    pub deactivated: Vec<String>,
}

/// Drives simulated annotators round-robin until no task can progress.
/// `truth` answers a pair; it is consulted only to simulate answers.
pub fn simulate_crowd(
    crowd: &mut Crowd,
    annotators: &mut [SimAnnotator],
    truth: &dyn Fn(&PairKey) -> Label,
    mut clock: u64,
) -> Result<CrowdRunReport> {
    for a in annotators.iter() {
        crowd.register_annotator(&a.id);
    }
    let mut report = CrowdRunReport::default();
    loop {
        let mut progressed = false;
        report.rounds += 1;
        for a in annotators.iter_mut() {
            if !crowd.profiles[&a.id].active {
                continue;
            }
            let Some(task) = crowd.offer(&a.id, 1)?.into_iter().next() else { continue };
            match a.answer(truth(&task.pair)) {
                Some(label) => {
                    clock += 1;
                    let out = crowd.submit(&a.id, task.task_id, label, clock)?;
                    report.responses += 1;
                    if out.deactivated {
                        report.deactivated.push(a.id.clone());
                    }
                }
                None => {
                    if task.gold {
                        continue;
                    }
                    crowd.skip(&a.id, task.task_id)?;
                    report.skips += 1;
                }
            }
            progressed = true;
        }
        if !progressed {
            return Ok(report);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub cohort_id: String,
    pub members: BTreeSet<String>,
    /// Same-pairs that joined this cohort.
    pub provenance: Vec<PairKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub pair: PairKey,
    /// The cannot-link that the merge would have violated.
    pub violates: PairKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortPartition {
    pub cohorts: Vec<Cohort>,
    pub conflicts: Vec<Conflict>,
    pub cannot_link: BTreeSet<PairKey>,
}

impl CohortPartition {
    /// Image id to cohort id.
    pub fn membership(&self) -> BTreeMap<String, String> {
        self.cohorts
            .iter()
            .flat_map(|c| c.members.iter().map(move |m| (m.clone(), c.cohort_id.clone())))
            .collect()
    }

    pub fn same_cohort(&self, a: &str, b: &str) -> bool {
        let m = self.membership();
        matches!((m.get(a), m.get(b)), (Some(x), Some(y)) if x == y)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Union-find over same-edges. A merge that would put both ends of a
/// cannot-link into one cohort is refused and reported as a conflict.
/// Same-edges are processed in sorted order, so input order is irrelevant.
pub fn merge_cohorts(images: &[String], same: &[PairKey], different: &[PairKey]) -> CohortPartition {
    let mut ids: BTreeSet<String> = images.iter().cloned().collect();
    for (a, b) in same.iter().chain(different) {
        ids.insert(a.clone());
        ids.insert(b.clone());
    }
    let ids: Vec<String> = ids.into_iter().collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let cannot: BTreeSet<PairKey> = different.iter().map(|(a, b)| pair_key(a, b)).filter(|(a, b)| a != b).collect();
    let mut edges: Vec<PairKey> = same.iter().map(|(a, b)| pair_key(a, b)).collect();
    edges.sort();
    edges.dedup();

    let mut uf = UnionFind::new(ids.len());
    let mut members: Vec<BTreeSet<usize>> = (0..ids.len()).map(|i| [i].into()).collect();
    let mut provenance: Vec<Vec<PairKey>> = vec![Vec::new(); ids.len()];
    let mut conflicts = Vec::new();
    for edge in edges {
        let (ra, rb) = (uf.find(index[edge.0.as_str()]), uf.find(index[edge.1.as_str()]));
        if ra == rb {
            provenance[ra].push(edge);
            continue;
        }
        let violated = cannot.iter().find(|(x, y)| {
            let (ix, iy) = (index[x.as_str()], index[y.as_str()]);
            (members[ra].contains(&ix) && members[rb].contains(&iy)) || (members[ra].contains(&iy) && members[rb].contains(&ix))
        });
        if let Some(v) = violated {
            conflicts.push(Conflict {
                pair: edge,
                violates: v.clone(),
            });
            continue;
        }
        let (keep, gone) = if ra < rb { (ra, rb) } else { (rb, ra) };
        uf.parent[gone] = keep;
        let moved = std::mem::take(&mut members[gone]);
        members[keep].extend(moved);
        let moved = std::mem::take(&mut provenance[gone]);
        provenance[keep].extend(moved);
        provenance[keep].push(edge);
    }
    let mut cohorts: Vec<Cohort> = (0..ids.len())
        .filter(|&i| uf.find(i) == i)
        .map(|i| {
            let set: BTreeSet<String> = members[i].iter().map(|&j| ids[j].clone()).collect();
            let mut prov = provenance[i].clone();
            prov.sort();
            Cohort {
                cohort_id: format!("cohort-{}", set.iter().next().expect("nonempty")),
                members: set,
                provenance: prov,
            }
        })
        .collect();
    cohorts.sort_by(|a, b| a.cohort_id.cmp(&b.cohort_id));
    CohortPartition {
        cohorts,
        conflicts,
        cannot_link: cannot,
    }
}

/// Applies verified knowledge to a ranking: cohort-mates of the query move to
/// the top and cannot-linked candidates to the bottom; the rest keep order.
pub fn constrain_ranking(list: &RankedList, partition: &CohortPartition) -> RankedList {
    let membership = partition.membership();
    let own = membership.get(&list.query);
    let mut mates = Vec::new();
    let mut middle = Vec::new();
    let mut barred = Vec::new();
    for e in &list.entries {
        let c = membership.get(&e.candidate);
        if own.is_some() && c == own {
            mates.push(e.clone());
        } else if partition.cannot_link.contains(&pair_key(&list.query, &e.candidate)) {
            barred.push(e.clone());
        } else {
            middle.push(e.clone());
        }
    }
    let mut out = list.clone();
    out.entries = mates.into_iter().chain(middle).chain(barred).collect();
    out
}

/// Breadth-first connected components; used to cross-check union-find.
pub fn connected_components(images: &[String], edges: &[PairKey]) -> Vec<BTreeSet<String>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = images.iter().map(|i| (i.as_str(), Vec::new())).collect();
    for (a, b) in edges {
        adj.entry(a.as_str()).or_default().push(b.as_str());
        adj.entry(b.as_str()).or_default().push(a.as_str());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let keys: Vec<&str> = adj.keys().copied().collect();
    for start in keys {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            comp.insert(x.to_string());
            for &y in &adj[x] {
                if seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        out.push(comp);
    }
    out
}
