//! The transactional store behind the DEI.
//!
//! Every mutation is an [`Op`] applied to [`DeiState`] and then appended to
//! the transaction log before the call returns. Replaying the log over the
//! last snapshot rebuilds the state exactly. Writers serialize on one lock;
//! readers share it, so a reader never observes half of a commit.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sloop_core::ensemble::{reweight, EnsembleWeights, RankedEntry, RankedList};
use sloop_core::experiment::{IterationMetrics, METRICS_CSV_HEADER};
use sloop_core::feedback::{constrain_ranking, CohortPartition, Crowd, Label, PairKey, SubmitOutcome, VerificationTask};
use sloop_core::params::{CrowdParams, LEASE_TTL_SECS, SESSION_TTL_SECS};
use sloop_core::workflow::{validate_workflow, Executor, WorkflowDef, WorkflowState, INITIAL_STATE, TERMINAL_STATE};
use sloop_core::{imageio, Error, Result};

use crate::clock::{Clock, SystemClock};
use crate::txlog::{sha256_hex, write_atomic, BlobStore, Operation, TxLog};

/// The step whose work is held until every image of the species is featured.
pub const MATCH_STEP: &str = "match";
/// Capabilities beyond workflow step names.
pub const CAP_UPLOAD: &str = "upload";
pub const CAP_ANNOTATE: &str = "annotate";
pub const CAP_COORDINATE: &str = "coordinate";

#[derive(Debug, Clone)]
pub struct DeiConfig {
    /// None keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub lease_ttl: u64,
    pub session_ttl: u64,
    pub fsync: bool,
    pub crowd: CrowdParams,
    /// Take a snapshot and empty the log after this many commits.
    pub snapshot_every: Option<u64>,
}

impl Default for DeiConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            lease_ttl: LEASE_TTL_SECS,
            session_ttl: SESSION_TTL_SECS,
            fsync: true,
            crowd: CrowdParams::default(),
            snapshot_every: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetadata {
    /// Requested id; derived from the blob hash when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<String>,
    #[serde(default)]
    pub fiducials: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub blob_ref: String,
    pub state: String,
    pub species: String,
    pub metadata: ImageMetadata,
    pub fiducials: Vec<[f64; 2]>,
    pub width: usize,
    pub height: usize,
    pub history: Vec<WorkflowState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_set: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub work_id: u64,
    pub image_id: String,
    pub step: String,
    pub claimed_by: Option<String>,
    pub lease_expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub name: String,
    pub secret_sha256: String,
    pub capabilities: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub principal: String,
    pub capabilities: BTreeSet<String>,
    pub expires: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub image_id: String,
    pub from: String,
    pub to: String,
    /// Disambiguates parallel edges; optional otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskOp {
    Register { annotator: String },
    Gold { pair: PairKey, label: Label },
    Create { pair: PairKey },
    Offer { annotator: String, max: usize },
    Submit { annotator: String, task_id: u64, label: Label, at: u64 },
    Skip { annotator: String, task_id: u64 },
    Expire { task_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Workflow { def: WorkflowDef },
    Principal { principal: Principal },
    Session { session: Session },
    Image { record: ImageRecord },
    Lease { session_id: String, work_ids: Vec<u64>, expiry: u64 },
    Transition { image_id: String, from: String, to: String, step: String, payload: Value, at: u64, actor: String },
    Scores { query: String, ranking_ref: String },
    Weights { weights: EnsembleWeights },
    Task { task: TaskOp },
    Cohorts { partition: CohortPartition },
    Metrics { row: IterationMetrics },
}

impl Op {
    pub fn operation(&self) -> Operation {
        match self {
            Op::Workflow { .. } | Op::Principal { .. } | Op::Session { .. } | Op::Image { .. } | Op::Lease { .. } => Operation::Upsert,
            Op::Transition { .. } => Operation::Transition,
            Op::Scores { .. } | Op::Weights { .. } => Operation::ScoreWrite,
            Op::Task { .. } => Operation::TaskWrite,
            Op::Cohorts { .. } | Op::Metrics { .. } => Operation::Merge,
        }
    }
}

#[derive(Debug)]
enum Outcome {
    None,
    State(WorkflowState),
    Tasks(Vec<VerificationTask>),
    Task(u64),
    Submitted(SubmitOutcome),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeiState {
    pub seq: u64,
    pub workflows: BTreeMap<String, WorkflowDef>,
    pub principals: BTreeMap<String, Principal>,
    pub sessions: BTreeMap<String, Session>,
    pub images: BTreeMap<String, ImageRecord>,
    pub work: BTreeMap<u64, WorkItem>,
    pub next_work_id: u64,
    /// Query image to the blob holding its ranking.
    pub rankings: BTreeMap<String, String>,
    pub crowd: Crowd,
    pub cohorts: CohortPartition,
    pub weights: Option<EnsembleWeights>,
    pub metrics: Vec<IterationMetrics>,
}

fn payload_field<'a>(payload: &'a Value, key: &str, schema: &str) -> Result<&'a Value> {
    payload
        .get(key)
        .ok_or_else(|| Error::validation(format!("{schema} payload needs field {key}")))
}

fn parse_fiducials(v: &Value, width: usize, height: usize) -> Result<Vec<[f64; 2]>> {
    let pts: Vec<[f64; 2]> = serde_json::from_value(v.clone()).map_err(|e| Error::validation(format!("fiducials: {e}")))?;
    for p in &pts {
        if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f64 && p[1] < height as f64) {
            return Err(Error::validation(format!("fiducial ({}, {}) outside {width}x{height}", p[0], p[1])));
        }
    }
    Ok(pts)
}

impl DeiState {
    fn workflow(&self, name: &str) -> Result<&WorkflowDef> {
        self.workflows.get(name).ok_or_else(|| Error::not_found(format!("workflow {name}")))
    }

    fn image(&self, id: &str) -> Result<&ImageRecord> {
        self.images.get(id).ok_or_else(|| Error::not_found(format!("image {id}")))
    }

    fn spawn_work(&mut self, image_id: &str, def: &WorkflowDef, state: &str) {
        for e in def.edges.iter().filter(|e| e.from == state && e.executor == Executor::Machine && e.to != e.from) {
            self.next_work_id += 1;
            self.work.insert(
                self.next_work_id,
                WorkItem {
                    work_id: self.next_work_id,
                    image_id: image_id.to_string(),
                    step: e.step.clone(),
                    claimed_by: None,
                    lease_expiry: 0,
                },
            );
        }
    }

    /// Checks a transition payload against its edge schema and returns the
    /// record as it will look afterwards.
    fn transitioned(&self, rec: &ImageRecord, schema: &str, payload: &Value) -> Result<ImageRecord> {
        let mut next = rec.clone();
        match schema {
            "fiducials" => {
                next.fiducials = parse_fiducials(payload_field(payload, "fiducials", schema)?, rec.width, rec.height)?;
            }
            "feature_set" => {
                let fs = payload_field(payload, "feature_set", schema)?;
                if fs.get("image_id").and_then(Value::as_str) != Some(rec.image_id.as_str()) {
                    return Err(Error::validation("feature_set must name the image it describes"));
                }
                next.feature_set = Some(fs.clone());
            }
            "match_scores" => {
                let r = payload_field(payload, "ranking_ref", schema)?;
                if r.as_str() != self.rankings.get(&rec.image_id).map(String::as_str) {
                    return Err(Error::validation("match_scores must reference the ranking stored for the image"));
                }
            }
            "identity" => {
                let c = payload_field(payload, "cohort_id", schema)?
                    .as_str()
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::validation("cohort_id must be a non-empty string"))?;
                next.identity = Some(c.to_string());
            }
            _ => {
                if !(payload.is_object() || payload.is_null()) {
                    return Err(Error::validation(format!("{schema} payload must be an object")));
                }
            }
        }
        Ok(next)
    }

    /// Applies `op`. On error nothing has changed.
    fn apply(&mut self, op: &Op) -> Result<Outcome> {
        match op {
            Op::Workflow { def } => {
                let v = validate_workflow(def);
                if !v.is_empty() {
                    return Err(Error::validation(v.join("; ")));
                }
                self.workflows.insert(def.name.clone(), def.clone());
            }
            Op::Principal { principal } => {
                self.principals.insert(principal.name.clone(), principal.clone());
            }
            Op::Session { session } => {
                self.sessions.insert(session.session_id.clone(), session.clone());
            }
            Op::Image { record } => {
                if self.images.contains_key(&record.image_id) {
                    return Err(Error::Conflict(format!("image {} exists", record.image_id)));
                }
                let def = self.workflow(&record.species)?.clone();
                if record.state != INITIAL_STATE {
                    return Err(Error::validation("new images start raw"));
                }
                self.images.insert(record.image_id.clone(), record.clone());
                self.spawn_work(&record.image_id, &def, INITIAL_STATE);
            }
            Op::Lease { session_id, work_ids, expiry } => {
                if let Some(w) = work_ids.iter().find(|w| !self.work.contains_key(w)) {
                    return Err(Error::not_found(format!("work item {w}")));
                }
                for w in work_ids {
                    let item = self.work.get_mut(w).expect("checked above");
                    item.claimed_by = Some(session_id.clone());
                    item.lease_expiry = *expiry;
                }
            }
            Op::Transition { image_id, from, to, step, payload, at, actor } => {
                let rec = self.image(image_id)?;
                let def = self.workflow(&rec.species)?.clone();
                let edge = def.edge(from, step)?;
                if &edge.to != to {
                    return Err(Error::validation(format!("step {step} leads to {}, not {to}", edge.to)));
                }
                if &rec.state != from {
                    return Err(Error::Conflict(format!("image {image_id} is {}, not {from}", rec.state)));
                }
                let mut next = self.transitioned(rec, &edge.payload_schema, payload)?;
                let entered = WorkflowState {
                    state: to.clone(),
                    entered_at: (*at).max(rec.history.last().map_or(0, |h| h.entered_at)),
                    actor: actor.clone(),
                };
                next.state = to.clone();
                next.history.push(entered.clone());
                self.images.insert(image_id.clone(), next);
                self.work.retain(|_, w| !(w.image_id == *image_id && w.step == *step));
                if from != to {
                    self.work.retain(|_, w| w.image_id != *image_id);
                    self.spawn_work(image_id, &def, to);
                }
                return Ok(Outcome::State(entered));
            }
            Op::Scores { query, ranking_ref } => {
                self.image(query)?;
                self.rankings.insert(query.clone(), ranking_ref.clone());
            }
            Op::Weights { weights } => {
                self.weights = Some(weights.clone());
            }
            Op::Task { task } => {
                let crowd = &mut self.crowd;
                return Ok(match task {
                    TaskOp::Register { annotator } => {
                        crowd.register_annotator(annotator);
                        Outcome::None
                    }
                    TaskOp::Gold { pair, label } => {
                        crowd.add_gold(pair.clone(), *label)?;
                        Outcome::None
                    }
                    TaskOp::Create { pair } => {
                        if !self.images.contains_key(&pair.0) || !self.images.contains_key(&pair.1) {
                            return Err(Error::not_found(format!("pair {} {}", pair.0, pair.1)));
                        }
                        Outcome::Task(crowd.create_task(pair.clone())?)
                    }
                    TaskOp::Offer { annotator, max } => Outcome::Tasks(crowd.offer(annotator, *max)?),
                    TaskOp::Submit { annotator, task_id, label, at } => Outcome::Submitted(crowd.submit(annotator, *task_id, *label, *at)?),
                    TaskOp::Skip { annotator, task_id } => {
                        crowd.skip(annotator, *task_id)?;
                        Outcome::None
                    }
                    TaskOp::Expire { task_id } => {
                        crowd.expire_task(*task_id)?;
                        Outcome::None
                    }
                });
            }
            Op::Cohorts { partition } => {
                self.cohorts = partition.clone();
            }
            Op::Metrics { row } => {
                self.metrics.push(row.clone());
            }
        }
        Ok(Outcome::None)
    }

    /// States from which the `match` edge of `def` is still ahead.
    fn upstream_of_match(def: &WorkflowDef) -> BTreeSet<String> {
        let Some(edge) = def.edge_by_step(MATCH_STEP) else { return BTreeSet::new() };
        let mut rev: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &def.edges {
            rev.entry(&e.to).or_default().push(&e.from);
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([edge.from.as_str()]);
        while let Some(s) = queue.pop_front() {
            for &p in rev.get(s).into_iter().flatten() {
                if p != edge.from && seen.insert(p.to_string()) {
                    queue.push_back(p);
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub rows: Vec<IterationMetrics>,
    pub images_total: usize,
    pub images_indexed: usize,
    pub by_state: BTreeMap<String, usize>,
    pub tasks_total: usize,
    pub tasks_open: usize,
    pub conflicts: usize,
}

impl MetricsView {
    pub fn csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

struct Inner {
    state: DeiState,
    log: TxLog,
    poisoned: bool,
    since_snapshot: u64,
}

pub struct Dei {
    config: DeiConfig,
    clock: Arc<dyn Clock>,
    blobs: BlobStore,
    inner: RwLock<Inner>,
    ranking_cache: Mutex<HashMap<String, Arc<RankedList>>>,
}

const LOG_FILE: &str = "txlog.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

impl Dei {
    /// Opens the store, replaying the snapshot and log in `data_dir`.
    pub fn open(config: DeiConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let (state, log, blobs) = match &config.data_dir {
            None => (DeiState::default(), TxLog::memory(), BlobStore::memory()),
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let blobs = BlobStore::dir(dir.join("blobs"), config.fsync)?;
                let snap = dir.join(SNAPSHOT_FILE);
                let mut state: DeiState = if snap.exists() {
                    serde_json::from_slice(&std::fs::read(&snap)?).map_err(|e| Error::Corrupt(format!("snapshot: {e}")))?
                } else {
                    DeiState {
                        crowd: Crowd::new(config.crowd.clone()),
                        ..DeiState::default()
                    }
                };
                let (mut log, entries) = TxLog::open(&dir.join(LOG_FILE), config.fsync)?;
                let base_seq = state.seq;
                for e in entries.iter().filter(|e| e.seq > base_seq) {
                    let op: Op = serde_json::from_str(e.payload.get()).map_err(|err| Error::Corrupt(format!("log seq {}: {err}", e.seq)))?;
                    state.apply(&op).map_err(|err| Error::Corrupt(format!("log seq {} does not replay: {err}", e.seq)))?;
                    state.seq = e.seq;
                }
                log.set_last_seq(state.seq);
                (state, log, blobs)
            }
        };
        let mut state = state;
        if config.data_dir.is_none() {
            state.crowd = Crowd::new(config.crowd.clone());
        }
        Ok(Self {
            config,
            clock,
            blobs,
            inner: RwLock::new(Inner {
                state,
                log,
                poisoned: false,
                since_snapshot: 0,
            }),
            ranking_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn in_memory() -> Self {
        Self::open(
            DeiConfig {
                fsync: false,
                ..DeiConfig::default()
            },
            Arc::new(SystemClock),
        )
        .expect("in-memory store cannot fail to open")
    }

    pub fn config(&self) -> &DeiConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    fn commit_locked(&self, inner: &mut Inner, op: Op) -> Result<Outcome> {
        if inner.poisoned {
            return Err(Error::Unavailable("store needs to be reopened after a log write failure".into()));
        }
        let out = inner.state.apply(&op)?;
        match inner.log.append(op.operation(), &op) {
            Ok(e) => inner.state.seq = e.seq,
            Err(e) => {
                inner.poisoned = true;
                return Err(e);
            }
        }
        inner.since_snapshot += 1;
        if self.config.snapshot_every.is_some_and(|n| inner.since_snapshot >= n) {
            self.snapshot_locked(inner)?;
        }
        Ok(out)
    }

    fn commit(&self, op: Op) -> Result<Outcome> {
        let mut inner = self.inner.write();
        self.commit_locked(&mut inner, op)
    }

    fn snapshot_locked(&self, inner: &mut Inner) -> Result<()> {
        if let Some(dir) = &self.config.data_dir {
            write_atomic(&dir.join(SNAPSHOT_FILE), &serde_json::to_vec(&inner.state)?, self.config.fsync)?;
            inner.log.truncate()?;
        }
        inner.since_snapshot = 0;
        Ok(())
    }

    /// Writes the whole state and empties the log.
    pub fn snapshot(&self) -> Result<()> {
        let mut inner = self.inner.write();
        self.snapshot_locked(&mut inner)
    }

    /// A copy of the committed state.
    pub fn state(&self) -> DeiState {
        self.inner.read().state.clone()
    }

    /// SHA-256 of the serialized state.
    pub fn state_digest(&self) -> String {
        let inner = self.inner.read();
        sha256_hex(&serde_json::to_vec(&inner.state).expect("state serializes"))
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.read().state.seq
    }

    // ---- principals and sessions

    pub fn register_workflow(&self, def: WorkflowDef) -> Result<()> {
        self.commit(Op::Workflow { def }).map(|_| ())
    }

    pub fn workflow(&self, name: &str) -> Result<WorkflowDef> {
        self.inner.read().state.workflow(name).cloned()
    }

    pub fn workflows(&self) -> Vec<String> {
        self.inner.read().state.workflows.keys().cloned().collect()
    }

    pub fn add_principal(&self, name: &str, secret: &str, capabilities: &[&str]) -> Result<()> {
        self.commit(Op::Principal {
            principal: Principal {
                name: name.to_string(),
                secret_sha256: sha256_hex(secret.as_bytes()),
                capabilities: capabilities.iter().map(|c| c.to_string()).collect(),
            },
        })
        .map(|_| ())
    }

    /// Grants a session holding the requested capabilities the principal has.
    pub fn authenticate(&self, principal: &str, secret: &str, requested: &[String]) -> Result<Session> {
        let mut inner = self.inner.write();
        let p = inner
            .state
            .principals
            .get(principal)
            .filter(|p| p.secret_sha256 == sha256_hex(secret.as_bytes()))
            .ok_or_else(|| Error::Authentication("unknown principal or bad secret".into()))?;
        let capabilities: BTreeSet<String> = requested.iter().filter(|c| p.capabilities.contains(*c)).cloned().collect();
        if capabilities.is_empty() {
            return Err(Error::Authorization(format!("{principal} holds none of {requested:?}")));
        }
        let mut token = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut token);
        let session = Session {
            session_id: hex::encode(token),
            principal: principal.to_string(),
            capabilities,
            expires: self.clock.now() + self.config.session_ttl,
        };
        self.commit_locked(&mut inner, Op::Session { session: session.clone() })?;
        Ok(session)
    }

    fn session_in(&self, state: &DeiState, token: &str) -> Result<Session> {
        state
            .sessions
            .get(token)
            .filter(|s| s.expires > self.clock.now())
            .cloned()
            .ok_or_else(|| Error::Authentication("missing or expired session".into()))
    }

    pub fn session(&self, token: &str) -> Result<Session> {
        self.session_in(&self.inner.read().state, token)
    }

    fn require_in(&self, state: &DeiState, token: &str, cap: &str) -> Result<Session> {
        let s = self.session_in(state, token)?;
        if !s.capabilities.contains(cap) {
            return Err(Error::Authorization(format!("session lacks {cap}")));
        }
        Ok(s)
    }

    pub fn require(&self, token: &str, cap: &str) -> Result<Session> {
        self.require_in(&self.inner.read().state, token, cap)
    }

    // ---- images

    /// Stores an image blob and creates its record in the initial state.
    /// Re-uploading the same bytes under the same id returns that id.
    pub fn put_image(&self, token: &str, blob: &[u8], species: &str, metadata: ImageMetadata) -> Result<String> {
        self.require(token, CAP_UPLOAD)?;
        let grid = imageio::decode(blob)?;
        let blob_ref = self.blobs.put(blob)?;
        let image_id = metadata.image_id.clone().unwrap_or_else(|| format!("img-{}", &blob_ref[..16]));
        if image_id.is_empty() || image_id.contains('/') {
            return Err(Error::validation(format!("bad image id {image_id:?}")));
        }
        let fiducials = parse_fiducials(&serde_json::to_value(&metadata.fiducials)?, grid.width(), grid.height())?;
        let mut inner = self.inner.write();
        if let Some(existing) = inner.state.images.get(&image_id) {
            return if existing.blob_ref == blob_ref {
                Ok(image_id)
            } else {
                Err(Error::Conflict(format!("image {image_id} exists with different pixels")))
            };
        }
        let actor = self.session_in(&inner.state, token)?.principal;
        let record = ImageRecord {
            image_id: image_id.clone(),
            blob_ref,
            state: INITIAL_STATE.to_string(),
            species: species.to_string(),
            metadata,
            fiducials,
            width: grid.width(),
            height: grid.height(),
            history: vec![WorkflowState {
                state: INITIAL_STATE.to_string(),
                entered_at: self.clock.now(),
                actor,
            }],
            feature_set: None,
            identity: None,
        };
        self.commit_locked(&mut inner, Op::Image { record })?;
        Ok(image_id)
    }

    pub fn get_image(&self, id: &str) -> Result<ImageRecord> {
        self.inner.read().state.image(id).cloned()
    }

    pub fn get_blob(&self, id: &str) -> Result<Arc<Vec<u8>>> {
        let r = self.get_image(id)?;
        self.blobs.get(&r.blob_ref)
    }

    pub fn list_images(&self, species: Option<&str>) -> Vec<ImageRecord> {
        self.inner
            .read()
            .state
            .images
            .values()
            .filter(|r| species.is_none_or(|s| r.species == s))
            .cloned()
            .collect()
    }

    // ---- work

    /// Leases up to `max` available items whose step the session may run.
    pub fn poll_work(&self, token: &str, max: usize) -> Result<Vec<WorkItem>> {
        let mut inner = self.inner.write();
        let session = self.session_in(&inner.state, token)?;
        let now = self.clock.now();
        let state = &inner.state;
        let mut held: BTreeMap<&str, bool> = BTreeMap::new();
        let mut picked = Vec::new();
        for item in state.work.values() {
            if picked.len() >= max {
                break;
            }
            if !session.capabilities.contains(&item.step) || (item.claimed_by.is_some() && item.lease_expiry > now) {
                continue;
            }
            if item.step == MATCH_STEP {
                let Ok(rec) = state.image(&item.image_id) else { continue };
                let blocked = *held.entry(rec.species.as_str()).or_insert_with(|| {
                    let upstream = state.workflows.get(&rec.species).map(DeiState::upstream_of_match).unwrap_or_default();
                    state.images.values().any(|r| r.species == rec.species && upstream.contains(&r.state))
                });
                if blocked {
                    continue;
                }
            }
            picked.push(item.work_id);
        }
        if picked.is_empty() {
            return Ok(Vec::new());
        }
        let expiry = now + self.config.lease_ttl;
        self.commit_locked(
            &mut inner,
            Op::Lease {
                session_id: session.session_id,
                work_ids: picked.clone(),
                expiry,
            },
        )?;
        Ok(picked.iter().map(|w| inner.state.work[w].clone()).collect())
    }

    pub fn work_items(&self) -> Vec<WorkItem> {
        self.inner.read().state.work.values().cloned().collect()
    }

    /// Moves an image along one workflow edge.
    pub fn commit_transition(&self, token: &str, req: &TransitionRequest) -> Result<WorkflowState> {
        let mut inner = self.inner.write();
        let session = self.session_in(&inner.state, token)?;
        let rec = inner.state.image(&req.image_id)?;
        let def = inner.state.workflow(&rec.species)?;
        let step = match &req.step {
            Some(s) => s.clone(),
            None => def
                .edges
                .iter()
                .find(|e| e.from == req.from && e.to == req.to)
                .map(|e| e.step.clone())
                .ok_or_else(|| Error::validation(format!("no edge {} -> {}", req.from, req.to)))?,
        };
        if !session.capabilities.contains(&step) {
            return Err(Error::Authorization(format!("session lacks {step}")));
        }
        let op = Op::Transition {
            image_id: req.image_id.clone(),
            from: req.from.clone(),
            to: req.to.clone(),
            step,
            payload: req.payload.clone(),
            at: self.clock.now(),
            actor: session.principal,
        };
        match self.commit_locked(&mut inner, op)? {
            Outcome::State(s) => Ok(s),
            other => unreachable!("transition yielded {other:?}"),
        }
    }

    // ---- scores

    /// Stores the base ranking of one query image and returns its reference.
    pub fn put_scores(&self, token: &str, ranking: &RankedList) -> Result<String> {
        self.require(token, MATCH_STEP)?;
        self.get_image(&ranking.query)?;
        let bytes = serde_json::to_vec(ranking)?;
        let r = self.blobs.put(&bytes)?;
        self.commit(Op::Scores {
            query: ranking.query.clone(),
            ranking_ref: r.clone(),
        })?;
        self.ranking_cache.lock().insert(ranking.query.clone(), Arc::new(ranking.clone()));
        Ok(r)
    }

    /// The stored cascade output for `id`, if it has been matched.
    pub fn base_ranking(&self, id: &str) -> Result<Option<Arc<RankedList>>> {
        let r = {
            let inner = self.inner.read();
            inner.state.image(id)?;
            inner.state.rankings.get(id).cloned()
        };
        let Some(r) = r else { return Ok(None) };
        if let Some(l) = self.ranking_cache.lock().get(id) {
            return Ok(Some(l.clone()));
        }
        let list: Arc<RankedList> = Arc::new(serde_json::from_slice(&self.blobs.get(&r)?)?);
        self.ranking_cache.lock().insert(id.to_string(), list.clone());
        Ok(Some(list))
    }

    /// Top `k` candidates for `id` under the current weights and cohorts,
    /// or in stored order when `base` is set.
    pub fn get_rankings(&self, id: &str, k: Option<usize>, base: bool) -> Result<Vec<RankedEntry>> {
        let Some(list) = self.base_ranking(id)? else { return Ok(Vec::new()) };
        let list = if base {
            list.as_ref().clone()
        } else {
            let inner = self.inner.read();
            let w = inner.state.weights.clone();
            let re = match w {
                Some(w) => reweight(&list, &w),
                None => list.as_ref().clone(),
            };
            constrain_ranking(&re, &inner.state.cohorts)
        };
        let k = k.unwrap_or(list.entries.len());
        Ok(list.entries.into_iter().take(k).collect())
    }

    pub fn put_weights(&self, token: &str, weights: EnsembleWeights) -> Result<()> {
        self.require(token, CAP_COORDINATE)?;
        self.commit(Op::Weights { weights }).map(|_| ())
    }

    pub fn weights(&self) -> Option<EnsembleWeights> {
        self.inner.read().state.weights.clone()
    }

    // ---- verification tasks

    pub fn add_gold(&self, token: &str, pair: PairKey, label: Label) -> Result<()> {
        self.require(token, CAP_COORDINATE)?;
        self.commit(Op::Task {
            task: TaskOp::Gold { pair, label },
        })
        .map(|_| ())
    }

    pub fn create_task(&self, token: &str, pair: PairKey) -> Result<u64> {
        self.require(token, CAP_COORDINATE)?;
        match self.commit(Op::Task {
            task: TaskOp::Create { pair },
        })? {
            Outcome::Task(id) => Ok(id),
            other => unreachable!("create yielded {other:?}"),
        }
    }

    pub fn expire_task(&self, token: &str, task_id: u64) -> Result<()> {
        self.require(token, CAP_COORDINATE)?;
        self.commit(Op::Task {
            task: TaskOp::Expire { task_id },
        })
        .map(|_| ())
    }

    /// Hands `annotator` up to `max` tasks, registering them on first contact.
    pub fn get_tasks(&self, token: &str, annotator: &str, max: usize) -> Result<Vec<VerificationTask>> {
        let mut inner = self.inner.write();
        self.require_in(&inner.state, token, CAP_ANNOTATE)?;
        if !inner.state.crowd.profiles.contains_key(annotator) {
            self.commit_locked(
                &mut inner,
                Op::Task {
                    task: TaskOp::Register {
                        annotator: annotator.to_string(),
                    },
                },
            )?;
        }
        match self.commit_locked(
            &mut inner,
            Op::Task {
                task: TaskOp::Offer {
                    annotator: annotator.to_string(),
                    max,
                },
            },
        )? {
            Outcome::Tasks(t) => Ok(t.iter().map(VerificationTask::public).collect()),
            other => unreachable!("offer yielded {other:?}"),
        }
    }

    pub fn submit_response(&self, token: &str, task_id: u64, annotator: &str, label: Label) -> Result<SubmitOutcome> {
        self.require(token, CAP_ANNOTATE)?;
        match self.commit(Op::Task {
            task: TaskOp::Submit {
                annotator: annotator.to_string(),
                task_id,
                label,
                at: self.clock.now(),
            },
        })? {
            Outcome::Submitted(s) => Ok(s),
            other => unreachable!("submit yielded {other:?}"),
        }
    }

    pub fn skip_task(&self, token: &str, task_id: u64, annotator: &str) -> Result<()> {
        self.require(token, CAP_ANNOTATE)?;
        self.commit(Op::Task {
            task: TaskOp::Skip {
                annotator: annotator.to_string(),
                task_id,
            },
        })
        .map(|_| ())
    }

    pub fn task(&self, task_id: u64) -> Result<VerificationTask> {
        self.inner
            .read()
            .state
            .crowd
            .tasks
            .get(&task_id)
            .map(VerificationTask::public)
            .ok_or_else(|| Error::not_found(format!("task {task_id}")))
    }

    /// Non-gold tasks, without gold answers.
    pub fn list_tasks(&self) -> Vec<VerificationTask> {
        self.inner
            .read()
            .state
            .crowd
            .tasks
            .values()
            .filter(|t| !t.gold)
            .map(VerificationTask::public)
            .collect()
    }

    pub fn crowd(&self) -> Crowd {
        self.inner.read().state.crowd.clone()
    }

    // ---- cohorts and metrics

    pub fn put_cohorts(&self, token: &str, partition: CohortPartition) -> Result<()> {
        self.require(token, CAP_COORDINATE)?;
        self.commit(Op::Cohorts { partition }).map(|_| ())
    }

    pub fn cohorts(&self) -> CohortPartition {
        self.inner.read().state.cohorts.clone()
    }

    pub fn push_metrics(&self, token: &str, row: IterationMetrics) -> Result<()> {
        self.require(token, CAP_COORDINATE)?;
        self.commit(Op::Metrics { row }).map(|_| ())
    }

    pub fn metrics(&self) -> MetricsView {
        let inner = self.inner.read();
        let s = &inner.state;
        let mut by_state = BTreeMap::new();
        for r in s.images.values() {
            *by_state.entry(r.state.clone()).or_insert(0) += 1;
        }
        let tasks: Vec<&VerificationTask> = s.crowd.tasks.values().filter(|t| !t.gold).collect();
        MetricsView {
            rows: s.metrics.clone(),
            images_total: s.images.len(),
            images_indexed: by_state.get(TERMINAL_STATE).copied().unwrap_or(0),
            by_state,
            tasks_total: tasks.len(),
            tasks_open: tasks.iter().filter(|t| t.consensus.is_none() && matches!(t.state, sloop_core::feedback::TaskState::Open | sloop_core::feedback::TaskState::Assigned)).count(),
            conflicts: s.cohorts.conflicts.len(),
        }
    }
}
