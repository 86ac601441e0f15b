//! Drives relevance-feedback rounds against a DEI: selects pairs, publishes
//! verification tasks, gathers consensus, and writes back weights, cohorts
//! and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::Rng;
use serde_json::json;
use sloop_core::ensemble::{EnsembleWeights, RankedList};
use sloop_core::experiment::{AnnotatorMode, Evaluation, FeedbackConfig, FeedbackState, IterationMetrics};
use sloop_core::feedback::{pair_key, AnnotatorPolicy, CrowdRunReport, Label, PairKey, SimAnnotator};
use sloop_core::matchers::classical::MethodId;
use sloop_core::rng::{derive, derived_rng};
use sloop_core::workflow::Executor;
use sloop_core::{Error, Result};

use crate::api::DeiApi;
use crate::store::TransitionRequest;

/// Number of gold pairs seeded for simulated crowds.
pub const GOLD_PAIRS: usize = 20;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub species: String,
    pub feedback: FeedbackConfig,
    /// How often to look at task state when waiting on live annotators.
    pub live_poll: Duration,
    /// Give up waiting on live annotators after this long; None waits forever.
    pub live_timeout: Option<Duration>,
}

impl CoordinatorConfig {
    pub fn new(species: &str, feedback: FeedbackConfig) -> Self {
        Self {
            species: species.into(),
            feedback,
            live_poll: Duration::from_secs(2),
            live_timeout: None,
        }
    }
}

pub struct Coordinator<'a, A: DeiApi + ?Sized> {
    api: &'a A,
    token: String,
    config: CoordinatorConfig,
    truth: Option<&'a BTreeMap<String, usize>>,
}

fn truth_label(truth: &BTreeMap<String, usize>, p: &PairKey) -> Label {
    match (truth.get(&p.0), truth.get(&p.1)) {
        (Some(a), Some(b)) if a == b => Label::Same,
        (Some(_), Some(_)) => Label::Different,
        _ => Label::Unsure,
    }
}

/// Round-robin of simulated annotators through the task API, one task per
/// turn, until a full pass makes no progress.
pub fn drive_annotators<A: DeiApi + ?Sized>(
    api: &A,
    token: &str,
    annotators: &mut [SimAnnotator],
    truth: &dyn Fn(&PairKey) -> Label,
) -> Result<CrowdRunReport> {
    let mut report = CrowdRunReport::default();
    loop {
        let mut progressed = false;
        report.rounds += 1;
        for a in annotators.iter_mut() {
            if report.deactivated.contains(&a.id) {
                continue;
            }
            let offered = match api.get_tasks(token, &a.id, 1) {
                Err(Error::Authorization(_)) => {
                    report.deactivated.push(a.id.clone());
                    continue;
                }
                r => r?,
            };
            let Some(task) = offered.into_iter().next() else { continue };
            match a.answer(truth(&task.pair)) {
                Some(label) => {
                    let out = api.submit_response(token, task.task_id, &a.id, label)?;
                    report.responses += 1;
                    if out.deactivated {
                        report.deactivated.push(a.id.clone());
                    }
                }
                None => {
                    if task.gold {
                        continue;
                    }
                    api.skip_task(token, task.task_id, &a.id)?;
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

/// Methods scored beyond the first cascade stage.
fn expensive_calls(lists: &[RankedList]) -> usize {
    lists
        .iter()
        .flat_map(|l| l.stages.iter().skip(1))
        .map(|s| s.scored)
        .sum()
}

impl<'a, A: DeiApi + ?Sized> Coordinator<'a, A> {
    pub fn new(api: &'a A, token: String, config: CoordinatorConfig, truth: Option<&'a BTreeMap<String, usize>>) -> Self {
        Self { api, token, config, truth }
    }

    fn base_lists(&self) -> Result<Vec<RankedList>> {
        let images = self.api.list_images(Some(&self.config.species))?;
        let mut lists = Vec::new();
        for r in images {
            let l = self.api.rankings(&r.image_id, None, true)?;
            if !l.stages.is_empty() {
                lists.push(l);
            }
        }
        Ok(lists)
    }

    /// Feedback state rebuilt from what the DEI holds.
    pub fn load_state(&self) -> Result<FeedbackState> {
        let base = self.base_lists()?;
        let methods: BTreeSet<MethodId> = base.iter().flat_map(|l| l.stages.iter().map(|s| s.method)).collect();
        let weights = match self.api.weights()? {
            Some(w) => w,
            None => EnsembleWeights::uniform(&methods.into_iter().collect::<Vec<_>>())?,
        };
        let mut st = FeedbackState::new(base, weights);
        for t in self.api.list_tasks()? {
            if let Some(l @ (Label::Same | Label::Different)) = t.consensus {
                st.verified.insert(t.pair.clone(), l);
            }
        }
        let cohorts = self.api.cohorts()?;
        if !cohorts.cohorts.is_empty() {
            st.partition = cohorts;
        }
        Ok(st)
    }

    fn row(&self, iteration: usize, st: &FeedbackState, pairs_verified: usize, calls: usize) -> Result<IterationMetrics> {
        match self.truth {
            Some(truth) => Evaluation { truth }.metrics(iteration, st, pairs_verified, calls),
            None => Ok(IterationMetrics {
                iteration,
                auc: None,
                recall_at_1: None,
                recall_at_5: None,
                pairs_verified,
                expensive_calls: calls,
                conflicts: st.partition.conflicts.len(),
                weights: st.weights.as_map().clone(),
            }),
        }
    }

    /// Publishes initial weights and the iteration-0 metrics row.
    pub fn baseline(&self) -> Result<IterationMetrics> {
        let st = self.load_state()?;
        if self.api.weights()?.is_none() {
            self.api.put_weights(&self.token, &st.weights)?;
        }
        let row = self.row(0, &st, 0, expensive_calls(&st.base))?;
        self.api.push_metrics(&self.token, &row)?;
        Ok(row)
    }

    fn seed_gold(&self, truth: &BTreeMap<String, usize>) -> Result<()> {
        let ids: Vec<&String> = truth.keys().collect();
        let mut r = derived_rng(self.config.feedback.seed, &[0x676f_6c64]);
        for _ in 0..GOLD_PAIRS.min(ids.len() * ids.len()) {
            let a = ids[r.gen_range(0..ids.len())];
            let b = ids[r.gen_range(0..ids.len())];
            if a != b {
                let p = pair_key(a, b);
                self.api.add_gold(&self.token, &p, truth_label(truth, &p))?;
            }
        }
        Ok(())
    }

    fn gather(&self, task_ids: &[u64], iteration: usize) -> Result<()> {
        let fb = &self.config.feedback;
        let policy = match fb.annotators {
            AnnotatorMode::Oracle => (AnnotatorPolicy::Oracle, fb.crowd.redundancy.max(1)),
            AnnotatorMode::Simulated { accuracy, annotators } => (AnnotatorPolicy::Accurate { accuracy }, annotators),
            AnnotatorMode::Live => return self.wait_live(task_ids),
        };
        let truth = self.truth.ok_or_else(|| Error::validation("simulated annotators need ground truth"))?;
        if iteration == 1 && matches!(fb.annotators, AnnotatorMode::Simulated { .. }) {
            self.seed_gold(truth)?;
        }
        let prefix = if policy.0 == AnnotatorPolicy::Oracle { "oracle" } else { "sim" };
        let seed = derive(fb.seed, &[iteration as u64]);
        let mut sims: Vec<SimAnnotator> = (0..policy.1).map(|i| SimAnnotator::new(format!("{prefix}-{i}"), policy.0, seed)).collect();
        drive_annotators(self.api, &self.token, &mut sims, &|p| truth_label(truth, p))?;
        Ok(())
    }

    /// Blocks until every task has a consensus or been expired.
    fn wait_live(&self, task_ids: &[u64]) -> Result<()> {
        let want: BTreeSet<u64> = task_ids.iter().copied().collect();
        let start = Instant::now();
        loop {
            let open = self
                .api
                .list_tasks()?
                .into_iter()
                .filter(|t| want.contains(&t.task_id) && t.consensus.is_none() && !matches!(t.state, sloop_core::feedback::TaskState::Expired))
                .count();
            if open == 0 {
                return Ok(());
            }
            if self.config.live_timeout.is_some_and(|t| start.elapsed() > t) {
                log::warn!("{open} verification tasks still open; continuing without them");
                return Ok(());
            }
            std::thread::sleep(self.config.live_poll);
        }
    }

    /// One select, publish, gather, merge, reweight round.
    pub fn iteration(&self, iteration: usize) -> Result<IterationMetrics> {
        let mut st = self.load_state()?;
        let pairs = st.select(&self.config.feedback)?;
        let mut ids = Vec::new();
        for p in &pairs {
            match self.api.create_task(&self.token, p) {
                Ok(id) => ids.push(id),
                Err(Error::Conflict(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.gather(&ids, iteration)?;
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        let labels: Vec<(PairKey, Label)> = self
            .api
            .list_tasks()?
            .into_iter()
            .filter(|t| wanted.contains(&t.task_id))
            .filter_map(|t| t.consensus.map(|c| (t.pair, c)))
            .collect();
        st.apply(&labels, self.config.feedback.eta)?;
        self.api.put_weights(&self.token, &st.weights)?;
        self.api.put_cohorts(&self.token, &st.partition)?;
        let row = self.row(iteration, &st, labels.len(), 0)?;
        self.api.push_metrics(&self.token, &row)?;
        Ok(row)
    }

    /// Commits the human verification edge for every image waiting on it,
    /// recording the tasks that involved the image.
    pub fn close_verification(&self) -> Result<usize> {
        let def = self.api.workflow(&self.config.species)?;
        let Some(edge) = def.edges.iter().find(|e| e.executor == Executor::Human && e.payload_schema == "verification").cloned() else {
            return Ok(0);
        };
        let tasks = self.api.list_tasks()?;
        let mut n = 0;
        for r in self.api.list_images(Some(&self.config.species))? {
            if r.state != edge.from {
                continue;
            }
            let involved: Vec<u64> = tasks
                .iter()
                .filter(|t| t.pair.0 == r.image_id || t.pair.1 == r.image_id)
                .map(|t| t.task_id)
                .collect();
            self.api.commit_transition(
                &self.token,
                &TransitionRequest {
                    image_id: r.image_id.clone(),
                    from: edge.from.clone(),
                    to: edge.to.clone(),
                    step: Some(edge.step.clone()),
                    payload: json!({ "tasks": involved }),
                },
            )?;
            n += 1;
        }
        Ok(n)
    }
}
