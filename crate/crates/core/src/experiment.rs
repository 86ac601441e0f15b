//! Benchmark plumbing: preparing a population, training the primed CNN on a
//! disjoint population, ranking the pool, and running relevance-feedback
//! iterations with oracle or simulated annotators.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{reweight, update_weights, CascadeConfig, CascadeStage, EnsembleWeights, LabeledScores, RankedList};
use crate::error::{Error, Result};
use crate::feedback::{
    constrain_ranking, merge_cohorts, pair_key, select_verification_pairs, simulate_crowd, AnnotatorPolicy, CohortPartition,
    Crowd, Label, PairKey, SimAnnotator,
};
use crate::matchers::classical::{align_pair, MethodId, PreparedImage};
use crate::matchers::cnn::{train, CnnInput, TrainHyper, TrainReport};
use crate::metrics::{compute_auc, recall_at_k, QueryRanking};
use crate::params::{CrowdParams, MatchParams, WEIGHT_ETA};
use crate::rng::derived_rng;
use crate::synthpop::{generate_population, Population, SyntheticSpec};
use crate::workflow::{load_workflow, SYNTHETIC_WORKFLOW};

/// Matcher settings of the shipped synthetic workflow.
pub fn synthetic_match_params() -> MatchParams {
    load_workflow(SYNTHETIC_WORKFLOW).map(|w| w.match_params()).unwrap_or_default()
}

/// Descriptor over the whole pool, then deformation and the primed CNN on the
/// leading `rho` fraction.
pub fn default_cascade(rho: f64, with_cnn: bool) -> Result<CascadeConfig> {
    let mut stages = vec![
        CascadeStage {
            method: MethodId::DescriptorCosine,
            survivor_fraction: 1.0,
        },
        CascadeStage {
            method: MethodId::Deformation,
            survivor_fraction: rho,
        },
    ];
    if with_cnn {
        stages.push(CascadeStage {
            method: MethodId::PrimedCnn,
            survivor_fraction: 1.0,
        });
    }
    CascadeConfig::new(stages)
}

pub fn prepare_population(pop: &Population, params: &MatchParams) -> Result<Vec<PreparedImage>> {
    pop.images
        .par_iter()
        .map(|im| PreparedImage::new(im.id.clone(), &im.grid(), &im.fiducials, params))
        .collect()
}

/// Every same-individual pair plus an equal number of seeded different pairs.
pub fn sample_pairs(pop: &Population, negatives_per_positive: f64, seed: u64) -> Vec<(usize, usize, bool)> {
    let n = pop.images.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if pop.images[i].individual == pop.images[j].individual {
                out.push((i, j, true));
            }
        }
    }
    let want = (out.len() as f64 * negatives_per_positive).round() as usize;
    let mut r = derived_rng(seed, &[0x6e65_6773]);
    let mut seen = BTreeSet::new();
    let distinct = pop.spec.n_individuals > 1;
    while distinct && seen.len() < want {
        let i = r.gen_range(0..n);
        let j = r.gen_range(0..n);
        let (i, j) = (i.min(j), i.max(j));
        if pop.images[i].individual != pop.images[j].individual && seen.insert((i, j)) {
            out.push((i, j, false));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnTraining {
    /// Added to the benchmark seed so training images never overlap it.
    pub seed_offset: u64,
    pub n_individuals: usize,
    pub hyper: TrainHyper,
}

impl Default for CnnTraining {
    fn default() -> Self {
        Self {
            seed_offset: 1000,
            n_individuals: 48,
            hyper: TrainHyper {
                epochs: 20,
                ..TrainHyper::default()
            },
        }
    }
}

/// Builds one training example per aligned fiducial of each sampled pair.
pub fn cnn_examples(pop: &Population, prepared: &[PreparedImage], params: &MatchParams, seed: u64) -> Result<Vec<(CnnInput, bool)>> {
    let pairs = sample_pairs(pop, 1.0, seed);
    let nested: Vec<Vec<(CnnInput, bool)>> = pairs
        .par_iter()
        .map(|&(i, j, y)| {
            align_pair(&prepared[i], &prepared[j], params)?
                .iter()
                .map(|a| Ok((a.cnn_input()?, y)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Trains the primed CNN on a population generated from `spec` with a shifted
/// seed and its own size.
pub fn train_primed_cnn(spec: &SyntheticSpec, params: &MatchParams, cfg: &CnnTraining) -> Result<TrainReport> {
    let tspec = SyntheticSpec {
        seed: spec.seed.wrapping_add(cfg.seed_offset),
        n_individuals: cfg.n_individuals,
        ..spec.clone()
    };
    let pop = generate_population(&tspec)?;
    let prepared = prepare_population(&pop, params)?;
    let data = cnn_examples(&pop, &prepared, params, tspec.seed)?;
    train(&data, &cfg.hyper)
}

/// Per-query position scores pooled over all queries, labelled by truth.
pub fn ranking_scores(lists: &[RankedList], truth: &BTreeMap<String, usize>) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for l in lists {
        let Some(q) = truth.get(&l.query) else { continue };
        for (pos, e) in l.entries.iter().enumerate() {
            if let Some(c) = truth.get(&e.candidate) {
                out.push((l.position_score(pos), c == q));
            }
        }
    }
    out
}

pub fn ranking_auc(lists: &[RankedList], truth: &BTreeMap<String, usize>) -> Result<f64> {
    compute_auc(&ranking_scores(lists, truth))
}

pub fn query_rankings(lists: &[RankedList]) -> Vec<QueryRanking> {
    lists
        .iter()
        .map(|l| QueryRanking {
            query: l.query.clone(),
            candidates: l.candidates(),
        })
        .collect()
}

pub fn ranking_recall(lists: &[RankedList], truth: &BTreeMap<String, usize>, k: usize) -> f64 {
    recall_at_k(&query_rankings(lists), truth, k).recall
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// The `ceil(f * pool)` globally best unverified pairs.
    Global,
    /// Each query's `ceil(f * pool)` best unverified candidates.
    PerQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnnotatorMode {
    /// Ground truth answers every task directly.
    Oracle,
    /// A crowd of simulated annotators with the given accuracy.
    Simulated { accuracy: f64, annotators: usize },
    /// Answers arrive through the task API.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackConfig {
    pub budget_fraction: f64,
    pub iterations: usize,
    pub eta: f64,
    pub selection: SelectionPolicy,
    pub annotators: AnnotatorMode,
    pub crowd: CrowdParams,
    pub seed: u64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            budget_fraction: 0.01,
            iterations: 2,
            eta: WEIGHT_ETA,
            selection: SelectionPolicy::Global,
            annotators: AnnotatorMode::Oracle,
            crowd: CrowdParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub auc: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub pairs_verified: usize,
    pub expensive_calls: usize,
    pub conflicts: usize,
    pub weights: BTreeMap<MethodId, f64>,
}

pub const METRICS_CSV_HEADER: &str = "iteration,auc,recall@1,recall@5,pairs_verified,expensive_calls,conflicts";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            opt(self.auc),
            opt(self.recall_at_1),
            opt(self.recall_at_5),
            self.pairs_verified,
            self.expensive_calls,
            self.conflicts
        )
    }
}

pub fn metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Rankings plus everything feedback has learned so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    /// Cascade output under the initial weights; never rescored.
    pub base: Vec<RankedList>,
    pub weights: EnsembleWeights,
    pub verified: BTreeMap<PairKey, Label>,
    pub partition: CohortPartition,
    pub images: Vec<String>,
}

impl FeedbackState {
    pub fn new(base: Vec<RankedList>, weights: EnsembleWeights) -> Self {
        let images: Vec<String> = base.iter().map(|l| l.query.clone()).collect();
        let partition = merge_cohorts(&images, &[], &[]);
        Self {
            base,
            weights,
            verified: BTreeMap::new(),
            partition,
            images,
        }
    }

    /// Rankings under the current weights and verified constraints.
    pub fn current(&self) -> Vec<RankedList> {
        self.base
            .par_iter()
            .map(|l| constrain_ranking(&reweight(l, &self.weights), &self.partition))
            .collect()
    }

    /// Pairs to send for verification this round.
    pub fn select(&self, cfg: &FeedbackConfig) -> Result<Vec<PairKey>> {
        let current = self.current();
        let done: BTreeSet<PairKey> = self.verified.keys().cloned().collect();
        match cfg.selection {
            SelectionPolicy::Global => select_verification_pairs(&current, self.images.len(), cfg.budget_fraction, &done),
            SelectionPolicy::PerQuery => {
                let k = (cfg.budget_fraction * self.images.len() as f64).ceil() as usize;
                let mut out = BTreeSet::new();
                for l in &current {
                    let picks = l
                        .entries
                        .iter()
                        .map(|e| pair_key(&l.query, &e.candidate))
                        .filter(|p| !done.contains(p) && !self.partition.same_cohort(&p.0, &p.1))
                        .take(k);
                    out.extend(picks);
                }
                Ok(out.into_iter().collect())
            }
        }
    }

    /// Normalized per-method scores of a pair, averaged over both directions;
    /// a method that did not score a direction counts as 0 there.
    pub fn pair_scores(&self, pair: &PairKey) -> BTreeMap<MethodId, f64> {
        let mut sums: BTreeMap<MethodId, f64> = self.weights.methods().map(|m| (m, 0.0)).collect();
        for (q, c) in [(&pair.0, &pair.1), (&pair.1, &pair.0)] {
            let Some(list) = self.base.iter().find(|l| &l.query == q) else { continue };
            let Some(e) = list.entries.iter().find(|e| &e.candidate == c) else { continue };
            for (m, s) in &e.scores {
                if let Some(v) = sums.get_mut(m) {
                    *v += s.normalized / 2.0;
                }
            }
        }
        sums
    }

    /// Folds in consensus labels: cohorts are rebuilt from every verified
    /// pair and the weights take one multiplicative step on this round's pairs.
    pub fn apply(&mut self, labels: &[(PairKey, Label)], eta: f64) -> Result<()> {
        let mut round = Vec::new();
        for (pair, label) in labels {
            if *label == Label::Unsure {
                continue;
            }
            self.verified.insert(pair.clone(), *label);
            round.push(LabeledScores {
                same: *label == Label::Same,
                scores: self.pair_scores(pair),
            });
        }
        let same: Vec<PairKey> = self.verified.iter().filter(|(_, l)| **l == Label::Same).map(|(p, _)| p.clone()).collect();
        let diff: Vec<PairKey> = self.verified.iter().filter(|(_, l)| **l == Label::Different).map(|(p, _)| p.clone()).collect();
        self.partition = merge_cohorts(&self.images, &same, &diff);
        self.weights = update_weights(&self.weights, &round, eta)?.weights;
        Ok(())
    }
}

/// Obtains consensus labels for `pairs` from oracle or simulated annotators.
pub fn annotate(
    pairs: &[PairKey],
    mode: AnnotatorMode,
    crowd_params: &CrowdParams,
    truth: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<Vec<(PairKey, Label)>> {
    let truth_of = |p: &PairKey| -> Label {
        match (truth.get(&p.0), truth.get(&p.1)) {
            (Some(a), Some(b)) if a == b => Label::Same,
            (Some(_), Some(_)) => Label::Different,
            _ => Label::Unsure,
        }
    };
    match mode {
        AnnotatorMode::Oracle => Ok(pairs.iter().map(|p| (p.clone(), truth_of(p))).collect()),
        AnnotatorMode::Simulated { accuracy, annotators } => {
            let mut crowd = Crowd::new(crowd_params.clone());
            // gold answers come from a handful of truth-known pairs
            let ids: Vec<&String> = truth.keys().collect();
            let mut r = derived_rng(seed, &[0x676f_6c64]);
            for _ in 0..20.min(ids.len() * ids.len()) {
                let a = ids[r.gen_range(0..ids.len())];
                let b = ids[r.gen_range(0..ids.len())];
                if a != b {
                    let p = pair_key(a, b);
                    let t = truth_of(&p);
                    crowd.add_gold(p, t)?;
                }
            }
            for p in pairs {
                crowd.create_task(p.clone())?;
            }
            let mut sims: Vec<SimAnnotator> = (0..annotators)
                .map(|i| SimAnnotator::new(format!("sim-{i}"), AnnotatorPolicy::Accurate { accuracy }, seed))
                .collect();
            simulate_crowd(&mut crowd, &mut sims, &truth_of, 0)?;
            Ok(crowd.resolved())
        }
        AnnotatorMode::Live => Err(Error::validation("live annotation runs through the task API")),
    }
}

/// Everything needed to evaluate rankings against ground truth.
pub struct Evaluation<'a> {
    pub truth: &'a BTreeMap<String, usize>,
}

impl Evaluation<'_> {
    pub fn metrics(&self, iteration: usize, state: &FeedbackState, pairs_verified: usize, expensive_calls: usize) -> Result<IterationMetrics> {
        let current = state.current();
        Ok(IterationMetrics {
            iteration,
            auc: Some(ranking_auc(&current, self.truth)?),
            recall_at_1: Some(ranking_recall(&current, self.truth, 1)),
            recall_at_5: Some(ranking_recall(&current, self.truth, 5)),
            pairs_verified,
            expensive_calls,
            conflicts: state.partition.conflicts.len(),
            weights: state.weights.as_map().clone(),
        })
    }
}

/// One select, annotate, merge, update, re-rank round.
pub fn feedback_iteration(
    state: &mut FeedbackState,
    cfg: &FeedbackConfig,
    truth: &BTreeMap<String, usize>,
    iteration: usize,
) -> Result<IterationMetrics> {
    let pairs = state.select(cfg)?;
    let labels = annotate(&pairs, cfg.annotators, &cfg.crowd, truth, crate::rng::derive(cfg.seed, &[iteration as u64]))?;
    state.apply(&labels, cfg.eta)?;
    Evaluation { truth }.metrics(iteration, state, labels.len(), 0)
}

/// Baseline plus `cfg.iterations` feedback rounds.
pub fn run_feedback(
    base: Vec<RankedList>,
    weights: EnsembleWeights,
    cfg: &FeedbackConfig,
    truth: &BTreeMap<String, usize>,
    expensive_calls: usize,
) -> Result<(FeedbackState, Vec<IterationMetrics>)> {
    let mut state = FeedbackState::new(base, weights);
    let mut rows = vec![Evaluation { truth }.metrics(0, &state, 0, expensive_calls)?];
    for it in 1..=cfg.iterations {
        rows.push(feedback_iteration(&mut state, cfg, truth, it)?);
    }
    Ok((state, rows))
}
