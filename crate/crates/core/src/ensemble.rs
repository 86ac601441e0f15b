//! Combining matchers: rank normalization, weighted aggregation, bagging over
//! random fiducial subsets, the cheap-to-expensive cascade, and online weight
//! adaptation from verified pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matchers::classical::{common_fiducials, pair_score_classical, MatchScore, MethodId, PreparedImage};
use crate::matchers::cnn::PrimedCnnModel;
use crate::params::{MatchParams, WEIGHT_FLOOR};
use crate::rng::derived_rng;

/// Maps scores to `(rank from bottom - 1) / (n - 1)`, ties sharing their mean rank.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::Insufficient("rank normalization needs at least 2 scores".into()));
    }
    if raw.iter().any(|v| v.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let n = raw.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && raw[order[j + 1]] == raw[order[i]] {
            j += 1;
        }
        // zero-based mean rank of the tie group
        let mean_rank = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = mean_rank / (n - 1) as f64;
        }
        i = j + 1;
    }
    Ok(out)
}

/// Method weights on the probability simplex, each at least [`WEIGHT_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<MethodId, f64>", into = "BTreeMap<MethodId, f64>")]
pub struct EnsembleWeights(BTreeMap<MethodId, f64>);

impl EnsembleWeights {
    pub fn uniform(methods: &[MethodId]) -> Result<Self> {
        let set: BTreeSet<MethodId> = methods.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::validation("ensemble needs at least one method"));
        }
        let w = 1.0 / set.len() as f64;
        Ok(Self(set.into_iter().map(|m| (m, w)).collect()))
    }

    /// Builds weights from arbitrary positive values, renormalized.
    pub fn from_map(map: BTreeMap<MethodId, f64>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::validation("ensemble needs at least one method"));
        }
        if map.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("weights must be finite and nonnegative"));
        }
        Ok(Self(project(map)))
    }

    pub fn get(&self, m: MethodId) -> Option<f64> {
        self.0.get(&m).copied()
    }

    pub fn methods(&self) -> impl Iterator<Item = MethodId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MethodId, f64)> + '_ {
        self.0.iter().map(|(m, w)| (*m, *w))
    }

    pub fn as_map(&self) -> &BTreeMap<MethodId, f64> {
        &self.0
    }
}

impl TryFrom<BTreeMap<MethodId, f64>> for EnsembleWeights {
    type Error = Error;
    fn try_from(map: BTreeMap<MethodId, f64>) -> Result<Self> {
        Self::from_map(map)
    }
}

impl From<EnsembleWeights> for BTreeMap<MethodId, f64> {
    fn from(w: EnsembleWeights) -> Self {
        w.0
    }
}

/// Renormalizes to sum 1, then lifts anything under the floor to the floor and
/// shrinks the rest proportionally.
fn project(mut map: BTreeMap<MethodId, f64>) -> BTreeMap<MethodId, f64> {
    let n = map.len();
    let total: f64 = map.values().sum();
    if total <= 0.0 || !total.is_finite() {
        return map.keys().map(|m| (*m, 1.0 / n as f64)).collect();
    }
    map.values_mut().for_each(|w| *w /= total);
    let floor = WEIGHT_FLOOR.min(1.0 / n as f64);
    loop {
        let low: Vec<MethodId> = map.iter().filter(|(_, w)| **w < floor).map(|(m, _)| *m).collect();
        if low.is_empty() {
            break;
        }
        let pinned = map.values().filter(|w| **w <= floor).count();
        let free: f64 = map.values().filter(|w| **w > floor).sum();
        let scale = (1.0 - pinned as f64 * floor) / free;
        for w in map.values_mut() {
            *w = if *w <= floor { floor } else { *w * scale };
        }
    }
    // absorb rounding so the sum is 1 to the last bit possible
    let total: f64 = map.values().sum();
    if let Some(w) = map.values_mut().max_by(|a, b| a.total_cmp(b)) {
        *w += 1.0 - total;
    }
    map
}

/// Weighted mean of per-method normalized scores for each candidate.
pub fn aggregate(scores: &BTreeMap<MethodId, Vec<f64>>, weights: &EnsembleWeights) -> Result<Vec<f64>> {
    let methods: BTreeSet<MethodId> = weights.methods().collect();
    let given: BTreeSet<MethodId> = scores.keys().copied().collect();
    if methods != given {
        return Err(Error::validation(format!(
            "score methods {given:?} do not match weighted methods {methods:?}"
        )));
    }
    let n = scores.values().next().map_or(0, Vec::len);
    if scores.values().any(|v| v.len() != n) {
        return Err(Error::validation("methods scored different candidate sets"));
    }
    Ok((0..n)
        .map(|i| {
            let v: f64 = weights.iter().map(|(m, w)| w * scores[&m][i]).sum();
            v.clamp(0.0, 1.0)
        })
        .collect())
}

/// Per-method normalized scores of one verified pair and its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub same: bool,
    pub scores: BTreeMap<MethodId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub weights: EnsembleWeights,
    /// Per-method margin (mean score on same minus mean on different).
    pub margins: BTreeMap<MethodId, f64>,
    pub notice: Option<String>,
}

/// Multiplicative update `w_m <- w_m * exp(eta * margin_m)`, projected back
/// onto the floored simplex. Single-class feedback leaves weights unchanged.
pub fn update_weights(weights: &EnsembleWeights, verified: &[LabeledScores], eta: f64) -> Result<WeightUpdate> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::validation("eta must be finite and nonnegative"));
    }
    let unchanged = |notice: Option<String>| WeightUpdate {
        weights: weights.clone(),
        margins: BTreeMap::new(),
        notice,
    };
    if verified.is_empty() || eta == 0.0 {
        return Ok(unchanged(None));
    }
    for v in verified {
        if weights.methods().any(|m| !v.scores.contains_key(&m)) {
            return Err(Error::validation("verified pair lacks a score for some weighted method"));
        }
    }
    let same: Vec<&LabeledScores> = verified.iter().filter(|v| v.same).collect();
    let diff: Vec<&LabeledScores> = verified.iter().filter(|v| !v.same).collect();
    if same.is_empty() || diff.is_empty() {
        let notice = format!(
            "all {} verified pairs are {}; margin undefined, weights unchanged",
            verified.len(),
            if same.is_empty() { "different" } else { "same" }
        );
        log::info!("{notice}");
        return Ok(unchanged(Some(notice)));
    }
    let mean = |set: &[&LabeledScores], m: MethodId| set.iter().map(|v| v.scores[&m]).sum::<f64>() / set.len() as f64;
    let margins: BTreeMap<MethodId, f64> = weights.methods().map(|m| (m, mean(&same, m) - mean(&diff, m))).collect();
    let raw: BTreeMap<MethodId, f64> = weights
        .iter()
        .map(|(m, w)| (m, w * (eta * margins[&m]).exp()))
        .collect();
    Ok(WeightUpdate {
        weights: EnsembleWeights(project(raw)),
        margins,
        notice: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagParams {
    pub bags: usize,
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for BagParams {
    fn default() -> Self {
        Self {
            bags: 16,
            subset_fraction: 2.0 / 3.0,
            seed: 0,
        }
    }
}

/// Mean of `method` over `bags` random subsets of the shared fiducials.
pub fn bagged_score(
    a: &PreparedImage,
    b: &PreparedImage,
    method: MethodId,
    bag: &BagParams,
    params: &MatchParams,
    model: Option<&PrimedCnnModel>,
) -> Result<MatchScore> {
    if bag.bags == 0 || !(bag.subset_fraction > 0.0 && bag.subset_fraction <= 1.0) {
        return Err(Error::validation("bags must be positive and subset fraction in (0, 1]"));
    }
    let common = common_fiducials(a, b);
    if common.len() < 3 {
        log::warn!(
            "{} and {} share {} fiducials; bagging falls back to the plain method",
            a.id,
            b.id,
            common.len()
        );
        return pair_score_classical(a, b, method, params, model);
    }
    let k = ((bag.subset_fraction * common.len() as f64).ceil() as usize).clamp(1, common.len());
    let mut sum = 0.0;
    for i in 0..bag.bags {
        let mut r = derived_rng(bag.seed, &[0x6261_6773, i as u64]);
        let keep: Vec<usize> = sample(&mut r, common.len(), k).into_iter().map(|j| common[j]).collect();
        sum += pair_score_classical(&a.masked(&keep), &b.masked(&keep), method, params, model)?.raw;
    }
    let raw = sum / bag.bags as f64;
    Ok(MatchScore {
        query_id: a.id.clone(),
        candidate_id: b.id.clone(),
        method_id: method,
        raw,
        normalized: raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub method: MethodId,
    /// Fraction of the full pool that reaches this stage.
    pub survivor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stages: Vec<CascadeStage>,
}

impl CascadeConfig {
    pub fn new(stages: Vec<CascadeStage>) -> Result<Self> {
        let c = Self { stages };
        c.validate()?;
        Ok(c)
    }

    /// Every method at full pool: exhaustive weighted aggregation.
    pub fn exhaustive(methods: &[MethodId]) -> Result<Self> {
        Self::new(
            methods
                .iter()
                .map(|&method| CascadeStage {
                    method,
                    survivor_fraction: 1.0,
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.stages.first() else {
            return Err(Error::validation("cascade needs at least one stage"));
        };
        if first.survivor_fraction != 1.0 {
            return Err(Error::validation("the first stage scores the whole pool (fraction 1)"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.stages {
            if !(s.survivor_fraction > 0.0 && s.survivor_fraction <= 1.0) {
                return Err(Error::validation(format!(
                    "survivor fraction {} outside (0, 1]",
                    s.survivor_fraction
                )));
            }
            if !seen.insert(s.method) {
                return Err(Error::validation(format!("method {} appears twice", s.method)));
            }
        }
        // after the first stage fractions must not increase, except that a
        // final fraction of 1 means "all survivors"
        let n = self.stages.len();
        let mut prev = 1.0;
        let mut shrunk = false;
        for (i, s) in self.stages.iter().enumerate().skip(1) {
            let last = i == n - 1;
            let f = s.survivor_fraction;
            if last && f == 1.0 {
                break;
            }
            if f > prev || (shrunk && f == prev) {
                return Err(Error::validation("survivor fractions must strictly decrease"));
            }
            shrunk |= f < prev;
            prev = f;
        }
        Ok(())
    }

    pub fn methods(&self) -> Vec<MethodId> {
        self.stages.iter().map(|s| s.method).collect()
    }

    /// The expensive stage budget `ceil(rho * pool)` of each stage.
    pub fn budget(&self, pool: usize) -> Vec<usize> {
        let mut prev = pool;
        self.stages
            .iter()
            .map(|s| {
                let b = ((s.survivor_fraction * pool as f64).ceil() as usize).min(prev);
                prev = b;
                b
            })
            .collect()
    }
}

/// Supplies raw pair scores to the cascade. Implementations may cache.
pub trait PairScorer: Sync {
    fn score(&self, query: &str, candidate: &str, method: MethodId) -> Result<f64>;
}

/// Wraps a scorer and counts invocations per method.
pub struct CountingScorer<'a, S: ?Sized> {
    pub inner: &'a S,
    counts: [AtomicUsize; 4],
}

impl<'a, S: PairScorer + ?Sized> CountingScorer<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            counts: Default::default(),
        }
    }

    pub fn count(&self, m: MethodId) -> usize {
        self.counts[method_slot(m)].load(Ordering::Relaxed)
    }
}

fn method_slot(m: MethodId) -> usize {
    MethodId::ALL.iter().position(|x| *x == m).expect("listed")
}

impl<S: PairScorer + ?Sized> PairScorer for CountingScorer<'_, S> {
    fn score(&self, query: &str, candidate: &str, method: MethodId) -> Result<f64> {
        self.counts[method_slot(method)].fetch_add(1, Ordering::Relaxed);
        self.inner.score(query, candidate, method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub candidate: String,
    pub combined: f64,
    /// Number of cascade stages that scored this candidate.
    pub depth: usize,
    pub scores: BTreeMap<MethodId, MethodScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAccount {
    pub method: MethodId,
    pub scored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<RankedEntry>,
    pub stages: Vec<StageAccount>,
}

impl RankedList {
    pub fn candidates(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.candidate.clone()).collect()
    }

    /// Position score in `[0, 1]`: 1 for the top entry, 0 for the last.
    pub fn position_score(&self, pos: usize) -> f64 {
        let n = self.entries.len();
        if n < 2 {
            1.0
        } else {
            (n - 1 - pos) as f64 / (n - 1) as f64
        }
    }
}

fn weighted(entry: &RankedEntry, weights: &EnsembleWeights) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (m, s) in &entry.scores {
        let w = weights.get(*m).unwrap_or(0.0);
        num += w * s.normalized;
        den += w;
    }
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Orders by stage depth, then combined score, then candidate id.
fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.depth
            .cmp(&a.depth)
            .then(b.combined.total_cmp(&a.combined))
            .then(a.candidate.cmp(&b.candidate))
    });
}

/// Recomputes combined scores under new weights without rescoring.
pub fn reweight(list: &RankedList, weights: &EnsembleWeights) -> RankedList {
    let mut out = list.clone();
    for e in &mut out.entries {
        e.combined = weighted(e, weights);
    }
    sort_entries(&mut out.entries);
    out
}

/// Ranks `pool` for `query`. Stage one scores the whole pool; each later stage
/// scores only the leading survivors of the stage before. Candidates that
/// reach more stages rank above those that do not.
pub fn cascade_match(
    query: &str,
    pool: &[String],
    config: &CascadeConfig,
    weights: &EnsembleWeights,
    scorer: &dyn PairScorer,
) -> Result<RankedList> {
    config.validate()?;
    for m in config.methods() {
        if weights.get(m).is_none() {
            return Err(Error::validation(format!("no weight for cascade method {m}")));
        }
    }
    let mut entries: Vec<RankedEntry> = pool
        .iter()
        .map(|c| RankedEntry {
            candidate: c.clone(),
            combined: 0.0,
            depth: 0,
            scores: BTreeMap::new(),
        })
        .collect();
    let mut stages = Vec::new();
    if pool.is_empty() {
        return Ok(RankedList {
            query: query.to_string(),
            entries,
            stages,
        });
    }
    let budget = config.budget(pool.len());
    let mut survivors = pool.len();
    for (stage, &keep) in config.stages.iter().zip(&budget) {
        survivors = survivors.min(keep);
        let m = stage.method;
        let scored = &mut entries[..survivors];
        let raws: Vec<f64> = {
            use rayon::prelude::*;
            scored
                .par_iter()
                .map(|e| scorer.score(query, &e.candidate, m))
                .collect::<Result<_>>()?
        };
        let normalized = if raws.len() >= 2 { normalize_scores(&raws)? } else { vec![1.0; raws.len()] };
        for ((e, raw), norm) in scored.iter_mut().zip(raws).zip(normalized) {
            e.scores.insert(m, MethodScore { raw, normalized: norm });
            e.depth += 1;
            e.combined = weighted(e, weights);
        }
        stages.push(StageAccount {
            method: m,
            scored: survivors,
        });
        sort_entries(&mut entries);
    }
    Ok(RankedList {
        query: query.to_string(),
        entries,
        stages,
    })
}
