use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sloop_core::ensemble::{cascade_match, update_weights, CascadeConfig, CascadeStage, CountingScorer, EnsembleWeights, LabeledScores, PairScorer};
use sloop_core::matchers::classical::MethodId;
use sloop_core::Result;

const METHODS: [MethodId; 3] = [MethodId::DescriptorCosine, MethodId::Ransac, MethodId::Deformation];

/// Raw scores looked up from a seeded table, optionally scaled per method.
struct Table {
    scores: BTreeMap<(String, MethodId), f64>,
    scale: BTreeMap<MethodId, f64>,
}

impl Table {
    fn new(pool: &[String], seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut scores = BTreeMap::new();
        for c in pool {
            for m in METHODS {
                scores.insert((c.clone(), m), r.gen::<f64>());
            }
        }
        Self { scores, scale: BTreeMap::new() }
    }
}

impl PairScorer for Table {
    fn score(&self, _query: &str, candidate: &str, method: MethodId) -> Result<f64> {
        Ok(self.scores[&(candidate.to_string(), method)] * self.scale.get(&method).copied().unwrap_or(1.0))
    }
}

fn pool(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:03}")).collect()
}

fn cascade(rho: &[f64]) -> CascadeConfig {
    CascadeConfig::new(
        METHODS[..rho.len()]
            .iter()
            .zip(rho)
            .map(|(&method, &survivor_fraction)| CascadeStage { method, survivor_fraction })
            .collect(),
    )
    .unwrap()
}

fn weights(seed: u64) -> EnsembleWeights {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = METHODS.iter().map(|_| r.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    EnsembleWeights::from_map(METHODS.iter().zip(raw).map(|(&m, w)| (m, w / total)).collect()).unwrap()
}

/// Mean-rank normalization written out directly.
fn rank_normalize(raw: &[f64]) -> Vec<f64> {
    let n = raw.len();
    raw.iter()
        .map(|&x| {
            let below = raw.iter().filter(|&&y| y < x).count() as f64;
            let equal = raw.iter().filter(|&&y| y == x).count() as f64;
            (below + (equal - 1.0) / 2.0) / (n as f64 - 1.0)
        })
        .collect()
}

#[test]
fn full_survival_equals_exhaustive_weighted_aggregation() {
    for seed in 0..30 {
        let p = pool(20 + seed as usize);
        let table = Table::new(&p, seed);
        let w = weights(seed);
        let got = cascade_match("q", &p, &CascadeConfig::exhaustive(&METHODS).unwrap(), &w, &table).unwrap();
        let per_method: Vec<Vec<f64>> = METHODS
            .iter()
            .map(|&m| rank_normalize(&p.iter().map(|c| table.scores[&(c.clone(), m)]).collect::<Vec<_>>()))
            .collect();
        let mut want: Vec<(f64, String)> = p
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s: f64 = METHODS.iter().enumerate().map(|(k, &m)| w.get(m).unwrap() * per_method[k][i]).sum();
                (s, c.clone())
            })
            .collect();
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got.candidates(), want.iter().map(|x| x.1.clone()).collect::<Vec<_>>(), "seed {seed}");
        for (e, (s, _)) in got.entries.iter().zip(&want) {
            assert!((e.combined - s).abs() < 1e-12);
        }
    }
}

#[test]
fn expensive_calls_follow_the_survivor_budget() {
    for (n, rho) in [(1usize, [1.0, 0.2, 0.05]), (10, [1.0, 0.2, 0.05]), (255, [1.0, 0.2, 0.05]), (64, [1.0, 0.5, 1.0])] {
        let p = pool(n);
        let table = Table::new(&p, n as u64);
        let counting = CountingScorer::new(&table);
        let cfg = cascade(&rho);
        let list = cascade_match("q", &p, &cfg, &weights(1), &counting).unwrap();
        let b1 = (rho[1] * n as f64).ceil() as usize;
        let b2 = if rho[2] == 1.0 { b1 } else { (rho[2] * n as f64).ceil() as usize };
        assert_eq!(counting.count(MethodId::DescriptorCosine), n);
        assert_eq!(counting.count(MethodId::Ransac), b1);
        assert_eq!(counting.count(MethodId::Deformation), b2.min(b1));
        assert_eq!(list.stages.iter().map(|s| s.scored).collect::<Vec<_>>(), vec![n, b1, b2.min(b1)]);
        // Survivors sit above everything that dropped out earlier.
        assert!(list.entries.windows(2).all(|w| w[0].depth >= w[1].depth));
        assert_eq!(list.entries.len(), n);
    }
    let empty = cascade_match("q", &[], &cascade(&[1.0, 0.2]), &weights(1), &Table::new(&[], 0)).unwrap();
    assert!(empty.entries.is_empty());
}

#[test]
fn non_survivors_keep_first_stage_order() {
    let p = pool(50);
    let table = Table::new(&p, 9);
    let list = cascade_match("q", &p, &cascade(&[1.0, 0.2]), &weights(2), &table).unwrap();
    let tail: Vec<&String> = list.entries.iter().filter(|e| e.depth == 1).map(|e| &e.candidate).collect();
    let mut by_first: Vec<&String> = tail.clone();
    by_first.sort_by(|a, b| {
        let (sa, sb) = (table.scores[&((*a).clone(), MethodId::DescriptorCosine)], table.scores[&((*b).clone(), MethodId::DescriptorCosine)]);
        sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
    });
    assert_eq!(tail, by_first);
}

proptest! {
    #[test]
    fn scaling_one_method_leaves_the_order_alone(seed in 0u64..500, which in 0usize..3, factor in 0.01f64..100.0) {
        let p = pool(30);
        let mut table = Table::new(&p, seed);
        let cfg = cascade(&[1.0, 0.4, 0.1]);
        let w = weights(seed);
        let before = cascade_match("q", &p, &cfg, &w, &table).unwrap().candidates();
        table.scale.insert(METHODS[which], factor);
        let after = cascade_match("q", &p, &cfg, &w, &table).unwrap().candidates();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn positive_margin_never_loses_unnormalized_weight(
        seed in 0u64..1000,
        eta in 0.01f64..2.0,
        n in 2usize..12,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = weights(seed);
        let verified: Vec<LabeledScores> = (0..n)
            .map(|i| LabeledScores {
                same: i % 2 == 0,
                scores: METHODS.iter().map(|&m| (m, r.gen::<f64>())).collect(),
            })
            .collect();
        let up = update_weights(&w, &verified, eta).unwrap();
        let sum: f64 = up.weights.iter().map(|(_, x)| x).sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        let mut margin = BTreeMap::new();
        for m in METHODS {
            let same: Vec<f64> = verified.iter().filter(|v| v.same).map(|v| v.scores[&m]).collect();
            let diff: Vec<f64> = verified.iter().filter(|v| !v.same).map(|v| v.scores[&m]).collect();
            let g = same.iter().sum::<f64>() / same.len() as f64 - diff.iter().sum::<f64>() / diff.len() as f64;
            prop_assert!((up.margins[&m] - g).abs() < 1e-12);
            prop_assert!(up.weights.get(m).unwrap() >= 1e-6);
            margin.insert(m, g);
        }
        // A larger margin never loses ground relative to a smaller one.
        for a in METHODS {
            for b in METHODS {
                if margin[&a] > margin[&b] {
                    let before = w.get(a).unwrap() / w.get(b).unwrap();
                    let after = up.weights.get(a).unwrap() / up.weights.get(b).unwrap();
                    prop_assert!(after >= before * (1.0 - 1e-12));
                }
            }
        }
    }
}
