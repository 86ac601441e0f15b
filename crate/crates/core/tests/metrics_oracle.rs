use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sloop_core::metrics::{cmc_curve, compute_auc, recall_at_k, QueryRanking};

fn brute_auc(scored: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in scored.iter().filter(|s| s.1) {
        for n in scored.iter().filter(|s| !s.1) {
            pairs += 1.0;
            if p.0 > n.0 {
                wins += 1.0;
            } else if p.0 == n.0 {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pair_counting_on_seeded_sets() {
    for seed in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.gen_range(2..60);
        let levels = r.gen_range(2..30);
        let mut scored: Vec<(f64, bool)> = (0..n).map(|_| (r.gen_range(0..levels) as f64 / levels as f64, r.gen_bool(0.4))).collect();
        scored[0].1 = true;
        scored[1].1 = false;
        let got = compute_auc(&scored).unwrap();
        assert!((got - brute_auc(&scored)).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(compute_auc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
    assert_eq!(compute_auc(&[(0.3, true), (0.3, false), (0.3, false)]).unwrap(), 0.5);
    assert!(compute_auc(&[(0.3, true), (0.4, true)]).is_err());
    assert!(compute_auc(&[]).is_err());
}

proptest! {
    #[test]
    fn auc_is_in_unit_interval_and_flips_under_negation(
        pos in prop::collection::vec(0u8..20, 1..30),
        neg in prop::collection::vec(0u8..20, 1..30),
    ) {
        let scored: Vec<(f64, bool)> = pos.iter().map(|&s| (s as f64, true)).chain(neg.iter().map(|&s| (s as f64, false))).collect();
        let a = compute_auc(&scored).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<(f64, bool)> = scored.iter().map(|&(s, y)| (-s, y)).collect();
        prop_assert!((compute_auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((a - brute_auc(&scored)).abs() <= 1e-12);
    }
}

fn seeded_rankings(seed: u64) -> (Vec<QueryRanking>, BTreeMap<String, usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let individuals = r.gen_range(2..8);
    let ids: Vec<String> = (0..individuals * 3).map(|i| format!("i{i}")).collect();
    let truth: BTreeMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i / 3)).collect();
    let rankings = ids
        .iter()
        .map(|q| {
            let mut c: Vec<String> = ids.iter().filter(|c| *c != q).cloned().collect();
            for i in (1..c.len()).rev() {
                c.swap(i, r.gen_range(0..=i));
            }
            QueryRanking {
                query: q.clone(),
                candidates: c,
            }
        })
        .collect();
    (rankings, truth)
}

#[test]
fn recall_and_cmc_match_a_direct_scan() {
    for seed in 0..200 {
        let (rankings, truth) = seeded_rankings(seed);
        let pool = rankings[0].candidates.len();
        let cmc = cmc_curve(&rankings, &truth);
        assert_eq!(cmc.len(), pool);
        assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*cmc.last().unwrap(), 1.0);
        for k in 1..=pool {
            let hits = rankings
                .iter()
                .filter(|q| q.candidates[..k].iter().any(|c| truth[c] == truth[&q.query]))
                .count();
            let want = hits as f64 / rankings.len() as f64;
            assert_eq!(recall_at_k(&rankings, &truth, k).recall, want, "seed {seed} k {k}");
            assert_eq!(cmc[k - 1], want);
        }
    }
}

#[test]
fn queries_without_mates_are_excluded() {
    let truth: BTreeMap<String, usize> = [("a", 0), ("b", 0), ("c", 1)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let rankings = vec![
        QueryRanking {
            query: "a".into(),
            candidates: vec!["b".into(), "c".into()],
        },
        QueryRanking {
            query: "c".into(),
            candidates: vec!["a".into(), "b".into()],
        },
    ];
    let r = recall_at_k(&rankings, &truth, 1);
    assert_eq!((r.recall, r.evaluated, r.excluded), (1.0, 1, 1));
}
