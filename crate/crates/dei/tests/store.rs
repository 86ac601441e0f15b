use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;
use sloop_core::ensemble::{EnsembleWeights, MethodScore, RankedEntry, RankedList, StageAccount};
use sloop_core::grid::Grid;
use sloop_core::imageio::encode_pgm;
use sloop_core::matchers::classical::MethodId;
use sloop_core::workflow::{builtin_workflow, load_workflow};
use sloop_core::Error;
use sloop_dei::clock::{Clock, ManualClock};
use sloop_dei::store::{Dei, DeiConfig, ImageMetadata, TransitionRequest};

const ALL_CAPS: [&str; 9] = ["upload", "annotate", "coordinate", "preprocess", "extract_features", "match", "verify", "assign_identity", "enter_fiducials"];

fn pgm(seed: u64) -> Vec<u8> {
    let mut r = StdRng::seed_from_u64(seed);
    encode_pgm(&Grid::from_fn(12, 16, |_, _| r.gen::<f64>()))
}

fn store_with(clock: Arc<dyn Clock>, config: DeiConfig) -> Dei {
    let dei = Dei::open(config, clock).unwrap();
    dei.register_workflow(builtin_workflow("synthetic").unwrap()).unwrap();
    dei.add_principal("op", "pw", &ALL_CAPS).unwrap();
    dei
}

fn memory_store() -> Dei {
    store_with(
        ManualClock::new(1_000),
        DeiConfig {
            fsync: false,
            ..DeiConfig::default()
        },
    )
}

fn login(dei: &Dei, caps: &[&str]) -> String {
    let caps: Vec<String> = caps.iter().map(|c| c.to_string()).collect();
    dei.authenticate("op", "pw", &caps).unwrap().session_id
}

fn upload(dei: &Dei, token: &str, n: usize, seed: u64) -> Vec<String> {
    (0..n)
        .map(|i| {
            let meta = ImageMetadata {
                image_id: Some(format!("im{seed}-{i}")),
                ..ImageMetadata::default()
            };
            dei.put_image(token, &pgm(seed * 1000 + i as u64), "synthetic", meta).unwrap()
        })
        .collect()
}

#[test]
fn bad_secret_creates_no_session() {
    let dei = memory_store();
    let before = dei.state().sessions.len();
    let e = dei.authenticate("op", "wrong", &["upload".to_string()]).unwrap_err();
    assert!(matches!(e, Error::Authentication(_)), "{e:?}");
    let e = dei.authenticate("nobody", "pw", &["upload".to_string()]).unwrap_err();
    assert!(matches!(e, Error::Authentication(_)), "{e:?}");
    assert_eq!(dei.state().sessions.len(), before);
}

#[test]
fn session_holds_the_intersection_of_capabilities() {
    let dei = memory_store();
    dei.add_principal("worker", "s", &["preprocess", "match"]).unwrap();
    let s = dei.authenticate("worker", "s", &["match".into(), "upload".into()]).unwrap();
    assert_eq!(s.capabilities, BTreeSet::from(["match".to_string()]));
    let e = dei.authenticate("worker", "s", &["upload".into()]).unwrap_err();
    assert!(matches!(e, Error::Authorization(_)));
    let e = dei.put_image(&s.session_id, &pgm(1), "synthetic", ImageMetadata::default()).unwrap_err();
    assert!(matches!(e, Error::Authorization(_)));
}

#[test]
fn expired_session_is_rejected() {
    let clock = ManualClock::new(500);
    let dei = store_with(clock.clone(), DeiConfig { fsync: false, ..DeiConfig::default() });
    let t = login(&dei, &["upload"]);
    clock.advance(dei.config().session_ttl + 1);
    let e = dei.put_image(&t, &pgm(2), "synthetic", ImageMetadata::default()).unwrap_err();
    assert!(matches!(e, Error::Authentication(_)));
}

#[test]
fn poll_returns_at_most_max_then_the_rest() {
    let dei = memory_store();
    let up = login(&dei, &["upload"]);
    let w = login(&dei, &["preprocess"]);
    assert!(dei.poll_work(&w, 2).unwrap().is_empty());
    upload(&dei, &up, 3, 1);
    let a = dei.poll_work(&w, 2).unwrap();
    let b = dei.poll_work(&w, 2).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(b.len(), 1);
    assert!(dei.poll_work(&w, 2).unwrap().is_empty());
    let ids: BTreeSet<_> = a.iter().chain(&b).map(|w| w.work_id).collect();
    assert_eq!(ids.len(), 3);
    assert!(a.iter().chain(&b).all(|w| w.step == "preprocess"));
}

#[test]
fn poll_only_offers_steps_the_session_holds() {
    let dei = memory_store();
    let up = login(&dei, &["upload"]);
    upload(&dei, &up, 2, 4);
    let w = login(&dei, &["extract_features"]);
    assert!(dei.poll_work(&w, 10).unwrap().is_empty());
}

#[test]
fn expired_lease_returns_the_item_to_the_pool() {
    let clock = ManualClock::new(10_000);
    let dei = store_with(clock.clone(), DeiConfig { fsync: false, ..DeiConfig::default() });
    let up = login(&dei, &["upload"]);
    upload(&dei, &up, 1, 5);
    let w1 = login(&dei, &["preprocess"]);
    let w2 = login(&dei, &["preprocess"]);
    let first = dei.poll_work(&w1, 1).unwrap();
    assert_eq!(first.len(), 1);
    assert!(dei.poll_work(&w2, 1).unwrap().is_empty());
    clock.advance(dei.config().lease_ttl - 1);
    assert!(dei.poll_work(&w2, 1).unwrap().is_empty());
    clock.advance(2);
    let again = dei.poll_work(&w2, 1).unwrap();
    assert_eq!(again.len(), 1);
    assert_eq!(again[0].work_id, first[0].work_id);
    assert_eq!(again[0].claimed_by.as_deref(), Some(w2.as_str()));
}

#[test]
fn concurrent_pollers_never_share_an_item() {
    for run in 0..100u64 {
        let dei = Arc::new(memory_store());
        let up = login(&dei, &["upload"]);
        let n = 20 + (run as usize % 17);
        upload(&dei, &up, n, run);
        let handles: Vec<_> = (0..10)
            .map(|i| {
                let dei = dei.clone();
                let t = login(&dei, &["preprocess"]);
                thread::spawn(move || {
                    let mut got = Vec::new();
                    loop {
                        let batch = dei.poll_work(&t, 1 + (i + run as usize) % 3).unwrap();
                        if batch.is_empty() {
                            return got;
                        }
                        got.extend(batch.into_iter().map(|w| w.work_id));
                    }
                })
            })
            .collect();
        let all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let distinct: BTreeSet<u64> = all.iter().copied().collect();
        assert_eq!(all.len(), distinct.len(), "run {run}: an item was leased twice");
        assert_eq!(distinct.len(), n, "run {run}");
    }
}

#[test]
fn racing_transitions_exactly_one_wins() {
    let dei = Arc::new(memory_store());
    let up = login(&dei, &["upload"]);
    let ids = upload(&dei, &up, 100, 9);
    for id in ids {
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let dei = dei.clone();
                let t = login(&dei, &["preprocess"]);
                let id = id.clone();
                thread::spawn(move || {
                    dei.commit_transition(
                        &t,
                        &TransitionRequest {
                            image_id: id,
                            from: "raw".into(),
                            to: "preprocessed".into(),
                            step: None,
                            payload: json!({ "fiducials": [[1.0, 2.0]] }),
                        },
                    )
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results.iter().filter_map(|r| r.as_ref().err()).all(|e| matches!(e, Error::Conflict(_))));
        let rec = dei.get_image(&id).unwrap();
        assert_eq!(rec.state, "preprocessed");
        assert_eq!(rec.history.len(), 2);
    }
}

#[test]
fn illegal_edge_is_a_validation_error() {
    let dei = memory_store();
    let up = login(&dei, &ALL_CAPS);
    let id = upload(&dei, &up, 1, 6).remove(0);
    let req = |step: Option<&str>| TransitionRequest {
        image_id: id.clone(),
        from: "raw".into(),
        to: "indexed".into(),
        step: step.map(String::from),
        payload: json!({ "cohort_id": "c1" }),
    };
    for step in [None, Some("assign_identity"), Some("preprocess")] {
        let e = dei.commit_transition(&up, &req(step)).unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{step:?}: {e:?}");
    }
    assert_eq!(dei.get_image(&id).unwrap().state, "raw");
}

#[test]
fn bad_payload_leaves_state_unchanged() {
    let dei = memory_store();
    let t = login(&dei, &ALL_CAPS);
    let id = upload(&dei, &t, 1, 7).remove(0);
    let digest = dei.state_digest();
    let e = dei
        .commit_transition(
            &t,
            &TransitionRequest {
                image_id: id,
                from: "raw".into(),
                to: "preprocessed".into(),
                step: None,
                payload: json!({ "fiducials": [[99.0, 1.0]] }),
            },
        )
        .unwrap_err();
    assert!(matches!(e, Error::Validation(_)));
    assert_eq!(dei.state_digest(), digest);
}

#[test]
fn image_round_trip_is_byte_identical() {
    let dei = memory_store();
    let t = login(&dei, &["upload"]);
    let bytes = pgm(42);
    let meta = ImageMetadata {
        image_id: Some("a".into()),
        view: Some("dorsal".into()),
        fiducials: vec![[3.0, 4.0]],
        ..ImageMetadata::default()
    };
    let id = dei.put_image(&t, &bytes, "synthetic", meta.clone()).unwrap();
    assert_eq!(id, "a");
    assert_eq!(dei.get_blob(&id).unwrap().as_slice(), bytes.as_slice());
    let rec = dei.get_image(&id).unwrap();
    assert_eq!((rec.width, rec.height), (16, 12));
    assert_eq!(rec.metadata, meta);
    assert_eq!(rec.state, "raw");
    assert_eq!(dei.put_image(&t, &bytes, "synthetic", meta.clone()).unwrap(), "a");
    let e = dei.put_image(&t, &pgm(43), "synthetic", meta).unwrap_err();
    assert!(matches!(e, Error::Conflict(_)));
    assert!(matches!(dei.get_image("missing").unwrap_err(), Error::NotFound(_)));
    let e = dei.put_image(&t, b"not an image", "synthetic", ImageMetadata::default()).unwrap_err();
    assert!(matches!(e, Error::Decode(_) | Error::Validation(_)), "{e:?}");
}

fn expected_order(list: &RankedList, w: &EnsembleWeights) -> Vec<String> {
    let mut scored: Vec<(usize, f64, String)> = list
        .entries
        .iter()
        .map(|e| {
            let (mut num, mut den) = (0.0, 0.0);
            for (m, s) in &e.scores {
                let wm = w.get(*m).unwrap();
                num += wm * s.normalized;
                den += wm;
            }
            (e.depth, num / den, e.candidate.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));
    scored.into_iter().map(|s| s.2).collect()
}

#[test]
fn rankings_follow_weights_over_stored_scores() {
    let dei = memory_store();
    let t = login(&dei, &ALL_CAPS);
    let ids = upload(&dei, &t, 101, 8);
    let query = ids[0].clone();
    let mut r = StdRng::seed_from_u64(3);
    let entries: Vec<RankedEntry> = ids[1..]
        .iter()
        .map(|c| {
            let mut scores = BTreeMap::new();
            scores.insert(MethodId::DescriptorCosine, MethodScore { raw: 0.0, normalized: r.gen() });
            let depth = if r.gen_bool(0.3) {
                scores.insert(MethodId::Ransac, MethodScore { raw: 0.0, normalized: r.gen() });
                2
            } else {
                1
            };
            RankedEntry {
                candidate: c.clone(),
                combined: 0.0,
                depth,
                scores,
            }
        })
        .collect();
    let list = RankedList {
        query: query.clone(),
        entries,
        stages: vec![
            StageAccount { method: MethodId::DescriptorCosine, scored: 100 },
            StageAccount { method: MethodId::Ransac, scored: 30 },
        ],
    };
    dei.put_scores(&t, &list).unwrap();
    let base = dei.get_rankings(&query, None, true).unwrap();
    assert_eq!(base, list.entries);

    let w: EnsembleWeights = serde_json::from_value(json!({ "descriptor_cosine": 0.25, "ransac": 0.75 })).unwrap();
    dei.put_weights(&t, w.clone()).unwrap();
    let got: Vec<String> = dei.get_rankings(&query, None, false).unwrap().into_iter().map(|e| e.candidate).collect();
    assert_eq!(got, expected_order(&list, &w));
    let top5 = dei.get_rankings(&query, Some(5), false).unwrap();
    assert_eq!(top5.len(), 5);
    assert!(dei.get_rankings(&ids[1], None, false).unwrap().is_empty());
    assert!(matches!(dei.get_rankings("nope", None, false).unwrap_err(), Error::NotFound(_)));
}

#[test]
fn scores_for_unknown_query_are_rejected() {
    let dei = memory_store();
    let t = login(&dei, &ALL_CAPS);
    let list = RankedList {
        query: "ghost".into(),
        entries: vec![],
        stages: vec![],
    };
    assert!(matches!(dei.put_scores(&t, &list).unwrap_err(), Error::NotFound(_)));
}

#[test]
fn double_submit_records_one_response() {
    let dei = memory_store();
    let t = login(&dei, &ALL_CAPS);
    let ids = upload(&dei, &t, 2, 11);
    let task = dei.create_task(&t, sloop_core::feedback::pair_key(&ids[0], &ids[1])).unwrap();
    assert!(matches!(
        dei.create_task(&t, sloop_core::feedback::pair_key(&ids[1], &ids[0])).unwrap_err(),
        Error::Conflict(_)
    ));
    let offered = dei.get_tasks(&t, "ann", 5).unwrap();
    assert_eq!(offered.len(), 1);
    dei.submit_response(&t, task, "ann", sloop_core::feedback::Label::Same).unwrap();
    let e = dei.submit_response(&t, task, "ann", sloop_core::feedback::Label::Same).unwrap_err();
    assert!(matches!(e, Error::Conflict(_)));
    assert_eq!(dei.task(task).unwrap().responses.len(), 1);
}

#[test]
fn random_transition_requests_only_walk_legal_paths() {
    let doc = r#"
name = "fuzz"
states = ["raw", "a", "b", "c", "indexed"]
edges = [
  { from = "raw", to = "a", step = "s1", executor = "machine", payload_schema = "none" },
  { from = "raw", to = "b", step = "s2", executor = "machine", payload_schema = "none" },
  { from = "a", to = "a", step = "s3", executor = "human", payload_schema = "none" },
  { from = "a", to = "c", step = "s4", executor = "machine", payload_schema = "none" },
  { from = "b", to = "c", step = "s5", executor = "human", payload_schema = "none" },
  { from = "c", to = "indexed", step = "s6", executor = "machine", payload_schema = "none" },
]
"#;
    let def = load_workflow(doc).unwrap();
    let states = def.states.clone();
    let steps: Vec<String> = def.edges.iter().map(|e| e.step.clone()).collect();
    let legal: BTreeSet<(String, String)> = def.edges.iter().map(|e| (e.from.clone(), e.to.clone())).collect();
    let dei = memory_store();
    dei.register_workflow(def.clone()).unwrap();
    let mut caps: Vec<&str> = vec!["upload"];
    caps.extend(steps.iter().map(String::as_str));
    dei.add_principal("fz", "pw", &caps).unwrap();
    let caps: Vec<String> = caps.iter().map(|c| c.to_string()).collect();
    let t = dei.authenticate("fz", "pw", &caps).unwrap().session_id;
    let mut r = StdRng::seed_from_u64(99);
    for trace in 0..1000u64 {
        let meta = ImageMetadata {
            image_id: Some(format!("f{trace}")),
            ..ImageMetadata::default()
        };
        let id = dei.put_image(&t, &pgm(trace % 7), "fuzz", meta).unwrap();
        for _ in 0..25 {
            let before = dei.get_image(&id).unwrap();
            let req = TransitionRequest {
                image_id: id.clone(),
                from: if r.gen_bool(0.7) { before.state.clone() } else { states[r.gen_range(0..states.len())].clone() },
                to: states[r.gen_range(0..states.len())].clone(),
                step: r.gen_bool(0.5).then(|| steps[r.gen_range(0..steps.len())].clone()),
                payload: json!({}),
            };
            match dei.commit_transition(&t, &req) {
                Ok(s) => {
                    assert_eq!(req.from, before.state);
                    assert!(legal.contains(&(req.from.clone(), req.to.clone())), "{req:?}");
                    assert_eq!(s.state, req.to);
                }
                Err(_) => assert_eq!(dei.get_image(&id).unwrap(), before),
            }
        }
        let rec = dei.get_image(&id).unwrap();
        assert_eq!(rec.history[0].state, "raw");
        for w in rec.history.windows(2) {
            assert!(legal.contains(&(w[0].state.clone(), w[1].state.clone())), "trace {trace}");
            assert!(w[0].entered_at <= w[1].entered_at);
        }
        assert_eq!(rec.history.last().unwrap().state, rec.state);
    }
}
