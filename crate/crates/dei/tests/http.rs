use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::json;
use sloop_core::experiment::AnnotatorMode;
use sloop_core::feedback::{pair_key, Label};
use sloop_core::grid::Grid;
use sloop_core::imageio::encode_pgm;
use sloop_core::synthpop::SyntheticSpec;
use sloop_core::workflow::builtin_workflow;
use sloop_dei::api::DeiApi;
use sloop_dei::clock::ManualClock;
use sloop_dei::ipe::MACHINE_STEPS;
use sloop_dei::nameservice::{self, Backoff, DeiDescriptor, NameService};
use sloop_dei::pipeline::{load_population, run_against, ExperimentConfig};
use sloop_dei::server::{router, spawn, ServerHandle};
use sloop_dei::store::{Dei, ImageMetadata, TransitionRequest};
use sloop_dei::HttpDei;

const CAPS: [&str; 5] = ["upload", "annotate", "coordinate", "preprocess", "verify"];

fn pgm(seed: u64) -> Vec<u8> {
    let mut r = StdRng::seed_from_u64(seed);
    encode_pgm(&Grid::from_fn(10, 14, |_, _| r.gen::<f64>()))
}

/// The in-process store behind the server. Calls go through `Dei` itself
/// rather than the `DeiApi` impl on `Arc`.
fn served() -> (Arc<Dei>, ServerHandle) {
    let dei = Arc::new(Dei::in_memory());
    dei.register_workflow(builtin_workflow("synthetic").unwrap()).unwrap();
    dei.add_principal("op", "pw", &CAPS).unwrap();
    let server = spawn(router(dei.clone()), "127.0.0.1:0").unwrap();
    (dei, server)
}

fn caps(c: &[&str]) -> Vec<String> {
    c.iter().map(|s| s.to_string()).collect()
}

#[test]
fn http_client_sees_what_the_store_holds() {
    let (dei, server) = served();
    let api = HttpDei::new(&server.url()).unwrap();
    let t = api.authenticate("op", "pw", &caps(&CAPS)).unwrap().session_id;
    let bytes = pgm(1);
    let meta = ImageMetadata {
        image_id: Some("h1".into()),
        location: Some("reef".into()),
        fiducials: vec![[2.0, 3.0], [5.5, 1.0]],
        ..ImageMetadata::default()
    };
    assert_eq!(api.put_image(&t, &bytes, "synthetic", &meta).unwrap(), "h1");
    assert_eq!(api.get_blob("h1").unwrap(), bytes);
    assert_eq!(api.get_image("h1").unwrap(), dei.get_image("h1").unwrap());
    assert_eq!(api.list_images(Some("synthetic")).unwrap().len(), 1);
    assert!(api.list_images(Some("other")).unwrap().is_empty());
    assert_eq!(api.workflow("synthetic").unwrap(), dei.workflow("synthetic").unwrap());

    let work = api.poll_work(&t, 5).unwrap();
    assert_eq!(work.len(), 1);
    assert!(api.poll_work(&t, 5).unwrap().is_empty());
    let s = api
        .commit_transition(
            &t,
            &TransitionRequest {
                image_id: "h1".into(),
                from: "raw".into(),
                to: "preprocessed".into(),
                step: Some("preprocess".into()),
                payload: json!({ "fiducials": [[1.0, 1.0]] }),
            },
        )
        .unwrap();
    assert_eq!(s.state, "preprocessed");
    assert_eq!(dei.get_image("h1").unwrap().state, "preprocessed");
    assert!(api.rankings("h1", None, false).unwrap().entries.is_empty());
    assert_eq!(api.metrics().unwrap(), Dei::metrics(&dei));
}

#[test]
fn errors_map_to_status_codes() {
    let (dei, server) = served();
    let t = dei.authenticate("op", "pw", &caps(&["upload", "annotate"])).unwrap().session_id;
    let url = |p: &str| format!("{}/api/v1{p}", server.url());
    let c = Client::new();
    let status = |rb: reqwest::blocking::RequestBuilder| rb.send().unwrap().status();

    assert_eq!(status(c.get(url("/work"))), StatusCode::UNAUTHORIZED);
    assert_eq!(status(c.get(url("/work")).bearer_auth("bogus")), StatusCode::UNAUTHORIZED);
    assert_eq!(
        status(c.post(url("/auth")).json(&json!({ "principal": "op", "secret": "no", "capabilities": ["upload"] }))),
        StatusCode::UNAUTHORIZED
    );
    assert_eq!(status(c.get(url("/images/nothing"))), StatusCode::NOT_FOUND);
    assert_eq!(status(c.put(url("/weights")).bearer_auth(&t).json(&json!({ "ransac": 1.0 }))), StatusCode::FORBIDDEN);

    let api = HttpDei::new(&server.url()).unwrap();
    api.put_image(&t, &pgm(2), "synthetic", &ImageMetadata { image_id: Some("x".into()), ..Default::default() }).unwrap();
    let r = c
        .post(url("/transitions"))
        .bearer_auth(&t)
        .json(&json!({ "image_id": "x", "from": "raw", "to": "indexed" }))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: serde_json::Value = r.json().unwrap();
    assert_eq!(body["error"], "validation");

    let e = api.put_image(&t, &pgm(3), "synthetic", &ImageMetadata { image_id: Some("x".into()), ..Default::default() }).unwrap_err();
    assert!(matches!(e, sloop_core::Error::Conflict(_)), "{e:?}");
}

#[test]
fn concurrent_double_submit_keeps_one_response() {
    let (dei, server) = served();
    let t = dei.authenticate("op", "pw", &caps(&CAPS)).unwrap().session_id;
    for i in 0..2 {
        Dei::put_image(&dei, &t, &pgm(10 + i), "synthetic", ImageMetadata { image_id: Some(format!("p{i}")), ..Default::default() })
            .unwrap();
    }
    let task = Dei::create_task(&dei, &t, pair_key("p0", "p1")).unwrap();
    let api = HttpDei::new(&server.url()).unwrap();
    assert_eq!(api.get_tasks(&t, "ann", 1).unwrap().len(), 1);
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let api = api.clone();
            let t = t.clone();
            thread::spawn(move || api.submit_response(&t, task, "ann", Label::Same))
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
    assert!(results
        .iter()
        .filter_map(|r| r.as_ref().err())
        .all(|e| matches!(e, sloop_core::Error::Conflict(_))));
    assert_eq!(dei.task(task).unwrap().responses.len(), 1);
}

#[test]
fn name_service_lists_two_deis() {
    let ns = Arc::new(NameService::new(ManualClock::new(100)));
    let ns_server = spawn(nameservice::router(ns.clone()), "127.0.0.1:0").unwrap();
    let (_, a) = served();
    let b_dei = Arc::new(Dei::in_memory());
    b_dei.register_workflow(builtin_workflow("default").unwrap()).unwrap();
    let b = spawn(router(b_dei), "127.0.0.1:0").unwrap();
    for (name, server, wf) in [("a", &a, "synthetic"), ("b", &b, "default")] {
        let d = DeiDescriptor {
            name: name.into(),
            address: server.url(),
            workflows: vec![wf.into()],
        };
        assert!(nameservice::register_dei(&ns_server.url(), &d, Backoff::default()).unwrap().created);
        assert!(!nameservice::register_dei(&ns_server.url(), &d, Backoff::default()).unwrap().created);
    }
    let listed = nameservice::list_deis(&ns_server.url()).unwrap();
    assert_eq!(listed.len(), 2);
    let b_url = ns.find("default").unwrap().address;
    assert_eq!(b_url, b.url());
    let wf = HttpDei::new(&b_url).unwrap().workflow("default").unwrap();
    assert_eq!(wf.name, "default");
    assert!(HttpDei::new(&ns.find("synthetic").unwrap().address).unwrap().workflow("default").is_err());
}

#[test]
fn registration_gives_up_when_nobody_listens() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let d = DeiDescriptor {
        name: "lonely".into(),
        address: "http://127.0.0.1:1".into(),
        workflows: vec!["default".into()],
    };
    let backoff = Backoff {
        attempts: 2,
        initial: Duration::from_millis(10),
        max: Duration::from_millis(20),
    };
    let e = nameservice::register_dei(&format!("http://127.0.0.1:{port}"), &d, backoff).unwrap_err();
    assert!(matches!(e, sloop_core::Error::Unavailable(_)));
}

#[test]
fn live_annotators_are_waited_for() {
    let mut cfg = ExperimentConfig {
        synthetic: SyntheticSpec {
            n_individuals: 5,
            sightings_per_individual: 3,
            ..SyntheticSpec::default()
        },
        use_cnn: false,
        rho: 0.5,
        ..ExperimentConfig::default()
    }
    .with_seed(21);
    cfg.feedback.iterations = 1;
    cfg.feedback.budget_fraction = 0.05;
    cfg.feedback.annotators = AnnotatorMode::Live;
    let truth = load_population(&cfg).unwrap().truth();

    let dei = Arc::new(Dei::in_memory());
    dei.register_workflow(builtin_workflow("synthetic").unwrap()).unwrap();
    dei.add_principal("ipe", &cfg.secret, &MACHINE_STEPS).unwrap();
    dei.add_principal("coord", &cfg.secret, &["upload", "coordinate", "annotate", "verify"]).unwrap();
    dei.add_principal("people", "p", &["annotate"]).unwrap();

    let stop = Arc::new(AtomicBool::new(false));
    let delay = Duration::from_millis(1500);
    let answered = {
        let dei = dei.clone();
        let stop = stop.clone();
        thread::spawn(move || {
            let t = dei.authenticate("people", "p", &caps(&["annotate"])).unwrap().session_id;
            thread::sleep(delay);
            let mut n = 0;
            while !stop.load(Ordering::SeqCst) {
                for a in ["ann-0", "ann-1", "ann-2"] {
                    for task in dei.get_tasks(&t, a, 1).unwrap() {
                        let label = if truth[&task.pair.0] == truth[&task.pair.1] { Label::Same } else { Label::Different };
                        if dei.submit_response(&t, task.task_id, a, label).is_ok() {
                            n += 1;
                        }
                    }
                }
                thread::sleep(Duration::from_millis(20));
            }
            n
        })
    };
    let start = Instant::now();
    let report = run_against(dei.clone(), &cfg, "ipe", "coord").unwrap();
    stop.store(true, Ordering::SeqCst);
    let n = answered.join().unwrap();
    assert!(start.elapsed() >= delay);
    assert!(n > 0);
    assert!(report.rows[1].pairs_verified > 0);
    assert!(Dei::list_tasks(&dei).iter().all(|t| t.consensus.is_some()));
    assert!(report.all_indexed());
}
