use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;
use sloop_core::feedback::{pair_key, Label};
use sloop_core::grid::Grid;
use sloop_core::imageio::encode_pgm;
use sloop_core::workflow::builtin_workflow;
use sloop_dei::clock::ManualClock;
use sloop_dei::store::{Dei, DeiConfig, ImageMetadata, TransitionRequest};

const CAPS: [&str; 4] = ["upload", "annotate", "coordinate", "preprocess"];

fn config(dir: &Path) -> DeiConfig {
    DeiConfig {
        data_dir: Some(dir.to_path_buf()),
        fsync: false,
        ..DeiConfig::default()
    }
}

fn open(dir: &Path) -> Dei {
    Dei::open(config(dir), ManualClock::new(5_000)).unwrap()
}

fn pgm(seed: u64) -> Vec<u8> {
    let mut r = StdRng::seed_from_u64(seed);
    encode_pgm(&Grid::from_fn(8, 8, |_, _| r.gen::<f64>()))
}

/// Runs a mixed workload and returns the state digest after each logged
/// commit, indexed by the number of log entries behind it. Calls that write
/// several entries leave the inner ones unknown.
fn workload(dei: &Dei) -> Vec<Option<String>> {
    let mut digests = vec![Some(dei.state_digest())];
    let mut mark = |d: &Dei| {
        while digests.len() < d.last_seq() as usize {
            digests.push(None);
        }
        if digests.len() == d.last_seq() as usize {
            digests.push(Some(d.state_digest()));
        }
    };
    dei.register_workflow(builtin_workflow("synthetic").unwrap()).unwrap();
    mark(dei);
    dei.add_principal("op", "pw", &CAPS).unwrap();
    mark(dei);
    let caps: Vec<String> = CAPS.iter().map(|c| c.to_string()).collect();
    let t = dei.authenticate("op", "pw", &caps).unwrap().session_id;
    mark(dei);
    let mut ids = Vec::new();
    for i in 0..12u64 {
        let meta = ImageMetadata {
            image_id: Some(format!("d{i}")),
            ..ImageMetadata::default()
        };
        ids.push(dei.put_image(&t, &pgm(i), "synthetic", meta).unwrap());
        mark(dei);
    }
    for _ in 0..3 {
        dei.poll_work(&t, 2).unwrap();
        mark(dei);
    }
    for id in &ids[..6] {
        dei.commit_transition(
            &t,
            &TransitionRequest {
                image_id: id.clone(),
                from: "raw".into(),
                to: "preprocessed".into(),
                step: None,
                payload: json!({ "fiducials": [] }),
            },
        )
        .unwrap();
        mark(dei);
    }
    for w in ids.windows(2).take(5) {
        dei.create_task(&t, pair_key(&w[0], &w[1])).unwrap();
        mark(dei);
    }
    for a in ["x", "y"] {
        for task in dei.get_tasks(&t, a, 3).unwrap() {
            mark(dei);
            dei.submit_response(&t, task.task_id, a, Label::Different).unwrap();
        }
        mark(dei);
    }
    digests
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            fs::copy(e.path(), dst).unwrap();
        }
    }
}

#[test]
fn reopen_restores_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let digests = {
        let dei = open(dir.path());
        workload(&dei)
    };
    let dei = open(dir.path());
    assert_eq!(Some(dei.state_digest()), *digests.last().unwrap());
    assert_eq!(dei.get_blob("d3").unwrap().as_slice(), pgm(3).as_slice());
}

#[test]
fn crash_at_any_byte_recovers_the_committed_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let digests = {
        let dei = open(dir.path());
        workload(&dei)
    };
    let log = fs::read(dir.path().join("txlog.jsonl")).unwrap();
    let ends: Vec<usize> = log.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1).collect();
    assert_eq!(ends.len() + 1, digests.len());
    let mut r = StdRng::seed_from_u64(17);
    for point in 0..100 {
        let cut = match point {
            0 => 0,
            1 => log.len(),
            _ => r.gen_range(0..log.len()),
        };
        let crash = tempfile::tempdir().unwrap();
        copy_dir(dir.path(), crash.path());
        fs::write(crash.path().join("txlog.jsonl"), &log[..cut]).unwrap();
        let whole = ends.iter().filter(|&&e| e <= cut).count();
        let dei = open(crash.path());
        if let Some(d) = &digests[whole] {
            assert_eq!(&dei.state_digest(), d, "cut at byte {cut}");
        }
        assert_eq!(dei.last_seq() as usize, whole);
        // The torn tail is gone and new commits follow the recovered prefix.
        assert_eq!(fs::metadata(crash.path().join("txlog.jsonl")).unwrap().len() as usize, ends.get(whole.wrapping_sub(1)).copied().unwrap_or(0));
        if whole >= 2 {
            dei.add_principal("late", "pw", &["upload"]).unwrap();
            drop(dei);
            let again = open(crash.path());
            assert_eq!(again.last_seq() as usize, whole + 1);
            assert!(again.state().principals.contains_key("late"));
        }
    }
}

#[test]
fn bad_checksum_stops_replay_at_that_entry() {
    let dir = tempfile::tempdir().unwrap();
    let digests = {
        let dei = open(dir.path());
        workload(&dei)
    };
    let path = dir.path().join("txlog.jsonl");
    let log = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    let k = (lines.len() / 2..lines.len()).find(|&k| digests[k].is_some()).unwrap();
    let v: serde_json::Value = serde_json::from_str(lines[k]).unwrap();
    let crc = v["checksum"].as_u64().expect("entries carry a numeric checksum");
    let tampered = lines[k].replace(&format!("\"checksum\":{crc}"), &format!("\"checksum\":{}", crc ^ 1));
    assert_ne!(tampered, lines[k]);
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        out.push_str(if i == k { &tampered } else { l });
        out.push('\n');
    }
    fs::write(&path, out).unwrap();
    let dei = open(dir.path());
    assert_eq!(Some(dei.state_digest()), digests[k]);
    assert_eq!(dei.last_seq() as usize, k);
}

#[test]
fn snapshot_then_log_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let final_digest = {
        let dei = open(dir.path());
        workload(&dei);
        dei.snapshot().unwrap();
        assert_eq!(fs::metadata(dir.path().join("txlog.jsonl")).unwrap().len(), 0);
        dei.add_principal("after", "pw", &["upload"]).unwrap();
        dei.state_digest()
    };
    let dei = open(dir.path());
    assert_eq!(dei.state_digest(), final_digest);
    assert!(dei.state().principals.contains_key("after"));
}

#[test]
fn periodic_snapshots_keep_the_state() {
    let plain = tempfile::tempdir().unwrap();
    let snapped = tempfile::tempdir().unwrap();
    let a = open(plain.path());
    workload(&a);
    let mut cfg = config(snapped.path());
    cfg.snapshot_every = Some(4);
    let b = Dei::open(cfg.clone(), ManualClock::new(5_000)).unwrap();
    let digests = workload(&b);
    let reopened = Dei::open(cfg, ManualClock::new(5_000)).unwrap();
    assert_eq!(Some(reopened.state_digest()), *digests.last().unwrap());
    // Session tokens are random; everything else matches the unsnapshotted run.
    let strip = |d: &Dei| {
        let mut s = d.state();
        s.sessions.clear();
        for w in s.work.values_mut() {
            w.claimed_by = None;
        }
        serde_json::to_string(&s).unwrap()
    };
    assert_eq!(strip(&a), strip(&reopened));
}
