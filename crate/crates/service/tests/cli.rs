use std::path::Path;
use std::process::{Command, Output};

use fusionforge::jobs::Registry;
use fusionforge::store::{SessionDir, SessionState};
use fusionforge_core::ingest::{read_lines, read_matrix};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let session = tmp.path().join("session");
    ok(&["synth", "partitions", "--out", p(&data), "--n", "300", "--views", "3", "--seed", "4"]);
    assert!(data.join("attribute_a.txt").exists());

    ok(&["ingest", "--manifest", p(&data.join("manifest.toml")), "--out", p(&session)]);
    let err = fails(&["map", "--session", p(&session), "--lambda", "0.5"]);
    assert!(err.contains("INGESTED"), "{err}");
    fails(&["ingest", "--manifest", p(&data.join("manifest.toml")), "--out", p(&session)]);

    ok(&["sample", "--session", p(&session), "--seed", "3"]);
    let idx: Vec<usize> = read_lines(&session.join("sample.idx"))
        .unwrap()
        .iter()
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    let s_a = read_matrix(session.join("S_view_a.fmat")).unwrap();
    assert_eq!(s_a.rows(), idx.len());

    let report = ok(&["map", "--session", p(&session), "--lambda", "0.4", "--m", "3", "--iters", "150", "--seed", "1"]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "feature,lambda,m,stress,alignment");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("view_a,0.4,3,"));
    assert_eq!(read_matrix(session.join("reference.fmat")).unwrap().dims(), 3);
    assert_eq!(read_matrix(session.join("display/R_view_b.fmat")).unwrap().dims(), 2);

    let fused = ok(&["fuse", "--session", p(&session), "--dial", "0,1"]);
    assert!(fused.contains("alphas"));
    assert_eq!(read_matrix(session.join("fused_sample.fmat")).unwrap().rows(), idx.len());
    fails(&["fuse", "--session", p(&session), "--weights", "0.5,0.5", "--on", "full"]);
    fails(&["fuse", "--session", p(&session), "--weights", "0.5,0.5", "--dial", "0,1"]);

    ok(&["propagate", "--session", p(&session), "--weights", "0.5,0.5"]);
    let full = read_matrix(session.join("fused.fmat")).unwrap();
    assert_eq!((full.rows(), full.dims()), (300, 3));
    fails(&["propagate", "--session", p(&session), "--weights", "0.5,0.5"]);

    ok(&["cluster", "--session", p(&session), "--weights", "1,0"]);
    let labels = read_lines(&session.join("clusters.txt")).unwrap();
    assert_eq!(labels.len(), 300);
    assert!(labels.iter().all(|l| l.parse::<usize>().is_ok()));

    ok(&["transitions", "--session", p(&session), "--from", "1,0", "--to", "0,1", "--steps", "3", "--threshold", "0"]);
    let flows = std::fs::read_to_string(session.join("flows.csv")).unwrap();
    assert!(flows.starts_with("step,source,target,count"));

    ok(&["heatmap", "--session", p(&session), "--size", "20"]);
    let order = read_lines(&session.join("order.idx")).unwrap();
    let mut sorted: Vec<usize> = order.iter().map(|l| l.parse().unwrap()).collect();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..idx.len()).collect::<Vec<_>>());

    let nnm = ok(&["bench", "nnm", "--session", p(&session), "--draws", "2"]);
    assert!(nnm.starts_with("draw,alphas,nnm_ours,nnm_concat,nnm_distance_fusion"));
    let sweep = ok(&["bench", "lambda-sweep", "--session", p(&session), "--grid", "0,1", "--repeats", "1"]);
    assert_eq!(sweep.lines().count(), 3);

    let snap = SessionDir::new(&session).load().unwrap();
    assert_eq!(snap.descriptor.state, SessionState::Propagated);
}

#[test]
fn cli_sessions_load_in_the_service() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("input");
    let root = tmp.path().join("sessions");
    let session = root.join("abc");
    ok(&["synth", "latent", "--out", p(&data), "--n", "200", "--views", "2"]);
    ok(&["ingest", "--manifest", p(&data.join("manifest.toml")), "--out", p(&session)]);
    ok(&["sample", "--session", p(&session), "--sampler", "random", "--size", "40", "--seed", "9"]);
    fails(&["sample", "--session", p(&session), "--seed", "9"]);

    let registry = Registry::open(&root).unwrap();
    let s = registry.session("abc").unwrap();
    let snap = s.snapshot();
    assert_eq!(snap.descriptor.state, SessionState::Sampled);
    assert_eq!(snap.sample().unwrap().len(), 40);
}

#[test]
fn sampler_arguments_are_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("input");
    let session = tmp.path().join("s");
    ok(&["synth", "latent", "--out", p(&data), "--n", "100", "--views", "2"]);
    ok(&["ingest", "--manifest", p(&data.join("manifest.toml")), "--out", p(&session)]);
    fails(&["sample", "--session", p(&session), "--sampler", "random"]);
    fails(&["sample", "--session", p(&session), "--size", "10"]);
    fails(&["map", "--session", p(&session), "--m", "2", "--m-mode", "max"]);
    fails(&["sample", "--session", p(&tmp.path().join("missing"))]);
}
