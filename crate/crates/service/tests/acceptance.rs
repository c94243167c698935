//! Acceptance suite. One PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails or overruns its time limit.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fusionforge::cli::write_dataset;
use fusionforge::jobs::Registry;
use fusionforge::pipeline::{self, MapRequest, SampleRequest, Silent, Target, TransitionRequest};
use fusionforge::store::{Sampler, SessionDir, Snapshot};
use fusionforge_core::fusion::dial_weights;
use fusionforge_core::mapping::{
    distance_matrix, map_reference, pair_alignment_gradient, pair_stress_gradient, resolve_dimension, stress,
    DimensionMode,
};
use fusionforge_core::metrics::{lambda_sweep, nnm};
use fusionforge_core::projection::{fit_local, project_all, LocalFit};
use fusionforge_core::synthetic::{latent_views, orthogonal_partitions, rigid_motion};
use fusionforge_core::{rng, DialState, FeatureMatrix, MappingOptions, Rows, WeightVector};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn session(ds: &fusionforge_core::Dataset, root: &Path, id: &str) -> (SessionDir, Snapshot) {
    let dir = SessionDir::new(root.join(id));
    let snap = pipeline::ingest(&dir, id, ds).unwrap();
    (dir, snap)
}

fn gradient_fidelity() -> Outcome {
    const STEP: f64 = 1e-6;
    let numeric = |target: f64, anchor: &[f64], moving: &[f64]| -> Vec<f64> {
        let energy = |x: &[f64]| 0.5 * (target - dist(anchor, x)).powi(2);
        (0..moving.len())
            .map(|d| {
                let mut plus = moving.to_vec();
                let mut minus = moving.to_vec();
                plus[d] += STEP;
                minus[d] -= STEP;
                (energy(&plus) - energy(&minus)) / (2.0 * STEP)
            })
            .collect()
    };
    let relative = |a: &[f64], n: &[f64]| {
        let scale = a.iter().chain(n).map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        dist(a, n) / scale
    };
    let mut rng = rng::seeded(2024);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for _ in 0..20 {
        let s = rng.random_range(2..=10);
        let m = rng.random_range(1..=3);
        let mut points = |k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let r = points(s);
        let reference = points(s);
        let mut g = vec![0.0; m];
        for i in 0..s {
            for j in 0..s {
                if i == j {
                    continue;
                }
                let delta = 0.5 + (i * s + j) as f64 / (s * s) as f64;
                if pair_stress_gradient(delta, &r[i], &r[j], &mut g).is_some() {
                    worst = worst.max(relative(&g, &numeric(delta, &r[i], &r[j])));
                    pairs += 1;
                }
                let dbar = dist(&reference[i], &reference[j]);
                if pair_alignment_gradient(dbar, &reference[i], &r[j], &mut g).is_some() {
                    worst = worst.max(relative(&g, &numeric(dbar, &reference[i], &r[j])));
                    pairs += 1;
                }
            }
        }
    }
    check(worst < 1e-4, format!("worst relative error {worst:.2e}"))?;
    Ok(format!("{pairs} pair terms, worst relative error {worst:.2e}"))
}

fn lambda_tradeoff() -> Outcome {
    let ds = latent_views(1000, 2, 0.02, 7).map_err(|e| e.to_string())?;
    let sample = fusionforge_core::sampling::unified_sample(&ds, 0).map_err(|e| e.to_string())?;
    let m = resolve_dimension(&sample, DimensionMode::MaxIntrinsic).map_err(|e| e.to_string())?;
    let base = MappingOptions { m, ..Default::default() };
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = lambda_sweep(&sample, &base, &grid, 5, 11).map_err(|e| e.to_string())?;
    let st: Vec<f64> = rows.iter().map(|r| r.stress.mean).collect();
    let al: Vec<f64> = rows.iter().map(|r| r.alignment.mean).collect();

    let mut optimum = 0.0;
    for f in &sample.per_feature_samples {
        let delta = distance_matrix(f);
        let best = (0..5)
            .map(|seed| {
                let opts = MappingOptions { lambda: 1.0, iterations: 5000, m, seed, ..Default::default() };
                stress(&delta, &map_reference(&delta, &opts).unwrap()).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        optimum += best / sample.p() as f64;
    }

    let detail = format!(
        "s={} m={m} stress {:?} alignment {:?} optimum {optimum:.2e}",
        sample.len(),
        st.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>(),
        al.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>()
    );
    check(st.windows(2).all(|w| w[1] <= w[0]), format!("stress not non-increasing; {detail}"))?;
    check(al.windows(2).all(|w| w[1] >= w[0]), format!("alignment not non-decreasing; {detail}"))?;
    check(al[0] <= 1e-3, format!("alignment at 0 is {:.2e}; {detail}", al[0]))?;
    check(st[4] <= 10.0 * optimum, format!("stress at 1 is {:.2e}; {detail}", st[4]))?;
    Ok(detail)
}

fn projection_correctness() -> Outcome {
    let rm = rigid_motion(2000, 2, 3).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..2000).step_by(40).collect();
    let s = rm.features.select_rows(&idx).map_err(|e| e.to_string())?;
    let r = rm.image.select_rows(&idx).map_err(|e| e.to_string())?;
    let v = project_all(&rm.features, &s, &r).map_err(|e| e.to_string())?;
    let worst = v.coords().iter().zip(rm.image.coords()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(worst < 1e-4, format!("max point error {worst:.2e}"))?;

    let mut defect: f64 = 0.0;
    let mut rng = rng::seeded(5);
    let mut fitted = 0;
    while fitted < 100 {
        let i = rng.random_range(0..2000);
        if let LocalFit::Affine(t) = fit_local(rm.features.row(i), &s, &r, Default::default()).map_err(|e| e.to_string())? {
            let mmt = &t.transform * t.transform.transpose();
            for a in 0..mmt.nrows() {
                for b in 0..mmt.ncols() {
                    let target = if a == b { 1.0 } else { 0.0 };
                    defect = defect.max((mmt[(a, b)] - target).abs());
                }
            }
            defect = defect.max(t.orthogonality_defect());
            fitted += 1;
        }
    }
    check(defect < 1e-6, format!("orthogonality deviation {defect:.2e}"))?;
    for (j, &i) in idx.iter().enumerate() {
        check(v.row(i) == r.row(j), format!("sample {i} not reproduced exactly"))?;
    }
    Ok(format!("max point error {worst:.2e}, orthogonality deviation {defect:.2e}"))
}

fn dial_algebra() -> Outcome {
    let mut rng = rng::seeded(17);
    for trial in 0..1000 {
        let p = rng.random_range(2..=8);
        let offset = rng.random_range(0.0..std::f64::consts::TAU);
        let anchors: Vec<[f64; 2]> = (0..p)
            .map(|i| {
                let a = offset + std::f64::consts::TAU * i as f64 / p as f64;
                [a.cos(), a.sin()]
            })
            .collect();
        let radius = rng.random_range(0.0f64..1.0).sqrt();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let d = DialState::new(anchors, [radius * angle.cos(), radius * angle.sin()]).map_err(|e| e.to_string())?;
        let w = dial_weights(&d);
        let a = w.alphas();
        let sum: f64 = a.iter().sum();
        check((sum - 1.0).abs() <= 1e-9, format!("trial {trial}: sum {sum}"))?;
        check(a.iter().all(|&x| x > 0.0), format!("trial {trial}: non-positive weight {a:?}"))?;
        let argmax = (0..p).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap();
        let nearest = d.nearest_anchor();
        check(
            argmax == nearest || a[argmax] == a[nearest],
            format!("trial {trial}: argmax {argmax} but nearest anchor {nearest}"),
        )?;
    }
    let hand = dial_weights(&DialState::new(vec![[1.0, 0.0], [-1.0, 0.0]], [1.0, 0.0]).map_err(|e| e.to_string())?);
    check(hand.alphas() == [0.9, 0.1], format!("hand case gave {:?}", hand.alphas()))?;
    Ok("1000 dial states, hand case (0.9, 0.1)".into())
}

fn nnm_direction() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = latent_views(1000, 3, 0.02, 11).map_err(|e| e.to_string())?;
    let (dir, snap) = session(&ds, tmp.path(), "nnm");
    let snap = pipeline::sample(&dir, &snap, &SampleRequest::default()).map_err(|e| e.to_string())?;
    let (snap, _) = pipeline::map(&dir, &snap, &MapRequest::default(), &Silent).map_err(|e| e.to_string())?;
    let report = pipeline::bench_nnm(&snap, 30, 0).map_err(|e| e.to_string())?;
    let detail = format!(
        "ours {:.4}, concatenation {:.4}, distance fusion {:.4}",
        report.mean_ours, report.mean_concat, report.mean_distance_fusion
    );
    check(
        report.mean_ours > report.mean_concat && report.mean_ours > report.mean_distance_fusion,
        detail.clone(),
    )?;
    Ok(detail)
}

fn nnm_oracle() -> Outcome {
    let mut rng = rng::seeded(31);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..60);
        let k = rng.random_range(1..20);
        let d = rng.random_range(1..6);
        let mut matrix = |rows: usize| {
            let v: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMatrix::new("x", rows, d, v).unwrap()
        };
        let full = matrix(n);
        let sample = matrix(k);
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..k {
                let mut sq = 0.0;
                for c in 0..d {
                    sq += (full.row(i)[c] - sample.row(j)[c]).powi(2);
                }
                best = best.min(sq.sqrt());
            }
            total += best;
        }
        let expected = 1.0 - total / n as f64;
        let got = nnm(&full, &sample).map_err(|e| e.to_string())?;
        worst = worst.max((got - expected).abs());
        let same = nnm(&full, &full).map_err(|e| e.to_string())?;
        check(same == 1.0, format!("sample = full gave {same}"))?;
    }
    check(worst <= 1e-12, format!("worst deviation {worst:.2e}"))?;
    Ok(format!("50 instances, worst deviation {worst:.2e}"))
}

fn clustering_application() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let g = orthogonal_partitions(600, 3, 0.05, 13).map_err(|e| e.to_string())?;
    let (dir, snap) = session(&g.dataset, tmp.path(), "partitions");
    let snap = pipeline::sample(&dir, &snap, &SampleRequest { seed: 1, ..Default::default() }).map_err(|e| e.to_string())?;
    let (snap, _) = pipeline::map(&dir, &snap, &MapRequest::default(), &Silent).map_err(|e| e.to_string())?;
    let w = WeightVector::uniform(2);
    let snap = pipeline::propagate(&dir, &snap, &w, &Silent).map_err(|e| e.to_string())?;
    let mut req = TransitionRequest {
        from: vec![1.0, 0.0],
        to: vec![0.0, 1.0],
        steps: 9,
        threshold: 0.1,
        on: Target::Full,
        bandwidth: None,
        quantile: fusionforge_core::analysis::DEFAULT_QUANTILE,
        seed: 0,
    };
    let t = pipeline::transitions(&snap, &req).map_err(|e| e.to_string())?;
    let ari_a = fusionforge_core::analysis::adjusted_rand_index(&t.steps[0].labels, &g.attribute_a);
    let ari_b = fusionforge_core::analysis::adjusted_rand_index(&t.steps[8].labels, &g.attribute_b);
    let detail = format!("first step ARI {ari_a:.3}, last step ARI {ari_b:.3}");
    check(t.steps.len() == 9, "expected 9 steps")?;
    check(ari_a >= 0.8 && ari_b >= 0.8, detail.clone())?;

    req.threshold = 0.0;
    let t0 = pipeline::transitions(&snap, &req).map_err(|e| e.to_string())?;
    for step in 0..t0.flows.len() {
        check(t0.retained(step) == t0.flows[step], format!("step {step}: threshold 0 dropped flows"))?;
        let sizes = t0.steps[step].group_sizes();
        let mut out = vec![0; sizes.len()];
        for f in &t0.flows[step] {
            out[f.source] += f.count;
        }
        check(out == sizes, format!("step {step}: outflows {out:?} vs group sizes {sizes:?}"))?;
    }
    Ok(format!("{detail}, flows conserved"))
}

fn latency_contract() -> Outcome {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let data = tempfile::tempdir().map_err(|e| e.to_string())?;
        let input = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ds = latent_views(3000, 3, 0.02, 21).map_err(|e| e.to_string())?;
        write_dataset(&ds, input.path()).map_err(|e| e.to_string())?;

        let registry = Arc::new(Registry::open(data.path()).map_err(|e| e.to_string())?);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        tokio::spawn(async move { axum::serve(listener, fusionforge::http::router(registry)).await });
        let client = reqwest::Client::new();
        let url = |p: &str| format!("http://{addr}{p}");
        let post = |path: String, body: serde_json::Value| {
            let req = client.post(url(&path)).json(&body);
            async move {
                let r = req.send().await.map_err(|e| e.to_string())?;
                let status = r.status();
                let v: serde_json::Value = r.json().await.map_err(|e| e.to_string())?;
                if status.is_success() {
                    Ok(v)
                } else {
                    Err(format!("{path}: {status} {v}"))
                }
            }
        };

        let created = post("/sessions".into(), serde_json::json!({ "manifest": input.path().join("manifest.toml") })).await?;
        let id = created["id"].as_str().unwrap().to_string();
        post(
            format!("/sessions/{id}/sample"),
            serde_json::json!({ "seed": 0, "sampler": Sampler::Random, "size": 2000 }),
        )
        .await?;
        let job = post(format!("/sessions/{id}/map"), serde_json::json!({ "m": 2, "seed": 0 })).await?;
        let jid = job["id"].as_str().unwrap().to_string();
        loop {
            let j: serde_json::Value = client
                .get(url(&format!("/jobs/{jid}")))
                .send()
                .await
                .map_err(|e| e.to_string())?
                .json()
                .await
                .map_err(|e| e.to_string())?;
            match j["status"].as_str() {
                Some("done") => break,
                Some("failed") => return Err(format!("mapping failed: {j}")),
                _ => tokio::time::sleep(Duration::from_millis(50)).await,
            }
        }

        let mut rng = rng::seeded(8);
        let mut times = Vec::with_capacity(100);
        for _ in 0..100 {
            let radius = rng.random_range(0.0f64..1.0).sqrt();
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let body = serde_json::json!({ "dial": { "x": radius * angle.cos(), "y": radius * angle.sin() } });
            let start = Instant::now();
            let eval = post(format!("/sessions/{id}/weights"), body).await?;
            times.push(start.elapsed());
            if eval["points"].as_array().map(Vec::len) != Some(2000) {
                return Err("response does not carry 2000 points".into());
            }
        }
        let worst = times.iter().max().copied().unwrap_or_default();
        let mean = times.iter().sum::<Duration>() / times.len() as u32;
        let detail = format!("100 calls at s=2000, worst {:.1} ms, mean {:.1} ms", ms(worst), ms(mean));
        check(worst < Duration::from_millis(50), detail.clone())?;
        Ok(detail)
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let run = |root: &Path| -> Result<(BTreeMap<String, Vec<u8>>, String, String), String> {
        let ds = latent_views(500, 3, 0.02, 3).map_err(|e| e.to_string())?;
        let (dir, snap) = session(&ds, root, "run");
        let snap = pipeline::sample(&dir, &snap, &SampleRequest { seed: 42, ..Default::default() }).map_err(|e| e.to_string())?;
        let req = MapRequest { m: Some(3), seed: 42, ..Default::default() };
        let (snap, _) = pipeline::map(&dir, &snap, &req, &Silent).map_err(|e| e.to_string())?;
        let snap = pipeline::propagate(&dir, &snap, &WeightVector::uniform(3), &Silent).map_err(|e| e.to_string())?;
        let nnm = pipeline::bench_nnm(&snap, 5, 42).map_err(|e| e.to_string())?.to_csv();
        let sweep = fusionforge_core::metrics::sweep_csv(
            &pipeline::bench_sweep(&snap, &[0.0, 0.5, 1.0], 2, 42).map_err(|e| e.to_string())?,
        );
        Ok((read_tree(dir.root()), nnm, sweep))
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run(a.path())?;
    let second = run(b.path())?;
    for (name, bytes) in &first.0 {
        check(second.0.get(name) == Some(bytes), format!("{name} differs between runs"))?;
    }
    check(first.0.len() == second.0.len(), "artifact sets differ")?;
    check(first.1 == second.1, "benchmark reports differ")?;
    check(first.2 == second.2, "sweep reports differ")?;
    Ok(format!("{} artifacts and both reports bit-identical", first.0.len()))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("gradient fidelity", Duration::from_secs(10), gradient_fidelity),
        ("lambda tradeoff", Duration::from_secs(120), lambda_tradeoff),
        ("projection correctness", Duration::from_secs(30), projection_correctness),
        ("dial algebra", Duration::from_secs(1), dial_algebra),
        ("nnm benchmark direction", Duration::from_secs(300), nnm_direction),
        ("nnm oracle", Duration::from_secs(60), nnm_oracle),
        ("clustering application", Duration::from_secs(120), clustering_application),
        ("interactive latency", Duration::from_secs(300), latency_contract),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failures = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs())),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
