//! Acceptance checks A1 to A9, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed; the process
//! exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rxf_core::bench::BenchReport;
use rxf_core::dataset::{
    Dataset, DatasetManifest, EnvironmentEntry, Mode, QueryEntry, Split, StreamBuilder, FORMAT_TAG, IMAGE_STREAMS,
    PHRASES, TEXT_STREAMS,
};
use rxf_core::encoders::{init_params, EncoderConfig, ImageBatch, TextBatch};
use rxf_core::eval::{evaluate_with, rank_images, EmbeddedImages, MetricsReport, ScoreRecord, TableScorer};
use rxf_core::labeler::{label_dataset, LabelConfig, OracleJudge, ShortlistScorer};
use rxf_core::losses::{
    drc_loss, infonce_loss, variant_loss, BatchPairing, DrcConfig, LossKind, LossSpec, Variant, SOFT_ALPHA,
};
use rxf_core::synth::{generate, SynthConfig};
use rxf_core::trainer::{batch_gradients, batch_loss};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// A1

fn small_encoder(ds: &Dataset) -> EncoderConfig {
    let mut c = EncoderConfig::default();
    c.fit_to(ds).unwrap();
    c.image.d_model = 8;
    c.text.d_model = 8;
    c.image.n_heads = 2;
    c.text.n_heads = 2;
    c.image.d_ff = 8;
    c.text.d_ff = 8;
    c.image.d_sgm = 6;
    c.image.d_sog = 6;
    c.image.d_h = 6;
    c.text.d_mode = 4;
    c.image.d_emb = 8;
    c.text.d_emb = 8;
    c
}

fn gradient_check() -> Outcome {
    const SEEDS: u64 = 20;
    const H: f64 = 1e-6;
    const REL_TOL: f64 = 1e-4;
    // below this both sides are rounding noise of the central difference
    const ABS_FLOOR: f64 = 1e-8;
    let start = Instant::now();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        let data = generate(&SynthConfig {
            train_envs: 1,
            validation_envs: 0,
            test_envs: 1,
            images_per_env: 8,
            clusters_per_env: 2,
            instructions_per_env: 2,
            stream_dim: 6,
            latent_dim: 4,
            seed,
            map_seed: seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let ds = &data.train;
        let enc = small_encoder(ds);
        let qids: Vec<String> = ds.queries().iter().take(4).map(|q| q.query_id.clone()).collect();
        let imgs: Vec<String> = qids.iter().map(|q| ds.query(q).unwrap().gt_image_id.clone()).collect();
        let texts = TextBatch::<f64>::from_dataset(ds, &qids, None, &enc.text).unwrap();
        let images = ImageBatch::<f64>::from_dataset(ds, &imgs, &enc.image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mask: Vec<bool> = (0..16).map(|k| k % 5 != 0 && rng.gen_bool(0.3)).collect();
        let ps = init_params::<f64>(&enc, seed).unwrap();
        for kind in LossKind::ALL {
            let spec = LossSpec {
                kind,
                ..LossSpec::default()
            };
            let (_, grads) = batch_gradients(&ps, &enc, &images, &texts, mask.clone(), &spec).unwrap();
            for (name, value) in ps.iter() {
                let g = grads.get(name).unwrap();
                for _ in 0..2 {
                    let i = rng.gen_range(0..value.len());
                    let x = value.data()[i];
                    let mut p = ps.clone();
                    p.set_coord(name, i, x + H).unwrap();
                    let up = batch_loss(&p, &enc, &images, &texts, mask.clone(), &spec).unwrap().total;
                    p.set_coord(name, i, x - H).unwrap();
                    let down = batch_loss(&p, &enc, &images, &texts, mask.clone(), &spec).unwrap().total;
                    let numeric = (up - down) / (2.0 * H);
                    let analytic = g.data()[i];
                    let diff = (numeric - analytic).abs();
                    let rel = diff / numeric.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
                    checked += 1;
                    if diff > ABS_FLOOR {
                        worst = worst.max(rel);
                        if rel > REL_TOL {
                            failures.push(format!("seed {seed} {kind} {name}[{i}]: {analytic:e} vs {numeric:e}"));
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let mut detail = format!(
        "{checked} coordinates, {SEEDS} seeds x {} losses, worst rel err {worst:.2e}, {secs:.1}s",
        LossKind::ALL.len()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    outcome(pass, detail)
}

// A2

struct Brute {
    l_p: f64,
    l_up: f64,
    l_n: f64,
    total: f64,
}

/// Direct summation of the relaxed-contrastive terms; `up` scores one
/// unlabeled-positive similarity, `None` drops the term.
fn brute_relaxed(n: usize, s: &[f64], m: &[bool], up: Option<&dyn Fn(f64) -> f64>, gamma: f64, lambda: f64) -> Brute {
    let (mut l_p, mut l_up, mut l_n) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = s[i * n + j];
            if i == j {
                l_p += (1.0 - v).powi(2);
            } else if m[i * n + j] {
                if let Some(f) = up {
                    l_up += f(v);
                }
            } else if v > 0.0 {
                l_n += v * v;
            }
        }
    }
    let g = if up.is_some() { gamma } else { 0.0 };
    Brute {
        l_p,
        l_up,
        l_n,
        total: l_p + g * l_up + lambda * l_n,
    }
}

fn brute_infonce(n: usize, s: &[f64], t: f64) -> f64 {
    (0..n)
        .map(|i| {
            let z: f64 = (0..n).map(|j| (s[i * n + j] / t).exp()).sum();
            -((s[i * n + i] / t).exp() / z).ln()
        })
        .sum()
}

fn loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=12);
        let s: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let m: Vec<bool> = (0..n * n).map(|k| k % (n + 1) != 0 && rng.gen_bool(0.25)).collect();
        let cfg = DrcConfig {
            alpha: rng.gen_range(0.05..=1.0),
            gamma: rng.gen_range(0.0..3.0),
            lambda: rng.gen_range(0.0..3.0),
        };
        let t = rng.gen_range(0.02..1.0);
        let batch = BatchPairing::new(n, s.clone(), m.clone()).unwrap();
        let hinge = |a: f64| move |v: f64| (a - v).max(0.0).powi(2);
        let pull = |v: f64| (1.0 - v).powi(2);
        let cases: [(rxf_core::losses::LossOutput, Brute); 4] = [
            (drc_loss(&batch, &cfg).unwrap(), brute_relaxed(n, &s, &m, Some(&hinge(cfg.alpha)), cfg.gamma, cfg.lambda)),
            (
                variant_loss(&batch, &cfg, Variant::RecoRelaxedNegatives).unwrap(),
                brute_relaxed(n, &s, &m, None, cfg.gamma, cfg.lambda),
            ),
            (
                variant_loss(&batch, &cfg, Variant::UnlabeledAsPositive).unwrap(),
                brute_relaxed(n, &s, &m, Some(&pull), cfg.gamma, cfg.lambda),
            ),
            (
                variant_loss(&batch, &cfg, Variant::SoftAlpha).unwrap(),
                brute_relaxed(n, &s, &m, Some(&hinge(SOFT_ALPHA)), cfg.gamma, cfg.lambda),
            ),
        ];
        for (got, want) in &cases {
            let t = &got.terms;
            for (a, b) in [(t.l_p, want.l_p), (t.l_n, want.l_n), (t.total, want.total)] {
                worst = worst.max((a - b).abs());
            }
            checks += 1;
        }
        // l_up is only reported when scored
        worst = worst.max((cases[0].0.terms.l_up - cases[0].1.l_up).abs());
        let nce = infonce_loss(&batch, t).unwrap().terms.total;
        worst = worst.max((nce - brute_infonce(n, &s, t)).abs());
        checks += 1;
    }
    outcome(worst <= 1e-6, format!("100 batches, {checks} loss evaluations, max abs diff {worst:.2e}"))
}

// A3, A4, A7, A9 (bench part)

fn run_bench(dir: &Path, name: &str) -> Result<(Vec<u8>, f64), String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rxf"))
        .args(["bench", "--out", name])
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let bytes = std::fs::read(dir.join(name)).map_err(|e| e.to_string())?;
    Ok((bytes, start.elapsed().as_secs_f64()))
}

fn directional(report: &BenchReport) -> Outcome {
    let drc = report.result(LossKind::Drc).unwrap();
    let nce = report.result(LossKind::InfoNce).unwrap();
    let paired = report
        .paired
        .iter()
        .find(|p| p.other == LossKind::InfoNce)
        .unwrap();
    let (a, b) = (drc.mean_at(10).unwrap(), nce.mean_at(10).unwrap());
    let seeds = report.seeds.len();
    let pass = a > b && paired.wins >= 4 && seeds == 5 && paired.k == 10;
    outcome(
        pass,
        format!(
            "R@10 drc {a:.4} vs infonce {b:.4}, drc ahead in {}/{seeds} seeds",
            paired.wins
        ),
    )
}

fn ablations(report: &BenchReport) -> Outcome {
    let drc = report.result(LossKind::Drc).unwrap().mean_at(10).unwrap();
    let mut pass = true;
    let mut parts = vec![format!("drc {drc:.4}")];
    for kind in [LossKind::UnlabeledAsPositive, LossKind::SoftAlpha] {
        let m = report.result(kind).unwrap().mean_at(10).unwrap();
        pass &= m <= drc;
        parts.push(format!("{kind} {m:.4}"));
    }
    outcome(pass, format!("R@10 {}", parts.join(", ")))
}

// A5

fn fixture(envs: &[(usize, usize)]) -> Dataset {
    let mut b = StreamBuilder::new();
    let mut environments = Vec::new();
    let mut queries = Vec::new();
    for (e, &(images, nq)) in envs.iter().enumerate() {
        let image_ids: Vec<String> = (0..images).map(|i| format!("env{e}-img{i}")).collect();
        for id in &image_ids {
            for s in IMAGE_STREAMS {
                b.push(s, id, &[1.0, 0.0]).unwrap();
            }
        }
        let query_ids: Vec<String> = (0..nq).map(|q| format!("env{e}-q{q}")).collect();
        for (q, id) in query_ids.iter().enumerate() {
            for s in TEXT_STREAMS {
                b.push(s, id, &[0.0, 1.0]).unwrap();
            }
            queries.push(QueryEntry {
                query_id: id.clone(),
                instruction_id: None,
                env_id: format!("env{e}"),
                mode: if q % 2 == 0 { Mode::Target } else { Mode::Receptacle },
                gt_image_id: image_ids[q % images].clone(),
                text: None,
            });
        }
        environments.push(EnvironmentEntry {
            env_id: format!("env{e}"),
            image_ids,
            query_ids,
        });
    }
    b.declare(PHRASES, 2);
    let schema: BTreeMap<String, usize> = IMAGE_STREAMS
        .iter()
        .chain(&TEXT_STREAMS)
        .chain([&PHRASES])
        .map(|s| (s.to_string(), 2))
        .collect();
    let manifest = DatasetManifest {
        format: FORMAT_TAG.into(),
        dataset_id: "acceptance-fixture".into(),
        split: Split::Test,
        stream_schema: schema,
        image_streams: IMAGE_STREAMS.iter().map(|s| s.to_string()).collect(),
        text_streams: TEXT_STREAMS.iter().map(|s| s.to_string()).collect(),
        phrase_stream: Some(PHRASES.into()),
        environments,
        queries,
        image_files: BTreeMap::new(),
    };
    Dataset::new(manifest, b.build().unwrap()).unwrap()
}

/// Recall@K by re-sorting the raw score dump: per query, count hits; per
/// environment, average queries; then average environments.
fn brute_recall(ds: &Dataset, dump: &[ScoreRecord], k: usize) -> f64 {
    let mut env_means = Vec::new();
    for env in ds.environments() {
        if env.query_ids.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        for q in &env.query_ids {
            let gt = &ds.query(q).unwrap().gt_image_id;
            let mut rows: Vec<&ScoreRecord> = dump.iter().filter(|r| &r.query_id == q).collect();
            rows.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
            let rank = rows.iter().position(|r| &r.image_id == gt).unwrap() + 1;
            hits += usize::from(rank <= k);
        }
        env_means.push(hits as f64 / env.query_ids.len() as f64);
    }
    env_means.iter().sum::<f64>() / env_means.len() as f64
}

fn score_dump(ds: &Dataset, rng: &mut ChaCha8Rng) -> Vec<ScoreRecord> {
    let mut dump = Vec::new();
    for env in ds.environments() {
        for q in &env.query_ids {
            for img in &env.image_ids {
                // coarse grid so ties occur
                let score = f64::from(rng.gen_range(-4i32..=4)) / 4.0;
                dump.push(ScoreRecord {
                    query_id: q.clone(),
                    image_id: img.clone(),
                    score,
                });
            }
        }
    }
    dump
}

fn recall_protocol() -> Outcome {
    let ds = fixture(&[(5, 3), (9, 4), (3, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for trial in 0..50 {
        let dump = score_dump(&ds, &mut rng);
        let ks: Vec<usize> = (1..=9).collect();
        let (report, _) = evaluate_with(&ds, &TableScorer::new(dump.clone()), &ks).unwrap();
        for r in &report.recall {
            compared += 1;
            let want = brute_recall(&ds, &dump, r.k);
            if r.recall != want {
                mismatches.push(format!("trial {trial} k {}: {} vs {want}", r.k, r.recall));
            }
        }
    }

    // env0: 1 of 1 hit; env1: 1 of 2 hits -> 0.75, not the pooled 2/3
    let two = fixture(&[(3, 1), (4, 2)]);
    let rec = |q: &str, img: &str, score: f64| ScoreRecord {
        query_id: q.into(),
        image_id: img.into(),
        score,
    };
    let dump = vec![
        rec("env0-q0", "env0-img0", 0.9),
        rec("env0-q0", "env0-img1", 0.1),
        rec("env0-q0", "env0-img2", 0.2),
        rec("env1-q0", "env1-img0", 0.8),
        rec("env1-q0", "env1-img1", 0.3),
        rec("env1-q0", "env1-img2", 0.1),
        rec("env1-q0", "env1-img3", 0.0),
        rec("env1-q1", "env1-img0", 0.9),
        rec("env1-q1", "env1-img1", 0.1),
        rec("env1-q1", "env1-img2", 0.5),
        rec("env1-q1", "env1-img3", 0.2),
    ];
    let (r, _) = evaluate_with(&two, &TableScorer::new(dump), &[1]).unwrap();
    let weighted = r.recall_at(1).unwrap();
    let pass = mismatches.is_empty() && weighted == 0.75;
    let mut detail = format!("{compared} (report, K) values equal brute force; 2-env mean {weighted}");
    if let Some(m) = mismatches.first() {
        detail.push_str(&format!("; {} mismatches, first: {m}", mismatches.len()));
    }
    outcome(pass, detail)
}

// A6

fn labeler_fidelity() -> Outcome {
    let mut shortlisted = 0usize;
    let mut recovered = 0usize;
    let mut gt_pairs = 0usize;
    for seed in 0..5 {
        let data = generate(&SynthConfig {
            seed,
            map_seed: seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let judge = OracleJudge {
            planted: data.planted.clone(),
        };
        let res = label_dataset(&data.train, &ShortlistScorer::default(), &judge, &LabelConfig::default(), None).unwrap();
        for (q, cands) in &res.shortlists {
            for c in cands {
                if data.planted.contains(q, c) {
                    shortlisted += 1;
                    recovered += usize::from(res.set.contains(q, c));
                }
            }
        }
        gt_pairs += data
            .train
            .queries()
            .iter()
            .filter(|q| res.set.contains(&q.query_id, &q.gt_image_id))
            .count();
    }
    let recall = recovered as f64 / shortlisted.max(1) as f64;
    outcome(
        shortlisted > 0 && recall >= 0.95 && gt_pairs == 0,
        format!("recovered {recovered}/{shortlisted} shortlisted planted pairs ({recall:.3}), {gt_pairs} GT pairs in S"),
    )
}

// A8

fn latency() -> Outcome {
    let data = generate(&SynthConfig {
        train_envs: 1,
        validation_envs: 0,
        test_envs: 1,
        images_per_env: 100,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = &data.train;
    let mut enc = EncoderConfig::default();
    enc.fit_to(ds).unwrap();
    let ps = init_params::<f32>(&enc, 0).unwrap();
    let env = &ds.environments()[0];
    let images = EmbeddedImages::from_dataset(&ps, &enc, ds, &env.image_ids).unwrap();
    assert_eq!(images.ids.len(), 100);
    let q = &ds.queries()[0];
    let record = ds.text_record(&q.query_id).unwrap();
    let mut times: Vec<f64> = (0..25)
        .map(|_| {
            let t = Instant::now();
            let list = rank_images(&ps, &enc, &record, q.mode, &images).unwrap();
            assert_eq!(list.ranking.len(), 100);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    outcome(
        median <= 79.0,
        format!("median {median:.2} ms, max {:.2} ms over 25 runs (d_model {}, d_emb {})", times[24], enc.text.d_model, enc.text.d_emb),
    )
}

// A9

fn monotone_in_k(r: &MetricsReport) -> bool {
    let ok = |v: &[rxf_core::eval::RecallAt]| v.windows(2).all(|w| w[0].k < w[1].k && w[0].recall <= w[1].recall);
    ok(&r.recall)
        && r.per_mode.iter().all(|m| ok(&m.recall))
        && r.environments.iter().all(|e| ok(&e.recall))
}

fn monotonicity(report: Option<&BenchReport>) -> Outcome {
    let mut reports = 0;
    let mut bad = Vec::new();
    let ds = fixture(&[(5, 3), (9, 4), (3, 2)]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let dump = score_dump(&ds, &mut rng);
        let (r, _) = evaluate_with(&ds, &TableScorer::new(dump), &(1..=9).collect::<Vec<_>>()).unwrap();
        reports += 1;
        if !monotone_in_k(&r) {
            bad.push("fixture report".to_string());
        }
    }
    if let Some(b) = report {
        for res in &b.results {
            for run in &res.runs {
                reports += 1;
                if !run.recall.windows(2).all(|w| w[0].recall <= w[1].recall) {
                    bad.push(format!("bench {} seed {}", res.loss, run.seed));
                }
            }
            if !res.summary.windows(2).all(|w| w[0].mean <= w[1].mean) {
                bad.push(format!("bench {} summary", res.loss));
            }
        }
    }

    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8);
        let s: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let m: Vec<bool> = (0..n * n).map(|k| k % (n + 1) != 0 && rng.gen_bool(0.3)).collect();
        let cfg = DrcConfig::default();
        let base = drc_loss(&BatchPairing::new(n, s.clone(), m.clone()).unwrap(), &cfg)
            .unwrap()
            .terms
            .total;
        let k = rng.gen_range(0..n * n);
        let mut up = s.clone();
        up[k] = (up[k] + rng.gen_range(0.0..0.5)).min(1.0);
        let after = drc_loss(&BatchPairing::new(n, up, m.clone()).unwrap(), &cfg)
            .unwrap()
            .terms
            .total;
        let (i, j) = (k / n, k % n);
        let ok = if i == j || m[k] {
            after <= base + 1e-12
        } else {
            after >= base - 1e-12
        };
        violations += usize::from(!ok);
    }
    if violations > 0 {
        bad.push(format!("{violations} drc_loss violations"));
    }
    outcome(
        bad.is_empty() && report.is_some(),
        format!(
            "{reports} reports non-decreasing in K, 1000 fuzzed drc_loss perturbations, {} problems",
            bad.len() + usize::from(report.is_none())
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, what: &'static str, o: Outcome| {
        println!("{id} {} {what}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, what, o));
    };

    record("A1", "gradient check", gradient_check());
    record("A2", "loss oracle", loss_oracle());

    let dir = tempfile::tempdir().unwrap();
    let first = run_bench(dir.path(), "a.json");
    let second = run_bench(dir.path(), "b.json");
    let report: Option<BenchReport> = first
        .as_ref()
        .ok()
        .and_then(|(bytes, _)| serde_json::from_slice(bytes).ok());
    match &report {
        Some(r) => {
            let secs = first.as_ref().map(|(_, s)| *s).unwrap_or(0.0);
            let mut o = directional(r);
            o.detail.push_str(&format!(", bench wall clock {secs:.0}s"));
            o.pass &= secs < 600.0;
            record("A3", "drc beats infonce", o);
            record("A4", "ablations do not beat drc", ablations(r));
        }
        None => {
            let why = first.as_ref().err().cloned().unwrap_or_else(|| "unreadable report".into());
            record("A3", "drc beats infonce", outcome(false, format!("bench failed: {why}")));
            record("A4", "ablations do not beat drc", outcome(false, "bench failed"));
        }
    }
    record("A5", "recall protocol oracle", recall_protocol());
    record("A6", "labeler fidelity", labeler_fidelity());
    let a7 = match (&first, &second) {
        (Ok((a, _)), Ok((b, _))) => outcome(a == b, format!("{} bytes, identical: {}", a.len(), a == b)),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("bench failed: {e}")),
    };
    record("A7", "bench determinism", a7);
    record("A8", "ranking latency", latency());
    record("A9", "monotonicity", monotonicity(report.as_ref()));

    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed: {}", failed.join(" "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
