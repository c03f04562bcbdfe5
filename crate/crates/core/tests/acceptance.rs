//! Desk-scale acceptance run. Every criterion prints one PASS or FAIL line
//! with its measurements and wall time; the test fails if any criterion does.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use provaudit::audit::{render_report, AuditReport, Decision, ReportFormat};
use provaudit::calibration::{compute_roc, DecisionThreshold, LabeledPair, ThresholdPolicy};
use provaudit::config::CliConfig;
use provaudit::embed::{ann_knn, build_ann, exact_knn, pool_features, AnnParams, EmbeddingTable, PooledEmbedding};
use provaudit::image::{blur_image, shift_image, ImageTensor};
use provaudit::metric::{build_filter_bank, extract_features, lpips_distance, mse_distance, CalibrationWeights, SimilarityLabel};
use provaudit::synth::{demo_files, natural_image, noise_image, DemoSpec};
use provaudit::workspace::{self, SampleMeta, Workspace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    /// Wall-time limit, for the criteria that state one.
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric_axioms() -> Outcome {
    let bank = build_filter_bank(7);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = Vec::new();
    for i in 0..200u64 {
        let img = |seed: u64, natural: bool| if natural { natural_image(seed, 64) } else { noise_image(seed, 64) };
        let a = img(rng.random(), rng.random_bool(0.5));
        let b = img(rng.random(), rng.random_bool(0.5));
        let fa = extract_features(&a, &bank).map_err(|e| e.to_string())?;
        let fb = extract_features(&b, &bank).map_err(|e| e.to_string())?;
        let w = if i % 2 == 0 {
            CalibrationWeights::ones_for(&fa)
        } else {
            let levels = fa.levels.iter().map(|l| (0..l.channels).map(|_| rng.random::<f64>() * 2.0).collect()).collect();
            CalibrationWeights::new(levels).map_err(|e| e.to_string())?
        };
        let lp = |x, y| lpips_distance(x, y, &w).unwrap();
        let ms = |x, y| mse_distance(x, y).unwrap();
        let (dab, dba) = (lp(&fa, &fb), lp(&fb, &fa));
        let (mab, mba) = (ms(&a, &b), ms(&b, &a));
        let ok = dab >= 0.0
            && dab == dba
            && lp(&fa, &fa) == 0.0
            && lp(&fb, &fb) == 0.0
            && mab >= 0.0
            && mab == mba
            && ms(&a, &a) == 0.0;
        if !ok {
            failures.push(i);
        }
    }
    check(failures.is_empty(), format!("200 pairs, violations at {failures:?}"))
}

fn blur_versus_shift() -> Outcome {
    let bank = build_filter_bank(7);
    let weights = CalibrationWeights::ones(&bank.channel_counts());
    let n: usize = 40;
    let (mut lpips_shift_closer, mut mse_blur_closer) = (0, 0);
    for seed in 0..n as u64 {
        let x = natural_image(1000 + seed, 64);
        let shifted = shift_image(&x, 1, 0).map_err(|e| e.to_string())?;
        let blurred = blur_image(&x, 2).map_err(|e| e.to_string())?;
        let f = |img: &ImageTensor| extract_features(img, &bank).unwrap();
        let (fx, fs, fb) = (f(&x), f(&shifted), f(&blurred));
        if lpips_distance(&fx, &fs, &weights).unwrap() < lpips_distance(&fx, &fb, &weights).unwrap() {
            lpips_shift_closer += 1;
        }
        if mse_distance(&x, &shifted).unwrap() > mse_distance(&x, &blurred).unwrap() {
            mse_blur_closer += 1;
        }
    }
    let need = (n * 4).div_ceil(5);
    check(
        lpips_shift_closer >= need && mse_blur_closer >= need,
        format!("{n} fixtures: lpips ranks shift closer {lpips_shift_closer}/{n}, mse ranks blur closer {mse_blur_closer}/{n}"),
    )
}

fn random_table(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(dim);
    let mut id = 0u64;
    for _ in 0..n {
        // sparse ids and a coarse value grid so distance ties occur
        id += rng.random_range(1..4);
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(0..8) as f32 / 4.0).collect();
        table.push(id, &v).unwrap();
    }
    table
}

fn exact_search_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut queries, mut mismatches, mut largest) = (0, 0, 0);
    for c in 0..100usize {
        let n = if c == 99 { 10_000 } else { rng.random_range(1..=10_000) };
        largest = largest.max(n);
        let dim = rng.random_range(1..=24);
        let table = random_table(&mut rng, n, dim);
        for _ in 0..5 {
            let q: Vec<f32> = (0..dim).map(|_| rng.random_range(0..8) as f32 / 4.0).collect();
            let k = rng.random_range(1..=n.min(64) + 2);
            let got = exact_knn(&PooledEmbedding::new(q.clone()).unwrap(), &table, k).map_err(|e| e.to_string())?;
            let mut all: Vec<(f64, u64)> = (0..table.len())
                .map(|i| {
                    let d: f64 = q.iter().zip(table.vector(i)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
                    (d, table.ids()[i])
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(k);
            let same = got.len() == all.len()
                && got.iter().zip(&all).all(|(g, (d, id))| g.entry_id == *id && g.coarse_distance == d.sqrt());
            queries += 1;
            if !same {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("100 corpora (largest {largest}), {queries} queries, {mismatches} mismatches"),
    )
}

fn pooled(seed: u64, bank: &provaudit::metric::FilterBank) -> Vec<f32> {
    let stack = extract_features(&natural_image(seed, 64), bank).unwrap();
    pool_features(&stack).vector().to_vec()
}

fn ann_quality() -> Outcome {
    use rayon::prelude::*;
    let bank = build_filter_bank(7);
    let corpus: Vec<Vec<f32>> = (0..5000u64).into_par_iter().map(|i| pooled(50_000 + i, &bank)).collect();
    let queries: Vec<Vec<f32>> = (0..100u64).into_par_iter().map(|i| pooled(900_000 + i, &bank)).collect();
    let dim = corpus[0].len();
    let table = EmbeddingTable::from_rows(dim, corpus.iter().enumerate().map(|(i, v)| (i as u64, v))).unwrap();
    let index = build_ann(&table, AnnParams::default(), [0; 32]).map_err(|e| e.to_string())?;
    let (mut hit1, mut hit10, mut visited) = (0usize, 0usize, 0usize);
    for q in queries {
        let q = PooledEmbedding::new(q).unwrap();
        let truth = exact_knn(&q, &table, 10).unwrap();
        let got = ann_knn(&index, &table, &q, 10, 64).map_err(|e| e.to_string())?;
        visited += got.visited;
        if got.neighbors.first().map(|n| n.entry_id) == Some(truth[0].entry_id) {
            hit1 += 1;
        }
        hit10 += truth
            .iter()
            .filter(|t| got.neighbors.iter().any(|g| g.entry_id == t.entry_id))
            .count();
    }
    let r1 = hit1 as f64 / 100.0;
    let r10 = hit10 as f64 / 1000.0;
    let frac = visited as f64 / 100.0 / 5000.0;
    check(
        r1 >= 0.95 && r10 >= 0.90 && frac < 0.20,
        format!("5000 entries, 100 queries, ef_search 64: recall@1 {r1:.3}, recall@10 {r10:.3}, visited {:.1}%", frac * 100.0),
    )
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledPair> {
    let grid = rng.random_range(2..=60);
    let mut pairs: Vec<LabeledPair> = (0..n)
        .map(|_| {
            let label = if rng.random_bool(0.5) { SimilarityLabel::Similar } else { SimilarityLabel::Dissimilar };
            LabeledPair::new(rng.random_range(0..grid) as f64 / 8.0, label).unwrap()
        })
        .collect();
    // both labels present
    pairs[0].label = SimilarityLabel::Similar;
    pairs[n - 1].label = SimilarityLabel::Dissimilar;
    pairs
}

fn roc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut instances, mut mismatches) = (0, 0);
    for _ in 0..200 {
        let n = rng.random_range(2..=1000);
        let pairs = random_pairs(&mut rng, n);
        let roc = compute_roc(&pairs).map_err(|e| e.to_string())?;
        let pos = pairs.iter().filter(|p| p.label == SimilarityLabel::Similar).count();
        let neg = n - pos;
        let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
        thresholds.push(f64::NEG_INFINITY);
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        let mut ok = roc.points.len() == thresholds.len() && roc.positives == pos && roc.negatives == neg;
        for (pt, &t) in roc.points.iter().zip(&thresholds) {
            let tp = pairs.iter().filter(|p| p.label == SimilarityLabel::Similar && p.distance <= t).count();
            let fp = pairs.iter().filter(|p| p.label == SimilarityLabel::Dissimilar && p.distance <= t).count();
            ok &= pt.threshold == t
                && pt.true_positives == tp
                && pt.false_positives == fp
                && pt.tpr == tp as f64 / pos as f64
                && pt.fpr == fp as f64 / neg as f64;
        }
        // rank statistic with half credit for ties, counted pair by pair
        let mut twice = 0u64;
        for s in pairs.iter().filter(|p| p.label == SimilarityLabel::Similar) {
            for d in pairs.iter().filter(|p| p.label == SimilarityLabel::Dissimilar) {
                twice += if s.distance < d.distance { 2 } else if s.distance == d.distance { 1 } else { 0 };
            }
        }
        ok &= roc.auc == twice as f64 / (2 * pos * neg) as f64;
        instances += 1;
        if !ok {
            mismatches += 1;
        }
    }

    let mut separable_misses = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=1000);
        let mut pairs: Vec<LabeledPair> = (0..n)
            .map(|i| {
                let similar = i % 2 == 0 || rng.random_bool(0.3);
                let label = if similar { SimilarityLabel::Similar } else { SimilarityLabel::Dissimilar };
                let base = if similar { 0.0 } else { 2.0 };
                LabeledPair::new(base + rng.random::<f64>(), label).unwrap()
            })
            .collect();
        pairs[n - 1] = LabeledPair::new(2.5, SimilarityLabel::Dissimilar).unwrap();
        if compute_roc(&pairs).unwrap().auc != 1.0 {
            separable_misses += 1;
        }
    }
    check(
        mismatches == 0 && separable_misses == 0,
        format!("{instances} random instances, {mismatches} mismatches; 50 separable sets, {separable_misses} with AUC != 1"),
    )
}

/// Ingest, index, calibrate and audit the default demo set. `corpus_root`
/// holds the demo tree; the workspace goes to `ws_dir`.
fn run_pipeline(corpus_root: &Path, ws_dir: &Path) -> Result<(Workspace, CliConfig, AuditReport), String> {
    let ws = Workspace::new(ws_dir);
    let config = CliConfig::default();
    let err = |e: provaudit::Error| e.to_string();
    workspace::ingest(&corpus_root.join("corpus"), &ws, &config).map_err(err)?;
    workspace::build_index(&ws, &config).map_err(err)?;
    workspace::calibrate(&corpus_root.join("calibration/pairs.csv"), &ws, &config, ThresholdPolicy::Youden, false)
        .map_err(err)?;
    let report = workspace::audit_dir(&corpus_root.join("samples"), &ws, &config, None, &SampleMeta::default())
        .map_err(err)?;
    Ok((ws, config, report))
}

fn demo_tree() -> TempDir {
    let dir = TempDir::new().unwrap();
    for (rel, bytes) in demo_files(&DemoSpec::default()) {
        let path = dir.path().join(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, bytes).unwrap();
    }
    dir
}

fn decisions(report: &AuditReport) -> HashMap<String, Decision> {
    report
        .entries
        .iter()
        .filter_map(|e| e.verdict.as_ref().map(|v| (e.sample.clone(), v.decision)))
        .collect()
}

fn end_to_end() -> Outcome {
    let dir = demo_tree();
    let (ws, _, report) = run_pipeline(dir.path(), &dir.path().join("ws"))?;
    let threshold = ws.load_threshold().map_err(|e| e.to_string())?;
    let d = decisions(&report);
    let count = |prefix: &str, want: Decision| d.iter().filter(|(k, v)| k.starts_with(prefix) && **v == want).count();
    let copies = count("copy_", Decision::Replication);
    let shifts = count("shift_", Decision::Replication);
    let novel = count("novel_", Decision::Novel);
    check(
        copies == 20 && shifts >= 18 && novel >= 57 && report.summary.errors == 0,
        format!(
            "threshold {:.4}: copies flagged {copies}/20, shifts flagged {shifts}/20, unrelated novel {novel}/60",
            threshold.value
        ),
    )
}

fn determinism() -> Outcome {
    let dir = demo_tree();
    let (ws_a, _, report_a) = run_pipeline(dir.path(), &dir.path().join("ws_a"))?;
    let (ws_b, _, report_b) = run_pipeline(dir.path(), &dir.path().join("ws_b"))?;
    let mut differing = Vec::new();
    for name in [
        workspace::CONFIG,
        workspace::MANIFEST,
        workspace::FEATURES,
        workspace::INDEX,
        workspace::THRESHOLD,
        workspace::ROC,
        workspace::PR,
    ] {
        if std::fs::read(ws_a.path(name)).ok() != std::fs::read(ws_b.path(name)).ok() {
            differing.push(name);
        }
    }
    if render_report(&report_a, ReportFormat::Json) != render_report(&report_b, ReportFormat::Json)
        || render_report(&report_a, ReportFormat::Text) != render_report(&report_b, ReportFormat::Text)
    {
        differing.push("report");
    }
    check(differing.is_empty(), format!("7 artifacts and the report compared, differing: {differing:?}"))
}

fn threshold_monotonicity() -> Outcome {
    let dir = demo_tree();
    let (ws, config, _) = run_pipeline(dir.path(), &dir.path().join("ws"))?;
    let calibrated = ws.load_threshold().map_err(|e| e.to_string())?.value;
    let mut previous: Option<HashMap<String, Decision>> = None;
    let mut flips = 0;
    let mut flagged = Vec::new();
    for step in 0..10 {
        let t = calibrated * step as f64 / 4.5;
        let threshold = DecisionThreshold::fixed(t).map_err(|e| e.to_string())?;
        let report = workspace::audit_dir(&dir.path().join("samples"), &ws, &config, Some(threshold), &SampleMeta::default())
            .map_err(|e| e.to_string())?;
        let now = decisions(&report);
        if let Some(prev) = &previous {
            flips += prev
                .iter()
                .filter(|(k, v)| **v == Decision::Replication && now.get(*k) != Some(&Decision::Replication))
                .count();
        }
        flagged.push(report.summary.replications);
        previous = Some(now);
    }
    check(
        flips == 0,
        format!("10 thresholds from 0 to {:.4}: replications {flagged:?}, {flips} flips", calibrated * 2.0),
    )
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { name: "metric axioms", budget: Some(Duration::from_secs(10)), run: metric_axioms },
        Criterion { name: "blur vs shift ranking", budget: Some(Duration::from_secs(30)), run: blur_versus_shift },
        Criterion { name: "exact search oracle", budget: Some(Duration::from_secs(60)), run: exact_search_oracle },
        Criterion { name: "ANN quality", budget: Some(Duration::from_secs(120)), run: ann_quality },
        Criterion { name: "ROC oracle", budget: Some(Duration::from_secs(30)), run: roc_oracle },
        Criterion { name: "end-to-end memorization audit", budget: Some(Duration::from_secs(300)), run: end_to_end },
        Criterion { name: "determinism", budget: None, run: determinism },
        Criterion { name: "threshold monotonicity", budget: None, run: threshold_monotonicity },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let started = Instant::now();
        let outcome = (c.run)();
        let elapsed = started.elapsed();
        let in_time = c.budget.is_none_or(|b| elapsed <= b);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        println!(
            "{} {}: {detail} [{:.2} s{}]",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.budget.map_or(String::new(), |b| format!(" of {} s", b.as_secs()))
        );
        if !pass {
            failed.push(c.name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
