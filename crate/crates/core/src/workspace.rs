//! The on-disk workspace and the pipeline stages that fill it.
//!
//! A workspace is a directory holding one file per stage:
//!
//! | file             | written by    |
//! |------------------|---------------|
//! | `config.toml`    | ingest        |
//! | `manifest.json`  | ingest        |
//! | `features.paf`   | ingest        |
//! | `index.pai`      | build-index   |
//! | `threshold.json` | calibrate     |
//! | `roc.csv`        | calibrate     |
//! | `pr.csv`         | calibrate     |
//! | `weights.json`   | calibrate, only when fitting weights |
//!
//! Every file is written to a temporary sibling and renamed into place, and
//! every stage produces identical bytes when re-run on identical inputs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use walkdir::WalkDir;

use crate::audit::{audit_batch, AuditContext, AuditReport, AuditRequest, ReportEntry};
use crate::calibration::{
    compute_pr, compute_roc, pr_to_csv, roc_to_csv, select_threshold, DecisionThreshold, LabeledPair,
    ThresholdPolicy,
};
use crate::config::CliConfig;
use crate::embed::manifest::sha256_hex;
use crate::embed::{
    ann_knn, build_ann, exact_knn, AnnIndex, CorpusManifest, EmbeddingTable, FeatureStore, ManifestEntry,
    PooledEmbedding,
};
use crate::error::{Error, Result};
use crate::image::{decode_image, preprocess, CanonicalSize, ImageTensor};
use crate::metric::{
    build_filter_bank, extract_features, fit_calibration_weights, lpips_distance, CalibrationWeights, FeatureStack,
    FilterBank, SimilarityLabel,
};

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const FEATURES: &str = "features.paf";
pub const INDEX: &str = "index.pai";
pub const THRESHOLD: &str = "threshold.json";
pub const WEIGHTS: &str = "weights.json";
pub const ROC: &str = "roc.csv";
pub const PR: &str = "pr.csv";

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

fn read(path: &Path, hint: &'static str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_owned(),
            hint,
        },
        _ => Error::io(path, e),
    })
}

fn read_text(path: &Path, hint: &'static str) -> Result<String> {
    String::from_utf8(read(path, hint)?)
        .map_err(|_| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, "not UTF-8")))
}

fn json_text<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Replaces `name` with `bytes` via a temporary file and a rename.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let target = self.path(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root).map_err(|e| Error::io(&self.root, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&target).map_err(|e| Error::io(&target, e.error))?;
        Ok(())
    }

    /// The workspace config, or defaults when none has been written yet.
    pub fn load_config(&self) -> Result<CliConfig> {
        let path = self.path(CONFIG);
        if !path.exists() {
            return Ok(CliConfig::default());
        }
        CliConfig::from_toml(&read_text(&path, "")?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save_config(&self, config: &CliConfig) -> Result<()> {
        self.write_atomic(CONFIG, config.to_toml().as_bytes())
    }

    pub fn load_manifest(&self) -> Result<CorpusManifest> {
        CorpusManifest::from_json(&read_text(&self.path(MANIFEST), "run `provaudit ingest` first")?)
    }

    /// Manifest and features, cross-checked entry by entry.
    pub fn load_corpus(&self) -> Result<(CorpusManifest, FeatureStore)> {
        let manifest = self.load_manifest()?;
        let bytes = read(&self.path(FEATURES), "run `provaudit ingest` first")?;
        let (store, offsets) = FeatureStore::from_bytes(&bytes)?;
        if store.len() != manifest.entries.len() {
            return Err(Error::CorpusIntegrity(format!(
                "manifest lists {} entries, feature file holds {}",
                manifest.entries.len(),
                store.len()
            )));
        }
        for ((m, s), offset) in manifest.entries.iter().zip(store.entries()).zip(offsets) {
            if m.id != s.entry_id || m.offset != offset {
                return Err(Error::CorpusIntegrity(format!(
                    "manifest entry {} does not match the feature record at offset {offset}",
                    m.id
                )));
            }
        }
        Ok((manifest, store))
    }

    pub fn load_index(&self) -> Result<AnnIndex> {
        AnnIndex::from_bytes(&read(&self.path(INDEX), "run `provaudit build-index` first")?)
    }

    pub fn load_threshold(&self) -> Result<DecisionThreshold> {
        let text = read_text(&self.path(THRESHOLD), "run `provaudit calibrate` or pass `--policy fixed:<value>`")?;
        serde_json::from_str(&text).map_err(|e| Error::format("threshold", e.to_string()))
    }

    /// Fitted weights if calibration produced them, otherwise all ones.
    pub fn load_weights(&self, store: &FeatureStore) -> Result<CalibrationWeights> {
        let path = self.path(WEIGHTS);
        if !path.exists() {
            let channels: Vec<usize> = store.level_shapes().iter().map(|s| s.0).collect();
            return Ok(CalibrationWeights::ones(&channels));
        }
        let weights: CalibrationWeights = serde_json::from_str(&read_text(&path, "")?)
            .map_err(|e| Error::format("weights", e.to_string()))?;
        CalibrationWeights::new(weights.levels)
    }
}

/// Feature shapes `bank` produces at `size`.
fn level_shapes(bank: &FilterBank, size: CanonicalSize) -> Vec<(usize, usize, usize)> {
    bank.channel_counts()
        .iter()
        .enumerate()
        .map(|(l, &c)| (c, size.side() >> (l + 1), size.side() >> (l + 1)))
        .collect()
}

/// Checks that stored features came from this bank at this size.
fn check_compatible(store: &FeatureStore, bank: &FilterBank, size: CanonicalSize) -> Result<()> {
    let expected = level_shapes(bank, size);
    if store.embedder_id() != bank.embedder_id() || store.level_shapes() != expected {
        return Err(Error::Config(format!(
            "workspace features were extracted by `{}` with shapes {:?}; the current settings give `{}` with \
             shapes {:?}; re-run `provaudit ingest`",
            store.embedder_id(),
            store.level_shapes(),
            bank.embedder_id(),
            expected
        )));
    }
    Ok(())
}

/// Decodes, canonicalizes and featurizes one image.
pub fn featurize(bytes: &[u8], bank: &FilterBank, size: CanonicalSize) -> Result<FeatureStack> {
    let img = preprocess(&decode_image(bytes)?, size)?;
    extract_features(&img, bank)
}

/// Regular files under `dir`, sorted, with their `/`-separated relative paths.
fn list_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_owned();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under its root");
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        out.push((name, entry.path().to_owned()));
    }
    Ok(out)
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub manifest: CorpusManifest,
    /// Files that were skipped, with the reason.
    pub warnings: Vec<String>,
}

/// Ingests every decodable image under `corpus_dir`. Files with identical
/// bytes are ingested once and the later paths recorded as aliases.
pub fn ingest(corpus_dir: &Path, ws: &Workspace, config: &CliConfig) -> Result<IngestOutcome> {
    let config = config.clone().validate()?;
    let bank = build_filter_bank(config.filter_seed);
    let size = config.canonical_size;

    let mut warnings = Vec::new();
    // (path, bytes, hash, aliases) for each distinct content
    let mut unique: Vec<(String, Vec<u8>, String, Vec<String>)> = Vec::new();
    let mut first_by_hash: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    for (name, path) in list_files(corpus_dir)? {
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                continue;
            }
        };
        let hash = sha256_hex(&bytes);
        match first_by_hash.get(&hash) {
            Some(&i) => unique[i].3.push(name),
            None => {
                first_by_hash.insert(hash.clone(), unique.len());
                unique.push((name, bytes, hash, Vec::new()));
            }
        }
    }

    let stacks: Vec<Result<FeatureStack>> = unique
        .par_iter()
        .map(|(_, bytes, _, _)| featurize(bytes, &bank, size))
        .collect();

    let mut store = FeatureStore::new(bank.embedder_id(), level_shapes(&bank, size));
    let mut entries = Vec::new();
    for ((name, _, hash, aliases), stack) in unique.into_iter().zip(stacks) {
        match stack {
            Ok(stack) => {
                let id = entries.len() as u64;
                store.push(id, stack)?;
                entries.push(ManifestEntry {
                    id,
                    path: name,
                    sha256: hash,
                    offset: 0,
                    aliases,
                });
            }
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                warnings.extend(aliases.into_iter().map(|a| format!("{a}: {e}")));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (bytes, offsets) = store.to_bytes();
    for (e, offset) in entries.iter_mut().zip(offsets) {
        e.offset = offset;
    }
    let manifest = CorpusManifest {
        corpus_id: CorpusManifest::derive_id(&entries),
        entries,
    };
    manifest.validate()?;

    let mut saved = config.clone();
    saved.paths.corpus_dir = Some(corpus_dir.to_owned());
    saved.paths.workspace_dir = None;
    ws.write_atomic(FEATURES, &bytes)?;
    ws.write_atomic(MANIFEST, manifest.to_json().as_bytes())?;
    ws.save_config(&saved)?;
    Ok(IngestOutcome { manifest, warnings })
}

#[derive(Clone, Debug)]
pub struct IndexOutcome {
    pub nodes: usize,
    pub edges: usize,
    pub max_level: usize,
    pub elapsed: Duration,
}

pub fn build_index(ws: &Workspace, config: &CliConfig) -> Result<IndexOutcome> {
    let (_, store) = ws.load_corpus()?;
    let started = Instant::now();
    let index = build_ann(&store.embedding_table(), config.ann_params(), store.fingerprint())?;
    let elapsed = started.elapsed();
    ws.write_atomic(INDEX, &index.to_bytes())?;
    Ok(IndexOutcome {
        nodes: index.len(),
        edges: index.edge_count(),
        max_level: index.max_level(),
        elapsed,
    })
}

#[derive(Clone, Debug)]
pub struct CalibrationOutcome {
    pub threshold: DecisionThreshold,
    pub auc: f64,
    pub similar: usize,
    pub dissimilar: usize,
    pub fitted_weights: bool,
}

/// Resolves a pair-file reference: a manifest id, a manifest path or alias,
/// or an image file (relative paths are taken from the pair file's folder).
fn resolve<'a>(
    token: &str,
    base: &Path,
    manifest: &CorpusManifest,
    store: &'a FeatureStore,
    bank: &FilterBank,
    size: CanonicalSize,
) -> Result<std::borrow::Cow<'a, FeatureStack>> {
    use std::borrow::Cow;
    let entry = token
        .parse::<u64>()
        .ok()
        .and_then(|id| manifest.get(id))
        .or_else(|| manifest.find_path(token));
    if let Some(entry) = entry {
        let stored = store
            .get(entry.id)
            .ok_or_else(|| Error::CorpusIntegrity(format!("no stored features for entry {}", entry.id)))?;
        return Ok(Cow::Borrowed(&stored.stack));
    }
    let path = base.join(token);
    if path.is_file() {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        return Ok(Cow::Owned(featurize(&bytes, bank, size)?));
    }
    Err(Error::InvalidArgument(format!(
        "`{token}` is neither a corpus entry nor an image file"
    )))
}

/// Reads `id_a,id_b,label` rows, scores each pair and picks a threshold.
pub fn calibrate(
    pairs_csv: &Path,
    ws: &Workspace,
    config: &CliConfig,
    policy: ThresholdPolicy,
    fit_weights: bool,
) -> Result<CalibrationOutcome> {
    let (manifest, store) = ws.load_corpus()?;
    let bank = build_filter_bank(config.filter_seed);
    check_compatible(&store, &bank, config.canonical_size)?;
    let base = pairs_csv.parent().unwrap_or(Path::new("."));

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(pairs_csv)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", pairs_csv.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", pairs_csv.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id_a", "id_b", "label"] {
        return Err(Error::InvalidArgument(format!(
            "{}: header must be `id_a,id_b,label`",
            pairs_csv.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::InvalidArgument(format!("{}: {e}", pairs_csv.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let at_row = |e: Error| Error::InvalidArgument(format!("{} line {line}: {e}", pairs_csv.display()));
        let a = resolve(&record[0], base, &manifest, &store, &bank, config.canonical_size).map_err(at_row)?;
        let b = resolve(&record[1], base, &manifest, &store, &bank, config.canonical_size).map_err(at_row)?;
        let label: SimilarityLabel = record[2].parse().map_err(at_row)?;
        rows.push((a, b, label));
    }

    let weights = if fit_weights {
        let owned: Vec<(FeatureStack, FeatureStack, SimilarityLabel)> = rows
            .iter()
            .map(|(a, b, l)| (a.clone().into_owned(), b.clone().into_owned(), *l))
            .collect();
        let w = fit_calibration_weights(&owned)?;
        ws.write_atomic(WEIGHTS, json_text(&w).as_bytes())?;
        w
    } else {
        ws.load_weights(&store)?
    };

    let pairs = rows
        .iter()
        .map(|(a, b, l)| LabeledPair::new(lpips_distance(a, b, &weights)?, *l))
        .collect::<Result<Vec<_>>>()?;
    let roc = compute_roc(&pairs)?;
    let pr = compute_pr(&pairs)?;
    let threshold = select_threshold(&roc, policy)?;
    ws.write_atomic(ROC, roc_to_csv(&roc).as_bytes())?;
    ws.write_atomic(PR, pr_to_csv(&pr).as_bytes())?;
    ws.write_atomic(THRESHOLD, json_text(&threshold).as_bytes())?;
    Ok(CalibrationOutcome {
        threshold,
        auc: roc.auc,
        similar: roc.positives,
        dissimilar: roc.negatives,
        fitted_weights: fit_weights,
    })
}

/// Provenance fields attached to every sample of an audit run.
#[derive(Clone, Debug, Default)]
pub struct SampleMeta {
    pub model_id: String,
    pub user_id: Option<String>,
    pub labor_note: Option<String>,
}

/// Audits every file under `samples_dir` against the workspace corpus.
/// `threshold` overrides the calibrated one.
pub fn audit_dir(
    samples_dir: &Path,
    ws: &Workspace,
    config: &CliConfig,
    threshold: Option<DecisionThreshold>,
    meta: &SampleMeta,
) -> Result<AuditReport> {
    let (manifest, store) = ws.load_corpus()?;
    let index = ws.load_index()?;
    let threshold = match threshold {
        Some(t) => t,
        None => ws.load_threshold()?,
    };
    let bank = build_filter_bank(config.filter_seed);
    check_compatible(&store, &bank, config.canonical_size)?;
    let weights = ws.load_weights(&store)?;
    let ctx = AuditContext::new(
        &manifest,
        &store,
        &index,
        &bank,
        config.canonical_size,
        &weights,
        threshold,
        config.attribution,
        config.audit_params()?,
    )?;

    let mut requests = Vec::new();
    let mut failures = Vec::new();
    for (i, (name, path)) in list_files(samples_dir)?.into_iter().enumerate() {
        let sample = std::fs::read(&path).map_err(|e| Error::io(&path, e)).and_then(|b| decode_image(&b));
        match sample {
            Ok(sample) => requests.push((
                i,
                AuditRequest {
                    name,
                    sample,
                    model_id: meta.model_id.clone(),
                    user_id: meta.user_id.clone(),
                    labor_note: meta.labor_note.clone(),
                },
            )),
            Err(e) => {
                let mut entry = ReportEntry::failed(name, meta.model_id.clone(), &e);
                entry.user_id = meta.user_id.clone();
                entry.labor_note = meta.labor_note.clone();
                failures.push((i, entry));
            }
        }
    }
    let (order, reqs): (Vec<usize>, Vec<AuditRequest>) = requests.into_iter().unzip();
    let audited = audit_batch(&reqs, &ctx);
    // merge decode failures back in file order
    let mut entries: Vec<(usize, ReportEntry)> = order.into_iter().zip(audited.entries).chain(failures).collect();
    entries.sort_by_key(|(i, _)| *i);
    Ok(AuditReport::from_entries(entries.into_iter().map(|(_, e)| e).collect()))
}

/// Exit status for a finished audit: 3 if anything replicates, otherwise 1
/// if any sample failed, otherwise 0.
pub fn audit_exit_code(report: &AuditReport) -> i32 {
    if report.any_replication() {
        3
    } else if report.summary.errors > 0 {
        1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `None` for the exact scan.
    pub ef_search: Option<usize>,
    pub queries_per_second: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    /// Mean distance evaluations per query.
    pub mean_visited: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub corpus_size: usize,
    pub queries: usize,
    pub rows: Vec<BenchRow>,
}

/// Seeded queries: blends of two random corpus embeddings.
pub fn bench_queries(table: &EmbeddingTable, count: usize, seed: u64) -> Vec<PooledEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = table.vector(rng.random_range(0..table.len()));
            let b = table.vector(rng.random_range(0..table.len()));
            let t: f32 = rng.random_range(0.2..0.5);
            let v = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            PooledEmbedding::new(v).expect("blend of finite vectors")
        })
        .collect()
}

/// Exact scan against the graph index at each `ef_search`, on the same queries.
pub fn bench_table(
    table: &EmbeddingTable,
    index: &AnnIndex,
    queries: &[PooledEmbedding],
    ef_values: &[usize],
) -> Result<BenchReport> {
    let k = 10.min(table.len());
    let started = Instant::now();
    let truth = queries
        .iter()
        .map(|q| exact_knn(q, table, k))
        .collect::<Result<Vec<_>>>()?;
    let exact_secs = started.elapsed().as_secs_f64();
    let qps = |secs: f64| if secs > 0.0 { queries.len() as f64 / secs } else { f64::INFINITY };
    let mut rows = vec![BenchRow {
        ef_search: None,
        queries_per_second: qps(exact_secs),
        recall_at_1: 1.0,
        recall_at_10: 1.0,
        mean_visited: table.len() as f64,
    }];
    for &ef in ef_values {
        let ef = ef.max(k);
        let started = Instant::now();
        let results = queries
            .iter()
            .map(|q| ann_knn(index, table, q, k, ef))
            .collect::<Result<Vec<_>>>()?;
        let secs = started.elapsed().as_secs_f64();
        let (mut hit1, mut hit10, mut visited) = (0usize, 0usize, 0usize);
        for (res, exact) in results.iter().zip(&truth) {
            hit1 += usize::from(res.neighbors[0].entry_id == exact[0].entry_id);
            hit10 += exact
                .iter()
                .filter(|e| res.neighbors.iter().any(|n| n.entry_id == e.entry_id))
                .count();
            visited += res.visited;
        }
        let n = queries.len().max(1) as f64;
        rows.push(BenchRow {
            ef_search: Some(ef),
            queries_per_second: qps(secs),
            recall_at_1: hit1 as f64 / n,
            recall_at_10: hit10 as f64 / (n * k as f64),
            mean_visited: visited as f64 / n,
        });
    }
    Ok(BenchReport {
        corpus_size: table.len(),
        queries: queries.len(),
        rows,
    })
}

pub fn bench(ws: &Workspace, queries: usize, seed: u64, ef_values: &[usize]) -> Result<BenchReport> {
    let (_, store) = ws.load_corpus()?;
    let index = ws.load_index()?;
    let table = store.embedding_table();
    bench_table(&table, &index, &bench_queries(&table, queries, seed), ef_values)
}

/// Decodes an image file into a tensor, for callers assembling requests by hand.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    decode_image(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
