//! Per-sample replication verdicts and batch reports.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::DecisionThreshold;
use crate::embed::{ann_knn, pool_features, rerank, AnnIndex, CorpusManifest, EmbeddingTable, FeatureStore, Neighbor};
use crate::error::{Error, Result};
use crate::image::{preprocess, CanonicalSize, ImageTensor};
use crate::metric::{extract_features, CalibrationWeights, FilterBank};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 32;
pub const TOP_PAIRS: usize = 10;
/// Corpus entries whose distance is within this of the nearest are reported as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// The closed set of parties that could be credited with a generated image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionCandidate {
    DataOwner,
    DatasetCollector,
    Developer,
    EndUser,
    ModelItself,
    PublicDomain,
}

impl AttributionCandidate {
    pub const ALL: [AttributionCandidate; 6] = [
        AttributionCandidate::DataOwner,
        AttributionCandidate::DatasetCollector,
        AttributionCandidate::Developer,
        AttributionCandidate::EndUser,
        AttributionCandidate::ModelItself,
        AttributionCandidate::PublicDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributionCandidate::DataOwner => "data_owner",
            AttributionCandidate::DatasetCollector => "dataset_collector",
            AttributionCandidate::Developer => "developer",
            AttributionCandidate::EndUser => "end_user",
            AttributionCandidate::ModelItself => "model_itself",
            AttributionCandidate::PublicDomain => "public_domain",
        }
    }
}

impl fmt::Display for AttributionCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributionCandidate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown attribution candidate `{s}`; expected one of data_owner, dataset_collector, \
                     developer, end_user, model_itself, public_domain"
                ))
            })
    }
}

/// Who gets credited for each outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionPolicy {
    pub on_replication: AttributionCandidate,
    pub on_novel: AttributionCandidate,
}

impl Default for AttributionPolicy {
    fn default() -> Self {
        Self {
            on_replication: AttributionCandidate::DataOwner,
            on_novel: AttributionCandidate::Developer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub candidate: AttributionCandidate,
    pub rationale: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Replication,
    Novel,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Replication => "replication",
            Decision::Novel => "novel",
        })
    }
}

/// One generated sample to audit.
#[derive(Clone, Debug)]
pub struct AuditRequest {
    /// How the sample is named in reports, usually its file path.
    pub name: String,
    pub sample: ImageTensor,
    pub model_id: String,
    pub user_id: Option<String>,
    /// Carried into the report verbatim; never scored.
    pub labor_note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    /// Hex SHA-256 of the canonical sample tensor.
    pub sample_ref: String,
    pub nearest: Neighbor,
    pub threshold: DecisionThreshold,
    pub decision: Decision,
    /// `threshold - fine_distance`; nonnegative exactly for replications.
    pub margin: f64,
    pub attribution: Attribution,
    /// Other re-ranked entries within the tie tolerance of the nearest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub near_ties: Vec<u64>,
}

/// Retrieval settings for an audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditParams {
    /// Coarse candidates fetched from the graph index.
    pub k: usize,
    pub ef_search: usize,
    /// Candidates re-scored with the full distance.
    pub rerank: usize,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self {
            k: 32,
            ef_search: 64,
            rerank: 32,
        }
    }
}

impl AuditParams {
    pub fn validate(self) -> Result<Self> {
        if self.k == 0 || self.rerank == 0 || self.ef_search < self.k {
            return Err(Error::Config(format!(
                "need k >= 1, rerank >= 1 and ef_search >= k, got k={}, rerank={}, ef_search={}",
                self.k, self.rerank, self.ef_search
            )));
        }
        Ok(self)
    }
}

/// Everything an audit reads, checked for consistency once.
pub struct AuditContext<'a> {
    manifest: &'a CorpusManifest,
    store: &'a FeatureStore,
    index: &'a AnnIndex,
    table: EmbeddingTable,
    bank: &'a FilterBank,
    size: CanonicalSize,
    weights: &'a CalibrationWeights,
    threshold: DecisionThreshold,
    policy: AttributionPolicy,
    params: AuditParams,
}

impl<'a> AuditContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        manifest: &'a CorpusManifest,
        store: &'a FeatureStore,
        index: &'a AnnIndex,
        bank: &'a FilterBank,
        size: CanonicalSize,
        weights: &'a CalibrationWeights,
        threshold: DecisionThreshold,
        policy: AttributionPolicy,
        params: AuditParams,
    ) -> Result<Self> {
        if store.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let params = params.validate()?;
        if index.fingerprint() != store.fingerprint() {
            return Err(Error::CorpusIntegrity(
                "index fingerprint does not match the stored features; rebuild the index".into(),
            ));
        }
        let store_ids = store.entries().iter().map(|e| e.entry_id);
        if !store_ids.eq(manifest.entries.iter().map(|e| e.id)) {
            return Err(Error::CorpusIntegrity("manifest and feature file list different entries".into()));
        }
        if store.embedder_id() != bank.embedder_id() {
            return Err(Error::Config(format!(
                "features were extracted by `{}` but the current filter bank is `{}`",
                store.embedder_id(),
                bank.embedder_id()
            )));
        }
        if threshold.value.is_nan() || threshold.value < 0.0 {
            return Err(Error::InvalidArgument(format!("threshold {} is not a nonnegative value", threshold.value)));
        }
        Ok(Self {
            manifest,
            store,
            index,
            table: store.embedding_table(),
            bank,
            size,
            weights,
            threshold,
            policy,
            params,
        })
    }

    pub fn threshold(&self) -> DecisionThreshold {
        self.threshold
    }

    /// The same context with a different decision threshold.
    pub fn with_threshold(mut self, threshold: DecisionThreshold) -> Self {
        self.threshold = threshold;
        self
    }
}

/// Content hash of a tensor: dimensions, then samples as little-endian f32.
pub fn tensor_digest(img: &ImageTensor) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Audits one sample: nearest corpus entry under the full distance, then the
/// threshold rule and the attribution policy.
pub fn audit_sample(req: &AuditRequest, ctx: &AuditContext<'_>) -> Result<AuditVerdict> {
    let canonical = preprocess(&req.sample, ctx.size)?;
    let stack = extract_features(&canonical, ctx.bank)?;
    let pooled = pool_features(&stack);
    let coarse = ann_knn(ctx.index, &ctx.table, &pooled, ctx.params.k, ctx.params.ef_search)?;
    let ranked = rerank(&coarse.neighbors, &stack, ctx.store, ctx.weights, ctx.params.rerank)?;
    let nearest = ranked[0].clone();
    let fine = nearest.fine_distance.expect("rerank sets fine distances");
    let near_ties = ranked[1..]
        .iter()
        .filter(|n| n.fine_distance.is_some_and(|d| d - fine <= TIE_TOLERANCE))
        .map(|n| n.entry_id)
        .collect();

    let t = ctx.threshold.value;
    let (decision, candidate) = if ctx.threshold.is_replication(fine) {
        (Decision::Replication, ctx.policy.on_replication)
    } else {
        (Decision::Novel, ctx.policy.on_novel)
    };
    let rationale = match decision {
        Decision::Replication => format!(
            "nearest corpus entry {} is at distance {fine:.6}, within the replication threshold {t:.6}",
            nearest.entry_id
        ),
        Decision::Novel => format!(
            "nearest corpus entry {} is at distance {fine:.6}, above the replication threshold {t:.6}",
            nearest.entry_id
        ),
    };
    Ok(AuditVerdict {
        sample_ref: tensor_digest(&canonical),
        nearest,
        threshold: ctx.threshold,
        decision,
        margin: t - fine,
        attribution: Attribution { candidate, rationale },
        near_ties,
    })
}

/// One line of a report: a verdict or the error that prevented one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub sample: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labor_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<AuditVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportEntry {
    /// An entry for a sample that could not be loaded at all.
    pub fn failed(name: impl Into<String>, model_id: impl Into<String>, error: &Error) -> Self {
        Self {
            sample: name.into(),
            model_id: model_id.into(),
            user_id: None,
            labor_note: None,
            nearest_path: None,
            verdict: None,
            error: Some(error.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    /// Uniform bins over `[min, max]`; the maximum falls in the last bin.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosePair {
    pub sample: String,
    pub entry_id: u64,
    pub fine_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Samples that received a verdict.
    pub total: usize,
    pub replications: usize,
    pub errors: usize,
    /// `replications / total`, or 0 for an empty batch.
    pub replication_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
    pub closest: Vec<ClosePair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub entries: Vec<ReportEntry>,
    pub summary: ReportSummary,
}

impl AuditReport {
    pub fn from_entries(entries: Vec<ReportEntry>) -> Self {
        let verdicts: Vec<(&ReportEntry, &AuditVerdict)> =
            entries.iter().filter_map(|e| e.verdict.as_ref().map(|v| (e, v))).collect();
        let total = verdicts.len();
        let replications = verdicts.iter().filter(|(_, v)| v.decision == Decision::Replication).count();
        let distances: Vec<f64> = verdicts
            .iter()
            .map(|(_, v)| v.nearest.fine_distance.unwrap_or(f64::INFINITY))
            .collect();
        let histogram = histogram(&distances);
        let mut closest: Vec<ClosePair> = verdicts
            .iter()
            .map(|(e, v)| ClosePair {
                sample: e.sample.clone(),
                entry_id: v.nearest.entry_id,
                fine_distance: v.nearest.fine_distance.unwrap_or(f64::INFINITY),
            })
            .collect();
        closest.sort_by(|a, b| {
            a.fine_distance
                .total_cmp(&b.fine_distance)
                .then_with(|| a.sample.cmp(&b.sample))
                .then(a.entry_id.cmp(&b.entry_id))
        });
        closest.truncate(TOP_PAIRS);
        let summary = ReportSummary {
            total,
            replications,
            errors: entries.len() - total,
            replication_rate: if total == 0 { 0.0 } else { replications as f64 / total as f64 },
            histogram,
            closest,
        };
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            entries,
            summary,
        }
    }

    pub fn any_replication(&self) -> bool {
        self.summary.replications > 0
    }
}

fn histogram(values: &[f64]) -> Option<Histogram> {
    let first = *values.first()?;
    let (min, max) = values.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let width = (max - min) / HISTOGRAM_BINS as f64;
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Some(Histogram { min, max, counts })
}

/// Audits every request in parallel; results keep request order and a
/// failing sample becomes an error entry instead of aborting the batch.
pub fn audit_batch(requests: &[AuditRequest], ctx: &AuditContext<'_>) -> AuditReport {
    let entries = requests
        .par_iter()
        .map(|req| {
            let result = audit_sample(req, ctx);
            let nearest_path = result
                .as_ref()
                .ok()
                .and_then(|v| ctx.manifest.get(v.nearest.entry_id))
                .map(|e| e.path.clone());
            let (verdict, error) = match result {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ReportEntry {
                sample: req.name.clone(),
                model_id: req.model_id.clone(),
                user_id: req.user_id.clone(),
                labor_note: req.labor_note.clone(),
                nearest_path,
                verdict,
                error,
            }
        })
        .collect();
    AuditReport::from_entries(entries)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidArgument(format!("report format must be text or json, got `{other}`"))),
        }
    }
}

pub fn render_report(report: &AuditReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => render_text(report),
    }
}

fn render_text(report: &AuditReport) -> String {
    let mut out = String::new();
    for e in &report.entries {
        match (&e.verdict, &e.error) {
            (Some(v), _) => {
                let _ = write!(
                    out,
                    "{:<11}  {}  nearest={}",
                    v.decision.to_string(),
                    e.sample,
                    v.nearest.entry_id
                );
                if let Some(path) = &e.nearest_path {
                    let _ = write!(out, " ({path})");
                }
                let _ = write!(
                    out,
                    "  distance={:.6}  threshold={:.6}  margin={:+.6}  attribution={}",
                    v.nearest.fine_distance.unwrap_or(f64::NAN),
                    v.threshold.value,
                    v.margin,
                    v.attribution.candidate
                );
                if !v.near_ties.is_empty() {
                    let ties: Vec<String> = v.near_ties.iter().map(u64::to_string).collect();
                    let _ = write!(out, "  ties={}", ties.join(","));
                }
                out.push('\n');
            }
            (None, Some(err)) => {
                let _ = writeln!(out, "{:<11}  {}  {err}", "error", e.sample);
            }
            (None, None) => {}
        }
    }
    let s = &report.summary;
    let _ = writeln!(out);
    let _ = writeln!(out, "samples audited   {}", s.total);
    let _ = writeln!(out, "replications      {}", s.replications);
    let _ = writeln!(out, "errors            {}", s.errors);
    let _ = writeln!(out, "replication rate  {:.4}", s.replication_rate);
    if let Some(h) = &s.histogram {
        let counts: Vec<String> = h.counts.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "distance range    [{:.6}, {:.6}]", h.min, h.max);
        let _ = writeln!(out, "histogram         {}", counts.join(" "));
    }
    if !s.closest.is_empty() {
        let _ = writeln!(out, "closest pairs");
        for p in &s.closest {
            let _ = writeln!(out, "  {:.6}  {}  entry {}", p.fine_distance, p.sample, p.entry_id);
        }
    }
    out
}
