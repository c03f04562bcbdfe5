//! Corpus embeddings and nearest-neighbour retrieval.
//!
//! Retrieval is two-stage: a coarse search over pooled embeddings (exact or
//! through the layered graph in [`hnsw`]) produces candidates, and [`rerank`]
//! re-scores them with the full layered perceptual distance.

pub mod hnsw;
pub mod manifest;
pub mod store;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{lpips_distance, CalibrationWeights, FeatureStack};

pub use hnsw::{ann_knn, build_ann, AnnIndex, AnnParams, AnnResult};
pub use manifest::{CorpusManifest, ManifestEntry};
pub use store::{FeatureStore, StoredEntry};

/// Spatially averaged normalized features, levels concatenated in order.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    vector: Vec<f32>,
    norm: f64,
}

impl PooledEmbedding {
    pub fn new(vector: Vec<f32>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
        }
        let norm = vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        Ok(Self { vector, norm })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

pub fn pool_features(stack: &FeatureStack) -> PooledEmbedding {
    let mut vector = Vec::with_capacity(stack.levels.iter().map(|l| l.channels).sum());
    for level in &stack.levels {
        let n = level.positions() as f64;
        for c in 0..level.channels {
            let sum: f64 = level.channel(c).iter().map(|&v| v as f64).sum();
            vector.push((sum / n) as f32);
        }
    }
    PooledEmbedding::new(vector).expect("normalized features are finite")
}

/// Squared Euclidean distance; every coarse comparison goes through here so
/// exact and graph search agree bit for bit.
#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// A retrieved corpus entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry_id: u64,
    /// Euclidean distance between pooled embeddings.
    pub coarse_distance: f64,
    /// Layered perceptual distance, set by [`rerank`].
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fine_distance: Option<f64>,
}

/// Pooled embeddings of every corpus entry, stored row-major in entry order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Builds a table from `(entry_id, vector)` rows; ids must be strictly increasing.
    pub fn from_rows<I, V>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, V)>,
        V: AsRef<[f32]>,
    {
        let mut table = Self::new(dim);
        for (id, v) in rows {
            table.push(id, v.as_ref())?;
        }
        Ok(table)
    }

    pub fn push(&mut self, entry_id: u64, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding has {} dimensions, table expects {}",
                vector.len(),
                self.dim
            )));
        }
        if self.ids.last().is_some_and(|&last| entry_id <= last) {
            return Err(Error::CorpusIntegrity(format!(
                "entry ids must be strictly increasing ({entry_id} after {:?})",
                self.ids.last()
            )));
        }
        self.ids.push(entry_id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub(crate) fn check_query(&self, query: &PooledEmbedding) -> Result<()> {
        if query.dim() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "query has {} dimensions, corpus embeddings have {}",
                query.dim(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Distance-then-index ordering used by every search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Scored {
    pub dist: f64,
    pub index: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` entries closest to `query`, ascending by distance, ties to the
/// smaller entry id.
pub fn exact_knn(query: &PooledEmbedding, table: &EmbeddingTable, k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if table.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    table.check_query(query)?;

    // max-heap of the best k so far
    let mut best = BinaryHeap::with_capacity(k + 1);
    for i in 0..table.len() {
        let cand = Scored {
            dist: squared_distance(query.vector(), table.vector(i)),
            index: i as u32,
        };
        if best.len() < k {
            best.push(cand);
        } else if best.peek().is_some_and(|worst| cand < *worst) {
            best.pop();
            best.push(cand);
        }
    }
    Ok(best
        .into_sorted_vec()
        .into_iter()
        .map(|s| Neighbor {
            entry_id: table.ids[s.index as usize],
            coarse_distance: s.dist.sqrt(),
            fine_distance: None,
        })
        .collect())
}

/// Anything that can hand back the stored feature stack of a corpus entry.
pub trait FeatureLookup {
    fn stack(&self, entry_id: u64) -> Option<&FeatureStack>;
}

/// Re-scores the `r` coarsest-closest candidates with the layered distance and
/// orders them by it (ties to the smaller entry id).
pub fn rerank(
    candidates: &[Neighbor],
    query_stack: &FeatureStack,
    features: &impl FeatureLookup,
    weights: &CalibrationWeights,
    r: usize,
) -> Result<Vec<Neighbor>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to re-rank".into()));
    }
    let mut coarse: Vec<&Neighbor> = candidates.iter().collect();
    coarse.sort_by(|a, b| {
        a.coarse_distance
            .total_cmp(&b.coarse_distance)
            .then(a.entry_id.cmp(&b.entry_id))
    });
    let mut out = coarse
        .into_iter()
        .take(r.max(1))
        .map(|n| {
            let stack = features.stack(n.entry_id).ok_or_else(|| {
                Error::CorpusIntegrity(format!("no stored features for entry {}", n.entry_id))
            })?;
            Ok(Neighbor {
                fine_distance: Some(lpips_distance(query_stack, stack, weights)?),
                ..n.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        let (fa, fb) = (a.fine_distance.unwrap_or(f64::INFINITY), b.fine_distance.unwrap_or(f64::INFINITY));
        fa.total_cmp(&fb).then(a.entry_id.cmp(&b.entry_id))
    });
    Ok(out)
}
