//! `PAF1` feature interchange file.
//!
//! Little-endian layout:
//!
//! ```text
//! "PAF1"                       magic
//! u32                          format version (1)
//! u32 + bytes                  embedder id, UTF-8
//! u32                          level count L
//! L × (u32 channels, u32 h, u32 w)
//! u64                          entry count N
//! N × {
//!     u64                      entry id
//!     f32 × Σ channels         pooled embedding
//!     f32 × c·h·w per level    feature stack, channel-major, levels in order
//! }
//! ```

use sha2::{Digest, Sha256};

use super::{pool_features, EmbeddingTable, FeatureLookup, PooledEmbedding};
use crate::binio::{put_f32s, put_string, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::metric::{FeatureLevel, FeatureStack};

pub const MAGIC: &[u8; 4] = b"PAF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredEntry {
    pub entry_id: u64,
    pub pooled: PooledEmbedding,
    pub stack: FeatureStack,
}

/// Every corpus entry's pooled embedding and feature stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    embedder_id: String,
    level_shapes: Vec<(usize, usize, usize)>,
    entries: Vec<StoredEntry>,
}

impl FeatureStore {
    pub fn new(embedder_id: impl Into<String>, level_shapes: Vec<(usize, usize, usize)>) -> Self {
        Self {
            embedder_id: embedder_id.into(),
            level_shapes,
            entries: Vec::new(),
        }
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn level_shapes(&self) -> &[(usize, usize, usize)] {
        &self.level_shapes
    }

    pub fn embedding_dim(&self) -> usize {
        self.level_shapes.iter().map(|s| s.0).sum()
    }

    pub fn entries(&self) -> &[StoredEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, pooling its stack. Ids must be strictly increasing.
    pub fn push(&mut self, entry_id: u64, stack: FeatureStack) -> Result<()> {
        if stack.shapes() != self.level_shapes {
            return Err(Error::CorpusIntegrity(format!(
                "entry {entry_id} has feature shapes {:?}, store declares {:?}",
                stack.shapes(),
                self.level_shapes
            )));
        }
        if self.entries.last().is_some_and(|e| entry_id <= e.entry_id) {
            return Err(Error::CorpusIntegrity(format!(
                "entry ids must be strictly increasing ({entry_id} after {})",
                self.entries.last().unwrap().entry_id
            )));
        }
        let pooled = pool_features(&stack);
        self.entries.push(StoredEntry {
            entry_id,
            pooled,
            stack,
        });
        Ok(())
    }

    pub fn get(&self, entry_id: u64) -> Option<&StoredEntry> {
        self.entries
            .binary_search_by_key(&entry_id, |e| e.entry_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn embedding_table(&self) -> EmbeddingTable {
        EmbeddingTable::from_rows(
            self.embedding_dim(),
            self.entries.iter().map(|e| (e.entry_id, e.pooled.vector())),
        )
        .expect("store invariants imply a valid table")
    }

    /// Serializes the store; also returns each entry's record offset.
    pub fn to_bytes(&self) -> (Vec<u8>, Vec<u64>) {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_string(&mut out, &self.embedder_id);
        put_u32(&mut out, self.level_shapes.len() as u32);
        for &(c, h, w) in &self.level_shapes {
            put_u32(&mut out, c as u32);
            put_u32(&mut out, h as u32);
            put_u32(&mut out, w as u32);
        }
        put_u64(&mut out, self.entries.len() as u64);
        let mut offsets = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            offsets.push(out.len() as u64);
            put_u64(&mut out, e.entry_id);
            put_f32s(&mut out, e.pooled.vector());
            for level in &e.stack.levels {
                put_f32s(&mut out, &level.data);
            }
        }
        (out, offsets)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Vec<u64>)> {
        let mut r = Reader::new(bytes, "PAF1 feature");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return r.fail(format!("unsupported version {version}"));
        }
        let embedder_id = r.string()?;
        let levels = r.u32()? as usize;
        if levels == 0 {
            return r.fail("no feature levels declared");
        }
        let mut shapes = Vec::with_capacity(levels);
        for _ in 0..levels {
            let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            if c == 0 || h == 0 || w == 0 {
                return r.fail("zero-sized feature level");
            }
            shapes.push((c, h, w));
        }
        let count = r.u64()?;
        let mut store = Self::new(embedder_id, shapes.clone());
        let dim = store.embedding_dim();
        let mut offsets = Vec::new();
        for _ in 0..count {
            offsets.push(r.position() as u64);
            let entry_id = r.u64()?;
            let mut pooled = Vec::with_capacity(dim);
            r.f32s(dim, &mut pooled)?;
            let mut stack = FeatureStack { levels: Vec::with_capacity(levels) };
            for &(c, h, w) in &shapes {
                let mut data = Vec::with_capacity(c * h * w);
                r.f32s(c * h * w, &mut data)?;
                stack.levels.push(FeatureLevel {
                    channels: c,
                    height: h,
                    width: w,
                    data,
                });
            }
            if store.entries.last().is_some_and(|e| entry_id <= e.entry_id) {
                return r.fail(format!("entry id {entry_id} out of order"));
            }
            // Keep the pooled vector as written: an external exporter may pool
            // at higher precision than we would.
            let pooled = PooledEmbedding::new(pooled)
                .map_err(|_| Error::format("PAF1 feature", format!("entry {entry_id} has non-finite values")))?;
            store.entries.push(StoredEntry {
                entry_id,
                pooled,
                stack,
            });
        }
        if !r.is_at_end() {
            return r.fail("trailing bytes after last entry");
        }
        Ok((store, offsets))
    }

    /// Digest over ids and pooled vectors; an index records it so it can be
    /// matched against the corpus it was built from.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.embedder_id.as_bytes());
        for e in &self.entries {
            h.update(e.entry_id.to_le_bytes());
            for v in e.pooled.vector() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Fingerprint of a bare embedding table, for indexes built without a store.
pub fn table_fingerprint(embedder_id: &str, table: &EmbeddingTable) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(embedder_id.as_bytes());
    for (i, id) in table.ids().iter().enumerate() {
        h.update(id.to_le_bytes());
        for v in table.vector(i) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

impl FeatureLookup for FeatureStore {
    fn stack(&self, entry_id: u64) -> Option<&FeatureStack> {
        self.get(entry_id).map(|e| &e.stack)
    }
}
