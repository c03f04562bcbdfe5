use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One ingested corpus image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    /// Path relative to the corpus directory.
    pub path: String,
    /// Hex SHA-256 of the file bytes.
    pub sha256: String,
    /// Byte offset of this entry's record in the feature file.
    pub offset: u64,
    /// Later files with identical content, ingested once under this entry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

/// The training corpus as the audit sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CorpusManifest {
    /// Corpus id derived from the entry hashes, so it is stable across
    /// re-ingests of the same content.
    pub fn derive_id(entries: &[ManifestEntry]) -> String {
        let mut h = Sha256::new();
        for e in entries {
            h.update(e.sha256.as_bytes());
        }
        format!("corpus-{}", &hex::encode(h.finalize())[..16])
    }

    pub fn validate(&self) -> Result<()> {
        let mut hashes = HashSet::new();
        for pair in self.entries.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(Error::CorpusIntegrity(format!(
                    "manifest ids not strictly increasing at {}",
                    pair[1].id
                )));
            }
        }
        for e in &self.entries {
            if e.sha256.len() != 64 || !e.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::CorpusIntegrity(format!("entry {} has a malformed sha256", e.id)));
            }
            if !hashes.insert(e.sha256.as_str()) {
                return Err(Error::CorpusIntegrity(format!(
                    "entry {} duplicates content already in the manifest",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Self =
            serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn get(&self, id: u64) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Finds an entry by its relative path or one of its aliases.
    pub fn find_path(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.path == path || e.aliases.iter().any(|a| a == path))
    }
}
