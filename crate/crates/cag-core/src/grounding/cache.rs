//! Content-addressed grounding cache: one JSON file per key.
//!
//! Keys hash the instruction bytes, the ordered image content digests, and
//! the prompt template version, so any input or protocol change misses.
//! Corrupt entries are quarantined and treated as misses. Writes go through
//! a temp file and rename; concurrent writers for one key produce identical
//! payloads by construction, so last-writer-wins is safe.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::backend::hex_string;
use super::{GroundingError, GroundingSet};

pub struct GroundingCache {
    dir: PathBuf,
}

impl GroundingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<GroundingCache, GroundingError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(GroundingCache { dir })
    }

    /// Cache key over (instruction, ordered image digests, template version).
    pub fn key(&self, instruction: &str, image_digests: &[String], template_version: u32) -> String {
        let mut hasher = Sha256::new();
        hasher.update((instruction.len() as u64).to_le_bytes());
        hasher.update(instruction.as_bytes());
        for digest in image_digests {
            hasher.update((digest.len() as u64).to_le_bytes());
            hasher.update(digest.as_bytes());
        }
        hasher.update(template_version.to_le_bytes());
        hex_string(&hasher.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Cache hit, or `None` on miss. A file that fails to parse is renamed
    /// to `<key>.json.corrupt` and reported as a miss.
    pub fn get(&self, key: &str) -> Option<GroundingSet> {
        let path = self.path(key);
        let text = std::fs::read_to_string(&path).ok()?;
        match GroundingSet::from_json(&text) {
            Ok(set) => Some(set),
            Err(_) => {
                let _ = std::fs::rename(&path, path.with_extension("json.corrupt"));
                None
            }
        }
    }

    pub fn put(&self, key: &str, set: &GroundingSet) -> Result<(), GroundingError> {
        let path = self.path(key);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, set.to_json())?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
