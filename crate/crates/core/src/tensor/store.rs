//! Named parameter storage backed by a `manifest.json` + `weights.bin` pair.
//!
//! The manifest is a JSON array of `{name, shape, offset}` objects where
//! `offset` is a byte offset into `weights.bin`. Entries are packed
//! back-to-back in manifest order as little-endian `f32`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::WeightStore(format!(
                "entry `{name}` has shape {shape:?} ({expected} values) but {} values were given",
                values.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::WeightStore(format!("duplicate entry `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, shape, values));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.index.get(name).map(|&i| {
            let (_, shape, values) = &self.entries[i];
            (shape.as_slice(), values.as_slice())
        })
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.entries
            .iter()
            .map(|(name, shape, values)| {
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += 4 * values.len() as u64;
                entry
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        let mut bytes = Vec::with_capacity(4 * self.total_values());
        for (_, _, values) in &self.entries {
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(WEIGHTS_FILE), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
        let mut store = WeightStore::new();
        let mut expected_offset = 0u64;
        for entry in manifest {
            if entry.offset != expected_offset {
                return Err(Error::WeightStore(format!(
                    "entry `{}` starts at byte {} but the previous entries end at byte {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > bytes.len() {
                return Err(Error::WeightStore(format!(
                    "entry `{}` needs bytes {start}..{end} but {WEIGHTS_FILE} has {} bytes",
                    entry.name,
                    bytes.len()
                )));
            }
            let values = bytes[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            expected_offset = end as u64;
            store.insert(entry.name, entry.shape, values)?;
        }
        if expected_offset as usize != bytes.len() {
            return Err(Error::WeightStore(format!(
                "{WEIGHTS_FILE} has {} bytes but the manifest covers {expected_offset}",
                bytes.len()
            )));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = WeightStore::new();
        store.insert("a", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        store.insert("b", vec![3], vec![f32::MIN_POSITIVE, 1e30, -0.0]).unwrap();
        store.save(dir.path()).unwrap();
        let loaded = WeightStore::load(dir.path()).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(loaded.manifest()[1].offset, 16);
    }

    #[test]
    fn rejects_shape_value_mismatch() {
        let mut store = WeightStore::new();
        assert!(store.insert("a", vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_truncated_weights() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = WeightStore::new();
        store.insert("a", vec![4], vec![1.0; 4]).unwrap();
        store.save(dir.path()).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 12]).unwrap();
        let err = WeightStore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn rejects_gapped_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"[{"name":"a","shape":[1],"offset":0},{"name":"b","shape":[1],"offset":8}]"#;
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 12]).unwrap();
        let err = WeightStore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }
}
