//! Line-delimited JSON video manifests.
//!
//! One record per line:
//!
//! ```json
//! {"video_id": "000_003", "path": "videos/000_003", "label": "fake", "dataset_name": "ffpp", "manipulation_type": "deepfakes"}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are skipped.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::{Error, Label, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub video_id: String,
    pub path: PathBuf,
    pub label: Label,
    #[serde(default, alias = "dataset")]
    pub dataset_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manipulation_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::InvalidConfig(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Self::new(records, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, self.to_jsonl().as_bytes())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.video_id.is_empty() {
                return Err(Error::InvalidConfig("manifest record with empty video_id".into()));
            }
            if !seen.insert(r.video_id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate video_id `{}`", r.video_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    /// Hash of the records as written, independent of where the file lives.
    pub fn hash(&self) -> String {
        artifact::sha256_hex(self.to_jsonl().as_bytes())
    }

    /// `(real, fake)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.records.iter().filter(|r| r.label.is_fake()).count();
        (self.records.len() - fake, fake)
    }

    /// Real videos plus fakes of one manipulation type.
    pub fn with_manipulation(&self, manipulation: &str) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| !r.label.is_fake() || r.manipulation_type.as_deref() == Some(manipulation))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
# comment
{"video_id": "a", "path": "a", "label": "real", "dataset_name": "x"}
{"video_id": "b", "path": "/abs/b", "label": "fake", "dataset": "x", "manipulation_type": "df"}
{"video_id": "c", "path": "c", "label": "fake", "manipulation_type": "fs"}
"#;

    #[test]
    fn parses_and_resolves() {
        let m = Manifest::parse(TEXT, "/data").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.resolve(&m.records[0]), PathBuf::from("/data/a"));
        assert_eq!(m.resolve(&m.records[1]), PathBuf::from("/abs/b"));
        assert_eq!(m.records[1].dataset_name, "x");
        assert_eq!(m.class_counts(), (1, 2));
        let df = m.with_manipulation("df");
        assert_eq!(df.len(), 2);
    }

    #[test]
    fn round_trips_and_hash_ignores_location() {
        let m = Manifest::parse(TEXT, "/data").unwrap();
        let back = Manifest::parse(&m.to_jsonl(), "/elsewhere").unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn rejects_duplicates_and_bad_lines() {
        let dup = "{\"video_id\":\"a\",\"path\":\"a\",\"label\":\"real\"}\n".repeat(2);
        assert!(Manifest::parse(&dup, ".").is_err());
        assert!(Manifest::parse("{\"video_id\":\"a\"}", ".").is_err());
        assert!(Manifest::load(Path::new("/nonexistent/m.jsonl")).is_err());
    }
}
