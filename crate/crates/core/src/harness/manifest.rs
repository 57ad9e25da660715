use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Devel,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

/// Utterance list with labels and splits (CSV `id,path,label,split`).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.id.is_empty() || !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("empty or duplicate utterance id '{}'", r.id)));
            }
            if r.label.is_empty() {
                return Err(Error::Label(format!("utterance {} has an empty label", r.id)));
            }
        }
        Ok(Manifest {
            records,
            base_dir: base_dir.into(),
        })
    }

    /// Parses the CSV and checks that every audio path exists.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot open manifest {}", path.display())),
            _ => Error::Csv(e),
        })?;
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest::new(records, base)?;
        for r in &manifest.records {
            let audio = manifest.audio_path(r);
            if !audio.is_file() {
                return Err(Error::Data(format!("audio for {} not found at {}", r.id, audio.display())));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn audio_path(&self, record: &ManifestRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records in any of `splits`, in manifest order.
    pub fn indices(&self, splits: &[Split]) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| splits.contains(&self.records[i].split))
            .collect()
    }

    /// Distinct labels among the given records, sorted.
    pub fn labels_of(&self, indices: &[usize]) -> Vec<String> {
        let mut labels: Vec<String> = indices.iter().map(|&i| self.records[i].label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}
