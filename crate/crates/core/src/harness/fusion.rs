use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Two-class posteriors of one system, one row per utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub tag: String,
    ids: Vec<String>,
    rows: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct PosteriorRecord {
    id: String,
    p_class0: f64,
    p_class1: f64,
}

impl PosteriorSet {
    pub fn new(tag: impl Into<String>, ids: Vec<String>, rows: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::shape(format!("{} rows", ids.len()), rows.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate utterance id {dup}")));
        }
        for (id, r) in ids.iter().zip(&rows) {
            let ok = r.iter().all(|p| (0.0..=1.0).contains(p)) && (r[0] + r[1] - 1.0).abs() <= ROW_SUM_TOLERANCE;
            if !ok {
                return Err(Error::Data(format!("posterior row of {id} is not a distribution: {r:?}")));
            }
        }
        Ok(PosteriorSet {
            tag: tag.into(),
            ids,
            rows,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[[f64; 2]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Argmax class per row; an exact tie goes to class 0.
    pub fn predictions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| usize::from(r[1] > r[0])).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (id, r) in self.ids.iter().zip(&self.rows) {
            w.serialize(PosteriorRecord {
                id: id.clone(),
                p_class0: r[0],
                p_class1: r[1],
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, tag: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let rec: PosteriorRecord = rec?;
            ids.push(rec.id);
            rows.push([rec.p_class0, rec.p_class1]);
        }
        PosteriorSet::new(tag, ids, rows)
    }
}

/// Per-utterance arithmetic mean of the systems' posteriors. Systems are
/// combined in tag order so the result does not depend on the order given;
/// rows follow the id order of the first system in that order.
pub fn late_fuse(systems: &[PosteriorSet]) -> Result<PosteriorSet> {
    if systems.len() < 2 {
        return Err(Error::Parameter("fusion needs at least two systems".into()));
    }
    let mut sorted: Vec<&PosteriorSet> = systems.iter().collect();
    sorted.sort_by(|a, b| a.tag.cmp(&b.tag));
    let reference = sorted[0];
    let index: Vec<HashMap<&str, usize>> = sorted
        .iter()
        .map(|s| s.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect())
        .collect();
    for (s, idx) in sorted.iter().zip(&index) {
        if s.len() != reference.len() || reference.ids.iter().any(|id| !idx.contains_key(id.as_str())) {
            return Err(Error::Alignment(format!(
                "systems {} and {} cover different utterances",
                reference.tag, s.tag
            )));
        }
    }
    let n = sorted.len() as f64;
    let rows = reference
        .ids
        .iter()
        .map(|id| {
            let mut acc = [0.0; 2];
            for (s, idx) in sorted.iter().zip(&index) {
                let r = s.rows[idx[id.as_str()]];
                acc[0] += r[0];
                acc[1] += r[1];
            }
            let mean = [acc[0] / n, acc[1] / n];
            let total = mean[0] + mean[1];
            if (total - 1.0).abs() > 1e-12 {
                [mean[0] / total, mean[1] / total]
            } else {
                mean
            }
        })
        .collect();
    let tag = format!("fusion({})", sorted.iter().map(|s| s.tag.as_str()).collect::<Vec<_>>().join("+"));
    PosteriorSet::new(tag, reference.ids.clone(), rows)
}
