//! Persistence of the unlabeled-positive set.
//!
//! Pairs go to a JSON-lines file, one `{"query_id":…, "image_id":…}` per
//! line in sorted order. Provenance and creation time go to a sidecar
//! `<file>.meta.json`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_json, read_json_lines, to_json_lines, write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle,
    File,
    Mllm,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Meta {
    provenance: Provenance,
    created_at: u64,
    pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledPositiveSet {
    pairs: BTreeSet<(String, String)>,
    pub provenance: Provenance,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl UnlabeledPositiveSet {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            pairs: BTreeSet::new(),
            provenance,
            created_at: now(),
        }
    }

    pub fn empty() -> Self {
        Self::new(Provenance::File)
    }

    pub fn insert(&mut self, query_id: impl Into<String>, image_id: impl Into<String>) -> bool {
        self.pairs.insert((query_id.into(), image_id.into()))
    }

    pub fn contains(&self, query_id: &str, image_id: &str) -> bool {
        // BTreeSet<(String, String)> can't be probed with borrowed strs
        self.pairs
            .range((query_id.to_string(), image_id.to_string())..)
            .next()
            .is_some_and(|(q, i)| q == query_id && i == image_id)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(q, i)| (q.as_str(), i.as_str()))
    }

    /// Images paired with one query.
    pub fn images_for<'a>(&'a self, query_id: &'a str) -> impl Iterator<Item = &'a str> {
        self.pairs
            .range((query_id.to_string(), String::new())..)
            .take_while(move |(q, _)| q == query_id)
            .map(|(_, i)| i.as_str())
    }

    /// Every id resolves in `ds` and no pair is a ground-truth pair.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        for (q, i) in &self.pairs {
            let query = ds.query(q)?;
            if !ds.has_image(i) {
                return Err(Error::UnknownId(i.clone()));
            }
            if &query.gt_image_id == i {
                return Err(Error::GroundTruthPair {
                    query_id: q.clone(),
                    image_id: i.clone(),
                });
            }
        }
        Ok(())
    }
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Validates against `ds` and writes pairs plus provenance sidecar.
pub fn save_unlabeled_set(set: &UnlabeledPositiveSet, ds: &Dataset, path: &Path) -> Result<()> {
    set.validate(ds)?;
    write_unchecked(set, path)
}

pub(crate) fn write_unchecked(set: &UnlabeledPositiveSet, path: &Path) -> Result<()> {
    let lines = to_json_lines(set.pairs.iter().map(|(q, i)| PairRecord {
        query_id: q.clone(),
        image_id: i.clone(),
    }))?;
    write_atomic(path, &lines)?;
    write_json(
        &meta_path(path),
        &Meta {
            provenance: set.provenance,
            created_at: set.created_at,
            pairs: set.pairs.len(),
        },
    )
}

/// Reads a pair file. Without a sidecar the provenance is `file`.
pub fn load_unlabeled_set(path: &Path) -> Result<UnlabeledPositiveSet> {
    let records: Vec<PairRecord> = read_json_lines(path)?;
    let meta_file = meta_path(path);
    let (provenance, created_at) = if meta_file.exists() {
        let meta: Meta = read_json(&meta_file)?;
        (meta.provenance, meta.created_at)
    } else {
        (Provenance::File, 0)
    };
    Ok(UnlabeledPositiveSet {
        pairs: records.into_iter().map(|r| (r.query_id, r.image_id)).collect(),
        provenance,
        created_at,
    })
}
