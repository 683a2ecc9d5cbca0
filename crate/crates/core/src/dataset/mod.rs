//! Dataset manifests, feature-stream storage and validation.
//!
//! A dataset directory holds one split:
//!
//! ```text
//! manifest.json
//! streams/<name>.rxf        RXF1 matrix, one row per record
//! streams/<name>.ids.json   JSON array naming the record of each row
//! ```
//!
//! Image streams have one row per image id, text streams one row per query
//! id. The phrase stream may hold any number of rows per query id (including
//! none); their order is the phrase order.

pub mod matrix;
pub mod unlabeled;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::tensor::Tensor;

pub use unlabeled::{load_unlabeled_set, save_unlabeled_set, Provenance, UnlabeledPositiveSet};

pub const FORMAT_TAG: &str = "rxf-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const V_L: &str = "v_L";
pub const V_M: &str = "v_M";
pub const V_LAT: &str = "v_lat";
pub const V_GS: &str = "v_GS";
pub const E_SGM: &str = "e_SGM";
pub const T_ORIG: &str = "t_orig";
pub const T_STD: &str = "t_std";
pub const PHRASES: &str = "phrases";

pub const IMAGE_STREAMS: [&str; 5] = [V_L, V_M, V_LAT, V_GS, E_SGM];
pub const TEXT_STREAMS: [&str; 2] = [T_ORIG, T_STD];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Target,
    Receptacle,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Target, Mode::Receptacle];

    pub fn index(self) -> usize {
        match self {
            Mode::Target => 0,
            Mode::Receptacle => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Target => "target",
            Mode::Receptacle => "receptacle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Mode::Target),
            "receptacle" => Ok(Mode::Receptacle),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentEntry {
    pub env_id: String,
    pub image_ids: Vec<String>,
    pub query_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: String,
    /// Queries sharing an instruction differ only in mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_id: Option<String>,
    pub env_id: String,
    pub mode: Mode,
    pub gt_image_id: String,
    /// Raw instruction text, for judges that read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub dataset_id: String,
    pub split: Split,
    pub stream_schema: BTreeMap<String, usize>,
    pub image_streams: Vec<String>,
    pub text_streams: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase_stream: Option<String>,
    pub environments: Vec<EnvironmentEntry>,
    pub queries: Vec<QueryEntry>,
    /// Optional image files (relative to the dataset root) for judges that
    /// need pixels.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub image_files: BTreeMap<String, String>,
}

/// Named embedding streams for one record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub streams: BTreeMap<String, Vec<f32>>,
    pub phrases: Vec<Vec<f32>>,
}

impl FeatureRecord {
    pub fn stream(&self, name: &str) -> Result<&[f32]> {
        self.streams
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingStream {
                stream: name.to_string(),
                record: self.id.clone(),
            })
    }
}

/// One stored stream: a matrix plus the record id of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamMatrix {
    ids: Vec<String>,
    data: Tensor<f32>,
    index: HashMap<String, Vec<usize>>,
}

impl StreamMatrix {
    pub fn new(ids: Vec<String>, data: Tensor<f32>) -> Result<Self> {
        if ids.len() != data.rows() {
            return Err(Error::Invalid(format!(
                "{} ids for {} matrix rows",
                ids.len(),
                data.rows()
            )));
        }
        let mut index: HashMap<String, Vec<usize>> = HashMap::new();
        for (r, id) in ids.iter().enumerate() {
            index.entry(id.clone()).or_default().push(r);
        }
        Ok(Self { ids, data, index })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn rows_for(&self, id: &str) -> &[usize] {
        self.index.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.rows_for(id).first().map(|&r| self.data.row(r))
    }
}

/// A validated, immutable dataset split.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: Option<PathBuf>,
    manifest: DatasetManifest,
    streams: BTreeMap<String, StreamMatrix>,
    query_index: HashMap<String, usize>,
    env_index: HashMap<String, usize>,
    image_env: HashMap<String, usize>,
}

impl Dataset {
    /// Validates every manifest and stream invariant.
    pub fn new(manifest: DatasetManifest, streams: BTreeMap<String, StreamMatrix>) -> Result<Self> {
        let mut ds = Self {
            root: None,
            manifest,
            streams,
            query_index: HashMap::new(),
            env_index: HashMap::new(),
            image_env: HashMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&mut self) -> Result<()> {
        let m = &self.manifest;
        if m.format != FORMAT_TAG {
            return Err(Error::Invalid(format!("unsupported format tag `{}`", m.format)));
        }
        for (name, &dim) in &m.stream_schema {
            if dim == 0 {
                return Err(Error::Invalid(format!("stream `{name}` declares dimension 0")));
            }
        }
        let declared = m
            .image_streams
            .iter()
            .chain(&m.text_streams)
            .chain(m.phrase_stream.iter());
        for name in declared {
            if !m.stream_schema.contains_key(name) {
                return Err(Error::Invalid(format!("stream `{name}` missing from stream_schema")));
            }
            if !self.streams.contains_key(name) {
                return Err(Error::UnknownStream(name.clone()));
            }
        }
        for (name, s) in &self.streams {
            let expected = *m
                .stream_schema
                .get(name)
                .ok_or_else(|| Error::UnknownStream(name.clone()))?;
            if s.dim() != expected {
                let record = s.ids.first().cloned().unwrap_or_default();
                return Err(Error::Dimension {
                    stream: name.clone(),
                    record,
                    expected,
                    actual: s.dim(),
                });
            }
            for (r, id) in s.ids.iter().enumerate() {
                if let Some(c) = s.data.row(r).iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "stream `{name}`, record `{id}`, column {c}"
                    )));
                }
            }
        }

        let mut env_index = HashMap::new();
        let mut image_env = HashMap::new();
        for (ei, env) in m.environments.iter().enumerate() {
            if env_index.insert(env.env_id.clone(), ei).is_some() {
                return Err(Error::Invalid(format!("duplicate environment id `{}`", env.env_id)));
            }
            if env.image_ids.is_empty() && !env.query_ids.is_empty() {
                return Err(Error::EmptyEnvironment(env.env_id.clone()));
            }
            for img in &env.image_ids {
                if image_env.insert(img.clone(), ei).is_some() {
                    return Err(Error::Invalid(format!("duplicate image id `{img}`")));
                }
            }
        }
        let mut query_index = HashMap::new();
        for (qi, q) in m.queries.iter().enumerate() {
            if query_index.insert(q.query_id.clone(), qi).is_some() {
                return Err(Error::Invalid(format!("duplicate query id `{}`", q.query_id)));
            }
            let &ei = env_index.get(&q.env_id).ok_or_else(|| {
                Error::Dangling(format!("query `{}` -> environment `{}`", q.query_id, q.env_id))
            })?;
            if image_env.get(&q.gt_image_id) != Some(&ei) {
                return Err(Error::Dangling(format!(
                    "query `{}` -> ground-truth image `{}` not in environment `{}`",
                    q.query_id, q.gt_image_id, q.env_id
                )));
            }
        }
        for env in &m.environments {
            for qid in &env.query_ids {
                let qi = query_index.get(qid).ok_or_else(|| {
                    Error::Dangling(format!("environment `{}` -> query `{qid}`", env.env_id))
                })?;
                if m.queries[*qi].env_id != env.env_id {
                    return Err(Error::Dangling(format!(
                        "query `{qid}` listed under `{}` but belongs to `{}`",
                        env.env_id, m.queries[*qi].env_id
                    )));
                }
            }
        }
        let listed: usize = m.environments.iter().map(|e| e.query_ids.len()).sum();
        if listed != m.queries.len() {
            return Err(Error::Invalid(format!(
                "{} queries declared but {listed} listed under environments",
                m.queries.len()
            )));
        }

        for name in &m.image_streams {
            let s = &self.streams[name];
            for img in image_env.keys() {
                if s.rows_for(img).len() != 1 {
                    return Err(Error::MissingStream {
                        stream: name.clone(),
                        record: img.clone(),
                    });
                }
            }
        }
        for name in &m.text_streams {
            let s = &self.streams[name];
            for q in &m.queries {
                if s.rows_for(&q.query_id).len() != 1 {
                    return Err(Error::MissingStream {
                        stream: name.clone(),
                        record: q.query_id.clone(),
                    });
                }
            }
        }
        for (name, s) in &self.streams {
            let is_image = m.image_streams.contains(name);
            for id in s.index.keys() {
                let known = if is_image {
                    image_env.contains_key(id)
                } else {
                    query_index.contains_key(id)
                };
                if !known {
                    return Err(Error::Dangling(format!("stream `{name}` row for unknown id `{id}`")));
                }
            }
        }
        for img in m.image_files.keys() {
            if !image_env.contains_key(img) {
                return Err(Error::Dangling(format!("image file for unknown image `{img}`")));
            }
        }

        self.query_index = query_index;
        self.env_index = env_index;
        self.image_env = image_env;
        Ok(())
    }

    /// Reads and validates a dataset directory (or a path to its manifest).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (root, path.to_path_buf())
        };
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        let mut streams = BTreeMap::new();
        for name in manifest.stream_schema.keys() {
            let (mpath, ipath) = stream_paths(&root, name);
            let data = matrix::read(&mpath)?;
            let ids: Vec<String> = read_json(&ipath)?;
            let sm = StreamMatrix::new(ids, data).map_err(|e| match e {
                Error::Invalid(d) => Error::Format {
                    path: mpath.clone(),
                    detail: d,
                },
                other => other,
            })?;
            streams.insert(name.clone(), sm);
        }
        let mut ds = Self::new(manifest, streams)?;
        ds.root = Some(root);
        Ok(ds)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, s) in &self.streams {
            let (mpath, ipath) = stream_paths(dir, name);
            matrix::write(&mpath, &s.data)?;
            write_json(&ipath, &s.ids)?;
        }
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn id(&self) -> &str {
        &self.manifest.dataset_id
    }

    pub fn split(&self) -> Split {
        self.manifest.split
    }

    pub fn environments(&self) -> &[EnvironmentEntry] {
        &self.manifest.environments
    }

    pub fn queries(&self) -> &[QueryEntry] {
        &self.manifest.queries
    }

    pub fn stream(&self, name: &str) -> Result<&StreamMatrix> {
        self.streams
            .get(name)
            .ok_or_else(|| Error::UnknownStream(name.to_string()))
    }

    pub fn stream_dim(&self, name: &str) -> Result<usize> {
        self.manifest
            .stream_schema
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownStream(name.to_string()))
    }

    pub fn query(&self, id: &str) -> Result<&QueryEntry> {
        self.query_index
            .get(id)
            .map(|&i| &self.manifest.queries[i])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn environment(&self, id: &str) -> Result<&EnvironmentEntry> {
        self.env_index
            .get(id)
            .map(|&i| &self.manifest.environments[i])
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Environment holding an image.
    pub fn image_environment(&self, image_id: &str) -> Result<&EnvironmentEntry> {
        self.image_env
            .get(image_id)
            .map(|&i| &self.manifest.environments[i])
            .ok_or_else(|| Error::UnknownId(image_id.to_string()))
    }

    pub fn has_image(&self, image_id: &str) -> bool {
        self.image_env.contains_key(image_id)
    }

    /// Sibling query with the same instruction in another mode, if any.
    pub fn sibling_query(&self, query_id: &str, mode: Mode) -> Result<Option<&QueryEntry>> {
        let q = self.query(query_id)?;
        if q.mode == mode {
            return Ok(Some(q));
        }
        let Some(inst) = &q.instruction_id else {
            return Ok(None);
        };
        let env = self.environment(&q.env_id)?;
        Ok(env
            .query_ids
            .iter()
            .map(|id| self.query(id).expect("validated"))
            .find(|o| o.instruction_id.as_ref() == Some(inst) && o.mode == mode))
    }

    /// Rows of `stream` for `ids`, in order. Values are the stored floats.
    pub fn feature_matrix(&self, stream: &str, ids: &[impl AsRef<str>]) -> Result<Tensor<f32>> {
        let s = self.stream(stream)?;
        let mut data = Vec::with_capacity(ids.len() * s.dim());
        for id in ids {
            let id = id.as_ref();
            let row = s.row(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
            data.extend_from_slice(row);
        }
        Tensor::new(ids.len(), s.dim(), data)
    }

    /// Phrase vectors of a query in stored order; empty if the dataset has no
    /// phrase stream.
    pub fn phrases(&self, query_id: &str) -> Vec<&[f32]> {
        let Some(name) = &self.manifest.phrase_stream else {
            return Vec::new();
        };
        let s = &self.streams[name];
        s.rows_for(query_id).iter().map(|&r| s.data.row(r)).collect()
    }

    pub fn image_record(&self, image_id: &str) -> Result<FeatureRecord> {
        if !self.has_image(image_id) {
            return Err(Error::UnknownId(image_id.to_string()));
        }
        let mut streams = BTreeMap::new();
        for name in &self.manifest.image_streams {
            let row = self.streams[name].row(image_id).expect("validated");
            streams.insert(name.clone(), row.to_vec());
        }
        Ok(FeatureRecord {
            id: image_id.to_string(),
            streams,
            phrases: Vec::new(),
        })
    }

    pub fn text_record(&self, query_id: &str) -> Result<FeatureRecord> {
        self.query(query_id)?;
        let mut streams = BTreeMap::new();
        for name in &self.manifest.text_streams {
            let row = self.streams[name].row(query_id).expect("validated");
            streams.insert(name.clone(), row.to_vec());
        }
        Ok(FeatureRecord {
            id: query_id.to_string(),
            streams,
            phrases: self.phrases(query_id).into_iter().map(<[f32]>::to_vec).collect(),
        })
    }

    pub fn image_file(&self, image_id: &str) -> Option<PathBuf> {
        let rel = self.manifest.image_files.get(image_id)?;
        Some(match &self.root {
            Some(root) => root.join(rel),
            None => PathBuf::from(rel),
        })
    }
}

fn stream_paths(root: &Path, name: &str) -> (PathBuf, PathBuf) {
    let dir = root.join("streams");
    (dir.join(format!("{name}.rxf")), dir.join(format!("{name}.ids.json")))
}

/// Accumulates stream rows while building a dataset in memory.
#[derive(Debug, Default)]
pub struct StreamBuilder {
    rows: BTreeMap<String, (Vec<String>, Vec<f32>, usize)>,
}

impl StreamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stream: &str, id: &str, row: &[f32]) -> Result<()> {
        let entry = self
            .rows
            .entry(stream.to_string())
            .or_insert_with(|| (Vec::new(), Vec::new(), row.len()));
        if row.len() != entry.2 {
            return Err(Error::Dimension {
                stream: stream.to_string(),
                record: id.to_string(),
                expected: entry.2,
                actual: row.len(),
            });
        }
        entry.0.push(id.to_string());
        entry.1.extend_from_slice(row);
        Ok(())
    }

    /// Registers a stream that may end up with no rows.
    pub fn declare(&mut self, stream: &str, dim: usize) {
        self.rows
            .entry(stream.to_string())
            .or_insert_with(|| (Vec::new(), Vec::new(), dim));
    }

    pub fn build(self) -> Result<BTreeMap<String, StreamMatrix>> {
        self.rows
            .into_iter()
            .map(|(name, (ids, data, dim))| {
                let t = Tensor::new(ids.len(), dim, data)?;
                Ok((name, StreamMatrix::new(ids, t)?))
            })
            .collect()
    }
}
