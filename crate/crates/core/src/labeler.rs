//! Dense Labeler: builds the unlabeled-positive set.
//!
//! For every training query the images of its own environment (minus the
//! ground truth) are scored by a frozen scorer, the top `n_cand` are kept,
//! and each candidate is put to a judge. Affirmed pairs form the set.
//! Pairs the judge could not decide are left out.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine as _;
use log::{info, warn};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Mode, Provenance, QueryEntry, Split, UnlabeledPositiveSet, T_ORIG, V_M};
use crate::error::{Error, Result};
use crate::eval::TableScorer;
use crate::io::read_json_lines;
use crate::similarity::cosine_similarity;
use crate::synth::PlantedTruth;

pub const DEFAULT_N_CAND: usize = 20;

/// Source of the scores used to shortlist candidates.
#[derive(Debug, Clone)]
pub enum ShortlistScorer {
    /// Cosine similarity between a text stream and an image stream.
    Streams { text: String, image: String },
    /// Precomputed `(query, image)` scores.
    Table(TableScorer),
}

impl Default for ShortlistScorer {
    fn default() -> Self {
        ShortlistScorer::Streams {
            text: T_ORIG.into(),
            image: V_M.into(),
        }
    }
}

impl ShortlistScorer {
    /// Scores of `query` against each of `image_ids`, all in `[-1, 1]`.
    pub fn scores(&self, ds: &Dataset, query: &QueryEntry, image_ids: &[String]) -> Result<Vec<f64>> {
        let scores = match self {
            ShortlistScorer::Streams { text, image } => {
                let t = ds
                    .stream(text)?
                    .row(&query.query_id)
                    .ok_or_else(|| Error::MissingStream {
                        stream: text.clone(),
                        record: query.query_id.clone(),
                    })?;
                let imgs = ds.stream(image)?;
                image_ids
                    .iter()
                    .map(|id| {
                        let v = imgs.row(id).ok_or_else(|| Error::MissingStream {
                            stream: image.clone(),
                            record: id.clone(),
                        })?;
                        cosine_similarity(t, v).map(f64::from)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            ShortlistScorer::Table(table) => image_ids
                .iter()
                .map(|id| {
                    table.get(&query.query_id, id).ok_or_else(|| {
                        Error::UnknownId(format!("no score for ({}, {id})", query.query_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::Invalid(format!(
                "shortlist score {s} for ({}, {}) is outside [-1, 1]",
                query.query_id, image_ids[i]
            )));
        }
        Ok(scores)
    }
}

/// Top `n_cand` of `image_ids` by descending score, ties by ascending id,
/// with `gt_image_id` removed.
pub fn shortlist_from_scores(
    image_ids: &[String],
    scores: &[f64],
    gt_image_id: &str,
    n_cand: usize,
) -> Result<Vec<String>> {
    if n_cand == 0 {
        return Err(Error::Config("n_cand must be >= 1".into()));
    }
    if image_ids.is_empty() {
        return Err(Error::EmptyEnvironment("no images to shortlist".into()));
    }
    let mut idx: Vec<usize> = (0..image_ids.len())
        .filter(|&i| image_ids[i] != gt_image_id)
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| image_ids[a].cmp(&image_ids[b]))
    });
    idx.truncate(n_cand);
    Ok(idx.into_iter().map(|i| image_ids[i].clone()).collect())
}

/// Shortlist for one query of `ds`.
pub fn shortlist(ds: &Dataset, query_id: &str, scorer: &ShortlistScorer, n_cand: usize) -> Result<Vec<String>> {
    let q = ds.query(query_id)?;
    let env = ds.environment(&q.env_id)?;
    if env.image_ids.is_empty() {
        return Err(Error::EmptyEnvironment(env.env_id.clone()));
    }
    let scores = scorer.scores(ds, q, &env.image_ids)?;
    shortlist_from_scores(&env.image_ids, &scores, &q.gt_image_id, n_cand)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    Oracle,
    File,
    MllmHttp,
}

impl JudgeKind {
    pub fn provenance(self) -> Provenance {
        match self {
            JudgeKind::Oracle => Provenance::Oracle,
            JudgeKind::File => Provenance::File,
            JudgeKind::MllmHttp => Provenance::Mllm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            JudgeKind::Oracle => "oracle",
            JudgeKind::File => "file",
            JudgeKind::MllmHttp => "mllm-http",
        }
    }
}

/// Decides whether an image shows what a query asks for.
pub trait Judge: Sync {
    fn kind(&self) -> JudgeKind;

    /// Identifies the prompt used for `mode`; part of the cache key.
    fn prompt_hash(&self, _mode: Mode) -> String {
        String::new()
    }

    /// `Ok(None)` when the judge could not reach a verdict (the pair is then
    /// left out); `Err` aborts labeling.
    fn judge(&self, ds: &Dataset, query: &QueryEntry, image_id: &str) -> Result<Option<bool>>;
}

/// Answers from planted truth.
pub struct OracleJudge {
    pub planted: PlantedTruth,
}

impl Judge for OracleJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::Oracle
    }

    fn judge(&self, ds: &Dataset, query: &QueryEntry, image_id: &str) -> Result<Option<bool>> {
        if !ds.has_image(image_id) {
            return Err(Error::UnknownId(image_id.to_string()));
        }
        Ok(Some(self.planted.contains(&query.query_id, image_id)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub query_id: String,
    pub image_id: String,
    pub verdict: bool,
}

/// Answers from a JSON-lines verdict file; unlisted pairs are `false`.
pub struct FileJudge {
    verdicts: HashMap<(String, String), bool>,
}

impl FileJudge {
    pub fn new(records: impl IntoIterator<Item = VerdictRecord>) -> Self {
        Self {
            verdicts: records
                .into_iter()
                .map(|r| ((r.query_id, r.image_id), r.verdict))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_json_lines::<VerdictRecord>(path)?))
    }
}

impl Judge for FileJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::File
    }

    fn judge(&self, _ds: &Dataset, query: &QueryEntry, image_id: &str) -> Result<Option<bool>> {
        Ok(Some(
            self.verdicts
                .get(&(query.query_id.clone(), image_id.to_string()))
                .copied()
                .unwrap_or(false),
        ))
    }
}

/// `true` iff `text` contains `True` as a whole word (case-sensitive).
pub fn parse_verdict(text: &str) -> bool {
    thread_local! {
        static TRUE_WORD: Regex = Regex::new(r"\bTrue\b").expect("valid pattern");
    }
    TRUE_WORD.with(|re| re.is_match(text))
}

pub const ENDPOINT_ENV: &str = "RXF_JUDGE_ENDPOINT";
pub const API_KEY_ENV: &str = "RXF_JUDGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmConfig {
    /// Chat-completions URL; falls back to `RXF_JUDGE_ENDPOINT`.
    pub endpoint: Option<String>,
    pub model: String,
    /// `{instruction}` is replaced by the query text.
    pub target_prompt: String,
    pub receptacle_prompt: String,
    pub timeout_secs: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub max_tokens: u32,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: "llava-v1.6-mistral-7b".into(),
            target_prompt: "Instruction: \"{instruction}\". Can the object to be carried be seen in this image? \
                            Answer True or False."
                .into(),
            receptacle_prompt: "Instruction: \"{instruction}\". Can the place where the object should be put be \
                                seen in this image? Answer True or False."
                .into(),
            timeout_secs: 60,
            retries: 2,
            max_tokens: 32,
        }
    }
}

impl MllmConfig {
    fn template(&self, mode: Mode) -> &str {
        match mode {
            Mode::Target => &self.target_prompt,
            Mode::Receptacle => &self.receptacle_prompt,
        }
    }
}

/// Judge backed by an OpenAI-compatible chat-completions endpoint.
pub struct MllmHttpJudge {
    cfg: MllmConfig,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl MllmHttpJudge {
    /// Resolves the endpoint and key from `cfg` and the environment.
    pub fn new(cfg: MllmConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .ok_or_else(|| Error::Config(format!("no judge endpoint: set `endpoint` or {ENDPOINT_ENV}")))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Judge(format!("http client: {e}")))?;
        Ok(Self {
            cfg,
            endpoint,
            api_key,
            client,
        })
    }

    fn request_body(&self, query: &QueryEntry, image: &[u8], mime: &str) -> serde_json::Value {
        let prompt = self
            .cfg
            .template(query.mode)
            .replace("{instruction}", query.text.as_deref().unwrap_or(""));
        let data = base64::engine::general_purpose::STANDARD.encode(image);
        serde_json::json!({
            "model": self.cfg.model,
            "temperature": 0,
            "max_tokens": self.cfg.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}
                ]
            }]
        })
    }

    fn post_once(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let v: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no message content".to_string())
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

impl Judge for MllmHttpJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::MllmHttp
    }

    fn prompt_hash(&self, mode: Mode) -> String {
        let digest = Sha256::digest(format!("{}\n{}", self.cfg.model, self.cfg.template(mode)).as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn judge(&self, ds: &Dataset, query: &QueryEntry, image_id: &str) -> Result<Option<bool>> {
        let path = ds
            .image_file(image_id)
            .ok_or_else(|| Error::Invalid(format!("no image file recorded for `{image_id}`")))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let body = self.request_body(query, &bytes, mime_for(&path));
        let mut last = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << attempt.min(6)));
            }
            match self.post_once(&body) {
                Ok(text) => return Ok(Some(parse_verdict(&text))),
                Err(e) => last = e,
            }
        }
        warn!(
            "judge gave up on ({}, {image_id}) after {} attempts: {last}",
            query.query_id,
            self.cfg.retries + 1
        );
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct CacheKey {
    query_id: String,
    image_id: String,
    judge: JudgeKind,
    prompt_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    verdict: bool,
}

/// Append-only JSON-lines store of decided verdicts.
pub struct VerdictCache {
    path: PathBuf,
    known: HashMap<CacheKey, bool>,
    file: Mutex<File>,
}

impl VerdictCache {
    pub fn open(path: &Path) -> Result<Self> {
        let known = if path.exists() {
            read_json_lines::<CacheLine>(path)?
                .into_iter()
                .map(|l| (l.key, l.verdict))
                .collect()
        } else {
            HashMap::new()
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            known,
            file: Mutex::new(file),
        })
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    fn get(&self, key: &CacheKey) -> Option<bool> {
        self.known.get(key).copied()
    }

    fn append(&self, key: CacheKey, verdict: bool) -> Result<()> {
        let mut line = serde_json::to_vec(&CacheLine { key, verdict }).map_err(|e| Error::json(&self.path, e))?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("cache lock");
        // one write call per line keeps lines whole under O_APPEND
        f.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub n_cand: usize,
    /// Concurrent judge calls; 0 uses all cores.
    pub jobs: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n_cand: DEFAULT_N_CAND,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub queries: usize,
    pub candidates: usize,
    pub affirmed: usize,
    pub undecided: usize,
    pub from_cache: usize,
}

#[derive(Debug, Clone)]
pub struct LabelOutcome {
    pub set: UnlabeledPositiveSet,
    pub stats: LabelStats,
    /// Shortlist of every query, in dataset order.
    pub shortlists: Vec<(String, Vec<String>)>,
}

/// Labels every query of a training split.
pub fn label_dataset(
    ds: &Dataset,
    scorer: &ShortlistScorer,
    judge: &dyn Judge,
    cfg: &LabelConfig,
    cache: Option<&VerdictCache>,
) -> Result<LabelOutcome> {
    if cfg.n_cand == 0 {
        return Err(Error::Config("n_cand must be >= 1".into()));
    }
    if ds.split() != Split::Train {
        return Err(Error::Config(format!(
            "labeling runs on the train split; `{}` is {}",
            ds.id(),
            ds.split().name()
        )));
    }
    let shortlists = ds
        .queries()
        .iter()
        .map(|q| Ok((q.query_id.clone(), shortlist(ds, &q.query_id, scorer, cfg.n_cand)?)))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&QueryEntry, &str)> = shortlists
        .iter()
        .flat_map(|(q, cands)| {
            let q = ds.query(q).expect("listed");
            cands.iter().map(move |c| (q, c.as_str()))
        })
        .collect();

    let decide = |&(q, img): &(&QueryEntry, &str)| -> Result<(Option<bool>, bool)> {
        let key = CacheKey {
            query_id: q.query_id.clone(),
            image_id: img.to_string(),
            judge: judge.kind(),
            prompt_hash: judge.prompt_hash(q.mode),
        };
        if let Some(v) = cache.and_then(|c| c.get(&key)) {
            return Ok((Some(v), true));
        }
        let v = judge.judge(ds, q, img)?;
        if let (Some(v), Some(c)) = (v, cache) {
            c.append(key, v)?;
        }
        Ok((v, false))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let verdicts: Vec<(Option<bool>, bool)> = pool.install(|| pairs.par_iter().map(decide).collect::<Result<_>>())?;

    let mut set = UnlabeledPositiveSet::new(judge.kind().provenance());
    let mut stats = LabelStats {
        queries: shortlists.len(),
        candidates: pairs.len(),
        ..LabelStats::default()
    };
    for ((q, img), (v, cached)) in pairs.iter().zip(&verdicts) {
        stats.from_cache += usize::from(*cached);
        match v {
            Some(true) => {
                set.insert(q.query_id.clone(), img.to_string());
                stats.affirmed += 1;
            }
            Some(false) => {}
            None => stats.undecided += 1,
        }
    }
    set.validate(ds)?;
    info!(
        "labeled {} queries: {} candidates, {} affirmed, {} undecided, {} from cache",
        stats.queries, stats.candidates, stats.affirmed, stats.undecided, stats.from_cache
    );
    Ok(LabelOutcome { set, stats, shortlists })
}
