//! Ranking and per-environment recall@K.
//!
//! Every query entry (one instruction in one mode) is an evaluation unit.
//! Recall is averaged over the units of an environment first, then over
//! environments without weighting. Environments without queries do not
//! contribute.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EnvironmentEntry, FeatureRecord, Mode, QueryEntry};
use crate::encoders::{embed_images, embed_texts, encode_text, EncoderConfig, ImageBatch, TextBatch};
use crate::error::{Error, Result};
use crate::io::read_json_lines;
use crate::optim::ParamSet;
use crate::similarity::cosine_similarity;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Images of one environment ordered by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub mode: Mode,
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Sorts by descending score; equal scores go by ascending image id.
    pub fn from_scores(query_id: &str, mode: Mode, image_ids: &[String], scores: &[f64]) -> Result<Self> {
        if image_ids.len() != scores.len() {
            return Err(Error::shape(
                "rank",
                format!("{} ids vs {} scores", image_ids.len(), scores.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "score of ({query_id}, {})",
                image_ids[i]
            )));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| image_ids[a].cmp(&image_ids[b]))
        });
        Ok(Self {
            query_id: query_id.to_string(),
            mode,
            ranking: order.iter().map(|&i| image_ids[i].clone()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }

    /// 1-based position of an image.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.ranking.iter().position(|i| i == image_id).map(|p| p + 1)
    }
}

/// 1 if `gt` is among the first `k` entries, else 0.
pub fn recall_at_k(ranked: &RankedList, gt_image_id: &str, k: usize) -> Result<u8> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let rank = ranked.rank_of(gt_image_id).ok_or_else(|| {
        Error::Invalid(format!(
            "ground truth `{gt_image_id}` missing from the ranking of `{}`",
            ranked.query_id
        ))
    })?;
    Ok(u8::from(rank <= k))
}

/// Produces `scores[q][i]` for the given queries against `env.image_ids`.
pub trait Scorer: Sync {
    fn score(&self, ds: &Dataset, env: &EnvironmentEntry, queries: &[&QueryEntry]) -> Result<Vec<Vec<f64>>>;
}

/// Cosine similarity between trained text and image embeddings.
pub struct ModelScorer<'a> {
    pub params: &'a ParamSet<f32>,
    pub cfg: &'a EncoderConfig,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, ds: &Dataset, env: &EnvironmentEntry, queries: &[&QueryEntry]) -> Result<Vec<Vec<f64>>> {
        let images = EmbeddedImages::from_dataset(self.params, self.cfg, ds, &env.image_ids)?;
        let ids: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
        let texts = TextBatch::from_dataset(ds, &ids, None, &self.cfg.text)?;
        let h_txt = embed_texts(self.params, self.cfg, &texts)?;
        (0..queries.len())
            .map(|q| images.scores(h_txt.row(q)))
            .collect()
    }
}

/// Scores read from a file, keyed by `(query_id, image_id)`.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    scores: HashMap<(String, String), f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub image_id: String,
    pub score: f64,
}

impl TableScorer {
    pub fn new(records: impl IntoIterator<Item = ScoreRecord>) -> Self {
        Self {
            scores: records
                .into_iter()
                .map(|r| ((r.query_id, r.image_id), r.score))
                .collect(),
        }
    }

    /// JSON lines of `{"query_id":…, "image_id":…, "score":…}`.
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ScoreRecord> = read_json_lines(path)?;
        Ok(Self::new(records))
    }

    pub fn get(&self, query_id: &str, image_id: &str) -> Option<f64> {
        self.scores
            .get(&(query_id.to_string(), image_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl Scorer for TableScorer {
    fn score(&self, _ds: &Dataset, env: &EnvironmentEntry, queries: &[&QueryEntry]) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|q| {
                env.image_ids
                    .iter()
                    .map(|i| {
                        self.get(&q.query_id, i).ok_or_else(|| {
                            Error::UnknownId(format!("no score for ({}, {i})", q.query_id))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Image embeddings of one environment, computed once and reused per query.
#[derive(Debug, Clone)]
pub struct EmbeddedImages {
    pub ids: Vec<String>,
    pub embeddings: Tensor<f32>,
}

impl EmbeddedImages {
    pub fn from_dataset(ps: &ParamSet<f32>, cfg: &EncoderConfig, ds: &Dataset, ids: &[String]) -> Result<Self> {
        let batch = ImageBatch::from_dataset(ds, ids, &cfg.image)?;
        Ok(Self {
            ids: ids.to_vec(),
            embeddings: embed_images(ps, cfg, &batch)?,
        })
    }

    pub fn from_records(ps: &ParamSet<f32>, cfg: &EncoderConfig, records: &[FeatureRecord]) -> Result<Self> {
        let batch = ImageBatch::from_records(records, &cfg.image)?;
        Ok(Self {
            ids: batch.ids.clone(),
            embeddings: embed_images(ps, cfg, &batch)?,
        })
    }

    /// Cosine similarity of `h_txt` against every image.
    pub fn scores(&self, h_txt: &[f32]) -> Result<Vec<f64>> {
        (0..self.ids.len())
            .map(|i| cosine_similarity(h_txt, self.embeddings.row(i)).map(f64::from))
            .collect()
    }
}

/// Encodes one query and ranks cached image embeddings against it.
pub fn rank_images(
    ps: &ParamSet<f32>,
    cfg: &EncoderConfig,
    query: &FeatureRecord,
    mode: Mode,
    images: &EmbeddedImages,
) -> Result<RankedList> {
    if images.ids.is_empty() {
        return Err(Error::EmptyEnvironment(format!("no images to rank for `{}`", query.id)));
    }
    let h = encode_text(ps, cfg, query, mode)?;
    RankedList::from_scores(&query.id, mode, &images.ids, &images.scores(&h)?)
}

/// Ranks one dataset query in `mode`. If the query's own mode differs, its
/// sibling query (same instruction) is used when present; otherwise the
/// query's text is encoded under the requested mode.
pub fn rank_query(
    ps: &ParamSet<f32>,
    cfg: &EncoderConfig,
    ds: &Dataset,
    query_id: &str,
    mode: Option<Mode>,
) -> Result<RankedList> {
    let q = ds.query(query_id)?;
    let mode = mode.unwrap_or(q.mode);
    let resolved = ds.sibling_query(query_id, mode)?.unwrap_or(q);
    let env = ds.environment(&resolved.env_id)?;
    let images = EmbeddedImages::from_dataset(ps, cfg, ds, &env.image_ids)?;
    rank_images(ps, cfg, &ds.text_record(&resolved.query_id)?, mode, &images)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentRecall {
    pub env_id: String,
    pub queries: usize,
    pub recall: Vec<RecallAt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecall {
    pub mode: Mode,
    pub queries: usize,
    pub recall: Vec<RecallAt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub split: String,
    pub ks: Vec<usize>,
    pub queries: usize,
    /// Unweighted mean over environments.
    pub recall: Vec<RecallAt>,
    /// Same protocol restricted to each mode's queries.
    pub per_mode: Vec<ModeRecall>,
    pub environments: Vec<EnvironmentRecall>,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

/// Parses `"5,10,20"`.
pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad K value `{p}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    check_ks(&ks)?;
    Ok(ks)
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K values must be a non-empty list of integers >= 1".into()));
    }
    Ok(())
}

struct Unit {
    mode: Mode,
    hits: Vec<u8>,
}

/// Ranks every query of `ds` with `scorer` and aggregates recall@K.
pub fn evaluate_with(ds: &Dataset, scorer: &dyn Scorer, ks: &[usize]) -> Result<(MetricsReport, Vec<RankedList>)> {
    check_ks(ks)?;
    if ds.queries().is_empty() {
        return Err(Error::EmptySplit(format!("dataset `{}` has no queries", ds.id())));
    }
    let per_env: Vec<(String, Vec<Unit>, Vec<RankedList>)> = ds
        .environments()
        .par_iter()
        .filter(|env| !env.query_ids.is_empty())
        .map(|env| {
            if env.image_ids.is_empty() {
                return Err(Error::EmptyEnvironment(env.env_id.clone()));
            }
            let queries = env
                .query_ids
                .iter()
                .map(|id| ds.query(id))
                .collect::<Result<Vec<_>>>()?;
            let scores = scorer.score(ds, env, &queries)?;
            let mut units = Vec::with_capacity(queries.len());
            let mut lists = Vec::with_capacity(queries.len());
            for (q, s) in queries.iter().zip(&scores) {
                let list = RankedList::from_scores(&q.query_id, q.mode, &env.image_ids, s)?;
                let hits = ks
                    .iter()
                    .map(|&k| recall_at_k(&list, &q.gt_image_id, k))
                    .collect::<Result<Vec<_>>>()?;
                units.push(Unit { mode: q.mode, hits });
                lists.push(list);
            }
            Ok((env.env_id.clone(), units, lists))
        })
        .collect::<Result<_>>()?;

    let recall_of = |units: &[&Unit]| -> Vec<RecallAt> {
        ks.iter()
            .enumerate()
            .map(|(j, &k)| RecallAt {
                k,
                recall: units.iter().map(|u| f64::from(u.hits[j])).sum::<f64>() / units.len() as f64,
            })
            .collect()
    };
    let mean_over = |envs: &[Vec<RecallAt>]| -> Vec<RecallAt> {
        ks.iter()
            .enumerate()
            .map(|(j, &k)| RecallAt {
                k,
                recall: envs.iter().map(|r| r[j].recall).sum::<f64>() / envs.len() as f64,
            })
            .collect()
    };

    let environments: Vec<EnvironmentRecall> = per_env
        .iter()
        .map(|(env_id, units, _)| EnvironmentRecall {
            env_id: env_id.clone(),
            queries: units.len(),
            recall: recall_of(&units.iter().collect::<Vec<_>>()),
        })
        .collect();
    let recall = mean_over(&environments.iter().map(|e| e.recall.clone()).collect::<Vec<_>>());

    let mut per_mode = Vec::new();
    for mode in Mode::ALL {
        let envs: Vec<Vec<RecallAt>> = per_env
            .iter()
            .filter_map(|(_, units, _)| {
                let sel: Vec<&Unit> = units.iter().filter(|u| u.mode == mode).collect();
                (!sel.is_empty()).then(|| recall_of(&sel))
            })
            .collect();
        if envs.is_empty() {
            continue;
        }
        let queries = per_env
            .iter()
            .flat_map(|(_, u, _)| u)
            .filter(|u| u.mode == mode)
            .count();
        per_mode.push(ModeRecall {
            mode,
            queries,
            recall: mean_over(&envs),
        });
    }

    let report = MetricsReport {
        dataset_id: ds.id().to_string(),
        split: ds.split().name().to_string(),
        ks: ks.to_vec(),
        queries: environments.iter().map(|e| e.queries).sum(),
        recall,
        per_mode,
        environments,
    };
    let lists = per_env.into_iter().flat_map(|(_, _, l)| l).collect();
    Ok((report, lists))
}

/// Model evaluation over a dataset.
pub fn evaluate(
    ps: &ParamSet<f32>,
    cfg: &EncoderConfig,
    ds: &Dataset,
    ks: &[usize],
) -> Result<(MetricsReport, Vec<RankedList>)> {
    cfg.check_dataset(ds)?;
    evaluate_with(ds, &ModelScorer { params: ps, cfg }, ks)
}
