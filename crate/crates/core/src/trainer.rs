//! Mini-batch training of both encoders against a batch loss.
//!
//! Sample `i` of a batch is a training query together with its ground-truth
//! image, so the diagonal of the similarity matrix holds the labeled
//! positives. Off-diagonal pairs found in the unlabeled-positive set are
//! marked in the batch mask.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataset::{Dataset, UnlabeledPositiveSet};
use crate::encoders::{image_forward, init_params, text_forward, EncoderConfig, ImageBatch, TextBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, DEFAULT_KS};
use crate::graph::{Gradients, Graph};
use crate::io::write_json;
use crate::losses::{BatchPairing, LossSpec, LossTerms};
use crate::optim::{AdamWConfig, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossSpec,
    /// Seeds both initialisation and batch order.
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    /// Validation recall@K used for model selection.
    pub select_k: usize,
    /// Global gradient-norm cap; off when absent.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            batch_size: 128,
            epochs: 20,
            loss: LossSpec::default(),
            seed: 0,
            eval_ks: DEFAULT_KS.to_vec(),
            select_k: 10,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0, eps > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.select_k == 0 || self.eval_ks.contains(&0) {
            return Err(Error::Config("K values must be >= 1".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }

    fn ks(&self) -> Vec<usize> {
        let mut ks = self.eval_ks.clone();
        if !ks.contains(&self.select_k) {
            ks.push(self.select_k);
            ks.sort_unstable();
        }
        ks
    }
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `mask[i * n + j]` is true iff `(query_ids[i], image_ids[j])` is in `s`
/// and `i != j`.
pub fn batch_mask(s: &UnlabeledPositiveSet, query_ids: &[String], image_ids: &[String]) -> Vec<bool> {
    let n = query_ids.len();
    let mut mask = vec![false; n * image_ids.len()];
    for (i, q) in query_ids.iter().enumerate() {
        for (j, img) in image_ids.iter().enumerate() {
            mask[i * image_ids.len() + j] = i != j && s.contains(q, img);
        }
    }
    mask
}

/// Runs both encoders, the similarity matrix and the loss on one batch, then
/// backpropagates. Returns per-term loss values and parameter gradients.
pub fn batch_gradients<T: Scalar>(
    ps: &ParamSet<T>,
    cfg: &EncoderConfig,
    images: &ImageBatch<T>,
    texts: &TextBatch<T>,
    mask: Vec<bool>,
    loss: &LossSpec,
) -> Result<(LossTerms, Gradients<T>)> {
    let n = texts.len();
    if images.len() != n {
        return Err(Error::shape("batch", format!("{} texts vs {} images", n, images.len())));
    }
    let mut g = Graph::new();
    let h_txt = text_forward(&mut g, ps, &cfg.text, texts)?;
    let h_img = image_forward(&mut g, ps, &cfg.image, images)?;
    let sim = g.cosine_sim(h_txt, h_img)?;
    let sims = g.value(sim).data().iter().map(|v| v.as_f64()).collect();
    let pairing = BatchPairing::new(n, sims, mask)?;
    let out = loss.evaluate(&pairing)?;
    let grad = Tensor::new(n, n, out.grad.iter().map(|&v| T::of(v)).collect())?;
    let l = g.external_scalar(sim, out.total(), grad)?;
    let mut grads = g.backward(l)?;
    grads.fill_unused(ps.iter());
    Ok((out.terms, grads))
}

/// Loss value only (no backward); used by descent checks.
pub fn batch_loss<T: Scalar>(
    ps: &ParamSet<T>,
    cfg: &EncoderConfig,
    images: &ImageBatch<T>,
    texts: &TextBatch<T>,
    mask: Vec<bool>,
    loss: &LossSpec,
) -> Result<LossTerms> {
    let mut g = Graph::new();
    let h_txt = text_forward(&mut g, ps, &cfg.text, texts)?;
    let h_img = image_forward(&mut g, ps, &cfg.image, images)?;
    let sim = g.cosine_sim(h_txt, h_img)?;
    let sims = g.value(sim).data().iter().map(|v| v.as_f64()).collect();
    Ok(loss.evaluate(&BatchPairing::new(texts.len(), sims, mask)?)?.terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Summed over the epoch's batches.
    pub train: LossTerms,
    /// Validation recall at the selection K.
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub select_k: usize,
    /// Validation recall of the initial parameters.
    pub initial_val_recall: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub parameters: usize,
    /// Excluded from determinism comparisons.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// A copy with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParamSet<f32>,
    pub last: ParamSet<f32>,
    pub record: RunRecord,
    /// Validation report of the best epoch.
    pub best_report: Option<MetricsReport>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        epoch: usize,
        batch: usize,
        step: u64,
        #[serde(flatten)]
        terms: &'a LossTerms,
    },
    Epoch {
        epoch: usize,
        #[serde(flatten)]
        terms: &'a LossTerms,
        val_recall: Option<f64>,
    },
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch-{epoch:03}.ckpt"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("best.ckpt")
    }

    pub fn run_record(&self) -> PathBuf {
        self.root.join("run_record.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
}

pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    s: &UnlabeledPositiveSet,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    enc.validate()?;
    enc.check_dataset(train_set)?;
    if let Some(v) = val_set {
        enc.check_dataset(v)?;
    }
    s.validate(train_set)?;
    let queries = train_set.queries();
    if queries.len() < 2 {
        return Err(Error::EmptySplit(format!(
            "training needs at least 2 queries, `{}` has {}",
            train_set.id(),
            queries.len()
        )));
    }
    let out = out.map(|p| OutputDir { root: p.to_path_buf() });
    let mut log = match &out {
        Some(o) => {
            std::fs::create_dir_all(&o.root).map_err(|e| Error::io(&o.root, e))?;
            let path = o.train_log();
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };
    let mut write_log = |line: &LogLine| -> Result<()> {
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, line).map_err(|e| Error::json(&*path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    };

    let ks = cfg.ks();
    let validate = |ps: &ParamSet<f32>| -> Result<Option<(f64, MetricsReport)>> {
        let Some(v) = val_set else { return Ok(None) };
        let (report, _) = evaluate(ps, enc, v, &ks)?;
        let r = report.recall_at(cfg.select_k).expect("select_k is evaluated");
        Ok(Some((r, report)))
    };

    let metadata = serde_json::json!({ "loss": cfg.loss, "seed": cfg.seed });
    let opt = cfg.adamw();
    let mut ps = init_params::<f32>(enc, cfg.seed)?;
    let initial = validate(&ps)?;
    let initial_val_recall = initial.as_ref().map(|(r, _)| *r);
    info!(
        "training {} parameters on {} queries; initial val recall@{} = {:?}",
        ps.count(),
        queries.len(),
        cfg.select_k,
        initial_val_recall
    );

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamSet<f32>, Option<MetricsReport>)> = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(queries.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = LossTerms::default();
        for (b, idx) in batches.iter().enumerate() {
            let query_ids: Vec<String> = idx.iter().map(|&i| queries[i].query_id.clone()).collect();
            let image_ids: Vec<String> = idx.iter().map(|&i| queries[i].gt_image_id.clone()).collect();
            let texts = TextBatch::from_dataset(train_set, &query_ids, None, &enc.text)?;
            let images = ImageBatch::from_dataset(train_set, &image_ids, &enc.image)?;
            let mask = batch_mask(s, &query_ids, &image_ids);
            let (terms, mut grads) = batch_gradients(&ps, enc, &images, &texts, mask, &cfg.loss)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if let Some(c) = cfg.clip_grad_norm {
                ParamSet::clip_grad_norm(&mut grads, c);
            }
            ps.adamw_step(&grads, &opt)?;
            sum += terms;
            write_log(&LogLine::Step {
                epoch,
                batch: b,
                step: ps.step(),
                terms: &terms,
            })?;
        }
        let val = validate(&ps)?;
        let val_recall = val.as_ref().map(|(r, _)| *r);
        info!(
            "epoch {epoch}: loss {:.4} (L_P {:.4}, L_UP {:.4}, L_N {:.4}), val recall@{} {:?}",
            sum.total, sum.l_p, sum.l_up, sum.l_n, cfg.select_k, val_recall
        );
        write_log(&LogLine::Epoch {
            epoch,
            terms: &sum,
            val_recall,
        })?;
        if let Some(o) = &out {
            save_checkpoint(&o.epoch_checkpoint(epoch), &ps, enc, &metadata, Some(epoch))?;
        }
        // ties keep the earlier epoch; without validation the last epoch wins
        let score = val_recall.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(_, s, _, _)| score > *s) {
            best = Some((epoch, score, ps.clone(), val.map(|(_, r)| r)));
        }
        epochs.push(EpochRecord {
            epoch,
            batches: batches.len(),
            train: sum,
            val_recall,
        });
    }
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(&*path, e))?;
    }

    let (best_epoch, _, best_ps, best_report) = best.expect("epochs >= 1");
    let record = RunRecord {
        select_k: cfg.select_k,
        initial_val_recall,
        epochs,
        best_epoch,
        parameters: ps.count(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = &out {
        save_checkpoint(&o.best_checkpoint(), &best_ps, enc, &metadata, Some(best_epoch))?;
        write_json(&o.run_record(), &record)?;
    }
    Ok(TrainOutcome {
        best: best_ps,
        last: ps,
        record,
        best_report,
    })
}
