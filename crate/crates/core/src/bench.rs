//! Synthetic loss comparison.
//!
//! For each seed: generate a synthetic benchmark, label its train split with
//! the oracle judge, train one model per loss kind from identical initial
//! weights and batches, and score the held-out test environments.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RecallAt, DEFAULT_KS};
use crate::labeler::{label_dataset, LabelConfig, LabelStats, OracleJudge, ShortlistScorer};
use crate::losses::{LossKind, LossSpec};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub synth: SynthConfig,
    /// Input widths are fitted to the generated streams.
    pub encoder: EncoderConfig,
    /// `loss.kind` and `seed` are set per run.
    pub train: TrainConfig,
    pub losses: Vec<LossKind>,
    pub n_seeds: usize,
    /// Seed `i` of the sweep uses `base_seed + i` for data and training.
    pub base_seed: u64,
    pub ks: Vec<usize>,
    pub n_cand: usize,
    /// Seeds trained concurrently; 0 uses all cores. Not written to reports
    /// since it cannot change results.
    #[serde(skip_serializing)]
    pub jobs: usize,
}

/// Model and optimizer settings sized for a desk-scale sweep.
pub fn bench_encoder() -> EncoderConfig {
    let mut c = EncoderConfig::default();
    for (d_model, heads, d_ff, d_emb) in [
        (&mut c.image.d_model, &mut c.image.n_heads, &mut c.image.d_ff, &mut c.image.d_emb),
        (&mut c.text.d_model, &mut c.text.n_heads, &mut c.text.d_ff, &mut c.text.d_emb),
    ] {
        *d_model = 64;
        *heads = 4;
        *d_ff = 128;
        *d_emb = 64;
    }
    c.image.d_sgm = 32;
    c.image.d_sog = 32;
    c.image.d_h = 32;
    c.text.d_mode = 16;
    c
}

pub fn bench_train() -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 64,
        epochs: 30,
        ..TrainConfig::default()
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            encoder: bench_encoder(),
            train: bench_train(),
            losses: LossKind::ALL.to_vec(),
            n_seeds: 5,
            base_seed: 0,
            ks: DEFAULT_KS.to_vec(),
            n_cand: crate::labeler::DEFAULT_N_CAND,
            jobs: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.losses.is_empty() {
            return Err(Error::Config("at least one loss kind is required".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and >= 1".into()));
        }
        let mut seen = self.losses.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.losses.len() {
            return Err(Error::Config("loss kinds must be distinct".into()));
        }
        self.synth.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub best_epoch: usize,
    pub recall: Vec<RecallAt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation; `None` with a single seed.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub loss: LossKind,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<Summary>,
}

impl LossResult {
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        self.summary.iter().find(|s| s.k == k).map(|s| s.mean)
    }

    pub fn recall_at(&self, seed_index: usize, k: usize) -> Option<f64> {
        self.runs
            .get(seed_index)?
            .recall
            .iter()
            .find(|r| r.k == k)
            .map(|r| r.recall)
    }
}

/// Differences below this are rounding noise from averaging environments.
pub const WIN_MARGIN: f64 = 1e-9;

/// Per-seed comparison of the first loss against another at one K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    pub reference: LossKind,
    pub other: LossKind,
    pub k: usize,
    /// `reference - other` per seed.
    pub differences: Vec<f64>,
    /// Seeds where `reference` is ahead by more than [`WIN_MARGIN`].
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerSummary {
    pub seed: u64,
    pub stats: LabelStats,
    /// Planted pairs present in shortlists.
    pub shortlisted_planted: usize,
    /// Share of `shortlisted_planted` that ended up in the set.
    pub recall: f64,
    pub gt_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub seeds: Vec<u64>,
    pub labeler: Vec<LabelerSummary>,
    pub results: Vec<LossResult>,
    pub paired: Vec<Paired>,
}

impl BenchReport {
    pub fn result(&self, loss: LossKind) -> Option<&LossResult> {
        self.results.iter().find(|r| r.loss == loss)
    }

    /// Aligned text table of mean ± sd per loss and K.
    pub fn table(&self) -> String {
        let mut rows = vec![std::iter::once("loss".to_string())
            .chain(self.config.ks.iter().map(|k| format!("R@{k}")))
            .collect::<Vec<_>>()];
        for r in &self.results {
            let mut row = vec![r.loss.name().to_string()];
            for s in &r.summary {
                let sd = s.sd.map_or("n/a".to_string(), |sd| format!("{sd:.3}"));
                row.push(format!("{:.3} ± {sd}", s.mean));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let pad = widths[c] - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        let _ = writeln!(out, "({} seeds, test split)", self.seeds.len());
        out
    }
}

fn summarize(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

struct SeedOutcome {
    labeler: LabelerSummary,
    runs: Vec<SeedRun>,
}

fn run_seed(cfg: &BenchConfig, index: usize) -> Result<SeedOutcome> {
    let seed = cfg.base_seed + index as u64;
    let synth = SynthConfig {
        seed,
        map_seed: cfg.synth.map_seed + index as u64,
        ..cfg.synth.clone()
    };
    let data = generate(&synth)?;
    let judge = OracleJudge {
        planted: data.planted.clone(),
    };
    let label_cfg = LabelConfig {
        n_cand: cfg.n_cand,
        jobs: 1,
    };
    let labeled = label_dataset(&data.train, &ShortlistScorer::default(), &judge, &label_cfg, None)?;
    let shortlisted_planted = labeled
        .shortlists
        .iter()
        .map(|(q, c)| c.iter().filter(|i| data.planted.contains(q, i)).count())
        .sum::<usize>();
    let recovered = labeled
        .shortlists
        .iter()
        .map(|(q, c)| {
            c.iter()
                .filter(|i| data.planted.contains(q, i) && labeled.set.contains(q, i))
                .count()
        })
        .sum::<usize>();
    let gt_pairs = data
        .train
        .queries()
        .iter()
        .filter(|q| labeled.set.contains(&q.query_id, &q.gt_image_id))
        .count();
    let labeler = LabelerSummary {
        seed,
        stats: labeled.stats.clone(),
        shortlisted_planted,
        recall: if shortlisted_planted == 0 {
            1.0
        } else {
            recovered as f64 / shortlisted_planted as f64
        },
        gt_pairs,
    };

    let mut enc = cfg.encoder.clone();
    enc.fit_to(&data.train)?;
    let mut runs = Vec::with_capacity(cfg.losses.len());
    for &kind in &cfg.losses {
        let tc = TrainConfig {
            seed,
            loss: LossSpec {
                kind,
                ..cfg.train.loss
            },
            ..cfg.train.clone()
        };
        let out = train(&data.train, data.validation.as_ref(), &labeled.set, &enc, &tc, None)?;
        let (report, _) = evaluate(&out.best, &enc, &data.test, &cfg.ks)?;
        info!(
            "seed {seed} {kind}: best epoch {}, test {:?}",
            out.record.best_epoch,
            report.recall.iter().map(|r| (r.k, r.recall)).collect::<Vec<_>>()
        );
        runs.push(SeedRun {
            seed,
            best_epoch: out.record.best_epoch,
            recall: report.recall,
        });
    }
    Ok(SeedOutcome { labeler, runs })
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        (0..cfg.n_seeds)
            .into_par_iter()
            .map(|i| run_seed(cfg, i))
            .collect::<Result<_>>()
    })?;

    let results: Vec<LossResult> = cfg
        .losses
        .iter()
        .enumerate()
        .map(|(li, &loss)| {
            let runs: Vec<SeedRun> = outcomes.iter().map(|o| o.runs[li].clone()).collect();
            let summary = cfg
                .ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| {
                    let vals: Vec<f64> = runs.iter().map(|r| r.recall[ki].recall).collect();
                    let (mean, sd) = summarize(&vals);
                    Summary { k, mean, sd }
                })
                .collect();
            LossResult { loss, runs, summary }
        })
        .collect();

    let k = if cfg.ks.contains(&cfg.train.select_k) {
        cfg.train.select_k
    } else {
        cfg.ks[0]
    };
    let paired = results
        .iter()
        .skip(1)
        .map(|other| {
            let differences: Vec<f64> = (0..cfg.n_seeds)
                .map(|i| results[0].recall_at(i, k).unwrap_or(0.0) - other.recall_at(i, k).unwrap_or(0.0))
                .collect();
            Paired {
                reference: results[0].loss,
                other: other.loss,
                k,
                wins: differences.iter().filter(|d| **d > WIN_MARGIN).count(),
                differences,
            }
        })
        .collect();

    Ok(BenchReport {
        config: cfg.clone(),
        seeds: outcomes.iter().map(|o| o.labeler.seed).collect(),
        labeler: outcomes.into_iter().map(|o| o.labeler).collect(),
        results,
        paired,
    })
}
