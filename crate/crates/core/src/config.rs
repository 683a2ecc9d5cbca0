//! Run configuration shared by every pipeline stage.
//!
//! One JSON document covers generation, labeling, training, evaluation and
//! benchmarking. Relative paths are resolved against the directory of the
//! config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::io::read_json;
use crate::labeler::{JudgeKind, MllmConfig, DEFAULT_N_CAND};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Unlabeled-positive set used for training.
    pub unlabeled: Option<PathBuf>,
    /// Planted truth for the oracle judge.
    pub planted: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub judge: JudgeKind,
    pub n_cand: usize,
    /// JSON-lines verdicts for the file judge.
    pub verdicts: Option<PathBuf>,
    /// JSON-lines `(query, image, score)` shortlist scores; defaults to
    /// frozen-stream cosine similarity.
    pub scores: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub mllm: MllmConfig,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            judge: JudgeKind::Oracle,
            n_cand: DEFAULT_N_CAND,
            verdicts: None,
            scores: None,
            cache: None,
            mllm: MllmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Overrides the seeds of every stage when set.
    pub seed: Option<u64>,
    /// Worker cap; 0 uses all cores.
    pub jobs: usize,
    pub data: DataPaths,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub labeler: LabelerConfig,
    pub bench: BenchConfig,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            jobs: 0,
            data: DataPaths::default(),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            labeler: LabelerConfig::default(),
            bench: BenchConfig::default(),
            checkpoint: None,
            output: None,
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "{}: config version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.validation,
            &mut cfg.data.test,
            &mut cfg.data.unlabeled,
            &mut cfg.data.planted,
            &mut cfg.labeler.verdicts,
            &mut cfg.labeler.scores,
            &mut cfg.labeler.cache,
            &mut cfg.checkpoint,
            &mut cfg.output,
        ] {
            rebase(base, p);
        }
        Ok(cfg)
    }

    /// Pushes `seed` and `jobs` down into the stage configs.
    pub fn apply_overrides(&mut self) {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
            self.bench.base_seed = seed;
        }
        self.bench.jobs = self.jobs;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.train.loss.validate()?;
        if self.labeler.n_cand == 0 {
            return Err(Error::Config("labeler.n_cand must be >= 1".into()));
        }
        self.bench.validate()
    }

    /// Fails unless every listed path exists.
    pub fn require_existing(paths: &[(&str, &Option<PathBuf>)]) -> Result<()> {
        for (what, p) in paths {
            match p {
                None => return Err(Error::Config(format!("`{what}` is required"))),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("`{what}` path {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
