//! Synthetic datasets with planted unlabeled positives.
//!
//! Every environment draws `clusters_per_env` centers on the unit sphere of a
//! latent space. Images are assigned to clusters; each image stream is a
//! fixed random linear map of the image's center plus Gaussian noise, so
//! images of one cluster differ only by noise. Each instruction picks a
//! target image and a receptacle image from two different clusters and
//! yields two queries, one per mode.
//!
//! Text streams:
//!
//! * `t_orig` = `M (c_target + c_receptacle) / sqrt(2)` + noise, where `M` is
//!   the map used for `v_M` (a shared image-text space, so frozen `t_orig`
//!   vs `v_M` similarity is a usable shortlist scorer),
//! * `t_std` = `B [c_target; c_receptacle]` + noise (order-aware),
//! * phrases: 0 to a few vectors `M c_mode` + noise for the query's mode.
//!
//! The planted unlabeled positives of a query are the other images of its
//! ground-truth image's cluster in the same environment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::unlabeled::PairRecord;
use crate::dataset::{
    Dataset, DatasetManifest, EnvironmentEntry, Mode, QueryEntry, Split, StreamBuilder, E_SGM, FORMAT_TAG,
    IMAGE_STREAMS, PHRASES, TEXT_STREAMS, T_ORIG, T_STD, V_GS, V_L, V_LAT, V_M,
};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const PLANTED_FILE: &str = "planted.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub train_envs: usize,
    pub validation_envs: usize,
    pub test_envs: usize,
    pub images_per_env: usize,
    pub clusters_per_env: usize,
    /// Each instruction yields one target and one receptacle query.
    pub instructions_per_env: usize,
    pub latent_dim: usize,
    /// Width of every feature stream.
    pub stream_dim: usize,
    /// Standard deviation of the per-coordinate noise.
    pub sigma: f64,
    /// Seed of the fixed stream maps, shared by all splits.
    pub map_seed: u64,
    /// Probability that a same-cluster image is a planted positive.
    pub planted_fraction: f64,
    pub max_phrases: usize,
    /// Probability that a query carries no phrases at all.
    pub no_phrase_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_id: "synth".into(),
            train_envs: 8,
            validation_envs: 4,
            test_envs: 4,
            images_per_env: 24,
            clusters_per_env: 4,
            instructions_per_env: 12,
            latent_dim: 16,
            stream_dim: 32,
            sigma: 0.15,
            map_seed: 0,
            planted_fraction: 1.0,
            max_phrases: 3,
            no_phrase_prob: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.clusters_per_env < 2 {
            return fail("clusters_per_env must be >= 2");
        }
        if self.images_per_env < self.clusters_per_env {
            return fail("images_per_env must be >= clusters_per_env");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return fail("sigma must be > 0");
        }
        if self.train_envs == 0 || self.test_envs == 0 {
            return fail("train_envs and test_envs must be >= 1");
        }
        if self.instructions_per_env == 0 {
            return fail("instructions_per_env must be >= 1");
        }
        if self.latent_dim == 0 || self.stream_dim == 0 {
            return fail("latent_dim and stream_dim must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.planted_fraction) || !(0.0..=1.0).contains(&self.no_phrase_prob) {
            return fail("planted_fraction and no_phrase_prob must be in [0, 1]");
        }
        if self.max_phrases == 0 && self.no_phrase_prob < 1.0 {
            return fail("max_phrases must be >= 1 unless no_phrase_prob is 1");
        }
        Ok(())
    }
}

/// Planted unlabeled positives across all splits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlantedTruth {
    pairs: BTreeSet<(String, String)>,
}

impl PlantedTruth {
    pub fn contains(&self, query_id: &str, image_id: &str) -> bool {
        self.pairs.contains(&(query_id.to_string(), image_id.to_string()))
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

    pub fn insert(&mut self, query_id: impl Into<String>, image_id: impl Into<String>) {
        self.pairs.insert((query_id.into(), image_id.into()));
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PlantedFile = read_json(path)?;
        Ok(Self {
            pairs: file.pairs.into_iter().map(|p| (p.query_id, p.image_id)).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &PlantedFile {
                pairs: self
                    .pairs
                    .iter()
                    .map(|(q, i)| PairRecord {
                        query_id: q.clone(),
                        image_id: i.clone(),
                    })
                    .collect(),
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
struct PlantedFile {
    pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    pub planted: PlantedTruth,
}

impl SynthOutput {
    /// Writes `train/`, `validation/`, `test/` and `planted.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(dir.join(Split::Train.name()))?;
        if let Some(v) = &self.validation {
            v.save(dir.join(Split::Validation.name()))?;
        }
        self.test.save(dir.join(Split::Test.name()))?;
        self.planted.save(&dir.join(PLANTED_FILE))
    }
}

struct Maps {
    image: [Vec<f64>; 5],
    /// Order-aware map of `[c_target; c_receptacle]` for `t_std`.
    std: Vec<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn apply(map: &[f64], x: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let cols = x.len();
    map.chunks(cols)
        .map(|row| {
            let clean: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            let n: f64 = StandardNormal.sample(rng);
            (clean + noise * n) as f32
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut map_rng = ChaCha8Rng::seed_from_u64(cfg.map_seed);
    let (d, l) = (cfg.stream_dim, cfg.latent_dim);
    let maps = Maps {
        image: std::array::from_fn(|_| gaussian_matrix(&mut map_rng, d, l)),
        std: gaussian_matrix(&mut map_rng, d, 2 * l),
    };
    let mut planted = PlantedTruth::default();
    let mut build = |split: Split, n_envs: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        generate_split(cfg, &maps, split, n_envs, &mut rng, &mut planted)
    };
    let train = build(Split::Train, cfg.train_envs, 1)?;
    let validation = match cfg.validation_envs {
        0 => None,
        n => Some(build(Split::Validation, n, 2)?),
    };
    let test = build(Split::Test, cfg.test_envs, 3)?;
    Ok(SynthOutput {
        train,
        validation,
        test,
        planted,
    })
}

pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let out = generate(cfg)?;
    out.save(dir)?;
    Ok(out)
}

fn generate_split(
    cfg: &SynthConfig,
    maps: &Maps,
    split: Split,
    n_envs: usize,
    rng: &mut ChaCha8Rng,
    planted: &mut PlantedTruth,
) -> Result<Dataset> {
    let (sigma, c) = (cfg.sigma, cfg.clusters_per_env);
    let v_m = &maps.image[1];
    let mut b = StreamBuilder::new();
    let mut environments = Vec::with_capacity(n_envs);
    let mut queries = Vec::new();
    for e in 0..n_envs {
        let env_id = format!("{}-e{e}", split.name());
        let centers: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(rng, cfg.latent_dim)).collect();
        // cluster of each image; shuffled so ids carry no cluster order
        let mut cluster_of: Vec<usize> = (0..cfg.images_per_env).map(|i| i % c).collect();
        cluster_of.shuffle(rng);
        let image_ids: Vec<String> = (0..cfg.images_per_env)
            .map(|i| format!("{env_id}-img{i:02}"))
            .collect();
        for (id, &k) in image_ids.iter().zip(&cluster_of) {
            for (s, map) in IMAGE_STREAMS.iter().zip(&maps.image) {
                b.push(s, id, &apply(map, &centers[k], sigma, rng))?;
            }
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &k) in cluster_of.iter().enumerate() {
            members[k].push(i);
        }
        for m in &mut members {
            m.shuffle(rng);
        }
        let mut used = vec![0usize; c];
        let mut take = |k: usize| {
            let i = members[k][used[k] % members[k].len()];
            used[k] += 1;
            i
        };

        let mut query_ids = Vec::with_capacity(2 * cfg.instructions_per_env);
        for inst in 0..cfg.instructions_per_env {
            let k_t = inst % c;
            let k_r = (inst + 1 + (inst / c) % (c - 1)) % c;
            let (g_t, g_r) = (take(k_t), take(k_r));
            let mixed: Vec<f64> = centers[k_t]
                .iter()
                .zip(&centers[k_r])
                .map(|(a, b)| (a + b) / std::f64::consts::SQRT_2)
                .collect();
            let t_orig = apply(v_m, &mixed, sigma, rng);
            let ordered: Vec<f64> = centers[k_t].iter().chain(&centers[k_r]).copied().collect();
            let t_std = apply(&maps.std, &ordered, sigma, rng);
            let instruction_id = format!("{env_id}-i{inst:02}");
            for (mode, k, g) in [(Mode::Target, k_t, g_t), (Mode::Receptacle, k_r, g_r)] {
                let query_id = format!("{instruction_id}-{}", mode.name());
                b.push(T_ORIG, &query_id, &t_orig)?;
                b.push(T_STD, &query_id, &t_std)?;
                let n_phrases = if rng.gen_bool(cfg.no_phrase_prob) {
                    0
                } else {
                    rng.gen_range(1..=cfg.max_phrases)
                };
                for _ in 0..n_phrases {
                    b.push(PHRASES, &query_id, &apply(v_m, &centers[k], sigma, rng))?;
                }
                for (j, &kj) in cluster_of.iter().enumerate() {
                    if kj == k && j != g && rng.gen_bool(cfg.planted_fraction) {
                        planted.insert(query_id.clone(), image_ids[j].clone());
                    }
                }
                queries.push(QueryEntry {
                    query_id: query_id.clone(),
                    instruction_id: Some(instruction_id.clone()),
                    env_id: env_id.clone(),
                    mode,
                    gt_image_id: image_ids[g].clone(),
                    text: None,
                });
                query_ids.push(query_id);
            }
        }
        environments.push(EnvironmentEntry {
            env_id,
            image_ids,
            query_ids,
        });
    }
    for s in IMAGE_STREAMS.iter().chain(&TEXT_STREAMS).chain([&PHRASES]) {
        b.declare(s, cfg.stream_dim);
    }
    let stream_schema: BTreeMap<String, usize> = [V_L, V_M, V_LAT, V_GS, E_SGM, T_ORIG, T_STD, PHRASES]
        .iter()
        .map(|s| (s.to_string(), cfg.stream_dim))
        .collect();
    let manifest = DatasetManifest {
        format: FORMAT_TAG.into(),
        dataset_id: format!("{}-{}", cfg.dataset_id, split.name()),
        split,
        stream_schema,
        image_streams: IMAGE_STREAMS.iter().map(|s| s.to_string()).collect(),
        text_streams: TEXT_STREAMS.iter().map(|s| s.to_string()).collect(),
        phrase_stream: Some(PHRASES.into()),
        environments,
        queries,
        image_files: BTreeMap::new(),
    };
    Dataset::new(manifest, b.build()?)
}
