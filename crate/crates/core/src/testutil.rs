//! Small in-memory datasets for unit tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::*;

pub(crate) struct EnvSpec {
    pub images: usize,
    /// `(mode, index of the GT image)` per query.
    pub queries: Vec<(Mode, usize)>,
}

pub(crate) fn env(images: usize, queries: &[(Mode, usize)]) -> EnvSpec {
    EnvSpec {
        images,
        queries: queries.to_vec(),
    }
}

/// Ids are `e{e}-img{i}` and `e{e}-q{q}`; queries `2k` and `2k+1` share an
/// instruction. Every stream has width `dim`; query `q` carries `q % 3`
/// phrases.
pub(crate) fn dataset(envs: &[EnvSpec], dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut b = StreamBuilder::new();
    let mut environments = Vec::new();
    let mut queries = Vec::new();
    for (e, spec) in envs.iter().enumerate() {
        let image_ids: Vec<String> = (0..spec.images).map(|i| format!("e{e}-img{i}")).collect();
        for id in &image_ids {
            for s in IMAGE_STREAMS {
                b.push(s, id, &row(&mut rng)).unwrap();
            }
        }
        let mut query_ids = Vec::new();
        for (q, &(mode, gt)) in spec.queries.iter().enumerate() {
            let id = format!("e{e}-q{q}");
            for s in TEXT_STREAMS {
                b.push(s, &id, &row(&mut rng)).unwrap();
            }
            for _ in 0..q % 3 {
                b.push(PHRASES, &id, &row(&mut rng)).unwrap();
            }
            queries.push(QueryEntry {
                query_id: id.clone(),
                instruction_id: Some(format!("e{e}-i{}", q / 2)),
                env_id: format!("e{e}"),
                mode,
                gt_image_id: image_ids[gt].clone(),
                text: None,
            });
            query_ids.push(id);
        }
        environments.push(EnvironmentEntry {
            env_id: format!("e{e}"),
            image_ids,
            query_ids,
        });
    }
    for s in TEXT_STREAMS.iter().chain([&PHRASES]) {
        b.declare(s, dim);
    }
    let mut schema = BTreeMap::new();
    for s in IMAGE_STREAMS.iter().chain(&TEXT_STREAMS).chain([&PHRASES]) {
        schema.insert(s.to_string(), dim);
    }
    let manifest = DatasetManifest {
        format: FORMAT_TAG.into(),
        dataset_id: "fixture".into(),
        split: Split::Test,
        stream_schema: schema,
        image_streams: IMAGE_STREAMS.iter().map(|s| s.to_string()).collect(),
        text_streams: TEXT_STREAMS.iter().map(|s| s.to_string()).collect(),
        phrase_stream: Some(PHRASES.into()),
        environments,
        queries,
        image_files: BTreeMap::new(),
    };
    Dataset::new(manifest, b.build().unwrap()).unwrap()
}
