//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rxf_core::dataset::{FeatureRecord, Mode};
use rxf_core::encoders::{init_params, EncoderConfig};
use rxf_core::eval::EmbeddedImages;
use rxf_core::losses::BatchPairing;
use rxf_core::optim::ParamSet;
use rxf_core::synth::{generate, SynthConfig};

/// Everything needed to rank one query against cached image embeddings.
pub struct RankingFixture {
    pub params: ParamSet<f32>,
    pub encoder: EncoderConfig,
    pub query: FeatureRecord,
    pub mode: Mode,
    pub images: EmbeddedImages,
}

/// One synthetic environment with `n_images` images, embedded with a
/// randomly initialised model of the given config (fitted to the streams).
pub fn ranking_fixture(n_images: usize, mut encoder: EncoderConfig) -> RankingFixture {
    let data = generate(&SynthConfig {
        train_envs: 1,
        validation_envs: 0,
        test_envs: 1,
        images_per_env: n_images,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config");
    let ds = data.train;
    encoder.fit_to(&ds).expect("fits");
    let params = init_params::<f32>(&encoder, 0).expect("valid encoder config");
    let env = &ds.environments()[0];
    let images = EmbeddedImages::from_dataset(&params, &encoder, &ds, &env.image_ids).expect("embeds");
    let q = &ds.queries()[0];
    RankingFixture {
        query: ds.text_record(&q.query_id).expect("query record"),
        mode: q.mode,
        params,
        encoder,
        images,
    }
}

/// `n x n` cosine-range similarities with roughly `s_rate` of the
/// off-diagonal pairs in the unlabeled-positive set.
pub fn random_batch(n: usize, s_rate: f64, seed: u64) -> BatchPairing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mask = (0..n * n).map(|k| k % (n + 1) != 0 && rng.gen_bool(s_rate)).collect();
    BatchPairing::new(n, sims, mask).expect("square batch")
}
