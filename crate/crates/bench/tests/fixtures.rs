use rxf_bench::{random_batch, ranking_fixture};
use rxf_core::bench::bench_encoder;
use rxf_core::eval::rank_images;

#[test]
fn ranking_fixture_embeds_every_image() {
    let f = ranking_fixture(12, bench_encoder());
    assert_eq!(f.images.ids.len(), 12);
    let list = rank_images(&f.params, &f.encoder, &f.query, f.mode, &f.images).unwrap();
    assert_eq!(list.ranking.len(), 12);
    assert!(list.scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn random_batch_is_seeded_and_keeps_the_diagonal_out_of_the_set() {
    let a = random_batch(16, 0.5, 3);
    assert_eq!(a, random_batch(16, 0.5, 3));
    assert!((0..16).all(|i| !a.in_s(i, i)));
    assert!(a.sims().iter().all(|s| (-1.0..=1.0).contains(s)));
}
