use super::*;
use rand::Rng;

fn small() -> EncoderConfig {
    EncoderConfig {
        image: ImageEncoderConfig {
            d_l: 3,
            d_m: 4,
            d_lat: 5,
            d_gs: 2,
            d_esgm: 6,
            d_sgm: 4,
            d_sog: 5,
            d_h: 3,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            d_ff: 6,
            d_emb: 7,
        },
        text: TextEncoderConfig {
            d_orig: 4,
            d_std: 3,
            d_phrase: 5,
            d_model: 8,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 5,
            d_mode: 3,
            d_emb: 7,
        },
    }
}

fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn image_record(cfg: &ImageEncoderConfig, id: &str, seed: u64) -> FeatureRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = FeatureRecord {
        id: id.into(),
        ..Default::default()
    };
    for (name, w) in IMAGE_STREAMS.iter().zip([cfg.d_l, cfg.d_m, cfg.d_lat, cfg.d_gs, cfg.d_esgm]) {
        r.streams.insert(name.to_string(), rand_vec(&mut rng, w));
    }
    r
}

fn text_record(cfg: &TextEncoderConfig, id: &str, phrases: usize, seed: u64) -> FeatureRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = FeatureRecord {
        id: id.into(),
        ..Default::default()
    };
    r.streams.insert(T_ORIG.into(), rand_vec(&mut rng, cfg.d_orig));
    r.streams.insert(T_STD.into(), rand_vec(&mut rng, cfg.d_std));
    r.phrases = (0..phrases).map(|_| rand_vec(&mut rng, cfg.d_phrase)).collect();
    r
}

fn linear_count(i: usize, o: usize) -> usize {
    i * o + o
}

fn mlp_count(i: usize, h: usize, o: usize) -> usize {
    linear_count(i, h) + linear_count(h, o)
}

fn block_count(d: usize, ff: usize) -> usize {
    4 * linear_count(d, d) + 2 * 2 * d + mlp_count(d, ff, d)
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [small(), EncoderConfig::default()] {
        let ps = init_params::<f32>(&cfg, 1).unwrap();
        let i = &cfg.image;
        let t = &cfg.text;
        let image = mlp_count(i.d_esgm, i.d_sgm, i.d_sgm)
            + mlp_count(i.d_gs + i.d_sgm, i.d_sog, i.d_sog)
            + mlp_count(i.d_lat, i.d_h, i.d_h)
            + linear_count(i.d_l, i.d_model)
            + linear_count(i.d_m, i.d_model)
            + linear_count(i.d_h, i.d_model)
            + linear_count(i.d_sog, i.d_model)
            + i.n_blocks * block_count(i.d_model, i.d_ff)
            + mlp_count(i.d_model, i.d_emb, i.d_emb);
        let text = linear_count(t.d_phrase, t.d_model)
            + t.n_blocks * block_count(t.d_model, t.d_ff)
            + 2 * t.d_mode
            + mlp_count(t.d_orig + t.d_std + t.d_model + t.d_mode, t.d_emb, t.d_emb);
        assert_eq!(ps.count(), image + text);
    }
}

#[test]
fn initialisation_is_seeded() {
    let cfg = small();
    let a = init_params::<f32>(&cfg, 5).unwrap();
    let b = init_params::<f32>(&cfg, 5).unwrap();
    let c = init_params::<f32>(&cfg, 6).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
    assert!(a.iter().zip(c.iter()).any(|(x, y)| x.1 != y.1));
}

#[test]
fn config_validation() {
    let mut cfg = small();
    cfg.text.d_emb = 9;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.image.n_heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.image.d_h = 0;
    assert!(cfg.validate().unwrap_err().to_string().contains("image.d_h"));
    assert!(EncoderConfig::default().validate().is_ok());
}

#[test]
fn output_widths() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 0).unwrap();
    let h = encode_image(&ps, &cfg, &image_record(&cfg.image, "a", 1)).unwrap();
    assert_eq!(h.len(), 7);
    let t = encode_text(&ps, &cfg, &text_record(&cfg.text, "q", 2, 2), Mode::Target).unwrap();
    assert_eq!(t.len(), 7);
}

#[test]
fn missing_stream_is_named() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 0).unwrap();
    let mut r = image_record(&cfg.image, "img7", 1);
    r.streams.remove(V_L);
    let err = encode_image(&ps, &cfg, &r).unwrap_err();
    assert!(matches!(&err, Error::MissingStream { stream, record } if stream == "v_L" && record == "img7"));
}

#[test]
fn wrong_width_is_rejected() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 0).unwrap();
    let mut r = text_record(&cfg.text, "q", 1, 1);
    r.phrases[0].push(0.0);
    assert!(matches!(
        encode_text(&ps, &cfg, &r, Mode::Target),
        Err(Error::Dimension { expected: 5, actual: 6, .. })
    ));
}

#[test]
fn phrase_order_does_not_matter() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 3).unwrap();
    let r = text_record(&cfg.text, "q", 4, 9);
    let mut shuffled = r.clone();
    shuffled.phrases.reverse();
    shuffled.phrases.swap(0, 2);
    let a = encode_text(&ps, &cfg, &r, Mode::Receptacle).unwrap();
    let b = encode_text(&ps, &cfg, &shuffled, Mode::Receptacle).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn zero_phrases_are_allowed() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 3).unwrap();
    let h = encode_text(&ps, &cfg, &text_record(&cfg.text, "q", 0, 4), Mode::Target).unwrap();
    assert!(h.iter().all(|v| v.is_finite()));
    // and inside a batch that does have phrases
    let records = vec![
        (text_record(&cfg.text, "a", 0, 4), Mode::Target),
        (text_record(&cfg.text, "b", 2, 5), Mode::Target),
    ];
    let batch = TextBatch::<f32>::from_records(&records, &cfg.text).unwrap();
    let out = embed_texts(&ps, &cfg, &batch).unwrap();
    for (x, y) in out.row(0).iter().zip(&h) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn mode_changes_the_embedding() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 3).unwrap();
    let r = text_record(&cfg.text, "q", 2, 4);
    let a = encode_text(&ps, &cfg, &r, Mode::Target).unwrap();
    let b = encode_text(&ps, &cfg, &r, Mode::Receptacle).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-4));
}

#[test]
fn batch_rows_match_single_records() {
    let cfg = small();
    let ps = init_params::<f32>(&cfg, 8).unwrap();
    let records: Vec<_> = (0..3).map(|i| image_record(&cfg.image, &format!("i{i}"), i)).collect();
    let batch = ImageBatch::<f32>::from_records(&records, &cfg.image).unwrap();
    let out = embed_images(&ps, &cfg, &batch).unwrap();
    for (i, r) in records.iter().enumerate() {
        let single = encode_image(&ps, &cfg, r).unwrap();
        for (x, y) in out.row(i).iter().zip(&single) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

fn probe_loss<'a>(
    g: &mut Graph<'a, f64>,
    ps: &'a ParamSet<f64>,
    cfg: &EncoderConfig,
    img: &'a ImageBatch<f64>,
    txt: &'a TextBatch<f64>,
    weights: &'a (Tensor<f64>, Tensor<f64>),
) -> Var {
    let h = image_forward(g, ps, &cfg.image, img).unwrap();
    let t = text_forward(g, ps, &cfg.text, txt).unwrap();
    let wh = g.input_ref(&weights.0);
    let wt = g.input_ref(&weights.1);
    let a = g.mul(h, wh).unwrap();
    let b = g.mul(t, wt).unwrap();
    let s = g.add(a, b).unwrap();
    g.sum(s)
}

#[allow(clippy::type_complexity)]
fn probe_setup() -> (EncoderConfig, ParamSet<f64>, ImageBatch<f64>, TextBatch<f64>, (Tensor<f64>, Tensor<f64>)) {
    let cfg = small();
    let ps = init_params::<f64>(&cfg, 11).unwrap();
    let imgs: Vec<_> = (0..2).map(|i| image_record(&cfg.image, &format!("i{i}"), 20 + i)).collect();
    let txts = vec![
        (text_record(&cfg.text, "a", 3, 30), Mode::Target),
        (text_record(&cfg.text, "b", 1, 31), Mode::Receptacle),
    ];
    let img = ImageBatch::from_records(&imgs, &cfg.image).unwrap();
    let txt = TextBatch::from_records(&txts, &cfg.text).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = |rng: &mut ChaCha8Rng| {
        Tensor::new(2, 7, (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let weights = (w(&mut rng), w(&mut rng));
    (cfg, ps, img, txt, weights)
}

#[test]
fn every_parameter_receives_gradient() {
    let (cfg, ps, img, txt, weights) = probe_setup();
    let mut g = Graph::new();
    let loss = probe_loss(&mut g, &ps, &cfg, &img, &txt, &weights);
    let grads = g.backward(loss).unwrap();
    // both mode rows are used by the batch; key biases shift every logit of a
    // query equally, so softmax makes their gradient vanish identically
    for (name, _) in ps.iter() {
        let gr = grads.get(name).unwrap();
        let max = gr.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if name.ends_with("attn.k.b") {
            assert!(max < 1e-12, "{name}: {max}");
        } else {
            assert!(max > 1e-9, "{name} has zero gradient");
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (cfg, ps, img, txt, weights) = probe_setup();
    let mut g = Graph::new();
    let loss = probe_loss(&mut g, &ps, &cfg, &img, &txt, &weights);
    let grads = g.backward(loss).unwrap();
    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let l = probe_loss(&mut g, p, &cfg, &img, &txt, &weights);
        g.value(l).get(0, 0)
    };
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, value) in ps.iter() {
        for _ in 0..2 {
            let k = rng.gen_range(0..value.len());
            let mut plus = ps.clone();
            plus.set_coord(name, k, value.data()[k] + h).unwrap();
            let mut minus = ps.clone();
            minus.set_coord(name, k, value.data()[k] - h).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data()[k];
            let diff = (numeric - analytic).abs();
            let rel = diff / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4 || diff < 1e-8, "{name}[{k}]: {analytic} vs {numeric}");
        }
    }
}
