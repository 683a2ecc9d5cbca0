//! Trainable heads over precomputed feature streams.
//!
//! The image encoder fuses five frozen streams:
//!
//! ```text
//! v_SGM = MLP_sgm(e_SGM)
//! h_SOG = MLP_sog([v_GS; v_SGM])
//! v_H   = MLP_h(v_lat)
//! h_img = MLP_out(mean_pool(Transformer([P_L v_L; P_M v_M; P_H v_H; P_SOG h_SOG])))
//! ```
//!
//! where each `P_*` is a linear projection to one token of width `d_model`.
//! The text encoder runs a transformer over the phrase vectors of each query,
//! mean-pools them (zero when there are none) and feeds
//! `[t_orig; t_std; pool; mode_embedding]` to an output MLP.
//!
//! No positional encodings are used on either side, so both encoders are
//! symmetric in token order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureRecord, Mode, E_SGM, IMAGE_STREAMS, T_ORIG, T_STD, V_GS, V_L, V_LAT, V_M};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{init_block, init_linear, init_mlp, linear, mlp, transformer_block};
use crate::optim::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub d_l: usize,
    pub d_m: usize,
    pub d_lat: usize,
    pub d_gs: usize,
    pub d_esgm: usize,
    /// Width of `v_SGM`.
    pub d_sgm: usize,
    /// Width of `h_SOG`.
    pub d_sog: usize,
    /// Width of `v_H`.
    pub d_h: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub d_emb: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            d_l: 32,
            d_m: 32,
            d_lat: 32,
            d_gs: 32,
            d_esgm: 32,
            d_sgm: 128,
            d_sog: 128,
            d_h: 128,
            d_model: 256,
            n_heads: 4,
            n_blocks: 1,
            d_ff: 512,
            d_emb: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub d_orig: usize,
    pub d_std: usize,
    pub d_phrase: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub d_mode: usize,
    pub d_emb: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            d_orig: 32,
            d_std: 32,
            d_phrase: 32,
            d_model: 256,
            n_heads: 4,
            n_blocks: 1,
            d_ff: 512,
            d_mode: 32,
            d_emb: 512,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let i = &self.image;
        let t = &self.text;
        let widths = [
            ("image.d_l", i.d_l),
            ("image.d_m", i.d_m),
            ("image.d_lat", i.d_lat),
            ("image.d_gs", i.d_gs),
            ("image.d_esgm", i.d_esgm),
            ("image.d_sgm", i.d_sgm),
            ("image.d_sog", i.d_sog),
            ("image.d_h", i.d_h),
            ("image.d_model", i.d_model),
            ("image.d_ff", i.d_ff),
            ("image.d_emb", i.d_emb),
            ("text.d_orig", t.d_orig),
            ("text.d_std", t.d_std),
            ("text.d_phrase", t.d_phrase),
            ("text.d_model", t.d_model),
            ("text.d_ff", t.d_ff),
            ("text.d_mode", t.d_mode),
            ("text.d_emb", t.d_emb),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Config(format!("{name} must be > 0")));
        }
        for (side, heads, width) in [("image", i.n_heads, i.d_model), ("text", t.n_heads, t.d_model)] {
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config(format!(
                    "{side}: {heads} heads do not divide d_model {width}"
                )));
            }
        }
        if i.d_emb != t.d_emb {
            return Err(Error::Config(format!(
                "image d_emb {} differs from text d_emb {}",
                i.d_emb, t.d_emb
            )));
        }
        Ok(())
    }

    /// Sets the input widths from a dataset's stream schema.
    pub fn fit_to(&mut self, ds: &Dataset) -> Result<()> {
        self.image.d_l = ds.stream_dim(V_L)?;
        self.image.d_m = ds.stream_dim(V_M)?;
        self.image.d_lat = ds.stream_dim(V_LAT)?;
        self.image.d_gs = ds.stream_dim(V_GS)?;
        self.image.d_esgm = ds.stream_dim(E_SGM)?;
        self.text.d_orig = ds.stream_dim(T_ORIG)?;
        self.text.d_std = ds.stream_dim(T_STD)?;
        if let Some(p) = &ds.manifest().phrase_stream {
            self.text.d_phrase = ds.stream_dim(p)?;
        }
        Ok(())
    }

    /// Errors unless the dataset's stream widths match this config.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let mut fitted = self.clone();
        fitted.fit_to(ds)?;
        let pairs = [
            (V_L, self.image.d_l, fitted.image.d_l),
            (V_M, self.image.d_m, fitted.image.d_m),
            (V_LAT, self.image.d_lat, fitted.image.d_lat),
            (V_GS, self.image.d_gs, fitted.image.d_gs),
            (E_SGM, self.image.d_esgm, fitted.image.d_esgm),
            (T_ORIG, self.text.d_orig, fitted.text.d_orig),
            (T_STD, self.text.d_std, fitted.text.d_std),
            ("phrases", self.text.d_phrase, fitted.text.d_phrase),
        ];
        for (stream, want, got) in pairs {
            if want != got {
                return Err(Error::Dimension {
                    stream: stream.to_string(),
                    record: format!("dataset `{}`", ds.id()),
                    expected: want,
                    actual: got,
                });
            }
        }
        Ok(())
    }
}

/// Deterministic initialisation from `seed`.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let i = &cfg.image;
    init_mlp(&mut ps, &mut rng, "img.sgm", i.d_esgm, i.d_sgm, i.d_sgm);
    init_mlp(&mut ps, &mut rng, "img.sog", i.d_gs + i.d_sgm, i.d_sog, i.d_sog);
    init_mlp(&mut ps, &mut rng, "img.h", i.d_lat, i.d_h, i.d_h);
    init_linear(&mut ps, &mut rng, "img.proj_l", i.d_l, i.d_model);
    init_linear(&mut ps, &mut rng, "img.proj_m", i.d_m, i.d_model);
    init_linear(&mut ps, &mut rng, "img.proj_h", i.d_h, i.d_model);
    init_linear(&mut ps, &mut rng, "img.proj_sog", i.d_sog, i.d_model);
    for b in 0..i.n_blocks {
        init_block(&mut ps, &mut rng, &format!("img.block{b}"), i.d_model, i.d_ff);
    }
    init_mlp(&mut ps, &mut rng, "img.out", i.d_model, i.d_emb, i.d_emb);

    let t = &cfg.text;
    init_linear(&mut ps, &mut rng, "txt.proj_phrase", t.d_phrase, t.d_model);
    for b in 0..t.n_blocks {
        init_block(&mut ps, &mut rng, &format!("txt.block{b}"), t.d_model, t.d_ff);
    }
    let modes = (0..2 * t.d_mode)
        .map(|_| T::of(rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)))
        .collect();
    ps.insert("txt.mode_emb", Tensor::new(2, t.d_mode, modes)?);
    let d_in = t.d_orig + t.d_std + t.d_model + t.d_mode;
    init_mlp(&mut ps, &mut rng, "txt.out", d_in, t.d_emb, t.d_emb);
    Ok(ps)
}

/// Image stream matrices for a batch, rows aligned with `ids`.
#[derive(Debug, Clone)]
pub struct ImageBatch<T: Scalar = f32> {
    pub ids: Vec<String>,
    /// In the order of [`IMAGE_STREAMS`].
    streams: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageBatch<T> {
    fn widths(cfg: &ImageEncoderConfig) -> [usize; 5] {
        [cfg.d_l, cfg.d_m, cfg.d_lat, cfg.d_gs, cfg.d_esgm]
    }

    pub fn from_records(records: &[FeatureRecord], cfg: &ImageEncoderConfig) -> Result<Self> {
        let widths = Self::widths(cfg);
        let mut streams = Vec::with_capacity(5);
        for (name, &w) in IMAGE_STREAMS.iter().zip(&widths) {
            let mut data = Vec::with_capacity(records.len() * w);
            for r in records {
                let row = r.stream(name)?;
                if row.len() != w {
                    return Err(Error::Dimension {
                        stream: name.to_string(),
                        record: r.id.clone(),
                        expected: w,
                        actual: row.len(),
                    });
                }
                data.extend(row.iter().map(|&v| T::of(v as f64)));
            }
            streams.push(Tensor::new(records.len(), w, data)?);
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            streams,
        })
    }

    pub fn from_dataset(ds: &Dataset, ids: &[String], cfg: &ImageEncoderConfig) -> Result<Self> {
        let widths = Self::widths(cfg);
        let mut streams = Vec::with_capacity(5);
        for (name, &w) in IMAGE_STREAMS.iter().zip(&widths) {
            let m = ds.feature_matrix(name, ids)?;
            if m.cols() != w {
                return Err(Error::Dimension {
                    stream: name.to_string(),
                    record: ids.first().cloned().unwrap_or_default(),
                    expected: w,
                    actual: m.cols(),
                });
            }
            streams.push(m.cast());
        }
        Ok(Self {
            ids: ids.to_vec(),
            streams,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text inputs for a batch of queries.
#[derive(Debug, Clone)]
pub struct TextBatch<T: Scalar = f32> {
    pub ids: Vec<String>,
    t_orig: Tensor<T>,
    t_std: Tensor<T>,
    phrases: Tensor<T>,
    /// Phrase rows belonging to each query.
    groups: Vec<Vec<usize>>,
    modes: Vec<usize>,
}

impl<T: Scalar> TextBatch<T> {
    pub fn from_records(records: &[(FeatureRecord, Mode)], cfg: &TextEncoderConfig) -> Result<Self> {
        let n = records.len();
        let mut orig = Vec::with_capacity(n * cfg.d_orig);
        let mut std = Vec::with_capacity(n * cfg.d_std);
        let mut phrases = Vec::new();
        let mut groups = Vec::with_capacity(n);
        let mut next = 0;
        for (r, _) in records {
            for (name, w, out) in [(T_ORIG, cfg.d_orig, &mut orig), (T_STD, cfg.d_std, &mut std)] {
                let row = r.stream(name)?;
                if row.len() != w {
                    return Err(Error::Dimension {
                        stream: name.to_string(),
                        record: r.id.clone(),
                        expected: w,
                        actual: row.len(),
                    });
                }
                out.extend(row.iter().map(|&v| T::of(v as f64)));
            }
            let mut group = Vec::with_capacity(r.phrases.len());
            for p in &r.phrases {
                if p.len() != cfg.d_phrase {
                    return Err(Error::Dimension {
                        stream: "phrases".into(),
                        record: r.id.clone(),
                        expected: cfg.d_phrase,
                        actual: p.len(),
                    });
                }
                phrases.extend(p.iter().map(|&v| T::of(v as f64)));
                group.push(next);
                next += 1;
            }
            groups.push(group);
        }
        Ok(Self {
            ids: records.iter().map(|(r, _)| r.id.clone()).collect(),
            t_orig: Tensor::new(n, cfg.d_orig, orig)?,
            t_std: Tensor::new(n, cfg.d_std, std)?,
            phrases: Tensor::new(next, cfg.d_phrase, phrases)?,
            groups,
            modes: records.iter().map(|(_, m)| m.index()).collect(),
        })
    }

    /// Queries from a dataset with their stored modes, or `mode` for all.
    pub fn from_dataset(
        ds: &Dataset,
        query_ids: &[String],
        mode: Option<Mode>,
        cfg: &TextEncoderConfig,
    ) -> Result<Self> {
        let records = query_ids
            .iter()
            .map(|id| {
                let q = ds.query(id)?;
                Ok((ds.text_record(id)?, mode.unwrap_or(q.mode)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(&records, cfg)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Records the image encoder on `g`; returns a `batch x d_emb` node.
pub fn image_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    cfg: &ImageEncoderConfig,
    batch: &'a ImageBatch<T>,
) -> Result<Var> {
    let n = batch.len();
    let [v_l, v_m, v_lat, v_gs, e_sgm] = [0, 1, 2, 3, 4].map(|i| g.input_ref(&batch.streams[i]));
    let v_sgm = mlp(g, ps, "img.sgm", e_sgm)?;
    let sog_in = g.concat_cols(&[v_gs, v_sgm])?;
    let h_sog = mlp(g, ps, "img.sog", sog_in)?;
    let v_h = mlp(g, ps, "img.h", v_lat)?;
    let tokens = [
        linear(g, ps, "img.proj_l", v_l)?,
        linear(g, ps, "img.proj_m", v_m)?,
        linear(g, ps, "img.proj_h", v_h)?,
        linear(g, ps, "img.proj_sog", h_sog)?,
    ];
    // token t of sample s sits at row t * n + s
    let mut x = g.concat_rows(&tokens)?;
    let groups: Vec<Vec<usize>> = (0..n).map(|s| (0..4).map(|t| t * n + s).collect()).collect();
    for b in 0..cfg.n_blocks {
        x = transformer_block(g, ps, &format!("img.block{b}"), x, &groups, cfg.n_heads)?;
    }
    let pooled = g.group_mean_pool(x, &groups)?;
    mlp(g, ps, "img.out", pooled)
}

/// Records the text encoder on `g`; returns a `batch x d_emb` node.
pub fn text_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    cfg: &TextEncoderConfig,
    batch: &'a TextBatch<T>,
) -> Result<Var> {
    let t_orig = g.input_ref(&batch.t_orig);
    let t_std = g.input_ref(&batch.t_std);
    let pool = if batch.phrases.rows() == 0 {
        g.input(Tensor::zeros(batch.len(), cfg.d_model))
    } else {
        let p = g.input_ref(&batch.phrases);
        let mut x = linear(g, ps, "txt.proj_phrase", p)?;
        for b in 0..cfg.n_blocks {
            x = transformer_block(g, ps, &format!("txt.block{b}"), x, &batch.groups, cfg.n_heads)?;
        }
        g.group_mean_pool(x, &batch.groups)?
    };
    let table = g.param("txt.mode_emb", ps.get("txt.mode_emb")?);
    let mode = g.gather_rows(table, &batch.modes)?;
    let joined = g.concat_cols(&[t_orig, t_std, pool, mode])?;
    mlp(g, ps, "txt.out", joined)
}

/// `h_img` for a single record.
pub fn encode_image<T: Scalar>(
    ps: &ParamSet<T>,
    cfg: &EncoderConfig,
    record: &FeatureRecord,
) -> Result<Vec<T>> {
    let batch = ImageBatch::from_records(std::slice::from_ref(record), &cfg.image)?;
    let mut g = Graph::new();
    let out = image_forward(&mut g, ps, &cfg.image, &batch)?;
    finite_row(g.value(out), &record.id)
}

/// `h_txt` for a single query record in the given mode.
pub fn encode_text<T: Scalar>(
    ps: &ParamSet<T>,
    cfg: &EncoderConfig,
    record: &FeatureRecord,
    mode: Mode,
) -> Result<Vec<T>> {
    let batch = TextBatch::from_records(&[(record.clone(), mode)], &cfg.text)?;
    let mut g = Graph::new();
    let out = text_forward(&mut g, ps, &cfg.text, &batch)?;
    finite_row(g.value(out), &record.id)
}

/// Embeddings for a batch, one row per input, with no gradient bookkeeping
/// retained after the call.
pub fn embed_images<T: Scalar>(ps: &ParamSet<T>, cfg: &EncoderConfig, batch: &ImageBatch<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = image_forward(&mut g, ps, &cfg.image, batch)?;
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::NonFinite("image embeddings".into()));
    }
    Ok(t)
}

pub fn embed_texts<T: Scalar>(ps: &ParamSet<T>, cfg: &EncoderConfig, batch: &TextBatch<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = text_forward(&mut g, ps, &cfg.text, batch)?;
    let t = g.value(out).clone();
    if !t.is_finite() {
        return Err(Error::NonFinite("text embeddings".into()));
    }
    Ok(t)
}

fn finite_row<T: Scalar>(t: &Tensor<T>, id: &str) -> Result<Vec<T>> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("embedding of `{id}`")));
    }
    Ok(t.row(0).to_vec())
}

#[cfg(test)]
mod tests;
