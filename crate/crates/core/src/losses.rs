//! Batch losses over a text-by-image similarity matrix.
//!
//! Row `i` is the text embedding of sample `i`, column `j` the image of sample
//! `j`; the diagonal holds the annotated positives. `s_mask[i][j]` marks pairs
//! the labeler judged to be unlabeled positives.
//!
//! Every loss returns its value together with the gradient with respect to
//! each similarity entry, so it can be spliced into a [`crate::Graph`] with
//! [`crate::Graph::external_scalar`]. Sums are accumulated in `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin used by the soft-target ablation.
pub const SOFT_ALPHA: f64 = 0.999_999;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPairing {
    n: usize,
    sim: Vec<f64>,
    s_mask: Vec<bool>,
}

impl BatchPairing {
    /// `sim` and `s_mask` are row-major `n x n`.
    pub fn new(n: usize, sim: Vec<f64>, s_mask: Vec<bool>) -> Result<Self> {
        if sim.len() != n * n || s_mask.len() != n * n {
            return Err(Error::shape(
                "batch_pairing",
                format!("n={n}, sim {} entries, mask {} entries", sim.len(), s_mask.len()),
            ));
        }
        if let Some(bad) = sim.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Invalid(format!("similarity {bad} outside [-1, 1]")));
        }
        if (0..n).any(|i| s_mask[i * n + i]) {
            return Err(Error::Invalid("unlabeled-positive mask set on the diagonal".into()));
        }
        Ok(Self { n, sim, s_mask })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sim(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.n + j]
    }

    pub fn in_s(&self, i: usize, j: usize) -> bool {
        self.s_mask[i * self.n + j]
    }

    pub fn sims(&self) -> &[f64] {
        &self.sim
    }

    pub fn mask(&self) -> &[bool] {
        &self.s_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrcConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for DrcConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            gamma: 1.0,
            lambda: 1.0,
        }
    }
}

impl DrcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}

/// Per-term breakdown; contrastive cross-entropy reports only `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_p: f64,
    pub l_up: f64,
    pub l_n: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: Self) {
        self.l_p += o.l_p;
        self.l_up += o.l_up;
        self.l_n += o.l_n;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub terms: LossTerms,
    /// d(total)/d(sim), row-major `n x n`.
    pub grad: Vec<f64>,
}

impl LossOutput {
    pub fn total(&self) -> f64 {
        self.terms.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    RecoRelaxedNegatives,
    UnlabeledAsPositive,
    SoftAlpha,
}

/// How pairs in the unlabeled-positive set are scored.
#[derive(Clone, Copy)]
enum UpTerm {
    /// `max(alpha - s, 0)^2`
    Hinge(f64),
    /// `(1 - s)^2`
    Positive,
    Ignore,
}

fn relaxed(batch: &BatchPairing, up: UpTerm, gamma: f64, lambda: f64) -> LossOutput {
    let n = batch.n;
    let mut grad = vec![0.0; n * n];
    let mut t = LossTerms::default();
    for i in 0..n {
        for j in 0..n {
            let s = batch.sim(i, j);
            let k = i * n + j;
            if i == j {
                let r = 1.0 - s;
                t.l_p += r * r;
                grad[k] = -2.0 * r;
            } else if batch.in_s(i, j) {
                match up {
                    UpTerm::Hinge(alpha) => {
                        let r = (alpha - s).max(0.0);
                        t.l_up += r * r;
                        grad[k] = -2.0 * gamma * r;
                    }
                    UpTerm::Positive => {
                        let r = 1.0 - s;
                        t.l_up += r * r;
                        grad[k] = -2.0 * gamma * r;
                    }
                    UpTerm::Ignore => {}
                }
            } else {
                let r = s.max(0.0);
                t.l_n += r * r;
                grad[k] = 2.0 * lambda * r;
            }
        }
    }
    let gamma_eff = if matches!(up, UpTerm::Ignore) { 0.0 } else { gamma };
    t.total = t.l_p + gamma_eff * t.l_up + lambda * t.l_n;
    LossOutput { terms: t, grad }
}

/// `L_P + gamma * L_UP + lambda * L_N`.
///
/// `L_N` covers off-diagonal pairs outside the unlabeled-positive set; the
/// diagonal is governed by `L_P` alone.
pub fn drc_loss(batch: &BatchPairing, cfg: &DrcConfig) -> Result<LossOutput> {
    cfg.validate()?;
    Ok(relaxed(batch, UpTerm::Hinge(cfg.alpha), cfg.gamma, cfg.lambda))
}

/// Text-to-image softmax cross-entropy, summed over rows. Ignores the mask.
pub fn infonce_loss(batch: &BatchPairing, temperature: f64) -> Result<LossOutput> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature {temperature} must be > 0")));
    }
    let n = batch.n;
    let mut grad = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let row = &batch.sim[i * n..(i + 1) * n];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s / temperature));
        let z: f64 = row.iter().map(|&s| (s / temperature - mx).exp()).sum();
        let lse = mx + z.ln();
        total += lse - row[i] / temperature;
        for j in 0..n {
            let p = (row[j] / temperature - lse).exp();
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[i * n + j] = (p - delta) / temperature;
        }
    }
    Ok(LossOutput {
        terms: LossTerms {
            total,
            ..Default::default()
        },
        grad,
    })
}

/// Ablation losses that reuse the relaxed-contrastive structure.
///
/// `RecoRelaxedNegatives` is an approximation of a negative-relaxation
/// baseline: unlabeled positives are removed from the negative term but get
/// no pull term of their own.
pub fn variant_loss(batch: &BatchPairing, cfg: &DrcConfig, variant: Variant) -> Result<LossOutput> {
    cfg.validate()?;
    Ok(match variant {
        Variant::RecoRelaxedNegatives => relaxed(batch, UpTerm::Ignore, cfg.gamma, cfg.lambda),
        Variant::UnlabeledAsPositive => relaxed(batch, UpTerm::Positive, cfg.gamma, cfg.lambda),
        Variant::SoftAlpha => relaxed(batch, UpTerm::Hinge(SOFT_ALPHA), cfg.gamma, cfg.lambda),
    })
}

/// Every training objective the trainer can select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Drc,
    #[serde(rename = "infonce")]
    InfoNce,
    RecoRelaxedNegatives,
    UnlabeledAsPositive,
    SoftAlpha,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Drc,
        LossKind::InfoNce,
        LossKind::RecoRelaxedNegatives,
        LossKind::UnlabeledAsPositive,
        LossKind::SoftAlpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Drc => "drc",
            LossKind::InfoNce => "infonce",
            LossKind::RecoRelaxedNegatives => "reco_relaxed_negatives",
            LossKind::UnlabeledAsPositive => "unlabeled_as_positive",
            LossKind::SoftAlpha => "soft_alpha",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

/// A loss kind together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub drc: DrcConfig,
    pub temperature: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Drc,
            drc: DrcConfig::default(),
            temperature: 0.07,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        self.drc.validate()?;
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, batch: &BatchPairing) -> Result<LossOutput> {
        match self.kind {
            LossKind::Drc => drc_loss(batch, &self.drc),
            LossKind::InfoNce => infonce_loss(batch, self.temperature),
            LossKind::RecoRelaxedNegatives => {
                variant_loss(batch, &self.drc, Variant::RecoRelaxedNegatives)
            }
            LossKind::UnlabeledAsPositive => {
                variant_loss(batch, &self.drc, Variant::UnlabeledAsPositive)
            }
            LossKind::SoftAlpha => variant_loss(batch, &self.drc, Variant::SoftAlpha),
        }
    }
}
