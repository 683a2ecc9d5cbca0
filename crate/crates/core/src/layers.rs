//! Parameterised building blocks on top of [`Graph`]: linear layers, two-layer
//! MLPs and post-LN transformer blocks. Parameters are looked up by name in a
//! [`ParamSet`]; `init_*` helpers create them.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::optim::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub fn linear<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"), ps.get(&format!("{prefix}.w"))?);
    let b = g.param(&format!("{prefix}.b"), ps.get(&format!("{prefix}.b"))?);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `linear -> GELU -> linear`.
pub fn mlp<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear(g, ps, &format!("{prefix}.l1"), x)?;
    let h = g.gelu(h);
    linear(g, ps, &format!("{prefix}.l2"), h)
}

pub fn layer_norm<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"), ps.get(&format!("{prefix}.gamma"))?);
    let beta = g.param(&format!("{prefix}.beta"), ps.get(&format!("{prefix}.beta"))?);
    g.layer_norm(x, gamma, beta)
}

/// Multi-head self-attention among the rows of each group.
pub fn self_attention<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
    groups: &[Vec<usize>],
    heads: usize,
) -> Result<Var> {
    let q = linear(g, ps, &format!("{prefix}.q"), x)?;
    let k = linear(g, ps, &format!("{prefix}.k"), x)?;
    let v = linear(g, ps, &format!("{prefix}.v"), x)?;
    let a = g.group_attention(q, k, v, groups, heads)?;
    linear(g, ps, &format!("{prefix}.o"), a)
}

/// Post-LN encoder block: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
pub fn transformer_block<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    ps: &'a ParamSet<T>,
    prefix: &str,
    x: Var,
    groups: &[Vec<usize>],
    heads: usize,
) -> Result<Var> {
    let a = self_attention(g, ps, &format!("{prefix}.attn"), x, groups, heads)?;
    let x = g.add(x, a)?;
    let x = layer_norm(g, ps, &format!("{prefix}.ln1"), x)?;
    let f = mlp(g, ps, &format!("{prefix}.ffn"), x)?;
    let x = g.add(x, f)?;
    layer_norm(g, ps, &format!("{prefix}.ln2"), x)
}

pub(crate) fn init_linear<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    // Xavier-uniform weights, zero bias.
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-limit..limit)))
        .collect();
    ps.insert(
        format!("{prefix}.w"),
        Tensor::new(fan_in, fan_out, data).expect("sized"),
    );
    ps.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
}

pub(crate) fn init_mlp<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    hidden: usize,
    fan_out: usize,
) {
    init_linear(ps, rng, &format!("{prefix}.l1"), fan_in, hidden);
    init_linear(ps, rng, &format!("{prefix}.l2"), hidden, fan_out);
}

pub(crate) fn init_layer_norm<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, width: usize) {
    ps.insert(format!("{prefix}.gamma"), Tensor::filled(1, width, T::one()));
    ps.insert(format!("{prefix}.beta"), Tensor::zeros(1, width));
}

pub(crate) fn init_block<T: Scalar>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    width: usize,
    ffn: usize,
) {
    for p in ["q", "k", "v", "o"] {
        init_linear(ps, rng, &format!("{prefix}.attn.{p}"), width, width);
    }
    init_layer_norm(ps, &format!("{prefix}.ln1"), width);
    init_mlp(ps, rng, &format!("{prefix}.ffn"), width, ffn, width);
    init_layer_norm(ps, &format!("{prefix}.ln2"), width);
}
