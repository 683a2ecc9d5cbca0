//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a `1 x 1` node walks the tape in reverse and returns
//! the gradient of every parameter registered with [`Graph::param`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GroupAttention {
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<Vec<usize>>,
        heads: usize,
        probs: Vec<T>,
    },
    GroupMeanPool {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    CosineSim {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
        raw: Vec<T>,
    },
    Sum(Var),
    External {
        input: Var,
        grad: Tensor<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.by_name
            .get(name)
            .ok_or_else(|| Error::Detached(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn from_map(by_name: BTreeMap<String, Tensor<T>>) -> Self {
        Self { by_name }
    }

    /// Adds zero gradients for parameters the forward pass never touched,
    /// e.g. the phrase encoder on a batch without phrases.
    pub fn fill_unused<'p>(&mut self, params: impl IntoIterator<Item = (&'p String, &'p Tensor<T>)>)
    where
        T: 'p,
    {
        for (name, t) in params {
            self.by_name
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(t.rows(), t.cols()));
        }
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.by_name.values_mut()
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Input, false)
    }

    pub fn input_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Input, false)
    }

    /// Trainable leaf. Registering the same name twice accumulates gradients.
    pub fn param(&mut self, name: &str, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(name.to_string()), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x + b` with `b` a `1 x cols` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let brow = bv.data();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(brow) {
                *o = *o + bb;
            }
        }
        Ok(self.push_owned(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.rows(), av.cols(), data)?;
        Ok(self.push_owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push_owned(out, Op::Relu(x), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        for p in [gamma, beta] {
            let s = self.value(p).shape();
            if s != [1, d] {
                return Err(Error::shape("layer_norm", format!("affine {s:?} vs width {d}")));
            }
        }
        let (xhat, inv_std) = normalize_rows(xv);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of {} rows", tv.rows()),
            ));
        }
        let out = tv.select_rows(idx);
        Ok(self.push_owned(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Scaled dot-product attention restricted to groups of rows.
    ///
    /// `q`, `k`, `v` are `tokens x width`; every group lists the token rows
    /// that attend to each other (one group per sample). Tokens outside every
    /// group produce zero output.
    pub fn group_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: &[Vec<usize>],
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [n, d] = qv.shape();
        if kv.shape() != [n, d] || vv.shape() != [n, d] {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadCount { heads, width: d });
        }
        if groups.iter().flatten().any(|&r| r >= n) {
            return Err(Error::shape("attention", "group row out of range"));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(groups.iter().map(|g| g.len() * g.len()).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for group in groups {
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                for &a in group {
                    let qa = &qv.row(a)[span.clone()];
                    scores.clear();
                    scores.extend(group.iter().map(|&b| dot(qa, &kv.row(b)[span.clone()]) * scale));
                    let mx = scores.iter().fold(T::neg_infinity(), |acc, &s| acc.max(s));
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z = z + *s;
                    }
                    let orow = &mut out.row_mut(a)[span.clone()];
                    for (&b, &e) in group.iter().zip(scores.iter()) {
                        let p = e / z;
                        probs.push(p);
                        for (o, &vb) in orow.iter_mut().zip(&vv.row(b)[span.clone()]) {
                            *o = *o + p * vb;
                        }
                    }
                }
            }
        }
        Ok(self.push_owned(
            out,
            Op::GroupAttention {
                q,
                k,
                v,
                groups: groups.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean of each group's rows; an empty group yields a zero row.
    pub fn group_mean_pool(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if groups.iter().flatten().any(|&r| r >= xv.rows()) {
            return Err(Error::shape("mean_pool", "group row out of range"));
        }
        let mut out = Tensor::zeros(groups.len(), d);
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let inv = T::of(1.0 / rows.len() as f64);
            let orow = out.row_mut(g);
            for &r in rows {
                for (o, &xv) in orow.iter_mut().zip(xv.row(r)) {
                    *o = *o + xv * inv;
                }
            }
        }
        Ok(self.push_owned(
            out,
            Op::GroupMeanPool {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        ))
    }

    /// Pairwise cosine similarity of the rows of `a` (`n x d`) and `b`
    /// (`m x d`), clamped to `[-1, 1]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let norm_a = row_norms(av, "text side")?;
        let norm_b = row_norms(bv, "image side")?;
        let raw = matmul_nt(av, bv);
        let m = bv.rows();
        let mut out = raw.clone();
        for i in 0..av.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (*o / (norm_a[i] * norm_b[j])).max(-T::one()).min(T::one());
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("cosine similarity".into()));
        }
        let raw = raw.into_data();
        debug_assert_eq!(raw.len(), av.rows() * m);
        Ok(self.push_owned(
            out,
            Op::CosineSim {
                a,
                b,
                norm_a,
                norm_b,
                raw,
            },
            &[a, b],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push_owned(Tensor::filled(1, 1, T::of(s)), Op::Sum(x), &[x])
    }

    /// Scalar node whose value and local gradient w.r.t. `input` were
    /// computed outside the graph (the batch losses).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::shape(
                "external_scalar",
                format!("grad {:?} vs input {:?}", grad.shape(), self.value(input).shape()),
            ));
        }
        if !value.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(self.push_owned(
            Tensor::filled(1, 1, T::of(value)),
            Op::External { input, grad },
            &[input],
        ))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        let mut by_name: BTreeMap<String, Tensor<T>> = BTreeMap::new();

        // Every registered parameter appears in the result, zero if unreachable.
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                by_name
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    if let Some(e) = by_name.get_mut(name) {
                        e.add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        acc(*a, matmul_nt(&g, bv));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, matmul_tn(av, &g));
                    }
                }
                Op::AddRow(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(*b, gb);
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, bv, |x, y| x * y);
                    let gb = zip_map(&g, av, |x, y| x * y);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Gelu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gg, xv| gg * gelu_grad(xv));
                    acc(*x, gx);
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gg, xv| {
                        if xv > T::zero() {
                            gg
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let d = g.cols();
                    let dn = T::of(d as f64);
                    let mut ggamma = Tensor::zeros(1, d);
                    let mut gbeta = Tensor::zeros(1, d);
                    let mut gx = Tensor::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        let (gg, gb) = (ggamma.data_mut(), gbeta.data_mut());
                        for c in 0..d {
                            gg[c] = gg[c] + gr[c] * xr[c];
                            gb[c] = gb[c] + gr[c];
                            let dxh = gr[c] * gv[c];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xr[c];
                        }
                        let k = inv_std[r] / dn;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            let dxh = gr[c] * gv[c];
                            out[c] = k * (dn * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat);
                        }
                    }
                    acc(*gamma, ggamma);
                    acc(*beta, gbeta);
                    acc(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(*p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let idx: Vec<usize> = (offset..offset + h).collect();
                        offset += h;
                        acc(*p, g.select_rows(&idx));
                    }
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(*table, gt);
                }
                Op::GroupAttention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(&g, *q, *k, *v, groups, *heads, probs);
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                }
                Op::GroupMeanPool { x, groups } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (gi, rows) in groups.iter().enumerate() {
                        if rows.is_empty() {
                            continue;
                        }
                        let inv = T::of(1.0 / rows.len() as f64);
                        for &r in rows {
                            for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *o = *o + v * inv;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::CosineSim {
                    a,
                    b,
                    norm_a,
                    norm_b,
                    raw,
                } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                    let mut ga = Tensor::zeros(n, d);
                    let mut gb = Tensor::zeros(m, d);
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.get(i, j);
                            if gij == T::zero() {
                                continue;
                            }
                            let nn = norm_a[i] * norm_b[j];
                            let s = raw[i * m + j] / nn;
                            let ca = s / (norm_a[i] * norm_a[i]);
                            let cb = s / (norm_b[j] * norm_b[j]);
                            let (arow, brow) = (av.row(i), bv.row(j));
                            {
                                let out = ga.row_mut(i);
                                for c in 0..d {
                                    out[c] = out[c] + gij * (brow[c] / nn - ca * arow[c]);
                                }
                            }
                            let out = gb.row_mut(j);
                            for c in 0..d {
                                out[c] = out[c] + gij * (arow[c] / nn - cb * brow[c]);
                            }
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.get(0, 0)));
                }
                Op::External { input, grad } => {
                    let s = g.get(0, 0);
                    acc(*input, grad.map(|v| v * s));
                }
            }
        }
        for (name, t) in &by_name {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        Ok(Gradients { by_name })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        groups: &[Vec<usize>],
        heads: usize,
        probs: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [n, d] = qv.shape();
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(n, d);
        let mut gv = Tensor::zeros(n, d);
        let mut pi = 0;
        let mut dp = Vec::new();
        for group in groups {
            let m = group.len();
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                for &a in group {
                    let p = &probs[pi..pi + m];
                    pi += m;
                    let ga = &g.row(a)[span.clone()];
                    dp.clear();
                    dp.extend(group.iter().map(|&b| dot(ga, &vv.row(b)[span.clone()])));
                    let inner: T = p.iter().zip(&dp).map(|(&pp, &dd)| pp * dd).sum();
                    for (idx, &b) in group.iter().enumerate() {
                        // dL/dv_b += p_ab * g_a
                        let out = &mut gv.row_mut(b)[span.clone()];
                        for (o, &gg) in out.iter_mut().zip(ga) {
                            *o = *o + p[idx] * gg;
                        }
                        let ds = p[idx] * (dp[idx] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let oq = &mut gq.row_mut(a)[span.clone()];
                        for (o, &kk) in oq.iter_mut().zip(&kv.row(b)[span.clone()]) {
                            *o = *o + ds * kk;
                        }
                        let ok = &mut gk.row_mut(b)[span.clone()];
                        for (o, &qq) in ok.iter_mut().zip(&qv.row(a)[span.clone()]) {
                            *o = *o + ds * qq;
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let dn = T::of(d as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn row_norms<T: Scalar>(x: &Tensor<T>, side: &str) -> Result<Vec<T>> {
    (0..x.rows())
        .map(|r| {
            let n = dot(x.row(r), x.row(r)).sqrt();
            if n > T::zero() && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::ZeroNorm(format!("{side}, row {r}")))
            }
        })
        .collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Central differences on every coordinate of `params[target]`.
    fn check_op<F>(params: &[(&str, Tensor<f64>)], build: F)
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
    {
        let h = 1e-6;
        let eval = |ps: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = params
                .iter()
                .zip(ps)
                .map(|((name, _), t)| g.param(name, t))
                .collect();
            let out = build(&mut g, &vars);
            g.value(out).get(0, 0)
        };
        let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(&base)
            .map(|((name, _), t)| g.param(name, t))
            .collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (pi, (name, t)) in params.iter().enumerate() {
            let analytic = grads.get(name).unwrap();
            for c in 0..t.len() {
                let mut plus = base.clone();
                plus[pi].data_mut()[c] += h;
                let mut minus = base.clone();
                minus[pi].data_mut()[c] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[c];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{name}[{c}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn linear_identity_passes_input_through() {
        let x = Tensor::<f32>::new(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5]).unwrap();
        let w = Tensor::<f32>::identity(3);
        let b = Tensor::<f32>::zeros(1, 3);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param("w", &w);
        let bv = g.param("b", &b);
        let y = g.matmul(xv, wv).unwrap();
        let y = g.add_row(y, bv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Tensor::<f32>::filled(1, 8, 0.37);
        let gamma = Tensor::filled(1, 8, 1.0);
        let beta = Tensor::zeros(1, 8);
        let mut g = Graph::new();
        let xv = g.input(x);
        let (gv, bv) = (g.param("g", &gamma), g.param("b", &beta));
        let y = g.layer_norm(xv, gv, bv).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let q = Tensor::<f32>::row_vector(vec![0.3, -0.2, 0.9, 0.1]);
        let k = Tensor::<f32>::row_vector(vec![1.0, 2.0, -1.0, 0.5]);
        let v = Tensor::<f32>::row_vector(vec![4.0, -3.0, 2.0, 1.0]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v.clone()));
        let out = g.group_attention(qv, kv, vv, &[vec![0]], 2).unwrap();
        assert_eq!(g.value(out), &v);
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let t = Tensor::<f32>::zeros(2, 6);
        let mut g = Graph::new();
        let a = g.input(t);
        let err = g.group_attention(a, a, a, &[vec![0, 1]], 4).unwrap_err();
        assert!(matches!(err, Error::HeadCount { heads: 4, width: 6 }));
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f32>::zeros(2, 2);
        let mut g = Graph::new();
        let a = g.param("a", &t);
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss([2, 2]))));
    }

    #[test]
    fn sum_of_linear_gradient_matches_outer_structure() {
        // loss = sum(x W): dL/dW[p][c] = sum_r x[r][p]
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4);
        let w = random(&mut rng, 4, 2);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.param("w", &w);
        let y = g.matmul(xv, wv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        for p in 0..4 {
            let col_sum: f64 = (0..3).map(|r| x.get(r, p)).sum();
            for c in 0..2 {
                assert!((gw.get(p, c) - col_sum).abs() < 1e-12);
            }
        }
        check_op(&[("w", w)], |g, v| {
            let xv = g.input(x.clone());
            let y = g.matmul(xv, v[0]).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let w = Tensor::<f64>::filled(2, 2, 0.5);
        let c = Tensor::<f64>::filled(2, 2, 1.0);
        let mut g = Graph::new();
        let _wv = g.param("w", &w);
        let cv = g.input(c);
        let loss = g.sum(cv);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("w").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(grads.get("nope"), Err(Error::Detached(_))));
    }

    #[test]
    fn cosine_self_similarity_gradient_vanishes() {
        let u = Tensor::<f64>::row_vector(vec![0.3, -1.2, 0.7, 2.0]);
        let mut g = Graph::new();
        let a = g.param("u", &u);
        let s = g.cosine_sim(a, a).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("u").unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let u = Tensor::<f32>::zeros(1, 3);
        let v = Tensor::<f32>::filled(1, 3, 1.0);
        let mut g = Graph::new();
        let (a, b) = (g.input(u), g.input(v));
        assert!(matches!(g.cosine_sim(a, b), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn finite_differences_match_for_each_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = random(&mut rng, 4, 6);
        let x = random(&mut rng, 4, 6);
        let y = random(&mut rng, 4, 6);
        let row = random(&mut rng, 1, 6);
        let row2 = random(&mut rng, 1, 6);
        let w = random(&mut rng, 6, 6);
        let table = random(&mut rng, 3, 6);

        // weighted sum helper keeps every output coordinate in play
        let wsum = move |g: &mut Graph<'_, f64>, out: Var| {
            let shape = g.value(out).shape();
            let wt = g.input(weights.select_rows(&(0..shape[0]).collect::<Vec<_>>()));
            let wt = if shape[1] == 6 { wt } else { panic!("width") };
            let p = g.mul(out, wt).unwrap();
            g.sum(p)
        };

        check_op(&[("x", x.clone()), ("w", w.clone()), ("b", row.clone())], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            wsum(g, h)
        });
        check_op(&[("x", x.clone())], |g, v| {
            let h = g.gelu(v[0]);
            wsum(g, h)
        });
        check_op(&[("x", x.clone()), ("g", row.clone()), ("b", row2.clone())], |g, v| {
            let h = g.layer_norm(v[0], v[1], v[2]).unwrap();
            wsum(g, h)
        });
        check_op(&[("x", x.clone()), ("y", y.clone())], |g, v| {
            let h = g.add(v[0], v[1]).unwrap();
            let h = g.mul(h, v[1]).unwrap();
            wsum(g, h)
        });
        let groups = vec![vec![0, 2], vec![1, 3]];
        check_op(&[("q", x.clone()), ("k", y.clone()), ("v", random(&mut rng, 4, 6))], |g, v| {
            let h = g.group_attention(v[0], v[1], v[2], &groups, 2).unwrap();
            wsum(g, h)
        });
        let pool_groups = vec![vec![0, 1, 3], vec![], vec![2], vec![0]];
        check_op(&[("x", x.clone())], |g, v| {
            let h = g.group_mean_pool(v[0], &pool_groups).unwrap();
            wsum(g, h)
        });
        check_op(&[("t", table.clone())], |g, v| {
            let h = g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap();
            wsum(g, h)
        });
        check_op(&[("a", x.clone()), ("b", y.clone())], |g, v| {
            let l = g.select_cols_for_test(v[0], 0..2);
            let r = g.select_cols_for_test(v[1], 2..6);
            let h = g.concat_cols(&[l, r]).unwrap();
            wsum(g, h)
        });
        check_op(&[("a", random(&mut rng, 1, 6)), ("b", random(&mut rng, 3, 6))], |g, v| {
            let h = g.concat_rows(&[v[0], v[1]]).unwrap();
            wsum(g, h)
        });
        check_op(&[("a", x.clone()), ("b", random(&mut rng, 3, 6))], |g, v| {
            let s = g.cosine_sim(v[0], v[1]).unwrap();
            let s = g.concat_cols(&[s, s]).unwrap();
            wsum(g, s)
        });
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::<f64>::row_vector(vec![-0.5, 0.25, 1.5, -2.0]);
        let mut g = Graph::new();
        let xv = g.param("x", &x);
        let y = g.relu(xv);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    impl<'a> Graph<'a, f64> {
        fn select_cols_for_test(&mut self, x: Var, cols: std::ops::Range<usize>) -> Var {
            // projection through a constant selector matrix keeps it on the tape
            let d = self.value(x).cols();
            let width = cols.len();
            let mut sel = Tensor::zeros(d, width);
            for (j, c) in cols.enumerate() {
                sel.data_mut()[c * width + j] = 1.0;
            }
            let s = self.input(sel);
            self.matmul(x, s).unwrap()
        }
    }
}
