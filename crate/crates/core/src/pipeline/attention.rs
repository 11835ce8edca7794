//! Single-head scaled dot-product self-attention over spatial positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};
use crate::params::{join, Parameterized};
use crate::tensor::{FlatFeature, KernelSet};

/// Query/key/value projections, each a 1x1 `C -> C` kernel set.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionParams {
    pub query: KernelSet,
    pub key: KernelSet,
    pub value: KernelSet,
}

impl SelfAttentionParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            query: KernelSet::zeros(channels, channels, 1),
            key: KernelSet::zeros(channels, channels, 1),
            value: KernelSet::zeros(channels, channels, 1),
        }
    }

    /// Uniform `[-1/sqrt(C), 1/sqrt(C))` projection weights, zero biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels);
        let bound = 1.0 / (channels as f64).sqrt();
        for ks in [&mut p.query, &mut p.key, &mut p.value] {
            ks.weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.query.c_out()
    }
}

impl Parameterized for SelfAttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
    }
}

fn project(ks: &KernelSet, x: &[f64], l: usize) -> Vec<f64> {
    let c = ks.c_out();
    let mut out = vec![0.0; c * l];
    for (o, row) in out.chunks_mut(l).enumerate() {
        row.fill(ks.bias[o]);
    }
    gemm(c, ks.c_in(), l, &ks.weights, Op::N, x, Op::N, 1.0, &mut out);
    out
}

pub(crate) struct AttentionCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    rows: usize,
    len: usize,
}

impl AttentionCache {
    /// Row-stochastic `L x L` attention matrix.
    pub(crate) fn attention(&self) -> &[f64] {
        &self.attn
    }
}

fn check(f: &FlatFeature, p: &SelfAttentionParams) -> Result<()> {
    let c = f.rows();
    for (name, ks) in [("query", &p.query), ("key", &p.key), ("value", &p.value)] {
        if ks.k() != 1 || ks.c_in() != c || ks.c_out() != c {
            return Err(Error::shape(format!(
                "{name} projection is ({}, {}, {}) for {c} channels",
                ks.c_out(),
                ks.c_in(),
                ks.k()
            )));
        }
    }
    Ok(())
}

pub(crate) fn self_attention_forward(f: &FlatFeature, p: &SelfAttentionParams) -> Result<(FlatFeature, AttentionCache)> {
    check(f, p)?;
    let (c, l) = (f.rows(), f.len());
    let x = f.data().to_vec();
    let q = project(&p.query, &x, l);
    let k = project(&p.key, &x, l);
    let v = project(&p.value, &x, l);
    // scores[i][j] = sum_c q[c][i] k[c][j] / sqrt(c)
    let mut attn = vec![0.0; l * l];
    gemm(l, c, l, &q, Op::T, &k, Op::N, 0.0, &mut attn);
    let scale = 1.0 / (c as f64).sqrt();
    for row in attn.chunks_mut(l) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, s| m.max(*s * scale));
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            total += *s;
        }
        row.iter_mut().for_each(|s| *s /= total);
    }
    // out[c][i] = sum_j v[c][j] attn[i][j]
    let mut out = vec![0.0; c * l];
    gemm(c, l, l, &v, Op::N, &attn, Op::T, 0.0, &mut out);
    Ok((
        FlatFeature::from_parts(c, f.width(), f.height(), out),
        AttentionCache {
            x,
            q,
            k,
            v,
            attn,
            rows: c,
            len: l,
        },
    ))
}

/// Returns `(d_input, d_params)`.
pub(crate) fn self_attention_backward(
    p: &SelfAttentionParams,
    cache: &AttentionCache,
    grad_out: &[f64],
) -> (Vec<f64>, SelfAttentionParams) {
    let (c, l) = (cache.rows, cache.len);
    let scale = 1.0 / (c as f64).sqrt();
    let mut d_v = vec![0.0; c * l];
    gemm(c, l, l, grad_out, Op::N, &cache.attn, Op::N, 0.0, &mut d_v);
    let mut d_attn = vec![0.0; l * l];
    gemm(l, c, l, grad_out, Op::T, &cache.v, Op::N, 0.0, &mut d_attn);
    // softmax backward, folding in the score scale
    let mut d_s = d_attn;
    for (row, a) in d_s.chunks_mut(l).zip(cache.attn.chunks(l)) {
        let dot: f64 = row.iter().zip(a).map(|(g, p)| g * p).sum();
        row.iter_mut().zip(a).for_each(|(g, p)| *g = p * (*g - dot) * scale);
    }
    let mut d_q = vec![0.0; c * l];
    gemm(c, l, l, &cache.k, Op::N, &d_s, Op::T, 0.0, &mut d_q);
    let mut d_k = vec![0.0; c * l];
    gemm(c, l, l, &cache.q, Op::N, &d_s, Op::N, 0.0, &mut d_k);

    let mut d_x = vec![0.0; c * l];
    let mut grads = SelfAttentionParams::zeros(c);
    for (ks, gks, d) in [
        (&p.query, &mut grads.query, &d_q),
        (&p.key, &mut grads.key, &d_k),
        (&p.value, &mut grads.value, &d_v),
    ] {
        gemm(c, l, c, d, Op::N, &cache.x, Op::T, 0.0, &mut gks.weights);
        for (o, row) in d.chunks(l).enumerate() {
            gks.bias[o] = row.iter().sum();
        }
        gemm(c, c, l, &ks.weights, Op::T, d, Op::N, 1.0, &mut d_x);
    }
    (d_x, grads)
}

/// Scaled dot-product attention of `f` with itself; positions are columns.
pub fn self_attention(f: &FlatFeature, p: &SelfAttentionParams) -> Result<FlatFeature> {
    Ok(self_attention_forward(f, p)?.0)
}

/// The `L x L` row-stochastic attention matrix for `f`.
pub fn attention_matrix(f: &FlatFeature, p: &SelfAttentionParams) -> Result<Vec<f64>> {
    Ok(self_attention_forward(f, p)?.1.attention().to_vec())
}
