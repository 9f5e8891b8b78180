//! Shared building blocks: linear maps, layer norm, feed-forward and
//! multi-head attention over batches of fixed-length segments.

use rand::Rng;

use crate::error::Result;
use crate::params::{Graph, ParamId, ParamSet};
use crate::tape::{concat_cols, concat_rows, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / (input + output) as f64).sqrt();
        Self {
            weight: ps.add_randn(format!("{name}.weight"), &[input, output], std, rng),
            bias: ps.add_zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&g.param(self.weight))?.add_row(&g.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add_full(format!("{name}.gamma"), &[dim], 1.0),
            beta: ps.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&g.param(self.gamma), &g.param(self.beta), LAYER_NORM_EPS)
    }
}

/// Two linear maps with GELU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(g, x)?.gelu();
        self.fc2.forward(g, &h)
    }
}

/// Shape of a batch of equal-length query and key segments stacked by rows.
#[derive(Clone, Copy, Debug)]
pub struct SegmentLayout {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
}

/// Splits projected `q`, `k`, `v` into per-sample, per-head blocks, turns each
/// `(sample, head, q·kᵀ)` into attention weights with `weights`, and
/// reassembles `weights · v` into `[batch·query_len × dim]`.
pub fn multi_head<'t, F>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    layout: SegmentLayout,
    heads: usize,
    mut weights: F,
) -> Result<Var<'t>>
where
    F: FnMut(usize, usize, Var<'t>) -> Result<Var<'t>>,
{
    let dim = q.value().cols();
    let head_dim = dim / heads;
    let mut samples = Vec::with_capacity(layout.batch);
    for b in 0..layout.batch {
        let qs = q.slice_rows(b * layout.query_len, (b + 1) * layout.query_len)?;
        let ks = k.slice_rows(b * layout.key_len, (b + 1) * layout.key_len)?;
        let vs = v.slice_rows(b * layout.key_len, (b + 1) * layout.key_len)?;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
            let qh = qs.slice_cols(c0, c1)?;
            let kh = ks.slice_cols(c0, c1)?;
            let vh = vs.slice_cols(c0, c1)?;
            let attn = weights(b, h, qh.matmul_t(&kh)?)?;
            per_head.push(attn.matmul(&vh)?);
        }
        samples.push(if heads == 1 { per_head[0] } else { concat_cols(&per_head)? });
    }
    if samples.len() == 1 {
        Ok(samples[0])
    } else {
        concat_rows(&samples)
    }
}

/// Multi-head scaled-dot-product cross-attention with learned projections.
/// Returns the attention output after the output projection (no residual).
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<'t>(
        &self,
        g: &Graph<'t, '_>,
        queries: &Var<'t>,
        keys_values: &Var<'t>,
        layout: SegmentLayout,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys_values)?;
        let v = self.v.forward(g, keys_values)?;
        let head_dim = q.value().cols() / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mixed = multi_head(&q, &k, &v, layout, self.heads, |_, _, logits| {
            logits.scale(scale).softmax_rows()
        })?;
        self.out.forward(g, &mixed)
    }
}
