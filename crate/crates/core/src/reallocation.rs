//! Semantic token reallocation: per-modality learnable queries plus the shared
//! text feature attend over a modality's patch tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{CrossAttention, FeedForward, SegmentLayout};
use crate::params::{Graph, ParamId, ParamSet};
use crate::tape::{concat_rows, Var};

/// `[Q; T]`: the `K` query rows followed by the text feature as the last row.
pub fn build_queries<'t>(bank: Option<&Var<'t>>, text: &Var<'t>) -> Result<Var<'t>> {
    let t = text.value();
    let dim = t.numel();
    let text_row = if t.shape() == [1, dim] { *text } else { text.reshape(&[1, dim])? };
    match bank {
        None => Ok(text_row),
        Some(q) => {
            let qv = q.value();
            if qv.cols() != dim {
                return Err(Error::dim("build_queries", qv.shape(), t.shape()));
            }
            concat_rows(&[*q, text_row])
        }
    }
}

/// One reallocation block: query bank, cross-attention and feed-forward.
#[derive(Clone, Debug)]
pub struct StrBlock {
    /// `[K × D]`; absent when `K = 0`.
    pub bank: Option<ParamId>,
    pub num_queries: usize,
    pub attn: CrossAttention,
    pub ffn: FeedForward,
}

impl StrBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        num_queries: usize,
        rng: &mut R,
    ) -> Self {
        let bank = (num_queries > 0).then(|| ps.add_randn(format!("{name}.queries"), &[num_queries, dim], 0.02, rng));
        Self {
            bank,
            num_queries,
            attn: CrossAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, 4 * dim, rng),
        }
    }

    /// Builds `[Q; T_b]` for every sample, stacked: `[B·(K+1) × D]`.
    /// `text` holds one row per sample.
    pub fn queries<'t>(&self, g: &Graph<'t, '_>, text: &Var<'t>) -> Result<Var<'t>> {
        let bank = self.bank.map(|id| g.param(id));
        let batch = text.value().rows();
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            rows.push(build_queries(bank.as_ref(), &text.slice_rows(b, b + 1)?)?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            concat_rows(&rows)
        }
    }

    /// `Z = CrossAttn(Q', F, F) + Q'`, output `FFN(Z) + Z`.
    ///
    /// `queries` is `[B·(K+1) × D]`, `patch_tokens` is `[B·N × D]` without class tokens.
    pub fn reallocate<'t>(
        &self,
        g: &Graph<'t, '_>,
        queries: &Var<'t>,
        patch_tokens: &Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>> {
        let qv = queries.value();
        let fv = patch_tokens.value();
        if qv.cols() != fv.cols() || batch == 0 || !qv.rows().is_multiple_of(batch) || !fv.rows().is_multiple_of(batch) {
            return Err(Error::dim("reallocate", qv.shape(), fv.shape()));
        }
        let layout = SegmentLayout {
            batch,
            query_len: qv.rows() / batch,
            key_len: fv.rows() / batch,
        };
        let z = self.attn.forward(g, queries, patch_tokens, layout)?.add(queries)?;
        self.ffn.forward(g, &z)?.add(&z)
    }
}
