//! Cross-modal hypergraph interaction over the semantic tokens of all three
//! modalities, followed by cross-attention fusion into the global features.
//!
//! Hyperedges are neighbourhoods: node `i` owns hyperedge `e_i` holding every
//! node whose cosine similarity to `i` is at least `τ`. A node update is
//!
//! ```text
//! h_e   = mean of the member rows of e
//! h_i'  = GELU( Σ_{e ∋ i} w_e · h_e + b_i )
//! out_i = h_i' + h_i
//! ```
//!
//! The hyperedge structure is computed from values and enters the tape as a
//! constant; gradients do not flow through membership.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{CrossAttention, SegmentLayout};
use crate::params::{Graph, ParamId, ParamSet};
use crate::tape::{concat_rows, Var};
use crate::tensor::Tensor;

const ZERO_NORM: f64 = 1e-12;

/// Row-stacks the per-modality semantic tokens in RGB, NIR, TIR order.
pub fn concat_modalities<'t>(rgb: &Var<'t>, nir: &Var<'t>, tir: &Var<'t>) -> Result<Var<'t>> {
    let shape = rgb.value().shape().to_vec();
    for other in [nir, tir] {
        if other.value().shape() != shape.as_slice() {
            return Err(Error::dim("concat_modalities", &shape, other.value().shape()));
        }
    }
    concat_rows(&[*rgb, *nir, *tir])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HypergraphStructure {
    /// `members[e]` lists the nodes of hyperedge `e`, ascending.
    pub members: Vec<Vec<usize>>,
}

impl HypergraphStructure {
    pub fn node_count(&self) -> usize {
        self.members.len()
    }

    /// Hyperedges incident to `node`.
    pub fn incident(&self, node: usize) -> Vec<usize> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.binary_search(&node).is_ok())
            .map(|(e, _)| e)
            .collect()
    }

    /// `P[e][j] = 1/|e|` for `j ∈ e`: node-to-hyperedge mean.
    fn aggregation(&self) -> Tensor {
        let n = self.node_count();
        let mut p = Tensor::zeros(&[n, n]);
        for (e, members) in self.members.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &j in members {
                p.data_mut()[e * n + j] = inv;
            }
        }
        p
    }

    /// `Inc[i][e] = 1` when `i ∈ e`: hyperedge-to-node sum.
    fn incidence(&self) -> Tensor {
        let n = self.node_count();
        let mut inc = Tensor::zeros(&[n, n]);
        for (e, members) in self.members.iter().enumerate() {
            for &i in members {
                inc.data_mut()[i * n + e] = 1.0;
            }
        }
        inc
    }
}

/// Cosine similarity between all rows. Zero rows are rejected.
pub fn cosine_similarity(h: &Tensor) -> Result<Tensor> {
    let (n, d) = (h.rows(), h.cols());
    let mut unit = h.data().to_vec();
    for (i, row) in unit.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= ZERO_NORM) {
            return Err(Error::Numeric(format!("node {i} has zero norm; cosine similarity undefined")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = unit[i * d..(i + 1) * d]
                .iter()
                .zip(&unit[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], s)
}

/// `e_i = { j : cos(h_i, h_j) ≥ τ }`.
pub fn build_hyperedges(h: &Tensor, tau: f64) -> Result<HypergraphStructure> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("similarity threshold {tau} outside [-1, 1]")));
    }
    let s = cosine_similarity(h)?;
    let n = s.rows();
    let members: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            // self-similarity can round just below 1
            (0..n).filter(|&j| j == i || s.at(i, j) >= tau).collect()
        })
        .collect();
    Ok(HypergraphStructure { members })
}

/// One hypergraph convolution with residual: `GELU(Inc·diag(w)·P·H + b) + H`.
pub fn hypergraph_conv<'t>(
    h: &Var<'t>,
    structure: &HypergraphStructure,
    w: &Var<'t>,
    b: &Var<'t>,
) -> Result<Var<'t>> {
    let hv = h.value();
    let n = hv.rows();
    if structure.node_count() != n {
        return Err(Error::Contract(format!(
            "hypergraph has {} nodes, features have {n} rows",
            structure.node_count()
        )));
    }
    if let Some(e) = structure.members.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("hyperedge {e} is empty")));
    }
    let tape = h.tape();
    let edge_features = tape.constant(structure.aggregation()).matmul(h)?;
    let weighted = edge_features.mul_rows(w)?;
    let gathered = tape.constant(structure.incidence()).matmul(&weighted)?;
    gathered.add(b)?.gelu().add(h)
}

#[derive(Clone, Debug)]
pub struct HypergraphLayer {
    /// Per-hyperedge weight `[n]`.
    pub weight: ParamId,
    /// Per-node bias `[n × D]`.
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Chi {
    pub layers: Vec<HypergraphLayer>,
    pub fuse: CrossAttention,
    pub tau: f64,
    pub nodes: usize,
}

impl Chi {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        nodes: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        tau: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| HypergraphLayer {
                weight: ps.add_full(format!("{name}.conv{l}.edge_weight"), &[nodes], 0.1),
                bias: ps.add_zeros(format!("{name}.conv{l}.node_bias"), &[nodes, dim]),
            })
            .collect();
        Self {
            layers,
            fuse: CrossAttention::new(ps, &format!("{name}.fuse"), dim, heads, rng),
            tau,
            nodes,
        }
    }

    /// Runs every convolution layer on one sample's token set, rebuilding the
    /// hyperedges from the current features before each layer.
    pub fn propagate<'t>(&self, g: &Graph<'t, '_>, h: &Var<'t>) -> Result<(Var<'t>, Vec<HypergraphStructure>)> {
        let mut x = *h;
        let mut structures = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let s = build_hyperedges(&x.value(), self.tau)?;
            x = hypergraph_conv(&x, &s, &g.param(layer.weight), &g.param(layer.bias))?;
            structures.push(s);
        }
        Ok((x, structures))
    }

    /// `U = CrossAttn(G, H', H') + G` for a batch: `globals` is `[B·3 × D]`,
    /// `tokens` is `[B·n × D]`.
    pub fn fuse_global<'t>(
        &self,
        g: &Graph<'t, '_>,
        globals: &Var<'t>,
        tokens: &Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>> {
        let gv = globals.value();
        let tv = tokens.value();
        if gv.cols() != tv.cols() || batch == 0 || !gv.rows().is_multiple_of(batch) || !tv.rows().is_multiple_of(batch) {
            return Err(Error::dim("fuse_global", gv.shape(), tv.shape()));
        }
        let layout = SegmentLayout {
            batch,
            query_len: gv.rows() / batch,
            key_len: tv.rows() / batch,
        };
        self.fuse.forward(g, globals, tokens, layout)?.add(globals)
    }
}
