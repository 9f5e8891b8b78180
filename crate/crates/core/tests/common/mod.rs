//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use stmi_core::sfm::EncoderConfig;
use stmi_core::{ParamSet, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(Vec::as_slice).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn randn<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// `x·W + b` with `W` stored `[in × out]`.
pub fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let mut y = matmul(x, &mat(w));
    for r in y.iter_mut() {
        for (v, bias) in r.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head scaled-dot-product attention over already projected q, k, v.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let w = softmax(&logits);
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| w[j] * v[j][c]).sum();
            }
        }
    }
    out
}

fn p<'a>(ps: &'a ParamSet, name: &str) -> &'a Tensor {
    ps.get(ps.find(name).unwrap_or_else(|| panic!("missing parameter {name}")))
}

/// Pre-norm transformer encoder with a class token and a final layer norm,
/// evaluated on one `[C×H×W]` image with the weights stored under `prefix`.
pub fn vanilla_encoder(ps: &ParamSet, prefix: &str, cfg: &EncoderConfig, image: &Tensor) -> Mat {
    let (c, size, patch) = (cfg.channels, cfg.image_size, cfg.patch);
    let grid = size / patch;
    let mut patches = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = Vec::new();
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row.push(image.data()[ch * size * size + (gy * patch + dy) * size + gx * patch + dx]);
                    }
                }
            }
            patches.push(row);
        }
    }
    let emb = linear(
        &patches,
        p(ps, &format!("{prefix}.patch_embed.weight")),
        p(ps, &format!("{prefix}.patch_embed.bias")),
    );
    let mut x = vec![p(ps, &format!("{prefix}.cls")).data().to_vec()];
    x.extend(emb);
    x = add(&x, &mat(p(ps, &format!("{prefix}.pos"))));
    let eps = 1e-5;
    for l in 0..cfg.depth {
        let n = |s: &str| format!("{prefix}.layer{l}.{s}");
        let h = layer_norm(&x, p(ps, &n("norm1.gamma")).data(), p(ps, &n("norm1.beta")).data(), eps);
        let q = linear(&h, p(ps, &n("attn.q.weight")), p(ps, &n("attn.q.bias")));
        let k = linear(&h, p(ps, &n("attn.k.weight")), p(ps, &n("attn.k.bias")));
        let v = linear(&h, p(ps, &n("attn.v.weight")), p(ps, &n("attn.v.bias")));
        let a = attention(&q, &k, &v, cfg.heads);
        x = add(&x, &linear(&a, p(ps, &n("attn.proj.weight")), p(ps, &n("attn.proj.bias"))));
        let h = layer_norm(&x, p(ps, &n("norm2.gamma")).data(), p(ps, &n("norm2.beta")).data(), eps);
        let f = linear(&h, p(ps, &n("ffn.fc1.weight")), p(ps, &n("ffn.fc1.bias")));
        let f: Mat = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        x = add(&x, &linear(&f, p(ps, &n("ffn.fc2.weight")), p(ps, &n("ffn.fc2.bias"))));
    }
    layer_norm(&x, p(ps, &format!("{prefix}.norm.gamma")).data(), p(ps, &format!("{prefix}.norm.beta")).data(), eps)
}

/// `GELU(Σ_{e ∋ i} w_e · mean_{j ∈ e} H_j + b_i) + H_i`, edge by edge.
pub fn hypergraph_conv(h: &Mat, members: &[Vec<usize>], w: &[f64], b: &Mat) -> Mat {
    let n = h.len();
    let d = h[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut acc = vec![0.0; d];
        for (e, m) in members.iter().enumerate() {
            if !m.contains(&i) {
                continue;
            }
            for c in 0..d {
                let mean = m.iter().map(|&j| h[j][c]).sum::<f64>() / m.len() as f64;
                acc[c] += w[e] * mean;
            }
        }
        for c in 0..d {
            out[i][c] = gelu(acc[c] + b[i][c]) + h[i][c];
        }
    }
    out
}

/// `{ j : cos(h_i, h_j) ≥ τ }` by direct comparison.
pub fn threshold_members(h: &Mat, tau: f64) -> Vec<Vec<usize>> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    (0..h.len())
        .map(|i| {
            (0..h.len())
                .filter(|&j| {
                    let dot: f64 = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum();
                    i == j || dot / (norm(&h[i]) * norm(&h[j])) >= tau
                })
                .collect()
        })
        .collect()
}

/// Average precision straight from the definition: mean over relevant ranks
/// of (relevant items up to and including that rank) / rank.
pub fn ap_brute(relevance: &[bool]) -> f64 {
    let ranks: Vec<usize> = relevance.iter().enumerate().filter(|(_, &r)| r).map(|(k, _)| k + 1).collect();
    let total: f64 = ranks
        .iter()
        .map(|&k| relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64)
        .sum();
    total / ranks.len() as f64
}
