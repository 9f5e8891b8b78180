//! Segmentation-guided attention modulation and the per-modality transformer
//! encoder built on it.
//!
//! For each head the attention logits `A = q·kᵀ` are shifted by
//!
//! ```text
//! S = α · (R ⊙ M_pos) − β · ((1 − R) ⊙ M_neg)
//! M_pos[i][j] = max_j' A[i][j'] − A[i][j]
//! M_neg[i][j] = A[i][j] − min_j' A[i][j']
//! ```
//!
//! where `R = m mᵀ` is the foreground interaction matrix of the token mask,
//! and the weights become `softmax((A + S) / √head_dim)`. One `(α, β)` pair
//! is learned per layer and shared by all heads of that layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{multi_head, FeedForward, LayerNorm, Linear, SegmentLayout};
use crate::masks::{interaction_mask, perturb, TokenMask};
use crate::params::{Graph, ParamId, ParamSet};
use crate::rng::Rng64;
use crate::tape::{concat_rows, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Geometry(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Number of patch tokens `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `N + 1`, including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Forward-pass mode. Training perturbs the token mask once per pass.
pub enum Mode<'a> {
    Eval,
    Train { perturb_p: f64, rng: &'a mut Rng64 },
}

/// `A = q·kᵀ`, unscaled.
pub fn attention_logits<'t>(q: &Var<'t>, k: &Var<'t>) -> Result<Var<'t>> {
    q.matmul_t(k)
}

/// Row-wise `(M_pos, M_neg)`.
pub fn modulation_matrices<'t>(a: &Var<'t>) -> (Var<'t>, Var<'t>) {
    (a.row_max_deviation(), a.row_min_deviation())
}

/// The additive modulation `S`. `alpha` and `beta` are one-element tensors.
pub fn modulation<'t>(a: &Var<'t>, r: &Var<'t>, alpha: &Var<'t>, beta: &Var<'t>) -> Result<Var<'t>> {
    let rv = r.value();
    if rv.shape() != a.value().shape() {
        return Err(Error::dim("modulation", a.value().shape(), rv.shape()));
    }
    let background = complement(&rv);
    let background = a.tape().constant(background);
    modulation_with_background(a, r, &background, alpha, beta)
}

fn complement(r: &Tensor) -> Tensor {
    let data = r.data().iter().map(|v| 1.0 - v).collect();
    Tensor::new(r.shape().to_vec(), data).expect("same shape")
}

fn modulation_with_background<'t>(
    a: &Var<'t>,
    r: &Var<'t>,
    background: &Var<'t>,
    alpha: &Var<'t>,
    beta: &Var<'t>,
) -> Result<Var<'t>> {
    let (m_pos, m_neg) = modulation_matrices(a);
    let enhance = r.mul(&m_pos)?.mul(alpha)?;
    let suppress = background.mul(&m_neg)?.mul(beta)?;
    enhance.sub(&suppress)
}

/// `softmax((A + S) / √head_dim)`.
pub fn modulated_attention<'t>(a: &Var<'t>, s: &Var<'t>, head_dim: usize) -> Result<Var<'t>> {
    a.add(s)?.scale(1.0 / (head_dim as f64).sqrt()).softmax_rows()
}

/// Flattens an image `[C×H×W]` into `[N × C·P·P]` patch rows in row-major grid
/// order; each row lists channel, then in-patch row, then in-patch column.
pub fn patchify_image(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Geometry(format!("expected a [C, H, W] image, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Geometry(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(c * h * w);
    let src = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ch * h * w + y * w + px * patch;
                    data.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], data)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    /// `(α, β)`, present when modulation is enabled.
    pub modulation: Option<(ParamId, ParamId)>,
}

/// Pre-norm vision transformer whose self-attention is mask-modulated.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    /// `modulate` creates the per-layer `(α, β)` pair, initialized to zero.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        config: EncoderConfig,
        modulate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new(ps, &format!("{name}.patch_embed"), config.patch_dim(), d, rng);
        let cls = ps.add_randn(format!("{name}.cls"), &[1, d], 0.02, rng);
        let pos = ps.add_randn(format!("{name}.pos"), &[config.seq_len(), d], 0.02, rng);
        let layers = (0..config.depth)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    norm1: LayerNorm::new(ps, &format!("{p}.norm1"), d),
                    q: Linear::new(ps, &format!("{p}.attn.q"), d, d, rng),
                    k: Linear::new(ps, &format!("{p}.attn.k"), d, d, rng),
                    v: Linear::new(ps, &format!("{p}.attn.v"), d, d, rng),
                    proj: Linear::new(ps, &format!("{p}.attn.proj"), d, d, rng),
                    norm2: LayerNorm::new(ps, &format!("{p}.norm2"), d),
                    ffn: FeedForward::new(ps, &format!("{p}.ffn"), d, 4 * d, rng),
                    modulation: modulate.then(|| {
                        (
                            ps.add_zeros(format!("{p}.sfm.alpha"), &[1]),
                            ps.add_zeros(format!("{p}.sfm.beta"), &[1]),
                        )
                    }),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(ps, &format!("{name}.norm"), d);
        Ok(Self {
            config,
            patch_embed,
            cls,
            pos,
            layers,
            final_norm,
        })
    }

    pub fn modulates(&self) -> bool {
        self.layers.iter().any(|l| l.modulation.is_some())
    }

    /// Encodes a batch of images into stacked token sequences
    /// `[B·(N+1) × D]`, class token first within each sample.
    ///
    /// In training mode each sample's token mask is perturbed once; the
    /// resulting interaction matrix is shared by every layer and head.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t, '_>,
        images: &[&Tensor],
        masks: &[TokenMask],
        mode: &mut Mode<'_>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        if images.len() != masks.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "{} images but {} masks",
                images.len(),
                masks.len()
            )));
        }
        let expected = [cfg.channels, cfg.image_size, cfg.image_size];
        let mut patch_rows = Vec::with_capacity(images.len());
        for (img, m) in images.iter().zip(masks) {
            if img.shape() != expected {
                return Err(Error::Geometry(format!(
                    "image shape {:?}, encoder expects {expected:?}",
                    img.shape()
                )));
            }
            if m.len() != cfg.seq_len() {
                return Err(Error::Geometry(format!(
                    "token mask length {}, encoder expects {}",
                    m.len(),
                    cfg.seq_len()
                )));
            }
            patch_rows.push(patchify_image(img, cfg.patch)?);
        }

        let interactions: Vec<(Var<'t>, Var<'t>)> = if self.modulates() {
            masks
                .iter()
                .map(|m| {
                    let m = match mode {
                        Mode::Eval => m.clone(),
                        Mode::Train { perturb_p, rng } => perturb(m, *perturb_p, &mut **rng)?,
                    };
                    let r = interaction_mask(&m);
                    let bg = complement(&r);
                    Ok((g.constant(r), g.constant(bg)))
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let batch = images.len();
        let n = cfg.num_patches();
        let seq = cfg.seq_len();
        let stacked = Tensor::new(
            vec![batch * n, cfg.patch_dim()],
            patch_rows.into_iter().flat_map(Tensor::into_data).collect(),
        )?;
        let embedded = self.patch_embed.forward(g, &g.constant(stacked))?;
        let cls = g.param(self.cls);
        let pos = g.param(self.pos);
        let mut seqs = Vec::with_capacity(batch);
        for b in 0..batch {
            let patches = embedded.slice_rows(b * n, (b + 1) * n)?;
            seqs.push(concat_rows(&[cls, patches])?.add(&pos)?);
        }
        let mut x = if batch == 1 { seqs[0] } else { concat_rows(&seqs)? };

        let layout = SegmentLayout {
            batch,
            query_len: seq,
            key_len: seq,
        };
        let head_dim = cfg.head_dim();
        let scale = 1.0 / (head_dim as f64).sqrt();
        for layer in &self.layers {
            let h = layer.norm1.forward(g, &x)?;
            let q = layer.q.forward(g, &h)?;
            let k = layer.k.forward(g, &h)?;
            let v = layer.v.forward(g, &h)?;
            let ab = layer.modulation.map(|(a, b)| (g.param(a), g.param(b)));
            let mixed = multi_head(&q, &k, &v, layout, cfg.heads, |b, _, logits| match &ab {
                Some((alpha, beta)) => {
                    let (r, bg) = &interactions[b];
                    let s = modulation_with_background(&logits, r, bg, alpha, beta)?;
                    modulated_attention(&logits, &s, head_dim)
                }
                None => logits.scale(scale).softmax_rows(),
            })?;
            x = x.add(&layer.proj.forward(g, &mixed)?)?;
            let h = layer.norm2.forward(g, &x)?;
            x = x.add(&layer.ffn.forward(g, &h)?)?;
        }
        self.final_norm.forward(g, &x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::Tape;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn logits_examples() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        assert_eq!(attention_logits(&i, &i).unwrap().value().data(), Tensor::eye(3).data());
        let q = tape.constant(m(&[&[1.0, 0.0], &[2.0, 0.0]]));
        let k = tape.constant(m(&[&[0.0, 1.0], &[0.0, -3.0]]));
        assert!(attention_logits(&q, &k).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulation_matrix_examples() {
        let tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 3.0, 2.0], &[5.0, 5.0, 5.0]]));
        let (p, n) = modulation_matrices(&a);
        assert_eq!(p.value().data(), &[2.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(n.value().data(), &[0.0, 2.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn modulation_substitution() {
        let tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 3.0, 2.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]));
        let r = tape.constant(interaction_mask(&TokenMask::new(vec![1, 1, 0]).unwrap()));
        let one = tape.constant(Tensor::scalar(1.0));
        let s = modulation(&a, &r, &one, &one).unwrap().value();
        assert_eq!(s.row(0), &[2.0, 0.0, -1.0]);

        let zero = tape.constant(Tensor::scalar(0.0));
        let s0 = modulation(&a, &r, &zero, &zero).unwrap().value();
        assert!(s0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_foreground_has_no_suppression() {
        let mut rng = stream(5, 0);
        let tape = Tape::new();
        let a = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let r = tape.constant(interaction_mask(&TokenMask::all_foreground(4)));
        let alpha = tape.constant(Tensor::scalar(0.7));
        let beta = tape.constant(Tensor::scalar(3.0));
        let s = modulation(&a, &r, &alpha, &beta).unwrap().value();
        let expected = a.row_max_deviation().scale(0.7).value();
        assert!(s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_modulation_is_scaled_dot_product() {
        let mut rng = stream(6, 0);
        let tape = Tape::new();
        let a = tape.constant(Tensor::randn(&[5, 5], 1.0, &mut rng));
        let s = tape.constant(Tensor::zeros(&[5, 5]));
        let w = modulated_attention(&a, &s, 4).unwrap().value();
        let plain = a.scale(0.5).softmax_rows().unwrap().value();
        assert!(w.max_abs_diff(&plain) < 1e-15);
        for r in 0..5 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn patchify_orders_grid_row_major() {
        // 1 channel, 4x4 image with value = pixel index
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify_image(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn encoder_output_shape_and_determinism() {
        let cfg = EncoderConfig {
            image_size: 32,
            channels: 3,
            patch: 8,
            depth: 2,
            heads: 4,
            dim: 16,
        };
        let mut rng = stream(9, 0);
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "rgb", cfg, true, &mut rng).unwrap();
        let img = Tensor::randn(&[3, 32, 32], 1.0, &mut rng);
        let mask = TokenMask::all_foreground(17);
        let run = || {
            let tape = Tape::new();
            let g = Graph::new(&tape, &ps);
            let out = enc.forward(&g, &[&img], &[mask.clone()], &mut Mode::Eval).unwrap();
            (*out.value()).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[17, 16]);
        assert!(a.bitwise_eq(&run()));
    }

    #[test]
    fn encoder_rejects_bad_geometry() {
        let cfg = EncoderConfig {
            image_size: 16,
            channels: 3,
            patch: 8,
            depth: 1,
            heads: 2,
            dim: 8,
        };
        let mut rng = stream(9, 0);
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "x", cfg, true, &mut rng).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &ps);
        let img = Tensor::zeros(&[3, 32, 32]);
        let err = enc
            .forward(&g, &[&img], &[TokenMask::all_foreground(5)], &mut Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }
}
