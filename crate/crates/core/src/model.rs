//! The three-branch model: mask-modulated encoders, semantic token
//! reallocation, hypergraph interaction and the supervised heads.

use crate::chi::{concat_modalities, Chi, HypergraphStructure};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::masks::TokenMask;
use crate::objectives::{ce_label_smooth, triplet_batch_hard};
use crate::params::{Graph, ParamSet};
use crate::reallocation::StrBlock;
use crate::rng::{stream, INIT_STREAM};
use crate::sfm::{Encoder, EncoderConfig, Mode};
use crate::tape::{concat_rows, Var};
use crate::tensor::Tensor;

pub const MODALITIES: [&str; 3] = ["rgb", "nir", "tir"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// `K`, learnable queries per modality.
    pub num_queries: usize,
    pub tau: f64,
    pub chi_depth: usize,
    pub num_classes: usize,
    pub sfm: bool,
    pub str_tokens: bool,
    pub chi: bool,
    pub margin: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.chi && !self.str_tokens {
            return Err(Error::Config(
                "hypergraph interaction needs semantic tokens: chi_on requires str_on".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two identity classes".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [-1, 1]", self.tau)));
        }
        Ok(())
    }

    /// Nodes in the cross-modal hypergraph, `3(K+1)`.
    pub fn hypergraph_nodes(&self) -> usize {
        3 * (self.num_queries + 1)
    }
}

/// One minibatch. Images are grouped per modality, one `[C×H×W]` tensor per sample.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: [Vec<Tensor>; 3],
    pub masks: Vec<TokenMask>,
    /// `[B × D]` frozen text features.
    pub text: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything a forward pass exposes.
pub struct Forward<'t> {
    /// `[B·3 × D]`, per sample the RGB, NIR, TIR class tokens.
    pub globals: Var<'t>,
    /// `[B × 3D]`.
    pub globals_flat: Var<'t>,
    /// Per modality `[B·(K+1) × D]`.
    pub semantic: Option<[Var<'t>; 3]>,
    /// Per sample `H` `[3(K+1) × D]` and, after propagation, `H'`.
    pub token_sets: Vec<Var<'t>>,
    pub propagated: Vec<Var<'t>>,
    pub structures: Vec<Vec<HypergraphStructure>>,
    /// `[B·3 × D]`.
    pub fused: Option<Var<'t>>,
    /// `[B × 3D]`.
    pub fused_flat: Option<Var<'t>>,
    /// `[B × D]`, constant.
    pub text: Var<'t>,
}

impl<'t> Forward<'t> {
    /// Retrieval feature: fused features when available, class tokens otherwise.
    pub fn retrieval(&self) -> Var<'t> {
        self.fused_flat.unwrap_or(self.globals_flat)
    }
}

/// Named loss components, summed into `total`.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub terms: Vec<(&'static str, Var<'t>)>,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub globals: Linear,
    pub fused: Option<Linear>,
    pub text: Linear,
}

#[derive(Clone, Debug)]
pub struct Stmi {
    pub config: ModelConfig,
    pub encoders: [Encoder; 3],
    pub str_blocks: Option<[StrBlock; 3]>,
    pub chi: Option<Chi>,
    pub heads: Heads,
}

impl Stmi {
    /// Builds the model and registers its parameters, initialized from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet)> {
        config.validate()?;
        let mut rng = stream(seed, INIT_STREAM);
        let mut ps = ParamSet::new();
        let d = config.encoder.dim;
        let heads = config.encoder.heads;
        let mut encoders = Vec::with_capacity(3);
        for m in MODALITIES {
            encoders.push(Encoder::new(&mut ps, &format!("{m}.encoder"), config.encoder, config.sfm, &mut rng)?);
        }
        let str_blocks = if config.str_tokens {
            let blocks: Vec<StrBlock> = MODALITIES
                .iter()
                .map(|m| StrBlock::new(&mut ps, &format!("{m}.str"), d, heads, config.num_queries, &mut rng))
                .collect();
            Some(blocks.try_into().expect("three modalities"))
        } else {
            None
        };
        let chi = config.chi.then(|| {
            Chi::new(
                &mut ps,
                "chi",
                config.hypergraph_nodes(),
                d,
                heads,
                config.chi_depth,
                config.tau,
                &mut rng,
            )
        });
        let c = config.num_classes;
        let heads = Heads {
            globals: Linear::new(&mut ps, "head.g", 3 * d, c, &mut rng),
            fused: config.chi.then(|| Linear::new(&mut ps, "head.u", 3 * d, c, &mut rng)),
            text: Linear::new(&mut ps, "head.t", d, c, &mut rng),
        };
        let model = Self {
            config,
            encoders: encoders.try_into().expect("three modalities"),
            str_blocks,
            chi,
            heads,
        };
        Ok((model, ps))
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, batch: &Batch, mode: &mut Mode<'_>) -> Result<Forward<'t>> {
        let b = batch.len();
        let cfg = &self.config;
        let d = cfg.encoder.dim;
        let seq = cfg.encoder.seq_len();
        let n = cfg.encoder.num_patches();
        if batch.text.shape() != [b, d] {
            return Err(Error::Geometry(format!(
                "text features {:?}, model expects [{b}, {d}]",
                batch.text.shape()
            )));
        }
        for imgs in &batch.images {
            if imgs.len() != b {
                return Err(Error::Contract(format!("{} images for a batch of {b}", imgs.len())));
            }
        }

        let mut tokens = Vec::with_capacity(3);
        for (enc, imgs) in self.encoders.iter().zip(&batch.images) {
            let refs: Vec<&Tensor> = imgs.iter().collect();
            tokens.push(enc.forward(g, &refs, &batch.masks, mode)?);
        }

        let mut class_rows = Vec::with_capacity(3 * b);
        for s in 0..b {
            for t in &tokens {
                class_rows.push(t.slice_rows(s * seq, s * seq + 1)?);
            }
        }
        let globals = concat_rows(&class_rows)?;
        let globals_flat = globals.reshape(&[b, 3 * d])?;
        let text = g.constant(batch.text.clone());

        let mut out = Forward {
            globals,
            globals_flat,
            semantic: None,
            token_sets: Vec::new(),
            propagated: Vec::new(),
            structures: Vec::new(),
            fused: None,
            fused_flat: None,
            text,
        };

        let Some(blocks) = &self.str_blocks else {
            return Ok(out);
        };
        let mut semantic = Vec::with_capacity(3);
        for (block, t) in blocks.iter().zip(&tokens) {
            let mut patches = Vec::with_capacity(b);
            for s in 0..b {
                patches.push(t.slice_rows(s * seq + 1, s * seq + 1 + n)?);
            }
            let patches = if b == 1 { patches[0] } else { concat_rows(&patches)? };
            let queries = block.queries(g, &text)?;
            semantic.push(block.reallocate(g, &queries, &patches, b)?);
        }
        let semantic: [Var<'t>; 3] = semantic.try_into().expect("three modalities");
        out.semantic = Some(semantic);

        let Some(chi) = &self.chi else {
            return Ok(out);
        };
        let k1 = cfg.num_queries + 1;
        for s in 0..b {
            let part = |v: &Var<'t>| v.slice_rows(s * k1, (s + 1) * k1);
            let h = concat_modalities(&part(&semantic[0])?, &part(&semantic[1])?, &part(&semantic[2])?)?;
            let (h_prime, structures) = chi.propagate(g, &h)?;
            out.token_sets.push(h);
            out.propagated.push(h_prime);
            out.structures.push(structures);
        }
        let all_tokens = if b == 1 { out.propagated[0] } else { concat_rows(&out.propagated)? };
        let fused = chi.fuse_global(g, &globals, &all_tokens, b)?;
        out.fused_flat = Some(fused.reshape(&[b, 3 * d])?);
        out.fused = Some(fused);
        Ok(out)
    }

    /// Cross-entropy plus triplet loss on every supervised feature: the
    /// flattened class tokens, the flattened fused features (when present)
    /// and the text features.
    pub fn loss<'t>(&self, g: &Graph<'t, '_>, fwd: &Forward<'t>, labels: &[usize]) -> Result<LossTerms<'t>> {
        let cfg = &self.config;
        let mut terms = Vec::with_capacity(6);
        let mut head = |name_ce: &'static str, name_tri: &'static str, classifier: &Linear, feat: &Var<'t>| -> Result<()> {
            let logits = classifier.forward(g, feat)?;
            terms.push((name_ce, ce_label_smooth(&logits, labels, cfg.label_smoothing)?));
            terms.push((name_tri, triplet_batch_hard(feat, labels, cfg.margin)?));
            Ok(())
        };
        head("ce_g", "tri_g", &self.heads.globals, &fwd.globals_flat)?;
        if let (Some(classifier), Some(feat)) = (&self.heads.fused, &fwd.fused_flat) {
            head("ce_u", "tri_u", classifier, feat)?;
        }
        head("ce_t", "tri_t", &self.heads.text, &fwd.text)?;
        let mut total = terms[0].1;
        for (_, t) in &terms[1..] {
            total = total.add(t)?;
        }
        Ok(LossTerms { total, terms })
    }
}
