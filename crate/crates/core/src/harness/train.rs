//! Identity-balanced training with Adam and periodic retrieval evaluation.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::masks::{patchify_mask, PixelMask, TokenMask};
use crate::metrics::{evaluate, EvalSet, Evaluation};
use crate::model::{Batch, Stmi};
use crate::params::{Graph, ParamSet};
use crate::rng::{stream, Rng64, STEP_STREAM};
use crate::sfm::Mode;
use crate::tape::Tape;
use crate::tensor::{with_precision, Precision, Tensor};

/// Rows per forward pass during feature extraction.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Frozen parameters and their moments are untouched.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * step;
            }
        }
        Ok(())
    }
}

/// Linear decay from `lr` at the first step to `lr_final` at the last.
pub fn learning_rate(cfg: &RunConfig, step: usize) -> f64 {
    if cfg.steps <= 1 {
        return cfg.lr;
    }
    let f = step.min(cfg.steps - 1) as f64 / (cfg.steps - 1) as f64;
    cfg.lr + (cfg.lr_final - cfg.lr) * f
}

/// Training indices grouped per identity, skipping identities without any.
pub fn train_index(data: &Dataset) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = (0..data.num_ids()).map(|id| (id, Vec::new())).collect();
    for i in data.indices(Split::Train) {
        groups[data.samples[i].identity].1.push(i);
    }
    groups.retain(|(_, v)| !v.is_empty());
    groups
}

/// `P` distinct identities, `S` samples each. Identities with fewer than
/// `S` training samples repeat them.
pub fn sample_batch(groups: &[(usize, Vec<usize>)], p: usize, s: usize, rng: &mut Rng64) -> Result<Vec<usize>> {
    if groups.len() < p {
        return Err(Error::Config(format!(
            "batch needs {p} identities, training split has {}",
            groups.len()
        )));
    }
    let mut out = Vec::with_capacity(p * s);
    for g in sample_indices(rng, groups.len(), p).into_iter() {
        let mut pool = groups[g].1.clone();
        pool.shuffle(rng);
        out.extend((0..s).map(|k| pool[k % pool.len()]));
    }
    Ok(out)
}

/// Random horizontal flip and translation by up to `shift` pixels per axis,
/// applied identically to the three modalities and the mask. Vacated pixels
/// are zero (background).
pub fn augment(images: &[Tensor; 3], mask: &PixelMask, flip: bool, shift: usize, rng: &mut Rng64) -> Result<([Tensor; 3], PixelMask)> {
    let do_flip = flip && rng.random::<bool>();
    let s = shift as isize;
    let (dy, dx) = if shift > 0 {
        (rng.random_range(-s as i64..=s as i64) as isize, rng.random_range(-s as i64..=s as i64) as isize)
    } else {
        (0, 0)
    };
    let (h, w) = (mask.height(), mask.width());
    let source = |y: usize, x: usize| -> Option<(usize, usize)> {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            return None;
        }
        let sx = if do_flip { w - 1 - sx as usize } else { sx as usize };
        Some((sy as usize, sx))
    };
    let mut m = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = source(y, x) {
                m[y * w + x] = mask.values()[sy * w + sx];
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    for img in images {
        let c = img.shape()[0];
        let mut d = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if let Some((sy, sx)) = source(y, x) {
                        d[ch * h * w + y * w + x] = img.data()[ch * h * w + sy * w + sx];
                    }
                }
            }
        }
        out.push(Tensor::new(img.shape().to_vec(), d)?);
    }
    Ok((out.try_into().expect("three modalities"), PixelMask::new(h, w, m)?))
}

pub fn token_masks(data: &Dataset, patch: usize, rho: f64) -> Result<Vec<TokenMask>> {
    data.samples.iter().map(|s| patchify_mask(&s.mask, patch, rho)).collect()
}

pub fn make_batch(data: &Dataset, masks: &[TokenMask], indices: &[usize]) -> Result<Batch> {
    let b = indices.len();
    let dim = data.manifest.text_dim;
    let mut text = Vec::with_capacity(b * dim);
    let mut images: [Vec<Tensor>; 3] = Default::default();
    for &i in indices {
        let s = &data.samples[i];
        for (dst, img) in images.iter_mut().zip(&s.images) {
            dst.push(img.clone());
        }
        text.extend_from_slice(s.text.data());
    }
    Ok(Batch {
        images,
        masks: indices.iter().map(|&i| masks[i].clone()).collect(),
        text: Tensor::new(vec![b, dim], text)?,
        labels: indices.iter().map(|&i| data.samples[i].identity).collect(),
    })
}

fn check_compatible(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if m.image_size != cfg.image_size || m.channels != cfg.channels {
        return Err(Error::Config(format!(
            "dataset images are {}x{}x{}, config expects {}x{}x{}",
            m.channels, m.image_size, m.image_size, cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    if m.text_dim != cfg.dim {
        return Err(Error::Config(format!(
            "text embedding width {} must equal model width {}",
            m.text_dim, cfg.dim
        )));
    }
    Ok(())
}

/// Retrieval features `[n × 3D]` for `indices`, computed without
/// perturbation at `precision`. `fused` selects the fused features when the
/// model has them; otherwise the flattened class tokens are used.
pub fn extract_features(
    model: &Stmi,
    params: &ParamSet,
    data: &Dataset,
    masks: &[TokenMask],
    indices: &[usize],
    precision: Precision,
    fused: bool,
) -> Result<Tensor> {
    let width = 3 * model.config.encoder.dim;
    let mut out = Vec::with_capacity(indices.len() * width);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = make_batch(data, masks, chunk)?;
        let feats = with_precision(precision, || -> Result<Tensor> {
            let tape = Tape::new();
            let g = Graph::new(&tape, params);
            let fwd = model.forward(&g, &batch, &mut Mode::Eval)?;
            let feat = if fused { fwd.retrieval() } else { fwd.globals_flat };
            let v = feat.value();
            Ok((*v).clone())
        })?;
        out.extend_from_slice(feats.data());
    }
    Tensor::new(vec![indices.len(), width], out)
}

/// Query-vs-gallery evaluation on the dataset's held-out splits. With
/// `chi_on = false` in `cfg` the class tokens are retrieved even if the model
/// carries the interaction branch.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Stmi,
    params: &ParamSet,
    data: &Dataset,
    masks: &[TokenMask],
) -> Result<Evaluation> {
    let q = data.indices(Split::Query);
    let gal = data.indices(Split::Gallery);
    let labels = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) {
        idx.iter()
            .map(|&i| (data.samples[i].identity, data.samples[i].camera))
            .unzip()
    };
    let (query_ids, query_cams) = labels(&q);
    let (gallery_ids, gallery_cams) = labels(&gal);
    let set = EvalSet {
        query: extract_features(model, params, data, masks, &q, cfg.eval_precision, cfg.chi_on)?,
        query_ids,
        query_cams,
        gallery: extract_features(model, params, data, masks, &gal, cfg.eval_precision, cfg.chi_on)?,
        gallery_ids,
        gallery_cams,
    };
    evaluate(&set, cfg.distance)
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Stmi,
    pub params: ParamSet,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
    pub log: Vec<String>,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Stmi::new(cfg.model(num_classes), cfg.seed)?;
        let adam = Adam::new(&params);
        Ok(Self {
            model,
            params,
            adam,
            step: 0,
            log: Vec::new(),
        })
    }
}

pub struct Trainer<'d> {
    pub config: RunConfig,
    pub data: &'d Dataset,
    pub state: TrainState,
    masks: Vec<TokenMask>,
    groups: Vec<(usize, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: RunConfig, data: &'d Dataset) -> Result<Self> {
        let state = TrainState::fresh(&config, data.num_ids())?;
        Self::resume(config, data, state)
    }

    pub fn resume(config: RunConfig, data: &'d Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        check_compatible(&config, data)?;
        if state.model.config.num_classes != data.num_ids() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {} identities",
                state.model.config.num_classes,
                data.num_ids()
            )));
        }
        let masks = token_masks(data, config.patch, config.rho)?;
        let groups = train_index(data);
        Ok(Self {
            config,
            data,
            state,
            masks,
            groups,
        })
    }

    pub fn masks(&self) -> &[TokenMask] {
        &self.masks
    }

    /// One optimization step; returns the loss.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.config;
        let step = self.state.step;
        let mut rng = stream(cfg.seed, STEP_STREAM | step as u64);
        let idx = sample_batch(&self.groups, cfg.ids_per_batch, cfg.samples_per_id, &mut rng)?;
        let mut batch = make_batch(self.data, &self.masks, &idx)?;
        if cfg.flip || cfg.shift > 0 {
            for (k, &i) in idx.iter().enumerate() {
                let sample = &self.data.samples[i];
                let (images, mask) = augment(&sample.images, &sample.mask, cfg.flip, cfg.shift, &mut rng)?;
                for (dst, img) in batch.images.iter_mut().zip(images) {
                    dst[k] = img;
                }
                batch.masks[k] = patchify_mask(&mask, cfg.patch, cfg.rho)?;
            }
        }
        let fail = |msg: String| Error::Training { step: step + 1, msg };
        let model = &self.state.model;
        let params = &self.state.params;
        let (loss, grads) = with_precision(cfg.precision, || -> Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let g = Graph::new(&tape, params);
            let mut mode = Mode::Train {
                perturb_p: cfg.perturb_p,
                rng: &mut rng,
            };
            let fwd = model.forward(&g, &batch, &mut mode)?;
            let terms = model.loss(&g, &fwd, &batch.labels)?;
            let loss = terms.total.value().data()[0];
            if !loss.is_finite() {
                return Ok((loss, Vec::new()));
            }
            let grads = tape.backward(terms.total)?;
            Ok((loss, g.param_grads(&grads)))
        })
        .map_err(|e| match e {
            Error::Numeric(msg) => fail(msg),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(fail(format!("loss is {loss}")));
        }
        for (id, gr) in self.state.params.ids().zip(&grads) {
            if gr.data().iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite gradient for {}", self.state.params.name(id))));
            }
        }
        let lr = learning_rate(cfg, step);
        self.state.adam.update(&mut self.state.params, &grads, lr)?;
        self.state.step += 1;
        self.state
            .log
            .push(format!("step={} lr={:?} loss={:?}", self.state.step, lr, loss));
        Ok(loss)
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_model(&self.config, &self.state.model, &self.state.params, self.data, &self.masks)
    }

    /// Trains until `until` completed steps (capped at the configured total),
    /// evaluating every `eval_every` steps and after the final step.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.steps);
        while self.state.step < until {
            self.step()?;
            let s = self.state.step;
            let periodic = self.config.eval_every > 0 && s.is_multiple_of(self.config.eval_every);
            if periodic || s == self.config.steps {
                let m = self.evaluate()?.metrics;
                self.state.log.push(format!(
                    "eval step={s} mAP={:?} CMC@1={:?} CMC@5={:?} CMC@10={:?}",
                    m.map, m.cmc1, m.cmc5, m.cmc10
                ));
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.steps)
    }
}
