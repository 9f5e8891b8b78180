//! Synthetic multi-modal identity datasets and the frozen text surrogate.
//!
//! Every identity owns a latent vector shared by its three modalities; each
//! modality maps the latent through its own fixed bank of smooth basis
//! patterns, so the three foreground prototypes are correlated but distinct.
//! A sample places the identity's elliptical foreground at a random position,
//! adds per-pixel jitter to it, and fills the background with uniform noise in
//! `[0, clutter)`. One pixel mask marks the foreground for all modalities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{load_tensor, save_tensor, write_atomic, DType, StoredTensor, TensorData};
use crate::error::{Error, Result};
use crate::masks::PixelMask;
use crate::model::MODALITIES;
use crate::rng::{stream, Rng64, DATASET_STREAM, IDENTITY_STREAM, SAMPLE_STREAM};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: &str = "stmi-synth/1";
pub const MANIFEST_FILE: &str = "manifest.json";

const LATENT_DIM: usize = 6;
const BASIS_GRID: usize = 4;
const FOREGROUND_JITTER: f64 = 0.1;
const PATTERN_GAIN: f64 = 2.0;
pub const TEXT_NOISE: f64 = 0.05;
const CAMERAS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Side of the square box holding the elliptical foreground.
    pub blob_size: usize,
    pub clutter: f64,
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_ids: 8,
            per_id: 16,
            image_size: 32,
            channels: 3,
            blob_size: 16,
            clutter: 0.5,
            text_dim: 64,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config(format!("num_ids {} < 2", self.num_ids)));
        }
        if self.per_id < 4 {
            return Err(Error::Config(format!("per_id {} < 4", self.per_id)));
        }
        if self.image_size == 0 || self.channels == 0 || self.text_dim == 0 {
            return Err(Error::Config("image size, channels and text dim must be positive".into()));
        }
        if self.blob_size == 0 || self.blob_size > self.image_size {
            return Err(Error::Config(format!(
                "blob size {} must be in 1..={}",
                self.blob_size, self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config(format!("clutter {} outside [0, 1]", self.clutter)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// RGB, NIR, TIR surrogates, each `[C×H×W]` holding `f32`-representable values.
    pub images: [Tensor; 3],
    pub mask: PixelMask,
    pub identity: usize,
    pub camera: usize,
    /// `[D_text]`, unit norm.
    pub text: Tensor,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
    pub images: [String; 3],
    pub mask: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub num_ids: usize,
    pub image_size: usize,
    pub channels: usize,
    pub text_dim: usize,
    pub clutter: f64,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Query and gallery are disjoint (by construction of the entry list) and
    /// every query identity has a gallery sample from another camera.
    pub fn validate(&self) -> Result<()> {
        for (i, q) in self.samples.iter().enumerate().filter(|(_, s)| s.split == Split::Query) {
            let covered = self
                .samples
                .iter()
                .any(|g| g.split == Split::Gallery && g.identity == q.identity && g.camera != q.camera);
            if !covered {
                return Err(Error::Contract(format!(
                    "query sample {i} (identity {}) has no valid gallery match",
                    q.identity
                )));
            }
        }
        for s in &self.samples {
            if s.identity >= self.num_ids {
                return Err(Error::Contract(format!(
                    "identity {} out of range for {} identities",
                    s.identity, self.num_ids
                )));
            }
        }
        Ok(())
    }
}

/// Split of the `j`-th sample of an identity: the first half trains, then a
/// quarter of the remainder (at least one) are queries, the rest gallery.
pub fn split_for(j: usize, per_id: usize) -> Split {
    let train = per_id / 2;
    let rest = per_id - train;
    let queries = (rest / 4).max(1);
    if j < train {
        Split::Train
    } else if j < train + queries {
        Split::Query
    } else {
        Split::Gallery
    }
}

/// Deterministic unit-norm pseudo text embedding keyed by identity, with
/// optional per-sample Gaussian noise (std [`TEXT_NOISE`]) and renormalization.
pub fn text_embed_surrogate(identity: usize, seed: u64, dim: usize, noise: Option<&mut Rng64>) -> Tensor {
    let mut rng = stream(seed, IDENTITY_STREAM | ((identity as u64) << 1) | 1);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    if let Some(noise_rng) = noise {
        for x in v.iter_mut() {
            *x += TEXT_NOISE * noise_rng.sample::<f64, _>(StandardNormal);
        }
        normalize(&mut v);
    }
    Tensor::new(vec![dim], v).expect("vector")
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Smooth random pattern: a coarse Gaussian grid bilinearly upsampled.
fn smooth_pattern(rng: &mut Rng64, channels: usize, size: usize) -> Vec<f64> {
    let g = BASIS_GRID;
    let coarse: Vec<f64> = (0..channels * g * g).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(channels * size * size);
    let scale = (g - 1) as f64 / (size.max(2) - 1) as f64;
    for c in 0..channels {
        for y in 0..size {
            let fy = y as f64 * scale;
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(g - 1);
            for x in 0..size {
                let fx = x as f64 * scale;
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(g - 1);
                let at = |yy: usize, xx: usize| coarse[c * g * g + yy * g + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

fn inside_ellipse(y: usize, x: usize, size: usize) -> bool {
    let r = size as f64 / 2.0;
    let dy = (y as f64 + 0.5 - r) / r;
    let dx = (x as f64 + 0.5 - r) / r;
    dy * dy + dx * dx <= 1.0
}

/// Per-identity, per-modality foreground prototypes `[C×S×S]` with values in (0, 1).
pub fn prototypes(cfg: &GeneratorConfig) -> Vec<[Vec<f64>; 3]> {
    let mut basis_rng = stream(cfg.seed, DATASET_STREAM);
    let bases: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| {
            (0..LATENT_DIM)
                .map(|_| smooth_pattern(&mut basis_rng, cfg.channels, cfg.blob_size))
                .collect()
        })
        .collect();
    let len = cfg.channels * cfg.blob_size * cfg.blob_size;
    (0..cfg.num_ids)
        .map(|id| {
            let mut rng = stream(cfg.seed, IDENTITY_STREAM | ((id as u64) << 1));
            let latent: Vec<f64> = (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let norm = (LATENT_DIM as f64).sqrt();
            let make = |m: usize| -> Vec<f64> {
                (0..len)
                    .map(|p| {
                        let s: f64 = latent.iter().zip(&bases[m]).map(|(z, b)| z * b[p]).sum();
                        1.0 / (1.0 + (-PATTERN_GAIN * s / norm).exp())
                    })
                    .collect()
            };
            [make(0), make(1), make(2)]
        })
        .collect()
}

/// Generates all samples in memory. Sample `i` (identity `i / per_id`, index
/// `i % per_id` within it) draws from its own stream.
pub fn generate_samples(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let (h, s, c) = (cfg.image_size, cfg.blob_size, cfg.channels);
    let mut samples = Vec::with_capacity(cfg.num_ids * cfg.per_id);
    for (identity, proto) in protos.iter().enumerate() {
        for j in 0..cfg.per_id {
            let index = identity * cfg.per_id + j;
            let mut rng = stream(cfg.seed, SAMPLE_STREAM | index as u64);
            let oy = rng.random_range(0..=h - s);
            let ox = rng.random_range(0..=h - s);
            let mut mask = vec![0u8; h * h];
            for y in 0..s {
                for x in 0..s {
                    if inside_ellipse(y, x, s) {
                        mask[(oy + y) * h + ox + x] = 1;
                    }
                }
            }
            let mut images = Vec::with_capacity(3);
            for p in proto.iter() {
                let mut img = vec![0.0f64; c * h * h];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..h {
                            let bg: f64 = rng.random::<f64>() * cfg.clutter;
                            let jitter: f64 = FOREGROUND_JITTER * rng.sample::<f64, _>(StandardNormal);
                            let v = if mask[y * h + x] == 1 {
                                p[ch * s * s + (y - oy) * s + (x - ox)] + jitter
                            } else {
                                bg
                            };
                            img[ch * h * h + y * h + x] = v as f32 as f64;
                        }
                    }
                }
                images.push(Tensor::new(vec![c, h, h], img)?);
            }
            let text = text_embed_surrogate(identity, cfg.seed, cfg.text_dim, Some(&mut rng));
            let text = Tensor::new(vec![cfg.text_dim], text.data().iter().map(|&v| v as f32 as f64).collect())?;
            samples.push(Sample {
                images: images.try_into().expect("three modalities"),
                mask: PixelMask::new(h, h, mask)?,
                identity,
                camera: j % CAMERAS,
                text,
                split: split_for(j, cfg.per_id),
            });
        }
    }
    Ok(samples)
}

fn entry_paths(index: usize) -> ([String; 3], String, String) {
    let images = MODALITIES.map(|m| format!("samples/{index:05}_{m}.stt"));
    (images, format!("samples/{index:05}_mask.stt"), format!("samples/{index:05}_text.stt"))
}

/// Writes the dataset under `out` and returns its manifest.
pub fn generate_dataset(cfg: &GeneratorConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let samples = generate_samples(cfg)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let (images, mask, text) = entry_paths(index);
        for (img, rel) in s.images.iter().zip(&images) {
            save_tensor(&StoredTensor::from_f32(img), out.join(rel))?;
        }
        let mask_t = StoredTensor::new(vec![s.mask.height(), s.mask.width()], TensorData::U8(s.mask.values().to_vec()))?;
        save_tensor(&mask_t, out.join(&mask))?;
        save_tensor(&StoredTensor::from_f32(&s.text), out.join(&text))?;
        entries.push(ManifestEntry {
            identity: s.identity,
            camera: s.camera,
            split: s.split,
            images,
            mask,
            text,
        });
    }
    let manifest = Manifest {
        version: GENERATOR_VERSION.to_string(),
        seed: cfg.seed,
        num_ids: cfg.num_ids,
        image_size: cfg.image_size,
        channels: cfg.channels,
        text_dim: cfg.text_dim,
        clutter: cfg.clutter,
        samples: entries,
    };
    manifest.validate()?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&out.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// A dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds an in-memory dataset without touching the filesystem.
    pub fn synthesize(cfg: &GeneratorConfig) -> Result<Self> {
        let samples = generate_samples(cfg)?;
        let entries = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (images, mask, text) = entry_paths(i);
                ManifestEntry {
                    identity: s.identity,
                    camera: s.camera,
                    split: s.split,
                    images,
                    mask,
                    text,
                }
            })
            .collect();
        let manifest = Manifest {
            version: GENERATOR_VERSION.to_string(),
            seed: cfg.seed,
            num_ids: cfg.num_ids,
            image_size: cfg.image_size,
            channels: cfg.channels,
            text_dim: cfg.text_dim,
            clutter: cfg.clutter,
            samples: entries,
        };
        manifest.validate()?;
        Ok(Self { manifest, samples })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        manifest.validate()?;
        let (h, c) = (manifest.image_size, manifest.channels);
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let mut images = Vec::with_capacity(3);
            for rel in &e.images {
                let t = load_tensor(resolve(dir, rel))?.expect(DType::F32, 3)?.to_tensor();
                if t.shape() != [c, h, h] {
                    return Err(Error::Geometry(format!("{rel}: shape {:?}, manifest says [{c}, {h}, {h}]", t.shape())));
                }
                images.push(t);
            }
            let mask = load_tensor(resolve(dir, &e.mask))?.expect(DType::U8, 2)?;
            let TensorData::U8(values) = mask.data else { unreachable!("dtype checked") };
            let mask = PixelMask::new(mask.shape[0], mask.shape[1], values)?;
            let text = load_tensor(resolve(dir, &e.text))?.expect(DType::F32, 1)?.to_tensor();
            samples.push(Sample {
                images: images.try_into().expect("three modalities"),
                mask,
                identity: e.identity,
                camera: e.camera,
                text,
                split: e.split,
            });
        }
        Ok(Self { manifest, samples })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_ids(&self) -> usize {
        self.manifest.num_ids
    }
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
