//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected.
//! [`RunConfig::to_text`] writes every field, so a snapshot parses back to an
//! identical config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::metrics::DistanceKind;
use crate::model::ModelConfig;
use crate::sfm::EncoderConfig;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model geometry
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub tau: f64,
    pub chi_depth: usize,
    // masks
    pub perturb_p: f64,
    pub rho: f64,
    // objectives
    pub margin: f64,
    pub label_smoothing: f64,
    // optimization
    pub lr: f64,
    pub lr_final: f64,
    pub ids_per_batch: usize,
    pub samples_per_id: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// Training augmentation: random horizontal flip, random shift in pixels.
    pub flip: bool,
    pub shift: usize,
    pub seed: u64,
    pub precision: Precision,
    pub eval_precision: Precision,
    pub distance: DistanceKind,
    // ablation switches
    pub sfm_on: bool,
    pub str_on: bool,
    pub chi_on: bool,
    // synthetic data
    pub num_ids: usize,
    pub per_id: usize,
    pub blob_size: usize,
    pub clutter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            num_queries: 4,
            tau: 0.5,
            chi_depth: 1,
            perturb_p: 0.1,
            rho: 0.5,
            margin: 0.3,
            label_smoothing: 0.1,
            lr: 1e-3,
            lr_final: 1e-4,
            ids_per_batch: 4,
            samples_per_id: 4,
            steps: 300,
            eval_every: 50,
            flip: true,
            shift: 4,
            seed: 0,
            precision: Precision::F64,
            eval_precision: Precision::F32,
            distance: DistanceKind::Euclidean,
            sfm_on: true,
            str_on: true,
            chi_on: true,
            num_ids: 8,
            per_id: 16,
            blob_size: 16,
            clutter: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_precision(key: &str, value: &str) -> Result<Precision> {
    match value {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        _ => Err(Error::Config(format!("invalid precision {value:?} for {key} (f32|f64)"))),
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "chi_depth" => self.chi_depth = parse(key, value)?,
            "perturb_p" => self.perturb_p = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_final" => self.lr_final = parse(key, value)?,
            "ids_per_batch" => self.ids_per_batch = parse(key, value)?,
            "samples_per_id" => self.samples_per_id = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "shift" => self.shift = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = parse_precision(key, value)?,
            "eval_precision" => self.eval_precision = parse_precision(key, value)?,
            "distance" => {
                self.distance = match value {
                    "euclidean" => DistanceKind::Euclidean,
                    "cosine" => DistanceKind::Cosine,
                    _ => return Err(Error::Config(format!("invalid distance {value:?} (euclidean|cosine)"))),
                }
            }
            "sfm_on" => self.sfm_on = parse_bool(key, value)?,
            "str_on" => self.str_on = parse_bool(key, value)?,
            "chi_on" => self.chi_on = parse_bool(key, value)?,
            "num_ids" => self.num_ids = parse(key, value)?,
            "per_id" => self.per_id = parse(key, value)?,
            "blob_size" => self.blob_size = parse(key, value)?,
            "clutter" => self.clutter = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    /// Parses config text on top of `base`.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", self.image_size.to_string());
        kv("channels", self.channels.to_string());
        kv("patch", self.patch.to_string());
        kv("dim", self.dim.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("num_queries", self.num_queries.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("chi_depth", self.chi_depth.to_string());
        kv("perturb_p", format!("{:?}", self.perturb_p));
        kv("rho", format!("{:?}", self.rho));
        kv("margin", format!("{:?}", self.margin));
        kv("label_smoothing", format!("{:?}", self.label_smoothing));
        kv("lr", format!("{:?}", self.lr));
        kv("lr_final", format!("{:?}", self.lr_final));
        kv("ids_per_batch", self.ids_per_batch.to_string());
        kv("samples_per_id", self.samples_per_id.to_string());
        kv("steps", self.steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("flip", self.flip.to_string());
        kv("shift", self.shift.to_string());
        kv("seed", self.seed.to_string());
        kv("precision", precision_name(self.precision).into());
        kv("eval_precision", precision_name(self.eval_precision).into());
        kv(
            "distance",
            match self.distance {
                DistanceKind::Euclidean => "euclidean",
                DistanceKind::Cosine => "cosine",
            }
            .into(),
        );
        kv("sfm_on", self.sfm_on.to_string());
        kv("str_on", self.str_on.to_string());
        kv("chi_on", self.chi_on.to_string());
        kv("num_ids", self.num_ids.to_string());
        kv("per_id", self.per_id.to_string());
        kv("blob_size", self.blob_size.to_string());
        kv("clutter", format!("{:?}", self.clutter));
        s
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch: self.patch,
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
        }
    }

    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            num_queries: self.num_queries,
            tau: self.tau,
            chi_depth: self.chi_depth,
            num_classes,
            sfm: self.sfm_on,
            str_tokens: self.str_on,
            chi: self.chi_on,
            margin: self.margin,
            label_smoothing: self.label_smoothing,
        }
    }

    /// Generator settings; the text embedding width follows the model width.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_ids: self.num_ids,
            per_id: self.per_id,
            image_size: self.image_size,
            channels: self.channels,
            blob_size: self.blob_size,
            clutter: self.clutter,
            text_dim: self.dim,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(2).validate()?;
        if !(0.0..=1.0).contains(&self.perturb_p) {
            return Err(Error::Config(format!("perturb_p {} outside [0, 1]", self.perturb_p)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.ids_per_batch < 2 || self.samples_per_id < 2 {
            return Err(Error::Config(format!(
                "batch {}x{} infeasible: need at least 2 identities x 2 samples",
                self.ids_per_batch, self.samples_per_id
            )));
        }
        if !(self.lr >= 0.0 && self.lr_final >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}
