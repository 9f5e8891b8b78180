//! Pixel masks, token-level foreground vectors and their interaction matrix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary segmentation mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("PixelMask::new", &[height, width], &[values.len()]));
        }
        if let Some(pos) = values.iter().position(|&v| v > 1) {
            return Err(Error::Contract(format!(
                "pixel mask value {} at index {pos} is not binary",
                values[pos]
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            values: vec![value as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }
}

/// Per-token foreground indicator; index 0 is the class token and is always 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask(Vec<u8>);

impl TokenMask {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.first() != Some(&1) {
            return Err(Error::Contract("token mask must start with the class token set to 1".into()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Contract("token mask must be binary".into()));
        }
        Ok(Self(values))
    }

    /// Every token foreground.
    pub fn all_foreground(len: usize) -> Self {
        Self(vec![1; len.max(1)])
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        self.0[i] == 1
    }
}

/// Foreground fraction per patch (row-major patch grid) thresholded at `rho`,
/// with the class token prepended.
pub fn patchify_mask(mask: &PixelMask, patch: usize, rho: f64) -> Result<TokenMask> {
    if patch == 0 || !mask.height.is_multiple_of(patch) || !mask.width.is_multiple_of(patch) {
        return Err(Error::Geometry(format!(
            "mask {}x{} is not divisible by patch size {patch}",
            mask.height, mask.width
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Contract(format!("overlap threshold {rho} outside [0, 1]")));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let area = (patch * patch) as f64;
    let mut m = Vec::with_capacity(gh * gw + 1);
    m.push(1);
    for py in 0..gh {
        for px in 0..gw {
            let mut count = 0usize;
            for y in py * patch..(py + 1) * patch {
                let row = &mask.values[y * mask.width + px * patch..y * mask.width + (px + 1) * patch];
                count += row.iter().map(|&v| v as usize).sum::<usize>();
            }
            m.push((count as f64 / area >= rho) as u8);
        }
    }
    Ok(TokenMask(m))
}

/// Flips each background token to foreground with probability `p`.
pub fn perturb<R: Rng + ?Sized>(m: &TokenMask, p: f64, rng: &mut R) -> Result<TokenMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("perturbation probability {p} outside [0, 1]")));
    }
    let mut out = m.0.clone();
    for v in out.iter_mut().skip(1) {
        // one draw per background token, none when p is zero
        if *v == 0 && p > 0.0 && rng.random::<f64>() < p {
            *v = 1;
        }
    }
    Ok(TokenMask(out))
}

/// `R = m mᵀ` as a 0/1 matrix.
pub fn interaction_mask(m: &TokenMask) -> Tensor {
    let n = m.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = (m.0[i] & m.0[j]) as f64;
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}
