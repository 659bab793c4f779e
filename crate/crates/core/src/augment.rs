//! Standard image augmentations and the contrastive view pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::{chaotic_transform, sample_k, ChaoticMapSpec, ImageTensor};
use crate::error::{contract_err, Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Magnitudes and probabilities of the standard augmentation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub grayscale_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_kernel_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            brightness_range: (0.6, 1.4),
            contrast_range: (0.6, 1.4),
            saturation_range: (0.6, 1.4),
            grayscale_prob: 0.2,
            blur_sigma_range: (0.1, 2.0),
            blur_kernel_size: 5,
        }
    }
}

impl AugmentConfig {
    /// No flip, no grayscale, unit jitter and a near-delta blur.
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
            grayscale_prob: 0.0,
            blur_sigma_range: (0.01, 0.01),
            blur_kernel_size: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("hflip_prob", self.hflip_prob)?;
        prob("grayscale_prob", self.grayscale_prob)?;
        for (name, (lo, hi)) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is invalid")));
            }
        }
        let (slo, shi) = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::Config(format!("blur_sigma_range [{slo}, {shi}] is invalid")));
        }
        if self.blur_kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "blur_kernel_size {} must be odd",
                self.blur_kernel_size
            )));
        }
        Ok(())
    }
}

/// The two views fed to the contrastive model for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub v1: ImageTensor,
    pub v_chaos: ImageTensor,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.shape();
    let mut out = img.pixels().to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(out.len(), c * h * w);
    ImageTensor::from_trusted(c, h, w, out)
}

/// Multiplicative brightness, contrast and saturation factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl JitterFactors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        JitterFactors {
            brightness: uniform(rng, cfg.brightness_range),
            contrast: uniform(rng, cfg.contrast_range),
            saturation: uniform(rng, cfg.saturation_range),
        }
    }
}

/// Brightness, then contrast, then saturation, clamping to `[0, 1]` after each.
///
/// Contrast blends every channel toward its own mean; saturation blends toward
/// the luminance image and is skipped for images that are not RGB.
pub fn jitter_with(img: &ImageTensor, f: JitterFactors) -> ImageTensor {
    let (c, h, w) = img.shape();
    let plane = h * w;
    let mut px: Vec<f64> = img
        .pixels()
        .iter()
        .map(|v| (v * f.brightness).clamp(0.0, 1.0))
        .collect();
    if f.contrast != 1.0 {
        for ch in px.chunks_exact_mut(plane) {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            ch.iter_mut()
                .for_each(|v| *v = (mean + f.contrast * (*v - mean)).clamp(0.0, 1.0));
        }
    }
    if c == 3 && f.saturation != 1.0 {
        for i in 0..plane {
            let gray = LUMA[0] * px[i] + LUMA[1] * px[plane + i] + LUMA[2] * px[2 * plane + i];
            for ch in 0..3 {
                let v = &mut px[ch * plane + i];
                *v = (gray + f.saturation * (*v - gray)).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::from_trusted(c, h, w, px)
}

pub fn color_jitter<R: Rng + ?Sized>(img: &ImageTensor, rng: &mut R, cfg: &AugmentConfig) -> ImageTensor {
    jitter_with(img, JitterFactors::sample(rng, cfg))
}

/// Luminance `0.299R + 0.587G + 0.114B` copied to all three channels.
pub fn to_grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return contract_err(format!("grayscale needs 3 channels, got {c}"));
    }
    let plane = h * w;
    let px = img.pixels();
    let mut out = vec![0.0; 3 * plane];
    for i in 0..plane {
        let gray = (LUMA[0] * px[i] + LUMA[1] * px[plane + i] + LUMA[2] * px[2 * plane + i]).clamp(0.0, 1.0);
        for ch in 0..3 {
            out[ch * plane + i] = gray;
        }
    }
    Ok(ImageTensor::from_trusted(c, h, w, out))
}

/// Normalized 1-D Gaussian taps centred on the middle entry.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return contract_err(format!("kernel size {size} must be odd"));
    }
    if !(sigma > 0.0) {
        return contract_err(format!("blur sigma {sigma} must be positive"));
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur per channel with reflected borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64, kernel_size: usize) -> Result<ImageTensor> {
    let kernel = gaussian_kernel(sigma, kernel_size)?;
    let r = (kernel_size / 2) as isize;
    let (c, h, w) = img.shape();
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = img.plane(ch);
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[base + reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
                out[base + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageTensor::from_trusted(c, h, w, out))
}

/// Flip, jitter, grayscale and blur, in that order.
///
/// Every random quantity is drawn on every call, whichever branches fire, so
/// the stream position after a call does not depend on the outcomes.
pub fn apply_standard<R: Rng + ?Sized>(img: &ImageTensor, rng: &mut R, cfg: &AugmentConfig) -> Result<ImageTensor> {
    let flip = rng.gen::<f64>() < cfg.hflip_prob;
    let factors = JitterFactors::sample(rng, cfg);
    let gray = rng.gen::<f64>() < cfg.grayscale_prob;
    let sigma = uniform(rng, cfg.blur_sigma_range);

    let mut out = if flip { hflip(img) } else { img.clone() };
    out = jitter_with(&out, factors);
    if gray && out.channels() == 3 {
        out = to_grayscale(&out)?;
    }
    gaussian_blur(&out, sigma, cfg.blur_kernel_size)
}

/// `v1 = T_std(img)`, `v_chaos = T_chaos(T_std(img))` with independent
/// standard passes and `k` drawn once for the whole image.
pub fn make_contrastive_views<R: Rng + ?Sized>(
    img: &ImageTensor,
    rng: &mut R,
    aug: &AugmentConfig,
    map: &ChaoticMapSpec,
) -> Result<ViewPair> {
    let v1 = apply_standard(img, rng, aug)?;
    let base = apply_standard(img, rng, aug)?;
    let k = sample_k(rng, map);
    let v_chaos = chaotic_transform(&base, k, map)?;
    Ok(ViewPair { v1, v_chaos })
}
