//! One-dimensional chaotic maps and the pixel-wise chaotic transform.
//!
//! Every pixel value `x ∈ [0, 1]` is treated as the initial state of a map
//! and iterated `k` times. The input is clamped to `[ε, 1 − ε]` first so that
//! no pixel starts on an absorbing endpoint (Tent and Logistic both send 0 to
//! 0 forever).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// `r·x·(1 − x)`
    Logistic,
    /// `μ·min(x, 1 − x)`
    Tent,
    /// `r·sin(π·x)`
    Sine,
}

impl MapKind {
    pub fn default_param(self) -> f64 {
        match self {
            MapKind::Logistic => 3.99,
            MapKind::Tent => 2.0,
            MapKind::Sine => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Logistic => "logistic",
            MapKind::Tent => "tent",
            MapKind::Sine => "sine",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(MapKind::Logistic),
            "tent" => Ok(MapKind::Tent),
            "sine" => Ok(MapKind::Sine),
            other => Err(Error::Config(format!("unknown map `{other}`"))),
        }
    }
}

/// Map kind, its parameter, the input clamp margin and the iteration range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaoticMapSpec {
    pub kind: MapKind,
    pub param: f64,
    pub epsilon: f64,
    pub k_min: u32,
    pub k_max: u32,
    /// Clamp to `[ε, 1 − ε]` after every step as well as before the first.
    pub reclamp_each_step: bool,
}

impl ChaoticMapSpec {
    pub fn new(kind: MapKind) -> Self {
        ChaoticMapSpec {
            kind,
            param: kind.default_param(),
            epsilon: 1e-6,
            k_min: 1,
            k_max: 5,
            reclamp_each_step: false,
        }
    }

    pub fn with_k_range(mut self, k_min: u32, k_max: u32) -> Self {
        self.k_min = k_min;
        self.k_max = k_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "iteration range [{}, {}] invalid",
                self.k_min, self.k_max
            )));
        }
        if !self.param.is_finite() {
            return Err(Error::Config("map parameter must be finite".into()));
        }
        Ok(())
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

impl Default for ChaoticMapSpec {
    fn default() -> Self {
        ChaoticMapSpec::new(MapKind::Tent)
    }
}

#[inline]
fn apply(kind: MapKind, param: f64, x: f64) -> f64 {
    match kind {
        MapKind::Logistic => param * x * (1.0 - x),
        MapKind::Tent => param * x.min(1.0 - x),
        MapKind::Sine => param * (PI * x).sin(),
    }
}

fn check_unit(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("map input {x} outside [0, 1]")))
    }
}

/// One application of the map.
pub fn map_step(x: f64, spec: &ChaoticMapSpec) -> Result<f64> {
    check_unit(x)?;
    Ok(apply(spec.kind, spec.param, x))
}

/// Clamps `x0` into `[ε, 1 − ε]` and applies the map `k` times.
pub fn iterate_map(x0: f64, k: u32, spec: &ChaoticMapSpec) -> Result<f64> {
    if k == 0 {
        return contract_err("iteration count must be at least 1");
    }
    check_unit(x0)?;
    let mut x = spec.clamp(x0);
    for _ in 0..k {
        x = map_step(x, spec)?;
        if spec.reclamp_each_step {
            x = spec.clamp(x);
        }
    }
    Ok(x)
}

/// `C×H×W` image with every value in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return dim_err("image dimensions must be positive");
        }
        if pixels.len() != channels * height * width {
            return dim_err(format!(
                "{channels}×{height}×{width} image needs {} values, got {}",
                channels * height * width,
                pixels.len()
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Construction for values already known to lie in `[0, 1]`.
    pub(crate) fn from_trusted(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        ImageTensor {
            channels,
            height,
            width,
            pixels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }
}

/// Replaces every pixel by `iterate_map(pixel, k)`.
pub fn chaotic_transform(img: &ImageTensor, k: u32, spec: &ChaoticMapSpec) -> Result<ImageTensor> {
    if k < spec.k_min || k > spec.k_max {
        return contract_err(format!(
            "k = {k} outside [{}, {}]",
            spec.k_min, spec.k_max
        ));
    }
    let (kind, param) = (spec.kind, spec.param);
    let mut out = Vec::with_capacity(img.pixels.len());
    for &p in &img.pixels {
        let mut x = spec.clamp(p);
        for _ in 0..k {
            x = apply(kind, param, x);
            if spec.reclamp_each_step {
                x = spec.clamp(x);
            }
        }
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!(
                "{kind} map with parameter {param} left [0, 1] (value {x})"
            )));
        }
        out.push(x);
    }
    Ok(ImageTensor::from_trusted(img.channels, img.height, img.width, out))
}

/// Uniform draw from `{k_min, …, k_max}`.
pub fn sample_k<R: Rng + ?Sized>(rng: &mut R, spec: &ChaoticMapSpec) -> u32 {
    rng.gen_range(spec.k_min..=spec.k_max)
}

/// `|orbit(x0) − orbit(x0 + delta)|` after each of `n` unclamped steps.
pub fn sensitivity_probe(x0: f64, delta: f64, n: usize, spec: &ChaoticMapSpec) -> Result<Vec<f64>> {
    let (mut a, mut b) = (x0, x0 + delta);
    for v in [a, b] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("probe start {v} outside (0, 1)")));
        }
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        a = apply(spec.kind, spec.param, a);
        b = apply(spec.kind, spec.param, b);
        out.push((a - b).abs());
    }
    Ok(out)
}
