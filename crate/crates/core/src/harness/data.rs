//! Synthetic fine-grained texture dataset and its binary container.
//!
//! Container layout (all integers little-endian `u32`):
//!
//! ```text
//! b"CSDS" | version | count | C | H | W | count·C·H·W × f32 LE
//! ```
//!
//! Labels live next to the data in a plain-text `.labels` file, one class
//! index per line.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chaos::ImageTensor;
use crate::error::{contract_err, Error, Result};
use crate::seeding::{derive_rng, streams};

pub const DATASET_MAGIC: &[u8; 4] = b"CSDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Appearance of one class: a grating at `frequency` cycles per pixel,
/// rotated by `orientation_deg`, with uniform noise of `noise` amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub frequency: f64,
    pub orientation_deg: f64,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureDatasetSpec {
    pub classes: Vec<ClassParams>,
    pub images_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Share of each class that goes to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl TextureDatasetSpec {
    /// Classes whose frequency grows by `frequency_ratio` and orientation by
    /// `orientation_step_deg` from one class to the next.
    pub fn graded(
        num_classes: usize,
        base_frequency: f64,
        frequency_ratio: f64,
        base_orientation_deg: f64,
        orientation_step_deg: f64,
        noise: f64,
    ) -> Vec<ClassParams> {
        (0..num_classes)
            .map(|c| ClassParams {
                frequency: base_frequency * frequency_ratio.powi(c as i32),
                orientation_deg: base_orientation_deg + orientation_step_deg * c as f64,
                noise,
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn train_per_class(&self) -> usize {
        (self.images_per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        for (c, p) in self.classes.iter().enumerate() {
            if !(p.frequency.is_finite() && p.orientation_deg.is_finite() && p.noise >= 0.0 && p.noise.is_finite()) {
                return Err(Error::Config(format!("class {c} has invalid parameters {p:?}")));
            }
        }
        let train = self.train_per_class();
        if train == 0 || train >= self.images_per_class {
            return Err(Error::Config(format!(
                "train fraction {} leaves an empty split of {} images per class",
                self.train_fraction, self.images_per_class
            )));
        }
        Ok(())
    }
}

impl Default for TextureDatasetSpec {
    fn default() -> Self {
        TextureDatasetSpec {
            classes: TextureDatasetSpec::graded(4, 0.08, 1.15, 20.0, 10.0, 1.5),
            images_per_class: 600,
            channels: 3,
            height: 32,
            width: 32,
            train_fraction: 5.0 / 6.0,
            seed: 0,
        }
    }
}

/// Images with one label each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// One oriented grating with a random phase and per-channel tint, plus
/// uniform noise, min-max rescaled to `[0, 1]` and rounded to `f32`.
pub fn gen_texture<R: Rng + ?Sized>(class_id: usize, spec: &TextureDatasetSpec, rng: &mut R) -> Result<ImageTensor> {
    let Some(p) = spec.classes.get(class_id) else {
        return contract_err(format!("class {class_id} outside {} classes", spec.classes.len()));
    };
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let theta = p.orientation_deg.to_radians();
    let (kx, ky) = (2.0 * PI * p.frequency * theta.cos(), 2.0 * PI * p.frequency * theta.sin());
    let phase = rng.gen_range(0.0..2.0 * PI);
    let tints: Vec<f64> = (0..c).map(|_| rng.gen_range(0.7..=1.0)).collect();

    let mut raw = Vec::with_capacity(c * h * w);
    for &tint in &tints {
        for y in 0..h {
            for x in 0..w {
                let wave = (kx * x as f64 + ky * y as f64 + phase).sin();
                let noise = if p.noise > 0.0 { rng.gen_range(-p.noise..=p.noise) } else { 0.0 };
                raw.push(tint * wave + noise);
            }
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = raw
        .into_iter()
        .map(|v| {
            let unit = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
            unit as f32 as f64
        })
        .collect();
    ImageTensor::new(c, h, w, pixels)
}

/// Stratified train/test split. Image `i` of class `c` is drawn from its own
/// stream, and the first `train_per_class` images of every class are
/// training images. Both sets are ordered class by class.
pub fn gen_dataset(spec: &TextureDatasetSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let n_train = spec.train_per_class();
    let mut train = LabeledSet::default();
    let mut test = LabeledSet::default();
    for class in 0..spec.num_classes() {
        for i in 0..spec.images_per_class {
            let mut rng = derive_rng(spec.seed, &[streams::DATA, class as u64, i as u64]);
            let img = gen_texture(class, spec, &mut rng)?;
            let set = if i < n_train { &mut train } else { &mut test };
            set.images.push(img);
            set.labels.push(class);
        }
    }
    Ok((train, test))
}

fn labels_path(data: &Path) -> PathBuf {
    data.with_extension("labels")
}

/// Container bytes for `set`. Pixels are stored as `f32`.
pub fn encode_dataset(images: &[ImageTensor]) -> Result<Vec<u8>> {
    let Some(first) = images.first() else {
        return contract_err("cannot store an empty dataset");
    };
    let (c, h, w) = first.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + images.len() * c * h * w * 4);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, images.len() as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for img in images {
        if img.shape() != (c, h, w) {
            return contract_err("dataset images must share one shape");
        }
        for &v in img.pixels() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("dataset header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version}, this build reads {DATASET_VERSION}"
        )));
    }
    let (count, c, h, w) = (word(1), word(2), word(3), word(4));
    if count == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate dataset dims {count}×{c}×{h}×{w}")));
    }
    let per_image = c * h * w;
    let expected = count
        .checked_mul(per_image)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("dataset dims overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset body has {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    bytes[HEADER_LEN..]
        .chunks_exact(per_image * 4)
        .enumerate()
        .map(|(i, chunk)| {
            let pixels = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            ImageTensor::new(c, h, w, pixels).map_err(|e| Error::Format(format!("image {i}: {e}")))
        })
        .collect()
}

pub fn encode_labels(labels: &[usize]) -> String {
    labels.iter().map(|y| format!("{y}\n")).collect()
}

pub fn decode_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim()
                .parse()
                .map_err(|_| Error::Format(format!("label line {}: `{line}` is not a class index", i + 1)))
        })
        .collect()
}

/// Writes `path` and its `.labels` sidecar.
pub fn save_dataset(path: &Path, set: &LabeledSet) -> Result<()> {
    if set.images.len() != set.labels.len() {
        return contract_err("one label per image required");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_dataset(&set.images)?)?;
    fs::write(labels_path(path), encode_labels(&set.labels))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledSet> {
    let images = decode_dataset(&fs::read(path)?)?;
    let labels = decode_labels(&fs::read_to_string(labels_path(path))?)?;
    if labels.len() != images.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(LabeledSet { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TextureDatasetSpec {
        TextureDatasetSpec {
            images_per_class: 6,
            height: 8,
            width: 8,
            ..TextureDatasetSpec::default()
        }
    }

    #[test]
    fn zero_noise_is_repeatable() {
        let mut spec = small();
        spec.classes = TextureDatasetSpec::graded(4, 0.1, 1.15, 0.0, 10.0, 0.0);
        let a = gen_texture(2, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = gen_texture(2, &spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_class_parameters_give_identical_images() {
        let mut spec = small();
        spec.classes = TextureDatasetSpec::graded(2, 0.1, 1.0, 15.0, 0.0, 0.3);
        for s in 0..5 {
            let a = gen_texture(0, &spec, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let b = gen_texture(1, &spec, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let spec = small();
        assert!(matches!(
            gen_texture(4, &spec, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn default_split_sizes() {
        let spec = TextureDatasetSpec::default();
        assert_eq!(spec.train_per_class() * 4, 2000);
        assert_eq!((spec.images_per_class - spec.train_per_class()) * 4, 400);
    }

    #[test]
    fn split_is_stratified_and_repeatable() {
        let spec = small();
        let (train, test) = gen_dataset(&spec).unwrap();
        assert_eq!(train.class_counts(4), vec![5; 4]);
        assert_eq!(test.class_counts(4), vec![1; 4]);
        let (train2, _) = gen_dataset(&spec).unwrap();
        assert_eq!(encode_dataset(&train.images).unwrap(), encode_dataset(&train2.images).unwrap());
    }

    #[test]
    fn container_round_trip_and_damage() {
        let (train, _) = gen_dataset(&small()).unwrap();
        let bytes = encode_dataset(&train.images).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), train.images);
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        let nan = f32::NAN.to_le_bytes();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&nan);
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn labels_parse_strictly() {
        assert_eq!(decode_labels(&encode_labels(&[0, 3, 1])).unwrap(), vec![0, 3, 1]);
        assert!(decode_labels("0\nx\n").is_err());
    }
}
