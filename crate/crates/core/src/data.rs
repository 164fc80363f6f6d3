//! Image datasets: CIFAR binary records, synthetic class blobs, CutOut.
//!
//! Pixels are kept in `[0, 1]`. Normalization, when requested, is folded into
//! the model's first layer, so batches are never stored normalized.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with labels and the pixel statistics of the split
/// they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub mean: f64,
    pub std: f64,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if pixels.shape().len() != 4 || pixels.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "pixels {:?} do not match {} labels",
                pixels.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} >= class count {classes}")));
        }
        if pixels.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Dataset("pixels must lie in [0, 1]".into()));
        }
        let (mean, std) = pixel_stats(pixels.data());
        Ok(Self { pixels, labels, classes, mean, std })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> &[usize] {
        &self.pixels.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.pixels.index_first(i)
    }

    /// Rows `indices` as a new batch carrying this batch's statistics.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let inner: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.pixels.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        ImageBatch {
            pixels: Tensor::new(shape, data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            mean: self.mean,
            std: self.std,
        }
    }

    /// Split into the first `n` rows and the remainder; both keep this batch's statistics.
    pub fn split_at(&self, n: usize) -> Result<(ImageBatch, ImageBatch)> {
        if n > self.len() {
            return Err(Error::Config(format!("split of {n} exceeds {} records", self.len())));
        }
        let first: Vec<usize> = (0..n).collect();
        let rest: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&first), self.select(&rest)))
    }

    /// Keep only the listed classes, relabelled `0..classes.len()` in list order.
    pub fn filter_classes(&self, keep: &[usize]) -> ImageBatch {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        let mut out = self.select(&rows);
        for l in &mut out.labels {
            *l = keep.iter().position(|k| k == l).expect("filtered");
        }
        out.classes = keep.len();
        out
    }

    /// Replace the stored statistics, e.g. with those of the training split.
    pub fn with_stats(mut self, mean: f64, std: f64) -> Self {
        self.mean = mean;
        self.std = std;
        self
    }

    pub fn with_pixels(&self, pixels: Tensor) -> ImageBatch {
        ImageBatch { pixels, ..self.clone() }
    }
}

pub fn pixel_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn normalize(x: &Tensor, mean: f64, std: f64) -> Tensor {
    x.map(|v| (v - mean) / std)
}

pub fn denormalize(x: &Tensor, mean: f64, std: f64) -> Tensor {
    x.map(|v| v * std + mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    /// Fine labels (100 classes).
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }
}

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

/// Parse CIFAR binary records: label byte(s) followed by 3072 pixel bytes
/// (R, G, B planes, each 32x32 row-major).
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<ImageBatch> {
    parse_records(bytes, variant.label_bytes(), &CIFAR_SHAPE, variant.classes())
}

pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<ImageBatch> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant)
}

/// Generic record parser; the label used is the last label byte.
pub fn parse_records(bytes: &[u8], label_bytes: usize, shape: &[usize], classes: usize) -> Result<ImageBatch> {
    let pixels_per: usize = shape.iter().product();
    let record = label_bytes + pixels_per;
    if bytes.len() % record != 0 {
        return Err(Error::Dataset(format!(
            "file length {} is not a multiple of the record size {record}",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels_per);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(Error::Dataset(format!("record {i}: label {label} >= class count {classes}")));
        }
        labels.push(label);
        data.extend(rec[label_bytes..].iter().map(|&b| b as f64 / 255.0));
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    ImageBatch::new(Tensor::new(full, data)?, labels, classes)
}

/// Encode a batch as single-label-byte records, pixels rounded to bytes.
pub fn encode_records(batch: &ImageBatch) -> Result<Vec<u8>> {
    if batch.classes > 256 {
        return Err(Error::Dataset("labels do not fit in one byte".into()));
    }
    let inner: usize = batch.image_shape().iter().product();
    let mut out = Vec::with_capacity(batch.len() * (inner + 1));
    for (i, &label) in batch.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(
            batch.pixels.data()[i * inner..(i + 1) * inner]
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

/// Class-conditional Gaussian blobs on a noisy gray background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub resolution: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Images generated; a dataset config overrides it per split.
    #[serde(default)]
    pub count: usize,
    pub seed: u64,
    /// Peak brightness added at the blob center.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Blob radius (Gaussian std) in pixels.
    #[serde(default = "default_blob_sigma")]
    pub blob_sigma: f64,
    /// Std of i.i.d. per-pixel background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Max per-image shift of the blob center, in pixels.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn one() -> usize {
    1
}
fn default_amplitude() -> f64 {
    0.4
}
fn default_blob_sigma() -> f64 {
    3.0
}
fn default_noise() -> f64 {
    0.15
}
fn default_jitter() -> f64 {
    2.0
}

impl BlobConfig {
    pub fn new(resolution: usize, classes: usize, count: usize, seed: u64) -> Self {
        Self {
            resolution,
            classes,
            channels: 1,
            count,
            seed,
            amplitude: default_amplitude(),
            blob_sigma: default_blob_sigma(),
            noise: default_noise(),
            jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution must be >= 8, got {}", self.resolution)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels == 0 || self.blob_sigma <= 0.0 || self.noise < 0.0 || self.jitter < 0.0 {
            return Err(Error::Config("blob parameters out of range".into()));
        }
        Ok(())
    }

    /// Blob center of class `k`: evenly spaced on a circle around the image center.
    pub fn class_center(&self, k: usize) -> (f64, f64) {
        let mid = (self.resolution as f64 - 1.0) / 2.0;
        let radius = self.resolution as f64 / 4.0;
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.classes as f64;
        (mid + radius * angle.sin(), mid + radius * angle.cos())
    }
}

/// Deterministic per seed. Labels cycle through the classes.
pub fn synth_blobs(config: &BlobConfig) -> Result<ImageBatch> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let r = config.resolution;
    let plane = r * r;
    let mut data = Vec::with_capacity(config.count * config.channels * plane);
    let mut labels = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let label = i % config.classes;
        let (cy, cx) = config.class_center(label);
        let jy = if config.jitter > 0.0 { rng.random_range(-config.jitter..=config.jitter) } else { 0.0 };
        let jx = if config.jitter > 0.0 { rng.random_range(-config.jitter..=config.jitter) } else { 0.0 };
        let two_s2 = 2.0 * config.blob_sigma * config.blob_sigma;
        for _ in 0..config.channels {
            for y in 0..r {
                for x in 0..r {
                    let d2 = (y as f64 - cy - jy).powi(2) + (x as f64 - cx - jx).powi(2);
                    let v = 0.5 + config.amplitude * (-d2 / two_s2).exp() + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    let pixels = Tensor::new(vec![config.count, config.channels, r, r], data)?;
    ImageBatch::new(pixels, labels, config.classes)
}

/// Square of side `size` centered at `(cy, cx)`, clipped to an `h x w` image.
/// Returns `(y0, y1, x0, x1)` as half-open ranges.
pub fn clipped_square(cy: usize, cx: usize, size: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let half = size / 2;
    let y0 = cy.saturating_sub(half);
    let x0 = cx.saturating_sub(half);
    let y1 = (cy + size - half).min(h);
    let x1 = (cx + size - half).min(w);
    (y0.min(y1), y1, x0.min(x1), x1)
}

/// Fill a clipped square of one image `[C, H, W]` with `value`; returns the
/// number of pixels covered.
pub fn cutout_at(image: &mut Tensor, cy: usize, cx: usize, size: usize, value: f64) -> usize {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (y0, y1, x0, x1) = clipped_square(cy, cx, size, h, w);
    let data = image.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                data[(ch * h + y) * w + x] = value;
            }
        }
    }
    (y1 - y0) * (x1 - x0)
}

/// CutOut augmentation: one square hole per image, centered uniformly at
/// random and clipped at the borders, filled with the batch mean pixel.
pub fn cutout(batch: &ImageBatch, hole_size: usize, rng: &mut impl Rng) -> Result<ImageBatch> {
    let (h, w) = (batch.image_shape()[1], batch.image_shape()[2]);
    if hole_size > h.min(w) {
        return Err(Error::Precondition(format!("hole size {hole_size} exceeds image {h}x{w}")));
    }
    if hole_size == 0 {
        return Ok(batch.clone());
    }
    let images: Vec<Tensor> = (0..batch.len())
        .map(|i| {
            let mut img = batch.image(i);
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            cutout_at(&mut img, cy, cx, hole_size, batch.mean);
            img
        })
        .collect();
    Ok(batch.with_pixels(Tensor::stack(&images)?))
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Cifar10Binary { train_files: Vec<PathBuf>, test_file: PathBuf },
    Cifar100Binary { train_files: Vec<PathBuf>, test_file: PathBuf },
    SyntheticBlobs(BlobConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub train: usize,
    /// Held out from the end of the training records; used for model selection.
    pub val: usize,
    pub test: usize,
    /// Optional class subset, relabelled in list order.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Splits> {
        let (mut pool, mut test) = match &self.source {
            DataSource::Cifar10Binary { train_files, test_file } => {
                (load_many(train_files, CifarVariant::Cifar10)?, load_cifar(test_file, CifarVariant::Cifar10)?)
            }
            DataSource::Cifar100Binary { train_files, test_file } => {
                (load_many(train_files, CifarVariant::Cifar100)?, load_cifar(test_file, CifarVariant::Cifar100)?)
            }
            DataSource::SyntheticBlobs(cfg) => {
                let mut pool_cfg = cfg.clone();
                pool_cfg.count = self.train + self.val;
                let mut test_cfg = cfg.clone();
                test_cfg.count = self.test;
                test_cfg.seed = cfg.seed ^ 0x7e57_da7a;
                (synth_blobs(&pool_cfg)?, synth_blobs(&test_cfg)?)
            }
        };
        if let Some(keep) = &self.classes {
            pool = pool.filter_classes(keep);
            test = test.filter_classes(keep);
        }
        if self.train + self.val > pool.len() || self.test > test.len() {
            return Err(Error::Config(format!(
                "requested {}+{} train/val and {} test records, have {} and {}",
                self.train,
                self.val,
                self.test,
                pool.len(),
                test.len()
            )));
        }
        let (train, rest) = pool.split_at(self.train)?;
        let (val, _) = rest.split_at(self.val)?;
        let (test, _) = test.split_at(self.test)?;
        let (mean, std) = pixel_stats(train.pixels.data());
        Ok(Splits {
            train: train.with_stats(mean, std),
            val: val.with_stats(mean, std),
            test: test.with_stats(mean, std),
        })
    }
}

fn load_many(files: &[PathBuf], variant: CifarVariant) -> Result<ImageBatch> {
    let batches = files.iter().map(|f| load_cifar(f, variant)).collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor> = batches.iter().flat_map(|b| (0..b.len()).map(|i| b.image(i))).collect();
    let labels = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
    if images.is_empty() {
        return Err(Error::Dataset("no training records".into()));
    }
    ImageBatch::new(Tensor::stack(&images)?, labels, variant.classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn two_records_parse() {
        let mut bytes = record(3, |_| 0);
        bytes.extend(record(9, |_| 255));
        let b = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(b.pixels.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.labels, vec![3, 9]);
        assert!(b.image(1).data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn hand_built_record_is_exact() {
        // Byte value encodes plane and position.
        let bytes = record(1, |i| (i % 251) as u8);
        let b = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        let px = b.pixels.data();
        // Green plane, row 2, column 5.
        let idx = 1024 + 2 * 32 + 5;
        assert_eq!(px[idx], (idx % 251) as f64 / 255.0);
        assert_eq!(px[0], 0.0);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![4u8, 77u8];
        rec.extend(std::iter::repeat_n(10u8, 3072));
        let b = parse_cifar(&rec, CifarVariant::Cifar100).unwrap();
        assert_eq!(b.labels, vec![77]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_cifar(&[0u8; 3072], CifarVariant::Cifar10).is_err());
        assert!(parse_cifar(&record(10, |_| 0), CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_clipped() {
        let cfg = BlobConfig::new(16, 3, 12, 9);
        let a = synth_blobs(&cfg).unwrap();
        let b = synth_blobs(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let mut other = cfg.clone();
        other.seed = 10;
        assert_ne!(synth_blobs(&other).unwrap().pixels, a.pixels);
        assert!(synth_blobs(&BlobConfig::new(4, 3, 2, 0)).is_err());
    }

    #[test]
    fn records_round_trip_for_byte_exact_pixels() {
        let mut bytes = record(2, |i| (i * 7 % 256) as u8);
        bytes.extend(record(5, |i| (i % 13) as u8));
        let b = parse_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(encode_records(&b).unwrap(), bytes);
    }

    #[test]
    fn cutout_geometry() {
        let mut img = Tensor::full(&[1, 8, 8], 0.2);
        assert_eq!(cutout_at(&mut img, 4, 4, 8, 0.5), 64);
        assert!(img.data().iter().all(|&v| v == 0.5));

        let mut img = Tensor::full(&[1, 8, 8], 0.2);
        let area = cutout_at(&mut img, 0, 0, 4, 0.5);
        assert_eq!(area, 4);
        assert!(area < 16);

        let batch = ImageBatch::new(Tensor::full(&[2, 1, 8, 8], 0.3), vec![0, 1], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(cutout(&batch, 0, &mut rng).unwrap(), batch);
        assert!(cutout(&batch, 9, &mut rng).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let x = Tensor::from_vec(vec![0.0, 0.25, 0.9, 1.0]);
        let back = denormalize(&normalize(&x, 0.47, 0.25), 0.47, 0.25);
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn splits_share_training_stats() {
        let cfg = DatasetConfig {
            source: DataSource::SyntheticBlobs(BlobConfig::new(8, 2, 0, 3)),
            train: 10,
            val: 4,
            test: 6,
            classes: None,
            normalize: false,
        };
        let s = cfg.load().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 4, 6));
        let (m, sd) = pixel_stats(s.train.pixels.data());
        assert_eq!((s.test.mean, s.test.std), (m, sd));
    }
}
