//! In-memory image classification datasets: CIFAR binary batches, IDX files
//! and a seeded synthetic generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use feedkit_core::Tensor32;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(TrainError::Config(format!(
                "unknown split {s:?} (train|test)"
            ))),
        }
    }
}

/// Generator settings for [`DatasetSource::SyntheticBlobs`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlobParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 200,
            image_size: 32,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn num_classes(self) -> usize {
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

    /// Standard file names inside an extracted binary archive.
    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// `path` is either one batch file or a directory holding the standard
    /// batch files of the split.
    CifarBinary {
        path: PathBuf,
        variant: CifarVariant,
        split: Split,
    },
    /// Unsigned-byte IDX image (`0x00000803`) and label (`0x00000801`) files;
    /// grayscale is replicated to three channels.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        num_classes: usize,
    },
    SyntheticBlobs {
        params: BlobParams,
        split: Split,
    },
}

/// Images `[N, 3, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor32,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor32, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TrainError::Format(format!(
                "images must be [N,3,H,W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(TrainError::Format(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(TrainError::Format(format!(
                "label {l} of sample {i} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[3, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor32, Vec<usize>)> {
        let x = self.images.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> ([f32; 3], [f32; 3]) {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.images.data().chunks_exact(c * plane) {
            for ch in 0..3 {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for ch in 0..3 {
            let m = sum[ch] / n;
            mean[ch] = m as f32;
            std[ch] = (sq[ch] / n - m * m).max(0.0).sqrt() as f32;
        }
        (mean, std)
    }

    /// `(x - mean) / std` per channel; a zero std leaves the channel centred
    /// but unscaled.
    pub fn normalize(&mut self, mean: [f32; 3], std: [f32; 3]) {
        let [_, h, w] = self.image_shape();
        let plane = h * w;
        for img in self.images.data_mut().chunks_exact_mut(3 * plane) {
            for ch in 0..3 {
                let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean[ch]) / s;
                }
            }
        }
    }
}

/// Random crop from a zero-padded copy plus a horizontal flip, per sample.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor32, pad: usize, rng: &mut R) {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut scratch = vec![0f32; c * h * w];
    for img in batch.data_mut().chunks_exact_mut(c * h * w) {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        scratch.copy_from_slice(img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    img[(ch * h + y) * w + x] =
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            scratch[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::CifarBinary {
            path,
            variant,
            split,
        } => load_cifar(path, *variant, *split),
        DatasetSource::Idx {
            images,
            labels,
            num_classes,
        } => load_idx(images, labels, *num_classes),
        DatasetSource::SyntheticBlobs { params, split } => synthetic_blobs(params, *split),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TrainError::io(path, e))
}

fn load_cifar(path: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        variant
            .files(split)
            .into_iter()
            .map(|f| path.join(f))
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    const PIXELS: usize = 3 * 32 * 32;
    let record = variant.label_bytes() + PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = read(file)?;
        if bytes.is_empty() {
            return Err(TrainError::Format(format!(
                "{}: no records",
                file.display()
            )));
        }
        let whole = bytes.len() / record * record;
        if whole != bytes.len() {
            return Err(TrainError::Io(format!(
                "{}: truncated record at byte offset {whole} ({} of {record} bytes present)",
                file.display(),
                bytes.len() - whole
            )));
        }
        for (r, rec) in bytes.chunks_exact(record).enumerate() {
            let label = rec[variant.label_bytes() - 1] as usize;
            if label >= variant.num_classes() {
                return Err(TrainError::Format(format!(
                    "{}: label {label} at byte offset {} exceeds {} classes",
                    file.display(),
                    r * record + variant.label_bytes() - 1,
                    variant.num_classes()
                )));
            }
            labels.push(label);
            pixels.extend(
                rec[variant.label_bytes()..]
                    .iter()
                    .map(|&b| b as f32 / 255.0),
            );
        }
    }
    let images = Tensor32::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, variant.num_classes())
}

/// Parses an IDX header, returning the dims and the payload offset.
fn idx_header(bytes: &[u8], path: &Path, want_rank: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(TrainError::Io(format!(
            "{}: truncated header at byte offset {}",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != want_rank {
        return Err(TrainError::Format(format!(
            "{}: magic {:02x}{:02x}{:02x}{:02x}, expected 000008{want_rank:02x}",
            path.display(),
            bytes[0],
            bytes[1],
            bytes[2],
            bytes[3]
        )));
    }
    let header = 4 + 4 * want_rank as usize;
    if bytes.len() < header {
        return Err(TrainError::Io(format!(
            "{}: truncated header at byte offset {}",
            path.display(),
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|d| u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize)
        .collect();
    let need = header + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(TrainError::Io(format!(
            "{}: truncated payload at byte offset {} (header promises {need} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(TrainError::Format(format!(
            "{}: {} trailing bytes after the declared {need}",
            path.display(),
            bytes.len() - need
        )));
    }
    Ok((dims, header))
}

fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let ib = read(images)?;
    let lb = read(labels)?;
    let (idims, ioff) = idx_header(&ib, images, 3)?;
    let (ldims, loff) = idx_header(&lb, labels, 1)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if ldims[0] != n {
        return Err(TrainError::Format(format!(
            "record count mismatch: {n} images vs {} labels",
            ldims[0]
        )));
    }
    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    for img in ib[ioff..].chunks_exact(h * w) {
        for _ in 0..3 {
            pixels.extend(img.iter().map(|&b| b as f32 / 255.0));
        }
    }
    let labels_v: Vec<usize> = lb[loff..].iter().map(|&b| b as usize).collect();
    if let Some(i) = labels_v.iter().position(|&l| l >= num_classes) {
        return Err(TrainError::Format(format!(
            "{}: label {} at byte offset {} exceeds {num_classes} classes",
            labels.display(),
            labels_v[i],
            loff + i
        )));
    }
    Dataset::new(Tensor32::new(&[n, 3, h, w], pixels)?, labels_v, num_classes)
}

/// Class templates are drawn once from `seed`; each split draws its own
/// noise, so train and test share templates but never samples.
fn synthetic_blobs(p: &BlobParams, split: Split) -> Result<Dataset> {
    if p.num_classes == 0 || p.samples_per_class == 0 || p.image_size == 0 {
        return Err(TrainError::Config(format!(
            "synthetic-blobs needs nonzero classes/samples/size, got {}/{}/{}",
            p.num_classes, p.samples_per_class, p.image_size
        )));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        return Err(TrainError::Config(format!(
            "noise_sigma must be >= 0, got {}",
            p.noise_sigma
        )));
    }
    let dim = 3 * p.image_size * p.image_size;
    let mut trng = ChaCha8Rng::seed_from_u64(p.seed);
    let templates: Vec<Vec<f32>> = (0..p.num_classes)
        .map(|_| (0..dim).map(|_| trng.gen::<f32>()).collect())
        .collect();
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut nrng = ChaCha8Rng::seed_from_u64(p.seed);
    nrng.set_stream(stream);
    let n = p.num_classes * p.samples_per_class;
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % p.num_classes;
        labels.push(class);
        for &t in &templates[class] {
            let z: f64 = StandardNormal.sample(&mut nrng);
            pixels.push((t as f64 + p.noise_sigma * z).clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor32::new(&[n, 3, p.image_size, p.image_size], pixels)?;
    Dataset::new(images, labels, p.num_classes)
}

/// A shuffled visiting order of `0..n`.
pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_splits_share_templates_not_noise() {
        let p = BlobParams {
            num_classes: 2,
            samples_per_class: 3,
            image_size: 4,
            noise_sigma: 0.0,
            seed: 3,
        };
        let a = synthetic_blobs(&p, Split::Train).unwrap();
        let b = synthetic_blobs(&p, Split::Test).unwrap();
        assert_eq!(a, b);
        let noisy = BlobParams {
            noise_sigma: 0.2,
            ..p
        };
        let a = synthetic_blobs(&noisy, Split::Train).unwrap();
        let b = synthetic_blobs(&noisy, Split::Test).unwrap();
        assert_ne!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn augment_without_padding_only_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let orig = Tensor32::new(&[1, 3, 2, 2], data).unwrap();
        for _ in 0..8 {
            let mut t = orig.clone();
            augment(&mut t, 0, &mut rng);
            let same = t == orig;
            let flipped = t
                .data()
                .chunks(2)
                .zip(orig.data().chunks(2))
                .all(|(a, b)| a[0] == b[1] && a[1] == b[0]);
            assert!(same || flipped);
        }
    }

    #[test]
    fn normalize_standardizes_channels() {
        let p = BlobParams {
            num_classes: 3,
            samples_per_class: 5,
            image_size: 4,
            noise_sigma: 0.3,
            seed: 1,
        };
        let mut d = synthetic_blobs(&p, Split::Train).unwrap();
        let (m, s) = d.channel_stats();
        d.normalize(m, s);
        let (m2, s2) = d.channel_stats();
        for ch in 0..3 {
            assert!(m2[ch].abs() < 1e-5);
            assert!((s2[ch] - 1.0).abs() < 1e-4);
        }
    }
}
