//! CIFAR-10 binary ingestion, additive Gaussian noise variants, subsetting
//! and per-epoch batching.
//!
//! A binary batch file is a sequence of 3073-byte records: one label byte
//! followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each plane
//! row-major 32×32). Pixels are scaled to `[0, 1]` on load.

use std::fmt;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shuffle::{mix_seed, seeded_rng, Permutation};
use crate::tensor::DenseTensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
pub const PIXELS_PER_IMAGE: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = PIXELS_PER_IMAGE + 1;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Clean,
    Awgn { dev: f64, seed: u64 },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Clean => f.write_str("clean"),
            Provenance::Awgn { dev, seed } => write!(f, "awgn(dev={dev}, seed={seed})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Noise seed used for one split of an experiment.
pub fn split_noise_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Train => seed,
        Split::Test => mix_seed(seed ^ 0x7E57),
    }
}

/// Images `(count, 3, 32, 32)` with labels in `[0, 10)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: DenseTensor<f32>,
    labels: Vec<u8>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(images: DenseTensor<f32>, labels: Vec<u8>, provenance: Provenance) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::Data(format!("images must be (count, 3, 32, 32), got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {l} outside [0, 10)")));
        }
        if images.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel value".into()));
        }
        Ok(Self {
            images,
            labels,
            provenance,
        })
    }

    /// Parses concatenated binary records.
    pub fn from_records(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
            return Err(Error::Data(format!(
                "byte length {} is not a positive multiple of {RECORD_BYTES}",
                bytes.len()
            )));
        }
        let count = bytes.len() / RECORD_BYTES;
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * PIXELS_PER_IMAGE);
        for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Data(format!(
                    "record {i} (byte offset {}) has label {}",
                    i * RECORD_BYTES,
                    rec[0]
                )));
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        let images = DenseTensor::new(vec![count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], pixels)?;
        Self::new(images, labels, Provenance::Clean)
    }

    /// Serializes to binary records, re-quantizing pixels by clamped rounding.
    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for (img, &label) in self.images.data().chunks_exact(PIXELS_PER_IMAGE).zip(&self.labels) {
            out.push(label);
            out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &DenseTensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * PIXELS_PER_IMAGE..(i + 1) * PIXELS_PER_IMAGE]
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty selection".into()));
        }
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS_PER_IMAGE);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} out of range for {} examples", self.len())));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let images = DenseTensor::new(vec![indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], pixels)?;
        Ok(Self {
            images,
            labels,
            provenance: self.provenance,
        })
    }

    pub fn concat(parts: &[Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let count: usize = parts.iter().map(Dataset::len).sum();
        let mut pixels = Vec::with_capacity(count * PIXELS_PER_IMAGE);
        let mut labels = Vec::with_capacity(count);
        for p in parts {
            pixels.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let images = DenseTensor::new(vec![count, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], pixels)?;
        Ok(Self {
            images,
            labels,
            provenance: first.provenance,
        })
    }

    /// First `k` examples of every class, keeping the original order.
    pub fn subset_per_class(&self, k: usize) -> Result<Self> {
        let mut taken = [0usize; NUM_CLASSES];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i] as usize;
                if taken[c] < k {
                    taken[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        self.select(&idx)
    }

    /// Batch `indices` as a `(b, 3, 32, 32)` tensor plus labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(DenseTensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS_PER_IMAGE);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f32(v).expect("finite pixel")));
        }
        let x = DenseTensor::new(vec![indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i] as usize).collect()))
    }
}

/// Adds one fixed draw of `N(0, dev²)` to every pixel. Values are not clipped.
pub fn add_awgn(d: &Dataset, dev: f64, seed: u64) -> Result<Dataset> {
    if !(dev >= 0.0 && dev.is_finite()) {
        return Err(Error::Data(format!("noise deviation must be finite and >= 0, got {dev}")));
    }
    let provenance = Provenance::Awgn { dev, seed };
    if dev == 0.0 {
        return Ok(Dataset {
            provenance,
            ..d.clone()
        });
    }
    let normal = Normal::new(0.0f64, dev).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = seeded_rng(seed);
    let mut images = d.images.clone();
    for v in images.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
    Ok(Dataset {
        images,
        labels: d.labels.clone(),
        provenance,
    })
}

/// Shuffled partition of `[0, d.len())` into batches of `batch_size`; the
/// last batch may be short.
pub fn batches(d: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let order = Permutation::from_seed(d.len(), epoch_seed)?;
    Ok(order.forward().chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn read_batch_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Dataset::from_records(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_batch_file(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, d.to_records()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Directory holding the batch files: `dir` itself, or its
/// `cifar-10-batches-bin` child as unpacked from the official archive.
pub fn resolve_data_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// The five training files in order, each as its own dataset.
pub fn load_train_parts(dir: &Path) -> Result<Vec<Dataset>> {
    let dir = resolve_data_dir(dir);
    TRAIN_FILES.iter().map(|f| read_batch_file(&dir.join(f))).collect()
}

/// `(train, test)` from a directory in the standard binary layout.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = Dataset::concat(&load_train_parts(dir)?)?;
    let test = read_batch_file(&resolve_data_dir(dir).join(TEST_FILE))?;
    Ok((train, test))
}
