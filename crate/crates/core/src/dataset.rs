//! Bundled synthetic datasets and a loader for the standard CIFAR-10
//! binary batch format. The synthetic sets are generated deterministically
//! from a seed so no experiment ever needs a download.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Tensor4;
use crate::rng::Rng;

/// A labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// New dataset holding the rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (_, c, h, w) = self.images.dims();
        let mut images = Tensor4::zeros(indices.len().max(1), c, h, w);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        images.set(row, ch, y, x, self.images.get(i, ch, y, x));
                    }
                }
            }
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, classes: self.classes }
    }

    /// Deterministic shuffled split into (train, test).
    pub fn split(&self, train_count: usize, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let train_count = train_count.min(self.len());
        (self.subset(&order[..train_count]), self.subset(&order[train_count..]))
    }

    /// Serializes images and labels for content hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, c, h, w) = self.images.dims();
        let mut out = Vec::with_capacity(16 + self.labels.len() + self.images.data().len() * 8);
        for dim in [n, c, h, w, self.classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &label in &self.labels {
            out.push(label as u8);
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Linearly separable two-class set: 4x4 single-channel images whose bright
/// half (left vs right) decides the class. Noise keeps samples distinct.
pub fn separable_two_class(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut images = Tensor4::zeros(n.max(1), 1, 4, 4);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        for y in 0..4 {
            for x in 0..4 {
                let bright = if class == 0 { x < 2 } else { x >= 2 };
                let base = if bright { 1.0 } else { 0.0 };
                images.set(i, 0, y, x, base + 0.1 * rng.uniform());
            }
        }
        labels.push(class);
    }
    Dataset { images, labels, classes: 2 }
}

/// Ten-class synthetic pattern set: each class is a distinct oriented
/// sinusoidal grating at the given size, plus gaussian pixel noise.
pub fn pattern_ten_class(n: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    const FREQS: [(f64, f64); 10] = [
        (1.0, 0.0),
        (0.0, 1.0),
        (1.0, 1.0),
        (2.0, 0.0),
        (0.0, 2.0),
        (2.0, 1.0),
        (1.0, 2.0),
        (2.0, 2.0),
        (3.0, 1.0),
        (1.0, 3.0),
    ];
    let mut rng = Rng::new(seed);
    let mut images = Tensor4::zeros(n.max(1), 1, size, size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let (fx, fy) = FREQS[class];
        let phase = rng.uniform() * std::f64::consts::TAU;
        for y in 0..size {
            for x in 0..size {
                let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / size as f64
                    + phase;
                let v = 0.5 + 0.4 * arg.sin() + noise * rng.normal();
                images.set(i, 0, y, x, v);
            }
        }
        labels.push(class);
    }
    Dataset { images, labels, classes: 10 }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch (records of 1 label byte followed by
/// 3072 channel-major pixel bytes); pixels are scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::MalformedFile {
            context: format!(
                "cifar batch length {} is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Tensor4::zeros(n, 3, 32, 32);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::MalformedFile {
                context: format!("cifar label {label} out of range in record {i}"),
            });
        }
        labels.push(label);
        for (j, &px) in rec[1..].iter().enumerate() {
            let ch = j / (32 * 32);
            let y = (j % (32 * 32)) / 32;
            let x = j % 32;
            images.set(i, ch, y, x, px as f64 / 255.0);
        }
    }
    Ok(Dataset { images, labels, classes: 10 })
}

/// Reads a CIFAR-10 binary batch file.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_cifar10(&bytes)
}
