//! MNIST in the IDX format.
//!
//! An IDX file is a 4-byte big-endian magic (`0x00000803` for unsigned-byte
//! images with 3 dims, `0x00000801` for unsigned-byte labels with 1 dim),
//! one 4-byte big-endian extent per dimension, then the raw bytes in
//! row-major order. Files must already be decompressed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};
use crate::rng::epoch_permutation;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum MnistError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("unsupported IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("IDX header truncated: need {expected} bytes, have {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("IDX payload size mismatch: expected {expected} bytes, got {actual}")]
    Payload { expected: usize, actual: usize },
    #[error("format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    pub fn header_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Validate an IDX buffer and return its header and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(IdxHeader, &[u8]), MnistError> {
    if bytes.len() < 4 {
        return Err(MnistError::TruncatedHeader { expected: 4, actual: bytes.len() });
    }
    let magic = be_u32(bytes, 0);
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(MnistError::BadMagic(other)),
    };
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(MnistError::TruncatedHeader { expected: header_len, actual: bytes.len() });
    }
    let dims: Vec<u32> = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i)).collect();
    let header = IdxHeader { magic, dims };
    let payload = &bytes[header_len..];
    if payload.len() != header.payload_len() {
        return Err(MnistError::Payload {
            expected: header.payload_len(),
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

/// Labelled 28x28 images, stored as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>, MnistError> {
    fs::read(path).map_err(|source| MnistError::Io { path: path.to_path_buf(), source })
}

impl Dataset {
    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self, MnistError> {
        let (ih, ipay) = parse_idx(image_bytes)?;
        if ih.magic != IMAGES_MAGIC {
            return Err(MnistError::Format(format!("expected an image file, got magic 0x{:08x}", ih.magic)));
        }
        let (lh, lpay) = parse_idx(label_bytes)?;
        if lh.magic != LABELS_MAGIC {
            return Err(MnistError::Format(format!("expected a label file, got magic 0x{:08x}", lh.magic)));
        }
        if ih.dims[0] != lh.dims[0] {
            return Err(MnistError::Format(format!(
                "{} images but {} labels",
                ih.dims[0], lh.dims[0]
            )));
        }
        if let Some(bad) = lpay.iter().find(|&&l| l > 9) {
            return Err(MnistError::Format(format!("label {bad} outside 0..=9")));
        }
        Ok(Dataset {
            rows: ih.dims[1] as usize,
            cols: ih.dims[2] as usize,
            images: ipay.to_vec(),
            labels: lpay.to_vec(),
        })
    }

    pub fn from_raw(rows: usize, cols: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self, MnistError> {
        if images.len() != rows * cols * labels.len() {
            return Err(MnistError::Format("image bytes do not match label count".into()));
        }
        Ok(Dataset { rows, cols, images, labels })
    }

    /// Encode as an (images, labels) pair of IDX files.
    pub fn to_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.len() as u32;
        let mut images = IdxHeader { magic: IMAGES_MAGIC, dims: vec![n, self.rows as u32, self.cols as u32] }.to_bytes();
        images.extend_from_slice(&self.images);
        let mut labels = IdxHeader { magic: LABELS_MAGIC, dims: vec![n] }.to_bytes();
        labels.extend_from_slice(&self.labels);
        (images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Image `i` as input powers `[rows, cols, 1]` in µW.
    pub fn tensor<S: Scalar>(&self, i: usize) -> Tensor<S> {
        Tensor::new(vec![self.rows, self.cols, 1], normalize(self.image(i)))
            .expect("image extent matches")
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let px = self.rows * self.cols;
        Dataset {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..n * px].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Images and labels for a list of indices.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> (Vec<Tensor<S>>, Vec<usize>) {
        indices.iter().map(|&i| (self.tensor(i), self.label(i))).unzip()
    }
}

/// Pixel byte to RF power: `v / 255` µW.
pub fn normalize<S: Scalar>(pixels: &[u8]) -> Vec<S> {
    let scale = S::from_f64_lossy(255.0);
    pixels.iter().map(|&p| S::from_f64_lossy(p as f64) / scale).collect()
}

/// Load an image/label file pair.
pub fn load_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset, MnistError> {
    Dataset::from_idx(&read(images_path)?, &read(labels_path)?)
}

/// Paths of the canonical training and test files inside `dir`.
pub fn canonical_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, MnistError> {
    let (i, l) = canonical_paths(dir, split);
    load_dataset(&i, &l)
}

/// Write `data` under the canonical file names for `split`.
pub fn save_split(dir: &Path, split: Split, data: &Dataset) -> Result<(), MnistError> {
    let (ip, lp) = canonical_paths(dir, split);
    let (ib, lb) = data.to_idx();
    for (path, bytes) in [(ip, ib), (lp, lb)] {
        fs::write(&path, bytes).map_err(|source| MnistError::Io { path, source })?;
    }
    Ok(())
}

/// Shuffled index batches for one epoch. The final batch may be short.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    perm: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIterator {
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        BatchIterator {
            perm: epoch_permutation(n, seed, epoch),
            batch_size,
            pos: 0,
        }
    }

    /// Skip the first `n` batches (resuming mid-epoch).
    pub fn skip_batches(mut self, n: usize) -> Self {
        self.pos = (n * self.batch_size).min(self.perm.len());
        self
    }

    pub fn num_batches(&self) -> usize {
        self.perm.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.perm.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.perm.len());
        let b = self.perm[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> BatchIterator {
    BatchIterator::new(n, batch_size, seed, epoch)
}
