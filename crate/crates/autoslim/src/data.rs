//! Dataset ingestion: MNIST IDX, CIFAR-10 binary, and a seeded synthetic
//! classification task with the same shapes.
//!
//! The handle owns three disjoint splits. The holdout is drawn from the
//! training set only and serves as the search's accuracy signal; the test
//! split is behind an access-counting method so reporting stages can prove
//! nothing touched it earlier.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::Tensor;

pub const MNIST_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Mnist,
    Cifar10,
    Synthetic,
}

impl std::str::FromStr for DatasetName {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(DataError::UnknownDataset(other.to_string())),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("{file}: cannot read: {source}")]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}: magic number mismatch (got {got:#010x}, expected {expected:#010x})")]
    BadMagic {
        file: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("{file}: truncated (expected {expected} bytes, got {got})")]
    Truncated {
        file: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{file}: record {index} fails validation: {msg}")]
    BadRecord {
        file: PathBuf,
        index: usize,
        msg: String,
    },
    #[error("not enough samples: requested {requested}, available {available}")]
    NotEnough { requested: usize, available: usize },
}

/// One split: images [n, c, h, w] (normalized) plus labels.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy rows into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let sample = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), s[1], s[2], s[3]], data),
            labels,
        )
    }

    /// First `n` samples in fixed order, chunked into batches.
    pub fn head_batches(&self, n: usize, batch: usize) -> Result<Vec<Tensor<f32>>, DataError> {
        if n > self.len() {
            return Err(DataError::NotEnough {
                requested: n,
                available: self.len(),
            });
        }
        let s = self.images.shape();
        let sample = s[1] * s[2] * s[3];
        let mut out = Vec::new();
        let mut done = 0;
        while done < n {
            let take = batch.min(n - done);
            out.push(Tensor::from_vec(
                &[take, s[1], s[2], s[3]],
                self.images.data()[done * sample..(done + take) * sample].to_vec(),
            ));
            done += take;
        }
        Ok(out)
    }
}

/// Sizes and knobs resolved before loading.
#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Samples held out of the training split as the search's validation
    /// signal (5K mirrors the reference protocol at this scale).
    pub holdout: usize,
    /// Cap on training samples after the holdout is removed (0 = all).
    pub train_limit: usize,
    /// Cap on test samples (0 = all).
    pub test_limit: usize,
    /// Synthetic only: generated train size (holdout is carved from it).
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_shape: (usize, usize, usize),
    pub synthetic_classes: usize,
    /// Synthetic only: additive noise level; higher is harder.
    pub synthetic_noise: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            holdout: 5000,
            train_limit: 0,
            test_limit: 0,
            synthetic_train: 12_000,
            synthetic_test: 2_000,
            synthetic_shape: (3, 32, 32),
            synthetic_classes: 10,
            synthetic_noise: 1.0,
        }
    }
}

pub struct DatasetHandle {
    pub name: DatasetName,
    pub seed: u64,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    /// Per-channel (mean, std) computed on the raw training split and
    /// already applied to all three splits.
    pub normalization: (Vec<f64>, Vec<f64>),
    /// Horizontal flip + pad-4 random crop during training.
    pub augment: bool,
    train: Split,
    holdout: Split,
    test: Split,
    test_reads: AtomicU64,
}

impl DatasetHandle {
    pub fn train(&self) -> &Split {
        &self.train
    }

    pub fn holdout(&self) -> &Split {
        &self.holdout
    }

    /// Final-report split; every access is counted so holdout isolation is
    /// checkable.
    pub fn test(&self) -> &Split {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn test_reads(&self) -> u64 {
        self.test_reads.load(Ordering::Relaxed)
    }

    /// Calibration stream for BN recalibration: the first `n` training
    /// samples in fixed order.
    pub fn calibration_batches(
        &self,
        n: usize,
        batch: usize,
    ) -> Result<Vec<Tensor<f32>>, DataError> {
        self.train.head_batches(n, batch)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io {
        file: path.to_path_buf(),
        source: e,
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode an IDX image file (big-endian dims, magic 0x00000803).
pub fn decode_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let bytes = read_file(path)?;
    if bytes.len() < 16 {
        return Err(DataError::Truncated {
            file: path.to_path_buf(),
            expected: 16,
            got: bytes.len(),
        });
    }
    let magic = be_u32(&bytes, 0);
    if magic != MNIST_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: path.to_path_buf(),
            got: magic,
            expected: MNIST_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4) as usize;
    let rows = be_u32(&bytes, 8) as usize;
    let cols = be_u32(&bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            file: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Decode an IDX label file (magic 0x00000801).
pub fn decode_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 {
        return Err(DataError::Truncated {
            file: path.to_path_buf(),
            expected: 8,
            got: bytes.len(),
        });
    }
    let magic = be_u32(&bytes, 0);
    if magic != MNIST_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: path.to_path_buf(),
            got: magic,
            expected: MNIST_LABELS_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            file: path.to_path_buf(),
            expected,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Decode one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel
/// bytes (1024 R, 1024 G, 1024 B).
pub fn decode_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Truncated {
            file: path.to_path_buf(),
            expected: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
            got: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        if rec[0] > 9 {
            return Err(DataError::BadRecord {
                file: path.to_path_buf(),
                index: i,
                msg: format!("label {} out of range", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn u8_to_f32(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}

/// Per-channel mean/std over [n, c, h, w]; std floored away from zero.
fn channel_stats(images: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    let m = (n * hw) as f64;
    for i in 0..n {
        for ch in 0..c {
            for &v in &images.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                mean[ch] += v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for i in 0..n {
        for ch in 0..c {
            for &v in &images.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                let d = v as f64 - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    let std = var.iter().map(|v| (v / m).sqrt().max(1e-6)).collect();
    (mean, std)
}

fn normalize(images: &mut Tensor<f32>, mean: &[f64], std: &[f64]) {
    let s = images.shape().to_vec();
    let (c, hw) = (s[1], s[2] * s[3]);
    for i in 0..s[0] {
        for ch in 0..c {
            let (m, sd) = (mean[ch] as f32, std[ch] as f32);
            for v in &mut images.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// Deterministic holdout selection: a seeded shuffle of training indices.
fn split_indices(n: usize, holdout: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let hold = idx[..holdout].to_vec();
    let train = idx[holdout..].to_vec();
    (train, hold)
}

#[allow(clippy::too_many_arguments)]
fn build_handle(
    name: DatasetName,
    seed: u64,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    augment: bool,
    raw_train: (Tensor<f32>, Vec<usize>),
    raw_test: (Tensor<f32>, Vec<usize>),
    opts: &DatasetOptions,
) -> Result<DatasetHandle, DataError> {
    let (train_images, train_labels) = raw_train;
    let n = train_labels.len();
    if opts.holdout >= n {
        return Err(DataError::NotEnough {
            requested: opts.holdout + 1,
            available: n,
        });
    }
    let (mut train_idx, hold_idx) = split_indices(n, opts.holdout, seed);
    if opts.train_limit > 0 && opts.train_limit < train_idx.len() {
        train_idx.truncate(opts.train_limit);
    }
    let full = Split {
        images: train_images,
        labels: train_labels,
    };
    let (ti, tl) = full.gather(&train_idx);
    let (hi, hl) = full.gather(&hold_idx);
    let mut train = Split {
        images: ti,
        labels: tl,
    };
    let mut holdout = Split {
        images: hi,
        labels: hl,
    };
    let (mut test_images, mut test_labels) = raw_test;
    if opts.test_limit > 0 && opts.test_limit < test_labels.len() {
        let s = test_images.shape();
        let sample = s[1] * s[2] * s[3];
        test_labels.truncate(opts.test_limit);
        test_images = Tensor::from_vec(
            &[opts.test_limit, s[1], s[2], s[3]],
            test_images.data()[..opts.test_limit * sample].to_vec(),
        );
    }
    let mut test = Split {
        images: test_images,
        labels: test_labels,
    };

    let (mean, std) = channel_stats(&train.images);
    normalize(&mut train.images, &mean, &std);
    normalize(&mut holdout.images, &mean, &std);
    normalize(&mut test.images, &mean, &std);

    Ok(DatasetHandle {
        name,
        seed,
        num_classes,
        input_shape,
        normalization: (mean, std),
        augment,
        train,
        holdout,
        test,
        test_reads: AtomicU64::new(0),
    })
}

fn load_mnist(root: &Path, seed: u64, opts: &DatasetOptions) -> Result<DatasetHandle, DataError> {
    let (n, r, c, pix) = decode_idx_images(&root.join("train-images-idx3-ubyte"))?;
    let labels = decode_idx_labels(&root.join("train-labels-idx1-ubyte"))?;
    let (tn, tr, tc, tpix) = decode_idx_images(&root.join("t10k-images-idx3-ubyte"))?;
    let tlabels = decode_idx_labels(&root.join("t10k-labels-idx1-ubyte"))?;
    let train = (
        Tensor::from_vec(&[n, 1, r, c], u8_to_f32(&pix)),
        labels.iter().map(|&l| l as usize).collect(),
    );
    let test = (
        Tensor::from_vec(&[tn, 1, tr, tc], u8_to_f32(&tpix)),
        tlabels.iter().map(|&l| l as usize).collect(),
    );
    build_handle(DatasetName::Mnist, seed, (1, r, c), 10, false, train, test, opts)
}

fn load_cifar10(root: &Path, seed: u64, opts: &DatasetOptions) -> Result<DatasetHandle, DataError> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for i in 1..=5 {
        let (l, p) = decode_cifar_batch(&root.join(format!("data_batch_{i}.bin")))?;
        labels.extend(l);
        pixels.extend(p);
    }
    let (tl, tp) = decode_cifar_batch(&root.join("test_batch.bin"))?;
    let n = labels.len();
    let train = (
        Tensor::from_vec(&[n, 3, 32, 32], u8_to_f32(&pixels)),
        labels.iter().map(|&l| l as usize).collect(),
    );
    let test = (
        Tensor::from_vec(&[tl.len(), 3, 32, 32], u8_to_f32(&tp)),
        tl.iter().map(|&l| l as usize).collect(),
    );
    build_handle(DatasetName::Cifar10, seed, (3, 32, 32), 10, true, train, test, opts)
}

/// Smooth per-class templates plus translation, amplitude jitter and pixel
/// noise. Hard enough that narrow networks trail wide ones at desk scale.
fn synth_images(
    shape: (usize, usize, usize),
    classes: usize,
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
    templates: &[Vec<f32>],
) -> (Tensor<f32>, Vec<usize>) {
    let (c, h, w) = shape;
    let sample = c * h * w;
    let mut data = vec![0f32; n * sample];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.gen_range(0..classes);
        labels.push(y);
        let dx = rng.gen_range(-3isize..=3);
        let dy = rng.gen_range(-3isize..=3);
        let amp = rng.gen_range(0.8f32..1.2);
        let t = &templates[y];
        let out = &mut data[i * sample..(i + 1) * sample];
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let sy = yy as isize + dy;
                    let sx = xx as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        t[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    out[ch * h * w + yy * w + xx] =
                        amp * v + (noise as f32) * rng.gen_range(-1.0f32..1.0);
                }
            }
        }
    }
    (Tensor::from_vec(&[n, c, h, w], data), labels)
}

fn smooth_templates(
    shape: (usize, usize, usize),
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    let (c, h, w) = shape;
    let (gh, gw) = (7usize, 7usize);
    (0..classes)
        .map(|_| {
            let grid: Vec<f32> = (0..c * gh * gw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mut t = vec![0f32; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        // Bilinear upsample of the coarse grid.
                        let fy = y as f32 / (h - 1).max(1) as f32 * (gh - 1) as f32;
                        let fx = x as f32 / (w - 1).max(1) as f32 * (gw - 1) as f32;
                        let (y0, x0) = (fy as usize, fx as usize);
                        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
                        let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
                        let g = |yy: usize, xx: usize| grid[ch * gh * gw + yy * gw + xx];
                        t[ch * h * w + y * w + x] = (1.0 - wy) * (1.0 - wx) * g(y0, x0)
                            + (1.0 - wy) * wx * g(y0, x1)
                            + wy * (1.0 - wx) * g(y1, x0)
                            + wy * wx * g(y1, x1);
                    }
                }
            }
            t
        })
        .collect()
}

fn load_synthetic(seed: u64, opts: &DatasetOptions) -> Result<DatasetHandle, DataError> {
    let shape = opts.synthetic_shape;
    let classes = opts.synthetic_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let templates = smooth_templates(shape, classes, &mut rng);
    let train = synth_images(
        shape,
        classes,
        opts.synthetic_train,
        opts.synthetic_noise,
        &mut rng,
        &templates,
    );
    let test = synth_images(
        shape,
        classes,
        opts.synthetic_test,
        opts.synthetic_noise,
        &mut rng,
        &templates,
    );
    build_handle(
        DatasetName::Synthetic,
        seed,
        shape,
        classes,
        false,
        train,
        test,
        opts,
    )
}

/// Load and split a dataset. When `root` does not contain the files,
/// `AUTOSLIM_DATA` is probed as a fallback root.
pub fn load_dataset(
    name: DatasetName,
    root: &Path,
    seed: u64,
    opts: &DatasetOptions,
) -> Result<DatasetHandle, DataError> {
    match name {
        DatasetName::Mnist => load_mnist(&resolve_root(root, "train-images-idx3-ubyte"), seed, opts),
        DatasetName::Cifar10 => load_cifar10(&resolve_root(root, "data_batch_1.bin"), seed, opts),
        DatasetName::Synthetic => load_synthetic(seed, opts),
    }
}

fn resolve_root(root: &Path, probe: &str) -> PathBuf {
    if root.join(probe).exists() {
        return root.to_path_buf();
    }
    if let Ok(env_root) = std::env::var("AUTOSLIM_DATA") {
        let p = PathBuf::from(env_root);
        if p.join(probe).exists() {
            return p;
        }
    }
    root.to_path_buf()
}

/// Pad-4 random crop plus horizontal flip, applied in place.
pub fn augment_batch(batch: &mut Tensor<f32>, rng: &mut ChaCha8Rng) {
    let s = batch.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = 4usize;
    let mut scratch = vec![0f32; c * h * w];
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        let img = &mut batch.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        scratch.copy_from_slice(img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    img[ch * h * w + y * w + x] =
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            scratch[ch * h * w + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, magic: u32, n: usize, r: usize, c: usize) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(r as u32).to_be_bytes()).unwrap();
        f.write_all(&(c as u32).to_be_bytes()).unwrap();
        let data: Vec<u8> = (0..n * r * c).map(|i| (i % 251) as u8).collect();
        f.write_all(&data).unwrap();
    }

    fn write_idx_labels(path: &Path, n: usize) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&MNIST_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        let data: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        f.write_all(&data).unwrap();
    }

    fn write_cifar_batch(path: &Path, n: usize) {
        let mut f = fs::File::create(path).unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD];
        for i in 0..n {
            rec[0] = (i % 10) as u8;
            for (j, b) in rec[1..].iter_mut().enumerate() {
                *b = ((i * 31 + j) % 255) as u8;
            }
            f.write_all(&rec).unwrap();
        }
    }

    #[test]
    fn cifar_batch_decodes_to_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        write_cifar_batch(&p, 100);
        let (labels, pixels) = decode_cifar_batch(&p).unwrap();
        assert_eq!(labels.len(), 100);
        assert_eq!(pixels.len(), 100 * 3072);
        assert!(labels.iter().all(|&l| l <= 9));
    }

    #[test]
    fn label_magic_as_images_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        write_idx_images(&p, MNIST_LABELS_MAGIC, 4, 28, 28);
        match decode_idx_images(&p) {
            Err(DataError::BadMagic { got, expected, .. }) => {
                assert_eq!(got, MNIST_LABELS_MAGIC);
                assert_eq!(expected, MNIST_IMAGES_MAGIC);
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_idx_is_rejected_with_filename() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train-images-idx3-ubyte");
        write_idx_images(&p, MNIST_IMAGES_MAGIC, 4, 28, 28);
        let full = fs::read(&p).unwrap();
        fs::write(&p, &full[..full.len() - 5]).unwrap();
        match decode_idx_images(&p) {
            Err(DataError::Truncated { file, .. }) => {
                assert!(file.ends_with("train-images-idx3-ubyte"))
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 11;
        fs::write(&p, &rec).unwrap();
        assert!(matches!(
            decode_cifar_batch(&p),
            Err(DataError::BadRecord { index: 0, .. })
        ));
    }

    #[test]
    fn mnist_loads_and_splits_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(
            &dir.path().join("train-images-idx3-ubyte"),
            MNIST_IMAGES_MAGIC,
            200,
            28,
            28,
        );
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), 200);
        write_idx_images(
            &dir.path().join("t10k-images-idx3-ubyte"),
            MNIST_IMAGES_MAGIC,
            50,
            28,
            28,
        );
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), 50);
        let opts = DatasetOptions {
            holdout: 40,
            ..DatasetOptions::default()
        };
        let a = load_dataset(DatasetName::Mnist, dir.path(), 7, &opts).unwrap();
        let b = load_dataset(DatasetName::Mnist, dir.path(), 7, &opts).unwrap();
        assert_eq!(a.train().len(), 160);
        assert_eq!(a.holdout().len(), 40);
        assert_eq!(a.test().len(), 50);
        assert_eq!(a.holdout().labels, b.holdout().labels);
        assert_eq!(a.train().images.data(), b.train().images.data());
        // Different seed, different holdout.
        let c = load_dataset(DatasetName::Mnist, dir.path(), 8, &opts).unwrap();
        assert_ne!(a.holdout().labels, c.holdout().labels);
    }

    #[test]
    fn synthetic_is_deterministic_and_normalized() {
        let opts = DatasetOptions {
            holdout: 100,
            synthetic_train: 600,
            synthetic_test: 100,
            synthetic_shape: (1, 16, 16),
            ..DatasetOptions::default()
        };
        let a = load_dataset(DatasetName::Synthetic, Path::new("."), 3, &opts).unwrap();
        let b = load_dataset(DatasetName::Synthetic, Path::new("."), 3, &opts).unwrap();
        assert_eq!(a.train().images.data(), b.train().images.data());
        assert_eq!(a.train().len(), 500);
        // Normalized: per-channel mean near 0, std near 1 on the train split.
        let (mean, std) = channel_stats(&a.train().images);
        assert!(mean[0].abs() < 1e-4);
        assert!((std[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn test_split_access_is_counted() {
        let opts = DatasetOptions {
            holdout: 50,
            synthetic_train: 300,
            synthetic_test: 60,
            synthetic_shape: (1, 8, 8),
            ..DatasetOptions::default()
        };
        let h = load_dataset(DatasetName::Synthetic, Path::new("."), 3, &opts).unwrap();
        assert_eq!(h.test_reads(), 0);
        let _ = h.test();
        let _ = h.test();
        assert_eq!(h.test_reads(), 2);
    }
}
