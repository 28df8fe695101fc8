//! MNIST IDX ingestion and synthetic classification data.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::named_rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "HEMP_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{what}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { what: &'static str, expected: u32, found: u32 },

    #[error("{what}: truncated, need {needed} bytes but have {have}")]
    Truncated { what: &'static str, needed: usize, have: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset file not found: {0}")]
    Missing(PathBuf),

    #[error("invalid dataset request: {0}")]
    Invalid(String),

    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Samples stored row-major as `count × dim` reals. Image data also keeps
/// its geometry (`rows × cols = dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New dataset made of the given sample indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            features,
            dim: self.dim,
            rows: self.rows,
            cols: self.cols,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            what,
            needed: at + 4,
            have: bytes.len(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    const WHAT: &str = "images";
    let magic = read_u32(bytes, 0, WHAT)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: WHAT,
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, WHAT)? as usize;
    let rows = read_u32(bytes, 8, WHAT)? as usize;
    let cols = read_u32(bytes, 12, WHAT)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            what: WHAT,
            needed,
            have: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..needed].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    const WHAT: &str = "labels";
    let magic = read_u32(bytes, 0, WHAT)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: WHAT,
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4, WHAT)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            what: WHAT,
            needed,
            have: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Builds a dataset from parsed IDX buffers; pixels map to `byte / 255`.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Ok(Dataset {
        features: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        dim: rows * cols,
        rows,
        cols,
        labels,
        classes,
    })
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    for p in [images_path, labels_path] {
        if !p.exists() {
            return Err(DataError::Missing(p.to_path_buf()));
        }
    }
    dataset_from_idx(&read_maybe_gz(images_path)?, &read_maybe_gz(labels_path)?)
}

/// Serializes the dataset back to IDX image and label buffers. Features
/// must be pixel intensities in `[0, 1]`.
pub fn to_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + ds.features.len());
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), ds.rows, ds.cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.features.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    (images, labels)
}

/// Resolves the dataset root: `HEMP_DATA_DIR` or the given fallback.
pub fn data_dir(fallback: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    [stem.to_string(), format!("{stem}.gz")]
        .iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
        .ok_or_else(|| DataError::Missing(dir.join(stem)))
}

/// Loads the standard train/test file pair from `root/mnist` (or `root`
/// itself when the files live there directly).
pub fn load_mnist(root: &Path) -> Result<Splits, DataError> {
    let dir = if root.join("mnist").is_dir() { root.join("mnist") } else { root.to_path_buf() };
    let train = load_idx(
        &find_file(&dir, "train-images-idx3-ubyte")?,
        &find_file(&dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &find_file(&dir, "t10k-images-idx3-ubyte")?,
        &find_file(&dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok(Splits { train, test })
}

/// Seeded, class-stratified subset of `n` samples. Classes get
/// `n / classes` each, the remainder going to the lowest class ids.
pub fn stratified_subsample(ds: &Dataset, n: usize, seed: u64, stream: &str) -> Result<Dataset, DataError> {
    if n > ds.len() {
        return Err(DataError::Invalid(format!("requested {n} samples from {}", ds.len())));
    }
    let mut rng = named_rng(seed, stream);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &c) in ds.labels.iter().enumerate() {
        by_class[c as usize].push(i);
    }
    let present: Vec<usize> = (0..ds.classes).filter(|&c| !by_class[c].is_empty()).collect();
    let mut quota = vec![0usize; ds.classes];
    let mut left = n;
    // round-robin so small classes are exhausted gracefully
    while left > 0 {
        let mut progressed = false;
        for &c in &present {
            if left > 0 && quota[c] < by_class[c].len() {
                quota[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let mut picked = Vec::with_capacity(n);
    for c in present {
        let members = &mut by_class[c];
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    picked.shuffle(&mut rng);
    Ok(ds.select(&picked))
}

/// Stratified `train_n` / `test_n` subsets of the MNIST files under `root`.
pub fn mnist_subset(root: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<Splits, DataError> {
    let full = load_mnist(root)?;
    Ok(Splits {
        train: stratified_subsample(&full.train, train_n, seed, "train-subset")?,
        test: stratified_subsample(&full.test, test_n, seed, "test-subset")?,
    })
}

/// Class-centered Gaussian clusters. Centers sit on distinct coordinate
/// axes at radius `2·√2`, so any two are 4 apart (random directions of the
/// same radius when `classes > dim`).
pub fn synth_gaussian_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    blobs(classes, per_class, dim, spread, seed, "synth-samples")
}

/// Train/test blob splits sharing centers, with independent noise.
pub fn synth_splits(classes: usize, train_per_class: usize, test_per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Splits, DataError> {
    Ok(Splits {
        train: blobs(classes, train_per_class, dim, spread, seed, "synth-train")?,
        test: blobs(classes, test_per_class, dim, spread, seed, "synth-test")?,
    })
}

fn blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64, stream: &str) -> Result<Dataset, DataError> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(DataError::Invalid("classes, per_class and dim must be positive".into()));
    }
    if classes > 256 {
        return Err(DataError::Invalid("at most 256 classes".into()));
    }
    if !(spread > 0.0) {
        return Err(DataError::Invalid("spread must be positive".into()));
    }
    let radius = 2.0 * 2f64.sqrt();
    let mut center_rng = named_rng(seed, "synth-centers");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                let mut v = vec![0.0; dim];
                v[c] = radius;
                v
            } else {
                let v: Vec<f64> = (0..dim).map(|_| center_rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let mut rng = named_rng(seed, stream);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            features.extend(center.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c as u8);
        }
    }
    Ok(Dataset {
        features,
        dim,
        rows: 1,
        cols: dim,
        labels,
        classes,
    })
}
