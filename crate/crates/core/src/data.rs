//! Dataset loading: synthetic toy distributions plus cached MNIST / CIFAR-10
//! subsets read from an on-disk archive directory.
//!
//! Every loader is a pure function of its [`DatasetSpec`]: the spec carries
//! its own seed, splits are drawn with a generator derived from that seed
//! alone, and the result is bit-identical across runs and machines. Image
//! subsets are selected class-stratified so every split contains every
//! class, which the analysis stage relies on.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AtfsError, Result};
use crate::nn::Shape;

/// Environment variable pointing at the dataset cache directory.
pub const DATA_DIR_ENV: &str = "ATFS_DATA_DIR";

/// Resolves the dataset cache directory (`$ATFS_DATA_DIR`, default `./data`).
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn default_seed() -> u64 {
    7
}

fn default_gaussian_classes() -> usize {
    3
}

fn default_synth_train() -> usize {
    512
}

fn default_synth_val() -> usize {
    128
}

fn default_synth_test() -> usize {
    256
}

fn default_image_train() -> usize {
    2000
}

fn default_image_val() -> usize {
    500
}

fn default_image_test() -> usize {
    1000
}

/// Which data to load and how to split it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `C` isotropic Gaussian blobs with means on a circle inside the unit
    /// square. Two-dimensional inputs.
    SyntheticGaussians {
        #[serde(default = "default_gaussian_classes")]
        num_classes: usize,
        #[serde(default = "default_synth_train")]
        train_size: usize,
        #[serde(default = "default_synth_val")]
        val_size: usize,
        #[serde(default = "default_synth_test")]
        test_size: usize,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    /// Two interleaving half-moons mapped into the unit square.
    SyntheticMoons {
        #[serde(default = "default_synth_train")]
        train_size: usize,
        #[serde(default = "default_synth_val")]
        val_size: usize,
        #[serde(default = "default_synth_test")]
        test_size: usize,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    /// Stratified subset of the cached MNIST archive (IDX gzip files).
    MnistSubset {
        #[serde(default = "default_image_train")]
        train_size: usize,
        #[serde(default = "default_image_val")]
        val_size: usize,
        #[serde(default = "default_image_test")]
        test_size: usize,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    /// Stratified subset of the cached CIFAR-10 binary archive.
    Cifar10Subset {
        #[serde(default = "default_image_train")]
        train_size: usize,
        #[serde(default = "default_image_val")]
        val_size: usize,
        #[serde(default = "default_image_test")]
        test_size: usize,
        #[serde(default = "default_seed")]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticGaussians { num_classes, .. } => *num_classes,
            DatasetSpec::SyntheticMoons { .. } => 2,
            DatasetSpec::MnistSubset { .. } | DatasetSpec::Cifar10Subset { .. } => 10,
        }
    }

    pub fn input_shape(&self) -> Shape {
        match self {
            DatasetSpec::SyntheticGaussians { .. } | DatasetSpec::SyntheticMoons { .. } => {
                (1, 1, 2)
            }
            DatasetSpec::MnistSubset { .. } => (1, 28, 28),
            DatasetSpec::Cifar10Subset { .. } => (3, 32, 32),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        match *self {
            DatasetSpec::SyntheticGaussians {
                train_size,
                val_size,
                test_size,
                ..
            }
            | DatasetSpec::SyntheticMoons {
                train_size,
                val_size,
                test_size,
                ..
            }
            | DatasetSpec::MnistSubset {
                train_size,
                val_size,
                test_size,
                ..
            }
            | DatasetSpec::Cifar10Subset {
                train_size,
                val_size,
                test_size,
                ..
            } => (train_size, val_size, test_size),
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            DatasetSpec::SyntheticGaussians { seed, .. }
            | DatasetSpec::SyntheticMoons { seed, .. }
            | DatasetSpec::MnistSubset { seed, .. }
            | DatasetSpec::Cifar10Subset { seed, .. } => seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if c < 2 {
            return Err(AtfsError::InvalidArgument(format!(
                "dataset needs at least 2 classes, got {c}"
            )));
        }
        let (train, val, test) = self.sizes();
        for (name, size) in [("train", train), ("val", val), ("test", test)] {
            if size < c {
                return Err(AtfsError::InvalidArgument(format!(
                    "{name} split of {size} samples cannot cover all {c} classes"
                )));
            }
        }
        Ok(())
    }
}

/// One split: flattened rows in `[0, 1]` plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub input_shape: Shape,
    pub num_classes: usize,
    /// Index of each row in the source archive (identity for synthetic data).
    pub source_indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class sample counts.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Copies the given rows into a new `(len, dim)` batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let dim = self.x.ncols();
        let mut x = Array2::zeros((indices.len(), dim));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            x.row_mut(row).assign(&self.x.row(i));
            labels.push(self.labels[i]);
        }
        (x, labels)
    }
}

/// Train/validation/test triple from one spec.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads and splits the configured dataset. Deterministic in the spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<DataBundle> {
    spec.validate()?;
    let bundle = match spec {
        DatasetSpec::SyntheticGaussians { num_classes, .. } => {
            synthetic_bundle(spec, |rng, n, offset| gaussians(rng, n, offset, *num_classes))
        }
        DatasetSpec::SyntheticMoons { .. } => synthetic_bundle(spec, moons),
        DatasetSpec::MnistSubset { .. } => image_bundle(spec, load_mnist_archive()?),
        DatasetSpec::Cifar10Subset { .. } => image_bundle(spec, load_cifar10_archive()?),
    }?;
    for (name, split) in [
        ("train", &bundle.train),
        ("val", &bundle.val),
        ("test", &bundle.test),
    ] {
        if split.label_histogram().iter().any(|&n| n == 0) {
            return Err(AtfsError::Dataset(format!(
                "{name} split is missing a class: histogram {:?}",
                split.label_histogram()
            )));
        }
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Synthetic distributions
// ---------------------------------------------------------------------------

fn synthetic_bundle(
    spec: &DatasetSpec,
    sample: impl Fn(&mut ChaCha8Rng, usize, usize) -> (Array2<f64>, Vec<usize>),
) -> Result<DataBundle> {
    let (train_n, val_n, test_n) = spec.sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
    let mut offset = 0;
    let mut make = |n: usize| {
        let (x, labels) = sample(&mut rng, n, offset);
        offset += n;
        Dataset {
            x,
            labels,
            input_shape: spec.input_shape(),
            num_classes: spec.num_classes(),
            source_indices: (offset - n..offset).collect(),
        }
    };
    Ok(DataBundle {
        train: make(train_n),
        val: make(val_n),
        test: make(test_n),
    })
}

/// Gaussian blobs: class `k` is centered on a circle of radius 0.3 around
/// (0.5, 0.5), sigma 0.08, clipped to the unit square. Labels cycle through
/// the classes so every split is balanced by construction.
fn gaussians(
    rng: &mut ChaCha8Rng,
    n: usize,
    offset: usize,
    num_classes: usize,
) -> (Array2<f64>, Vec<usize>) {
    let normal = Normal::new(0.0, 0.08).expect("valid sigma");
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (offset + i) % num_classes;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        x[[i, 0]] = (0.5 + 0.3 * angle.cos() + normal.sample(rng)).clamp(0.0, 1.0);
        x[[i, 1]] = (0.5 + 0.3 * angle.sin() + normal.sample(rng)).clamp(0.0, 1.0);
        labels.push(class);
    }
    (x, labels)
}

/// Two half-moons with Gaussian noise, affinely mapped into the unit square.
fn moons(rng: &mut ChaCha8Rng, n: usize, offset: usize) -> (Array2<f64>, Vec<usize>) {
    let normal = Normal::new(0.0, 0.06).expect("valid sigma");
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (offset + i) % 2;
        let t = std::f64::consts::PI * ((offset + i) / 2 % 977) as f64 / 976.0;
        let (mut u, mut v) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        u += normal.sample(rng);
        v += normal.sample(rng);
        // Source coordinates live in roughly [-1.2, 2.2] x [-0.7, 1.2].
        x[[i, 0]] = ((u + 1.25) / 3.5).clamp(0.0, 1.0);
        x[[i, 1]] = ((v + 1.0) / 2.5).clamp(0.0, 1.0);
        labels.push(class);
    }
    (x, labels)
}

// ---------------------------------------------------------------------------
// Cached image archives
// ---------------------------------------------------------------------------

/// A fully decoded source archive: train then test pools.
struct Archive {
    train_x: Array2<f64>,
    train_labels: Vec<usize>,
    test_x: Array2<f64>,
    test_labels: Vec<usize>,
    input_shape: Shape,
}

/// Stratified subset selection: per-class index pools are shuffled once,
/// then consumed round-robin, so splits are disjoint, near-balanced, and
/// every class appears as long as the split holds at least C samples.
fn stratified_indices(
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let mut depth = 0;
    loop {
        let mut any = false;
        for pool in &pools {
            if let Some(&i) = pool.get(depth) {
                order.push(i);
                any = true;
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    order
}

fn take_split(
    archive_x: &Array2<f64>,
    archive_labels: &[usize],
    order: &mut std::vec::IntoIter<usize>,
    n: usize,
    shape: Shape,
    num_classes: usize,
    split: &str,
) -> Result<Dataset> {
    let indices: Vec<usize> = order.by_ref().take(n).collect();
    if indices.len() < n {
        return Err(AtfsError::Dataset(format!(
            "{split} split wants {n} samples but the source pool is exhausted"
        )));
    }
    let dim = archive_x.ncols();
    let mut x = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (row, &i) in indices.iter().enumerate() {
        x.row_mut(row).assign(&archive_x.row(i));
        labels.push(archive_labels[i]);
    }
    Ok(Dataset {
        x,
        labels,
        input_shape: shape,
        num_classes,
        source_indices: indices,
    })
}

fn image_bundle(spec: &DatasetSpec, archive: Archive) -> Result<DataBundle> {
    let (train_n, val_n, test_n) = spec.sizes();
    let c = spec.num_classes();
    if train_n + val_n > archive.train_labels.len() {
        return Err(AtfsError::Dataset(format!(
            "train + val = {} exceeds the {}-sample source archive",
            train_n + val_n,
            archive.train_labels.len()
        )));
    }
    if test_n > archive.test_labels.len() {
        return Err(AtfsError::Dataset(format!(
            "test = {test_n} exceeds the {}-sample source archive",
            archive.test_labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
    // Train and validation are carved from the same shuffled order, which
    // makes them disjoint by construction.
    let mut train_order =
        stratified_indices(&archive.train_labels, c, &mut rng).into_iter();
    let train = take_split(
        &archive.train_x,
        &archive.train_labels,
        &mut train_order,
        train_n,
        archive.input_shape,
        c,
        "train",
    )?;
    let val = take_split(
        &archive.train_x,
        &archive.train_labels,
        &mut train_order,
        val_n,
        archive.input_shape,
        c,
        "val",
    )?;
    let mut test_order = stratified_indices(&archive.test_labels, c, &mut rng).into_iter();
    let test = take_split(
        &archive.test_x,
        &archive.test_labels,
        &mut test_order,
        test_n,
        archive.input_shape,
        c,
        "test",
    )?;
    Ok(DataBundle { train, val, test })
}

// ---------------------------------------------------------------------------
// MNIST (IDX gzip)
// ---------------------------------------------------------------------------

fn read_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| {
        AtfsError::Dataset(format!(
            "cannot open {} ({e}); place the archive under {} or set {DATA_DIR_ENV}",
            path.display(),
            data_dir().display(),
        ))
    })?;
    let mut buf = Vec::new();
    GzDecoder::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| AtfsError::Dataset(format!("cannot decompress {}: {e}", path.display())))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("bounds checked"))
}

/// Parses an IDX image file (magic 2051): big-endian header, u8 pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Array2<f64>, usize, usize)> {
    if bytes.len() < 16 {
        return Err(AtfsError::Dataset("IDX image file truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != 2051 {
        return Err(AtfsError::Dataset(format!(
            "bad IDX image magic {magic}, expected 2051"
        )));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(AtfsError::Dataset(format!(
            "IDX image payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut x = Array2::zeros((count, rows * cols));
    for i in 0..count {
        let at = 16 + i * rows * cols;
        for (j, &px) in bytes[at..at + rows * cols].iter().enumerate() {
            x[[i, j]] = px as f64 / 255.0;
        }
    }
    Ok((x, rows, cols))
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(AtfsError::Dataset("IDX label file truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != 2049 {
        return Err(AtfsError::Dataset(format!(
            "bad IDX label magic {magic}, expected 2049"
        )));
    }
    let count = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + count {
        return Err(AtfsError::Dataset(format!(
            "IDX label payload is {} bytes, expected {}",
            bytes.len(),
            8 + count
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn load_mnist_archive() -> Result<Archive> {
    let dir = data_dir().join("mnist");
    let (train_x, rows, cols) = parse_idx_images(&read_gz(&dir.join("train-images-idx3-ubyte.gz"))?)?;
    let train_labels = parse_idx_labels(&read_gz(&dir.join("train-labels-idx1-ubyte.gz"))?)?;
    let (test_x, _, _) = parse_idx_images(&read_gz(&dir.join("t10k-images-idx3-ubyte.gz"))?)?;
    let test_labels = parse_idx_labels(&read_gz(&dir.join("t10k-labels-idx1-ubyte.gz"))?)?;
    if train_x.nrows() != train_labels.len() || test_x.nrows() != test_labels.len() {
        return Err(AtfsError::Dataset(
            "MNIST image/label counts disagree".into(),
        ));
    }
    if train_labels.iter().chain(&test_labels).any(|&y| y > 9) {
        return Err(AtfsError::Dataset("MNIST label outside 0..=9".into()));
    }
    Ok(Archive {
        train_x,
        train_labels,
        test_x,
        test_labels,
        input_shape: (1, rows, cols),
    })
}

// ---------------------------------------------------------------------------
// CIFAR-10 (binary batches)
// ---------------------------------------------------------------------------

/// Parses one CIFAR-10 binary batch: 3073-byte records of label + 3072
/// channel-major pixels.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Array2<f64>, Vec<usize>)> {
    const RECORD: usize = 3073;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(AtfsError::Dataset(format!(
            "CIFAR batch is {} bytes, not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / RECORD;
    let mut x = Array2::zeros((count, 3072));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let at = i * RECORD;
        let y = bytes[at] as usize;
        if y > 9 {
            return Err(AtfsError::Dataset(format!(
                "CIFAR label {y} outside 0..=9 in record {i}"
            )));
        }
        labels.push(y);
        for (j, &px) in bytes[at + 1..at + RECORD].iter().enumerate() {
            x[[i, j]] = px as f64 / 255.0;
        }
    }
    Ok((x, labels))
}

fn read_maybe_gz(path_plain: &Path) -> Result<Vec<u8>> {
    let gz = path_plain.with_extension("bin.gz");
    if gz.exists() {
        return read_gz(&gz);
    }
    std::fs::read(path_plain).map_err(|e| {
        AtfsError::Dataset(format!(
            "cannot open {} ({e}); place the CIFAR-10 binary batches under {} or set {DATA_DIR_ENV}",
            path_plain.display(),
            data_dir().display(),
        ))
    })
}

fn load_cifar10_archive() -> Result<Archive> {
    let dir = data_dir().join("cifar-10-batches-bin");
    let mut train_x_parts = Vec::new();
    let mut train_labels = Vec::new();
    for batch in 1..=5 {
        let (x, labels) = parse_cifar_batch(&read_maybe_gz(&dir.join(format!(
            "data_batch_{batch}.bin"
        )))?)?;
        train_x_parts.push(x);
        train_labels.extend(labels);
    }
    let views: Vec<_> = train_x_parts.iter().map(|x| x.view()).collect();
    let train_x = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| AtfsError::Dataset(format!("cannot stack CIFAR batches: {e}")))?;
    let (test_x, test_labels) = parse_cifar_batch(&read_maybe_gz(&dir.join("test_batch.bin"))?)?;
    Ok(Archive {
        train_x,
        train_labels,
        test_x,
        test_labels,
        input_shape: (3, 32, 32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussians_spec() -> DatasetSpec {
        DatasetSpec::SyntheticGaussians {
            num_classes: 2,
            train_size: 200,
            val_size: 50,
            test_size: 50,
            seed: 7,
        }
    }

    #[test]
    fn gaussians_are_deterministic_and_in_range() {
        let a = load_dataset(&gaussians_spec()).unwrap();
        let b = load_dataset(&gaussians_spec()).unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.test.labels, b.test.labels);
        assert!(a.train.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.val.len(), 50);
        assert_eq!(a.test.len(), 50);
    }

    #[test]
    fn gaussians_splits_are_balanced() {
        let b = load_dataset(&gaussians_spec()).unwrap();
        assert_eq!(b.train.label_histogram(), vec![100, 100]);
        assert_eq!(b.val.label_histogram(), vec![25, 25]);
    }

    #[test]
    fn gaussian_blobs_separate_by_class() {
        let b = load_dataset(&gaussians_spec()).unwrap();
        // Class means sit at (0.8, 0.5) and (0.2, 0.5): the x-coordinate
        // alone should separate most samples.
        let mut correct = 0;
        for (i, &y) in b.train.labels.iter().enumerate() {
            let guess = usize::from(b.train.x[[i, 0]] < 0.5);
            correct += usize::from(guess == y);
        }
        assert!(correct > 190, "only {correct}/200 separable");
    }

    #[test]
    fn moons_have_two_classes_in_unit_square() {
        let spec = DatasetSpec::SyntheticMoons {
            train_size: 120,
            val_size: 40,
            test_size: 40,
            seed: 3,
        };
        let b = load_dataset(&spec).unwrap();
        assert!(b.train.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let hist = b.train.label_histogram();
        assert_eq!(hist.len(), 2);
        assert!(hist.iter().all(|&n| n > 0));
    }

    #[test]
    fn rejects_split_smaller_than_class_count() {
        let spec = DatasetSpec::SyntheticGaussians {
            num_classes: 5,
            train_size: 100,
            val_size: 3,
            test_size: 50,
            seed: 1,
        };
        assert!(load_dataset(&spec).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = gaussians_spec();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("synthetic-gaussians"));
        let back: DatasetSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn spec_rejects_unknown_fields() {
        let text = r#"{"name": "synthetic-moons", "sigma": 0.5}"#;
        assert!(serde_json::from_str::<DatasetSpec>(text).is_err());
    }

    #[test]
    fn idx_parser_round_trip() {
        // Fabricate a 2-image 2x2 IDX file.
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        let (x, rows, cols) = parse_idx_images(&img).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(x.nrows(), 2);
        assert!((x[[0, 1]] - 0.2).abs() < 1e-12);
        assert_eq!(x[[1, 1]], 1.0);

        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_parser_rejects_bad_magic_and_truncation() {
        let mut img = Vec::new();
        img.extend_from_slice(&1234u32.to_be_bytes());
        img.extend_from_slice(&[0; 12]);
        assert!(parse_idx_images(&img).is_err());
        assert!(parse_idx_images(&[0; 4]).is_err());
        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&5u32.to_be_bytes());
        lab.push(1); // claims 5 labels, carries 1
        assert!(parse_idx_labels(&lab).is_err());
    }

    #[test]
    fn cifar_parser_reads_records() {
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[0] = 4;
        bytes[1] = 255;
        bytes[3073] = 9;
        let (x, labels) = parse_cifar_batch(&bytes).unwrap();
        assert_eq!(labels, vec![4, 9]);
        assert_eq!(x[[0, 0]], 1.0);
        assert_eq!(x[[1, 0]], 0.0);
        let mut bad = bytes.clone();
        bad[0] = 11;
        assert!(parse_cifar_batch(&bad).is_err());
        assert!(parse_cifar_batch(&bytes[..100]).is_err());
    }

    #[test]
    fn stratified_selection_covers_all_classes() {
        let labels: Vec<usize> = (0..97).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = stratified_indices(&labels, 3, &mut rng);
        assert_eq!(order.len(), 97);
        // Any prefix of length >= 3 covers every class.
        let prefix: std::collections::HashSet<usize> =
            order[..3].iter().map(|&i| labels[i]).collect();
        assert_eq!(prefix.len(), 3);
        // No duplicates anywhere.
        let unique: std::collections::HashSet<usize> = order.iter().copied().collect();
        assert_eq!(unique.len(), 97);
    }
}
