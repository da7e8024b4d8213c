//! Data loading, partitioning, and synthesis.
//!
//! The pipeline keeps three stages separate so that full image corpora are
//! never duplicated in memory:
//!
//! 1. a [`SamplePool`] holds the raw corpus once (image bytes stay bytes
//!    until extraction) with train and test files merged into one pool;
//! 2. [`plan_label_skew`] draws index-level shard plans — each client gets
//!    a random subset of labels and, per label, a without-replacement draw
//!    from that label's pool, split into a train prefix and a test suffix
//!    so the two are disjoint within every client;
//! 3. [`materialize`] gathers one plan into a [`ClientShard`] of dense
//!    `f64` features.
//!
//! [`Dataset`] counts every row handed out through [`Dataset::gather`],
//! which lets tests assert that code paths which must not touch data (the
//! shadow update, aggregation) really read nothing.

use crate::error::{BpfedError, Result};
use crate::mat::Mat;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

/// A dense labeled dataset with an access counter.
#[derive(Debug)]
pub struct Dataset {
    x: Mat,
    y: Vec<usize>,
    class_count: usize,
    reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.y.clone(),
            class_count: self.class_count,
            reads: AtomicU64::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

impl Dataset {
    pub fn new(x: Mat, y: Vec<usize>, class_count: usize) -> Result<Dataset> {
        if x.rows() != y.len() {
            return Err(BpfedError::LengthMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if class_count == 0 {
            return Err(BpfedError::InvalidArgument(
                "class count must be at least 1".into(),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= class_count) {
            return Err(BpfedError::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            x,
            y,
            class_count,
            reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    /// Copy the given rows into a batch. Indices must be in range; every
    /// call adds to the read counter.
    pub fn gather(&self, idx: &[usize]) -> (Mat, Vec<usize>) {
        self.reads.fetch_add(idx.len() as u64, Ordering::Relaxed);
        let mut x = Mat::zeros(idx.len(), self.x.cols());
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
            y.push(self.y[i]);
        }
        (x, y)
    }

    /// Gather the whole dataset in order.
    pub fn gather_all(&self) -> (Mat, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }

    /// Total rows handed out so far.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

/// Feature storage for a raw corpus: image bytes (converted on extraction
/// by a fixed scale) or already-dense floats.
enum PoolStorage {
    Bytes { data: Vec<u8>, scale: f64 },
    Floats(Vec<f64>),
}

/// One corpus held once in memory, with per-sample labels.
pub struct SamplePool {
    storage: PoolStorage,
    features: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl SamplePool {
    pub fn from_bytes(
        data: Vec<u8>,
        features: usize,
        labels: Vec<usize>,
        class_count: usize,
        scale: f64,
    ) -> Result<SamplePool> {
        if features == 0 || data.len() != features * labels.len() {
            return Err(BpfedError::LengthMismatch {
                expected: features * labels.len(),
                got: data.len(),
            });
        }
        check_labels(&labels, class_count)?;
        Ok(SamplePool {
            storage: PoolStorage::Bytes { data, scale },
            features,
            labels,
            class_count,
        })
    }

    pub fn from_floats(
        data: Vec<f64>,
        features: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<SamplePool> {
        if features == 0 || data.len() != features * labels.len() {
            return Err(BpfedError::LengthMismatch {
                expected: features * labels.len(),
                got: data.len(),
            });
        }
        check_labels(&labels, class_count)?;
        Ok(SamplePool {
            storage: PoolStorage::Floats(data),
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Densify the given pool rows into a [`Dataset`].
    pub fn extract(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.features;
        let mut x = Mat::zeros(idx.len(), d);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= self.len() {
                return Err(BpfedError::InvalidArgument(format!(
                    "pool index {i} out of range for {} samples",
                    self.len()
                )));
            }
            let row = x.row_mut(r);
            match &self.storage {
                PoolStorage::Bytes { data, scale } => {
                    for (j, &b) in data[i * d..(i + 1) * d].iter().enumerate() {
                        row[j] = b as f64 * scale;
                    }
                }
                PoolStorage::Floats(data) => {
                    row.copy_from_slice(&data[i * d..(i + 1) * d]);
                }
            }
            y.push(self.labels[i]);
        }
        Dataset::new(x, y, self.class_count)
    }
}

fn check_labels(labels: &[usize], class_count: usize) -> Result<()> {
    if class_count == 0 {
        return Err(BpfedError::InvalidArgument(
            "class count must be at least 1".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(BpfedError::InvalidArgument(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    Ok(())
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Read a whole file, naming it in the error (a bare "No such file or
/// directory" is useless when four dataset files are in play).
fn read_named(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        BpfedError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    let end = at + 4;
    if buf.len() < end {
        return Err(BpfedError::Format(format!(
            "{}: file ends inside the header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    Ok(u32::from_be_bytes([
        buf[at],
        buf[at + 1],
        buf[at + 2],
        buf[at + 3],
    ]))
}

/// Parse a big-endian image file (magic `0x00000803`): raw pixel bytes,
/// sample count, and per-sample feature count.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let buf = read_named(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(BpfedError::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x} (images)",
            path.display()
        )));
    }
    let count = be_u32(&buf, 4, path)? as usize;
    let rows = be_u32(&buf, 8, path)? as usize;
    let cols = be_u32(&buf, 12, path)? as usize;
    let features = rows * cols;
    let expected = 16 + count * features;
    if buf.len() != expected {
        return Err(BpfedError::Format(format!(
            "{}: {} bytes for {count} images of {rows}x{cols}, expected {expected}",
            path.display(),
            buf.len()
        )));
    }
    Ok((buf[16..].to_vec(), count, features))
}

/// Parse a big-endian label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_named(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(BpfedError::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x} (labels)",
            path.display()
        )));
    }
    let count = be_u32(&buf, 4, path)? as usize;
    let expected = 8 + count;
    if buf.len() != expected {
        return Err(BpfedError::Format(format!(
            "{}: {} bytes for {count} labels, expected {expected}",
            path.display(),
            buf.len()
        )));
    }
    Ok(buf[8..].to_vec())
}

/// Write an image file in the same big-endian layout (test fixtures).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let features = rows * cols;
    if features == 0 || !pixels.len().is_multiple_of(features) {
        return Err(BpfedError::InvalidArgument(format!(
            "pixel buffer of {} bytes is not a multiple of {rows}x{cols}",
            pixels.len()
        )));
    }
    let count = pixels.len() / features;
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(count as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Write a label file in the same big-endian layout (test fixtures).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::write(path, buf)?;
    Ok(())
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<(Vec<u8>, usize, Vec<u8>)> {
    let (pixels, count, features) = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if y.len() != count {
        return Err(BpfedError::Format(format!(
            "{} has {count} images but {} has {} labels",
            images.display(),
            labels.display(),
            y.len()
        )));
    }
    Ok((pixels, features, y))
}

/// Load the standard four-file image corpus from `dir` and merge its train
/// and test splits into one pool (pixels scaled to `[0, 1]` on extraction).
/// Per-client train/test splits are drawn later, disjointly, from this
/// merged pool.
pub fn load_idx_pool(dir: &Path, class_count: usize) -> Result<SamplePool> {
    let (mut pixels, features, mut labels) = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_pixels, test_features, test_labels) = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    if test_features != features {
        return Err(BpfedError::Format(format!(
            "train images have {features} pixels but test images have {test_features}"
        )));
    }
    pixels.extend_from_slice(&test_pixels);
    labels.extend_from_slice(&test_labels);
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    SamplePool::from_bytes(pixels, features, labels, class_count, 1.0 / 255.0)
}

/// Data regime: how much of the pool each client holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeSize {
    Small,
    Large,
}

impl fmt::Display for RegimeSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegimeSize::Small => "small",
            RegimeSize::Large => "large",
        })
    }
}

impl FromStr for RegimeSize {
    type Err = BpfedError;

    fn from_str(s: &str) -> Result<RegimeSize> {
        match s {
            "small" => Ok(RegimeSize::Small),
            "large" => Ok(RegimeSize::Large),
            other => Err(BpfedError::Config(format!(
                "unknown size '{other}' (expected small or large)"
            ))),
        }
    }
}

/// Supported corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Synth,
}

impl DatasetKind {
    /// Per-client (train, test) sample counts for each regime. The image
    /// corpora use 50/950 (small) and 900/300 (large); the synthetic
    /// corpus uses the lighter 25/475 and 450/150 splits.
    pub fn split_counts(self, size: RegimeSize) -> (usize, usize) {
        match (self, size) {
            (DatasetKind::Mnist | DatasetKind::Fmnist, RegimeSize::Small) => (50, 950),
            (DatasetKind::Mnist | DatasetKind::Fmnist, RegimeSize::Large) => (900, 300),
            (DatasetKind::Synth, RegimeSize::Small) => (25, 475),
            (DatasetKind::Synth, RegimeSize::Large) => (450, 150),
        }
    }

    pub fn class_count(self) -> usize {
        10
    }

    /// Directory under the data root holding the four corpus files, if
    /// this kind is file-backed.
    pub fn subdir(self) -> Option<&'static str> {
        match self {
            DatasetKind::Mnist => Some("mnist"),
            DatasetKind::Fmnist => Some("fmnist"),
            DatasetKind::Synth => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Synth => "synth",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = BpfedError;

    fn from_str(s: &str) -> Result<DatasetKind> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fmnist" => Ok(DatasetKind::Fmnist),
            "synth" => Ok(DatasetKind::Synth),
            other => Err(BpfedError::Config(format!(
                "unknown dataset '{other}' (expected mnist, fmnist, or synth)"
            ))),
        }
    }
}

/// Index-level shard plan for one client: which pool rows become its
/// train and test sets. No feature data is copied until materialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardIndex {
    pub client_id: usize,
    /// The client's label subset, ascending.
    pub label_set: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// A materialized client shard.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub label_set: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Draw label-skew shard plans for `n_clients` clients. Each client gets
/// `labels_per_client` distinct labels; for every assigned label it draws
/// `k_train + k_test` samples from that label's pool without replacement,
/// so its own train and test rows never overlap (different clients may
/// share rows — a class pool cannot supply disjoint large test splits to
/// every client). Consumes `rng` once per client in client order.
pub fn plan_label_skew(
    pool_labels: &[usize],
    class_count: usize,
    n_clients: usize,
    labels_per_client: usize,
    k_train: usize,
    k_test: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ShardIndex>> {
    check_labels(pool_labels, class_count)?;
    if labels_per_client == 0 || labels_per_client > class_count {
        return Err(BpfedError::InvalidArgument(format!(
            "labels per client must be in 1..={class_count}, got {labels_per_client}"
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in pool_labels.iter().enumerate() {
        pools[l].push(i);
    }
    let need = k_train + k_test;

    let mut plans = Vec::with_capacity(n_clients);
    for client_id in 0..n_clients {
        let mut label_set: Vec<usize> =
            rand::seq::index::sample(rng, class_count, labels_per_client).into_vec();
        label_set.sort_unstable();

        let mut train_idx = Vec::with_capacity(k_train * labels_per_client);
        let mut test_idx = Vec::with_capacity(k_test * labels_per_client);
        for &label in &label_set {
            let pool = &pools[label];
            if pool.len() < need {
                return Err(BpfedError::Allocation(format!(
                    "label {label} pool holds {} samples but client {client_id} needs {need}",
                    pool.len()
                )));
            }
            let picks = rand::seq::index::sample(rng, pool.len(), need);
            for (j, p) in picks.into_iter().enumerate() {
                if j < k_train {
                    train_idx.push(pool[p]);
                } else {
                    test_idx.push(pool[p]);
                }
            }
        }
        plans.push(ShardIndex {
            client_id,
            label_set,
            train_idx,
            test_idx,
        });
    }
    Ok(plans)
}

/// Densify one shard plan against the pool it was drawn from.
pub fn materialize(pool: &SamplePool, plan: &ShardIndex) -> Result<ClientShard> {
    Ok(ClientShard {
        client_id: plan.client_id,
        label_set: plan.label_set.clone(),
        train: pool.extract(&plan.train_idx)?,
        test: pool.extract(&plan.test_idx)?,
    })
}

/// Parameters of the synthetic blob corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub dims: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Distance of every class mean from the origin; unit-variance noise
    /// around it.
    pub separation: f64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            dims: 20,
            classes: 10,
            per_class: 600,
            separation: 2.5,
        }
    }
}

/// Generate an isotropic Gaussian blob corpus: class `c` is centered on a
/// random unit direction scaled by `separation`, features are the center
/// plus standard normal noise. Samples are laid out class-major.
pub fn synth_pool(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<SamplePool> {
    if spec.dims == 0 || spec.classes == 0 || spec.per_class == 0 {
        return Err(BpfedError::InvalidArgument(
            "synthetic corpus needs nonzero dims, classes, and per-class count".into(),
        ));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(BpfedError::InvalidArgument(format!(
            "separation must be finite and nonnegative, got {}",
            spec.separation
        )));
    }
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut dir: Vec<f64> = (0..spec.dims).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BpfedError::Domain(
                "degenerate zero direction while drawing class centers".into(),
            ));
        }
        dir.iter_mut().for_each(|v| *v *= spec.separation / norm);
        centers.push(dir);
    }
    let total = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(total * spec.dims);
    let mut labels = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in center {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    SamplePool::from_floats(data, spec.dims, labels, spec.classes)
}

/// Export a dataset as CSV: feature columns `f0..f{d-1}`, label last.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let cols: Vec<String> = (0..ds.features()).map(|j| format!("f{j}")).collect();
    writeln!(w, "{},label", cols.join(","))?;
    let (x, y) = ds.gather_all();
    for (r, label) in y.iter().enumerate() {
        let row: Vec<String> = x.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{label}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
