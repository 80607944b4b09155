//! Datasets, client partitioning and minibatch iteration.
//!
//! A [`Dataset`] is a list of row indices into shared, immutable sample
//! storage, so partitions and splits never copy pixel data. Labels are
//! zero-based.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{self, Purpose};

#[derive(Debug)]
struct Storage {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    storage: Arc<Storage>,
    rows: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Input("dataset has no samples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::Input(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let rows = (0..labels.len()).collect();
        Ok(Self {
            storage: Arc::new(Storage {
                features: features.as_standard_layout().into_owned(),
                labels,
                classes,
            }),
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.storage.features.ncols()
    }

    pub fn classes(&self) -> usize {
        self.storage.classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.storage.labels[self.rows[i]]
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().map(|&r| self.storage.labels[r])
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.storage.features.row(self.rows[i])
    }

    /// Indices of this dataset's samples in the storage it was loaded into.
    /// Two datasets derived from the same source share this index space.
    pub fn source_rows(&self) -> &[usize] {
        &self.rows
    }

    /// The samples at positions `positions` of this dataset, in that order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset {
            storage: Arc::clone(&self.storage),
            rows: positions.iter().map(|&p| self.rows[p]).collect(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Gathers the samples at `positions` into a batch.
    pub fn batch(&self, positions: &[usize]) -> Batch {
        let rows: Vec<usize> = positions.iter().map(|&p| self.rows[p]).collect();
        let inputs = self.storage.features.select(Axis(0), &rows);
        let labels = rows.iter().map(|&r| self.storage.labels[r]).collect();
        Batch { inputs, labels }
    }

    /// The whole dataset as one batch.
    pub fn to_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.classes()];
        for y in self.labels() {
            hist[y] += 1;
        }
        hist
    }

    pub fn distinct_labels(&self) -> usize {
        self.label_histogram().iter().filter(|&&n| n > 0).count()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Parsed IDX image file: `(count, rows, cols, pixels)`.
fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let fail = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let magic = read_u32_be(bytes, 0).ok_or_else(|| fail("file too short for a header".into()))?;
    if magic != IMAGE_MAGIC {
        return Err(fail(format!(
            "bad magic number {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let header =
        |i: usize| read_u32_be(bytes, 4 * i).ok_or_else(|| fail("truncated header".into()));
    let (n, rows, cols) = (
        header(1)? as usize,
        header(2)? as usize,
        header(3)? as usize,
    );
    let expected = n * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() < expected {
        return Err(fail(format!(
            "truncated: header promises {expected} pixel bytes, found {}",
            pixels.len()
        )));
    }
    Ok((n, rows, cols, pixels[..expected].to_vec()))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let fail = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let magic = read_u32_be(bytes, 0).ok_or_else(|| fail("file too short for a header".into()))?;
    if magic != LABEL_MAGIC {
        return Err(fail(format!(
            "bad magic number {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4).ok_or_else(|| fail("truncated header".into()))? as usize;
    let labels = &bytes[8..];
    if labels.len() < n {
        return Err(fail(format!(
            "truncated: header promises {n} labels, found {}",
            labels.len()
        )));
    }
    Ok(labels[..n].to_vec())
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
///
/// The class count is the largest label plus one (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = fs::read(images_path).map_err(|e| Error::Load {
        path: images_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::Load {
        path: labels_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (n, rows, cols, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if labels.len() != n {
        return Err(Error::Load {
            path: labels_path.to_path_buf(),
            reason: format!(
                "{} labels but {} has {n} images",
                labels.len(),
                images_path.display()
            ),
        });
    }
    if n == 0 {
        return Err(Error::Load {
            path: images_path.to_path_buf(),
            reason: "no images".into(),
        });
    }
    let features = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .expect("pixel count checked above");
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, classes)
}

pub const MNIST_TRAIN_FILES: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
pub const MNIST_TEST_FILES: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");

/// Loads the MNIST training and test sets from the uncompressed files in `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |(images, labels): (&str, &str)| load_idx(dir.join(images), dir.join(labels));
    Ok((load(MNIST_TRAIN_FILES)?, load(MNIST_TEST_FILES)?))
}

/// Writes an IDX pair. Pixel values are clamped to `[0, 1]` and quantized to bytes.
pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(Error::Input(format!(
            "{rows}x{cols} images do not match dimension {}",
            data.dim()
        )));
    }
    let n = data.len() as u32;
    let mut images = Vec::with_capacity(16 + data.len() * data.dim());
    for v in [IMAGE_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for i in 0..data.len() {
        images.extend(
            data.sample(i)
                .iter()
                .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(data.labels().map(|y| y as u8));
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Gaussian-blob classification data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dims: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.dims == 0 {
            return Err(Error::Input(format!(
                "synthetic data needs classes >= 2, per_class >= 1 and dims >= 1, got {self:?}"
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Input(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Class means, one row per class, drawn from a standard normal.
pub fn synth_means(config: &SynthConfig) -> Array2<f64> {
    let mut rng = rng::global_stream(config.seed, Purpose::SynthMeans);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Array2::from_shape_fn((config.classes, config.dims), |_| normal.sample(&mut rng))
}

fn synth_draw(config: &SynthConfig, per_class: usize, purpose: Purpose) -> Result<Dataset> {
    config.validate()?;
    if per_class == 0 {
        return Err(Error::Input("per_class must be >= 1".into()));
    }
    let means = synth_means(config);
    let mut rng = rng::global_stream(config.seed, purpose);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n = config.classes * per_class;
    let mut features = Array2::zeros((n, config.dims));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
        let class = i / per_class;
        for (x, &mu) in row.iter_mut().zip(means.row(class)) {
            *x = mu + config.sigma * normal.sample(&mut rng);
        }
        labels.push(class);
    }
    Dataset::new(features, labels, config.classes)
}

/// `classes x per_class` samples, grouped by class.
pub fn synth_dataset(config: &SynthConfig) -> Result<Dataset> {
    synth_draw(config, config.per_class, Purpose::SynthSamples)
}

/// A held-out draw from the same class means as [`synth_dataset`].
pub fn synth_test_set(config: &SynthConfig, per_class: usize) -> Result<Dataset> {
    synth_draw(config, per_class, Purpose::SynthTest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PartitionMode {
    Iid,
    /// Label-sorted segments, `classes_per_client` segments per client.
    NonIid {
        classes_per_client: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

pub fn partition(data: &Dataset, config: &PartitionConfig) -> Result<Vec<Dataset>> {
    match config.mode {
        PartitionMode::Iid => partition_iid(data, config.clients, config.seed),
        PartitionMode::NonIid { classes_per_client } => {
            partition_noniid(data, config.clients, classes_per_client, config.seed)
        }
    }
}

/// Shuffles and cuts into `clients` contiguous parts whose sizes differ by at most one.
pub fn partition_iid(data: &Dataset, clients: usize, seed: u64) -> Result<Vec<Dataset>> {
    if clients == 0 || clients > data.len() {
        return Err(Error::Input(format!(
            "cannot split {} samples among {clients} clients",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::global_stream(seed, Purpose::Partition));
    let (base, extra) = (data.len() / clients, data.len() % clients);
    let mut parts = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let size = base + usize::from(k < extra);
        parts.push(data.subset(&order[start..start + size]));
        start += size;
    }
    Ok(parts)
}

/// Sorts by label, cuts into `clients · per_client` equal segments (the
/// remainder joins the last one) and deals a random `per_client` segments
/// to each client.
pub fn partition_noniid(
    data: &Dataset,
    clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if clients == 0 || per_client == 0 {
        return Err(Error::Input(format!(
            "non-IID partition needs clients >= 1 and segments per client >= 1, got {clients} and {per_client}"
        )));
    }
    let segments = clients * per_client;
    if segments > data.len() {
        return Err(Error::Input(format!(
            "{clients} clients x {per_client} segments = {segments} exceeds {} samples",
            data.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..data.len()).collect();
    sorted.sort_by_key(|&i| (data.label(i), i));

    let size = data.len() / segments;
    let bounds: Vec<(usize, usize)> = (0..segments)
        .map(|s| {
            let end = if s + 1 == segments {
                data.len()
            } else {
                (s + 1) * size
            };
            (s * size, end)
        })
        .collect();

    let mut deal: Vec<usize> = (0..segments).collect();
    deal.shuffle(&mut rng::global_stream(seed, Purpose::Partition));
    Ok(deal
        .chunks(per_client)
        .map(|assigned| {
            let positions: Vec<usize> = assigned
                .iter()
                .flat_map(|&s| sorted[bounds[s].0..bounds[s].1].iter().copied())
                .collect();
            data.subset(&positions)
        })
        .collect())
}

/// A client's private training data and local validation set.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub train: Dataset,
    pub validation: Dataset,
}

/// Seeded shuffle, then the first `floor(fraction · N)` samples train.
pub fn train_val_split(data: &Dataset, fraction: f64, seed: u64) -> Result<ClientData> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!(
            "train fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n_train = (fraction * data.len() as f64).floor() as usize;
    if n_train == 0 || n_train == data.len() {
        return Err(Error::Input(format!(
            "a {fraction} split of {} samples leaves one side empty",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::global_stream(seed, Purpose::TrainValSplit));
    Ok(ClientData {
        train: data.subset(&order[..n_train]),
        validation: data.subset(&order[n_train..]),
    })
}

/// Partitions `data` and splits every shard with `train_val_split`, each
/// client's split keyed by its index.
pub fn prepare_clients(
    data: &Dataset,
    config: &PartitionConfig,
    train_fraction: f64,
) -> Result<Vec<ClientData>> {
    partition(data, config)?
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            train_val_split(
                shard,
                train_fraction,
                rng::derive_seed(config.seed, &[k as u64]),
            )
        })
        .collect()
}

/// Position lists for one pass: a fresh shuffle cut into `ceil(N / B)` batches.
pub fn minibatch_positions<R: Rng + ?Sized>(
    len: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One shuffled pass over `data` in batches of `batch_size` (the last may be smaller).
pub fn minibatches<'a, R: Rng + ?Sized>(
    data: &'a Dataset,
    batch_size: usize,
    rng: &mut R,
) -> impl Iterator<Item = Batch> + 'a {
    minibatch_positions(data.len(), batch_size, rng)
        .into_iter()
        .map(move |positions| data.batch(&positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, classes: usize) -> Dataset {
        let features = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        Dataset::new(features, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    fn sorted_rows(parts: &[Dataset]) -> Vec<usize> {
        let mut rows: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.source_rows().iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let features =
            Array2::from_shape_vec((2, 4), vec![1.0, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let data = Dataset::new(features, vec![3, 1], 10).unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&data, 2, 2, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 4);
        assert_eq!(back.sample(0)[0], 1.0);
        assert_eq!(back.sample(0)[2], 128.0 / 255.0);
        assert_eq!(back.labels().collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(back.classes(), 4);
    }

    #[test]
    fn idx_errors_name_the_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy(3, 2);
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&data.subset(&[0, 1, 2]), 1, 3, &img, &lab).unwrap();

        // swapped arguments: bad magic on both
        match load_idx(&lab, &img) {
            Err(Error::Load { path, reason }) => {
                assert_eq!(path, lab);
                assert!(reason.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(bytes.len() - 1);
        let short = dir.path().join("short");
        fs::write(&short, bytes).unwrap();
        assert!(matches!(load_idx(&short, &lab), Err(Error::Load { path, .. }) if path == short));

        let two = dir.path().join("two-labels");
        write_idx(&data.subset(&[0, 1]), 1, 3, dir.path().join("unused"), &two).unwrap();
        assert!(matches!(load_idx(&img, &two), Err(Error::Load { path, .. }) if path == two));
    }

    #[test]
    fn synthetic_data_is_balanced_and_deterministic() {
        let cfg = SynthConfig {
            classes: 4,
            per_class: 100,
            dims: 5,
            sigma: 0.3,
            seed: 9,
        };
        let a = synth_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a.label_histogram(), vec![100; 4]);
        let b = synth_dataset(&cfg).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.sample(i), b.sample(i));
        }
        let test = synth_test_set(&cfg, 10).unwrap();
        assert_eq!(test.len(), 40);
        assert_ne!(test.sample(0), a.sample(0));
    }

    #[test]
    fn noiseless_blobs_are_separated_by_nearest_mean() {
        let cfg = SynthConfig {
            classes: 5,
            per_class: 20,
            dims: 3,
            sigma: 0.0,
            seed: 1,
        };
        let data = synth_dataset(&cfg).unwrap();
        let means = synth_means(&cfg);
        let correct = (0..data.len())
            .filter(|&i| {
                let x = data.sample(i);
                let nearest = (0..cfg.classes)
                    .min_by(|&a, &b| {
                        let da = (&means.row(a) - &x).mapv(|v| v * v).sum();
                        let db = (&means.row(b) - &x).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest == data.label(i)
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn iid_parts_are_near_equal_and_conservative() {
        let data = toy(103, 4);
        let parts = partition_iid(&data, 10, 2).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
        assert!(sizes.iter().all(|&s| s == 10 || s == 11));
        assert_eq!(sorted_rows(&parts), (0..103).collect::<Vec<_>>());

        let whole = partition_iid(&data, 1, 2).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].label_histogram(), data.label_histogram());
        assert!(partition_iid(&data, 104, 2).is_err());
    }

    #[test]
    fn noniid_deals_equal_segments() {
        let data = toy(1000, 10);
        let parts = partition_noniid(&data, 10, 4, 3).unwrap();
        assert!(parts.iter().all(|p| p.len() == 100));
        assert_eq!(sorted_rows(&parts), (0..1000).collect::<Vec<_>>());
        // segment size 25 < 100 samples per label: each segment spans <= 2 labels
        assert!(parts.iter().all(|p| p.distinct_labels() <= 8));

        let mut hist = vec![0; 10];
        for p in &parts {
            for (h, n) in hist.iter_mut().zip(p.label_histogram()) {
                *h += n;
            }
        }
        assert_eq!(hist, data.label_histogram());
    }

    #[test]
    fn noniid_remainder_joins_last_segment() {
        let data = toy(103, 5);
        let parts = partition_noniid(&data, 5, 2, 0).unwrap();
        let mut sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
        sizes.sort_unstable();
        // ten segments of 10, the last holding 13
        assert_eq!(sizes, vec![20, 20, 20, 20, 23]);
        assert_eq!(sorted_rows(&parts), (0..103).collect::<Vec<_>>());
        assert!(matches!(
            partition_noniid(&data, 60, 2, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn one_segment_per_client_of_sorted_classes_is_pure() {
        let data = toy(400, 4);
        let parts = partition_noniid(&data, 4, 1, 7).unwrap();
        assert!(parts
            .iter()
            .all(|p| p.distinct_labels() == 1 && p.len() == 100));
    }

    #[test]
    fn split_is_floor_eighty_twenty() {
        let split = train_val_split(&toy(6000, 10), 0.8, 1).unwrap();
        assert_eq!((split.train.len(), split.validation.len()), (4800, 1200));
        let split = train_val_split(&toy(5, 2), 0.8, 1).unwrap();
        assert_eq!((split.train.len(), split.validation.len()), (4, 1));
        let mut rows: Vec<usize> = split.train.source_rows().to_vec();
        rows.extend_from_slice(split.validation.source_rows());
        rows.sort_unstable();
        assert_eq!(rows, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn minibatches_cover_each_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes: Vec<usize> = minibatches(&toy(1000, 3), 200, &mut rng)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![200; 5]);
        let sizes: Vec<usize> = minibatches(&toy(5, 3), 2, &mut rng)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        let mut all: Vec<usize> = minibatch_positions(37, 8, &mut rng).concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn batch_gathers_rows_and_labels() {
        let data = toy(10, 3).subset(&[4, 7]);
        let batch = data.batch(&[1, 0]);
        assert_eq!(batch.labels, vec![7 % 3, 4 % 3]);
        assert_eq!(batch.inputs.row(0), data.sample(1));
    }

    proptest! {
        #[test]
        fn partitions_conserve_samples(n in 20usize..300, k in 2usize..6, xi in 1usize..4, seed in 0u64..50) {
            let data = toy(n, 5);
            let iid = partition_iid(&data, k, seed).unwrap();
            prop_assert_eq!(sorted_rows(&iid), (0..n).collect::<Vec<_>>());
            let non = partition_noniid(&data, k, xi, seed).unwrap();
            prop_assert_eq!(non.len(), k);
            prop_assert_eq!(sorted_rows(&non), (0..n).collect::<Vec<_>>());
        }
    }
}
