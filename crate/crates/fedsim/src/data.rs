//! Datasets, class distributions, and partitioning of samples across the
//! server's public set and the clients' private sets.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::SimError;
use crate::rng::{stream, StreamKind};
use crate::Result;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled classification dataset with dense row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    /// Builds a dataset, validating shape and label range.
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(SimError::parameter("class_count must be at least 2"));
        }
        if n_features == 0 {
            return Err(SimError::parameter("n_features must be positive"));
        }
        if features.len() != labels.len() * n_features {
            return Err(SimError::parameter(format!(
                "feature matrix has {} entries, expected {} samples x {} features",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SimError::parameter(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            n_features,
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

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Feature row of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Indices of all samples, in dataset order.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Indices of the samples whose label lies in `classes`.
    pub fn indices_with_labels(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    /// Rebuilds the dataset with a wider class range (e.g. to align a test
    /// split whose inferred class count differs from the training split's).
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Self::new(self.features, self.n_features, self.labels, class_count)
    }

    /// Copies the selected rows into a standalone dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.n_features, labels, self.class_count)
    }
}

/// Per-class sample proportions of a dataset or index set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    alpha: Vec<f64>,
}

impl ClassDistribution {
    /// Builds a distribution, validating nonnegativity and normalization.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|&a| a < 0.0 || !a.is_finite()) {
            return Err(SimError::parameter(
                "class proportions must be finite and nonnegative",
            ));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SimError::parameter(format!(
                "class proportions sum to {sum}, expected 1"
            )));
        }
        Ok(Self { alpha })
    }

    /// Builds a distribution from raw per-class counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(SimError::parameter(
                "cannot form a class distribution from an empty index set",
            ));
        }
        let alpha = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    /// Classes with strictly positive proportion.
    pub fn support(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0.0)
            .map(|(c, _)| c)
            .collect()
    }
}

impl std::ops::Index<usize> for ClassDistribution {
    type Output = f64;
    fn index(&self, c: usize) -> &f64 {
        &self.alpha[c]
    }
}

/// Assignment of dataset indices to the server and `N` clients, together
/// with the dataset-size weights of the learning objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub server_indices: Vec<usize>,
    pub client_indices: Vec<Vec<usize>>,
    pub p_s: f64,
    pub p_i: Vec<f64>,
}

impl PartitionPlan {
    fn from_assignment(server: Vec<usize>, clients: Vec<Vec<usize>>) -> Result<Self> {
        if server.is_empty() {
            return Err(SimError::parameter("server received no samples"));
        }
        if let Some(k) = clients.iter().position(|c| c.is_empty()) {
            return Err(SimError::parameter(format!(
                "client {k} received no samples"
            )));
        }
        let total = server.len() + clients.iter().map(Vec::len).sum::<usize>();
        let p_s = server.len() as f64 / total as f64;
        let p_i = clients
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect();
        Ok(Self {
            server_indices: server,
            client_indices: clients,
            p_s,
            p_i,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Total number of partitioned samples.
    pub fn total_samples(&self) -> usize {
        self.server_indices.len() + self.client_indices.iter().map(Vec::len).sum::<usize>()
    }
}

/// Generates a `C`-class isotropic Gaussian mixture with `n_per_class`
/// samples per class. Class means are a deterministic function of
/// `(class, separation, seed)`: `separation` times a random unit vector.
pub fn synth_gaussian_mixture(
    class_count: usize,
    n_features: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count < 2 {
        return Err(SimError::parameter("class_count must be at least 2"));
    }
    if n_features == 0 || n_per_class == 0 {
        return Err(SimError::parameter(
            "n_features and n_per_class must be positive",
        ));
    }
    if separation <= 0.0 || !separation.is_finite() {
        return Err(SimError::parameter("separation must be positive"));
    }

    let n = class_count * n_per_class;
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);

    for c in 0..class_count {
        // Mean direction and sample noise come from separate streams so the
        // means depend only on (class, seed).
        let mut mean_rng = stream(seed, StreamKind::Dataset, 0, c as u64);
        let mut mean: Vec<f64> = (0..n_features)
            .map(|_| mean_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut mean {
            *x *= separation / norm;
        }

        let mut sample_rng = stream(seed, StreamKind::Dataset, 1, c as u64);
        for _ in 0..n_per_class {
            for &m in &mean {
                features.push(m + sample_rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }

    LabeledDataset::new(features, n_features, labels, class_count)
}

fn read_idx_header(reader: &mut impl Read, expected_magic: u32, what: &str) -> Result<u32> {
    let magic = reader
        .read_u32::<BigEndian>()
        .map_err(|e| SimError::format(format!("{what}: cannot read magic: {e}")))?;
    if magic != expected_magic {
        return Err(SimError::format(format!(
            "{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    reader
        .read_u32::<BigEndian>()
        .map_err(|e| SimError::format(format!("{what}: cannot read item count: {e}")))
}

/// Loads an IDX image/label pair (big-endian, as distributed for MNIST).
/// Pixels are scaled to `[0, 1]`; the class count is inferred from the
/// largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let n_images = read_idx_header(&mut images, IDX_IMAGE_MAGIC, "image file")? as usize;
    let rows = images
        .read_u32::<BigEndian>()
        .map_err(|e| SimError::format(format!("image file: cannot read rows: {e}")))?
        as usize;
    let cols = images
        .read_u32::<BigEndian>()
        .map_err(|e| SimError::format(format!("image file: cannot read cols: {e}")))?
        as usize;
    let n_features = rows * cols;
    let mut pixel_bytes = vec![0u8; n_images * n_features];
    images
        .read_exact(&mut pixel_bytes)
        .map_err(|e| SimError::format(format!("image file: truncated pixel data: {e}")))?;

    let mut labels_file = BufReader::new(File::open(labels_path)?);
    let n_labels = read_idx_header(&mut labels_file, IDX_LABEL_MAGIC, "label file")? as usize;
    if n_labels != n_images {
        return Err(SimError::format(format!(
            "count mismatch: {n_images} images but {n_labels} labels"
        )));
    }
    let mut label_bytes = vec![0u8; n_labels];
    labels_file
        .read_exact(&mut label_bytes)
        .map_err(|e| SimError::format(format!("label file: truncated label data: {e}")))?;

    let features = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    LabeledDataset::new(features, n_features, labels, class_count)
}

/// Per-class index lists, each shuffled under its own derived stream.
fn shuffled_class_indices(dataset: &LabeledDataset, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count()];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label].push(i);
    }
    for (c, indices) in by_class.iter_mut().enumerate() {
        let mut rng = stream(seed, StreamKind::Partition, 0, c as u64);
        indices.shuffle(&mut rng);
    }
    by_class
}

fn validate_public_fraction(public_fraction: f64) -> Result<()> {
    if !(public_fraction > 0.0 && public_fraction < 1.0) {
        return Err(SimError::parameter(
            "public_fraction must lie strictly between 0 and 1",
        ));
    }
    Ok(())
}

/// Deals `pool` across `recipients`, giving each an equal share and handing
/// the remainder out starting at `*cursor` (which advances past the served
/// recipients so remainders rotate across classes).
fn deal_evenly(pool: &[usize], recipients: &mut [Vec<usize>], cursor: &mut usize) {
    let n = recipients.len();
    let base = pool.len() / n;
    let rem = pool.len() % n;
    let mut offset = 0;
    let mut extra = vec![0usize; n];
    for k in 0..rem {
        extra[(*cursor + k) % n] = 1;
    }
    *cursor = (*cursor + rem) % n;
    for (recipient, &e) in recipients.iter_mut().zip(extra.iter()) {
        let take = base + e;
        recipient.extend_from_slice(&pool[offset..offset + take]);
        offset += take;
    }
}

/// Stratified i.i.d. split: the server takes `public_fraction` of every
/// class (rounded down); the rest of each class is dealt evenly across the
/// `n_clients` clients, remainders rotating round-robin by class index.
pub fn partition_iid(
    dataset: &LabeledDataset,
    n_clients: usize,
    public_fraction: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(SimError::parameter("need at least one client"));
    }
    validate_public_fraction(public_fraction)?;

    let by_class = shuffled_class_indices(dataset, seed);
    let mut server = Vec::new();
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut cursor = 0usize;
    for indices in &by_class {
        let server_take = (public_fraction * indices.len() as f64).floor() as usize;
        server.extend_from_slice(&indices[..server_take]);
        deal_evenly(&indices[server_take..], &mut clients, &mut cursor);
    }
    PartitionPlan::from_assignment(server, clients)
}

/// Label-skewed shard split: classes form contiguous blocks of
/// `classes_per_client` and each block is owned by an equal-sized group of
/// clients (clients `0..N/B` hold the first block, and so on). The server
/// keeps a `public_fraction` stratified over all classes.
pub fn partition_shard_noniid(
    dataset: &LabeledDataset,
    n_clients: usize,
    classes_per_client: usize,
    public_fraction: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(SimError::parameter("need at least one client"));
    }
    validate_public_fraction(public_fraction)?;
    let class_count = dataset.class_count();
    if classes_per_client == 0 || class_count % classes_per_client != 0 {
        return Err(SimError::parameter(format!(
            "classes_per_client {classes_per_client} must evenly divide {class_count} classes"
        )));
    }
    let n_blocks = class_count / classes_per_client;
    if n_clients % n_blocks != 0 {
        return Err(SimError::parameter(format!(
            "{n_clients} clients cannot cover {n_blocks} class blocks evenly"
        )));
    }
    let clients_per_block = n_clients / n_blocks;

    let by_class = shuffled_class_indices(dataset, seed);
    let mut server = Vec::new();
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut cursors = vec![0usize; n_blocks];
    for (c, indices) in by_class.iter().enumerate() {
        let server_take = (public_fraction * indices.len() as f64).floor() as usize;
        server.extend_from_slice(&indices[..server_take]);
        let block = c / classes_per_client;
        let group = &mut clients[block * clients_per_block..(block + 1) * clients_per_block];
        deal_evenly(&indices[server_take..], group, &mut cursors[block]);
    }
    PartitionPlan::from_assignment(server, clients)
}

/// Class distribution of the samples selected by `indices`.
pub fn class_distribution(
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<ClassDistribution> {
    if indices.is_empty() {
        return Err(SimError::parameter(
            "cannot compute a class distribution of an empty index set",
        ));
    }
    let mut counts = vec![0usize; dataset.class_count()];
    for &i in indices {
        counts[dataset.labels()[i]] += 1;
    }
    ClassDistribution::from_counts(&counts)
}

/// Global class distribution as the dataset-size-weighted mean of the local
/// ones: `alpha_g = p_s * alpha_s + sum_i p_i * alpha_i`.
pub fn global_distribution(
    plan: &PartitionPlan,
    server: &ClassDistribution,
    clients: &[ClassDistribution],
) -> Result<ClassDistribution> {
    if clients.len() != plan.n_clients() {
        return Err(SimError::parameter(format!(
            "{} client distributions for a plan with {} clients",
            clients.len(),
            plan.n_clients()
        )));
    }
    let class_count = server.len();
    if clients.iter().any(|d| d.len() != class_count) {
        return Err(SimError::parameter(
            "client distribution length does not match the server's",
        ));
    }
    let mut alpha = vec![0.0; class_count];
    for c in 0..class_count {
        alpha[c] = plan.p_s * server[c];
        for (d, &p) in clients.iter().zip(plan.p_i.iter()) {
            alpha[c] += p * d[c];
        }
    }
    // Weighted average of distributions; renormalization only absorbs
    // floating-point dust.
    let sum: f64 = alpha.iter().sum();
    ClassDistribution::new(alpha.iter().map(|a| a / sum).collect())
}
