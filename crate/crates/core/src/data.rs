//! Datasets, the CIFAR-10 binary reader, and client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, mix64, StreamRng};

/// Bytes per CIFAR-10 record: one label byte followed by 3072 pixel bytes.
pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_INPUT_DIM: usize = 3072;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParameters(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "{path}: length {len} is not a multiple of {CIFAR_RECORD_LEN}; \
         trailing partial record starts at byte offset {offset}"
    )]
    BadLength { path: PathBuf, len: usize, offset: usize },
    #[error("{path}: label byte {label} > 9 at byte offset {offset}")]
    BadLabel { path: PathBuf, label: u8, offset: usize },
    #[error("infeasible partition: {clients} clients x min {min_quantity} samples > {available} samples")]
    Infeasible {
        clients: usize,
        min_quantity: usize,
        available: usize,
    },
}

/// Row-major feature matrix with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if input_dim == 0 || num_classes < 2 {
            return Err(DataError::InvalidParameters(format!(
                "input_dim {input_dim} must be > 0 and num_classes {num_classes} >= 2"
            )));
        }
        if features.len() != labels.len() * input_dim {
            return Err(DataError::InvalidParameters(format!(
                "{} feature values for {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::InvalidParameters(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets with identical shape.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::InvalidParameters("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim != first.input_dim || p.num_classes != first.num_classes {
                return Err(DataError::InvalidParameters(
                    "datasets differ in shape".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(features, labels, first.input_dim, first.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Centroid of class `class` in `[0.15, 0.85]^input_dim`. Depends only on the
/// class index and dimension, so train and test draws share centroids.
pub fn blob_centroid(class: usize, input_dim: usize) -> Vec<f64> {
    let mut r = rng::seeded(mix64(0xb10b_0000 ^ class as u64) ^ input_dim as u64);
    (0..input_dim).map(|_| r.random_range(0.15..0.85)).collect()
}

/// Isotropic Gaussian blobs clipped to the unit cube. Sample `i` belongs to
/// class `i % num_classes`, so classes are balanced with the remainder going
/// to the lowest class indices.
pub fn generate_blobs(
    num_classes: usize,
    input_dim: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 || input_dim == 0 || n < num_classes || !(spread >= 0.0) || !spread.is_finite() {
        return Err(DataError::InvalidParameters(format!(
            "blobs need num_classes >= 2, input_dim > 0, n >= num_classes and finite spread >= 0 \
             (got {num_classes}, {input_dim}, {n}, {spread})"
        )));
    }
    let centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| blob_centroid(c, input_dim))
        .collect();
    let mut r = rng::seeded(seed);
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for &mu in &centroids[c] {
            let z: f64 = StandardNormal.sample(&mut r);
            features.push((mu + spread * z).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(features, labels, input_dim, num_classes)
}

/// Reads CIFAR-10 binary batch files in order. Pixels are scaled to `[0, 1]`.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset, DataError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_cifar_records(path, &bytes, &mut features, &mut labels)?;
    }
    Dataset::new(features, labels, CIFAR_INPUT_DIM, CIFAR_CLASSES)
}

fn parse_cifar_records(
    path: &Path,
    bytes: &[u8],
    features: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(DataError::BadLength {
            path: path.to_path_buf(),
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % CIFAR_RECORD_LEN,
        });
    }
    for (k, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                label,
                offset: k * CIFAR_RECORD_LEN,
            });
        }
        labels.push(label as usize);
        features.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Skew {
    #[default]
    Uniform,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub label_skew: Skew,
    pub quantity_skew: Skew,
    pub alpha_label: f64,
    pub alpha_quantity: f64,
    pub min_quantity: usize,
    pub max_quantity: usize,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            label_skew: Skew::Uniform,
            quantity_skew: Skew::Uniform,
            alpha_label: 0.5,
            alpha_quantity: 0.5,
            min_quantity: 32,
            max_quantity: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub alpha_label: f64,
    pub alpha_quantity: f64,
    pub min_quantity: usize,
    pub max_quantity: usize,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }
}

/// Normalized Gamma(alpha, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, r: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(r)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Splits `total` into integer counts proportional to `props` using the
/// largest-remainder rule, ties to the lowest index.
fn apportion(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn client_quantities(
    n: usize,
    m: usize,
    params: &PartitionParams,
    r: &mut StreamRng,
) -> Vec<usize> {
    let total = n.min(m * params.max_quantity);
    let (lo, hi) = (params.min_quantity, params.max_quantity);
    let mut sizes: Vec<usize> = match params.quantity_skew {
        Skew::Uniform => (0..m).map(|i| total / m + usize::from(i < total % m)).collect(),
        Skew::Dirichlet => {
            let q = sample_dirichlet(params.alpha_quantity, m, r);
            q.iter().map(|p| (p * total as f64).floor() as usize).collect()
        }
    };
    for s in sizes.iter_mut() {
        *s = (*s).clamp(lo, hi);
    }
    let mut sum: usize = sizes.iter().sum();
    // Redistribute one sample at a time to the client with the most headroom.
    while sum < total {
        let i = argmax_first(sizes.iter().map(|&s| hi - s));
        sizes[i] += 1;
        sum += 1;
    }
    while sum > total {
        let i = argmax_first(sizes.iter().map(|&s| s - lo));
        sizes[i] -= 1;
        sum -= 1;
    }
    sizes
}

fn argmax_first<I: Iterator<Item = usize>>(it: I) -> usize {
    let mut best = (0, 0);
    for (i, v) in it.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Assigns disjoint sample indices to `m` clients.
///
/// Quantity and label skew are sampled independently: client sizes come
/// first, then each client's class mix is filled from per-class pools.
pub fn partition(
    data: &Dataset,
    m: usize,
    params: &PartitionParams,
    seed: u64,
) -> Result<PartitionPlan, DataError> {
    let n = data.len();
    if m == 0 {
        return Err(DataError::InvalidParameters("need at least one client".into()));
    }
    if params.min_quantity == 0 || params.min_quantity > params.max_quantity {
        return Err(DataError::InvalidParameters(format!(
            "need 0 < min_quantity ({}) <= max_quantity ({})",
            params.min_quantity, params.max_quantity
        )));
    }
    if !(params.alpha_label > 0.0 && params.alpha_quantity > 0.0) {
        return Err(DataError::InvalidParameters(
            "Dirichlet parameters must be positive".into(),
        ));
    }
    if m * params.min_quantity > n {
        return Err(DataError::Infeasible {
            clients: m,
            min_quantity: params.min_quantity,
            available: n,
        });
    }
    let mut r = rng::seeded(seed);
    let sizes = client_quantities(n, m, params, &mut r);

    let assignments = match params.label_skew {
        Skew::Uniform => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut r);
            let mut offset = 0;
            sizes
                .iter()
                .map(|&s| {
                    let chunk = all[offset..offset + s].to_vec();
                    offset += s;
                    chunk
                })
                .collect()
        }
        Skew::Dirichlet => {
            let k = data.num_classes();
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
            for i in 0..n {
                pools[data.label(i)].push(i);
            }
            for pool in pools.iter_mut() {
                pool.shuffle(&mut r);
            }
            sizes
                .iter()
                .map(|&s| {
                    let props = sample_dirichlet(params.alpha_label, k, &mut r);
                    let wanted = apportion(&props, s);
                    let mut mine = Vec::with_capacity(s);
                    for (c, &w) in wanted.iter().enumerate() {
                        let take = w.min(pools[c].len());
                        let at = pools[c].len() - take;
                        mine.extend(pools[c].drain(at..));
                    }
                    // Spill any shortfall over to the most abundant class left.
                    while mine.len() < s {
                        let c = argmax_first(pools.iter().map(Vec::len));
                        mine.push(pools[c].pop().expect("total never exceeds n"));
                    }
                    mine
                })
                .collect()
        }
    };

    Ok(PartitionPlan {
        assignments,
        alpha_label: params.alpha_label,
        alpha_quantity: params.alpha_quantity,
        min_quantity: params.min_quantity,
        max_quantity: params.max_quantity,
    })
}

/// Shuffles `indices` and splits off `floor(val_fraction * len)` of them as
/// validation. Returns `(train, val)`.
pub fn split_train_val(
    indices: &[usize],
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng::seeded(seed));
    let n_val = (val_fraction * shuffled.len() as f64).floor() as usize;
    let train = shuffled.split_off(n_val);
    (train, shuffled)
}
