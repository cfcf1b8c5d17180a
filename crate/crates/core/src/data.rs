//! Datasets: synthetic generation, IDX ingestion, stratified validation
//! splits, non-IID client partitioning and dirty-label poisoning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlError, Result};
use crate::seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples, one feature row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FlError::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FlError::InvalidDataset(format!(
                "label {y} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Pairwise distance between synthetic class centroids.
pub const CENTROID_DISTANCE: f64 = 5.0;

/// Default noise level for [`generate_synthetic`], as a fraction of
/// [`CENTROID_DISTANCE`].
pub const DEFAULT_SPREAD: f64 = 0.17;

/// Gaussian blobs around the vertices of a scaled simplex.
///
/// Class `k` is centred on `e_{pi(k)} * CENTROID_DISTANCE / sqrt(2)`, where
/// `pi` is a seeded injection of classes into coordinate axes, so every pair
/// of centroids is exactly `CENTROID_DISTANCE` apart. If `dim < num_classes`
/// the centroids are instead seeded points on the sphere of the same radius.
/// `spread` is the per-axis noise standard deviation relative to the
/// centroid distance.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || samples_per_class == 0 {
        return Err(FlError::InvalidDataset(format!(
            "need num_classes >= 2, dim >= 2, samples_per_class >= 1; got {num_classes}, {dim}, {samples_per_class}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(FlError::InvalidDataset(format!("invalid spread {spread}")));
    }
    let mut rng = seed::rng(seed);
    let radius = CENTROID_DISTANCE * std::f64::consts::FRAC_1_SQRT_2;
    let sigma = spread * CENTROID_DISTANCE;
    let mut centroids = Array2::<f64>::zeros((num_classes, dim));
    if dim >= num_classes {
        let mut axes: Vec<usize> = (0..dim).collect();
        axes.shuffle(&mut rng);
        for k in 0..num_classes {
            centroids[[k, axes[k]]] = radius;
        }
    } else {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for mut row in centroids.rows_mut() {
            row.mapv_inplace(|_| normal.sample(&mut rng));
            let norm = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row.mapv_inplace(|v| v / norm * radius);
        }
    }

    let n = num_classes * samples_per_class;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for k in 0..num_classes {
        for s in 0..samples_per_class {
            let r = k * samples_per_class + s;
            for j in 0..dim {
                let eps: f64 = noise.sample(&mut rng);
                features[[r, j]] = centroids[[k, j]] + sigma * eps;
            }
            labels.push(k);
        }
    }
    Dataset::new(features, labels, num_classes)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            FlError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("{}: truncated header", path.display()),
            ))
        })
}

fn read_idx(path: &Path, magic: u32, ndims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let found = read_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(FlError::Format(format!(
            "{}: magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let dims = (0..ndims)
        .map(|d| read_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(FlError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!(
                "{}: payload has {} bytes, header promises {expected}",
                path.display(),
                payload.len()
            ),
        )));
    }
    Ok((dims, payload[..expected].to_vec()))
}

/// Reads an IDX image/label file pair (MNIST, EMNIST, Fashion-MNIST layout).
/// Pixels are scaled to `[0, 1]`; each image is flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (img_dims, pixels) = read_idx(images_path.as_ref(), IDX_IMAGES_MAGIC, 3)?;
    let (lbl_dims, raw_labels) = read_idx(labels_path.as_ref(), IDX_LABELS_MAGIC, 1)?;
    let (count, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if count != lbl_dims[0] {
        return Err(FlError::Consistency {
            images: count,
            labels: lbl_dims[0],
        });
    }
    let features = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .map_err(|e| FlError::Format(e.to_string()))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, num_classes)
}

/// Writes `data` as an IDX pair with images of `rows x cols`. Features are
/// mapped back to bytes by `round(v * 255)` after clamping to `[0, 1]`.
pub fn write_idx(
    data: &Dataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(FlError::Shape {
            expected: format!("{rows}x{cols} = {} features", rows * cols),
            found: format!("{} features", data.dim()),
        });
    }
    let mut images = Vec::with_capacity(16 + data.len() * data.dim());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [data.len(), rows, cols] {
        images.extend((d as u32).to_be_bytes());
    }
    images.extend(
        data.features
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images_path, images)?;

    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((data.len() as u32).to_be_bytes());
    for &y in &data.labels {
        let byte = u8::try_from(y).map_err(|_| FlError::Format(format!("label {y} exceeds a byte")))?;
        labels.push(byte);
    }
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Stratified split: each class contributes `round(count * fraction)` samples
/// to the validation set. Both splits keep the original sample order.
pub fn split_validation(
    data: &Dataset,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(FlError::Split(format!(
            "validation fraction {validation_fraction} is outside (0, 1)"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for mut members in data.indices_by_class() {
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * validation_fraction).round() as usize;
        val_idx.extend_from_slice(&members[..take]);
        train_idx.extend_from_slice(&members[take..]);
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(FlError::Split(format!(
            "fraction {validation_fraction} of {} samples leaves an empty split",
            data.len()
        )));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&val_idx)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub labels_per_client: usize,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.n_clients == 0 || self.labels_per_client == 0 {
            return Err(FlError::Partition(
                "n_clients and labels_per_client must be positive".into(),
            ));
        }
        if self.labels_per_client > num_classes {
            return Err(FlError::Partition(format!(
                "{} labels per client but only {num_classes} classes",
                self.labels_per_client
            )));
        }
        if self.n_clients * self.labels_per_client < num_classes {
            return Err(FlError::Partition(format!(
                "{} clients x {} labels cannot cover {num_classes} classes",
                self.n_clients, self.labels_per_client
            )));
        }
        Ok(())
    }
}

/// Class sets held by each client: exactly `labels_per_client` distinct
/// classes each, every class held by at least one client.
pub fn assign_client_labels(num_classes: usize, plan: &PartitionPlan) -> Result<Vec<BTreeSet<usize>>> {
    plan.validate(num_classes)?;
    let mut rng = seed::rng(plan.seed);
    let mut held = vec![BTreeSet::new(); plan.n_clients];

    // Coverage pass: deal a shuffled deck of classes round-robin over a
    // shuffled client order. n * L >= k keeps every hand within L.
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut rng);
    let mut clients: Vec<usize> = (0..plan.n_clients).collect();
    clients.shuffle(&mut rng);
    for (i, &k) in classes.iter().enumerate() {
        held[clients[i % plan.n_clients]].insert(k);
    }

    for set in held.iter_mut() {
        let mut free: Vec<usize> = (0..num_classes).filter(|k| !set.contains(k)).collect();
        free.shuffle(&mut rng);
        let missing = plan.labels_per_client - set.len();
        set.extend(free.into_iter().take(missing));
    }
    Ok(held)
}

/// Non-IID split: each client only sees samples from its assigned classes.
/// The samples of a class are shuffled and dealt in near-equal contiguous
/// chunks to the clients holding that class, so every sample lands on
/// exactly one client.
pub fn partition_non_iid(data: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    let held = assign_client_labels(data.num_classes, plan)?;
    let mut rng = seed::rng(seed::derive(plan.seed, &[0xDA7A]));
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); plan.n_clients];
    for (k, mut members) in data.indices_by_class().into_iter().enumerate() {
        let holders: Vec<usize> = (0..plan.n_clients).filter(|&c| held[c].contains(&k)).collect();
        if members.len() < holders.len() {
            return Err(FlError::Partition(format!(
                "class {k} has {} samples for {} holders",
                members.len(),
                holders.len()
            )));
        }
        members.shuffle(&mut rng);
        let base = members.len() / holders.len();
        let extra = members.len() % holders.len();
        let mut start = 0;
        for (h, &client) in holders.iter().enumerate() {
            let take = base + usize::from(h < extra);
            per_client[client].extend_from_slice(&members[start..start + take]);
            start += take;
        }
    }
    Ok(per_client
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            data.subset(&idx)
        })
        .collect())
}

/// How an adversarial client corrupts its labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PoisonMode {
    /// Permute the label vector across samples.
    #[default]
    Shuffle,
    /// Relabel every sample through a derangement of the classes present.
    ClassMap,
}

/// Seeded derangement of `items` (no element maps to itself), via
/// Sattolo's single-cycle shuffle.
fn derangement<R: Rng>(items: &[usize], rng: &mut R) -> Vec<usize> {
    let mut image = items.to_vec();
    for i in (1..image.len()).rev() {
        let j = rng.gen_range(0..i);
        image.swap(i, j);
    }
    image
}

/// Returns a poisoned copy of `data`; features are never touched.
pub fn poison_labels(data: &Dataset, mode: PoisonMode, seed: u64) -> Result<Dataset> {
    if data.is_empty() {
        return Err(FlError::EmptyData);
    }
    let mut rng = seed::rng(seed);
    let labels = match mode {
        PoisonMode::Shuffle => {
            let mut labels = data.labels.clone();
            labels.shuffle(&mut rng);
            labels
        }
        PoisonMode::ClassMap => {
            let present: Vec<usize> = data.label_set().into_iter().collect();
            if present.len() < 2 {
                return Err(FlError::NoDerangement(present.len()));
            }
            let image = derangement(&present, &mut rng);
            let mut map = vec![0; data.num_classes];
            for (&from, &to) in present.iter().zip(&image) {
                map[from] = to;
            }
            data.labels.iter().map(|&y| map[y]).collect()
        }
    };
    Dataset::new(data.features.clone(), labels, data.num_classes)
}
