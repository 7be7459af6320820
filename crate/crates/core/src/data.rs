//! Dataset synthesis, IDX ingestion, Dirichlet non-IID partitioning into
//! client shards, and per-client train/test splitting. All operations are
//! pure functions of their inputs and seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, StandardNormal};

use crate::numeric::check_finite;
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Attempts at re-drawing a Dirichlet partition before giving up on the
/// "every client holds at least 2 samples" requirement.
const PARTITION_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labeled dataset with uniform feature dimensionality and labels in
/// `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid_argument("num_classes must be positive"));
        }
        let dim = samples.first().map(|s| s.features.len());
        for (i, s) in samples.iter().enumerate() {
            if Some(s.features.len()) != dim {
                return Err(Error::Format(format!(
                    "sample {i} has {} features, expected {:?}",
                    s.features.len(),
                    dim
                )));
            }
            if s.label >= num_classes {
                return Err(Error::Format(format!(
                    "sample {i} label {} out of range for {num_classes} classes",
                    s.label
                )));
            }
            check_finite(&s.features, "sample features")?;
        }
        Ok(LabeledDataset {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Feature dimensionality; 0 for an empty dataset.
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Per-class sample counts, length `num_classes`.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Normalized label distribution; zero vector for an empty dataset.
    pub fn label_distribution(&self) -> Vec<f64> {
        let counts = self.label_counts();
        let total = self.samples.len().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// One client's private data, split into disjoint train and test sets drawn
/// from the same local partition.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: u32,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Partition `data` into `k` client datasets: for each class, draw
/// `p ~ Dirichlet(alpha · 1_k)` and assign that class's samples to clients
/// multinomially by `p`. Re-draws (bounded) until every client holds at
/// least 2 samples.
pub fn dirichlet_partition(
    data: &LabeledDataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if k == 0 {
        return Err(Error::invalid_argument("client count must be positive"));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::invalid_argument("alpha must be positive"));
    }
    if k > data.len() / 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot give {k} clients >= 2 samples each from {} samples",
            data.len()
        )));
    }
    let counts = data.label_counts();
    if counts.contains(&0) {
        return Err(Error::invalid_argument(
            "every class needs at least one sample",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..PARTITION_RETRIES {
        let mut assigned: Vec<Vec<Sample>> = vec![Vec::new(); k];
        for class in 0..data.num_classes {
            let proportions: Vec<f64> = if k == 1 {
                vec![1.0]
            } else {
                Dirichlet::new(&vec![alpha; k])
                    .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?
                    .sample(&mut rng)
            };
            let pick = WeightedIndex::new(&proportions)
                .map_err(|e| Error::InvalidArgument(format!("weights: {e}")))?;
            for s in data.samples.iter().filter(|s| s.label == class) {
                assigned[pick.sample(&mut rng)].push(s.clone());
            }
        }
        if assigned.iter().all(|a| a.len() >= 2) {
            return assigned
                .into_iter()
                .map(|samples| LabeledDataset::new(samples, data.num_classes))
                .collect();
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not draw a partition of {} samples over {k} clients with >= 2 samples each \
         (alpha = {alpha}) in {PARTITION_RETRIES} attempts",
        data.len()
    )))
}

/// Seeded shuffle, then the last `ceil(test_fraction · n)` samples become
/// the test split, clamped so each side keeps at least one sample.
pub fn split_shard(
    client_id: u32,
    partition: LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<ClientShard> {
    if partition.len() < 2 {
        return Err(Error::invalid_argument(
            "need at least 2 samples to split into train and test",
        ));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let num_classes = partition.num_classes;
    let n = partition.len();
    let mut samples = partition.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let test_n = ((test_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test = samples.split_off(n - test_n);
    Ok(ClientShard {
        client_id,
        train: LabeledDataset::new(samples, num_classes)?,
        test: LabeledDataset::new(test, num_classes)?,
    })
}

/// Keep a seeded random subset of `target` training samples (at least 1,
/// at most the available count); test split is untouched.
pub fn subsample_train(shard: &mut ClientShard, target: usize, seed: u64) -> Result<()> {
    let n = shard.train.len();
    let keep = target.clamp(1, n);
    if keep == n {
        return Ok(());
    }
    let mut samples = std::mem::take(&mut shard.train.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    samples.truncate(keep);
    shard.train = LabeledDataset::new(samples, shard.train.num_classes)?;
    Ok(())
}

/// Synthetic Gaussian mixture: class `c` is `N(mu_c, I)` where `mu_c` is a
/// seeded random unit direction scaled by `class_sep`.
pub fn synth_gaussian(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    class_sep: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::invalid_argument(
            "num_classes, per_class and dim must be positive",
        ));
    }
    if class_sep < 0.0 || !class_sep.is_finite() {
        return Err(Error::invalid_argument("class_sep must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let mut direction: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            direction.iter_mut().for_each(|v| *v *= class_sep / norm);
        }
        for _ in 0..per_class {
            let features = direction
                .iter()
                .map(|&mu| mu + rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                features,
                label: class,
            });
        }
    }
    LabeledDataset::new(samples, num_classes)
}

fn read_u32_be(reader: &mut impl Read, offset: &mut u64, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        location: format!("byte offset {offset}"),
        message: "truncated while reading u32".into(),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair (the de-facto MNIST binary format).
/// Pixels are scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    // Labels first: their count bounds the image count check.
    let mut labels_file = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut labels_file, &mut offset, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            location: "byte offset 0".into(),
            message: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n_labels = read_u32_be(&mut labels_file, &mut offset, labels_path)? as usize;
    let mut raw_labels = vec![0u8; n_labels];
    labels_file
        .read_exact(&mut raw_labels)
        .map_err(|_| Error::Parse {
            path: labels_path.to_path_buf(),
            location: format!("byte offset {offset}"),
            message: format!("truncated label block, expected {n_labels} bytes"),
        })?;

    let mut images_file = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let mut offset = 0u64;
    let magic = read_u32_be(&mut images_file, &mut offset, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            location: "byte offset 0".into(),
            message: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n_images = read_u32_be(&mut images_file, &mut offset, images_path)? as usize;
    let rows = read_u32_be(&mut images_file, &mut offset, images_path)? as usize;
    let cols = read_u32_be(&mut images_file, &mut offset, images_path)? as usize;
    if n_images != n_labels {
        return Err(Error::Format(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    let pixels = rows * cols;
    let mut samples = Vec::with_capacity(n_images);
    let mut buf = vec![0u8; pixels];
    for (i, &label) in raw_labels.iter().enumerate() {
        images_file.read_exact(&mut buf).map_err(|_| Error::Parse {
            path: images_path.to_path_buf(),
            location: format!("byte offset {}", offset + (i * pixels) as u64),
            message: format!("truncated image block at image {i}"),
        })?;
        samples.push(Sample {
            features: buf.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: label as usize,
        });
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    LabeledDataset::new(samples, num_classes)
}

/// Total-variation distance between two distributions of equal length.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean TV distance of per-client label distributions from the global one.
pub fn mean_client_tv(global: &LabeledDataset, partitions: &[LabeledDataset]) -> f64 {
    let global_dist = global.label_distribution();
    let total: f64 = partitions
        .iter()
        .map(|p| tv_distance(&p.label_distribution(), &global_dist))
        .sum();
    total / partitions.len().max(1) as f64
}

/// Write one manifest line per client:
/// `client_id, n_train, n_test, c0:count c1:count ...` over train+test.
pub fn write_shard_manifest(shards: &[ClientShard], w: &mut impl Write) -> Result<()> {
    for shard in shards {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for s in shard
            .train
            .samples()
            .iter()
            .chain(shard.test.samples().iter())
        {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        let per_class = counts
            .iter()
            .map(|(c, n)| format!("c{c}:{n}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(
            w,
            "{}, {}, {}, {per_class}",
            shard.client_id,
            shard.train.len(),
            shard.test.len()
        )?;
    }
    Ok(())
}
