//! Deterministic privacy-preserving hash encoder: a fixed seeded stack of
//! random linear maps with tanh non-linearities, followed by L2
//! normalization. Stands in for a pre-trained deep encoder; externally
//! precomputed hashes can be ingested from a text file instead.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::SampleIndex;
use crate::numeric::check_finite;
use crate::{Error, Result};

/// Default hash dimensionality. Small enough that the one-shot hash upload
/// stays far below the per-round logit traffic.
pub const DEFAULT_HASH_DIM: usize = 32;
/// Default encoder depth.
pub const DEFAULT_DEPTH: usize = 3;

/// Norm deviation above which [`load_hashes`] re-normalizes a record.
const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm code of one private sample. Invariants: finite entries,
/// L2 norm 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct HashVector {
    values: Vec<f64>,
}

impl HashVector {
    /// Wrap an already-normalized vector, validating the invariants.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "hash vector")?;
        if values.is_empty() {
            return Err(Error::invalid_argument("empty hash vector"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "hash vector norm {norm} deviates from 1"
            )));
        }
        Ok(HashVector { values })
    }

    /// Normalize `values` to unit L2 norm and wrap. A (near-)zero input maps
    /// to the first basis vector so that degenerate samples still produce a
    /// valid hash.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "hash vector")?;
        if values.is_empty() {
            return Err(Error::invalid_argument("empty hash vector"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(HashVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Cosine similarity; hashes are unit norm so this is the dot product.
    pub fn cosine(&self, other: &HashVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Shape and seed of the fixed random encoder. The output dimension must be
/// strictly below the input dimension (information bottleneck).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    /// Per-layer output widths; the last entry is the hash dimension.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, widths: Vec<usize>, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid_argument("input_dim must be positive"));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid_argument(
                "widths must be non-empty and positive",
            ));
        }
        let hash_dim = *widths.last().expect("non-empty");
        if hash_dim >= input_dim {
            return Err(Error::InvalidArgument(format!(
                "hash dim {hash_dim} must be below input dim {input_dim}"
            )));
        }
        Ok(EncoderSpec {
            input_dim,
            widths,
            seed,
        })
    }

    /// `depth` layers interpolating geometrically from `input_dim` down to
    /// `hash_dim`.
    pub fn with_defaults(input_dim: usize, hash_dim: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::invalid_argument("depth must be positive"));
        }
        if hash_dim == 0 || hash_dim >= input_dim {
            return Err(Error::InvalidArgument(format!(
                "hash dim {hash_dim} must be in [1, input_dim {input_dim})"
            )));
        }
        let ratio = (hash_dim as f64 / input_dim as f64).powf(1.0 / depth as f64);
        let mut widths = Vec::with_capacity(depth);
        let mut width = input_dim as f64;
        for _ in 0..depth - 1 {
            width *= ratio;
            widths.push((width.round() as usize).max(hash_dim));
        }
        widths.push(hash_dim);
        EncoderSpec::new(input_dim, widths, seed)
    }

    pub fn hash_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

/// The instantiated encoder: fixed random weights, never trained. Tracks how
/// many encode calls it has served so tests can assert encoding happens only
/// during initialization.
#[derive(Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    /// Row-major weight matrices, one per layer.
    layers: Vec<Vec<f64>>,
    calls: AtomicU64,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.widths.len());
        let mut fan_in = spec.input_dim;
        for &out in &spec.widths {
            let bound = 1.0 / (fan_in as f64).sqrt();
            layers.push((0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect());
            fan_in = out;
        }
        Encoder {
            spec,
            layers,
            calls: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn hash_dim(&self) -> usize {
        self.spec.hash_dim()
    }

    /// Number of encode calls served since construction.
    pub fn encode_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Encode a raw sample: `depth` rounds of fixed random linear map +
    /// tanh, then L2 normalization. Deterministic in `(spec, x)`.
    pub fn encode(&self, x: &[f64]) -> Result<HashVector> {
        if x.len() != self.spec.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input length {} does not match encoder input dim {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        check_finite(x, "encoder input")?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut current = x.to_vec();
        let mut fan_in = self.spec.input_dim;
        for (weights, &out) in self.layers.iter().zip(&self.spec.widths) {
            let mut next = vec![0.0; out];
            for (o, n) in next.iter_mut().enumerate() {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                *n = row
                    .iter()
                    .zip(&current)
                    .map(|(w, a)| w * a)
                    .sum::<f64>()
                    .tanh();
            }
            current = next;
            fan_in = out;
        }
        HashVector::normalized(current)
    }
}

/// Read a hash file: one record per line,
/// `client_id<TAB>sample_id<TAB>v1,v2,...,vd`. Vectors whose norm deviates
/// from 1 by more than 1e-6 are re-normalized on load.
pub fn load_hashes(path: &Path) -> Result<BTreeMap<SampleIndex, HashVector>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut map = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (line_no, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {}", line_no + 1),
            message,
        };
        let mut fields = line.split('\t');
        let client: u32 = fields
            .next()
            .ok_or_else(|| err("missing client id".into()))?
            .trim()
            .parse()
            .map_err(|e| err(format!("bad client id: {e}")))?;
        let sample: u32 = fields
            .next()
            .ok_or_else(|| err("missing sample id".into()))?
            .trim()
            .parse()
            .map_err(|e| err(format!("bad sample id: {e}")))?;
        let values_field = fields.next().ok_or_else(|| err("missing values".into()))?;
        if fields.next().is_some() {
            return Err(err("too many tab-separated fields".into()));
        }
        let values: Vec<f64> = values_field
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("bad value: {e}")))?;
        check_finite(&values, "hash record").map_err(|e| err(e.to_string()))?;
        if let Some(d) = dim {
            if values.len() != d {
                return Err(Error::Format(format!(
                    "line {}: dimension {} differs from first record's {d}",
                    line_no + 1,
                    values.len()
                )));
            }
        } else {
            dim = Some(values.len());
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let hash = if (norm - 1.0).abs() > NORM_TOLERANCE {
            HashVector::normalized(values).map_err(|e| err(e.to_string()))?
        } else {
            HashVector { values }
        };
        let id = SampleIndex { client, sample };
        if map.insert(id, hash).is_some() {
            return Err(err(format!("duplicate record for ({client}, {sample})")));
        }
    }
    Ok(map)
}

/// Write hashes in the format [`load_hashes`] reads.
pub fn save_hashes(map: &BTreeMap<SampleIndex, HashVector>, w: &mut impl Write) -> Result<()> {
    for (id, hash) in map {
        let values = hash
            .as_slice()
            .iter()
            .map(|v| format!("{v:.17}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{}\t{}\t{values}", id.client, id.sample)?;
    }
    Ok(())
}
