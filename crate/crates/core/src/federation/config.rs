//! Experiment configuration: a flat key=value text format with stable
//! canonical serialization, so a run is fully reproducible from its config
//! file and the run id can be derived by hashing the canonical form.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::models::ArchitectureId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedCache,
    Fd,
    Standalone,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedCache => "fedcache",
            Algorithm::Fd => "fd",
            Algorithm::Standalone => "standalone",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedcache" => Ok(Algorithm::FedCache),
            "fd" => Ok(Algorithm::Fd),
            "standalone" => Ok(Algorithm::Standalone),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm: {other} (expected fedcache|fd|standalone)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Sync,
    Async,
}

/// How architectures are assigned to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelAssignment {
    /// Heterogeneous: client index mod 3 picks small/medium/large.
    RoundRobin,
    /// Homogeneous: every client uses the given architecture.
    Uniform(ArchitectureId),
}

impl ModelAssignment {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelAssignment::RoundRobin => "mod3",
            ModelAssignment::Uniform(arch) => arch.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mod3" => Ok(ModelAssignment::RoundRobin),
            other => Ok(ModelAssignment::Uniform(ArchitectureId::parse(other)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        classes: usize,
        per_class: usize,
        dim: usize,
        class_sep: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub r: usize,
    pub beta: f64,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub alpha: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub data: DataSource,
    pub hash_dim: usize,
    pub encoder_depth: usize,
    pub hnsw_m: usize,
    pub hnsw_ef_construction: usize,
    pub hnsw_ef_search: usize,
    pub exclude_same_client: bool,
    pub skip_cold_teachers: bool,
    pub schedule: Schedule,
    /// Explicit async interleaving seed; derived from `seed` when absent.
    pub async_seed: Option<u64>,
    pub model_assignment: ModelAssignment,
    /// Per-client training subsample: fraction of the global dataset size
    /// divided by the client count. `None` keeps full shards.
    pub local_fraction: Option<f64>,
    /// Precomputed hash file replacing the built-in encoder.
    pub hash_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: Algorithm::FedCache,
            clients: 20,
            r: 16,
            beta: 1.5,
            temperature: 1.0,
            lr: 0.01,
            batch_size: 8,
            rounds: 30,
            alpha: 1.0,
            seed: 0,
            test_fraction: 0.2,
            data: DataSource::Synth {
                classes: 10,
                per_class: 200,
                dim: 64,
                class_sep: 3.0,
            },
            hash_dim: 32,
            encoder_depth: 3,
            hnsw_m: 16,
            hnsw_ef_construction: 64,
            hnsw_ef_search: 64,
            exclude_same_client: false,
            skip_cold_teachers: false,
            schedule: Schedule::Sync,
            async_seed: None,
            model_assignment: ModelAssignment::RoundRobin,
            local_fraction: None,
            hash_file: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::InvalidArgument(format!("config key {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(Error::InvalidArgument(format!(
            "config key {key}: expected true/false, got {other}"
        ))),
    }
}

impl ExperimentConfig {
    /// Set one field from its flat key. Used by both the file parser and
    /// command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "algorithm" => self.algorithm = Algorithm::parse(value)?,
            "clients" => self.clients = parse_num(key, value)?,
            "r" => self.r = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "test_fraction" => self.test_fraction = parse_num(key, value)?,
            "data" => match value {
                "synth" => {
                    if !matches!(self.data, DataSource::Synth { .. }) {
                        self.data = DataSource::Synth {
                            classes: 10,
                            per_class: 200,
                            dim: 64,
                            class_sep: 3.0,
                        };
                    }
                }
                "idx" => {
                    if !matches!(self.data, DataSource::Idx { .. }) {
                        self.data = DataSource::Idx {
                            images: PathBuf::new(),
                            labels: PathBuf::new(),
                        };
                    }
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "config key data: expected synth|idx, got {other}"
                    )))
                }
            },
            "synth_classes" | "synth_per_class" | "synth_dim" | "synth_sep" => {
                if !matches!(self.data, DataSource::Synth { .. }) {
                    self.data = DataSource::Synth {
                        classes: 10,
                        per_class: 200,
                        dim: 64,
                        class_sep: 3.0,
                    };
                }
                if let DataSource::Synth {
                    classes,
                    per_class,
                    dim,
                    class_sep,
                } = &mut self.data
                {
                    match key {
                        "synth_classes" => *classes = parse_num(key, value)?,
                        "synth_per_class" => *per_class = parse_num(key, value)?,
                        "synth_dim" => *dim = parse_num(key, value)?,
                        "synth_sep" => *class_sep = parse_num(key, value)?,
                        _ => unreachable!(),
                    }
                }
            }
            "idx_images" | "idx_labels" => {
                if !matches!(self.data, DataSource::Idx { .. }) {
                    self.data = DataSource::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    };
                }
                if let DataSource::Idx { images, labels } = &mut self.data {
                    match key {
                        "idx_images" => *images = PathBuf::from(value),
                        "idx_labels" => *labels = PathBuf::from(value),
                        _ => unreachable!(),
                    }
                }
            }
            "hash_dim" => self.hash_dim = parse_num(key, value)?,
            "encoder_depth" => self.encoder_depth = parse_num(key, value)?,
            "hnsw_m" => self.hnsw_m = parse_num(key, value)?,
            "hnsw_ef_construction" => self.hnsw_ef_construction = parse_num(key, value)?,
            "hnsw_ef_search" => self.hnsw_ef_search = parse_num(key, value)?,
            "exclude_same_client" => self.exclude_same_client = parse_bool(key, value)?,
            "skip_cold_teachers" => self.skip_cold_teachers = parse_bool(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "sync" => Schedule::Sync,
                    "async" => Schedule::Async,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "config key schedule: expected sync|async, got {other}"
                        )))
                    }
                }
            }
            "async_seed" => {
                self.async_seed = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "model_assignment" => self.model_assignment = ModelAssignment::parse(value)?,
            "local_fraction" => {
                self.local_fraction = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "hash_file" => {
                self.hash_file = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key: {other}"
                )))
            }
        }
        Ok(())
    }

    /// Parse the flat `key=value` format (one per line, `#` comments).
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key=value", line_no + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Canonical serialization: every field, alphabetical key order. Hashing
    /// this string yields a run id that is stable under re-serialization.
    pub fn canonical_string(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("algorithm", self.algorithm.as_str().to_string()),
            ("alpha", self.alpha.to_string()),
            (
                "async_seed",
                self.async_seed.map_or("none".into(), |s| s.to_string()),
            ),
            ("batch_size", self.batch_size.to_string()),
            ("beta", self.beta.to_string()),
            ("clients", self.clients.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            (
                "exclude_same_client",
                self.exclude_same_client.to_string(),
            ),
            ("hash_dim", self.hash_dim.to_string()),
            (
                "hash_file",
                self.hash_file
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("hnsw_ef_construction", self.hnsw_ef_construction.to_string()),
            ("hnsw_ef_search", self.hnsw_ef_search.to_string()),
            ("hnsw_m", self.hnsw_m.to_string()),
            (
                "local_fraction",
                self.local_fraction.map_or("none".into(), |f| f.to_string()),
            ),
            ("lr", self.lr.to_string()),
            ("model_assignment", self.model_assignment.as_str().to_string()),
            ("r", self.r.to_string()),
            ("rounds", self.rounds.to_string()),
            (
                "schedule",
                match self.schedule {
                    Schedule::Sync => "sync".to_string(),
                    Schedule::Async => "async".to_string(),
                },
            ),
            ("seed", self.seed.to_string()),
            ("skip_cold_teachers", self.skip_cold_teachers.to_string()),
            ("temperature", self.temperature.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
        ];
        match &self.data {
            DataSource::Synth {
                classes,
                per_class,
                dim,
                class_sep,
            } => {
                pairs.push(("data", "synth".to_string()));
                pairs.push(("synth_classes", classes.to_string()));
                pairs.push(("synth_dim", dim.to_string()));
                pairs.push(("synth_per_class", per_class.to_string()));
                pairs.push(("synth_sep", class_sep.to_string()));
            }
            DataSource::Idx { images, labels } => {
                pairs.push(("data", "idx".to_string()));
                pairs.push(("idx_images", images.display().to_string()));
                pairs.push(("idx_labels", labels.display().to_string()));
            }
        }
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (key, value) in pairs {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synth { classes, .. } => Some(*classes),
            DataSource::Idx { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive")))
            }
        };
        positive("clients", self.clients > 0)?;
        positive("r", self.r > 0)?;
        positive("batch_size", self.batch_size > 0)?;
        positive("rounds", self.rounds > 0)?;
        positive("hash_dim", self.hash_dim > 0)?;
        positive("encoder_depth", self.encoder_depth > 0)?;
        positive("hnsw_m", self.hnsw_m > 0)?;
        positive("hnsw_ef_construction", self.hnsw_ef_construction > 0)?;
        positive("hnsw_ef_search", self.hnsw_ef_search > 0)?;
        positive("lr", self.lr > 0.0 && self.lr.is_finite())?;
        positive(
            "temperature",
            self.temperature > 0.0 && self.temperature.is_finite(),
        )?;
        positive("alpha", self.alpha > 0.0 && self.alpha.is_finite())?;
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::invalid_argument("beta must be non-negative"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid_argument("test_fraction must be in (0, 1)"));
        }
        if let Some(f) = self.local_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid_argument("local_fraction must be in (0, 1]"));
            }
        }
        if self.algorithm == Algorithm::Fd && self.clients < 2 {
            return Err(Error::invalid_argument(
                "the class-logit baseline needs at least 2 clients",
            ));
        }
        match &self.data {
            DataSource::Synth {
                classes,
                per_class,
                dim,
                class_sep,
            } => {
                positive("synth_classes", *classes > 0)?;
                positive("synth_per_class", *per_class > 0)?;
                positive("synth_dim", *dim > 0)?;
                if *class_sep < 0.0 || !class_sep.is_finite() {
                    return Err(Error::invalid_argument("synth_sep must be non-negative"));
                }
            }
            DataSource::Idx { images, labels } => {
                if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                    return Err(Error::invalid_argument(
                        "idx data source needs idx_images and idx_labels paths",
                    ));
                }
            }
        }
        Ok(())
    }
}
