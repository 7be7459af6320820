//! Protocol execution: one-shot initialization (hash upload, cache build,
//! relation freezing) and per-round training for the cache-driven algorithm,
//! the class-grained logit baseline, and standalone local training, under a
//! synchronous round-robin or seeded asynchronous schedule, with exact
//! communication accounting throughout.

pub mod config;
pub mod messages;
pub mod schedule;

use std::collections::BTreeMap;

use crate::cache::{ensemble, KnowledgeCache, RelationStats, SampleIndex};
use crate::data::{
    dirichlet_partition, load_idx, split_shard, subsample_train, synth_gaussian, ClientShard,
    LabeledDataset,
};
use crate::encoder::{load_hashes, Encoder, EncoderSpec, HashVector};
use crate::metrics::{MetricsReport, RoundRecord};
use crate::models::{
    build_model, ClientModel, DistillConfig, DistillObjective, ModelSpec, TrainExample,
};
use crate::numeric::ProbDist;
use crate::seeds::derive;
use crate::{ann::HnswParams, Error, Result};

pub use config::{Algorithm, DataSource, ExperimentConfig, ModelAssignment, Schedule};
pub use messages::{CommLedger, Direction, Message, MessageKind};
pub use schedule::{async_schedule, sync_schedule, BatchEvent};

/// Distillation weight of the class-logit baseline; the method has no
/// individually tuned hyper-parameters.
pub const FD_GAMMA: f64 = 1.0;

#[derive(Debug)]
pub struct ClientState {
    pub model: ClientModel,
    pub shard: ClientShard,
    pub rounds_participated: u64,
}

/// Build the source dataset named by the config.
pub fn build_dataset(config: &ExperimentConfig) -> Result<LabeledDataset> {
    match &config.data {
        DataSource::Synth {
            classes,
            per_class,
            dim,
            class_sep,
        } => synth_gaussian(
            *classes,
            *per_class,
            *dim,
            *class_sep,
            derive(config.seed, "data", 0),
        ),
        DataSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Dataset -> Dirichlet partition -> per-client train/test shards, with the
/// optional local-fraction subsample applied to the train side.
pub fn build_shards(config: &ExperimentConfig) -> Result<Vec<ClientShard>> {
    let dataset = build_dataset(config)?;
    let global_size = dataset.len();
    let partitions = dirichlet_partition(
        &dataset,
        config.clients,
        config.alpha,
        derive(config.seed, "partition", 0),
    )?;
    let mut shards = Vec::with_capacity(partitions.len());
    for (k, partition) in partitions.into_iter().enumerate() {
        let mut shard = split_shard(
            k as u32,
            partition,
            config.test_fraction,
            derive(config.seed, "split", k as u64),
        )?;
        if let Some(fraction) = config.local_fraction {
            let target =
                ((fraction * global_size as f64 / config.clients as f64).round() as usize).max(1);
            subsample_train(&mut shard, target, derive(config.seed, "subsample", k as u64))?;
        }
        shards.push(shard);
    }
    Ok(shards)
}

#[derive(Debug)]
pub struct Federation {
    config: ExperimentConfig,
    clients: Vec<ClientState>,
    cache: Option<KnowledgeCache>,
    encoder: Option<Encoder>,
    ledger: CommLedger,
    records: Vec<RoundRecord>,
    relation_stats: Option<RelationStats>,
    warnings: Vec<String>,
    num_classes: usize,
    completed_rounds: usize,
}

impl Federation {
    /// Build everything from the config: data, shards, models, and (for the
    /// cache-driven algorithm) the initialized frozen knowledge cache.
    pub fn initialize(config: &ExperimentConfig) -> Result<Federation> {
        config.validate()?;
        let shards = build_shards(config)?;
        Self::initialize_with_shards(config, shards, false)
    }

    /// Initialize over externally built shards. `record_cache_events` turns
    /// on the cache's event log for replay checking.
    pub fn initialize_with_shards(
        config: &ExperimentConfig,
        shards: Vec<ClientShard>,
        record_cache_events: bool,
    ) -> Result<Federation> {
        config.validate()?;
        if shards.len() != config.clients {
            return Err(Error::InvalidArgument(format!(
                "config expects {} clients but {} shards were provided",
                config.clients,
                shards.len()
            )));
        }
        for (k, shard) in shards.iter().enumerate() {
            if shard.client_id != k as u32 {
                return Err(Error::InvalidArgument(format!(
                    "shard at position {k} has client_id {}",
                    shard.client_id
                )));
            }
        }
        let num_classes = shards
            .first()
            .map(|s| s.train.num_classes())
            .ok_or_else(|| Error::invalid_argument("no shards"))?;
        let input_dim = shards
            .iter()
            .map(|s| if s.train.is_empty() { s.test.dim() } else { s.train.dim() })
            .find(|&d| d > 0)
            .ok_or_else(|| Error::invalid_argument("all shards are empty"))?;

        let mut warnings = Vec::new();
        let mut clients = Vec::with_capacity(shards.len());
        for shard in shards {
            let k = shard.client_id as usize;
            if shard.train.is_empty() {
                warnings.push(format!("client {k}: empty training shard, will be skipped"));
            }
            let spec = match config.model_assignment {
                ModelAssignment::RoundRobin => ModelSpec::by_client_index(k, input_dim, num_classes),
                ModelAssignment::Uniform(arch) => ModelSpec::for_arch(arch, input_dim, num_classes),
            };
            let model = build_model(spec, derive(config.seed, "model", k as u64))?;
            clients.push(ClientState {
                model,
                shard,
                rounds_participated: 0,
            });
        }

        let mut federation = Federation {
            config: config.clone(),
            clients,
            cache: None,
            encoder: None,
            ledger: CommLedger::new(),
            records: Vec::new(),
            relation_stats: None,
            warnings,
            num_classes,
            completed_rounds: 0,
        };

        if config.algorithm == Algorithm::FedCache {
            federation.run_cache_initialization(record_cache_events, input_dim)?;
        }
        // Snapshot 0 marks the end of initialization for every algorithm.
        federation.ledger.snapshot();
        Ok(federation)
    }

    /// Hash every training sample (one-shot), upload with index and label,
    /// initialize the cache, build relations, and freeze.
    fn run_cache_initialization(
        &mut self,
        record_cache_events: bool,
        input_dim: usize,
    ) -> Result<()> {
        let config = &self.config;
        let mut cache = if record_cache_events {
            KnowledgeCache::recording(self.num_classes)
        } else {
            KnowledgeCache::new(self.num_classes)
        };

        let file_hashes: Option<BTreeMap<SampleIndex, HashVector>> = match &config.hash_file {
            Some(path) => Some(load_hashes(path)?),
            None => None,
        };
        let encoder = if file_hashes.is_none() {
            Some(Encoder::new(EncoderSpec::with_defaults(
                input_dim,
                config.hash_dim,
                config.encoder_depth,
                derive(config.seed, "encoder", 0),
            )?))
        } else {
            None
        };

        for state in &self.clients {
            let client = state.shard.client_id;
            for (i, sample) in state.shard.train.samples().iter().enumerate() {
                let id = SampleIndex {
                    client,
                    sample: i as u32,
                };
                let hash = match (&file_hashes, &encoder) {
                    (Some(map), _) => map
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| Error::NotFound(format!("hash file has no entry for {id}")))?,
                    (None, Some(enc)) => enc.encode(&sample.features)?,
                    (None, None) => unreachable!("either hash file or encoder is set"),
                };
                let message = Message::HashUpload {
                    id,
                    label: sample.label as u32,
                    hash,
                };
                self.ledger.record(Direction::Up, &message);
                let Message::HashUpload { hash, .. } = message else {
                    unreachable!()
                };
                cache.init_entry(id, sample.label as u32, hash)?;
            }
        }

        let params = HnswParams {
            max_degree: config.hnsw_m,
            ef_construction: config.hnsw_ef_construction,
            ef_search: config.hnsw_ef_search,
            seed: derive(config.seed, "hnsw", 0),
        };
        let stats = cache.build_relations(config.r, &params, config.exclude_same_client)?;
        self.relation_stats = Some(stats);
        self.cache = Some(cache);
        self.encoder = encoder;
        Ok(())
    }

    fn batch_counts(&self) -> Vec<usize> {
        self.clients
            .iter()
            .map(|c| c.shard.train.len().div_ceil(self.config.batch_size))
            .collect()
    }

    fn round_schedule(&self, round_no: usize) -> Vec<BatchEvent> {
        let counts = self.batch_counts();
        match self.config.schedule {
            Schedule::Sync => sync_schedule(&counts),
            Schedule::Async => {
                let base = self
                    .config
                    .async_seed
                    .unwrap_or_else(|| derive(self.config.seed, "async", 0));
                async_schedule(&counts, derive(base, "round", round_no as u64))
            }
        }
    }

    /// Execute one training round and append its record.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let round_no = self.completed_rounds + 1;
        match self.config.algorithm {
            Algorithm::FedCache => self.fedcache_round(round_no)?,
            Algorithm::Fd => self.fd_round()?,
            Algorithm::Standalone => self.standalone_round()?,
        }
        self.completed_rounds = round_no;
        self.evaluate_round(round_no)?;
        Ok(self.records.last().expect("record just pushed"))
    }

    /// One cache-driven round: per batch event, the client extracts and
    /// uploads per-sample logits; the server handles each sample in order —
    /// fetch related knowledge, ensemble, send the teacher down, then store
    /// the fresh upload — and the client takes one SGD step on the batch.
    fn fedcache_round(&mut self, round_no: usize) -> Result<()> {
        let events = self.round_schedule(round_no);
        self.fedcache_process_events(events)
    }

    /// Run one cache-driven round under a caller-supplied event order, then
    /// evaluate. The server handles events strictly in the given order;
    /// events must keep each client's batches in sequence.
    pub fn run_round_with_schedule(&mut self, events: Vec<BatchEvent>) -> Result<&RoundRecord> {
        if self.config.algorithm != Algorithm::FedCache {
            return Err(Error::State(
                "explicit schedules only apply to the cache-driven algorithm".into(),
            ));
        }
        self.fedcache_process_events(events)?;
        self.completed_rounds += 1;
        self.evaluate_round(self.completed_rounds)?;
        Ok(self.records.last().expect("record just pushed"))
    }

    fn fedcache_process_events(&mut self, events: Vec<BatchEvent>) -> Result<()> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("cache missing for cache-driven round".into()))?;
        let distill = DistillConfig {
            weight: self.config.beta,
            temperature: self.config.temperature,
            objective: DistillObjective::KlDivergence,
        };
        let batch_size = self.config.batch_size;

        for event in events {
            let state = &mut self.clients[event.client as usize];
            let train = &state.shard.train;
            let start = event.batch_index * batch_size;
            let end = (start + batch_size).min(train.len());

            let mut teachers: Vec<Option<ProbDist>> = Vec::with_capacity(end - start);
            for idx in start..end {
                let sample = train.sample(idx);
                let id = SampleIndex {
                    client: event.client,
                    sample: idx as u32,
                };
                let logits = state.model.forward(&sample.features)?;
                let message = Message::KnowledgeUpload { id, logits };
                self.ledger.record(Direction::Up, &message);
                let Message::KnowledgeUpload { logits, .. } = message else {
                    unreachable!()
                };

                // Server side, per upload: fetch precedes the update so the
                // returned ensemble never contains this upload's own logits.
                let mut fetched = cache.fetch(id)?;
                if self.config.skip_cold_teachers {
                    fetched.retain(|k| k.version > 0);
                }
                let teacher = ensemble(&fetched, self.config.temperature)?;
                if let Some(t) = &teacher {
                    self.ledger.record(
                        Direction::Down,
                        &Message::EnsembleDown {
                            id,
                            teacher: t.clone(),
                        },
                    );
                }
                cache.update(id, logits)?;
                teachers.push(teacher);
            }

            let examples: Vec<TrainExample> = (start..end)
                .zip(&teachers)
                .map(|(idx, teacher)| {
                    let sample = train.sample(idx);
                    TrainExample {
                        features: &sample.features,
                        label: sample.label,
                        teacher: teacher.as_ref(),
                    }
                })
                .collect();
            state.model.train_batch(&examples, &distill, self.config.lr)?;
        }
        Ok(())
    }

    /// One class-logit baseline round: every client uploads per-class mean
    /// logits with counts, the server forms leave-one-out class teachers
    /// over the clients holding each class, sends them down, and clients run
    /// one local epoch of soft-target distillation.
    fn fd_round(&mut self) -> Result<()> {
        let classes = self.num_classes;
        let k_total = self.clients.len();

        // Phase 1: per-class mean logits with current models.
        let mut class_means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k_total);
        let mut class_counts: Vec<Vec<u64>> = Vec::with_capacity(k_total);
        for state in &self.clients {
            let mut sums = vec![vec![0.0; classes]; classes];
            let mut counts = vec![0u64; classes];
            for sample in state.shard.train.samples() {
                let logits = state.model.forward(&sample.features)?;
                for (s, z) in sums[sample.label].iter_mut().zip(&logits) {
                    *s += z;
                }
                counts[sample.label] += 1;
            }
            for (row, &count) in sums.iter_mut().zip(&counts) {
                if count > 0 {
                    row.iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            let message = Message::FdClassUpload {
                client: state.shard.client_id,
                class_logits: sums.clone(),
                class_counts: counts.clone(),
            };
            self.ledger.record(Direction::Up, &message);
            class_means.push(sums);
            class_counts.push(counts);
        }

        // Phase 2: leave-one-out teachers over the holders of each class.
        let all_teacher_logits = fd_leave_one_out_teachers(&class_means, &class_counts);
        let mut teachers_by_client: Vec<Vec<Option<ProbDist>>> = Vec::with_capacity(k_total);
        for (state, teacher_logits) in self.clients.iter().zip(all_teacher_logits) {
            let message = Message::FdClassDown {
                client: state.shard.client_id,
                teachers: teacher_logits.clone(),
            };
            self.ledger.record(Direction::Down, &message);
            let dists: Vec<Option<ProbDist>> = teacher_logits
                .into_iter()
                .map(|row| {
                    row.map(|logits| crate::numeric::softmax_temp(&logits, 1.0))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            teachers_by_client.push(dists);
        }

        // Phase 3: one local epoch of soft-target distillation.
        let distill = DistillConfig {
            weight: FD_GAMMA,
            temperature: 1.0,
            objective: DistillObjective::SoftCrossEntropy,
        };
        for (state, teachers) in self.clients.iter_mut().zip(&teachers_by_client) {
            train_epoch(state, self.config.batch_size, self.config.lr, &distill, |sample| {
                teachers[sample.label].as_ref()
            })?;
        }
        Ok(())
    }

    /// One standalone round: plain local cross-entropy training, no traffic.
    fn standalone_round(&mut self) -> Result<()> {
        let distill = DistillConfig {
            weight: 0.0,
            temperature: self.config.temperature,
            objective: DistillObjective::KlDivergence,
        };
        for state in &mut self.clients {
            train_epoch(state, self.config.batch_size, self.config.lr, &distill, |_| None)?;
        }
        Ok(())
    }

    fn evaluate_round(&mut self, round_no: usize) -> Result<()> {
        let mut client_ua = Vec::with_capacity(self.clients.len());
        for state in &mut self.clients {
            if !state.shard.train.is_empty() {
                state.rounds_participated += 1;
            }
            let ua = if state.shard.test.is_empty() {
                self.warnings
                    .push(format!("client {}: empty test shard", state.shard.client_id));
                0.0
            } else {
                state.model.evaluate(&state.shard.test)?
            };
            client_ua.push(ua);
        }
        let avg_ua = client_ua.iter().sum::<f64>() / client_ua.len().max(1) as f64;
        let (cumulative_up, cumulative_down) = self.ledger.snapshot();
        self.records.push(RoundRecord {
            round: round_no,
            client_ua,
            avg_ua,
            cumulative_up,
            cumulative_down,
        });
        Ok(())
    }

    /// Run the configured number of rounds and emit the report.
    pub fn run_to_completion(&mut self) -> Result<MetricsReport> {
        while self.completed_rounds < self.config.rounds {
            self.run_round()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            algorithm: self.config.algorithm.as_str().to_string(),
            records: self.records.clone(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Mutable access to client state, e.g. to install hand-crafted models
    /// before driving rounds manually.
    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn cache(&self) -> Option<&KnowledgeCache> {
        self.cache.as_ref()
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn relation_stats(&self) -> Option<RelationStats> {
        self.relation_stats
    }

    /// Encode calls served by the built-in encoder (0 when a hash file was
    /// used). Stays constant after initialization.
    pub fn encoder_calls(&self) -> u64 {
        self.encoder.as_ref().map_or(0, |e| e.encode_count())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn completed_rounds(&self) -> usize {
        self.completed_rounds
    }
}

/// Leave-one-out class teachers for the class-logit baseline.
///
/// `class_means[k][y]` is client k's mean logits over its label-y samples
/// and `class_counts[k][y]` the matching sample count. The teacher for
/// `(k, y)` is the mean of the other holders' class means; classes with no
/// other holder get `None`. For a class present on every client this is
/// exactly `(Σ_l F_l - F_k) / (K - 1)`.
pub fn fd_leave_one_out_teachers(
    class_means: &[Vec<Vec<f64>>],
    class_counts: &[Vec<u64>],
) -> Vec<Vec<Option<Vec<f64>>>> {
    let k_total = class_means.len();
    let classes = class_counts.first().map_or(0, |c| c.len());
    let width = class_means
        .first()
        .and_then(|m| m.first())
        .map_or(0, |row| row.len());

    let mut per_class_totals = vec![vec![0.0; width]; classes];
    let mut holders = vec![0usize; classes];
    for (means, counts) in class_means.iter().zip(class_counts) {
        for class in 0..classes {
            if counts[class] > 0 {
                holders[class] += 1;
                for (t, v) in per_class_totals[class].iter_mut().zip(&means[class]) {
                    *t += v;
                }
            }
        }
    }

    (0..k_total)
        .map(|k| {
            (0..classes)
                .map(|class| {
                    let own_holds = class_counts[k][class] > 0;
                    let denom = holders[class] - usize::from(own_holds);
                    if denom == 0 {
                        return None;
                    }
                    Some(
                        per_class_totals[class]
                            .iter()
                            .zip(&class_means[k][class])
                            .map(|(total, own)| {
                                let numer = if own_holds { total - own } else { *total };
                                numer / denom as f64
                            })
                            .collect(),
                    )
                })
                .collect()
        })
        .collect()
}

/// One local epoch: every training batch in order, one SGD step each, with
/// teachers looked up per sample.
fn train_epoch<'a, F>(
    state: &'a mut ClientState,
    batch_size: usize,
    lr: f64,
    distill: &DistillConfig,
    teacher_for: F,
) -> Result<()>
where
    F: Fn(&crate::data::Sample) -> Option<&'a ProbDist>,
{
    let train = &state.shard.train;
    let n = train.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let examples: Vec<TrainExample> = (start..end)
            .map(|idx| {
                let sample = train.sample(idx);
                TrainExample {
                    features: &sample.features,
                    label: sample.label,
                    teacher: teacher_for(sample),
                }
            })
            .collect();
        state.model.train_batch(&examples, distill, lr)?;
        start = end;
    }
    Ok(())
}

/// Validate the config, build the federation, run every round, and return
/// the metrics report. Deterministic for a fixed config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    let mut federation = Federation::initialize(config)?;
    federation.run_to_completion()
}
