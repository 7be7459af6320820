//! End-to-end protocol properties: exact byte accounting, fetch-before-
//! update semantics, knowledge freshness, schedule equivalence, message-kind
//! audits, and determinism.

use fedcache_core::cache::{CacheEvent, SampleIndex};
use fedcache_core::data::{ClientShard, LabeledDataset, Sample};
use fedcache_core::encoder::{save_hashes, Encoder, EncoderSpec};
use fedcache_core::federation::{
    build_shards, run_experiment, sync_schedule, Algorithm, ExperimentConfig, Federation,
    MessageKind, ModelAssignment, Schedule,
};
use fedcache_core::models::ArchitectureId;

fn small_config() -> ExperimentConfig {
    let mut config = ExperimentConfig {
        clients: 6,
        rounds: 2,
        seed: 41,
        ..ExperimentConfig::default()
    };
    config
        .set("synth_per_class", "30")
        .and_then(|_| config.set("synth_dim", "12"))
        .and_then(|_| config.set("synth_classes", "5"))
        .and_then(|_| config.set("hash_dim", "8"))
        .unwrap();
    config
}

fn total_train(federation: &Federation) -> u64 {
    federation
        .clients()
        .iter()
        .map(|c| c.shard.train.len() as u64)
        .sum()
}

#[test]
fn init_ledger_matches_closed_form_hash_bytes() {
    let config = small_config();
    let federation = Federation::initialize(&config).unwrap();
    let n: u64 = total_train(&federation);
    let d = config.hash_dim as u64;

    let hash_totals = federation.ledger().kind_totals(
        fedcache_core::federation::Direction::Up,
        MessageKind::HashUpload,
    );
    assert_eq!(hash_totals.bytes, n * (8 * d + 12));
    assert_eq!(hash_totals.messages, n);
    assert_eq!(federation.ledger().total_down(), 0);

    // Cache entry count equals the number of training samples.
    assert_eq!(federation.cache().unwrap().len() as u64, n);
    // Every sample was encoded exactly once.
    assert_eq!(federation.encoder_calls(), n);
}

#[test]
fn per_round_bytes_match_closed_form_and_ignore_model_width() {
    let mut config = small_config();
    config.rounds = 3;
    let classes = 5u64;

    let mut totals_by_arch = Vec::new();
    for arch in [ArchitectureId::MlpSmall, ArchitectureId::MlpLarge] {
        config.model_assignment = ModelAssignment::Uniform(arch);
        let mut federation = Federation::initialize(&config).unwrap();
        let n = total_train(&federation);
        let init_up = federation.ledger().total_up();
        federation.run_round().unwrap();

        let up_delta = federation.ledger().total_up() - init_up;
        let down_delta = federation.ledger().total_down();
        // Every sample uploads logits and receives one teacher per round.
        assert_eq!(up_delta, n * (8 * classes + 8));
        assert_eq!(down_delta, n * (8 * classes + 8));

        federation.run_round().unwrap();
        federation.run_round().unwrap();
        assert_eq!(
            federation.ledger().total_up() - init_up,
            3 * n * (8 * classes + 8)
        );
        totals_by_arch.push((
            federation.ledger().total_up() - init_up,
            federation.ledger().total_down(),
        ));
        // Encoder was not called again after initialization.
        assert_eq!(federation.encoder_calls(), n);
    }
    // Doubling (or more) the hidden widths moves zero bytes.
    assert_eq!(totals_by_arch[0], totals_by_arch[1]);
}

#[test]
fn fd_round_bytes_match_closed_form() {
    let mut config = small_config();
    config.algorithm = Algorithm::Fd;
    config.rounds = 2;
    let classes = 5u64;
    let k = config.clients as u64;
    let mut federation = Federation::initialize(&config).unwrap();
    assert!(federation.cache().is_none());
    federation.run_round().unwrap();
    assert_eq!(
        federation.ledger().total_up(),
        k * (8 * classes * classes + 4 * classes)
    );
    assert_eq!(federation.ledger().total_down(), k * 8 * classes * classes);
    let kinds = federation.ledger().kinds_seen();
    assert_eq!(
        kinds,
        vec![MessageKind::FdClassUpload, MessageKind::FdClassDown]
    );
}

#[test]
fn standalone_moves_no_bytes() {
    let mut config = small_config();
    config.algorithm = Algorithm::Standalone;
    let report = run_experiment(&config).unwrap();
    let last = report.records.last().unwrap();
    assert_eq!(last.cumulative_up, 0);
    assert_eq!(last.cumulative_down, 0);
}

#[test]
fn no_parameters_on_wire_kind_audit() {
    let mut config = small_config();
    config.rounds = 2;
    let mut federation = Federation::initialize(&config).unwrap();
    federation.run_round().unwrap();
    federation.run_round().unwrap();

    // Heterogeneous population: three distinct parameter layouts.
    let mut sizes: Vec<usize> = federation
        .clients()
        .iter()
        .map(|c| c.model.params.len())
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    assert_eq!(sizes.len(), 3);

    // The complete traffic consists of hashes, logits, and teachers.
    assert_eq!(
        federation.ledger().kinds_seen(),
        vec![
            MessageKind::HashUpload,
            MessageKind::KnowledgeUpload,
            MessageKind::EnsembleDown
        ]
    );
}

#[test]
fn beta_zero_run_equals_standalone_exactly() {
    let mut fed_config = small_config();
    fed_config.beta = 0.0;
    fed_config.rounds = 3;
    let mut alone_config = fed_config.clone();
    alone_config.algorithm = Algorithm::Standalone;

    let mut fed = Federation::initialize(&fed_config).unwrap();
    let mut alone = Federation::initialize(&alone_config).unwrap();
    for _ in 0..3 {
        fed.run_round().unwrap();
        alone.run_round().unwrap();
    }
    for (a, b) in fed.clients().iter().zip(alone.clients()) {
        assert_eq!(a.model.params, b.model.params);
    }
}

#[test]
fn knowledge_versions_track_participation() {
    let mut config = small_config();
    config.rounds = 4;
    let mut federation = Federation::initialize(&config).unwrap();
    for _ in 0..4 {
        federation.run_round().unwrap();
    }
    let cache = federation.cache().unwrap();
    for state in federation.clients() {
        for i in 0..state.shard.train.len() {
            let id = SampleIndex {
                client: state.shard.client_id,
                sample: i as u32,
            };
            assert_eq!(
                cache.knowledge_version(id).unwrap(),
                state.rounds_participated
            );
        }
    }
    cache.audit_relations().unwrap();
}

#[test]
fn rebuilding_from_the_same_seed_reproduces_relations() {
    let config = small_config();
    let a = Federation::initialize(&config).unwrap();
    let b = Federation::initialize(&config).unwrap();
    let cache_a = a.cache().unwrap();
    let cache_b = b.cache().unwrap();
    assert_eq!(cache_a.len(), cache_b.len());
    for id in cache_a.ids() {
        assert_eq!(cache_a.relations_of(id), cache_b.relations_of(id));
    }
}

#[test]
fn run_experiment_is_deterministic() {
    let mut config = small_config();
    config.rounds = 2;
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_eq!(a.records, b.records);

    config.schedule = Schedule::Async;
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn async_engine_with_round_robin_schedule_equals_sync() {
    let mut sync_config = small_config();
    sync_config.rounds = 2;
    let mut async_config = sync_config.clone();
    async_config.schedule = Schedule::Async;

    let mut by_sync = Federation::initialize(&sync_config).unwrap();
    let mut by_injection = Federation::initialize(&async_config).unwrap();
    let counts: Vec<usize> = by_injection
        .clients()
        .iter()
        .map(|c| c.shard.train.len().div_ceil(async_config.batch_size))
        .collect();
    for _ in 0..2 {
        by_sync.run_round().unwrap();
        by_injection
            .run_round_with_schedule(sync_schedule(&counts))
            .unwrap();
    }
    for (a, b) in by_sync.clients().iter().zip(by_injection.clients()) {
        assert_eq!(a.model.params, b.model.params);
    }
    assert_eq!(by_sync.report().records, by_injection.report().records);
}

#[test]
fn async_seeds_complete_with_invariants_intact() {
    for seed in 0..3u64 {
        let mut config = small_config();
        config.schedule = Schedule::Async;
        config.async_seed = Some(seed);
        config.rounds = 2;
        let mut federation = Federation::initialize(&config).unwrap();
        for _ in 0..2 {
            federation.run_round().unwrap();
        }
        let cache = federation.cache().unwrap();
        cache.audit_relations().unwrap();
        for state in federation.clients() {
            for i in 0..state.shard.train.len() {
                let id = SampleIndex {
                    client: state.shard.client_id,
                    sample: i as u32,
                };
                assert_eq!(cache.knowledge_version(id).unwrap(), 2);
            }
        }
    }
}

/// Two clients, one same-label sample each, hand-set constant models. The
/// first handled sample must see the cold (uniform) cache even though its
/// own upload lands in the same round; the second must see the first's
/// fresh logits.
#[test]
fn fetch_before_update_with_sentinel_uploads() {
    let classes = 3;
    let dataset = |v: f64| {
        LabeledDataset::new(
            vec![Sample {
                features: vec![v, v],
                label: 0,
            }],
            classes,
        )
        .unwrap()
    };
    let shards = vec![
        ClientShard {
            client_id: 0,
            train: dataset(0.25),
            test: dataset(0.25),
        },
        ClientShard {
            client_id: 1,
            train: dataset(0.75),
            test: dataset(0.75),
        },
    ];

    let mut config = ExperimentConfig {
        clients: 2,
        r: 1,
        rounds: 1,
        batch_size: 1,
        ..ExperimentConfig::default()
    };
    config.set("synth_classes", "3").unwrap();
    config.set("synth_dim", "2").unwrap();
    config.set("hash_dim", "1").unwrap();

    let mut federation =
        Federation::initialize_with_shards(&config, shards, true).unwrap();
    // Constant models: zero weights, distinct output biases (the sentinel).
    for (k, state) in federation.clients_mut().iter_mut().enumerate() {
        let params = &mut state.model.params;
        params.iter_mut().for_each(|p| *p = 0.0);
        let len = params.len();
        params[len - classes..].copy_from_slice(&[k as f64 + 1.0, 0.0, 0.0]);
    }
    federation.run_round().unwrap();

    let events = federation.cache().unwrap().take_events();
    let fetches: Vec<&CacheEvent> = events
        .iter()
        .filter(|e| matches!(e, CacheEvent::Fetch { .. }))
        .collect();
    assert_eq!(fetches.len(), 2);
    // First fetch (client 0's sample): neighbor still at zero-init.
    if let CacheEvent::Fetch { id, returned, .. } = fetches[0] {
        assert_eq!(*id, SampleIndex { client: 0, sample: 0 });
        assert_eq!(returned[0], vec![0.0; classes]);
    }
    // Second fetch (client 1's sample): sees client 0's sentinel, which was
    // uploaded earlier in this same round; never its own upload.
    if let CacheEvent::Fetch { id, returned, .. } = fetches[1] {
        assert_eq!(*id, SampleIndex { client: 1, sample: 0 });
        assert_eq!(returned[0], vec![1.0, 0.0, 0.0]);
    }
}

#[test]
fn hash_file_escape_hatch_replaces_the_encoder() {
    let config = small_config();
    let shards = build_shards(&config).unwrap();

    // Precompute hashes with a different encoder than the built-in one
    // would be, and feed them through a file.
    let dim = shards[0].train.dim();
    let encoder = Encoder::new(EncoderSpec::with_defaults(dim, 4, 2, 999).unwrap());
    let mut map = std::collections::BTreeMap::new();
    for shard in &shards {
        for (i, sample) in shard.train.samples().iter().enumerate() {
            map.insert(
                SampleIndex {
                    client: shard.client_id,
                    sample: i as u32,
                },
                encoder.encode(&sample.features).unwrap(),
            );
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hashes.tsv");
    let mut buf = Vec::new();
    save_hashes(&map, &mut buf).unwrap();
    std::fs::write(&path, &buf).unwrap();

    let mut file_config = config.clone();
    file_config.hash_file = Some(path);
    let mut federation =
        Federation::initialize_with_shards(&file_config, shards, false).unwrap();
    // No built-in encoder ran; hash bytes reflect the file's 4-dim hashes.
    assert_eq!(federation.encoder_calls(), 0);
    let n = federation
        .clients()
        .iter()
        .map(|c| c.shard.train.len() as u64)
        .sum::<u64>();
    assert_eq!(federation.ledger().total_up(), n * (8 * 4 + 12));
    federation.run_round().unwrap();
    federation.cache().unwrap().audit_relations().unwrap();
}

#[test]
fn exclude_same_client_keeps_relations_cross_client() {
    let mut config = small_config();
    config.exclude_same_client = true;
    let federation = Federation::initialize(&config).unwrap();
    let cache = federation.cache().unwrap();
    cache.audit_relations().unwrap();
    let mut cross = 0usize;
    for id in cache.ids() {
        for neighbor in cache.relations_of(id).unwrap() {
            assert_ne!(neighbor.client, id.client);
            cross += 1;
        }
    }
    assert!(cross > 0, "expected some cross-client relations");
}

#[test]
fn cold_cache_first_round_teachers_are_uniform() {
    // 2 clients, 2 samples each, all same label, R=1, batch covers all.
    let classes = 3;
    let mk = |values: [f64; 2]| {
        LabeledDataset::new(
            values
                .iter()
                .map(|&v| Sample {
                    features: vec![v, -v],
                    label: 0,
                })
                .collect(),
            classes,
        )
        .unwrap()
    };
    let shards = vec![
        ClientShard {
            client_id: 0,
            train: mk([0.1, 0.4]),
            test: mk([0.1, 0.4]),
        },
        ClientShard {
            client_id: 1,
            train: mk([0.7, 0.9]),
            test: mk([0.7, 0.9]),
        },
    ];
    let mut config = ExperimentConfig {
        clients: 2,
        r: 1,
        rounds: 1,
        batch_size: 4,
        ..ExperimentConfig::default()
    };
    config.set("synth_classes", "3").unwrap();
    config.set("synth_dim", "2").unwrap();
    config.set("hash_dim", "1").unwrap();

    let mut federation = Federation::initialize_with_shards(&config, shards, true).unwrap();
    federation.run_round().unwrap();
    let events = federation.cache().unwrap().take_events();
    // The very first fetch of the round sees only zero knowledge.
    let first_fetch = events
        .iter()
        .find(|e| matches!(e, CacheEvent::Fetch { .. }))
        .unwrap();
    if let CacheEvent::Fetch { returned, .. } = first_fetch {
        assert!(!returned.is_empty());
        assert!(returned.iter().all(|z| z.iter().all(|&v| v == 0.0)));
    }
}
