//! Randomized interleavings of updates and fetches against the recording
//! cache, replayed through the sequential reference model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedcache_core::ann::HnswParams;
use fedcache_core::cache::{KnowledgeCache, SampleIndex};
use fedcache_core::encoder::HashVector;
use fedcache_oracles::replay_check;

#[test]
fn randomized_interleavings_replay_cleanly() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 4;
        let mut cache = KnowledgeCache::recording(classes);
        let ids: Vec<SampleIndex> = (0..40u32)
            .map(|i| SampleIndex {
                client: i % 8,
                sample: i / 8,
            })
            .collect();
        for &id in &ids {
            let hash =
                HashVector::normalized((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap();
            cache.init_entry(id, rng.gen_range(0..classes) as u32, hash).unwrap();
        }
        cache.build_relations(4, &HnswParams::default(), false).unwrap();

        for _ in 0..100 {
            let id = ids[rng.gen_range(0..ids.len())];
            if rng.gen_bool(0.5) {
                let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
                cache.update(id, logits).unwrap();
            } else {
                cache.fetch(id).unwrap();
            }
        }
        replay_check(&cache.take_events()).unwrap();
    }
}
