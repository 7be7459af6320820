//! Batch-event schedules for one training round. Each client's own batches
//! always execute in order; the schedule only decides how clients interleave
//! at the server.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One unit of client work: the client's next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEvent {
    pub client: u32,
    pub batch_index: usize,
}

/// Synchronous order: round-robin over clients by batch slot. Clients with
/// fewer batches simply drop out of later slots.
pub fn sync_schedule(batch_counts: &[usize]) -> Vec<BatchEvent> {
    let max_batches = batch_counts.iter().copied().max().unwrap_or(0);
    let mut events = Vec::with_capacity(batch_counts.iter().sum());
    for slot in 0..max_batches {
        for (client, &count) in batch_counts.iter().enumerate() {
            if slot < count {
                events.push(BatchEvent {
                    client: client as u32,
                    batch_index: slot,
                });
            }
        }
    }
    events
}

/// Seeded asynchronous interleaving: repeatedly pick a uniformly random
/// client among those with work remaining. No global barrier; per-client
/// batch order is preserved by construction.
pub fn async_schedule(batch_counts: &[usize], seed: u64) -> Vec<BatchEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = batch_counts.to_vec();
    let mut next_batch: Vec<usize> = vec![0; batch_counts.len()];
    let mut active: Vec<u32> = (0..batch_counts.len() as u32)
        .filter(|&c| remaining[c as usize] > 0)
        .collect();
    let mut events = Vec::with_capacity(batch_counts.iter().sum());
    while !active.is_empty() {
        let pick = rng.gen_range(0..active.len());
        let client = active[pick];
        events.push(BatchEvent {
            client,
            batch_index: next_batch[client as usize],
        });
        next_batch[client as usize] += 1;
        remaining[client as usize] -= 1;
        if remaining[client as usize] == 0 {
            active.swap_remove(pick);
        }
    }
    events
}
