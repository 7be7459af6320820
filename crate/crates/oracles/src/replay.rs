//! Sequential replay of a recorded cache event log against a plain map.
//! Confirms that every fetch returned exactly the state defined by the
//! sequence of applied updates — the linearizability reference for the
//! production cache.

use std::collections::BTreeMap;

use fedcache_core::cache::{CacheEvent, SampleIndex};

/// State of one entry in the reference map.
#[derive(Debug, Clone, PartialEq)]
enum EntryState {
    /// Initialized, never updated: logically all zeros of any width.
    Zeros,
    Value(Vec<f64>),
}

/// First point where the log disagrees with sequential map semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDivergence {
    pub event_index: usize,
    pub detail: String,
}

impl std::fmt::Display for ReplayDivergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "event {}: {}", self.event_index, self.detail)
    }
}

/// Re-execute the event log in order against a sequential map and compare
/// every fetch result. An empty log passes.
pub fn replay_check(events: &[CacheEvent]) -> Result<(), ReplayDivergence> {
    let mut map: BTreeMap<SampleIndex, EntryState> = BTreeMap::new();
    let diverge = |index: usize, detail: String| ReplayDivergence {
        event_index: index,
        detail,
    };

    for (index, event) in events.iter().enumerate() {
        match event {
            CacheEvent::Init { id, .. } => {
                if map.insert(*id, EntryState::Zeros).is_some() {
                    return Err(diverge(index, format!("duplicate init for {id}")));
                }
            }
            CacheEvent::Update { id, logits } => {
                match map.get_mut(id) {
                    Some(state) => *state = EntryState::Value(logits.clone()),
                    None => {
                        return Err(diverge(index, format!("update of uninitialized {id}")));
                    }
                }
            }
            CacheEvent::Fetch {
                id,
                neighbors,
                returned,
            } => {
                if neighbors.len() != returned.len() {
                    return Err(diverge(
                        index,
                        format!(
                            "fetch for {id} returned {} values for {} neighbors",
                            returned.len(),
                            neighbors.len()
                        ),
                    ));
                }
                for (neighbor, got) in neighbors.iter().zip(returned) {
                    match map.get(neighbor) {
                        None => {
                            return Err(diverge(
                                index,
                                format!("fetch for {id} touched uninitialized {neighbor}"),
                            ));
                        }
                        Some(EntryState::Zeros) => {
                            if !got.iter().all(|&v| v == 0.0) {
                                return Err(diverge(
                                    index,
                                    format!(
                                        "fetch for {id}: {neighbor} should still be zeros, got {got:?}"
                                    ),
                                ));
                            }
                        }
                        Some(EntryState::Value(expected)) => {
                            if got != expected {
                                return Err(diverge(
                                    index,
                                    format!(
                                        "fetch for {id}: {neighbor} returned {got:?}, expected {expected:?}"
                                    ),
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(client: u32, sample: u32) -> SampleIndex {
        SampleIndex { client, sample }
    }

    #[test]
    fn empty_log_passes() {
        assert!(replay_check(&[]).is_ok());
    }

    #[test]
    fn consistent_log_passes() {
        let events = vec![
            CacheEvent::Init { id: id(0, 0), label: 1 },
            CacheEvent::Init { id: id(1, 0), label: 1 },
            CacheEvent::Fetch {
                id: id(0, 0),
                neighbors: vec![id(1, 0)],
                returned: vec![vec![0.0, 0.0]],
            },
            CacheEvent::Update {
                id: id(1, 0),
                logits: vec![3.0, -1.0],
            },
            CacheEvent::Fetch {
                id: id(0, 0),
                neighbors: vec![id(1, 0)],
                returned: vec![vec![3.0, -1.0]],
            },
        ];
        assert!(replay_check(&events).is_ok());
    }

    #[test]
    fn corrupted_fetch_fails_at_its_index() {
        let events = vec![
            CacheEvent::Init { id: id(0, 0), label: 0 },
            CacheEvent::Init { id: id(1, 0), label: 0 },
            CacheEvent::Update {
                id: id(1, 0),
                logits: vec![1.0],
            },
            CacheEvent::Fetch {
                id: id(0, 0),
                neighbors: vec![id(1, 0)],
                returned: vec![vec![2.0]], // corrupted: should be [1.0]
            },
        ];
        let err = replay_check(&events).unwrap_err();
        assert_eq!(err.event_index, 3);
    }

    #[test]
    fn stale_zero_fetch_fails() {
        let events = vec![
            CacheEvent::Init { id: id(0, 0), label: 0 },
            CacheEvent::Fetch {
                id: id(0, 0),
                neighbors: vec![id(0, 0)],
                returned: vec![vec![0.5]],
            },
        ];
        assert_eq!(replay_check(&events).unwrap_err().event_index, 1);
    }
}
