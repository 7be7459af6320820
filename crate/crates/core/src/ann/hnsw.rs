//! A hierarchical navigable small-world graph over unit-norm vectors with
//! cosine similarity, built from scratch so construction and search can
//! count every distance evaluation.
//!
//! Layer membership is sampled geometrically. Inserts connect each node to
//! the top-M candidates found by a beam search per layer (the simple
//! neighbor-selection rule), and every edge stores the similarity of its
//! endpoints so degree pruning re-ranks cached values instead of
//! re-evaluating distances. Searches run the usual best-first beam with a
//! bounded result heap.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Neighbor;
use crate::cache::SampleIndex;
use crate::encoder::HashVector;

/// Hard cap on sampled levels; geometric sampling makes anything near this
/// astronomically unlikely.
const MAX_LEVEL: usize = 24;

#[derive(Debug)]
struct Node {
    id: SampleIndex,
    hash: HashVector,
}

/// Graph edge: target slot plus the cached endpoint similarity.
#[derive(Debug, Clone, Copy)]
struct Edge {
    slot: u32,
    similarity: f64,
}

/// Candidate ordered by similarity, ties by slot for determinism.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    similarity: f64,
    slot: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.similarity
            .total_cmp(&other.similarity)
            .then_with(|| other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub(super) struct HnswGraph {
    nodes: Vec<Node>,
    /// `adjacency[slot][layer]` lists the node's edges; a node owns layers
    /// `0..=its sampled level`.
    adjacency: Vec<Vec<Vec<Edge>>>,
    entry: Option<u32>,
    max_level: usize,
    max_degree: usize,
    ef_construction: usize,
    level_scale: f64,
    rng: ChaCha8Rng,
}

impl HnswGraph {
    pub(super) fn new(max_degree: usize, ef_construction: usize, seed: u64) -> Self {
        let max_degree = max_degree.max(1);
        HnswGraph {
            nodes: Vec::new(),
            adjacency: Vec::new(),
            entry: None,
            max_level: 0,
            max_degree,
            ef_construction: ef_construction.max(1),
            level_scale: 1.0 / (max_degree as f64).ln().max(f64::MIN_POSITIVE),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(super) fn len(&self) -> usize {
        self.nodes.len()
    }

    pub(super) fn ids(&self) -> Vec<SampleIndex> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    fn degree_cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.max_degree * 2
        } else {
            self.max_degree
        }
    }

    fn sample_level(&mut self) -> usize {
        let u: f64 = self.rng.gen::<f64>().max(f64::MIN_POSITIVE);
        ((-u.ln() * self.level_scale).floor() as usize).min(MAX_LEVEL)
    }

    fn sim_to(&self, slot: u32, query: &HashVector, counter: &AtomicU64) -> f64 {
        counter.fetch_add(1, Ordering::Relaxed);
        self.nodes[slot as usize].hash.cosine(query)
    }

    /// Best-first beam search at one layer. Entry candidates must exist at
    /// `layer`. Returns up to `ef` hits sorted by descending similarity.
    fn search_layer(
        &self,
        query: &HashVector,
        entries: &[Candidate],
        ef: usize,
        layer: usize,
        counter: &AtomicU64,
    ) -> Vec<Candidate> {
        let mut visited = vec![false; self.nodes.len()];
        let mut frontier: BinaryHeap<Candidate> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::new();
        for &c in entries {
            if !visited[c.slot as usize] {
                visited[c.slot as usize] = true;
                frontier.push(c);
                results.push(std::cmp::Reverse(c));
            }
        }
        while results.len() > ef {
            results.pop();
        }

        while let Some(current) = frontier.pop() {
            let worst = results.peek().expect("results non-empty").0.similarity;
            if results.len() >= ef && current.similarity < worst {
                break;
            }
            for edge in &self.adjacency[current.slot as usize][layer] {
                let nb = edge.slot;
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let similarity = self.sim_to(nb, query, counter);
                let worst = results.peek().expect("results non-empty").0.similarity;
                if results.len() < ef || similarity > worst {
                    let c = Candidate {
                        similarity,
                        slot: nb,
                    };
                    frontier.push(c);
                    results.push(std::cmp::Reverse(c));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }

        let mut hits: Vec<Candidate> = results.into_iter().map(|r| r.0).collect();
        hits.sort_by(|a, b| b.cmp(a));
        hits
    }

    /// Drop `slot`'s weakest edges at `layer` down to the cap, ranking by
    /// the cached endpoint similarities (no new distance evaluations).
    fn shrink(&mut self, slot: u32, layer: usize) {
        let cap = self.degree_cap(layer);
        let edges = &mut self.adjacency[slot as usize][layer];
        if edges.len() <= cap {
            return;
        }
        edges.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.slot.cmp(&b.slot))
        });
        edges.truncate(cap);
    }

    pub(super) fn insert(&mut self, id: SampleIndex, hash: HashVector, counter: &AtomicU64) {
        let level = self.sample_level();
        let slot = self.nodes.len() as u32;
        let query = hash.clone();
        self.nodes.push(Node { id, hash });
        self.adjacency.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(slot);
            self.max_level = level;
            return;
        };

        let mut eps = vec![Candidate {
            similarity: self.sim_to(entry, &query, counter),
            slot: entry,
        }];
        // Greedy descent through layers above the new node's level.
        let mut layer = self.max_level;
        while layer > level {
            eps = self.search_layer(&query, &eps, 1, layer, counter);
            layer -= 1;
        }
        // Connect on every layer the node occupies: top-M of the beam, with
        // the beam similarities doubling as the new edges' cached values.
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&query, &eps, self.ef_construction, layer, counter);
            for c in found.iter().take(self.max_degree) {
                self.adjacency[slot as usize][layer].push(Edge {
                    slot: c.slot,
                    similarity: c.similarity,
                });
                self.adjacency[c.slot as usize][layer].push(Edge {
                    slot,
                    similarity: c.similarity,
                });
                if self.adjacency[c.slot as usize][layer].len() > self.degree_cap(layer) {
                    self.shrink(c.slot, layer);
                }
            }
            eps = found;
        }

        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(slot);
        }
    }

    /// Layered search: greedy descent to layer 1, then an `ef`-wide beam at
    /// the base layer. Returns all hits sorted by descending similarity.
    pub(super) fn search(
        &self,
        query: &HashVector,
        ef: usize,
        counter: &AtomicU64,
    ) -> Vec<Neighbor> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut eps = vec![Candidate {
            similarity: self.sim_to(entry, query, counter),
            slot: entry,
        }];
        for layer in (1..=self.max_level).rev() {
            eps = self.search_layer(query, &eps, 1, layer, counter);
        }
        self.search_layer(query, &eps, ef.max(1), 0, counter)
            .into_iter()
            .map(|c| Neighbor {
                id: self.nodes[c.slot as usize].id,
                similarity: c.similarity,
            })
            .collect()
    }

    /// Breadth-first reachability from the entry point along base-layer
    /// edges; `Err(n)` reports `n` unreachable nodes.
    pub(super) fn audit_connectivity(&self) -> Result<(), usize> {
        let Some(entry) = self.entry else {
            return Ok(());
        };
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[entry as usize] = true;
        queue.push_back(entry);
        let mut reached = 1usize;
        while let Some(slot) = queue.pop_front() {
            for edge in &self.adjacency[slot as usize][0] {
                if !seen[edge.slot as usize] {
                    seen[edge.slot as usize] = true;
                    reached += 1;
                    queue.push_back(edge.slot);
                }
            }
        }
        if reached == self.nodes.len() {
            Ok(())
        } else {
            Err(self.nodes.len() - reached)
        }
    }
}
