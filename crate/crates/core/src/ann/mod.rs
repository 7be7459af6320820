//! Label-partitioned R-nearest-neighbor retrieval over unit-norm hash
//! vectors under cosine similarity: one navigable small-world graph per
//! label class, plus an exact full-scan oracle. Every cosine evaluation is
//! counted so construction cost can be compared against the brute-force
//! pairwise baseline.

mod hnsw;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::cache::SampleIndex;
use crate::encoder::HashVector;
use crate::{Error, Result};

use hnsw::HnswGraph;

/// Graph construction and search parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HnswParams {
    /// Maximum neighbors kept per node per layer (layer 0 keeps twice this).
    pub max_degree: usize,
    /// Candidate beam width while inserting.
    pub ef_construction: usize,
    /// Candidate beam width while querying.
    pub ef_search: usize,
    /// Seed for the geometric layer sampling.
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        // A 64-wide construction beam keeps build cost well under half the
        // brute-force pairwise count at desk scale while recall at the
        // partition sizes in play stays saturated; wider beams only pay off
        // at much larger partitions.
        HnswParams {
            max_degree: 16,
            ef_construction: 64,
            ef_search: 64,
            seed: 0,
        }
    }
}

/// One retrieved neighbor with its cosine similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: SampleIndex,
    pub similarity: f64,
}

/// Up to R same-label neighbors ordered by non-increasing similarity,
/// excluding the query itself, with distinct indexes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborList {
    entries: Vec<Neighbor>,
}

impl NeighborList {
    fn from_sorted(entries: Vec<Neighbor>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        NeighborList { entries }
    }

    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleIndex> + '_ {
        self.entries.iter().map(|n| n.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sort hits by similarity descending, breaking ties by ascending
/// `(client, sample)`, and keep the top `r`.
fn rank_and_truncate(mut hits: Vec<Neighbor>, r: usize) -> NeighborList {
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.id.cmp(&b.id))
    });
    hits.truncate(r);
    NeighborList::from_sorted(hits)
}

/// Per-label navigable small-world graphs over inserted hash vectors.
///
/// Build phase is single-writer; once the owner stops inserting, queries are
/// read-only and safe to run concurrently.
#[derive(Debug)]
pub struct LabelPartitionedIndex {
    params: HnswParams,
    partitions: BTreeMap<u32, HnswGraph>,
    labels: BTreeMap<SampleIndex, u32>,
    distance_ops: AtomicU64,
}

impl LabelPartitionedIndex {
    pub fn new(params: HnswParams) -> Self {
        LabelPartitionedIndex {
            params,
            partitions: BTreeMap::new(),
            labels: BTreeMap::new(),
            distance_ops: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn partition_len(&self, label: u32) -> usize {
        self.partitions.get(&label).map_or(0, |g| g.len())
    }

    pub fn partition_ids(&self, label: u32) -> Vec<SampleIndex> {
        self.partitions
            .get(&label)
            .map_or_else(Vec::new, |g| g.ids())
    }

    /// Cumulative cosine evaluations since the last reset.
    pub fn distance_ops(&self) -> u64 {
        self.distance_ops.load(Ordering::Relaxed)
    }

    pub fn reset_distance_ops(&self) {
        self.distance_ops.store(0, Ordering::Relaxed);
    }

    /// Insert an element into its label partition.
    pub fn insert(&mut self, id: SampleIndex, label: u32, hash: HashVector) -> Result<()> {
        if self.labels.contains_key(&id) {
            return Err(Error::Conflict(format!("{id} already indexed")));
        }
        self.labels.insert(id, label);
        let params = &self.params;
        let graph = self.partitions.entry(label).or_insert_with(|| {
            // Per-partition RNG stream so label insertion order does not
            // couple level sampling across partitions.
            HnswGraph::new(
                params.max_degree,
                params.ef_construction,
                crate::seeds::derive(params.seed, "hnsw-level", u64::from(label)),
            )
        });
        graph.insert(id, hash, &self.distance_ops);
        Ok(())
    }

    /// Up to `r` nearest same-label neighbors of `hash`, excluding `id`
    /// itself (and, optionally, every element owned by `exclude_client`).
    /// An unknown label yields an empty list. Partitions holding fewer than
    /// `r` eligible elements return all of them.
    pub fn query(
        &self,
        id: SampleIndex,
        label: u32,
        hash: &HashVector,
        r: usize,
        exclude_client: Option<u32>,
    ) -> NeighborList {
        let Some(graph) = self.partitions.get(&label) else {
            return NeighborList::default();
        };
        // Search wide enough that self-exclusion cannot starve the result.
        let ef = self.params.ef_search.max(r + 1);
        let hits = graph.search(hash, ef, &self.distance_ops);
        let eligible: Vec<Neighbor> = hits
            .into_iter()
            .filter(|n| n.id != id && Some(n.id.client) != exclude_client)
            .collect();
        rank_and_truncate(eligible, r)
    }

    /// Verify that every node of every partition is reachable from its
    /// partition's entry point along base-layer edges.
    pub fn audit_connectivity(&self) -> Result<()> {
        for (label, graph) in &self.partitions {
            graph.audit_connectivity().map_err(|unreached| {
                Error::Format(format!(
                    "partition {label}: {unreached} of {} nodes unreachable from entry",
                    graph.len()
                ))
            })?;
        }
        Ok(())
    }
}

/// Exact top-`r` by cosine similarity over an explicit candidate set: full
/// scan, ties broken by ascending `(client, sample)`. The independent oracle
/// for the approximate path.
pub fn query_exact<'a, I>(
    candidates: I,
    query_id: SampleIndex,
    query_hash: &HashVector,
    r: usize,
    exclude_client: Option<u32>,
    counter: Option<&AtomicU64>,
) -> NeighborList
where
    I: IntoIterator<Item = (SampleIndex, &'a HashVector)>,
{
    let mut hits = Vec::new();
    for (id, hash) in candidates {
        if id == query_id || Some(id.client) == exclude_client {
            continue;
        }
        if let Some(counter) = counter {
            counter.fetch_add(1, Ordering::Relaxed);
        }
        hits.push(Neighbor {
            id,
            similarity: query_hash.cosine(hash),
        });
    }
    rank_and_truncate(hits, r)
}

/// Brute-force relation building over label partitions, evaluating each
/// unordered same-label pair exactly once: `N(N-1)/2` cosine evaluations per
/// partition of size `N`. Baseline for the construction-cost comparison.
pub fn exact_relations(
    per_label: &BTreeMap<u32, Vec<(SampleIndex, &HashVector)>>,
    r: usize,
    exclude_client: bool,
    counter: &AtomicU64,
) -> BTreeMap<SampleIndex, NeighborList> {
    let mut relations = BTreeMap::new();
    for items in per_label.values() {
        let n = items.len();
        let mut candidate_lists: Vec<Vec<Neighbor>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..i {
                counter.fetch_add(1, Ordering::Relaxed);
                let sim = items[i].1.cosine(items[j].1);
                candidate_lists[i].push(Neighbor {
                    id: items[j].0,
                    similarity: sim,
                });
                candidate_lists[j].push(Neighbor {
                    id: items[i].0,
                    similarity: sim,
                });
            }
        }
        for (slot, hits) in candidate_lists.into_iter().enumerate() {
            let own = items[slot].0;
            let eligible = if exclude_client {
                hits.into_iter().filter(|h| h.id.client != own.client).collect()
            } else {
                hits
            };
            relations.insert(own, rank_and_truncate(eligible, r));
        }
    }
    relations
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hash(rng: &mut ChaCha8Rng, dim: usize) -> HashVector {
        HashVector::normalized((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn id(client: u32, sample: u32) -> SampleIndex {
        SampleIndex { client, sample }
    }

    #[test]
    fn single_element_partition_yields_empty_list() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random_hash(&mut rng, 8);
        index.insert(id(0, 0), 3, h.clone()).unwrap();
        let result = index.query(id(0, 0), 3, &h, 1, None);
        assert!(result.is_empty());
    }

    #[test]
    fn two_elements_find_each_other() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ha = random_hash(&mut rng, 8);
        let hb = random_hash(&mut rng, 8);
        index.insert(id(0, 0), 0, ha.clone()).unwrap();
        index.insert(id(1, 0), 0, hb.clone()).unwrap();
        let from_a = index.query(id(0, 0), 0, &ha, 1, None);
        assert_eq!(from_a.entries()[0].id, id(1, 0));
        let from_b = index.query(id(1, 0), 0, &hb, 1, None);
        assert_eq!(from_b.entries()[0].id, id(0, 0));
    }

    #[test]
    fn duplicate_insert_conflicts() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        index.insert(id(0, 0), 0, random_hash(&mut rng, 8)).unwrap();
        let err = index.insert(id(0, 0), 1, random_hash(&mut rng, 8));
        assert!(matches!(err.unwrap_err(), Error::Conflict(_)));
    }

    #[test]
    fn unknown_label_gives_empty_list() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_hash(&mut rng, 8);
        index.insert(id(0, 0), 0, h.clone()).unwrap();
        assert!(index.query(id(0, 0), 9, &h, 4, None).is_empty());
    }

    #[test]
    fn partition_counts_match_plan() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut plan = [0usize; 10];
        for i in 0..500u32 {
            let label = rng.gen_range(0..10u32);
            plan[label as usize] += 1;
            index
                .insert(id(i % 20, i / 20), label, random_hash(&mut rng, 8))
                .unwrap();
        }
        for label in 0..10u32 {
            assert_eq!(index.partition_len(label), plan[label as usize]);
        }
        assert_eq!(index.len(), 500);
        index.audit_connectivity().unwrap();
    }

    #[test]
    fn orthogonal_basis_vectors_score_zero() {
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        for i in 0..4u32 {
            let mut v = vec![0.0; 4];
            v[i as usize] = 1.0;
            index.insert(id(i, 0), 0, HashVector::new(v).unwrap()).unwrap();
        }
        let mut e1 = vec![0.0; 4];
        e1[0] = 1.0;
        let result = index.query(id(0, 0), 0, &HashVector::new(e1).unwrap(), 2, None);
        assert_eq!(result.len(), 2);
        for n in result.entries() {
            assert!(n.similarity.abs() < 1e-12);
            assert_ne!(n.id, id(0, 0));
        }
    }

    #[test]
    fn exact_oracle_agrees_with_independent_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<(SampleIndex, HashVector)> = (0..50u32)
            .map(|i| (id(i % 5, i / 5), random_hash(&mut rng, 8)))
            .collect();
        let query_hash = random_hash(&mut rng, 8);
        let query_id = items[7].0;

        let result = query_exact(
            items.iter().map(|(i, h)| (*i, h)),
            query_id,
            &query_hash,
            10,
            None,
            None,
        );

        // Independent implementation: score everything, sort, take 10.
        let mut scored: Vec<(f64, SampleIndex)> = items
            .iter()
            .filter(|(i, _)| *i != query_id)
            .map(|(i, h)| (query_hash.cosine(h), *i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (n, (sim, idx)) in result.entries().iter().zip(scored.iter().take(10)) {
            assert_eq!(n.id, *idx);
            assert_eq!(n.similarity, *sim);
        }

        let empty = query_exact(
            std::iter::empty::<(SampleIndex, &HashVector)>(),
            query_id,
            &query_hash,
            10,
            None,
            None,
        );
        assert!(empty.is_empty());
    }

    #[test]
    fn hnsw_equals_exact_on_small_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &n in &[5usize, 17, 33, 64] {
            let mut index = LabelPartitionedIndex::new(HnswParams::default());
            let items: Vec<(SampleIndex, HashVector)> = (0..n as u32)
                .map(|i| (id(i % 6, i / 6), random_hash(&mut rng, 8)))
                .collect();
            for (i, h) in &items {
                index.insert(*i, 0, h.clone()).unwrap();
            }
            for (qid, qh) in &items {
                let approx = index.query(*qid, 0, qh, 7, None);
                let exact = query_exact(
                    items.iter().map(|(i, h)| (*i, h)),
                    *qid,
                    qh,
                    7,
                    None,
                    None,
                );
                let a: Vec<SampleIndex> = approx.ids().collect();
                let e: Vec<SampleIndex> = exact.ids().collect();
                assert_eq!(a, e, "partition size {n}, query {qid}");
            }
        }
    }

    #[test]
    fn recall_at_16_beats_point_nine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let items: Vec<(SampleIndex, u32, HashVector)> = (0..2000u32)
            .map(|i| {
                let label = rng.gen_range(0..10u32);
                (id(i % 40, i / 40), label, random_hash(&mut rng, 16))
            })
            .collect();
        for (i, label, h) in &items {
            index.insert(*i, *label, h.clone()).unwrap();
        }
        index.audit_connectivity().unwrap();

        let mut recall_sum = 0.0;
        for (qid, label, qh) in &items {
            let approx: std::collections::BTreeSet<SampleIndex> =
                index.query(*qid, *label, qh, 16, None).ids().collect();
            let exact: std::collections::BTreeSet<SampleIndex> = query_exact(
                items
                    .iter()
                    .filter(|(_, l, _)| l == label)
                    .map(|(i, _, h)| (*i, h)),
                *qid,
                qh,
                16,
                None,
                None,
            )
            .ids()
            .collect();
            if exact.is_empty() {
                recall_sum += 1.0;
            } else {
                recall_sum += approx.intersection(&exact).count() as f64 / exact.len() as f64;
            }
        }
        let recall = recall_sum / items.len() as f64;
        assert!(recall >= 0.9, "recall@16 = {recall}");
    }

    #[test]
    fn self_exclusion_and_distinctness_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let items: Vec<(SampleIndex, u32, HashVector)> = (0..300u32)
            .map(|i| (id(i % 10, i / 10), i % 3, random_hash(&mut rng, 8)))
            .collect();
        for (i, label, h) in &items {
            index.insert(*i, *label, h.clone()).unwrap();
        }
        for (qid, label, qh) in &items {
            let result = index.query(*qid, *label, qh, 16, None);
            let ids: Vec<SampleIndex> = result.ids().collect();
            assert!(!ids.contains(qid));
            let mut dedup = ids.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), ids.len());
            // Similarities are non-increasing.
            let sims: Vec<f64> = result.entries().iter().map(|n| n.similarity).collect();
            assert!(sims.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn exclude_same_client_filters_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        let items: Vec<(SampleIndex, HashVector)> = (0..120u32)
            .map(|i| (id(i % 4, i / 4), random_hash(&mut rng, 8)))
            .collect();
        for (i, h) in &items {
            index.insert(*i, 0, h.clone()).unwrap();
        }
        let (qid, qh) = (&items[0].0, &items[0].1);
        let filtered = index.query(*qid, 0, qh, 8, Some(qid.client));
        assert!(!filtered.is_empty());
        for n in filtered.entries() {
            assert_ne!(n.id.client, qid.client);
        }
        let exact = query_exact(
            items.iter().map(|(i, h)| (*i, h)),
            *qid,
            qh,
            8,
            Some(qid.client),
            None,
        );
        for n in exact.entries() {
            assert_ne!(n.id.client, qid.client);
        }
    }

    #[test]
    fn distance_counter_counts_pairs_once_for_exact_build() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let counter = AtomicU64::new(0);
        let hashes: Vec<(SampleIndex, HashVector)> = (0..30u32)
            .map(|i| (id(0, i), random_hash(&mut rng, 8)))
            .collect();
        let mut per_label = BTreeMap::new();
        per_label.insert(0u32, hashes.iter().map(|(i, h)| (*i, h)).collect::<Vec<_>>());
        let relations = exact_relations(&per_label, 4, false, &counter);
        assert_eq!(counter.load(Ordering::Relaxed), 30 * 29 / 2);
        assert_eq!(relations.len(), 30);

        // Two partitions count independently.
        counter.store(0, Ordering::Relaxed);
        let half: Vec<(SampleIndex, &HashVector)> =
            hashes.iter().take(10).map(|(i, h)| (*i, h)).collect();
        let rest: Vec<(SampleIndex, &HashVector)> =
            hashes.iter().skip(10).map(|(i, h)| (*i, h)).collect();
        let mut split = BTreeMap::new();
        split.insert(0u32, half);
        split.insert(1u32, rest);
        exact_relations(&split, 4, false, &counter);
        assert_eq!(counter.load(Ordering::Relaxed), 10 * 9 / 2 + 20 * 19 / 2);
    }

    #[test]
    fn counter_resets_and_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut index = LabelPartitionedIndex::new(HnswParams::default());
        for i in 0..50u32 {
            index.insert(id(0, i), 0, random_hash(&mut rng, 8)).unwrap();
        }
        assert!(index.distance_ops() > 0);
        index.reset_distance_ops();
        assert_eq!(index.distance_ops(), 0);
        let h = random_hash(&mut rng, 8);
        index.query(id(99, 0), 0, &h, 4, None);
        assert!(index.distance_ops() > 0);
    }

    #[test]
    fn exact_relations_match_query_exact_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hashes: Vec<(SampleIndex, HashVector)> = (0..40u32)
            .map(|i| (id(i % 8, i / 8), random_hash(&mut rng, 8)))
            .collect();
        let counter = AtomicU64::new(0);
        let mut per_label = BTreeMap::new();
        per_label.insert(0u32, hashes.iter().map(|(i, h)| (*i, h)).collect::<Vec<_>>());
        let relations = exact_relations(&per_label, 6, false, &counter);
        for (qid, qh) in &hashes {
            let direct = query_exact(
                hashes.iter().map(|(i, h)| (*i, h)),
                *qid,
                qh,
                6,
                None,
                None,
            );
            let built: Vec<SampleIndex> = relations[qid].ids().collect();
            let wanted: Vec<SampleIndex> = direct.ids().collect();
            assert_eq!(built, wanted);
        }
    }
}
