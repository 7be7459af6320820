//! The server-side knowledge cache: four associative maps (label to indexes,
//! index to hash, index to knowledge, index to related indexes) with a
//! two-phase lifecycle. During initialization entries are registered and the
//! relation table is built once over the per-label retrieval index; the
//! cache then freezes. During training, knowledge is fetched by relation
//! lookup and overwritten in place, with fetch-before-update ordering
//! enforced by the protocol layer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::{Mutex, RwLock};

use crate::ann::{HnswParams, LabelPartitionedIndex};
use crate::encoder::HashVector;
use crate::numeric::{self, ProbDist};
use crate::{Error, Result};

/// Global identity of one private sample: owning client and the sample's
/// position within that client's training set. Totally ordered by
/// `(client, sample)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleIndex {
    pub client: u32,
    pub sample: u32,
}

impl fmt::Display for SampleIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.client, self.sample)
    }
}

/// The latest logits stored for one sample. `version` counts applied
/// updates; 0 means never updated (the all-zeros initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct Knowledge {
    pub logits: Vec<f64>,
    pub version: u64,
}

/// Record of one cache interaction, for linearizability replay in tests.
#[derive(Debug, Clone)]
pub enum CacheEvent {
    Init {
        id: SampleIndex,
        label: u32,
    },
    Fetch {
        id: SampleIndex,
        neighbors: Vec<SampleIndex>,
        returned: Vec<Vec<f64>>,
    },
    Update {
        id: SampleIndex,
        logits: Vec<f64>,
    },
}

/// Counters from relation building.
#[derive(Debug, Clone, Copy)]
pub struct RelationStats {
    /// Cosine evaluations spent constructing and querying the ANN index.
    pub distance_ops: u64,
    /// Entries whose relation list came back shorter than requested.
    pub underfull_relations: usize,
}

#[derive(Debug)]
pub struct KnowledgeCache {
    num_classes: usize,
    by_label: BTreeMap<u32, BTreeSet<SampleIndex>>,
    labels: BTreeMap<SampleIndex, u32>,
    hashes: BTreeMap<SampleIndex, HashVector>,
    knowledge: BTreeMap<SampleIndex, RwLock<Knowledge>>,
    relations: BTreeMap<SampleIndex, Vec<SampleIndex>>,
    relation_cap: usize,
    frozen: bool,
    events: Option<Mutex<Vec<CacheEvent>>>,
}

impl KnowledgeCache {
    pub fn new(num_classes: usize) -> Self {
        KnowledgeCache {
            num_classes,
            by_label: BTreeMap::new(),
            labels: BTreeMap::new(),
            hashes: BTreeMap::new(),
            knowledge: BTreeMap::new(),
            relations: BTreeMap::new(),
            relation_cap: 0,
            frozen: false,
            events: None,
        }
    }

    /// Like [`KnowledgeCache::new`] but records every init/fetch/update as a
    /// [`CacheEvent`] for replay checking.
    pub fn recording(num_classes: usize) -> Self {
        let mut cache = Self::new(num_classes);
        cache.events = Some(Mutex::new(Vec::new()));
        cache
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.knowledge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knowledge.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Sizes of the four maps, for memory-shape assertions in tests.
    pub fn map_sizes(&self) -> (usize, usize, usize, usize) {
        (
            self.by_label.values().map(|s| s.len()).sum(),
            self.hashes.len(),
            self.knowledge.len(),
            self.relations.len(),
        )
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleIndex> + '_ {
        self.knowledge.keys().copied()
    }

    pub fn label_of(&self, id: SampleIndex) -> Option<u32> {
        self.labels.get(&id).copied()
    }

    pub fn relations_of(&self, id: SampleIndex) -> Option<&[SampleIndex]> {
        self.relations.get(&id).map(|v| v.as_slice())
    }

    pub fn knowledge_version(&self, id: SampleIndex) -> Option<u64> {
        self.knowledge
            .get(&id)
            .map(|k| k.read().expect("knowledge lock").version)
    }

    /// Current stored logits for `id`, as a copy.
    pub fn knowledge_of(&self, id: SampleIndex) -> Option<Knowledge> {
        self.knowledge
            .get(&id)
            .map(|k| k.read().expect("knowledge lock").clone())
    }

    fn record(&self, event: CacheEvent) {
        if let Some(events) = &self.events {
            events.lock().expect("event lock").push(event);
        }
    }

    /// Drain the recorded event log.
    pub fn take_events(&self) -> Vec<CacheEvent> {
        match &self.events {
            Some(events) => std::mem::take(&mut *events.lock().expect("event lock")),
            None => Vec::new(),
        }
    }

    /// Register one sample: store its hash, add its index to the label set,
    /// and initialize its knowledge to `num_classes` zeros at version 0.
    pub fn init_entry(&mut self, id: SampleIndex, label: u32, hash: HashVector) -> Result<()> {
        if self.frozen {
            return Err(Error::State(format!(
                "cannot init {id}: cache is frozen after relation building"
            )));
        }
        if label as usize >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.knowledge.contains_key(&id) {
            return Err(Error::Conflict(format!("entry {id} already initialized")));
        }
        self.by_label.entry(label).or_default().insert(id);
        self.labels.insert(id, label);
        self.hashes.insert(id, hash);
        self.knowledge.insert(
            id,
            RwLock::new(Knowledge {
                logits: vec![0.0; self.num_classes],
                version: 0,
            }),
        );
        self.record(CacheEvent::Init { id, label });
        Ok(())
    }

    /// Build the relation table: for every entry, retrieve up to `r`
    /// same-label nearest neighbors by hash cosine similarity through a
    /// per-label HNSW index, then freeze the cache. Callable once.
    pub fn build_relations(
        &mut self,
        r: usize,
        params: &HnswParams,
        exclude_same_client: bool,
    ) -> Result<RelationStats> {
        if self.frozen {
            return Err(Error::State("relations already built".into()));
        }
        if r == 0 {
            return Err(Error::invalid_argument("r must be positive"));
        }
        let mut index = LabelPartitionedIndex::new(params.clone());
        for (id, label) in &self.labels {
            index.insert(*id, *label, self.hashes[id].clone())?;
        }
        index.audit_connectivity()?;

        let mut underfull = 0usize;
        for (id, label) in &self.labels {
            let exclude = exclude_same_client.then_some(id.client);
            let list = index.query(*id, *label, &self.hashes[id], r, exclude);
            if list.len() < r {
                underfull += 1;
            }
            self.relations
                .insert(*id, list.entries().iter().map(|n| n.id).collect());
        }
        self.relation_cap = r;
        self.frozen = true;
        Ok(RelationStats {
            distance_ops: index.distance_ops(),
            underfull_relations: underfull,
        })
    }

    /// Return copies of the stored knowledge for each of `id`'s related
    /// indexes, in relation order. Later updates do not mutate the returned
    /// values.
    pub fn fetch(&self, id: SampleIndex) -> Result<Vec<Knowledge>> {
        if !self.frozen {
            return Err(Error::State("fetch before relations are built".into()));
        }
        let neighbors = self
            .relations
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("no cache entry for {id}")))?;
        let fetched: Vec<Knowledge> = neighbors
            .iter()
            .map(|n| self.knowledge[n].read().expect("knowledge lock").clone())
            .collect();
        self.record(CacheEvent::Fetch {
            id,
            neighbors: neighbors.clone(),
            returned: fetched.iter().map(|k| k.logits.clone()).collect(),
        });
        Ok(fetched)
    }

    /// Overwrite the stored knowledge for `id` (plain assignment, no
    /// averaging) and bump its version.
    pub fn update(&self, id: SampleIndex, logits: Vec<f64>) -> Result<()> {
        if !self.frozen {
            return Err(Error::State("update before relations are built".into()));
        }
        if logits.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "knowledge length {} does not match {} classes",
                logits.len(),
                self.num_classes
            )));
        }
        numeric::check_finite(&logits, "knowledge logits")?;
        let slot = self
            .knowledge
            .get(&id)
            .ok_or_else(|| Error::NotFound(format!("no cache entry for {id}")))?;
        self.record(CacheEvent::Update {
            id,
            logits: logits.clone(),
        });
        let mut entry = slot.write().expect("knowledge lock");
        entry.logits = logits;
        entry.version += 1;
        Ok(())
    }

    /// Verify every relation list: same label as its owner, no self
    /// reference, no duplicates, and length within the build-time cap.
    pub fn audit_relations(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::State("audit before relations are built".into()));
        }
        for (id, neighbors) in &self.relations {
            let own_label = self.labels[id];
            if neighbors.len() > self.relation_cap {
                return Err(Error::Format(format!(
                    "{id}: {} relations exceed cap {}",
                    neighbors.len(),
                    self.relation_cap
                )));
            }
            let mut seen = BTreeSet::new();
            for n in neighbors {
                if n == id {
                    return Err(Error::Format(format!("{id}: relation list contains self")));
                }
                if !seen.insert(*n) {
                    return Err(Error::Format(format!("{id}: duplicate relation {n}")));
                }
                match self.labels.get(n) {
                    Some(l) if *l == own_label => {}
                    Some(l) => {
                        return Err(Error::Format(format!(
                            "{id} (label {own_label}): relation {n} has label {l}"
                        )))
                    }
                    None => {
                        return Err(Error::Format(format!(
                            "{id}: relation {n} is not a cache entry"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// Write a debugging snapshot: `k<TAB>i<TAB>label<TAB>version<TAB>z1,...,zC`.
    pub fn export_snapshot(&self, w: &mut impl Write) -> Result<()> {
        for (id, slot) in &self.knowledge {
            let entry = slot.read().expect("knowledge lock");
            let logits = entry
                .logits
                .iter()
                .map(|z| format!("{z:.17}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{logits}",
                id.client, id.sample, self.labels[id], entry.version
            )?;
        }
        Ok(())
    }
}

/// Average the teachers' logits elementwise (dividing by the actual count,
/// which may be below the nominal fetch width) and apply tempered softmax.
/// An empty teacher list signals "no teacher": the caller omits the
/// distillation term.
pub fn ensemble(teachers: &[Knowledge], temperature: f64) -> Result<Option<ProbDist>> {
    if teachers.is_empty() {
        return Ok(None);
    }
    let len = teachers[0].logits.len();
    let mut mean = vec![0.0; len];
    for teacher in teachers {
        if teacher.logits.len() != len {
            return Err(Error::InvalidArgument(format!(
                "teacher logits length {} does not match {len}",
                teacher.logits.len()
            )));
        }
        for (m, z) in mean.iter_mut().zip(&teacher.logits) {
            *m += z;
        }
    }
    let scale = 1.0 / teachers.len() as f64;
    mean.iter_mut().for_each(|m| *m *= scale);
    numeric::softmax_temp(&mean, temperature).map(Some)
}
