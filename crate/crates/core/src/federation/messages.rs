//! Protocol messages and the byte-accounting ledger.
//!
//! Accounting rule: 8 bytes per payload real, 4 bytes per index/label
//! integer, no compression or framing. Model parameters have no message
//! kind at all, so traffic can never scale with model size.

use std::collections::BTreeMap;

use crate::cache::SampleIndex;
use crate::encoder::HashVector;
use crate::numeric::ProbDist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    HashUpload,
    KnowledgeUpload,
    EnsembleDown,
    FdClassUpload,
    FdClassDown,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::HashUpload => "hash_upload",
            MessageKind::KnowledgeUpload => "knowledge_upload",
            MessageKind::EnsembleDown => "ensemble_down",
            MessageKind::FdClassUpload => "fd_class_upload",
            MessageKind::FdClassDown => "fd_class_down",
        }
    }
}

/// One protocol message with its real payload.
#[derive(Debug, Clone)]
pub enum Message {
    /// Initialization: one hash per private training sample.
    HashUpload {
        id: SampleIndex,
        label: u32,
        hash: HashVector,
    },
    /// Training: freshly extracted logits for one sample.
    KnowledgeUpload { id: SampleIndex, logits: Vec<f64> },
    /// Training: the softmaxed ensemble teacher for one sample.
    EnsembleDown { id: SampleIndex, teacher: ProbDist },
    /// Class-logit baseline: per-class mean logits plus per-class counts.
    FdClassUpload {
        client: u32,
        class_logits: Vec<Vec<f64>>,
        class_counts: Vec<u64>,
    },
    /// Class-logit baseline: per-class leave-one-out teacher logits
    /// (`None` marks classes with no other holder; the wire size is the
    /// full fixed-shape matrix either way).
    FdClassDown {
        client: u32,
        teachers: Vec<Option<Vec<f64>>>,
    },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::HashUpload { .. } => MessageKind::HashUpload,
            Message::KnowledgeUpload { .. } => MessageKind::KnowledgeUpload,
            Message::EnsembleDown { .. } => MessageKind::EnsembleDown,
            Message::FdClassUpload { .. } => MessageKind::FdClassUpload,
            Message::FdClassDown { .. } => MessageKind::FdClassDown,
        }
    }

    /// Exact wire size under the accounting rule.
    ///
    /// - hash upload: `8d + 12` (d reals, two index ints, one label int)
    /// - knowledge upload: `8C + 8` (C reals, two index ints)
    /// - ensemble down: `8C + 8` (C reals, two index ints)
    /// - class-logit upload: `8C^2 + 4C` (CxC reals, C count ints)
    /// - class-logit down: `8C^2` (CxC reals)
    pub fn byte_size(&self) -> u64 {
        match self {
            Message::HashUpload { hash, .. } => 8 * hash.dim() as u64 + 12,
            Message::KnowledgeUpload { logits, .. } => 8 * logits.len() as u64 + 8,
            Message::EnsembleDown { teacher, .. } => 8 * teacher.len() as u64 + 8,
            Message::FdClassUpload { class_logits, .. } => {
                let classes = class_logits.len() as u64;
                8 * classes * classes + 4 * classes
            }
            Message::FdClassDown { teachers, .. } => {
                let classes = teachers.len() as u64;
                8 * classes * classes
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindTotals {
    pub bytes: u64,
    pub messages: u64,
}

/// Cumulative per-direction, per-kind byte counts plus per-round snapshots.
#[derive(Debug, Default)]
pub struct CommLedger {
    up: BTreeMap<MessageKind, KindTotals>,
    down: BTreeMap<MessageKind, KindTotals>,
    /// Cumulative `(up, down)` totals at each snapshot point; the first
    /// snapshot is taken right after initialization.
    snapshots: Vec<(u64, u64)>,
}

impl CommLedger {
    pub fn new() -> Self {
        CommLedger::default()
    }

    pub fn record(&mut self, direction: Direction, message: &Message) {
        let table = match direction {
            Direction::Up => &mut self.up,
            Direction::Down => &mut self.down,
        };
        let entry = table.entry(message.kind()).or_default();
        entry.bytes += message.byte_size();
        entry.messages += 1;
    }

    pub fn total_up(&self) -> u64 {
        self.up.values().map(|t| t.bytes).sum()
    }

    pub fn total_down(&self) -> u64 {
        self.down.values().map(|t| t.bytes).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_up() + self.total_down()
    }

    pub fn kind_totals(&self, direction: Direction, kind: MessageKind) -> KindTotals {
        let table = match direction {
            Direction::Up => &self.up,
            Direction::Down => &self.down,
        };
        table.get(&kind).copied().unwrap_or_default()
    }

    /// Every message kind that has crossed the wire, in either direction.
    pub fn kinds_seen(&self) -> Vec<MessageKind> {
        let mut kinds: Vec<MessageKind> = self.up.keys().chain(self.down.keys()).copied().collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    /// Record the cumulative totals at a phase boundary (initialization end
    /// or round end) and return them.
    pub fn snapshot(&mut self) -> (u64, u64) {
        let totals = (self.total_up(), self.total_down());
        self.snapshots.push(totals);
        totals
    }

    pub fn snapshots(&self) -> &[(u64, u64)] {
        &self.snapshots
    }
}
