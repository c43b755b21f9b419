//! Rehearsal memory: scoring clips by audio contribution deviation and
//! keeping a small per-class exemplar store.
//!
//! The deviation of a clip is the audio-visual model's clip mIoU minus the
//! visual-only model's, so values near zero indicate the two modalities agree
//! on the clip. The default selection keeps, per new class, the k clips with
//! the smallest absolute deviation; the signed smallest / signed largest /
//! seeded random strategies exist for ablations and share the interface.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{sample_miou, MetricsError};
use crate::model::SegModel;
use crate::types::{derive_seed, AVSample, ClassId, SampleId};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("clip mIoU undefined for the {0} model")]
    UndefinedMiou(&'static str),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("sample {0} has no delta score")]
    MissingDelta(SampleId),
    #[error("anchor class {0} already present in the buffer")]
    AnchorCollision(ClassId),
    #[error("class {class} group has {got} entries, capacity is {capacity}")]
    OverCapacity {
        class: ClassId,
        got: usize,
        capacity: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// One stored exemplar reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub sample_id: SampleId,
    /// The new class this exemplar was selected for.
    pub anchor_class: ClassId,
    /// Audio contribution deviation of the clip at selection time.
    pub delta: f64,
    pub step_selected: usize,
}

/// Cumulative exemplar store, grouped by anchor class. Entries admitted once
/// are never evicted; later steps only add groups for their own new classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub capacity_per_class: usize,
    groups: BTreeMap<ClassId, Vec<MemoryEntry>>,
}

impl MemoryBuffer {
    pub fn new(capacity_per_class: usize) -> Self {
        Self {
            capacity_per_class,
            groups: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.values().all(|g| g.is_empty())
    }

    pub fn total_entries(&self) -> usize {
        self.groups.values().map(|g| g.len()).sum()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.groups.keys().copied().collect()
    }

    pub fn group(&self, c: ClassId) -> &[MemoryEntry] {
        self.groups.get(&c).map_or(&[], |g| g.as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.groups.values().flatten()
    }

    /// Distinct sample ids across all groups (a clip eligible for several
    /// anchor classes is stored once).
    pub fn distinct_sample_ids(&self) -> BTreeSet<SampleId> {
        self.entries().map(|e| e.sample_id).collect()
    }
}

/// Audio contribution deviation of one clip: clip mIoU of the audio-visual
/// model minus clip mIoU of the visual-only model, over the given classes.
pub fn audio_delta(
    model_va: &SegModel,
    model_v: &SegModel,
    sample: &AVSample,
    classes: &BTreeSet<ClassId>,
) -> Result<f64, MemoryError> {
    let va = sample_miou(model_va, sample, classes)?
        .ok_or(MemoryError::UndefinedMiou("audio-visual"))?;
    let v = sample_miou(model_v, sample, classes)?
        .ok_or(MemoryError::UndefinedMiou("visual-only"))?;
    Ok(va - v)
}

/// How exemplars are ranked within a class's eligible clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Smallest |delta|: the modality-consistent pick.
    SmallestAbsDelta,
    /// Smallest signed delta: the most audio-harmed clips.
    SmallestSignedDelta,
    /// Largest signed delta: the most audio-helped clips.
    LargestSignedDelta,
    /// Seeded uniform choice.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub entries: Vec<MemoryEntry>,
    /// New classes with zero eligible clips, flagged rather than failed.
    pub empty_classes: Vec<ClassId>,
}

/// Per new class, keeps the top-k eligible clips under the strategy's order.
/// Ties break on sample id; a clip containing several new classes may be
/// selected for each of them.
pub fn select_memory(
    samples: &[AVSample],
    deltas: &BTreeMap<SampleId, f64>,
    new_classes: &BTreeSet<ClassId>,
    k: usize,
    strategy: SelectionStrategy,
    seed: u64,
    step: usize,
) -> Result<SelectionResult, MemoryError> {
    if k == 0 {
        return Err(MemoryError::ZeroK);
    }
    for s in samples {
        if !deltas.contains_key(&s.id) {
            return Err(MemoryError::MissingDelta(s.id));
        }
    }
    let mut entries = Vec::new();
    let mut empty_classes = Vec::new();
    for &c in new_classes {
        let mut eligible: Vec<(SampleId, f64)> = samples
            .iter()
            .filter(|s| s.contains_class(c))
            .map(|s| (s.id, deltas[&s.id]))
            .collect();
        if eligible.is_empty() {
            empty_classes.push(c);
            continue;
        }
        eligible.sort_by(|a, b| a.0.cmp(&b.0));
        match strategy {
            SelectionStrategy::SmallestAbsDelta => {
                eligible.sort_by(|a, b| {
                    a.1.abs()
                        .partial_cmp(&b.1.abs())
                        .expect("finite deltas")
                        .then(a.0.cmp(&b.0))
                });
            }
            SelectionStrategy::SmallestSignedDelta => {
                eligible.sort_by(|a, b| {
                    a.1.partial_cmp(&b.1).expect("finite deltas").then(a.0.cmp(&b.0))
                });
            }
            SelectionStrategy::LargestSignedDelta => {
                eligible.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1).expect("finite deltas").then(a.0.cmp(&b.0))
                });
            }
            SelectionStrategy::Random => {
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(seed, "select", c.0 as u64));
                eligible.shuffle(&mut rng);
            }
        }
        for &(id, delta) in eligible.iter().take(k) {
            entries.push(MemoryEntry {
                sample_id: id,
                anchor_class: c,
                delta,
                step_selected: step,
            });
        }
    }
    Ok(SelectionResult {
        entries,
        empty_classes,
    })
}

/// Cumulative buffer update. New entries must anchor on classes the buffer
/// has not seen (selection only targets a step's new classes).
pub fn extend_buffer(
    prev: &MemoryBuffer,
    new_entries: &[MemoryEntry],
) -> Result<MemoryBuffer, MemoryError> {
    let mut out = prev.clone();
    for e in new_entries {
        if prev.groups.contains_key(&e.anchor_class) {
            return Err(MemoryError::AnchorCollision(e.anchor_class));
        }
        out.groups.entry(e.anchor_class).or_default().push(*e);
    }
    for (c, group) in out.groups.iter_mut() {
        if group.len() > out.capacity_per_class {
            return Err(MemoryError::OverCapacity {
                class: *c,
                got: group.len(),
                capacity: out.capacity_per_class,
            });
        }
        group.sort_by(|a, b| {
            a.delta
                .abs()
                .partial_cmp(&b.delta.abs())
                .expect("finite deltas")
                .then(a.sample_id.cmp(&b.sample_id))
        });
    }
    Ok(out)
}

/// Serializable view of a buffer, stored next to the dataset so replay can
/// reload exemplars by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferManifest {
    pub capacity_per_class: usize,
    pub entries: Vec<MemoryEntry>,
}

pub fn write_buffer_manifest(path: &Path, buffer: &MemoryBuffer) -> Result<(), MemoryError> {
    let manifest = BufferManifest {
        capacity_per_class: buffer.capacity_per_class,
        entries: buffer.entries().copied().collect(),
    };
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, &manifest)?;
    Ok(())
}

pub fn read_buffer_manifest(path: &Path) -> Result<MemoryBuffer, MemoryError> {
    let r = BufReader::new(File::open(path)?);
    let manifest: BufferManifest = serde_json::from_reader(r)?;
    let mut buffer = MemoryBuffer::new(manifest.capacity_per_class);
    for e in &manifest.entries {
        buffer.groups.entry(e.anchor_class).or_default().push(*e);
    }
    Ok(buffer)
}
