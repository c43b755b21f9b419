//! Collision-based rehearsal: counting where the old model predicts an old
//! class on pixels the new task labels as a new class, turning those counts
//! into a smoothed per-old-class frequency, and resampling the memory buffer
//! so confusable classes are rehearsed more often.
//!
//! A pixel collides when prediction and truth are both non-background and
//! disagree. Since the old model cannot emit new classes, every colliding
//! pixel yields an (old, new) pair.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryBuffer, MemoryEntry};
use crate::model::{ModelError, SegModel};
use crate::types::{AVSample, ClassId, SampleId};

#[derive(Debug, Error)]
pub enum CollisionError {
    #[error("old model head already contains new class {0}; step protocol violated")]
    ProtocolViolation(ClassId),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("no old classes: collision rehearsal is undefined before step 1")]
    NoOldClasses,
    #[error("task data is empty")]
    EmptyTaskData,
    #[error("memory buffer is empty; nothing to resample")]
    EmptyBuffer,
    #[error("resample fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("frequency distribution has no mass on any non-empty buffer group")]
    NoDrawableClass,
}

/// Collision pair counts for a single clip, keyed (old class, new class).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplePairCounts {
    pub counts: BTreeMap<(ClassId, ClassId), u64>,
}

impl SamplePairCounts {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Distinct old classes appearing in this clip's collisions.
    pub fn old_classes(&self) -> BTreeSet<ClassId> {
        self.counts.keys().map(|&(old, _)| old).collect()
    }
}

/// Counts collision pairs over all frames of one relabeled clip.
///
/// Errors if the old model's head contains any class present in the clip's
/// labels: the clip's labels must live in the step's new classes only.
pub fn collision_pairs(
    old_model: &SegModel,
    sample: &AVSample,
) -> Result<SamplePairCounts, CollisionError> {
    for c in sample.labeled_classes() {
        if old_model.row_of(c).is_some() {
            return Err(CollisionError::ProtocolViolation(c));
        }
    }
    let masks = old_model.predict_mask(sample)?;
    let mut out = SamplePairCounts::default();
    for (mask, truth) in masks.iter().zip(&sample.labels) {
        for (&pred, &t) in mask.iter().zip(truth) {
            if !pred.is_background() && !t.is_background() && pred != t {
                *out.counts.entry((pred, t)).or_insert(0) += 1;
            }
        }
    }
    Ok(out)
}

/// The most confusing old class of one clip and its collision share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MostConfusing {
    pub old_class: ClassId,
    /// Collisions of the winning old class over all collisions, in (0, 1].
    pub ratio: f64,
}

/// Picks the old class of the maximal pair (ties to the smallest class id)
/// and its share of the clip's collisions. `None` when nothing collided.
pub fn most_confusing(pairs: &SamplePairCounts) -> Option<MostConfusing> {
    let total = pairs.total();
    if total == 0 {
        return None;
    }
    // BTreeMap iteration is ordered, so strict > keeps the smallest key on ties.
    let (&(winner, _), _) = pairs
        .counts
        .iter()
        .fold(None::<(&(ClassId, ClassId), u64)>, |best, (k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })?;
    let winner_total: u64 = pairs
        .counts
        .iter()
        .filter(|((old, _), _)| *old == winner)
        .map(|(_, &v)| v)
        .sum();
    Some(MostConfusing {
        old_class: winner,
        ratio: winner_total as f64 / total as f64,
    })
}

/// How the significance threshold for a clip's top collision share is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum ThresholdMode {
    /// 1 / (number of distinct old classes colliding in the clip): the share
    /// must beat the average share within that clip.
    MeanShare,
    /// A fixed scalar threshold.
    Fixed(f64),
    /// Mean of the observed top shares across all colliding clips (two-pass).
    GlobalMean,
}

/// Aggregate collision diagnostics for one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollisionTable {
    pub pair_counts: BTreeMap<(ClassId, ClassId), u64>,
    /// One record per clip that had any collision.
    pub per_sample: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: SampleId,
    pub most_confusing: ClassId,
    pub ratio: f64,
    /// Distinct old classes colliding in this clip; drives the mean-share
    /// threshold.
    pub distinct_old: usize,
}

/// Per-old-class collision frequency: raw counts (floored at 1) and the
/// sigmoid-normalized distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionFrequency {
    pub raw: BTreeMap<ClassId, u64>,
    pub normalized: BTreeMap<ClassId, f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scans the task data with the old model and aggregates pairs and
/// per-clip records.
pub fn collision_scan(
    old_model: &SegModel,
    task_data: &[AVSample],
) -> Result<CollisionTable, CollisionError> {
    if task_data.is_empty() {
        return Err(CollisionError::EmptyTaskData);
    }
    let per: Vec<Result<(SampleId, SamplePairCounts), CollisionError>> = task_data
        .par_iter()
        .map(|s| collision_pairs(old_model, s).map(|p| (s.id, p)))
        .collect();
    let mut table = CollisionTable::default();
    for r in per {
        let (id, pairs) = r?;
        if let Some(mc) = most_confusing(&pairs) {
            table.per_sample.push(SampleRecord {
                sample_id: id,
                most_confusing: mc.old_class,
                ratio: mc.ratio,
                distinct_old: pairs.old_classes().len(),
            });
        }
        for (k, v) in pairs.counts {
            *table.pair_counts.entry(k).or_insert(0) += v;
        }
    }
    Ok(table)
}

/// Derives the frequency distribution from a scan. A class's raw count is the
/// number of clips where it was the most confusing collider with a share
/// above the threshold; classes without significant collisions are floored
/// at 1, and the normalized map applies logistic smoothing before dividing by
/// the total.
pub fn collision_frequency_from(
    table: &CollisionTable,
    old_classes: &BTreeSet<ClassId>,
    mode: ThresholdMode,
) -> Result<CollisionFrequency, CollisionError> {
    if old_classes.is_empty() {
        return Err(CollisionError::NoOldClasses);
    }
    let global_mean = match mode {
        ThresholdMode::GlobalMean => {
            if table.per_sample.is_empty() {
                f64::INFINITY
            } else {
                table.per_sample.iter().map(|r| r.ratio).sum::<f64>()
                    / table.per_sample.len() as f64
            }
        }
        _ => 0.0,
    };
    let mut raw: BTreeMap<ClassId, u64> =
        old_classes.iter().map(|&c| (c, 0)).collect();
    for r in &table.per_sample {
        let threshold = match mode {
            ThresholdMode::MeanShare => 1.0 / r.distinct_old as f64,
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::GlobalMean => global_mean,
        };
        if r.ratio > threshold {
            if let Some(count) = raw.get_mut(&r.most_confusing) {
                *count += 1;
            }
        }
    }
    for v in raw.values_mut() {
        if *v == 0 {
            *v = 1;
        }
    }
    let denom: f64 = raw.values().map(|&v| sigmoid(v as f64)).sum();
    let normalized = raw
        .iter()
        .map(|(&c, &v)| (c, sigmoid(v as f64) / denom))
        .collect();
    Ok(CollisionFrequency { raw, normalized })
}

/// One-call form: scan then derive.
pub fn collision_frequency(
    old_model: &SegModel,
    task_data: &[AVSample],
    old_classes: &BTreeSet<ClassId>,
    mode: ThresholdMode,
) -> Result<CollisionFrequency, CollisionError> {
    let table = collision_scan(old_model, task_data)?;
    collision_frequency_from(&table, old_classes, mode)
}

/// The augmented replay set: every buffer entry once, plus duplicates drawn
/// from the collision frequency distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySet {
    pub base: Vec<MemoryEntry>,
    pub duplicates: Vec<MemoryEntry>,
}

impl ReplaySet {
    /// Plain replay with no resampling. A clip anchored for several classes
    /// is stored once and replays once.
    pub fn base_only(buffer: &MemoryBuffer) -> Self {
        Self {
            base: distinct_entries(buffer),
            duplicates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.duplicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample ids with multiplicity, base first.
    pub fn ids_with_multiplicity(&self) -> Vec<SampleId> {
        self.base
            .iter()
            .chain(&self.duplicates)
            .map(|e| e.sample_id)
            .collect()
    }
}

/// Entries deduplicated by clip: the first anchor group referencing a clip
/// keeps it.
fn distinct_entries(buffer: &MemoryBuffer) -> Vec<MemoryEntry> {
    let mut seen = std::collections::BTreeSet::new();
    buffer
        .entries()
        .filter(|e| seen.insert(e.sample_id))
        .copied()
        .collect()
}

/// Draws `ceil(fraction * buffer entry count)` duplicates with replacement:
/// first an old class from the normalized frequency, then a uniform entry
/// within that class's group. Classes whose group is empty are redrawn. The
/// base set replays each stored clip exactly once.
pub fn resample_memory(
    buffer: &MemoryBuffer,
    freq: &CollisionFrequency,
    fraction: f64,
    seed: u64,
) -> Result<ReplaySet, CollisionError> {
    if buffer.is_empty() {
        return Err(CollisionError::EmptyBuffer);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CollisionError::BadFraction(fraction));
    }
    let drawable_mass: f64 = freq
        .normalized
        .iter()
        .filter(|(c, _)| !buffer.group(**c).is_empty())
        .map(|(_, &p)| p)
        .sum();
    if drawable_mass <= 0.0 {
        return Err(CollisionError::NoDrawableClass);
    }
    let base: Vec<MemoryEntry> = distinct_entries(buffer);
    let n_draws = (fraction * buffer.total_entries() as f64).ceil() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut duplicates = Vec::with_capacity(n_draws);
    while duplicates.len() < n_draws {
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut picked = None;
        for (&c, &p) in &freq.normalized {
            acc += p;
            if r < acc {
                picked = Some(c);
                break;
            }
        }
        let class = picked.unwrap_or_else(|| {
            *freq.normalized.keys().next_back().expect("non-empty freq")
        });
        let group = buffer.group(class);
        if group.is_empty() {
            continue; // redraw; bounded in expectation by the drawable mass
        }
        duplicates.push(group[rng.gen_range(0..group.len())]);
    }
    Ok(ReplaySet { base, duplicates })
}

/// Step preparation: scan collisions, derive the frequency, resample memory.
#[derive(Debug, Clone)]
pub struct CsrStepOutput {
    pub replay: ReplaySet,
    pub table: CollisionTable,
    pub frequency: CollisionFrequency,
}

#[derive(Debug, Clone, Copy)]
pub struct CsrConfig {
    pub fraction: f64,
    pub threshold: ThresholdMode,
    pub seed: u64,
}

pub fn csr_prepare_step(
    old_model: &SegModel,
    buffer: &MemoryBuffer,
    task_data: &[AVSample],
    cfg: &CsrConfig,
) -> Result<CsrStepOutput, CollisionError> {
    if buffer.is_empty() {
        return Err(CollisionError::EmptyBuffer);
    }
    let old_classes: BTreeSet<ClassId> =
        old_model.non_background_classes().into_iter().collect();
    if old_classes.is_empty() {
        return Err(CollisionError::NoOldClasses);
    }
    let table = collision_scan(old_model, task_data)?;
    let frequency = collision_frequency_from(&table, &old_classes, cfg.threshold)?;
    let replay = resample_memory(buffer, &frequency, cfg.fraction, cfg.seed)?;
    Ok(CsrStepOutput {
        replay,
        table,
        frequency,
    })
}
