//! Class-incremental task streams.
//!
//! Two construction protocols over one dataset:
//!
//! - overlapped: classes are assigned to steps in universe order; a sample
//!   joins every step that introduces one of its classes, so clips containing
//!   past or future classes still appear (relabeled to background).
//! - disjoint: classes are partitioned by community detection on the weighted
//!   co-occurrence graph, and training clips whose class set straddles steps
//!   are dropped, so step data never shows foreign classes.
//!
//! The shared test set is carved out of the sample pool by a fixed id rule
//! before either protocol assigns training lists, and its labels are never
//! relabeled.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::louvain::{louvain, WeightedGraph};
use crate::synth::PairCounts;
use crate::types::{AVSample, ClassId, SampleId};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("pattern sums to {pattern}, universe has {universe} classes")]
    PatternMismatch { pattern: usize, universe: usize },
    #[error("pattern entries must be positive")]
    EmptyPatternEntry,
    #[error("disjoint split needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("background must not be part of the class universe")]
    BackgroundInUniverse,
    #[error("duplicate class {0} in universe")]
    DuplicateClass(ClassId),
    #[error("co-occurrence table does not cover class {0}")]
    CoOccMissingClass(ClassId),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Overlapped,
    Disjoint,
}

/// One learning step: the classes it introduces and everything seen so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub step_index: usize,
    pub new_classes: BTreeSet<ClassId>,
    pub cumulative_classes: BTreeSet<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    /// Non-test samples that ended up in no training list.
    pub dropped_train_samples: usize,
    /// Co-occurrence weight between classes placed in different steps.
    pub residual_cross_weight: f64,
    /// Set when the co-occurrence graph had no edges and the partition is an
    /// arbitrary balanced one.
    pub zero_edge_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub protocol: Protocol,
    pub tasks: Vec<TaskSpec>,
    /// Per-step training sample ids; a sample may appear in several steps
    /// under the overlapped protocol.
    pub train_ids: Vec<Vec<SampleId>>,
    /// Shared across all steps; never relabeled.
    pub test_ids: Vec<SampleId>,
    pub diagnostics: SplitDiagnostics,
}

impl TaskStream {
    pub fn final_step(&self) -> &TaskSpec {
        self.tasks.last().expect("stream has at least one task")
    }
}

/// Knobs shared by both protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Every sample whose id is a multiple of this goes to the test set;
    /// 0 disables the test carve-out.
    pub test_modulus: u32,
    pub louvain_resolution: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_modulus: 4,
            louvain_resolution: 1.0,
        }
    }
}

fn validate_universe(universe: &[ClassId]) -> Result<(), StreamError> {
    let mut seen = BTreeSet::new();
    for &c in universe {
        if c.is_background() {
            return Err(StreamError::BackgroundInUniverse);
        }
        if !seen.insert(c) {
            return Err(StreamError::DuplicateClass(c));
        }
    }
    Ok(())
}

fn validate_pattern(universe: &[ClassId], pattern: &[usize]) -> Result<(), StreamError> {
    if pattern.iter().any(|&p| p == 0) {
        return Err(StreamError::EmptyPatternEntry);
    }
    let total: usize = pattern.iter().sum();
    if total != universe.len() {
        return Err(StreamError::PatternMismatch {
            pattern: total,
            universe: universe.len(),
        });
    }
    Ok(())
}

fn is_test(id: SampleId, cfg: &SplitConfig) -> bool {
    cfg.test_modulus > 0 && id.0 % cfg.test_modulus == 0
}

fn build_tasks(groups: Vec<BTreeSet<ClassId>>) -> Vec<TaskSpec> {
    let mut cumulative = BTreeSet::new();
    groups
        .into_iter()
        .enumerate()
        .map(|(i, new_classes)| {
            cumulative.extend(new_classes.iter().copied());
            TaskSpec {
                step_index: i,
                new_classes,
                cumulative_classes: cumulative.clone(),
            }
        })
        .collect()
}

/// Sequential class assignment: step t takes the next `pattern[t]` classes in
/// universe order; a sample trains in every step that introduces one of its
/// classes.
pub fn split_overlapped(
    universe: &[ClassId],
    pattern: &[usize],
    samples: &[AVSample],
    cfg: &SplitConfig,
) -> Result<TaskStream, StreamError> {
    validate_universe(universe)?;
    validate_pattern(universe, pattern)?;
    let mut groups = Vec::with_capacity(pattern.len());
    let mut offset = 0;
    for &count in pattern {
        groups.push(universe[offset..offset + count].iter().copied().collect());
        offset += count;
    }
    let tasks = build_tasks(groups);

    let mut train_ids = vec![Vec::new(); tasks.len()];
    let mut test_ids = Vec::new();
    let mut dropped = 0usize;
    for s in samples {
        if is_test(s.id, cfg) {
            test_ids.push(s.id);
            continue;
        }
        let present = s.labeled_classes();
        let mut assigned = false;
        for task in &tasks {
            if !present.is_disjoint(&task.new_classes) {
                train_ids[task.step_index].push(s.id);
                assigned = true;
            }
        }
        if !assigned {
            dropped += 1;
        }
    }

    Ok(TaskStream {
        protocol: Protocol::Overlapped,
        tasks,
        train_ids,
        test_ids,
        diagnostics: SplitDiagnostics {
            dropped_train_samples: dropped,
            residual_cross_weight: 0.0,
            zero_edge_warning: false,
        },
    })
}

/// Co-occurrence weight between classes assigned to different steps.
pub fn cross_step_weight(
    groups: &[BTreeSet<ClassId>],
    co_occ: &PairCounts,
) -> f64 {
    let mut total = 0.0;
    for (i, a_group) in groups.iter().enumerate() {
        for b_group in groups.iter().skip(i + 1) {
            for &a in a_group {
                for &b in b_group {
                    total += co_occ.get(a, b).unwrap_or(0) as f64;
                }
            }
        }
    }
    total
}

/// Community-detection partition: Louvain communities over the co-occurrence
/// graph are packed into `pattern.len()` steps approximating the requested
/// class counts, then training clips not fully contained in one step's class
/// set are dropped.
pub fn split_disjoint(
    universe: &[ClassId],
    pattern: &[usize],
    co_occ: &PairCounts,
    samples: &[AVSample],
    cfg: &SplitConfig,
) -> Result<TaskStream, StreamError> {
    validate_universe(universe)?;
    validate_pattern(universe, pattern)?;
    if pattern.len() < 2 {
        return Err(StreamError::TooFewSteps(pattern.len()));
    }
    for &c in universe {
        if !co_occ.covers(&[c]) {
            return Err(StreamError::CoOccMissingClass(c));
        }
    }

    let n = universe.len();
    let mut graph = WeightedGraph::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = co_occ.get(universe[i], universe[j]).unwrap_or(0);
            if w > 0 {
                graph.add_edge(i, j, w as f64);
            }
        }
    }

    let zero_edges = graph.total_weight() <= 0.0;
    let groups: Vec<BTreeSet<ClassId>> = if zero_edges {
        // No structure to exploit: fall back to sequential chunks of the
        // requested sizes (any balanced partition has residual weight 0).
        let mut out = Vec::with_capacity(pattern.len());
        let mut offset = 0;
        for &count in pattern {
            out.push(universe[offset..offset + count].iter().copied().collect());
            offset += count;
        }
        out
    } else {
        let labels = louvain(&graph, cfg.louvain_resolution);
        let n_comm = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut communities: Vec<Vec<ClassId>> = vec![Vec::new(); n_comm];
        for (node, &c) in labels.iter().enumerate() {
            communities[c].push(universe[node]);
        }
        // Largest community first; ties break on the smallest member id so
        // packing is deterministic.
        communities.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        let mut groups: Vec<BTreeSet<ClassId>> = vec![BTreeSet::new(); pattern.len()];
        for comm in communities {
            let step = (0..pattern.len())
                .max_by(|&a, &b| {
                    let da = pattern[a] as i64 - groups[a].len() as i64;
                    let db = pattern[b] as i64 - groups[b].len() as i64;
                    da.cmp(&db).then(b.cmp(&a))
                })
                .expect("at least one step");
            groups[step].extend(comm);
        }
        groups
    };

    let residual = cross_step_weight(&groups, co_occ);
    let tasks = build_tasks(groups);

    let mut train_ids = vec![Vec::new(); tasks.len()];
    let mut test_ids = Vec::new();
    let mut dropped = 0usize;
    for s in samples {
        if is_test(s.id, cfg) {
            test_ids.push(s.id);
            continue;
        }
        let present = s.labeled_classes();
        let home = tasks.iter().find(|t| {
            !present.is_empty() && present.is_subset(&t.new_classes)
        });
        match home {
            Some(task) => train_ids[task.step_index].push(s.id),
            None => dropped += 1,
        }
    }

    Ok(TaskStream {
        protocol: Protocol::Disjoint,
        tasks,
        train_ids,
        test_ids,
        diagnostics: SplitDiagnostics {
            dropped_train_samples: dropped,
            residual_cross_weight: residual,
            zero_edge_warning: zero_edges,
        },
    })
}

/// Relabels a clip for one step: labels outside the step's new classes become
/// background; features and audio are untouched.
pub fn relabel_for_step(sample: &AVSample, spec: &TaskSpec) -> AVSample {
    let mut out = sample.clone();
    for grid in out.labels.iter_mut() {
        for c in grid.iter_mut() {
            if !spec.new_classes.contains(c) {
                *c = ClassId::BACKGROUND;
            }
        }
    }
    out
}

pub fn write_manifest(path: &Path, stream: &TaskStream) -> Result<(), StreamError> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, stream)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<TaskStream, StreamError> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}
