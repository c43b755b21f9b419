//! Shared domain types: class ids, sample ids, grids, and audio-visual clips.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Semantic class identifier. Id 0 is reserved for background.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of one generated clip within a dataset.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct SampleId(pub u32);

impl std::fmt::Display for SampleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Height x width of the per-frame pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// One audio-visual clip: `T` frames of per-pixel visual features and label
/// grids, plus a single clip-level audio vector.
///
/// Layout: `frames[t]` is `pixels * visual_dim` floats, pixel-major
/// (`px * visual_dim + d`); `labels[t]` is `pixels` class ids, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AVSample {
    pub id: SampleId,
    pub dims: GridDims,
    pub visual_dim: usize,
    pub frames: Vec<Vec<f64>>,
    pub labels: Vec<Vec<ClassId>>,
    pub audio: Vec<f64>,
    /// Classes whose objects appear in the clip; these and only these
    /// contribute to the audio mix. Background is never sounding.
    pub sounding: BTreeSet<ClassId>,
}

impl AVSample {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.len()
    }

    /// Visual feature vector of pixel `px` in frame `t`.
    pub fn feature(&self, t: usize, px: usize) -> &[f64] {
        let start = px * self.visual_dim;
        &self.frames[t][start..start + self.visual_dim]
    }

    /// Distinct non-background classes present in the label grids.
    pub fn labeled_classes(&self) -> BTreeSet<ClassId> {
        let mut out = BTreeSet::new();
        for grid in &self.labels {
            for &c in grid {
                if !c.is_background() {
                    out.insert(c);
                }
            }
        }
        out
    }

    pub fn contains_class(&self, c: ClassId) -> bool {
        self.labels.iter().any(|grid| grid.contains(&c))
    }
}

/// Deterministically derives a sub-seed from a base seed, a role tag, and an
/// index, so that independent random streams never alias.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then two rounds of splitmix64 finalization.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}
