//! Shared helpers for unit tests: hand-built samples and random models.

use std::collections::BTreeSet;

use rand::prelude::*;

use crate::model::{ModelVariant, SegModel};
use crate::types::{AVSample, ClassId, GridDims, SampleId};

/// Builds a clip from explicit per-pixel features and labels; all frames
/// share the same content.
pub(crate) fn sample_from(
    id: u32,
    dims: GridDims,
    frames: usize,
    features: Vec<f64>,
    labels: Vec<u16>,
    audio: Vec<f64>,
) -> AVSample {
    let visual_dim = features.len() / dims.pixels();
    let labels: Vec<ClassId> = labels.into_iter().map(ClassId).collect();
    let sounding: BTreeSet<ClassId> = labels
        .iter()
        .copied()
        .filter(|c| !c.is_background())
        .collect();
    AVSample {
        id: SampleId(id),
        dims,
        visual_dim,
        frames: vec![features; frames],
        labels: vec![labels; frames],
        audio,
        sounding,
    }
}

/// Random head weights over classes 1..k (plus background row 0).
pub(crate) fn random_model(
    rng: &mut impl Rng,
    variant: ModelVariant,
    k: usize,
    d_v: usize,
    d_a: usize,
) -> SegModel {
    let mut m = SegModel::new(variant, d_v, d_a);
    let classes: Vec<ClassId> = (1..k as u16).map(ClassId).collect();
    m.expand_head(&classes);
    for w in m.visual_weights.iter_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    if variant == ModelVariant::AudioVisual {
        for w in m.audio_weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
    }
    for b in m.bias.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    m
}

/// Random clip with uniform labels over 0..k and random features.
pub(crate) fn random_sample(
    rng: &mut impl Rng,
    id: u32,
    dims: GridDims,
    frames: usize,
    d_v: usize,
    d_a: usize,
    k: u16,
) -> AVSample {
    let px = dims.pixels();
    let features: Vec<f64> = (0..px * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<u16> = (0..px).map(|_| rng.gen_range(0..k)).collect();
    let audio: Vec<f64> = (0..d_a).map(|_| rng.gen_range(-1.0..1.0)).collect();
    sample_from(id, dims, frames, features, labels, audio)
}
