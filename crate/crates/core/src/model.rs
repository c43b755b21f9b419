//! Per-pixel softmax classifier over visual features with optional clip-level
//! audio conditioning.
//!
//! Two variants share one structure: the visual-only model keeps its audio
//! weights at zero and frozen, so permuting a clip's audio can never change
//! its output. Scores are linear per pixel, `W_v z + W_a a + b`, where `z` is
//! the raw visual feature or, with the optional hidden layer enabled, a tanh
//! feature map of it. The audio vector is broadcast to every pixel.
//!
//! The class head grows over steps: new classes get zero-initialized rows,
//! which leaves logits of existing classes bit-identical until training
//! touches them.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AVSample, ClassId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what}: got {got}, expected {expected}")]
    DimMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("label {0} is not in the model head")]
    LabelOutsideHead(ClassId),
    #[error("label {0} is outside the declared class set")]
    LabelOutsideDeclared(ClassId),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("training data is empty")]
    EmptyData,
    #[error("invalid train config: {0}")]
    BadTrainConfig(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic header; not a CAVS-CKPT v1 file")]
    BadMagic,
    #[error("checkpoint truncated or field out of range: {0}")]
    Corrupt(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    Visual,
    AudioVisual,
}

/// Optional tanh feature map applied to visual features before the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub dim: usize,
    pub input_dim: usize,
    /// dim x input_dim, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HiddenLayer {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..self.dim {
            let row = &self.weights[j * self.input_dim..(j + 1) * self.input_dim];
            let mut s = self.bias[j];
            for (w, v) in row.iter().zip(x) {
                s += w * v;
            }
            out[j] = s.tanh();
        }
    }
}

/// Plateau-based early stop: halt when the epoch loss moves by less than
/// `tolerance` for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopConfig {
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStopConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::BadTrainConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadTrainConfig("batch_size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(ModelError::BadTrainConfig("l2 must be non-negative"));
        }
        Ok(())
    }
}

/// The per-pixel classifier. `class_index[row]` maps head rows to classes;
/// row 0 is always background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub variant: ModelVariant,
    pub visual_input_dim: usize,
    pub audio_dim: usize,
    pub hidden: Option<HiddenLayer>,
    /// rows x feature_dim, row-major (feature_dim = hidden dim if present).
    pub visual_weights: Vec<f64>,
    /// rows x audio_dim, row-major. All-zero and frozen for the visual variant.
    pub audio_weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub class_index: Vec<ClassId>,
}

impl SegModel {
    /// Fresh model with a background-only head.
    pub fn new(variant: ModelVariant, visual_dim: usize, audio_dim: usize) -> Self {
        Self {
            variant,
            visual_input_dim: visual_dim,
            audio_dim,
            hidden: None,
            visual_weights: vec![0.0; visual_dim],
            audio_weights: vec![0.0; audio_dim],
            bias: vec![0.0],
            class_index: vec![ClassId::BACKGROUND],
        }
    }

    /// Fresh model with a trained tanh hidden layer of the given width,
    /// initialized from the seed.
    pub fn with_hidden(
        variant: ModelVariant,
        visual_dim: usize,
        audio_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = 1.0 / (visual_dim as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("init distribution");
        let weights = (0..hidden_dim * visual_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            variant,
            visual_input_dim: visual_dim,
            audio_dim,
            hidden: Some(HiddenLayer {
                dim: hidden_dim,
                input_dim: visual_dim,
                weights,
                bias: vec![0.0; hidden_dim],
            }),
            visual_weights: vec![0.0; hidden_dim],
            audio_weights: vec![0.0; audio_dim],
            bias: vec![0.0],
            class_index: vec![ClassId::BACKGROUND],
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_index.len()
    }

    /// Width of the representation the head sees.
    pub fn feature_dim(&self) -> usize {
        self.hidden.as_ref().map_or(self.visual_input_dim, |h| h.dim)
    }

    pub fn row_of(&self, c: ClassId) -> Option<usize> {
        self.class_index.iter().position(|&x| x == c)
    }

    pub fn non_background_classes(&self) -> Vec<ClassId> {
        self.class_index
            .iter()
            .copied()
            .filter(|c| !c.is_background())
            .collect()
    }

    /// Adds zero-initialized rows for classes not yet in the head, in the
    /// order given. Existing rows are untouched.
    pub fn expand_head(&mut self, classes: &[ClassId]) {
        for &c in classes {
            if self.row_of(c).is_none() {
                self.visual_weights
                    .extend(std::iter::repeat(0.0).take(self.feature_dim()));
                self.audio_weights
                    .extend(std::iter::repeat(0.0).take(self.audio_dim));
                self.bias.push(0.0);
                self.class_index.push(c);
            }
        }
    }

    fn check_sample(&self, sample: &AVSample) -> Result<(), ModelError> {
        if sample.visual_dim != self.visual_input_dim {
            return Err(ModelError::DimMismatch {
                what: "visual feature dim",
                got: sample.visual_dim,
                expected: self.visual_input_dim,
            });
        }
        if self.variant == ModelVariant::AudioVisual && sample.audio.len() != self.audio_dim {
            return Err(ModelError::DimMismatch {
                what: "audio dim",
                got: sample.audio.len(),
                expected: self.audio_dim,
            });
        }
        Ok(())
    }

    /// Per-class offset shared by every pixel of a clip: bias plus the audio
    /// term (zero for the visual variant).
    fn clip_offsets(&self, sample: &AVSample) -> Vec<f64> {
        let k = self.class_count();
        let mut off = self.bias.clone();
        if self.variant == ModelVariant::AudioVisual {
            for (c, o) in off.iter_mut().enumerate().take(k) {
                let row = &self.audio_weights[c * self.audio_dim..(c + 1) * self.audio_dim];
                let mut s = 0.0;
                for (w, a) in row.iter().zip(&sample.audio) {
                    s += w * a;
                }
                *o += s;
            }
        }
        off
    }

    /// Raw per-class scores for every pixel of every frame.
    /// Returns one vector per frame, laid out `px * class_count + class_row`.
    pub fn predict_logits(&self, sample: &AVSample) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_sample(sample)?;
        let k = self.class_count();
        let fdim = self.feature_dim();
        let off = self.clip_offsets(sample);
        let px = sample.dims.pixels();
        let mut out = Vec::with_capacity(sample.frame_count());
        let mut z = vec![0.0; fdim];
        for t in 0..sample.frame_count() {
            let mut frame = vec![0.0; px * k];
            for p in 0..px {
                let x = sample.feature(t, p);
                let z: &[f64] = match &self.hidden {
                    Some(h) => {
                        h.apply(x, &mut z);
                        &z
                    }
                    None => x,
                };
                let logits = &mut frame[p * k..(p + 1) * k];
                for c in 0..k {
                    let row = &self.visual_weights[c * fdim..(c + 1) * fdim];
                    let mut s = off[c];
                    for (w, v) in row.iter().zip(z) {
                        s += w * v;
                    }
                    logits[c] = s;
                }
            }
            out.push(frame);
        }
        Ok(out)
    }

    /// Argmax mask per frame. Ties go to the smallest row index, so background
    /// wins any tie it is part of.
    pub fn predict_mask(&self, sample: &AVSample) -> Result<Vec<Vec<ClassId>>, ModelError> {
        let logits = self.predict_logits(sample)?;
        let k = self.class_count();
        let px = sample.dims.pixels();
        let mut masks = Vec::with_capacity(logits.len());
        for frame in &logits {
            let mut mask = Vec::with_capacity(px);
            for p in 0..px {
                let scores = &frame[p * k..(p + 1) * k];
                let mut best = 0usize;
                for (c, &s) in scores.iter().enumerate().skip(1) {
                    if s > scores[best] {
                        best = c;
                    }
                }
                mask.push(self.class_index[best]);
            }
            masks.push(mask);
        }
        Ok(masks)
    }
}

/// Gradient buffer mirroring a model's trainable parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub visual_weights: Vec<f64>,
    pub audio_weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub hidden_weights: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &SegModel) -> Self {
        Self {
            visual_weights: vec![0.0; model.visual_weights.len()],
            audio_weights: vec![0.0; model.audio_weights.len()],
            bias: vec![0.0; model.bias.len()],
            hidden_weights: model
                .hidden
                .as_ref()
                .map_or_else(Vec::new, |h| vec![0.0; h.weights.len()]),
            hidden_bias: model
                .hidden
                .as_ref()
                .map_or_else(Vec::new, |h| vec![0.0; h.bias.len()]),
        }
    }
}

/// Mean per-pixel softmax cross-entropy over the batch plus `l2 * ||W||^2`,
/// with its exact gradient. The l2 penalty covers weight matrices, not biases.
pub fn loss_and_grad(
    model: &SegModel,
    batch: &[&AVSample],
    l2: f64,
) -> Result<(f64, Gradients), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let k = model.class_count();
    let fdim = model.feature_dim();
    let mut grads = Gradients::zeros_like(model);
    let mut ce_sum = 0.0;
    let mut n_px = 0usize;
    let mut z_buf = vec![0.0; fdim];
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let mut dz = vec![0.0; fdim];

    for sample in batch {
        model.check_sample(sample)?;
        let off = model.clip_offsets(sample);
        let px = sample.dims.pixels();
        for t in 0..sample.frame_count() {
            for p in 0..px {
                let target_row = model
                    .row_of(sample.labels[t][p])
                    .ok_or(ModelError::LabelOutsideHead(sample.labels[t][p]))?;
                let x = sample.feature(t, p);
                let z: &[f64] = match &model.hidden {
                    Some(h) => {
                        h.apply(x, &mut z_buf);
                        &z_buf
                    }
                    None => x,
                };
                for c in 0..k {
                    let row = &model.visual_weights[c * fdim..(c + 1) * fdim];
                    let mut s = off[c];
                    for (w, v) in row.iter().zip(z) {
                        s += w * v;
                    }
                    logits[c] = s;
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for c in 0..k {
                    probs[c] = (logits[c] - max).exp();
                    denom += probs[c];
                }
                ce_sum += denom.ln() + max - logits[target_row];
                n_px += 1;
                // dL/dlogit = softmax - onehot (per pixel, pre-normalization).
                for c in 0..k {
                    let d = probs[c] / denom - if c == target_row { 1.0 } else { 0.0 };
                    probs[c] = d;
                    let g = &mut grads.visual_weights[c * fdim..(c + 1) * fdim];
                    for (gi, zi) in g.iter_mut().zip(z) {
                        *gi += d * zi;
                    }
                    grads.bias[c] += d;
                }
                if model.variant == ModelVariant::AudioVisual {
                    for c in 0..k {
                        let d = probs[c];
                        let g = &mut grads.audio_weights
                            [c * model.audio_dim..(c + 1) * model.audio_dim];
                        for (gi, ai) in g.iter_mut().zip(&sample.audio) {
                            *gi += d * ai;
                        }
                    }
                }
                if let Some(h) = &model.hidden {
                    for j in 0..fdim {
                        let mut s = 0.0;
                        for c in 0..k {
                            s += probs[c] * model.visual_weights[c * fdim + j];
                        }
                        dz[j] = s * (1.0 - z[j] * z[j]);
                    }
                    for j in 0..fdim {
                        let g = &mut grads.hidden_weights
                            [j * h.input_dim..(j + 1) * h.input_dim];
                        for (gi, xi) in g.iter_mut().zip(x) {
                            *gi += dz[j] * xi;
                        }
                        grads.hidden_bias[j] += dz[j];
                    }
                }
            }
        }
    }

    let inv = 1.0 / n_px as f64;
    for g in grads.visual_weights.iter_mut() {
        *g *= inv;
    }
    for g in grads.audio_weights.iter_mut() {
        *g *= inv;
    }
    for g in grads.bias.iter_mut() {
        *g *= inv;
    }
    for g in grads.hidden_weights.iter_mut() {
        *g *= inv;
    }
    for g in grads.hidden_bias.iter_mut() {
        *g *= inv;
    }

    let mut loss = ce_sum * inv;
    if l2 > 0.0 {
        let mut sq = 0.0;
        for (w, g) in model.visual_weights.iter().zip(grads.visual_weights.iter_mut()) {
            sq += w * w;
            *g += 2.0 * l2 * w;
        }
        if model.variant == ModelVariant::AudioVisual {
            for (w, g) in model.audio_weights.iter().zip(grads.audio_weights.iter_mut()) {
                sq += w * w;
                *g += 2.0 * l2 * w;
            }
        }
        if let Some(h) = &model.hidden {
            for (w, g) in h.weights.iter().zip(grads.hidden_weights.iter_mut()) {
                sq += w * w;
                *g += 2.0 * l2 * w;
            }
        }
        loss += l2 * sq;
    }
    // The visual variant's audio path is frozen regardless of l2.
    if model.variant == ModelVariant::Visual {
        for g in grads.audio_weights.iter_mut() {
            *g = 0.0;
        }
    }
    Ok((loss, grads))
}

/// Trains one task step: expands the head for `classes`, then runs seeded
/// mini-batch gradient descent on the mean per-pixel cross-entropy.
/// Deterministic given (init, data order, cfg); `epochs = 0` only expands.
pub fn train_step_model(
    init: &SegModel,
    data: &[&AVSample],
    classes: &[ClassId],
    cfg: &TrainConfig,
) -> Result<SegModel, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let declared: BTreeSet<ClassId> = classes
        .iter()
        .copied()
        .chain(std::iter::once(ClassId::BACKGROUND))
        .collect();
    for s in data {
        for c in s.labeled_classes() {
            if !declared.contains(&c) {
                return Err(ModelError::LabelOutsideDeclared(c));
            }
        }
    }
    let mut model = init.clone();
    model.expand_head(classes);

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut prev_loss = f64::INFINITY;
    let mut flat_epochs = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_ce = 0.0;
        let mut epoch_px = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AVSample> = chunk.iter().map(|&i| data[i]).collect();
            let (loss, grads) = loss_and_grad(&model, &batch, cfg.l2)?;
            let px: usize = batch
                .iter()
                .map(|s| s.dims.pixels() * s.frame_count())
                .sum();
            epoch_ce += loss * px as f64;
            epoch_px += px;
            apply_sgd(&mut model, &grads, cfg.learning_rate);
        }
        let epoch_loss = epoch_ce / epoch_px as f64;
        if let Some(es) = &cfg.early_stop {
            if (prev_loss - epoch_loss).abs() < es.tolerance {
                flat_epochs += 1;
                if flat_epochs >= es.patience {
                    break;
                }
            } else {
                flat_epochs = 0;
            }
        }
        prev_loss = epoch_loss;
    }
    Ok(model)
}

fn apply_sgd(model: &mut SegModel, grads: &Gradients, lr: f64) {
    for (w, g) in model.visual_weights.iter_mut().zip(&grads.visual_weights) {
        *w -= lr * g;
    }
    if model.variant == ModelVariant::AudioVisual {
        for (w, g) in model.audio_weights.iter_mut().zip(&grads.audio_weights) {
            *w -= lr * g;
        }
    }
    for (b, g) in model.bias.iter_mut().zip(&grads.bias) {
        *b -= lr * g;
    }
    if let Some(h) = &mut model.hidden {
        for (w, g) in h.weights.iter_mut().zip(&grads.hidden_weights) {
            *w -= lr * g;
        }
        for (b, g) in h.bias.iter_mut().zip(&grads.hidden_bias) {
            *b -= lr * g;
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8] = b"CAVS-CKPT v1\n";

pub fn save_model(path: &Path, model: &SegModel) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[match model.variant {
        ModelVariant::Visual => 0u8,
        ModelVariant::AudioVisual => 1u8,
    }])?;
    w.write_all(&[model.hidden.is_some() as u8])?;
    w.write_all(&(model.visual_input_dim as u32).to_le_bytes())?;
    w.write_all(&(model.audio_dim as u32).to_le_bytes())?;
    let hdim = model.hidden.as_ref().map_or(0, |h| h.dim);
    w.write_all(&(hdim as u32).to_le_bytes())?;
    w.write_all(&(model.class_count() as u32).to_le_bytes())?;
    for c in &model.class_index {
        w.write_all(&c.0.to_le_bytes())?;
    }
    if let Some(h) = &model.hidden {
        for v in &h.weights {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &h.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &model.visual_weights {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &model.audio_weights {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &model.bias {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SegModel, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(|_| ModelError::Corrupt("variant"))?;
    let variant = match b1[0] {
        0 => ModelVariant::Visual,
        1 => ModelVariant::AudioVisual,
        _ => return Err(ModelError::Corrupt("variant")),
    };
    r.read_exact(&mut b1).map_err(|_| ModelError::Corrupt("hidden flag"))?;
    let has_hidden = b1[0] != 0;
    let d_v = read_u32(&mut r)? as usize;
    let d_a = read_u32(&mut r)? as usize;
    let hdim = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let mut class_index = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut b = [0u8; 2];
        r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("class id"))?;
        class_index.push(ClassId(u16::from_le_bytes(b)));
    }
    let hidden = if has_hidden {
        let weights = read_f64s(&mut r, hdim * d_v)?;
        let bias = read_f64s(&mut r, hdim)?;
        Some(HiddenLayer {
            dim: hdim,
            input_dim: d_v,
            weights,
            bias,
        })
    } else {
        None
    };
    let fdim = if has_hidden { hdim } else { d_v };
    let visual_weights = read_f64s(&mut r, rows * fdim)?;
    let audio_weights = read_f64s(&mut r, rows * d_a)?;
    let bias = read_f64s(&mut r, rows)?;
    Ok(SegModel {
        variant,
        visual_input_dim: d_v,
        audio_dim: d_a,
        hidden,
        visual_weights,
        audio_weights,
        bias,
        class_index,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(|_| ModelError::Corrupt("f64"))?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_model, random_sample, sample_from};
    use crate::types::GridDims;

    #[test]
    fn zero_model_scores_zero_everywhere() {
        let mut m = SegModel::new(ModelVariant::AudioVisual, 3, 2);
        m.expand_head(&[ClassId(1), ClassId(2)]);
        let s = random_sample(
            &mut ChaCha12Rng::seed_from_u64(1),
            0,
            GridDims::new(2, 2),
            2,
            3,
            2,
            3,
        );
        let logits = m.predict_logits(&s).unwrap();
        for frame in logits {
            assert!(frame.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_pixel_dot_product_by_hand() {
        // x = (1, 2), w = (0.5, -1), b = 0.1 -> score -1.4
        let mut m = SegModel::new(ModelVariant::Visual, 2, 0);
        m.visual_weights = vec![0.5, -1.0];
        m.bias = vec![0.1];
        let s = sample_from(0, GridDims::new(1, 1), 1, vec![1.0, 2.0], vec![0], vec![]);
        let logits = m.predict_logits(&s).unwrap();
        assert!((logits[0][0] - (-1.4)).abs() < 1e-15);
    }

    #[test]
    fn visual_variant_ignores_audio() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let m = random_model(&mut rng, ModelVariant::Visual, 4, 3, 2);
        let mut a = random_sample(&mut rng, 0, GridDims::new(3, 3), 2, 3, 2, 4);
        let logits1 = m.predict_logits(&a).unwrap();
        a.audio = vec![9.0, -4.0];
        let logits2 = m.predict_logits(&a).unwrap();
        assert_eq!(logits1, logits2);
    }

    #[test]
    fn ties_break_to_background() {
        // Two rows with identical (zero) weights: row 0 must win.
        let mut m = SegModel::new(ModelVariant::Visual, 2, 0);
        m.expand_head(&[ClassId(1), ClassId(2), ClassId(3)]);
        let s = sample_from(0, GridDims::new(1, 1), 1, vec![0.3, 0.7], vec![0], vec![]);
        let mask = m.predict_mask(&s).unwrap();
        assert_eq!(mask[0][0], ClassId::BACKGROUND);
    }

    #[test]
    fn mask_matches_argmax_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for trial in 0..20 {
            let m = random_model(&mut rng, ModelVariant::AudioVisual, 5, 4, 3);
            let s = random_sample(&mut rng, trial, GridDims::new(4, 5), 2, 4, 3, 5);
            let mask = m.predict_mask(&s).unwrap();
            let logits = m.predict_logits(&s).unwrap();
            let k = m.class_count();
            for t in 0..s.frame_count() {
                for p in 0..s.dims.pixels() {
                    let scores = &logits[t][p * k..(p + 1) * k];
                    let mut best = 0;
                    for c in 1..k {
                        if scores[c] > scores[best] {
                            best = c;
                        }
                    }
                    assert_eq!(mask[t][p], m.class_index[best]);
                }
            }
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut m = SegModel::new(ModelVariant::AudioVisual, 3, 2);
        m.expand_head(&[ClassId(1), ClassId(2), ClassId(3)]);
        let s = random_sample(
            &mut ChaCha12Rng::seed_from_u64(3),
            0,
            GridDims::new(2, 3),
            2,
            3,
            2,
            4,
        );
        let (loss, _) = loss_and_grad(&m, &[&s], 0.0).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicating_batch_keeps_mean_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let m = random_model(&mut rng, ModelVariant::AudioVisual, 4, 3, 2);
        let s = random_sample(&mut rng, 0, GridDims::new(3, 3), 2, 3, 2, 4);
        let (l1, _) = loss_and_grad(&m, &[&s], 0.1).unwrap();
        let (l2, _) = loss_and_grad(&m, &[&s, &s], 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    /// Central finite differences over every trainable parameter.
    fn param_mut(m: &mut SegModel, which: usize, idx: usize) -> &mut f64 {
        match which {
            0 => &mut m.visual_weights[idx],
            1 => &mut m.audio_weights[idx],
            2 => &mut m.bias[idx],
            3 => &mut m.hidden.as_mut().unwrap().weights[idx],
            _ => &mut m.hidden.as_mut().unwrap().bias[idx],
        }
    }

    fn finite_diff_check(model: &SegModel, batch: &[&AVSample], l2: f64, eps: f64) -> f64 {
        let (_, grads) = loss_and_grad(model, batch, l2).unwrap();
        let mut max_err: f64 = 0.0;
        let mut probe = |m: &mut SegModel, which: usize, idx: usize, analytic: f64| {
            let orig = *param_mut(m, which, idx);
            *param_mut(m, which, idx) = orig + eps;
            let (lp, _) = loss_and_grad(m, batch, l2).unwrap();
            *param_mut(m, which, idx) = orig - eps;
            let (lm, _) = loss_and_grad(m, batch, l2).unwrap();
            *param_mut(m, which, idx) = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let err = (fd - analytic).abs();
            let rel = err / fd.abs().max(analytic.abs()).max(1e-8);
            max_err = max_err.max(err.min(rel));
        };
        let mut m = model.clone();
        for i in 0..model.visual_weights.len() {
            probe(&mut m, 0, i, grads.visual_weights[i]);
        }
        if model.variant == ModelVariant::AudioVisual {
            for i in 0..model.audio_weights.len() {
                probe(&mut m, 1, i, grads.audio_weights[i]);
            }
        }
        for i in 0..model.bias.len() {
            probe(&mut m, 2, i, grads.bias[i]);
        }
        if model.hidden.is_some() {
            for i in 0..grads.hidden_weights.len() {
                probe(&mut m, 3, i, grads.hidden_weights[i]);
            }
            for i in 0..grads.hidden_bias.len() {
                probe(&mut m, 4, i, grads.hidden_bias[i]);
            }
        }
        max_err
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        // 4-pixel batch, linear audio-visual model.
        let m = random_model(&mut rng, ModelVariant::AudioVisual, 3, 2, 2);
        let s = random_sample(&mut rng, 0, GridDims::new(2, 2), 1, 2, 2, 3);
        let err = finite_diff_check(&m, &[&s], 0.05, 1e-5);
        assert!(err <= 1e-6, "max gradient error {err}");
    }

    #[test]
    fn gradient_matches_finite_differences_with_hidden_layer() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut m = SegModel::with_hidden(ModelVariant::AudioVisual, 3, 2, 4, 5);
        m.expand_head(&[ClassId(1), ClassId(2)]);
        for w in m.visual_weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        for w in m.audio_weights.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let s = random_sample(&mut rng, 0, GridDims::new(2, 2), 2, 3, 2, 3);
        let err = finite_diff_check(&m, &[&s], 0.01, 1e-5);
        assert!(err <= 1e-6, "max gradient error {err}");
    }

    #[test]
    fn zero_epochs_only_expands_head() {
        let init = SegModel::new(ModelVariant::AudioVisual, 2, 2);
        let s = sample_from(
            0,
            GridDims::new(2, 2),
            1,
            vec![0.0; 8],
            vec![0, 1, 0, 1],
            vec![0.1, 0.2],
        );
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 0,
            batch_size: 4,
            seed: 0,
            l2: 0.0,
            early_stop: None,
        };
        let out = train_step_model(&init, &[&s], &[ClassId(1)], &cfg).unwrap();
        assert_eq!(out.class_index, vec![ClassId(0), ClassId(1)]);
        assert!(out.visual_weights.iter().all(|&w| w == 0.0));
        assert!(out.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let samples: Vec<AVSample> = (0..6)
            .map(|i| random_sample(&mut rng, i, GridDims::new(3, 3), 2, 3, 2, 3))
            .collect();
        let refs: Vec<&AVSample> = samples.iter().collect();
        let init = SegModel::new(ModelVariant::AudioVisual, 3, 2);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            epochs: 10,
            batch_size: 2,
            seed: 123,
            l2: 1e-4,
            early_stop: None,
        };
        let a = train_step_model(&init, &refs, &[ClassId(1), ClassId(2)], &cfg).unwrap();
        let b = train_step_model(&init, &refs, &[ClassId(1), ClassId(2)], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_label_outside_declared_classes() {
        let init = SegModel::new(ModelVariant::Visual, 2, 0);
        let s = sample_from(
            0,
            GridDims::new(2, 2),
            1,
            vec![0.0; 8],
            vec![0, 5, 0, 0],
            vec![],
        );
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            l2: 0.0,
            early_stop: None,
        };
        let err = train_step_model(&init, &[&s], &[ClassId(1)], &cfg).unwrap_err();
        assert!(matches!(err, ModelError::LabelOutsideDeclared(ClassId(5))));
    }

    #[test]
    fn separable_two_class_set_reaches_high_accuracy() {
        // Two well-separated visual prototypes; training should fit them, and
        // an independently coded full-batch logistic regression confirms the
        // data is separable to the same accuracy.
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let proto = [[1.5, 0.0], [-1.5, 0.5]];
        let mut samples = Vec::new();
        for i in 0..8 {
            let px = 16;
            let mut feats = Vec::with_capacity(px * 2);
            let mut labels = Vec::with_capacity(px);
            for p in 0..px {
                let cls = (p + i as usize) % 2;
                feats.push(proto[cls][0] + rng.gen_range(-0.2..0.2));
                feats.push(proto[cls][1] + rng.gen_range(-0.2..0.2));
                labels.push(cls as u16 + 1);
            }
            samples.push(sample_from(i, GridDims::new(4, 4), 1, feats, labels, vec![]));
        }
        let refs: Vec<&AVSample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 4,
            seed: 3,
            l2: 0.0,
            early_stop: None,
        };
        let init = SegModel::new(ModelVariant::Visual, 2, 0);
        let m = train_step_model(&init, &refs, &[ClassId(1), ClassId(2)], &cfg).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in &samples {
            let mask = m.predict_mask(s).unwrap();
            for t in 0..s.frame_count() {
                for p in 0..s.dims.pixels() {
                    total += 1;
                    if mask[t][p] == s.labels[t][p] {
                        correct += 1;
                    }
                }
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");

        // Independent oracle: plain full-batch binary logistic regression.
        let mut w = [0.0f64; 3];
        let mut pts: Vec<([f64; 2], f64)> = Vec::new();
        for s in &samples {
            for p in 0..s.dims.pixels() {
                let f = s.feature(0, p);
                let y = if s.labels[0][p] == ClassId(1) { 0.0 } else { 1.0 };
                pts.push(([f[0], f[1]], y));
            }
        }
        for _ in 0..500 {
            let mut g = [0.0f64; 3];
            for (x, y) in &pts {
                let z = w[0] * x[0] + w[1] * x[1] + w[2];
                let p = 1.0 / (1.0 + (-z).exp());
                let d = p - y;
                g[0] += d * x[0];
                g[1] += d * x[1];
                g[2] += d;
            }
            for i in 0..3 {
                w[i] -= 0.5 * g[i] / pts.len() as f64;
            }
        }
        let mut oracle_correct = 0usize;
        for (x, y) in &pts {
            let z = w[0] * x[0] + w[1] * x[1] + w[2];
            let pred = if z > 0.0 { 1.0 } else { 0.0 };
            if (pred - y).abs() < 0.5 {
                oracle_correct += 1;
            }
        }
        let oracle_acc = oracle_correct as f64 / pts.len() as f64;
        assert!(oracle_acc >= 0.99, "oracle accuracy {oracle_acc}");
    }

    #[test]
    fn head_expansion_preserves_old_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let m = random_model(&mut rng, ModelVariant::AudioVisual, 3, 3, 2);
        let s = random_sample(&mut rng, 0, GridDims::new(3, 3), 2, 3, 2, 3);
        let before = m.predict_logits(&s).unwrap();
        let mut expanded = m.clone();
        expanded.expand_head(&[ClassId(7), ClassId(8)]);
        let after = expanded.predict_logits(&s).unwrap();
        let k_old = m.class_count();
        let k_new = expanded.class_count();
        for t in 0..s.frame_count() {
            for p in 0..s.dims.pixels() {
                for c in 0..k_old {
                    assert_eq!(before[t][p * k_old + c], after[t][p * k_new + c]);
                }
                for c in k_old..k_new {
                    assert_eq!(after[t][p * k_new + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let m = random_model(&mut rng, ModelVariant::AudioVisual, 5, 4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &m).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.visual_weights.iter().zip(&back.visual_weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut h = SegModel::with_hidden(ModelVariant::Visual, 4, 3, 6, 9);
        h.expand_head(&[ClassId(1)]);
        let path2 = dir.path().join("hidden.ckpt");
        save_model(&path2, &h).unwrap();
        assert_eq!(load_model(&path2).unwrap(), h);
    }
}
