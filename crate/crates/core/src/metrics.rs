//! Confusion-matrix evaluation: per-class IoU, range mIoU, and per-clip
//! frame-averaged mIoU.
//!
//! Classes that are never predicted and never present (TP+FP+FN = 0) are
//! excluded from range means and flagged, rather than scored 0; a range where
//! every class is undefined yields an explicit undefined result.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SegModel};
use crate::types::{AVSample, ClassId};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("duplicate class {0} in matrix class list")]
    DuplicateClass(ClassId),
    #[error("grid shape mismatch: {0} vs {1} pixels")]
    ShapeMismatch(usize, usize),
    #[error("label {0} not covered by the matrix class list")]
    UnknownLabel(ClassId),
    #[error("range is empty")]
    EmptyRange,
    #[error("class {0} in range is not covered by the matrix")]
    RangeClassNotInMatrix(ClassId),
    #[error("matrices have different class lists")]
    IncompatibleMatrices,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
}

/// K x K pixel count table; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[ClassId]) -> Result<Self, MetricsError> {
        let mut seen = BTreeSet::new();
        for &c in classes {
            if !seen.insert(c) {
                return Err(MetricsError::DuplicateClass(c));
            }
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts: vec![0; classes.len() * classes.len()],
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn idx(&self, c: ClassId) -> Result<usize, MetricsError> {
        self.classes
            .iter()
            .position(|&x| x == c)
            .ok_or(MetricsError::UnknownLabel(c))
    }

    pub fn count(&self, truth: ClassId, pred: ClassId) -> Result<u64, MetricsError> {
        let i = self.idx(truth)?;
        let j = self.idx(pred)?;
        Ok(self.counts[i * self.classes.len() + j])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one (prediction, truth) grid pair, pixel by pixel.
    pub fn accumulate(&mut self, pred: &[ClassId], truth: &[ClassId]) -> Result<(), MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::ShapeMismatch(pred.len(), truth.len()));
        }
        let k = self.classes.len();
        for (&p, &t) in pred.iter().zip(truth) {
            let i = self.idx(t)?;
            let j = self.idx(p)?;
            self.counts[i * k + j] += 1;
        }
        Ok(())
    }

    /// Adds another matrix over the same class list. Merging is commutative,
    /// so per-sample matrices can be accumulated in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::IncompatibleMatrices);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU of one class; `None` when the class never occurs on either side.
    pub fn per_class_iou(&self, c: ClassId) -> Result<Option<f64>, MetricsError> {
        let i = self.idx(c)?;
        let k = self.classes.len();
        let tp = self.counts[i * k + i];
        let row: u64 = (0..k).map(|j| self.counts[i * k + j]).sum();
        let col: u64 = (0..k).map(|j| self.counts[j * k + i]).sum();
        let denom = row + col - tp; // TP + FP + FN
        if denom == 0 {
            Ok(None)
        } else {
            Ok(Some(tp as f64 / denom as f64))
        }
    }

    /// Mean IoU over a class range. Undefined classes are excluded from the
    /// mean and reported; a fully undefined range gives `value: None`.
    pub fn miou(&self, range: &BTreeSet<ClassId>) -> Result<RangeMiou, MetricsError> {
        if range.is_empty() {
            return Err(MetricsError::EmptyRange);
        }
        let mut sum = 0.0;
        let mut included = 0usize;
        let mut undefined = Vec::new();
        for &c in range {
            if !self.classes.contains(&c) {
                return Err(MetricsError::RangeClassNotInMatrix(c));
            }
            match self.per_class_iou(c)? {
                Some(iou) => {
                    sum += iou;
                    included += 1;
                }
                None => undefined.push(c),
            }
        }
        Ok(RangeMiou {
            value: if included > 0 {
                Some(sum / included as f64)
            } else {
                None
            },
            included,
            undefined_classes: undefined,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeMiou {
    pub value: Option<f64>,
    pub included: usize,
    pub undefined_classes: Vec<ClassId>,
}

/// Frame-averaged clip mIoU: per-frame mIoU against that frame's labels over
/// the given class range, averaged over frames. Frames whose mIoU is
/// undefined are excluded; `None` if every frame is undefined.
pub fn sample_miou(
    model: &SegModel,
    sample: &AVSample,
    classes: &BTreeSet<ClassId>,
) -> Result<Option<f64>, MetricsError> {
    if classes.is_empty() {
        return Err(MetricsError::EmptyRange);
    }
    let masks = model.predict_mask(sample)?;
    // Matrix classes must cover predictions, truths, and the scored range.
    let mut all: BTreeSet<ClassId> = model.class_index.iter().copied().collect();
    all.extend(sample.labeled_classes());
    all.extend(classes.iter().copied());
    all.insert(ClassId::BACKGROUND);
    let class_list: Vec<ClassId> = all.into_iter().collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (mask, truth) in masks.iter().zip(&sample.labels) {
        let mut cm = ConfusionMatrix::new(&class_list)?;
        cm.accumulate(mask, truth)?;
        if let Some(v) = cm.miou(classes)?.value {
            sum += v;
            n += 1;
        }
    }
    Ok(if n > 0 { Some(sum / n as f64) } else { None })
}

/// Evaluation summary: per-class rows plus named range aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassIou>,
    pub ranges: Vec<RangeAggregate>,
    pub miou_all: Option<f64>,
    pub undefined_classes: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassId,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeAggregate {
    pub name: String,
    pub miou: Option<f64>,
    pub undefined_classes: Vec<ClassId>,
}

impl EvalReport {
    pub fn range(&self, name: &str) -> Option<f64> {
        self.ranges
            .iter()
            .find(|r| r.name == name)
            .and_then(|r| r.miou)
    }
}

/// Scores a model on a sample set with one pooled confusion matrix.
///
/// `class_list` must cover every truth label in `samples` and every model
/// class. The "all" aggregate spans `scored` classes, including background
/// when `background_in_all` is set; named ranges always exclude background.
pub fn evaluate_model(
    model: &SegModel,
    samples: &[&AVSample],
    class_list: &[ClassId],
    scored: &BTreeSet<ClassId>,
    named_ranges: &[(String, BTreeSet<ClassId>)],
    background_in_all: bool,
) -> Result<EvalReport, MetricsError> {
    use rayon::prelude::*;
    let per_sample: Vec<Result<ConfusionMatrix, MetricsError>> = samples
        .par_iter()
        .map(|s| {
            let masks = model.predict_mask(s)?;
            let mut cm = ConfusionMatrix::new(class_list)?;
            for (mask, truth) in masks.iter().zip(&s.labels) {
                cm.accumulate(mask, truth)?;
            }
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(class_list)?;
    for m in per_sample {
        cm.merge(&m?)?;
    }

    let mut all_range: BTreeSet<ClassId> =
        scored.iter().copied().filter(|c| !c.is_background()).collect();
    if background_in_all {
        all_range.insert(ClassId::BACKGROUND);
    }
    let all = cm.miou(&all_range)?;

    let mut per_class = Vec::new();
    let mut undefined = Vec::new();
    for &c in &all_range {
        let iou = cm.per_class_iou(c)?;
        if iou.is_none() {
            undefined.push(c);
        }
        per_class.push(ClassIou { class: c, iou });
    }

    let mut ranges = Vec::new();
    for (name, set) in named_ranges {
        let filtered: BTreeSet<ClassId> =
            set.iter().copied().filter(|c| !c.is_background()).collect();
        if filtered.is_empty() {
            ranges.push(RangeAggregate {
                name: name.clone(),
                miou: None,
                undefined_classes: Vec::new(),
            });
            continue;
        }
        let r = cm.miou(&filtered)?;
        ranges.push(RangeAggregate {
            name: name.clone(),
            miou: r.value,
            undefined_classes: r.undefined_classes,
        });
    }

    Ok(EvalReport {
        per_class,
        ranges,
        miou_all: all.value,
        undefined_classes: undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelVariant, SegModel};
    use crate::types::{GridDims, SampleId};
    use proptest::{prop_assert_eq, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn ids(v: &[u16]) -> Vec<ClassId> {
        v.iter().map(|&x| ClassId(x)).collect()
    }

    fn set(v: &[u16]) -> BTreeSet<ClassId> {
        v.iter().map(|&x| ClassId(x)).collect()
    }

    #[test]
    fn perfect_prediction_hits_diagonal_only() {
        let mut cm = ConfusionMatrix::new(&ids(&[0, 1, 2])).unwrap();
        let grid = ids(&[1, 2, 0, 1]);
        cm.accumulate(&grid, &grid).unwrap();
        assert_eq!(cm.count(ClassId(1), ClassId(1)).unwrap(), 2);
        assert_eq!(cm.count(ClassId(2), ClassId(2)).unwrap(), 1);
        assert_eq!(cm.count(ClassId(0), ClassId(0)).unwrap(), 1);
        assert_eq!(cm.count(ClassId(1), ClassId(2)).unwrap(), 0);
        assert_eq!(cm.miou(&set(&[0, 1, 2])).unwrap().value, Some(1.0));
    }

    #[test]
    fn empty_grid_changes_nothing() {
        let mut cm = ConfusionMatrix::new(&ids(&[0, 1])).unwrap();
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        // truth [[1,1],[0,0]], pred [[1,0],[0,0]]
        let mut cm = ConfusionMatrix::new(&ids(&[0, 1])).unwrap();
        cm.accumulate(&ids(&[1, 0, 0, 0]), &ids(&[1, 1, 0, 0])).unwrap();
        assert_eq!(cm.count(ClassId(1), ClassId(1)).unwrap(), 1);
        assert_eq!(cm.count(ClassId(1), ClassId(0)).unwrap(), 1);
        assert_eq!(cm.count(ClassId(0), ClassId(0)).unwrap(), 2);
    }

    #[test]
    fn half_right_miou_by_hand() {
        // truth all class 1, pred half class 1 half background over a 2x2 grid:
        // IoU_1 = 0.5, IoU_0 = 0 (TP=0, FP=2) -> mIoU over {0,1} = 0.25.
        let mut cm = ConfusionMatrix::new(&ids(&[0, 1])).unwrap();
        cm.accumulate(&ids(&[1, 1, 0, 0]), &ids(&[1, 1, 1, 1])).unwrap();
        let r = cm.miou(&set(&[0, 1])).unwrap();
        assert_eq!(cm.per_class_iou(ClassId(1)).unwrap(), Some(0.5));
        assert_eq!(cm.per_class_iou(ClassId(0)).unwrap(), Some(0.0));
        assert_eq!(r.value, Some(0.25));
    }

    #[test]
    fn absent_class_is_excluded_and_flagged() {
        let mut cm = ConfusionMatrix::new(&ids(&[0, 1, 5])).unwrap();
        cm.accumulate(&ids(&[1, 0]), &ids(&[1, 0])).unwrap();
        let r = cm.miou(&set(&[0, 1, 5])).unwrap();
        assert_eq!(r.value, Some(1.0));
        assert_eq!(r.undefined_classes, ids(&[5]));
        // All classes undefined -> explicit None.
        let empty = ConfusionMatrix::new(&ids(&[0, 1])).unwrap();
        assert_eq!(empty.miou(&set(&[0, 1])).unwrap().value, None);
    }

    #[test]
    fn range_errors() {
        let cm = ConfusionMatrix::new(&ids(&[0, 1])).unwrap();
        assert!(matches!(
            cm.miou(&BTreeSet::new()),
            Err(MetricsError::EmptyRange)
        ));
        assert!(matches!(
            cm.miou(&set(&[7])),
            Err(MetricsError::RangeClassNotInMatrix(ClassId(7)))
        ));
    }

    fn toy_model(k: u16, d_v: usize, seed: u64) -> SegModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = SegModel::new(ModelVariant::Visual, d_v, 0);
        m.expand_head(&(1..=k).map(ClassId).collect::<Vec<_>>());
        for w in m.visual_weights.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in m.bias.iter_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
        m
    }

    fn toy_sample(id: u32, dims: GridDims, frames: usize, d_v: usize, k: u16, seed: u64) -> AVSample {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let px = dims.pixels();
        let feats: Vec<f64> = (0..px * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<ClassId> = (0..px).map(|_| ClassId(rng.gen_range(0..=k))).collect();
        // Per-frame noise so frames differ.
        let mut frames_v = Vec::new();
        for _ in 0..frames {
            frames_v.push(
                feats
                    .iter()
                    .map(|f| f + rng.gen_range(-0.05..0.05))
                    .collect(),
            );
        }
        AVSample {
            id: SampleId(id),
            dims,
            visual_dim: d_v,
            frames: frames_v,
            labels: vec![labels; frames],
            audio: vec![],
            sounding: BTreeSet::new(),
        }
    }

    #[test]
    fn sample_miou_simple_mean() {
        // Perfect model on identical frames -> 1.0 comes from the trivial
        // case below; here check the arithmetic mean over frame values using
        // the independent per-frame oracle.
        let model = toy_model(3, 4, 5);
        let range = set(&[0, 1, 2, 3]);
        for trial in 0..3 {
            let s = toy_sample(trial, GridDims::new(5, 5), 4, 4, 3, 100 + trial as u64);
            let got = sample_miou(&model, &s, &range).unwrap();
            // Oracle: per-frame confusion, per-frame miou, plain average.
            let masks = model.predict_mask(&s).unwrap();
            let mut vals = Vec::new();
            for (mask, truth) in masks.iter().zip(&s.labels) {
                let mut cm = ConfusionMatrix::new(&ids(&[0, 1, 2, 3])).unwrap();
                cm.accumulate(mask, truth).unwrap();
                if let Some(v) = cm.miou(&range).unwrap().value {
                    vals.push(v);
                }
            }
            let expect = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((got.unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_miou_perfect_model_is_one() {
        // Model that predicts the truth: use labels as one-hot features.
        let dims = GridDims::new(3, 3);
        let labels: Vec<u16> = vec![0, 1, 1, 2, 0, 2, 1, 0, 2];
        let mut feats = Vec::new();
        for &l in &labels {
            let mut one = vec![0.0; 3];
            one[l as usize] = 1.0;
            feats.extend(one);
        }
        let s = crate::testutil::sample_from(0, dims, 2, feats, labels, vec![]);
        let mut m = SegModel::new(ModelVariant::Visual, 3, 0);
        m.expand_head(&[ClassId(1), ClassId(2)]);
        // Row c weights = one-hot c.
        for c in 0..3 {
            m.visual_weights[c * 3 + c] = 1.0;
        }
        assert_eq!(
            sample_miou(&m, &s, &set(&[0, 1, 2])).unwrap(),
            Some(1.0)
        );
    }

    #[test]
    fn monotonicity_fixing_a_pixel_never_hurts() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..50 {
            let k = 4u16;
            let n = 24;
            let truth: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
            let mut pred: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
            let wrong: Vec<usize> = (0..n).filter(|&i| pred[i] != truth[i]).collect();
            if wrong.is_empty() {
                continue;
            }
            let classes = ids(&[0, 1, 2, 3]);
            let range = set(&[0, 1, 2, 3]);
            let mut before = ConfusionMatrix::new(&classes).unwrap();
            before.accumulate(&pred, &truth).unwrap();
            let b = before.miou(&range).unwrap().value.unwrap();
            let i = wrong[rng.gen_range(0..wrong.len())];
            pred[i] = truth[i];
            let mut after = ConfusionMatrix::new(&classes).unwrap();
            after.accumulate(&pred, &truth).unwrap();
            let a = after.miou(&range).unwrap().value.unwrap();
            assert!(a >= b - 1e-12, "fixing a pixel lowered miou: {b} -> {a}");
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40);
            let k = rng.gen_range(2..5) as u16;
            let truth: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
            let pred: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
            let classes: Vec<ClassId> = (0..k).map(ClassId).collect();
            let mut a = ConfusionMatrix::new(&classes).unwrap();
            a.accumulate(&pred, &truth).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pred_p: Vec<ClassId> = perm.iter().map(|&i| pred[i]).collect();
            let truth_p: Vec<ClassId> = perm.iter().map(|&i| truth[i]).collect();
            let mut b = ConfusionMatrix::new(&classes).unwrap();
            b.accumulate(&pred_p, &truth_p).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn separate_accumulation_equals_joint(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..5) as u16;
            let classes: Vec<ClassId> = (0..k).map(ClassId).collect();
            let mk = |rng: &mut ChaCha12Rng, n: usize| -> (Vec<ClassId>, Vec<ClassId>) {
                ((0..n).map(|_| ClassId(rng.gen_range(0..k))).collect(),
                 (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect())
            };
            let n1 = rng.gen_range(1..30);
            let (p1, t1) = mk(&mut rng, n1);
            let n2 = rng.gen_range(1..30);
            let (p2, t2) = mk(&mut rng, n2);
            let mut joint = ConfusionMatrix::new(&classes).unwrap();
            joint.accumulate(&p1, &t1).unwrap();
            joint.accumulate(&p2, &t2).unwrap();
            let mut a = ConfusionMatrix::new(&classes).unwrap();
            a.accumulate(&p1, &t1).unwrap();
            let mut b = ConfusionMatrix::new(&classes).unwrap();
            b.accumulate(&p2, &t2).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(joint, a);
        }
    }

    #[test]
    fn range_union_consistency() {
        // miou over the union equals the mean over per-class IoUs when all
        // classes are defined.
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let k = 5u16;
        let classes: Vec<ClassId> = (0..k).map(ClassId).collect();
        let n = 200;
        // Dense random grids make every class defined with high probability.
        let truth: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
        let pred: Vec<ClassId> = (0..n).map(|_| ClassId(rng.gen_range(0..k))).collect();
        let mut cm = ConfusionMatrix::new(&classes).unwrap();
        cm.accumulate(&pred, &truth).unwrap();
        let old = set(&[1, 2]);
        let new = set(&[3, 4]);
        let union: BTreeSet<ClassId> = old.union(&new).copied().collect();
        let u = cm.miou(&union).unwrap();
        assert!(u.undefined_classes.is_empty());
        let mean: f64 = union
            .iter()
            .map(|&c| cm.per_class_iou(c).unwrap().unwrap())
            .sum::<f64>()
            / union.len() as f64;
        assert!((u.value.unwrap() - mean).abs() < 1e-12);
    }
}
