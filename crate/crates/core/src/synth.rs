//! Procedural audio-visual scene generation.
//!
//! Every clip is a static scene: axis-aligned rectangular objects placed
//! without overlap, persisting across all frames. Object pixels carry the
//! class visual prototype plus per-frame Gaussian noise; the clip audio is the
//! noisy sum of the sounding classes' audio prototypes. Which classes appear
//! together is driven by a symmetric pair-probability table, so co-occurrence
//! structure (and the confusion it induces downstream) is controllable.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{derive_seed, AVSample, ClassId, GridDims, SampleId};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("universe is empty")]
    EmptyUniverse,
    #[error("universe must contain a background profile with class id 0")]
    MissingBackground,
    #[error("universe needs at least 2 non-background classes, got {0}")]
    TooFewClasses(usize),
    #[error("duplicate class id {0} in universe")]
    DuplicateClass(ClassId),
    #[error("class {class}: prototype length {got} does not match expected {expected}")]
    PrototypeDim {
        class: ClassId,
        got: usize,
        expected: usize,
    },
    #[error("class {class}: {what} must be {constraint}")]
    BadProfileField {
        class: ClassId,
        what: &'static str,
        constraint: &'static str,
    },
    #[error("pair probability for ({0}, {1}) out of [0, 1]: {2}")]
    BadPairProbability(ClassId, ClassId, f64),
    #[error("objects_per_frame range ({0}, {1}) is invalid")]
    BadObjectRange(usize, usize),
    #[error("n_samples must be positive")]
    NoSamples,
    #[error("grid {h}x{w} is too small: both sides must be at least 4 and fit a {min_side}x{min_side} object")]
    GridTooSmall {
        h: usize,
        w: usize,
        min_side: usize,
    },
    #[error("object side range ({0}, {1}) is invalid")]
    BadObjectSide(usize, usize),
    #[error("no samples provided")]
    NoInputSamples,
    #[error("class {0} not covered by this table")]
    ClassNotInTable(ClassId),
}

/// Per-class generation profile: what the class looks like and sounds like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class_id: ClassId,
    pub visual_prototype: Vec<f64>,
    pub audio_prototype: Vec<f64>,
    pub visual_noise_std: f64,
    pub audio_gain: f64,
}

/// Symmetric pair-probability table plus the per-clip object count range.
///
/// Entries are sparse; missing pairs have probability 0. The diagonal is
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceSpec {
    pub pair_probability: Vec<(ClassId, ClassId, f64)>,
    /// (min, max) objects per clip. The minimum is only enforced when the
    /// pair table allows it; with zero probabilities everywhere a clip keeps
    /// its single seed object.
    pub objects_per_frame: (usize, usize),
}

impl CoOccurrenceSpec {
    pub fn none(max_objects: usize) -> Self {
        Self {
            pair_probability: Vec::new(),
            objects_per_frame: (1, max_objects.max(1)),
        }
    }

    pub fn probability(&self, a: ClassId, b: ClassId) -> f64 {
        if a == b {
            return 0.0;
        }
        self.pair_probability
            .iter()
            .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
            .map(|(_, _, p)| *p)
            .unwrap_or(0.0)
    }
}

/// Everything needed to generate a dataset. The same config and seed always
/// produce the same samples, byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub universe: Vec<ClassProfile>,
    pub co_occ: CoOccurrenceSpec,
    pub n_samples: usize,
    pub grid: GridDims,
    pub frames_per_clip: usize,
    pub audio_noise_std: f64,
    /// Inclusive range of object side lengths, clamped to the grid.
    pub object_side: (usize, usize),
    pub seed: u64,
}

pub const DEFAULT_VISUAL_DIM: usize = 8;
pub const DEFAULT_AUDIO_DIM: usize = 8;
pub const DEFAULT_FRAMES_PER_CLIP: usize = 10;
pub const DEFAULT_VISUAL_NOISE_STD: f64 = 0.25;
pub const DEFAULT_AUDIO_NOISE_STD: f64 = 0.1;

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.universe.is_empty() {
            return Err(SynthError::EmptyUniverse);
        }
        let bg = self
            .universe
            .iter()
            .find(|p| p.class_id.is_background())
            .ok_or(SynthError::MissingBackground)?;
        let d_v = bg.visual_prototype.len();
        let d_a = bg.audio_prototype.len();
        let mut seen = BTreeSet::new();
        for p in &self.universe {
            if !seen.insert(p.class_id) {
                return Err(SynthError::DuplicateClass(p.class_id));
            }
            if p.visual_prototype.len() != d_v {
                return Err(SynthError::PrototypeDim {
                    class: p.class_id,
                    got: p.visual_prototype.len(),
                    expected: d_v,
                });
            }
            if p.audio_prototype.len() != d_a {
                return Err(SynthError::PrototypeDim {
                    class: p.class_id,
                    got: p.audio_prototype.len(),
                    expected: d_a,
                });
            }
            if !(p.visual_noise_std >= 0.0) {
                return Err(SynthError::BadProfileField {
                    class: p.class_id,
                    what: "visual_noise_std",
                    constraint: "non-negative",
                });
            }
            if !(p.audio_gain > 0.0) {
                return Err(SynthError::BadProfileField {
                    class: p.class_id,
                    what: "audio_gain",
                    constraint: "positive",
                });
            }
        }
        let non_bg = self.universe.len() - 1;
        if non_bg < 2 {
            return Err(SynthError::TooFewClasses(non_bg));
        }
        for &(a, b, p) in &self.co_occ.pair_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::BadPairProbability(a, b, p));
            }
        }
        let (omin, omax) = self.co_occ.objects_per_frame;
        if omin < 1 || omax < omin {
            return Err(SynthError::BadObjectRange(omin, omax));
        }
        if self.n_samples == 0 {
            return Err(SynthError::NoSamples);
        }
        let (smin, smax) = self.object_side;
        if smin < 1 || smax < smin {
            return Err(SynthError::BadObjectSide(smin, smax));
        }
        if self.grid.h < 4 || self.grid.w < 4 || smin > self.grid.h || smin > self.grid.w {
            return Err(SynthError::GridTooSmall {
                h: self.grid.h,
                w: self.grid.w,
                min_side: smin,
            });
        }
        Ok(())
    }

    fn profile(&self, c: ClassId) -> &ClassProfile {
        self.universe
            .iter()
            .find(|p| p.class_id == c)
            .expect("validated universe covers class")
    }

    pub fn non_background_classes(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self
            .universe
            .iter()
            .map(|p| p.class_id)
            .filter(|c| !c.is_background())
            .collect();
        ids.sort();
        ids
    }

    pub fn visual_dim(&self) -> usize {
        self.universe[0].visual_prototype.len()
    }

    pub fn audio_dim(&self) -> usize {
        self.universe[0].audio_prototype.len()
    }
}

/// Generates the full dataset. Pure function of the config (which includes
/// the seed); samples are generated in parallel, each from its own sub-seed.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<AVSample>, SynthError> {
    cfg.validate()?;
    let samples: Vec<AVSample> = (0..cfg.n_samples as u32)
        .into_par_iter()
        .map(|i| generate_sample(cfg, SampleId(i)))
        .collect();
    Ok(samples)
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, other: &Rect) -> bool {
        self.left < other.left + other.w
            && other.left < self.left + self.w
            && self.top < other.top + other.h
            && other.top < self.top + self.h
    }
}

fn generate_sample(cfg: &DatasetConfig, id: SampleId) -> AVSample {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "sample", id.0 as u64));
    let classes = cfg.non_background_classes();
    let (omin, omax) = cfg.co_occ.objects_per_frame;
    let max_objects = omax.min(classes.len());

    // Pick the sounding set: a uniform seed class, then one Bernoulli join
    // trial per additional object slot against a random candidate, weighted
    // by its strongest pair probability to the already-chosen classes. The
    // first failed trial ends the clip, so object counts stay mixed instead
    // of saturating at the maximum.
    let mut chosen: Vec<ClassId> = Vec::new();
    chosen.push(classes[rng.gen_range(0..classes.len())]);
    let mut rest: Vec<ClassId> = classes.iter().copied().filter(|c| *c != chosen[0]).collect();
    rest.shuffle(&mut rng);
    while chosen.len() < max_objects {
        let Some(cand) = rest.pop() else { break };
        let p = chosen
            .iter()
            .map(|&c| cfg.co_occ.probability(cand, c))
            .fold(0.0, f64::max);
        if p > 0.0 && rng.gen_bool(p.min(1.0)) {
            chosen.push(cand);
        } else {
            break;
        }
    }
    // Top up to the minimum object count where the table allows co-occurrence
    // at all; a zero table keeps singletons.
    if chosen.len() < omin {
        for &cand in &rest {
            if chosen.len() >= omin {
                break;
            }
            if chosen.contains(&cand) {
                continue;
            }
            let p = chosen
                .iter()
                .map(|&c| cfg.co_occ.probability(cand, c))
                .fold(0.0, f64::max);
            if p > 0.0 {
                chosen.push(cand);
            }
        }
    }

    // Place one rectangle per chosen class; rejection sampling with a bounded
    // attempt budget, dropping the class when placement fails.
    let (smin, smax) = cfg.object_side;
    let smax_h = smax.min(cfg.grid.h);
    let smax_w = smax.min(cfg.grid.w);
    let mut rects: Vec<(ClassId, Rect)> = Vec::new();
    for &c in &chosen {
        let mut placed = false;
        for _ in 0..100 {
            let h = rng.gen_range(smin..=smax_h);
            let w = rng.gen_range(smin..=smax_w);
            let top = rng.gen_range(0..=cfg.grid.h - h);
            let left = rng.gen_range(0..=cfg.grid.w - w);
            let r = Rect { top, left, h, w };
            if rects.iter().all(|(_, o)| !r.overlaps(o)) {
                rects.push((c, r));
                placed = true;
                break;
            }
        }
        if !placed {
            // Object count reduced; the class neither appears nor sounds.
        }
    }

    let sounding: BTreeSet<ClassId> = rects.iter().map(|(c, _)| *c).collect();

    // Static scene: one label grid shared by all frames.
    let px = cfg.grid.pixels();
    let mut label_grid = vec![ClassId::BACKGROUND; px];
    for (c, r) in &rects {
        for y in r.top..r.top + r.h {
            for x in r.left..r.left + r.w {
                label_grid[y * cfg.grid.w + x] = *c;
            }
        }
    }

    let d_v = cfg.visual_dim();
    let bg = cfg.profile(ClassId::BACKGROUND);
    let mut frames = Vec::with_capacity(cfg.frames_per_clip);
    let labels = vec![label_grid.clone(); cfg.frames_per_clip];
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..cfg.frames_per_clip {
        let mut feat = Vec::with_capacity(px * d_v);
        for &lab in &label_grid {
            let prof = if lab.is_background() {
                bg
            } else {
                cfg.profile(lab)
            };
            for d in 0..d_v {
                let noise: f64 = unit.sample(&mut rng) * prof.visual_noise_std;
                feat.push(prof.visual_prototype[d] + noise);
            }
        }
        frames.push(feat);
    }

    let d_a = cfg.audio_dim();
    let mut audio = vec![0.0; d_a];
    for &c in &sounding {
        let prof = cfg.profile(c);
        for d in 0..d_a {
            audio[d] += prof.audio_gain * prof.audio_prototype[d];
        }
    }
    for a in audio.iter_mut() {
        *a += unit.sample(&mut rng) * cfg.audio_noise_std;
    }

    AVSample {
        id,
        dims: cfg.grid,
        visual_dim: d_v,
        frames,
        labels,
        audio,
        sounding,
    }
}

/// Symmetric class pair-count table. Off-diagonal entries count samples where
/// both classes appear; the diagonal counts samples per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    pub classes: Vec<ClassId>,
    counts: Vec<u64>,
}

impl PairCounts {
    pub fn new(classes: Vec<ClassId>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    fn idx(&self, c: ClassId) -> Option<usize> {
        self.classes.iter().position(|&x| x == c)
    }

    pub fn get(&self, a: ClassId, b: ClassId) -> Result<u64, SynthError> {
        let i = self.idx(a).ok_or(SynthError::ClassNotInTable(a))?;
        let j = self.idx(b).ok_or(SynthError::ClassNotInTable(b))?;
        Ok(self.counts[i * self.classes.len() + j])
    }

    pub fn covers(&self, classes: &[ClassId]) -> bool {
        classes.iter().all(|c| self.idx(*c).is_some())
    }

    /// Sets one symmetric pair count (diagonal allowed), for hand-built
    /// tables.
    pub fn set_pair_count(&mut self, a: ClassId, b: ClassId, v: u64) {
        let n = self.classes.len();
        if let (Some(i), Some(j)) = (self.idx(a), self.idx(b)) {
            self.counts[i * n + j] = v;
            self.counts[j * n + i] = v;
        }
    }

    pub fn total_pair_weight(&self) -> f64 {
        let n = self.classes.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += self.counts[i * n + j] as f64;
            }
        }
        total
    }

    fn record(&mut self, present: &BTreeSet<ClassId>) {
        let ids: Vec<usize> = present.iter().filter_map(|c| self.idx(*c)).collect();
        let n = self.classes.len();
        for (k, &i) in ids.iter().enumerate() {
            self.counts[i * n + i] += 1;
            for &j in &ids[k + 1..] {
                self.counts[i * n + j] += 1;
                self.counts[j * n + i] += 1;
            }
        }
    }
}

/// Counts class co-appearance over the given samples. The table covers the
/// distinct classes observed anywhere in `samples`.
pub fn empirical_cooccurrence(samples: &[AVSample]) -> Result<PairCounts, SynthError> {
    if samples.is_empty() {
        return Err(SynthError::NoInputSamples);
    }
    let mut observed = BTreeSet::new();
    for s in samples {
        observed.extend(s.labeled_classes());
    }
    let mut table = PairCounts::new(observed.into_iter().collect());
    for s in samples {
        table.record(&s.labeled_classes());
    }
    Ok(table)
}

/// Like [`empirical_cooccurrence`] but over an explicit class list, so
/// classes absent from the samples still get (zero) rows.
pub fn empirical_cooccurrence_over(
    samples: &[AVSample],
    classes: &[ClassId],
) -> Result<PairCounts, SynthError> {
    if samples.is_empty() {
        return Err(SynthError::NoInputSamples);
    }
    let mut table = PairCounts::new(classes.to_vec());
    for s in samples {
        table.record(&s.labeled_classes());
    }
    Ok(table)
}

/// Compact description of a class universe, expandable into full profiles.
///
/// Visual prototypes are random unit vectors, optionally blended with a shared
/// direction (`visual_shared_weight`) to make classes look more alike. Each
/// ambiguous pair lists two 1-based class indices whose visual prototypes are
/// made identical while their audio prototypes stay distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseSpec {
    pub n_classes: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual_noise_std: f64,
    pub audio_gain: f64,
    pub visual_shared_weight: f64,
    pub ambiguous_pairs: Vec<(u16, u16)>,
    pub prototype_seed: u64,
}

impl UniverseSpec {
    pub fn new(n_classes: usize, prototype_seed: u64) -> Self {
        Self {
            n_classes,
            visual_dim: DEFAULT_VISUAL_DIM,
            audio_dim: DEFAULT_AUDIO_DIM,
            visual_noise_std: DEFAULT_VISUAL_NOISE_STD,
            audio_gain: 1.0,
            visual_shared_weight: 0.0,
            ambiguous_pairs: default_ambiguous_pairs(n_classes),
            prototype_seed,
        }
    }
}

/// One identical-visual pair per 10 classes, pairing class i with class
/// i + n/2 so default splits tend to separate the two halves.
pub fn default_ambiguous_pairs(n_classes: usize) -> Vec<(u16, u16)> {
    let pairs = n_classes / 10;
    let half = (n_classes / 2) as u16;
    (0..pairs as u16).map(|i| (i + 1, i + 1 + half)).collect()
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Expands a [`UniverseSpec`] into concrete class profiles (background plus
/// `n_classes` sounding classes with ids 1..=n).
pub fn build_universe(spec: &UniverseSpec) -> Vec<ClassProfile> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(spec.prototype_seed, "universe", 0));
    let shared = random_unit(&mut rng, spec.visual_dim);
    let mut profiles = Vec::with_capacity(spec.n_classes + 1);
    profiles.push(ClassProfile {
        class_id: ClassId::BACKGROUND,
        visual_prototype: vec![0.0; spec.visual_dim],
        audio_prototype: vec![0.0; spec.audio_dim],
        visual_noise_std: spec.visual_noise_std,
        audio_gain: 1.0,
    });
    for i in 1..=spec.n_classes as u16 {
        let own = random_unit(&mut rng, spec.visual_dim);
        let w = spec.visual_shared_weight.clamp(0.0, 1.0);
        let mut visual: Vec<f64> = own
            .iter()
            .zip(&shared)
            .map(|(o, s)| (1.0 - w) * o + w * s)
            .collect();
        let norm = visual.iter().map(|x| x * x).sum::<f64>().sqrt();
        for v in visual.iter_mut() {
            *v /= norm;
        }
        profiles.push(ClassProfile {
            class_id: ClassId(i),
            visual_prototype: visual,
            audio_prototype: random_unit(&mut rng, spec.audio_dim),
            visual_noise_std: spec.visual_noise_std,
            audio_gain: spec.audio_gain,
        });
    }
    for &(a, b) in &spec.ambiguous_pairs {
        let proto = profiles
            .iter()
            .find(|p| p.class_id == ClassId(a))
            .map(|p| p.visual_prototype.clone());
        if let (Some(proto), Some(tgt)) = (
            proto,
            profiles.iter_mut().find(|p| p.class_id == ClassId(b)),
        ) {
            tgt.visual_prototype = proto;
        }
    }
    profiles
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_config(pair_prob: f64, n: usize, seed: u64) -> DatasetConfig {
        let spec = UniverseSpec {
            n_classes: 2,
            visual_dim: 4,
            audio_dim: 4,
            visual_noise_std: 0.1,
            audio_gain: 1.0,
            visual_shared_weight: 0.0,
            ambiguous_pairs: vec![],
            prototype_seed: 11,
        };
        DatasetConfig {
            universe: build_universe(&spec),
            co_occ: CoOccurrenceSpec {
                pair_probability: vec![(ClassId(1), ClassId(2), pair_prob)],
                objects_per_frame: (1, 2),
            },
            n_samples: n,
            grid: GridDims::new(8, 8),
            frames_per_clip: 3,
            audio_noise_std: 0.05,
            object_side: (2, 3),
            seed,
        }
    }

    #[test]
    fn zero_cooccurrence_forces_singletons() {
        let cfg = two_class_config(0.0, 10, 5);
        let samples = generate_dataset(&cfg).unwrap();
        for s in &samples {
            assert_eq!(s.labeled_classes().len(), 1, "sample {} not singleton", s.id);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = two_class_config(0.5, 12, 9);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pair_probability_is_respected_empirically() {
        let cfg = two_class_config(0.9, 500, 31);
        let samples = generate_dataset(&cfg).unwrap();
        let both = samples
            .iter()
            .filter(|s| s.labeled_classes().len() == 2)
            .count();
        let rate = both as f64 / samples.len() as f64;
        assert!(
            (rate - 0.9).abs() <= 0.05,
            "co-occurrence rate {rate} not within 0.05 of 0.9"
        );
    }

    #[test]
    fn labels_match_sounding_and_audio_mix() {
        let cfg = two_class_config(0.5, 30, 17);
        let samples = generate_dataset(&cfg).unwrap();
        for s in &samples {
            assert_eq!(s.labeled_classes(), s.sounding);
            assert!(!s.sounding.contains(&ClassId::BACKGROUND));
            // Audio within noise bounds of the prototype sum.
            let mut expected = vec![0.0; cfg.audio_dim()];
            for &c in &s.sounding {
                let prof = cfg.universe.iter().find(|p| p.class_id == c).unwrap();
                for d in 0..expected.len() {
                    expected[d] += prof.audio_gain * prof.audio_prototype[d];
                }
            }
            for d in 0..expected.len() {
                assert!(
                    (s.audio[d] - expected[d]).abs() < 6.0 * cfg.audio_noise_std,
                    "audio dim {d} off: {} vs {}",
                    s.audio[d],
                    expected[d]
                );
            }
        }
    }

    #[test]
    fn rejects_empty_universe_and_tiny_grid() {
        let mut cfg = two_class_config(0.0, 5, 1);
        cfg.universe.clear();
        assert!(matches!(cfg.validate(), Err(SynthError::EmptyUniverse)));

        let mut cfg = two_class_config(0.0, 5, 1);
        cfg.grid = GridDims::new(3, 8);
        assert!(matches!(cfg.validate(), Err(SynthError::GridTooSmall { .. })));
    }

    #[test]
    fn empirical_counts_hand_enumeration() {
        // 3 samples {A,B},{A,B},{A} -> count(A,B)=2, count(A,A)=3, count(B,B)=2.
        let cfg = two_class_config(0.5, 3, 1);
        let mk = |id: u32, classes: &[u16]| {
            let mut labels = vec![ClassId::BACKGROUND; 16];
            for (i, &c) in classes.iter().enumerate() {
                labels[i] = ClassId(c);
            }
            AVSample {
                id: SampleId(id),
                dims: GridDims::new(4, 4),
                visual_dim: cfg.visual_dim(),
                frames: vec![vec![0.0; 16 * cfg.visual_dim()]],
                labels: vec![labels],
                audio: vec![0.0; cfg.audio_dim()],
                sounding: classes.iter().map(|&c| ClassId(c)).collect(),
            }
        };
        let samples = vec![mk(0, &[1, 2]), mk(1, &[1, 2]), mk(2, &[1])];
        let t = empirical_cooccurrence(&samples).unwrap();
        assert_eq!(t.get(ClassId(1), ClassId(2)).unwrap(), 2);
        assert_eq!(t.get(ClassId(2), ClassId(1)).unwrap(), 2);
        assert_eq!(t.get(ClassId(1), ClassId(1)).unwrap(), 3);
        assert_eq!(t.get(ClassId(2), ClassId(2)).unwrap(), 2);
    }

    #[test]
    fn disjoint_singletons_have_zero_offdiagonal() {
        let cfg = two_class_config(0.0, 20, 3);
        let samples = generate_dataset(&cfg).unwrap();
        let t = empirical_cooccurrence(&samples).unwrap();
        assert_eq!(t.get(ClassId(1), ClassId(2)).unwrap_or(0), 0);
    }

    #[test]
    fn ambiguous_pairs_share_visual_but_not_audio() {
        let spec = UniverseSpec::new(20, 42);
        let profiles = build_universe(&spec);
        assert_eq!(spec.ambiguous_pairs.len(), 2);
        for &(a, b) in &spec.ambiguous_pairs {
            let pa = profiles.iter().find(|p| p.class_id == ClassId(a)).unwrap();
            let pb = profiles.iter().find(|p| p.class_id == ClassId(b)).unwrap();
            assert_eq!(pa.visual_prototype, pb.visual_prototype);
            assert_ne!(pa.audio_prototype, pb.audio_prototype);
        }
    }

    #[test]
    fn object_feature_means_track_prototypes() {
        // Mean feature over an object's pixels stays within
        // 3*sigma/sqrt(n_pixels) of the prototype, per dimension, for >=99%
        // of (object, dimension) pairs over 100 seeds.
        let mut total = 0u64;
        let mut ok = 0u64;
        for seed in 0..100 {
            let cfg = two_class_config(0.3, 6, seed);
            let samples = generate_dataset(&cfg).unwrap();
            for s in &samples {
                for &c in &s.sounding.clone() {
                    let prof = cfg.universe.iter().find(|p| p.class_id == c).unwrap();
                    // Pool pixels of this class over all frames.
                    let mut sums = vec![0.0; cfg.visual_dim()];
                    let mut count = 0usize;
                    for t in 0..s.frame_count() {
                        for px in 0..s.dims.pixels() {
                            if s.labels[t][px] == c {
                                let f = s.feature(t, px);
                                for d in 0..sums.len() {
                                    sums[d] += f[d];
                                }
                                count += 1;
                            }
                        }
                    }
                    let bound = 3.0 * prof.visual_noise_std / (count as f64).sqrt();
                    for d in 0..sums.len() {
                        let mean = sums[d] / count as f64;
                        total += 1;
                        if (mean - prof.visual_prototype[d]).abs() <= bound {
                            ok += 1;
                        }
                    }
                }
            }
        }
        let rate = ok as f64 / total as f64;
        assert!(rate >= 0.99, "coupling rate {rate} < 0.99 ({ok}/{total})");
    }

    #[test]
    fn audio_decomposes_onto_sounding_prototypes() {
        // Least-squares coefficients of the audio vector on the prototype
        // matrix are largest exactly for the sounding classes. Requires
        // n_classes <= audio_dim so the system is well-posed; noise std 0.05
        // is comfortably below the documented threshold (~0.3 for unit-norm
        // prototypes).
        let spec = UniverseSpec {
            n_classes: 4,
            visual_dim: 4,
            audio_dim: 6,
            visual_noise_std: 0.1,
            audio_gain: 1.0,
            visual_shared_weight: 0.0,
            ambiguous_pairs: vec![],
            prototype_seed: 77,
        };
        let universe = build_universe(&spec);
        let cfg = DatasetConfig {
            universe: universe.clone(),
            co_occ: CoOccurrenceSpec {
                pair_probability: vec![
                    (ClassId(1), ClassId(2), 0.6),
                    (ClassId(3), ClassId(4), 0.6),
                    (ClassId(1), ClassId(3), 0.3),
                ],
                objects_per_frame: (1, 3),
            },
            n_samples: 40,
            grid: GridDims::new(8, 8),
            frames_per_clip: 2,
            audio_noise_std: 0.05,
            object_side: (2, 3),
            seed: 5,
        };
        let samples = generate_dataset(&cfg).unwrap();
        let protos: Vec<&[f64]> = universe
            .iter()
            .filter(|p| !p.class_id.is_background())
            .map(|p| p.audio_prototype.as_slice())
            .collect();
        for s in &samples {
            let coeffs = least_squares(&protos, &s.audio);
            // The smallest sounding coefficient must exceed the largest
            // non-sounding coefficient.
            let mut min_in = f64::INFINITY;
            let mut max_out = f64::NEG_INFINITY;
            for (i, &c) in coeffs.iter().enumerate() {
                let cid = ClassId(i as u16 + 1);
                if s.sounding.contains(&cid) {
                    min_in = min_in.min(c);
                } else {
                    max_out = max_out.max(c);
                }
            }
            assert!(
                min_in > max_out,
                "sample {}: sounding coeff {min_in} <= non-sounding {max_out}",
                s.id
            );
        }
    }

    /// Solves min ||A x - y||2 where columns of A are prototypes, via normal
    /// equations with Gaussian elimination. Test-only oracle.
    fn least_squares(protos: &[&[f64]], y: &[f64]) -> Vec<f64> {
        let k = protos.len();
        let mut g = vec![vec![0.0; k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                g[i][j] = protos[i].iter().zip(protos[j]).map(|(a, b)| a * b).sum();
            }
            g[i][k] = protos[i].iter().zip(y).map(|(a, b)| a * b).sum();
        }
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&a, &b| g[a][col].abs().partial_cmp(&g[b][col].abs()).unwrap())
                .unwrap();
            g.swap(col, pivot);
            let p = g[col][col];
            assert!(p.abs() > 1e-12, "singular prototype Gram matrix");
            for r in 0..k {
                if r != col {
                    let f = g[r][col] / p;
                    for c in col..=k {
                        g[r][c] -= f * g[col][c];
                    }
                }
            }
        }
        (0..k).map(|i| g[i][k] / g[i][i]).collect()
    }
}
