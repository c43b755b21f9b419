//! Ready-made experiment configurations.
//!
//! The adversarial stream is built to exercise both failure modes at desk
//! scale: two identical-visual class pairs are split across the two steps of
//! a 15-5 disjoint stream (so the new twin can only be told from the old one
//! by audio), and classes co-occur strongly within each step block (so
//! exemplar audio mixes classes unless selection avoids it). The null stream
//! removes both stressors; memory methods should be indistinguishable on it.

use crate::collision::ThresholdMode;
use crate::model::{EarlyStopConfig, TrainConfig};
use crate::stream::{Protocol, SplitConfig};
use crate::synth::{build_universe, CoOccurrenceSpec, DatasetConfig, UniverseSpec};
use crate::types::{ClassId, GridDims};

use super::{DatasetSource, ExperimentConfig, Method, SplitSpec};

/// Pair probability within each step block of the adversarial stream.
const BLOCK_CO_OCCURRENCE: f64 = 0.55;

fn block_pair_probabilities(blocks: &[std::ops::RangeInclusive<u16>], p: f64) -> Vec<(ClassId, ClassId, f64)> {
    let mut out = Vec::new();
    for block in blocks {
        let ids: Vec<u16> = block.clone().collect();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                out.push((ClassId(a), ClassId(b), p));
            }
        }
    }
    out
}

/// Dataset with 20 classes in two co-occurrence blocks {1..15} and {16..20},
/// zero cross-block co-occurrence, and identical-visual pairs (1, 16) and
/// (2, 17) spanning the blocks.
pub fn adversarial_dataset(seed: u64) -> DatasetConfig {
    let spec = UniverseSpec {
        n_classes: 20,
        visual_dim: 8,
        audio_dim: 8,
        visual_noise_std: 0.25,
        audio_gain: 1.0,
        visual_shared_weight: 0.0,
        ambiguous_pairs: vec![(1, 16), (2, 17)],
        prototype_seed: 7,
    };
    DatasetConfig {
        universe: build_universe(&spec),
        co_occ: CoOccurrenceSpec {
            pair_probability: block_pair_probabilities(
                &[1..=15, 16..=20],
                BLOCK_CO_OCCURRENCE,
            ),
            objects_per_frame: (1, 3),
        },
        n_samples: 240,
        grid: GridDims::new(16, 16),
        frames_per_clip: 10,
        audio_noise_std: 0.1,
        object_side: (3, 7),
        seed,
    }
}

/// Same scale as the adversarial dataset, but no co-occurrence and no
/// identical-visual pairs.
pub fn null_dataset(seed: u64) -> DatasetConfig {
    let spec = UniverseSpec {
        n_classes: 20,
        visual_dim: 8,
        audio_dim: 8,
        visual_noise_std: 0.25,
        audio_gain: 1.0,
        visual_shared_weight: 0.0,
        ambiguous_pairs: vec![],
        prototype_seed: 7,
    };
    DatasetConfig {
        universe: build_universe(&spec),
        co_occ: CoOccurrenceSpec {
            pair_probability: Vec::new(),
            objects_per_frame: (1, 3),
        },
        n_samples: 240,
        grid: GridDims::new(16, 16),
        frames_per_clip: 10,
        audio_noise_std: 0.1,
        object_side: (3, 7),
        seed,
    }
}

pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.8,
        epochs: 30,
        batch_size: 16,
        seed: 0,
        l2: 1e-5,
        early_stop: Some(EarlyStopConfig::default()),
    }
}

fn base_config(name: &str, dataset: DatasetConfig, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        dataset: DatasetSource::Generate(dataset),
        split: SplitSpec {
            protocol: Protocol::Disjoint,
            pattern: vec![15, 5],
            config: SplitConfig::default(),
        },
        method,
        k_per_class: 5,
        resample_fraction: 0.2,
        threshold: ThresholdMode::MeanShare,
        train: default_train_config(),
        seeds: vec![1, 2, 3, 4, 5],
        output_dir: None,
        delta_on_relabeled: true,
        fv_uses_memory: true,
        fv_from_scratch: false,
        background_in_all: true,
        hidden_dim: None,
    }
}

/// The default adversarial 15-5 disjoint stream.
pub fn adversarial_config(method: Method) -> ExperimentConfig {
    base_config("adversarial-15-5", adversarial_dataset(2024), method)
}

/// The null-control stream: no co-occurrence, no identical-visual pairs.
pub fn null_config(method: Method) -> ExperimentConfig {
    base_config("null-control-15-5", null_dataset(2024), method)
}

/// Offline upper bound: a single task holding every class, trained once.
pub fn upper_bound_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = format!("{}-upper-bound", base.name);
    cfg.method = Method::Ft;
    let n_classes: usize = base.split.pattern.iter().sum();
    cfg.split = SplitSpec {
        protocol: Protocol::Overlapped,
        pattern: vec![n_classes],
        config: base.split.config.clone(),
    };
    cfg
}
