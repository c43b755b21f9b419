//! End-to-end continual-learning runs.
//!
//! One run executes the per-step protocol over a task stream: prepare the
//! replay set (collision-resampled for the full method), train the
//! audio-visual model on the relabeled step data plus replay, evaluate on the
//! shared test set over everything learned so far, then score and select this
//! step's exemplars into the memory buffer.
//!
//! The dataset and stream are pure functions of the experiment config; the
//! run seed only drives training shuffles, random selection, and resampling
//! draws, so changing it never changes the stream structure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collision::{
    csr_prepare_step, CollisionError, CsrConfig, CsrStepOutput, ReplaySet, ThresholdMode,
};
use crate::dataset_io::{read_dataset, DatasetIoError};
use crate::memory::{
    extend_buffer, select_memory, MemoryBuffer, MemoryError, SelectionStrategy,
};
use crate::metrics::{evaluate_model, EvalReport, MetricsError};
use crate::model::{train_step_model, ModelError, ModelVariant, SegModel, TrainConfig};
use crate::stream::{
    relabel_for_step, split_disjoint, split_overlapped, Protocol, SplitConfig, StreamError,
    TaskStream,
};
use crate::synth::{
    empirical_cooccurrence_over, generate_dataset, DatasetConfig, SynthError,
};
use crate::types::{derive_seed, AVSample, ClassId, SampleId};

pub mod presets;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("configs passed to compare differ in shared settings: {0}")]
    MismatchedShared(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    DatasetIo(#[from] DatasetIoError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// Whether this failure stems from the configuration rather than the run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::MismatchedShared(_)
                | ExperimentError::Synth(_)
                | ExperimentError::Stream(_)
        )
    }
}

/// The continual-learning method under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Fine-tuning: no memory at all.
    #[serde(rename = "FT")]
    Ft,
    /// Seeded random exemplar choice.
    #[serde(rename = "random")]
    Random,
    /// Smallest signed deviation (most audio-harmed clips).
    #[serde(rename = "smallest")]
    Smallest,
    /// Largest signed deviation (most audio-helped clips).
    #[serde(rename = "largest")]
    Largest,
    /// Smallest absolute deviation.
    #[serde(rename = "MSS")]
    Mss,
    /// Smallest absolute deviation plus collision-based resampling.
    #[serde(rename = "MSS+CSR")]
    MssCsr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ft,
        Method::Random,
        Method::Smallest,
        Method::Largest,
        Method::Mss,
        Method::MssCsr,
    ];

    pub fn uses_memory(self) -> bool {
        self != Method::Ft
    }

    /// Whether the method needs the parallel visual-only model for deltas.
    pub fn needs_delta(self) -> bool {
        matches!(
            self,
            Method::Smallest | Method::Largest | Method::Mss | Method::MssCsr
        )
    }

    pub fn selection_strategy(self) -> Option<SelectionStrategy> {
        match self {
            Method::Ft => None,
            Method::Random => Some(SelectionStrategy::Random),
            Method::Smallest => Some(SelectionStrategy::SmallestSignedDelta),
            Method::Largest => Some(SelectionStrategy::LargestSignedDelta),
            Method::Mss | Method::MssCsr => Some(SelectionStrategy::SmallestAbsDelta),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Ft => "FT",
            Method::Random => "random",
            Method::Smallest => "smallest",
            Method::Largest => "largest",
            Method::Mss => "MSS",
            Method::MssCsr => "MSS+CSR",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FT" | "ft" => Ok(Method::Ft),
            "random" => Ok(Method::Random),
            "smallest" => Ok(Method::Smallest),
            "largest" => Ok(Method::Largest),
            "MSS" | "mss" => Ok(Method::Mss),
            "MSS+CSR" | "mss+csr" => Ok(Method::MssCsr),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

/// Where the dataset comes from: generated in-process or loaded from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Generate(DatasetConfig),
    Load(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub pattern: Vec<usize>,
    #[serde(default)]
    pub config: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub method: Method,
    pub k_per_class: usize,
    pub resample_fraction: f64,
    pub threshold: ThresholdMode,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Compute deltas on relabeled (true) or raw (false) step clips.
    #[serde(default = "default_true")]
    pub delta_on_relabeled: bool,
    /// Whether the visual-only model also sees the replay set.
    #[serde(default = "default_true")]
    pub fv_uses_memory: bool,
    /// Retrain the visual-only model from scratch each step instead of
    /// continuing from the previous one.
    #[serde(default)]
    pub fv_from_scratch: bool,
    #[serde(default = "default_true")]
    pub background_in_all: bool,
    /// Optional tanh hidden layer width for both models.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must be non-empty".into()));
        }
        if self.split.pattern.is_empty() {
            return Err(ExperimentError::Config("split pattern is empty".into()));
        }
        if self.method.uses_memory() && self.k_per_class == 0 {
            return Err(ExperimentError::Config(
                "memory methods need k_per_class >= 1".into(),
            ));
        }
        if self.method == Method::MssCsr
            && !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0)
        {
            return Err(ExperimentError::Config(format!(
                "resample_fraction must be in (0, 1], got {}",
                self.resample_fraction
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Per-step collision diagnostics in a report-friendly shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionDiagnostics {
    pub pairs: Vec<PairCountRow>,
    pub frequency: Vec<FrequencyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCountRow {
    pub old_class: ClassId,
    pub new_class: ClassId,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub class: ClassId,
    pub raw: u64,
    pub normalized: f64,
}

impl CollisionDiagnostics {
    fn from_csr(out: &CsrStepOutput) -> Self {
        Self {
            pairs: out
                .table
                .pair_counts
                .iter()
                .map(|(&(old, new), &count)| PairCountRow {
                    old_class: old,
                    new_class: new,
                    count,
                })
                .collect(),
            frequency: out
                .frequency
                .raw
                .iter()
                .map(|(&class, &raw)| FrequencyRow {
                    class,
                    raw,
                    normalized: out.frequency.normalized[&class],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub new_classes: Vec<ClassId>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    pub train_clips: usize,
    pub replay_clips: usize,
    pub eval: EvalReport,
    pub collisions: Option<CollisionDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub steps: Vec<StepReport>,
    pub config_echo: ExperimentConfig,
    /// Wall clock of the run; kept out of the serialized report so that
    /// identical (config, seed) runs produce byte-identical files.
    #[serde(skip, default)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn final_step(&self) -> &StepReport {
        self.steps.last().expect("at least one step")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

/// Final-step summary over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: Method,
    pub name: String,
    pub seeds: Vec<u64>,
    pub final_old: Option<MeanStd>,
    pub final_new: Option<MeanStd>,
    pub final_all: Option<MeanStd>,
}

fn aggregate(cfg: &ExperimentConfig, runs: &[RunReport]) -> AggregateReport {
    let collect = |f: &dyn Fn(&StepReport) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(|r| f(r.final_step())).collect()
    };
    AggregateReport {
        method: cfg.method,
        name: cfg.name.clone(),
        seeds: cfg.seeds.clone(),
        final_old: mean_std(&collect(&|s| s.miou_old)),
        final_new: mean_std(&collect(&|s| s.miou_new)),
        final_all: mean_std(&collect(&|s| s.miou_all)),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunReport>,
    pub aggregate: AggregateReport,
}

/// Generates or loads the dataset described by the source.
pub fn materialize_dataset(
    source: &DatasetSource,
) -> Result<(DatasetConfig, Vec<AVSample>), ExperimentError> {
    match source {
        DatasetSource::Generate(cfg) => {
            let samples = generate_dataset(cfg)?;
            Ok((cfg.clone(), samples))
        }
        DatasetSource::Load(path) => {
            let file = read_dataset(path)?;
            Ok((file.config, file.samples))
        }
    }
}

/// Builds the task stream for a dataset under the given split spec.
pub fn build_stream(
    dataset_cfg: &DatasetConfig,
    samples: &[AVSample],
    split: &SplitSpec,
) -> Result<TaskStream, ExperimentError> {
    let universe = dataset_cfg.non_background_classes();
    let stream = match split.protocol {
        Protocol::Overlapped => {
            split_overlapped(&universe, &split.pattern, samples, &split.config)?
        }
        Protocol::Disjoint => {
            let co_occ = empirical_cooccurrence_over(samples, &universe)?;
            split_disjoint(&universe, &split.pattern, &co_occ, samples, &split.config)?
        }
    };
    Ok(stream)
}

/// Full experiment: one run per seed plus the aggregate. Seeds run in
/// parallel; each run is deterministic in (config, seed).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let (dataset_cfg, samples) = materialize_dataset(&cfg.dataset)?;
    let stream = build_stream(&dataset_cfg, &samples, &cfg.split)?;
    run_experiment_on(cfg, &dataset_cfg, &samples, &stream)
}

/// Like [`run_experiment`] but over an already materialized dataset/stream,
/// so method comparisons share one generation.
pub fn run_experiment_on(
    cfg: &ExperimentConfig,
    dataset_cfg: &DatasetConfig,
    samples: &[AVSample],
    stream: &TaskStream,
) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let runs: Vec<Result<RunReport, ExperimentError>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_single(cfg, dataset_cfg, samples, stream, seed))
        .collect();
    let runs: Vec<RunReport> = runs.into_iter().collect::<Result<_, _>>()?;
    let aggregate = aggregate(cfg, &runs);
    Ok(ExperimentOutcome { runs, aggregate })
}

fn fresh_model(cfg: &ExperimentConfig, variant: ModelVariant, d_v: usize, d_a: usize, seed: u64) -> SegModel {
    match cfg.hidden_dim {
        Some(h) => SegModel::with_hidden(variant, d_v, d_a, h, derive_seed(seed, "hidden-init", 0)),
        None => SegModel::new(variant, d_v, d_a),
    }
}

fn run_single(
    cfg: &ExperimentConfig,
    dataset_cfg: &DatasetConfig,
    samples: &[AVSample],
    stream: &TaskStream,
    seed: u64,
) -> Result<RunReport, ExperimentError> {
    let start = Instant::now();
    let by_id: BTreeMap<SampleId, &AVSample> = samples.iter().map(|s| (s.id, s)).collect();
    let missing = |id: SampleId| {
        ExperimentError::Config(format!("stream references unknown sample id {id}"))
    };
    let test_samples: Vec<&AVSample> = stream
        .test_ids
        .iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| missing(*id)))
        .collect::<Result<_, _>>()?;

    // Evaluation matrix covers the whole universe so raw test labels of
    // not-yet-learned classes stay representable.
    let mut eval_class_list = vec![ClassId::BACKGROUND];
    eval_class_list.extend(dataset_cfg.non_background_classes());

    let d_v = dataset_cfg.visual_dim();
    let d_a = dataset_cfg.audio_dim();
    let mut model_va = fresh_model(cfg, ModelVariant::AudioVisual, d_v, d_a, seed);
    let mut model_v = if cfg.method.needs_delta() {
        Some(fresh_model(cfg, ModelVariant::Visual, d_v, d_a, seed))
    } else {
        None
    };
    let mut buffer = MemoryBuffer::new(cfg.k_per_class);
    // Relabeled copies of selected exemplars, stored once per clip.
    let mut memory_store: BTreeMap<SampleId, AVSample> = BTreeMap::new();

    let mut steps = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        let t = task.step_index;
        let raw_step: Vec<&AVSample> = stream.train_ids[t]
            .iter()
            .map(|id| by_id.get(id).copied().ok_or_else(|| missing(*id)))
            .collect::<Result<_, _>>()?;
        let relabeled: Vec<AVSample> =
            raw_step.iter().map(|s| relabel_for_step(s, task)).collect();

        // Replay preparation. The full method resamples the buffer by
        // collision frequency against the previous model; other memory
        // methods replay the buffer as-is. Step 0 has nothing to replay.
        let mut collisions = None;
        let replay: Option<ReplaySet> = if t == 0 || !cfg.method.uses_memory() {
            None
        } else if cfg.method == Method::MssCsr {
            let out = csr_prepare_step(
                &model_va,
                &buffer,
                &relabeled,
                &CsrConfig {
                    fraction: cfg.resample_fraction,
                    threshold: cfg.threshold,
                    seed: derive_seed(seed, "csr", t as u64),
                },
            )?;
            collisions = Some(CollisionDiagnostics::from_csr(&out));
            Some(out.replay)
        } else {
            Some(ReplaySet::base_only(&buffer))
        };

        let replay_refs: Vec<&AVSample> = match &replay {
            Some(r) => r
                .ids_with_multiplicity()
                .iter()
                .map(|id| {
                    memory_store
                        .get(id)
                        .ok_or_else(|| {
                            ExperimentError::Config(format!(
                                "replay references unselected sample {id}"
                            ))
                        })
                })
                .collect::<Result<_, _>>()?,
            None => Vec::new(),
        };

        let cumulative: Vec<ClassId> = task.cumulative_classes.iter().copied().collect();
        let mut train_data: Vec<&AVSample> = relabeled.iter().collect();
        train_data.extend(replay_refs.iter().copied());
        let train_clips = train_data.len();
        let replay_clips = replay.as_ref().map_or(0, |r| r.len());

        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = derive_seed(seed, "train-va", t as u64);
        model_va = train_step_model(&model_va, &train_data, &cumulative, &train_cfg)?;

        if let Some(mv) = model_v.take() {
            let mut v_data: Vec<&AVSample> = relabeled.iter().collect();
            if cfg.fv_uses_memory {
                v_data.extend(replay_refs.iter().copied());
            }
            let init = if cfg.fv_from_scratch {
                fresh_model(cfg, ModelVariant::Visual, d_v, d_a, seed)
            } else {
                mv
            };
            let mut v_cfg = cfg.train.clone();
            v_cfg.seed = derive_seed(seed, "train-v", t as u64);
            model_v = Some(train_step_model(&init, &v_data, &cumulative, &v_cfg)?);
        }

        // Evaluate on the shared test set over everything learned so far.
        let old_set: BTreeSet<ClassId> = task
            .cumulative_classes
            .difference(&task.new_classes)
            .copied()
            .collect();
        let named = vec![
            ("old".to_string(), old_set),
            ("new".to_string(), task.new_classes.clone()),
        ];
        let eval = evaluate_model(
            &model_va,
            &test_samples,
            &eval_class_list,
            &task.cumulative_classes,
            &named,
            cfg.background_in_all,
        )?;

        // Exemplar selection for this step's new classes.
        if let Some(strategy) = cfg.method.selection_strategy() {
            let deltas: BTreeMap<SampleId, f64> = if cfg.method.needs_delta() {
                let mv = model_v.as_ref().expect("delta methods keep a visual model");
                let range: BTreeSet<ClassId> = task.cumulative_classes.clone();
                let scored: Vec<(SampleId, Result<f64, MemoryError>)> = relabeled
                    .par_iter()
                    .zip(&raw_step)
                    .map(|(rel, raw)| {
                        let clip = if cfg.delta_on_relabeled { rel } else { *raw };
                        (rel.id, crate::memory::audio_delta(&model_va, mv, clip, &range))
                    })
                    .collect();
                let mut map = BTreeMap::new();
                for (id, r) in scored {
                    map.insert(id, r?);
                }
                map
            } else {
                // Random selection never looks at deltas; record zeros.
                relabeled.iter().map(|s| (s.id, 0.0)).collect()
            };
            let selection = select_memory(
                &relabeled,
                &deltas,
                &task.new_classes,
                cfg.k_per_class,
                strategy,
                derive_seed(seed, "select", t as u64),
                t,
            )?;
            for e in &selection.entries {
                if !memory_store.contains_key(&e.sample_id) {
                    let clip = relabeled
                        .iter()
                        .find(|s| s.id == e.sample_id)
                        .expect("selected clip comes from this step");
                    memory_store.insert(e.sample_id, clip.clone());
                }
            }
            buffer = extend_buffer(&buffer, &selection.entries)?;
        }

        steps.push(StepReport {
            step: t,
            new_classes: task.new_classes.iter().copied().collect(),
            miou_old: eval.range("old"),
            miou_new: eval.range("new"),
            miou_all: eval.miou_all,
            train_clips,
            replay_clips,
            eval,
            collisions,
        });
    }

    Ok(RunReport {
        seed,
        method: cfg.method,
        steps,
        config_echo: cfg.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Comparison table: one aggregate row per method over a shared dataset,
/// stream, and training setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<AggregateReport>,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&AggregateReport> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs every config over the shared dataset/stream and tabulates the final
/// mIoU aggregates. All configs must agree on everything except the method.
pub fn compare_methods(
    configs: &[ExperimentConfig],
) -> Result<(ComparisonTable, Vec<ExperimentOutcome>), ExperimentError> {
    let first = configs
        .first()
        .ok_or_else(|| ExperimentError::Config("no configs to compare".into()))?;
    for c in configs {
        let mut normalized = c.clone();
        normalized.method = first.method;
        normalized.name = first.name.clone();
        if normalized != *first {
            return Err(ExperimentError::MismatchedShared(format!(
                "config '{}' differs from '{}' beyond the method field",
                c.name, first.name
            )));
        }
    }
    let (dataset_cfg, samples) = materialize_dataset(&first.dataset)?;
    let stream = build_stream(&dataset_cfg, &samples, &first.split)?;
    let mut rows = Vec::with_capacity(configs.len());
    let mut outcomes = Vec::with_capacity(configs.len());
    for c in configs {
        let outcome = run_experiment_on(c, &dataset_cfg, &samples, &stream)?;
        rows.push(outcome.aggregate.clone());
        outcomes.push(outcome);
    }
    Ok((ComparisonTable { rows }, outcomes))
}
