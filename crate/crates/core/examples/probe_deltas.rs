//! Prints the step-0 delta distribution of the adversarial stream, grouped
//! by clip composition, to see what each selection strategy would pick.

use std::collections::BTreeMap;

use cavs_core::experiment::{build_stream, materialize_dataset, presets, DatasetSource, Method};
use cavs_core::memory::audio_delta;
use cavs_core::model::{train_step_model, ModelVariant, SegModel};
use cavs_core::stream::relabel_for_step;
use cavs_core::synth::{build_universe, UniverseSpec};
use cavs_core::types::derive_seed;

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().map(|v| v.parse().expect(name)).unwrap_or(default)
}

fn main() {
    let mut cfg = presets::adversarial_config(Method::Mss);
    if let DatasetSource::Generate(ds) = &mut cfg.dataset {
        let spec = UniverseSpec {
            n_classes: 20,
            visual_dim: 8,
            audio_dim: 8,
            visual_noise_std: env_f64("CAL_NOISE", 0.25),
            audio_gain: env_f64("CAL_GAIN", 1.0),
            visual_shared_weight: env_f64("CAL_SHARED", 0.0),
            ambiguous_pairs: vec![(1, 16), (2, 17)],
            prototype_seed: 7,
        };
        ds.universe = build_universe(&spec);
        let p = env_f64("CAL_COOCC", 0.55);
        for e in ds.co_occ.pair_probability.iter_mut() {
            e.2 = p;
        }
        ds.n_samples = env_f64("CAL_N", 240.0) as usize;
        if let Ok(s) = std::env::var("CAL_SIDE") {
            let s: usize = s.parse().unwrap();
            ds.object_side = (s, s + 1);
        }
    }
    cfg.train.learning_rate = env_f64("CAL_LR", 2.0);
    cfg.train.epochs = env_f64("CAL_EPOCHS", 40.0) as usize;
    cfg.train.batch_size = env_f64("CAL_BATCH", 8.0) as usize;

    let (ds_cfg, samples) = materialize_dataset(&cfg.dataset).unwrap();
    let stream = build_stream(&ds_cfg, &samples, &cfg.split).unwrap();
    let task = &stream.tasks[0];
    println!("step0 classes: {:?}", task.new_classes);
    let by_id: BTreeMap<_, _> = samples.iter().map(|s| (s.id, s)).collect();
    let d0: Vec<_> = stream.train_ids[0]
        .iter()
        .map(|id| relabel_for_step(by_id[id], task))
        .collect();
    let refs: Vec<&_> = d0.iter().collect();
    let seed = 1u64;
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(seed, "train-va", 0);
    let classes: Vec<_> = task.cumulative_classes.iter().copied().collect();
    let va = train_step_model(
        &SegModel::new(ModelVariant::AudioVisual, ds_cfg.visual_dim(), ds_cfg.audio_dim()),
        &refs,
        &classes,
        &tc,
    )
    .unwrap();
    tc.seed = derive_seed(seed, "train-v", 0);
    let v = train_step_model(
        &SegModel::new(ModelVariant::Visual, ds_cfg.visual_dim(), ds_cfg.audio_dim()),
        &refs,
        &classes,
        &tc,
    )
    .unwrap();

    let range = task.cumulative_classes.clone();
    let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut twin_deltas: Vec<(u32, usize, f64)> = Vec::new();
    for s in &d0 {
        let delta = audio_delta(&va, &v, s, &range).unwrap();
        let n_obj = s.labeled_classes().len();
        by_count.entry(n_obj).or_default().push(delta);
        if s.contains_class(cavs_core::ClassId(1)) || s.contains_class(cavs_core::ClassId(2)) {
            twin_deltas.push((s.id.0, n_obj, delta));
        }
    }
    for (n, ds) in &by_count {
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        let mut sorted = ds.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = sorted[sorted.len() / 2];
        let min = sorted[0];
        let max = sorted[sorted.len() - 1];
        println!(
            "objects={n}: count={} mean={mean:+.4} med={med:+.4} min={min:+.4} max={max:+.4}",
            ds.len()
        );
    }
    println!("twin-class clips (id, n_obj, delta):");
    twin_deltas.sort_by(|a, b| a.2.abs().partial_cmp(&b.2.abs()).unwrap());
    for (id, n, d) in twin_deltas.iter().take(20) {
        println!("  {id} n={n} delta={d:+.4}");
    }
}
