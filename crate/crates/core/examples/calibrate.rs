//! Runs the preset streams across methods and prints the comparison tables.
//! Used to sanity-check effect sizes when adjusting preset parameters.

use std::time::Instant;

use cavs_core::experiment::{compare_methods, presets, DatasetSource, Method};
use cavs_core::report::format_compare_table;
use cavs_core::synth::{build_universe, UniverseSpec};

fn env_f64(name: &str) -> Option<f64> {
    std::env::var(name).ok().map(|v| v.parse().expect(name))
}

fn env_usize(name: &str) -> Option<usize> {
    std::env::var(name).ok().map(|v| v.parse().expect(name))
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "adversarial".into());
    let methods: Vec<Method> = match std::env::args().nth(2) {
        Some(list) => list
            .split(',')
            .map(|m| m.parse().expect("method name"))
            .collect(),
        None => Method::ALL.to_vec(),
    };
    let seeds: Option<Vec<u64>> = std::env::args().nth(3).map(|s| {
        s.split(',')
            .map(|x| x.parse().expect("seed"))
            .collect()
    });

    let mut configs: Vec<_> = methods
        .iter()
        .map(|&m| match which.as_str() {
            "adversarial" => presets::adversarial_config(m),
            "null" => presets::null_config(m),
            other => panic!("unknown preset '{other}'"),
        })
        .collect();
    if let Some(seeds) = seeds {
        for c in configs.iter_mut() {
            c.seeds = seeds.clone();
        }
    }
    // Optional training overrides: lr epochs batch_size l2.
    let args: Vec<String> = std::env::args().collect();
    for c in configs.iter_mut() {
        if let Some(lr) = args.get(4) {
            c.train.learning_rate = lr.parse().expect("lr");
        }
        if let Some(e) = args.get(5) {
            c.train.epochs = e.parse().expect("epochs");
        }
        if let Some(b) = args.get(6) {
            c.train.batch_size = b.parse().expect("batch");
        }
        if let Some(l) = args.get(7) {
            c.train.l2 = l.parse().expect("l2");
        }
        // Dataset knobs via env: CAL_GAIN, CAL_NOISE, CAL_COOCC, CAL_N,
        // CAL_ANOISE, CAL_SHARED.
        if let DatasetSource::Generate(ds) = &mut c.dataset {
            let mut spec = UniverseSpec {
                n_classes: 20,
                visual_dim: 8,
                audio_dim: 8,
                visual_noise_std: env_f64("CAL_NOISE").unwrap_or(0.25),
                audio_gain: env_f64("CAL_GAIN").unwrap_or(1.0),
                visual_shared_weight: env_f64("CAL_SHARED").unwrap_or(0.0),
                ambiguous_pairs: vec![(1, 16), (2, 17)],
                prototype_seed: 7,
            };
            if which == "null" {
                spec.ambiguous_pairs = vec![];
            }
            ds.universe = build_universe(&spec);
            if let Some(p) = env_f64("CAL_COOCC") {
                for entry in ds.co_occ.pair_probability.iter_mut() {
                    entry.2 = p;
                }
            }
            if let Some(n) = env_usize("CAL_N") {
                ds.n_samples = n;
            }
            if let Some(a) = env_f64("CAL_ANOISE") {
                ds.audio_noise_std = a;
            }
            if let Some(s) = env_usize("CAL_SIDE") {
                ds.object_side = (s, s + 1);
            }
        }
    }

    let start = Instant::now();
    let (table, outcomes) = compare_methods(&configs).expect("comparison");
    println!("{}", format_compare_table(&table));
    for outcome in &outcomes {
        let per_seed: Vec<String> = outcome
            .runs
            .iter()
            .map(|r| {
                format!(
                    "seed {} old {:.3} new {:.3} all {:.3} ({:.1}s)",
                    r.seed,
                    r.final_step().miou_old.unwrap_or(f64::NAN),
                    r.final_step().miou_new.unwrap_or(f64::NAN),
                    r.final_step().miou_all.unwrap_or(f64::NAN),
                    r.wall_clock_secs
                )
            })
            .collect();
        println!("{}: {}", outcome.aggregate.method, per_seed.join(" | "));
        // Step-0 context for forgetting comparisons.
        if let Some(run) = outcome.runs.first() {
            let s0 = &run.steps[0];
            println!(
                "  step0(seed {}): new {:.3} all {:.3}",
                run.seed,
                s0.miou_new.unwrap_or(f64::NAN),
                s0.miou_all.unwrap_or(f64::NAN)
            );
            let fin = run.final_step();
            let per: Vec<String> = fin
                .eval
                .per_class
                .iter()
                .map(|c| format!("{}:{}", c.class, c.iou.map(|v| format!("{v:.2}")).unwrap_or("-".into())))
                .collect();
            println!("  final per-class(seed {}): {}", run.seed, per.join(" "));
            if let Some(diag) = &fin.collisions {
                let freq: Vec<String> = diag
                    .frequency
                    .iter()
                    .map(|f| format!("{}:{}({:.3})", f.class, f.raw, f.normalized))
                    .collect();
                println!("  collision freq: {}", freq.join(" "));
            }
        }
    }
    println!("total wall clock: {:.1}s", start.elapsed().as_secs_f64());
}
