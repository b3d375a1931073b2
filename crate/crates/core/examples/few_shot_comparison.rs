//! Trains the plain color-loss baseline and the entropy-regularized model on
//! the same four-view procedural scene and compares them on held-out views.
//!
//! cargo run --release --example few_shot_comparison -- --iterations 3000 --seeds 0,1,2

use clap::Parser;
use raygauge::data::{procedural_splits, OrbitLayout, SceneSpec};
use raygauge::eval::{entropy_report, entropy_table, eval_table, evaluate, EntropyReportConfig};
use raygauge::field::{AnalyticField, EncodingConfig, ModelConfig};
use raygauge::geometry::CameraIntrinsics;
use raygauge::infoloss::LossWeights;
use raygauge::render::SamplingConfig;
use raygauge::train::{train, TrainConfig, TrainSetup};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 3000)]
    iterations: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize])]
    unseen: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    seen: usize,
    #[arg(long, default_value_t = 1e-2)]
    lambda1: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 6)]
    test_views: usize,
    #[arg(long)]
    skip_baseline: bool,
}

fn main() -> raygauge::Result<()> {
    let args = Args::parse();
    let spec = SceneSpec {
        field: AnalyticField::two_sphere(40.0, [0.9, 0.3, 0.2], [0.2, 0.3, 0.9]),
        intrinsics: CameraIntrinsics::new(100, 100, 137.0)?,
        radius: 4.0,
        near: 2.0,
        far: 6.0,
        layout: OrbitLayout::Fibonacci,
        white_background: true,
    };
    let (train_ds, test_ds) = procedural_splits(&spec, 4, args.test_views, 0)?;
    let test_ds = test_ds.expect("test views requested");
    let sampling = SamplingConfig {
        near: spec.near,
        far: spec.far,
        white_background: spec.white_background,
        ..SamplingConfig::default()
    };

    for &seed in &args.seeds {
        let mut setup = TrainSetup {
            model: ModelConfig {
                width: args.width,
                depth: args.depth,
                color_width: args.width / 2,
                encoding: EncodingConfig {
                    levels_position: args.levels,
                    levels_direction: 2,
                    include_input: true,
                },
                init_seed: seed,
                ..ModelConfig::default()
            },
            sampling,
            losses: LossWeights {
                lambda1: args.lambda1,
                lambda2: args.lambda2,
                epsilon: args.epsilon,
            },
            train: TrainConfig {
                iterations: args.iterations,
                n_seen_rays: args.seen,
                seed,
                kl_seen_only: true,
                ..TrainConfig::default()
            },
            ..TrainSetup::default()
        };
        setup.schedule.lr_init = args.lr;

        let mut variants = Vec::new();
        if !args.skip_baseline {
            variants.push(("baseline".to_string(), setup.baseline()));
        }
        for &n in &args.unseen {
            let mut s = setup;
            s.train.n_unseen_rays = n;
            variants.push((format!("entropy-u{n}"), s));
        }

        let mut evals = Vec::new();
        let mut entropies = Vec::new();
        for (label, s) in variants {
            let start = std::time::Instant::now();
            let (field, trace) = train(&train_ds, s)?;
            let secs = start.elapsed().as_secs_f64();
            let last = trace.last().expect("at least one iteration");
            eprintln!("seed {seed} {label}: {secs:.0}s, final rgb {:.5}", last.rgb);
            evals.push(evaluate(&field, &test_ds, &sampling, 4096, &label)?);
            let cfg = EntropyReportConfig {
                epsilon: args.epsilon,
                seed,
                ..EntropyReportConfig::default()
            };
            entropies.push(entropy_report(
                &field,
                &test_ds.intrinsics,
                &test_ds.poses(),
                &sampling,
                &cfg,
                &label,
            )?);
        }
        println!("seed {seed}");
        println!("{}", eval_table(&evals.iter().collect::<Vec<_>>()));
        println!("{}", entropy_table(&entropies.iter().collect::<Vec<_>>()));
    }
    Ok(())
}
