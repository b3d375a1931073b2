//! Scores one or two checkpoints on held-out views with PSNR and SSIM.
//!
//! cargo run --release --example evaluate_checkpoint -- scenes/two_sphere/transforms_test.json run/checkpoint.bin [other/checkpoint.bin]

use std::path::Path;

use raygauge::data::load_transforms;
use raygauge::eval::{eval_table, eval_view_table, evaluate, EvalReport};
use raygauge::render::SamplingConfig;
use raygauge::train::TrainingState;

fn score(path: &str, test: &raygauge::data::SceneDataset) -> raygauge::Result<EvalReport> {
    let state = TrainingState::load(Path::new(path))?;
    let mut sampling = state.setup.map(|s| s.sampling).unwrap_or_else(SamplingConfig::default);
    sampling.near = test.near;
    sampling.far = test.far;
    sampling.white_background = test.white_background;
    evaluate(&state.field, test, &sampling, 4096, path)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        return Err("usage: evaluate_checkpoint TRANSFORMS CHECKPOINT [CHECKPOINT]".into());
    }
    let test = load_transforms(Path::new(&args[0]), None)?;
    let reports = args[1..]
        .iter()
        .map(|p| score(p, &test))
        .collect::<raygauge::Result<Vec<_>>>()?;
    println!("{}", eval_view_table(&reports[0], reports.get(1))?);
    println!("{}", eval_table(&reports.iter().collect::<Vec<_>>()));
    Ok(())
}
