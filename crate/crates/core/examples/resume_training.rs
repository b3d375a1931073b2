//! Trains straight through and in two halves with a checkpoint in between,
//! then compares the loss traces.
//!
//! cargo run --release --example resume_training

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raygauge::data::{generate_procedural_scene, OrbitLayout, SceneSpec};
use raygauge::field::{AnalyticField, Checkpoint, EncodingConfig, ModelConfig};
use raygauge::geometry::CameraIntrinsics;
use raygauge::train::{TrainSetup, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        field: AnalyticField::two_sphere(40.0, [0.9, 0.3, 0.2], [0.2, 0.3, 0.9]),
        intrinsics: CameraIntrinsics::new(32, 32, 44.0)?,
        radius: 4.0,
        near: 2.0,
        far: 6.0,
        layout: OrbitLayout::Fibonacci,
        white_background: true,
    };
    let ds = generate_procedural_scene(&spec, 4, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut setup = TrainSetup::default();
    setup.model = ModelConfig {
        width: 16,
        depth: 2,
        color_width: 8,
        encoding: EncodingConfig {
            levels_position: 4,
            levels_direction: 2,
            include_input: true,
        },
        ..ModelConfig::default()
    };
    setup.sampling.n_coarse = 32;
    setup.sampling.n_fine = 32;
    setup.train.iterations = 40;
    setup.train.n_seen_rays = 64;
    setup.train.n_unseen_rays = 64;

    let mut straight = Trainer::new(&ds, setup)?;
    let mut full = Vec::new();
    straight.run_until(40, |_, r| {
        full.push(*r);
        Ok(())
    })?;

    let mut first = Trainer::new(&ds, setup)?;
    let mut halves = Vec::new();
    first.run_until(20, |_, r| {
        halves.push(*r);
        Ok(())
    })?;
    let path = std::env::temp_dir().join("raygauge_resume_example.bin");
    first.checkpoint().save(&path)?;
    let mut second = Trainer::resume(&ds, setup, &Checkpoint::load(&path)?)?;
    second.run_until(40, |_, r| {
        halves.push(*r);
        Ok(())
    })?;

    let worst = full
        .iter()
        .zip(&halves)
        .map(|(a, b)| (a.total - b.total).abs())
        .fold(0.0, f64::max);
    println!("{} iterations, largest loss difference after resuming {worst:.3e}", full.len());
    std::fs::remove_file(path)?;
    Ok(())
}
