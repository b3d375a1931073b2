//! Measures ray entropy and the information gain between each ray and a
//! slightly rotated neighbour, on an analytic field or a checkpoint.
//!
//! cargo run --release --example ray_entropy_report
//! cargo run --release --example ray_entropy_report -- run/checkpoint.bin

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raygauge::data::{orbit_poses, OrbitLayout};
use raygauge::eval::{entropy_report, entropy_table, EntropyReportConfig};
use raygauge::field::AnalyticField;
use raygauge::geometry::CameraIntrinsics;
use raygauge::render::SamplingConfig;
use raygauge::train::TrainingState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let intr = CameraIntrinsics::new(100, 100, 137.0)?;
    let poses = orbit_poses(4, 4.0, OrbitLayout::Fibonacci, &mut ChaCha8Rng::seed_from_u64(1));
    let sampling = SamplingConfig::default();
    let cfg = EntropyReportConfig::default();

    let truth = AnalyticField::two_sphere(40.0, [0.9, 0.3, 0.2], [0.2, 0.3, 0.9]);
    let mut reports = vec![entropy_report(&truth, &intr, &poses, &sampling, &cfg, "analytic")?];
    if let Some(path) = std::env::args().nth(1) {
        let state = TrainingState::load(Path::new(&path))?;
        let sampling = state.setup.map(|s| s.sampling).unwrap_or(sampling);
        reports.push(entropy_report(&state.field, &intr, &poses, &sampling, &cfg, &path)?);
    }
    println!("{}", entropy_table(&reports.iter().collect::<Vec<_>>()));
    Ok(())
}
