//! Renders color and depth images from a checkpoint along an orbit.
//!
//! cargo run --release --example render_views -- run/checkpoint.bin renders 8

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raygauge::data::{orbit_poses, OrbitLayout};
use raygauge::geometry::CameraIntrinsics;
use raygauge::render::{render_image, write_png_gray16, write_png_rgb8};
use raygauge::train::TrainingState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "run/checkpoint.bin".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "renders".into()));
    let count: usize = args.next().map_or(Ok(8), |s| s.parse())?;

    let state = TrainingState::load(&ckpt)?;
    let sampling = state.setup.map(|s| s.sampling).unwrap_or_default().deterministic();
    let intr = CameraIntrinsics::new(100, 100, 137.0)?;
    let poses = orbit_poses(count, 4.0, OrbitLayout::Fibonacci, &mut ChaCha8Rng::seed_from_u64(0));
    std::fs::create_dir_all(&out)?;
    for (i, pose) in poses.iter().enumerate() {
        let img = render_image(&state.field, &intr, pose, &sampling, 4096)?;
        write_png_rgb8(&out.join(format!("rgb_{i:03}.png")), img.width, img.height, &img.rgb)?;
        write_png_gray16(&out.join(format!("depth_{i:03}.png")), img.width, img.height, &img.depth)?;
        let hit = img.opacity.iter().filter(|&&a| a > 0.5).count();
        println!("view {i}: {hit} of {} pixels opaque", img.opacity.len());
    }
    Ok(())
}
