//! Writes a procedural two-sphere scene as `transforms_{train,test}.json`
//! plus PNG frames, the same layout the trainer reads.
//!
//! cargo run --release --example generate_scene -- scenes/two_sphere

use std::path::PathBuf;

use raygauge::data::{load_transforms, write_procedural_scene, OrbitLayout, SceneSpec};
use raygauge::field::AnalyticField;
use raygauge::geometry::CameraIntrinsics;

fn main() -> raygauge::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenes/two_sphere".into()));
    let spec = SceneSpec {
        field: AnalyticField::two_sphere(40.0, [0.9, 0.3, 0.2], [0.2, 0.3, 0.9]),
        intrinsics: CameraIntrinsics::new(100, 100, 137.0)?,
        radius: 4.0,
        near: 2.0,
        far: 6.0,
        layout: OrbitLayout::Fibonacci,
        white_background: true,
    };
    write_procedural_scene(&out, &spec, 4, 8, 0)?;
    for split in ["train", "test"] {
        let ds = load_transforms(&out.join(format!("transforms_{split}.json")), None)?;
        println!("{split}: {} views of {}x{}", ds.len(), ds.intrinsics.width, ds.intrinsics.height);
        for f in &ds.frames {
            let eye = f.pose.translation;
            println!("  {}  eye ({:+.3}, {:+.3}, {:+.3})", f.path.display(), eye.x(), eye.y(), eye.z());
        }
    }
    Ok(())
}
