//! Renders a ray through a homogeneous slab and compares the color with the
//! closed form c (1 - exp(-sigma l)) as the sample count grows.
//!
//! cargo run --release --example slab_oracle -- 4.0 1.5

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raygauge::field::AnalyticField;
use raygauge::geometry::{Ray, Vec3};
use raygauge::render::{render_ray, stratified_sample, RaySamples};

fn main() -> raygauge::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<f64>().expect("a number"));
    let sigma = args.next().unwrap_or(4.0);
    let len = args.next().unwrap_or(1.5);
    let color = [0.9, 0.5, 0.2];
    let (near, far) = (1.0, 1.0 + len);
    let field = AnalyticField::slab(-far - 1.0, 0.0, sigma, color);
    let ray = Ray {
        origin: Vec3::ZERO,
        direction: Vec3::new(0.0, 0.0, -1.0),
        pixel: None,
    };
    let exact = color[0] * (1.0 - (-sigma * len).exp());
    println!("sigma {sigma}, length {len}, exact red {exact:.9}");
    println!("{:>6}  {:>12}  {:>10}", "N", "red", "error");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [8, 16, 32, 64, 128, 256, 512, 1024] {
        let t = stratified_sample(near, far, n, false, &mut rng)?;
        let out = render_ray(&field, &ray, &RaySamples::new(t, near, far)?)?;
        println!("{n:>6}  {:>12.9}  {:>10.3e}", out.color[0], (out.color[0] - exact).abs());
    }
    Ok(())
}
