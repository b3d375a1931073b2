//! Checks reverse-mode gradients of the regularized objective against
//! central differences on a tiny field.
//!
//! cargo run --release --example gradient_check

use raygauge::autodiff::{check_gradients, Tensor};
use raygauge::field::{EncodingConfig, FieldQuery, ModelConfig, NeuralField};
use raygauge::infoloss::{entropy_loss_graph, rgb_loss_graph};
use raygauge::render::composite;

fn main() -> raygauge::Result<()> {
    let net = NeuralField::new(ModelConfig {
        depth: 2,
        width: 8,
        color_width: 4,
        encoding: EncodingConfig {
            levels_position: 2,
            levels_direction: 1,
            include_input: true,
        },
        ..ModelConfig::default()
    })?;
    let (rays, samples) = (3, 8);
    let mut pos = Vec::new();
    let mut dirs = Vec::new();
    let mut t = Vec::new();
    for r in 0..rays {
        for s in 0..samples {
            let depth = 1.0 + 0.2 * s as f64 + 0.05 * r as f64;
            t.push(depth);
            pos.extend_from_slice(&[0.1 * r as f64, -0.05, 1.5 - depth]);
            dirs.extend_from_slice(&[0.0, 0.0, -1.0]);
        }
    }
    let pos = Tensor::new([rays * samples, 3], pos);
    let dirs = Tensor::new([rays * samples, 3], dirs);
    let t = Tensor::new([rays, samples], t);
    let delta = Tensor::full([rays, samples], 0.2);
    let target = Tensor::new([rays, 3], vec![0.8, 0.2, 0.1, 0.3, 0.3, 0.3, 1.0, 1.0, 1.0]);
    let params: Vec<Tensor> = net.params().iter().map(|(_, p)| p.clone()).collect();

    let report = check_gradients(
        |g, vars| {
            let field = net.bind_vars(vars.to_vec());
            let p = g.constant(pos.clone());
            let d = g.constant(dirs.clone());
            let (sigma, rgb) = field.query(g, p, d);
            let sigma = g.reshape(sigma, [rays, samples]);
            let rgb = g.reshape(rgb, [rays, samples, 3]);
            let c = composite(g, sigma, rgb, &t, &delta, true);
            let l_rgb = rgb_loss_graph(g, c.rgb, &target).unwrap();
            let (l_ent, _) = entropy_loss_graph(g, c.alpha, 0.01).unwrap();
            let l_ent = g.scale(l_ent, 0.1);
            g.add(l_rgb, l_ent)
        },
        &params,
        1e-5,
        1e-4,
    )?;
    println!(
        "{} parameters, {} on kinks, worst relative error {:.3e}: {}",
        report.analytic.len(),
        report.excluded.len(),
        report.max_rel_err,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(())
}
