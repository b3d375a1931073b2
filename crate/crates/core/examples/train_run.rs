//! Trains from a JSON run config with `key=value` overrides, writing the
//! metrics log, checkpoint and resolved config into the output directory.
//!
//! cargo run --release --example generate_scene -- scenes/two_sphere
//! cargo run --release --example train_run -- data.scene=scenes/two_sphere train.iterations=500

use raygauge::config::{RunConfig, RESOLVED_CONFIG_FILE};
use raygauge::train::{train_to_dir, StepRecord, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::resolve(None, &overrides)?;
    let train_ds = cfg.load_train()?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_json())?;

    let mut trainer = Trainer::new(&train_ds, cfg.setup())?;
    let start = std::time::Instant::now();
    let run = train_to_dir(&mut trainer, &out, &mut |_, _| Ok(serde_json::Value::Null))?;

    let log = std::fs::read_to_string(&run.metrics)?;
    let records: Vec<StepRecord> = log.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
    let every = (records.len() / 10).max(1);
    for r in records.iter().filter(|r| (r.iter + 1) % every == 0) {
        println!(
            "iter {:>6}  lr {:.2e}  rgb {:.5}  entropy {:.4}  kl {:.5}  masked {:.2}",
            r.iter + 1,
            r.lr,
            r.rgb,
            r.entropy,
            r.kl,
            r.mask_rate
        );
    }
    println!(
        "{} iterations in {:.0}s, checkpoint {}",
        records.len(),
        start.elapsed().as_secs_f64(),
        run.checkpoint.display()
    );
    Ok(())
}
