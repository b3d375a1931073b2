use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_raygauge"));
    c.env("RAYGAUGE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, views: &str) {
    ok(&[
        "gen-scene", "--out", p(dir), "--field", "sphere", "--radius", "0.9", "--sigma", "30",
        "--color", "0.8,0.3,0.2", "--views", views, "--test-views", "2", "--seed", "3",
        "--width", "16", "--height", "16", "--focal", "22",
    ]);
}

fn train_small(scene: &Path, out: &Path, extra: &[&str]) -> Output {
    let scene_set = format!("data.scene={}", p(scene));
    let mut args = vec![
        "train", "--out", p(out), "--set", &scene_set,
        "--set", "model.width=8", "--set", "model.depth=2", "--set", "model.color_width=4",
        "--set", "model.encoding.levels_position=2", "--set", "model.encoding.levels_direction=1",
        "--set", "sampling.n_coarse=8", "--set", "sampling.n_fine=8",
        "--set", "train.n_seen_rays=16", "--set", "train.n_unseen_rays=8",
        "--set", "train.iterations=4",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_scene_writes_frames_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "4");
    gen_small(&b, "4");
    let t: serde_json::Value =
        serde_json::from_slice(&read(a.join("transforms_train.json"))).unwrap();
    assert_eq!(t["frames"].as_array().unwrap().len(), 4);
    for f in ["transforms_train.json", "transforms_test.json", "images/train_000.png"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn invalid_flags_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let r = run(&["gen-scene", "--out", p(&out), "--views", "0"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["gen-scene", "--out", p(&out), "--color", "2,0,0"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["no-such-command"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn train_render_eval_entropy_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_small(&scene, "3");
    let run_a = tmp.path().join("run_a");
    let r = train_small(&scene, &run_a, &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["checkpoint.bin", "metrics.ndjson", "config.json"] {
        assert!(run_a.join(f).is_file(), "{f}");
    }
    let log = String::from_utf8(read(run_a.join("metrics.ndjson"))).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iter", "lr", "lambda2", "rgb", "entropy", "kl", "total", "mask_rate"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    // Baseline by overrides.
    let run_b = tmp.path().join("run_b");
    let r = train_small(&scene, &run_b, &["--set", "losses.lambda1=0", "--set", "losses.lambda2=0"]);
    assert!(r.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&read(run_b.join("config.json"))).unwrap();
    assert_eq!(cfg["losses"]["lambda1"], 0.0);

    let ckpt = run_a.join("checkpoint.bin");
    let test_tf = scene.join("transforms_test.json");
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for out in [&r1, &r2] {
        ok(&["render", "--checkpoint", p(&ckpt), "--pose-source", p(&test_tf), "--out", p(out)]);
    }
    for i in 0..2 {
        for f in [format!("rgb_{i:03}.png"), format!("depth_{i:03}.png")] {
            assert_eq!(read(r1.join(&f)), read(r2.join(&f)), "{f}");
        }
    }
    assert!(!r1.join("rgb_002.png").exists());

    let d = tmp.path().join("depth");
    ok(&["render", "--checkpoint", p(&ckpt), "--pose-source", "orbit:2", "--out", p(&d),
        "--width", "8", "--height", "8", "--focal", "10", "--depth-only"]);
    assert!(d.join("depth_001.png").is_file());
    assert!(d.join("depth_001.raw").is_file());
    assert!(!d.join("rgb_000.png").exists());

    let r = run(&["render", "--checkpoint", p(&ckpt), "--pose-source", "orbit:x", "--out", p(&d)]);
    assert_eq!(r.status.code(), Some(2));

    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for out in [&e1, &e2] {
        ok(&["eval", "--checkpoint", p(&ckpt), "--transforms", p(&test_tf), "--out", p(out)]);
    }
    assert_eq!(read(e1.join("eval.json")), read(e2.join("eval.json")));
    let report: serde_json::Value = serde_json::from_slice(&read(e1.join("eval.json"))).unwrap();
    assert!(report["psnr"]["mean"].as_f64().unwrap().is_finite());

    let cmp = tmp.path().join("cmp");
    ok(&["eval", "--checkpoint", p(&ckpt), "--transforms", p(&test_tf), "--out", p(&cmp),
        "--compare", p(&run_b.join("checkpoint.bin"))]);
    let table = String::from_utf8(read(cmp.join("eval.txt"))).unwrap();
    assert!(table.contains("dPSNR"), "{table}");

    let ent = tmp.path().join("ent");
    ok(&["entropy-report", "--checkpoint", p(&ckpt), "--transforms", p(&test_tf), "--out", p(&ent),
        "--max-angle", "0", "--grid", "4", "--epsilon", "0"]);
    let er: serde_json::Value = serde_json::from_slice(&read(ent.join("entropy.json"))).unwrap();
    assert_eq!(er["mean_information_gain"], 0.0);

    let entc = tmp.path().join("entc");
    ok(&["entropy-report", "--checkpoint", p(&ckpt), "--transforms", p(&test_tf), "--out", p(&entc),
        "--grid", "4", "--compare", p(&run_b.join("checkpoint.bin"))]);
    let t = String::from_utf8(read(entc.join("entropy.txt"))).unwrap();
    assert!(t.contains("delta"), "{t}");
}

#[test]
fn config_errors_exit_two_and_resume_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_small(&scene, "2");

    let bad = train_small(&scene, &tmp.path().join("bad"), &["--set", "losses.lambda9=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"train": {"iterations": 2, "bogus": 1}}"#).unwrap();
    let bad = run(&["train", "--config", p(&cfg_path)]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = train_small(&tmp.path().join("nowhere"), &tmp.path().join("m"), &[]);
    assert_eq!(missing.status.code(), Some(1));

    let straight = tmp.path().join("straight");
    assert!(train_small(&scene, &straight, &["--set", "train.iterations=6"]).status.success());
    let half = tmp.path().join("half");
    assert!(train_small(&scene, &half, &["--set", "train.iterations=3"]).status.success());
    let resume = half.join("checkpoint.bin");
    let r = train_small(&scene, &half, &["--set", "train.iterations=6", "--resume", p(&resume)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let a = String::from_utf8(read(straight.join("metrics.ndjson"))).unwrap();
    let b = String::from_utf8(read(half.join("metrics.ndjson"))).unwrap();
    assert_eq!(b.lines().count(), 6);
    for (x, y) in a.lines().zip(b.lines()) {
        let (x, y): (serde_json::Value, serde_json::Value) =
            (serde_json::from_str(x).unwrap(), serde_json::from_str(y).unwrap());
        let (lx, ly) = (x["total"].as_f64().unwrap(), y["total"].as_f64().unwrap());
        assert!((lx - ly).abs() <= 1e-9 * lx.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn divergence_exits_three_and_keeps_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_small(&scene, "2");
    let out = tmp.path().join("div");
    let r = train_small(&scene, &out, &["--set", "schedule.lr_init=1e300"]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("last good iteration"));
    assert!(out.join("checkpoint.bin").is_file());
}
