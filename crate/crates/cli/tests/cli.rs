use std::path::Path;
use std::process::{Command, Output};

fn placement(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_placement"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, seed: &str) {
    let o = placement(&[
        "synth-gen", "--scenes", "3", "--pos", "2", "--neg", "1", "--side", "16", "--seed", seed, "--out", p(dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

const TINY: [&str; 8] = ["--set", "preset=tiny", "--set", "side=16", "--set", "batch=2", "--set", "probe_scenes=2"];

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--seed", "3"];
    args.extend(TINY);
    args.extend(extra);
    placement(&args)
}

#[test]
fn synth_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("a"), "4");
    synth(&dir.path().join("b"), "4");
    synth(&dir.path().join("c"), "5");
    let read = |d: &str| std::fs::read(dir.path().join(d).join("manifest.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert!(dir.path().join("a/samples/0000_pos0/comp.png").exists());
}

#[test]
fn train_place_eval_viz() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");

    let run = dir.path().join("run");
    let o = train_tiny(&data, &run, &["--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "lambda=50"));
    assert!(resolved.lines().any(|l| l == "preset=tiny"));
    assert!(run.join("metrics.csv").exists() && run.join("epoch_001.ckpt").exists());

    let ckpt = run.join("last.ckpt");
    let sample = data.join("samples/0000_pos0");
    let place = |out: &Path| {
        placement(&[
            "place", "--ckpt", p(&ckpt), "--bg", p(&sample.join("bg.png")), "--fg", p(&sample.join("fg.png")),
            "--mask", p(&sample.join("mask.png")), "--k", "3", "--seed", "9", "--out", p(out),
        ])
    };
    let (pa, pb) = (dir.path().join("pa"), dir.path().join("pb"));
    assert!(place(&pa).status.success());
    assert!(place(&pb).status.success());
    let params = std::fs::read_to_string(pa.join("params.csv")).unwrap();
    assert_eq!(params.lines().count(), 4);
    assert_eq!(params, std::fs::read_to_string(pb.join("params.csv")).unwrap());
    for i in 0..3 {
        let name = format!("composite_{i:02}.png");
        assert_eq!(std::fs::read(pa.join(&name)).unwrap(), std::fs::read(pb.join(&name)).unwrap());
        assert!(pa.join(format!("mask_{i:02}.png")).exists());
    }
    assert!(pa.join("run.txt").exists());

    let o = placement(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--k", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("accuracy,frechet,diversity,n_samples,k_per_sample\n"));
    assert!(text.lines().nth(1).unwrap().ends_with(",3,2"));

    let png = dir.path().join("viz/attn.png");
    let o = placement(&[
        "viz-attn", "--ckpt", p(&ckpt), "--bg", p(&sample.join("bg.png")), "--fg", p(&sample.join("fg.png")),
        "--mask", p(&sample.join("mask.png")), "--out", p(&png),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(png.exists());
    let regions = std::fs::read_to_string(png.with_extension("csv")).unwrap();
    assert_eq!(regions.lines().count(), 1 + 8);
}

#[test]
fn ten_step_logs_are_byte_equal() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_tiny(&data, out, &["--max-steps", "10", "--epochs", "20"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let steps = std::fs::read(a.join("steps.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&steps).lines().count(), 11);
    assert_eq!(steps, std::fs::read(b.join("steps.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn overfit_mode_reports_rec() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "3");
    let out = dir.path().join("of");
    let o = train_tiny(&data, &out, &["--overfit", "1", "--overfit-steps", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("rec "));
    let resolved = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.lines().any(|l| l == "path_u=false"));
    assert!(resolved.lines().any(|l| l == "batch=1"));
}

#[test]
fn gradcheck_passes() {
    let o = placement(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("attention"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(placement(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(placement(&["train"]).status.code(), Some(1));
    let data = dir.path().join("data");
    synth(&data, "6");
    let o = train_tiny(&data, &dir.path().join("x"), &["--set", "lamda=3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = train_tiny(&dir.path().join("missing"), &dir.path().join("y"), &[]);
    assert_eq!(o.status.code(), Some(2));
    // dataset side does not match the configured model
    let o = placement(&["train", "--data", p(&data), "--out", p(&dir.path().join("z"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(placement(&["--help"]).status.code(), Some(0));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_placement"))
        .args(["synth-gen", "--scenes", "1", "--side", "16", "--neg", "1"])
        .env("PLACEMENT_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("data/manifest.txt").exists());
}
