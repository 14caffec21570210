use std::path::Path;
use std::process::{Command, Output};

use efh::bench::{ModuleTimings, CSV_HEADER};
use efh::training::synth::generate_synthetic_scene;
use efh::{Detector, ModelConfig};

fn efh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efh")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scene(dir: &Path, seed: u64) -> std::path::PathBuf {
    let p = dir.join(format!("scene{seed}.ppm"));
    std::fs::write(&p, generate_synthetic_scene::<f32>(seed, 64).unwrap().image.to_ppm()).unwrap();
    p
}

#[test]
fn missing_checkpoint_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 1);
    let out = dir.path().join("out");
    let r = efh(&[
        "detect",
        "--checkpoint",
        path(&dir.path().join("nope.otck")),
        "--image",
        path(&img),
        "--labels",
        "cat",
        "--out",
        path(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
    assert!(!r.stderr.is_empty());
}

#[test]
fn bad_arguments_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 2);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();

    let cases: [&[&str]; 4] = [
        &["detect", "--config", path(&cfg), "--image", path(&img), "--labels", "cat"],
        &["detect", "--image", path(&img), "--labels", ""],
        &["bench", "--images", path(&empty), "--labels", "cat"],
        &["bench", "--image", path(&img), "--labels", "cat", "--format", "xml"],
    ];
    for args in cases {
        assert_eq!(efh(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("init.otck");
    let metrics = dir.path().join("m.jsonl");
    let r = efh(&["train", "--steps", "0", "--scenes", "2", "--out", path(&ck), "--metrics", path(&metrics)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(std::fs::read(&metrics).unwrap().is_empty());
    let mut loaded = Detector::<f32>::new(ModelConfig::default()).unwrap();
    loaded.load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.store, Detector::<f32>::new(ModelConfig::default()).unwrap().store);
}

#[test]
fn short_training_run_reports_ap() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("t.otck");
    let metrics = dir.path().join("m.jsonl");
    let r = efh(&["train", "--steps", "3", "--scenes", "3", "--eval", "--out", path(&ck), "--metrics", path(&metrics)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&metrics).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let last = lines.last().unwrap();
    let ap = last["ap@0.5"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert!(lines[..lines.len() - 1].iter().all(|l| l["loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_scene(dir.path(), 3);
    let csv = dir.path().join("r.csv");
    let json = dir.path().join("r.json");
    let common = ["bench", "--image", path(&img), "--labels", "red circle", "--iters", "3", "--warmup", "1"];
    let r = efh(&[&common[..], &["--format", "csv", "--out", path(&csv)]].concat());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 6);

    let r = efh(&[&common[..], &["--out", path(&json)]].concat());
    assert!(r.status.success());
    let text = std::fs::read_to_string(&json).unwrap();
    let t = ModuleTimings::from_json(&text).unwrap();
    assert_eq!(t.iterations, 3);
    assert_eq!(t.to_json().unwrap(), text);
}
