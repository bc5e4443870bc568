use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use vrlayout::layoutmodel::{forward, load_checkpoint, Mode, ModelDims, ModelParams};
use vrlayout::Dataset;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrlayout"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn dataset(dir: &Path, name: &str) -> Dataset {
    Dataset::from_json(&String::from_utf8(read(dir, name)).unwrap()).unwrap()
}

/// A temp dir holding a 6-scene corpus and a checkpoint trained on it for `epochs`.
fn trained(epochs: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_path_buf();
    ok(&d, &["gen", "--scenes", "6", "--seed", "5", "--out", "data.json"]);
    ok(
        &d,
        &[
            "train",
            "--data",
            "data.json",
            "--epochs",
            epochs,
            "--batch",
            "4",
            "--out",
            "model.json",
        ],
    );
    (dir, d)
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--scenes", "12", "--seed", "3", "--out", "a.json"]);
    ok(d, &["gen", "--scenes", "12", "--seed", "3", "--out", "b.json"]);
    ok(d, &["gen", "--scenes", "12", "--seed", "4", "--out", "c.json"]);
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
    assert_ne!(read(d, "a.json"), read(d, "c.json"));
    let ds = dataset(d, "a.json");
    assert_eq!(ds.scenes.len(), 12);
    assert!(ds.scenes.iter().all(|s| s.gt_boxes.is_some()));
}

#[test]
fn gen_accepts_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--scenes", "0", "--out", "e.json"]);
    assert!(dataset(dir.path(), "e.json").scenes.is_empty());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["gen", "--scenes", "3"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["train", "--data", "x.json"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        run(d, &["eval", "--pred", "missing.json", "--gt", "missing.json"])
            .status
            .code(),
        Some(1)
    );
    ok(d, &["gen", "--scenes", "2", "--out", "two.json"]);
    ok(d, &["gen", "--scenes", "3", "--out", "three.json"]);
    let out = run(d, &["eval", "--pred", "two.json", "--gt", "three.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene count"));
    assert_eq!(
        run(
            d,
            &[
                "gen",
                "--scenes",
                "2",
                "--min-side",
                "0.6",
                "--max-side",
                "0.2",
                "--out",
                "x.json"
            ]
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let (_tmp, d) = trained("0");
    let ckpt = load_checkpoint(&d.join("model.json")).unwrap();
    let dims = ModelDims::new(10, 6, ckpt.config.arch);
    assert_eq!(ckpt.params, ModelParams::init(dims, 42));
    assert_eq!(ckpt.config.mode, Mode::Full);
}

#[test]
fn training_is_reproducible() {
    let (_tmp, d) = trained("1");
    ok(
        &d,
        &[
            "train",
            "--data",
            "data.json",
            "--epochs",
            "1",
            "--batch",
            "4",
            "--out",
            "again.json",
            "--history",
            "h.json",
        ],
    );
    assert_eq!(read(&d, "model.json"), read(&d, "again.json"));
    let history: Value = serde_json::from_slice(&read(&d, "h.json")).unwrap();
    assert_eq!(history["mode"], "full");
    assert_eq!(history["epochs"].as_array().unwrap().len(), 1);
}

#[test]
fn predict_copies_graphs_and_honours_mode() {
    let (_tmp, d) = trained("0");
    ok(
        &d,
        &[
            "predict",
            "--ckpt",
            "model.json",
            "--data",
            "data.json",
            "--out",
            "p.json",
            "--mode",
            "no-individual",
        ],
    );
    let gt = dataset(&d, "data.json");
    let pred = dataset(&d, "p.json");
    let params = load_checkpoint(&d.join("model.json")).unwrap().params;
    assert_eq!(pred.vocab, gt.vocab);
    for (p, g) in pred.scenes.iter().zip(&gt.scenes) {
        assert_eq!(p.graph, g.graph);
        let out = forward(&g.graph, &params, Mode::NoIndividual, None).unwrap();
        let boxes = p.gt_boxes.as_ref().unwrap();
        for (b, init) in boxes.iter().zip(&out.initial_boxes) {
            let clipped = vrlayout::BoundingBox::clip_from(*init).to_array();
            for (u, v) in b.to_array().iter().zip(clipped) {
                // The file stores nine significant digits.
                assert!((u - v).abs() <= 1e-8 * v.abs().max(1e-3), "{u} vs {v}");
            }
        }
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--scenes", "10", "--out", "g.json"]);
    let report: Value = serde_json::from_str(&ok(
        d,
        &["eval", "--pred", "g.json", "--gt", "g.json", "--out", "r.json"],
    ))
    .unwrap();
    assert_eq!(report, serde_json::from_slice::<Value>(&read(d, "r.json")).unwrap());
    let recall = report["recall_at"].as_object().unwrap();
    assert!(recall.len() > 1 && recall.values().all(|v| v == 1.0));
    assert_eq!(report["r_iou"], 1.0);
    assert_eq!(report["rs"], 1.0);
    assert_eq!(report["n_scenes"], 10);

    let single: Value =
        serde_json::from_str(&ok(d, &["eval", "--pred", "g.json", "--gt", "g.json", "--tau", "0.5"])).unwrap();
    let keys: Vec<&String> = single["recall_at"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["0.5"]);
    assert_eq!(
        run(d, &["eval", "--pred", "g.json", "--gt", "g.json", "--tau", "1.5"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn render_writes_a_binary_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--scenes", "2", "--out", "g.json"]);
    ok(
        d,
        &[
            "render", "--data", "g.json", "--scene", "1", "--size", "32", "--out", "s.ppm",
        ],
    );
    let img = read(d, "s.ppm");
    let header = b"P6\n32 32\n255\n";
    assert_eq!(&img[..header.len()], header);
    assert_eq!(img.len(), header.len() + 32 * 32 * 3);
    assert!(img[header.len()..].chunks(3).any(|p| p != [255, 255, 255]));
    assert_eq!(
        run(d, &["render", "--data", "g.json", "--scene", "2", "--out", "t.ppm"])
            .status
            .code(),
        Some(1)
    );
}
