use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guided_inpaint::checkpoint::{self, Checkpoint};
use guided_inpaint::dataset::{example_dir, load_split, read_manifest, MANIFEST};
use guided_inpaint::io::{load_rgb, quantize};
use guided_inpaint::training::read_metrics;
use guided_inpaint_core::eval::{run_method, HoleFiller, Method, Models};
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "train": {
    "model": {"resolution": 32, "channel_scale": 0.125},
    "batch_size": 2,
    "max_iterations": 6,
    "checkpoint_interval": 3,
    "percept_window": 2
  },
  "datagen": {"resolution": 32}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_guided-inpaint"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Scenes, a config file and a generated corpus under one temp dir.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(seed: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        fs::write(f.config(), CONFIG).unwrap();
        ok(&["gen-scenes", "--out", s(&f.path("scenes")), "--count", "3", "--size", "40", "--seed", "1"]);
        ok(&["gen-scenes", "--out", s(&f.path("targets")), "--count", "2", "--size", "48", "--seed", "2"]);
        f.gen_data("data", seed);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.json")
    }

    fn gen_data(&self, out: &str, seed: &str) -> Output {
        ok(&[
            "gen-data",
            "--images",
            s(&self.path("scenes")),
            "--targets",
            s(&self.path("targets")),
            "--out",
            s(&self.path(out)),
            "--pairs",
            "2",
            "--config",
            s(&self.config()),
            "--seed",
            seed,
        ])
    }

    fn train(&self, kind: &str, out: &str, extra: &[&str]) -> Output {
        let mut args =
            vec![kind, "--data", s(&self.path("data")).to_owned().leak(), "--out", self.path(out).to_str().unwrap().to_owned().leak()];
        args.extend(["--config", self.config().to_str().unwrap().to_owned().leak()]);
        args.extend(extra);
        run(&args)
    }
}

#[test]
fn gen_data_writes_a_reproducible_corpus() {
    let f = Fixture::new("5");
    let records = read_manifest(&f.path("data/train").join(MANIFEST)).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        let d = example_dir(&f.path("data"), "train", &r.id);
        for file in ["gt.png", "incomplete.png", "guidance.png", "mask.png", "transform.txt"] {
            assert!(d.join(file).is_file(), "{} missing {file}", r.id);
        }
        assert_eq!(load_rgb(&d.join("gt.png")).unwrap().dimensions(), (32, 32));
    }
    f.gen_data("again", "5");
    let a = fs::read_to_string(f.path("data/train").join(MANIFEST)).unwrap();
    let b = fs::read_to_string(f.path("again/train").join(MANIFEST)).unwrap();
    assert_eq!(a, b);
    f.gen_data("other", "6");
    assert_ne!(a, fs::read_to_string(f.path("other/train").join(MANIFEST)).unwrap());
    assert!(f.path("data/config.json").is_file());
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let f = Fixture::new("1");
    let missing = f.path("nope");
    let out = run(&["gen-data", "--images", s(&missing), "--targets", s(&f.path("targets")), "--out", s(&f.path("x")), "--pairs", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--images"));

    fs::write(f.path("bad.json"), r#"{"train": {"batch_size": 0}}"#).unwrap();
    let out = run(&["train-loc", "--data", s(&f.path("data")), "--out", s(&f.path("o")), "--config", s(&f.path("bad.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    let out = run(&["eval", "--data", s(&f.path("data")), "--split", "train", "--method", "ours", "--out", s(&f.path("e"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn training_logs_checkpoints_and_resumes() {
    let f = Fixture::new("2");
    assert!(f.train("train-loc", "loc", &[]).status.success());
    let rows = read_metrics(&f.path("loc")).unwrap();
    assert_eq!(rows.len(), 6);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r["iteration"].as_u64(), Some(k as u64));
        assert!(r["loss"].as_f64().unwrap().is_finite());
    }
    for name in ["ckpt-3.ckpt", "ckpt-6.ckpt", "latest.ckpt", "config.json"] {
        assert!(f.path("loc").join(name).is_file(), "{name}");
    }

    // A run resumed from iteration 3 repeats the uninterrupted trajectory.
    let ck3 = f.path("loc/ckpt-3.ckpt");
    assert!(f.train("train-loc", "resumed", &["--resume", s(&ck3)]).status.success());
    let again = read_metrics(&f.path("resumed")).unwrap();
    assert_eq!(again.len(), 3);
    assert_eq!(&again[..], &rows[3..]);
    assert_eq!(fs::read(f.path("loc/ckpt-6.ckpt")).unwrap(), fs::read(f.path("resumed/ckpt-6.ckpt")).unwrap());

    let mut bytes = fs::read(&ck3).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(f.path("corrupt.ckpt"), &bytes).unwrap();
    let out = f.train("train-loc", "bad", &["--resume", s(&f.path("corrupt.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to resume"));

    let out = f.train("train-loc", "bad2", &["--resume", s(&ck3), "--seed", "99"]);
    assert!(!out.status.success(), "resume under a different config must be refused");
}

#[test]
fn inference_and_evaluation_match_the_library() {
    let f = Fixture::new("3");
    assert!(f.train("train-synth", "synth", &[]).status.success());
    let rows = read_metrics(&f.path("synth")).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["g_loss"].as_f64().unwrap().is_finite() && r["d_loss"].as_f64().is_some()));
    let ckpt = f.path("synth/latest.ckpt");
    let synth = checkpoint::restore_synth(&Checkpoint::load(&ckpt).unwrap()).unwrap().generator;

    let examples = load_split(&f.path("data"), "train").unwrap();
    let (id, ex) = &examples[1];
    let d = example_dir(&f.path("data"), "train", id);
    let out_png = f.path("out/filled.png");
    ok(&[
        "infer",
        "--image",
        s(&d.join("gt.png")),
        "--mask",
        s(&d.join("mask.png")),
        "--guidance",
        s(&d.join("guidance.png")),
        "--loc",
        "gt",
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out_png),
    ]);
    let written = load_rgb(&out_png).unwrap();
    let models = Models::<f32> { filler: Some(&synth as &dyn HoleFiller), ..Models::default() };
    let expected = quantize(&run_method(ex, Method::GtAlignOurs, &models).unwrap());
    assert_eq!(written.dimensions(), (32, 32));
    assert_eq!(written.as_raw(), expected.as_raw());

    let out = run(&["infer", "--image", s(&d.join("gt.png")), "--mask", s(&d.join("mask.png")), "--loc", "gt", "--ckpt", s(&ckpt), "--out", s(&out_png)]);
    assert!(!out.status.success());

    let out = ok(&[
        "eval",
        "--data",
        s(&f.path("data")),
        "--split",
        "train",
        "--method",
        "cut_paste",
        "--method",
        "gt-align+ours",
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&f.path("eval")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("cut_paste"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("eval/report.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        let rows = r["examples"].as_array().unwrap();
        assert_eq!(rows.len(), 6);
        let mean = rows.iter().map(|e| e["l1"].as_f64().unwrap()).sum::<f64>() / 6.0;
        assert!((r["mean"]["l1"].as_f64().unwrap() - mean).abs() <= 1e-12);
    }
    assert!(f.path("eval/report.md").is_file());
}
