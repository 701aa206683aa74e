use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use figura_core::forge::{read_indexed_png, write_indexed_png, ClassPalette};
use figura_core::nn::Checkpoint;

fn figura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_figura")).args(args).output().expect("spawn figura")
}

fn ok(args: &[&str]) -> Output {
    let out = figura(args);
    assert!(
        out.status.success(),
        "figura {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

/// Forged toy set plus a one-epoch VAE and portray model.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        ok(&["forge", "--out", s(&data), "--count", "40", "--seed", "3"]);
        Fixture { _tmp: tmp, root }
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn trained(&self, module: &str) -> PathBuf {
        let out = self.root.join(module);
        if !out.join("model.ckpt").exists() {
            ok(&["train", module, "--data", s(&self.data()), "--out", s(&out), "--epochs", "1"]);
        }
        out.join("model.ckpt")
    }
}

#[test]
fn forge_cardinality_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["forge", "--out", s(d), "--count", "100", "--seed", "11"]);
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 100);
    let pa = files(&a, "png");
    assert_eq!(pa.len(), 300);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    for p in pa {
        let q = b.join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
    }
    let log = fs::read_to_string(a.join("log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "config");
    assert_eq!(first["config"]["data"]["count"], 100);
    assert_eq!(first["config_hash"], manifest["config_hash"]);
}

#[test]
fn forge_into_unwritable_path_fails_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("sub");
    let o = figura(&["forge", "--out", s(&target), "--count", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&blocker)), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let o = figura(&["train", "nonsense", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    let o = figura(&["--set", "data.bogus=1", "forge", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[sketch]\nlatent_dim = 0\n").unwrap();
    let o = figura(&["--config", s(&cfg), "forge", "--out", s(&tmp.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[data]\ncount = 3\nseed = 5\n").unwrap();
    let a = tmp.path().join("a");
    ok(&["--config", s(&cfg), "forge", "--out", s(&a)]);
    assert_eq!(files(&a, "png").len(), 9);
    let b = tmp.path().join("b");
    ok(&["--config", s(&cfg), "--set", "data.count=2", "forge", "--out", s(&b), "--count", "1"]);
    assert_eq!(files(&b, "png").len(), 3);
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = tmp.path().join("out");
    let o = figura(&["train", "vae", "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    let o = figura(&["eval", "compare", "--pred", s(&missing), "--truth", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
    let o = figura(&["sample", "unconditional", "--out", s(&out), "--vae", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    // Required checkpoint flag absent for the mode.
    let o = figura(&["sample", "unconditional", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--vae"), "{}", stderr(&o));
}

#[test]
fn training_pipeline_through_the_binary() {
    let fx = Fixture::new();
    let vae = fx.trained("vae");
    let portray = fx.trained("portray");
    let root = &fx.root;

    // Resume for zero extra epochs leaves the parameters untouched.
    let out = root.join("vae");
    let before = fs::read(out.join("last.ckpt")).unwrap();
    ok(&["train", "vae", "--data", s(&fx.data()), "--out", s(&out), "--epochs", "1", "--resume"]);
    assert_eq!(before, fs::read(out.join("last.ckpt")).unwrap());
    // Resuming to two epochs runs exactly epoch 2.
    ok(&["train", "vae", "--data", s(&fx.data()), "--out", s(&out), "--epochs", "2", "--resume"]);
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == "epoch")
        .map(|v| v["record"]["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
    let ck = Checkpoint::load(&vae).unwrap();
    assert!(ck.get_bytes("run.config_hash").is_some());

    // Unconditional sampling: n sketches and n images, each stamped.
    let smp = root.join("smp");
    ok(&["sample", "unconditional", "--out", s(&smp), "--n", "4", "--vae", s(&vae), "--portray", s(&portray)]);
    assert_eq!(files(&smp, "png").len(), 8);
    let bytes = fs::read(smp.join("image_0003.png")).unwrap();
    assert!(bytes.windows(11).any(|w| w == b"config-hash"));

    // Full pipeline composites a background.
    let full = root.join("full");
    ok(&["sample", "full", "--out", s(&full), "--n", "2", "--vae", s(&vae), "--portray", s(&portray)]);
    assert_eq!(files(&full, "png").len(), 4);

    // Color conditioning: four sets on one sketch give four images.
    let cp = root.join("portray-color");
    ok(&[
        "train", "portray", "--data", s(&fx.data()), "--out", s(&cp), "--epochs", "1", "--color-conditioning",
    ]);
    let colors = root.join("colors.json");
    // Every foreground class gets a color; the sets differ in top and bottom.
    let names = ClassPalette::default().names;
    let sets: Vec<serde_json::Map<String, serde_json::Value>> = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.9, 0.9, 0.2]]
        .iter()
        .map(|c| {
            names[1..]
                .iter()
                .map(|n| {
                    let rgb = if n == "top" || n == "bottom" { *c } else { [0.5, 0.5, 0.5] };
                    (n.clone(), serde_json::json!(rgb))
                })
                .collect()
        })
        .collect();
    fs::write(&colors, serde_json::to_string(&sets).unwrap()).unwrap();
    let col = root.join("col");
    ok(&[
        "sample", "color", "--out", s(&col), "--portray", s(&cp.join("model.ckpt")),
        "--sketch", s(&fx.data().join("0000_label.png")), "--colors", s(&colors),
    ]);
    assert_eq!(files(&col, "png").iter().filter(|p| s(p).contains("image_")).count(), 4);
    let o = figura(&[
        "sample", "color", "--out", s(&col), "--portray", s(&portray),
        "--sketch", s(&fx.data().join("0000_label.png")), "--colors", s(&colors),
    ]);
    assert_ne!(o.status.code(), Some(0));

    // Walk: odd steps only; default emits the configured count.
    let w = root.join("walk");
    let o = figura(&["walk", "--vae", s(&vae), "--corpus", s(&fx.data()), "--out", s(&w), "--steps", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("odd"), "{}", stderr(&o));
    ok(&["walk", "--vae", s(&vae), "--corpus", s(&fx.data()), "--out", s(&w), "--steps", "1"]);
    assert_eq!(files(&w, "png").iter().filter(|p| s(p).contains("frame_")).count(), 1);
    let w9 = root.join("walk9");
    ok(&["walk", "--vae", s(&vae), "--corpus", s(&fx.data()), "--out", s(&w9)]);
    assert_eq!(files(&w9, "png").iter().filter(|p| s(p).contains("frame_")).count(), 9);
    assert!(w9.join("sheet.png").exists());
    let o = figura(&["walk", "--vae", s(&vae), "--corpus", s(&root.join("nope")), "--out", s(&w)]);
    assert_eq!(o.status.code(), Some(2));

    // Reconstruction metrics, rerun byte-identical.
    let e1 = root.join("e1");
    let e2 = root.join("e2");
    for e in [&e1, &e2] {
        ok(&["eval", "reconstruction", "--model", s(&vae), "--data", s(&fx.data()), "--out", s(e)]);
    }
    assert_eq!(fs::read(e1.join("metrics.json")).unwrap(), fs::read(e2.join("metrics.json")).unwrap());
}

#[test]
fn corrupt_checkpoint_names_offset() {
    let fx = Fixture::new();
    let vae = fx.trained("vae");
    let mut bytes = fs::read(&vae).unwrap();
    // Version field follows the four magic bytes.
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let bad = fx.root.join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let o = figura(&["sample", "unconditional", "--out", s(&fx.root.join("x")), "--vae", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("offset 4") && err.contains(s(&bad)), "{err}");

    bytes[0] = b'X';
    fs::write(&bad, &bytes).unwrap();
    let o = figura(&["walk", "--vae", s(&bad), "--corpus", s(&fx.data()), "--out", s(&fx.root.join("w"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("offset 0"), "{}", stderr(&o));
}

#[test]
fn identical_labels_give_all_ones() {
    let fx = Fixture::new();
    let out = fx.root.join("cmp");
    ok(&["eval", "compare", "--pred", s(&fx.data()), "--truth", s(&fx.data()), "--out", s(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let m = &v["metrics"];
    for key in ["accuracy", "precision", "recall", "f1", "iou", "pixel_accuracy"] {
        assert_eq!(m[key].as_f64(), Some(1.0), "{key}");
    }
    for c in m["per_class"].as_array().unwrap() {
        assert_eq!(c["iou"].as_f64(), Some(1.0));
    }
}

#[test]
fn pose_sampling_from_silhouette_file() {
    let fx = Fixture::new();
    let cvae = fx.trained("cvae");
    let out = fx.root.join("pose");
    ok(&[
        "sample", "pose", "--out", s(&out), "--n", "6", "--cvae", s(&cvae),
        "--silhouette", s(&fx.data().join("0001_sil.png")),
    ]);
    let sketches: Vec<_> = files(&out, "png").into_iter().filter(|p| s(p).contains("sketch_")).collect();
    assert_eq!(sketches.len(), 6);
    let sil = read_indexed_png(&out.join("silhouette.png")).unwrap();
    assert_eq!(sil, read_indexed_png(&fx.data().join("0001_sil.png")).unwrap());
    let o = figura(&[
        "sample", "pose", "--out", s(&out), "--cvae", s(&cvae),
        "--silhouette", s(&fx.data().join("0001_sil.png")), "--pose-seed", "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    // A label map is not a silhouette.
    let bogus = fx.root.join("bogus.png");
    let mut m = read_indexed_png(&fx.data().join("0001_label.png")).unwrap();
    m.data[0] = 9;
    write_indexed_png(&bogus, &m, &ClassPalette::default().colors, "x").unwrap();
    let o = figura(&["sample", "pose", "--out", s(&out), "--cvae", s(&cvae), "--silhouette", s(&bogus)]);
    assert_eq!(o.status.code(), Some(2));
}
