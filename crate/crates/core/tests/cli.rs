use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mum_core::grid::{validate_masks, MixingMaskSet};
use mum_core::imageio::{load_png, save_tensor_png};
use mum_core::teacher::{load_checkpoint, save_checkpoint, ModelState};
use mum_core::Tensor4;

fn mum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mum")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_images(dir: &Path, n: usize, size: usize) -> Vec<PathBuf> {
    (0..n)
        .map(|k| {
            let t = Tensor4::from_fn([1, 3, size, size], |[_, c, y, x]| ((k * 50 + c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
            let p = dir.join(format!("img{k}.png"));
            save_tensor_png(&t, 0, &p).unwrap();
            p
        })
        .collect()
}

#[test]
fn roundtrip_check_prints_ok() {
    let o = mum(&["roundtrip-check", "--seed", "3", "--count", "8", "--group", "4", "--tiles", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "OK");

    let dir = tempfile::tempdir().unwrap();
    let imgs = write_images(dir.path(), 3, 16);
    let mut args = vec!["roundtrip-check", "--group", "2", "--tiles", "4"];
    args.extend(imgs.iter().map(|p| s(p)));
    let o = mum(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let o = mum(&["roundtrip-check", "/nonexistent/a.png"]);
    assert_eq!(o.status.code(), Some(2));

    let o = mum(&["roundtrip-check", "--tiles", "3", "--size", "64"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tiles_per_axis"), "{}", stderr(&o));

    let o = mum(&["roundtrip-check", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mum(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mum(&["--help"]);
    assert_eq!(o.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not a png").unwrap();
    let o = mum(&["roundtrip-check", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mask_gen_mix_unmix_restores_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mask = d.join("mask.json");
    let o = mum(&["mask-gen", "--seed", "5", "--group", "3", "--tiles", "4", "--out", s(&mask)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = MixingMaskSet::load(&mask).unwrap();
    assert!(validate_masks(&m).is_ok());
    assert_eq!((m.group_size(), m.tiles_per_axis()), (3, 4));

    let imgs = write_images(d, 3, 16);
    let mixed = d.join("mixed");
    let back = d.join("back");
    let mut args = vec!["mix", "--mask", s(&mask), "--out-dir", s(&mixed)];
    args.extend(imgs.iter().map(|p| s(p)));
    assert_eq!(mum(&args).status.code(), Some(0));
    let mixed_paths: Vec<PathBuf> = imgs.iter().map(|p| mixed.join(p.file_name().unwrap())).collect();
    let mut args = vec!["unmix", "--mask", s(&mask), "--out-dir", s(&back)];
    args.extend(mixed_paths.iter().map(|p| s(p)));
    assert_eq!(mum(&args).status.code(), Some(0));

    let mut any_changed = false;
    for (orig, m) in imgs.iter().zip(&mixed_paths) {
        let restored = back.join(orig.file_name().unwrap());
        assert_eq!(std::fs::read(orig).unwrap(), std::fs::read(&restored).unwrap());
        any_changed |= load_png(orig).unwrap() != load_png(m).unwrap();
    }
    assert!(any_changed);

    // group size must match the image count
    let mut args = vec!["mix", "--mask", s(&mask), "--out-dir", s(&mixed)];
    args.extend(imgs[..2].iter().map(|p| s(p)));
    let o = mum(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("group size"));
}

#[test]
fn visualize_writes_a_sheet() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sheet.png");
    let o = mum(&["visualize", "--seed", "1", "--count", "4", "--grid", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let img = load_png(&out).unwrap();
    assert_eq!((img.height(), img.width()), (3 * 64 + 4 * 4, 4 * 64 + 5 * 4));
}

#[test]
fn ema_step_blends_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let t = ModelState::new(vec![0.0f32, 1.0, 2.0], "toy").unwrap();
    let st = ModelState::new(vec![1.0f32, 1.0, 0.0], "toy").unwrap();
    save_checkpoint(&d.join("t"), &t, 4, 0.5).unwrap();
    save_checkpoint(&d.join("s"), &st, 4, 0.5).unwrap();
    let out = d.join("o");
    let o = mum(&["ema-step", "--teacher", s(&d.join("t")), "--student", s(&d.join("s")), "--out", s(&out), "--decay", "0.75"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (next, manifest) = load_checkpoint(&out).unwrap();
    assert_eq!(next.params, vec![0.25, 1.0, 1.5]);
    assert_eq!(manifest.step, 5);

    let o = mum(&["ema-step", "--teacher", s(&d.join("t")), "--student", s(&d.join("s")), "--out", s(&out), "--step", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0.9996"));

    let other = ModelState::new(vec![1.0f32; 4], "toy").unwrap();
    save_checkpoint(&d.join("x"), &other, 0, 0.5).unwrap();
    let o = mum(&["ema-step", "--teacher", s(&d.join("t")), "--student", s(&d.join("x")), "--out", s(&out), "--decay", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mum(&["ema-step", "--teacher", s(&d.join("missing")), "--student", s(&d.join("s")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_and_no_stat() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let preds = d.join("p.json");
    let gts = d.join("g.json");
    std::fs::write(
        &preds,
        r#"[[{"class_id": 0, "score": 0.9, "box": [0, 0, 10, 10]}], [{"class_id": 1, "score": 0.8, "box": [30, 30, 40, 40]}]]"#,
    )
    .unwrap();
    std::fs::write(&gts, r#"[[{"class_id": 0, "box": [0, 0, 10, 10]}], [{"class_id": 1, "box": [0, 0, 10, 10]}]]"#).unwrap();
    let out = d.join("r.json");
    let o = mum(&["eval", "--preds", s(&preds), "--gts", s(&gts), "--num-classes", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["mean_ap50"].as_f64().unwrap(), 0.5);

    std::fs::write(&preds, "{ nope").unwrap();
    let o = mum(&["eval", "--preds", s(&preds), "--gts", s(&gts)]);
    assert_eq!(o.status.code(), Some(2));

    let boxes = d.join("b.json");
    std::fs::write(&boxes, "[[0, 0, 16, 16], [8, 8, 24, 24]]").unwrap();
    let o = mum(&["no-stat", "--boxes", s(&boxes), "--tiles", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("N_O = 2.5000"), "{text}");
    assert!(text.contains("1.2 <= N_O <= 2.5"));
}

#[test]
fn train_toy_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "image_size = 32\nchannels = [4, 4, 4]\nn_labeled = 8\nn_unlabeled = 16\nn_eval = 8\nbatch_labeled = 4\nbatch_unlabeled = 4\ntotal_steps = 6\neval_interval = 3\n").unwrap();
    let out = d.join("run");
    let o = mum(&["train-toy", "--config", s(&cfg), "--set", "seed=2", "--out", s(&out), "--snapshot-every", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.toml", "metrics.csv", "student.bin", "student.json", "teacher.bin", "teacher.json", "snapshots/step_000003.png", "snapshots/step_000006.png"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = mum(&["train-toy", "--config", s(&cfg), "--set", "no_such_key=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));
    let o = mum(&["train-toy", "--config", s(&cfg), "--set", "tiles_per_axis=3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = mum(&["train-toy", "--config", s(&d.join("missing.toml")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}
