use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidarsynth::config::{Preset, RunConfig};
use lidarsynth::geometry::{write_point_cloud, Point3};
use lidarsynth::io::{load_tensor, save_tensor};
use lidarsynth::tensor::Tensor;
use lidarsynth::train::EvalReport;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lidarsynth"));
    c.env_remove("LIDARSYNTH_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lidarsynth")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("toy.conf");
    fs::write(&path, format!("# small run\npreset = toy\n{extra}")).unwrap();
    path
}

fn grid_file(dir: &Path) -> PathBuf {
    let text: String = RunConfig::preset(Preset::Toy)
        .to_text()
        .lines()
        .filter(|l| l.starts_with("grid."))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("grid.conf");
    fs::write(&path, text).unwrap();
    path
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn synth_zero_samples_makes_empty_root() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("empty");
    ok(&["synth", "--out", s(&out), "--num", "0"]);
    assert!(out.is_dir());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn synth_is_deterministic_and_mixes_profiles() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--out", s(out), "--num", "50", "--seed", "9", "--config", s(&conf)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    assert!(ta.contains_key(Path::new("sample_000049/target_raster.lstf")));
    assert!(!ta.contains_key(Path::new("sample_000050/meta.txt")));

    let mut counts = BTreeMap::new();
    for (path, bytes) in &ta {
        if path.ends_with("meta.txt") {
            let text = String::from_utf8(bytes.clone()).unwrap();
            let name = text.lines().find_map(|l| l.strip_prefix("scenario = ")).unwrap().to_string();
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    let mut sizes: Vec<usize> = counts.values().copied().collect();
    sizes.sort();
    assert_eq!(sizes, vec![12, 12, 13, 13]);

    let target = load_tensor(a.join("sample_000000/target_raster.lstf")).unwrap();
    assert_eq!(target.shape(), &[128, 192]);
}

#[test]
fn single_profile_and_unknown_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "");
    let out = tmp.path().join("one");
    ok(&["synth", "--out", s(&out), "--num", "3", "--profile", "night-dense", "--config", s(&conf)]);
    let meta = fs::read_to_string(out.join("sample_000002/meta.txt")).unwrap();
    assert!(meta.contains("scenario = night-dense"), "{meta}");
    assert_eq!(code(&["synth", "--out", s(&out), "--num", "3", "--profile", "moon"]), 1);
}

#[test]
fn preprocess_radar_matches_stored_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "");
    let data = tmp.path().join("d");
    ok(&["synth", "--out", s(&data), "--num", "1", "--config", s(&conf)]);
    let sample = data.join("sample_000000");
    let (ra, rv) = (tmp.path().join("ra.lstf"), tmp.path().join("rv.lstf"));
    ok(&["preprocess-radar", "--cube", s(&sample.join("radar_cube.lstf")), "--out-ra", s(&ra), "--out-rv", s(&rv)]);
    assert_eq!(fs::read(&ra).unwrap(), fs::read(sample.join("ra_map.lstf")).unwrap());
    assert_eq!(fs::read(&rv).unwrap(), fs::read(sample.join("rv_map.lstf")).unwrap());

    // A rank-3 tensor is not a complex cube.
    let bad = tmp.path().join("bad.lstf");
    save_tensor(&bad, &Tensor::zeros(&[2, 3, 4])).unwrap();
    assert_eq!(code(&["preprocess-radar", "--cube", s(&bad), "--out-ra", s(&ra), "--out-rv", s(&rv)]), 2);
    fs::write(&bad, b"LSTF\x01").unwrap();
    assert_eq!(code(&["preprocess-radar", "--cube", s(&bad), "--out-ra", s(&ra), "--out-rv", s(&rv)]), 2);
}

#[test]
fn rasterize_derasterize_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = grid_file(tmp.path());
    let cloud: Vec<Point3> = (0..500)
        .map(|i| {
            let t = i as f32 * 0.37;
            Point3::new(20.0 * t.cos() + 1.0, 15.0 * t.sin(), (i % 7) as f32 * 0.3 - 1.0)
        })
        .collect();
    let pts = tmp.path().join("in.lspc");
    let mut buf = Vec::new();
    write_point_cloud(&mut buf, &cloud).unwrap();
    fs::write(&pts, buf).unwrap();

    let (r1, p1, r2) = (tmp.path().join("r1.lstf"), tmp.path().join("p1.lspc"), tmp.path().join("r2.lstf"));
    ok(&["rasterize", "--points", s(&pts), "--grid", s(&grid), "--out", s(&r1)]);
    ok(&["derasterize", "--raster", s(&r1), "--grid", s(&grid), "--out", s(&p1)]);
    ok(&["rasterize", "--points", s(&p1), "--grid", s(&grid), "--out", s(&r2)]);
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let raster = load_tensor(&r1).unwrap();
    assert_eq!(raster.shape(), &[128, 192]);
    assert!(raster.data().iter().any(|v| *v > 0.0));

    // A raster of the wrong size for the grid is malformed input.
    let wrong = tmp.path().join("wrong.lstf");
    save_tensor(&wrong, &Tensor::zeros(&[4, 4])).unwrap();
    assert_eq!(code(&["derasterize", "--raster", s(&wrong), "--grid", s(&grid), "--out", s(&p1)]), 2);
    fs::write(&pts, b"LSPC").unwrap();
    assert_eq!(code(&["rasterize", "--points", s(&pts), "--grid", s(&grid), "--out", s(&r1)]), 2);
}

fn pgm(path: &Path) -> (String, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = 0;
    let mut i = 0;
    // Header: magic, width, height, maxval, each followed by one whitespace byte.
    while fields < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    let header = String::from_utf8(bytes[..i].to_vec()).unwrap();
    (header, bytes[i + 1..].to_vec())
}

#[test]
fn render_writes_pgm() {
    let tmp = tempfile::tempdir().unwrap();
    let (raster, img) = (tmp.path().join("r.lstf"), tmp.path().join("r.pgm"));
    save_tensor(&raster, &Tensor::zeros(&[3, 5])).unwrap();
    ok(&["render", "--raster", s(&raster), "--out", s(&img)]);
    let (header, pixels) = pgm(&img);
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["P5", "5", "3", "255"]);
    assert_eq!(pixels, vec![0; 15]);

    save_tensor(&raster, &Tensor::full(&[2, 2], 7.0)).unwrap();
    ok(&["render", "--raster", s(&raster), "--out", s(&img)]);
    assert_eq!(pgm(&img).1, vec![128; 4]);

    save_tensor(&raster, &Tensor::new(&[1, 2, 2], vec![0.0; 4]).unwrap()).unwrap();
    assert_eq!(code(&["render", "--raster", s(&raster), "--out", s(&img)]), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--out", "x"]), 1);
    assert_eq!(code(&["train", "--data", "d", "--config", "c", "--out", "o", "--ablation", "no-decoder"]), 1);
    assert_eq!(code(&["--help"]), 0);
    let out = bin().env("LIDARSYNTH_THREADS", "zero").args(["synth", "--out", "x", "--num", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "train.colour = blue\n");
    assert_eq!(code(&["synth", "--out", s(&tmp.path().join("x")), "--num", "1", "--config", s(&conf)]), 2);
    assert_eq!(code(&["train", "--data", s(tmp.path()), "--config", s(&tmp.path().join("missing.conf")), "--out", "o"]), 2);
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "train.epochs = 2\ntrain.batch_size = 4\ntrain.lr_switch_epoch = 1\n");
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--num", "24", "--seed", "3", "--config", s(&conf)]);

    let ckpt = tmp.path().join("runs/main/model.lsck");
    ok(&["train", "--data", s(&data), "--config", s(&conf), "--out", s(&ckpt)]);
    assert!(ckpt.is_file());
    assert!(tmp.path().join("runs/main/model.lsck.final").is_file());
    let history = fs::read_to_string(tmp.path().join("runs/main/history.txt")).unwrap();
    let lrs: Vec<&str> = history.lines().map(|l| l.split('\t').nth(3).unwrap()).collect();
    assert_eq!(lrs.len(), 2);
    assert_ne!(lrs[0], lrs[1]);

    let ablated = tmp.path().join("runs/ablated/model.lsck");
    ok(&["train", "--data", s(&data), "--config", s(&conf), "--out", s(&ablated), "--ablation", "no-fusion"]);

    let report = tmp.path().join("report.txt");
    ok(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--report", s(&report), "--ablation-ckpt", s(&ablated)]);
    let rep = EvalReport::parse(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.scenarios.len(), 4);
    assert!(rep.overall.is_finite() && rep.baseline_zeros > 0.0);
    assert!(rep.ablation_no_fusion.is_some_and(f64::is_finite));

    // Same model keys with a different training schedule still load.
    let other = tmp.path().join("other.conf");
    fs::write(&other, "preset = toy\ntrain.epochs = 7\n").unwrap();
    ok(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--report", s(&report), "--config", s(&other)]);

    // A different model is refused unless forced.
    fs::write(&other, "preset = toy\nfusion.dropout = 0.3\n").unwrap();
    let refused = ["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--report", s(&report), "--config", s(&other)];
    assert_eq!(code(&refused), 2);
    let mut forced = refused.to_vec();
    forced.push("--force");
    ok(&forced);

    // Loading against a different architecture fails even when forced.
    fs::write(&other, "preset = default\n").unwrap();
    let mut forced = refused.to_vec();
    forced.push("--force");
    assert_eq!(code(&forced), 2);

    fs::write(&ckpt, b"LSCK garbage").unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--report", s(&report)]), 2);
}

#[test]
fn diverging_training_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = toy_config(tmp.path(), "train.epochs = 2\ntrain.batch_size = 4\ntrain.lr = 1e30\ntrain.normalize_range = false\n");
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--num", "12", "--config", s(&conf)]);
    let out = run(&["train", "--data", s(&data), "--config", s(&conf), "--out", s(&tmp.path().join("m.lsck"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
