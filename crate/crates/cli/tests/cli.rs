use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn occflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occflow")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = occflow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small grid and model so a training step takes well under a second.
const TINY: &[&str] = &[
    "--preset",
    "desk",
    "--set",
    "raster.extent_m=20",
    "--set",
    "train.batch_size=1",
    "--set",
    "train.max_steps=2",
];

fn gen(dir: &Path, n_train: usize, n_val: usize) {
    let (a, b) = (format!("data.n_train={n_train}"), format!("data.n_val={n_val}"));
    ok(&["gen-data", "--set", &a, "--set", &b, "--out", s(dir)]);
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_single_scenario_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, 1, 0);
    gen(&b, 1, 0);
    let fa = files(&a);
    let names: Vec<_> = fa.iter().map(|p| p.strip_prefix(&a).unwrap().to_path_buf()).collect();
    assert_eq!(names, vec![PathBuf::from("manifest.json"), PathBuf::from("train/synthetic-00000000.json")]);
    for (x, y) in fa.iter().zip(files(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    // rerun into the same directory
    let before = fs::read(&fa[1]).unwrap();
    ok(&["gen-data", "--set", "data.n_train=1", "--set", "data.n_val=0", "--out", s(&a), "--force"]);
    assert_eq!(fs::read(&fa[1]).unwrap(), before);
}

#[test]
fn gen_data_zero_writes_manifest_only() {
    let tmp = TempDir::new().unwrap();
    let out = occflow(&["gen-data", "--set", "data.n_train=0", "--set", "data.n_val=0", "--out", s(tmp.path())]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("manifest only"), "{}", stderr(&out));
    assert_eq!(files(tmp.path()), vec![tmp.path().join("manifest.json")]);
}

#[test]
fn gen_data_refuses_non_empty_dir() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("x"), "x").unwrap();
    let out = occflow(&["gen-data", "--set", "data.n_train=1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("error kind=config") && err.trim_end().lines().count() == 1, "{err}");
}

#[test]
fn unknown_key_lists_valid_keys() {
    let tmp = TempDir::new().unwrap();
    let out = occflow(&["gen-data", "--set", "data.n_trian=1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("data.n_trian") && err.contains("data.n_train") && err.contains("train.lr_init"), "{err}");

    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[train]\nlr_iinit = 0.1\n").unwrap();
    let out = occflow(&["train", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(&tmp.path().join("o")), "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lr_iinit") && stderr(&out).contains("valid keys"), "{}", stderr(&out));
}

#[test]
fn help_lists_config_keys() {
    let text = |sub: &str| String::from_utf8(ok(&[sub, "--help"]).stdout).unwrap();
    let g = text("gen-data");
    assert!(g.contains("data.n_train") && g.contains("data.generator.") && !g.contains("model.decoder"));
    let t = text("train");
    for k in ["data.n_train", "raster.extent_m", "model.decoder.width", "loss.traced", "train.lr_init", "swa.enabled"] {
        assert!(t.contains(k), "train --help misses {k}");
    }
    let p = text("predict");
    assert!(p.contains("raster.crop_ratio") && p.contains("model.latent.enabled"));
    assert!(text("eval").contains("Config keys read"));
}

#[test]
fn train_dry_run_executes_no_steps() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 0);
    let out_dir = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out_dir), "--dry-run"];
    args.extend_from_slice(TINY);
    let out = ok(&args);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 executed"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_data_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = occflow(&["train", "--data", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error kind=data"));
}

fn metric(report: &str, name: &str) -> f64 {
    let line = report.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap_or_else(|| panic!("{name} not in {report}"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn eval_of_ground_truth_archive_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 0, 2);
    let pred = tmp.path().join("gt.zip");
    ok(&["predict", "--ground-truth", "--data", s(&data), "--out", s(&pred)]);
    let out = ok(&["eval", "--pred", s(&pred), "--data", s(&data), "--per-waypoint"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(metric(&text, "flow_grounded_auc") >= 0.99, "{text}");
    assert!(metric(&text, "flow_epe") < 1e-9, "{text}");
    assert_eq!(metric(&text, "n_scenarios"), 2.0);
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 8);
}

#[test]
fn trained_model_predicts_with_and_without_tta() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2, 2);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend_from_slice(TINY);
    ok(&args);
    for f in ["checkpoint.safetensors", "config.toml", "metrics.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let p = |name: &str, extra: &[&str]| {
        let path = tmp.path().join(name);
        let mut a = vec!["predict", "--model", s(&run), "--data", s(&data), "--out", s(&path)];
        a.extend_from_slice(extra);
        ok(&a);
        fs::read(path).unwrap()
    };
    let base = p("base.zip", &[]);
    assert_eq!(p("tta0.zip", &["--tta", "--tta-weight", "0"]), base);
    assert_ne!(p("tta.zip", &["--tta"]), base);

    let ens = tmp.path().join("ens.zip");
    ok(&["predict", "--ensemble", s(&run), s(&run), "--data", s(&data), "--out", s(&ens)]);
    let out = ok(&["eval", "--pred", s(&ens), "--data", s(&data)]);
    let e = String::from_utf8(out.stdout).unwrap();
    let out = ok(&["eval", "--pred", s(&tmp.path().join("base.zip")), "--data", s(&data)]);
    let b = String::from_utf8(out.stdout).unwrap();
    assert!((metric(&e, "observed_auc") - metric(&b, "observed_auc")).abs() < 1e-6);

    // a wrong-split archive does not match the data
    let out = occflow(&["eval", "--pred", s(&ens), "--data", s(&data), "--split", "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn viz_writes_two_images_per_waypoint() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 0, 1);
    let pred = tmp.path().join("gt.zip");
    ok(&["predict", "--ground-truth", "--data", s(&data), "--out", s(&pred)]);
    let id = "synthetic-00000000";
    let img = tmp.path().join("img");
    ok(&["viz", "--pred", s(&pred), "--scenario", id, "--out", s(&img)]);
    let pngs = files(&img);
    assert_eq!(pngs.len(), 16);
    assert!(pngs.iter().all(|p| p.extension().unwrap() == "png"));
    let lit = |dir: &Path| -> u64 {
        (1..=8)
            .map(|t| image::open(dir.join(format!("occupancy_t{t}.png"))).unwrap().to_luma8().pixels().filter(|p| p.0[0] > 0).count() as u64)
            .sum()
    };
    assert!(lit(&img) > 0);

    // ground-truth occupancy is exactly 1 on occupied cells, so the
    // threshold must sit strictly below it to show anything
    let blank = tmp.path().join("blank");
    ok(&["viz", "--pred", s(&pred), "--scenario", id, "--threshold", "1.0", "--out", s(&blank)]);
    assert_eq!(lit(&blank), 0);

    let out = occflow(&["viz", "--pred", s(&pred), "--scenario", "nope", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope"));
}
