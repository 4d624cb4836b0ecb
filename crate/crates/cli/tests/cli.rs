use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[experiment]\nseed = 2\n[data]\ntrain_scenes = 10\neval_scenes = 5\n[train]\ntotal_steps = 6\nhidden = 6\n";

fn rcnnlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcnnlab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let o = rcnnlab(&["train", "--config", &cfg, "--out", out, "--mode", "rga+prm", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(Path::new(out).join("manifest.json")).unwrap();
    assert!(m.contains("\"mode\": \"rga+prm\""), "{m}");
    assert!(m.contains("\"seed\": 5"), "{m}");

    let before = fs::read(Path::new(out).join("eval_summary.json")).unwrap();
    let o = rcnnlab(&["eval", "--config", &cfg, "--out", out, "--mode", "rga+prm", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(Path::new(out).join("eval_summary.json")).unwrap(), before);

    let o = rcnnlab(&["report", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("mode rga+prm") && text.contains("1:9"), "{text}");

    // a baseline checkpoint cannot be evaluated as a two-head model
    let o = rcnnlab(&["eval", "--config", &cfg, "--out", out, "--mode", "baseline"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gen_data_writes_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("data");
    let o = rcnnlab(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dirs: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(dirs.len(), 1);
}

#[test]
fn sweep_prints_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("sweep");
    let o = rcnnlab(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--axis", "ratio-pair", "--values",
        "1:1,1:9;1:1,1:3", "--seeds", "1,2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(out.join("sweep.csv").is_file());
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    let bad_ratio = write_config(tmp.path(), "[experiment]\nseed = 1\n[sampling]\nratio = \"1-9\"\n");
    let o = rcnnlab(&["train", "--config", &bad_ratio, "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));

    let cfg = write_config(tmp.path(), TINY);
    for args in [
        vec!["train", "--config", &cfg, "--out", out, "--mode", "fast"],
        vec!["train", "--config", &cfg, "--out", out, "--sampling", "medium"],
        vec!["train", "--config", "/nonexistent/c.toml", "--out", out],
        vec!["train", "--out", out],
        vec!["sweep", "--config", &cfg, "--out", out, "--axis", "depth", "--values", "1"],
        vec!["sweep", "--config", &cfg, "--out", out, "--axis", "lambda0", "--values", ""],
        vec!["frobnicate"],
    ] {
        let o = rcnnlab(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&rcnnlab(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    // nothing has been trained here
    let out = tmp.path().join("empty");
    let o = rcnnlab(&["eval", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = rcnnlab(&["report", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    // an output path that is a file
    let file = tmp.path().join("file");
    fs::write(&file, "x").unwrap();
    let o = rcnnlab(&["train", "--config", &cfg, "--out", file.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
