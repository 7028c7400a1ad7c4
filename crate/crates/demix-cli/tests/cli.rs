//! End-to-end checks of the command-line surface on a miniature dataset.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_demix"))
}

fn tiny_cfg(dir: &Path) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(
        &p,
        r#"
[model]
mode = "hvae"
variant = "lc"
n_levels = 2
n_lc = 1
patch_size = 16
base_channels = 5
res_blocks_per_block = 1
z_channels = 3
seed = 1

[train]
batch_size = 4
max_epochs = 1
steps_per_epoch = 2
seed = 2
lr = 0.001
"#,
    )
    .unwrap();
    p
}

fn gen_tiny(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let st = bin()
        .args([
            "gen-data",
            "--size",
            "64",
            "--n-join",
            "9",
            "--stroke-len",
            "48",
            "--count",
            "12",
            "--seed",
            "5",
        ])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap();
    assert!(st.success());
    data.join("manifest.json")
}

#[test]
fn gen_data_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    assert!(manifest.exists());
    for i in 0..12 {
        assert!(dir
            .path()
            .join("data")
            .join(format!("img_{i:05}.tif"))
            .exists());
    }
    // rerun from the serialized run config: byte-identical manifest
    let st = bin()
        .arg("gen-data")
        .arg("--config")
        .arg(dir.path().join("data/run-config.toml"))
        .arg("--out")
        .arg(dir.path().join("data2"))
        .status()
        .unwrap();
    assert!(st.success());
    let a = std::fs::read(&manifest).unwrap();
    let b = std::fs::read(dir.path().join("data2/manifest.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gen_data_without_out_is_usage_error() {
    let out = bin().args(["gen-data", "--count", "12"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_split_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let out = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(dir.path().join("missing.ckpt"))
        .arg("--data")
        .arg(&manifest)
        .args(["--split", "weird"])
        .arg("--out")
        .arg(dir.path().join("r.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_eval_bench_chain() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let cfg = tiny_cfg(dir.path());
    let run = dir.path().join("run");

    let st = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(&run)
        .arg("--quiet")
        .status()
        .unwrap();
    assert!(st.success());
    assert!(run.join("checkpoint.ckpt").exists());
    assert!(run.join("history.csv").exists());
    assert!(run.join("run-config.toml").exists());

    // rerun from the serialized run config: identical first epoch
    let st = bin()
        .arg("train")
        .arg("--config")
        .arg(run.join("run-config.toml"))
        .arg("--out")
        .arg(dir.path().join("run2"))
        .arg("--quiet")
        .status()
        .unwrap();
    assert!(st.success());
    let first_line = |p: PathBuf| {
        let text = std::fs::read_to_string(p).unwrap();
        text.lines().nth(1).unwrap().to_string()
    };
    assert_eq!(
        first_line(run.join("history.csv")),
        first_line(dir.path().join("run2/history.csv"))
    );

    let pred = dir.path().join("pred.tif");
    let st = bin()
        .arg("predict")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--image")
        .arg(dir.path().join("data/img_00000.tif"))
        .args(["--strategy", "inner", "--pad", "4"])
        .arg("--out")
        .arg(&pred)
        .status()
        .unwrap();
    assert!(st.success());
    let pages = demix::tiffio::read_f32_multipage(&pred).unwrap();
    assert_eq!(pages.len(), 2);
    assert_eq!(pages[0].dim(), (64, 64));

    let report = dir.path().join("report.csv");
    let st = bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--data")
        .arg(&manifest)
        .args(["--split", "test", "--strategy", "inner", "--pad", "4"])
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(report.exists());
    let agg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(agg["images"], 1); // 12 images split 10/1/1

    let bench = dir.path().join("bench");
    let st = bin()
        .arg("padding-bench")
        .arg("--checkpoint")
        .arg(run.join("checkpoint.ckpt"))
        .arg("--data")
        .arg(&manifest)
        .args(["--pad", "4"])
        .arg("--out")
        .arg(&bench)
        .status()
        .unwrap();
    assert!(st.success());
    let table = std::fs::read_to_string(bench.join("padding-bench.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4); // header + inner/outer/none
    assert!(lines[1].starts_with("inner,4,"));
    // tile counts expose the inner-vs-none prediction cost ratio
    let tiles: Vec<usize> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(tiles[0] > tiles[2]);
}

#[test]
fn lc_sweep_emits_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_tiny(dir.path());
    let cfg = tiny_cfg(dir.path());
    let out = dir.path().join("sweep");
    let st = bin()
        .args(["sweep", "lc-levels", "--k", "0,1"])
        .arg("--config")
        .arg(&cfg)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(&out)
        .args([
            "--steps-per-epoch",
            "1",
            "--max-epochs",
            "1",
            "--strategy",
            "inner",
            "--pad",
            "4",
            "--quiet",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let table = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("n_lc,"));
    assert!(out.join("sweep.png").exists());
}
