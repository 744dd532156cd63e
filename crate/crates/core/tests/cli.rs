use std::fs;
use std::path::Path;
use std::process::Command;

use gseg::cli::{main_with_args, EXIT_CHECKPOINT, EXIT_LAYOUT, EXIT_LOCKED, EXIT_OK, EXIT_USAGE, METRICS_HEADER};
use gseg::nifti::read_nifti_file;
use gseg::train::{TrainingHistory, HISTORY_HEADER};

fn gseg(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("gseg").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    let bin = env!("CARGO_BIN_EXE_gseg");
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
    let bogus = Command::new(bin).args(["phantom", "--bogus"]).output().unwrap();
    assert_eq!(bogus.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&bogus.stderr).contains("--bogus"));
    assert_eq!(gseg(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(gseg(&["train", "--model", "unet"]), EXIT_USAGE);
}

#[test]
fn train_flags_parse() {
    use clap::Parser;
    use gseg::arch::{ModelKind, Rank};
    use gseg::cli::{Cli, Command};
    let cli = Cli::try_parse_from(["gseg", "train", "--data", "d", "--out", "o", "--model", "unet", "--rank", "3d", "--seed", "7"]).unwrap();
    let Command::Train(a) = cli.command else { panic!("not train") };
    assert_eq!((a.model, a.rank, a.seed), (Some(ModelKind::UNet), Some(Rank::Three), Some(7)));
}

#[test]
fn config_precedence() {
    use clap::Parser;
    use gseg::cli::{resolve_config, Cli, Command};
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "rank = 2d\nseed = 3\nepochs = 9\n").unwrap();
    let cli = Cli::try_parse_from(["gseg", "train", "--data", "d", "--out", "o", "--config", p(&cfg), "--seed", "11"]).unwrap();
    let Command::Train(a) = cli.command else { panic!("not train") };
    let c = resolve_config(&a, Some(16)).unwrap();
    assert_eq!(c.seed, 11);
    assert_eq!(c.epochs, 9);
    assert_eq!(c.batch_size, 100);
    assert_eq!(c.spatial, 16);
}

#[test]
fn phantom_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(gseg(&["phantom", "--out", p(d.path()), "--count", "4", "--size", "32", "--seed", "1"]), EXIT_OK);
    }
    let (da, db) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(da.len(), 20);
    assert_eq!(da, db);
}

#[test]
fn pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let raw = root.path().join("raw");
    let pre = root.path().join("pre");
    let sl = root.path().join("slices");
    let run = root.path().join("run");
    assert_eq!(gseg(&["phantom", "--out", p(&raw), "--count", "2", "--size", "16", "--seed", "2"]), EXIT_OK);
    assert_eq!(gseg(&["preprocess", "--data", p(&raw), "--out", p(&pre)]), EXIT_OK);
    assert_eq!(gseg(&["slices", "--data", p(&pre), "--out", p(&sl)]), EXIT_OK);
    assert_eq!(fs::read_dir(&sl).unwrap().count(), 2 * 16 * 2);

    let train = [
        "train", "--data", p(&pre), "--out", p(&run), "--width-scale", "16", "--batch-size", "2", "--epochs", "2",
    ];
    assert_eq!(gseg(&train), EXIT_OK);
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(hist.starts_with(HISTORY_HEADER));
    assert_eq!(TrainingHistory::from_csv(&hist).unwrap().rows.len(), 2);

    let mut resume: Vec<&str> = train.to_vec();
    let last = resume.len() - 1;
    resume[last] = "3";
    resume.push("--resume");
    assert_eq!(gseg(&resume), EXIT_OK);
    let hist = TrainingHistory::from_csv(&fs::read_to_string(run.join("history.csv")).unwrap()).unwrap();
    assert_eq!(hist.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);

    let ckpt = run.join("model.ckpt");
    let csv = root.path().join("metrics.csv");
    assert_eq!(gseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&pre), "--out", p(&csv)]), EXIT_OK);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    assert_eq!(text.lines().count(), 1 + 3 * 4);
    let json = root.path().join("metrics.json");
    assert_eq!(gseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&pre), "--out", p(&json)]), EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v["mean"]["accuracy"].is_number());

    let mask = root.path().join("seg.nii");
    assert_eq!(gseg(&["segment", "--checkpoint", p(&ckpt), "--data", p(&pre), "--id", "phantom000", "--out", p(&mask)]), EXIT_OK);
    let m = read_nifti_file(&mask).unwrap().to_mask().unwrap();
    assert!(m.labels().iter().all(|l| [0, 1, 2, 4].contains(l)));

    let merged = root.path().join("curves.csv");
    let h = run.join("history.csv");
    assert_eq!(gseg(&["report", "--out", p(&merged), p(&h), p(&h)]), EXIT_OK);
    assert_eq!(fs::read_to_string(&merged).unwrap().lines().count(), 1 + 2 * 3);
}

#[test]
fn failures_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let empty = root.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(gseg(&["preprocess", "--data", p(&empty), "--out", p(&root.path().join("o"))]), EXIT_LAYOUT);

    let bad = root.path().join("bad.ckpt");
    fs::write(&bad, b"GSEG\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(gseg(&["eval", "--checkpoint", p(&bad), "--data", p(&empty), "--out", p(&root.path().join("m.csv"))]), EXIT_CHECKPOINT);

    let raw = root.path().join("raw");
    let pre = root.path().join("pre");
    let run = root.path().join("run");
    gseg(&["phantom", "--out", p(&raw), "--count", "1", "--size", "16"]);
    gseg(&["preprocess", "--data", p(&raw), "--out", p(&pre)]);
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "1").unwrap();
    assert_eq!(gseg(&["train", "--data", p(&pre), "--out", p(&run), "--width-scale", "16", "--epochs", "1"]), EXIT_LOCKED);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(gseg(&["gradcheck", "--seed", "3"]), EXIT_OK);
}
