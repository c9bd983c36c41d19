use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mclsr::config::TrainConfig;

fn mclsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclsr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mclsr(args);
    assert!(
        out.status.success(),
        "mclsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small noisy synthetic dataset written by the binary itself.
fn dataset(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&[
        "synth", "--out", s(&dir), "--users", "150", "--items", "60", "--pattern-count", "3", "--noise", "0.1",
        "--seed", "4",
    ]);
    dir.join("dataset.tsv")
}

const FAST: [&str; 8] = ["--dim", "8", "--batch", "64", "--negatives", "10", "--min-count", "2"];

#[test]
fn synth_is_deterministic_and_validated() {
    let root = tempfile::tempdir().unwrap();
    let a = dataset(root.path());
    let b_dir = root.path().join("again");
    ok(&[
        "synth", "--out", s(&b_dir), "--users", "150", "--items", "60", "--pattern-count", "3", "--noise", "0.1",
        "--seed", "4",
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(b_dir.join("dataset.tsv")).unwrap());

    let bad = mclsr(&["synth", "--out", s(&root.path().join("bad")), "--items", "10", "--pattern-count", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("chain"));
}

#[test]
fn prep_writes_statistics_and_stable_splits() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let raw_interactions: usize = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').nth(1).unwrap().split(',').count())
        .sum();
    let p1 = root.path().join("p1");
    let p2 = root.path().join("p2");
    ok(&["prep", "--input", s(&data), "--out", s(&p1), "--min-count", "1", "--dump-graphs"]);
    ok(&["prep", "--input", s(&data), "--out", s(&p2), "--min-count", "1"]);

    let stats = fs::read_to_string(p1.join("stats.tsv")).unwrap();
    let mut lines = stats.lines();
    assert_eq!(lines.next().unwrap(), "# user\t# item\t# interactions\tAvg. len.\tSparsity");
    let cols: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(cols[2].parse::<usize>().unwrap(), raw_interactions);

    for f in ["split_train.txt", "split_val.txt", "split_test.txt", "items.tsv", "users.tsv"] {
        assert_eq!(fs::read(p1.join(f)).unwrap(), fs::read(p2.join(f)).unwrap(), "{f}");
    }
    for f in ["user_item.tsv", "user_user.tsv", "item_item.tsv"] {
        assert!(p1.join("graphs").join(f).exists());
    }

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p1.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prep");
    assert_eq!(manifest["inputs"][0]["sha256"], mclsr::cli::sha256_file(&data).unwrap());
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));

    // existing run directory is protected
    let again = mclsr(&["prep", "--input", s(&data), "--out", s(&p1)]);
    assert!(!again.status.success());
    ok(&["prep", "--input", s(&data), "--out", s(&p1), "--force"]);
}

#[test]
fn train_twice_with_same_seed_gives_identical_history() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let run = |name: &str| {
        let out = root.path().join(name);
        let mut args = vec!["train", "--input", s(&data), "--out", s(&out), "--seed", "7"];
        args.extend(FAST);
        args.extend(["--max-epochs", "2"]);
        ok(&args);
        out
    };
    let a = run("a");
    let b = run("b");
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss_p,loss_il,loss_fl,val_recall50\n"));
    assert_eq!(history.lines().count(), 3);
    assert_eq!(history, fs::read_to_string(b.join("history.csv")).unwrap());

    // eval on the saved best checkpoint reproduces the training-time test metrics
    let e = root.path().join("eval");
    ok(&["eval", "--input", s(&data), "--checkpoint", s(&a.join("best.ckpt")), "--out", s(&e)]);
    assert_eq!(
        fs::read_to_string(e.join("metrics.csv")).unwrap(),
        fs::read_to_string(a.join("metrics.csv")).unwrap()
    );

    let x = root.path().join("export");
    ok(&["export-emb", "--input", s(&data), "--checkpoint", s(&a.join("best.ckpt")), "--out", s(&x)]);
    let svd = fs::read_to_string(x.join("item_svd.tsv")).unwrap();
    assert!(svd.lines().all(|l| l.split('\t').count() == 3));

    // two epochs plus one resumed epoch match three straight epochs
    let straight = root.path().join("straight");
    let resumed = root.path().join("resumed");
    let ckpt = a.join("last.ckpt");
    let mut args = vec!["train", "--input", s(&data), "--out", s(&straight), "--seed", "7"];
    args.extend(FAST);
    args.extend(["--max-epochs", "3"]);
    ok(&args);
    let mut args = vec!["train", "--input", s(&data), "--out", s(&resumed), "--seed", "7", "--resume", s(&ckpt)];
    args.extend(FAST);
    args.extend(["--max-epochs", "3"]);
    ok(&args);
    let third = fs::read_to_string(straight.join("history.csv")).unwrap().lines().nth(3).unwrap().to_string();
    let resumed_history = fs::read_to_string(resumed.join("history.csv")).unwrap();
    assert_eq!(resumed_history.lines().nth(1).unwrap(), third);
}

#[test]
fn config_file_must_name_every_key() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let text: String = TrainConfig::default()
        .to_file_text()
        .lines()
        .filter(|l| !l.starts_with("tau"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = root.path().join("train.cfg");
    fs::write(&cfg, text).unwrap();
    let out = mclsr(&["train", "--input", s(&data), "--out", s(&root.path().join("r")), "--config", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`tau`") && err.contains("0.5"), "{err}");
}

#[test]
fn ablate_runs_five_variants_with_one_seed() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let out = root.path().join("ablate");
    let mut args = vec!["ablate", "--input", s(&data), "--out", s(&out), "--seed", "3", "--max-epochs", "2"];
    args.extend(FAST);
    ok(&args);
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let variants: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(variants, ["full", "no-graph", "no-cl", "no-feature-cl", "no-interest-cl"]);
    assert!(rows.iter().all(|r| r[1] == "3"));
    let losses: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[3]).collect();
    assert!(losses.len() > 1, "{table}");
    assert_eq!(rows[2][4], "0");
    assert_eq!(rows[2][5], "0");
}
