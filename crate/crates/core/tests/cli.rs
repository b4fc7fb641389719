//! End-to-end runs of the `dpmn` binary and its exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn dpmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpmn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(fixture("desk.cfg"))
        .unwrap()
        .replace("encoder.hidden = 32", "encoder.hidden = 16")
        .replace("encoder.ff = 64", "encoder.ff = 32")
        .replace("encoder.heads = 4", "encoder.heads = 2")
        .replace("max_epochs = 20", "max_epochs = 3");
    let path = dir.join("run.cfg");
    std::fs::write(&path, edit(text)).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_reports_the_best_epoch_scores() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t);
    let out_dir = dir.path().join("run");
    let sample = fixture("sample.tsv");
    let train = dpmn(&["train", "--config", s(&config), "--train", s(&sample), "--dev", s(&sample), "--out", s(&out_dir)]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    for file in ["model.dpmn", "run_log.csv", "steps.csv", "config.txt"] {
        assert!(out_dir.join(file).exists(), "{file} missing");
    }

    let log = std::fs::read_to_string(out_dir.join("run_log.csv")).unwrap();
    let best: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .find(|r| r[10] == "1")
        .expect("a best epoch is marked");
    let logged: Vec<f64> = best[5..8].iter().map(|v| v.parse().unwrap()).collect();

    let eval = dpmn(&["eval", "--checkpoint", s(&out_dir.join("model.dpmn")), "--data", s(&sample)]);
    assert_eq!(code(&eval), 0);
    let stdout = String::from_utf8(eval.stdout).unwrap();
    let reported: Vec<f64> = stdout
        .lines()
        .filter_map(|l| l.split("macro F1 ").nth(1))
        .map(|rest| rest.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(reported.len(), 3, "{stdout}");
    for (r, l) in reported.iter().zip(&logged) {
        assert!((r - l).abs() < 5e-5, "eval {r} vs logged {l}");
    }

    // The saved config reloads and trains again.
    let again = dpmn(&[
        "train",
        "--config",
        s(&out_dir.join("config.txt")),
        "--train",
        s(&sample),
        "--dev",
        s(&sample),
        "--out",
        s(&dir.path().join("again")),
    ]);
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let sample = fixture("sample.tsv");
    let out = s(&dir.path().join("out")).to_string();
    let bad_weights = small_config(dir.path(), |t| t.replace("loss.main = 0.4", "loss.main = 0.5"));
    let r = dpmn(&["train", "--config", s(&bad_weights), "--train", s(&sample), "--dev", s(&sample), "--out", &out]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("sum to 1"));

    let unknown = small_config(dir.path(), |t| t + "encoder.depth = 3\n");
    let r = dpmn(&["train", "--config", s(&unknown), "--train", s(&sample), "--dev", s(&sample), "--out", &out]);
    assert_eq!(code(&r), 2);

    assert_eq!(code(&dpmn(&["sweep", "--forms", "sideways"])), 2);
    assert_eq!(code(&dpmn(&[])), 2);
    assert_eq!(code(&dpmn(&["train"])), 2);
}

#[test]
fn data_and_checkpoint_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t);
    let sample = fixture("sample.tsv");
    let out = s(&dir.path().join("out")).to_string();

    let malformed = dir.path().join("bad.tsv");
    std::fs::write(&malformed, "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c\n1\thello\tMAYBE\tNULL\tNULL\n").unwrap();
    let r = dpmn(&["train", "--config", s(&config), "--train", s(&malformed), "--dev", s(&sample), "--out", &out]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("row 2"));

    let orphan = dir.path().join("orphan.tsv");
    std::fs::write(&orphan, "id\ttweet\tsubtask_a\tsubtask_b\tsubtask_c\n1\thello\tNOT\tTIN\tIND\n").unwrap();
    let r = dpmn(&["train", "--config", s(&config), "--train", s(&orphan), "--dev", s(&sample), "--out", &out]);
    assert_eq!(code(&r), 3);

    let missing = dir.path().join("nope.dpmn");
    assert_eq!(code(&dpmn(&["eval", "--checkpoint", s(&missing), "--data", s(&sample)])), 3);

    let r = dpmn(&["train", "--config", s(&config), "--train", s(&sample), "--dev", s(&sample), "--out", &out]);
    assert_eq!(code(&r), 0);
    let ckpt = dir.path().join("out").join("model.dpmn");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let r = dpmn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&sample)]);
    assert_eq!(code(&r), 3);
    assert!(String::from_utf8_lossy(&r.stderr).contains("checksum"));
}

#[test]
fn diverging_training_exits_with_4_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t.replace("learning_rate = 0.001", "learning_rate = 1e300"));
    let sample = fixture("sample.tsv");
    let out = dir.path().join("out");
    let r = dpmn(&["train", "--config", s(&config), "--train", s(&sample), "--dev", s(&sample), "--out", s(&out)]);
    assert_eq!(code(&r), 4);
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("non-finite") && stderr.contains("step"), "{stderr}");
    assert!(!out.join("model.dpmn").exists());
}

#[test]
fn gradcheck_and_sweep_succeed() {
    let r = dpmn(&["gradcheck", "--probes", "40", "--seed", "3"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));

    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), |t| t.replace("max_epochs = 3", "max_epochs = 1"));
    let csv = dir.path().join("sweep.csv");
    let r = dpmn(&[
        "sweep", "--config", s(&config), "--lengths", "1,2", "--forms", "deep,light", "--inits", "random", "--out", s(&csv),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("1,deep,random,"));
    assert!(rows[4].starts_with("2,light,random,"));
}
