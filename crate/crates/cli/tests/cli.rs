use std::path::Path;
use std::process::{Command, Output};

fn permseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permseq")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = permseq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = permseq(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    err
}

fn records(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("tasks.jsonl")).unwrap().lines().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_record_counts() {
    let tmp = tempfile::tempdir().unwrap();
    for (exp, count) in [("tower_unique", 720), ("tower_subsets", 1950), ("soma", 240)] {
        let dir = tmp.path().join(exp);
        ok(&["gen-data", "--experiment", exp, "--out", s(&dir)]);
        assert_eq!(records(&dir), count);
    }
    let soma = std::fs::read_to_string(tmp.path().join("soma/tasks.jsonl")).unwrap();
    let first: serde_like::Probe = serde_like::probe(soma.lines().next().unwrap());
    assert_eq!(first.views, 4);

    let err = fails(&["gen-data", "--experiment", "soma", "--out", s(&tmp.path().join("soma"))]);
    assert!(err.contains("--force"));
    ok(&["gen-data", "--experiment", "soma", "--out", s(&tmp.path().join("soma")), "--force"]);
    fails(&["gen-data", "--experiment", "towers", "--out", s(tmp.path())]);
}

/// Minimal structural peek at a JSONL record without a JSON dependency.
mod serde_like {
    pub struct Probe {
        pub views: usize,
    }

    /// Counts the top-level elements of the `raster` array.
    pub fn probe(line: &str) -> Probe {
        let start = line.find("\"raster\":").unwrap() + "\"raster\":".len();
        let mut depth = 0;
        let mut views = 0;
        for ch in line[start..].chars() {
            match ch {
                '[' => {
                    depth += 1;
                    if depth == 2 {
                        views += 1;
                    }
                }
                ']' => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                _ => {}
            }
        }
        Probe { views }
    }
}

#[test]
fn train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("bc.ckpt");
    let csv = tmp.path().join("metrics.csv");
    ok(&["gen-data", "--experiment", "tower_fixed", "--seed", "4", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--model", "bc", "--seed", "4", "--epochs", "3", "--out", s(&ckpt)]);
    fails(&["train", "--data", s(&data), "--model", "bc", "--epochs", "3", "--out", s(&ckpt)]);
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--model", "bc,bc_hungarian", "--seed", "4", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("tower_fixed,bc,4,200,6,"));
    assert!(lines[2].starts_with("tower_fixed,bc_hungarian,4,200,6,"));

    let err = fails(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--model", "sinkhorn", "--out", s(&tmp.path().join("x.csv"))]);
    assert!(err.contains("cannot run as sinkhorn"));
    fails(&["eval", "--data", s(&data), "--checkpoint", s(&tmp.path().join("missing.ckpt")), "--out", s(&tmp.path().join("y.csv"))]);

    // same seed, same bytes
    let ckpt2 = tmp.path().join("bc2.ckpt");
    let csv2 = tmp.path().join("metrics2.csv");
    ok(&["train", "--data", s(&data), "--model", "bc", "--seed", "4", "--epochs", "3", "--out", s(&ckpt2)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt2), "--model", "bc,bc_hungarian", "--seed", "4", "--out", s(&csv2)]);
    assert_eq!(text, std::fs::read_to_string(&csv2).unwrap());
}

#[test]
fn run_report_and_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let towers = tmp.path().join("towers");
    let stdout = ok(&["run", "--experiment", "tower_fixed", "--seeds", "2", "--epochs", "2", "--out", s(&towers)]);
    // five kinds per seed
    assert_eq!(stdout.lines().count(), 1 + 2 * 5);
    assert_eq!(std::fs::read_to_string(towers.join("metrics.csv")).unwrap(), stdout);
    ok(&["report", "--run-dir", s(&towers)]);
    let summary = std::fs::read_to_string(towers.join("report/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    fails(&["report", "--run-dir", s(&tmp.path().join("empty"))]);
    fails(&["plan", "--run-dir", s(&towers)]);

    let soma = tmp.path().join("soma");
    ok(&[
        "run", "--experiment", "soma", "--seeds", "2", "--epochs", "2", "--model", "tcn_hungarian,sinkhorn", "--out", s(&soma),
    ]);
    let table = ok(&["plan", "--run-dir", s(&soma)]);
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["random", "tcn_hungarian", "sinkhorn", "oracle"]);
    assert!(table.lines().last().unwrap().starts_with("oracle,0.000000,0.000000,"));
}
