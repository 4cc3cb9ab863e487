use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.images=40",
    "--set",
    "data.identities=10",
    "--set",
    "data.dim=16",
    "--set",
    "acae.heads=2",
    "--set",
    "train.epochs=2",
    "--set",
    "eval.gallery_size=15",
    "--set",
    "rerank.k1=10",
    "--set",
    "rerank.k2=3",
    "--set",
    "rerank.lambda=0.3",
];

fn acae(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acae"))
        .arg(cmd)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(extra)
        .env_remove("ACAE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(dir: &Path) {
    ok(acae("gen", dir, &[]));
    ok(acae("train", dir, &[]));
    ok(acae("eval", dir, &[]));
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for file in [
        "dataset.jsonl",
        "model.acae",
        "checkpoint.acae",
        "train_report.txt",
        "eval_report.txt",
        "eval_rows.jsonl",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    let report = std::fs::read_to_string(a.path().join("eval_report.txt")).unwrap();
    let header = report.lines().find(|l| l.starts_with("metric")).unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["metric", "baseline", "acae", "delta"]);
    for metric in ["mAP", "top-1", "top-5", "top-10"] {
        assert!(report.lines().any(|l| l.starts_with(metric)), "missing {metric}");
    }
}

#[test]
fn sweep_and_bench_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(acae("gen", dir.path(), &[]));
    ok(acae("train", dir.path(), &[]));
    ok(acae("sweep", dir.path(), &["--set", "eval.lambdas=0,0.4"]));
    let rows = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(rows("sweep_lambda.jsonl"), 2);
    assert_eq!(rows("sweep_subsets.jsonl"), 8);
    // baseline, one grid point, acae
    assert_eq!(rows("sweep_rerank.jsonl"), 3);
    let text = ok(acae("bench", dir.path(), &["--set", "bench.repeats=2", "--set", "bench.max_pairs=5"]));
    assert!(text.contains("head delta"));
    let empty = ok(acae("bench", dir.path(), &["--set", "bench.repeats=0"]));
    assert!(empty.contains("no timings"));
}

#[test]
fn gradcheck_passes_and_reports_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(acae("gradcheck", dir.path(), &["--set", "gradcheck.instances=20"]));
    assert!(text.contains("20 instances, tolerance 1e-4: PASS"), "{text}");
    let rows = std::fs::read_to_string(dir.path().join("gradcheck.jsonl")).unwrap();
    assert!(rows.lines().count() > 20);
    let strict = acae("gradcheck", dir.path(), &["--set", "gradcheck.instances=2", "--set", "gradcheck.tolerance=1e-15"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        &["--set", "no.such.key=1"][..],
        &["--set", "data.dim=abc"][..],
        &["--set", "data.group_max=9"][..],
    ] {
        let o = acae("gen", dir.path(), extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}");
    }
    let missing = acae("eval", dir.path(), &["--data", "/nonexistent/data.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    ok(acae("gen", dir.path(), &[]));
    let text = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    let truncated = dir.path().join("truncated.jsonl");
    std::fs::write(&truncated, cut).unwrap();
    let o = acae("train", dir.path(), &["--data", truncated.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    ok(acae("gen", dir.path(), &[]));
    let o = acae(
        "train",
        dir.path(),
        &["--set", "train.lr=1e300", "--set", "train.freeze_first_epoch=false"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
