use std::path::Path;
use std::process::{Command, Output};

fn segprune(out: &Path, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_segprune"))
        .arg("--smoke")
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    o
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = segprune(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn staged_commands_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data", "--previews", "2"]);
    assert!(out.join("data/manifest.json").exists());
    assert!(out.join("data/previews/seg-00.ppm").exists());

    ok(out, &["pretrain"]);
    ok(out, &["train-seg"]);
    ok(out, &["mtp-train"]);
    assert!(out.join("history.csv").exists());
    assert!(out.join("plots/sparsity.svg").exists());
    assert!(out.join("mtp/lagrangian.json").exists());

    ok(out, &["--keep-fraction", "0.5", "prune"]);
    assert!(out.join("plans/mtp.plan").exists());
    let pruned = out.join("stages/mtp-pruned.json");
    assert!(pruned.exists());

    ok(out, &["finetune", "--checkpoint", pruned.to_str().unwrap(), "--name", "mtp-ft"]);
    let eval = ok(out, &["eval", pruned.to_str().unwrap()]);
    assert!(eval.contains("mIoU"), "{eval}");

    let prof = ok(out, &["profile", pruned.to_str().unwrap(), "--runs", "5"]);
    assert!(prof.to_lowercase().contains("flops"), "{prof}");

    let uni = ok(out, &["prune", "--method", "uniform", "--from", out.join("stages/dense.json").to_str().unwrap()]);
    assert!(out.join("plans/uniform.plan").exists(), "{uni}");
}

#[test]
fn run_all_then_report_merges_and_skips_missing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&a, &["run-all"]);
    assert!(a.join("report.csv").exists());
    let merged = dir.path().join("merged.csv");
    let missing = dir.path().join("missing");
    let o = segprune(
        &a,
        &["report", a.to_str().unwrap(), missing.to_str().unwrap(), "--output", merged.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    let lines = std::fs::read_to_string(&merged).unwrap().lines().count();
    let orig = std::fs::read_to_string(a.join("report.csv")).unwrap().lines().count();
    assert_eq!(lines, orig);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = segprune(dir.path(), &["eval", dir.path().join("nope.json").to_str().unwrap()]);
    assert!(!o.status.success());
    let o = segprune(dir.path(), &["--keep-fraction", "1.5", "prune"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}
