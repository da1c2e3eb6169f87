//! End-to-end runs of the `ulie` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ulie(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulie"))
        .arg("--out")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("failed to launch the binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn check_passes_on_valid_dimensions() {
    let dir = tempdir("check-ok");
    let out = ulie(&dir, &["check", "--dim", "16", "--cols", "4", "--trials", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for suite in ["orthogonality", "isometry", "projection", "gradient"] {
        assert!(text.contains(&format!("{suite}: PASS")), "{text}");
    }
    assert!(dir.join("check.manifest").exists());
}

#[test]
fn check_passes_at_reference_dimensions() {
    let dir = tempdir("check-ref");
    let out = ulie(&dir, &["check", "--dim", "64", "--cols", "16", "--trials", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn check_failure_emits_machine_readable_records() {
    // with scaling disabled, large parameters defeat the bare series, so the
    // orthogonality suite must fail with a nonzero exit
    let dir = tempdir("check-strict");
    let out = ulie(
        &dir,
        &["--strict-taylor", "check", "--dim", "32", "--cols", "32", "--trials", "3"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("invariant=") && l.ends_with("status=FAIL")), "{err}");
}

#[test]
fn check_handles_the_scalar_edge_case() {
    let dir = tempdir("check-scalar");
    let out = ulie(&dir, &["check", "--dim", "1", "--cols", "1", "--trials", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn check_rejects_zero_cols_as_usage_error() {
    let dir = tempdir("check-usage");
    let out = ulie(&dir, &["check", "--dim", "4", "--cols", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_rejects_zero_depth() {
    let dir = tempdir("stability-usage");
    let out = ulie(&dir, &["stability", "--depth", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_reports_unitary_ratio_one() {
    let dir = tempdir("stability-unitary");
    let out = ulie(
        &dir,
        &["stability", "--depth", "50", "--width", "16", "--probes", "2", "--seeds", "2"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("final/initial norm ratio: 1.0"), "{text}");
    let norms = std::fs::read_to_string(dir.join("norms.csv")).unwrap();
    assert!(norms.starts_with("layer_index,norm\n"));
    assert_eq!(norms.lines().count(), 52); // header + input + 50 layers
}

#[test]
fn train_export_bench_round_trip() {
    let dir = tempdir("pipeline");
    let train = ulie(
        &dir,
        &[
            "--seed", "5", "train", "--epochs", "4", "--samples", "48", "--batch", "16",
            "--lr", "0.05",
        ],
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(dir.join("model-lie.ulie").exists());
    assert!(dir.join("curves.csv").exists());
    assert!(dir.join("train.manifest").exists());

    let export = ulie(&dir, &["export", "--mode", "dense"]);
    assert!(export.status.success(), "{}", String::from_utf8_lossy(&export.stderr));
    assert!(dir.join("model-dense.ulie").exists());
    let text = stdout(&export);
    assert!(text.contains("% reduction"), "{text}");
    // lie file must be smaller than the dense one
    let lie_len = std::fs::metadata(dir.join("model-lie.ulie")).unwrap().len();
    let dense_len = std::fs::metadata(dir.join("model-dense.ulie")).unwrap().len();
    assert!(lie_len < dense_len);

    let bench = ulie(&dir, &["bench", "--repeats", "30", "--batch", "2"]);
    assert!(bench.status.success(), "{}", String::from_utf8_lossy(&bench.stderr));
    let bench_csv = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert!(bench_csv.starts_with("variant,batch,median_us,p10_us,p90_us\n"));
    assert!(bench_csv.contains("unitary-cached"));
    assert!(bench_csv.contains("conv-channel-norm"));
}

#[test]
fn same_seed_training_runs_are_byte_identical() {
    let dir_a = tempdir("det-a");
    let dir_b = tempdir("det-b");
    for dir in [&dir_a, &dir_b] {
        let out = ulie(
            dir,
            &["--seed", "9", "train", "--epochs", "3", "--samples", "32", "--batch", "8"],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let curves_a = std::fs::read(dir_a.join("curves.csv")).unwrap();
    let curves_b = std::fs::read(dir_b.join("curves.csv")).unwrap();
    assert_eq!(curves_a, curves_b);
    let model_a = std::fs::read(dir_a.join("model-lie.ulie")).unwrap();
    let model_b = std::fs::read(dir_b.join("model-lie.ulie")).unwrap();
    assert_eq!(model_a, model_b);
}

#[test]
fn manifests_record_the_configuration() {
    let dir = tempdir("manifest");
    let out = ulie(&dir, &["--seed", "3", "check", "--dim", "4", "--cols", "2", "--trials", "2"]);
    assert!(out.status.success());
    let manifest = std::fs::read_to_string(dir.join("check.manifest")).unwrap();
    assert!(manifest.contains("command=check"));
    assert!(manifest.contains("seed=3"));
    assert!(manifest.contains("dim=4"));
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("ulie-cli-test-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
