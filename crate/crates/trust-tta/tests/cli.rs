//! End-to-end checks of the command-line interface: flag contracts, artifact
//! emission, and byte-level reproducibility.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trust-tta"))
}

/// Small, quickly trained checkpoint shared by the CLI tests.
fn train_fixture(dir: &Path) -> String {
    let ckpt = dir.join("source.ckpt");
    let out = bin()
        .args([
            "train",
            "--seed",
            "7",
            "--n",
            "256",
            "--epochs",
            "2",
            "--lr",
            "0.003",
            "--batch",
            "32",
            "--out",
        ])
        .arg(&ckpt)
        .output()
        .expect("run train");
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    ckpt.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_exits_nonzero_with_usage() {
    let out = bin()
        .args(["adapt", "--definitely-not-a-flag", "x"])
        .output()
        .expect("spawn");
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.to_lowercase().contains("usage") || stderr.contains("--help"),
        "expected usage text, got: {stderr}"
    );
}

#[test]
fn unknown_method_is_rejected() {
    let out = bin()
        .args([
            "adapt",
            "--checkpoint",
            "nope.ckpt",
            "--method",
            "lame",
            "--out-dir",
            "/tmp",
        ])
        .output()
        .expect("spawn");
    assert!(!out.status.success());
}

#[test]
fn source_adapt_twice_emits_identical_csv_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_fixture(dir.path());

    let run = |out_dir: &Path| {
        let out = bin()
            .args([
                "adapt",
                "--checkpoint",
                &ckpt,
                "--method",
                "source",
                "--severity",
                "2",
                "--batch",
                "16",
                "--seed",
                "5",
                "--out-dir",
            ])
            .arg(out_dir)
            .output()
            .expect("run adapt");
        assert!(
            out.status.success(),
            "adapt failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(out_dir.join("accuracy_source_gaussian_noise_s2_seed5.csv")).unwrap()
    };

    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b, "same seed must produce identical CSV bytes");
}

#[test]
fn rank_emits_sorted_full_pool() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_fixture(dir.path());
    let out_path = dir.path().join("ranking.json");
    let out = bin()
        .args([
            "rank",
            "--checkpoint",
            &ckpt,
            "--severity",
            "3",
            "--batch",
            "16",
            "--seed",
            "3",
            "--calib-batches",
            "2",
            "--out",
        ])
        .arg(&out_path)
        .output()
        .expect("run rank");
    assert!(
        out.status.success(),
        "rank failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let entries = json["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 24);
    let entropies: Vec<f64> = entries
        .iter()
        .map(|e| e["mean_entropy_nats"].as_f64().unwrap())
        .collect();
    assert!(entropies.windows(2).all(|w| w[0] <= w[1]), "not ascending");
}

#[test]
fn ablate_k_emits_documented_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_fixture(dir.path());
    let out_path = dir.path().join("ablate_k.csv");
    let out = bin()
        .args([
            "ablate",
            "--checkpoint",
            &ckpt,
            "--axis",
            "k",
            "--severity",
            "2",
            "--batch",
            "16",
            "--seed",
            "1",
            "--seeds",
            "1",
            "--out",
        ])
        .arg(&out_path)
        .output()
        .expect("run ablate");
    assert!(
        out.status.success(),
        "ablate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let values: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, vec!["1", "2", "4", "6", "8"]);
}

#[test]
fn report_aggregates_emitted_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_fixture(dir.path());
    let runs = dir.path().join("runs");
    for seed in ["1", "2"] {
        let out = bin()
            .args([
                "adapt",
                "--checkpoint",
                &ckpt,
                "--method",
                "source",
                "--severity",
                "1",
                "--batch",
                "16",
                "--seed",
                seed,
                "--out-dir",
            ])
            .arg(&runs)
            .output()
            .expect("run adapt");
        assert!(out.status.success());
    }
    let summary_path = dir.path().join("summary.csv");
    let out = bin()
        .args(["report", "--dir"])
        .arg(&runs)
        .args(["--out"])
        .arg(&summary_path)
        .output()
        .expect("run report");
    assert!(
        out.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = std::fs::read_to_string(&summary_path).unwrap();
    let row = summary
        .lines()
        .find(|l| l.starts_with("run,source"))
        .expect("aggregated source row");
    assert!(row.contains(",2,"), "expected two seeds in {row}");
}
