//! Black-box CLI behavior: exit codes, atomicity, manifests, policies.

use std::path::Path;
use std::process::{Command, Output};

use fusekit_cli::fixture::{write_fixture_pair, FixtureSpec};
use fusekit_core::checkpoint::{load_checkpoint, save_checkpoint, TensorEntry, TensorMap};
use fusekit_core::dtype::DType;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusekit"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn fixture_pair(dir: &Path) {
    write_fixture_pair(
        &FixtureSpec {
            layers: 2,
            width: 32,
            ..FixtureSpec::default()
        },
        &dir.join("base.st"),
        &dir.join("sec.st"),
    )
    .unwrap();
}

#[test]
fn merge_identical_checkpoints_is_bit_equal_to_base() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    std::fs::copy(dir.path().join("base.st"), dir.path().join("base2.st")).unwrap();
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "base2.st",
            "--out", "fused.st",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // our writer is canonical, so the files match byte for byte
    assert_eq!(
        std::fs::read(dir.path().join("base.st")).unwrap(),
        std::fs::read(dir.path().join("fused.st")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fused.st.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["schema"], 1);
    let rows = manifest["tensors"].as_array().unwrap();
    assert_eq!(rows.len(), 5); // 2 weights + 2 biases + head
    for row in rows {
        let selected = row["selected"].as_u64().unwrap();
        let total = row["total"].as_u64().unwrap();
        assert!(selected <= total);
    }
}

#[test]
fn missing_secondary_exits_3_with_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "missing.st",
            "--out", "fused.st",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("fusekit: error[io]:"), "{stderr}");
    assert_eq!(stderr.lines().count(), 1);
    assert!(!dir.path().join("fused.st").exists());
    // no temp leftovers either
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn bad_method_and_bad_policy_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "slerp", "--base", "base.st", "--secondary", "sec.st", "--out",
            "o.st",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("fusekit: error[config]:"));

    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--out", "o.st", "--unmatched-policy", "banana",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--out", "o.st", "--alpha", "-2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shape_mismatch_under_strict_policy_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = TensorMap::new();
    base.insert(
        "embed",
        TensorEntry::from_f64(DType::F32, vec![100, 8], &[0.1; 800]).unwrap(),
    )
    .unwrap();
    base.insert(
        "w",
        TensorEntry::from_f64(DType::F32, vec![4, 4], &[0.5; 16]).unwrap(),
    )
    .unwrap();
    let mut sec = TensorMap::new();
    sec.insert(
        "embed",
        TensorEntry::from_f64(DType::F32, vec![120, 8], &[0.1; 960]).unwrap(),
    )
    .unwrap();
    sec.insert(
        "w",
        TensorEntry::from_f64(DType::F32, vec![4, 4], &[0.25; 16]).unwrap(),
    )
    .unwrap();
    save_checkpoint(&base, dir.path().join("base.st")).unwrap();
    save_checkpoint(&sec, dir.path().join("sec.st")).unwrap();

    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--out", "fused.st",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("fusekit: error[shape]:"));
    assert!(!dir.path().join("fused.st").exists());

    // skip policy keeps the base version and proceeds
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--out", "fused.st", "--unmatched-policy", "skip",
        ],
    );
    assert!(out.status.success());
    let fused = load_checkpoint(dir.path().join("fused.st")).unwrap();
    assert_eq!(fused.get("embed").unwrap().raw(), base.get("embed").unwrap().raw());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fused.st.manifest.json")).unwrap())
            .unwrap();
    assert!(!manifest["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn unmatched_secondary_policies() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = TensorMap::new();
    base.insert(
        "w",
        TensorEntry::from_f64(DType::F32, vec![8], &[1.0; 8]).unwrap(),
    )
    .unwrap();
    let mut sec = TensorMap::new();
    sec.insert(
        "w",
        TensorEntry::from_f64(DType::F32, vec![8], &[2.0; 8]).unwrap(),
    )
    .unwrap();
    sec.insert(
        "extra",
        TensorEntry::from_f64(DType::F32, vec![2], &[7.0, 8.0]).unwrap(),
    )
    .unwrap();
    save_checkpoint(&base, dir.path().join("base.st")).unwrap();
    save_checkpoint(&sec, dir.path().join("sec.st")).unwrap();

    let merge = |policy: &str, out_name: &str| {
        run(
            dir.path(),
            &[
                "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
                "--out", out_name, "--unmatched-policy", policy,
            ],
        )
    };
    assert_eq!(merge("error", "a.st").status.code(), Some(4));
    assert!(merge("copy-secondary", "b.st").status.success());
    let copied = load_checkpoint(dir.path().join("b.st")).unwrap();
    assert!(copied.get("extra").is_some());
    assert!(merge("skip", "c.st").status.success());
    let skipped = load_checkpoint(dir.path().join("c.st")).unwrap();
    assert!(skipped.get("extra").is_none());
}

#[test]
fn recipe_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    std::fs::write(
        dir.path().join("recipe.json"),
        serde_json::json!({
            "method": "ties",
            "base_path": "base.st",
            "secondary_paths": ["sec.st"],
            "output_path": "from_recipe.st",
            "density": 0.25,
            "lambda": 0.8
        })
        .to_string(),
    )
    .unwrap();

    let out = run(dir.path(), &["merge", "--recipe", "recipe.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from_recipe.st").exists());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("from_recipe.st.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["recipe"]["method"], "ties");
    assert_eq!(manifest["recipe"]["density"].as_f64().unwrap(), 0.25);

    // flags override recipe fields
    let out = run(
        dir.path(),
        &[
            "merge", "--recipe", "recipe.json", "--out", "overridden.st", "--density", "0.75",
        ],
    );
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("overridden.st.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["recipe"]["density"].as_f64().unwrap(), 0.75);

    // unknown recipe keys are config errors
    std::fs::write(dir.path().join("bad.json"), r#"{"methd": "ties"}"#).unwrap();
    let out = run(dir.path(), &["merge", "--recipe", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn multi_secondary_fold_records_order() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    write_fixture_pair(
        &FixtureSpec {
            layers: 2,
            width: 32,
            seed: 9,
            ..FixtureSpec::default()
        },
        &dir.path().join("unused.st"),
        &dir.path().join("sec2.st"),
    )
    .unwrap();

    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--secondary", "sec2.st", "--out", "fused.st",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fused.st.manifest.json")).unwrap())
            .unwrap();
    let fold: Vec<&str> = manifest["fold_order"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(fold, vec!["sec.st", "sec2.st"]);
    // no fold temp files remain
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".fold"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    // every output element still bit-equals one of the three parents
    let base = load_checkpoint(dir.path().join("base.st")).unwrap();
    let s1 = load_checkpoint(dir.path().join("sec.st")).unwrap();
    let s2 = load_checkpoint(dir.path().join("sec2.st")).unwrap();
    let fused = load_checkpoint(dir.path().join("fused.st")).unwrap();
    for (name, f) in fused.iter() {
        for j in 0..f.element_count() {
            let fb = f.value_at(j).to_bits();
            let candidates = [
                base.get(name).unwrap().value_at(j).to_bits(),
                s1.get(name).unwrap().value_at(j).to_bits(),
                s2.get(name).unwrap().value_at(j).to_bits(),
            ];
            assert!(candidates.contains(&fb), "{name}[{j}]");
        }
    }
}

#[test]
fn merge_output_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    for (threads, name) in [("1", "t1.st"), ("8", "t8.st")] {
        let out = run(
            dir.path(),
            &[
                "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
                "--out", name, "--threads", threads,
            ],
        );
        assert!(out.status.success());
    }
    assert_eq!(
        std::fs::read(dir.path().join("t1.st")).unwrap(),
        std::fs::read(dir.path().join("t8.st")).unwrap()
    );
}

#[test]
fn merge_medium_fixture_within_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    // ~10^5 parameters
    write_fixture_pair(
        &FixtureSpec {
            layers: 4,
            width: 128,
            ..FixtureSpec::default()
        },
        &dir.path().join("base.st"),
        &dir.path().join("sec.st"),
    )
    .unwrap();
    let started = std::time::Instant::now();
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "scf-rkl", "--base", "base.st", "--secondary", "sec.st",
            "--out", "fused.st",
        ],
    );
    assert!(out.status.success());
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "merge took {secs:.2}s");
}

#[test]
fn diagnose_of_base_against_itself_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    let out = run(
        dir.path(),
        &[
            "diagnose", "--base", "base.st", "--secondary", "sec.st", "--fused", "base.st",
            "--out-dir", "diag",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "report.json",
        "spectra.csv",
        "angles.csv",
        "nss.csv",
        "provenance.csv",
        "entropy.csv",
        "stability.csv",
    ] {
        assert!(dir.path().join("diag").join(file).exists(), "{file}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema"], 1);
    for row in report["spectral"].as_array().unwrap() {
        assert!(row["nss_vs_base"].as_f64().unwrap().abs() < 1e-12);
        assert!(row["max_angle_vs_base_deg"].as_f64().unwrap() < 1e-6);
    }
    for row in report["provenance"].as_array().unwrap() {
        assert_eq!(row["from_neither"].as_u64(), Some(0));
    }
    for row in report["entropy"].as_array().unwrap() {
        assert_eq!(row["entropy_drop"].as_f64(), Some(0.0));
    }

    // selector that matches nothing is a config error
    let out = run(
        dir.path(),
        &[
            "diagnose", "--base", "base.st", "--secondary", "sec.st", "--fused", "base.st",
            "--out-dir", "diag2", "--selector", "nope.*",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnose_task_arithmetic_interpolation_is_mostly_neither() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    let out = run(
        dir.path(),
        &[
            "merge", "--method", "task-arithmetic", "--lambda", "0.5", "--base", "base.st",
            "--secondary", "sec.st", "--out", "ta.st",
        ],
    );
    assert!(out.status.success());
    let out = run(
        dir.path(),
        &[
            "diagnose", "--base", "base.st", "--secondary", "sec.st", "--fused", "ta.st",
            "--out-dir", "diag", "--selector", "*.weight",
        ],
    );
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag/report.json")).unwrap())
            .unwrap();
    for row in report["provenance"].as_array().unwrap() {
        if row["tensor"].as_str().unwrap().ends_with(".weight") {
            let neither = row["from_neither"].as_u64().unwrap() as f64;
            let total = row["total"].as_u64().unwrap() as f64;
            assert!(neither / total > 0.99, "{row}");
        }
    }
}

#[test]
fn compare_rejects_duplicate_methods() {
    let dir = tempfile::tempdir().unwrap();
    fixture_pair(dir.path());
    let out = run(
        dir.path(),
        &[
            "compare", "--base", "base.st", "--secondary", "sec.st", "--methods",
            "ties,ties", "--out-dir", "cmp",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_fixture_scale_zero_produces_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "gen-fixture", "--out-base", "a.st", "--out-secondary", "b.st",
            "--perturbation-scale", "0",
        ],
    );
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("a.st")).unwrap(),
        std::fs::read(dir.path().join("b.st")).unwrap()
    );
}
