use std::path::Path;
use std::process::{Command, Output};

fn cnode(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnode"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json"))
        .collect();
    names.sort();
    names
}

#[test]
fn help_lists_flags_and_unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnode(dir.path(), &["train", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--seed", "--jobs", "--scale", "--paper-scale", "--variants", "--N"] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
    let o = cnode(dir.path(), &["simulate", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["a", "b"] {
        let o = cnode(dir.path(), &["simulate", "--seed", "5", "--run-id", id]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["train.csv", "val.csv", "test.csv", "dataset.json"] {
        let a = std::fs::read(dir.path().join("out/a/data").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("out/b/data").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
        if name.ends_with(".csv") {
            let rows = String::from_utf8(a).unwrap().lines().count();
            assert_eq!(rows, 2017, "{name}");
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("out/a/data/manifest.json")).unwrap(),
    )
    .unwrap();
    let eigs: Vec<&str> = manifest["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(eigs.len(), 4);
    for want in ["1.000000", "0.990000", "0.980000", "0.250000"] {
        assert!(eigs.iter().any(|e| e.starts_with(want)), "{eigs:?}");
    }
}

#[test]
fn train_keeps_one_checkpoint_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cnode(dir.path(), &["simulate"]).status.success());
    let args = [
        "train", "--variants", "white", "--N", "8", "--restarts", "1", "--lr", "0.01", "--epochs",
        "5", "--jobs", "1",
    ];
    let o = cnode(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = dir.path().join("out/default/checkpoints");
    assert_eq!(json_files(&ckpt).len(), 1);
    let o = cnode(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("trained 0 cells"), "{text}");
    assert_eq!(json_files(&ckpt).len(), 1);

    let o = cnode(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/default/tables/best.csv").exists());
}

#[test]
fn report_without_checkpoints_names_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnode(dir.path(), &["report", "--run-id", "empty"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoints"), "{}", stderr(&o));
}

#[test]
fn train_without_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cnode(dir.path(), &["train", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cnode simulate"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"seed": 1, "epoch": 3}"#).unwrap();
    let o = cnode(dir.path(), &["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn full_grid_produces_thirty_best_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cnode(dir.path(), &["simulate"]).status.success());
    let o = cnode(
        dir.path(),
        &["train", "--epochs", "1", "--restarts", "1", "--lr", "0.01", "--jobs", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_files(&dir.path().join("out/default/checkpoints")).len(), 30);
    let o = cnode(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let best = std::fs::read_to_string(dir.path().join("out/default/tables/best.csv")).unwrap();
    assert_eq!(best.lines().count(), 31, "{best}");
}
