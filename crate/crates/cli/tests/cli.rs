//! End-to-end CLI tests: the teacher -> cache -> distill -> eval ->
//! extract-tree -> compare pipeline on a tiny synthetic task, plus the
//! documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn kdx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn kdx")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Tiny synthetic dataset flags shared by every run in these tests.
const DATA: &[&str] = &[
    "--set",
    "data.source=synthetic",
    "--set",
    "data.k=3",
    "--set",
    "data.image=8",
    "--set",
    "data.train_subset=18",
    "--set",
    "data.test_subset=9",
    "--set",
    "data.seed=5",
    "--batch-size",
    "6",
];

fn teacher(dir: &Path) -> (String, String) {
    let out_dir = dir.join("teacher");
    let mut args = vec![
        "train-teacher",
        "--epochs",
        "2",
        "--seed",
        "1",
        "--cache-logits",
        "--out-dir",
    ];
    let out_str = out_dir.to_str().unwrap().to_string();
    args.push(&out_str);
    args.extend_from_slice(DATA);
    let out = kdx(&args);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("final:"), "{}", stdout(&out));
    (
        out_dir.join("model.ckpt").to_str().unwrap().to_string(),
        out_dir
            .join("teacher_logits.json")
            .to_str()
            .unwrap()
            .to_string(),
    )
}

#[test]
fn help_prints_subcommands() {
    let out = kdx(&["--help"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    for sub in ["train-teacher", "distill", "eval", "extract-tree", "compare"] {
        assert!(text.contains(sub), "missing {sub} in:\n{text}");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let out = kdx(&["distill", "--set", "bogus=1"]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("unknown config key"), "{}", stderr(&out));
}

#[test]
fn inconsistent_variant_mode_exits_2() {
    let mut args = vec!["distill", "--mode", "plain", "--variant", "M2", "--epochs", "1"];
    args.extend_from_slice(DATA);
    let out = kdx(&args);
    assert_code(&out, 2);
}

#[test]
fn missing_cifar_files_exit_3() {
    let dir = tempdir().unwrap();
    let root = dir.path().join("no-such-data");
    let out = kdx(&[
        "distill",
        "--epochs",
        "1",
        "--set",
        "data.source=cifar10-binary",
        "--set",
        &format!("data.root={}", root.display()),
        "--set",
        "data.k=10",
        "--set",
        "data.train_subset=100",
        "--set",
        "data.test_subset=50",
    ]);
    assert_code(&out, 3);
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempdir().unwrap();
    let (ckpt, cache) = teacher(dir.path());

    // Distill an explainer student against the cached teacher logits.
    let kd_dir = dir.path().join("kd");
    let mut args = vec![
        "distill",
        "--mode",
        "explainer",
        "--variant",
        "M4",
        "--experts",
        "1,2,2",
        "--epochs",
        "2",
        "--seed",
        "7",
        "--teacher-cache",
        &cache,
    ];
    let kd_str = kd_dir.to_str().unwrap().to_string();
    args.push("--out-dir");
    args.push(&kd_str);
    args.extend_from_slice(DATA);
    let out = kdx(&args);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("attention_entropy="), "{}", stdout(&out));

    // A CE-only explainer sibling for the comparison.
    let ce_dir = dir.path().join("ce");
    let mut args = vec![
        "distill",
        "--mode",
        "explainer",
        "--variant",
        "M1",
        "--experts",
        "1,2,2",
        "--epochs",
        "2",
        "--seed",
        "7",
    ];
    let ce_str = ce_dir.to_str().unwrap().to_string();
    args.push("--out-dir");
    args.push(&ce_str);
    args.extend_from_slice(DATA);
    assert_code(&kdx(&args), 0);

    // Evaluate the saved student on both splits.
    let student_ckpt = kd_dir.join("model.ckpt");
    for split in ["test", "train"] {
        let mut args = vec![
            "eval",
            "--checkpoint",
            student_ckpt.to_str().unwrap(),
            "--split",
            split,
        ];
        args.extend_from_slice(DATA);
        let out = kdx(&args);
        assert_code(&out, 0);
        assert!(stdout(&out).contains("accuracy:"), "{}", stdout(&out));
        assert!(stdout(&out).contains("class 2:"), "{}", stdout(&out));
    }

    // Teacher checkpoint evaluates too (plain model path).
    let mut args = vec!["eval", "--checkpoint", &ckpt];
    args.extend_from_slice(DATA);
    assert_code(&kdx(&args), 0);

    // Extract the routing tree from the final snapshot.
    let snapshot = kd_dir.join("snapshot.json");
    let dot_path = dir.path().join("tree.dot");
    let json_path = dir.path().join("tree.json");
    let out = kdx(&[
        "extract-tree",
        "--snapshot",
        snapshot.to_str().unwrap(),
        "--dot",
        dot_path.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("true_tree:"), "{text}");
    assert!(text.contains("retained_blocks:"), "{text}");
    assert!(text.contains("class 0 ->"), "{text}");
    let dot = std::fs::read_to_string(&dot_path).unwrap();
    assert!(dot.starts_with("digraph"), "{dot}");
    assert!(std::fs::read_to_string(&json_path)
        .unwrap()
        .contains("\"nodes\""));

    // Compare the two students; the report and per-run DOTs land in out/.
    let cmp_dir = dir.path().join("cmp");
    let out = kdx(&[
        "compare",
        kd_dir.to_str().unwrap(),
        ce_dir.to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let table = stdout(&out);
    assert!(table.contains("variant"), "{table}");
    assert!(table.contains("M4"), "{table}");
    assert!(table.contains("M1"), "{table}");
    assert!(cmp_dir.join("compare.txt").is_file());
    assert!(cmp_dir.join("kd.dot").is_file());
    assert!(cmp_dir.join("ce.dot").is_file());

    // The stale-cache path: same cache, different subset -> exit 3.
    let mut args = vec![
        "distill",
        "--variant",
        "M4",
        "--epochs",
        "1",
        "--teacher-cache",
        &cache,
        "--set",
        "data.train_subset=12",
    ];
    args.extend_from_slice(DATA);
    // DATA re-sets train_subset=18; order matters, so put the override last.
    args.push("--set");
    args.push("data.train_subset=12");
    let out = kdx(&args);
    assert_code(&out, 3);
}

#[test]
fn config_file_and_flag_overrides_compose() {
    let dir = tempdir().unwrap();
    let cfg_path = dir.path().join("run.kv");
    std::fs::write(
        &cfg_path,
        "# tiny run\n\
         mode = plain\n\
         variant = M1\n\
         epochs = 1\n\
         seed = 3\n\
         batch_size = 6\n\
         data.source = synthetic\n\
         data.k = 3\n\
         data.image = 8\n\
         data.train_subset = 12\n\
         data.test_subset = 6\n\
         data.seed = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = kdx(&[
        "distill",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "9",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let echoed = std::fs::read_to_string(out_dir.join("config.kv")).unwrap();
    assert!(echoed.contains("seed = 9"), "{echoed}");
    assert!(echoed.contains("epochs = 1"), "{echoed}");
}
