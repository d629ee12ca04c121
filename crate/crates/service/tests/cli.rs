use std::path::{Path, PathBuf};

use lbm_core::harness::load_report;
use lbm_service::cli::run;

fn lbm(args: &[&str]) -> i32 {
    let mut argv = vec!["lbm"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small synthetic dataset and returns its directory.
fn small_dataset(root: &Path) -> PathBuf {
    let cfg = root.join("sim.toml");
    std::fs::write(&cfg, "n_students = 30\nn_questions = 400\nper_student = 80\nseed = 5\n").unwrap();
    let out = root.join("data");
    assert_eq!(lbm(&["gen-data", "--config", p(&cfg), "--out", p(&out)]), 0);
    out
}

#[test]
fn gen_data_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(lbm(&["gen-data", "--config", "default", "--out", p(&out)]), 0);
    for f in ["bank.jsonl", "profiles.jsonl", "trajectories.jsonl"] {
        assert!(out.join(f).is_file());
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(lbm(&["frobnicate"]), 2);
    assert_eq!(lbm(&["run-exp", "--no-such-flag"]), 2);
    assert_eq!(lbm(&[]), 2);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert_eq!(lbm(&["run-exp", "--dataset", p(&data), "--budget", "0"]), 2);
    assert_eq!(lbm(&["run-exp", "--dataset", p(&data), "--backend", "pigeon"]), 2);
    assert_eq!(lbm(&["run-exp", "--dataset", p(&dir.path().join("missing"))]), 2);
}

#[test]
fn run_exp_replay_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let first = dir.path().join("first");
    assert_eq!(
        lbm(&["run-exp", "--dataset", p(&data), "--students", "10", "--backend", "oracle", "--out", p(&first)]),
        0
    );
    let original = load_report(&first.join("report.json")).unwrap();

    // one transcript serving both roles
    let enc = std::fs::read_to_string(first.join("encoder_transcript.jsonl")).unwrap();
    let dec = std::fs::read_to_string(first.join("decoder_transcript.jsonl")).unwrap();
    let combined = dir.path().join("both.jsonl");
    std::fs::write(&combined, enc + dec.split_once('\n').unwrap().1).unwrap();
    let replayed = dir.path().join("replayed");
    let backend = format!("replay:{}", combined.display());
    assert_eq!(
        lbm(&["run-exp", "--mode", "lbm", "--dataset", p(&data), "--students", "10", "--backend", &backend, "--out", p(&replayed)]),
        0
    );
    let r = load_report(&replayed.join("report.json")).unwrap();
    assert_eq!(r.mean, original.mean);
    assert_eq!(r.results, original.results);

    let again = dir.path().join("again");
    assert_eq!(lbm(&["rerun", "--report", p(&first.join("report.json")), "--out", p(&again)]), 0);
    assert_eq!(
        std::fs::read(first.join("report.json")).unwrap(),
        std::fs::read(again.join("report.json")).unwrap()
    );
}

#[test]
fn sweep_grid_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("sweep");
    assert_eq!(
        lbm(&["sweep", "--dataset", p(&data), "--students", "8", "--budgets", "16,128", "--out", p(&out)]),
        0
    );
    assert_eq!(std::fs::read_to_string(out.join("budget_sweep.tsv")).unwrap().lines().count(), 3);
    let out = dir.path().join("eff");
    assert_eq!(
        lbm(&["sweep", "--dataset", p(&data), "--students", "8", "--n-encs", "10,40", "--out", p(&out)]),
        0
    );
    assert!(out.join("data_efficiency.tsv").is_file());
    let out = dir.path().join("grid");
    assert_eq!(
        lbm(&[
            "grid", "--dataset", p(&data), "--students", "8", "--encoders", "ground-truth,oracle", "--decoders", "oracle",
            "--out", p(&out)
        ]),
        0
    );
    assert!(out.join("grid.txt").is_file());
    let out = dir.path().join("ablation");
    assert_eq!(lbm(&["ablate", "--dataset", p(&data), "--students", "8", "--out", p(&out)]), 0);
    assert!(out.join("ablation.json").is_file());
}

#[test]
fn toy_bkt_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("toy");
    assert_eq!(lbm(&["train-toy", "--epochs", "5", "--out", p(&out)]), 0);
    assert!(out.join("trace.jsonl").is_file());

    let out = dir.path().join("bkt");
    assert_eq!(lbm(&["bkt-fit", "--dataset", p(&data), "--test-students", "5", "--out", p(&out)]), 0);
    assert!(out.join("bkt_params.jsonl").is_file());

    let cfg = dir.path().join("ft.toml");
    std::fs::write(&cfg, "dataset = \"data\"\n[plan]\nn_train = 20\nn_test = 5\n").unwrap();
    let out = dir.path().join("ft");
    assert_eq!(lbm(&["finetune", "--config", p(&cfg), "--out", p(&out)]), 1);
    assert!(!out.join("finetune_manifest.json").exists());
}

#[test]
fn filter_sessions_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("log.csv");
    let mut text = String::from("student_id,question_id,question_text,answer_given,correct,timestamp,response_time\n");
    for k in 0..45 {
        text.push_str(&format!("1,{k},What is {k} + 1?,{},1,{},10\n", k + 1, k * 30));
    }
    text.push_str("2,0,What is 0 + 1?,1,1,0,10\n");
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("logs");
    assert_eq!(lbm(&["filter-sessions", "--input", p(&csv), "--out", p(&out)]), 0);
    let d = lbm_core::dataset::load_dataset(&out).unwrap();
    assert_eq!(d.trajectories.len(), 1);
    assert_eq!(d.trajectories[0].interactions.len(), 45);
    assert_eq!(lbm(&["filter-sessions", "--input", p(&csv), "--out", p(&out), "--min-length", "0"]), 2);
}
