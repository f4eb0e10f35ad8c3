use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dkl_core::class_stats::ClassStatsTable;

const RUN_TOML: &str = "[data]\nclasses = 4\ndim = 6\nn_per_class = 40\n\n[train]\nepochs = 2\nhidden = [12]\n";

fn dkl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DKL_OUT_DIR")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), RUN_TOML).unwrap();
    tmp
}

fn read_toml(path: &Path) -> toml::Table {
    fs::read_to_string(path).unwrap().parse().unwrap()
}

fn last_record(run: &Path) -> serde_json::Value {
    let text = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn train_requires_a_config() {
    let tmp = workspace();
    let out = dkl(&["train", "baseline"], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn verify_passes_and_fails_with_distinct_codes() {
    let tmp = workspace();
    let ok = dkl(&["verify", "--classes", "2", "--trials", "100", "--out", "ok"], tmp.path());
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report = read_toml(&tmp.path().join("ok/report.toml"));
    assert_eq!(report["passed"].as_bool(), Some(true));
    assert_eq!(report["kl_equivalence"]["class_counts"].as_array().unwrap().len(), 1);

    let strict = dkl(
        &["verify", "--classes", "2,5", "--trials", "100", "--tolerance", "0", "--out", "strict"],
        tmp.path(),
    );
    assert_eq!(code(&strict), 1, "{}", stderr(&strict));
    assert!(stderr(&strict).contains("kl_equivalence"), "{}", stderr(&strict));
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = workspace();
    let unknown = dkl(&["train", "baseline", "--config", "run.toml", "--train.epochz", "3"], tmp.path());
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("epochz"), "{}", stderr(&unknown));

    fs::write(tmp.path().join("bad.toml"), "[train\nepochs = 1\n").unwrap();
    let bad = dkl(&["train", "baseline", "--config", "bad.toml"], tmp.path());
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 1"), "{}", stderr(&bad));

    let replay = dkl(&["replay", "nowhere", "--train.epochs", "1"], tmp.path());
    assert_eq!(code(&replay), 2);
}

#[test]
fn seed_flag_lands_in_the_manifest() {
    let tmp = workspace();
    let out = dkl(&["train", "baseline", "--config", "run.toml", "--seed", "7", "--out", "r"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_toml(&tmp.path().join("r/manifest.toml"));
    assert_eq!(m["seed"].as_integer(), Some(7));
    assert_eq!(m["config"]["train"]["seed"].as_integer(), Some(7));
    assert_eq!(m["command"].as_array().unwrap().len(), 2);
    for file in ["params.bin", "stats.txt", "train_logits.bin", "metrics.jsonl"] {
        assert!(tmp.path().join("r").join(file).is_file(), "missing {file}");
    }
}

#[test]
fn distill_with_mismatched_teacher_names_both_shapes() {
    let tmp = workspace();
    let teacher = dkl(&["train", "baseline", "--config", "run.toml", "--out", "teacher"], tmp.path());
    assert_eq!(code(&teacher), 0, "{}", stderr(&teacher));
    let out = dkl(
        &[
            "train", "distill", "--config", "run.toml", "--data.n_per_class", "50",
            "--teacher-logits", "teacher/train_logits.bin", "--out", "student",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("(148, 4)") && err.contains("(120, 4)"), "{err}");
    assert!(!tmp.path().join("student").exists());

    let ok = dkl(
        &[
            "train", "distill", "--config", "run.toml", "--teacher-logits", "teacher/train_logits.bin",
            "--out", "student",
        ],
        tmp.path(),
    );
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(last_record(&tmp.path().join("student"))["agreement"].is_number());
}

#[test]
fn eval_of_a_run_reproduces_its_final_record() {
    let tmp = workspace();
    let out = dkl(&["train", "adversarial", "--config", "run.toml", "--out", "adv"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = dkl(&["eval", "--run", "adv", "--out", "ev"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let last = last_record(&tmp.path().join("adv"));
    let ev = read_toml(&tmp.path().join("ev/eval.toml"));
    assert_eq!(ev["clean_acc"].as_float(), last["test_acc"].as_f64());
    assert_eq!(ev["robust_acc"].as_float(), last["robust_acc"].as_f64());
}

#[test]
fn zero_radius_attack_equals_clean_accuracy() {
    let tmp = workspace();
    dkl(&["train", "baseline", "--config", "run.toml", "--out", "b"], tmp.path());
    let out = dkl(&["eval", "--run", "b", "--epsilon", "0", "--out", "ev"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ev = read_toml(&tmp.path().join("ev/eval.toml"));
    assert_eq!(ev["robust_acc"].as_float(), ev["clean_acc"].as_float());

    let clean = dkl(&["eval", "--run", "b", "--no-attack", "--out", "clean"], tmp.path());
    assert_eq!(code(&clean), 0);
    assert!(!read_toml(&tmp.path().join("clean/eval.toml")).contains_key("robust_acc"));
}

#[test]
fn uniform_stats_have_zero_margins() {
    let tmp = workspace();
    dkl(&["train", "baseline", "--config", "run.toml", "--out", "b"], tmp.path());
    ClassStatsTable::init_uniform(4, 4.0, 0.9)
        .unwrap()
        .save(&tmp.path().join("uniform.txt"))
        .unwrap();
    let out = dkl(
        &["eval", "--run", "b", "--no-attack", "--margins", "--stats", "uniform.txt", "--out", "ev"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ev = read_toml(&tmp.path().join("ev/eval.toml"));
    let margins: Vec<f64> = ev["margins"].as_array().unwrap().iter().map(|v| v.as_float().unwrap()).collect();
    assert_eq!(margins, vec![0.0; 4]);
    assert_eq!(ev["mean_margin"].as_float(), Some(0.0));
}

#[test]
fn bench_runs_for_two_classes() {
    let tmp = workspace();
    let out = dkl(&["bench-wmse", "--classes", "2", "--batch", "4", "--out", "bench"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_toml(&tmp.path().join("bench/bench.toml"));
    assert_eq!(report["passed"].as_bool(), Some(true));
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
}

#[test]
fn output_directory_follows_the_environment() {
    let tmp = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dkl"))
        .args(["bench-wmse", "--classes", "2", "--batch", "2"])
        .current_dir(tmp.path())
        .env("DKL_OUT_DIR", tmp.path().join("elsewhere"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("elsewhere/bench-wmse/bench.toml").is_file());

    let out = dkl(&["bench-wmse", "--classes", "2", "--batch", "2"], tmp.path());
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("runs/bench-wmse/bench.toml").is_file());
}

#[test]
fn source_date_epoch_fixes_the_timestamp() {
    let tmp = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dkl"))
        .args(["bench-wmse", "--classes", "2", "--batch", "2", "--out", "b"])
        .current_dir(tmp.path())
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_toml(&tmp.path().join("b/manifest.toml"));
    assert_eq!(m["created"].as_str(), Some("1970-01-01T00:00:00Z"));
}

#[test]
fn shipped_configs_train() {
    let tmp = workspace();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = |name: &str| configs.join(name).display().to_string();
    let small = ["--train.epochs", "1", "--data.n_per_class", "20"];
    let run = |args: &[&str]| {
        let out = dkl(&[args, &small[..]].concat(), tmp.path());
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    };
    run(&["train", "adversarial", "--config", &cfg("trades.toml"), "--out", "trades"]);
    run(&["train", "adversarial", "--config", &cfg("ikl_at.toml"), "--out", "ikl"]);
    run(&["train", "baseline", "--config", &cfg("distill.toml"), "--train.loss", "ce_only", "--out", "teacher"]);
    run(&[
        "train", "distill", "--config", &cfg("distill.toml"), "--teacher-params", "teacher/params.bin", "--out",
        "student",
    ]);
}
