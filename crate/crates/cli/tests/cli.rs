use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bicap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bicap"))
        .args(args)
        .current_dir(dir)
        .env_remove("BICAP_OUT")
        .env_remove("BICAP_CORPUS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bicap(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SMALL_MODEL: [&str; 8] = ["--layers", "1", "--embed-dim", "16", "--heads", "2", "--ff-dim", "32"];

/// Corpus, checkpoint, probe, prompted captions and an eval, all under `dir`
/// with relative paths.
fn full_run(dir: &Path) {
    ok(dir, &["gen-data", "--out", "corpus", "--n", "40", "--seed", "3", "--split", "0.6,0.2,0.2"]);
    let mut pretrain = vec!["pretrain", "--corpus", "corpus", "--out", "run", "--steps", "4", "--batch-size", "4", "--eval-interval", "2"];
    pretrain.extend(SMALL_MODEL);
    ok(dir, &pretrain);
    ok(dir, &["probe", "--checkpoint", "run/checkpoint.bin", "--corpus", "corpus", "--out", "probe", "--epochs", "3"]);
    ok(
        dir,
        &[
            "caption", "--checkpoint", "run/checkpoint.bin", "--corpus", "corpus", "--out", "captions", "--mode", "iterative", "--auto-prompts", "probe/probe.json",
            "--max-len", "12",
        ],
    );
    ok(dir, &["eval", "--reports", "captions/reports.jsonl", "--corpus", "corpus", "--out", "eval"]);
}

const OUTPUTS: [&str; 12] = [
    "corpus/manifest.jsonl",
    "corpus/vocab.txt",
    "corpus/stats.json",
    "run/checkpoint.bin",
    "run/history.csv",
    "run/summary.json",
    "probe/probe.json",
    "captions/reports.jsonl",
    "captions/metrics.json",
    "captions/efficacy.csv",
    "eval/metrics.json",
    "eval/efficacy.csv",
];

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for name in OUTPUTS {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }

    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("eval/metrics.json")).unwrap()).unwrap();
    for key in ["bleu2", "macro_f1", "per_class", "hallucination_rate"] {
        assert!(metrics["metrics"].get(key).is_some(), "missing {key}");
    }
    let stats: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("corpus/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["metadata"]["config"]["synth"]["n"], 40);
    let reports = std::fs::read_to_string(a.path().join("captions/reports.jsonl")).unwrap();
    assert!(reports.starts_with("{\"metadata\":"));
    let manifest = std::fs::read_to_string(a.path().join("corpus/manifest.jsonl")).unwrap();
    let test_records = manifest.lines().filter(|l| l.contains(r#""split":"test""#)).count();
    assert!(test_records > 0);
    assert_eq!(reports.lines().count(), 1 + test_records);
    let history = std::fs::read_to_string(a.path().join("run/history.csv")).unwrap();
    assert!(history.starts_with("# {"));
    assert_eq!(history.lines().nth(1), Some("step,train_loss,val_loss,lr"));
}

#[test]
fn flags_override_config_files_which_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.json"), r#"{"synth": {"n": 12, "side": 16}}"#).unwrap();
    ok(d, &["gen-data", "--out", "from_config", "--config", "gen.json"]);
    ok(d, &["gen-data", "--out", "from_flag", "--config", "gen.json", "--n", "9"]);
    let lines = |p: &str| std::fs::read_to_string(d.join(p).join("manifest.jsonl")).unwrap().lines().count();
    assert_eq!(lines("from_config"), 12);
    assert_eq!(lines("from_flag"), 9);
    let img = std::fs::read(d.join("from_flag/images/000000.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n16 16\n"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bicap"))
        .args(["gen-data", "--n", "5", "--side", "16"])
        .current_dir(dir.path())
        .env("BICAP_OUT", "via_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("via_env/manifest.jsonl").exists());
}

fn exit_code(dir: &Path, args: &[&str]) -> i32 {
    bicap(dir, args).status.code().expect("exit code")
}

#[test]
fn configuration_errors_exit_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.json"), r#"{"synth": {"nn": 12}}"#).unwrap();
    assert_eq!(exit_code(d, &["gen-data", "--out", "bad1", "--config", "typo.json"]), 2);
    assert_eq!(exit_code(d, &["gen-data", "--out", "bad2", "--split", "0.5,0.2"]), 2);
    assert_eq!(exit_code(d, &["gen-data", "--out", "bad3", "--split", "0.9,0.2,0.1"]), 2);
    assert_eq!(exit_code(d, &["gen-data", "--out", "bad4", "--n", "0"]), 2);
    assert_eq!(exit_code(d, &["gen-data", "--out", "bad5", "--config", "missing.json"]), 2);
    ok(d, &["gen-data", "--out", "corpus", "--n", "8", "--side", "16"]);
    assert_eq!(exit_code(d, &["pretrain", "--corpus", "corpus", "--out", "bad6", "--steps", "0"]), 2);
    assert_eq!(exit_code(d, &["pretrain", "--corpus", "corpus", "--out", "bad7", "--heads", "3"]), 2);
    for name in ["bad1", "bad2", "bad3", "bad4", "bad5", "bad6", "bad7"] {
        assert!(!d.join(name).exists(), "{name} was created");
    }
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bicap(d, &["probe", "--checkpoint", "nowhere.bin", "--corpus", "nowhere", "--out", "p"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.bin"));
    std::fs::write(d.join("junk.bin"), b"not a checkpoint").unwrap();
    assert_eq!(exit_code(d, &["caption", "--checkpoint", "junk.bin", "--image", "x.pgm", "--out", "c"]), 3);
    assert!(!d.join("c").exists());
}

fn tiny_checkpoint(d: &Path) -> PathBuf {
    ok(d, &["gen-data", "--out", "corpus", "--n", "12", "--seed", "1", "--split", "0.5,0.25,0.25"]);
    let mut args = vec!["pretrain", "--corpus", "corpus", "--out", "run", "--steps", "2", "--batch-size", "2", "--eval-interval", "1"];
    args.extend(SMALL_MODEL);
    ok(d, &args);
    d.join("run/checkpoint.bin")
}

#[test]
fn single_image_caption_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_checkpoint(d);
    let out = ok(
        d,
        &["caption", "--checkpoint", "run/checkpoint.bin", "--image", "corpus/images/000000.pgm", "--out", "one", "--mode", "prompted", "--prompts", "no edema,heart", "--max-len", "6"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("no edema"), "{text}");
    assert!(d.join("one/reports.jsonl").exists());
    assert!(!d.join("one/metrics.json").exists());
    assert_eq!(exit_code(d, &["caption", "--checkpoint", "run/checkpoint.bin", "--image", "x.pgm", "--out", "two", "--mode", "prompted"]), 2);
}

#[test]
fn repl_answers_each_line() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_checkpoint(d);
    let mut child = Command::new(env!("CARGO_BIN_EXE_bicap"))
        .args(["repl", "--checkpoint", "run/checkpoint.bin", "--image", "corpus/images/000001.pgm", "--max-len", "5"])
        .current_dir(d)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"no edema\n/seed 4\n/iterative heart\n/bogus\n\n/unprompted\n/quit\nnever read\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // usage banner plus one reply per line before /quit
    assert_eq!(lines.len(), 7, "{text}");
    assert!(lines[1].starts_with("no edema"));
    assert_eq!(lines[2], "seed set to 4");
    assert!(lines[3].contains("heart"));
    assert!(lines[4].starts_with("unknown command"));
}
