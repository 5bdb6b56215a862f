use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn misdiag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_misdiag"))
        .args(args)
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = misdiag(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path) {
    let args = "generate --points 80 --labels 40 --seed 5 --noise 0.3 --out c.jsonl --catalog-out cat.json";
    ok(dir, &args.split_whitespace().collect::<Vec<_>>());
}

#[test]
fn generate_split_index_run_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    assert_eq!(fs::read_to_string(dir.join("c.jsonl")).unwrap().lines().count(), 80);

    let out = ok(dir, &["split", "--corpus", "c.jsonl", "--catalog", "cat.json", "--seed", "3", "--out", "split.json"]);
    assert!(out.contains("train:") && out.contains("test:"));

    ok(dir, &["index", "--catalog", "cat.json", "--out", "index.json"]);
    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["vectors"].as_array().unwrap().len(), 40);

    fs::write(
        dir.join("run.json"),
        r#"{"name": "oracle full", "method": "full_pipeline", "use_generation": true, "use_rerank": true,
            "gen_backend": "oracle", "rerank_backend": "oracle", "k": 5}"#,
    )
    .unwrap();
    let args = ["run", "--config", "run.json", "--corpus", "c.jsonl", "--catalog", "cat.json", "--split", "split.json"];
    ok(dir, &[&args[..], &["--out", "a.json"]].concat());
    let artifact: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("a.json")).unwrap()).unwrap();
    assert_eq!(artifact["summary"]["map_at_k"]["1"], 1.0);
    assert_eq!(artifact["config"]["k"], 5);

    fs::write(dir.join("direct.json"), r#"{"name": "direct", "method": "embed_only_dialogue"}"#).unwrap();
    let args =
        ["run", "--config", "direct.json", "--corpus", "c.jsonl", "--catalog", "cat.json", "--split", "split.json"];
    ok(dir, &[&args[..], &["--out", "b.json"]].concat());

    let table = ok(dir, &["report", "a.json", "b.json", "--out", "rep"]);
    assert!(table.contains("oracle full") && table.contains("direct"));
    let csv = fs::read_to_string(dir.join("rep/report.csv")).unwrap();
    assert!(csv.starts_with("run,method,generation,rerank,metric,value\n"));
    assert!(csv.contains("direct,embed_only_dialogue,off,off,mean_rank,"));
}

#[test]
fn ablation_matrix_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    let args = ["matrix", "--ablation", "oracle", "--corpus", "c.jsonl", "--seed", "1", "--cache-dir", "cache"];
    ok(dir, &[&args[..], &["--out", "one"]].concat());
    ok(dir, &[&args[..], &["--out", "two"]].concat());
    for file in ["report.csv", "report.json"] {
        assert_eq!(fs::read(dir.join("one").join(file)).unwrap(), fs::read(dir.join("two").join(file)).unwrap());
    }
    let csv = fs::read_to_string(dir.join("one/report.csv")).unwrap();
    let runs: std::collections::BTreeSet<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(runs.len(), 7);
    assert_eq!(fs::read_dir(dir.join("one/runs")).unwrap().count(), 7);
}

#[test]
fn config_list_with_scripted_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);
    fs::write(
        dir.join("backends.json"),
        r#"{"fixed": {"kind": "scripted", "rules": [], "default": "Multiplies the tens digit"}}"#,
    )
    .unwrap();
    fs::write(
        dir.join("configs.json"),
        r#"[{"name": "fixed G+", "method": "full_pipeline", "use_generation": true, "gen_backend": "fixed"},
            {"name": "tfidf", "method": "tfidf_baseline", "tfidf_fit": "labels_and_train_dialogues"}]"#,
    )
    .unwrap();
    let args = "matrix --configs configs.json --backends backends.json --corpus c.jsonl --seed 2 --out rep";
    let out = ok(dir, &args.split_whitespace().collect::<Vec<_>>());
    assert!(out.contains("fixed G+") && out.contains("tfidf"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn abort_class_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    generate(dir);

    fs::write(dir.join("bad.json"), r#"{"name": "x", "method": "full_pipeline", "use_rerank": true}"#).unwrap();
    let out = misdiag(dir, &["run", "--config", "bad.json", "--corpus", "c.jsonl", "--seed", "1", "--out", "a.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rerank_backend"));
    assert!(!dir.join("a.json").exists());

    fs::write(
        dir.join("unknown.json"),
        r#"{"name": "x", "method": "zero_shot_classification", "gen_backend": "nope"}"#,
    )
    .unwrap();
    let out =
        misdiag(dir, &["run", "--config", "unknown.json", "--corpus", "c.jsonl", "--seed", "1", "--out", "a.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    fs::write(
        dir.join("dupes.json"),
        r#"[{"name": "d", "method": "tfidf_baseline"}, {"name": "d", "method": "tfidf_baseline"}]"#,
    )
    .unwrap();
    let out =
        misdiag(dir, &["matrix", "--configs", "dupes.json", "--corpus", "c.jsonl", "--seed", "1", "--out", "rep"]);
    assert!(!out.status.success());

    fs::write(dir.join("broken.jsonl"), "{not json}\n").unwrap();
    let out = misdiag(dir, &["split", "--corpus", "broken.jsonl", "--seed", "1", "--out", "s.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
