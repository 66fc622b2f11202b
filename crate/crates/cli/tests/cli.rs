use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = r#"{
  "seed": 11, "n_docs": 30, "n_entities": 10, "n_aspects": 8, "aspects_per_entity": 3.0,
  "entities_per_doc": {"min": 3, "max": 4}, "aspects_per_doc_entity": {"min": 1, "max": 2},
  "synonym_groups": 18, "pairs_per_query": {"min": 3, "max": 4}, "qrel_min_shared": 2,
  "distractor_vocab": 80
}"#;

const CONFIG: &str = r#"
[provider]
synonyms = "synonyms.json"
dim = 64

[train.entity]
learning_rate = 0.01
epochs = 15

[train.aspect]
learning_rate = 0.01
epochs = 5
"#;

fn pairsem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairsem"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A corpus plus a config with short training.
fn corpus() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    fs::write(dir.path().join("pairsem.toml"), CONFIG).unwrap();
    let o = pairsem(dir.path(), &["synth", "--spec", "spec.json", "--out", "."]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("30 documents"));
    assert!(!stdout(&o).contains("wrote"), "an existing config must not be overwritten");
    dir
}

#[test]
fn stage_by_stage_then_up_to_date() {
    let dir = corpus();
    let d = dir.path();
    for args in [
        &["gen-pairs", "--mode", "zero-shot"][..],
        &["build-vocab"],
        &["gen-candidates", "--M", "50", "--knn", "10"],
        &["gen-pairs", "--mode", "candidate"],
        &["soft-labels"],
        &["train", "--target", "entity"],
        &["train", "--target", "aspect"],
        &["eval-predictors"],
        &["query", "--mode", "base"],
        &["query", "--mode", "fast", "--k", "20", "--pool", "1000"],
    ] {
        let o = pairsem(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).contains("done in"), "{args:?}: {}", stdout(&o));
    }
    assert!(d.join("work/labels.jsonl").is_file());
    assert!(d.join("work/vocab.json").is_file());

    let again = pairsem(d, &["soft-labels"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(stdout(&again).trim(), "soft-labels: up to date");
    let forced = pairsem(d, &["soft-labels", "--force"]);
    assert!(stdout(&forced).contains("done in"));

    let run = pairsem(d, &["query", "--mode", "fast", "--k", "20", "--format", "tsv"]);
    let lines: Vec<String> = stdout(&run).lines().map(String::from).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l.split_whitespace().count() == 4), "{lines:?}");
    let json = pairsem(d, &["query", "--mode", "fast", "--k", "20", "--format", "json"]);
    assert!(stdout(&json).contains("\"sim_pair\""));

    let eval = pairsem(d, &["eval", "--metrics", "ndcg@10,recall@20"]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    let text = stdout(&eval);
    assert!(text.contains("base: ndcg@10=") && text.contains("fast: ndcg@10="), "{text}");

    let report = pairsem(d, &["report"]);
    assert!(stdout(&report).contains("train:entity"));
    assert!(stdout(&report).contains("total"));
}

#[test]
fn dependency_errors_exit_two() {
    let dir = corpus();
    let d = dir.path();
    let o = pairsem(d, &["query", "--mode", "fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing dependency"), "{}", stderr(&o));

    let o = pairsem(d, &["all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&pairsem(d, &["all"])).contains("all stages up to date"));

    // Re-running candidates with another M leaves the downstream stamps
    // describing the old candidates.
    assert_eq!(pairsem(d, &["gen-candidates", "--M", "3"]).status.code(), Some(0));
    let o = pairsem(d, &["train", "--target", "entity"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stale dependency"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = corpus();
    let d = dir.path();
    assert_eq!(pairsem(d, &["--config", "nope.toml", "soft-labels"]).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[candidates]\nm = 0\n").unwrap();
    assert_eq!(pairsem(d, &["--config", "bad.toml", "build-vocab"]).status.code(), Some(1));

    let o = pairsem(d, &["sweep", "--param", "gamma", "--values", "1,2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown hyperparameter"));

    fs::create_dir_all(d.join("work")).unwrap();
    fs::write(d.join("work/.pairsem.lock"), "1").unwrap();
    let o = pairsem(d, &["gen-pairs", "--mode", "zero-shot"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
    fs::remove_file(d.join("work/.pairsem.lock")).unwrap();

    assert_eq!(pairsem(d, &["gen-pairs", "--mode", "zero-shot"]).status.code(), Some(0));
}

#[test]
fn sweep_prints_a_table() {
    let dir = corpus();
    let d = dir.path();
    let o = pairsem(d, &["sweep", "--param", "n_e", "--values", "1,5"]);
    assert_eq!(o.status.code(), Some(2), "sweeps need the trained pipeline");
    assert_eq!(pairsem(d, &["all"]).status.code(), Some(0));

    let empty = pairsem(d, &["sweep", "--param", "n_e", "--values"]);
    assert_eq!(empty.status.code(), Some(1));

    let o = pairsem(d, &["sweep", "--param", "n_a", "--values", "1,3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(rows.len(), 4, "{rows:?}");
    assert!(rows[0].starts_with("n_a\t"));
    assert!(rows[1].starts_with("base\t"));
}

#[test]
fn provider_failures_are_warnings_unless_strict() {
    let dir = corpus();
    let d = dir.path();
    fs::create_dir_all(d.join("fixtures")).unwrap();
    let cfg = format!("{CONFIG}\n").replace("[provider]\n", "[provider]\nllm = \"replay\"\nreplay_dir = \"fixtures\"\n");
    fs::write(d.join("replay.toml"), cfg).unwrap();

    let o = pairsem(d, &["--config", "replay.toml", "gen-pairs", "--mode", "zero-shot"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("warnings: 30"), "{}", stdout(&o));

    let o = pairsem(d, &["--config", "replay.toml", "--strict", "--force", "gen-pairs", "--mode", "zero-shot"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--strict"));
}

#[test]
fn standalone_eval_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("qrels.tsv"), "q1\td1\t1\nq1\td2\t1\n").unwrap();
    fs::write(d.join("run.tsv"), "q1 d9 1 0.9\nq1 d1 2 0.8\nq1 d2 3 0.7\n").unwrap();
    let o = pairsem(d, &["eval", "--qrels", "qrels.tsv", "--run", "run.tsv", "--metrics", "recall@2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("recall@2=0.5000"), "{}", stdout(&o));
}
