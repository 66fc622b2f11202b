use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pairsem::matching::QueryMode;
use pairsem::pipeline::{
    write_synthetic_corpus, Pipeline, PipelineConfig, RunOptions, Stage, StageStatus, SweepParam, PAIRS_FINAL,
    REPORT_DIR,
};
use pairsem::synth::{Span, SynthSpec};
use pairsem::Error;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        n_docs: 40,
        n_entities: 12,
        n_aspects: 10,
        aspects_per_entity: 3.0,
        entities_per_doc: Span::new(3, 5),
        aspects_per_doc_entity: Span::new(1, 2),
        synonym_groups: 22,
        pairs_per_query: Span::new(3, 5),
        qrel_min_shared: 2,
        distractor_vocab: 100,
        ..SynthSpec::default()
    }
}

/// Writes a small corpus and loads its generated config with short training.
fn setup(dir: &Path, seed: u64) -> PipelineConfig {
    write_synthetic_corpus(&small_spec(seed), dir).unwrap();
    let mut cfg = PipelineConfig::load(&dir.join("pairsem.toml")).unwrap();
    cfg.train.entity.epochs = 20;
    cfg.train.aspect.epochs = 10;
    cfg.provider.dim = 64;
    cfg
}

fn pipeline(cfg: &PipelineConfig) -> Pipeline {
    Pipeline::new(cfg.clone(), RunOptions::default()).unwrap()
}

/// Every artifact file under the working directory except timing reports.
fn artifact_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel.starts_with(REPORT_DIR) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn full_pipeline_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 3);
    let p = pipeline(&cfg);
    let _lock = p.lock().unwrap();
    let (reports, evals) = p.run_all().unwrap();
    assert_eq!(reports.len(), Stage::ALL.len());
    assert!(reports.iter().all(|r| !r.up_to_date && r.warnings == 0));
    let names: Vec<&str> = evals.iter().map(|e| e.run.as_str()).collect();
    assert_eq!(names, ["base", "fast", "llm"]);
    for e in &evals {
        let v = e.report.means["ndcg@10"];
        assert!((0.0..=1.0).contains(&v), "{}: {v}", e.run);
    }
    let gen = reports.iter().find(|r| r.stage == "gen-pairs:zero-shot").unwrap();
    assert_eq!(gen.llm.calls, 40);
    assert!(gen.llm.prompt_tokens > 0);

    for s in Stage::ALL {
        assert_eq!(p.status(s).unwrap(), StageStatus::UpToDate, "{s}");
    }
    let (again, _) = p.run_all().unwrap();
    assert!(again.is_empty(), "nothing should re-run: {again:?}");
    let single = p.run_stage(Stage::SoftLabels).unwrap();
    assert!(single.up_to_date);

    let summary = p.report().unwrap();
    assert_eq!(summary.stages.len(), Stage::ALL.len());
    assert!(summary.prompt_tokens > 0);
    assert!(summary.evaluations.contains_key("fast"));
    assert!(summary.to_table().contains("gen-pairs:candidate"));
}

#[test]
fn missing_and_stale_dependencies_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4);
    let p = pipeline(&cfg);

    match p.run_stage(Stage::Query(QueryMode::Fast)) {
        Err(Error::MissingDependency { stage, .. }) => assert_eq!(stage, "build-vocab"),
        other => panic!("expected a missing dependency, got {other:?}"),
    }
    let err = p.run_stage(Stage::BuildVocab).unwrap_err();
    assert!(err.is_dependency());

    p.ensure(Stage::SoftLabels).unwrap();
    let mut changed = cfg.clone();
    changed.candidates.m = 7;
    let q = pipeline(&changed);
    assert_eq!(q.status(Stage::GenCandidates).unwrap(), StageStatus::Stale);
    assert_eq!(q.status(Stage::BuildVocab).unwrap(), StageStatus::UpToDate);
    match q.run_stage(Stage::GenPairsCandidate) {
        Err(Error::StaleDependency { stage }) => assert_eq!(stage, "gen-candidates"),
        other => panic!("expected a stale dependency, got {other:?}"),
    }
    let forced = Pipeline::new(
        changed.clone(),
        RunOptions {
            force: true,
            strict: false,
        },
    )
    .unwrap();
    assert!(!forced.run_stage(Stage::GenPairsCandidate).unwrap().up_to_date);

    // Rewriting an artifact by hand makes its producer stale.
    fs::write(p.workspace().path(PAIRS_FINAL), "").unwrap();
    assert_eq!(p.status(Stage::GenPairsCandidate).unwrap(), StageStatus::Stale);
}

#[test]
fn second_run_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = setup(d.path(), 5);
        pipeline(&cfg).run_all().unwrap();
    }
    let (wa, wb) = (artifact_bytes(&a.path().join("work")), artifact_bytes(&b.path().join("work")));
    assert!(wa.len() > 15);
    assert_eq!(wa.keys().collect::<Vec<_>>(), wb.keys().collect::<Vec<_>>());
    for (k, v) in &wa {
        assert!(v == &wb[k], "{k} differs between runs");
    }
}

#[test]
fn sweeps_rerun_only_dependent_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 6);
    let p = pipeline(&cfg);

    assert!(matches!(p.sweep(SweepParam::NE, &[1, 5], QueryMode::Fast), Err(Error::MissingDependency { .. })));
    p.run_all().unwrap();
    assert!(p.sweep(SweepParam::NE, &[], QueryMode::Fast).is_err());
    assert!("gamma".parse::<SweepParam>().is_err());

    let ne = p.sweep(SweepParam::NE, &[1, 5, 10], QueryMode::Fast).unwrap();
    assert_eq!(ne.rows.len(), 3);
    for row in &ne.rows {
        // The configured value is already up to date in the forked copy.
        let expected: &[&str] = if row.value == cfg.inference.n_e { &[] } else { &["query:fast"] };
        assert_eq!(row.stages_run, expected, "n_e={}", row.value);
        assert!(row.metrics.contains_key("ndcg@10"));
    }
    assert_eq!(ne.to_tsv().lines().count(), 5);
    assert!(p.workspace().path("reports/sweep-n_e.tsv").is_file());

    let m = p.sweep(SweepParam::M, &[5], QueryMode::Fast).unwrap();
    let ran = &m.rows[0].stages_run;
    assert!(ran.contains(&"gen-candidates".to_string()));
    assert!(ran.contains(&"gen-pairs:candidate".to_string()));
    assert!(!ran.iter().any(|s| s == "gen-pairs:zero-shot" || s == "build-vocab"), "{ran:?}");
    // The main workspace is untouched by the sweep.
    assert_eq!(p.status(Stage::GenCandidates).unwrap(), StageStatus::UpToDate);
}
