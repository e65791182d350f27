use std::path::Path;
use std::process::{Command, Output};

use histotype::config::PipelineConfig;
use histotype::pipeline::{self, Pipeline, StageOutcome, STAGES};
use histotype::synthetic::CohortSpec;

const BIN: &str = env!("CARGO_BIN_EXE_histotype");

fn histotype(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn cohort(dir: &Path, per_class: usize) {
    let spec = CohortSpec {
        wsis_per_class: per_class,
        ..CohortSpec::default()
    };
    pipeline::generate_synthetic(&spec, 1.0, dir).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_then_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 8);
    let first = histotype(&["run-all", "--config", "pipeline.toml"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(first.stdout.is_empty());
    assert!(dir.path().join("work/report/report.csv").exists());
    assert!(dir.path().join("work/report/report.txt").exists());
    let hashes = |stage: &str| {
        let text = std::fs::read_to_string(dir.path().join(format!("work/provenance/{stage}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["outputs"].clone()
    };
    let before: Vec<_> = STAGES.iter().map(|s| hashes(s)).collect();
    let second = histotype(&["run-all", "--config", "pipeline.toml"], dir.path());
    assert_eq!(second.status.code(), Some(0));
    let log = stderr(&second);
    for s in STAGES {
        assert!(log.contains(&format!("stage `{s}`: skipped (up to date)")), "{s} not skipped:\n{log}");
    }
    let after: Vec<_> = STAGES.iter().map(|s| hashes(s)).collect();
    assert_eq!(before, after);
}

#[test]
fn deleting_outputs_reruns_only_affected_stages() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 8);
    let cfg = PipelineConfig::load(Some(&dir.path().join("pipeline.toml")), &[]).unwrap();
    let p = Pipeline::new(cfg);
    p.run_all().unwrap();
    let model = std::fs::read(p.layout.model_file()).unwrap();
    std::fs::remove_dir_all(&p.layout.features).unwrap();
    let outcomes = p.run_all().unwrap();
    for (stage, outcome) in outcomes {
        let expected = if stage == "features" { StageOutcome::Ran } else { StageOutcome::Skipped };
        assert_eq!(outcome, expected, "{stage}");
    }
    assert_eq!(std::fs::read(p.layout.model_file()).unwrap(), model);

    // a changed config section reruns its stage and everything whose inputs change
    let cfg = PipelineConfig::load(Some(&dir.path().join("pipeline.toml")), &["gbdt.n_rounds=7".into()]).unwrap();
    let p = Pipeline::new(cfg);
    let ran: Vec<&str> = p
        .run_all()
        .unwrap()
        .into_iter()
        .filter(|(_, o)| *o == StageOutcome::Ran)
        .map(|(s, _)| s)
        .collect();
    assert_eq!(&ran[..2], ["train", "predict"]);
    assert!(!ran.contains(&"features"));
}

#[test]
fn invalid_config_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 2);
    let o = histotype(&["tile", "--config", "pipeline.toml", "--override", "tiling.overlap=600", "--override", "tiling.tile_size=512"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!dir.path().join("work").exists());
    for bad in ["nosuch.key=1", "gbdt.n_rounds", "split.cnn=0.9", "thresholds.criterion=auc"] {
        let o = histotype(&["tile", "--config", "pipeline.toml", "--override", bad], dir.path());
        assert_eq!(o.status.code(), Some(1), "{bad}: {}", stderr(&o));
    }
    let o = histotype(&["tile", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = histotype(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 2);
    let o = histotype(&["train", "--config", "pipeline.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage `train`"));
}

#[test]
fn scorer_protocol_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    cohort(dir.path(), 2);
    assert_eq!(histotype(&["tile", "--config", "pipeline.toml"], dir.path()).status.code(), Some(0));
    let o = histotype(
        &["score-tumor", "--config", "pipeline.toml", "--scorer-cmd", "sh -c 'echo READY; cat >/dev/null; echo DONE'"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let stub = format!("{BIN} scorer-stub");
    let o = histotype(&["score-tumor", "--config", "pipeline.toml", "--scorer-cmd", &stub], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn synthetic_cohort_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = histotype(&["generate-synthetic", "--out", ".", "--wsis-per-class", "5", "--seed", "7"], d.path());
        assert_eq!(o.status.code(), Some(0));
    }
    let m = histotype::manifest::load_manifest(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(m.records.len(), 20);
    for f in ["manifest.csv", "ground_truth.csv", "pipeline.toml"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    for r in &m.records {
        let rel = &r.image_path;
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = histotype(&["default-config"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    std::fs::write(dir.path().join("c.toml"), &o.stdout).unwrap();
    let cfg = PipelineConfig::load(Some(&dir.path().join("c.toml")), &[]).unwrap();
    assert_eq!(cfg.section_hash(&["tiling", "gbdt"]), PipelineConfig::default().section_hash(&["tiling", "gbdt"]));
    assert_eq!(cfg.tiling.tile_size, 512);
    assert_eq!(cfg.tiling.overlap_her2, 64);
}
