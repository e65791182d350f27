use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use histotype::error::Error;
use histotype::labels::{ClassifierId, Subtype};
use histotype::rng;
use histotype::scoring::{self, ProcessScorer, ScorePolicy, ScoreTable, SyntheticScorer, TileRef, TileScorer, TileTruth};
use rand::seq::SliceRandom;

const BIN: &str = env!("CARGO_BIN_EXE_histotype");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn stub(workers: usize) -> ProcessScorer {
    ProcessScorer::new(vec![BIN.into(), "scorer-stub".into()], workers, ScorePolicy::default()).unwrap()
}

fn script(body: &str) -> ProcessScorer {
    script_with(body, ScorePolicy::default())
}

fn script_with(body: &str, policy: ScorePolicy) -> ProcessScorer {
    ProcessScorer::new(vec!["sh".into(), "-c".into(), body.into(), "scorer".into()], 1, policy).unwrap()
}

fn tiles_on_disk(dir: &Path, n: usize) -> Vec<TileRef> {
    (0..n)
        .map(|i| {
            let path = dir.join(format!("t{i}.png"));
            std::fs::write(&path, b"x").unwrap();
            TileRef {
                tile_id: format!("wsi_{}_{}", (i % 7) * 64, (i / 7) * 64),
                path,
            }
        })
        .collect()
}

fn refs(ids: &[&str]) -> Vec<TileRef> {
    ids.iter()
        .map(|t| TileRef {
            tile_id: t.to_string(),
            path: PathBuf::from(format!("/tiles/{t}.png")),
        })
        .collect()
}

#[test]
fn live_stub_matches_reference_scores() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = tiles_on_disk(dir.path(), 40);
    for c in [ClassifierId::Tumor, ClassifierId::Subtype(Subtype::Basal)] {
        let table = scoring::score_tiles(&stub(3), &tiles, c).unwrap();
        assert_eq!(table.len(), tiles.len());
        for t in &tiles {
            assert_eq!(table.get(&t.tile_id, c), Some(scoring::stub_score(c, &t.tile_id)));
        }
    }
}

#[test]
fn totality_across_classifiers() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = tiles_on_disk(dir.path(), 25);
    let mut all = ScoreTable::new();
    for c in ClassifierId::SUBTYPES {
        all.merge(scoring::score_tiles(&stub(2), &tiles, c).unwrap()).unwrap();
    }
    assert_eq!(all.len(), tiles.len() * 4);
    let ids: Vec<&str> = tiles.iter().map(|t| t.tile_id.as_str()).collect();
    assert!(all.is_complete(&ids, &ClassifierId::SUBTYPES));
}

#[test]
fn order_and_worker_count_do_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = tiles_on_disk(dir.path(), 30);
    let c = ClassifierId::Subtype(Subtype::LumA);
    let base = scoring::score_tiles(&stub(1), &tiles, c).unwrap();
    let mut r = rng::seeded(5);
    for workers in [1, 4, 7] {
        let mut shuffled = tiles.clone();
        shuffled.shuffle(&mut r);
        assert_eq!(scoring::score_tiles(&stub(workers), &shuffled, c).unwrap(), base);
    }
}

#[test]
fn stub_reproduces_frozen_transcript() {
    let requests = std::fs::read(fixture("golden_requests.jsonl")).unwrap();
    let mut child = Command::new(BIN)
        .args(["scorer-stub", "--classifier-id", "LumB"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&requests).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let golden = std::fs::read(fixture("stub_transcript_LumB.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), String::from_utf8(golden).unwrap());
}

#[test]
fn replayed_transcript_gives_recorded_table() {
    let f = fixture("replay_responses.txt");
    let body = format!("head -n 1 '{0}'; cat > /dev/null; tail -n +2 '{0}'", f.display());
    let tiles = refs(&["w7_0_0", "w7_448_0", "w7_0_448", "w7_448_448"]);
    let table = scoring::score_tiles(&script(&body), &tiles, ClassifierId::Subtype(Subtype::Her2)).unwrap();
    assert_eq!(table, scoring::load_scores(&fixture("replay_scores.csv")).unwrap());
}

fn run_err(body: &str, ids: &[&str]) -> Error {
    scoring::score_tiles(&script(body), &refs(ids), ClassifierId::Tumor).unwrap_err()
}

#[test]
fn out_of_range_score_names_tile() {
    let e = run_err(
        r#"echo READY; cat >/dev/null; echo '{"tile_id":"a","target":1.3,"rest":-0.3}'; echo DONE"#,
        &["a"],
    );
    assert!(matches!(&e, Error::ScoreRange { tile_id, .. } if tile_id == "a"), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn pair_sum_is_strict_by_default_and_can_be_relaxed() {
    let body = r#"echo READY; cat >/dev/null; echo '{"tile_id":"a","target":0.7,"rest":0.2}'; echo DONE"#;
    let e = run_err(body, &["a"]);
    assert!(matches!(e, Error::Protocol(_)), "{e}");
    let lax = ScorePolicy {
        strict_pair_sum: false,
        ..ScorePolicy::default()
    };
    let t = scoring::score_tiles(&script_with(body, lax), &refs(&["a"]), ClassifierId::Tumor).unwrap();
    assert_eq!(t.get("a", ClassifierId::Tumor).unwrap().target, 0.7);
    let near = r#"echo READY; cat >/dev/null; echo '{"tile_id":"a","target":0.70005,"rest":0.3}'; echo DONE"#;
    assert!(scoring::score_tiles(&script(near), &refs(&["a"]), ClassifierId::Tumor).is_ok());
}

#[test]
fn protocol_violations() {
    let cases = [
        ("echo HELLO", "missing READY"),
        ("echo READY; cat >/dev/null; echo 'not json'; echo DONE", "malformed"),
        (r#"echo READY; cat >/dev/null; echo '{"tile_id":"zz","target":0.5,"rest":0.5}'; echo DONE"#, "unknown id"),
        (
            r#"echo READY; cat >/dev/null; echo '{"tile_id":"a","target":0.5,"rest":0.5}'; echo '{"tile_id":"a","target":0.5,"rest":0.5}'; echo DONE"#,
            "duplicate",
        ),
        (r#"echo READY; cat >/dev/null; echo '{"tile_id":"a","target":0.5,"rest":0.5}'; echo DONE"#, "early DONE"),
    ];
    for (body, what) in cases {
        let e = run_err(body, &["a", "b"]);
        assert!(matches!(e, Error::Protocol(_)), "{what}: {e}");
        assert_eq!(e.exit_code(), 3, "{what}");
    }
}

#[test]
fn partial_failure_lists_unscored_tiles() {
    let body = r#"echo READY
while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed 's/.*"tile_id":"\([^"]*\)".*/\1/')
  case "$id" in
    b|d) printf '{"tile_id":"%s","error":"decode failed"}\n' "$id" ;;
    *) printf '{"tile_id":"%s","target":0.25,"rest":0.75}\n' "$id" ;;
  esac
done
echo DONE"#;
    match run_err(body, &["a", "b", "c", "d"]) {
        Error::Incomplete { unscored, .. } => assert_eq!(unscored, vec!["b", "d"]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn exit_before_completion_is_reported() {
    let body = r#"echo READY; read -r line; echo '{"tile_id":"a","target":0.5,"rest":0.5}'; exit 1"#;
    match run_err(body, &["a", "b", "c"]) {
        Error::Incomplete { unscored, .. } => assert_eq!(unscored, vec!["b", "c"]),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn missing_scorer_binary_is_runtime_error() {
    let s = ProcessScorer::new(vec!["/nonexistent/scorer".into()], 1, ScorePolicy::default()).unwrap();
    let e = scoring::score_tiles(&s, &refs(&["a"]), ClassifierId::Tumor).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn synthetic_true_class_score_grows_with_signal() {
    let ids: Vec<String> = (0..400).map(|i| format!("t{i}")).collect();
    let truth: HashMap<String, TileTruth> = ids
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (
                t.clone(),
                TileTruth {
                    tumor: i % 3 == 0,
                    subtype: Subtype::ALL[i % 4],
                },
            )
        })
        .collect();
    let tiles = refs(&ids.iter().map(String::as_str).collect::<Vec<_>>());
    for seed in 0..10 {
        let mut prev = f64::NEG_INFINITY;
        for s in [0.0, 0.5, 1.0] {
            let scorer = SyntheticScorer::new(truth.clone(), s, seed).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for c in ClassifierId::SUBTYPES {
                let table = scorer.score(c, &tiles).unwrap();
                for t in &ids {
                    if c.subtype() == Some(truth[t].subtype) {
                        sum += table.get(t, c).unwrap().target;
                        n += 1;
                    }
                }
            }
            let mean = sum / n as f64;
            assert!(mean >= prev, "seed {seed}: mean {mean} at s={s} below {prev}");
            prev = mean;
        }
        assert_eq!(prev, 1.0);
    }
}

#[test]
fn synthetic_zero_signal_is_uniform_noise() {
    let ids: Vec<String> = (0..4000).map(|i| format!("t{i}")).collect();
    let truth = ids
        .iter()
        .map(|t| (t.clone(), TileTruth { tumor: true, subtype: Subtype::LumA }))
        .collect();
    let scorer = SyntheticScorer::new(truth, 0.0, 9).unwrap();
    let tiles = refs(&ids.iter().map(String::as_str).collect::<Vec<_>>());
    let table = scorer.score(ClassifierId::Tumor, &tiles).unwrap();
    let mut bins = [0usize; 4];
    for r in table.iter() {
        bins[((r.target * 4.0) as usize).min(3)] += 1;
    }
    for b in bins {
        assert!((850..1150).contains(&b), "{bins:?}");
    }
}

#[test]
fn failing_scorer_that_stops_reading_does_not_hang() {
    let ids: Vec<String> = (0..20000).map(|i| format!("tile_with_a_long_identifier_{i:06}")).collect();
    let tiles = refs(&ids.iter().map(String::as_str).collect::<Vec<_>>());
    let body = r#"echo READY; echo '{"tile_id":"nope","target":0.5,"rest":0.5}'; sleep 30"#;
    let e = scoring::score_tiles(&script(body), &tiles, ClassifierId::Tumor).unwrap_err();
    assert!(matches!(e, Error::Protocol(_)), "{e}");
}
