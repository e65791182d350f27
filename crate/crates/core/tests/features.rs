use histotype::features::{self, Boundary, FeatureMatrix, FeatureMode};
use histotype::labels::{ClassifierId, Subtype};
use histotype::rng;
use histotype::scoring::{ScoreRecord, ScoreTable};
use histotype::threshold::ThresholdSet;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn records(scores: &[[f64; 4]]) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (s, v) in Subtype::ALL.iter().zip(row) {
            out.push(ScoreRecord {
                tile_id: format!("w_{}_0", i * 64),
                classifier: ClassifierId::Subtype(*s),
                target: *v,
                rest: 1.0 - *v,
            });
        }
    }
    out
}

fn table(recs: &[ScoreRecord]) -> ScoreTable {
    let mut t = ScoreTable::new();
    for r in recs {
        t.insert(r.clone()).unwrap();
    }
    t
}

fn thresholds(v: [f64; 4]) -> ThresholdSet {
    ThresholdSet::fixed([(Subtype::LumA, v[0]), (Subtype::LumB, v[1]), (Subtype::Her2, v[2]), (Subtype::Basal, v[3])]).unwrap()
}

fn score() -> impl Strategy<Value = f64> {
    prop_oneof![0u32..=20, Just(9u32)].prop_map(|k| k as f64 / 20.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn counts_match_tally_and_partition(
        scores in prop::collection::vec(prop::array::uniform4(score()), 0..60),
        thr in prop::array::uniform4(score()),
        strict in any::<bool>(),
    ) {
        let boundary = if strict { Boundary::Strict } else { Boundary::Inclusive };
        let v = features::aggregate_counts("w", &table(&records(&scores)), &thresholds(thr), boundary).unwrap();
        prop_assert_eq!(v.n_tiles, scores.len() as u64);
        for k in 0..4 {
            let above = scores.iter().filter(|s| if strict { s[k] > thr[k] } else { s[k] >= thr[k] }).count() as u64;
            prop_assert_eq!(v.counts[2 * k], above);
            prop_assert_eq!(v.counts[2 * k] + v.counts[2 * k + 1], v.n_tiles);
        }
        let f = v.values(FeatureMode::Fractions);
        if v.n_tiles > 0 {
            for k in 0..4 {
                prop_assert!((f[2 * k] + f[2 * k + 1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_a_threshold_never_adds_target_calls(
        scores in prop::collection::vec(prop::array::uniform4(score()), 1..60),
        thr in prop::array::uniform4(score()),
        k in 0usize..4,
        bump in 0.0f64..0.5,
    ) {
        let t = table(&records(&scores));
        let lo = features::aggregate_counts("w", &t, &thresholds(thr), Boundary::Inclusive).unwrap();
        let mut raised = thr;
        raised[k] = (thr[k] + bump).min(1.0);
        let hi = features::aggregate_counts("w", &t, &thresholds(raised), Boundary::Inclusive).unwrap();
        prop_assert!(hi.counts[2 * k] <= lo.counts[2 * k]);
    }

    #[test]
    fn insertion_order_is_irrelevant(
        scores in prop::collection::vec(prop::array::uniform4(score()), 1..40),
        seed in any::<u64>(),
    ) {
        let recs = records(&scores);
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rng::seeded(seed));
        let thr = thresholds([0.45, 0.45, 0.5, 0.5]);
        prop_assert_eq!(
            features::aggregate_counts("w", &table(&recs), &thr, Boundary::Inclusive).unwrap(),
            features::aggregate_counts("w", &table(&shuffled), &thr, Boundary::Inclusive).unwrap()
        );
    }
}

#[test]
fn tumor_records_do_not_count_and_missing_scores_fail() {
    let mut recs = records(&[[0.9, 0.1, 0.2, 0.3]]);
    recs.push(ScoreRecord {
        tile_id: "w_64_0".into(),
        classifier: ClassifierId::Tumor,
        target: 0.9,
        rest: 0.1,
    });
    let thr = thresholds([0.5; 4]);
    let v = features::aggregate_counts("w", &table(&recs), &thr, Boundary::Inclusive).unwrap();
    assert_eq!(v.n_tiles, 1);
    assert_eq!(v.counts, [1, 0, 0, 1, 0, 1, 0, 1]);

    let mut partial = records(&[[0.9, 0.1, 0.2, 0.3]]);
    partial.pop();
    assert!(features::aggregate_counts("w", &table(&partial), &thr, Boundary::Inclusive).is_err());
}

#[test]
fn feature_matrix_file_round_trip() {
    use std::collections::BTreeMap;
    let thr = thresholds([0.5; 4]);
    let mut tables = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (i, s) in Subtype::ALL.iter().enumerate() {
        let id = format!("slide{i}");
        tables.insert(id.clone(), table(&records(&[[0.9, 0.1, 0.6, 0.2], [0.3, 0.7, 0.5, 0.1]][..i % 2 + 1])));
        labels.insert(id, *s);
    }
    let fm = features::build_feature_matrix(&tables, &thr, Some(&labels), Boundary::Inclusive).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    fm.save(&path).unwrap();
    assert_eq!(FeatureMatrix::load(&path).unwrap(), fm);
}
