use histotype::gbdt::{self, GbdtModel, TrainConfig, TreeNode};
use histotype::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn dataset(seed: u64, n: usize, d: usize, integer: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if integer { r.random_range(0..6) as f64 } else { r.random::<f64>() })
                .collect()
        })
        .collect();
    let y = (0..n).map(|i| (i + r.random_range(0..2)) % 4).collect();
    (x, y)
}

fn cfg(rounds: usize, depth: usize) -> TrainConfig {
    TrainConfig {
        n_rounds: rounds,
        max_depth: depth,
        min_child_weight: 0.0,
        ..TrainConfig::default()
    }
}

fn remap(model: &GbdtModel, perm: &[usize]) -> GbdtModel {
    let mut m = model.clone();
    for round in &mut m.rounds {
        for tree in round {
            for node in &mut tree.nodes {
                if let TreeNode::Split { feature, .. } = node {
                    *feature = perm[*feature];
                }
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probabilities_lie_on_the_simplex(seed in any::<u64>(), rounds in 0usize..12) {
        let (x, y) = dataset(seed, 60, 8, true);
        let m = gbdt::train(&x, &y, 4, &cfg(rounds, 3)).unwrap();
        for row in &x {
            let p = m.predict_proba(row).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn feature_permutation_equivariance(seed in any::<u64>()) {
        let (x, y) = dataset(seed, 80, 8, false);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng::seeded(seed ^ 1));
        // column j of the permuted data is column inv[j] of the original
        let mut permuted = vec![vec![0.0; 8]; x.len()];
        for (i, row) in x.iter().enumerate() {
            for (j, p) in perm.iter().enumerate() {
                permuted[i][*p] = row[j];
            }
        }
        let m = gbdt::train(&x, &y, 4, &cfg(6, 3)).unwrap();
        let remapped = remap(&m, &perm);
        for (a, b) in x.iter().zip(&permuted) {
            prop_assert_eq!(m.predict_proba(a).unwrap(), remapped.predict_proba(b).unwrap());
        }
    }

    #[test]
    fn identical_inputs_give_identical_model_bytes(seed in any::<u64>()) {
        let (x, y) = dataset(seed, 50, 8, true);
        let a = gbdt::train(&x, &y, 4, &cfg(5, 3)).unwrap().to_text();
        let b = gbdt::train(&x, &y, 4, &cfg(5, 3)).unwrap().to_text();
        prop_assert_eq!(&a, &b);
        let back = GbdtModel::from_text(&a).unwrap();
        prop_assert_eq!(back.to_text(), a);
    }
}

#[test]
fn zero_rounds_predicts_uniform() {
    let (x, y) = dataset(1, 20, 8, true);
    let m = gbdt::train(&x, &y, 4, &cfg(0, 3)).unwrap();
    assert_eq!(m.predict_proba(&x[0]).unwrap(), vec![0.25; 4]);
}

#[test]
fn saved_model_predicts_identically() {
    let (x, y) = dataset(2, 60, 8, true);
    let m = gbdt::train(&x, &y, 4, &cfg(8, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    m.save(&path).unwrap();
    let back = GbdtModel::load(&path).unwrap();
    for row in &x {
        assert_eq!(m.predict_proba(row).unwrap(), back.predict_proba(row).unwrap());
    }
}

#[test]
fn corrupt_model_reports_line() {
    let (x, y) = dataset(3, 30, 8, true);
    let text = gbdt::train(&x, &y, 4, &cfg(2, 2)).unwrap().to_text();
    let broken: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 14 { "garbage\n".to_string() } else { format!("{l}\n") })
        .collect();
    let (line, _) = GbdtModel::from_text(&broken).unwrap_err();
    assert_eq!(line, 15);
}
