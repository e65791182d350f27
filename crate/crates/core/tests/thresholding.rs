use histotype::labels::{ClassifierId, Subtype};
use histotype::threshold::{self, Criterion};
use proptest::prelude::*;

const C: ClassifierId = ClassifierId::Subtype(Subtype::LumB);

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u32..40, any::<bool>()), 2..120)
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64 / 39.0, l)).unzip())
        .prop_filter("needs a positive", |(_, l): &(Vec<f64>, Vec<bool>)| l.iter().any(|x| *x))
}

fn f_beta_at(scores: &[f64], labels: &[bool], t: f64, beta: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= t, *l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let b2 = beta * beta;
    let d = (1.0 + b2) * tp + b2 * fn_ + fp;
    if d == 0.0 { 0.0 } else { (1.0 + b2) * tp / d }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn candidates_reach_the_global_maximum((scores, labels) in instance(), beta in prop::sample::select(vec![1.0, 0.5, 2.0])) {
        let criterion = if beta == 1.0 { Criterion::F1 } else { Criterion::FBeta(beta) };
        let choice = threshold::optimal_threshold(C, &scores, &labels, criterion).unwrap();
        let mut best = f_beta_at(&scores, &labels, f64::INFINITY, beta);
        for s in &scores {
            best = best.max(f_beta_at(&scores, &labels, *s, beta));
        }
        prop_assert!((choice.criterion_value - best).abs() < 1e-12);
        prop_assert!((f_beta_at(&scores, &labels, choice.threshold, beta) - best).abs() < 1e-12);
    }

    #[test]
    fn recall_never_rises_with_threshold((scores, labels) in instance()) {
        let curve = threshold::pr_curve(&scores, &labels).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold < w[1].threshold);
            prop_assert!(w[1].recall <= w[0].recall);
        }
        prop_assert_eq!(curve.points[0].recall, 1.0);
        prop_assert_eq!(curve.points.last().unwrap().recall, 0.0);
    }

    #[test]
    fn increasing_transform_keeps_positive_set((scores, labels) in instance()) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() / 30.0).collect();
        let a = threshold::optimal_threshold(C, &scores, &labels, Criterion::F1).unwrap();
        let b = threshold::optimal_threshold(C, &warped, &labels, Criterion::F1).unwrap();
        let pa: Vec<bool> = scores.iter().map(|s| *s >= a.threshold).collect();
        let pb: Vec<bool> = warped.iter().map(|s| *s >= b.threshold).collect();
        prop_assert_eq!(pa, pb);
        prop_assert!((a.criterion_value - b.criterion_value).abs() < 1e-12);
    }
}

#[test]
fn published_thresholds_ship_as_defaults() {
    let t = threshold::ThresholdSet::published();
    assert_eq!(t.values(), [0.434, 0.415, 0.481, 0.424]);
}
