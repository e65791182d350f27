//! Precision-recall curve and F1-optimal threshold for one classifier.

use histotype::labels::{ClassifierId, Subtype};
use histotype::threshold::{self, Criterion};

fn main() -> histotype::error::Result<()> {
    let scores = [0.92, 0.81, 0.77, 0.64, 0.52, 0.48, 0.40, 0.33, 0.21, 0.05];
    let labels = [true, true, false, true, true, false, false, true, false, false];

    let curve = threshold::pr_curve(&scores, &labels)?;
    println!("threshold  precision  recall");
    for p in &curve.points {
        println!("{:9.4}  {:9.3}  {:6.3}", p.threshold, p.precision, p.recall);
    }
    for criterion in [Criterion::F1, Criterion::FBeta(2.0)] {
        let c = threshold::optimal_threshold(ClassifierId::Subtype(Subtype::LumA), &scores, &labels, criterion)?;
        println!("{}: threshold {:.4}, value {:.4}", c.criterion, c.threshold, c.criterion_value);
    }
    println!("average precision: {:.4}", threshold::average_precision(&scores, &labels)?);
    Ok(())
}
