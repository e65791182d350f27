//! Multiclass boosted trees on slide-level count features.

use histotype::gbdt::{self, TrainConfig};
use histotype::rng;
use rand::Rng;

fn main() -> histotype::error::Result<()> {
    let mut r = rng::seeded(3);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..200 {
        let class = i % 4;
        let mut row: Vec<f64> = (0..8).map(|_| r.random_range(0.0..5.0)).collect();
        row[2 * class] += 20.0;
        x.push(row);
        y.push(class);
    }
    let cfg = TrainConfig {
        n_rounds: 30,
        ..TrainConfig::default()
    };
    let model = gbdt::train(&x, &y, 4, &cfg)?;
    for n in [0, 1, 5, 10, 30] {
        println!("rounds {n:2}: cross-entropy {:.4}", model.prefix(n).cross_entropy(&x, &y)?);
    }
    let correct = x.iter().zip(&y).filter(|(row, c)| model.predict(row).ok() == Some(**c)).count();
    println!("training accuracy: {correct}/{}", x.len());
    println!("probabilities for first row: {:?}", model.predict_proba(&x[0])?);
    Ok(())
}
