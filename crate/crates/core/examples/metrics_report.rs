//! Per-class metrics with percentile bootstrap intervals.

use histotype::metrics::{self, BootstrapParams, EvalRecord};

fn main() -> histotype::error::Result<()> {
    let pairs = [
        (0, 0), (0, 0), (0, 1), (1, 1), (1, 1), (1, 0), (2, 2), (2, 2),
        (2, 2), (3, 3), (3, 3), (3, 2), (0, 0), (1, 1), (2, 3), (3, 3),
    ];
    let records: Vec<EvalRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(truth, predicted))| {
            let mut probabilities = vec![0.1; 4];
            probabilities[predicted] = 0.7;
            EvalRecord {
                wsi_id: format!("slide_{i:02}"),
                truth,
                predicted,
                probabilities,
            }
        })
        .collect();
    let params = BootstrapParams {
        n_resamples: 500,
        seed: 42,
        ..BootstrapParams::default()
    };
    let report = metrics::evaluate(&records, &["LumA", "LumB", "HER2", "Basal"], &params)?;
    print!("{}", report.to_text());
    Ok(())
}
