//! Generates a synthetic cohort and runs every stage on it.

use histotype::config::PipelineConfig;
use histotype::pipeline::{self, Pipeline};
use histotype::synthetic::CohortSpec;

fn main() -> histotype::error::Result<()> {
    let signal: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let dir = std::env::temp_dir().join(format!("histotype_e2e_{signal}"));
    let spec = CohortSpec {
        wsis_per_class: 20,
        ..CohortSpec::default()
    };
    let config = pipeline::generate_synthetic(&spec, signal, &dir)?;
    let p = Pipeline::new(PipelineConfig::load(Some(&config), &[])?);
    for (stage, outcome) in p.run_all()? {
        println!("{stage:12} {outcome:?}");
    }
    let report = std::fs::read_to_string(p.layout.report.join("report.txt")).expect("report written");
    print!("{report}");
    Ok(())
}
