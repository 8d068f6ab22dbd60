//! Runs a few replicates of the sparse crossed scenario and prints the
//! averaged errors.
//!
//! cargo run --release --example sparse_study -- 10

use flmm::sim::{run_study, ScenarioConfig, StudyOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let replicates = std::env::args().nth(1).map_or(Ok(5), |s| s.parse())?;
    let mut cfg = ScenarioConfig::sparse();
    cfg.replicates = replicates;
    let report = run_study(&cfg, &StudyOptions::default())?;
    println!("{} of {} replicates succeeded", report.succeeded, report.replicates);
    for e in &report.average.entries {
        let process = e.process.map_or("-".to_string(), |p| p.to_string());
        let component = e.component.map_or("-".to_string(), |c| (c + 1).to_string());
        println!("{:<8} {process:>2} {component:>2} {:.4}", e.quantity, e.value);
    }
    Ok(())
}
