//! A teacher trained with verifiable rewards from the student's own start,
//! then used for on-policy distillation. Prints overlap against the oracle.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::trainer::run_in_memory;

fn main() -> opdlab::Result<()> {
    let recipe = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/rlvr-teacher-then-opd.toml");
    let cfg = ExperimentConfig::load(&recipe)?;
    let out = run_in_memory(&cfg)?;
    for phase in &out.report.phases {
        println!(
            "{:<5} teacher {:<9} {:>4} steps  accuracy {:.4}",
            phase.algorithm.name(),
            phase.teacher,
            phase.steps,
            phase.eval.accuracy
        );
    }
    let opd: Vec<f64> = out
        .telemetry
        .iter()
        .filter(|r| r.phase == "opd")
        .filter_map(|r| r.metrics.overlap)
        .collect();
    if let (Some(first), Some(last)) = (opd.first(), opd.last()) {
        println!("topk overlap with the promoted teacher: {first:.4} -> {last:.4}");
    }
    Ok(())
}
