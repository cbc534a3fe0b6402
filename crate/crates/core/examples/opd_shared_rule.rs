//! On-policy distillation from an oracle teacher with stop-gradient TopK,
//! printing the greedy accuracy curve from the telemetry rows.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::trainer::run_in_memory;

fn main() -> opdlab::Result<()> {
    let recipe = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/opd-stable.toml");
    let mut cfg = ExperimentConfig::load(&recipe)?;
    if let Some(seed) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.seed = seed;
    }
    let out = run_in_memory(&cfg)?;
    println!("{:>5}  {:>8}  {:>8}  {:>8}", "step", "loss", "overlap", "accuracy");
    for row in out.telemetry.iter().filter(|r| r.eval_accuracy.is_some()) {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:>5}  {:>8}  {:>8}  {:>8}",
            row.step,
            f(row.loss),
            f(row.metrics.overlap),
            f(row.eval_accuracy)
        );
    }
    println!("final accuracy {:.4} (seed {})", out.report.final_eval.accuracy, cfg.seed);
    Ok(())
}
