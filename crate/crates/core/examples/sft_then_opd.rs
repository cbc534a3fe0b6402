//! Supervised warm start on verified teacher traces, then distillation.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::trainer::run_in_memory;

fn main() -> opdlab::Result<()> {
    let recipe = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/sft-then-opd.toml");
    let cfg = ExperimentConfig::load(&recipe)?;
    let out = run_in_memory(&cfg)?;
    println!("initial accuracy {:.4}", out.report.initial.accuracy);
    for phase in &out.report.phases {
        print!("{:<5} {:>4} steps  accuracy {:.4}", phase.algorithm.name(), phase.steps, phase.eval.accuracy);
        if let (Some(n), Some(a), Some(b)) = (phase.sft_traces, phase.trace_nll_before, phase.trace_nll_after) {
            print!("  ({n} traces, NLL {a:.4} -> {b:.4})");
        }
        println!();
    }
    Ok(())
}
