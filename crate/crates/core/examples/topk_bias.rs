//! The unnormalized TopK loss against its stop-gradient repair, first on the
//! coefficient level and then as full training runs.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::trainer::run_in_memory;

fn main() -> opdlab::Result<()> {
    println!("p_T/p_S   unnormalized   stop-grad   disagree");
    for ratio in [0.5, 0.9, 1.1, 1.5, 2.0, 2.5, 2.7, 3.0, 5.0] {
        let stop: f64 = -f64::ln(ratio);
        let unnorm = stop + 1.0;
        let flip = unnorm.signum() != stop.signum();
        println!("{ratio:>7.3}   {unnorm:>+12.4}   {stop:>+9.4}   {flip}");
    }

    let recipe = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/opd-collapse-bias-demo.toml");
    let cfg = ExperimentConfig::load(&recipe)?;
    let out = run_in_memory(&cfg)?;
    println!("\ninitial accuracy {:.4}", out.report.initial.accuracy);
    for (i, phase) in out.report.phases.iter().enumerate() {
        let obj = cfg.train_config(i).objective;
        println!(
            "phase {} {:<5} {:<26} {:>4} steps  accuracy {:.4}",
            i + 1,
            phase.algorithm.name(),
            obj.name(),
            phase.steps,
            phase.eval.accuracy
        );
    }
    Ok(())
}
