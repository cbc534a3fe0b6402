//! Self-distillation in its two regimes. A rule shared by every instance is
//! internalized; per-instance answers average out to the consensus of the
//! privileged teachers, which the closed form predicts.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::oracle::{kl_direct, simplex_grid_argmin_refined};
use opdlab::prob::Distribution;
use opdlab::teacher::consensus_optimum;
use opdlab::trainer::run_in_memory;

fn recipe(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes").join(name)
}

fn main() -> opdlab::Result<()> {
    for name in ["opsd-shared-rule.toml", "opsd-instance-answer.toml"] {
        let cfg = ExperimentConfig::load(&recipe(name))?;
        let family = cfg.task.build()?;
        let out = run_in_memory(&cfg)?;
        let fin = &out.report.final_eval;
        println!("{name}");
        println!("  variants per prompt  {}", family.variants());
        println!("  accuracy             {:.4} -> {:.4}", out.report.initial.accuracy, fin.accuracy);
        if let (Some(max), Some(mean)) = (fin.consensus_tv_max, fin.consensus_tv_mean) {
            println!("  TV to consensus      max {max:.4}, mean {mean:.4}");
        }
    }

    // The consensus is the normalized geometric mean of the teachers.
    let teachers = [
        Distribution::new(vec![0.7, 0.2, 0.1])?,
        Distribution::new(vec![0.1, 0.6, 0.3])?,
    ];
    let weights = [0.5, 0.5];
    let closed = consensus_optimum(&teachers, &weights)?;
    let grid = simplex_grid_argmin_refined(
        |p| teachers.iter().zip(&weights).map(|(t, w)| w * kl_direct(p, t.probs())).sum(),
        3,
        1e-2,
        3,
    )?;
    println!("\nclosed form {:.5?}", closed.probs());
    println!("grid search {:.5?}", grid.point);
    Ok(())
}
