//! A strong teacher asked to continue a weak student's prefix does worse
//! than the same teacher decoding on its own.

use std::path::PathBuf;

use opdlab::config::ExperimentConfig;
use opdlab::rng::rng_for;
use opdlab::tasks::{prefix_conditioned_eval, Truncation};
use opdlab::teacher::Teacher;
use opdlab::trainer::run_in_memory;

fn main() -> opdlab::Result<()> {
    let recipe = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../recipes/opd-stable.toml");
    let mut cfg = ExperimentConfig::load(&recipe)?;
    let family = cfg.task.build()?;
    let teacher = Teacher::oracle(family.clone(), cfg.teacher.oracle_temperature)?;
    let max_len = cfg.rollout.max_rollout_response_length;
    println!("steps  student  standalone  prefix  c->w  w->c");
    for steps in [0, 50, 100, 150, 300] {
        cfg.phases[0].steps = steps;
        let student = run_in_memory(&cfg)?.policy;
        let mut rng = rng_for(cfg.seed, &[steps as u64]);
        let r = prefix_conditioned_eval(&teacher, &student, &family, usize::MAX, max_len, Truncation::Uniform, &mut rng);
        let acc = opdlab::tasks::greedy_accuracy(&student, &family, max_len);
        println!(
            "{steps:>5}  {acc:>7.4}  {:>10.4}  {:>6.4}  {:>4}  {:>4}",
            r.standalone_accuracy, r.prefix_accuracy, r.correct_to_wrong, r.wrong_to_correct
        );
    }
    Ok(())
}
