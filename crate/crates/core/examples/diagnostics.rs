//! Token-level diagnostics on student rollouts scored by a teacher:
//! repetition, TopK agreement, teacher rank, and the entropy correlation.

use opdlab::metrics::{conditional_averages, pearson, Quantity, TokenDiagnostics};
use opdlab::policy::Policy;
use opdlab::prob::{Distribution, Logits};
use opdlab::rng::rng_for;
use opdlab::tasks::{Rule, TaskSpec};
use opdlab::teacher::Teacher;
use rand::Rng;

fn main() -> opdlab::Result<()> {
    let family = TaskSpec::shared_rule(Rule::Shift(1), 16, 3).build()?;
    let teacher = Teacher::oracle(family.clone(), 0.5)?;
    let vocab = family.vocab();

    // A loopy student: every context prefers the token it just emitted.
    let mut student = Policy::new(vocab.clone(), 1)?;
    let mut rng = rng_for(1, &[]);
    for inst in family.instances() {
        for last in 0..vocab.size() as u32 {
            let mut z: Vec<f64> = (0..vocab.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
            z[last as usize] += 2.5;
            student.set_logits(student.context(inst.prompt, &[last]), Logits::new(z)?)?;
        }
    }

    let mut diag = TokenDiagnostics::default();
    for (i, inst) in family.instances().iter().enumerate() {
        let traj = student.sample_trajectory(inst.prompt, 12, i as u64)?;
        let (mut s, mut t): (Vec<Distribution>, Vec<Distribution>) = (Vec::new(), Vec::new());
        for k in 0..traj.tokens.len() {
            let prefix = &traj.tokens[..k];
            s.push(student.dist_at(&student.context(inst.prompt, prefix)));
            t.push(opdlab::teacher::teacher_dist(&teacher, &student, inst.prompt, &inst.pi, prefix));
        }
        diag.extend(TokenDiagnostics::for_response(&traj.tokens, &s, &t, 5, 3)?);
    }

    let reps = diag.repetitive.iter().filter(|r| **r).count();
    println!("positions {}, repetitive {reps} ({:.3})", diag.len(), reps as f64 / diag.len() as f64);
    for (name, q) in [
        ("delta logprob", Quantity::DeltaLogprob),
        ("topk overlap", Quantity::Overlap),
        ("teacher rank", Quantity::Rank),
        ("entropy", Quantity::Entropy),
    ] {
        let (rep, other) = conditional_averages(&diag, q);
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"));
        println!("{name:<14} repetitive {:>10}   other {:>10}", f(rep), f(other));
    }
    match pearson(&diag.delta_logprob, &diag.entropy) {
        Some(r) => println!("corr(delta logprob, entropy) = {r:+.4}"),
        None => println!("corr(delta logprob, entropy) undefined"),
    }
    Ok(())
}
