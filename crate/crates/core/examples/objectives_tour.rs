//! Every distillation objective on one student/teacher pair: loss, gradient,
//! and the per-token coefficient that multiplies the score function.

use opdlab::objectives::{select_support, Objective, SupportMode, TopKSelector};
use opdlab::prob::{Distribution, Logits};

fn main() -> opdlab::Result<()> {
    let z = Logits::new(vec![1.2, 0.4, 0.1, -0.5, -1.5])?;
    let teacher = Distribution::new(vec![0.30, 0.45, 0.05, 0.15, 0.05])?;
    let student = z.softmax();
    let support = select_support(&TopKSelector::new(SupportMode::Student, 2), &student, &teacher)?;

    println!("student  {:.3?}", student.probs());
    println!("teacher  {:.3?}", teacher.probs());
    println!("support  {support:?} (student top-2)\n");
    for obj in Objective::all(0.5) {
        let r = obj.evaluate(&z, &teacher, &support)?;
        println!("{:<26} loss {:>8.5}", obj.name(), r.loss);
        println!("{:<26} grad {:>8.4?}", "", r.grad);
        println!("{:<26} coef {:>8.4?}", "", r.coeff);
    }

    // Token 1 sits in the band p_S < p_T < e * p_S, where the two TopK
    // coefficients disagree in sign.
    let (ps, pt) = (student.prob(1), teacher.prob(1));
    println!("\ntoken 1: p_S = {ps:.4}, p_T = {pt:.4}");
    println!("  unnormalized coefficient ln(p_S/p_T) + 1 = {:+.4}", (ps / pt).ln() + 1.0);
    println!("  stop-gradient coefficient ln(p_S/p_T)     = {:+.4}", (ps / pt).ln());
    Ok(())
}
