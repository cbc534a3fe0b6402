//! Fitting a one-bump student to a two-bump teacher. Reverse KL settles on one
//! mode and forward KL centres between the two. With these widths the
//! symmetric JSD behaves like reverse KL.

use opdlab::objectives::{forward_kl_full, jsd_full, reverse_kl_full};
use opdlab::prob::{Distribution, Logits};

const V: usize = 9;
const WIDTH: f64 = 0.8;

/// Discretized bump centred at `mu`.
fn bump(mu: f64) -> Logits {
    Logits::new((0..V).map(|v| -((v as f64 - mu).powi(2)) / (2.0 * WIDTH * WIDTH)).collect()).expect("finite logits")
}

fn main() -> opdlab::Result<()> {
    let a = bump(1.5).softmax();
    let b = bump(6.5).softmax();
    let teacher = Distribution::new(a.probs().iter().zip(b.probs()).map(|(x, y)| 0.5 * (x + y)).collect())?;
    println!("teacher {:.3?}", teacher.probs());

    let centres: Vec<f64> = (0..=800).map(|i| i as f64 / 100.0).collect();
    let fits: [(&str, &dyn Fn(&Logits) -> opdlab::Result<f64>); 3] = [
        ("reverse KL", &|z| Ok(reverse_kl_full(z, &teacher)?.loss)),
        ("forward KL", &|z| Ok(forward_kl_full(z, &teacher)?.loss)),
        ("JSD (0.5)", &|z| Ok(jsd_full(z, &teacher, 0.5)?.loss)),
    ];
    for (name, loss) in fits {
        let mut best = (f64::INFINITY, 0.0);
        for &mu in &centres {
            let l = loss(&bump(mu))?;
            if l < best.0 {
                best = (l, mu);
            }
        }
        println!("{name:<11} best centre {:.2}  loss {:.4}", best.1, best.0);
    }
    Ok(())
}
