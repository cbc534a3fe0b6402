use opdlab::oracle::{kl_direct, simplex_grid_argmin};
use opdlab::prob::Distribution;
use opdlab::rng::rng_for;
use opdlab::teacher::consensus_optimum;
use rand::Rng;

fn random_dist(rng: &mut impl Rng, n: usize) -> Distribution {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    Distribution::from_weights(&w).unwrap()
}

fn random_weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn reverse_objective<'a>(teachers: &'a [Distribution], weights: &'a [f64]) -> impl Fn(&[f64]) -> f64 + 'a {
    move |p| teachers.iter().zip(weights).map(|(t, w)| w * kl_direct(p, t.probs())).sum()
}

#[test]
fn plain_grid_at_fine_spacing_brackets_the_closed_form() {
    let mut rng = rng_for(3, &[]);
    for _ in 0..4 {
        let teachers: Vec<Distribution> = (0..3).map(|_| random_dist(&mut rng, 3)).collect();
        let weights = random_weights(&mut rng, 3);
        let closed = consensus_optimum(&teachers, &weights).unwrap();
        let obj = reverse_objective(&teachers, &weights);
        let grid = simplex_grid_argmin(&obj, 3, 1e-3).unwrap();
        let tv = closed.tv(&Distribution::new(grid.point.clone()).unwrap());
        // The nearest grid point is within one cell per coordinate.
        assert!(tv <= 1.5e-3, "tv {tv}");
        assert!(obj(closed.probs()) <= grid.value + 1e-12);
    }
}

#[test]
fn reverse_consensus_is_zero_forcing_and_forward_is_mass_covering() {
    // Each teacher rules out a different token.
    let teachers = [
        Distribution::new(vec![0.5, 0.5 - 1e-6, 1e-6]).unwrap(),
        Distribution::new(vec![0.5, 1e-6, 0.5 - 1e-6]).unwrap(),
    ];
    let weights = [0.5, 0.5];
    let reverse = consensus_optimum(&teachers, &weights).unwrap();
    // Forward KL is minimized by the mixture; confirm that on the grid.
    let forward_obj = |p: &[f64]| -> f64 { teachers.iter().map(|t| 0.5 * kl_direct(t.probs(), p)).sum() };
    let forward = simplex_grid_argmin(forward_obj, 3, 1e-3).unwrap().point;
    assert!((forward[1] - 0.25).abs() < 2e-3 && (forward[2] - 0.25).abs() < 2e-3, "{forward:?}");
    // The geometric consensus keeps only the token both teachers allow.
    assert!(reverse.probs()[0] > 0.99, "{:?}", reverse.probs());
    assert!(reverse.probs()[1] < 5e-3 && reverse.probs()[2] < 5e-3);
}

#[test]
fn single_teacher_consensus_is_the_teacher() {
    let mut rng = rng_for(4, &[]);
    for _ in 0..100 {
        let t = random_dist(&mut rng, 6);
        let c = consensus_optimum(std::slice::from_ref(&t), &[1.0]).unwrap();
        assert!(c.tv(&t) < 1e-12);
    }
}
