use opdlab::objectives::{pg_sampled_grad, reverse_kl_full, Objective};
use opdlab::oracle::{enumerate_expectation, five_point_grad, relative_error};
use opdlab::policy::{score, ContextKey, Policy, Trajectory};
use opdlab::prob::{Logits, TokenId, Vocab};
use opdlab::rng::rng_for;
use opdlab::verify::{grad_check_suite, random_instance, FD_EPS, GRAD_TOLERANCE};
use rand::Rng;

const VOCAB: usize = 3;
const MAX_LEN: usize = 3;

/// Every prefix of non-EOS tokens shorter than `MAX_LEN`, shortest first.
fn prefixes() -> Vec<Vec<TokenId>> {
    let eos = (VOCAB - 1) as TokenId;
    let mut out = vec![Vec::new()];
    let mut i = 0;
    while i < out.len() {
        if out[i].len() + 1 < MAX_LEN {
            for t in 0..eos {
                let mut next = out[i].clone();
                next.push(t);
                out.push(next);
            }
        }
        i += 1;
    }
    out
}

/// Order equal to `MAX_LEN`, so every prefix gets its own context.
fn random_policy(seed: u64) -> Policy {
    let mut rng = rng_for(seed, &[]);
    let mut p = Policy::new(Vocab::new(VOCAB).unwrap(), MAX_LEN).unwrap();
    for prefix in prefixes() {
        let z = (0..VOCAB).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.set_logits(p.context(0, &prefix), Logits::new(z).unwrap()).unwrap();
    }
    p
}

fn seq_logprob(p: &Policy, y: &[TokenId]) -> f64 {
    (0..y.len()).map(|t| p.dist_at(&p.context(0, &y[..t])).ln_prob(y[t])).sum()
}

fn sequence_kl(student: &Policy, teacher: &Policy) -> f64 {
    enumerate_expectation(student, 0, MAX_LEN, |y| vec![seq_logprob(student, y) - seq_logprob(teacher, y)]).unwrap()[0]
}

fn with_logits(p: &Policy, key: &ContextKey, z: &[f64]) -> Policy {
    let mut q = p.clone();
    q.set_logits(key.clone(), Logits::new(z.to_vec()).unwrap()).unwrap();
    q
}

fn fd_at(student: &Policy, teacher: &Policy, key: &ContextKey) -> Vec<f64> {
    let z = student.logits_at(key).values().to_vec();
    five_point_grad(|z| sequence_kl(&with_logits(student, key, z), teacher), &z, FD_EPS).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max)
}

#[test]
fn reward_to_go_expectation_matches_sequence_kl_gradient() {
    for seed in 0..5 {
        let student = random_policy(100 + seed);
        let teacher = random_policy(200 + seed);
        for prefix in prefixes() {
            let key = student.context(0, &prefix);
            let exact = enumerate_expectation(&student, 0, MAX_LEN, |y| {
                let mut g = vec![0.0; VOCAB];
                for t in 0..y.len() {
                    if student.context(0, &y[..t]) != key {
                        continue;
                    }
                    let to_go: f64 = (t..y.len())
                        .map(|s| {
                            let ctx = &y[..s];
                            student.dist_at(&student.context(0, ctx)).ln_prob(y[s])
                                - teacher.dist_at(&teacher.context(0, ctx)).ln_prob(y[s])
                        })
                        .sum();
                    for (gi, si) in g.iter_mut().zip(score(&student.dist_at(&key), y[t])) {
                        *gi += to_go * si;
                    }
                }
                g
            })
            .unwrap();
            let err = max_rel(&exact, &fd_at(&student, &teacher, &key));
            assert!(err <= GRAD_TOLERANCE, "seed {seed} prefix {prefix:?}: {err:e}");
        }
    }
}

#[test]
fn per_token_estimator_is_exact_at_the_last_position() {
    // Nothing follows the final position, so dropping future terms costs nothing there.
    for seed in 0..5 {
        let student = random_policy(300 + seed);
        let teacher = random_policy(400 + seed);
        for minus_one in [false, true] {
            for prefix in prefixes().into_iter().filter(|p| p.len() == MAX_LEN - 1) {
                let key = student.context(0, &prefix);
                let expected = enumerate_expectation(&student, 0, MAX_LEN, |y| {
                    let traj = Trajectory {
                        prompt: 0,
                        tokens: y.to_vec(),
                        student_logprobs: (0..y.len())
                            .map(|t| student.dist_at(&student.context(0, &y[..t])).ln_prob(y[t]))
                            .collect(),
                        teacher_logprobs: Some(
                            (0..y.len())
                                .map(|t| teacher.dist_at(&teacher.context(0, &y[..t])).ln_prob(y[t]))
                                .collect(),
                        ),
                        truncated: y.last() != Some(&((VOCAB - 1) as TokenId)),
                    };
                    let g = pg_sampled_grad(&student, &traj, minus_one).unwrap();
                    g.get(&key).cloned().unwrap_or_else(|| vec![0.0; VOCAB])
                })
                .unwrap();
                let err = max_rel(&expected, &fd_at(&student, &teacher, &key));
                assert!(err <= GRAD_TOLERANCE, "seed {seed} prefix {prefix:?} minus_one {minus_one}: {err:e}");
            }
        }
    }
}

#[test]
fn grad_logprob_matches_finite_differences() {
    let p = random_policy(7);
    for prefix in prefixes() {
        let key = p.context(0, &prefix);
        let z = p.logits_at(&key).values().to_vec();
        for tok in 0..VOCAB as TokenId {
            let fd = five_point_grad(|z| with_logits(&p, &key, z).dist_at(&key).ln_prob(tok), &z, FD_EPS).unwrap();
            assert!(max_rel(&p.grad_logprob(&key, tok), &fd) <= GRAD_TOLERANCE);
        }
    }
}

#[test]
fn objectives_pass_under_other_seeds() {
    for seed in [1, 2, 3] {
        let report = grad_check_suite(None, seed).unwrap();
        assert!(report.pass, "{}", report.to_json());
        assert_eq!(report.checks.len(), Objective::all(0.3).len());
    }
}

#[test]
fn reverse_kl_gradient_vanishes_at_the_teacher() {
    let mut rng = rng_for(9, &[]);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let r = reverse_kl_full(&inst.z, &inst.z.softmax()).unwrap();
        assert!(r.loss.abs() < 1e-12);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-12));
    }
}
