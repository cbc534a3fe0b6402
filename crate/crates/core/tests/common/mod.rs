//! Fixtures and builders shared by the protocol tests and the acceptance run.

#![allow(dead_code)]

use std::path::PathBuf;

use opdlab::policy::Policy;
use opdlab::prob::{Logits, Vocab};
use opdlab::protocol::{Scorer, ScoringModel};
use opdlab::rng::rng_for;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/protocol").join(name)
}

pub fn unhex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

pub struct Golden {
    pub name: String,
    pub request: Vec<u8>,
    pub response: Vec<u8>,
}

pub fn goldens() -> Vec<Golden> {
    std::fs::read_to_string(fixture("golden.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            Golden {
                name: it.next().unwrap().to_string(),
                request: unhex(it.next().unwrap()),
                response: unhex(it.next().unwrap()),
            }
        })
        .collect()
}

/// The golden fixtures were recorded against this cap.
pub const GOLDEN_CAP: usize = 8;

pub fn oracle_scorer() -> Scorer {
    Scorer::new(ScoringModel::load(&fixture("teacher.json")).unwrap(), GOLDEN_CAP)
}

pub fn random_policy(seed: u64, vocab: usize, prompts: u32) -> Policy {
    let mut rng = rng_for(seed, &[]);
    let mut p = Policy::new(Vocab::new(vocab).unwrap(), 2).unwrap();
    // Populate every context a length-4 response over the first few tokens can reach.
    for prompt in 0..prompts {
        let mut stack = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            let z: Vec<f64> = (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
            p.set_logits(p.context(prompt, &prefix), Logits::new(z).unwrap()).unwrap();
            if prefix.len() < 3 {
                for t in 0..4u32 {
                    let mut next = prefix.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
    }
    p
}
