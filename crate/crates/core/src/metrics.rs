//! Per-token diagnostics: repetition, teacher-student agreement, log-prob gaps
//! and entropy. Undefined statistics are `None`, never NaN.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::prob::{entropy, topk, Distribution, TokenId};

pub const DEFAULT_NGRAM: usize = 3;
pub const DEFAULT_OVERLAP_K: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Repetition {
    pub flags: Vec<bool>,
    pub ratio: f64,
}

/// `r_t = 1` iff the n-gram ending at `t` already ended at an earlier
/// position. Positions `t < n − 1` have no complete n-gram and are 0.
/// The ratio is over all tokens; an empty sequence has ratio 0.
pub fn repetition_flags(tokens: &[TokenId], n: usize) -> Result<Repetition> {
    if n == 0 {
        return Err(Error::arg("n-gram size must be at least 1"));
    }
    let mut seen = HashSet::new();
    let flags: Vec<bool> = (0..tokens.len())
        .map(|t| t + 1 >= n && !seen.insert(&tokens[t + 1 - n..=t]))
        .collect();
    let hits = flags.iter().filter(|f| **f).count();
    let ratio = if tokens.is_empty() {
        0.0
    } else {
        hits as f64 / tokens.len() as f64
    };
    Ok(Repetition { flags, ratio })
}

/// `|TopK_T ∩ TopK_S| / K`.
pub fn topk_overlap(student: &Distribution, teacher: &Distribution, k: usize) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::arg("overlap between distributions of different sizes"));
    }
    let s = topk(student, k)?;
    let t = topk(teacher, k)?;
    let shared = s.ids().iter().filter(|id| t.contains(**id)).count();
    Ok(shared as f64 / k as f64)
}

/// 1-based teacher rank of `token` within the teacher's TopK, else `K + 1`.
pub fn rank_at_k(teacher: &Distribution, token: TokenId, k: usize) -> Result<usize> {
    if token as usize >= teacher.len() {
        return Err(Error::arg(format!("token {token} outside vocabulary of {}", teacher.len())));
    }
    Ok(topk(teacher, k)?.rank_of(token).unwrap_or(k + 1))
}

/// Per-position diagnostics of one or more trajectories, concatenated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenDiagnostics {
    pub repetitive: Vec<bool>,
    /// `l_T(t) − l_S(t)`.
    pub delta_logprob: Vec<f64>,
    pub overlap: Vec<f64>,
    pub rank: Vec<usize>,
    /// Student entropy at `t`, in nats.
    pub entropy: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    DeltaLogprob,
    Overlap,
    Rank,
    Entropy,
}

impl TokenDiagnostics {
    /// Diagnostics for one response given the per-position student and
    /// teacher distributions.
    pub fn for_response(
        tokens: &[TokenId],
        student: &[Distribution],
        teacher: &[Distribution],
        k: usize,
        n: usize,
    ) -> Result<Self> {
        if student.len() != tokens.len() || teacher.len() != tokens.len() {
            return Err(Error::arg("one distribution per position is required"));
        }
        let k = k.min(student.first().map_or(k, Distribution::len));
        let mut d = TokenDiagnostics {
            repetitive: repetition_flags(tokens, n)?.flags,
            ..Default::default()
        };
        for ((tok, s), t) in tokens.iter().zip(student).zip(teacher) {
            d.delta_logprob.push(t.ln_prob(*tok) - s.ln_prob(*tok));
            d.overlap.push(topk_overlap(s, t, k)?);
            d.rank.push(rank_at_k(t, *tok, k)?);
            d.entropy.push(entropy(s));
        }
        Ok(d)
    }

    pub fn extend(&mut self, other: TokenDiagnostics) {
        self.repetitive.extend(other.repetitive);
        self.delta_logprob.extend(other.delta_logprob);
        self.overlap.extend(other.overlap);
        self.rank.extend(other.rank);
        self.entropy.extend(other.entropy);
    }

    pub fn len(&self) -> usize {
        self.repetitive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.repetitive.is_empty()
    }

    fn values(&self, q: Quantity) -> Vec<f64> {
        match q {
            Quantity::DeltaLogprob => self.delta_logprob.clone(),
            Quantity::Overlap => self.overlap.clone(),
            Quantity::Rank => self.rank.iter().map(|r| *r as f64).collect(),
            Quantity::Entropy => self.entropy.clone(),
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `(ā_rep, ā_other)`: means over repetitive and non-repetitive positions.
pub fn conditional_averages(diag: &TokenDiagnostics, q: Quantity) -> (Option<f64>, Option<f64>) {
    let values = diag.values(q);
    let pick = |want: bool| {
        mean(
            values
                .iter()
                .zip(&diag.repetitive)
                .filter(move |(_, r)| **r == want)
                .map(|(v, _)| *v),
        )
    };
    (pick(true), pick(false))
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x.iter().copied())?;
    let my = mean(y.iter().copied())?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Batch aggregates written to telemetry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MetricBundle {
    pub rep_ratio: Option<f64>,
    pub overlap: Option<f64>,
    pub rank_at_k: Option<f64>,
    pub delta_logprob: Option<f64>,
    pub entropy: Option<f64>,
    /// Pearson correlation between `Δlogprob` and entropy.
    pub entropy_corr: Option<f64>,
}

impl MetricBundle {
    /// Aggregates teacher-aware diagnostics.
    pub fn from_diagnostics(d: &TokenDiagnostics) -> Self {
        Self {
            rep_ratio: mean(d.repetitive.iter().map(|r| f64::from(u8::from(*r)))),
            overlap: mean(d.overlap.iter().copied()),
            rank_at_k: mean(d.rank.iter().map(|r| *r as f64)),
            delta_logprob: mean(d.delta_logprob.iter().copied()),
            entropy: mean(d.entropy.iter().copied()),
            entropy_corr: pearson(&d.delta_logprob, &d.entropy),
        }
    }

    /// Teacher-free aggregates: repetition and entropy only.
    pub fn student_only(repetitive: &[bool], entropies: &[f64]) -> Self {
        Self {
            rep_ratio: mean(repetitive.iter().map(|r| f64::from(u8::from(*r)))),
            entropy: mean(entropies.iter().copied()),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force_flags(tokens: &[TokenId], n: usize) -> Vec<bool> {
        (0..tokens.len())
            .map(|t| {
                t + 1 >= n
                    && (n - 1..t).any(|s| tokens[s + 1 - n..=s] == tokens[t + 1 - n..=t])
            })
            .collect()
    }

    #[test]
    fn repetition_fixtures() {
        assert_eq!(repetition_flags(&[1, 2, 3, 4, 5], 3).unwrap().ratio, 0.0);

        let same = repetition_flags(&[7; 10], 3).unwrap();
        assert_eq!(same.ratio, 7.0 / 10.0);
        let hits: Vec<usize> = (0..10).filter(|t| same.flags[*t]).collect();
        assert_eq!(hits, (3..10).collect::<Vec<_>>());

        let abc = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        assert_eq!(repetition_flags(&abc, 3).unwrap().ratio, 4.0 / 9.0);
        assert_eq!(brute_force_flags(&abc, 3), repetition_flags(&abc, 3).unwrap().flags);

        assert_eq!(repetition_flags(&[], 3).unwrap().ratio, 0.0);
        assert!(repetition_flags(&[1], 0).is_err());
    }

    #[test]
    fn overlap_fixtures() {
        let s = Distribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let t = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(topk_overlap(&s, &s, 2).unwrap(), 1.0);
        assert_eq!(topk_overlap(&s, &t, 2).unwrap(), 0.0);
        assert_eq!(topk_overlap(&s, &t, 3).unwrap(), 2.0 / 3.0);
        assert!(topk_overlap(&s, &t, 5).is_err());
    }

    #[test]
    fn rank_fixtures() {
        let t = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(rank_at_k(&t, 0, 2).unwrap(), 1);
        assert_eq!(rank_at_k(&t, 1, 2).unwrap(), 2);
        assert_eq!(rank_at_k(&t, 2, 2).unwrap(), 3);
        assert!(rank_at_k(&t, 3, 2).is_err());
    }

    fn synthetic() -> TokenDiagnostics {
        TokenDiagnostics {
            repetitive: vec![false, true, false, true, true],
            delta_logprob: vec![1.0, -2.0, 3.0, -4.0, 0.5],
            overlap: vec![1.0, 0.5, 0.25, 0.0, 1.0],
            rank: vec![1, 2, 3, 4, 5],
            entropy: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    #[test]
    fn conditional_average_fixtures() {
        let d = synthetic();
        assert_eq!(
            conditional_averages(&d, Quantity::DeltaLogprob),
            (Some((-2.0 - 4.0 + 0.5) / 3.0), Some(2.0))
        );
        assert_eq!(conditional_averages(&d, Quantity::Rank), (Some(11.0 / 3.0), Some(2.0)));

        let mut none = d.clone();
        none.repetitive = vec![false; 5];
        let (rep, other) = conditional_averages(&none, Quantity::Overlap);
        assert_eq!(rep, None);
        assert!((other.unwrap() - 0.55).abs() < 1e-15);

        let mut all = d;
        all.repetitive = vec![true; 5];
        let (rep, other) = conditional_averages(&all, Quantity::Overlap);
        assert!((rep.unwrap() - 0.55).abs() < 1e-15);
        assert_eq!(other, None);
    }

    #[test]
    fn pearson_fixtures() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.3).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 50]), None);
        assert_eq!(pearson(&[1.0], &[2.0]), None);

        let mut a = rng_for(91, &[0]);
        let mut b = rng_for(91, &[1]);
        let xs: Vec<f64> = (0..10_000).map(|_| a.random()).collect();
        let ys: Vec<f64> = (0..10_000).map(|_| b.random()).collect();
        assert!(pearson(&xs, &ys).unwrap().abs() < 0.05);
    }

    #[test]
    fn response_diagnostics() {
        let s = Distribution::new(vec![0.7, 0.2, 0.1]).unwrap();
        let t = Distribution::new(vec![0.1, 0.2, 0.7]).unwrap();
        let d = TokenDiagnostics::for_response(&[0, 0], &[s.clone(), s.clone()], &[t.clone(), s.clone()], 50, 1).unwrap();
        assert_eq!(d.repetitive, vec![false, true]);
        assert_eq!(d.rank, vec![3, 1]);
        assert!((d.delta_logprob[0] - (0.1f64 / 0.7).ln()).abs() < 1e-12);
        assert_eq!(d.delta_logprob[1], 0.0);
        assert_eq!(d.overlap, vec![1.0, 1.0]);
        let b = MetricBundle::from_diagnostics(&d);
        assert_eq!(b.rep_ratio, Some(0.5));
        assert_eq!(b.entropy_corr, None);
    }

    proptest! {
        #[test]
        fn repetition_matches_brute_force(tokens in prop::collection::vec(0u32..4, 0..40), n in 1usize..5) {
            prop_assert_eq!(repetition_flags(&tokens, n).unwrap().flags, brute_force_flags(&tokens, n));
        }

        #[test]
        fn repetition_relabeling_invariant(tokens in prop::collection::vec(0u32..6, 0..40), shift in 1u32..6) {
            let relabeled: Vec<TokenId> = tokens.iter().map(|t| (t * 5 + shift) % 6).collect();
            prop_assert_eq!(
                repetition_flags(&tokens, 3).unwrap().ratio,
                repetition_flags(&relabeled, 3).unwrap().ratio
            );
        }

        #[test]
        fn overlap_symmetric(a in prop::collection::vec(0.01f64..1.0, 6), b in prop::collection::vec(0.01f64..1.0, 6), k in 1usize..7) {
            let s = Distribution::from_weights(&a).unwrap();
            let t = Distribution::from_weights(&b).unwrap();
            let st = topk_overlap(&s, &t, k).unwrap();
            prop_assert_eq!(st, topk_overlap(&t, &s, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&st));
        }

        #[test]
        fn partition_recovers_global_mean(
            values in prop::collection::vec(-5.0f64..5.0, 2..30),
            mask in prop::collection::vec(any::<bool>(), 30),
        ) {
            let n = values.len();
            let d = TokenDiagnostics {
                repetitive: mask[..n].to_vec(),
                delta_logprob: values.clone(),
                ..Default::default()
            };
            if let (Some(rep), Some(other)) = conditional_averages(&d, Quantity::DeltaLogprob) {
                let r = d.repetitive.iter().filter(|x| **x).count() as f64;
                let total: f64 = values.iter().sum();
                prop_assert!((r * rep + (n as f64 - r) * other - total).abs() < 1e-9);
            }
        }
    }
}
