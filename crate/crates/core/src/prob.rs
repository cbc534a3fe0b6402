//! Vocabulary, distributions and numerically safe softmax math.
//!
//! Every logarithm of a probability goes through [`safe_ln`], which floors its
//! argument at [`PROB_FLOOR`]. All divergences are in nats.

use std::fmt;

use crate::error::{Error, Result};

/// Floor applied inside every `ln` of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ p = 1` accepted when validating a caller-supplied distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

pub type TokenId = u32;

/// Natural log of a probability, floored at [`PROB_FLOOR`].
#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// A vocabulary of `size` tokens with ids `0..size`. The last id is end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    names: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::arg(format!("vocabulary size must be >= 2, got {size}")));
        }
        if size > u32::MAX as usize - 1 {
            return Err(Error::arg("vocabulary too large"));
        }
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new(names.len())?;
        vocab.names = Some(names);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn name(&self, token: TokenId) -> String {
        match &self.names {
            Some(names) if (token as usize) < names.len() => names[token as usize].clone(),
            _ => token.to_string(),
        }
    }
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and normalization (within [`NORMALIZATION_TOLERANCE`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Constructs without validation; callers guarantee normalization.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        Self { probs }
    }

    /// Normalizes a non-negative weight vector.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "cannot normalize weights with total {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_normalized(vec![1.0 / n as f64; n])
    }

    /// Point mass on `token`, floored so that every other entry is [`PROB_FLOOR`].
    pub fn one_hot(n: usize, token: TokenId) -> Self {
        let mut probs = vec![PROB_FLOOR; n];
        probs[token as usize] = 1.0 - PROB_FLOOR * (n - 1) as f64;
        Self::from_normalized(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    pub fn ln_prob(&self, token: TokenId) -> f64 {
        safe_ln(self.probs[token as usize])
    }

    /// Every entry raised to at least [`PROB_FLOOR`], then renormalized.
    pub fn floored(&self) -> Self {
        let raised: Vec<f64> = self.probs.iter().map(|p| p.max(PROB_FLOOR)).collect();
        let total: f64 = raised.iter().sum();
        Self::from_normalized(raised.into_iter().map(|p| p / total).collect())
    }

    /// Highest-probability token; ties go to the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Total variation distance `½ Σ |p − q|`.
    pub fn tv(&self, other: &Distribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.4}")?;
        }
        write!(f, "]")
    }
}

/// A finite logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!("entry {i} is {v}")));
        }
        if values.len() < 2 {
            return Err(Error::InvalidLogits(format!(
                "need at least 2 entries, got {}",
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn softmax(&self) -> Distribution {
        Distribution::from_normalized(softmax_slice(&self.values))
    }
}

/// Max-subtracted softmax of a finite slice.
pub(crate) fn softmax_slice(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax with a finiteness check on the input.
pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    Ok(Logits::new(logits.to_vec())?.softmax())
}

/// The `k` most probable tokens of a distribution in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSet {
    entries: Vec<(TokenId, f64)>,
    k: usize,
}

impl TopKSet {
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|(t, _)| *t == token)
    }

    /// 1-based rank of `token` inside the set.
    pub fn rank_of(&self, token: TokenId) -> Option<usize> {
        self.entries.iter().position(|(t, _)| *t == token).map(|i| i + 1)
    }
}

/// Top-`k` tokens, probability descending, ties broken toward the lower id.
pub fn topk(dist: &Distribution, k: usize) -> Result<TopKSet> {
    if k == 0 || k > dist.len() {
        return Err(Error::arg(format!(
            "k must lie in 1..={}, got {k}",
            dist.len()
        )));
    }
    let mut order: Vec<(TokenId, f64)> = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(i, p)| (i as TokenId, *p))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.truncate(k);
    Ok(TopKSet { entries: order, k })
}

/// Shannon entropy in nats, computed with floored logs.
pub fn entropy(dist: &Distribution) -> f64 {
    -dist
        .probs()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * safe_ln(*p))
        .sum::<f64>()
}
