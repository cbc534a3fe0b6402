//! Teacher constructions and privileged-information conditioning.
//!
//! Table-backed teachers (frozen, EMA, self) read the PI-augmented context
//! key, with the PI tokens pinned at the front of the window. The oracle
//! teacher is analytic: it scores each next token by the fraction of the
//! matching task instances for which that token is correct, then applies a
//! temperature softmax.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::prob::{safe_ln, softmax, Distribution, Logits, TokenId};
use crate::tasks::{next_correct, TaskFamily, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiKind {
    None,
    SharedRule,
    InstanceAnswer,
    InstanceResponse,
}

impl PiKind {
    pub fn name(&self) -> &'static str {
        match self {
            PiKind::None => "none",
            PiKind::SharedRule => "shared-rule",
            PiKind::InstanceAnswer => "instance-answer",
            PiKind::InstanceResponse => "instance-response",
        }
    }
}

impl fmt::Display for PiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PiKind::None,
            PiKind::SharedRule,
            PiKind::InstanceAnswer,
            PiKind::InstanceResponse,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::arg(format!("unknown privileged-information kind `{s}`")))
    }
}

/// Extra context visible only to the teacher. `kind == None` ⇔ no tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrivilegedInfo {
    pub kind: PiKind,
    pub tokens: Vec<TokenId>,
}

impl PrivilegedInfo {
    pub fn none() -> Self {
        Self {
            kind: PiKind::None,
            tokens: Vec::new(),
        }
    }

    pub(crate) fn new(kind: PiKind, tokens: Vec<TokenId>) -> Self {
        debug_assert_eq!(kind == PiKind::None, tokens.is_empty());
        Self { kind, tokens }
    }

    pub fn checked(kind: PiKind, tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if (kind == PiKind::None) != tokens.is_empty() {
            return Err(Error::arg(format!(
                "{kind} information with {} tokens",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= vocab_size) {
            return Err(Error::arg(format!("PI token {t} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { kind, tokens })
    }

    pub fn is_none(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Analytic teacher bound to a task family.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTeacher {
    family: TaskFamily,
    temperature: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleBinding {
    task: TaskSpec,
    temperature: f64,
}

impl OracleTeacher {
    pub fn new(family: TaskFamily, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Construction(format!(
                "oracle temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { family, temperature })
    }

    pub fn family(&self) -> &TaskFamily {
        &self.family
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// `softmax(s̄ / τ)` where `s̄(y)` is the fraction of instances of `prompt`
    /// whose PI matches `pi` and whose correct next token is `y`. Without PI,
    /// or when no instance matches, all instances of the prompt count.
    pub fn dist(&self, prompt: u32, pi: &[TokenId], prefix: &[TokenId]) -> Distribution {
        let tv = self.family.task_vocab();
        let n = tv.size();
        let all: Vec<_> = self.family.instances_of(prompt).collect();
        let matching: Vec<_> = all.iter().filter(|i| !pi.is_empty() && i.pi.tokens == pi).collect();
        let pool: Vec<_> = if matching.is_empty() {
            all.iter().collect()
        } else {
            matching.into_iter().collect()
        };
        if pool.is_empty() {
            return Distribution::uniform(n);
        }
        let mut scores = vec![0.0; n];
        for inst in &pool {
            scores[next_correct(&tv, inst, prefix) as usize] += 1.0;
        }
        let count = pool.len() as f64;
        let scaled: Vec<f64> = scores.iter().map(|s| s / count / self.temperature).collect();
        softmax(&scaled).expect("finite scores")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&OracleBinding {
            task: self.family.spec().clone(),
            temperature: self.temperature,
        })
        .expect("task specs serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: OracleBinding =
            serde_json::from_str(s).map_err(|e| Error::Construction(format!("oracle binding: {e}")))?;
        Self::new(b.task.build()?, b.temperature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    /// A fixed policy snapshot, typically the step-0 student.
    Frozen(Policy),
    /// A policy shadow that tracks the student in logit space.
    Ema { shadow: Policy, alpha: f64 },
    /// The live student itself.
    SelfRef,
    Oracle(OracleTeacher),
}

impl Teacher {
    pub fn ema(shadow: Policy, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Construction(format!("ema alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(Teacher::Ema { shadow, alpha })
    }

    pub fn oracle(family: TaskFamily, temperature: f64) -> Result<Self> {
        OracleTeacher::new(family, temperature).map(Teacher::Oracle)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Teacher::Frozen(_) => "frozen",
            Teacher::Ema { .. } => "ema",
            Teacher::SelfRef => "self",
            Teacher::Oracle(_) => "oracle",
        }
    }

    /// Underlying table, if the teacher has its own.
    pub fn policy(&self) -> Option<&Policy> {
        match self {
            Teacher::Frozen(p) | Teacher::Ema { shadow: p, .. } => Some(p),
            _ => None,
        }
    }
}

/// Teacher next-token distribution on the PI-augmented context. `student` is
/// only read by the self teacher.
pub fn teacher_dist(
    teacher: &Teacher,
    student: &Policy,
    prompt: u32,
    pi: &PrivilegedInfo,
    prefix: &[TokenId],
) -> Distribution {
    match teacher {
        Teacher::Frozen(p) | Teacher::Ema { shadow: p, .. } => p.dist_at(&p.context_with_pi(prompt, &pi.tokens, prefix)),
        Teacher::SelfRef => student.dist_at(&student.context_with_pi(prompt, &pi.tokens, prefix)),
        Teacher::Oracle(o) => o.dist(prompt, &pi.tokens, prefix),
    }
}

/// `θ̄ ← α θ̄ + (1 − α) θ` per context key; a key missing on one side reads
/// as zero logits.
pub fn ema_update(teacher: &Teacher, student: &Policy) -> Result<Teacher> {
    let Teacher::Ema { shadow, alpha } = teacher else {
        return Err(Error::Construction(format!(
            "ema update on a {} teacher",
            teacher.name()
        )));
    };
    if shadow.vocab().size() != student.vocab().size() || shadow.order() != student.order() {
        return Err(Error::Construction("ema shadow and student shapes differ".into()));
    }
    let keys: BTreeSet<_> = shadow.table().keys().chain(student.table().keys()).cloned().collect();
    let mut next = shadow.clone();
    for key in keys {
        let a = shadow.logits_at(&key);
        let b = student.logits_at(&key);
        let mixed = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        next.set_logits(key, Logits::new(mixed)?)?;
    }
    Ok(Teacher::Ema {
        shadow: next,
        alpha: *alpha,
    })
}

/// Normalized weighted geometric mean `p*(y) ∝ exp(Σ_i w_i log q_i(y))`, the
/// minimizer of `Σ_i w_i KL(p ‖ q_i)`.
pub fn consensus_optimum(teachers: &[Distribution], weights: &[f64]) -> Result<Distribution> {
    let Some(first) = teachers.first() else {
        return Err(Error::arg("consensus of zero teachers"));
    };
    if weights.len() != teachers.len() {
        return Err(Error::arg(format!(
            "{} weights for {} teachers",
            weights.len(),
            teachers.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg("weights must lie on the simplex"));
    }
    if teachers.iter().any(|t| t.len() != first.len()) {
        return Err(Error::arg("teacher distributions have different sizes"));
    }
    let log_mix: Vec<f64> = (0..first.len())
        .map(|v| teachers.iter().zip(weights).map(|(t, w)| w * safe_ln(t.probs()[v])).sum())
        .collect();
    softmax(&log_mix)
}
