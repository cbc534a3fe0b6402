//! Synthetic sequence tasks with exact-match rewards.
//!
//! Token layout for `S` symbols: ids `0..S` are symbols, followed by four
//! reserved tokens `ANS`, `RULE`, `SEP` and `EOS` (always the last id). A
//! correct response is `[ANS, target.., EOS]`; the answer span is everything
//! between the first `ANS` and the next `EOS`.
//!
//! Two family kinds:
//!
//! * shared-rule: every prompt carries a random string of distinct symbols
//!   and the target applies one fixed symbol map to it. The privileged
//!   information is the single token `RULE`, identical for every instance.
//! * instance-answer: every visible prompt hides `variants` latent instances,
//!   each with its own answer. The privileged information is the answer's
//!   first token (or, for the instance-response kind, the whole answer), so
//!   only the teacher can tell the instances apart.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{greedy_continue, Policy};
use crate::prob::{TokenId, Vocab};
use crate::rng::{rng_for, LabRng};
use crate::teacher::{teacher_dist, PiKind, PrivilegedInfo, Teacher};

pub const DEFAULT_SYMBOLS: usize = 16;
pub const RESERVED_TOKENS: usize = 4;
pub const MAX_PROMPTS: usize = 64;

/// Reserved-token arithmetic for a family with `symbols` symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskVocab {
    symbols: usize,
}

impl TaskVocab {
    pub fn new(symbols: usize) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::Construction(format!("need at least 2 symbols, got {symbols}")));
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn size(&self) -> usize {
        self.symbols + RESERVED_TOKENS
    }

    pub fn ans(&self) -> TokenId {
        self.symbols as TokenId
    }

    pub fn rule(&self) -> TokenId {
        self.symbols as TokenId + 1
    }

    pub fn sep(&self) -> TokenId {
        self.symbols as TokenId + 2
    }

    pub fn eos(&self) -> TokenId {
        self.symbols as TokenId + 3
    }

    pub fn is_symbol(&self, t: TokenId) -> bool {
        (t as usize) < self.symbols
    }

    pub fn vocab(&self) -> Vocab {
        let mut names: Vec<String> = (0..self.symbols).map(|i| format!("s{i}")).collect();
        names.extend(["<ans>", "<rule>", "<sep>", "<eos>"].map(String::from));
        Vocab::with_names(names).expect("at least two symbols")
    }
}

/// Symbol map of a shared-rule family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    Identity,
    /// `s ↦ (s + k) mod S`.
    Shift(u32),
    /// `s ↦ perm[s]`; a bijection on the symbols.
    Permutation(Vec<TokenId>),
    /// A permutation drawn from the family seed.
    RandomPermutation,
}

impl Rule {
    pub fn apply(&self, symbol: TokenId, symbols: usize) -> TokenId {
        match self {
            Rule::Identity => symbol,
            Rule::Shift(k) => (symbol + k) % symbols as TokenId,
            Rule::Permutation(p) => p[symbol as usize],
            Rule::RandomPermutation => unreachable!("resolved when the family is built"),
        }
    }

    fn validate(&self, symbols: usize) -> Result<()> {
        if let Rule::Permutation(p) = self {
            let mut seen = vec![false; symbols];
            if p.len() != symbols {
                return Err(Error::Construction(format!(
                    "permutation has {} entries for {symbols} symbols",
                    p.len()
                )));
            }
            for s in p {
                match seen.get_mut(*s as usize) {
                    Some(slot) if !*slot => *slot = true,
                    _ => return Err(Error::Construction(format!("permutation is not a bijection at {s}"))),
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Rule {
    type Err = Error;

    /// `identity`, `shift:K`, `permutation` (seeded) or `permutation:a,b,c,..`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(format!("unrecognized rule `{s}`"));
        match s.split_once(':') {
            None if s == "identity" => Ok(Rule::Identity),
            None if s == "permutation" => Ok(Rule::RandomPermutation),
            Some(("shift", k)) => k.trim().parse().map(Rule::Shift).map_err(|_| bad()),
            Some(("permutation", list)) => list
                .split(',')
                .map(|x| x.trim().parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Rule::Permutation)
                .map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Identity => f.write_str("identity"),
            Rule::Shift(k) => write!(f, "shift:{k}"),
            Rule::RandomPermutation => f.write_str("permutation"),
            Rule::Permutation(p) => {
                let list: Vec<String> = p.iter().map(|x| x.to_string()).collect();
                write!(f, "permutation:{}", list.join(","))
            }
        }
    }
}

impl Serialize for Rule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    SharedRule,
    InstanceAnswer,
}

/// Declarative family description; the unit of task configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: FamilyKind,
    #[serde(default = "default_symbols")]
    pub symbols: usize,
    #[serde(default = "default_min_len")]
    pub min_input_len: usize,
    #[serde(default = "default_max_len")]
    pub max_input_len: usize,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    /// Shared-rule only.
    #[serde(default = "default_rule")]
    pub rule: Rule,
    /// Instance-answer only: latent instances per visible prompt.
    #[serde(default = "default_variants")]
    pub variants: usize,
    /// Instance-answer only.
    #[serde(default = "default_answer_len")]
    pub answer_len: usize,
    /// Instance-answer only: `instance-answer` or `instance-response`.
    #[serde(default)]
    pub pi: Option<PiKind>,
    #[serde(default)]
    pub seed: u64,
}

fn default_symbols() -> usize {
    DEFAULT_SYMBOLS
}
fn default_min_len() -> usize {
    3
}
fn default_max_len() -> usize {
    6
}
fn default_prompts() -> usize {
    32
}
fn default_rule() -> Rule {
    Rule::Shift(1)
}
fn default_variants() -> usize {
    2
}
fn default_answer_len() -> usize {
    1
}

impl TaskSpec {
    pub fn shared_rule(rule: Rule, prompts: usize, seed: u64) -> Self {
        Self {
            kind: FamilyKind::SharedRule,
            symbols: DEFAULT_SYMBOLS,
            min_input_len: default_min_len(),
            max_input_len: default_max_len(),
            prompts,
            rule,
            variants: default_variants(),
            answer_len: default_answer_len(),
            pi: None,
            seed,
        }
    }

    pub fn instance_answer(variants: usize, prompts: usize, seed: u64) -> Self {
        Self {
            kind: FamilyKind::InstanceAnswer,
            variants,
            ..Self::shared_rule(default_rule(), prompts, seed)
        }
    }

    pub fn build(&self) -> Result<TaskFamily> {
        TaskFamily::new(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    /// Position in [`TaskFamily::instances`].
    pub index: usize,
    pub prompt: u32,
    /// Latent variant; always 0 for shared-rule families.
    pub variant: u32,
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub pi: PrivilegedInfo,
}

impl TaskInstance {
    /// `[ANS, target.., EOS]`.
    pub fn reference_response(&self, tv: &TaskVocab) -> Vec<TokenId> {
        let mut r = Vec::with_capacity(self.target.len() + 2);
        r.push(tv.ans());
        r.extend_from_slice(&self.target);
        r.push(tv.eos());
        r
    }
}

/// An immutable, fully materialized task family.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    spec: TaskSpec,
    tv: TaskVocab,
    rule: Option<Rule>,
    instances: Vec<TaskInstance>,
    by_prompt: Vec<Vec<usize>>,
}

impl TaskFamily {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let tv = TaskVocab::new(spec.symbols)?;
        let construction = |msg: String| Err(Error::Construction(msg));
        if spec.prompts == 0 || spec.prompts > MAX_PROMPTS {
            return construction(format!("prompts must lie in 1..={MAX_PROMPTS}, got {}", spec.prompts));
        }
        if spec.min_input_len == 0 || spec.min_input_len > spec.max_input_len || spec.max_input_len > spec.symbols {
            return construction(format!(
                "input length range {}..={} invalid for {} symbols",
                spec.min_input_len, spec.max_input_len, spec.symbols
            ));
        }
        let mut rng = rng_for(spec.seed, &[0x7a5c]);
        let mut instances = Vec::new();
        let mut by_prompt = Vec::with_capacity(spec.prompts);
        let rule = match spec.kind {
            FamilyKind::SharedRule => {
                if spec.pi.is_some_and(|k| k != PiKind::SharedRule) {
                    return construction("shared-rule families only carry shared-rule information".into());
                }
                let rule = match &spec.rule {
                    Rule::RandomPermutation => {
                        let mut p: Vec<TokenId> = (0..spec.symbols as TokenId).collect();
                        p.shuffle(&mut rng);
                        Rule::Permutation(p)
                    }
                    other => other.clone(),
                };
                rule.validate(spec.symbols)?;
                for p in 0..spec.prompts {
                    let input = random_input(&spec, &mut rng);
                    let target = input.iter().map(|s| rule.apply(*s, spec.symbols)).collect();
                    by_prompt.push(vec![instances.len()]);
                    instances.push(TaskInstance {
                        index: instances.len(),
                        prompt: p as u32,
                        variant: 0,
                        input,
                        target,
                        pi: PrivilegedInfo::new(PiKind::SharedRule, vec![tv.rule()]),
                    });
                }
                Some(rule)
            }
            FamilyKind::InstanceAnswer => {
                let pi_kind = spec.pi.unwrap_or(PiKind::InstanceAnswer);
                if !matches!(pi_kind, PiKind::InstanceAnswer | PiKind::InstanceResponse) {
                    return construction(format!("instance-answer families cannot carry {pi_kind} information"));
                }
                if spec.variants < 2 || spec.variants > spec.symbols {
                    return construction(format!(
                        "variants must lie in 2..={}, got {}",
                        spec.symbols, spec.variants
                    ));
                }
                if spec.answer_len == 0 {
                    return construction("answer length must be at least 1".into());
                }
                for p in 0..spec.prompts {
                    let input = random_input(&spec, &mut rng);
                    // Distinct first tokens, so the answer token identifies the variant.
                    let mut heads: Vec<TokenId> = (0..spec.symbols as TokenId).collect();
                    heads.shuffle(&mut rng);
                    let mut group = Vec::with_capacity(spec.variants);
                    for (v, head) in heads.into_iter().take(spec.variants).enumerate() {
                        let mut target = vec![head];
                        target.extend((1..spec.answer_len).map(|_| rng.random_range(0..spec.symbols as TokenId)));
                        let pi_tokens = match pi_kind {
                            PiKind::InstanceResponse => target.clone(),
                            _ => vec![head],
                        };
                        group.push(instances.len());
                        instances.push(TaskInstance {
                            index: instances.len(),
                            prompt: p as u32,
                            variant: v as u32,
                            input: input.clone(),
                            target,
                            pi: PrivilegedInfo::new(pi_kind, pi_tokens),
                        });
                    }
                    by_prompt.push(group);
                }
                None
            }
        };
        Ok(Self {
            spec,
            tv,
            rule,
            instances,
            by_prompt,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn kind(&self) -> FamilyKind {
        self.spec.kind
    }

    pub fn task_vocab(&self) -> TaskVocab {
        self.tv
    }

    pub fn vocab(&self) -> Vocab {
        self.tv.vocab()
    }

    /// The resolved symbol map of a shared-rule family.
    pub fn rule(&self) -> Option<&Rule> {
        self.rule.as_ref()
    }

    pub fn instances(&self) -> &[TaskInstance] {
        &self.instances
    }

    pub fn prompts(&self) -> usize {
        self.by_prompt.len()
    }

    pub fn variants(&self) -> usize {
        match self.spec.kind {
            FamilyKind::SharedRule => 1,
            FamilyKind::InstanceAnswer => self.spec.variants,
        }
    }

    pub fn instances_of(&self, prompt: u32) -> impl Iterator<Item = &TaskInstance> {
        self.by_prompt
            .get(prompt as usize)
            .into_iter()
            .flatten()
            .map(|i| &self.instances[*i])
    }

    /// Longest reference response.
    pub fn max_response_len(&self) -> usize {
        self.instances.iter().map(|i| i.target.len() + 2).max().unwrap_or(2)
    }

    /// PI kind carried by this family's instances.
    pub fn pi_kind(&self) -> PiKind {
        self.instances[0].pi.kind
    }
}

fn random_input(spec: &TaskSpec, rng: &mut LabRng) -> Vec<TokenId> {
    let len = rng.random_range(spec.min_input_len..=spec.max_input_len);
    let mut symbols: Vec<TokenId> = (0..spec.symbols as TokenId).collect();
    symbols.shuffle(rng);
    symbols.truncate(len);
    symbols
}

/// Uniform draw from the family's instances.
pub fn sample_instance<'a>(family: &'a TaskFamily, rng: &mut LabRng) -> &'a TaskInstance {
    let i = rng.random_range(0..family.instances.len());
    &family.instances[i]
}

/// Span between the first `ANS` and the next `EOS`, if both are present.
pub fn answer_span<'a>(tv: &TaskVocab, response: &'a [TokenId]) -> Option<&'a [TokenId]> {
    let start = response.iter().position(|t| *t == tv.ans())? + 1;
    let len = response[start..].iter().position(|t| *t == tv.eos())?;
    Some(&response[start..start + len])
}

/// 1 iff the answer span equals the target exactly.
pub fn reward(family: &TaskFamily, instance: &TaskInstance, response: &[TokenId]) -> f64 {
    match answer_span(&family.tv, response) {
        Some(span) if span == instance.target.as_slice() => 1.0,
        _ => 0.0,
    }
}

/// The token a perfect solver emits after `prefix`. Before any `ANS` the
/// answer marker is due; after it, the target is read off positionally.
pub fn next_correct(tv: &TaskVocab, instance: &TaskInstance, prefix: &[TokenId]) -> TokenId {
    match prefix.iter().position(|t| *t == tv.ans()) {
        None => tv.ans(),
        Some(start) => {
            let j = prefix.len() - start - 1;
            instance.target.get(j).copied().unwrap_or(tv.eos())
        }
    }
}

/// Greedy exact-match accuracy of `policy` over every instance of the family.
pub fn greedy_accuracy(policy: &Policy, family: &TaskFamily, max_len: usize) -> f64 {
    let mut correct = 0.0;
    for p in 0..family.prompts() as u32 {
        let response = policy.greedy(p, &[], max_len);
        correct += family.instances_of(p).map(|i| reward(family, i, &response)).sum::<f64>();
    }
    correct / family.instances.len() as f64
}

/// Where the student trajectory is cut before the teacher takes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Uniform over `0..=len`.
    Uniform,
    AtStart,
    AtEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefixEvalReport {
    pub instances: usize,
    pub standalone_accuracy: f64,
    pub prefix_accuracy: f64,
    /// Standalone correct, prefix-conditioned wrong.
    pub correct_to_wrong: usize,
    /// Standalone wrong, prefix-conditioned correct.
    pub wrong_to_correct: usize,
}

/// Compares the teacher decoding on its own against the teacher continuing
/// a truncated greedy student trajectory. Both decodes are greedy; the
/// teacher always sees the instance's privileged information.
pub fn prefix_conditioned_eval(
    teacher: &Teacher,
    student: &Policy,
    family: &TaskFamily,
    n: usize,
    max_len: usize,
    truncation: Truncation,
    rng: &mut LabRng,
) -> PrefixEvalReport {
    let eos = family.tv.eos();
    let all = &family.instances;
    let picked: Vec<&TaskInstance> = if n >= all.len() {
        all.iter().collect()
    } else {
        (0..n).map(|_| sample_instance(family, rng)).collect()
    };
    let mut report = PrefixEvalReport {
        instances: picked.len(),
        standalone_accuracy: 0.0,
        prefix_accuracy: 0.0,
        correct_to_wrong: 0,
        wrong_to_correct: 0,
    };
    for inst in &picked {
        let next = |prefix: &[TokenId]| teacher_dist(teacher, student, inst.prompt, &inst.pi, prefix);
        let alone = greedy_continue(next, eos, &[], max_len);
        let trajectory = student.greedy(inst.prompt, &[], max_len);
        let cut = match truncation {
            Truncation::Uniform => rng.random_range(0..=trajectory.len()),
            Truncation::AtStart => 0,
            Truncation::AtEnd => trajectory.len(),
        };
        let continued = greedy_continue(next, eos, &trajectory[..cut], max_len);
        let a = reward(family, inst, &alone);
        let b = reward(family, inst, &continued);
        report.standalone_accuracy += a;
        report.prefix_accuracy += b;
        match (a > 0.0, b > 0.0) {
            (true, false) => report.correct_to_wrong += 1,
            (false, true) => report.wrong_to_correct += 1,
            _ => {}
        }
    }
    let count = picked.len().max(1) as f64;
    report.standalone_accuracy /= count;
    report.prefix_accuracy /= count;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn family(rule: Rule) -> TaskFamily {
        TaskSpec::shared_rule(rule, 8, 3).build().unwrap()
    }

    #[test]
    fn vocab_layout() {
        let tv = TaskVocab::new(16).unwrap();
        assert_eq!((tv.ans(), tv.rule(), tv.sep(), tv.eos()), (16, 17, 18, 19));
        assert_eq!(tv.vocab().size(), 20);
        assert_eq!(tv.vocab().eos(), tv.eos());
        assert_eq!(tv.vocab().name(16), "<ans>");
    }

    #[test]
    fn identity_copies_input() {
        for inst in family(Rule::Identity).instances() {
            assert_eq!(inst.target, inst.input);
            assert!((3..=6).contains(&inst.input.len()));
        }
    }

    #[test]
    fn shift_maps_abc_to_bcd() {
        assert_eq!(
            [0, 1, 2].map(|s| Rule::Shift(1).apply(s, 16)),
            [1, 2, 3]
        );
        assert_eq!(Rule::Shift(1).apply(15, 16), 0);
        for inst in family(Rule::Shift(1)).instances() {
            let expected: Vec<TokenId> = inst.input.iter().map(|s| (s + 1) % 16).collect();
            assert_eq!(inst.target, expected);
        }
    }

    #[test]
    fn rules_parse_and_print() {
        for s in ["identity", "shift:3", "permutation", "permutation:1,0,2"] {
            assert_eq!(s.parse::<Rule>().unwrap().to_string(), s);
        }
        assert!("rotate".parse::<Rule>().is_err());
        let bad = TaskSpec {
            symbols: 3,
            ..TaskSpec::shared_rule(Rule::Permutation(vec![0, 0, 1]), 2, 0)
        };
        assert!(bad.build().is_err());
    }

    #[test]
    fn random_permutation_is_resolved_and_seeded() {
        let a = family(Rule::RandomPermutation);
        let b = family(Rule::RandomPermutation);
        assert_eq!(a, b);
        let Some(Rule::Permutation(p)) = a.rule() else { panic!() };
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn shared_rule_pi_is_common() {
        let f = family(Rule::Shift(2));
        let rule = f.task_vocab().rule();
        assert!(f.instances().iter().all(|i| i.pi.tokens == vec![rule]));
    }

    #[test]
    fn instance_answer_structure() {
        let f = TaskSpec::instance_answer(3, 5, 11).build().unwrap();
        assert_eq!(f.instances().len(), 15);
        for p in 0..5 {
            let group: Vec<_> = f.instances_of(p).collect();
            assert_eq!(group.len(), 3);
            let mut heads: Vec<_> = group.iter().map(|i| i.target[0]).collect();
            heads.dedup();
            assert_eq!(heads.len(), 3);
            assert!(group.iter().all(|i| i.input == group[0].input));
            assert!(group.iter().all(|i| i.pi.tokens == vec![i.target[0]]));
        }
        assert_eq!(f, TaskSpec::instance_answer(3, 5, 11).build().unwrap());
    }

    #[test]
    fn same_instance_same_answer() {
        let f = TaskSpec::instance_answer(2, 4, 1).build().unwrap();
        let mut rng = rng_for(1, &[]);
        let mut seen = std::collections::BTreeMap::new();
        for _ in 0..200 {
            let i = sample_instance(&f, &mut rng);
            let prev = seen.insert((i.prompt, i.variant), i.target.clone());
            assert!(prev.is_none_or(|t| t == i.target));
        }
    }

    #[test]
    fn rewards() {
        let f = family(Rule::Shift(1));
        let tv = f.task_vocab();
        let inst = &f.instances()[0];
        let good = inst.reference_response(&tv);
        assert_eq!(reward(&f, inst, &good), 1.0);
        let mut bad = good.clone();
        bad[1] = (bad[1] + 1) % 16;
        assert_eq!(reward(&f, inst, &bad), 0.0);
        assert_eq!(reward(&f, inst, &good[..good.len() - 2]), 0.0);
        assert_eq!(reward(&f, inst, &good[..good.len() - 1]), 0.0);
        assert_eq!(reward(&f, inst, &[]), 0.0);
        let mut preamble = vec![3, 4];
        preamble.extend(&good);
        assert_eq!(reward(&f, inst, &preamble), 1.0);
    }

    #[test]
    fn next_correct_walks_the_reference() {
        let f = family(Rule::Identity);
        let tv = f.task_vocab();
        let inst = &f.instances()[1];
        let reference = inst.reference_response(&tv);
        for t in 0..reference.len() {
            assert_eq!(next_correct(&tv, inst, &reference[..t]), reference[t]);
        }
        assert_eq!(next_correct(&tv, inst, &[1, 2]), tv.ans());
    }

    #[test]
    fn construction_errors() {
        assert!(TaskSpec::shared_rule(Rule::Identity, 0, 0).build().is_err());
        assert!(TaskSpec::shared_rule(Rule::Identity, 65, 0).build().is_err());
        assert!(TaskSpec::instance_answer(1, 4, 0).build().is_err());
        let s = TaskSpec {
            min_input_len: 5,
            max_input_len: 4,
            ..TaskSpec::shared_rule(Rule::Identity, 4, 0)
        };
        assert!(s.build().is_err());
    }
}
