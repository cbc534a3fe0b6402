//! Tabular-softmax sequence policies.
//!
//! A policy maps a [`ContextKey`] (prompt id plus the last `m` tokens of the
//! conditioning history) to a logit vector. Keys that were never written
//! evaluate to zero logits, i.e. the uniform distribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{softmax_slice, topk, Distribution, Logits, TokenId, Vocab};
use crate::rng::{rng_for, LabRng};

/// Reserved window filler. Never a valid token id.
pub const PAD: TokenId = u32::MAX;

pub const DEFAULT_CONTEXT_ORDER: usize = 4;

const SNAPSHOT_MAGIC: &str = "opdlab-policy v1";

/// Conditioning key: prompt id and a fixed-width token window.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    prompt: u32,
    window: Vec<TokenId>,
    /// Leading window slots holding PI tokens.
    pi_len: usize,
}

impl ContextKey {
    /// Builds the key for `prompt` after `prefix`, with `pi` pinned to the
    /// front of the window. The remaining `order - pi.len()` slots hold the
    /// tail of `prefix`, left-padded with [`PAD`].
    ///
    /// A PI sequence that leaves no slot for the prefix (`pi.len() + 1 > order`)
    /// cannot be seen and is dropped.
    pub fn new(prompt: u32, pi: &[TokenId], prefix: &[TokenId], order: usize) -> Self {
        let pi = if pi.len() < order { pi } else { &[] };
        let slots = order - pi.len();
        let tail = &prefix[prefix.len().saturating_sub(slots)..];
        let mut window = Vec::with_capacity(order);
        window.extend_from_slice(pi);
        window.extend(std::iter::repeat_n(PAD, slots - tail.len()));
        window.extend_from_slice(tail);
        Self {
            prompt,
            window,
            pi_len: pi.len(),
        }
    }

    pub fn from_parts(prompt: u32, pi_len: usize, window: Vec<TokenId>) -> Self {
        Self { prompt, window, pi_len }
    }

    pub fn prompt(&self) -> u32 {
        self.prompt
    }

    pub fn window(&self) -> &[TokenId] {
        &self.window
    }

    pub fn pi_len(&self) -> usize {
        self.pi_len
    }
}

/// Gradient vectors keyed by context.
pub type GradMap = BTreeMap<ContextKey, Vec<f64>>;

/// Adds `scale * grad` into the entry for `key`.
pub fn accumulate(map: &mut GradMap, key: ContextKey, grad: &[f64], scale: f64) {
    let slot = map.entry(key).or_insert_with(|| vec![0.0; grad.len()]);
    for (s, g) in slot.iter_mut().zip(grad) {
        *s += scale * g;
    }
}

/// L2 norm over every entry of a gradient map.
pub fn grad_norm(map: &GradMap) -> f64 {
    map.values()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocab,
    order: usize,
    table: BTreeMap<ContextKey, Logits>,
}

impl Policy {
    /// The uniform policy: an empty table.
    pub fn new(vocab: Vocab, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::arg("context order must be positive"));
        }
        Ok(Self {
            vocab,
            order,
            table: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn table(&self) -> &BTreeMap<ContextKey, Logits> {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Student-side key: no privileged information.
    pub fn context(&self, prompt: u32, prefix: &[TokenId]) -> ContextKey {
        ContextKey::new(prompt, &[], prefix, self.order)
    }

    pub fn context_with_pi(&self, prompt: u32, pi: &[TokenId], prefix: &[TokenId]) -> ContextKey {
        ContextKey::new(prompt, pi, prefix, self.order)
    }

    pub fn logits_at(&self, key: &ContextKey) -> Logits {
        self.table
            .get(key)
            .cloned()
            .unwrap_or_else(|| Logits::zeros(self.vocab.size()))
    }

    pub fn set_logits(&mut self, key: ContextKey, logits: Logits) -> Result<()> {
        if logits.len() != self.vocab.size() {
            return Err(Error::arg(format!(
                "logit vector has {} entries, vocabulary has {}",
                logits.len(),
                self.vocab.size()
            )));
        }
        self.table.insert(key, logits);
        Ok(())
    }

    pub fn dist_at(&self, key: &ContextKey) -> Distribution {
        match self.table.get(key) {
            Some(z) => z.softmax(),
            None => Distribution::uniform(self.vocab.size()),
        }
    }

    /// `∇_z log p(token | key)` = one-hot(token) − p.
    pub fn grad_logprob(&self, key: &ContextKey, token: TokenId) -> Vec<f64> {
        score(&self.dist_at(key), token)
    }

    /// Samples one response. Seeded; equal seeds give equal trajectories.
    pub fn sample_trajectory(&self, prompt: u32, max_len: usize, seed: u64) -> Result<Trajectory> {
        let mut rng = rng_for(seed, &[]);
        self.sample_with(prompt, max_len, &Sampler::default(), &mut rng)
    }

    pub fn sample_with(
        &self,
        prompt: u32,
        max_len: usize,
        sampler: &Sampler,
        rng: &mut LabRng,
    ) -> Result<Trajectory> {
        if max_len == 0 {
            return Err(Error::arg("max length must be at least 1"));
        }
        let eos = self.vocab.eos();
        let mut tokens = Vec::with_capacity(max_len);
        let mut student_logprobs = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let dist = self.dist_at(&self.context(prompt, &tokens));
            let token = sampler.sample(&dist, rng);
            student_logprobs.push(dist.ln_prob(token));
            tokens.push(token);
            if token == eos {
                break;
            }
        }
        let truncated = tokens.last() != Some(&eos);
        Ok(Trajectory {
            prompt,
            tokens,
            student_logprobs,
            teacher_logprobs: None,
            truncated,
        })
    }

    /// Greedy continuation of `prefix` until end-of-sequence or `max_len` total tokens.
    pub fn greedy(&self, prompt: u32, prefix: &[TokenId], max_len: usize) -> Vec<TokenId> {
        greedy_continue(
            |p| self.dist_at(&self.context(prompt, p)),
            self.vocab.eos(),
            prefix,
            max_len,
        )
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "{SNAPSHOT_MAGIC}").unwrap();
        writeln!(text, "vocab {}", self.vocab.size()).unwrap();
        writeln!(text, "order {}", self.order).unwrap();
        writeln!(text, "entries {}", self.table.len()).unwrap();
        for (key, logits) in &self.table {
            write!(text, "{}", key.prompt).unwrap();
            for (slot, t) in key.window.iter().enumerate() {
                if slot < key.pi_len {
                    write!(text, " +{t}").unwrap();
                } else if *t == PAD {
                    text.push_str(" _");
                } else {
                    write!(text, " {t}").unwrap();
                }
            }
            text.push_str(" |");
            for v in logits.values() {
                write!(text, " {v:e}").unwrap();
            }
            text.push('\n');
        }
        out.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_snapshot(std::io::BufWriter::new(file))
    }

    pub fn read_snapshot<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Snapshot(format!("missing {what}")))
        };
        let magic = next("header")?;
        if magic.trim() != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot(format!("unexpected header `{magic}`")));
        }
        let field = |line: String, name: &str| -> Result<usize> {
            let rest = line
                .strip_prefix(name)
                .ok_or_else(|| Error::Snapshot(format!("expected `{name}` line, got `{line}`")))?;
            rest.trim()
                .parse()
                .map_err(|_| Error::Snapshot(format!("bad `{name}` value `{rest}`")))
        };
        let vocab = Vocab::new(field(next("vocab")?, "vocab")?)?;
        let order = field(next("order")?, "order")?;
        let entries = field(next("entries")?, "entries")?;
        let mut policy = Policy::new(vocab, order)?;
        for i in 0..entries {
            let line = next("entry")?;
            let (head, tail) = line
                .split_once('|')
                .ok_or_else(|| Error::Snapshot(format!("entry {i}: missing `|`")))?;
            let mut head = head.split_whitespace();
            let prompt: u32 = head
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Snapshot(format!("entry {i}: bad prompt id")))?;
            let mut pi_len = 0;
            let window = head
                .enumerate()
                .map(|(slot, s)| {
                    if s == "_" {
                        return Ok(PAD);
                    }
                    let digits = match s.strip_prefix('+') {
                        Some(d) if slot == pi_len => {
                            pi_len += 1;
                            d
                        }
                        Some(_) => return Err(Error::Snapshot(format!("entry {i}: PI token after prefix slot"))),
                        None => s,
                    };
                    digits
                        .parse::<TokenId>()
                        .map_err(|_| Error::Snapshot(format!("entry {i}: bad token `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if window.len() != order {
                return Err(Error::Snapshot(format!(
                    "entry {i}: window has {} slots, order is {order}",
                    window.len()
                )));
            }
            let values = tail
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Snapshot(format!("entry {i}: bad logit `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            policy.set_logits(ContextKey::from_parts(prompt, pi_len, window), Logits::new(values)?)?;
        }
        Ok(policy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_snapshot(std::io::BufReader::new(file))
    }
}

/// one-hot(token) − p.
pub fn score(dist: &Distribution, token: TokenId) -> Vec<f64> {
    let mut g: Vec<f64> = dist.probs().iter().map(|p| -p).collect();
    g[token as usize] += 1.0;
    g
}

/// Greedy decoding driven by any next-token distribution.
pub fn greedy_continue<F>(mut next: F, eos: TokenId, prefix: &[TokenId], max_len: usize) -> Vec<TokenId>
where
    F: FnMut(&[TokenId]) -> Distribution,
{
    let mut tokens = prefix.to_vec();
    if tokens.last() == Some(&eos) {
        return tokens;
    }
    while tokens.len() < max_len {
        let token = next(&tokens).argmax();
        tokens.push(token);
        if token == eos {
            break;
        }
    }
    tokens
}

/// Rollout sampling controls. Temperature reshapes the sampling distribution
/// only; recorded log-probabilities are always at temperature 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampler {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

impl Sampler {
    pub fn sampling_dist(&self, dist: &Distribution) -> Vec<f64> {
        let mut probs = if self.temperature == 1.0 {
            dist.probs().to_vec()
        } else {
            let scaled: Vec<f64> = dist
                .probs()
                .iter()
                .map(|p| crate::prob::safe_ln(*p) / self.temperature)
                .collect();
            softmax_slice(&scaled)
        };
        if self.top_p < 1.0 {
            let sorted = topk(&Distribution::from_normalized(probs.clone()), probs.len())
                .expect("k equals the vocabulary size");
            let mut mass = 0.0;
            let mut keep = vec![false; probs.len()];
            for (t, p) in sorted.entries() {
                keep[*t as usize] = true;
                mass += p;
                if mass >= self.top_p {
                    break;
                }
            }
            for (p, k) in probs.iter_mut().zip(&keep) {
                if !k {
                    *p = 0.0;
                }
            }
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
        }
        probs
    }

    pub fn sample(&self, dist: &Distribution, rng: &mut LabRng) -> TokenId {
        let probs = self.sampling_dist(dist);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_nonzero = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last_nonzero = i;
            }
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        last_nonzero as TokenId
    }
}

/// A sampled response with per-position log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: u32,
    pub tokens: Vec<TokenId>,
    /// `l_S(t)`: student log-probability of each sampled token.
    pub student_logprobs: Vec<f64>,
    /// `l_T(t)`: teacher log-probability of each sampled token, once attached.
    pub teacher_logprobs: Option<Vec<f64>>,
    /// No end-of-sequence within the length budget.
    pub truncated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Update rule for [`apply_update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay. Moments and bias correction are
    /// tracked per context key, so a key's first update has size ≈ `lr`.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    moments: BTreeMap<ContextKey, AdamMoments>,
}

#[derive(Debug, Clone, PartialEq)]
struct AdamMoments {
    steps: i32,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// One descent step `z ← z − lr · update(grad)`. Pure: returns a new policy and state.
pub fn apply_update(
    policy: &Policy,
    grads: &GradMap,
    optimizer: &Optimizer,
    state: &OptimizerState,
    lr: f64,
) -> Result<(Policy, OptimizerState)> {
    let mut next = policy.clone();
    let mut next_state = state.clone();
    update_in_place(&mut next, grads, optimizer, &mut next_state, lr)?;
    Ok((next, next_state))
}

/// [`apply_update`] without copying the table. On error neither the policy
/// nor the state is modified.
pub fn update_in_place(
    policy: &mut Policy,
    grads: &GradMap,
    optimizer: &Optimizer,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let n = policy.vocab.size();
    if let Some((key, g)) = grads.iter().find(|(_, g)| g.len() != n) {
        return Err(Error::arg(format!(
            "gradient for prompt {} has {} entries, vocabulary has {n}",
            key.prompt,
            g.len()
        )));
    }
    let mut staged = Vec::with_capacity(grads.len());
    for (key, grad) in grads {
        let zero = grad.iter().all(|g| *g == 0.0);
        let mut logits = policy.logits_at(key);
        let mut moments = None;
        match *optimizer {
            Optimizer::Sgd => {
                if zero {
                    continue;
                }
                for (z, g) in logits.values_mut().iter_mut().zip(grad) {
                    *z -= lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let mut m = match state.moments.get(key) {
                    Some(m) => m.clone(),
                    None if zero => continue,
                    None => AdamMoments {
                        steps: 0,
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                    },
                };
                m.steps += 1;
                let c1 = 1.0 - beta1.powi(m.steps);
                let c2 = 1.0 - beta2.powi(m.steps);
                for i in 0..n {
                    m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * grad[i];
                    m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let step = (m.first[i] / c1) / ((m.second[i] / c2).sqrt() + eps);
                    let z = &mut logits.values_mut()[i];
                    *z -= lr * (step + weight_decay * *z);
                }
                moments = Some(m);
            }
        }
        if logits.values().iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidLogits(format!(
                "update produced non-finite logits for prompt {}",
                key.prompt
            )));
        }
        staged.push((key, logits, moments));
    }
    for (key, logits, moments) in staged {
        if let Some(m) = moments {
            state.moments.insert(key.clone(), m);
        }
        policy.table.insert(key.clone(), logits);
    }
    Ok(())
}
