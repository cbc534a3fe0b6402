//! On-policy training loops: OPD, OPSD, RLVR, SFT and the combined advantage.
//!
//! Every step is a pure function of its inputs and an explicit RNG. Batches
//! draw `prompts_per_batch` instances uniformly with replacement and
//! `samples_per_prompt` rollouts for each. Distillation losses are averaged
//! over the non-skipped positions of a trajectory, then over trajectories;
//! only the direct gradient term is used.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TeacherSource};
use crate::error::{Error, Result};
use crate::metrics::{repetition_flags, MetricBundle, TokenDiagnostics};
use crate::objectives::{select_support, Objective, TopKSelector};
use crate::policy::{accumulate, apply_update, update_in_place, grad_norm, score, GradMap, Optimizer, OptimizerState, Policy, Sampler, Trajectory};
use crate::prob::{entropy, Distribution, TokenId};
use crate::rng::{rng_for, LabRng};
use crate::tasks::{greedy_accuracy, reward, sample_instance, FamilyKind, TaskFamily, TaskInstance};
use crate::teacher::{consensus_optimum, ema_update, teacher_dist, OracleTeacher, PrivilegedInfo, Teacher};
use crate::telemetry::TelemetryWriter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Opd,
    Opsd,
    Rlvr,
    Sft,
    Combined,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Opd => "opd",
            Algorithm::Opsd => "opsd",
            Algorithm::Rlvr => "rlvr",
            Algorithm::Sft => "sft",
            Algorithm::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub selector: TopKSelector,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub prompts_per_batch: usize,
    pub samples_per_prompt: usize,
    pub max_response_len: usize,
    pub sampler: Sampler,
    /// Subtract 1 from the sampled-token advantage (off by default).
    pub include_minus_one: bool,
    /// Weight of the distillation advantage in combined mode.
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub overlap_k: usize,
    pub repetition_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::TopkReverseKlStopgrad,
            selector: TopKSelector::new(crate::objectives::SupportMode::Student, 20),
            optimizer: Optimizer::adam_default(),
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            warmup_fraction: 0.0,
            prompts_per_batch: 16,
            samples_per_prompt: 4,
            max_response_len: 12,
            sampler: Sampler::default(),
            include_minus_one: false,
            lambda: 0.0,
            steps: 100,
            seed: 0,
            overlap_k: crate::metrics::DEFAULT_OVERLAP_K,
            repetition_n: crate::metrics::DEFAULT_NGRAM,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let total = self.steps.max(1) as f64;
                let warmup = (self.warmup_fraction * total).round();
                let s = step as f64;
                if s < warmup {
                    self.learning_rate * (s + 1.0) / warmup
                } else {
                    let progress = (s - warmup) / (total - warmup).max(1.0);
                    0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

/// One telemetry row.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub phase: String,
    pub loss: Option<f64>,
    pub reward: Option<f64>,
    pub mean_len: Option<f64>,
    pub max_len: Option<usize>,
    pub trunc_ratio: Option<f64>,
    pub skip_rate: Option<f64>,
    pub grad_norm: Option<f64>,
    pub metrics: MetricBundle,
    pub eval_accuracy: Option<f64>,
}

impl StepTelemetry {
    fn from_batch(phase: &str, trajs: &[&Trajectory]) -> Self {
        let n = trajs.len().max(1) as f64;
        Self {
            phase: phase.to_string(),
            mean_len: Some(trajs.iter().map(|t| t.len() as f64).sum::<f64>() / n),
            max_len: Some(trajs.iter().map(|t| t.len()).max().unwrap_or(0)),
            trunc_ratio: Some(trajs.iter().filter(|t| t.truncated).count() as f64 / n),
            ..Default::default()
        }
    }
}

/// Rollouts for one step, grouped by sampled instance.
pub struct Batch<'a> {
    pub groups: Vec<(&'a TaskInstance, Vec<Trajectory>)>,
}

impl Batch<'_> {
    pub fn trajectories(&self) -> impl Iterator<Item = (&TaskInstance, &Trajectory)> {
        self.groups.iter().flat_map(|(i, ts)| ts.iter().map(move |t| (*i, t)))
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sample_batch<'a>(
    student: &Policy,
    family: &'a TaskFamily,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<Batch<'a>> {
    let mut groups = Vec::with_capacity(cfg.prompts_per_batch);
    for _ in 0..cfg.prompts_per_batch {
        let inst = sample_instance(family, rng);
        let trajs = (0..cfg.samples_per_prompt)
            .map(|_| student.sample_with(inst.prompt, cfg.max_response_len, &cfg.sampler, rng))
            .collect::<Result<Vec<_>>>()?;
        groups.push((inst, trajs));
    }
    Ok(Batch { groups })
}

/// Distillation gradient, loss and diagnostics for a batch.
#[derive(Debug, Clone)]
pub struct DistillGrad {
    pub grads: GradMap,
    pub loss: f64,
    pub skip_rate: f64,
    pub diagnostics: TokenDiagnostics,
}

/// Evaluates the configured objective at every generated position against
/// the teacher. With `use_pi` the teacher sees each instance's PI.
pub fn distill_gradient(
    student: &Policy,
    teacher: &Teacher,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    use_pi: bool,
) -> Result<DistillGrad> {
    let n_traj = batch.len().max(1) as f64;
    let none = PrivilegedInfo::none();
    let mut out = DistillGrad {
        grads: GradMap::new(),
        loss: 0.0,
        skip_rate: 0.0,
        diagnostics: TokenDiagnostics::default(),
    };
    let (mut positions, mut skipped) = (0usize, 0usize);
    for (inst, traj) in batch.trajectories() {
        let pi = if use_pi { &inst.pi } else { &none };
        let mut reports = Vec::with_capacity(traj.len());
        let (mut sdists, mut tdists) = (Vec::new(), Vec::new());
        for t in 0..traj.len() {
            let prefix = &traj.tokens[..t];
            let key = student.context(traj.prompt, prefix);
            let z = student.logits_at(&key);
            let p = z.softmax();
            let q = teacher_dist(teacher, student, traj.prompt, pi, prefix);
            if q.len() != p.len() {
                return Err(Error::arg("teacher and student vocabularies differ"));
            }
            let support = if cfg.objective.uses_support() {
                select_support(&cfg.selector, &p, &q)?
            } else {
                Vec::new()
            };
            reports.push((key, cfg.objective.evaluate(&z, &q, &support)?));
            sdists.push(p);
            tdists.push(q);
        }
        let active = reports.iter().filter(|(_, r)| !r.skipped).count();
        positions += reports.len();
        skipped += reports.len() - active;
        if active > 0 {
            let scale = 1.0 / (active as f64 * n_traj);
            for (key, r) in reports {
                if !r.skipped {
                    out.loss += r.loss * scale;
                    accumulate(&mut out.grads, key, &r.grad, scale);
                }
            }
        }
        let k = cfg.overlap_k.min(student.vocab().size());
        out.diagnostics
            .extend(TokenDiagnostics::for_response(&traj.tokens, &sdists, &tdists, k, cfg.repetition_n)?);
    }
    out.skip_rate = if positions == 0 {
        0.0
    } else {
        skipped as f64 / positions as f64
    };
    Ok(out)
}

type StepGrads = (GradMap, StepTelemetry);

fn with_norm(grads: GradMap, mut tel: StepTelemetry) -> Result<StepGrads> {
    tel.grad_norm = Some(grad_norm(&grads));
    Ok((grads, tel))
}

fn finish_step(
    student: &Policy,
    step: Result<StepGrads>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<(Policy, StepTelemetry)> {
    let (grads, tel) = step?;
    let (next, state) = apply_update(student, &grads, &cfg.optimizer, opt, lr)?;
    *opt = state;
    Ok((next, tel))
}

fn distill_grads(
    phase: &str,
    student: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    rng: &mut LabRng,
    use_pi: bool,
) -> Result<StepGrads> {
    let batch = sample_batch(student, family, cfg, rng)?;
    let d = distill_gradient(student, teacher, &batch, cfg, use_pi)?;
    let trajs: Vec<&Trajectory> = batch.trajectories().map(|(_, t)| t).collect();
    let mut tel = StepTelemetry::from_batch(phase, &trajs);
    tel.loss = Some(d.loss);
    tel.skip_rate = Some(d.skip_rate);
    tel.reward = Some(batch_reward(family, &batch));
    tel.metrics = MetricBundle::from_diagnostics(&d.diagnostics);
    with_norm(d.grads, tel)
}

fn batch_reward(family: &TaskFamily, batch: &Batch<'_>) -> f64 {
    let total: f64 = batch.trajectories().map(|(i, t)| reward(family, i, &t.tokens)).sum();
    total / batch.len().max(1) as f64
}

/// On-policy distillation: the teacher sees the same context as the student.
#[allow(clippy::too_many_arguments)]
pub fn opd_step(
    student: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    rng: &mut LabRng,
) -> Result<(Policy, StepTelemetry)> {
    finish_step(student, distill_grads("opd", student, teacher, family, cfg, rng, false), cfg, opt, lr)
}

/// On-policy self-distillation: the teacher additionally sees the PI of the
/// instance each rollout was drawn for.
#[allow(clippy::too_many_arguments)]
pub fn opsd_step(
    student: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    rng: &mut LabRng,
) -> Result<(Policy, StepTelemetry)> {
    finish_step(student, opsd_grads(student, teacher, family, cfg, rng), cfg, opt, lr)
}

fn opsd_grads(
    student: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<StepGrads> {
    if family.pi_kind() == crate::teacher::PiKind::None {
        return Err(Error::arg("self-distillation needs privileged information"));
    }
    distill_grads("opsd", student, teacher, family, cfg, rng, true)
}

/// Group-relative advantages `a = r − mean(group)`, one vector per group.
pub fn group_advantages(rewards: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rewards
        .iter()
        .map(|g| {
            let mean = g.iter().sum::<f64>() / g.len().max(1) as f64;
            g.iter().map(|r| r - mean).collect()
        })
        .collect()
}

/// REINFORCE gradient of `−Σ_traj (1/N) (1/T) Σ_t A_t log p(y_t)` where
/// `advantage(traj, t)` supplies `A_t`.
fn reinforce_grads<F>(student: &Policy, batch: &Batch<'_>, mut advantage: F) -> (GradMap, f64)
where
    F: FnMut(usize, &Trajectory, usize) -> f64,
{
    let n = batch.len().max(1) as f64;
    let mut grads = GradMap::new();
    let mut surrogate = 0.0;
    for (j, (_, traj)) in batch.trajectories().enumerate() {
        let scale = 1.0 / (traj.len().max(1) as f64 * n);
        for t in 0..traj.len() {
            let a = advantage(j, traj, t);
            if a == 0.0 {
                continue;
            }
            let key = student.context(traj.prompt, &traj.tokens[..t]);
            let g = score(&student.dist_at(&key), traj.tokens[t]);
            accumulate(&mut grads, key, &g, -a * scale);
            surrogate -= a * traj.student_logprobs[t] * scale;
        }
    }
    (grads, surrogate)
}

fn batch_rewards(family: &TaskFamily, batch: &Batch<'_>) -> Vec<Vec<f64>> {
    batch
        .groups
        .iter()
        .map(|(inst, ts)| ts.iter().map(|t| reward(family, inst, &t.tokens)).collect())
        .collect()
}

fn student_only_metrics(student: &Policy, batch: &Batch<'_>, n: usize) -> Result<MetricBundle> {
    let (mut rep, mut ent) = (Vec::new(), Vec::new());
    for (_, traj) in batch.trajectories() {
        rep.extend(repetition_flags(&traj.tokens, n)?.flags);
        for t in 0..traj.len() {
            ent.push(entropy(&student.dist_at(&student.context(traj.prompt, &traj.tokens[..t]))));
        }
    }
    Ok(MetricBundle::student_only(&rep, &ent))
}

/// GRPO-style policy gradient on exact-match rewards.
pub fn rlvr_step(
    policy: &Policy,
    family: &TaskFamily,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    rng: &mut LabRng,
) -> Result<(Policy, StepTelemetry)> {
    finish_step(policy, rlvr_grads(policy, family, cfg, rng), cfg, opt, lr)
}

fn rlvr_grads(policy: &Policy, family: &TaskFamily, cfg: &TrainConfig, rng: &mut LabRng) -> Result<StepGrads> {
    if cfg.samples_per_prompt < 2 {
        return Err(Error::arg("group-relative advantages need at least 2 rollouts per prompt"));
    }
    let batch = sample_batch(policy, family, cfg, rng)?;
    let grads = rlvr_gradient(policy, family, &batch);
    let trajs: Vec<&Trajectory> = batch.trajectories().map(|(_, t)| t).collect();
    let mut tel = StepTelemetry::from_batch("rlvr", &trajs);
    tel.loss = Some(grads.1);
    tel.reward = Some(batch_reward(family, &batch));
    tel.skip_rate = Some(0.0);
    tel.metrics = student_only_metrics(policy, &batch, cfg.repetition_n)?;
    with_norm(grads.0, tel)
}

/// Gradient and surrogate loss of [`rlvr_step`] for a fixed batch.
pub fn rlvr_gradient(policy: &Policy, family: &TaskFamily, batch: &Batch<'_>) -> (GradMap, f64) {
    let adv: Vec<f64> = group_advantages(&batch_rewards(family, batch)).concat();
    reinforce_grads(policy, batch, |j, _, _| adv[j])
}

/// Per-token advantage `A_RL + λ (l_T − l_S)` in one REINFORCE update; the
/// teacher sees the student context.
#[allow(clippy::too_many_arguments)]
pub fn combined_step(
    policy: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    rng: &mut LabRng,
) -> Result<(Policy, StepTelemetry)> {
    finish_step(policy, combined_grads(policy, teacher, family, cfg, rng), cfg, opt, lr)
}

fn combined_grads(
    policy: &Policy,
    teacher: &Teacher,
    family: &TaskFamily,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<StepGrads> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::arg("lambda must be non-negative"));
    }
    let mut batch = sample_batch(policy, family, cfg, rng)?;
    attach_teacher_logprobs(policy, teacher, &mut batch);
    let (grads, surrogate) = combined_gradient(policy, family, &batch, cfg.lambda, cfg.include_minus_one);
    let trajs: Vec<&Trajectory> = batch.trajectories().map(|(_, t)| t).collect();
    let mut tel = StepTelemetry::from_batch("combined", &trajs);
    tel.loss = Some(surrogate);
    tel.reward = Some(batch_reward(family, &batch));
    tel.skip_rate = Some(0.0);
    tel.metrics = student_only_metrics(policy, &batch, cfg.repetition_n)?;
    let dl: Vec<f64> = batch
        .trajectories()
        .flat_map(|(_, t)| {
            let lt = t.teacher_logprobs.clone().unwrap_or_default();
            lt.into_iter().zip(t.student_logprobs.clone()).map(|(a, b)| a - b)
        })
        .collect();
    if !dl.is_empty() {
        tel.metrics.delta_logprob = Some(dl.iter().sum::<f64>() / dl.len() as f64);
    }
    with_norm(grads, tel)
}

/// Fills `teacher_logprobs` of every rollout (student context, no PI).
pub fn attach_teacher_logprobs(student: &Policy, teacher: &Teacher, batch: &mut Batch<'_>) {
    let none = PrivilegedInfo::none();
    for (_, trajs) in &mut batch.groups {
        for traj in trajs {
            let lt = (0..traj.len())
                .map(|t| teacher_dist(teacher, student, traj.prompt, &none, &traj.tokens[..t]).ln_prob(traj.tokens[t]))
                .collect();
            traj.teacher_logprobs = Some(lt);
        }
    }
}

/// Gradient and surrogate loss of [`combined_step`] for a fixed batch with
/// teacher log-probabilities attached.
pub fn combined_gradient(
    policy: &Policy,
    family: &TaskFamily,
    batch: &Batch<'_>,
    lambda: f64,
    include_minus_one: bool,
) -> (GradMap, f64) {
    let adv: Vec<f64> = group_advantages(&batch_rewards(family, batch)).concat();
    reinforce_grads(policy, batch, |j, traj, t| {
        let mut a = traj
            .teacher_logprobs
            .as_ref()
            .map_or(0.0, |lt| lt[t] - traj.student_logprobs[t]);
        if include_minus_one {
            a -= 1.0;
        }
        adv[j] + lambda * a
    })
}

/// A supervised trace: prompt id and full response.
pub type Trace = (u32, Vec<TokenId>);

/// Mean per-token negative log-likelihood of `traces` under `policy`.
pub fn trace_nll(policy: &Policy, traces: &[Trace]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (prompt, tokens) in traces {
        for t in 0..tokens.len() {
            total -= policy.dist_at(&policy.context(*prompt, &tokens[..t])).ln_prob(tokens[t]);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Full-batch maximum likelihood on `traces`, token-averaged.
pub fn sft_step(
    policy: &Policy,
    traces: &[Trace],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<(Policy, StepTelemetry)> {
    finish_step(policy, sft_grads(policy, traces), cfg, opt, lr)
}

fn sft_grads(policy: &Policy, traces: &[Trace]) -> Result<StepGrads> {
    if traces.is_empty() {
        return Err(Error::arg("empty trace set"));
    }
    let count: usize = traces.iter().map(|(_, t)| t.len()).sum();
    let scale = 1.0 / count.max(1) as f64;
    let mut grads = GradMap::new();
    let mut nll = 0.0;
    for (prompt, tokens) in traces {
        for t in 0..tokens.len() {
            let key = policy.context(*prompt, &tokens[..t]);
            let d = policy.dist_at(&key);
            nll -= d.ln_prob(tokens[t]) * scale;
            accumulate(&mut grads, key, &score(&d, tokens[t]), -scale);
        }
    }
    let lens: Vec<usize> = traces.iter().map(|(_, t)| t.len()).collect();
    let tel = StepTelemetry {
        phase: "sft".into(),
        loss: Some(nll),
        mean_len: Some(count as f64 / traces.len() as f64),
        max_len: lens.iter().max().copied(),
        trunc_ratio: Some(0.0),
        skip_rate: Some(0.0),
        ..Default::default()
    };
    with_norm(grads, tel)
}

/// Samples one response from an arbitrary next-token distribution.
pub fn sample_sequence<F>(mut next: F, eos: TokenId, max_len: usize, sampler: &Sampler, rng: &mut LabRng) -> Vec<TokenId>
where
    F: FnMut(&[TokenId]) -> Distribution,
{
    let mut tokens = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let token = sampler.sample(&next(&tokens), rng);
        tokens.push(token);
        if token == eos {
            break;
        }
    }
    tokens
}

/// Teacher traces for SFT: `samples` teacher rollouts (with PI), kept only
/// when verified correct, then deduplicated.
pub fn prepare_sft_traces(
    teacher: &Teacher,
    student: &Policy,
    family: &TaskFamily,
    samples: usize,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Vec<Trace> {
    let eos = family.task_vocab().eos();
    let mut kept = BTreeSet::new();
    for _ in 0..samples {
        let inst = sample_instance(family, rng);
        let tokens = sample_sequence(
            |p| teacher_dist(teacher, student, inst.prompt, &inst.pi, p),
            eos,
            cfg.max_response_len,
            &cfg.sampler,
            rng,
        );
        if reward(family, inst, &tokens) == 1.0 {
            kept.insert((inst.prompt, tokens));
        }
    }
    kept.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Greedy exact match over every family instance.
    pub accuracy: f64,
    /// Instance-answer only: TV between the student's first-answer-token
    /// distribution and the consensus of the PI-conditioned teachers, worst
    /// prompt and mean over prompts.
    pub consensus_tv_max: Option<f64>,
    pub consensus_tv_mean: Option<f64>,
}

/// Consensus of the PI-conditioned teachers at the first answer position of
/// `prompt`, equally weighted over the prompt's instances.
pub fn answer_consensus(teacher: &Teacher, student: &Policy, family: &TaskFamily, prompt: u32) -> Result<Distribution> {
    let ans = [family.task_vocab().ans()];
    let qs: Vec<Distribution> = family
        .instances_of(prompt)
        .map(|i| teacher_dist(teacher, student, prompt, &i.pi, &ans))
        .collect();
    let w = vec![1.0 / qs.len() as f64; qs.len()];
    consensus_optimum(&qs, &w)
}

pub fn evaluate(policy: &Policy, family: &TaskFamily, teacher: Option<&Teacher>, max_len: usize) -> Result<EvalReport> {
    let accuracy = greedy_accuracy(policy, family, max_len);
    let (mut tv_max, mut tv_mean) = (None, None);
    if let (FamilyKind::InstanceAnswer, Some(teacher)) = (family.kind(), teacher) {
        let ans = [family.task_vocab().ans()];
        let mut tvs = Vec::with_capacity(family.prompts());
        for p in 0..family.prompts() as u32 {
            let c = answer_consensus(teacher, policy, family, p)?;
            tvs.push(policy.dist_at(&policy.context(p, &ans)).tv(&c));
        }
        tv_max = tvs.iter().copied().reduce(f64::max);
        tv_mean = Some(tvs.iter().sum::<f64>() / tvs.len() as f64);
    }
    Ok(EvalReport {
        accuracy,
        consensus_tv_max: tv_max,
        consensus_tv_mean: tv_mean,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseReport {
    pub algorithm: Algorithm,
    pub teacher: String,
    pub steps: usize,
    pub eval: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_traces: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_nll_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_nll_after: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub initial: EvalReport,
    pub phases: Vec<PhaseReport>,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
}

/// Outputs of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub policy: Policy,
    pub telemetry: Vec<StepTelemetry>,
    pub promoted: Option<Policy>,
}

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const POLICY_FILE: &str = "policy.txt";
pub const TEACHER_FILE: &str = "teacher.txt";
pub const EVAL_FILE: &str = "eval.json";
pub const ORACLE_FILE: &str = "oracle.json";

fn build_teacher(
    source: &TeacherSource,
    cfg: &ExperimentConfig,
    family: &TaskFamily,
    student: &Policy,
    promoted: Option<&Policy>,
) -> Result<Teacher> {
    match source {
        TeacherSource::Oracle => Teacher::oracle(family.clone(), cfg.teacher.oracle_temperature),
        TeacherSource::Frozen => Ok(Teacher::Frozen(student.clone())),
        TeacherSource::Ema => Teacher::ema(student.clone(), cfg.teacher.ema_alpha),
        TeacherSource::SelfRef => Ok(Teacher::SelfRef),
        TeacherSource::Promoted => promoted
            .cloned()
            .map(Teacher::Frozen)
            .ok_or_else(|| Error::Config {
                path: "teacher.teacher_model".into(),
                message: "no earlier phase promoted a teacher".into(),
            }),
        TeacherSource::Snapshot(path) => Ok(Teacher::Frozen(Policy::load(path)?)),
    }
}

/// Runs every configured phase in memory. Fully determined by `cfg`.
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let family = cfg.task.build()?;
    let mut student = Policy::new(family.vocab(), cfg.model.context_order)?;
    let max_len = cfg.rollout.max_rollout_response_length;
    let eval_teacher = Teacher::oracle(family.clone(), cfg.teacher.oracle_temperature)?;
    let eval = |p: &Policy, t: &Teacher| evaluate(p, &family, Some(t), max_len);

    let initial = eval(&student, &eval_teacher)?;
    let mut telemetry = vec![StepTelemetry {
        step: 0,
        phase: "init".into(),
        eval_accuracy: Some(initial.accuracy),
        ..Default::default()
    }];
    let mut phases = Vec::new();
    let mut promoted: Option<Policy> = None;
    let mut global = 0usize;

    for (index, phase) in cfg.phases.iter().enumerate() {
        let tc = cfg.train_config(index);
        if phase.reset_student {
            student = Policy::new(family.vocab(), cfg.model.context_order)?;
        }
        let source = cfg.teacher_source(index);
        let mut teacher = build_teacher(source, cfg, &family, &student, promoted.as_ref())?;
        let mut opt = OptimizerState::default();
        let mut report = PhaseReport {
            algorithm: phase.algorithm,
            teacher: source.to_string(),
            steps: phase.steps,
            eval: initial.clone(),
            sft_traces: None,
            trace_nll_before: None,
            trace_nll_after: None,
        };
        let traces = if phase.algorithm == Algorithm::Sft {
            let mut rng = rng_for(cfg.seed, &[index as u64, u64::MAX]);
            let traces = prepare_sft_traces(&teacher, &student, &family, phase.sft_traces, &tc, &mut rng);
            report.sft_traces = Some(traces.len());
            report.trace_nll_before = Some(trace_nll(&student, &traces));
            traces
        } else {
            Vec::new()
        };
        for step in 0..phase.steps {
            let mut rng = rng_for(cfg.seed, &[index as u64, step as u64]);
            let lr = tc.lr_at(step);
            let (grads, mut tel) = match phase.algorithm {
                Algorithm::Opd => distill_grads("opd", &student, &teacher, &family, &tc, &mut rng, false)?,
                Algorithm::Opsd => opsd_grads(&student, &teacher, &family, &tc, &mut rng)?,
                Algorithm::Rlvr => rlvr_grads(&student, &family, &tc, &mut rng)?,
                Algorithm::Sft => sft_grads(&student, &traces)?,
                Algorithm::Combined => combined_grads(&student, &teacher, &family, &tc, &mut rng)?,
            };
            update_in_place(&mut student, &grads, &tc.optimizer, &mut opt, lr)?;
            if matches!(teacher, Teacher::Ema { .. }) {
                teacher = ema_update(&teacher, &student)?;
            }
            global += 1;
            tel.step = global;
            let last = step + 1 == phase.steps;
            if last || (cfg.eval.every > 0 && (step + 1) % cfg.eval.every == 0) {
                tel.eval_accuracy = Some(greedy_accuracy(&student, &family, max_len));
            }
            telemetry.push(tel);
        }
        if phase.algorithm == Algorithm::Sft {
            report.trace_nll_after = Some(trace_nll(&student, &traces));
        }
        report.eval = eval(&student, &eval_teacher)?;
        phases.push(report);
        if phase.promote_to_teacher {
            promoted = Some(student.clone());
        }
    }
    let final_eval = eval(&student, &eval_teacher)?;
    Ok(RunOutput {
        report: RunReport {
            seed: cfg.seed,
            initial,
            phases,
            final_eval,
        },
        policy: student,
        telemetry,
        promoted,
    })
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub telemetry: PathBuf,
    pub policy: PathBuf,
    pub eval: PathBuf,
    /// Binding of the task oracle, servable as a teacher.
    pub oracle: PathBuf,
    pub teacher: Option<PathBuf>,
}

/// Runs the experiment and writes `telemetry.csv`, `policy.txt`,
/// `eval.json`, `oracle.json` (and `teacher.txt` when a phase promoted a teacher).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(RunOutput, RunFiles)> {
    let out = run_in_memory(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let files = RunFiles {
        telemetry: out_dir.join(TELEMETRY_FILE),
        policy: out_dir.join(POLICY_FILE),
        eval: out_dir.join(EVAL_FILE),
        oracle: out_dir.join(ORACLE_FILE),
        teacher: out.promoted.as_ref().map(|_| out_dir.join(TEACHER_FILE)),
    };
    let mut w = TelemetryWriter::create(&files.telemetry)?;
    for row in &out.telemetry {
        w.write(row)?;
    }
    w.finish()?;
    out.policy.save(&files.policy)?;
    if let (Some(p), Some(path)) = (&out.promoted, &files.teacher) {
        p.save(path)?;
    }
    let json = serde_json::to_string_pretty(&out.report).expect("reports serialize");
    std::fs::write(&files.eval, json + "\n").map_err(|e| Error::file(&files.eval, e))?;
    let oracle = OracleTeacher::new(cfg.task.build()?, cfg.teacher.oracle_temperature)?;
    std::fs::write(&files.oracle, oracle.to_json() + "\n").map_err(|e| Error::file(&files.oracle, e))?;
    Ok((out, files))
}
