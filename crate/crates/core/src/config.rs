//! Experiment configuration files (TOML).
//!
//! Unknown keys are rejected and every error names the offending key path,
//! e.g. `optimizer.learning_rate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Estimator, Objective, SupportMode, TopKSelector};
use crate::policy::{Optimizer, Sampler, DEFAULT_CONTEXT_ORDER};
use crate::tasks::TaskSpec;
use crate::trainer::{Algorithm, LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(rename = "phase", default)]
    pub phases: Vec<PhaseSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub context_order: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context_order: DEFAULT_CONTEXT_ORDER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub prompts_per_batch: usize,
    pub samples_per_prompt: usize,
    pub max_rollout_response_length: usize,
    pub rollout_temperature: f64,
    pub rollout_top_p: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            prompts_per_batch: 16,
            samples_per_prompt: 4,
            max_rollout_response_length: 12,
            rollout_temperature: 1.0,
            rollout_top_p: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerSection {
    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    ReverseKlFull,
    ForwardKlFull,
    JsdFull,
    TopkReverseKl,
    TopkReverseKlStopgrad,
    TopkReverseKlRenorm,
    TopkReverseKlTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub training_objective: ObjectiveKind,
    pub top_k: usize,
    pub topk_set: SupportMode,
    pub jsd_beta: f64,
    pub include_minus_one: bool,
    pub sampled_estimator: Estimator,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self {
            training_objective: ObjectiveKind::TopkReverseKlStopgrad,
            top_k: 20,
            topk_set: SupportMode::Student,
            jsd_beta: 0.5,
            include_minus_one: false,
            sampled_estimator: Estimator::K1,
        }
    }
}

impl ObjectiveSection {
    pub fn objective(&self, kind: ObjectiveKind) -> Objective {
        match kind {
            ObjectiveKind::ReverseKlFull => Objective::ReverseKlFull,
            ObjectiveKind::ForwardKlFull => Objective::ForwardKlFull,
            ObjectiveKind::JsdFull => Objective::Jsd { beta: self.jsd_beta },
            ObjectiveKind::TopkReverseKl => Objective::TopkReverseKl,
            ObjectiveKind::TopkReverseKlStopgrad => Objective::TopkReverseKlStopgrad,
            ObjectiveKind::TopkReverseKlRenorm => Objective::TopkReverseKlRenorm,
            ObjectiveKind::TopkReverseKlTail => Objective::TopkReverseKlTail,
        }
    }
}

/// Where a phase's teacher comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TeacherSource {
    /// Analytic task oracle.
    Oracle,
    /// The student as it was when the phase began.
    Frozen,
    Ema,
    SelfRef,
    /// The policy handed over by an earlier phase with `promote_to_teacher`.
    Promoted,
    Snapshot(PathBuf),
}

impl std::str::FromStr for TeacherSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "oracle" => TeacherSource::Oracle,
            "frozen-step0" | "frozen" => TeacherSource::Frozen,
            "ema" => TeacherSource::Ema,
            "self" => TeacherSource::SelfRef,
            "promoted" => TeacherSource::Promoted,
            other => match other.strip_prefix("snapshot:") {
                Some(path) if !path.is_empty() => TeacherSource::Snapshot(PathBuf::from(path)),
                _ => {
                    return Err(format!(
                        "unknown teacher `{other}` (expected oracle, frozen-step0, ema, self, promoted or snapshot:PATH)"
                    ))
                }
            },
        })
    }
}

impl std::fmt::Display for TeacherSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherSource::Oracle => f.write_str("oracle"),
            TeacherSource::Frozen => f.write_str("frozen-step0"),
            TeacherSource::Ema => f.write_str("ema"),
            TeacherSource::SelfRef => f.write_str("self"),
            TeacherSource::Promoted => f.write_str("promoted"),
            TeacherSource::Snapshot(p) => write!(f, "snapshot:{}", p.display()),
        }
    }
}

impl Serialize for TeacherSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TeacherSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub teacher_model: TeacherSource,
    pub oracle_temperature: f64,
    pub ema_alpha: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            teacher_model: TeacherSource::Oracle,
            oracle_temperature: 0.1,
            ema_alpha: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate every this many steps; 0 evaluates only at phase ends.
    pub every: usize,
    pub overlap_k: usize,
    pub repetition_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 50,
            overlap_k: crate::metrics::DEFAULT_OVERLAP_K,
            repetition_n: crate::metrics::DEFAULT_NGRAM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub algorithm: Algorithm,
    pub steps: usize,
    #[serde(default)]
    pub lambda: f64,
    /// SFT: teacher samples drawn before filtering and deduplication.
    #[serde(default = "default_sft_traces")]
    pub sft_traces: usize,
    /// Hand the trained policy to later phases as the `promoted` teacher.
    #[serde(default)]
    pub promote_to_teacher: bool,
    /// Restart from the uniform policy before this phase.
    #[serde(default)]
    pub reset_student: bool,
    #[serde(default)]
    pub teacher_model: Option<TeacherSource>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub training_objective: Option<ObjectiveKind>,
    #[serde(default)]
    pub samples_per_prompt: Option<usize>,
}

fn default_sft_traces() -> usize {
    256
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::from("."),
            message: e.message().to_string(),
        })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative snapshot paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |src: &mut TeacherSource| {
            if let TeacherSource::Snapshot(p) = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.teacher.teacher_model);
        for phase in &mut cfg.phases {
            if let Some(src) = phase.teacher_model.as_mut() {
                resolve(src);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if self.phases.is_empty() {
            return fail("phase", "at least one [[phase]] is required".into());
        }
        if self.model.context_order == 0 {
            return fail("model.context_order", "must be positive".into());
        }
        let r = &self.rollout;
        if r.prompts_per_batch == 0 || r.samples_per_prompt == 0 || r.max_rollout_response_length == 0 {
            return fail("rollout", "batch sizes and response length must be positive".into());
        }
        if !(r.rollout_temperature > 0.0) {
            return fail("rollout.rollout_temperature", "must be positive".into());
        }
        if !(r.rollout_top_p > 0.0 && r.rollout_top_p <= 1.0) {
            return fail("rollout.rollout_top_p", "must lie in (0, 1]".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return fail("optimizer.learning_rate", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            return fail("optimizer.warmup_fraction", "must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&o.adam_beta1) || !(0.0..1.0).contains(&o.adam_beta2) {
            return fail("optimizer", "adam betas must lie in [0, 1)".into());
        }
        if self.objective.top_k == 0 {
            return fail("objective.top_k", "must be positive".into());
        }
        if !(self.objective.jsd_beta > 0.0 && self.objective.jsd_beta < 1.0) {
            return fail("objective.jsd_beta", "must lie in (0, 1)".into());
        }
        if !(self.teacher.oracle_temperature > 0.0) {
            return fail("teacher.oracle_temperature", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.teacher.ema_alpha) {
            return fail("teacher.ema_alpha", "must lie in [0, 1)".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.lambda >= 0.0) {
                return fail(&format!("phase[{i}].lambda"), "must be non-negative".into());
            }
            let samples = p.samples_per_prompt.unwrap_or(r.samples_per_prompt);
            if p.algorithm == Algorithm::Rlvr && samples < 2 {
                return fail(
                    &format!("phase[{i}].samples_per_prompt"),
                    "group-relative advantages need at least 2 rollouts per prompt".into(),
                );
            }
        }
        Ok(())
    }

    /// Training settings for phase `index`, with per-phase overrides applied.
    pub fn train_config(&self, index: usize) -> TrainConfig {
        let phase = &self.phases[index];
        let steps = phase.steps;
        let kind = phase.training_objective.unwrap_or(self.objective.training_objective);
        TrainConfig {
            objective: self.objective.objective(kind),
            selector: TopKSelector::new(self.objective.topk_set, self.objective.top_k),
            optimizer: self.optimizer.optimizer(),
            learning_rate: phase.learning_rate.unwrap_or(self.optimizer.learning_rate),
            lr_schedule: self.optimizer.lr_schedule,
            warmup_fraction: self.optimizer.warmup_fraction,
            prompts_per_batch: self.rollout.prompts_per_batch,
            samples_per_prompt: phase.samples_per_prompt.unwrap_or(self.rollout.samples_per_prompt),
            max_response_len: self.rollout.max_rollout_response_length,
            sampler: Sampler {
                temperature: self.rollout.rollout_temperature,
                top_p: self.rollout.rollout_top_p,
            },
            include_minus_one: self.objective.include_minus_one,
            lambda: phase.lambda,
            steps,
            seed: self.seed,
            overlap_k: self.eval.overlap_k,
            repetition_n: self.eval.repetition_n,
        }
    }

    pub fn teacher_source(&self, index: usize) -> &TeacherSource {
        self.phases[index]
            .teacher_model
            .as_ref()
            .unwrap_or(&self.teacher.teacher_model)
    }
}
