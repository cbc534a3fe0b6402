//! Per-position distillation objectives with exact student-logit gradients.
//!
//! Every objective reports its gradient in two forms. `grad` is the gradient
//! with respect to the student logits `z`. `coeff` is the score-space weight
//! `w`, defined so that
//!
//! ```text
//! grad = Σ_v p_S(v) · w(v) · ∇_z log p_S(v) = p_S ⊙ (w − ⟨p_S, w⟩)
//! ```
//!
//! For the full reverse KL `w(v) = log(p_S/p_T)`; for the unnormalized TopK
//! reverse KL `w(v) = log(p_S/p_T) + 1` on the support, which is where the
//! constant that cancels over the full vocabulary survives truncation.
//!
//! The teacher is always a constant (no gradient flows into it), and the
//! support is fixed before differentiation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate, score, GradMap, Policy, Trajectory};
use crate::prob::{safe_ln, softmax, topk, Distribution, Logits, TokenId, PROB_FLOOR};

/// Minimum teacher mass on a support for the renormalized objective.
pub const MIN_SUPPORT_MASS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    /// Loss in nats.
    pub loss: f64,
    /// Gradient with respect to the student logits.
    pub grad: Vec<f64>,
    /// Score-space weight `w(v)` on `∇ log p_S(v)`.
    pub coeff: Vec<f64>,
    /// The position was skipped (empty support); loss and gradient are zero.
    pub skipped: bool,
}

impl ObjectiveReport {
    fn from_coeff(loss: f64, p: &[f64], coeff: Vec<f64>) -> Self {
        Self {
            loss,
            grad: grad_from_coeff(p, &coeff),
            coeff,
            skipped: false,
        }
    }

    fn skip(n: usize) -> Self {
        Self {
            loss: 0.0,
            grad: vec![0.0; n],
            coeff: vec![0.0; n],
            skipped: true,
        }
    }
}

/// `p ⊙ (w − ⟨p, w⟩)`.
pub fn grad_from_coeff(p: &[f64], w: &[f64]) -> Vec<f64> {
    let mean: f64 = p.iter().zip(w).map(|(pi, wi)| pi * wi).sum();
    p.iter().zip(w).map(|(pi, wi)| pi * (wi - mean)).collect()
}

/// Which TopK candidates a truncated objective sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMode {
    Teacher,
    Student,
    Intersection,
    Union,
    Full,
}

impl FromStr for SupportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" => SupportMode::Teacher,
            "student" => SupportMode::Student,
            "intersection" => SupportMode::Intersection,
            "union" => SupportMode::Union,
            "full" => SupportMode::Full,
            other => return Err(Error::arg(format!("unknown support mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKSelector {
    pub mode: SupportMode,
    pub k: usize,
}

impl TopKSelector {
    pub fn new(mode: SupportMode, k: usize) -> Self {
        Self { mode, k }
    }

    pub fn full() -> Self {
        Self {
            mode: SupportMode::Full,
            k: 0,
        }
    }
}

/// Support token ids in ascending order.
pub fn select_support(sel: &TopKSelector, student: &Distribution, teacher: &Distribution) -> Result<Vec<TokenId>> {
    if student.len() != teacher.len() {
        return Err(Error::arg(format!(
            "student has {} tokens, teacher has {}",
            student.len(),
            teacher.len()
        )));
    }
    let n = student.len();
    if sel.mode == SupportMode::Full {
        return Ok((0..n as TokenId).collect());
    }
    let k = sel.k.min(n);
    let ids = |d: &Distribution| -> Result<Vec<TokenId>> {
        let mut v = topk(d, k)?.ids();
        v.sort_unstable();
        Ok(v)
    };
    Ok(match sel.mode {
        SupportMode::Teacher => ids(teacher)?,
        SupportMode::Student => ids(student)?,
        SupportMode::Intersection => {
            let t = ids(teacher)?;
            ids(student)?.into_iter().filter(|v| t.binary_search(v).is_ok()).collect()
        }
        SupportMode::Union => {
            let mut u = ids(student)?;
            u.extend(ids(teacher)?);
            u.sort_unstable();
            u.dedup();
            u
        }
        SupportMode::Full => unreachable!(),
    })
}

fn membership(n: usize, support: &[TokenId]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for t in support {
        let slot = mask
            .get_mut(*t as usize)
            .ok_or_else(|| Error::arg(format!("support token {t} outside vocabulary of {n}")))?;
        *slot = true;
    }
    Ok(mask)
}

fn check_shapes(z: &Logits, teacher: &Distribution) -> Result<()> {
    if z.len() != teacher.len() {
        return Err(Error::arg(format!(
            "student has {} logits, teacher has {} probabilities",
            z.len(),
            teacher.len()
        )));
    }
    Ok(())
}

/// `KL(p_S ‖ p_T)` over the full vocabulary.
pub fn reverse_kl_full(z: &Logits, teacher: &Distribution) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    let p = z.softmax();
    let w: Vec<f64> = p
        .probs()
        .iter()
        .zip(teacher.probs())
        .map(|(ps, pt)| safe_ln(*ps) - safe_ln(*pt))
        .collect();
    let loss = p.probs().iter().zip(&w).map(|(ps, wi)| ps * wi).sum();
    Ok(ObjectiveReport::from_coeff(loss, p.probs(), w))
}

/// `KL(p_T ‖ p_S)` over the full vocabulary. Logit gradient is `p_S − p_T`.
pub fn forward_kl_full(z: &Logits, teacher: &Distribution) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    let p = z.softmax();
    let loss = teacher
        .probs()
        .iter()
        .zip(p.probs())
        .filter(|(pt, _)| **pt > 0.0)
        .map(|(pt, ps)| pt * (safe_ln(*pt) - safe_ln(*ps)))
        .sum();
    // −Σ p_T ∇ log p_S  =  Σ p_S · (−p_T/p_S) · ∇ log p_S
    let coeff: Vec<f64> = p
        .probs()
        .iter()
        .zip(teacher.probs())
        .map(|(ps, pt)| -pt / ps.max(PROB_FLOOR))
        .collect();
    let grad = p.probs().iter().zip(teacher.probs()).map(|(ps, pt)| ps - pt).collect();
    Ok(ObjectiveReport {
        loss,
        grad,
        coeff,
        skipped: false,
    })
}

/// `β KL(p_S ‖ m) + (1−β) KL(p_T ‖ m)` with `m = β p_S + (1−β) p_T`.
pub fn jsd_full(z: &Logits, teacher: &Distribution, beta: f64) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg(format!("beta must lie strictly inside (0, 1), got {beta}")));
    }
    let p = z.softmax();
    let m: Vec<f64> = p
        .probs()
        .iter()
        .zip(teacher.probs())
        .map(|(ps, pt)| beta * ps + (1.0 - beta) * pt)
        .collect();
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(&m)
            .filter(|(ai, _)| **ai > 0.0)
            .map(|(ai, mi)| ai * (safe_ln(*ai) - safe_ln(*mi)))
            .sum()
    };
    let loss = beta * kl(p.probs()) + (1.0 - beta) * kl(teacher.probs());
    // ∂loss/∂p_S(v) = β log(p_S(v)/m(v)); the cross terms through m sum to a constant.
    let coeff = p
        .probs()
        .iter()
        .zip(&m)
        .map(|(ps, mi)| beta * (safe_ln(*ps) - safe_ln(*mi)))
        .collect();
    Ok(ObjectiveReport::from_coeff(loss, p.probs(), coeff))
}

/// Truncated reverse KL `Σ_{v∈S} p_S log(p_S/p_T)`, differentiated exactly.
pub fn reverse_kl_topk_unnorm(z: &Logits, teacher: &Distribution, support: &[TokenId]) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    if support.is_empty() {
        return Ok(ObjectiveReport::skip(z.len()));
    }
    let mask = membership(z.len(), support)?;
    let p = z.softmax();
    let ratio: Vec<f64> = (0..z.len())
        .map(|v| if mask[v] { safe_ln(p.probs()[v]) - safe_ln(teacher.probs()[v]) } else { 0.0 })
        .collect();
    let loss: f64 = p.probs().iter().zip(&ratio).map(|(pv, r)| pv * r).sum();
    let off_mass: f64 = (0..z.len()).filter(|v| !mask[*v]).map(|v| p.probs()[v]).sum();
    // w − ⟨p, w⟩ with w = ratio + 1[v ∈ S]; the indicator part is centred
    // through the off-support mass so it vanishes exactly when S is everything.
    let grad = (0..z.len())
        .map(|v| {
            let indicator = if mask[v] { 0.0 } else { -1.0 };
            p.probs()[v] * ((ratio[v] - loss) + (indicator + off_mass))
        })
        .collect();
    let coeff = (0..z.len()).map(|v| if mask[v] { ratio[v] + 1.0 } else { 0.0 }).collect();
    Ok(ObjectiveReport {
        loss,
        grad,
        coeff,
        skipped: false,
    })
}

/// Truncated reverse KL with the log-ratio held constant: the ratio acts as a
/// fixed advantage and no `+1` appears.
pub fn reverse_kl_topk_stopgrad(z: &Logits, teacher: &Distribution, support: &[TokenId]) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    if support.is_empty() {
        return Ok(ObjectiveReport::skip(z.len()));
    }
    let mask = membership(z.len(), support)?;
    let p = z.softmax();
    let mut loss = 0.0;
    let coeff = (0..z.len())
        .map(|v| {
            if !mask[v] {
                return 0.0;
            }
            let advantage = safe_ln(teacher.probs()[v]) - safe_ln(p.probs()[v]);
            loss -= p.probs()[v] * advantage;
            -advantage
        })
        .collect();
    Ok(ObjectiveReport::from_coeff(loss, p.probs(), coeff))
}

/// `KL(p̄_S ‖ p̄_T)` between the distributions renormalized on the support.
pub fn reverse_kl_topk_renorm(z: &Logits, teacher: &Distribution, support: &[TokenId]) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    if support.is_empty() {
        return Ok(ObjectiveReport::skip(z.len()));
    }
    let mask = membership(z.len(), support)?;
    let p = z.softmax();
    let student_mass: f64 = support.iter().map(|v| p.probs()[*v as usize]).sum();
    let teacher_mass: f64 = support.iter().map(|v| teacher.probs()[*v as usize]).sum();
    if teacher_mass < MIN_SUPPORT_MASS {
        return Err(Error::DegenerateSupport(format!(
            "teacher mass on support is {teacher_mass:e}"
        )));
    }
    if student_mass <= PROB_FLOOR {
        return Err(Error::DegenerateSupport(format!(
            "student mass on support is {student_mass:e}"
        )));
    }
    // Restricted to S, p̄_S is a softmax of z_S, so the gradient is
    // p̄ ⊙ (w̄ − ⟨p̄, w̄⟩) on S and zero elsewhere.
    // p̄_S comes from the support logits alone, so off-support logits cannot
    // leak in through roundoff.
    let restricted = match support {
        [_] => Distribution::one_hot(1, 0),
        _ => softmax(&support.iter().map(|v| z.values()[*v as usize]).collect::<Vec<_>>())?,
    };
    let mut loss = 0.0;
    let mut bar_p = vec![0.0; z.len()];
    let mut bar_w = vec![0.0; z.len()];
    for (v, ps) in support.iter().map(|v| *v as usize).zip(restricted.probs()) {
        let pt = teacher.probs()[v] / teacher_mass;
        bar_p[v] = *ps;
        bar_w[v] = safe_ln(*ps) - safe_ln(pt);
        loss += ps * bar_w[v];
    }
    let mean: f64 = bar_p.iter().zip(&bar_w).map(|(a, b)| a * b).sum();
    let grad: Vec<f64> = (0..z.len())
        .map(|v| if mask[v] { bar_p[v] * (bar_w[v] - mean) } else { 0.0 })
        .collect();
    // Same gradient expressed as weights on ∇ log p_S (zero off the support).
    let coeff = (0..z.len())
        .map(|v| if mask[v] { (bar_w[v] - mean) / student_mass } else { 0.0 })
        .collect();
    Ok(ObjectiveReport {
        loss,
        grad,
        coeff,
        skipped: false,
    })
}

/// Truncated reverse KL plus one aggregated tail bucket:
/// `Σ_{v∈S} p_S log(p_S/p_T) + p_tail log(p_tail/q_tail)`.
pub fn reverse_kl_topk_tail(z: &Logits, teacher: &Distribution, support: &[TokenId]) -> Result<ObjectiveReport> {
    check_shapes(z, teacher)?;
    if support.is_empty() {
        return Ok(ObjectiveReport::skip(z.len()));
    }
    let mask = membership(z.len(), support)?;
    let p = z.softmax();
    let (mut student_tail, mut teacher_tail) = (0.0, 0.0);
    for v in 0..z.len() {
        if !mask[v] {
            student_tail += p.probs()[v];
            teacher_tail += teacher.probs()[v];
        }
    }
    let tail_ratio = safe_ln(student_tail) - safe_ln(teacher_tail);
    let mut loss = student_tail * tail_ratio;
    // ∂/∂p_S(v) for v ∈ S: log(p_S/p_T) + 1 − (log(p_tail/q_tail) + 1); the
    // tail term depends on the support entries through p_tail = 1 − Σ_S p_S.
    let coeff = (0..z.len())
        .map(|v| {
            if !mask[v] {
                return 0.0;
            }
            let ratio = safe_ln(p.probs()[v]) - safe_ln(teacher.probs()[v]);
            loss += p.probs()[v] * ratio;
            ratio - tail_ratio
        })
        .collect();
    Ok(ObjectiveReport::from_coeff(loss, p.probs(), coeff))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    K1,
    K2,
    K3,
}

/// Sampled-token KL estimate from one draw, with `A = l_T − l_S`:
/// k1 = −A, k2 = A²/2, k3 = eᴬ − 1 − A.
pub fn sampled_estimator(teacher_logprob: f64, student_logprob: f64, kind: Estimator) -> f64 {
    let a = teacher_logprob - student_logprob;
    match kind {
        Estimator::K1 => -a,
        Estimator::K2 => 0.5 * a * a,
        Estimator::K3 => a.exp_m1() - a,
    }
}

/// Policy-gradient form of the sampled-token objective: each position
/// contributes `−a_t · ∇ log p_S(y_t)` with the advantage
/// `a_t = l_T(t) − l_S(t)` (minus one when `include_minus_one`) held constant.
/// Contributions are summed per context; callers apply any `1/T` scaling.
pub fn pg_sampled_grad(policy: &Policy, traj: &Trajectory, include_minus_one: bool) -> Result<GradMap> {
    let teacher = traj
        .teacher_logprobs
        .as_ref()
        .ok_or_else(|| Error::arg("trajectory carries no teacher log-probabilities"))?;
    if teacher.len() != traj.tokens.len() {
        return Err(Error::arg("teacher log-probabilities do not cover every position"));
    }
    let mut grads = BTreeMap::new();
    for t in 0..traj.tokens.len() {
        let key = policy.context(traj.prompt, &traj.tokens[..t]);
        let mut advantage = teacher[t] - traj.student_logprobs[t];
        if include_minus_one {
            advantage -= 1.0;
        }
        let g = score(&policy.dist_at(&key), traj.tokens[t]);
        accumulate(&mut grads, key, &g, -advantage);
    }
    Ok(grads)
}

/// Distribution-level objectives selectable for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    ReverseKlFull,
    ForwardKlFull,
    Jsd { beta: f64 },
    TopkReverseKl,
    TopkReverseKlStopgrad,
    TopkReverseKlRenorm,
    TopkReverseKlTail,
}

impl Objective {
    /// Evaluates at one position. Full-vocabulary objectives ignore `support`.
    pub fn evaluate(&self, z: &Logits, teacher: &Distribution, support: &[TokenId]) -> Result<ObjectiveReport> {
        match *self {
            Objective::ReverseKlFull => reverse_kl_full(z, teacher),
            Objective::ForwardKlFull => forward_kl_full(z, teacher),
            Objective::Jsd { beta } => jsd_full(z, teacher, beta),
            Objective::TopkReverseKl => reverse_kl_topk_unnorm(z, teacher, support),
            Objective::TopkReverseKlStopgrad => reverse_kl_topk_stopgrad(z, teacher, support),
            Objective::TopkReverseKlRenorm => reverse_kl_topk_renorm(z, teacher, support),
            Objective::TopkReverseKlTail => reverse_kl_topk_tail(z, teacher, support),
        }
    }

    pub fn uses_support(&self) -> bool {
        !matches!(
            self,
            Objective::ReverseKlFull | Objective::ForwardKlFull | Objective::Jsd { .. }
        )
    }

    pub fn all(beta: f64) -> [Objective; 7] {
        [
            Objective::ReverseKlFull,
            Objective::ForwardKlFull,
            Objective::Jsd { beta },
            Objective::TopkReverseKl,
            Objective::TopkReverseKlStopgrad,
            Objective::TopkReverseKlRenorm,
            Objective::TopkReverseKlTail,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::ReverseKlFull => "reverse-kl-full",
            Objective::ForwardKlFull => "forward-kl-full",
            Objective::Jsd { .. } => "jsd-full",
            Objective::TopkReverseKl => "topk-reverse-kl",
            Objective::TopkReverseKlStopgrad => "topk-reverse-kl-stopgrad",
            Objective::TopkReverseKlRenorm => "topk-reverse-kl-renorm",
            Objective::TopkReverseKlTail => "topk-reverse-kl-tail",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
