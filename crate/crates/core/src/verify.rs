//! The oracle suite: every analytic gradient and closed form in the crate,
//! checked against machinery that never calls it.
//!
//! Reports are deterministic for a given seed and carry no timings, so two
//! runs produce identical JSON.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objectives::{
    reverse_kl_full, reverse_kl_topk_renorm, reverse_kl_topk_stopgrad, reverse_kl_topk_tail, reverse_kl_topk_unnorm,
    sampled_estimator, Estimator, Objective,
};
use crate::oracle::{enumerate_one_step, five_point_grad, kl_direct, relative_error, simplex_grid_argmin_refined};
use crate::policy::score;
use crate::prob::{topk, Distribution, Logits, TokenId};
use crate::rng::{rng_for, LabRng};
use crate::teacher::consensus_optimum;

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const GRAD_INSTANCES: usize = 100;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const REDUCTION_INSTANCES: usize = 1000;
pub const REDUCTION_TOLERANCE: f64 = 1e-10;
pub const CONSENSUS_INSTANCES: usize = 20;
pub const CONSENSUS_TOLERANCE: f64 = 1e-4;
/// Stencil step for the five-point differences.
pub const FD_EPS: f64 = 1e-3;
const JSD_BETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Count of instances over tolerance (or sign-rule exceptions).
    pub failures: usize,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, instances: usize, errors: &[f64], tolerance: f64) -> Self {
        let failures = errors.iter().filter(|e| !(**e <= tolerance)).count();
        Self {
            name: name.into(),
            instances,
            max_error: errors.iter().copied().fold(0.0, f64::max),
            tolerance,
            failures,
            pass: failures == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

impl OracleReport {
    fn new(seed: u64, checks: Vec<CheckResult>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { seed, checks, pass }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// A random student/teacher pair and a student TopK support.
#[derive(Debug, Clone)]
pub struct Instance {
    pub z: Logits,
    pub teacher: Distribution,
    pub support: Vec<TokenId>,
}

pub fn random_instance(rng: &mut LabRng) -> Instance {
    let n = rng.random_range(3..=12);
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let zt: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let z = Logits::new(z).expect("finite");
    let teacher = Logits::new(zt).expect("finite").softmax();
    let k = rng.random_range(1..=n);
    let support = topk(&z.softmax(), k).expect("k within vocabulary").ids();
    Instance { z, teacher, support }
}

/// Scalar function whose gradient the objective's `grad` must equal. For the
/// stop-gradient surrogate the coefficients are frozen at `inst.z`.
fn differentiable_loss(obj: Objective, inst: &Instance) -> Result<Box<dyn Fn(&[f64]) -> f64 + '_>> {
    if obj == Objective::TopkReverseKlStopgrad {
        let coeff = reverse_kl_topk_stopgrad(&inst.z, &inst.teacher, &inst.support)?.coeff;
        return Ok(Box::new(move |z: &[f64]| {
            let p = Logits::new(z.to_vec()).expect("finite").softmax();
            p.probs().iter().zip(&coeff).map(|(p, c)| p * c).sum()
        }));
    }
    Ok(Box::new(move |z: &[f64]| {
        let z = Logits::new(z.to_vec()).expect("finite");
        obj.evaluate(&z, &inst.teacher, &inst.support).map_or(f64::NAN, |r| r.loss)
    }))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max)
}

/// Largest per-coordinate relative error between the analytic gradient of
/// `obj` and five-point differences, at one instance.
pub fn grad_error(obj: Objective, inst: &Instance) -> Result<f64> {
    let analytic = obj.evaluate(&inst.z, &inst.teacher, &inst.support)?.grad;
    let numeric = five_point_grad(differentiable_loss(obj, inst)?, inst.z.values(), FD_EPS)?;
    Ok(max_rel(&analytic, &numeric))
}

/// Finite-difference check of one objective on `instances` random instances.
pub fn check_objective(obj: Objective, seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[1, obj_index(obj)]);
    let errors = (0..instances)
        .map(|_| grad_error(obj, &random_instance(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult::new(format!("grad/{}", obj.name()), instances, &errors, GRAD_TOLERANCE))
}

fn obj_index(obj: Objective) -> u64 {
    Objective::all(JSD_BETA).iter().position(|o| o.name() == obj.name()).unwrap_or(0) as u64
}

/// Exact expectations of the sampled-token estimators under the student:
/// `E[k1] = E[k3] = KL(p‖q)`, and the k1 policy gradient (with or without the
/// `−1`) equals the exact reverse-KL gradient.
pub fn check_sampled_estimators(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = rng_for(seed, &[2]);
    let (mut values, mut grads) = (Vec::new(), Vec::new());
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let p = inst.z.softmax();
        let kl = kl_direct(p.probs(), inst.teacher.probs());
        for kind in [Estimator::K1, Estimator::K3] {
            let e = enumerate_one_step(&p, |v| {
                vec![sampled_estimator(inst.teacher.ln_prob(v), p.ln_prob(v), kind)]
            })[0];
            values.push(relative_error(e, kl));
        }
        let exact = reverse_kl_full(&inst.z, &inst.teacher)?.grad;
        for minus_one in [0.0, 1.0] {
            let pg = enumerate_one_step(&p, |v| {
                let a = inst.teacher.ln_prob(v) - p.ln_prob(v) - minus_one;
                score(&p, v).into_iter().map(|g| -a * g).collect()
            });
            grads.push(max_rel(&pg, &exact));
        }
    }
    Ok(vec![
        CheckResult::new("estimator/k1-k3-expectation", instances, &values, GRAD_TOLERANCE),
        CheckResult::new("estimator/policy-gradient", instances, &grads, GRAD_TOLERANCE),
    ])
}

/// Probability levels swept by [`check_sign_flip`]: a linear grid plus a
/// log-spaced grid down to `1e-8`.
pub fn sign_sweep_levels() -> Vec<f64> {
    let mut levels: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    levels.extend((0..160).map(|i| 10f64.powf(-8.0 + i as f64 * 0.05)));
    levels.sort_by(f64::total_cmp);
    // The two grids meet at powers of ten; merge levels within 1e-9 relative.
    levels.dedup_by(|b, a| (*b - *a).abs() <= 1e-9 * *a);
    levels
}

/// Two-token student logits whose first probability is `p`.
fn student_logits(p: f64) -> Result<Logits> {
    Logits::new(vec![p.ln(), (1.0 - p).ln()])
}

/// Sweeps every `(p_S, p_T)` pair of [`sign_sweep_levels`] and counts points
/// where "the unnormalized and stop-gradient coefficients have strictly
/// opposite signs" differs from `p_S < p_T < e·p_S`.
pub fn check_sign_flip() -> Result<CheckResult> {
    let levels = sign_sweep_levels();
    // Teacher levels pass through the same softmax as the student, so a tie on
    // the grid is an exact tie.
    let seen = levels
        .iter()
        .map(|p| Ok(student_logits(*p)?.softmax().probs()[0]))
        .collect::<Result<Vec<f64>>>()?;
    let mut exceptions = 0usize;
    let mut max_dev = 0.0f64;
    let mut count = 0usize;
    for (&ps, &ps_seen) in levels.iter().zip(&seen) {
        let z = student_logits(ps)?;
        for &pt in &seen {
            let teacher = Distribution::new(vec![pt, 1.0 - pt])?;
            let u = reverse_kl_topk_unnorm(&z, &teacher, &[0])?.coeff[0];
            let s = reverse_kl_topk_stopgrad(&z, &teacher, &[0])?.coeff[0];
            let closed = (ps_seen / pt).ln();
            max_dev = max_dev.max((u - (closed + 1.0)).abs()).max((s - closed).abs());
            let flipped = u * s < 0.0;
            let predicted = ps_seen < pt && pt < std::f64::consts::E * ps_seen;
            if flipped != predicted {
                exceptions += 1;
            }
            count += 1;
        }
    }
    Ok(CheckResult {
        name: "sign-flip".into(),
        instances: count,
        max_error: max_dev,
        tolerance: 1e-9,
        failures: exceptions,
        pass: exceptions == 0 && max_dev <= 1e-9,
    })
}

/// With the support equal to the whole vocabulary, the truncated losses equal
/// the full reverse KL and the stop-gradient gradient equals its gradient.
pub fn check_full_support_reductions(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = rng_for(seed, &[3]);
    let (mut unnorm, mut renorm, mut tail, mut stop) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let all: Vec<TokenId> = (0..inst.z.len() as TokenId).collect();
        let full = reverse_kl_full(&inst.z, &inst.teacher)?;
        unnorm.push((reverse_kl_topk_unnorm(&inst.z, &inst.teacher, &all)?.loss - full.loss).abs());
        renorm.push((reverse_kl_topk_renorm(&inst.z, &inst.teacher, &all)?.loss - full.loss).abs());
        tail.push((reverse_kl_topk_tail(&inst.z, &inst.teacher, &all)?.loss - full.loss).abs());
        let g = reverse_kl_topk_stopgrad(&inst.z, &inst.teacher, &all)?.grad;
        stop.push(g.iter().zip(&full.grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(vec![
        CheckResult::new("full-support/topk-reverse-kl", instances, &unnorm, REDUCTION_TOLERANCE),
        CheckResult::new("full-support/topk-reverse-kl-renorm", instances, &renorm, REDUCTION_TOLERANCE),
        CheckResult::new("full-support/topk-reverse-kl-tail", instances, &tail, REDUCTION_TOLERANCE),
        CheckResult::new("full-support/stopgrad-gradient", instances, &stop, REDUCTION_TOLERANCE),
    ])
}

/// The closed-form consensus against a refined grid minimization of
/// `Σ_i w_i KL(p‖q_i)` on 2- and 3-token simplices, in TV.
pub fn check_consensus(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[4]);
    let mut errors = Vec::with_capacity(instances);
    for i in 0..instances {
        let dim = 2 + i % 2;
        let m = rng.random_range(2..=3);
        let teachers = (0..m)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                Logits::new(z).map(|l| l.softmax())
            })
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let closed = consensus_optimum(&teachers, &weights)?;
        let objective = |p: &[f64]| -> f64 {
            teachers.iter().zip(&weights).map(|(q, w)| w * kl_direct(p, q.probs())).sum()
        };
        let grid = simplex_grid_argmin_refined(objective, dim, 1e-2, 3)?;
        errors.push(closed.tv(&Distribution::new(grid.point)?));
    }
    Ok(CheckResult::new("consensus/grid", instances, &errors, CONSENSUS_TOLERANCE))
}

/// Objectives whose name contains `filter` (all when `None`).
pub fn select_objectives(filter: Option<&str>) -> Result<Vec<Objective>> {
    let chosen: Vec<Objective> = Objective::all(JSD_BETA)
        .into_iter()
        .filter(|o| filter.is_none_or(|f| o.name().contains(f)))
        .collect();
    if chosen.is_empty() {
        let names: Vec<&str> = Objective::all(JSD_BETA).iter().map(Objective::name).collect();
        return Err(Error::arg(format!(
            "no objective matches `{}`; known: {}",
            filter.unwrap_or_default(),
            names.join(", ")
        )));
    }
    Ok(chosen)
}

/// Finite-difference checks only, optionally filtered by objective name.
pub fn grad_check_suite(filter: Option<&str>, seed: u64) -> Result<OracleReport> {
    let checks = select_objectives(filter)?
        .into_iter()
        .map(|o| check_objective(o, seed, GRAD_INSTANCES))
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport::new(seed, checks))
}

/// Every check in this module.
pub fn oracle_suite(seed: u64) -> Result<OracleReport> {
    let mut checks = grad_check_suite(None, seed)?.checks;
    checks.extend(check_sampled_estimators(seed, GRAD_INSTANCES)?);
    checks.push(check_sign_flip()?);
    checks.extend(check_full_support_reductions(seed, REDUCTION_INSTANCES)?);
    checks.push(check_consensus(seed, CONSENSUS_INSTANCES)?);
    Ok(OracleReport::new(seed, checks))
}
