//! Independent verification machinery.
//!
//! Nothing here calls into analytic gradient code: finite differences only
//! evaluate losses, enumeration only multiplies probabilities, and the simplex
//! scan only evaluates objectives on grid points.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::prob::{Distribution, TokenId};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Largest outcome space [`enumerate_expectation`] will walk.
pub const MAX_OUTCOMES: u128 = 1_000_000;

/// Central differences of `loss` at `z`, one coordinate at a time.
pub fn finite_diff_grad<F>(loss: F, z: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut point = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        point[i] = z[i] + eps;
        let up = loss(&point);
        point[i] = z[i] - eps;
        let down = loss(&point);
        point[i] = z[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "loss is not finite around coordinate {i} ({up}, {down})"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Five-point central differences: truncation error is `O(eps⁴)`.
pub fn five_point_grad<F>(loss: F, z: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut point = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let mut at = |h: f64| {
            point[i] = z[i] + h;
            let v = loss(&point);
            point[i] = z[i];
            v
        };
        let (a, b, c, d) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        if ![a, b, c, d].iter().all(|v| v.is_finite()) {
            return Err(Error::Oracle(format!("loss is not finite around coordinate {i}")));
        }
        // Differences first: a flat loss gives exactly zero.
        grad.push(((d - a) + 8.0 * (b - c)) / (12.0 * eps));
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], eps: f64, tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let (worst, err) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_error: err,
        worst_coordinate: worst,
        eps,
        tolerance,
        pass: err <= tolerance,
    }
}

/// Finite-difference check of `analytic` against `loss` at `z`.
pub fn grad_check<F>(loss: F, analytic: &[f64], z: &[f64], eps: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = finite_diff_grad(loss, z, eps)?;
    Ok(compare_gradients(analytic, &numeric, eps, tolerance))
}

/// Number of complete responses of at most `max_len` tokens (EOS ends a response).
pub fn outcome_count(vocab: usize, max_len: usize) -> u128 {
    // Sequences that stop at EOS before the limit plus the full-length ones.
    let v = vocab as u128;
    let non_eos = v - 1;
    let mut total: u128 = 0;
    let mut prefixes: u128 = 1;
    for _ in 0..max_len.saturating_sub(1) {
        total = total.saturating_add(prefixes);
        prefixes = prefixes.saturating_mul(non_eos);
    }
    total.saturating_add(prefixes.saturating_mul(v))
}

/// Exact `E_{y ~ policy(·|prompt)} [f(y)]` by walking every response of at
/// most `max_len` tokens. `f` returns a vector so gradients can be averaged.
pub fn enumerate_expectation<F>(policy: &Policy, prompt: u32, max_len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[TokenId]) -> Vec<f64>,
{
    if max_len == 0 {
        return Err(Error::Oracle("max length must be at least 1".into()));
    }
    let size = outcome_count(policy.vocab().size(), max_len);
    if size > MAX_OUTCOMES {
        return Err(Error::Oracle(format!(
            "outcome space has {size} sequences, limit is {MAX_OUTCOMES}"
        )));
    }
    let eos = policy.vocab().eos();
    let mut acc: Option<Vec<f64>> = None;
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, weight)) = stack.pop() {
        let dist = policy.dist_at(&policy.context(prompt, &prefix));
        for (v, p) in dist.probs().iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(v as TokenId);
            let w = weight * p;
            if v as TokenId == eos || seq.len() == max_len {
                let value = f(&seq);
                let slot = acc.get_or_insert_with(|| vec![0.0; value.len()]);
                for (s, x) in slot.iter_mut().zip(&value) {
                    *s += w * x;
                }
            } else {
                stack.push((seq, w));
            }
        }
    }
    Ok(acc.unwrap_or_default())
}

/// Exact expectation of `f(v)` for one draw `v ~ dist`.
pub fn enumerate_one_step<F>(dist: &Distribution, f: F) -> Vec<f64>
where
    F: Fn(TokenId) -> Vec<f64>,
{
    let mut acc: Option<Vec<f64>> = None;
    for (v, p) in dist.probs().iter().enumerate() {
        let value = f(v as TokenId);
        let slot = acc.get_or_insert_with(|| vec![0.0; value.len()]);
        for (s, x) in slot.iter_mut().zip(&value) {
            *s += p * x;
        }
    }
    acc.unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMin {
    pub point: Vec<f64>,
    pub value: f64,
}

fn grid_steps(resolution: f64) -> Result<usize> {
    if !(resolution >= 1e-3 && resolution <= 1.0) {
        return Err(Error::Oracle(format!(
            "resolution must lie in [1e-3, 1], got {resolution}"
        )));
    }
    Ok((1.0 / resolution).round() as usize)
}

/// Exhaustive scan of the probability simplex of dimension `dim` (2 or 3) on
/// a grid with spacing `resolution`.
pub fn simplex_grid_argmin<F>(objective: F, dim: usize, resolution: f64) -> Result<SimplexMin>
where
    F: Fn(&[f64]) -> f64,
{
    let n = grid_steps(resolution)?;
    scan_box(&objective, dim, n, [0.0, 0.0], 1.0 / n as f64)
}

/// Like [`simplex_grid_argmin`], then rescans a window of ±2 cells around the
/// incumbent at ten times finer spacing, `levels` times.
pub fn simplex_grid_argmin_refined<F>(objective: F, dim: usize, resolution: f64, levels: usize) -> Result<SimplexMin>
where
    F: Fn(&[f64]) -> f64,
{
    let n = grid_steps(resolution)?;
    let mut best = scan_box(&objective, dim, n, [0.0, 0.0], 1.0 / n as f64)?;
    let mut step = 1.0 / n as f64;
    for _ in 0..levels {
        let fine = step / 10.0;
        let origin = [best.point[0] - 2.0 * step, best.point[1] - 2.0 * step];
        let cells = 40;
        let candidate = scan_box(&objective, dim, cells, origin, fine)?;
        if candidate.value <= best.value {
            best = candidate;
        }
        step = fine;
    }
    Ok(best)
}

fn scan_box<F>(objective: &F, dim: usize, cells: usize, origin: [f64; 2], step: f64) -> Result<SimplexMin>
where
    F: Fn(&[f64]) -> f64,
{
    let mut best: Option<SimplexMin> = None;
    let mut consider = |point: Vec<f64>| {
        if point.iter().any(|p| *p < -1e-15 || *p > 1.0 + 1e-15) {
            return;
        }
        let point: Vec<f64> = point.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        let value = objective(&point);
        if value.is_finite() && best.as_ref().is_none_or(|b| value < b.value) {
            best = Some(SimplexMin { point, value });
        }
    };
    match dim {
        2 => {
            for i in 0..=cells {
                let a = origin[0] + i as f64 * step;
                consider(vec![a, 1.0 - a]);
            }
        }
        3 => {
            for i in 0..=cells {
                let a = origin[0] + i as f64 * step;
                for j in 0..=cells {
                    let b = origin[1] + j as f64 * step;
                    consider(vec![a, b, 1.0 - a - b]);
                }
            }
        }
        _ => {
            return Err(Error::Oracle(format!(
                "simplex scan supports dimension 2 or 3, got {dim}"
            )))
        }
    }
    best.ok_or_else(|| Error::Oracle("no finite objective value on the grid".into()))
}

/// `Σ p log(p/q)` with `0 log 0 = 0`, used as a brute-force objective.
pub fn kl_direct(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{Logits, Vocab};

    #[test]
    fn fd_of_quadratic_is_identity() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum::<f64>() / 2.0, &z, 1e-5).unwrap();
        for (a, b) in g.iter().zip(z) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_error_is_second_order() {
        // Cubic: truncation error of central differences is eps²·f'''/6.
        let f = |x: &[f64]| x[0].powi(3);
        let exact = 3.0 * 1.5f64.powi(2);
        let e1 = (finite_diff_grad(f, &[1.5], 1e-2).unwrap()[0] - exact).abs();
        let e2 = (finite_diff_grad(f, &[1.5], 5e-3).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn fd_rejects_non_finite_loss() {
        let r = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }

    #[test]
    fn relative_error_denominator_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn enumeration_constant_and_indicator() {
        let mut p = Policy::new(Vocab::new(3).unwrap(), 2).unwrap();
        let key = p.context(0, &[]);
        p.set_logits(key, Logits::new(vec![0.2, -0.4, 1.0]).unwrap()).unwrap();
        let c = enumerate_expectation(&p, 0, 3, |_| vec![2.5]).unwrap();
        assert!((c[0] - 2.5).abs() < 1e-12);

        // P(first token = 1, second token = 0)
        let ind = enumerate_expectation(&p, 0, 3, |y| {
            vec![if y.len() >= 2 && y[0] == 1 && y[1] == 0 { 1.0 } else { 0.0 }]
        })
        .unwrap();
        let direct = p.dist_at(&p.context(0, &[])).prob(1) * p.dist_at(&p.context(0, &[1])).prob(0);
        assert!((ind[0] - direct).abs() < 1e-15);
    }

    #[test]
    fn enumeration_refuses_large_spaces() {
        let p = Policy::new(Vocab::new(20).unwrap(), 2).unwrap();
        let err = enumerate_expectation(&p, 0, 6, |_| vec![0.0]).unwrap_err();
        assert!(err.to_string().contains("limit"));
    }

    #[test]
    fn outcome_count_matches_walk() {
        let p = Policy::new(Vocab::new(3).unwrap(), 2).unwrap();
        let total = enumerate_expectation(&p, 0, 4, |_| vec![1.0]).unwrap()[0];
        assert!((total - 1.0).abs() < 1e-12);
        // 1 + 2 + 4 prefixes end early at EOS, 8 * 3 reach the limit
        assert_eq!(outcome_count(3, 4), 1 + 2 + 4 + 24);
    }

    #[test]
    fn grid_argmin_of_kl_is_target() {
        let q = [0.2, 0.5, 0.3];
        let m = simplex_grid_argmin(|p| kl_direct(p, &q), 3, 1e-2).unwrap();
        for (a, b) in m.point.iter().zip(q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_argmin_symmetric_pair_is_uniform() {
        let q1 = [0.9, 0.1];
        let q2 = [0.1, 0.9];
        let m = simplex_grid_argmin(|p| 0.5 * kl_direct(p, &q1) + 0.5 * kl_direct(p, &q2), 2, 1e-3).unwrap();
        assert!((m.point[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn refined_grid_reaches_sub_resolution_accuracy() {
        let q1 = [0.8, 0.2];
        let q2 = [0.5, 0.5];
        let f = |p: &[f64]| 0.5 * kl_direct(p, &q1) + 0.5 * kl_direct(p, &q2);
        let coarse = simplex_grid_argmin(f, 2, 1e-3).unwrap();
        let fine = simplex_grid_argmin_refined(f, 2, 1e-3, 3).unwrap();
        assert!((coarse.point[0] - 2.0 / 3.0).abs() < 1e-3);
        assert!((fine.point[0] - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(simplex_grid_argmin(|_| 0.0, 4, 1e-2).is_err());
        assert!(simplex_grid_argmin(|_| 0.0, 3, 1e-4).is_err());
    }
}
