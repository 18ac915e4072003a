//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! One iteration here is one "epoch" of full-batch training. The line search
//! follows the bracketing/zoom scheme with safeguarded cubic interpolation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::grad_norm_inf;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("objective returned a non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("search direction is not a descent direction (slope {slope:e})")]
    NonDescentDirection { slope: f64 },
    #[error("line search failed after {evaluations} evaluations")]
    LineSearchFail { evaluations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop once `||grad||_inf <= grad_tol_inf`.
    pub grad_tol_inf: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iter: 1000, grad_tol_inf: 1e-6, wolfe_c1: 1e-4, wolfe_c2: 0.9, max_line_search_steps: 25 }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(OptimError::InvalidConfig(format!(
                "need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.memory == 0 {
            return Err(OptimError::InvalidConfig("memory must be >= 1".into()));
        }
        if self.max_line_search_steps == 0 {
            return Err(OptimError::InvalidConfig("max_line_search_steps must be >= 1".into()));
        }
        if !(self.grad_tol_inf >= 0.0) {
            return Err(OptimError::InvalidConfig("grad_tol_inf must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    MaxIter,
    LineSearchFail,
    /// The caller's stop hook returned `true`.
    Custom,
}

/// Snapshot handed to the stop hook after every accepted iteration.
#[derive(Debug)]
pub struct IterationState<'a> {
    pub iteration: usize,
    pub value: f64,
    pub previous_value: f64,
    pub grad_norm_inf: f64,
    pub x: &'a [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f_final: f64,
    pub grad_norm_final: f64,
    pub iterations: usize,
    /// Objective at the start point followed by one entry per iteration.
    pub f_history: Vec<f64>,
    /// Gradient infinity norms aligned with `f_history`.
    pub grad_history: Vec<f64>,
    pub termination: Termination,
}

pub type StopHook<'a> = &'a mut dyn FnMut(&IterationState<'_>) -> bool;

/// Minimizes `objective`, which returns `(f(x), grad f(x))`.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    cfg: &LbfgsConfig,
    mut stop_hook: Option<StopHook<'_>>,
) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    cfg.validate()?;
    let mut x = x0;
    let (mut f, mut g) = objective(&x);
    if !is_finite(f, &g) {
        return Err(OptimError::NonFinite { iteration: 0 });
    }
    let mut gnorm = grad_norm_inf(&g);
    let mut f_history = vec![f];
    let mut grad_history = vec![gnorm];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;

    let termination = loop {
        if gnorm <= cfg.grad_tol_inf {
            break Termination::GradTol;
        }
        if iterations >= cfg.max_iter {
            break Termination::MaxIter;
        }

        let mut restarted = false;
        let accepted = loop {
            let mut d = two_loop_direction(&g, &pairs);
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                pairs.clear();
                d = g.iter().map(|v| -v).collect();
                slope = dot(&g, &d);
            }
            let initial = if pairs.is_empty() { (1.0 / norm2(&g)).min(1.0) } else { 1.0 };

            let mut evaluated: Vec<(f64, Vec<f64>, f64, Vec<f64>)> = Vec::new();
            let mut non_finite = false;
            let outcome = {
                let phi = |step: f64| {
                    let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
                    let (ft, gt) = objective(&trial);
                    if !is_finite(ft, &gt) {
                        non_finite = true;
                        return (f64::INFINITY, f64::NAN);
                    }
                    let dphi = dot(&gt, &d);
                    evaluated.push((step, trial, ft, gt));
                    (ft, dphi)
                };
                line_search_strong_wolfe(phi, f, slope, initial, cfg)
            };
            match outcome {
                Ok(ls) => {
                    let pos = evaluated
                        .iter()
                        .rposition(|e| e.0 == ls.step)
                        .expect("accepted step was evaluated");
                    let (step, xt, ft, gt) = evaluated.swap_remove(pos);
                    break Some((d, step, xt, ft, gt));
                }
                Err(_) if !restarted && !pairs.is_empty() => {
                    pairs.clear();
                    restarted = true;
                }
                Err(_) => {
                    // A NaN that the bracketing could not step around is fatal.
                    if non_finite && evaluated.is_empty() {
                        return Err(OptimError::NonFinite { iteration: iterations + 1 });
                    }
                    break None;
                }
            }
        };
        let Some((d, step, x_new, f_new, g_new)) = accepted else {
            break Termination::LineSearchFail;
        };

        let s: Vec<f64> = d.iter().map(|v| step * v).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let previous_value = f;
        x = x_new;
        f = f_new;
        g = g_new;
        gnorm = grad_norm_inf(&g);
        iterations += 1;
        f_history.push(f);
        grad_history.push(gnorm);

        if let Some(hook) = stop_hook.as_mut() {
            let state = IterationState { iteration: iterations, value: f, previous_value, grad_norm_inf: gnorm, x: &x, grad: &g };
            if hook(&state) {
                break if gnorm <= cfg.grad_tol_inf { Termination::GradTol } else { Termination::Custom };
            }
        }
    };

    Ok(OptimResult { x, f_final: f, grad_norm_final: gnorm, iterations, f_history, grad_history, termination })
}

fn two_loop_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub value: f64,
    pub slope: f64,
    pub evaluations: usize,
}

/// Relative distance between an accepted step and its interpolated line
/// minimizer above which the minimizer is tried as well.
const REFINE_REL_GAP: f64 = 1e-3;

/// Finds a step satisfying the strong Wolfe conditions for
/// `phi(t) = (f(x + t d), grad f(x + t d) . d)`.
///
/// When the bracketing phase accepts a step, the cubic minimizer built from
/// `phi(0)` and the accepted point is also tried and kept if it satisfies
/// both conditions with a lower value. On a quadratic this makes the search
/// exact.
///
/// Near a stationary point the decrease demanded by Armijo falls below the
/// rounding error of `phi`; a step with `phi(t) <= phi(0)` whose slope meets
/// the curvature condition is then accepted.
pub fn line_search_strong_wolfe<P>(
    mut phi: P,
    f0: f64,
    slope0: f64,
    initial_step: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearchOutcome, OptimError>
where
    P: FnMut(f64) -> (f64, f64),
{
    if !(slope0 < 0.0) {
        return Err(OptimError::NonDescentDirection { slope: slope0 });
    }
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let max_evals = cfg.max_line_search_steps;
    let armijo = |t: f64, v: f64| v <= f0 + c1 * t * slope0;
    let curvature = |dv: f64| dv.abs() <= -c2 * slope0;
    let flat_ok = |v: f64, dv: f64| v <= f0 && curvature(dv);

    let mut evals = 0;
    let (mut t_prev, mut f_prev, mut d_prev) = (0.0, f0, slope0);
    let mut t = if initial_step > 0.0 && initial_step.is_finite() { initial_step } else { 1.0 };

    // Bracketing phase.
    let (mut lo, mut hi) = loop {
        if evals >= max_evals {
            return Err(OptimError::LineSearchFail { evaluations: evals });
        }
        let (ft, dt) = phi(t);
        evals += 1;
        if !ft.is_finite() || !dt.is_finite() {
            t = t_prev + 0.5 * (t - t_prev);
            continue;
        }
        if !armijo(t, ft) && flat_ok(ft, dt) {
            return Ok(LineSearchOutcome { step: t, value: ft, slope: dt, evaluations: evals });
        }
        if !armijo(t, ft) || (evals > 1 && ft >= f_prev) {
            break ((t_prev, f_prev, d_prev), (t, ft, dt));
        }
        if curvature(dt) {
            let mut best = LineSearchOutcome { step: t, value: ft, slope: dt, evaluations: evals };
            // One interpolation step toward the line minimum; exact when phi
            // is quadratic.
            if evals < max_evals {
                if let Some(tc) = cubic_minimizer((0.0, f0, slope0), (t, ft, dt)) {
                    if tc > 0.1 * t && tc < 10.0 * t && (tc - t).abs() > REFINE_REL_GAP * t {
                        let (fc, dc) = phi(tc);
                        evals += 1;
                        best.evaluations = evals;
                        if fc.is_finite() && dc.is_finite() && armijo(tc, fc) && curvature(dc) && fc <= ft {
                            best = LineSearchOutcome { step: tc, value: fc, slope: dc, evaluations: evals };
                        }
                    }
                }
            }
            return Ok(best);
        }
        if dt >= 0.0 {
            break ((t, ft, dt), (t_prev, f_prev, d_prev));
        }
        (t_prev, f_prev, d_prev) = (t, ft, dt);
        t *= 2.0;
    };

    // Zoom phase: `lo` satisfies Armijo with the lowest value seen so far.
    while evals < max_evals {
        let width = hi.0 - lo.0;
        if width.abs() <= f64::EPSILON * lo.0.abs().max(1e-300) {
            break;
        }
        let mut tj = cubic_minimizer(lo, hi).unwrap_or(lo.0 + 0.5 * width);
        let (a, b) = (lo.0 + 0.1 * width, hi.0 - 0.1 * width);
        let (min_t, max_t) = if a < b { (a, b) } else { (b, a) };
        if !(tj >= min_t && tj <= max_t) {
            tj = lo.0 + 0.5 * width;
        }
        let (fj, dj) = phi(tj);
        evals += 1;
        if fj.is_finite() && dj.is_finite() && !armijo(tj, fj) && flat_ok(fj, dj) {
            return Ok(LineSearchOutcome { step: tj, value: fj, slope: dj, evaluations: evals });
        }
        if !fj.is_finite() || !dj.is_finite() || !armijo(tj, fj) || fj >= lo.1 {
            hi = (tj, fj, dj);
        } else {
            if curvature(dj) {
                return Ok(LineSearchOutcome { step: tj, value: fj, slope: dj, evaluations: evals });
            }
            if dj * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (tj, fj, dj);
        }
    }
    Err(OptimError::LineSearchFail { evaluations: evals })
}

/// Minimizer of the cubic interpolating values and slopes at two points.
fn cubic_minimizer((t1, f1, d1): (f64, f64, f64), (t2, f2, d2): (f64, f64, f64)) -> Option<f64> {
    if !(f2.is_finite() && d2.is_finite()) {
        return None;
    }
    let d_1 = d1 + d2 - 3.0 * (f1 - f2) / (t1 - t2);
    let disc = d_1 * d_1 - d1 * d2;
    if disc < 0.0 {
        return None;
    }
    let d_2 = (t2 - t1).signum() * disc.sqrt();
    let denom = d2 - d1 + 2.0 * d_2;
    if denom == 0.0 {
        return None;
    }
    let t = t2 - (t2 - t1) * (d2 + d_2 - d_1) / denom;
    t.is_finite().then_some(t)
}

fn is_finite(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
