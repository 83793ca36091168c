//! Maximisation of a smooth objective over the probability simplex.
//!
//! Projected gradient ascent with a Barzilai-Borwein trial step and Armijo
//! backtracking. Every iterate is a projection onto the simplex, so it is
//! feasible, and only steps satisfying the sufficient-increase condition are
//! accepted, so the objective never decreases. A reported optimum is a KKT
//! point of the Lagrangian `f(w) - lambda'w - kappa (1 - 1'w)`: the projected
//! gradient `P(w + g) - w` vanishes there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{MixtureWeights, STOCHASTIC_TOL};

/// Step used by [`FnObjective`] when no analytic gradient is supplied.
pub const FD_STEP: f64 = 1e-6;

pub trait SimplexObjective {
    fn dim(&self) -> usize;

    fn value(&self, w: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64;
}

impl<T: SimplexObjective + ?Sized> SimplexObjective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn value(&self, w: &[f64]) -> f64 {
        (**self).value(w)
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        (**self).value_and_gradient(w, grad)
    }
}

/// Objective built from closures; without a gradient closure it falls back
/// to central differences with step [`FD_STEP`].
pub struct FnObjective<F, G = fn(&[f64], &mut [f64])> {
    dim: usize,
    value: F,
    gradient: Option<G>,
}

impl<F: Fn(&[f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, value: F) -> Self {
        Self {
            dim,
            value,
            gradient: None,
        }
    }
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64], &mut [f64])> FnObjective<F, G> {
    pub fn with_gradient(dim: usize, value: F, gradient: G) -> Self {
        Self {
            dim,
            value,
            gradient: Some(gradient),
        }
    }
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64], &mut [f64])> SimplexObjective for FnObjective<F, G> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, w: &[f64]) -> f64 {
        (self.value)(w)
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        match &self.gradient {
            Some(g) => g(w, grad),
            None => {
                let mut probe = w.to_vec();
                for i in 0..w.len() {
                    probe[i] = w[i] + FD_STEP;
                    let up = (self.value)(&probe);
                    probe[i] = w[i] - FD_STEP;
                    let down = (self.value)(&probe);
                    probe[i] = w[i];
                    grad[i] = (up - down) / (2.0 * FD_STEP);
                }
            }
        }
        (self.value)(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub backtrack: f64,
    /// Keep every accepted iterate in the report.
    #[serde(skip)]
    pub record_trace: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            armijo: 1e-4,
            backtrack: 0.5,
            record_trace: false,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("optimizer tol must be positive"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::invalid("Armijo constant must lie in (0, 1)"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::invalid("backtracking factor must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub w: Vec<f64>,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerReport {
    pub w_star: MixtureWeights,
    pub f_star: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted iterates including the start point; empty unless requested.
    pub trace: Vec<TracePoint>,
}

/// Euclidean projection onto `{w : w >= 0, sum w = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> MixtureWeights {
    MixtureWeights::from_vec_unchecked(project(v))
}

fn project(v: &[f64]) -> Vec<f64> {
    debug_assert!(!v.is_empty() && v.iter().all(|x| x.is_finite()));
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > f64::EPSILON * w.len() as f64 {
        w.iter_mut().for_each(|x| *x /= sum);
    }
    w
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_finite(f: f64, w: &[f64]) -> Result<()> {
    if f.is_nan() {
        return Err(Error::numeric(format!("objective is NaN at w = {w:?}")));
    }
    Ok(())
}

/// Maximises `problem` over the simplex starting from `w0`.
///
/// Hitting `max_iter` is not an error: the report carries `converged = false`
/// and the best (last accepted) iterate.
pub fn maximize_on_simplex<P: SimplexObjective>(
    problem: &P,
    w0: &MixtureWeights,
    opts: &OptimizerOptions,
) -> Result<OptimizerReport> {
    opts.validate()?;
    let m = problem.dim();
    if w0.len() != m {
        return Err(Error::invalid(format!("start point has {} weights, objective has {m}", w0.len())));
    }
    let sum: f64 = w0.as_slice().iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL || w0.as_slice().iter().any(|x| *x < 0.0) {
        return Err(Error::invalid("start point is not on the simplex"));
    }

    let mut w = w0.as_slice().to_vec();
    let mut grad = vec![0.0; m];
    let mut f = problem.value_and_gradient(&w, &mut grad);
    check_finite(f, &w)?;
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(TracePoint { w: w.clone(), f });
    }

    let gmax = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
    let mut step = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };
    let mut new_grad = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        for i in 0..m {
            trial[i] = w[i] + grad[i];
        }
        if inf_norm_diff(&project(&trial), &w) < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut alpha = step;
        let accepted = loop {
            for i in 0..m {
                trial[i] = w[i] + alpha * grad[i];
            }
            let candidate = project(&trial);
            let ascent: f64 = candidate.iter().zip(&w).zip(&grad).map(|((c, x), g)| g * (c - x)).sum();
            if inf_norm_diff(&candidate, &w) == 0.0 || ascent <= 0.0 {
                break None;
            }
            let fc = problem.value(&candidate);
            check_finite(fc, &candidate)?;
            if fc >= f + opts.armijo * ascent {
                break Some((candidate, fc));
            }
            alpha *= opts.backtrack;
            if alpha < 1e-300 {
                break None;
            }
        };
        let Some((candidate, _)) = accepted else {
            // No representable ascent step remains.
            converged = true;
            break;
        };

        let fc = problem.value_and_gradient(&candidate, &mut new_grad);
        check_finite(fc, &candidate)?;
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..m {
            let s = candidate[i] - w[i];
            ss += s * s;
            sy += s * (new_grad[i] - grad[i]);
        }
        let moved = inf_norm_diff(&candidate, &w);
        w = candidate;
        f = fc;
        std::mem::swap(&mut grad, &mut new_grad);
        if opts.record_trace {
            trace.push(TracePoint { w: w.clone(), f });
        }
        // Concave curvature gives s'y < 0; otherwise grow the step.
        step = if sy < 0.0 { (ss / -sy).clamp(1e-20, 1e20) } else { (alpha * 4.0).min(1e20) };
        if moved < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(OptimizerReport {
        w_star: MixtureWeights::from_vec_unchecked(w),
        f_star: f,
        iterations,
        converged,
        trace,
    })
}
