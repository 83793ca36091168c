//! Model-based planners: value iteration for tabular models and Riccati
//! iteration for LQR models.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LqrModel, TabularMdp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerOptions {
    pub vi_tol: f64,
    pub riccati_tol: f64,
    pub riccati_max_iter: usize,
    /// Run the Riccati recursion on the increment matrix `A` instead of `I + A`.
    pub riccati_on_raw_a: bool,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            vi_tol: 1e-6,
            riccati_tol: 1e-9,
            riccati_max_iter: 10_000,
            riccati_on_raw_a: false,
        }
    }
}

impl PlannerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.vi_tol > 0.0) || !(self.riccati_tol > 0.0) {
            return Err(Error::invalid("planner tolerances must be positive"));
        }
        if self.riccati_max_iter == 0 {
            return Err(Error::invalid("riccati_max_iter must be positive"));
        }
        Ok(())
    }
}

/// Deterministic tabular policy.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub actions: Vec<usize>,
}

impl TabularPolicy {
    pub fn action(&self, s: usize) -> usize {
        self.actions[s]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
}

impl ValueFunction {
    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn q_value(model: &TabularMdp, values: &[f64], s: usize, a: usize) -> f64 {
    let expected: f64 = model.row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
    model.reward(s, a) + model.discount() * expected
}

/// Greedy policy with lowest-index tie-breaking.
pub fn greedy_policy(model: &TabularMdp, value: &ValueFunction) -> TabularPolicy {
    let actions = (0..model.n_states())
        .map(|s| {
            let mut best_a = 0;
            let mut best_q = q_value(model, &value.values, s, 0);
            for a in 1..model.n_actions() {
                let q = q_value(model, &value.values, s, a);
                if q > best_q + 1e-12 * best_q.abs().max(1.0) {
                    best_a = a;
                    best_q = q;
                }
            }
            best_a
        })
        .collect();
    TabularPolicy { actions }
}

fn bellman_backup(model: &TabularMdp, values: &[f64], out: &mut [f64]) {
    for (s, slot) in out.iter_mut().enumerate() {
        *slot = (0..model.n_actions())
            .map(|a| q_value(model, values, s, a))
            .fold(f64::NEG_INFINITY, f64::max);
    }
}

/// `||V - T V||_inf` for the Bellman optimality operator `T`.
pub fn bellman_residual(model: &TabularMdp, value: &ValueFunction) -> f64 {
    let mut next = vec![0.0; model.n_states()];
    bellman_backup(model, &value.values, &mut next);
    value.sup_distance(&ValueFunction { values: next })
}

/// Value iteration from `V = 0`.
///
/// Stops once `||V_{k+1} - V_k||_inf < tol (1 - gamma) / (2 gamma)`, which
/// leaves a Bellman residual below `tol`.
pub fn value_iteration(model: &TabularMdp, tol: f64) -> (ValueFunction, TabularPolicy) {
    value_iteration_from(model, tol, None)
}

/// Value iteration warm-started from `init` when given.
pub fn value_iteration_from(
    model: &TabularMdp,
    tol: f64,
    init: Option<&ValueFunction>,
) -> (ValueFunction, TabularPolicy) {
    assert!(tol > 0.0, "value iteration tolerance must be positive");
    let ns = model.n_states();
    let gamma = model.discount();
    let mut v = match init {
        Some(v0) if v0.values.len() == ns => v0.values.clone(),
        _ => vec![0.0; ns],
    };
    let mut next = vec![0.0; ns];
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / (2.0 * gamma)
    } else {
        f64::INFINITY
    };
    loop {
        bellman_backup(model, &v, &mut next);
        let diff = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if diff < threshold {
            break;
        }
    }
    let value = ValueFunction { values: v };
    let policy = greedy_policy(model, &value);
    (value, policy)
}

/// Exact evaluation by solving `(I - gamma P_pi) V = r_pi`.
pub fn policy_evaluation(model: &TabularMdp, policy: &TabularPolicy) -> Result<ValueFunction> {
    let ns = model.n_states();
    if policy.actions.len() != ns {
        return Err(Error::invalid("policy length differs from n_states"));
    }
    if let Some(a) = policy.actions.iter().find(|&&a| a >= model.n_actions()) {
        return Err(Error::invalid(format!("policy action {a} out of range")));
    }
    let gamma = model.discount();
    let mut lhs = DMatrix::identity(ns, ns);
    let mut rhs = DVector::zeros(ns);
    for s in 0..ns {
        let a = policy.actions[s];
        rhs[s] = model.reward(s, a);
        for (t, p) in model.row(s, a).iter().enumerate() {
            lhs[(s, t)] -= gamma * p;
        }
    }
    let v = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numeric("policy evaluation system is singular"))?;
    Ok(ValueFunction {
        values: v.iter().copied().collect(),
    })
}

/// Linear feedback `a = -K s` with the cost-to-go matrix `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrGain {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl LqrGain {
    pub fn action(&self, state: &DVector<f64>) -> DVector<f64> {
        -(&self.k * state)
    }
}

fn gain_from_cost_to_go(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let chol = Cholesky::new(s).ok_or_else(|| Error::numeric("R + B'PB is not positive definite"))?;
    let k = chol.solve(&(&btp * f));
    Ok((k, btp))
}

/// Frobenius norm of `F'PF - P + Q - F'PB (R + B'PB)^-1 B'PF`.
pub fn riccati_residual(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_step(f, b, q, r, p) {
        Ok(next) => (next - p).norm(),
        Err(_) => f64::INFINITY,
    }
}

fn riccati_step(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (k, _) = gain_from_cost_to_go(f, b, r, p)?;
    let ftp = f.transpose() * p;
    let next = q + &ftp * f - (&ftp * b) * k;
    Ok((&next + next.transpose()) * 0.5)
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration from `P = Q`.
pub fn solve_riccati(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LqrGain> {
    let n = f.nrows();
    if f.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::invalid("inconsistent Riccati matrix shapes"));
    }
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = riccati_step(f, b, q, r, &p)?;
        residual = (&next - &p).norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            let (k, _) = gain_from_cost_to_go(f, b, r, &p)?;
            return Ok(LqrGain { k, p });
        }
        p = next;
    }
    Err(Error::NonStabilizable {
        iterations: max_iter,
        residual,
    })
}

/// Riccati solution for a model, planning on `I + A` unless `raw_a` is set.
pub fn plan_lqr(model: &LqrModel, opts: &PlannerOptions) -> Result<LqrGain> {
    let (f, b) = model.effective_dynamics(opts.riccati_on_raw_a);
    solve_riccati(
        &f,
        &b,
        model.cost_state(),
        model.cost_action(),
        opts.riccati_tol,
        opts.riccati_max_iter,
    )
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn closed_loop(f: &DMatrix<f64>, b: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    f - b * k
}

/// Accumulated quadratic cost of the noiseless closed loop over `horizon` steps.
pub fn lqr_value(model: &LqrModel, gain: &LqrGain, s0: &DVector<f64>, horizon: usize, raw_a: bool) -> f64 {
    let (f, b) = model.effective_dynamics(raw_a);
    let mut s = s0.clone();
    let mut cost = 0.0;
    for _ in 0..horizon {
        let a = gain.action(&s);
        cost += model.stage_cost(&s, &a);
        s = &f * &s + &b * &a;
    }
    cost
}

/// Infinite-horizon cost matrix `P_K` of the gain `K`, i.e. the solution of
/// `P = Q + K'RK + (F - BK)' P (F - BK)`. `None` when the loop is unstable.
pub fn closed_loop_cost_matrix(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let fc = closed_loop(f, b, k);
    if spectral_radius(&fc) >= 1.0 {
        return None;
    }
    let n = f.nrows();
    let qc = q + k.transpose() * r * k;
    // vec(P) = (I - Fc' kron Fc')^-1 vec(Qc), column-major vec.
    let fct = fc.transpose();
    let kron = fct.kronecker(&fct);
    let lhs = DMatrix::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(qc.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some((&p + p.transpose()) * 0.5)
}
