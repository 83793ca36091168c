//! Model distances, realisability gap, regret, and performance-bound calculators.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{CountTable, PROB_FLOOR};
use crate::mdp::{LqrModel, MixtureWeights, SourceSet, TabularMdp};
use crate::planning::{
    closed_loop_cost_matrix, lqr_value, plan_lqr, policy_evaluation, value_iteration, LqrGain, PlannerOptions,
    TabularPolicy, ValueFunction,
};
use crate::seeding::{self, Purpose};
use crate::simplex::{maximize_on_simplex, FnObjective, OptimizerOptions};

/// Two L1 distances between kernels of the same shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDistance {
    /// `max_a sum_s' |sum_s (T1 - T2)(s, a, s')|`, the epsilon-homogeneity measure.
    pub homogeneity: f64,
    /// `sum_{s,a} ||T1(s,a,.) - T2(s,a,.)||_1`.
    pub per_pair_l1: f64,
}

fn check_shapes(m1: &TabularMdp, m2: &TabularMdp) -> Result<()> {
    if m1.n_states() != m2.n_states() || m1.n_actions() != m2.n_actions() {
        return Err(Error::invalid("models have different shapes"));
    }
    Ok(())
}

pub fn l1_model_distance(m1: &TabularMdp, m2: &TabularMdp) -> Result<ModelDistance> {
    check_shapes(m1, m2)?;
    let (ns, na) = (m1.n_states(), m1.n_actions());
    let per_pair_l1 = m1
        .transitions()
        .iter()
        .zip(m2.transitions())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let mut homogeneity = 0.0f64;
    let mut column = vec![0.0; ns];
    for a in 0..na {
        column.fill(0.0);
        for s in 0..ns {
            for (acc, (p, q)) in column.iter_mut().zip(m1.row(s, a).iter().zip(m2.row(s, a))) {
                *acc += p - q;
            }
        }
        homogeneity = homogeneity.max(column.iter().map(|x| x.abs()).sum());
    }
    Ok(ModelDistance {
        homogeneity,
        per_pair_l1,
    })
}

/// Summed `KL(T1(s,a,.) || T2(s,a,.))` over all `(s, a)`, with `T2` floored inside logs.
pub fn kl_model_divergence(m1: &TabularMdp, m2: &TabularMdp) -> Result<f64> {
    check_shapes(m1, m2)?;
    Ok(m1
        .transitions()
        .iter()
        .zip(m2.transitions())
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(PROB_FLOOR)).ln())
        .sum())
}

/// Models whose hull distance to a target can be minimised.
pub trait HullDistance: Sized {
    /// Returns `(distance, argmin weights)`.
    fn hull_distance(sources: &SourceSet<Self>, target: &Self, opts: &OptimizerOptions) -> Result<(f64, MixtureWeights)>;
}

// Huber smoothing widths used in continuation towards the exact L1 objective.
const HUBER_SCHEDULE: [f64; 6] = [1e-2, 1e-3, 1e-4, 1e-6, 1e-8, 1e-10];

impl HullDistance for TabularMdp {
    /// Minimises the per-pair L1 distance: a least-squares fit first, then
    /// Huber-smoothed L1 with shrinking width, keeping the best exact L1 seen.
    fn hull_distance(sources: &SourceSet<Self>, target: &Self, opts: &OptimizerOptions) -> Result<(f64, MixtureWeights)> {
        check_shapes(&sources.models()[0], target)?;
        let m = sources.len();
        // Only entries where some source or the target differs matter.
        let mut rows: Vec<f64> = Vec::new();
        let mut goal: Vec<f64> = Vec::new();
        for (j, &t) in target.transitions().iter().enumerate() {
            let vals: Vec<f64> = sources.models().iter().map(|s| s.transitions()[j]).collect();
            if vals.iter().all(|v| *v == t) {
                continue;
            }
            rows.extend(vals);
            goal.push(t);
        }
        if goal.is_empty() {
            return Ok((0.0, MixtureWeights::uniform(m)));
        }
        let residuals = |w: &[f64]| -> Vec<f64> {
            goal.iter()
                .zip(rows.chunks_exact(m))
                .map(|(t, r)| t - r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        };
        let exact_l1 = |w: &[f64]| residuals(w).iter().map(|r| r.abs()).sum::<f64>();

        let lsq = FnObjective::with_gradient(
            m,
            |w: &[f64]| -residuals(w).iter().map(|r| r * r).sum::<f64>(),
            |w: &[f64], g: &mut [f64]| {
                g.fill(0.0);
                for (res, r) in residuals(w).iter().zip(rows.chunks_exact(m)) {
                    for (gi, ri) in g.iter_mut().zip(r) {
                        *gi += 2.0 * res * ri;
                    }
                }
            },
        );
        let mut w = maximize_on_simplex(&lsq, &MixtureWeights::uniform(m), opts)?.w_star;
        let mut best = (exact_l1(w.as_slice()), w.clone());
        for eta in HUBER_SCHEDULE {
            let huber = FnObjective::with_gradient(
                m,
                |w: &[f64]| {
                    -residuals(w)
                        .iter()
                        .map(|r| if r.abs() <= eta { r * r / (2.0 * eta) } else { r.abs() - eta / 2.0 })
                        .sum::<f64>()
                },
                |w: &[f64], g: &mut [f64]| {
                    g.fill(0.0);
                    for (res, r) in residuals(w).iter().zip(rows.chunks_exact(m)) {
                        let d = if res.abs() <= eta { res / eta } else { res.signum() };
                        for (gi, ri) in g.iter_mut().zip(r) {
                            *gi += d * ri;
                        }
                    }
                },
            );
            w = maximize_on_simplex(&huber, &w, opts)?.w_star;
            let l1 = exact_l1(w.as_slice());
            if l1 < best.0 {
                best = (l1, w.clone());
            }
        }
        Ok(best)
    }
}

impl HullDistance for LqrModel {
    /// Frobenius distance between mean matrices.
    fn hull_distance(sources: &SourceSet<Self>, target: &Self, opts: &OptimizerOptions) -> Result<(f64, MixtureWeights)> {
        if sources.models()[0].mean().shape() != target.mean().shape() {
            return Err(Error::invalid("target and sources have different dimensions"));
        }
        let m = sources.len();
        let diffs: Vec<DVector<f64>> = sources
            .models()
            .iter()
            .map(|s| DVector::from_column_slice(s.mean().as_slice()))
            .collect();
        let t = DVector::from_column_slice(target.mean().as_slice());
        let gram = DMatrix::from_fn(m, m, |i, j| diffs[i].dot(&diffs[j]));
        let cross = DVector::from_fn(m, |i, _| diffs[i].dot(&t));
        let tt = t.dot(&t);
        let sq = |w: &[f64]| {
            let w = DVector::from_column_slice(w);
            (tt - 2.0 * cross.dot(&w) + w.dot(&(&gram * &w))).max(0.0)
        };
        let obj = FnObjective::with_gradient(
            m,
            |w: &[f64]| -sq(w),
            |w: &[f64], g: &mut [f64]| {
                let gw = &gram * DVector::from_column_slice(w);
                for i in 0..m {
                    g[i] = 2.0 * (cross[i] - gw[i]);
                }
            },
        );
        let rep = maximize_on_simplex(&obj, &MixtureWeights::uniform(m), opts)?;
        Ok((sq(rep.w_star.as_slice()).sqrt(), rep.w_star))
    }
}

/// `min_{mu in C(M_s)} ||mu* - mu||` and its argmin.
pub fn realisability_gap<M: HullDistance>(sources: &SourceSet<M>, target: &M) -> Result<(f64, MixtureWeights)> {
    M::hull_distance(sources, target, &OptimizerOptions::default())
}

/// Hull point closest to `target` in summed KL, `argmin_w sum_{s,a} KL(T* || T_w)`.
pub fn kl_projection(sources: &SourceSet<TabularMdp>, target: &TabularMdp) -> Result<(f64, MixtureWeights)> {
    check_shapes(&sources.models()[0], target)?;
    let m = sources.len();
    let mut weights = Vec::new();
    let mut rows = Vec::new();
    for (j, &p) in target.transitions().iter().enumerate() {
        if p > 0.0 {
            weights.push(p);
            rows.extend(sources.models().iter().map(|s| s.transitions()[j]));
        }
    }
    let obj = FnObjective::with_gradient(
        m,
        |w: &[f64]| {
            weights
                .iter()
                .zip(rows.chunks_exact(m))
                .map(|(p, r)| p * r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().max(PROB_FLOOR).ln())
                .sum()
        },
        |w: &[f64], g: &mut [f64]| {
            g.fill(0.0);
            for (p, r) in weights.iter().zip(rows.chunks_exact(m)) {
                let mix: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                if mix > PROB_FLOOR {
                    for (gi, ri) in g.iter_mut().zip(r) {
                        *gi += p * ri / mix;
                    }
                }
            }
        },
    );
    let rep = maximize_on_simplex(&obj, &MixtureWeights::uniform(m), &OptimizerOptions::default())?;
    let proxy = crate::mdp::mix_tabular(sources, &rep.w_star)?;
    Ok((kl_model_divergence(target, &proxy)?, rep.w_star))
}

/// `3 (eps_estim + eps_realise) / (1 - gamma)^2`.
pub fn performance_gap_bound(eps_estim: f64, eps_realise: f64, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid(format!("discount {gamma} outside [0, 1)")));
    }
    if eps_estim < 0.0 || eps_realise < 0.0 {
        return Err(Error::invalid("error terms must be non-negative"));
    }
    Ok(3.0 * (eps_estim + eps_realise) / (1.0 - gamma).powi(2))
}

/// Per-cell L1 concentration radius `sqrt(2 ln((2^S - 2) / delta) / n)`.
pub fn weissman_cell_bound(n_states: usize, n: u64, delta: f64) -> Result<f64> {
    if n_states < 2 {
        return Err(Error::invalid("the concentration bound needs at least two states"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta {delta} outside (0, 1)")));
    }
    if n == 0 {
        return Ok(2.0);
    }
    // ln(2^S - 2) without forming 2^S.
    let s = n_states as f64;
    let ln_support = s * std::f64::consts::LN_2 + (-(2f64.powf(1.0 - s))).ln_1p();
    Ok((2.0 * (ln_support - delta.ln()) / n as f64).sqrt())
}

/// Sum of per-cell radii over all `(s, a)`; unvisited cells contribute 2.
pub fn weissman_bound(counts: &CountTable, n_states: usize, delta: f64) -> Result<f64> {
    if counts.n_states() != n_states {
        return Err(Error::invalid("count table has a different number of states"));
    }
    counts
        .visit_table()
        .iter()
        .map(|&n| weissman_cell_bound(n_states, n, delta))
        .sum()
}

/// Scores tabular policies against the optimal policy of a fixed true model.
#[derive(Clone, Debug)]
pub struct TabularRegret {
    model: TabularMdp,
    optimal_policy: TabularPolicy,
    optimal_values: ValueFunction,
}

/// Tolerance used when solving the true model for regret.
pub const ORACLE_VI_TOL: f64 = 1e-10;

impl TabularRegret {
    pub fn new(model: &TabularMdp) -> Result<Self> {
        let (_, optimal_policy) = value_iteration(model, ORACLE_VI_TOL);
        let optimal_values = policy_evaluation(model, &optimal_policy)?;
        Ok(Self {
            model: model.clone(),
            optimal_policy,
            optimal_values,
        })
    }

    pub fn optimal_policy(&self) -> &TabularPolicy {
        &self.optimal_policy
    }

    pub fn optimal_values(&self) -> &ValueFunction {
        &self.optimal_values
    }

    /// `max_s (V*(s) - V^pi(s))`.
    pub fn regret(&self, policy: &TabularPolicy) -> Result<f64> {
        if *policy == self.optimal_policy {
            return Ok(0.0);
        }
        let v = policy_evaluation(&self.model, policy)?;
        Ok(self
            .optimal_values
            .values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

pub fn regret_of_policy(true_model: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    TabularRegret::new(true_model)?.regret(policy)
}

/// Number of start states used to score LQR gains.
pub const LQR_EVAL_STARTS: usize = 64;
/// Seed of the fixed start-state sample.
pub const LQR_EVAL_SEED: u64 = 0x5eed;
/// Rollout horizon used when a gain does not stabilise the true system.
pub const LQR_UNSTABLE_HORIZON: usize = 500;

/// Scores linear gains against the Riccati-optimal gain of a true LQR model.
///
/// Costs are averaged over a fixed sample of standard-normal start states.
/// Stabilising gains use their exact infinite-horizon cost; destabilising
/// gains are rolled out for `horizon` steps, so their regret grows with it.
#[derive(Clone, Debug)]
pub struct LqrRegret {
    model: LqrModel,
    oracle: LqrGain,
    starts: Vec<DVector<f64>>,
    optimal_costs: Vec<f64>,
    horizon: usize,
}

impl LqrRegret {
    pub fn new(model: &LqrModel, horizon: usize) -> Result<Self> {
        let oracle = plan_lqr(model, &PlannerOptions::default())?;
        let mut rng = seeding::stream(LQR_EVAL_SEED, 0, 0, Purpose::Evaluation);
        let starts: Vec<DVector<f64>> = (0..LQR_EVAL_STARTS)
            .map(|_| DVector::from_fn(model.dim_state(), |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let (f, b) = model.effective_dynamics(false);
        let p_opt = closed_loop_cost_matrix(&f, &b, model.cost_state(), model.cost_action(), &oracle.k)
            .ok_or_else(|| Error::numeric("oracle gain does not stabilise the true system"))?;
        let optimal_costs = starts.iter().map(|s| s.dot(&(&p_opt * s))).collect();
        Ok(Self {
            model: model.clone(),
            oracle,
            starts,
            optimal_costs,
            horizon,
        })
    }

    pub fn oracle_gain(&self) -> &LqrGain {
        &self.oracle
    }

    pub fn regret(&self, gain: &DMatrix<f64>) -> Result<f64> {
        if gain.shape() != self.oracle.k.shape() {
            return Err(Error::invalid("gain has the wrong shape"));
        }
        if *gain == self.oracle.k {
            return Ok(0.0);
        }
        let (f, b) = self.model.effective_dynamics(false);
        let n = self.starts.len() as f64;
        match closed_loop_cost_matrix(&f, &b, self.model.cost_state(), self.model.cost_action(), gain) {
            Some(pk) => Ok(self
                .starts
                .iter()
                .zip(&self.optimal_costs)
                .map(|(s, opt)| s.dot(&(&pk * s)) - opt)
                .sum::<f64>()
                / n),
            None => {
                let candidate = LqrGain {
                    k: gain.clone(),
                    p: DMatrix::zeros(f.nrows(), f.nrows()),
                };
                Ok(self
                    .starts
                    .iter()
                    .zip(&self.optimal_costs)
                    .map(|(s, opt)| lqr_value(&self.model, &candidate, s, self.horizon, false) - opt)
                    .sum::<f64>()
                    / n)
            }
        }
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::numeric("spearman correlation undefined for a constant sample"));
    }
    Ok(cov / (vx * vy).sqrt())
}
