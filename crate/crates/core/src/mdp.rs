//! Model types for the two MDP classes and convex combinations of source models.
//!
//! A [`TabularMdp`] stores its kernel as a flat `(s, a, s')` tensor. An
//! [`LqrModel`] stores the linear-Gaussian mean matrix with the column
//! convention `[B | A]`: the first `dim_action` columns multiply the action and
//! the remaining `dim_state` columns multiply the state. The mean predicts the
//! state increment `s' - s`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums and weight sums.
pub const STOCHASTIC_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TabularRepr", into = "TabularRepr")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<f64>,
    discount: f64,
}

/// On-disk layout: `transitions[s][a][s']`, `rewards[s][a]`.
#[derive(Serialize, Deserialize)]
struct TabularRepr {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<f64>>,
    discount: f64,
}

impl TryFrom<TabularRepr> for TabularMdp {
    type Error = Error;

    fn try_from(r: TabularRepr) -> Result<Self> {
        if r.transitions.len() != r.n_states || r.rewards.len() != r.n_states {
            return Err(Error::invalid("outer table length must equal n_states"));
        }
        let mut transitions = Vec::with_capacity(r.n_states * r.n_actions * r.n_states);
        for per_action in &r.transitions {
            if per_action.len() != r.n_actions {
                return Err(Error::invalid("transition table must have n_actions rows per state"));
            }
            for row in per_action {
                if row.len() != r.n_states {
                    return Err(Error::invalid("transition row must have n_states entries"));
                }
                transitions.extend_from_slice(row);
            }
        }
        let mut rewards = Vec::with_capacity(r.n_states * r.n_actions);
        for row in &r.rewards {
            if row.len() != r.n_actions {
                return Err(Error::invalid("reward row must have n_actions entries"));
            }
            rewards.extend_from_slice(row);
        }
        TabularMdp::new(r.n_states, r.n_actions, transitions, rewards, r.discount)
    }
}

impl From<TabularMdp> for TabularRepr {
    fn from(m: TabularMdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        TabularRepr {
            n_states: ns,
            n_actions: na,
            transitions: (0..ns)
                .map(|s| (0..na).map(|a| m.row(s, a).to_vec()).collect())
                .collect(),
            rewards: (0..ns)
                .map(|s| (0..na).map(|a| m.reward(s, a)).collect())
                .collect(),
            discount: m.discount,
        }
    }
}

impl TabularMdp {
    /// Builds a validated model from a flat `(s, a, s')` kernel and a flat `(s, a)` reward table.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("n_states and n_actions must be positive"));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::invalid(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                n_states * n_actions * n_states
            )));
        }
        if rewards.len() != n_states * n_actions {
            return Err(Error::invalid(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                n_states * n_actions
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid(format!("discount {discount} outside [0, 1)")));
        }
        for (k, row) in transitions.chunks(n_states).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!(
                    "negative or non-finite probability in row (s={}, a={})",
                    k / n_actions,
                    k % n_actions
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "row (s={}, a={}) sums to {sum}",
                    k / n_actions,
                    k % n_actions
                )));
            }
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            discount,
        })
    }

    /// Builds a model from per-row and per-cell closures.
    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        mut row: impl FnMut(usize, usize) -> Vec<f64>,
        mut reward: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        let mut rewards = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                transitions.extend(row(s, a));
                rewards.push(reward(s, a));
            }
        }
        Self::new(n_states, n_actions, transitions, rewards, discount)
    }

    pub(crate) fn from_parts_unchecked(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
    ) -> Self {
        debug_assert_eq!(transitions.len(), n_states * n_actions * n_states);
        debug_assert_eq!(rewards.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            discount,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Flat kernel, indexed `(s * n_actions + a) * n_states + s'`.
    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Flat reward table, indexed `s * n_actions + a`.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    /// Same kernel with a replacement reward table (validated).
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transitions.clone(),
            rewards,
            self.discount,
        )
    }

    /// Same rewards with a replacement kernel (validated).
    pub fn with_transitions(&self, transitions: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transitions,
            self.rewards.clone(),
            self.discount,
        )
    }

    pub(crate) fn same_shape(&self, other: &Self) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LqrRepr", into = "LqrRepr")]
pub struct LqrModel {
    dim_state: usize,
    dim_action: usize,
    mean: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    cost_state: DMatrix<f64>,
    cost_action: DMatrix<f64>,
}

/// On-disk layout: every matrix as a list of rows.
#[derive(Serialize, Deserialize)]
struct LqrRepr {
    dim_state: usize,
    dim_action: usize,
    mean: Vec<Vec<f64>>,
    noise_cov: Vec<Vec<f64>>,
    cost_state: Vec<Vec<f64>>,
    cost_action: Vec<Vec<f64>>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<LqrRepr> for LqrModel {
    type Error = Error;

    fn try_from(r: LqrRepr) -> Result<Self> {
        let (ds, da) = (r.dim_state, r.dim_action);
        LqrModel::new(
            matrix_from_rows(&r.mean, ds, da + ds, "mean")?,
            matrix_from_rows(&r.noise_cov, ds, ds, "noise_cov")?,
            matrix_from_rows(&r.cost_state, ds, ds, "cost_state")?,
            matrix_from_rows(&r.cost_action, da, da, "cost_action")?,
        )
    }
}

impl From<LqrModel> for LqrRepr {
    fn from(m: LqrModel) -> Self {
        LqrRepr {
            dim_state: m.dim_state,
            dim_action: m.dim_action,
            mean: matrix_to_rows(&m.mean),
            noise_cov: matrix_to_rows(&m.noise_cov),
            cost_state: matrix_to_rows(&m.cost_state),
            cost_action: matrix_to_rows(&m.cost_action),
        }
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

impl LqrModel {
    /// `mean` is `d_s x (d_a + d_s)` laid out as `[B | A]`.
    ///
    /// The noise covariance only needs to be PSD here; the likelihood rejects a
    /// singular one.
    pub fn new(
        mean: DMatrix<f64>,
        noise_cov: DMatrix<f64>,
        cost_state: DMatrix<f64>,
        cost_action: DMatrix<f64>,
    ) -> Result<Self> {
        let ds = mean.nrows();
        if ds == 0 || mean.ncols() <= ds {
            return Err(Error::invalid(format!(
                "mean must be d_s x (d_a + d_s) with d_a >= 1, got {}x{}",
                mean.nrows(),
                mean.ncols()
            )));
        }
        let da = mean.ncols() - ds;
        if noise_cov.shape() != (ds, ds) || cost_state.shape() != (ds, ds) {
            return Err(Error::invalid("noise_cov and cost_state must be d_s x d_s"));
        }
        if cost_action.shape() != (da, da) {
            return Err(Error::invalid("cost_action must be d_a x d_a"));
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("mean has non-finite entries"));
        }
        for (name, m) in [
            ("noise_cov", &noise_cov),
            ("cost_state", &cost_state),
            ("cost_action", &cost_action),
        ] {
            if !is_symmetric(m) {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
        }
        if min_eigenvalue(&noise_cov) < -1e-12 {
            return Err(Error::invalid("noise_cov is not positive semidefinite"));
        }
        if min_eigenvalue(&cost_state) < -1e-12 {
            return Err(Error::invalid("cost_state is not positive semidefinite"));
        }
        if min_eigenvalue(&cost_action) <= 0.0 {
            return Err(Error::invalid("cost_action is not positive definite"));
        }
        Ok(Self {
            dim_state: ds,
            dim_action: da,
            mean,
            noise_cov,
            cost_state,
            cost_action,
        })
    }

    /// Builds the model from separate state (`A`) and input (`B`) matrices in increment form.
    pub fn from_increment_dynamics(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        noise_cov: DMatrix<f64>,
        cost_state: DMatrix<f64>,
        cost_action: DMatrix<f64>,
    ) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(Error::invalid("A must be square and B must have d_s rows"));
        }
        let mut mean = DMatrix::zeros(a.nrows(), b.ncols() + a.ncols());
        mean.columns_mut(0, b.ncols()).copy_from(b);
        mean.columns_mut(b.ncols(), a.ncols()).copy_from(a);
        Self::new(mean, noise_cov, cost_state, cost_action)
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_action(&self) -> usize {
        self.dim_action
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn cost_state(&self) -> &DMatrix<f64> {
        &self.cost_state
    }

    pub fn cost_action(&self) -> &DMatrix<f64> {
        &self.cost_action
    }

    /// The `B` block of the mean matrix.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        self.mean.columns(0, self.dim_action).into_owned()
    }

    /// The `A` block of the mean matrix (increment form).
    pub fn state_matrix(&self) -> DMatrix<f64> {
        self.mean.columns(self.dim_action, self.dim_state).into_owned()
    }

    /// One-step map `(F, B)` used by the planner.
    ///
    /// With `raw_a` the increment matrix `A` is returned as `F`; otherwise
    /// `F = I + A`, the true one-step state map.
    pub fn effective_dynamics(&self, raw_a: bool) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut f = self.state_matrix();
        if !raw_a {
            for i in 0..self.dim_state {
                f[(i, i)] += 1.0;
            }
        }
        (f, self.input_matrix())
    }

    /// Regressor `x = (a, s)` matching the column convention.
    pub fn regressor(action: &DVector<f64>, state: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(action.len() + state.len());
        x.rows_mut(0, action.len()).copy_from(action);
        x.rows_mut(action.len(), state.len()).copy_from(state);
        x
    }

    /// Predicted mean increment `M (a, s)`.
    pub fn predict_increment(&self, action: &DVector<f64>, state: &DVector<f64>) -> DVector<f64> {
        &self.mean * Self::regressor(action, state)
    }

    /// Quadratic stage cost `s'Qs + a'Ra`.
    pub fn stage_cost(&self, state: &DVector<f64>, action: &DVector<f64>) -> f64 {
        state.dot(&(&self.cost_state * state)) + action.dot(&(&self.cost_action * action))
    }

    pub fn with_mean(&self, mean: DMatrix<f64>) -> Result<Self> {
        if mean.shape() != self.mean.shape() {
            return Err(Error::invalid("replacement mean has the wrong shape"));
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }

    pub fn with_noise_cov(&self, noise_cov: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.mean.clone(),
            noise_cov,
            self.cost_state.clone(),
            self.cost_action.clone(),
        )
    }

    fn shares_task_constants(&self, other: &Self) -> bool {
        self.mean.shape() == other.mean.shape()
            && self.noise_cov == other.noise_cov
            && self.cost_state == other.cost_state
            && self.cost_action == other.cost_action
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

impl MixtureWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::invalid("mixture weights must be non-empty"));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid(format!("weights must be finite and non-negative: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform weights need m >= 1");
        Self(vec![1.0 / m as f64; m])
    }

    pub fn one_hot(m: usize, i: usize) -> Self {
        assert!(i < m, "one-hot index out of range");
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Self(w)
    }

    pub(crate) fn from_vec_unchecked(w: Vec<f64>) -> Self {
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Shape compatibility between members of a source set.
pub trait SourceModel: Clone {
    fn compatible_with(&self, other: &Self) -> bool;
}

impl SourceModel for TabularMdp {
    fn compatible_with(&self, other: &Self) -> bool {
        self.same_shape(other) && self.discount == other.discount
    }
}

impl SourceModel for LqrModel {
    fn compatible_with(&self, other: &Self) -> bool {
        self.shares_task_constants(other)
    }
}

/// The known source models whose convex hull is searched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<M>", into = "Vec<M>")]
#[serde(bound(serialize = "M: SourceModel + Serialize", deserialize = "M: SourceModel + Deserialize<'de>"))]
pub struct SourceSet<M> {
    models: Vec<M>,
}

impl<M: SourceModel> TryFrom<Vec<M>> for SourceSet<M> {
    type Error = Error;

    fn try_from(models: Vec<M>) -> Result<Self> {
        Self::new(models)
    }
}

impl<M: SourceModel> From<SourceSet<M>> for Vec<M> {
    fn from(s: SourceSet<M>) -> Self {
        s.models
    }
}

impl<M: SourceModel> SourceSet<M> {
    /// Rejects empty sets and members whose shapes (or task constants) differ.
    pub fn new(models: Vec<M>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::invalid("source set must contain at least one model"))?;
        if let Some(i) = models.iter().position(|m| !first.compatible_with(m)) {
            return Err(Error::invalid(format!(
                "source {i} does not share dimensions/task constants with source 0"
            )));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[M] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&M> {
        self.models.get(i)
    }

    fn check_weights(&self, w: &MixtureWeights) -> Result<()> {
        if w.len() != self.models.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} sources",
                w.len(),
                self.models.len()
            )));
        }
        Ok(())
    }
}

/// Convex combination of tabular sources.
///
/// Rewards are copied when every source carries the same table and mixed
/// with the same weights otherwise.
pub fn mix_tabular(sources: &SourceSet<TabularMdp>, w: &MixtureWeights) -> Result<TabularMdp> {
    sources.check_weights(w)?;
    let first = &sources.models[0];
    let mut transitions = vec![0.0; first.transitions.len()];
    for (model, &wi) in sources.models.iter().zip(w.as_slice()) {
        if wi == 0.0 {
            continue;
        }
        for (t, p) in transitions.iter_mut().zip(&model.transitions) {
            *t += wi * p;
        }
    }
    let shared = sources.models.iter().all(|m| m.rewards == first.rewards);
    let rewards = if shared {
        first.rewards.clone()
    } else {
        let mut r = vec![0.0; first.rewards.len()];
        for (model, &wi) in sources.models.iter().zip(w.as_slice()) {
            for (acc, x) in r.iter_mut().zip(&model.rewards) {
                *acc += wi * x;
            }
        }
        r.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        r
    };
    Ok(TabularMdp::from_parts_unchecked(
        first.n_states,
        first.n_actions,
        transitions,
        rewards,
        first.discount,
    ))
}

/// Convex combination of LQR mean matrices; noise and cost matrices come from the shared task.
pub fn mix_lqr(sources: &SourceSet<LqrModel>, w: &MixtureWeights) -> Result<LqrModel> {
    sources.check_weights(w)?;
    let first = &sources.models[0];
    let mut mean = DMatrix::zeros(first.mean.nrows(), first.mean.ncols());
    for (model, &wi) in sources.models.iter().zip(w.as_slice()) {
        if wi != 0.0 {
            mean += &model.mean * wi;
        }
    }
    Ok(LqrModel { mean, ..first.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::chain_model;
    use proptest::prelude::*;

    fn two_state(row0: [f64; 2]) -> TabularMdp {
        TabularMdp::new(2, 1, vec![row0[0], row0[1], 0.5, 0.5], vec![0.0, 0.0], 0.9).unwrap()
    }

    #[test]
    fn rejects_bad_rows_and_rewards() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.5).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.5, -0.5, 0.5, 0.5], vec![0.0, 0.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![1.5], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.5], 1.0).is_err());
    }

    #[test]
    fn one_hot_mix_returns_source() {
        let a = two_state([1.0, 0.0]);
        let b = two_state([0.3, 0.7]);
        let set = SourceSet::new(vec![a, b.clone()]).unwrap();
        assert_eq!(mix_tabular(&set, &MixtureWeights::one_hot(2, 1)).unwrap(), b);
    }

    #[test]
    fn symmetric_mix_of_opposite_rows() {
        let set = SourceSet::new(vec![two_state([1.0, 0.0]), two_state([0.0, 1.0])]).unwrap();
        let m = mix_tabular(&set, &MixtureWeights::uniform(2)).unwrap();
        assert_eq!(m.row(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn chain_slip_mixture_rows() {
        let slips = [0.01, 0.20, 0.50];
        let set = SourceSet::new(slips.iter().map(|&p| chain_model(5, p, 0.9).unwrap()).collect()).unwrap();
        let w = MixtureWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let m = mix_tabular(&set, &w).unwrap();
        // Hand-computed: effective slip 0.2*0.01 + 0.5*0.20 + 0.3*0.50 = 0.252.
        let slip = 0.252;
        for s in 0..5 {
            for a in 0..2 {
                let expected: Vec<f64> = (0..5)
                    .map(|t| {
                        0.2 * set.models()[0].prob(s, a, t)
                            + 0.5 * set.models()[1].prob(s, a, t)
                            + 0.3 * set.models()[2].prob(s, a, t)
                    })
                    .collect();
                for t in 0..5 {
                    assert!((m.prob(s, a, t) - expected[t]).abs() < 1e-15);
                }
            }
        }
        let direct = chain_model(5, slip, 0.9).unwrap();
        for (x, y) in m.transitions().iter().zip(direct.transitions()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_rejects_wrong_weight_count() {
        let set = SourceSet::new(vec![two_state([1.0, 0.0])]).unwrap();
        assert!(matches!(
            mix_tabular(&set, &MixtureWeights::uniform(2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn source_set_rejects_mismatched_shapes() {
        let a = two_state([1.0, 0.0]);
        let b = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 0.9).unwrap();
        assert!(SourceSet::new(vec![a, b]).is_err());
        assert!(SourceSet::<TabularMdp>::new(vec![]).is_err());
    }

    fn scalar_lqr(mean_a: f64) -> LqrModel {
        LqrModel::new(
            DMatrix::from_row_slice(1, 2, &[0.0, mean_a]),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn lqr_mix_cases() {
        let set = SourceSet::new(vec![scalar_lqr(0.0), scalar_lqr(2.0)]).unwrap();
        let m = mix_lqr(&set, &MixtureWeights::uniform(2)).unwrap();
        assert_eq!(m.mean()[(0, 1)], 1.0);
        assert_eq!(mix_lqr(&set, &MixtureWeights::one_hot(2, 1)).unwrap(), set.models()[1]);
    }

    #[test]
    fn lqr_three_way_average_matches_elementwise_sum() {
        let means = [
            [0.3, -1.2, 0.7, 2.0, 0.1, -0.4],
            [1.1, 0.5, -0.9, 0.0, 0.6, 0.25],
            [-0.2, 0.8, 0.4, -1.5, 1.0, 0.9],
        ];
        let models: Vec<LqrModel> = means
            .iter()
            .map(|m| {
                LqrModel::new(
                    DMatrix::from_row_slice(2, 3, m),
                    DMatrix::identity(2, 2),
                    DMatrix::identity(2, 2),
                    DMatrix::identity(1, 1),
                )
                .unwrap()
            })
            .collect();
        let set = SourceSet::new(models).unwrap();
        let w = MixtureWeights::new(vec![1.0 / 3.0; 3]).unwrap();
        let mixed = mix_lqr(&set, &w).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for m in &means {
                    acc += m[r * 3 + c];
                }
                assert!((mixed.mean()[(r, c)] - acc / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lqr_rejects_indefinite_costs() {
        let bad_r = LqrModel::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.0),
        );
        assert!(bad_r.is_err());
        let asym = LqrModel::new(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DMatrix::identity(1, 1),
        );
        assert!(asym.is_err());
    }

    #[test]
    fn serde_round_trip_keeps_layout() {
        let m = chain_model(3, 0.2, 0.9).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"transitions\":[[["));
        let back: TabularMdp = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let bad = json.replace("\"discount\":0.9", "\"discount\":1.5");
        assert!(serde_json::from_str::<TabularMdp>(&bad).is_err());

        let l = scalar_lqr(0.5);
        let back: LqrModel = serde_json::from_str(&serde_json::to_string(&l).unwrap()).unwrap();
        assert_eq!(back, l);
    }

    fn simplex_point(raw: Vec<f64>) -> MixtureWeights {
        let sum: f64 = raw.iter().sum();
        MixtureWeights::new(raw.iter().map(|x| x / sum).collect()).unwrap()
    }

    fn random_sources(seed: u64) -> SourceSet<TabularMdp> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let models = (0..3)
            .map(|_| {
                TabularMdp::from_fn(
                    3,
                    2,
                    0.9,
                    |_, _| {
                        let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-3).collect();
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(|x| x / s).collect()
                    },
                    |_, _| 0.5,
                )
                .unwrap()
            })
            .collect();
        SourceSet::new(models).unwrap()
    }

    proptest! {
        #[test]
        fn mixing_is_affine(
            seed in 0u64..1000,
            u in proptest::collection::vec(0.01f64..1.0, 3),
            v in proptest::collection::vec(0.01f64..1.0, 3),
            alpha in 0.0f64..=1.0,
        ) {
            let set = random_sources(seed);
            let (u, v) = (simplex_point(u), simplex_point(v));
            let blend = MixtureWeights::from_vec_unchecked(
                u.as_slice().iter().zip(v.as_slice()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect(),
            );
            let lhs = mix_tabular(&set, &blend).unwrap();
            let mu = mix_tabular(&set, &u).unwrap();
            let mv = mix_tabular(&set, &v).unwrap();
            for i in 0..lhs.transitions().len() {
                let rhs = alpha * mu.transitions()[i] + (1.0 - alpha) * mv.transitions()[i];
                prop_assert!((lhs.transitions()[i] - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn mixing_preserves_stochastic_rows(seed in 0u64..1000, raw in proptest::collection::vec(0.0f64..1.0, 3)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let set = random_sources(seed);
            let m = mix_tabular(&set, &simplex_point(raw)).unwrap();
            prop_assert!(TabularMdp::new(3, 2, m.transitions().to_vec(), m.rewards().to_vec(), 0.9).is_ok());
        }
    }
}
