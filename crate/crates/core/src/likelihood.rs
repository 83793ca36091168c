//! Observed transitions, their sufficient statistics, and the Stage 1 log-likelihoods.
//!
//! The tabular likelihood drops the multinomial coefficient: it does not
//! depend on the mixture weights, so the argmax is unchanged.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LqrModel, SourceSet, TabularMdp};
use crate::simplex::SimplexObjective;

/// Lower clamp applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ridge used by the least-squares empirical LQR model.
pub const DEFAULT_RIDGE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<S, A> {
    pub s: S,
    pub a: A,
    pub s_next: S,
    pub r: f64,
}

/// Observed transitions in observation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset<S, A> {
    records: Vec<Transition<S, A>>,
}

pub type TabularDataset = TransitionDataset<usize, usize>;
pub type LqrDataset = TransitionDataset<Vec<f64>, Vec<f64>>;

impl<S, A> Default for TransitionDataset<S, A> {
    fn default() -> Self {
        Self { records: Vec::new() }
    }
}

impl<S, A> TransitionDataset<S, A> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<Transition<S, A>>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, s: S, a: A, s_next: S, r: f64) {
        self.records.push(Transition { s, a, s_next, r });
    }

    pub fn records(&self) -> &[Transition<S, A>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl<S: Serialize, A: Serialize> TransitionDataset<S, A> {
    /// One JSON object per line: `{"s":..,"a":..,"s_next":..,"r":..}`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for rec in &self.records {
            let line = serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl<S: DeserializeOwned, A: DeserializeOwned> TransitionDataset<S, A> {
    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

/// Visit counts `n(s, a)` and transition counts `x(s, a, s')`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    n_states: usize,
    n_actions: usize,
    visits: Vec<u64>,
    transitions: Vec<u64>,
}

impl CountTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            visits: vec![0; n_states * n_actions],
            transitions: vec![0; n_states * n_actions * n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn record(&mut self, s: usize, a: usize, s_next: usize) -> Result<()> {
        if s >= self.n_states || s_next >= self.n_states || a >= self.n_actions {
            return Err(Error::invalid(format!(
                "transition ({s}, {a}, {s_next}) outside {}x{} table",
                self.n_states, self.n_actions
            )));
        }
        self.visits[s * self.n_actions + a] += 1;
        self.transitions[(s * self.n_actions + a) * self.n_states + s_next] += 1;
        Ok(())
    }

    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.n_actions + a]
    }

    pub fn count(&self, s: usize, a: usize, s_next: usize) -> u64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// Successor counts for `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[u64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transitions[start..start + self.n_states]
    }

    /// Flat `n(s, a)` table, indexed `s * n_actions + a`.
    pub fn visit_table(&self) -> &[u64] {
        &self.visits
    }

    pub fn total(&self) -> u64 {
        self.visits.iter().sum()
    }

    pub fn all_visited(&self) -> bool {
        self.visits.iter().all(|&n| n > 0)
    }
}

pub fn count_statistics(data: &TabularDataset, n_states: usize, n_actions: usize) -> Result<CountTable> {
    let mut table = CountTable::new(n_states, n_actions);
    for rec in data.records() {
        table.record(rec.s, rec.a, rec.s_next)?;
    }
    Ok(table)
}

/// `sum x(s,a,s') log p(s'|s,a)` with probabilities floored at [`PROB_FLOOR`].
pub fn log_lik_tabular(counts: &CountTable, model: &TabularMdp) -> Result<f64> {
    if counts.n_states != model.n_states() || counts.n_actions != model.n_actions() {
        return Err(Error::invalid("count table and model shapes differ"));
    }
    Ok(counts
        .transitions
        .iter()
        .zip(model.transitions())
        .filter(|(x, _)| **x > 0)
        .map(|(&x, &p)| x as f64 * p.max(PROB_FLOOR).ln())
        .sum())
}

pub(crate) fn cholesky_or_report(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let eig = ((cov + cov.transpose()) * 0.5).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        return Err(Error::numeric(format!(
            "noise covariance is singular (eigenvalues in [{lo:.3e}, {hi:.3e}])"
        )));
    }
    Cholesky::new(cov.clone()).ok_or_else(|| {
        Error::numeric(format!(
            "noise covariance Cholesky failed (condition number {:.3e})",
            hi / lo
        ))
    })
}

fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn lqr_record_vectors(
    rec: &Transition<Vec<f64>, Vec<f64>>,
    ds: usize,
    da: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if rec.s.len() != ds || rec.s_next.len() != ds || rec.a.len() != da {
        return Err(Error::invalid(format!(
            "record dimensions (s={}, a={}, s_next={}) do not match model (d_s={ds}, d_a={da})",
            rec.s.len(),
            rec.a.len(),
            rec.s_next.len()
        )));
    }
    let s = DVector::from_column_slice(&rec.s);
    let a = DVector::from_column_slice(&rec.a);
    let y = DVector::from_column_slice(&rec.s_next) - &s;
    Ok((LqrModel::regressor(&a, &s), y))
}

/// Linear-Gaussian log-likelihood with residual `v = (s' - s) - M (a, s)`.
pub fn log_lik_lqr(data: &LqrDataset, model: &LqrModel) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let ds = model.dim_state();
    let chol = cholesky_or_report(model.noise_cov())?;
    let per_record = 0.5 * ds as f64 * LN_2PI + 0.5 * log_det_from_cholesky(&chol);
    let mut total = 0.0;
    for rec in data.records() {
        let (x, y) = lqr_record_vectors(rec, ds, model.dim_action())?;
        let v = y - model.mean() * x;
        let z = chol.l_dirty().solve_lower_triangular(&v).expect("non-singular factor");
        total += -0.5 * z.norm_squared() - per_record;
    }
    Ok(total)
}

/// Tabular Stage 1 objective `w -> log P(D | sum_i w_i mu_i)` over the observed cells.
#[derive(Clone, Debug)]
pub struct TabularMixtureLikelihood {
    m: usize,
    counts: Vec<f64>,
    // Source probabilities per observed cell, stride m.
    probs: Vec<f64>,
}

impl TabularMixtureLikelihood {
    pub fn new(counts: &CountTable, sources: &SourceSet<TabularMdp>) -> Result<Self> {
        let first = &sources.models()[0];
        if counts.n_states != first.n_states() || counts.n_actions != first.n_actions() {
            return Err(Error::invalid("count table and source shapes differ"));
        }
        let m = sources.len();
        let mut cell_counts = Vec::new();
        let mut probs = Vec::new();
        for (k, &x) in counts.transitions.iter().enumerate() {
            if x == 0 {
                continue;
            }
            cell_counts.push(x as f64);
            probs.extend(sources.models().iter().map(|model| model.transitions()[k]));
        }
        Ok(Self {
            m,
            counts: cell_counts,
            probs,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }
}

impl SimplexObjective for TabularMixtureLikelihood {
    fn dim(&self) -> usize {
        self.m
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(self.probs.chunks_exact(self.m))
            .map(|(&x, p)| {
                let mix: f64 = p.iter().zip(w).map(|(a, b)| a * b).sum();
                x * mix.max(PROB_FLOOR).ln()
            })
            .sum()
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for (&x, p) in self.counts.iter().zip(self.probs.chunks_exact(self.m)) {
            let mix: f64 = p.iter().zip(w).map(|(a, b)| a * b).sum();
            if mix > PROB_FLOOR {
                total += x * mix.ln();
                let scale = x / mix;
                for (g, pi) in grad.iter_mut().zip(p) {
                    *g += scale * pi;
                }
            } else {
                total += x * PROB_FLOOR.ln();
            }
        }
        total
    }
}

/// LQR Stage 1 objective kept as running quadratic statistics in `w`.
///
/// With `U_i = [M_1 x_i, ..., M_m x_i]` and `y_i = s'_i - s_i`, the
/// log-likelihood is `-1/2 (c - 2 h'w + w'Gw) - n k` where
/// `G = sum U_i' S^-1 U_i`, `h = sum U_i' S^-1 y_i`, `c = sum y_i' S^-1 y_i`.
#[derive(Clone, Debug)]
pub struct LqrMixtureLikelihood {
    means: Vec<DMatrix<f64>>,
    chol: Cholesky<f64, Dyn>,
    per_record: f64,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    energy: f64,
    n: usize,
}

impl LqrMixtureLikelihood {
    pub fn new(sources: &SourceSet<LqrModel>) -> Result<Self> {
        let first = &sources.models()[0];
        let chol = cholesky_or_report(first.noise_cov())?;
        let m = sources.len();
        let per_record = 0.5 * first.dim_state() as f64 * LN_2PI + 0.5 * log_det_from_cholesky(&chol);
        Ok(Self {
            means: sources.models().iter().map(|s| s.mean().clone()).collect(),
            chol,
            per_record,
            gram: DMatrix::zeros(m, m),
            cross: DVector::zeros(m),
            energy: 0.0,
            n: 0,
        })
    }

    pub fn from_dataset(sources: &SourceSet<LqrModel>, data: &LqrDataset) -> Result<Self> {
        let mut lik = Self::new(sources)?;
        let first = &sources.models()[0];
        for rec in data.records() {
            let (x, y) = lqr_record_vectors(rec, first.dim_state(), first.dim_action())?;
            lik.add_regression(&x, &y);
        }
        Ok(lik)
    }

    pub fn add(&mut self, s: &DVector<f64>, a: &DVector<f64>, s_next: &DVector<f64>) {
        let x = LqrModel::regressor(a, s);
        self.add_regression(&x, &(s_next - s));
    }

    fn add_regression(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        let l = self.chol.l_dirty();
        let m = self.means.len();
        // Whitened predictions L^-1 M_j x as columns.
        let mut u = DMatrix::zeros(y.len(), m);
        for (j, mean) in self.means.iter().enumerate() {
            let col = l.solve_lower_triangular(&(mean * x)).expect("non-singular factor");
            u.set_column(j, &col);
        }
        let yw = l.solve_lower_triangular(y).expect("non-singular factor");
        self.gram += u.transpose() * &u;
        self.cross += u.transpose() * &yw;
        self.energy += yw.norm_squared();
        self.n += 1;
    }

    pub fn n_records(&self) -> usize {
        self.n
    }
}

impl SimplexObjective for LqrMixtureLikelihood {
    fn dim(&self) -> usize {
        self.means.len()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        let quad = w.dot(&(&self.gram * &w));
        -0.5 * (self.energy - 2.0 * self.cross.dot(&w) + quad) - self.n as f64 * self.per_record
    }

    fn value_and_gradient(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        let gw = &self.gram * &wv;
        for (g, (h, q)) in grad.iter_mut().zip(self.cross.iter().zip(gw.iter())) {
            *g = h - q;
        }
        -0.5 * (self.energy - 2.0 * self.cross.dot(&wv) + wv.dot(&gw)) - self.n as f64 * self.per_record
    }
}

/// Maximum-likelihood kernel from counts; unvisited `(s, a)` rows are uniform.
/// Rewards and discount are taken from `template`.
pub fn empirical_tabular(counts: &CountTable, template: &TabularMdp) -> Result<TabularMdp> {
    if counts.n_states != template.n_states() || counts.n_actions != template.n_actions() {
        return Err(Error::invalid("count table and template shapes differ"));
    }
    let ns = counts.n_states;
    let uniform = 1.0 / ns as f64;
    let mut transitions = Vec::with_capacity(counts.transitions.len());
    for (k, &n) in counts.visits.iter().enumerate() {
        let row = &counts.transitions[k * ns..(k + 1) * ns];
        if n == 0 {
            transitions.extend(std::iter::repeat_n(uniform, ns));
        } else {
            transitions.extend(row.iter().map(|&x| x as f64 / n as f64));
        }
    }
    Ok(TabularMdp::from_parts_unchecked(
        ns,
        counts.n_actions,
        transitions,
        template.rewards().to_vec(),
        template.discount(),
    ))
}

/// Running ridge regression of `s' - s` on `(a, s)`.
#[derive(Clone, Debug)]
pub struct RidgeAccumulator {
    xx: DMatrix<f64>,
    yx: DMatrix<f64>,
    yy: DMatrix<f64>,
    n: usize,
}

impl RidgeAccumulator {
    pub fn new(dim_state: usize, dim_action: usize) -> Self {
        let p = dim_state + dim_action;
        Self {
            xx: DMatrix::zeros(p, p),
            yx: DMatrix::zeros(dim_state, p),
            yy: DMatrix::zeros(dim_state, dim_state),
            n: 0,
        }
    }

    pub fn add(&mut self, s: &DVector<f64>, a: &DVector<f64>, s_next: &DVector<f64>) {
        let x = LqrModel::regressor(a, s);
        let y = s_next - s;
        self.xx += &x * x.transpose();
        self.yx += &y * x.transpose();
        self.yy += &y * y.transpose();
        self.n += 1;
    }

    pub fn n_records(&self) -> usize {
        self.n
    }

    /// Whether the unpenalised least-squares problem has a unique solution.
    pub fn well_posed(&self) -> bool {
        let eig = self.xx.clone().symmetric_eigenvalues();
        eig.min() > 1e-9 * eig.max().max(1.0)
    }

    /// `M = Y X' (X X' + ridge I)^-1` combined with the task constants of `task`.
    pub fn estimate(&self, task: &LqrModel, ridge: f64) -> Result<LqrModel> {
        let p = self.xx.nrows();
        let reg = &self.xx + DMatrix::identity(p, p) * ridge;
        let chol = Cholesky::new(reg).ok_or_else(|| Error::numeric("ridge system not positive definite"))?;
        // Solve (XX' + rI) M' = (YX')'.
        let mean_t = chol.solve(&self.yx.transpose());
        task.with_mean(mean_t.transpose())
    }

    /// Gaussian log-likelihood of the accumulated records under `model`,
    /// equal to [`log_lik_lqr`] on the same data.
    pub fn log_likelihood(&self, model: &LqrModel) -> Result<f64> {
        if self.n == 0 {
            return Ok(0.0);
        }
        if model.mean().shape() != self.yx.shape() {
            return Err(Error::invalid("model dimensions do not match the accumulated records"));
        }
        let chol = cholesky_or_report(model.noise_cov())?;
        let mean = model.mean();
        // sum (y - Mx)(y - Mx)' from second moments.
        let cross = &self.yx * mean.transpose();
        let scatter = &self.yy - &cross - cross.transpose() + mean * &self.xx * mean.transpose();
        let quad = chol.solve(&scatter).trace();
        let per_record = 0.5 * model.dim_state() as f64 * LN_2PI + 0.5 * log_det_from_cholesky(&chol);
        Ok(-0.5 * quad - self.n as f64 * per_record)
    }
}
