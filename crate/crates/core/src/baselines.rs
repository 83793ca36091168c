//! Posterior sampling baseline: conjugate posteriors over kernels, rewards
//! and linear dynamics, and the PSRL interaction loop.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::noise_factor;
use crate::error::{Error, Result};
use crate::mdp::{LqrModel, TabularMdp};
use crate::seeding::RunStreams;
use crate::transfer::{Domain, LqrDomain, ModelChoice, RunLog, RunRecorder, TabularDomain};

/// Independent Dirichlet posteriors over each kernel row `T(s, a, .)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletPosterior {
    n_states: usize,
    n_actions: usize,
    alpha: Vec<f64>,
}

impl DirichletPosterior {
    pub fn new(n_states: usize, n_actions: usize, prior_alpha: f64) -> Result<Self> {
        if !(prior_alpha > 0.0 && prior_alpha.is_finite()) {
            return Err(Error::invalid(format!("Dirichlet prior {prior_alpha} must be positive")));
        }
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("empty state or action space"));
        }
        Ok(Self {
            n_states,
            n_actions,
            alpha: vec![prior_alpha; n_states * n_actions * n_states],
        })
    }

    /// Posterior with explicit concentration parameters, laid out like a kernel.
    pub fn from_alpha(n_states: usize, n_actions: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != n_states * n_actions * n_states {
            return Err(Error::invalid("alpha has the wrong length"));
        }
        if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("all alpha must be positive"));
        }
        Ok(Self {
            n_states,
            n_actions,
            alpha,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn alpha_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.alpha[start..start + self.n_states]
    }

    /// Conjugate count update: `alpha(s, a, s_next) += 1`.
    pub fn update(&mut self, s: usize, a: usize, s_next: usize) -> Result<()> {
        if s >= self.n_states || s_next >= self.n_states || a >= self.n_actions {
            return Err(Error::invalid(format!("transition ({s}, {a}, {s_next}) out of range")));
        }
        self.alpha[(s * self.n_actions + a) * self.n_states + s_next] += 1.0;
        Ok(())
    }

    /// Posterior-mean kernel, flat in kernel layout.
    pub fn mean_kernel(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.alpha.len());
        for row in self.alpha.chunks_exact(self.n_states) {
            let total: f64 = row.iter().sum();
            out.extend(row.iter().map(|a| a / total));
        }
        out
    }

    /// One kernel drawn row-wise from the posterior via normalised Gamma draws.
    pub fn sample_kernel<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.alpha.len());
        for row in self.alpha.chunks_exact(self.n_states) {
            let start = out.len();
            let mut total = 0.0;
            for &a in row {
                let g: f64 = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
                total += g;
                out.push(g);
            }
            if total > 0.0 && total.is_finite() {
                out[start..].iter_mut().for_each(|g| *g /= total);
            } else {
                // Every draw underflowed: fall back to the heaviest component.
                let best = row
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                out[start..].iter_mut().enumerate().for_each(|(i, g)| *g = if i == best { 1.0 } else { 0.0 });
            }
        }
        out
    }
}

/// Prior hyperparameters of a Normal-Gamma reward model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalGammaPrior {
    pub mean: f64,
    pub kappa: f64,
    pub shape: f64,
    pub rate: f64,
}

impl Default for NormalGammaPrior {
    fn default() -> Self {
        Self {
            mean: 0.5,
            kappa: 1.0,
            shape: 1.0,
            rate: 1.0,
        }
    }
}

impl NormalGammaPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.shape > 0.0 && self.rate > 0.0) || !self.mean.is_finite() {
            return Err(Error::invalid("Normal-Gamma kappa, shape and rate must be positive"));
        }
        Ok(())
    }
}

/// Per-`(s, a)` Normal-Gamma posteriors over mean rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalGammaPosterior {
    n_actions: usize,
    mean: Vec<f64>,
    kappa: Vec<f64>,
    shape: Vec<f64>,
    rate: Vec<f64>,
}

impl NormalGammaPosterior {
    pub fn new(n_states: usize, n_actions: usize, prior: NormalGammaPrior) -> Result<Self> {
        prior.validate()?;
        let n = n_states * n_actions;
        Ok(Self {
            n_actions,
            mean: vec![prior.mean; n],
            kappa: vec![prior.kappa; n],
            shape: vec![prior.shape; n],
            rate: vec![prior.rate; n],
        })
    }

    pub fn update(&mut self, s: usize, a: usize, reward: f64) -> Result<()> {
        if a >= self.n_actions || s * self.n_actions + a >= self.mean.len() {
            return Err(Error::invalid(format!("cell ({s}, {a}) out of range")));
        }
        if !reward.is_finite() {
            return Err(Error::invalid("reward must be finite"));
        }
        let i = s * self.n_actions + a;
        let (mu, k) = (self.mean[i], self.kappa[i]);
        self.mean[i] = (k * mu + reward) / (k + 1.0);
        self.rate[i] += k * (reward - mu).powi(2) / (2.0 * (k + 1.0));
        self.kappa[i] = k + 1.0;
        self.shape[i] += 0.5;
        Ok(())
    }

    pub fn mean(&self, s: usize, a: usize) -> f64 {
        self.mean[s * self.n_actions + a]
    }

    /// Posterior mean rewards clamped into `[0, 1]`, in reward-table layout.
    pub fn mean_rewards(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.clamp(0.0, 1.0)).collect()
    }

    /// Mean rewards drawn from the posterior, clamped into `[0, 1]`.
    pub fn sample_rewards<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| {
                let precision: f64 = Gamma::new(self.shape[i], 1.0 / self.rate[i])
                    .expect("positive parameters")
                    .sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                let sd = 1.0 / (self.kappa[i] * precision.max(f64::MIN_POSITIVE)).sqrt();
                (self.mean[i] + sd * z).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Where a sampled tabular model takes its rewards from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'a> {
    Known(&'a [f64]),
    Learned(&'a NormalGammaPosterior),
}

/// A tabular model with every kernel row drawn from its Dirichlet posterior.
pub fn psrl_sample_tabular<R: Rng + ?Sized>(
    post: &DirichletPosterior,
    rewards: RewardSource<'_>,
    discount: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    let kernel = post.sample_kernel(rng);
    let rewards = match rewards {
        RewardSource::Known(r) => r.to_vec(),
        RewardSource::Learned(p) => p.sample_rewards(rng),
    };
    TabularMdp::new(post.n_states, post.n_actions, kernel, rewards, discount)
}

/// Matrix-normal posterior over the increment dynamics `M` with known noise.
///
/// Prior `M ~ MN(M0, S, (lambda0 I)^-1)`; after data the column precision is
/// `Lambda = lambda0 I + sum x x'` and the mean is `(M0 lambda0 + sum y x') Lambda^-1`,
/// with regressor `x = (a, s)` and response `y = s' - s`.
#[derive(Clone, Debug)]
pub struct MatrixRegressionPosterior {
    dim_state: usize,
    dim_action: usize,
    precision: DMatrix<f64>,
    moment: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    n: usize,
}

impl MatrixRegressionPosterior {
    pub fn new(task: &LqrModel, prior_mean: &DMatrix<f64>, prior_precision: f64) -> Result<Self> {
        if prior_mean.shape() != task.mean().shape() {
            return Err(Error::invalid("prior mean has the wrong shape"));
        }
        if !(prior_precision > 0.0 && prior_precision.is_finite()) {
            return Err(Error::invalid("prior precision must be positive"));
        }
        let p = task.dim_state() + task.dim_action();
        Ok(Self {
            dim_state: task.dim_state(),
            dim_action: task.dim_action(),
            precision: DMatrix::identity(p, p) * prior_precision,
            moment: prior_mean * prior_precision,
            noise_factor: noise_factor(task.noise_cov()),
            n: 0,
        })
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn n_records(&self) -> usize {
        self.n
    }

    pub fn update(&mut self, s: &DVector<f64>, a: &DVector<f64>, s_next: &DVector<f64>) -> Result<()> {
        if s.len() != self.dim_state || s_next.len() != self.dim_state || a.len() != self.dim_action {
            return Err(Error::invalid("observation dimensions do not match the posterior"));
        }
        let x = LqrModel::regressor(a, s);
        let y = s_next - s;
        self.precision += &x * x.transpose();
        self.moment += &y * x.transpose();
        self.n += 1;
        Ok(())
    }

    fn precision_factor(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.precision.clone()).ok_or_else(|| Error::numeric("posterior precision is not positive definite"))
    }

    pub fn mean(&self) -> Result<DMatrix<f64>> {
        let chol = self.precision_factor()?;
        Ok(chol.solve(&self.moment.transpose()).transpose())
    }

    /// `M_hat + chol(S) Z L^-1` with `L L' = Lambda` and `Z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>> {
        let chol = self.precision_factor()?;
        let mean = chol.solve(&self.moment.transpose()).transpose();
        let p = self.dim_state + self.dim_action;
        let z = DMatrix::from_fn(self.dim_state, p, |_, _| StandardNormal.sample(rng));
        // (Z L^-1)' = L'^-1 Z', an upper-triangular solve.
        let zl = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z.transpose())
            .ok_or_else(|| Error::numeric("singular precision factor"))?
            .transpose();
        Ok(mean + &self.noise_factor * zl)
    }
}

pub fn psrl_sample_lqr<R: Rng + ?Sized>(
    post: &MatrixRegressionPosterior,
    task: &LqrModel,
    rng: &mut R,
) -> Result<LqrModel> {
    task.with_mean(post.sample(rng)?)
}

/// When PSRL draws a fresh model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleSchedule {
    #[default]
    EveryStep,
    /// At every environment reset; non-episodic environments use
    /// pseudo-episodes of `pseudo_episode_length` steps.
    EveryEpisode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsrlConfig {
    pub schedule: ResampleSchedule,
    pub pseudo_episode_length: usize,
    /// Dirichlet concentration of every kernel cell.
    pub prior_alpha: f64,
    pub reward_prior: NormalGammaPrior,
    /// Column precision of the matrix-normal prior, centred at zero.
    pub prior_precision: f64,
}

impl Default for PsrlConfig {
    fn default() -> Self {
        Self {
            schedule: ResampleSchedule::EveryStep,
            pseudo_episode_length: 100,
            prior_alpha: 1.0,
            reward_prior: NormalGammaPrior::default(),
            prior_precision: 1.0,
        }
    }
}

impl PsrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_alpha > 0.0) || !(self.prior_precision > 0.0) {
            return Err(Error::invalid("PSRL prior parameters must be positive"));
        }
        if self.pseudo_episode_length == 0 {
            return Err(Error::invalid("pseudo_episode_length must be positive"));
        }
        self.reward_prior.validate()
    }
}

/// Domains that admit a conjugate posterior for posterior sampling.
pub trait PsrlDomain: Domain {
    type Posterior;

    fn prior(&self, cfg: &PsrlConfig) -> Result<Self::Posterior>;

    fn update_posterior(
        &self,
        post: &mut Self::Posterior,
        s: &Self::State,
        a: &Self::Action,
        s_next: &Self::State,
        reward: f64,
    ) -> Result<()>;

    fn sample_model(&self, post: &Self::Posterior, rng: &mut crate::seeding::Rng) -> Result<Self::Model>;
}

/// Kernel and reward posteriors of a tabular PSRL agent.
#[derive(Clone, Debug)]
pub struct TabularPosterior {
    pub kernel: DirichletPosterior,
    pub rewards: NormalGammaPosterior,
}

impl PsrlDomain for TabularDomain {
    type Posterior = TabularPosterior;

    fn prior(&self, cfg: &PsrlConfig) -> Result<TabularPosterior> {
        let m = &self.env().model;
        Ok(TabularPosterior {
            kernel: DirichletPosterior::new(m.n_states(), m.n_actions(), cfg.prior_alpha)?,
            rewards: NormalGammaPosterior::new(m.n_states(), m.n_actions(), cfg.reward_prior)?,
        })
    }

    fn update_posterior(&self, post: &mut TabularPosterior, s: &usize, a: &usize, s_next: &usize, reward: f64) -> Result<()> {
        post.kernel.update(*s, *a, *s_next)?;
        post.rewards.update(*s, *a, reward)
    }

    fn sample_model(&self, post: &TabularPosterior, rng: &mut crate::seeding::Rng) -> Result<TabularMdp> {
        let model = &self.env().model;
        let rewards = match self.known_rewards() {
            Some(r) => RewardSource::Known(r),
            None => RewardSource::Learned(&post.rewards),
        };
        psrl_sample_tabular(&post.kernel, rewards, model.discount(), rng)
    }
}

impl PsrlDomain for LqrDomain {
    type Posterior = MatrixRegressionPosterior;

    fn prior(&self, cfg: &PsrlConfig) -> Result<MatrixRegressionPosterior> {
        let task = &self.env().model;
        MatrixRegressionPosterior::new(task, &DMatrix::zeros(task.dim_state(), task.dim_state() + task.dim_action()), cfg.prior_precision)
    }

    fn update_posterior(
        &self,
        post: &mut MatrixRegressionPosterior,
        s: &DVector<f64>,
        a: &DVector<f64>,
        s_next: &DVector<f64>,
        _reward: f64,
    ) -> Result<()> {
        post.update(s, a, s_next)
    }

    fn sample_model(&self, post: &MatrixRegressionPosterior, rng: &mut crate::seeding::Rng) -> Result<LqrModel> {
        psrl_sample_lqr(post, &self.env().model, rng)
    }
}

/// Posterior sampling RL for `horizon` environment steps.
///
/// A sampled model the planner cannot solve (an LQR draw that is not
/// stabilisable) keeps the previous policy.
pub fn run_psrl<D: PsrlDomain>(
    domain: &mut D,
    horizon: usize,
    cfg: &PsrlConfig,
    streams: &mut RunStreams,
) -> Result<RunLog> {
    cfg.validate()?;
    let mut post = domain.prior(cfg)?;
    let mut recorder = RunRecorder::new(domain, streams)?;
    let mut model = domain.sample_model(&post, &mut streams.agent)?;
    let mut policy = domain.plan(&model)?;
    let mut since_resample = 0usize;
    for t in 0..horizon {
        let resample = match cfg.schedule {
            ResampleSchedule::EveryStep => t > 0,
            ResampleSchedule::EveryEpisode => {
                t > 0
                    && match domain.episode_length() {
                        Some(_) => recorder.episode_step() == 0,
                        None => since_resample >= cfg.pseudo_episode_length,
                    }
            }
        };
        if resample {
            since_resample = 0;
            model = domain.sample_model(&post, &mut streams.agent)?;
            if let Ok(p) = domain.plan(&model) {
                policy = p;
            }
        }
        let (s, a, s_next, r) = recorder.interact(domain, &policy, Vec::new(), ModelChoice::PsrlSample, streams)?;
        domain.update_posterior(&mut post, &s, &a, &s_next, r)?;
        since_resample += 1;
    }
    recorder.finish(domain, None, &model, &policy, ModelChoice::PsrlSample, Vec::new(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{chain_model, random_lqr_model, LqrEnv, TabularEnv};
    use crate::mdp::SourceSet;
    use crate::transfer::TransferConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dirichlet_counts() {
        let mut post = DirichletPosterior::new(2, 1, 1.0).unwrap();
        post.update(0, 0, 0).unwrap();
        assert_eq!(post.alpha_row(0, 0), &[2.0, 1.0]);
        post.update(0, 0, 0).unwrap();
        assert_eq!(post.alpha_row(0, 0), &[3.0, 1.0]);
        assert_eq!(post.alpha_row(1, 0), &[1.0, 1.0]);
        assert!(post.update(2, 0, 0).is_err());
    }

    #[test]
    fn dirichlet_mean_converges() {
        let truth = [0.2, 0.5, 0.3];
        let mut post = DirichletPosterior::new(3, 1, 1.0).unwrap();
        let env = TabularEnv::new(
            TabularMdp::new(3, 1, truth.repeat(3), vec![0.0; 3], 0.9).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let (next, _) = env.step(0, 0, &mut rng).unwrap();
            post.update(0, 0, next).unwrap();
        }
        let mean = post.mean_kernel();
        let l1: f64 = mean[..3].iter().zip(truth).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 0.02, "{l1}");
    }

    #[test]
    fn batch_equals_sequential_in_any_order() {
        let obs = [(0, 1, 2), (1, 0, 0), (0, 1, 2), (2, 1, 1), (0, 0, 1)];
        let mut a = DirichletPosterior::new(3, 2, 1.0).unwrap();
        let mut b = a.clone();
        for &(s, act, n) in &obs {
            a.update(s, act, n).unwrap();
        }
        for &(s, act, n) in obs.iter().rev() {
            b.update(s, act, n).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn concentrated_row_samples_near_vertex() {
        let post = DirichletPosterior::from_alpha(2, 1, vec![1e9, 1.0, 1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = psrl_sample_tabular(&post, RewardSource::Known(&[0.0, 0.0]), 0.9, &mut rng).unwrap();
        assert!((m.prob(0, 0, 0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn uniform_row_first_component_is_uniform() {
        let post = DirichletPosterior::new(2, 1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n).map(|_| post.sample_kernel(&mut rng)[0]).collect();
        draws.sort_by(f64::total_cmp);
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        // Kolmogorov critical value at p = 0.01 is 1.628 / sqrt(n).
        assert!(ks < 1.628 / (n as f64).sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn normal_gamma_update_matches_closed_form() {
        let mut post = NormalGammaPosterior::new(1, 1, NormalGammaPrior::default()).unwrap();
        post.update(0, 0, 1.0).unwrap();
        assert!((post.mean(0, 0) - 0.75).abs() < 1e-15);
        assert!((post.rate[0] - (1.0 + 0.25 / 4.0)).abs() < 1e-15);
        assert_eq!((post.kappa[0], post.shape[0]), (2.0, 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(post.sample_rewards(&mut rng).iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn mvr_scalar_ridge_closed_form() {
        // One state, one action; the action is held at zero so only the state column learns.
        let task = LqrModel::new(
            DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let mut post = MatrixRegressionPosterior::new(&task, &DMatrix::zeros(1, 2), 1.0).unwrap();
        assert_eq!(post.mean().unwrap(), DMatrix::zeros(1, 2));
        // x = (a, s) = (0, 1), y = s' - s = 2.
        post.update(&DVector::from_vec(vec![1.0]), &DVector::from_vec(vec![0.0]), &DVector::from_vec(vec![3.0]))
            .unwrap();
        let mean = post.mean().unwrap();
        assert!((mean[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(mean[(0, 0)], 0.0);
    }

    #[test]
    fn mvr_recovers_noiseless_dynamics() {
        let task = random_lqr_model(3, 1, 5, 0.0).unwrap();
        // A vanishing prior precision removes the ridge shrinkage.
        let mut post = MatrixRegressionPosterior::new(&task, &DMatrix::zeros(3, 4), 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let s = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let a = DVector::from_fn(1, |_, _| StandardNormal.sample(&mut rng));
            let next = &s + task.predict_increment(&a, &s);
            post.update(&s, &a, &next).unwrap();
        }
        assert!((post.mean().unwrap() - task.mean()).norm() < 1e-3);
    }

    #[test]
    fn mvr_order_invariance() {
        let task = random_lqr_model(2, 1, 3, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs: Vec<_> = (0..20)
            .map(|_| {
                (
                    DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)),
                    DVector::from_fn(1, |_, _| StandardNormal.sample(&mut rng)),
                    DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)),
                )
            })
            .collect();
        let mut a = MatrixRegressionPosterior::new(&task, &DMatrix::zeros(2, 3), 1.0).unwrap();
        let mut b = a.clone();
        for (s, act, n) in &obs {
            a.update(s, act, n).unwrap();
        }
        for (s, act, n) in obs.iter().rev() {
            b.update(s, act, n).unwrap();
        }
        assert!((a.mean().unwrap() - b.mean().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn mvr_sampling_moments() {
        let task = random_lqr_model(2, 1, 3, 0.1).unwrap();
        let prior_mean = DMatrix::from_row_slice(2, 3, &[0.3, -0.2, 0.1, 0.0, 0.5, -0.4]);
        let post = MatrixRegressionPosterior::new(&task, &prior_mean, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut acc = DMatrix::zeros(2, 3);
        for _ in 0..n {
            acc += post.sample(&mut rng).unwrap();
        }
        assert!((acc / n as f64 - &prior_mean).amax() < 0.05);

        // A very tight posterior samples its mean.
        let tight = MatrixRegressionPosterior::new(&task, &prior_mean, 1e14).unwrap();
        let draw = psrl_sample_lqr(&tight, &task, &mut rng).unwrap();
        assert!((draw.mean() - &prior_mean).amax() < 1e-6);
    }

    #[test]
    fn mvr_dimension_mismatch() {
        let task = random_lqr_model(2, 1, 3, 0.1).unwrap();
        let mut post = MatrixRegressionPosterior::new(&task, &DMatrix::zeros(2, 3), 1.0).unwrap();
        let v1 = DVector::zeros(1);
        assert!(post.update(&v1, &v1, &v1).is_err());
    }

    fn slope(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
        let den: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn psrl_chain_regret_decreases() {
        let env = TabularEnv::new(chain_model(5, 0.2, 0.9).unwrap());
        let sources = SourceSet::new(vec![env.model.clone()]).unwrap();
        let mut domain = TabularDomain::new(env, sources, &TransferConfig::default()).unwrap();
        let mut streams = RunStreams::from_seed(21);
        let log = run_psrl(&mut domain, 10_000, &PsrlConfig::default(), &mut streams).unwrap();
        assert_eq!(log.records.len(), 10_000);
        let window: Vec<f64> = log
            .records
            .chunks(1000)
            .map(|c| c.iter().map(|r| r.regret).sum::<f64>() / c.len() as f64)
            .collect();
        assert!(slope(&window) < 0.0, "{window:?}");
        assert!(log.records.iter().all(|r| r.model_choice == ModelChoice::PsrlSample));
    }

    #[test]
    fn psrl_lqr_cost_approaches_oracle() {
        let task = random_lqr_model(2, 1, 11, 0.01).unwrap();
        let env = LqrEnv::new(task.clone());
        let sources = SourceSet::new(vec![task.clone()]).unwrap();
        let mut domain = LqrDomain::new(env, sources, &TransferConfig::default()).unwrap();
        let mut streams = RunStreams::from_seed(4);
        let log = run_psrl(&mut domain, 1000, &PsrlConfig::default(), &mut streams).unwrap();
        let early: f64 = log.records[..100].iter().map(|r| r.regret).sum::<f64>() / 100.0;
        let late: f64 = log.records[900..].iter().map(|r| r.regret).sum::<f64>() / 100.0;
        assert!(late < early, "early {early} late {late}");
        assert!(late < 0.05, "{late}");
    }

    #[test]
    fn psrl_episode_schedule_runs() {
        let env = TabularEnv::new(chain_model(5, 0.2, 0.9).unwrap());
        let sources = SourceSet::new(vec![env.model.clone()]).unwrap();
        let mut domain = TabularDomain::new(env, sources, &TransferConfig::default()).unwrap();
        let cfg = PsrlConfig {
            schedule: ResampleSchedule::EveryEpisode,
            ..PsrlConfig::default()
        };
        let log = run_psrl(&mut domain, 500, &cfg, &mut RunStreams::from_seed(2)).unwrap();
        assert_eq!(log.records.len(), 500);
    }
}
