//! The transfer loop: fit mixture weights by constrained maximum likelihood,
//! plan in the mixed model, act once, repeat. Also the hierarchical variant
//! that samples between the mixture and the empirical model.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{LqrRegret, TabularRegret, LQR_UNSTABLE_HORIZON};
use crate::baselines::{NormalGammaPosterior, NormalGammaPrior};
use crate::envs::{LqrEnv, RewardMode, TabularEnv};
use crate::error::{Error, Result};
use crate::likelihood::{
    empirical_tabular, log_lik_tabular, CountTable, LqrMixtureLikelihood, RidgeAccumulator,
    TabularMixtureLikelihood, TransitionDataset, DEFAULT_RIDGE,
};
use crate::mdp::{mix_lqr, mix_tabular, LqrModel, MixtureWeights, SourceModel, SourceSet, TabularMdp};
use crate::planning::{plan_lqr, value_iteration, LqrGain, PlannerOptions, TabularPolicy};
use crate::seeding::{self, RunStreams};
use crate::simplex::{maximize_on_simplex, OptimizerOptions, OptimizerReport};

/// Agent-side settings shared by every algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub optimizer: OptimizerOptions,
    pub planner: PlannerOptions,
    /// Refit weights and replan every this many steps.
    pub reopt_every: usize,
    /// Probability of a uniformly random action; 0 is the greedy algorithm.
    pub epsilon_greedy: f64,
    /// Set from the run-level reward mode, which also drives the environment.
    #[serde(skip)]
    pub reward_mode: RewardMode,
    pub reward_prior: NormalGammaPrior,
    /// Ridge of the least-squares empirical LQR model.
    pub ridge: f64,
    /// Rollout horizon scoring gains that destabilise the true system.
    pub regret_horizon: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions::default(),
            planner: PlannerOptions::default(),
            reopt_every: 1,
            epsilon_greedy: 0.0,
            reward_mode: RewardMode::Known,
            reward_prior: NormalGammaPrior::default(),
            ridge: DEFAULT_RIDGE,
            regret_horizon: LQR_UNSTABLE_HORIZON,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.planner.validate()?;
        self.reward_prior.validate()?;
        if self.reopt_every == 0 {
            return Err(Error::invalid("reopt_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_greedy) {
            return Err(Error::invalid("epsilon_greedy must lie in [0, 1]"));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::invalid("ridge must be positive"));
        }
        if self.regret_horizon == 0 {
            return Err(Error::invalid("regret_horizon must be positive"));
        }
        Ok(())
    }
}

/// Prior weight of the mixture model against the empirical model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub prior_p: f64,
}

impl MetaConfig {
    pub fn new(prior_p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prior_p) {
            return Err(Error::invalid(format!("prior p = {prior_p} outside [0, 1]")));
        }
        Ok(Self { prior_p })
    }
}

/// Which model the planner used at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Mlem,
    Empirical,
    PsrlSample,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionRecord {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// One environment interaction. `t` counts interactions from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Mixture weights the step was planned with; empty when no mixture is fitted.
    pub w: Vec<f64>,
    pub action: ActionRecord,
    pub reward: f64,
    pub cum_reward: f64,
    pub regret: f64,
    pub model_choice: ModelChoice,
}

/// Log-likelihoods behind one hierarchical model choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTracePoint {
    pub t: usize,
    pub l_mlem: f64,
    pub l_emp: f64,
    pub choice: ModelChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelSnapshot {
    Tabular(TabularMdp),
    Lqr(LqrModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicySnapshot {
    Tabular { actions: Vec<usize> },
    /// Gain rows of `a = -K s`.
    Linear { gain: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub final_weights: Option<MixtureWeights>,
    pub final_model: ModelSnapshot,
    pub final_policy: PolicySnapshot,
    pub final_choice: ModelChoice,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub meta_trace: Vec<MetaTracePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit_counts: Option<CountTable>,
}

/// A model class together with its environment, sources and regret oracle.
pub trait Domain {
    type Model: Clone;
    type State: Clone;
    type Action: Clone;
    type Policy: Clone + PartialEq;
    /// Sufficient statistics of the transitions seen so far.
    type Stats: Clone;

    fn config(&self) -> &TransferConfig;
    fn n_sources(&self) -> usize;
    fn empty_stats(&self) -> Result<Self::Stats>;
    fn observe(
        &self,
        stats: &mut Self::Stats,
        s: &Self::State,
        a: &Self::Action,
        s_next: &Self::State,
        reward: f64,
    ) -> Result<()>;
    /// Maximises the mixture log-likelihood starting from `w0`.
    fn fit_weights(&self, stats: &Self::Stats, w0: &MixtureWeights) -> Result<OptimizerReport>;
    /// The mixed model the agent plans in, including its reward estimate.
    fn mixture_model(&self, stats: &Self::Stats, w: &MixtureWeights) -> Result<Self::Model>;
    /// The unconstrained maximum-likelihood model and its log-likelihood.
    fn empirical_model(&self, stats: &Self::Stats) -> Result<(Self::Model, f64)>;
    /// Whether the empirical model is guaranteed at least as likely as any mixture.
    fn likelihood_order_applies(&self, stats: &Self::Stats) -> bool;
    fn plan(&self, model: &Self::Model) -> Result<Self::Policy>;
    fn oracle_policy(&self) -> Self::Policy;
    fn greedy_action(&self, policy: &Self::Policy, s: &Self::State) -> Self::Action;
    fn random_action(&self, rng: &mut seeding::Rng) -> Self::Action;
    fn reset(&self, rng: &mut seeding::Rng) -> Self::State;
    fn env_step(&self, s: &Self::State, a: &Self::Action, rng: &mut seeding::Rng) -> Result<(Self::State, f64)>;
    fn episode_length(&self) -> Option<usize>;
    /// Regret of a policy on the true environment model.
    fn regret(&mut self, policy: &Self::Policy) -> Result<f64>;
    fn action_record(&self, a: &Self::Action) -> ActionRecord;
    fn true_model(&self) -> &Self::Model;
    fn model_snapshot(&self, model: &Self::Model) -> ModelSnapshot;
    fn policy_snapshot(&self, policy: &Self::Policy) -> PolicySnapshot;
    fn visit_counts(&self, stats: &Self::Stats) -> Option<CountTable>;
}

fn check_env_against_sources<M: SourceModel>(truth: &M, sources: &SourceSet<M>) -> Result<()> {
    if !truth.compatible_with(&sources.models()[0]) {
        return Err(Error::invalid("environment model is incompatible with the sources"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TabularDomain {
    env: TabularEnv,
    sources: SourceSet<TabularMdp>,
    cfg: TransferConfig,
    oracle: TabularRegret,
    regret_cache: HashMap<Vec<usize>, f64>,
}

#[derive(Clone, Debug)]
pub struct TabularStats {
    pub counts: CountTable,
    pub rewards: NormalGammaPosterior,
}

impl TabularDomain {
    pub fn new(env: TabularEnv, sources: SourceSet<TabularMdp>, cfg: &TransferConfig) -> Result<Self> {
        cfg.validate()?;
        check_env_against_sources(&env.model, &sources)?;
        let oracle = TabularRegret::new(&env.model)?;
        Ok(Self {
            env,
            sources,
            cfg: cfg.clone(),
            oracle,
            regret_cache: HashMap::new(),
        })
    }

    pub fn env(&self) -> &TabularEnv {
        &self.env
    }

    pub fn sources(&self) -> &SourceSet<TabularMdp> {
        &self.sources
    }

    /// The true reward table when rewards are known to the agent.
    pub fn known_rewards(&self) -> Option<&[f64]> {
        match self.cfg.reward_mode {
            RewardMode::Known => Some(self.env.model.rewards()),
            RewardMode::Learned => None,
        }
    }

    fn planning_rewards(&self, stats: &TabularStats) -> Vec<f64> {
        match self.known_rewards() {
            Some(r) => r.to_vec(),
            None => stats.rewards.mean_rewards(),
        }
    }
}

impl Domain for TabularDomain {
    type Model = TabularMdp;
    type State = usize;
    type Action = usize;
    type Policy = TabularPolicy;
    type Stats = TabularStats;

    fn config(&self) -> &TransferConfig {
        &self.cfg
    }

    fn n_sources(&self) -> usize {
        self.sources.len()
    }

    fn empty_stats(&self) -> Result<TabularStats> {
        let m = &self.env.model;
        Ok(TabularStats {
            counts: CountTable::new(m.n_states(), m.n_actions()),
            rewards: NormalGammaPosterior::new(m.n_states(), m.n_actions(), self.cfg.reward_prior)?,
        })
    }

    fn observe(&self, stats: &mut TabularStats, s: &usize, a: &usize, s_next: &usize, reward: f64) -> Result<()> {
        stats.counts.record(*s, *a, *s_next)?;
        stats.rewards.update(*s, *a, reward)
    }

    fn fit_weights(&self, stats: &TabularStats, w0: &MixtureWeights) -> Result<OptimizerReport> {
        let objective = TabularMixtureLikelihood::new(&stats.counts, &self.sources)?;
        maximize_on_simplex(&objective, w0, &self.cfg.optimizer)
    }

    fn mixture_model(&self, stats: &TabularStats, w: &MixtureWeights) -> Result<TabularMdp> {
        mix_tabular(&self.sources, w)?.with_rewards(self.planning_rewards(stats))
    }

    fn empirical_model(&self, stats: &TabularStats) -> Result<(TabularMdp, f64)> {
        let template = self.env.model.with_rewards(self.planning_rewards(stats))?;
        let model = empirical_tabular(&stats.counts, &template)?;
        let ll = log_lik_tabular(&stats.counts, &model)?;
        Ok((model, ll))
    }

    fn likelihood_order_applies(&self, stats: &TabularStats) -> bool {
        stats.counts.all_visited()
    }

    fn plan(&self, model: &TabularMdp) -> Result<TabularPolicy> {
        Ok(value_iteration(model, self.cfg.planner.vi_tol).1)
    }

    fn oracle_policy(&self) -> TabularPolicy {
        self.oracle.optimal_policy().clone()
    }

    fn greedy_action(&self, policy: &TabularPolicy, s: &usize) -> usize {
        policy.action(*s)
    }

    fn random_action(&self, rng: &mut seeding::Rng) -> usize {
        rng.random_range(0..self.env.model.n_actions())
    }

    fn reset(&self, _rng: &mut seeding::Rng) -> usize {
        self.env.reset()
    }

    fn env_step(&self, s: &usize, a: &usize, rng: &mut seeding::Rng) -> Result<(usize, f64)> {
        self.env.step(*s, *a, rng)
    }

    fn episode_length(&self) -> Option<usize> {
        self.env.episode_length
    }

    fn regret(&mut self, policy: &TabularPolicy) -> Result<f64> {
        if let Some(r) = self.regret_cache.get(&policy.actions) {
            return Ok(*r);
        }
        let r = self.oracle.regret(policy)?;
        self.regret_cache.insert(policy.actions.clone(), r);
        Ok(r)
    }

    fn action_record(&self, a: &usize) -> ActionRecord {
        ActionRecord::Discrete(*a)
    }

    fn true_model(&self) -> &TabularMdp {
        &self.env.model
    }

    fn model_snapshot(&self, model: &TabularMdp) -> ModelSnapshot {
        ModelSnapshot::Tabular(model.clone())
    }

    fn policy_snapshot(&self, policy: &TabularPolicy) -> PolicySnapshot {
        PolicySnapshot::Tabular {
            actions: policy.actions.clone(),
        }
    }

    fn visit_counts(&self, stats: &TabularStats) -> Option<CountTable> {
        Some(stats.counts.clone())
    }
}

#[derive(Clone, Debug)]
pub struct LqrDomain {
    env: LqrEnv,
    sources: SourceSet<LqrModel>,
    cfg: TransferConfig,
    oracle: LqrRegret,
    last_regret: Option<(DMatrix<f64>, f64)>,
}

#[derive(Clone, Debug)]
pub struct LqrStats {
    pub likelihood: LqrMixtureLikelihood,
    pub least_squares: RidgeAccumulator,
}

impl LqrDomain {
    pub fn new(env: LqrEnv, sources: SourceSet<LqrModel>, cfg: &TransferConfig) -> Result<Self> {
        cfg.validate()?;
        check_env_against_sources(&env.model, &sources)?;
        let oracle = LqrRegret::new(&env.model, cfg.regret_horizon)?;
        Ok(Self {
            env,
            sources,
            cfg: cfg.clone(),
            oracle,
            last_regret: None,
        })
    }

    pub fn env(&self) -> &LqrEnv {
        &self.env
    }

    pub fn sources(&self) -> &SourceSet<LqrModel> {
        &self.sources
    }
}

impl Domain for LqrDomain {
    type Model = LqrModel;
    type State = DVector<f64>;
    type Action = DVector<f64>;
    type Policy = LqrGain;
    type Stats = LqrStats;

    fn config(&self) -> &TransferConfig {
        &self.cfg
    }

    fn n_sources(&self) -> usize {
        self.sources.len()
    }

    fn empty_stats(&self) -> Result<LqrStats> {
        Ok(LqrStats {
            likelihood: LqrMixtureLikelihood::new(&self.sources)?,
            least_squares: RidgeAccumulator::new(self.env.model.dim_state(), self.env.model.dim_action()),
        })
    }

    fn observe(&self, stats: &mut LqrStats, s: &DVector<f64>, a: &DVector<f64>, s_next: &DVector<f64>, _r: f64) -> Result<()> {
        stats.likelihood.add(s, a, s_next);
        stats.least_squares.add(s, a, s_next);
        Ok(())
    }

    fn fit_weights(&self, stats: &LqrStats, w0: &MixtureWeights) -> Result<OptimizerReport> {
        maximize_on_simplex(&stats.likelihood, w0, &self.cfg.optimizer)
    }

    fn mixture_model(&self, _stats: &LqrStats, w: &MixtureWeights) -> Result<LqrModel> {
        mix_lqr(&self.sources, w)
    }

    fn empirical_model(&self, stats: &LqrStats) -> Result<(LqrModel, f64)> {
        let model = stats.least_squares.estimate(&self.sources.models()[0], self.cfg.ridge)?;
        let ll = stats.least_squares.log_likelihood(&model)?;
        Ok((model, ll))
    }

    fn likelihood_order_applies(&self, stats: &LqrStats) -> bool {
        stats.least_squares.well_posed()
    }

    fn plan(&self, model: &LqrModel) -> Result<LqrGain> {
        plan_lqr(model, &self.cfg.planner)
    }

    fn oracle_policy(&self) -> LqrGain {
        self.oracle.oracle_gain().clone()
    }

    fn greedy_action(&self, policy: &LqrGain, s: &DVector<f64>) -> DVector<f64> {
        policy.action(s)
    }

    fn random_action(&self, rng: &mut seeding::Rng) -> DVector<f64> {
        DVector::from_fn(self.env.model.dim_action(), |_, _| StandardNormal.sample(rng))
    }

    fn reset(&self, rng: &mut seeding::Rng) -> DVector<f64> {
        self.env.reset(rng)
    }

    fn env_step(&self, s: &DVector<f64>, a: &DVector<f64>, rng: &mut seeding::Rng) -> Result<(DVector<f64>, f64)> {
        self.env.step(s, a, rng)
    }

    fn episode_length(&self) -> Option<usize> {
        self.env.episode_length
    }

    fn regret(&mut self, policy: &LqrGain) -> Result<f64> {
        if let Some((k, r)) = &self.last_regret {
            if *k == policy.k {
                return Ok(*r);
            }
        }
        let r = self.oracle.regret(&policy.k)?;
        self.last_regret = Some((policy.k.clone(), r));
        Ok(r)
    }

    fn action_record(&self, a: &DVector<f64>) -> ActionRecord {
        ActionRecord::Continuous(a.iter().copied().collect())
    }

    fn true_model(&self) -> &LqrModel {
        &self.env.model
    }

    fn model_snapshot(&self, model: &LqrModel) -> ModelSnapshot {
        ModelSnapshot::Lqr(model.clone())
    }

    fn policy_snapshot(&self, policy: &LqrGain) -> PolicySnapshot {
        PolicySnapshot::Linear {
            gain: policy.k.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    fn visit_counts(&self, _stats: &LqrStats) -> Option<CountTable> {
        None
    }
}

/// `(state, action, next state, reward)` of one environment step.
pub type Interaction<D> = (<D as Domain>::State, <D as Domain>::Action, <D as Domain>::State, f64);

/// Environment-side bookkeeping shared by every interaction loop: the current
/// state, episode position, cumulative reward and step records.
pub struct RunRecorder<D: Domain> {
    state: D::State,
    episode_step: usize,
    cum_reward: f64,
    records: Vec<StepRecord>,
}

impl<D: Domain> RunRecorder<D> {
    pub fn new(domain: &D, streams: &mut RunStreams) -> Result<Self> {
        Ok(Self {
            state: domain.reset(&mut streams.env),
            episode_step: 0,
            cum_reward: 0.0,
            records: Vec::new(),
        })
    }

    pub fn state(&self) -> &D::State {
        &self.state
    }

    /// Steps taken since the last reset.
    pub fn episode_step(&self) -> usize {
        self.episode_step
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Acts once under `policy` and logs the step; returns `(s, a, s', r)`.
    pub fn interact(
        &mut self,
        domain: &mut D,
        policy: &D::Policy,
        w: Vec<f64>,
        choice: ModelChoice,
        streams: &mut RunStreams,
    ) -> Result<Interaction<D>> {
        let eps = domain.config().epsilon_greedy;
        let action = if eps > 0.0 && streams.agent.random::<f64>() < eps {
            domain.random_action(&mut streams.agent)
        } else {
            domain.greedy_action(policy, &self.state)
        };
        let (next, reward) = domain.env_step(&self.state, &action, &mut streams.env)?;
        let regret = domain.regret(policy)?;
        self.cum_reward += reward;
        self.records.push(StepRecord {
            t: self.records.len() + 1,
            w,
            action: domain.action_record(&action),
            reward,
            cum_reward: self.cum_reward,
            regret,
            model_choice: choice,
        });
        let s = std::mem::replace(&mut self.state, next.clone());
        self.episode_step += 1;
        if domain.episode_length().is_some_and(|len| self.episode_step >= len) {
            self.state = domain.reset(&mut streams.env);
            self.episode_step = 0;
        }
        Ok((s, action, next, reward))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        self,
        domain: &D,
        weights: Option<MixtureWeights>,
        model: &D::Model,
        policy: &D::Policy,
        choice: ModelChoice,
        meta_trace: Vec<MetaTracePoint>,
        visit_counts: Option<CountTable>,
    ) -> Result<RunLog> {
        Ok(RunLog {
            records: self.records,
            final_weights: weights,
            final_model: domain.model_snapshot(model),
            final_policy: domain.policy_snapshot(policy),
            final_choice: choice,
            meta_trace,
            visit_counts,
        })
    }
}

/// How Stage 1 turns data into the model the planner sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    /// Constrained maximum-likelihood mixture of the sources.
    Mixture,
    /// Sample between the mixture and the empirical model with prior `p`.
    Meta(MetaConfig),
    /// Unconstrained maximum-likelihood model, ignoring the sources.
    Empirical,
}

/// Agent-side state of the transfer loop.
pub struct TransferState<D: Domain> {
    pub weights: MixtureWeights,
    pub stats: D::Stats,
    pub dataset: TransitionDataset<D::State, D::Action>,
    pub current_model: D::Model,
    pub current_policy: D::Policy,
    pub current_choice: ModelChoice,
    pub step: usize,
    pub meta_trace: Vec<MetaTracePoint>,
}

impl<D: Domain> TransferState<D> {
    /// Uniform weights, no data, and the plan under the uniform mixture.
    pub fn initial(domain: &D) -> Result<Self> {
        let stats = domain.empty_stats()?;
        let weights = MixtureWeights::uniform(domain.n_sources());
        let current_model = domain.mixture_model(&stats, &weights)?;
        let current_policy = domain.plan(&current_model)?;
        Ok(Self {
            weights,
            stats,
            dataset: TransitionDataset::new(),
            current_model,
            current_policy,
            current_choice: ModelChoice::Mlem,
            step: 0,
            meta_trace: Vec::new(),
        })
    }
}

/// Hierarchical model choice: the mixture with probability
/// `p e^l_mlem / (p e^l_mlem + (1 - p) e^l_emp)`, evaluated in log space.
///
/// When both branches have zero weight the branch with a finite likelihood
/// wins; failing that, the mixture. Always consumes one uniform draw.
pub fn meta_select<R: Rng + ?Sized>(l_mlem: f64, l_emp: f64, p: f64, rng: &mut R) -> Result<ModelChoice> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("prior p = {p} outside [0, 1]")));
    }
    if l_mlem.is_nan() || l_emp.is_nan() || l_mlem == f64::INFINITY || l_emp == f64::INFINITY {
        return Err(Error::invalid("log-likelihoods must be finite or -inf"));
    }
    let u: f64 = rng.random();
    let log_a = p.ln() + l_mlem;
    let log_b = (1.0 - p).ln() + l_emp;
    if log_a == f64::NEG_INFINITY && log_b == f64::NEG_INFINITY {
        return Ok(if l_mlem.is_finite() || !l_emp.is_finite() {
            ModelChoice::Mlem
        } else {
            ModelChoice::Empirical
        });
    }
    let prob_mlem = 1.0 / (1.0 + (log_b - log_a).exp());
    Ok(if u < prob_mlem {
        ModelChoice::Mlem
    } else {
        ModelChoice::Empirical
    })
}

/// One loop body: refit (on the configured cadence), plan, act once, record.
pub fn mlemtrl_step<D: Domain>(
    domain: &mut D,
    state: &mut TransferState<D>,
    recorder: &mut RunRecorder<D>,
    estimator: Estimator,
    streams: &mut RunStreams,
) -> Result<()> {
    if state.step.is_multiple_of(domain.config().reopt_every) {
        let (model, choice) = match estimator {
            Estimator::Mixture => {
                let report = domain.fit_weights(&state.stats, &state.weights)?;
                state.weights = report.w_star;
                (domain.mixture_model(&state.stats, &state.weights)?, ModelChoice::Mlem)
            }
            Estimator::Empirical => (domain.empirical_model(&state.stats)?.0, ModelChoice::Empirical),
            Estimator::Meta(meta) => {
                let report = domain.fit_weights(&state.stats, &state.weights)?;
                state.weights = report.w_star;
                let l_mlem = report.f_star;
                let (empirical, l_emp) = domain.empirical_model(&state.stats)?;
                let choice = meta_select(l_mlem, l_emp, meta.prior_p, &mut streams.meta)?;
                state.meta_trace.push(MetaTracePoint {
                    t: state.step + 1,
                    l_mlem,
                    l_emp,
                    choice,
                });
                match choice {
                    ModelChoice::Empirical => (empirical, choice),
                    _ => (domain.mixture_model(&state.stats, &state.weights)?, choice),
                }
            }
        };
        // An unplannable estimate (early ridge fits can be non-stabilisable)
        // leaves the previous model and policy in force.
        match domain.plan(&model) {
            Ok(policy) => {
                state.current_policy = policy;
                state.current_model = model;
                state.current_choice = choice;
            }
            Err(Error::NonStabilizable { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let w = match estimator {
        Estimator::Empirical => Vec::new(),
        _ => state.weights.as_slice().to_vec(),
    };
    let (s, a, s_next, r) = recorder.interact(domain, &state.current_policy, w, state.current_choice, streams)?;
    domain.observe(&mut state.stats, &s, &a, &s_next, r)?;
    state.dataset.push(s, a, s_next, r);
    state.step += 1;
    Ok(())
}

fn run_with<D: Domain>(domain: &mut D, horizon: usize, estimator: Estimator, streams: &mut RunStreams) -> Result<RunLog> {
    let mut state = TransferState::initial(domain)?;
    if estimator == Estimator::Empirical {
        state.current_choice = ModelChoice::Empirical;
    }
    let mut recorder = RunRecorder::new(domain, streams)?;
    for _ in 0..horizon {
        mlemtrl_step(domain, &mut state, &mut recorder, estimator, streams)?;
    }
    let weights = (estimator != Estimator::Empirical).then(|| state.weights.clone());
    let counts = domain.visit_counts(&state.stats);
    recorder.finish(
        domain,
        weights,
        &state.current_model,
        &state.current_policy,
        state.current_choice,
        state.meta_trace,
        counts,
    )
}

/// Runs the transfer loop for `horizon` environment steps.
pub fn run_mlemtrl<D: Domain>(domain: &mut D, horizon: usize, streams: &mut RunStreams) -> Result<RunLog> {
    run_with(domain, horizon, Estimator::Mixture, streams)
}

/// The hierarchical variant; log-likelihood pairs go to `RunLog::meta_trace`.
pub fn run_meta_mlemtrl<D: Domain>(
    domain: &mut D,
    horizon: usize,
    meta: MetaConfig,
    streams: &mut RunStreams,
) -> Result<RunLog> {
    run_with(domain, horizon, Estimator::Meta(meta), streams)
}

/// Plain certainty-equivalent model-based RL on the empirical model.
pub fn run_empirical<D: Domain>(domain: &mut D, horizon: usize, streams: &mut RunStreams) -> Result<RunLog> {
    run_with(domain, horizon, Estimator::Empirical, streams)
}

/// Acts with the optimal policy of the true model throughout.
pub fn run_oracle<D: Domain>(domain: &mut D, horizon: usize, streams: &mut RunStreams) -> Result<RunLog> {
    let policy = domain.oracle_policy();
    let mut recorder = RunRecorder::new(domain, streams)?;
    for _ in 0..horizon {
        recorder.interact(domain, &policy, Vec::new(), ModelChoice::Oracle, streams)?;
    }
    let model = domain.true_model().clone();
    recorder.finish(domain, None, &model, &policy, ModelChoice::Oracle, Vec::new(), None)
}
