//! Experiment harness: run configuration, target-task generation, seeded
//! parallel runs, and the on-disk artifacts (step logs, summaries, metrics).
//!
//! Layout of an output directory:
//!
//! ```text
//! run_<task>_<seed>.jsonl          one StepRecord per line
//! run_<task>_<seed>.summary.json   final model, weights, gap, bounds
//! run_<task>_<seed>.meta.jsonl     hierarchical variant only
//! metrics.csv                      t,mean_avg_cum_reward,stderr,mean_regret
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    kl_projection, l1_model_distance, performance_gap_bound, realisability_gap, weissman_bound,
};
use crate::baselines::{run_psrl, PsrlConfig, PsrlDomain};
use crate::envs::{
    cartpole_model, chain_model, random_lqr_model, CartPoleParams, LqrEnv, RewardMode, TabularEnv,
    DEFAULT_NOISE_STD, LEARNED_REWARD_NOISE,
};
use crate::error::{Error, Result};
use crate::likelihood::CountTable;
use crate::mdp::{mix_lqr, mix_tabular, LqrModel, MixtureWeights, SourceSet, TabularMdp};
use crate::planning::{plan_lqr, PlannerOptions, TabularPolicy};
use crate::seeding::{self, Purpose, RunStreams, MAX_SEED_INDEX};
use crate::transfer::{
    run_empirical, run_meta_mlemtrl, run_mlemtrl, run_oracle, Domain, LqrDomain, MetaConfig, ModelChoice,
    ModelSnapshot, PolicySnapshot, RunLog, StepRecord, TabularDomain, TransferConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Mlemtrl,
    MetaMlemtrl,
    Psrl,
    Oracle,
    /// Certainty-equivalent planning on the empirical model.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSpec {
    pub n_states: usize,
    pub source_slips: Vec<f64>,
    pub discount: f64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            n_states: 5,
            source_slips: vec![0.01, 0.20, 0.50],
            discount: 0.9,
        }
    }
}

/// Sources with Dirichlet(1) kernel rows and one shared uniform reward table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_sources: usize,
    pub discount: f64,
}

impl Default for RandomMdpSpec {
    fn default() -> Self {
        Self {
            n_states: 5,
            n_actions: 2,
            n_sources: 3,
            discount: 0.9,
        }
    }
}

/// Linearised cart-poles that differ in pole half-length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleSpec {
    pub pole_lengths: Vec<f64>,
    pub noise_std: f64,
    pub episode_length: usize,
}

impl Default for CartPoleSpec {
    fn default() -> Self {
        Self {
            pole_lengths: vec![0.25, 0.5, 1.0],
            noise_std: DEFAULT_NOISE_STD,
            episode_length: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomLqrSpec {
    pub dim_state: usize,
    pub dim_action: usize,
    pub n_sources: usize,
    pub noise_std: f64,
    pub episode_length: usize,
}

impl Default for RandomLqrSpec {
    fn default() -> Self {
        Self {
            dim_state: 2,
            dim_action: 1,
            n_sources: 3,
            noise_std: DEFAULT_NOISE_STD,
            episode_length: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Chain(ChainSpec),
    RandomMdp(RandomMdpSpec),
    CartPole(CartPoleSpec),
    RandomLqr(RandomLqrSpec),
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        EnvironmentSpec::Chain(ChainSpec::default())
    }
}

impl EnvironmentSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EnvironmentSpec::Chain(_) => "chain",
            EnvironmentSpec::RandomMdp(_) => "random_mdp",
            EnvironmentSpec::CartPole(_) => "cart_pole",
            EnvironmentSpec::RandomLqr(_) => "random_lqr",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("environment.{field}"), reason));
        let discount_ok = |g: f64| (0.0..1.0).contains(&g);
        match self {
            EnvironmentSpec::Chain(c) => {
                if c.n_states < 2 {
                    return bad("n_states", "must be at least 2");
                }
                if c.source_slips.is_empty() || c.source_slips.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad("source_slips", "must be a non-empty list of probabilities");
                }
                if !discount_ok(c.discount) {
                    return bad("discount", "must lie in [0, 1)");
                }
            }
            EnvironmentSpec::RandomMdp(c) => {
                if c.n_states < 2 || c.n_actions < 1 {
                    return bad("n_states", "need at least 2 states and 1 action");
                }
                if c.n_sources < 1 {
                    return bad("n_sources", "must be at least 1");
                }
                if !discount_ok(c.discount) {
                    return bad("discount", "must lie in [0, 1)");
                }
            }
            EnvironmentSpec::CartPole(c) => {
                if c.pole_lengths.is_empty() || c.pole_lengths.iter().any(|l| !(*l > 0.0)) {
                    return bad("pole_lengths", "must be a non-empty list of positive lengths");
                }
                if !(c.noise_std > 0.0) {
                    return bad("noise_std", "must be positive");
                }
                if c.episode_length == 0 {
                    return bad("episode_length", "must be positive");
                }
            }
            EnvironmentSpec::RandomLqr(c) => {
                if c.dim_state < 1 || c.dim_action < 1 {
                    return bad("dim_state", "state and action dimensions must be positive");
                }
                if c.n_sources < 1 {
                    return bad("n_sources", "must be at least 1");
                }
                if !(c.noise_std > 0.0) {
                    return bad("noise_std", "must be positive");
                }
                if c.episode_length == 0 {
                    return bad("episode_length", "must be positive");
                }
            }
        }
        Ok(())
    }
}

/// Everything an experiment needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentSpec,
    pub algorithm: Algorithm,
    /// Environment interactions per run.
    pub steps: usize,
    pub n_tasks: u32,
    pub n_seeds: u32,
    /// Draw targets inside the source hull; otherwise push them outside.
    pub realisable: bool,
    /// Weight of the off-hull component of non-realisable targets.
    pub perturbation: f64,
    pub reward_mode: RewardMode,
    pub meta_prior_p: f64,
    pub master_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Confidence parameter of the concentration bound in summaries.
    pub delta: f64,
    /// Fraction of final steps averaged into `tail_mean_regret`.
    pub tail_fraction: f64,
    pub agent: TransferConfig,
    pub psrl: PsrlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            environment: EnvironmentSpec::default(),
            algorithm: Algorithm::Mlemtrl,
            steps: 10_000,
            n_tasks: 10,
            n_seeds: 10,
            realisable: true,
            perturbation: 0.2,
            reward_mode: RewardMode::Known,
            meta_prior_p: 0.5,
            master_seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs"),
            delta: 0.05,
            tail_fraction: 0.1,
            agent: TransferConfig::default(),
            psrl: PsrlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        if self.n_tasks == 0 {
            return Err(Error::config("n_tasks", "must be at least 1"));
        }
        if self.n_seeds == 0 || self.n_seeds > MAX_SEED_INDEX {
            return Err(Error::config("n_seeds", format!("must lie in [1, {MAX_SEED_INDEX}]")));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(Error::config("perturbation", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.meta_prior_p) {
            return Err(Error::config("meta_prior_p", "must lie in [0, 1]"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::config("tail_fraction", "must lie in (0, 1]"));
        }
        self.agent.validate().map_err(|e| Error::config("agent", e.to_string()))?;
        self.psrl.validate().map_err(|e| Error::config("psrl", e.to_string()))?;
        Ok(())
    }

    fn agent_config(&self) -> TransferConfig {
        TransferConfig {
            reward_mode: self.reward_mode,
            ..self.agent.clone()
        }
    }
}

/// A target task with its source set.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskInstance {
    Tabular {
        sources: SourceSet<TabularMdp>,
        target: TabularMdp,
        target_weights: Option<MixtureWeights>,
    },
    Lqr {
        sources: SourceSet<LqrModel>,
        target: LqrModel,
        target_weights: Option<MixtureWeights>,
        episode_length: usize,
    },
}

/// Dirichlet(1, ..., 1) draw.
pub fn dirichlet_weights<R: Rng + ?Sized>(m: usize, rng: &mut R) -> MixtureWeights {
    let raw: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    MixtureWeights::new(raw.iter().map(|x| x / total).collect()).unwrap_or_else(|_| MixtureWeights::uniform(m))
}

fn random_kernel<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        out.extend(dirichlet_weights(n_states, rng).as_slice());
    }
    out
}

/// Moves a hull point off the hull: `(1 - eps) T + eps U` with Dirichlet(1) rows `U`.
pub fn perturb_tabular<R: Rng + ?Sized>(model: &TabularMdp, eps: f64, rng: &mut R) -> Result<TabularMdp> {
    let noise = random_kernel(model.n_states(), model.n_actions(), rng);
    let kernel = model
        .transitions()
        .iter()
        .zip(&noise)
        .map(|(p, u)| (1.0 - eps) * p + eps * u)
        .collect();
    model.with_transitions(kernel)
}

fn tabular_task<R: Rng + ?Sized>(
    sources: SourceSet<TabularMdp>,
    realisable: bool,
    eps: f64,
    rng: &mut R,
) -> Result<TaskInstance> {
    let w = dirichlet_weights(sources.len(), rng);
    let hull_point = mix_tabular(&sources, &w)?;
    let (target, target_weights) = if realisable {
        (hull_point, Some(w))
    } else {
        (perturb_tabular(&hull_point, eps, rng)?, None)
    };
    Ok(TaskInstance::Tabular {
        sources,
        target,
        target_weights,
    })
}

const TARGET_ATTEMPTS: usize = 100;

fn lqr_task<R: Rng + ?Sized>(
    sources: SourceSet<LqrModel>,
    realisable: bool,
    eps: f64,
    episode_length: usize,
    rng: &mut R,
) -> Result<TaskInstance> {
    let opts = PlannerOptions::default();
    for _ in 0..TARGET_ATTEMPTS {
        let w = dirichlet_weights(sources.len(), rng);
        let hull_point = mix_lqr(&sources, &w)?;
        let (target, target_weights) = if realisable {
            (hull_point, Some(w))
        } else {
            let m = hull_point.mean();
            let noise = DMatrix::from_fn(m.nrows(), m.ncols(), |_, _| StandardNormal.sample(rng));
            (hull_point.with_mean(m + noise * eps)?, None)
        };
        if plan_lqr(&target, &opts).is_ok() {
            return Ok(TaskInstance::Lqr {
                sources,
                target,
                target_weights,
                episode_length,
            });
        }
    }
    Err(Error::GenerationFailure {
        attempts: TARGET_ATTEMPTS,
        reason: "no stabilisable target found".into(),
    })
}

/// The source set and target of task `task`, drawn from its own stream.
pub fn generate_task(cfg: &RunConfig, task: u32) -> Result<TaskInstance> {
    let mut rng = seeding::stream(cfg.master_seed, task, 0, Purpose::Task);
    let eps = cfg.perturbation;
    match &cfg.environment {
        EnvironmentSpec::Chain(c) => {
            let sources = c
                .source_slips
                .iter()
                .map(|&p| chain_model(c.n_states, p, c.discount))
                .collect::<Result<Vec<_>>>()?;
            tabular_task(SourceSet::new(sources)?, cfg.realisable, eps, &mut rng)
        }
        EnvironmentSpec::RandomMdp(c) => {
            let rewards: Vec<f64> = (0..c.n_states * c.n_actions).map(|_| rng.random()).collect();
            let sources = (0..c.n_sources)
                .map(|_| {
                    let kernel = random_kernel(c.n_states, c.n_actions, &mut rng);
                    TabularMdp::new(c.n_states, c.n_actions, kernel, rewards.clone(), c.discount)
                })
                .collect::<Result<Vec<_>>>()?;
            tabular_task(SourceSet::new(sources)?, cfg.realisable, eps, &mut rng)
        }
        EnvironmentSpec::CartPole(c) => {
            let sources = c
                .pole_lengths
                .iter()
                .map(|&l| {
                    let params = CartPoleParams {
                        pole_length: l,
                        ..CartPoleParams::default()
                    };
                    cartpole_model(&params, c.noise_std)
                })
                .collect::<Result<Vec<_>>>()?;
            lqr_task(SourceSet::new(sources)?, cfg.realisable, eps, c.episode_length, &mut rng)
        }
        EnvironmentSpec::RandomLqr(c) => {
            let sources = (0..c.n_sources)
                .map(|_| random_lqr_model(c.dim_state, c.dim_action, rng.random(), c.noise_std))
                .collect::<Result<Vec<_>>>()?;
            lqr_task(SourceSet::new(sources)?, cfg.realisable, eps, c.episode_length, &mut rng)
        }
    }
}

/// Per-run results written next to the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: u32,
    pub seed: u32,
    pub algorithm: Algorithm,
    pub environment: String,
    pub steps: usize,
    /// Discount of tabular tasks; LQR tasks are undiscounted.
    pub discount: Option<f64>,
    pub n_states: Option<usize>,
    pub target_model: ModelSnapshot,
    pub target_weights: Option<MixtureWeights>,
    pub final_weights: Option<MixtureWeights>,
    pub final_choice: ModelChoice,
    pub final_model: ModelSnapshot,
    pub final_policy: PolicySnapshot,
    /// Distance from the target to the source hull (summed L1 or Frobenius).
    pub realisability_gap: f64,
    pub hull_weights: MixtureWeights,
    /// Distance from the final model to the closest hull point.
    pub estimation_error: f64,
    pub performance_gap_bound: Option<f64>,
    pub delta: f64,
    pub weissman_bound: Option<f64>,
    /// Summed `KL(target || closest hull point in KL)`.
    pub kl_to_best_proxy: Option<f64>,
    /// Regret of the final policy on the target.
    pub final_regret: f64,
    pub tail_mean_regret: f64,
    pub total_reward: f64,
    pub visit_counts: Option<CountTable>,
}

impl RunSummary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn dispatch<D: PsrlDomain>(domain: &mut D, cfg: &RunConfig, streams: &mut RunStreams) -> Result<RunLog> {
    match cfg.algorithm {
        Algorithm::Mlemtrl => run_mlemtrl(domain, cfg.steps, streams),
        Algorithm::MetaMlemtrl => run_meta_mlemtrl(domain, cfg.steps, MetaConfig::new(cfg.meta_prior_p)?, streams),
        Algorithm::Psrl => run_psrl(domain, cfg.steps, &cfg.psrl, streams),
        Algorithm::Oracle => run_oracle(domain, cfg.steps, streams),
        Algorithm::Empirical => run_empirical(domain, cfg.steps, streams),
    }
}

fn tail_mean(records: &[StepRecord], fraction: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let n = ((records.len() as f64 * fraction).ceil() as usize).clamp(1, records.len());
    records[records.len() - n..].iter().map(|r| r.regret).sum::<f64>() / n as f64
}

/// Runs one `(task, seed)` pair of an experiment.
pub fn run_single(cfg: &RunConfig, instance: &TaskInstance, task: u32, seed: u32) -> Result<(RunLog, RunSummary)> {
    let mut streams = RunStreams::new(cfg.master_seed, task, seed);
    let agent = cfg.agent_config();
    match instance {
        TaskInstance::Tabular {
            sources,
            target,
            target_weights,
        } => {
            let mut env = TabularEnv::new(target.clone());
            if cfg.reward_mode == RewardMode::Learned {
                env.reward_noise = LEARNED_REWARD_NOISE;
            }
            let mut domain = TabularDomain::new(env, sources.clone(), &agent)?;
            let log = dispatch(&mut domain, cfg, &mut streams)?;
            let (ModelSnapshot::Tabular(final_model), PolicySnapshot::Tabular { actions }) =
                (&log.final_model, &log.final_policy)
            else {
                return Err(Error::numeric("run produced a non-tabular result"));
            };
            let (gap, hull_weights) = realisability_gap(sources, target)?;
            let hull_model = mix_tabular(sources, &hull_weights)?;
            let estimation_error = l1_model_distance(final_model, &hull_model)?.per_pair_l1;
            let final_regret = domain.regret(&TabularPolicy {
                actions: actions.clone(),
            })?;
            let weissman = match &log.visit_counts {
                Some(c) => Some(weissman_bound(c, target.n_states(), cfg.delta)?),
                None => None,
            };
            let summary = RunSummary {
                task,
                seed,
                algorithm: cfg.algorithm,
                environment: cfg.environment.kind().into(),
                steps: cfg.steps,
                discount: Some(target.discount()),
                n_states: Some(target.n_states()),
                target_model: ModelSnapshot::Tabular(target.clone()),
                target_weights: target_weights.clone(),
                final_weights: log.final_weights.clone(),
                final_choice: log.final_choice,
                final_model: log.final_model.clone(),
                final_policy: log.final_policy.clone(),
                realisability_gap: gap,
                hull_weights,
                estimation_error,
                performance_gap_bound: Some(performance_gap_bound(estimation_error, gap, target.discount())?),
                delta: cfg.delta,
                weissman_bound: weissman,
                kl_to_best_proxy: Some(kl_projection(sources, target)?.0),
                final_regret,
                tail_mean_regret: tail_mean(&log.records, cfg.tail_fraction),
                total_reward: log.records.last().map_or(0.0, |r| r.cum_reward),
                visit_counts: log.visit_counts.clone(),
            };
            Ok((log, summary))
        }
        TaskInstance::Lqr {
            sources,
            target,
            target_weights,
            episode_length,
        } => {
            let mut env = LqrEnv::new(target.clone());
            env.episode_length = Some(*episode_length);
            let mut domain = LqrDomain::new(env, sources.clone(), &agent)?;
            let log = dispatch(&mut domain, cfg, &mut streams)?;
            let (ModelSnapshot::Lqr(final_model), PolicySnapshot::Linear { gain }) = (&log.final_model, &log.final_policy)
            else {
                return Err(Error::numeric("run produced a non-linear result"));
            };
            let (gap, hull_weights) = realisability_gap(sources, target)?;
            let hull_model = mix_lqr(sources, &hull_weights)?;
            let estimation_error = (final_model.mean() - hull_model.mean()).norm();
            let k = DMatrix::from_row_iterator(gain.len(), target.dim_state(), gain.iter().flatten().copied());
            let final_regret = domain.regret(&crate::planning::LqrGain {
                k,
                p: DMatrix::zeros(target.dim_state(), target.dim_state()),
            })?;
            let summary = RunSummary {
                task,
                seed,
                algorithm: cfg.algorithm,
                environment: cfg.environment.kind().into(),
                steps: cfg.steps,
                discount: None,
                n_states: None,
                target_model: ModelSnapshot::Lqr(target.clone()),
                target_weights: target_weights.clone(),
                final_weights: log.final_weights.clone(),
                final_choice: log.final_choice,
                final_model: log.final_model.clone(),
                final_policy: log.final_policy.clone(),
                realisability_gap: gap,
                hull_weights,
                estimation_error,
                performance_gap_bound: None,
                delta: cfg.delta,
                weissman_bound: None,
                kl_to_best_proxy: None,
                final_regret,
                tail_mean_regret: tail_mean(&log.records, cfg.tail_fraction),
                total_reward: log.records.last().map_or(0.0, |r| r.cum_reward),
                visit_counts: None,
            };
            Ok((log, summary))
        }
    }
}

/// Per-step series of one run, enough to aggregate metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub avg_cum_reward: Vec<f64>,
    pub regret: Vec<f64>,
}

impl MetricSeries {
    pub fn from_records(records: &[StepRecord]) -> Self {
        Self {
            avg_cum_reward: records.iter().map(|r| r.cum_reward / r.t as f64).collect(),
            regret: records.iter().map(|r| r.regret).collect(),
        }
    }
}

/// Per-step mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn aggregate(series: &[MetricSeries]) -> Result<Vec<(usize, f64, f64, f64)>> {
    let first = series.first().ok_or_else(|| Error::invalid("no logs to aggregate"))?;
    let len = first.avg_cum_reward.len();
    if series.iter().any(|s| s.avg_cum_reward.len() != len || s.regret.len() != len) {
        return Err(Error::invalid("logs have different lengths"));
    }
    let n = series.len() as f64;
    Ok((0..len)
        .map(|i| {
            let mean = series.iter().map(|s| s.avg_cum_reward[i]).sum::<f64>() / n;
            let stderr = if series.len() > 1 {
                let var = series.iter().map(|s| (s.avg_cum_reward[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            let regret = series.iter().map(|s| s.regret[i]).sum::<f64>() / n;
            (i + 1, mean, stderr, regret)
        })
        .collect())
}

pub const METRICS_HEADER: &str = "t,mean_avg_cum_reward,stderr,mean_regret";

pub fn write_metrics(series: &[MetricSeries], path: impl AsRef<Path>) -> Result<()> {
    let rows = aggregate(series)?;
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{METRICS_HEADER}").map_err(io)?;
    for (t, mean, stderr, regret) in rows {
        writeln!(out, "{t},{mean},{stderr},{regret}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Aggregate table over runs of equal length.
pub fn emit_metrics(logs: &[RunLog], path: impl AsRef<Path>) -> Result<()> {
    let series: Vec<MetricSeries> = logs.iter().map(|l| MetricSeries::from_records(&l.records)).collect();
    write_metrics(&series, path)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Parse(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_step_records(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn run_file_stem(task: u32, seed: u32) -> String {
    format!("run_{task}_{seed}")
}

pub fn write_run(dir: &Path, log: &RunLog, summary: &RunSummary) -> Result<()> {
    let stem = run_file_stem(summary.task, summary.seed);
    write_jsonl(&log.records, &dir.join(format!("{stem}.jsonl")))?;
    if !log.meta_trace.is_empty() {
        write_jsonl(&log.meta_trace, &dir.join(format!("{stem}.meta.jsonl")))?;
    }
    let path = dir.join(format!("{stem}.summary.json"));
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub summaries: Vec<RunSummary>,
    pub series: Vec<MetricSeries>,
}

/// Runs every `(task, seed)` pair on a pool of `cfg.workers` threads, writes
/// one log and summary per run, then the aggregate metrics table.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tasks = (0..cfg.n_tasks).map(|t| generate_task(cfg, t)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(u32, u32)> = (0..cfg.n_tasks).flat_map(|t| (0..cfg.n_seeds).map(move |s| (t, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let results: Vec<(RunSummary, MetricSeries)> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(t, s)| {
                let (log, summary) = run_single(cfg, &tasks[t as usize], t, s)?;
                write_run(&dir, &log, &summary)?;
                Ok((summary, MetricSeries::from_records(&log.records)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (summaries, series): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let metrics_path = dir.join("metrics.csv");
    if cfg.steps > 0 {
        write_metrics(&series, &metrics_path)?;
    } else {
        fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }
    Ok(ExperimentReport {
        output_dir: dir,
        metrics_path,
        summaries,
        series,
    })
}

/// A model file: one model or a list of models of either class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelFile {
    Tabular(TabularMdp),
    Lqr(LqrModel),
    TabularSet(Vec<TabularMdp>),
    LqrSet(Vec<LqrModel>),
}

impl ModelFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|_| {
            Error::Parse(format!(
                "{}: not a tabular or LQR model (or a list of them), or a model failed validation",
                path.display()
            ))
        })
    }
}

/// Realisability gap of `target` with respect to `sources`, for matching classes.
pub fn gap_between(sources: &ModelFile, target: &ModelFile) -> Result<(f64, MixtureWeights)> {
    match (sources, target) {
        (ModelFile::TabularSet(s), ModelFile::Tabular(t)) => realisability_gap(&SourceSet::new(s.clone())?, t),
        (ModelFile::LqrSet(s), ModelFile::Lqr(t)) => realisability_gap(&SourceSet::new(s.clone())?, t),
        (ModelFile::Tabular(s), ModelFile::Tabular(t)) => realisability_gap(&SourceSet::new(vec![s.clone()])?, t),
        (ModelFile::Lqr(s), ModelFile::Lqr(t)) => realisability_gap(&SourceSet::new(vec![s.clone()])?, t),
        _ => Err(Error::invalid("sources must be a list of models of the target's class")),
    }
}

/// Bounds recomputed from a stored summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub estimation_error: f64,
    pub realisability_gap: f64,
    pub discount: Option<f64>,
    pub performance_gap_bound: Option<f64>,
    pub final_regret: f64,
    pub bound_holds: Option<bool>,
    pub delta: f64,
    pub weissman_bound: Option<f64>,
}

pub fn bounds_from_summary(summary: &RunSummary, delta: Option<f64>) -> Result<BoundsReport> {
    let delta = delta.unwrap_or(summary.delta);
    let bound = match summary.discount {
        Some(g) => Some(performance_gap_bound(summary.estimation_error, summary.realisability_gap, g)?),
        None => None,
    };
    let weissman = match (&summary.visit_counts, summary.n_states) {
        (Some(c), Some(s)) => Some(weissman_bound(c, s, delta)?),
        _ => None,
    };
    Ok(BoundsReport {
        estimation_error: summary.estimation_error,
        realisability_gap: summary.realisability_gap,
        discount: summary.discount,
        performance_gap_bound: bound,
        final_regret: summary.final_regret,
        bound_holds: bound.map(|b| summary.final_regret <= b),
        delta,
        weissman_bound: weissman,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algorithm: Algorithm, dir: &Path) -> RunConfig {
        RunConfig {
            algorithm,
            steps: 10,
            n_tasks: 1,
            n_seeds: 1,
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    fn record(t: usize, reward: f64, cum: f64) -> StepRecord {
        StepRecord {
            t,
            w: vec![],
            action: crate::transfer::ActionRecord::Discrete(0),
            reward,
            cum_reward: cum,
            regret: 0.0,
            model_choice: ModelChoice::Mlem,
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            "algorithm = \"psrl\"\nsteps = 50\n[environment]\nkind = \"random_lqr\"\ndim_state = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Psrl);
        let EnvironmentSpec::RandomLqr(lqr) = &cfg.environment else { panic!() };
        assert_eq!((lqr.dim_state, lqr.dim_action), (3, 1));
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = RunConfig::from_toml_str("delta = 1.5").unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
        let err = RunConfig::from_toml_str("[agent]\nreopt_every = 0").unwrap_err();
        assert!(err.to_string().contains("agent"), "{err}");
        let err = RunConfig::from_toml_str("[environment]\nkind = \"chain\"\ndiscount = 1.0").unwrap_err();
        assert!(err.to_string().contains("environment.discount"), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn single_run_counting() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&small(Algorithm::Mlemtrl, dir.path())).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["metrics.csv", "run_0_0.jsonl", "run_0_0.summary.json"]);
        assert_eq!(read_step_records(dir.path().join("run_0_0.jsonl")).unwrap().len(), 10);
        let csv = fs::read_to_string(&report.metrics_path).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn oracle_regret_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            steps: 200,
            n_tasks: 2,
            ..small(Algorithm::Oracle, dir.path())
        };
        run_experiment(&cfg).unwrap();
        for t in 0..2 {
            let recs = read_step_records(dir.path().join(format!("run_{t}_0.jsonl"))).unwrap();
            assert!(recs.iter().all(|r| r.regret == 0.0));
        }
    }

    #[test]
    fn metrics_arithmetic() {
        let zeros: Vec<StepRecord> = (1..=3).map(|t| record(t, 0.0, 0.0)).collect();
        let ones: Vec<StepRecord> = (1..=3).map(|t| record(t, 1.0, t as f64)).collect();
        let rows = aggregate(&[MetricSeries::from_records(&zeros), MetricSeries::from_records(&ones)]).unwrap();
        for (_, mean, stderr, _) in rows {
            assert_eq!(mean, 0.5);
            // Sample standard deviation sqrt(0.5) over sqrt(2).
            assert!((stderr - 0.5).abs() < 1e-12);
        }
        let single = aggregate(&[MetricSeries::from_records(&ones)]).unwrap();
        assert!(single.iter().all(|r| r.2 == 0.0));
        let short = MetricSeries::from_records(&ones[..2]);
        assert!(aggregate(&[MetricSeries::from_records(&ones), short]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn metrics_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<StepRecord> = (1..=5).map(|t| record(t, 0.3, 0.3 * t as f64)).collect();
        let series = vec![MetricSeries::from_records(&recs); 3];
        write_metrics(&series, dir.path().join("a.csv")).unwrap();
        write_metrics(&series, dir.path().join("b.csv")).unwrap();
        assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), fs::read(dir.path().join("b.csv")).unwrap());
    }

    #[test]
    fn realisable_targets_have_zero_gap() {
        let cfg = RunConfig::default();
        for t in 0..3 {
            let TaskInstance::Tabular { sources, target, target_weights } = generate_task(&cfg, t).unwrap() else {
                panic!()
            };
            assert!(target_weights.is_some());
            assert!(realisability_gap(&sources, &target).unwrap().0 < 1e-6);
        }
        let nr = RunConfig {
            realisable: false,
            environment: EnvironmentSpec::RandomMdp(RandomMdpSpec::default()),
            ..RunConfig::default()
        };
        let TaskInstance::Tabular { sources, target, .. } = generate_task(&nr, 0).unwrap() else { panic!() };
        assert!(realisability_gap(&sources, &target).unwrap().0 > 1e-3);
    }

    #[test]
    fn adding_tasks_keeps_existing_targets() {
        let a = RunConfig {
            n_tasks: 2,
            ..RunConfig::default()
        };
        let b = RunConfig {
            n_tasks: 5,
            ..RunConfig::default()
        };
        assert_eq!(generate_task(&a, 1).unwrap(), generate_task(&b, 1).unwrap());
    }

    #[test]
    fn lqr_experiments_run() {
        for env in [
            EnvironmentSpec::RandomLqr(RandomLqrSpec::default()),
            EnvironmentSpec::CartPole(CartPoleSpec::default()),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = RunConfig {
                environment: env,
                steps: 50,
                ..small(Algorithm::MetaMlemtrl, dir.path())
            };
            let report = run_experiment(&cfg).unwrap();
            assert!(report.summaries[0].realisability_gap < 1e-6);
            assert!(dir.path().join("run_0_0.meta.jsonl").exists());
        }
    }

    #[test]
    fn bounds_recomputed_from_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            steps: 300,
            ..small(Algorithm::Mlemtrl, dir.path())
        };
        run_experiment(&cfg).unwrap();
        let summary = RunSummary::load(dir.path().join("run_0_0.summary.json")).unwrap();
        let report = bounds_from_summary(&summary, None).unwrap();
        assert_eq!(report.performance_gap_bound, summary.performance_gap_bound);
        assert_eq!(report.bound_holds, Some(true));
        assert_eq!(report.weissman_bound, summary.weissman_bound);
    }
}
