//! Benchmark environments: the slippery Chain, a linearised cart-pole, and a
//! seeded family of random LQR tasks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{LqrModel, TabularMdp};
use crate::planning::{closed_loop, solve_riccati, spectral_radius};

/// Chain reward for advancing at the far end, before rescaling.
pub const CHAIN_END_REWARD: f64 = 10.0;
/// Chain reward for the return action, before rescaling.
pub const CHAIN_RETURN_REWARD: f64 = 2.0;
pub const CHAIN_FORWARD: usize = 0;
pub const CHAIN_RETURN: usize = 1;

pub const DEFAULT_DT: f64 = 0.02;

const RANDOM_LQR_MAX_RADIUS: f64 = 1.5;
const RANDOM_LQR_ATTEMPTS: usize = 100;

/// Whether rewards are known to the agent or observed with noise and learned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Known,
    Learned,
}

/// Chain kernel and rewards: action 0 advances (staying put at the end),
/// action 1 returns to state 0, and each action's effect is swapped with
/// probability `slip`. Rewards are rescaled into `[0, 1]`.
pub fn chain_model(n_states: usize, slip: f64, discount: f64) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(Error::invalid("chain needs at least two states"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::invalid(format!("slip {slip} outside [0, 1]")));
    }
    let last = n_states - 1;
    TabularMdp::from_fn(
        n_states,
        2,
        discount,
        |s, a| {
            let forward = (s + 1).min(last);
            let (p_forward, p_return) = if a == CHAIN_FORWARD {
                (1.0 - slip, slip)
            } else {
                (slip, 1.0 - slip)
            };
            let mut row = vec![0.0; n_states];
            row[forward] += p_forward;
            row[0] += p_return;
            row
        },
        |s, a| match a {
            CHAIN_FORWARD if s == last => 1.0,
            CHAIN_FORWARD => 0.0,
            _ => CHAIN_RETURN_REWARD / CHAIN_END_REWARD,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularEnv {
    pub model: TabularMdp,
    pub initial_state: usize,
    /// Standard deviation of observation noise added to rewards.
    pub reward_noise: f64,
    /// Reset to `initial_state` after this many steps, if set.
    pub episode_length: Option<usize>,
}

impl TabularEnv {
    pub fn new(model: TabularMdp) -> Self {
        Self {
            model,
            initial_state: 0,
            reward_noise: 0.0,
            episode_length: None,
        }
    }

    pub fn reset(&self) -> usize {
        self.initial_state
    }

    /// Samples `s'` from the true kernel row and returns the (possibly noisy) reward.
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
        if s >= self.model.n_states() || a >= self.model.n_actions() {
            return Err(Error::invalid(format!("state {s} / action {a} out of range")));
        }
        let u: f64 = rng.random();
        let row = self.model.row(s, a);
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (t, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = t;
                break;
            }
        }
        // Never land on a zero-probability tail state through rounding.
        while row[next] == 0.0 && next > 0 {
            next -= 1;
        }
        let mut reward = self.model.reward(s, a);
        if self.reward_noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            reward += self.reward_noise * z;
        }
        Ok((next, reward))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrEnv {
    pub model: LqrModel,
    /// Standard deviation of the Gaussian initial state.
    pub init_scale: f64,
    pub episode_length: Option<usize>,
}

impl LqrEnv {
    pub fn new(model: LqrModel) -> Self {
        Self {
            model,
            init_scale: 1.0,
            episode_length: Some(100),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.model.dim_state(), |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.init_scale * z
        })
    }

    /// `s' = s + A s + B a + xi`, `xi ~ N(0, noise_cov)`; reward `-(s'Qs + a'Ra)`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: &DVector<f64>,
        a: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, f64)> {
        if s.len() != self.model.dim_state() || a.len() != self.model.dim_action() {
            return Err(Error::invalid("state or action dimension mismatch"));
        }
        let mut next = s + self.model.predict_increment(a, s);
        let factor = noise_factor(self.model.noise_cov());
        if factor.iter().any(|x| *x != 0.0) {
            let z = DVector::from_fn(s.len(), |_, _| StandardNormal.sample(rng));
            next += factor * z;
        }
        let reward = -self.model.stage_cost(s, a);
        Ok((next, reward))
    }
}

/// A square root `L` with `L L' = cov`; tolerates singular covariances.
pub(crate) fn noise_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|x| *x == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Environment {
    Tabular(TabularEnv),
    Lqr(LqrEnv),
}

impl Environment {
    pub fn as_tabular(&self) -> Option<&TabularEnv> {
        match self {
            Environment::Tabular(e) => Some(e),
            Environment::Lqr(_) => None,
        }
    }

    pub fn as_lqr(&self) -> Option<&LqrEnv> {
        match self {
            Environment::Lqr(e) => Some(e),
            Environment::Tabular(_) => None,
        }
    }
}

/// Default observation noise on rewards in learned-reward mode.
pub const LEARNED_REWARD_NOISE: f64 = 0.1;

pub fn make_chain(n_states: usize, slip: f64, reward_mode: RewardMode, discount: f64) -> Result<Environment> {
    let mut env = TabularEnv::new(chain_model(n_states, slip, discount)?);
    if reward_mode == RewardMode::Learned {
        env.reward_noise = LEARNED_REWARD_NOISE;
    }
    Ok(Environment::Tabular(env))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half-length of the pole, as in the classic formulation.
    pub pole_length: f64,
    pub dt: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            pole_length: 0.5,
            dt: DEFAULT_DT,
        }
    }
}

/// Cart-pole linearised about the upright equilibrium, in increment form
/// after a forward-Euler step. State `(x, x_dot, theta, theta_dot)`, one force input.
pub fn cartpole_model(p: &CartPoleParams, noise_std: f64) -> Result<LqrModel> {
    if [p.gravity, p.mass_cart, p.mass_pole, p.pole_length, p.dt].iter().any(|x| !(*x > 0.0)) {
        return Err(Error::invalid("cart-pole parameters must be positive"));
    }
    let total = p.mass_cart + p.mass_pole;
    let denom = p.pole_length * (4.0 / 3.0 - p.mass_pole / total);
    let theta_acc_theta = p.gravity / denom;
    let theta_acc_force = -1.0 / (total * denom);
    let x_acc_theta = -p.mass_pole * p.pole_length * theta_acc_theta / total;
    let x_acc_force = 1.0 / total - p.mass_pole * p.pole_length * theta_acc_force / total;

    #[rustfmt::skip]
    let a_cont = DMatrix::from_row_slice(4, 4, &[
        0.0, 1.0, 0.0,          0.0,
        0.0, 0.0, x_acc_theta,  0.0,
        0.0, 0.0, 0.0,          1.0,
        0.0, 0.0, theta_acc_theta, 0.0,
    ]);
    let b_cont = DMatrix::from_row_slice(4, 1, &[0.0, x_acc_force, 0.0, theta_acc_force]);
    LqrModel::from_increment_dynamics(
        &(a_cont * p.dt),
        &(b_cont * p.dt),
        DMatrix::identity(4, 4) * noise_std.powi(2),
        DMatrix::identity(4, 4),
        DMatrix::identity(1, 1),
    )
}

pub fn make_cartpole_lqr(gravity: f64, mass_cart: f64, mass_pole: f64, pole_length: f64) -> Result<Environment> {
    let params = CartPoleParams {
        gravity,
        mass_cart,
        mass_pole,
        pole_length,
        ..Default::default()
    };
    Ok(Environment::Lqr(LqrEnv::new(cartpole_model(&params, DEFAULT_NOISE_STD)?)))
}

/// Default process-noise standard deviation for LQR tasks.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

/// Seeded random LQR task.
///
/// The seed draws a stiffness factor in `[0.5, 2]`; `A` has entries
/// uniform in `[-0.5, 0.5]` scaled by `stiffness / sqrt(d_s)` and `B` has
/// entries uniform in `[-1, 1]`. Draws with `rho(I + A) > 1.5`, or whose
/// Riccati iteration fails to stabilise, are rejected. `Q = I`, `R = I`.
pub fn random_lqr_model(dim_state: usize, dim_action: usize, stiffness_seed: u64, noise_std: f64) -> Result<LqrModel> {
    if dim_state == 0 || dim_action == 0 {
        return Err(Error::invalid("LQR dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stiffness_seed);
    let stiffness = rng.random_range(0.5..=2.0);
    let scale = stiffness / (dim_state as f64).sqrt();
    let q = DMatrix::identity(dim_state, dim_state);
    let r = DMatrix::identity(dim_action, dim_action);
    for _ in 0..RANDOM_LQR_ATTEMPTS {
        let a = DMatrix::from_fn(dim_state, dim_state, |_, _| scale * rng.random_range(-0.5..=0.5));
        let b = DMatrix::from_fn(dim_state, dim_action, |_, _| rng.random_range(-1.0..=1.0));
        let f = &a + DMatrix::<f64>::identity(dim_state, dim_state);
        if spectral_radius(&f) > RANDOM_LQR_MAX_RADIUS {
            continue;
        }
        let Ok(gain) = solve_riccati(&f, &b, &q, &r, 1e-9, 10_000) else {
            continue;
        };
        if spectral_radius(&closed_loop(&f, &b, &gain.k)) >= 1.0 {
            continue;
        }
        return LqrModel::from_increment_dynamics(
            &a,
            &b,
            DMatrix::identity(dim_state, dim_state) * noise_std.powi(2),
            q,
            r,
        );
    }
    Err(Error::GenerationFailure {
        attempts: RANDOM_LQR_ATTEMPTS,
        reason: format!("no stabilisable {dim_state}x{dim_action} draw for seed {stiffness_seed}"),
    })
}

pub fn make_random_lqr(dim_state: usize, dim_action: usize, stiffness_seed: u64) -> Result<Environment> {
    Ok(Environment::Lqr(LqrEnv::new(random_lqr_model(
        dim_state,
        dim_action,
        stiffness_seed,
        DEFAULT_NOISE_STD,
    )?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::{plan_lqr, value_iteration, PlannerOptions};

    #[test]
    fn deterministic_chain_prefers_forward() {
        let Environment::Tabular(env) = make_chain(5, 0.0, RewardMode::Known, 0.9).unwrap() else {
            panic!("expected tabular env");
        };
        let (_, pi) = value_iteration(&env.model, 1e-9);
        assert_eq!(pi.actions, vec![CHAIN_FORWARD; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(env.step(0, CHAIN_FORWARD, &mut rng).unwrap().0, 1);
    }

    #[test]
    fn half_slip_makes_actions_equivalent() {
        let m = chain_model(5, 0.5, 0.9).unwrap();
        for s in 0..5 {
            assert_eq!(m.row(s, 0), m.row(s, 1));
        }
    }

    #[test]
    fn source_slips_share_rewards() {
        let models: Vec<_> = [0.01, 0.20, 0.50].iter().map(|&p| chain_model(5, p, 0.9).unwrap()).collect();
        assert!(models.windows(2).all(|w| w[0].rewards() == w[1].rewards()));
        assert!(models.iter().all(|m| m.rewards().iter().all(|r| (0.0..=1.0).contains(r))));
        assert!(chain_model(5, 1.5, 0.9).is_err());
        assert!(chain_model(1, 0.1, 0.9).is_err());
    }

    #[test]
    fn half_slip_forward_frequency() {
        let Environment::Tabular(env) = make_chain(5, 0.5, RewardMode::Known, 0.9).unwrap() else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let forward = (0..n).filter(|_| env.step(2, CHAIN_FORWARD, &mut rng).unwrap().0 == 3).count();
        let freq = forward as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn tabular_frequencies_pass_chi_square() {
        let m = chain_model(4, 0.3, 0.9).unwrap();
        // Spread mass over more successors to exercise every bin.
        let env = TabularEnv::new(m.with_transitions({
            let mut t = m.transitions().to_vec();
            t[0..4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
            t
        }).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[env.step(0, 0, &mut rng).unwrap().0] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip([0.1, 0.2, 0.3, 0.4])
            .map(|(&o, p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        // 99.9% quantile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn invalid_indices_rejected() {
        let env = TabularEnv::new(chain_model(3, 0.1, 0.9).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(env.step(3, 0, &mut rng).is_err());
        assert!(env.step(0, 2, &mut rng).is_err());
    }

    #[test]
    fn learned_mode_adds_reward_noise() {
        let Environment::Tabular(env) = make_chain(3, 0.1, RewardMode::Learned, 0.9).unwrap() else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rewards: Vec<f64> = (0..200).map(|_| env.step(0, CHAIN_RETURN, &mut rng).unwrap().1).collect();
        let mean = rewards.iter().sum::<f64>() / 200.0;
        assert!(rewards.iter().any(|r| (r - 0.2).abs() > 1e-6));
        assert!((mean - 0.2).abs() < 0.03);
    }

    #[test]
    fn upright_cartpole_is_unstable() {
        let Environment::Lqr(env) = make_cartpole_lqr(9.8, 1.0, 0.1, 0.5).unwrap() else {
            unreachable!()
        };
        let (f, _) = env.model.effective_dynamics(false);
        assert!(spectral_radius(&f) > 1.0);
    }

    #[test]
    fn cartpole_gravity_coupling_entry() {
        // Hand linearisation with g = 9.8, M = 1.0, m = 0.1, l = 0.5, dt = 0.02:
        // D = l (4/3 - m/(M+m)) = 0.621212..., entry = dt g / D.
        let base = cartpole_model(&CartPoleParams::default(), 0.01).unwrap();
        let expected = 0.02 * 9.8 / (0.5 * (4.0 / 3.0 - 0.1 / 1.1));
        assert!((base.state_matrix()[(3, 2)] - expected).abs() < 1e-12);
        assert!((expected - 0.315_512_195_121_951_2).abs() < 1e-12);
        let doubled = cartpole_model(
            &CartPoleParams {
                pole_length: 1.0,
                ..Default::default()
            },
            0.01,
        )
        .unwrap();
        let ratio = doubled.state_matrix()[(3, 2)] / base.state_matrix()[(3, 2)];
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cartpole_riccati_controller_stabilises() {
        let model = cartpole_model(&CartPoleParams::default(), 0.01).unwrap();
        let gain = plan_lqr(&model, &PlannerOptions::default()).unwrap();
        let (f, b) = model.effective_dynamics(false);
        assert!(spectral_radius(&closed_loop(&f, &b, &gain.k)) < 1.0);
    }

    #[test]
    fn random_lqr_is_seed_deterministic_and_stabilisable() {
        for (ds, da) in [(4, 1), (12, 2)] {
            let a = random_lqr_model(ds, da, 42, 0.01).unwrap();
            let b = random_lqr_model(ds, da, 42, 0.01).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.dim_state(), a.dim_action()), (ds, da));
            let gain = plan_lqr(&a, &PlannerOptions::default()).unwrap();
            let (f, bm) = a.effective_dynamics(false);
            assert!(spectral_radius(&closed_loop(&f, &bm, &gain.k)) < 1.0);
        }
        assert_ne!(random_lqr_model(4, 1, 1, 0.01).unwrap(), random_lqr_model(4, 1, 2, 0.01).unwrap());
    }

    #[test]
    fn lqr_equilibrium_without_noise() {
        let model = cartpole_model(&CartPoleParams::default(), 0.0).unwrap();
        let env = LqrEnv::new(model);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, r) = env.step(&DVector::zeros(4), &DVector::zeros(1), &mut rng).unwrap();
        assert_eq!(next, DVector::zeros(4));
        assert_eq!(r, 0.0);
    }

    #[test]
    fn lqr_residuals_have_configured_moments() {
        let model = random_lqr_model(2, 1, 3, 0.0)
            .unwrap()
            .with_noise_cov(DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]))
            .unwrap();
        let env = LqrEnv::new(model.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000;
        let s = DVector::from_column_slice(&[0.3, -0.2]);
        let a = DVector::from_column_slice(&[0.5]);
        let mean_next = &s + model.predict_increment(&a, &s);
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let (next, _) = env.step(&s, &a, &mut rng).unwrap();
            let e = next - &mean_next;
            sum += &e;
            outer += &e * e.transpose();
        }
        let mean = sum / n as f64;
        let cov = outer / n as f64;
        assert!(mean.amax() < 0.01);
        assert!((cov - model.noise_cov()).amax() < 0.005);
    }
}
