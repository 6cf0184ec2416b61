//! Policy learning and exact solvers. Every learner takes its reward from a
//! [`RewardSource`], so the environment reward can be swapped for a learned
//! or shaped one without touching the transition stream.

mod actor_critic;
mod mc;
mod qlearning;
mod reward;
pub mod tabular;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::types::{Observation, Trajectory, Transition};

pub use actor_critic::{
    actor_critic_train, AcCheckpoint, AcConfig, AcOutcome, AcTrainer, ActorCritic, ActorPolicy,
    InputNorm,
};
pub use mc::{mc_value_estimate, McEstimate};
pub use qlearning::{q_learning, QConfig, QOutcome, QPolicy, QTable};
pub use reward::{BtReward, RewardSource, RewardStream, Shaping, WindowScorer};

pub trait Policy<E: Environment> {
    fn act(&mut self, env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize>;
}

impl<E: Environment, P: Policy<E> + ?Sized> Policy<E> for Box<P> {
    fn act(&mut self, env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        (**self).act(env, obs, rng)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl<E: Environment> Policy<E> for RandomPolicy {
    fn act(&mut self, env: &E, _obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(rng.gen_range(0..env.n_actions()))
    }
}

/// Adapts a closure into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<E, F> Policy<E> for FnPolicy<F>
where
    E: Environment,
    F: FnMut(&E, &Observation, &mut ChaCha8Rng) -> Result<usize>,
{
    fn act(&mut self, env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        (self.0)(env, obs, rng)
    }
}

/// With probability `epsilon` act uniformly at random, otherwise defer.
pub struct EpsilonMix<P> {
    pub inner: P,
    pub epsilon: f64,
}

impl<E: Environment, P: Policy<E>> Policy<E> for EpsilonMix<P> {
    fn act(&mut self, env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        if rng.gen::<f64>() < self.epsilon {
            Ok(rng.gen_range(0..env.n_actions()))
        } else {
            self.inner.act(env, obs, rng)
        }
    }
}

/// Runs one episode from `env.reset(seed)`, recording environment rewards.
pub fn rollout<E: Environment, P: Policy<E>>(
    env: &mut E,
    policy: &mut P,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut obs = env.reset(seed);
    let mut transitions = Vec::new();
    while !env.is_done() {
        let action = policy.act(env, &obs, rng)?;
        let out = env.step(action)?;
        transitions.push(Transition {
            obs: obs.clone(),
            action_id: action,
            reward_env: out.reward,
            next_obs: out.obs.clone(),
            done: out.done,
        });
        obs = out.obs;
    }
    Ok(Trajectory { transitions, seed })
}

/// Seeded batch of rollouts; episode `i` resets with a seed drawn from the
/// master stream.
pub fn rollouts<E: Environment, P: Policy<E>>(
    env: &mut E,
    policy: &mut P,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| {
            let s = rng.gen::<u64>();
            rollout(env, policy, s, &mut rng)
        })
        .collect()
}

/// Per-episode learning statistics. Success means the episode earned a
/// positive environment reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Environment steps taken so far, including this episode.
    pub step: u64,
    pub length: usize,
    pub env_return: f64,
    pub shaped_return: f64,
    pub success: bool,
    /// Success rate over the trailing window (partial at the start).
    pub success_rate: f64,
    /// Mean environment return over the trailing window.
    pub mean_return: f64,
}

pub(crate) struct MetricsTracker {
    window: usize,
    recent: std::collections::VecDeque<(bool, f64)>,
    pub metrics: Vec<EpisodeMetrics>,
}

impl MetricsTracker {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            recent: Default::default(),
            metrics: Vec::new(),
        }
    }

    pub fn push(&mut self, step: u64, length: usize, env_return: f64, shaped_return: f64) {
        let success = env_return > 0.0;
        self.recent.push_back((success, env_return));
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let n = self.recent.len() as f64;
        let success_rate = self.recent.iter().filter(|(s, _)| *s).count() as f64 / n;
        let mean_return = self.recent.iter().map(|(_, r)| r).sum::<f64>() / n;
        self.metrics.push(EpisodeMetrics {
            episode: self.metrics.len(),
            step,
            length,
            env_return,
            shaped_return,
            success,
            success_rate,
            mean_return,
        });
    }
}

/// First step count at which the trailing success rate over `window` full
/// episodes reaches `threshold`.
pub fn steps_to_success(metrics: &[EpisodeMetrics], threshold: f64, window: usize) -> Option<u64> {
    metrics
        .iter()
        .find(|m| m.episode + 1 >= window && m.success_rate >= threshold)
        .map(|m| m.step)
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    step: u64,
    episode: usize,
    success_rate: f64,
    mean_return: f64,
    reward_source: &'a str,
    seed: u64,
}

pub fn write_metrics_csv(
    metrics: &[EpisodeMetrics],
    reward_source: &str,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for m in metrics {
        w.serialize(MetricsRow {
            step: m.step,
            episode: m.episode,
            success_rate: m.success_rate,
            mean_return: m.mean_return,
            reward_source,
            seed,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests;
