use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeMetrics, MetricsTracker, Policy, RewardSource};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::types::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QConfig {
    pub episodes: usize,
    pub gamma: f64,
    /// Step size for the n-th update of a pair is `alpha / n^alpha_decay`.
    pub alpha: f64,
    pub alpha_decay: f64,
    pub epsilon: f64,
    pub rng_seed: u64,
    pub max_states: usize,
    pub success_window: usize,
    /// Keep every per-step reward (for inspection).
    pub log_rewards: bool,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            gamma: 0.99,
            alpha: 1.0,
            alpha_decay: 0.7,
            epsilon: 0.2,
            rng_seed: 0,
            max_states: 100_000,
            success_window: 100,
            log_rewards: false,
        }
    }
}

/// Action values keyed by state key.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_actions: usize,
    pub values: HashMap<String, Vec<f64>>,
    visits: HashMap<String, Vec<u64>>,
}

impl QTable {
    pub fn new(n_actions: usize) -> Self {
        Self {
            n_actions,
            values: HashMap::new(),
            visits: HashMap::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.values.get(key).map(Vec::as_slice)
    }

    pub fn q(&self, key: &str, action: usize) -> f64 {
        self.values.get(key).map_or(0.0, |v| v[action])
    }

    pub fn value(&self, key: &str) -> f64 {
        self.values
            .get(key)
            .map_or(0.0, |v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn visits(&self, key: &str, action: usize) -> u64 {
        self.visits.get(key).map_or(0, |v| v[action])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Greedy action with ties broken uniformly at random.
    pub fn greedy(&self, key: &str, rng: &mut ChaCha8Rng) -> usize {
        match self.values.get(key) {
            None => rng.gen_range(0..self.n_actions),
            Some(q) => {
                let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties: Vec<usize> = (0..q.len()).filter(|&a| q[a] == best).collect();
                ties[rng.gen_range(0..ties.len())]
            }
        }
    }

    fn ensure(&mut self, key: &str, cap: usize) -> Result<()> {
        if !self.values.contains_key(key) {
            if self.values.len() >= cap {
                return Err(Error::invalid(format!(
                    "state space exceeds the tabular cap of {cap} states; use the actor-critic learner"
                )));
            }
            self.values
                .insert(key.to_string(), vec![0.0; self.n_actions]);
            self.visits.insert(key.to_string(), vec![0; self.n_actions]);
        }
        Ok(())
    }
}

/// Greedy policy over a learned table.
pub struct QPolicy<'a> {
    pub table: &'a QTable,
}

impl<E: Environment> Policy<E> for QPolicy<'_> {
    fn act(&mut self, _env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(self.table.greedy(&obs.state_key, rng))
    }
}

#[derive(Debug, Clone)]
pub struct QOutcome {
    pub table: QTable,
    pub metrics: Vec<EpisodeMetrics>,
    /// Per-episode reward streams when `log_rewards` is set.
    pub rewards: Vec<Vec<f64>>,
}

/// Epsilon-greedy tabular Q-learning on rewards from `source`.
pub fn q_learning<E: Environment>(
    env: &mut E,
    source: &RewardSource,
    cfg: &QConfig,
) -> Result<QOutcome> {
    if !(0.0..=1.0).contains(&cfg.epsilon) || !(cfg.alpha > 0.0) {
        return Err(Error::Config(
            "epsilon must lie in [0, 1] and alpha be positive".into(),
        ));
    }
    let gamma = source.effective_gamma(cfg.gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut table = QTable::new(env.n_actions());
    let mut tracker = MetricsTracker::new(cfg.success_window);
    let mut rewards = Vec::new();
    let mut steps: u64 = 0;
    for _ in 0..cfg.episodes {
        let seed = rng.gen::<u64>();
        let mut obs = env.reset(seed);
        let mut stream = source.start_episode(&obs);
        table.ensure(&obs.state_key, cfg.max_states)?;
        let (mut env_ret, mut shaped_ret, mut len) = (0.0, 0.0, 0usize);
        let mut log = Vec::new();
        while !env.is_done() {
            let action = if rng.gen::<f64>() < cfg.epsilon {
                rng.gen_range(0..env.n_actions())
            } else {
                table.greedy(&obs.state_key, &mut rng)
            };
            let out = env.step(action)?;
            let r = stream.reward(&out, cfg.gamma)?;
            table.ensure(&out.obs.state_key, cfg.max_states)?;
            let terminal = out.done && !out.truncated;
            let target = if terminal {
                r
            } else {
                r + gamma * table.value(&out.obs.state_key)
            };
            let visits = table.visits.get_mut(&obs.state_key).expect("ensured");
            visits[action] += 1;
            let lr = cfg.alpha / (visits[action] as f64).powf(cfg.alpha_decay);
            let q = &mut table.values.get_mut(&obs.state_key).expect("ensured")[action];
            *q += lr.min(1.0) * (target - *q);
            env_ret += out.reward;
            shaped_ret += r;
            len += 1;
            steps += 1;
            if cfg.log_rewards {
                log.push(r);
            }
            obs = out.obs;
        }
        tracker.push(steps, len, env_ret, shaped_ret);
        if cfg.log_rewards {
            rewards.push(log);
        }
    }
    Ok(QOutcome {
        table,
        metrics: tracker.metrics,
        rewards,
    })
}
