use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeMetrics, MetricsTracker, Policy, RewardSource};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::types::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcConfig {
    pub total_steps: u64,
    pub gamma: f64,
    /// Environment steps per update.
    pub n_steps: usize,
    pub gae_lambda: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub rng_seed: u64,
    pub success_window: usize,
    /// Environment step counts at which to snapshot the model.
    pub checkpoint_steps: Vec<u64>,
    /// Random-policy steps used to fit the input normalizer.
    pub norm_sample_steps: usize,
    /// Stop once the trailing success rate over a full window reaches this.
    pub stop_at_success: Option<f64>,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            gamma: 0.99,
            n_steps: 16,
            gae_lambda: 0.95,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 0.01,
            max_grad_norm: 1.0,
            hidden: vec![64, 64],
            rng_seed: 0,
            success_window: 100,
            checkpoint_steps: Vec::new(),
            norm_sample_steps: 2000,
            stop_at_success: None,
        }
    }
}

/// Per-feature affine normalization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("no samples to fit the normalizer"))?;
        let dim = first.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub norm: InputNorm,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl ActorCritic {
    pub fn new(
        input_dim: usize,
        n_actions: usize,
        hidden: &[usize],
        norm: InputNorm,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(n_actions);
        sizes.push(1);
        let mut actor = Mlp::new(&actor_sizes, rng)?;
        // small output layer keeps the initial policy close to uniform
        actor
            .layers
            .last_mut()
            .expect("non-empty")
            .w
            .iter_mut()
            .for_each(|w| *w *= 0.01);
        let critic = Mlp::new(&sizes, rng)?;
        Ok(Self {
            actor,
            critic,
            norm,
        })
    }

    pub fn action_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.actor.forward(&self.norm.apply(features))?))
    }

    pub fn value(&self, features: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(&self.norm.apply(features))?[0])
    }
}

/// Samples from (or, when `greedy`, takes the argmax of) the actor.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub model: ActorCritic,
    pub greedy: bool,
}

impl<E: Environment> Policy<E> for ActorPolicy {
    fn act(&mut self, _env: &E, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<usize> {
        let probs = self.model.action_probs(&obs.features)?;
        if self.greedy {
            let best = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(probs.iter().position(|&p| p == best).unwrap_or(0))
        } else {
            Ok(sample(&probs, rng))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AcCheckpoint {
    pub step: u64,
    pub model: ActorCritic,
}

#[derive(Debug, Clone)]
pub struct AcOutcome {
    pub model: ActorCritic,
    pub metrics: Vec<EpisodeMetrics>,
    pub checkpoints: Vec<AcCheckpoint>,
    pub steps: u64,
}

struct StepRecord {
    x: Vec<f64>,
    action: usize,
    reward: f64,
    value: f64,
    next_value: f64,
    episode_end: bool,
}

fn clip_grad(grad: &mut Mlp, max_norm: f64) {
    let norm = grad.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
}

fn fit_norm<E: Environment>(env: &mut E, steps: usize, rng: &mut ChaCha8Rng) -> Result<InputNorm> {
    if steps == 0 {
        return Ok(InputNorm::identity(env.spec().feature_dim));
    }
    let mut samples = Vec::with_capacity(steps);
    let mut obs = env.reset(rng.gen());
    while samples.len() < steps {
        samples.push(obs.features.clone());
        let a = rng.gen_range(0..env.n_actions());
        let out = env.step(a)?;
        obs = if out.done {
            env.reset(rng.gen())
        } else {
            out.obs
        };
    }
    InputNorm::fit(&samples)
}

/// Advantage actor-critic with generalized advantage estimates, separate
/// Adam optimizers for the two heads, and global-norm gradient clipping.
pub fn actor_critic_train<E: Environment>(
    env: &mut E,
    source: &RewardSource,
    cfg: &AcConfig,
) -> Result<AcOutcome> {
    let mut trainer = AcTrainer::new(env, cfg)?;
    trainer.train_until(env, source, cfg.total_steps)?;
    Ok(trainer.finish())
}

/// Resumable actor-critic state, for training in rounds whose reward
/// source changes between calls.
pub struct AcTrainer {
    cfg: AcConfig,
    rng: ChaCha8Rng,
    model: ActorCritic,
    actor_opt: Adam,
    critic_opt: Adam,
    tracker: MetricsTracker,
    checkpoints: Vec<AcCheckpoint>,
    pending: Vec<u64>,
    steps: u64,
    stopped: bool,
}

impl AcTrainer {
    pub fn new<E: Environment>(env: &mut E, cfg: &AcConfig) -> Result<Self> {
        if cfg.n_steps == 0
            || !(0.0..=1.0).contains(&cfg.gamma)
            || cfg.actor_lr < 0.0
            || cfg.critic_lr < 0.0
        {
            return Err(Error::Config("invalid actor-critic configuration".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let norm = fit_norm(env, cfg.norm_sample_steps, &mut rng)?;
        let model = ActorCritic::new(
            env.spec().feature_dim,
            env.n_actions(),
            &cfg.hidden,
            norm,
            &mut rng,
        )?;
        let adam = |lr| AdamConfig {
            learning_rate: lr,
            ..Default::default()
        };
        let actor_opt = Adam::new(&model.actor, adam(cfg.actor_lr));
        let critic_opt = Adam::new(&model.critic, adam(cfg.critic_lr));
        let mut pending = cfg.checkpoint_steps.clone();
        pending.sort_unstable();
        pending.dedup();
        pending.reverse();
        Ok(Self {
            cfg: cfg.clone(),
            rng,
            model,
            actor_opt,
            critic_opt,
            tracker: MetricsTracker::new(cfg.success_window),
            checkpoints: Vec::new(),
            pending,
            steps: 0,
            stopped: false,
        })
    }

    pub fn model(&self) -> &ActorCritic {
        &self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn metrics(&self) -> &[EpisodeMetrics] {
        &self.tracker.metrics
    }

    /// Whether the success-rate stopping rule has fired.
    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Trains until `until` total environment steps (capped by the
    /// configured budget). Each call starts a fresh episode; an episode cut
    /// off by the previous call's step limit is not logged.
    pub fn train_until<E: Environment>(
        &mut self,
        env: &mut E,
        source: &RewardSource,
        until: u64,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        if self.stopped || self.steps >= until {
            return Ok(());
        }
        let cfg = self.cfg.clone();
        let gamma = source.effective_gamma(cfg.gamma);
        let mut obs = env.reset(self.rng.gen());
        let mut stream = source.start_episode(&obs);
        let (mut env_ret, mut shaped_ret, mut len) = (0.0, 0.0, 0usize);

        'train: while self.steps < until {
            while self.pending.last().is_some_and(|&c| c <= self.steps) {
                self.pending.pop();
                self.checkpoints.push(AcCheckpoint {
                    step: self.steps,
                    model: self.model.clone(),
                });
            }
            let mut segment: Vec<StepRecord> = Vec::with_capacity(cfg.n_steps);
            for _ in 0..cfg.n_steps {
                let x = self.model.norm.apply(&obs.features);
                let probs = softmax(&self.model.actor.forward(&x)?);
                let value = self.model.critic.forward(&x)?[0];
                let action = sample(&probs, &mut self.rng);
                let out = env.step(action)?;
                let r = stream.reward(&out, cfg.gamma)?;
                let terminal = out.done && !out.truncated;
                let next_value = if terminal {
                    0.0
                } else {
                    self.model.value(&out.obs.features)?
                };
                self.steps += 1;
                len += 1;
                env_ret += out.reward;
                shaped_ret += r;
                segment.push(StepRecord {
                    x,
                    action,
                    reward: r,
                    value,
                    next_value,
                    episode_end: out.done,
                });
                if out.done {
                    self.tracker.push(self.steps, len, env_ret, shaped_ret);
                    env_ret = 0.0;
                    shaped_ret = 0.0;
                    len = 0;
                    obs = env.reset(self.rng.gen());
                    stream = source.start_episode(&obs);
                    if let Some(thr) = cfg.stop_at_success {
                        let m = self.tracker.metrics.last().expect("just pushed");
                        if m.episode + 1 >= cfg.success_window && m.success_rate >= thr {
                            self.update(&segment, gamma)?;
                            self.stopped = true;
                            break 'train;
                        }
                    }
                } else {
                    obs = out.obs;
                }
                if self.steps >= until {
                    break;
                }
            }
            self.update(&segment, gamma)?;
        }
        Ok(())
    }

    fn update(&mut self, segment: &[StepRecord], gamma: f64) -> Result<()> {
        update(
            &mut self.model,
            segment,
            gamma,
            &self.cfg,
            &mut self.actor_opt,
            &mut self.critic_opt,
            self.steps,
        )
    }

    pub fn finish(mut self) -> AcOutcome {
        // checkpoints past the end of training hold the final model
        for _ in 0..self.pending.len() {
            self.checkpoints.push(AcCheckpoint {
                step: self.steps,
                model: self.model.clone(),
            });
        }
        AcOutcome {
            model: self.model,
            metrics: self.tracker.metrics,
            checkpoints: self.checkpoints,
            steps: self.steps,
        }
    }
}

fn update(
    model: &mut ActorCritic,
    segment: &[StepRecord],
    gamma: f64,
    cfg: &AcConfig,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    steps: u64,
) -> Result<()> {
    if segment.is_empty() {
        return Ok(());
    }
    let n = segment.len();
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let s = &segment[t];
        let delta = s.reward + gamma * s.next_value - s.value;
        let carry = if s.episode_end { 0.0 } else { gae };
        gae = delta + gamma * cfg.gae_lambda * carry;
        advantages[t] = gae;
    }
    let inv_n = 1.0 / n as f64;
    let mut actor_grad = model.actor.zeros_like();
    let mut critic_grad = model.critic.zeros_like();
    let mut actor_loss = 0.0;
    let mut critic_loss = 0.0;
    for (s, &adv) in segment.iter().zip(&advantages) {
        let ca = model.actor.forward_cached(&s.x)?;
        let probs = softmax(ca.output());
        let entropy: f64 = -probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        actor_loss +=
            (-adv * probs[s.action].max(1e-300).ln() - cfg.entropy_coef * entropy) * inv_n;
        let d_logits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let onehot = if j == s.action { 1.0 } else { 0.0 };
                let log_p = if p > 0.0 { p.ln() } else { 0.0 };
                (-adv * (onehot - p) + cfg.entropy_coef * p * (log_p + entropy)) * inv_n
            })
            .collect();
        model.actor.backward(&ca, &d_logits, &mut actor_grad);

        let cc = model.critic.forward_cached(&s.x)?;
        let target = adv + s.value;
        let err = cc.output()[0] - target;
        critic_loss += 0.5 * err * err * inv_n;
        model.critic.backward(&cc, &[err * inv_n], &mut critic_grad);
    }
    if !actor_loss.is_finite()
        || !critic_loss.is_finite()
        || !actor_grad.is_finite()
        || !critic_grad.is_finite()
    {
        let rewards: Vec<f64> = segment.iter().map(|s| s.reward).collect();
        return Err(Error::Numerical(format!(
            "non-finite actor-critic loss at step {steps}: actor_loss={actor_loss} critic_loss={critic_loss} \
             segment_rewards={rewards:?} advantages={advantages:?}"
        )));
    }
    clip_grad(&mut actor_grad, cfg.max_grad_norm);
    clip_grad(&mut critic_grad, cfg.max_grad_norm);
    actor_opt.step(&mut model.actor, &actor_grad);
    critic_opt.step(&mut model.critic, &critic_grad);
    Ok(())
}
