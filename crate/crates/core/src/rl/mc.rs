use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Policy;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::eval::{mean, stderr};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub rollouts: usize,
}

/// Mean discounted environment return of `policy` from each snapshot.
///
/// Each rollout starts from a clone of the snapshot whose hidden quantities
/// are redrawn (`resample_hidden`), so partially observed states are
/// averaged over everything consistent with what the agent has seen.
pub fn mc_value_estimate<E: Environment, P: Policy<E>>(
    states: &[E],
    policy: &mut P,
    rollouts_per_state: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    if rollouts_per_state == 0 {
        return Err(Error::invalid("need at least one rollout per state"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(states.len());
    for start in states {
        let mut returns = Vec::with_capacity(rollouts_per_state);
        for _ in 0..rollouts_per_state {
            let mut env = start.clone();
            env.resample_hidden(&mut rng);
            let mut obs = env.observe();
            let mut ret = 0.0;
            let mut discount = 1.0;
            while !env.is_done() {
                let action = policy.act(&env, &obs, &mut rng)?;
                let step = env.step(action)?;
                ret += discount * step.reward;
                discount *= gamma;
                obs = step.obs;
            }
            returns.push(ret);
        }
        out.push(McEstimate {
            value: mean(&returns),
            stderr: stderr(&returns),
            rollouts: rollouts_per_state,
        });
    }
    Ok(out)
}
