//! Exact solvers for [`TabularMdp`]. Terminal states have value 0.

use crate::envs::tabular::TabularMdp;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 1_000_000;

/// Relative slack under which two action values count as tied.
const TIE_EPS: f64 = 1e-12;

/// Stochastic policy `probs[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Vec::with_capacity(actions.len());
        for &a in actions {
            if a >= n_actions {
                return Err(Error::invalid(format!("action {a} out of range")));
            }
            let mut row = vec![0.0; n_actions];
            row[a] = 1.0;
            probs.push(row);
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states || self.probs.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(Error::invalid("policy shape does not match the MDP"));
        }
        for (s, row) in self.probs.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "policy row {s} is not a distribution"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub sweeps: usize,
}

/// Q(s, a) = R(s, a) + gamma * E[V(s')].
pub fn q_value(mdp: &TabularMdp, values: &[f64], s: usize, a: usize) -> f64 {
    mdp.reward[s][a] + mdp.gamma * mdp.expect(s, a, values)
}

/// Greedy policy; ties go to the lowest action index.
pub fn greedy_policy(mdp: &TabularMdp, values: &[f64]) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            if mdp.terminal[s] {
                return 0;
            }
            let q: Vec<f64> = (0..mdp.n_actions)
                .map(|a| q_value(mdp, values, s, a))
                .collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let slack = TIE_EPS * best.abs().max(1.0);
            q.iter().position(|&v| v >= best - slack).unwrap_or(0)
        })
        .collect()
}

/// Iterates the Bellman optimality operator until the sup-norm residual
/// drops below `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<Solution> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut v = vec![0.0; mdp.n_states];
    for sweep in 1..=MAX_SWEEPS {
        let mut next = vec![0.0; mdp.n_states];
        let mut residual: f64 = 0.0;
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            next[s] = (0..mdp.n_actions)
                .map(|a| q_value(mdp, &v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual < tol {
            return Ok(Solution {
                policy: greedy_policy(mdp, &v),
                values: v,
                sweeps: sweep,
            });
        }
    }
    Err(Error::Numerical("value iteration did not converge".into()))
}

/// Iterative evaluation of a stochastic policy to sup-norm residual `tol`.
pub fn policy_evaluation_exact(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    tol: f64,
) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    policy.check(mdp)?;
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..MAX_SWEEPS {
        let mut next = vec![0.0; mdp.n_states];
        let mut residual: f64 = 0.0;
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            next[s] = policy.probs[s]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(a, &p)| p * q_value(mdp, &v, s, a))
                .sum();
            residual = residual.max((next[s] - v[s]).abs());
        }
        v = next;
        if residual < tol {
            return Ok(v);
        }
    }
    Err(Error::Numerical(
        "policy evaluation did not converge".into(),
    ))
}

/// Normalized discounted state occupancy of `policy` started from `d0`:
/// proportional to sum_t gamma^t Pr(s_t = s), with episodes stopping at
/// terminal states.
pub fn discounted_occupancy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    d0: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    policy.check(mdp)?;
    if d0.len() != mdp.n_states {
        return Err(Error::DimensionMismatch {
            expected: mdp.n_states,
            got: d0.len(),
        });
    }
    let mut occ = d0.to_vec();
    let mut frontier = d0.to_vec();
    for _ in 0..MAX_SWEEPS {
        let mut next = vec![0.0; mdp.n_states];
        for s in 0..mdp.n_states {
            if frontier[s] == 0.0 || mdp.terminal[s] {
                continue;
            }
            for (a, &pa) in policy.probs[s].iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                    next[s2] += mdp.gamma * frontier[s] * pa * p;
                }
            }
        }
        let mass: f64 = next.iter().sum();
        for (o, n) in occ.iter_mut().zip(&next) {
            *o += n;
        }
        frontier = next;
        if mass < tol {
            let total: f64 = occ.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid("initial distribution has no mass"));
            }
            return Ok(occ.into_iter().map(|o| o / total).collect());
        }
    }
    Err(Error::Numerical("occupancy did not converge".into()))
}
