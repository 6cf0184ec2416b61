//! Reward transformations: episodic count-based exploration and
//! heuristic-guided reshaping of tabular MDPs.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use crate::envs::tabular::TabularMdp;
use crate::error::{Error, Result};
use crate::rl::tabular::{
    discounted_occupancy, policy_evaluation_exact, value_iteration, TabularPolicy,
};

/// Visit counts per state key within the live episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodicCountTable {
    counts: HashMap<String, u64>,
}

impl EpisodicCountTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Increments and returns the count for `key`.
    pub fn visit(&mut self, key: &str) -> u64 {
        let c = self.counts.entry(key.to_string()).or_insert(0);
        *c += 1;
        *c
    }

    pub fn count(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

/// r / N^beta with N the post-increment visit count.
pub fn count_transform(
    r_aif: f64,
    state_key: &str,
    table: &mut EpisodicCountTable,
    beta: f64,
) -> f64 {
    let n = table.visit(state_key);
    r_aif / (n as f64).powf(beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HurlConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Heuristic value per state.
    pub heuristic: Vec<f64>,
}

impl HurlConfig {
    pub fn new(lambda: f64, gamma: f64, heuristic: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(Self {
            lambda,
            gamma,
            heuristic,
        })
    }

    pub fn for_mdp(mdp: &TabularMdp, lambda: f64, heuristic: Vec<f64>) -> Result<Self> {
        Self::new(lambda, mdp.gamma, heuristic)
    }

    pub fn reshaped_gamma(&self) -> f64 {
        self.lambda * self.gamma
    }

    /// Per-transition bonus (1 - lambda) * gamma * h(s').
    pub fn bonus(&self, h_next: f64) -> f64 {
        (1.0 - self.lambda) * self.gamma * h_next
    }
}

/// r~(s,a) = r(s,a) + (1 - lambda) gamma E[h(s')], gamma~ = lambda gamma.
pub fn reshape_mdp(mdp: &TabularMdp, cfg: &HurlConfig) -> Result<TabularMdp> {
    if cfg.heuristic.len() != mdp.n_states {
        return Err(Error::DimensionMismatch {
            expected: mdp.n_states,
            got: cfg.heuristic.len(),
        });
    }
    let mut out = mdp.clone();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            out.reward[s][a] = mdp.reward[s][a] + cfg.bonus(mdp.expect(s, a, &cfg.heuristic));
        }
    }
    out.gamma = cfg.reshaped_gamma();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HurlTerms {
    pub lambda: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

pub const SOLVER_TOL: f64 = 1e-12;

/// Raw terms of the reshaped-MDP regret bound:
/// term1 = E_{d0}[V~*(s) - V~pi(s)], term2 = E_{Dpi}[V~*(s) - V~pi(s)],
/// term3 = E_{Dpi}[h(s') - V~*(s')], where Dpi is the normalized discounted
/// occupancy of pi in the original MDP and s' its successor under pi.
pub fn hurl_regret_decomposition(
    mdp: &TabularMdp,
    cfg: &HurlConfig,
    policy: &TabularPolicy,
    d0: &[f64],
) -> Result<HurlTerms> {
    let reshaped = reshape_mdp(mdp, cfg)?;
    let v_star = value_iteration(&reshaped, SOLVER_TOL)?.values;
    let v_pi = policy_evaluation_exact(&reshaped, policy, SOLVER_TOL)?;
    let occ = discounted_occupancy(mdp, policy, d0, SOLVER_TOL)?;
    let gap: Vec<f64> = v_star.iter().zip(&v_pi).map(|(a, b)| a - b).collect();
    let dot = |w: &[f64], f: &[f64]| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let residual: Vec<f64> = cfg
        .heuristic
        .iter()
        .zip(&v_star)
        .map(|(h, v)| h - v)
        .collect();
    let mut term3 = 0.0;
    for s in 0..mdp.n_states {
        if occ[s] == 0.0 {
            continue;
        }
        let next: f64 = policy.probs[s]
            .iter()
            .enumerate()
            .map(|(a, &p)| p * mdp.expect(s, a, &residual))
            .sum();
        term3 += occ[s] * next;
    }
    Ok(HurlTerms {
        lambda: cfg.lambda,
        term1: dot(d0, &gap),
        term2: dot(&occ, &gap),
        term3,
    })
}

pub fn write_decomposition_csv(rows: &[HurlTerms], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
