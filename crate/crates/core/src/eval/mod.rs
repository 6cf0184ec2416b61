//! Correlation statistics and reward-analysis experiments.

mod analysis;
mod stats;

pub use analysis::{
    collect_probe_states, correlation_vs_training_stage, episode_reward_trace,
    write_correlation_csv, write_trace_csv, CorrelationRow, RewardTrace,
};
pub use stats::{fractional_ranks, mean, median, pearson, spearman, stderr};
