//! Offline and online elicitation schedules.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, Annotator, PairQuery};
use crate::dataset::sample_pairs;
use crate::error::{Error, Result};
use crate::types::{now_timestamp, Observation, PreferenceRecord, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElicitationMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElicitationSchedule {
    pub mode: ElicitationMode,
    /// Pairs per batch (M).
    pub batch_size: usize,
    /// Policy-update rounds between refreshes (K); online only.
    #[serde(default)]
    pub refresh_interval: usize,
    /// Observations per window (k).
    #[serde(default = "one")]
    pub window_k: usize,
}

fn one() -> usize {
    1
}

impl ElicitationSchedule {
    pub fn offline(batch_size: usize, window_k: usize) -> Self {
        Self {
            mode: ElicitationMode::Offline,
            batch_size,
            refresh_interval: 0,
            window_k,
        }
    }

    pub fn online(batch_size: usize, refresh_interval: usize, window_k: usize) -> Self {
        Self {
            mode: ElicitationMode::Online,
            batch_size,
            refresh_interval,
            window_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(
                "elicitation batch_size must be positive".into(),
            ));
        }
        if self.window_k == 0 {
            return Err(Error::Config(
                "elicitation window_k must be positive".into(),
            ));
        }
        if self.mode == ElicitationMode::Online && self.refresh_interval == 0 {
            return Err(Error::Config(
                "online elicitation needs refresh_interval > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A trajectory labelled with the policy-update round that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedTrajectory {
    pub round: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardRecord {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub labeled: usize,
    pub discarded: usize,
    /// Production rounds of the trajectories the pairs were drawn from.
    pub source_rounds: Vec<usize>,
}

/// Drives a schedule across policy-update rounds, keeping an append-only dataset.
#[derive(Debug, Clone)]
pub struct Elicitor {
    schedule: ElicitationSchedule,
    seed: u64,
    goal_text: Option<String>,
    hints: Vec<String>,
    records: Vec<PreferenceRecord>,
    discards: Vec<DiscardRecord>,
    last_refresh: Option<usize>,
    refreshes: usize,
}

impl Elicitor {
    pub fn new(schedule: ElicitationSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            schedule,
            seed,
            goal_text: None,
            hints: Vec::new(),
            records: Vec::new(),
            discards: Vec::new(),
            last_refresh: None,
            refreshes: 0,
        })
    }

    pub fn with_goal(mut self, goal_text: impl Into<String>) -> Self {
        self.goal_text = Some(goal_text.into());
        self
    }

    pub fn with_hints(mut self, hints: Vec<String>) -> Self {
        self.hints = hints;
        self
    }

    pub fn schedule(&self) -> &ElicitationSchedule {
        &self.schedule
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn discards(&self) -> &[DiscardRecord] {
        &self.discards
    }

    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// Offline: only the first call. Online: every round divisible by K.
    pub fn is_due(&self, round: usize) -> bool {
        match self.schedule.mode {
            ElicitationMode::Offline => self.last_refresh.is_none(),
            ElicitationMode::Online => {
                round % self.schedule.refresh_interval == 0
                    && self.last_refresh.map_or(true, |r| r < round)
            }
        }
    }

    /// Elicits a batch if one is due at `round`. Online batches only draw
    /// from trajectories produced after the previous refresh.
    pub fn step(
        &mut self,
        round: usize,
        buffer: &[TaggedTrajectory],
        annotator: &mut dyn Annotator,
    ) -> Result<Option<RoundReport>> {
        if !self.is_due(round) {
            return Ok(None);
        }
        let fresh = |t: &&TaggedTrajectory| {
            t.round <= round
                && match (self.schedule.mode, self.last_refresh) {
                    (ElicitationMode::Online, Some(prev)) => t.round > prev,
                    _ => true,
                }
        };
        let eligible: Vec<&TaggedTrajectory> = buffer
            .iter()
            .filter(fresh)
            .filter(|t| !t.trajectory.is_empty())
            .collect();
        if eligible.is_empty() {
            return Err(Error::invalid(format!(
                "no trajectories eligible for elicitation at round {round}"
            )));
        }
        let episodes: Vec<Vec<Observation>> = eligible
            .iter()
            .map(|t| t.trajectory.observations().into_iter().cloned().collect())
            .collect();
        let pair_seed = self.seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let pairs = sample_pairs(
            &episodes,
            self.schedule.batch_size,
            self.schedule.window_k,
            pair_seed,
        )?;
        let round_of = |episode_id: &str| {
            eligible
                .iter()
                .find(|t| t.trajectory.transitions[0].obs.episode_id == episode_id)
                .map(|t| t.round)
        };
        let mut source_rounds = Vec::new();
        let mut labeled = 0;
        let mut discarded = 0;
        let annotator_id = annotator.id();
        for (i, (a, b)) in pairs.into_iter().enumerate() {
            for w in [&a, &b] {
                if let Some(r) = round_of(w.observations()[0].episode_id.as_str()) {
                    source_rounds.push(r);
                }
            }
            let query_id = format!("r{round}-{i:05}");
            let mut query = PairQuery::new(query_id.clone(), a, b)?.with_hints(self.hints.clone());
            if let Some(goal) = &self.goal_text {
                query = query.with_goal(goal.clone());
            }
            match annotator.annotate(&query)? {
                Annotation::Labeled { label, rationale } => {
                    labeled += 1;
                    self.records.push(PreferenceRecord {
                        query_id,
                        window_a: query.window_a,
                        window_b: query.window_b,
                        label,
                        annotator_id: annotator_id.clone(),
                        rationale,
                        created_at: now_timestamp(),
                    });
                }
                Annotation::Discarded { reason } => {
                    discarded += 1;
                    self.discards.push(DiscardRecord { query_id, reason });
                }
            }
        }
        if discarded > 0 {
            log::warn!(
                "round {round}: discarded {discarded} of {} queries",
                labeled + discarded
            );
        }
        source_rounds.sort_unstable();
        source_rounds.dedup();
        self.last_refresh = Some(round);
        self.refreshes += 1;
        Ok(Some(RoundReport {
            round,
            labeled,
            discarded,
            source_rounds,
        }))
    }
}

/// A single elicitation batch over a buffer produced in one round.
pub fn run_elicitation(
    schedule: &ElicitationSchedule,
    buffer: &[Trajectory],
    annotator: &mut dyn Annotator,
    seed: u64,
) -> Result<(Vec<PreferenceRecord>, Vec<DiscardRecord>)> {
    if buffer.is_empty() {
        return Err(Error::invalid(
            "elicitation needs a non-empty trajectory buffer",
        ));
    }
    let tagged: Vec<TaggedTrajectory> = buffer
        .iter()
        .map(|t| TaggedTrajectory {
            round: 0,
            trajectory: t.clone(),
        })
        .collect();
    let mut e = Elicitor::new(schedule.clone(), seed)?;
    e.step(0, &tagged, annotator)?;
    Ok((e.records, e.discards))
}

pub fn write_discard_report(discards: &[DiscardRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for d in discards {
        writeln!(out, "{}", serde_json::to_string(d)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_discard_report(path: &Path) -> Result<Vec<DiscardRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{OracleAnnotator, SequenceOracle};
    use crate::envs::{DoorKeyEnv, Environment, RepeatCorridor};
    use crate::rl::{rollouts, RandomPolicy};

    fn buffer(rounds: std::ops::Range<usize>, per_round: usize) -> Vec<TaggedTrajectory> {
        let mut env = DoorKeyEnv::with_max_steps(30);
        rounds
            .flat_map(|r| {
                rollouts(&mut env, &mut RandomPolicy, per_round, 1000 * r as u64)
                    .unwrap()
                    .into_iter()
                    .map(move |trajectory| TaggedTrajectory {
                        round: r,
                        trajectory,
                    })
            })
            .collect()
    }

    struct Flaky(usize);

    impl Annotator for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn annotate(&mut self, q: &PairQuery) -> Result<Annotation> {
            self.0 += 1;
            if self.0 % 4 == 0 {
                Ok(Annotation::Discarded {
                    reason: "no tag".into(),
                })
            } else {
                OracleAnnotator { epsilon: 0.0 }.annotate(q)
            }
        }
    }

    #[test]
    fn offline_elicits_once() {
        let buf = buffer(0..1, 5);
        let mut e = Elicitor::new(ElicitationSchedule::offline(100, 1), 3).unwrap();
        let mut ann = Flaky(0);
        let r = e.step(0, &buf, &mut ann).unwrap().unwrap();
        assert_eq!(r.labeled + r.discarded, 100);
        assert_eq!(r.discarded, 25);
        assert_eq!(e.records().len(), 75);
        for round in 1..10 {
            assert!(e.step(round, &buf, &mut ann).unwrap().is_none());
        }
        assert_eq!(e.records().len(), 75);
    }

    #[test]
    fn online_refreshes_on_schedule_from_fresh_data() {
        let mut buf = Vec::new();
        let mut e = Elicitor::new(ElicitationSchedule::online(10, 5, 1), 3).unwrap();
        let mut ann = OracleAnnotator { epsilon: 0.0 };
        let mut sizes = Vec::new();
        for round in 0..20 {
            buf.extend(buffer(round..round + 1, 2));
            let before: Vec<PreferenceRecord> = e.records().to_vec();
            if let Some(report) = e.step(round, &buf, &mut ann).unwrap() {
                let prev = round.checked_sub(5);
                assert!(report
                    .source_rounds
                    .iter()
                    .all(|&r| r <= round && prev.map_or(true, |p| r > p)));
                assert!(!report.source_rounds.is_empty());
            }
            assert_eq!(&e.records()[..before.len()], &before[..]);
            sizes.push(e.records().len());
        }
        assert_eq!(e.refreshes(), 4);
        assert!(e.records().len() <= 40);
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn single_batch_and_discard_report() {
        let mut env = RepeatCorridor::new();
        let trajs = rollouts(&mut env, &mut RandomPolicy, 3, 1).unwrap();
        let (records, discards) = run_elicitation(
            &ElicitationSchedule::offline(20, 8),
            &trajs,
            &mut SequenceOracle { epsilon: 0.0 },
            1,
        )
        .unwrap();
        assert_eq!(records.len(), 20);
        assert!(discards.is_empty());
        assert!(records
            .iter()
            .all(|r| r.k() == 8 && r.window_a.env_id() == env.env_id()));
        assert!(run_elicitation(
            &ElicitationSchedule::offline(20, 8),
            &[],
            &mut SequenceOracle { epsilon: 0.0 },
            1
        )
        .is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("discards.jsonl");
        let d = vec![DiscardRecord {
            query_id: "r0-00001".into(),
            reason: "no tag".into(),
        }];
        write_discard_report(&d, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "{\"query_id\":\"r0-00001\",\"reason\":\"no tag\"}\n"
        );
        assert_eq!(read_discard_report(&path).unwrap(), d);
    }

    #[test]
    fn schedule_validation() {
        assert!(ElicitationSchedule::online(10, 0, 1).validate().is_err());
        assert!(ElicitationSchedule::offline(0, 1).validate().is_err());
        assert!(ElicitationSchedule::offline(1, 0).validate().is_err());
    }
}
