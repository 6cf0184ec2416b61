//! Direct policy modeling: a chat model picks actions, optionally refining
//! its answer through rounds of self-criticism, and the free-text answer is
//! projected onto the environment's action set.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::llm::{ChatApi, ChatMessage, ChatRequest};
use crate::rl::Policy;
use crate::types::Observation;

pub const MAX_RCI_ROUNDS: usize = 5;
pub const DEFAULT_HISTORY_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentPromptConfig {
    pub template_id: String,
    pub n_icl_examples: usize,
    pub rci_rounds: usize,
    pub include_history: bool,
    pub cot: bool,
    /// Most recent steps shown in the history.
    pub history_len: usize,
    /// Projections farther than this fall back to action 0.
    pub max_projection_distance: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for AgentPromptConfig {
    fn default() -> Self {
        Self {
            template_id: "generic_act".into(),
            n_icl_examples: 0,
            rci_rounds: 0,
            include_history: true,
            cot: true,
            history_len: DEFAULT_HISTORY_LEN,
            max_projection_distance: 3,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl AgentPromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rci_rounds > MAX_RCI_ROUNDS {
            return Err(Error::Config(format!(
                "rci_rounds {} exceeds the limit of {MAX_RCI_ROUNDS}",
                self.rci_rounds
            )));
        }
        if !matches!(self.template_id.as_str(), "generic_act" | "wordle_act") {
            return Err(Error::Config(format!(
                "unknown agent template_id {}",
                self.template_id
            )));
        }
        Ok(())
    }
}

/// An in-context example: a rendered trajectory and the action taken next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclExample {
    pub trajectory: String,
    pub action: String,
}

/// One prompt/response exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub kind: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub episode_id: String,
    pub step_index: u64,
    pub turns: Vec<TranscriptTurn>,
    pub raw_action: String,
    pub action_id: usize,
    pub distance: usize,
    pub projection_failed: bool,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Maps free text onto an action: exact match, then case- and
/// whitespace-normalized match, then minimum Levenshtein distance over the
/// normalized names with ties to the lowest index.
pub fn project_action(raw: &str, action_names: &[String]) -> Result<(usize, usize)> {
    if action_names.is_empty() {
        return Err(Error::invalid("action set is empty"));
    }
    if let Some(i) = action_names.iter().position(|a| a == raw) {
        return Ok((i, 0));
    }
    let norm = normalize(raw);
    let names: Vec<String> = action_names.iter().map(|a| normalize(a)).collect();
    if let Some(i) = names.iter().position(|a| *a == norm) {
        return Ok((i, 0));
    }
    let mut best = (0, usize::MAX);
    for (i, name) in names.iter().enumerate() {
        let d = strsim::levenshtein(&norm, name);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

fn action_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\W*action\W*:\s*(.+?)\s*$").expect("valid regex"))
}

/// The text after the last `Action:` line, or the last non-empty line.
pub fn extract_action(response: &str) -> String {
    if let Some(c) = action_line_re().captures_iter(response).last() {
        return c[1]
            .trim_matches(|ch: char| {
                matches!(ch, '`' | '"' | '\'' | '*' | '.') || ch.is_whitespace()
            })
            .to_string();
    }
    response
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string()
}

/// Everything the prompts need besides the episode history.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub task_description: String,
    pub action_names: Vec<String>,
    pub examples: Vec<IclExample>,
}

/// History entries: observations `o_0..o_t` and the actions between them.
pub fn render_history(observations: &[Observation], actions: &[String], limit: usize) -> String {
    let t = observations.len();
    let start = t.saturating_sub(limit.max(1));
    let mut lines = Vec::new();
    if start > 0 {
        lines.push(format!("({start} earlier steps omitted)"));
    }
    for i in start..t {
        lines.push(format!("observation {i}: {}", observations[i].text_render));
        if let Some(a) = actions.get(i) {
            lines.push(format!("action {i}: {a}"));
        }
    }
    lines.join("\n")
}

fn question(cfg: &AgentPromptConfig) -> &'static str {
    if cfg.cot {
        "Think step-by-step before answering, what should be the current action?"
    } else {
        "What should be the current action?"
    }
}

const ANSWER_FORMAT: &str = "End your answer with a line of the form \"Action: <action>\".";

fn trajectory_text(
    cfg: &AgentPromptConfig,
    observations: &[Observation],
    actions: &[String],
) -> String {
    if cfg.include_history {
        render_history(observations, actions, cfg.history_len)
    } else {
        render_history(observations, actions, 1)
    }
}

fn examples_text(cfg: &AgentPromptConfig, ctx: &AgentContext) -> String {
    let shown = ctx.examples.iter().take(cfg.n_icl_examples);
    let mut out = String::new();
    for (i, ex) in shown.enumerate() {
        out.push_str(&format!(
            "Example {}:\nTrajectory: {}\nAction: {}\n\n",
            i + 1,
            ex.trajectory,
            ex.action
        ));
    }
    if !out.is_empty() {
        out.insert_str(
            0,
            "Here are examples trajectories, containing past observations and actions, together with an appropriate action.\n\n",
        );
    }
    out
}

/// The first prompt of a step.
pub fn base_prompt(
    cfg: &AgentPromptConfig,
    ctx: &AgentContext,
    observations: &[Observation],
    actions: &[String],
) -> String {
    let header = match cfg.template_id.as_str() {
        "wordle_act" => format!(
            "Let's play a game of Wordle. You will have to guess the words and I will give you the colors.\n\n\
             Use the following information for Wordle colors:\n\
             black means that the provided letter is not present anywhere in the hidden word.\n\
             yellow means that the provided letter is present somewhere in the hidden word, but not at the correct position.\n\
             green means that the provided letter is present in the hidden word exactly at the correct position.\n\n\
             You can choose among this list of words: {}\n\n",
            ctx.action_names.join(", ")
        ),
        _ => format!(
            "{}\n\nThe available actions are: {}\n\n",
            ctx.task_description,
            ctx.action_names.join(", ")
        ),
    };
    format!(
        "{header}{}Current trajectory: {}\n{} {ANSWER_FORMAT}",
        examples_text(cfg, ctx),
        trajectory_text(cfg, observations, actions),
        question(cfg)
    )
}

const CRITIQUE_PROMPT: &str =
    "Find problems with this action for the given task compared to the example actions.";

fn refine_prompt(
    cfg: &AgentPromptConfig,
    observations: &[Observation],
    actions: &[String],
) -> String {
    format!(
        "Based on this, what is the action for the agent to make progress on the task?\n\n\
         Current trajectory: {}\n{} {ANSWER_FORMAT}",
        trajectory_text(cfg, observations, actions),
        question(cfg)
    )
}

/// One action decision: a base query plus `rci_rounds` critique/refine
/// pairs, all in one conversation. Exactly `1 + 2 * rci_rounds` calls.
pub fn llm_act(
    observations: &[Observation],
    actions: &[String],
    cfg: &AgentPromptConfig,
    ctx: &AgentContext,
    client: &dyn ChatApi,
) -> Result<(usize, Transcript)> {
    cfg.validate()?;
    let current = observations
        .last()
        .ok_or_else(|| Error::invalid("llm_act needs at least the current observation"))?;
    let mut messages = Vec::new();
    let mut turns = Vec::new();
    let mut ask = |kind: &str, prompt: String, messages: &mut Vec<ChatMessage>| -> Result<String> {
        messages.push(ChatMessage::user(prompt.clone()));
        let mut req = ChatRequest::new(client.chat_model(), messages.clone());
        req.temperature = cfg.temperature;
        req.max_tokens = cfg.max_tokens;
        let response = client.chat(&req)?.content;
        messages.push(ChatMessage::assistant(response.clone()));
        turns.push(TranscriptTurn {
            kind: kind.to_string(),
            prompt,
            response: response.clone(),
        });
        Ok(response)
    };
    let mut answer = ask(
        "act",
        base_prompt(cfg, ctx, observations, actions),
        &mut messages,
    )?;
    for _ in 0..cfg.rci_rounds {
        ask("critique", CRITIQUE_PROMPT.to_string(), &mut messages)?;
        answer = ask(
            "refine",
            refine_prompt(cfg, observations, actions),
            &mut messages,
        )?;
    }
    let raw_action = extract_action(&answer);
    let (mut action_id, distance) = project_action(&raw_action, &ctx.action_names)?;
    let projection_failed = distance > cfg.max_projection_distance;
    if projection_failed {
        log::warn!(
            "projection of {raw_action:?} is {distance} edits from {:?}; falling back to action 0",
            ctx.action_names[action_id]
        );
        action_id = 0;
    }
    Ok((
        action_id,
        Transcript {
            episode_id: current.episode_id.clone(),
            step_index: current.step_index,
            turns,
            raw_action,
            action_id,
            distance,
            projection_failed,
        },
    ))
}

/// A chat-model policy. Keeps the episode history itself; a step index of
/// zero starts a new episode.
pub struct LlmAgent {
    client: Arc<dyn ChatApi>,
    pub config: AgentPromptConfig,
    pub context: AgentContext,
    observations: Vec<Observation>,
    actions: Vec<String>,
    pub transcripts: Vec<Transcript>,
}

impl LlmAgent {
    pub fn new(
        client: Arc<dyn ChatApi>,
        config: AgentPromptConfig,
        context: AgentContext,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            client,
            config,
            context,
            observations: Vec::new(),
            actions: Vec::new(),
            transcripts: Vec::new(),
        })
    }

    pub fn for_env<E: Environment>(
        client: Arc<dyn ChatApi>,
        config: AgentPromptConfig,
        env: &E,
    ) -> Result<Self> {
        let context = AgentContext {
            task_description: crate::envs::task_description(env.env_id()).to_string(),
            action_names: env.spec().action_names.clone(),
            examples: Vec::new(),
        };
        Self::new(client, config, context)
    }
}

impl<E: Environment> Policy<E> for LlmAgent {
    fn act(&mut self, _env: &E, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<usize> {
        let continues = self
            .observations
            .last()
            .is_some_and(|o| o.episode_id == obs.episode_id && o.step_index + 1 == obs.step_index);
        if !continues {
            self.observations.clear();
            self.actions.clear();
        }
        self.observations.push(obs.clone());
        let (a, transcript) = llm_act(
            &self.observations,
            &self.actions,
            &self.config,
            &self.context,
            self.client.as_ref(),
        )?;
        self.actions.push(self.context.action_names[a].clone());
        self.transcripts.push(transcript);
        Ok(a)
    }
}

pub fn write_transcripts_jsonl(transcripts: &[Transcript], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for t in transcripts {
        writeln!(out, "{}", serde_json::to_string(t)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::doorkey::{DoorKeyEnv, FORWARD};
    use crate::llm::stub::ScriptedChat;
    use crate::rl::rollouts;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn projection_examples() {
        let doorkey = names(&crate::envs::doorkey::ACTIONS);
        assert_eq!(project_action("forward", &doorkey).unwrap(), (FORWARD, 0));
        assert_eq!(
            project_action("Click Tab 2", &names(&["click tab 1", "click tab 2"])).unwrap(),
            (1, 0)
        );
        assert_eq!(
            project_action("move nroth", &names(&["move north", "move south"])).unwrap(),
            (0, 2)
        );
        // ties go to the lowest index
        assert_eq!(project_action("ab", &names(&["aa", "bb"])).unwrap(), (0, 1));
        assert_eq!(
            project_action("  MOVE   north ", &names(&["move south", "move north"])).unwrap(),
            (1, 0)
        );
        assert!(project_action("x", &[]).is_err());
    }

    #[test]
    fn action_extraction() {
        assert_eq!(extract_action("I think...\nAction: forward"), "forward");
        assert_eq!(
            extract_action("Action: left\nhmm\n**Action:** `toggle`."),
            "toggle"
        );
        assert_eq!(extract_action("turn-left\n\n"), "turn-left");
    }

    fn obs_history() -> Vec<Observation> {
        let mut env = DoorKeyEnv::new();
        let t = rollouts(&mut env, &mut crate::rl::RandomPolicy, 1, 2)
            .unwrap()
            .remove(0);
        t.observations().into_iter().take(30).cloned().collect()
    }

    fn ctx() -> AgentContext {
        AgentContext {
            task_description: "Reach the goal.".into(),
            action_names: names(&crate::envs::doorkey::ACTIONS),
            examples: vec![IclExample {
                trajectory: "t".into(),
                action: "forward".into(),
            }],
        }
    }

    #[test]
    fn call_budget_per_step() {
        let obs = obs_history();
        for rounds in 0..=3 {
            let chat = ScriptedChat::constant("Action: forward");
            let cfg = AgentPromptConfig {
                rci_rounds: rounds,
                ..Default::default()
            };
            let (a, tr) = llm_act(&obs[..1], &[], &cfg, &ctx(), &chat).unwrap();
            assert_eq!(a, FORWARD);
            assert_eq!(tr.distance, 0);
            assert_eq!(chat.chat_calls(), 1 + 2 * rounds);
            assert_eq!(tr.turns.len(), 1 + 2 * rounds);
        }
        let cfg = AgentPromptConfig {
            rci_rounds: 6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn refined_answer_wins() {
        let chat = ScriptedChat::sequence(names(&[
            "Action: pickup",
            "the plan is wrong",
            "Action: toggle",
        ]));
        let cfg = AgentPromptConfig {
            rci_rounds: 1,
            ..Default::default()
        };
        let (a, tr) = llm_act(&obs_history()[..1], &[], &cfg, &ctx(), &chat).unwrap();
        assert_eq!(a, crate::envs::doorkey::TOGGLE);
        assert_eq!(tr.turns[1].prompt, CRITIQUE_PROMPT);
        let last = chat.requests().pop().unwrap();
        assert_eq!(last.messages.len(), 5);
    }

    #[test]
    fn bad_projection_falls_back() {
        let chat = ScriptedChat::constant("Action: jump over the wall");
        let cfg = AgentPromptConfig::default();
        let (a, tr) = llm_act(&obs_history()[..1], &[], &cfg, &ctx(), &chat).unwrap();
        assert_eq!(a, 0);
        assert!(tr.projection_failed);
    }

    #[test]
    fn history_is_truncated() {
        let obs = obs_history();
        assert!(obs.len() >= 25);
        let acts: Vec<String> = (0..obs.len() - 1).map(|i| format!("a{i}")).collect();
        let text = render_history(&obs, &acts, 20);
        assert_eq!(text.matches("observation ").count(), 20);
        assert!(text.starts_with(&format!("({} earlier steps omitted)", obs.len() - 20)));
        let cfg = AgentPromptConfig {
            n_icl_examples: 1,
            ..Default::default()
        };
        let p = base_prompt(&cfg, &ctx(), &obs, &acts);
        assert!(p.contains("Example 1:\nTrajectory: t\nAction: forward"));
        let cfg = AgentPromptConfig {
            include_history: false,
            cot: false,
            ..Default::default()
        };
        let p = base_prompt(&cfg, &ctx(), &obs, &acts);
        assert_eq!(p.matches("observation ").count(), 1);
        assert!(p.contains("What should be the current action?"));
        assert!(!p.contains("Example 1"));
    }

    #[test]
    fn agent_policy_tracks_episode() {
        let chat = Arc::new(ScriptedChat::constant("Action: turn-left"));
        let mut env = DoorKeyEnv::with_max_steps(5);
        let mut agent =
            LlmAgent::for_env(chat.clone(), AgentPromptConfig::default(), &env).unwrap();
        let trajs = rollouts(&mut env, &mut agent, 2, 0).unwrap();
        assert_eq!(trajs.len(), 2);
        assert_eq!(agent.transcripts.len(), 10);
        assert_eq!(chat.chat_calls(), 10);
        // second step of an episode shows the first action in its history
        let p = &chat.requests()[1].messages[0].content;
        assert!(p.contains("action 0: turn-left"));
        let p = &chat.requests()[5].messages[0].content;
        assert!(!p.contains("action 0:"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_transcripts_jsonl(&agent.transcripts, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 10);
    }
}
