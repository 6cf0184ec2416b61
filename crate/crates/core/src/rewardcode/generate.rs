use serde::Serialize;

use super::{parse_reward_expr, FeatureEnvMap, RewardExpr};
use crate::error::{Error, Result};
use crate::eval::spearman;
use crate::llm::{ChatApi, ChatMessage, ChatRequest};

pub const REWARD_CODE_TEMPLATE: &str = "\
I will present you with the symbolic features of an environment.

{task_description}

{knowledge}
Write an analysis describing the semantics of the features strictly using information from the descriptions.
Finally, write a code that, when executed, will help make progress towards the goal.
The code must be a single arithmetic expression over the features below. It may use numbers,
+ - * /, comparisons < <= > >= == (which evaluate to 1 or 0), and the functions
min(a, b), max(a, b), abs(a), clip(x, lo, hi), if(cond, a, b). Put the expression alone
inside a ``` code block.

features: {features}
";

#[derive(Debug, Clone, PartialEq)]
pub struct RewardCodeRequest {
    pub task_description: String,
    /// Free-text domain knowledge block, may be empty.
    pub knowledge: String,
    pub n_candidates: usize,
    pub temperature: f64,
}

impl RewardCodeRequest {
    pub fn new(task_description: impl Into<String>, n_candidates: usize) -> Self {
        Self {
            task_description: task_description.into(),
            knowledge: String::new(),
            n_candidates,
            temperature: 0.7,
        }
    }

    pub fn render(&self, features: &FeatureEnvMap, candidate: usize) -> String {
        let mut prompt = REWARD_CODE_TEMPLATE
            .replace("{task_description}", &self.task_description)
            .replace("{knowledge}", &self.knowledge)
            .replace("{features}", &features.names().join(", "));
        if self.n_candidates > 1 {
            prompt.push_str(&format!(
                "candidate: {} of {}\n",
                candidate + 1,
                self.n_candidates
            ));
        }
        prompt
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateOutcome {
    pub index: usize,
    pub raw_response: String,
    pub expression: Option<String>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub best: RewardExpr,
    pub best_index: usize,
    pub best_score: f64,
    pub parse_failures: usize,
    pub candidates: Vec<CandidateOutcome>,
}

/// Candidate expression strings in a response, most preferred first:
/// fenced code blocks (last block first), then single lines from the end.
pub fn extract_candidates(response: &str) -> Vec<String> {
    let mut out = Vec::new();
    let parts: Vec<&str> = response.split("```").collect();
    let mut blocks = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        if i % 2 == 1 && i + 1 < parts.len() {
            let mut body = *part;
            if let Some(first_line_end) = body.find('\n') {
                let tag = body[..first_line_end].trim();
                if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric()) {
                    body = &body[first_line_end + 1..];
                }
            }
            blocks.push(body.trim().to_string());
        }
    }
    for block in blocks.iter().rev() {
        out.push(block.replace('\n', " "));
    }
    for line in response.lines().rev() {
        let mut line = line.trim();
        for prefix in ["reward =", "reward:", "expression:", "r ="] {
            if let Some(rest) = line.strip_prefix(prefix) {
                line = rest.trim();
            }
        }
        let line = line.trim_matches('`').trim();
        if !line.is_empty() {
            out.push(line.to_string());
        }
    }
    out.dedup();
    out
}

/// Requests `n_candidates` expressions, keeps the parsable ones, and returns
/// the one whose outputs on `probe` (feature vector, progress) have the
/// highest Spearman correlation with progress.
pub fn generate_reward_code(
    request: &RewardCodeRequest,
    features: &FeatureEnvMap,
    client: &dyn ChatApi,
    probe: &[(Vec<f64>, f64)],
) -> Result<GenerationReport> {
    if request.n_candidates == 0 {
        return Err(Error::invalid("n_candidates must be positive"));
    }
    let progress: Vec<f64> = probe.iter().map(|(_, p)| *p).collect();
    let mut candidates = Vec::with_capacity(request.n_candidates);
    let mut parsed: Vec<(usize, RewardExpr, f64)> = Vec::new();
    for i in 0..request.n_candidates {
        let mut chat = ChatRequest::new(
            client.chat_model(),
            vec![ChatMessage::user(request.render(features, i))],
        );
        chat.temperature = request.temperature;
        let raw = client.chat(&chat)?.content;
        let mut outcome = CandidateOutcome {
            index: i,
            raw_response: raw.clone(),
            expression: None,
            score: None,
            error: None,
        };
        let mut first_error = None;
        let expr = extract_candidates(&raw).into_iter().find_map(|src| {
            match parse_reward_expr(&src, features) {
                Ok(e) => Some(e),
                Err(e) => {
                    first_error.get_or_insert(e.to_string());
                    None
                }
            }
        });
        match expr {
            Some(expr) => {
                let outputs: Vec<f64> = probe
                    .iter()
                    .map(|(x, _)| expr.eval_features(x).value)
                    .collect();
                // constant outputs carry no ranking information
                let score = spearman(&outputs, &progress).unwrap_or(f64::NEG_INFINITY);
                outcome.expression = Some(expr.to_source());
                outcome.score = score.is_finite().then_some(score);
                parsed.push((i, expr, score));
            }
            None => {
                outcome.error = Some(first_error.unwrap_or_else(|| "no expression found".into()));
            }
        }
        candidates.push(outcome);
    }
    let parse_failures = candidates.iter().filter(|c| c.expression.is_none()).count();
    let mut best: Option<(usize, RewardExpr, f64)> = None;
    for cand in parsed {
        if best.as_ref().is_none_or(|b| cand.2 > b.2) {
            best = Some(cand);
        }
    }
    match best {
        Some((best_index, best, best_score)) => Ok(GenerationReport {
            best,
            best_index,
            best_score,
            parse_failures,
            candidates,
        }),
        None => Err(Error::NoValidCandidate {
            raw_responses: candidates.into_iter().map(|c| c.raw_response).collect(),
        }),
    }
}
