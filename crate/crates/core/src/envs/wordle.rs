//! Wordle over a fixed 200-word list, and the Eldrow variant whose
//! displayed colors swap green and black.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_step, EnvEvent, EnvSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::types::{state_key, Observation};

pub const WORD_LEN: usize = 5;
pub const MAX_GUESSES: usize = 6;

const BUNDLED_WORDS: &str = include_str!("../../data/words.txt");

type Word = [u8; WORD_LEN];

/// Parses a word list: one lowercase 5-letter word per line.
pub fn parse_word_list(text: &str) -> Result<Vec<String>> {
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let w = line.trim();
        if w.is_empty() {
            continue;
        }
        if w.len() != WORD_LEN || !w.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::invalid(format!(
                "word list line {}: {w:?} is not a lowercase 5-letter word",
                i + 1
            )));
        }
        words.push(w.to_string());
    }
    Ok(words)
}

pub fn bundled_words() -> Arc<Vec<String>> {
    static WORDS: OnceLock<Arc<Vec<String>>> = OnceLock::new();
    WORDS
        .get_or_init(|| {
            Arc::new(parse_word_list(BUNDLED_WORDS).expect("bundled word list is valid"))
        })
        .clone()
}

fn to_word(s: &str) -> Result<Word> {
    let bytes = s.as_bytes();
    if bytes.len() != WORD_LEN {
        return Err(Error::invalid(format!("{s:?} is not a 5-letter word")));
    }
    let mut w = [0u8; WORD_LEN];
    w.copy_from_slice(bytes);
    Ok(w)
}

/// Two-pass coloring: greens first, then yellows while unmatched copies of
/// the letter remain in the hidden word.
fn feedback_bytes(guess: &Word, hidden: &Word) -> [u8; WORD_LEN] {
    let mut colors = [b'B'; WORD_LEN];
    let mut remaining = [0u8; 26];
    for i in 0..WORD_LEN {
        if guess[i] == hidden[i] {
            colors[i] = b'G';
        } else {
            remaining[(hidden[i] - b'a') as usize] += 1;
        }
    }
    for i in 0..WORD_LEN {
        if colors[i] == b'G' {
            continue;
        }
        let slot = &mut remaining[(guess[i] - b'a') as usize];
        if *slot > 0 {
            *slot -= 1;
            colors[i] = b'Y';
        }
    }
    colors
}

fn feedback_code(guess: &Word, hidden: &Word) -> u8 {
    feedback_bytes(guess, hidden).iter().fold(0u8, |acc, c| {
        acc * 3
            + match c {
                b'G' => 2,
                b'Y' => 1,
                _ => 0,
            }
    })
}

pub fn wordle_feedback(guess: &str, hidden: &str) -> Result<String> {
    let g = to_word(guess)?;
    let h = to_word(hidden)?;
    Ok(String::from_utf8(feedback_bytes(&g, &h).to_vec()).expect("ascii"))
}

/// Swaps G and B, leaving Y unchanged.
pub fn swap_green_black(colors: &str) -> String {
    colors
        .chars()
        .map(|c| match c {
            'G' => 'B',
            'B' => 'G',
            other => other,
        })
        .collect()
}

pub fn eldrow_feedback(guess: &str, hidden: &str) -> Result<String> {
    Ok(swap_green_black(&wordle_feedback(guess, hidden)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordleVariant {
    Wordle,
    Eldrow,
}

/// Full logical game state. Colors are stored in standard Wordle semantics
/// regardless of variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordleState {
    pub hidden_word: String,
    pub guesses: Vec<(String, String)>,
}

impl WordleState {
    pub fn turn(&self) -> usize {
        self.guesses.len()
    }

    pub fn solved(&self) -> bool {
        self.guesses
            .last()
            .map(|(_, c)| c == "GGGGG")
            .unwrap_or(false)
    }

    pub fn is_over(&self) -> bool {
        self.solved() || self.turn() >= MAX_GUESSES
    }
}

/// Words consistent with every (guess, colors) pair in the history.
pub fn consistent_words<'a>(history: &[(String, String)], words: &'a [String]) -> Vec<&'a String> {
    let parsed: Vec<(Word, Vec<u8>)> = history
        .iter()
        .filter_map(|(g, c)| to_word(g).ok().map(|w| (w, c.as_bytes().to_vec())))
        .collect();
    words
        .iter()
        .filter(|w| {
            let Ok(cand) = to_word(w) else { return false };
            parsed
                .iter()
                .all(|(g, c)| feedback_bytes(g, &cand)[..] == c[..])
        })
        .collect()
}

/// Greedy one-step partition policy: among consistent words, pick the guess
/// minimizing the expected size of the remaining consistent set, ties broken
/// lexicographically.
pub fn near_optimal_wordle_policy(state: &WordleState, words: &[String]) -> Result<String> {
    if state.is_over() {
        return Err(Error::invalid("game is already over"));
    }
    let candidates = consistent_words(&state.guesses, words);
    if candidates.is_empty() {
        return Err(Error::invalid(
            "no consistent word remains; feedback is inconsistent",
        ));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0].clone());
    }
    let cand_words: Vec<Word> = candidates
        .iter()
        .map(|w| to_word(w).expect("validated"))
        .collect();
    let mut best: Option<(u64, &String)> = None;
    let mut buckets = [0u32; 243];
    for (gi, guess) in cand_words.iter().enumerate() {
        buckets.iter_mut().for_each(|b| *b = 0);
        for hidden in &cand_words {
            buckets[feedback_code(guess, hidden) as usize] += 1;
        }
        // sum of squared bucket sizes is |C| times the expected remaining size
        let score: u64 = buckets.iter().map(|&b| (b as u64) * (b as u64)).sum();
        let word = candidates[gi];
        let better = match best {
            None => true,
            Some((s, w)) => score < s || (score == s && word < w),
        };
        if better {
            best = Some((score, word));
        }
    }
    Ok(best.expect("non-empty candidates").1.clone())
}

#[derive(Debug, Clone)]
pub struct WordleEnv {
    spec: EnvSpec,
    variant: WordleVariant,
    words: Arc<Vec<String>>,
    state: WordleState,
    episode_id: String,
}

pub const WORDLE_FEATURES: [&str; 8] = [
    "turn",
    "log_candidates",
    "green_positions",
    "yellow_letters",
    "absent_letters",
    "solved",
    "inv_candidates",
    "single_candidate",
];

impl WordleEnv {
    pub fn new(variant: WordleVariant) -> Self {
        Self::with_words(variant, bundled_words()).expect("bundled word list is valid")
    }

    pub fn with_words(variant: WordleVariant, words: Arc<Vec<String>>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::invalid("word list is empty"));
        }
        let env_id = match variant {
            WordleVariant::Wordle => "wordle",
            WordleVariant::Eldrow => "eldrow",
        };
        let spec = EnvSpec::new(env_id, words.to_vec(), WORDLE_FEATURES.len(), MAX_GUESSES)?;
        let hidden_word = words[0].clone();
        Ok(Self {
            spec,
            variant,
            words,
            state: WordleState {
                hidden_word,
                guesses: Vec::new(),
            },
            episode_id: format!("{env_id}-s0"),
        })
    }

    pub fn words(&self) -> &Arc<Vec<String>> {
        &self.words
    }

    pub fn state(&self) -> &WordleState {
        &self.state
    }

    pub fn variant(&self) -> WordleVariant {
        self.variant
    }

    /// Places the game at an explicit state (hidden word plus history).
    pub fn set_state(&mut self, state: WordleState) -> Result<()> {
        if !self.words.contains(&state.hidden_word) {
            return Err(Error::invalid(format!(
                "{} not in word list",
                state.hidden_word
            )));
        }
        for (g, c) in &state.guesses {
            if !self.words.contains(g) {
                return Err(Error::invalid(format!("guess {g} not in word list")));
            }
            if wordle_feedback(g, &state.hidden_word)? != *c {
                return Err(Error::invalid(format!(
                    "colors for {g} disagree with hidden word"
                )));
            }
        }
        if state.guesses.len() > MAX_GUESSES {
            return Err(Error::invalid("more than six guesses"));
        }
        self.state = state;
        Ok(())
    }

    pub fn action_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    fn displayed(&self, colors: &str) -> String {
        match self.variant {
            WordleVariant::Wordle => colors.to_string(),
            WordleVariant::Eldrow => swap_green_black(colors),
        }
    }

    fn render(&self) -> String {
        let name = match self.variant {
            WordleVariant::Wordle => "Wordle",
            WordleVariant::Eldrow => "Eldrow",
        };
        if self.state.guesses.is_empty() {
            return format!("{name}: no guesses yet, {MAX_GUESSES} guesses remaining.");
        }
        let mut lines = vec![format!(
            "{name}: {} of {MAX_GUESSES} guesses used.",
            self.state.turn()
        )];
        for (i, (g, c)) in self.state.guesses.iter().enumerate() {
            let shown = self.displayed(c);
            let named: Vec<String> = g
                .chars()
                .zip(shown.chars())
                .map(|(l, col)| {
                    let color = match col {
                        'G' => "green",
                        'Y' => "yellow",
                        _ => "black",
                    };
                    format!("{l} {color}")
                })
                .collect();
            lines.push(format!(
                "guess {}: {g} -> {shown} ({})",
                i + 1,
                named.join(", ")
            ));
        }
        lines.join("\n")
    }

    fn features(&self) -> Vec<f64> {
        let n_total = self.words.len().max(2) as f64;
        let n = consistent_words(&self.state.guesses, &self.words)
            .len()
            .max(1) as f64;
        let mut green = [false; WORD_LEN];
        let mut present = [false; 26];
        let mut absent = [false; 26];
        for (g, c) in &self.state.guesses {
            for (i, (l, col)) in g.bytes().zip(c.bytes()).enumerate() {
                let li = (l - b'a') as usize;
                match col {
                    b'G' => {
                        green[i] = true;
                        present[li] = true;
                    }
                    b'Y' => present[li] = true,
                    _ => absent[li] = true,
                }
            }
        }
        // a letter can be black in one slot and present elsewhere
        let absent_count = (0..26).filter(|&i| absent[i] && !present[i]).count();
        let green_letters: Vec<usize> = self
            .state
            .guesses
            .iter()
            .flat_map(|(g, c)| {
                g.bytes()
                    .zip(c.bytes())
                    .filter(|(_, col)| *col == b'G')
                    .map(|(l, _)| (l - b'a') as usize)
                    .collect::<Vec<_>>()
            })
            .collect();
        let yellow_only = (0..26)
            .filter(|&i| present[i] && !green_letters.contains(&i))
            .count();
        vec![
            self.state.turn() as f64 / MAX_GUESSES as f64,
            n.ln() / n_total.ln(),
            green.iter().filter(|&&g| g).count() as f64 / WORD_LEN as f64,
            (yellow_only as f64 / WORD_LEN as f64).min(1.0),
            absent_count as f64 / 26.0,
            if self.state.solved() { 1.0 } else { 0.0 },
            1.0 / n,
            if n <= 1.0 { 1.0 } else { 0.0 },
        ]
    }

    fn canonical(&self) -> String {
        let hist: Vec<String> = self
            .state
            .guesses
            .iter()
            .map(|(g, c)| format!("{g}:{c}"))
            .collect();
        format!(
            "{}|{}|{}",
            self.spec.env_id,
            self.state.hidden_word,
            hist.join(";")
        )
    }
}

impl Environment for WordleEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn feature_names(&self) -> Vec<String> {
        WORDLE_FEATURES.iter().map(|s| s.to_string()).collect()
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rng.gen_range(0..self.words.len());
        self.state = WordleState {
            hidden_word: self.words[idx].clone(),
            guesses: Vec::new(),
        };
        self.episode_id = format!("{}-s{seed}", self.spec.env_id);
        self.observe()
    }

    fn step(&mut self, action_id: usize) -> Result<StepOutcome> {
        check_step(self.state.is_over(), action_id, &self.spec)?;
        let guess = self.words[action_id].clone();
        let colors = wordle_feedback(&guess, &self.state.hidden_word)?;
        self.state.guesses.push((guess, colors));
        let solved = self.state.solved();
        let done = self.state.is_over();
        Ok(StepOutcome {
            obs: self.observe(),
            reward: if solved { 1.0 } else { 0.0 },
            done,
            truncated: false,
            event: solved.then_some(EnvEvent::Solved),
        })
    }

    fn observe(&self) -> Observation {
        Observation {
            env_id: self.spec.env_id.clone(),
            episode_id: self.episode_id.clone(),
            step_index: self.state.turn() as u64,
            text_render: self.render(),
            features: self.features(),
            state_key: state_key(&self.canonical()),
        }
    }

    fn is_done(&self) -> bool {
        self.state.is_over()
    }

    /// Fraction of letter positions pinned down by a green.
    fn progress(&self, obs: &Observation) -> Result<f64> {
        self.check_foreign(obs)?;
        Ok(obs.features[2].clamp(0.0, 1.0))
    }

    fn resample_hidden(&mut self, rng: &mut ChaCha8Rng) {
        let candidates = consistent_words(&self.state.guesses, &self.words);
        if !candidates.is_empty() {
            self.state.hidden_word = candidates[rng.gen_range(0..candidates.len())].clone();
        }
    }
}

/// Memoizing wrapper around [`near_optimal_wordle_policy`].
#[derive(Debug, Default, Clone)]
pub struct NearOptimalWordle {
    memo: HashMap<Vec<(String, String)>, String>,
}

impl NearOptimalWordle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn guess(&mut self, state: &WordleState, words: &[String]) -> Result<String> {
        if let Some(g) = self.memo.get(&state.guesses) {
            return Ok(g.clone());
        }
        let g = near_optimal_wordle_policy(state, words)?;
        self.memo.insert(state.guesses.clone(), g.clone());
        Ok(g)
    }
}

/// Exact value of the memoized greedy policy from `state`: the mean over
/// consistent hidden words of `gamma^(t - 1)`, where `t` is the number of
/// further guesses needed to solve, and 0 when the guesses run out.
pub fn near_optimal_value(
    policy: &mut NearOptimalWordle,
    state: &WordleState,
    words: &[String],
    gamma: f64,
) -> Result<f64> {
    if state.is_over() {
        return Ok(0.0);
    }
    let candidates: Vec<String> = consistent_words(&state.guesses, words)
        .into_iter()
        .cloned()
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid(
            "no consistent word remains; feedback is inconsistent",
        ));
    }
    let mut total = 0.0;
    for hidden in &candidates {
        let mut sim = WordleState {
            hidden_word: hidden.clone(),
            guesses: state.guesses.clone(),
        };
        let mut discount = 1.0;
        while !sim.is_over() {
            let g = policy.guess(&sim, words)?;
            let colors = wordle_feedback(&g, hidden)?;
            sim.guesses.push((g, colors));
            if sim.solved() {
                total += discount;
                break;
            }
            discount *= gamma;
        }
    }
    Ok(total / candidates.len() as f64)
}
