//! Think/answer tag grammar: structural parsing, the difficulty-conditioned
//! format reward, and the thinking/direct behavior probe.
//!
//! The hard patterns are start-anchored with no end anchor and non-greedy
//! bodies, and `.` does not match newline. A consequence worth keeping: a
//! simple-difficulty output like `<answer>5</answer><think>` still passes the
//! hard pattern on its prefix but loses the absence-of-`<think>` soft
//! component, scoring 0.875.

use once_cell::sync::Lazy;
use regex::Regex;

use crate::text::{Difficulty, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

static COMPLEX_HARD: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^<think>.*?</think>\s*<answer>.*?</answer>").unwrap());
static SIMPLE_HARD: Lazy<Regex> = Lazy::new(|| Regex::new(r"^<answer>.*?</answer>").unwrap());

pub const HARD_SCORE: f64 = 0.5;
pub const SOFT_SCORE: f64 = 0.125;

/// Structural decomposition of an output: tag-presence flags plus the first
/// think and answer spans, taken non-greedily at first occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagParse {
    pub has_think_open: bool,
    pub has_think_close: bool,
    pub has_answer_open: bool,
    pub has_answer_close: bool,
    pub think_span: Option<String>,
    pub answer_span: Option<String>,
}

/// Format reward detail: hard score, the four soft component scores, and
/// their exact sum.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FormatBreakdown {
    pub hard: f64,
    pub soft: [f64; 4],
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Behavior {
    Thinking,
    Direct,
}

fn span_between(text: &str, open: &str, close: &str) -> Option<String> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(text[start..end].to_string())
}

pub fn parse_tags(text: &str) -> TagParse {
    TagParse {
        has_think_open: text.contains(THINK_OPEN),
        has_think_close: text.contains(THINK_CLOSE),
        has_answer_open: text.contains(ANSWER_OPEN),
        has_answer_close: text.contains(ANSWER_CLOSE),
        think_span: span_between(text, THINK_OPEN, THINK_CLOSE),
        answer_span: span_between(text, ANSWER_OPEN, ANSWER_CLOSE),
    }
}

/// True iff `text` matches the difficulty's anchored hard pattern.
pub fn hard_match(text: &str, difficulty: Difficulty) -> bool {
    match difficulty {
        Difficulty::Complex => COMPLEX_HARD.is_match(text),
        Difficulty::Simple => SIMPLE_HARD.is_match(text),
    }
}

/// Composite format reward: 0.5 for the hard pattern plus 0.125 per soft
/// component. Complex soft components check presence of all four tags;
/// simple ones check absence of the think tags and presence of the answer
/// tags.
pub fn format_reward(text: &str, difficulty: Difficulty) -> FormatBreakdown {
    let p = parse_tags(text);
    let hard = if hard_match(text, difficulty) { HARD_SCORE } else { 0.0 };
    let checks = match difficulty {
        Difficulty::Complex => [
            p.has_think_open,
            p.has_think_close,
            p.has_answer_open,
            p.has_answer_close,
        ],
        Difficulty::Simple => [
            !p.has_think_open,
            !p.has_think_close,
            p.has_answer_open,
            p.has_answer_close,
        ],
    };
    let soft = checks.map(|ok| if ok { SOFT_SCORE } else { 0.0 });
    let total = hard + soft.iter().sum::<f64>();
    FormatBreakdown { hard, soft, total }
}

/// Thinking iff the opening `<think>` tag occurs anywhere; an unclosed think
/// block still counts as a thinking attempt.
pub fn classify_behavior(text: &str) -> Behavior {
    if text.contains(THINK_OPEN) {
        Behavior::Thinking
    } else {
        Behavior::Direct
    }
}
