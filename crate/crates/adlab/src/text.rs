//! Shared domain vocabulary: task samples, the fixed word-level tokenizer,
//! and prompt / target rendering.
//!
//! The tokenizer is a greedy longest-match segmenter over a small fixed
//! vocabulary. The four structure tags `<think>`, `</think>`, `<answer>`,
//! `</answer>` are single atomic tokens, as is the system preamble, which
//! keeps rendered sequences short enough for a tiny policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved token indices. `detokenize` skips all three.
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// System-prompt preamble, ending with `User: ` so a rendered prompt is
/// `preamble + prompt text + ". Assistant: "`.
pub const SYSTEM_PREAMBLE: &str = "A conversation between User and Assistant.\n\
The user asks a question, and the assistant solves it. If the assistant \
determines that the question requires multi-step reasoning or extra thinking \
steps, the assistant generates a <think> tag, followed by the reasoning \
process enclosed within <think> </think> tags, and then provides the answer \
within <answer> </answer> tags, i.e., <think> reasoning process here </think> \
<answer> answer here </answer>. If the question is simple and does not \
require additional reasoning, the assistant directly provides the answer \
within <answer> </answer> tags, i.e., <answer> answer here </answer>.\n\
User: ";

pub const ASSISTANT_SUFFIX: &str = ". Assistant: ";

pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Complex,
}

/// One task instance: textual facts stand in for the image, the question may
/// embed a presupposition, and binary-choice candidates support answer
/// ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub difficulty: Difficulty,
    pub reference_answer: String,
    pub reasoning: Option<String>,
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("no vocabulary token matches input at byte {0}")]
    UnknownSymbol(usize),
    #[error("token index {0} out of range for vocabulary of size {1}")]
    IndexOutOfRange(u32, usize),
    #[error("complex sample {0:?} has no reasoning path")]
    MissingReasoning(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

pub const MAX_VOCAB: usize = 512;

/// Ordered token list with reserved BOS/EOS/PAD at indices 0..3 and the four
/// tag markers as atomic entries.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    /// Token indices sorted by descending string length, for longest-match.
    by_len: Vec<u32>,
}

impl Vocab {
    /// Builds a vocabulary from reserved markers, the four tags, and `extra`
    /// tokens, in that order. Duplicate extras are rejected.
    pub fn with_extras<I, S>(extras: I) -> Result<Vocab, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = vec![
            "<bos>".into(),
            "<eos>".into(),
            "<pad>".into(),
            THINK_OPEN.into(),
            THINK_CLOSE.into(),
            ANSWER_OPEN.into(),
            ANSWER_CLOSE.into(),
        ];
        tokens.extend(extras.into_iter().map(Into::into));
        if tokens.len() > MAX_VOCAB {
            return Err(TextError::InvalidVocab(format!(
                "{} tokens exceeds the {MAX_VOCAB} limit",
                tokens.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if t.is_empty() {
                return Err(TextError::InvalidVocab("empty token".into()));
            }
            if !seen.insert(t.clone()) {
                return Err(TextError::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        let mut by_len: Vec<u32> = (0..tokens.len() as u32).collect();
        by_len.sort_by_key(|&i| std::cmp::Reverse(tokens[i as usize].len()));
        Ok(Vocab { tokens, by_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, idx: u32) -> Option<&str> {
        self.tokens.get(idx as usize).map(String::as_str)
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    /// Greedy longest-match segmentation. Concatenating the matched tokens
    /// always reproduces the input, so round-tripping is structural.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq, TextError> {
        let mut out = Vec::new();
        let bytes = text.as_bytes();
        let mut pos = 0;
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            let hit = self
                .by_len
                .iter()
                .find(|&&i| rest.starts_with(self.tokens[i as usize].as_bytes()));
            match hit {
                Some(&i) => {
                    out.push(i);
                    pos += self.tokens[i as usize].len();
                }
                None => return Err(TextError::UnknownSymbol(pos)),
            }
        }
        Ok(out)
    }

    /// Concatenates token strings, omitting BOS/EOS/PAD.
    pub fn detokenize(&self, seq: &[u32]) -> Result<String, TextError> {
        let mut out = String::new();
        for &idx in seq {
            if idx == BOS || idx == EOS || idx == PAD {
                continue;
            }
            match self.token(idx) {
                Some(t) => out.push_str(t),
                None => return Err(TextError::IndexOutOfRange(idx, self.len())),
            }
        }
        Ok(out)
    }
}

/// Renders the system-prompt template with the `[prompt]` slot filled by
/// `context question` (just the question when the context is empty).
pub fn render_prompt(sample: &Sample) -> String {
    let mut s = String::with_capacity(
        SYSTEM_PREAMBLE.len()
            + sample.context.len()
            + sample.question.len()
            + ASSISTANT_SUFFIX.len()
            + 1,
    );
    s.push_str(SYSTEM_PREAMBLE);
    if !sample.context.is_empty() {
        s.push_str(&sample.context);
        s.push(' ');
    }
    s.push_str(&sample.question);
    s.push_str(ASSISTANT_SUFFIX);
    s
}

/// Supervised target: bare tagged answer for simple samples, think block plus
/// tagged answer for complex ones. A single space separates the two blocks.
pub fn render_sft_target(sample: &Sample) -> Result<String, TextError> {
    match sample.difficulty {
        Difficulty::Simple => Ok(format!(
            "{ANSWER_OPEN}{}{ANSWER_CLOSE}",
            sample.reference_answer
        )),
        Difficulty::Complex => {
            let reasoning = sample
                .reasoning
                .as_deref()
                .filter(|r| !r.is_empty())
                .ok_or_else(|| TextError::MissingReasoning(sample.id.clone()))?;
            Ok(format!(
                "{THINK_OPEN}{reasoning}{THINK_CLOSE} {ANSWER_OPEN}{}{ANSWER_CLOSE}",
                sample.reference_answer
            ))
        }
    }
}
