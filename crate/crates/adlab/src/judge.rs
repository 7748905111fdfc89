//! Semantic accuracy scoring and reward combination.
//!
//! Three judges: a deterministic exact-match judge for synthetic tasks, a
//! lexical bag-of-tokens similarity used as the fallback tier, and a remote
//! HTTP judge that silently falls back to the lexical judge on any failure
//! (timeout, transport error, malformed or out-of-range score) so a training
//! run never aborts on judge trouble.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagfmt::{parse_tags, FormatBreakdown};

pub const ENV_JUDGE_URL: &str = "AD_JUDGE_URL";
pub const ENV_JUDGE_API_KEY: &str = "AD_JUDGE_API_KEY";
pub const ENV_JUDGE_TIMEOUT_MS: &str = "AD_JUDGE_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_IN_FLIGHT_CAP: usize = 4;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("no judge endpoint configured and fallback disabled")]
    ConfigMissing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Remote,
    Lexical,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: f64,
    pub tier: Tier,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta_fmt: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 1.0, beta_fmt: 1.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.beta_fmt < 0.0 || self.alpha + self.beta_fmt <= 0.0 {
            return Err(format!(
                "reward weights must be non-negative with a positive sum, got alpha={} beta_fmt={}",
                self.alpha, self.beta_fmt
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: JudgeVerdict,
    pub format: FormatBreakdown,
    pub total: f64,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Three-level exact judge: 1.0 on normalized equality, 0.5 when the
/// reference occurs as a contiguous token run inside the prediction with at
/// most 2 extra tokens, 0.0 otherwise.
pub fn exact_match_judge(prediction: &str, reference: &str) -> JudgeVerdict {
    let p = normalize(prediction);
    let r = normalize(reference);
    let score = if p == r {
        1.0
    } else {
        let pt: Vec<&str> = p.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        let contains = !rt.is_empty() && pt.windows(rt.len()).any(|w| w == rt.as_slice());
        if contains && pt.len() <= rt.len() + 2 {
            0.5
        } else {
            0.0
        }
    };
    JudgeVerdict { score, tier: Tier::Exact, rationale: None }
}

/// Cosine similarity between token-count vectors of the normalized strings,
/// clamped to [0, 1].
pub fn lexical_similarity_judge(prediction: &str, reference: &str) -> JudgeVerdict {
    let p = normalize(prediction);
    let r = normalize(reference);
    fn count(s: &str) -> std::collections::HashMap<&str, f64> {
        let mut m = std::collections::HashMap::<&str, f64>::new();
        for w in s.split_whitespace() {
            *m.entry(w).or_default() += 1.0;
        }
        m
    }
    let pc = count(&p);
    let rc = count(&r);
    let score = if pc == rc {
        // Identical count vectors have cosine exactly 1; skip the float
        // arithmetic so the bound is hit without rounding noise.
        1.0
    } else if pc.is_empty() || rc.is_empty() {
        0.0
    } else {
        let dot: f64 = pc
            .iter()
            .filter_map(|(w, c)| rc.get(w).map(|d| c * d))
            .sum();
        let norm = |m: &std::collections::HashMap<&str, f64>| {
            m.values().map(|c| c * c).sum::<f64>().sqrt()
        };
        (dot / (norm(&pc) * norm(&rc))).clamp(0.0, 1.0)
    };
    JudgeVerdict { score, tier: Tier::Lexical, rationale: None }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    question: &'a str,
    reference: &'a str,
    prediction: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    score: f64,
    #[serde(default)]
    rationale: Option<String>,
}

/// Per-tier verdict counters, updated atomically.
#[derive(Debug, Default)]
pub struct JudgeMetrics {
    pub remote: AtomicU64,
    pub lexical: AtomicU64,
    pub fallbacks: AtomicU64,
}

impl JudgeMetrics {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.remote.load(Ordering::Relaxed),
            self.lexical.load(Ordering::Relaxed),
            self.fallbacks.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug, Clone)]
pub struct RemoteJudgeConfig {
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// When false, a missing endpoint is a hard error instead of a lexical
    /// fallback.
    pub fallback_enabled: bool,
    pub in_flight_cap: usize,
}

impl RemoteJudgeConfig {
    pub fn from_env() -> Self {
        let timeout_ms = std::env::var(ENV_JUDGE_TIMEOUT_MS)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(DEFAULT_TIMEOUT_MS);
        RemoteJudgeConfig {
            url: std::env::var(ENV_JUDGE_URL).ok().filter(|s| !s.is_empty()),
            api_key: std::env::var(ENV_JUDGE_API_KEY).ok().filter(|s| !s.is_empty()),
            timeout: Duration::from_millis(timeout_ms),
            fallback_enabled: true,
            in_flight_cap: DEFAULT_IN_FLIGHT_CAP,
        }
    }
}

/// Remote judge client, shareable across threads. Concurrent calls are
/// limited to `in_flight_cap`.
pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    agent: ureq::Agent,
    metrics: JudgeMetrics,
    permits: Mutex<usize>,
    released: Condvar,
}

impl RemoteJudge {
    pub fn new(config: RemoteJudgeConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let cap = config.in_flight_cap.max(1);
        RemoteJudge {
            config,
            agent,
            metrics: JudgeMetrics::default(),
            permits: Mutex::new(cap),
            released: Condvar::new(),
        }
    }

    pub fn metrics(&self) -> &JudgeMetrics {
        &self.metrics
    }

    fn acquire(&self) {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.released.wait(permits).unwrap();
        }
        *permits -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.released.notify_one();
    }

    fn request(
        &self,
        url: &str,
        prediction: &str,
        reference: &str,
        question: &str,
    ) -> Result<(f64, Option<String>), String> {
        self.acquire();
        let result = (|| {
            let mut req = self.agent.post(url);
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(RemoteRequest { question, reference, prediction })
                .map_err(|e| e.to_string())?;
            let body: RemoteResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
            if [0.0, 0.5, 1.0].contains(&body.score) {
                Ok((body.score, body.rationale))
            } else {
                Err(format!("out-of-range score {}", body.score))
            }
        })();
        self.release();
        result
    }

    /// One scoring request. A valid response with a score in {0, 0.5, 1}
    /// becomes a Remote verdict; anything else falls back to the lexical
    /// judge.
    pub fn remote_judge(
        &self,
        prediction: &str,
        reference: &str,
        question: &str,
    ) -> Result<JudgeVerdict, JudgeError> {
        let url = match &self.config.url {
            Some(u) => u.clone(),
            None if self.config.fallback_enabled => {
                log::warn!("no judge endpoint configured; using lexical fallback");
                self.metrics.fallbacks.fetch_add(1, Ordering::Relaxed);
                self.metrics.lexical.fetch_add(1, Ordering::Relaxed);
                return Ok(lexical_similarity_judge(prediction, reference));
            }
            None => return Err(JudgeError::ConfigMissing),
        };
        match self.request(&url, prediction, reference, question) {
            Ok((score, rationale)) => {
                self.metrics.remote.fetch_add(1, Ordering::Relaxed);
                Ok(JudgeVerdict { score, tier: Tier::Remote, rationale })
            }
            Err(reason) => {
                log::warn!("remote judge failed ({reason}); using lexical fallback");
                self.metrics.fallbacks.fetch_add(1, Ordering::Relaxed);
                self.metrics.lexical.fetch_add(1, Ordering::Relaxed);
                Ok(lexical_similarity_judge(prediction, reference))
            }
        }
    }
}

/// Judge selection for training and evaluation.
pub enum Judge {
    Exact,
    Remote(RemoteJudge),
}

impl Judge {
    pub fn verdict(
        &self,
        prediction: &str,
        reference: &str,
        question: &str,
    ) -> Result<JudgeVerdict, JudgeError> {
        match self {
            Judge::Exact => Ok(exact_match_judge(prediction, reference)),
            Judge::Remote(r) => r.remote_judge(prediction, reference, question),
        }
    }
}

/// Scores an output text: the prediction is the first answer span when one
/// exists, otherwise the whole text.
pub fn accuracy_reward(
    output_text: &str,
    reference: &str,
    question: &str,
    judge: &Judge,
) -> Result<JudgeVerdict, JudgeError> {
    let parsed = parse_tags(output_text);
    let prediction = parsed.answer_span.as_deref().unwrap_or(output_text);
    judge.verdict(prediction, reference, question)
}

/// Weighted sum of the accuracy and format rewards.
pub fn combine_reward(
    accuracy: JudgeVerdict,
    format: FormatBreakdown,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let total = weights.alpha * accuracy.score + weights.beta_fmt * format.total;
    RewardBreakdown { accuracy, format, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagfmt::format_reward;
    use crate::text::Difficulty;

    #[test]
    fn exact_judge_levels() {
        assert_eq!(exact_match_judge("7", "7").score, 1.0);
        assert_eq!(exact_match_judge("the answer is 7", "7").score, 0.0);
        assert_eq!(exact_match_judge("is 7", "7").score, 0.5);
        assert_eq!(exact_match_judge("9", "7").score, 0.0);
        assert_eq!(exact_match_judge("  7 ", "7").score, 1.0);
        assert_eq!(exact_match_judge("Red Car", "red  car").score, 1.0);
    }

    #[test]
    fn lexical_judge_cases() {
        assert_eq!(lexical_similarity_judge("red car", "red car").score, 1.0);
        assert_eq!(lexical_similarity_judge("red", "blue").score, 0.0);
        let v = lexical_similarity_judge("red car", "red bus");
        assert!((v.score - 0.5).abs() < 1e-12);
        assert_eq!(v.tier, Tier::Lexical);
        assert_eq!(lexical_similarity_judge("", "").score, 1.0);
        assert_eq!(lexical_similarity_judge("", "x").score, 0.0);
    }

    #[test]
    fn accuracy_reward_extracts_answer_span() {
        let j = Judge::Exact;
        assert_eq!(accuracy_reward("<answer>7</answer>", "7", "", &j).unwrap().score, 1.0);
        assert_eq!(accuracy_reward("7", "7", "", &j).unwrap().score, 1.0);
        assert_eq!(
            accuracy_reward("<think>x</think><answer>9</answer>", "7", "", &j)
                .unwrap()
                .score,
            0.0
        );
    }

    #[test]
    fn combine_reward_cases() {
        let w = RewardWeights::default();
        let acc = |s| JudgeVerdict { score: s, tier: Tier::Exact, rationale: None };
        let full = format_reward("<answer>5</answer>", Difficulty::Simple);
        assert_eq!(combine_reward(acc(1.0), full.clone(), &w).total, 2.0);
        let zero = format_reward("", Difficulty::Complex);
        assert_eq!(combine_reward(acc(0.0), zero, &w).total, 0.0);
        let quarter = format_reward("<answer>7</answer>", Difficulty::Complex);
        assert_eq!(combine_reward(acc(0.5), quarter, &w).total, 0.75);
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights { alpha: 0.0, beta_fmt: 0.0 }.validate().is_err());
        assert!(RewardWeights { alpha: -1.0, beta_fmt: 2.0 }.validate().is_err());
        assert!(RewardWeights::default().validate().is_ok());
    }

    #[test]
    fn remote_missing_endpoint() {
        let judge = RemoteJudge::new(RemoteJudgeConfig {
            url: None,
            api_key: None,
            timeout: Duration::from_millis(100),
            fallback_enabled: false,
            in_flight_cap: 4,
        });
        assert!(matches!(
            judge.remote_judge("a", "a", "q"),
            Err(JudgeError::ConfigMissing)
        ));
        let judge = RemoteJudge::new(RemoteJudgeConfig {
            url: None,
            api_key: None,
            timeout: Duration::from_millis(100),
            fallback_enabled: true,
            in_flight_cap: 4,
        });
        let v = judge.remote_judge("a", "a", "q").unwrap();
        assert_eq!(v.tier, Tier::Lexical);
        assert_eq!(v.score, 1.0);
    }
}
