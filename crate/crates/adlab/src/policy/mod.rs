//! Tiny autoregressive sequence policy in 64-bit floats: exact per-token
//! log-probabilities, hand-written reverse-mode gradients over the fixed
//! computation graph, seeded ancestral sampling, and a binary checkpoint
//! format.
//!
//! Architecture: token + position embeddings, causal pre-norm self-attention
//! blocks with ReLU feed-forward sublayers, untied output projection.

mod checkpoint;
mod net;
mod params;
mod sample;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{backward_weighted, forward, token_logprobs_cached, Cache};
pub use params::{init_params, Gradients, LayerTensors, PolicyParams, TensorSet};
pub use sample::{mix_seed, sample_group, sample_one, Generation};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feed-forward hidden width as a multiple of the embedding width.
pub const FF_MULT: usize = 2;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: 512,
            context_len: 96,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size == 0
            || self.context_len == 0
            || self.embed_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
        {
            return Err(PolicyError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(PolicyError::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.embed_dim * FF_MULT
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {needed} tokens exceeds context length {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("scored output is empty")]
    EmptyOutput,
    #[error("token {0} out of range for vocab size {1}")]
    TokenOutOfRange(u32, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sampling controls. Temperature 0 means greedy argmax decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleOptions {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { temperature: 1.0, max_new_tokens: 48, seed: 0 }
    }
}

/// Exact log-probabilities of `output` tokens conditioned on `prompt` and the
/// preceding output prefix.
pub fn token_logprobs(
    params: &PolicyParams,
    prompt: &[u32],
    output: &[u32],
) -> Result<Vec<f64>, PolicyError> {
    let (lps, _) = token_logprobs_cached(params, prompt, output)?;
    Ok(lps)
}

/// Mean negative log-likelihood of `output` given `prompt`.
pub fn sequence_nll(
    params: &PolicyParams,
    prompt: &[u32],
    output: &[u32],
) -> Result<f64, PolicyError> {
    if output.is_empty() {
        return Err(PolicyError::EmptyOutput);
    }
    let lps = token_logprobs(params, prompt, output)?;
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Mean NLL and its exact gradient with respect to every parameter tensor.
pub fn nll_gradient(
    params: &PolicyParams,
    prompt: &[u32],
    output: &[u32],
) -> Result<(f64, Gradients), PolicyError> {
    if output.is_empty() {
        return Err(PolicyError::EmptyOutput);
    }
    let (lps, cache) = token_logprobs_cached(params, prompt, output)?;
    let n = output.len() as f64;
    let weights = vec![-1.0 / n; output.len()];
    let grads = backward_weighted(params, &cache, output, &weights);
    Ok((-lps.iter().sum::<f64>() / n, grads))
}

/// Gradient of `weight * sum_t log pi(o_t | .)`.
pub fn weighted_logprob_gradient(
    params: &PolicyParams,
    prompt: &[u32],
    output: &[u32],
    weight: f64,
) -> Result<Gradients, PolicyError> {
    if output.is_empty() {
        return Err(PolicyError::EmptyOutput);
    }
    let (_, cache) = token_logprobs_cached(params, prompt, output)?;
    let weights = vec![weight; output.len()];
    Ok(backward_weighted(params, &cache, output, &weights))
}

pub(crate) fn check_context(
    config: &PolicyConfig,
    prompt: &[u32],
    output: &[u32],
) -> Result<(), PolicyError> {
    let needed = prompt.len().max(1) + output.len();
    if needed > config.context_len {
        return Err(PolicyError::ContextOverflow { needed, limit: config.context_len });
    }
    Ok(())
}

pub(crate) fn check_tokens(config: &PolicyConfig, ids: &[u32]) -> Result<(), PolicyError> {
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(PolicyError::TokenOutOfRange(id, config.vocab_size));
        }
    }
    Ok(())
}
