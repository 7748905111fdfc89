//! Two-stage training: supervised fine-tuning on difficulty-labeled targets,
//! then group-relative policy optimization with ratio clipping and a KL
//! penalty against a frozen reference policy.
//!
//! Each optimization step snapshots the current parameters as the old
//! policy, samples a group per prompt, scores rollouts with the composite
//! reward, normalizes rewards into group advantages, and performs a single
//! gradient update on the clipped surrogate minus the KL term.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{accuracy_reward, combine_reward, Judge, JudgeError, RewardWeights};
use crate::policy::{
    backward_weighted, mix_seed, sample_group, token_logprobs, token_logprobs_cached,
    Gradients, PolicyError, PolicyParams, SampleOptions, TensorSet,
};
use crate::tagfmt::format_reward;
use crate::text::{
    render_prompt, render_sft_target, Difficulty, Sample, TextError, TokenSeq, Vocab, EOS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioLevel {
    Sequence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Ad,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub ratio_level: RatioLevel,
    pub reward_mode: RewardMode,
    pub weights: RewardWeights,
    pub steps: usize,
    pub batch_prompts: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 0.1,
            ratio_level: RatioLevel::Token,
            reward_mode: RewardMode::Ad,
            weights: RewardWeights::default(),
            steps: 400,
            batch_prompts: 16,
            temperature: 1.5,
            max_new_tokens: 40,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.kl_beta < 0.0 || self.learning_rate <= 0.0 || self.temperature < 0.0 {
            return Err(TrainError::InvalidConfig(
                "kl_beta must be >= 0, learning_rate > 0, temperature >= 0".into(),
            ));
        }
        if self.batch_prompts == 0 || self.max_new_tokens == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_prompts and max_new_tokens must be positive".into(),
            ));
        }
        self.weights
            .validate()
            .map_err(TrainError::InvalidConfig)?;
        Ok(())
    }
}

/// One sampled policy output with its scoring context.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub prompt: TokenSeq,
    pub output: TokenSeq,
    pub old_logprobs: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

/// Per-step telemetry. Reward fields are present for RFT steps, `sft_loss`
/// for SFT steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mean_total_reward: Option<f64>,
    pub mean_format_reward: Option<f64>,
    pub mean_accuracy_reward: Option<f64>,
    pub mean_kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub sft_loss: Option<f64>,
}

pub trait TelemetrySink {
    fn record(&mut self, stats: &StepStats);
}

impl TelemetrySink for Vec<StepStats> {
    fn record(&mut self, stats: &StepStats) {
        self.push(stats.clone());
    }
}

/// Discards telemetry.
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn record(&mut self, _: &StepStats) {}
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("parameters diverged to non-finite values at step {0}")]
    Diverged(u64),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Group-relative advantages: subtract the group mean and divide by the
/// population standard deviation. Zero-variance groups yield all zeros.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, TrainError> {
    let g = rewards.len();
    if g < 2 {
        return Err(TrainError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Ratio ceiling for the KL estimator; exceeding it is clamped and counted.
pub const KL_RATIO_CEIL: f64 = 1e6;
pub static KL_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// KL estimate `u - log u - 1` with `u = pi_ref / pi_theta`, always >= 0.
/// Returns the value and its derivative with respect to `cur_logprob`.
fn kl_term_with_grad(ref_logprob: f64, cur_logprob: f64) -> (f64, f64) {
    let diff = ref_logprob - cur_logprob;
    let u = diff.exp();
    if u > KL_RATIO_CEIL {
        KL_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        log::warn!("KL ratio clamped at {KL_RATIO_CEIL:e} (log ratio {diff:.3})");
        // With u pinned, only the explicit -(ref - cur) term varies.
        return (KL_RATIO_CEIL - diff - 1.0, 1.0);
    }
    (u - diff - 1.0, 1.0 - u)
}

pub fn kl_term(ref_logprob: f64, cur_logprob: f64) -> f64 {
    kl_term_with_grad(ref_logprob, cur_logprob).0
}

/// Clipped-surrogate evaluation for one ratio unit: value, gradient
/// coefficient with respect to the current log-probability, and whether the
/// clipped branch was selected (zero gradient through the ratio).
fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if clipped < unclipped {
        (clipped, 0.0, true)
    } else {
        (unclipped, ratio * advantage, false)
    }
}

/// A scored group frozen for optimization: fixed outputs, fixed old/reference
/// log-probabilities, fixed advantages. Only the current policy varies.
#[derive(Debug, Clone)]
pub struct FrozenRollout {
    pub output: TokenSeq,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct FrozenGroup {
    pub prompt: TokenSeq,
    pub rollouts: Vec<FrozenRollout>,
}

// Guard for sequence-level ratios before exponentiation.
const MAX_LOG_RATIO: f64 = 30.0;

struct RolloutEval {
    objective: f64,
    /// Per-token weights for the log-prob gradient.
    weights: Vec<f64>,
    kl_sum: f64,
    clipped_units: usize,
    units: usize,
}

fn eval_rollout(
    cur: &[f64],
    frozen: &FrozenRollout,
    cfg: &GrpoConfig,
) -> RolloutEval {
    let n = cur.len();
    debug_assert_eq!(n, frozen.old_logprobs.len());
    match cfg.ratio_level {
        RatioLevel::Token => {
            let mut objective = 0.0;
            let mut kl_sum = 0.0;
            let mut clipped_units = 0;
            let mut weights = Vec::with_capacity(n);
            for t in 0..n {
                let ratio = (cur[t] - frozen.old_logprobs[t]).exp();
                let (val, coeff, clipped) =
                    clipped_surrogate(ratio, frozen.advantage, cfg.clip_epsilon);
                let (kl, dkl) = kl_term_with_grad(frozen.ref_logprobs[t], cur[t]);
                objective += val - cfg.kl_beta * kl;
                kl_sum += kl;
                clipped_units += clipped as usize;
                weights.push((coeff - cfg.kl_beta * dkl) / n as f64);
            }
            RolloutEval {
                objective: objective / n as f64,
                weights,
                kl_sum,
                clipped_units,
                units: n,
            }
        }
        RatioLevel::Sequence => {
            let cur_sum: f64 = cur.iter().sum();
            let old_sum: f64 = frozen.old_logprobs.iter().sum();
            let ref_sum: f64 = frozen.ref_logprobs.iter().sum();
            let ratio = (cur_sum - old_sum).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
            let (val, coeff, clipped) =
                clipped_surrogate(ratio, frozen.advantage, cfg.clip_epsilon);
            let (kl, dkl) = kl_term_with_grad(ref_sum, cur_sum);
            let w = coeff - cfg.kl_beta * dkl;
            RolloutEval {
                objective: val - cfg.kl_beta * kl,
                weights: vec![w; n],
                kl_sum: kl,
                clipped_units: clipped as usize,
                units: 1,
            }
        }
    }
}

/// The full optimization objective over frozen groups, evaluated at
/// `params`. Pure in `params`; used directly by finite-difference checks.
pub fn grpo_objective(
    params: &PolicyParams,
    groups: &[FrozenGroup],
    cfg: &GrpoConfig,
) -> Result<f64, TrainError> {
    let (obj, _, _) = grpo_eval(params, groups, cfg, false)?;
    Ok(obj)
}

/// Objective plus its exact gradient with respect to `params`.
pub fn grpo_objective_gradient(
    params: &PolicyParams,
    groups: &[FrozenGroup],
    cfg: &GrpoConfig,
) -> Result<(f64, Gradients, GrpoEvalStats), TrainError> {
    let (obj, grads, stats) = grpo_eval(params, groups, cfg, true)?;
    Ok((obj, grads.expect("gradient requested"), stats))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GrpoEvalStats {
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

fn grpo_eval(
    params: &PolicyParams,
    groups: &[FrozenGroup],
    cfg: &GrpoConfig,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>, GrpoEvalStats), TrainError> {
    let mut grads = with_grad.then(|| TensorSet::zeros(&params.config));
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_units = 0usize;
    let mut clipped = 0usize;
    let mut units = 0usize;
    for group in groups {
        let g = group.rollouts.len() as f64;
        for frozen in &group.rollouts {
            if frozen.output.is_empty() {
                continue;
            }
            let (cur, cache) = token_logprobs_cached(params, &group.prompt, &frozen.output)?;
            let eval = eval_rollout(&cur, frozen, cfg);
            // Mean over group members and over groups.
            let norm = 1.0 / (g * groups.len() as f64);
            objective += eval.objective * norm;
            kl_sum += eval.kl_sum;
            kl_units += eval.weights.len();
            clipped += eval.clipped_units;
            units += eval.units;
            if let Some(grads) = grads.as_mut() {
                let weights: Vec<f64> = eval.weights.iter().map(|w| w * norm).collect();
                let g = backward_weighted(params, &cache, &frozen.output, &weights);
                grads.add_scaled(&g, 1.0);
            }
        }
    }
    let stats = GrpoEvalStats {
        mean_kl: if kl_units > 0 { kl_sum / kl_units as f64 } else { 0.0 },
        clip_fraction: if units > 0 { clipped as f64 / units as f64 } else { 0.0 },
    };
    Ok((objective, grads, stats))
}

fn reward_difficulty(sample: &Sample, mode: RewardMode) -> Difficulty {
    match mode {
        RewardMode::Ad => sample.difficulty,
        // The vanilla ablation demands the think+answer structure everywhere.
        RewardMode::Vanilla => Difficulty::Complex,
    }
}

/// Accumulated reward means for one step.
#[derive(Debug, Default, Clone, Copy)]
struct RewardTally {
    total: f64,
    format: f64,
    accuracy: f64,
    n: usize,
}

/// Mean NLL of rendered targets over the batch, plus its gradient.
fn sft_batch_gradient(
    params: &PolicyParams,
    batch: &[Sample],
    vocab: &Vocab,
) -> Result<(f64, Gradients), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty SFT batch".into()));
    }
    let mut grads = TensorSet::zeros(&params.config);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let prompt = vocab.tokenize(&render_prompt(sample))?;
        let mut output = vocab.tokenize(&render_sft_target(sample)?)?;
        output.push(EOS);
        let (lps, cache) = token_logprobs_cached(params, &prompt, &output)?;
        let n = output.len() as f64;
        loss += -lps.iter().sum::<f64>() / n * scale;
        let weights = vec![-scale / n; output.len()];
        let g = backward_weighted(params, &cache, &output, &weights);
        grads.add_scaled(&g, 1.0);
    }
    Ok((loss, grads))
}

/// One supervised update: mean NLL of rendered targets over the batch, one
/// gradient-descent step.
pub fn sft_step(
    params: &PolicyParams,
    batch: &[Sample],
    learning_rate: f64,
    vocab: &Vocab,
    step: u64,
) -> Result<(PolicyParams, StepStats), TrainError> {
    let (loss, grads) = sft_batch_gradient(params, batch, vocab)?;
    let mut next = params.clone();
    next.t.add_scaled(&grads, -learning_rate);
    next.version += 1;
    if !next.t.all_finite() {
        return Err(TrainError::Diverged(step));
    }
    let stats = StepStats {
        step,
        mean_total_reward: None,
        mean_format_reward: None,
        mean_accuracy_reward: None,
        mean_kl: None,
        clip_fraction: None,
        sft_loss: Some(loss),
    };
    Ok((next, stats))
}

/// One GRPO update over a batch of prompts: snapshot, sample groups, score,
/// normalize advantages, ascend the clipped KL-regularized objective.
pub fn grpo_step(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    batch: &[Sample],
    cfg: &GrpoConfig,
    judge: &Judge,
    vocab: &Vocab,
    step: u64,
    run_seed: u64,
) -> Result<(PolicyParams, StepStats), TrainError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty GRPO batch".into()));
    }
    let step_seed = mix_seed(run_seed, step);
    let mut groups = Vec::with_capacity(batch.len());
    let mut tally = RewardTally::default();
    for (pi, sample) in batch.iter().enumerate() {
        let prompt = vocab.tokenize(&render_prompt(sample))?;
        let opts = SampleOptions {
            temperature: cfg.temperature,
            max_new_tokens: cfg.max_new_tokens,
            seed: mix_seed(step_seed, pi as u64),
        };
        let generations = sample_group(params, &prompt, cfg.group_size, &opts)?;
        let mut rewards = Vec::with_capacity(generations.len());
        for gen in &generations {
            let text = vocab.detokenize(&gen.tokens)?;
            let fmt = format_reward(&text, reward_difficulty(sample, cfg.reward_mode));
            let acc = accuracy_reward(&text, &sample.reference_answer, &sample.question, judge)?;
            let rb = combine_reward(acc, fmt, &cfg.weights);
            tally.total += rb.total;
            tally.format += rb.format.total;
            tally.accuracy += rb.accuracy.score;
            tally.n += 1;
            rewards.push(rb.total);
        }
        let advantages = grpo_advantages(&rewards)?;
        let rollouts = generations
            .into_iter()
            .zip(advantages)
            .map(|(gen, advantage)| FrozenRollout {
                ref_logprobs: Vec::new(), // filled below
                output: gen.tokens,
                old_logprobs: gen.logprobs,
                advantage,
            })
            .collect::<Vec<_>>();
        groups.push(FrozenGroup { prompt, rollouts });
    }
    for group in &mut groups {
        for r in &mut group.rollouts {
            if r.output.is_empty() {
                continue;
            }
            r.ref_logprobs = token_logprobs(ref_params, &group.prompt, &r.output)?;
        }
    }

    let (_, grads, eval_stats) = grpo_objective_gradient(params, &groups, cfg)?;
    let mut next = params.clone();
    next.t.add_scaled(&grads, cfg.learning_rate);
    next.version += 1;
    if !next.t.all_finite() {
        return Err(TrainError::Diverged(step));
    }
    let n = tally.n.max(1) as f64;
    let stats = StepStats {
        step,
        mean_total_reward: Some(tally.total / n),
        mean_format_reward: Some(tally.format / n),
        mean_accuracy_reward: Some(tally.accuracy / n),
        mean_kl: Some(eval_stats.mean_kl),
        clip_fraction: Some(eval_stats.clip_fraction),
        sft_loss: None,
    };
    Ok((next, stats))
}

/// Adam moment buffers over the flattened parameter vector.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Bias-corrected Adam update, applied in place to `params`.
    fn apply(&mut self, params: &mut PolicyParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let g = grads.to_flat();
        let mut x = params.t.to_flat();
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            x[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        params.t.assign_from_flat(&x);
        params.version += 1;
    }
}

/// Shuffled mini-batch SFT over the dataset, optimized with Adam.
#[allow(clippy::too_many_arguments)]
pub fn run_sft(
    params: PolicyParams,
    dataset: &[Sample],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    vocab: &Vocab,
    sink: &mut dyn TelemetrySink,
    seed: u64,
) -> Result<PolicyParams, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
    }
    let mut params = params;
    let mut adam = AdamState::new(params.t.num_params());
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, grads) = sft_batch_gradient(&params, &batch, vocab)?;
            adam.apply(&mut params, &grads, learning_rate);
            if !params.t.all_finite() {
                return Err(TrainError::Diverged(step));
            }
            sink.record(&StepStats {
                step,
                mean_total_reward: None,
                mean_format_reward: None,
                mean_accuracy_reward: None,
                mean_kl: None,
                clip_fraction: None,
                sft_loss: Some(loss),
            });
            step += 1;
        }
    }
    Ok(params)
}

/// GRPO fine-tuning for `cfg.steps` steps over shuffled prompts. The
/// reference policy stays frozen for the whole run; the old policy is
/// refreshed every step.
#[allow(clippy::too_many_arguments)]
pub fn run_rft(
    params: PolicyParams,
    ref_params: &PolicyParams,
    dataset: &[Sample],
    cfg: &GrpoConfig,
    judge: &Judge,
    vocab: &Vocab,
    sink: &mut dyn TelemetrySink,
    seed: u64,
) -> Result<PolicyParams, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::InvalidConfig("empty RFT dataset".into()));
    }
    let mut params = params;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;
    for step in 0..cfg.steps as u64 {
        let mut batch = Vec::with_capacity(cfg.batch_prompts);
        while batch.len() < cfg.batch_prompts {
            if cursor >= order.len() {
                order = (0..dataset.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x5eed, pass));
                order.shuffle(&mut rng);
                cursor = 0;
                pass += 1;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (next, stats) = grpo_step(&params, ref_params, &batch, cfg, judge, vocab, step, seed)?;
        sink.record(&stats);
        params = next;
    }
    Ok(params)
}
