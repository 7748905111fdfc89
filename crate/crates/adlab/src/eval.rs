//! Evaluation protocols: minimum-loss answer ranking over binary candidates,
//! behavior-rate probing (thinking on simple questions, direct answering on
//! complex ones), and JSON report plumbing.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::judge::{accuracy_reward, Judge, JudgeError};
use crate::policy::{sample_one, token_logprobs, PolicyError, PolicyParams, SampleOptions};
use crate::tagfmt::{classify_behavior, format_reward, Behavior};
use crate::text::{
    render_prompt, Difficulty, Sample, TextError, Vocab, ANSWER_CLOSE, ANSWER_OPEN,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample {0:?} does not carry exactly two candidates")]
    MissingCandidates(String),
    #[error("no {0:?} samples present; behavior rates are undefined")]
    EmptyClass(Difficulty),
    #[error("empty evaluation set")]
    EmptyDataset,
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report parse error: {0}")]
    Parse(String),
}

/// How a candidate's generation loss is reduced over its tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub loss_reduction: LossReduction,
    /// Token budget for the greedy behavior probe.
    pub max_new_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { loss_reduction: LossReduction::Mean, max_new_tokens: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSample {
    pub id: String,
    pub chosen_candidate: Option<usize>,
    pub behavior: Behavior,
    pub format_total: f64,
    pub accuracy_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Answer-ranking accuracy on simple (basic) questions.
    pub acc_basic: f64,
    /// Answer-ranking accuracy on complex (assumptive) questions.
    pub acc_assumptive: f64,
    /// Fraction of simple questions answered with a think block.
    pub thk_pct_basic: f64,
    /// Fraction of complex questions answered without a think block.
    pub ans_pct_assum: f64,
    pub per_sample: Vec<PerSample>,
    pub config_fingerprint: String,
}

/// Candidate generation loss: NLL of `<answer>{candidate}</answer>` given the
/// rendered prompt, reduced per `reduction`.
fn candidate_loss(
    params: &PolicyParams,
    prompt: &[u32],
    candidate: &str,
    vocab: &Vocab,
    reduction: LossReduction,
) -> Result<f64, EvalError> {
    let target = vocab.tokenize(&format!("{ANSWER_OPEN}{candidate}{ANSWER_CLOSE}"))?;
    let lps = token_logprobs(params, prompt, &target)?;
    let sum = -lps.iter().sum::<f64>();
    Ok(match reduction {
        LossReduction::Mean => sum / lps.len() as f64,
        LossReduction::Sum => sum,
    })
}

/// Picks the binary candidate with the smaller generation loss; ties break to
/// index 0.
pub fn answer_ranking_predict(
    params: &PolicyParams,
    sample: &Sample,
    vocab: &Vocab,
    reduction: LossReduction,
) -> Result<usize, EvalError> {
    let candidates = sample
        .candidates
        .as_deref()
        .filter(|c| c.len() == 2)
        .ok_or_else(|| EvalError::MissingCandidates(sample.id.clone()))?;
    let prompt = vocab.tokenize(&render_prompt(sample))?;
    let a = candidate_loss(params, &prompt, &candidates[0], vocab, reduction)?;
    let b = candidate_loss(params, &prompt, &candidates[1], vocab, reduction)?;
    Ok(usize::from(b < a))
}

/// Table-4 style behavior rates over generated texts. Both difficulties must
/// be present.
pub fn behavior_rates(outputs: &[(Sample, String)]) -> Result<(f64, f64), EvalError> {
    let mut simple = (0usize, 0usize); // (thinking, total)
    let mut complex = (0usize, 0usize); // (direct, total)
    for (sample, text) in outputs {
        let behavior = classify_behavior(text);
        match sample.difficulty {
            Difficulty::Simple => {
                simple.1 += 1;
                simple.0 += (behavior == Behavior::Thinking) as usize;
            }
            Difficulty::Complex => {
                complex.1 += 1;
                complex.0 += (behavior == Behavior::Direct) as usize;
            }
        }
    }
    if simple.1 == 0 {
        return Err(EvalError::EmptyClass(Difficulty::Simple));
    }
    if complex.1 == 0 {
        return Err(EvalError::EmptyClass(Difficulty::Complex));
    }
    Ok((
        simple.0 as f64 / simple.1 as f64,
        complex.0 as f64 / complex.1 as f64,
    ))
}

fn fingerprint(params: &PolicyParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&params.config).expect("config serializes"));
    hasher.update(params.version.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Full evaluation pass: greedy decoding per sample for behavior, format, and
/// accuracy; answer ranking where candidates exist. Deterministic given
/// `params` and `dataset`.
pub fn evaluate(
    params: &PolicyParams,
    dataset: &[Sample],
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let judge = Judge::Exact;
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut outputs = Vec::with_capacity(dataset.len());
    let mut ranked = [(0usize, 0usize); 2]; // (correct, total) per difficulty
    for sample in dataset {
        let prompt = vocab.tokenize(&render_prompt(sample))?;
        let gen = sample_one(
            params,
            &prompt,
            &SampleOptions { temperature: 0.0, max_new_tokens: opts.max_new_tokens, seed: 0 },
        )?;
        let text = vocab.detokenize(&gen.tokens)?;
        let fmt = format_reward(&text, sample.difficulty);
        let acc = accuracy_reward(&text, &sample.reference_answer, &sample.question, &judge)?;
        let chosen = match &sample.candidates {
            Some(c) if c.len() == 2 => {
                let idx = answer_ranking_predict(params, sample, vocab, opts.loss_reduction)?;
                let slot = &mut ranked[(sample.difficulty == Difficulty::Complex) as usize];
                slot.1 += 1;
                slot.0 += (c[idx] == sample.reference_answer) as usize;
                Some(idx)
            }
            _ => None,
        };
        per_sample.push(PerSample {
            id: sample.id.clone(),
            chosen_candidate: chosen,
            behavior: classify_behavior(&text),
            format_total: fmt.total,
            accuracy_score: acc.score,
        });
        outputs.push((sample.clone(), text));
    }
    let (thk_pct_basic, ans_pct_assum) = behavior_rates(&outputs)?;
    let frac = |(correct, total): (usize, usize)| {
        if total == 0 { 0.0 } else { correct as f64 / total as f64 }
    };
    Ok(EvalReport {
        acc_basic: frac(ranked[0]),
        acc_assumptive: frac(ranked[1]),
        thk_pct_basic,
        ans_pct_assum,
        per_sample,
        config_fingerprint: fingerprint(params),
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report).map_err(|e| EvalError::Parse(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(r).map_err(|e| EvalError::Parse(e.to_string()))
}
