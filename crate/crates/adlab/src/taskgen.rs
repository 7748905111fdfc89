//! Deterministic deduction gym: simple single-fact lookup questions and
//! complex multi-hop arithmetic chains with shadowing presuppositions.
//!
//! Every sample carries a mechanically checkable ground truth: the context
//! assigns integer values to variables, a complex question overlays a chain
//! of hypothetical reassignments, and the reference answer is the chain's
//! final value with all intermediate results clamped to the value range.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::{Difficulty, Sample, TextError, Vocab, ASSISTANT_SUFFIX, SYSTEM_PREAMBLE};

pub const VAR_NAMES: [&str; 4] = ["X", "Y", "Z", "W"];
/// Presupposition deltas are drawn from 1..=MAX_DELTA.
pub const MAX_DELTA: i64 = 5;
const MAX_RETRIES: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_simple: usize,
    pub n_complex: usize,
    pub max_hops: usize,
    pub value_range: (i64, i64),
    pub num_vars: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_simple: 2000,
            n_complex: 2000,
            max_hops: 3,
            value_range: (0, 20),
            num_vars: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("hops must be in 2..={0}, got {1}")]
    InvalidHops(usize, usize),
    #[error("gave up after {MAX_RETRIES} consecutive duplicate samples")]
    GenerationExhausted,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Text(#[from] TextError),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.value_range;
        if hi <= lo {
            return Err(DataError::InvalidConfig(format!(
                "value_range ({lo}, {hi}) must contain at least two values"
            )));
        }
        if !(2..=VAR_NAMES.len()).contains(&self.num_vars) {
            return Err(DataError::InvalidConfig(format!(
                "num_vars must be in 2..={}, got {}",
                VAR_NAMES.len(),
                self.num_vars
            )));
        }
        if self.max_hops < 2 || self.max_hops > self.num_vars - 1 {
            return Err(DataError::InvalidConfig(format!(
                "max_hops must be in 2..={} for {} variables, got {}",
                self.num_vars - 1,
                self.num_vars,
                self.max_hops
            )));
        }
        Ok(())
    }

    /// Vocabulary covering every string this generator can emit, plus the
    /// rendered prompt scaffolding.
    pub fn vocab(&self) -> Result<Vocab, TextError> {
        let (lo, hi) = self.value_range;
        let mut extras: Vec<String> = vec![
            SYSTEM_PREAMBLE.into(),
            ASSISTANT_SUFFIX.into(),
            " ".into(),
            "What is ".into(),
            "?".into(),
            "If ".into(),
            " were ".into(),
            " and ".into(),
            ", what would ".into(),
            " be?".into(),
            "; ".into(),
            "=".into(),
            "+".into(),
            "-".into(),
        ];
        extras.extend(VAR_NAMES[..self.num_vars].iter().map(|s| s.to_string()));
        let mut numbers: HashSet<i64> = (lo..=hi).collect();
        numbers.extend(1..=MAX_DELTA);
        let mut numbers: Vec<i64> = numbers.into_iter().collect();
        numbers.sort_unstable();
        extras.extend(numbers.into_iter().map(|n| n.to_string()));
        Vocab::with_extras(extras)
    }
}

fn clamp(v: i64, range: (i64, i64)) -> i64 {
    v.clamp(range.0, range.1)
}

/// Picks 2..=num_vars variables (canonical order) with independent values.
fn gen_facts(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, i64)> {
    let m = rng.random_range(2..=cfg.num_vars);
    let mut idx: Vec<usize> = (0..cfg.num_vars).collect();
    idx.shuffle(rng);
    idx.truncate(m);
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| (i, rng.random_range(cfg.value_range.0..=cfg.value_range.1)))
        .collect()
}

fn facts_context(facts: &[(usize, i64)]) -> String {
    facts
        .iter()
        .map(|&(i, v)| format!("{}={v}", VAR_NAMES[i]))
        .collect::<Vec<_>>()
        .join("; ")
}

fn shuffled_pair(truth: i64, distractor: i64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pair = vec![truth.to_string(), distractor.to_string()];
    if rng.random_bool(0.5) {
        pair.swap(0, 1);
    }
    pair
}

fn candidates(truth: i64, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let distractor = loop {
        let d = rng.random_range(cfg.value_range.0..=cfg.value_range.1);
        if d != truth {
            break d;
        }
    };
    shuffled_pair(truth, distractor, rng)
}

/// Distractor for a multi-hop sample: a value well separated from every base
/// fact, so the wrong option cannot be confused with any quantity actually
/// present in the context. Falls back to a uniform draw when the context is
/// too crowded to leave such a value.
const DISTRACTOR_MIN_GAP: i64 = 3;

fn complex_candidates(
    truth: i64,
    facts: &[(usize, i64)],
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let pool: Vec<i64> = (cfg.value_range.0..=cfg.value_range.1)
        .filter(|v| {
            *v != truth && facts.iter().all(|&(_, f)| (v - f).abs() >= DISTRACTOR_MIN_GAP)
        })
        .collect();
    if pool.is_empty() {
        return candidates(truth, cfg, rng);
    }
    let distractor = pool[rng.random_range(0..pool.len())];
    shuffled_pair(truth, distractor, rng)
}

/// Single-fact lookup question over independently assigned variables.
pub fn gen_simple(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Sample {
    let facts = gen_facts(cfg, rng);
    let &(qvar, truth) = &facts[rng.random_range(0..facts.len())];
    Sample {
        id: String::new(),
        context: facts_context(&facts),
        question: format!("What is {}?", VAR_NAMES[qvar]),
        difficulty: Difficulty::Simple,
        reference_answer: truth.to_string(),
        reasoning: None,
        candidates: Some(candidates(truth, cfg, rng)),
    }
}

/// Draws `hops` signed deltas with magnitudes in 1..=MAX_DELTA that sum to
/// zero and keep every running value strictly inside `range` (so clamping
/// never distorts the chain). Zero-sum chains keep the final value anchored
/// to a fact the model can verify, while still requiring every intermediate
/// step to be carried out.
fn zero_sum_deltas(
    hops: usize,
    start_val: i64,
    range: (i64, i64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<i64>, DataError> {
    for _ in 0..MAX_RETRIES {
        let mut ds: Vec<i64> = (0..hops - 1)
            .map(|_| {
                let mag = rng.random_range(1..=MAX_DELTA);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let last = -ds.iter().sum::<i64>();
        if last == 0 || last.abs() > MAX_DELTA {
            continue;
        }
        ds.push(last);
        let mut v = start_val;
        if ds.iter().all(|d| {
            v += d;
            (range.0..=range.1).contains(&v)
        }) {
            return Ok(ds);
        }
    }
    Err(DataError::GenerationExhausted)
}

/// Multi-hop hypothetical chain: each hop reassigns a fresh variable from the
/// previous one, shadowing any base fact of the same name. The question asks
/// for the final chain variable; the reasoning spells out the evaluation.
pub fn gen_complex(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, hops: usize) -> Result<Sample, DataError> {
    if hops < 2 || hops > cfg.max_hops {
        return Err(DataError::InvalidHops(cfg.max_hops, hops));
    }
    let facts = gen_facts(cfg, rng);
    let &(start, start_val) = &facts[rng.random_range(0..facts.len())];
    let mut others: Vec<usize> = (0..cfg.num_vars).filter(|&i| i != start).collect();
    others.shuffle(rng);
    others.truncate(hops - 1);
    // The chain passes through fresh variables and closes on its source, so
    // the question asks about a variable whose base fact is in the context.
    others.push(start);
    let deltas = zero_sum_deltas(hops, start_val, cfg.value_range, rng)?;

    let mut question = String::from("If ");
    let mut reasoning = format!("{}={start_val}", VAR_NAMES[start]);
    let mut prev = start;
    let mut value = start_val;
    for (h, (&var, &signed)) in others.iter().zip(&deltas).enumerate() {
        let (op, delta) = if signed >= 0 { ("+", signed) } else { ("-", -signed) };
        let next = clamp(value + signed, cfg.value_range);
        if h > 0 {
            question.push_str(" and ");
        }
        question.push_str(&format!(
            "{} were {}{op}{delta}",
            VAR_NAMES[var], VAR_NAMES[prev]
        ));
        reasoning.push_str(&format!(
            "; {}={}{op}{delta}={next}",
            VAR_NAMES[var], VAR_NAMES[prev]
        ));
        prev = var;
        value = next;
    }
    debug_assert_eq!(value, start_val, "zero-sum chain must return to its source value");
    question.push_str(&format!(", what would {} be?", VAR_NAMES[prev]));

    Ok(Sample {
        id: String::new(),
        context: facts_context(&facts),
        question,
        difficulty: Difficulty::Complex,
        reference_answer: value.to_string(),
        reasoning: Some(reasoning),
        candidates: Some(complex_candidates(value, &facts, cfg, rng)),
    })
}

/// Generates the full corpus: `n_simple` then `n_complex` samples with ids
/// `s-{i}` / `c-{i}` and no duplicate (context, question) pairs.
pub fn gen_dataset(cfg: &GeneratorConfig) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out = Vec::with_capacity(cfg.n_simple + cfg.n_complex);

    let push_unique = |mut make: Box<dyn FnMut(&mut ChaCha8Rng) -> Result<Sample, DataError>>,
                           count: usize,
                           prefix: &str,
                           rng: &mut ChaCha8Rng,
                           out: &mut Vec<Sample>,
                           seen: &mut HashSet<(String, String)>|
     -> Result<(), DataError> {
        for i in 0..count {
            let mut retries = 0;
            loop {
                let mut s = make(rng)?;
                let key = (s.context.clone(), s.question.clone());
                if seen.insert(key) {
                    s.id = format!("{prefix}-{i}");
                    out.push(s);
                    break;
                }
                retries += 1;
                if retries >= MAX_RETRIES {
                    return Err(DataError::GenerationExhausted);
                }
            }
        }
        Ok(())
    };

    let cfg_s = cfg.clone();
    push_unique(
        Box::new(move |rng| Ok(gen_simple(&cfg_s, rng))),
        cfg.n_simple,
        "s",
        &mut rng,
        &mut out,
        &mut seen,
    )?;
    let cfg_c = cfg.clone();
    push_unique(
        Box::new(move |rng| {
            let hops = rng.random_range(2..=cfg_c.max_hops);
            gen_complex(&cfg_c, rng, hops)
        }),
        cfg.n_complex,
        "c",
        &mut rng,
        &mut out,
        &mut seen,
    )?;
    Ok(out)
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| DataError::Parse { line: 0, reason: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DataError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            reason: enrich_parse_error(&e.to_string()),
        })?;
        out.push(sample);
    }
    Ok(out)
}

fn enrich_parse_error(msg: &str) -> String {
    if msg.contains("unknown variant") {
        format!("field `difficulty`: {msg}")
    } else {
        msg.to_string()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub generator: GeneratorConfig,
    pub sha256: String,
    pub n_samples: usize,
}

pub fn metadata_path(dataset_path: &Path) -> std::path::PathBuf {
    let mut os = dataset_path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Writes the sidecar metadata JSON (config + content checksum) next to the
/// dataset file.
pub fn write_metadata(dataset_path: &Path, cfg: &GeneratorConfig) -> Result<DatasetMetadata, DataError> {
    let bytes = std::fs::read(dataset_path)?;
    let sha256 = hex_digest(&bytes);
    let n_samples = bytes.iter().filter(|&&b| b == b'\n').count();
    let meta = DatasetMetadata { generator: cfg.clone(), sha256, n_samples };
    std::fs::write(
        metadata_path(dataset_path),
        serde_json::to_string_pretty(&meta).expect("metadata serializes"),
    )?;
    Ok(meta)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
