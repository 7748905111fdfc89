//! Seeded ancestral sampling with straightforward incremental decoding.
//!
//! Each group member uses a seed derived from (group seed, candidate index),
//! so groups are reproducible while members stay independent draws.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::PolicyParams;
use super::{check_tokens, PolicyError, SampleOptions, LN_EPS};
use crate::text::EOS;

/// One sampled continuation with its per-token log-probabilities under the
/// generating parameters (the model distribution, temperature 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

/// splitmix64 finalizer for deriving per-candidate seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct LayerKv {
    k: Array2<f64>,
    v: Array2<f64>,
}

/// Incremental decoder state: per-layer key/value caches over processed
/// positions.
struct Decoder<'a> {
    p: &'a PolicyParams,
    pos: usize,
    kv: Vec<LayerKv>,
}

fn ln_row(x: &Array1<f64>, g: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let m = x.sum() / d;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_iter(x.iter().zip(g.iter().zip(b)).map(|(&v, (&g, &b))| (v - m) * r * g + b))
}

impl<'a> Decoder<'a> {
    fn new(p: &'a PolicyParams) -> Self {
        let ctx = p.config.context_len;
        let d = p.config.embed_dim;
        let kv = (0..p.config.num_layers)
            .map(|_| LayerKv { k: Array2::zeros((ctx, d)), v: Array2::zeros((ctx, d)) })
            .collect();
        Decoder { p, pos: 0, kv }
    }

    /// Processes one token, returning the next-token logits row.
    fn step(&mut self, id: u32) -> Result<Array1<f64>, PolicyError> {
        let cfg = &self.p.config;
        if self.pos >= cfg.context_len {
            return Err(PolicyError::ContextOverflow {
                needed: self.pos + 1,
                limit: cfg.context_len,
            });
        }
        let d = cfg.embed_dim;
        let (nh, dh) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = &self.p.t.wte.row(id as usize) + &self.p.t.wpe.row(self.pos);
        for (lp, kv) in self.p.t.layers.iter().zip(self.kv.iter_mut()) {
            let y1 = ln_row(&x, &lp.ln1_g, &lp.ln1_b);
            let qkv = y1.dot(&lp.w_qkv) + &lp.b_qkv;
            kv.k
                .row_mut(self.pos)
                .assign(&qkv.slice(ndarray::s![d..2 * d]));
            kv.v
                .row_mut(self.pos)
                .assign(&qkv.slice(ndarray::s![2 * d..3 * d]));

            let mut att_out = Array1::zeros(d);
            for h in 0..nh {
                let q = qkv.slice(ndarray::s![h * dh..(h + 1) * dh]);
                let mut scores = Vec::with_capacity(self.pos + 1);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=self.pos {
                    let kj = kv.k.row(j);
                    let s: f64 = q
                        .iter()
                        .zip(kj.slice(ndarray::s![h * dh..(h + 1) * dh]).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let vj = kv.v.row(j);
                    for (o, &vv) in att_out
                        .slice_mut(ndarray::s![h * dh..(h + 1) * dh])
                        .iter_mut()
                        .zip(vj.slice(ndarray::s![h * dh..(h + 1) * dh]).iter())
                    {
                        *o += w * vv;
                    }
                }
            }
            let proj = att_out.dot(&lp.w_o) + &lp.b_o;
            x = &x + &proj;
            let y2 = ln_row(&x, &lp.ln2_g, &lp.ln2_b);
            let hidden = (y2.dot(&lp.w_fc) + &lp.b_fc).mapv(|v| v.max(0.0));
            let m = hidden.dot(&lp.w_proj) + &lp.b_proj;
            x = &x + &m;
        }
        let xf = ln_row(&x, &self.p.t.ln_f_g, &self.p.t.ln_f_b);
        self.pos += 1;
        Ok(xf.dot(&self.p.t.w_head))
    }
}

fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    logits.mapv(|v| v - lse)
}

fn pick(logits: &Array1<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let scaled = logits.mapv(|v| v / temperature);
    let lp = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i as u32;
        }
    }
    (lp.len() - 1) as u32
}

/// Samples one continuation of `prompt`, stopping at EOS or the token cap.
pub fn sample_one(
    params: &PolicyParams,
    prompt: &[u32],
    opts: &SampleOptions,
) -> Result<Generation, PolicyError> {
    check_tokens(&params.config, prompt)?;
    if prompt.is_empty() {
        return Err(PolicyError::EmptyOutput);
    }
    if prompt.len() >= params.config.context_len {
        return Err(PolicyError::ContextOverflow {
            needed: prompt.len() + 1,
            limit: params.config.context_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dec = Decoder::new(params);
    let mut logits = Array1::zeros(0);
    for &id in prompt {
        logits = dec.step(id)?;
    }
    let budget = opts
        .max_new_tokens
        .min(params.config.context_len - prompt.len());
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for _ in 0..budget {
        let tok = pick(&logits, opts.temperature, &mut rng);
        let lp = log_softmax(&logits)[tok as usize];
        tokens.push(tok);
        logprobs.push(lp);
        if tok == EOS {
            break;
        }
        if tokens.len() < budget {
            logits = dec.step(tok)?;
        }
    }
    Ok(Generation { tokens, logprobs })
}

/// `group_size` independent ancestral samples for one prompt, deterministic
/// given (opts.seed, candidate index).
pub fn sample_group(
    params: &PolicyParams,
    prompt: &[u32],
    group_size: usize,
    opts: &SampleOptions,
) -> Result<Vec<Generation>, PolicyError> {
    (0..group_size)
        .map(|i| {
            let member = SampleOptions { seed: mix_seed(opts.seed, i as u64), ..*opts };
            sample_one(params, prompt, &member)
        })
        .collect()
}
