//! Forward pass with cached activations and the matching hand-written
//! backward pass.
//!
//! The backward is exact reverse-mode differentiation of the fixed graph;
//! gradient fidelity against central finite differences is enforced by the
//! test suite.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{Gradients, PolicyParams, TensorSet};
use super::{check_context, check_tokens, PolicyError, LN_EPS};
use crate::text::BOS;

pub(crate) struct LnCache {
    rstd: Vec<f64>,
    /// Normalized input before gain/bias.
    xhat: Array2<f64>,
    /// Output rows.
    y: Array2<f64>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    qkv: Array2<f64>,
    /// Per-head attention probabilities, each L x L.
    att: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    att_out: Array2<f64>,
    ln2: LnCache,
    /// Pre-activation hidden rows.
    h_pre: Array2<f64>,
}

/// All activations needed to run a backward pass for one sequence.
pub struct Cache {
    pub(crate) ids: Vec<u32>,
    /// Index of the first output token inside `ids`.
    pub(crate) base: usize,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) ln_f: LnCache,
    pub(crate) logits: Array2<f64>,
}

fn layernorm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> LnCache {
    let l = x.nrows();
    let d = x.ncols() as f64;
    let mut rstd = Vec::with_capacity(l);
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut y = Array2::zeros(x.raw_dim());
    for i in 0..l {
        let row = x.row(i);
        let m = row.sum() / d;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for j in 0..x.ncols() {
            let h = (row[j] - m) * r;
            xhat[[i, j]] = h;
            y[[i, j]] = h * g[j] + b[j];
        }
    }
    LnCache { rstd, xhat, y }
}

/// Backward through layernorm; returns dx and accumulates dg/db.
fn layernorm_backward(
    cache: &LnCache,
    g: &Array1<f64>,
    dy: &Array2<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let l = dy.nrows();
    let d = dy.ncols();
    let dn = d as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..l {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dyij = dy[[i, j]];
            let dxhat = dyij * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * cache.xhat[[i, j]];
            dg[j] += dyij * cache.xhat[[i, j]];
            db[j] += dyij;
        }
        let r = cache.rstd[i];
        for j in 0..d {
            let dxhat = dy[[i, j]] * g[j];
            dx[[i, j]] = r * (dxhat - sum_dxhat / dn - cache.xhat[[i, j]] * sum_dxhat_xhat / dn);
        }
    }
    dx
}

fn causal_softmax_rows(scores: &mut Array2<f64>) {
    let l = scores.nrows();
    for i in 0..l {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(scores[[i, j]]);
        }
        let mut sum = 0.0;
        for j in 0..l {
            if j <= i {
                let e = (scores[[i, j]] - max).exp();
                scores[[i, j]] = e;
                sum += e;
            } else {
                scores[[i, j]] = 0.0;
            }
        }
        for j in 0..=i {
            scores[[i, j]] /= sum;
        }
    }
}

/// Full forward pass over `ids`, caching every intermediate.
pub fn forward(params: &PolicyParams, ids: &[u32]) -> Result<Cache, PolicyError> {
    forward_with_base(params, ids, 0)
}

fn forward_with_base(params: &PolicyParams, ids: &[u32], base: usize) -> Result<Cache, PolicyError> {
    let cfg = &params.config;
    check_tokens(cfg, ids)?;
    if ids.is_empty() {
        return Err(PolicyError::EmptyOutput);
    }
    if ids.len() > cfg.context_len {
        return Err(PolicyError::ContextOverflow { needed: ids.len(), limit: cfg.context_len });
    }
    let l = ids.len();
    let d = cfg.embed_dim;
    let (nh, dh) = (cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((l, d));
    for (i, &id) in ids.iter().enumerate() {
        let row = &params.t.wte.row(id as usize) + &params.t.wpe.row(i);
        x.row_mut(i).assign(&row);
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &params.t.layers {
        let x_in = x.clone();
        let ln1 = layernorm(&x_in, &lp.ln1_g, &lp.ln1_b);
        let qkv = ln1.y.dot(&lp.w_qkv) + &lp.b_qkv;
        let mut att = Vec::with_capacity(nh);
        let mut att_out = Array2::zeros((l, d));
        for h in 0..nh {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            causal_softmax_rows(&mut scores);
            let out = scores.dot(&v);
            att_out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
            att.push(scores);
        }
        let proj = att_out.dot(&lp.w_o) + &lp.b_o;
        let x_mid = &x_in + &proj;
        let ln2 = layernorm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let h_pre = ln2.y.dot(&lp.w_fc) + &lp.b_fc;
        let h_act = h_pre.mapv(|v| v.max(0.0));
        let m = h_act.dot(&lp.w_proj) + &lp.b_proj;
        x = &x_mid + &m;
        layers.push(LayerCache { ln1, qkv, att, att_out, ln2, h_pre });
    }

    let ln_f = layernorm(&x, &params.t.ln_f_g, &params.t.ln_f_b);
    let logits = ln_f.y.dot(&params.t.w_head);
    Ok(Cache { ids: ids.to_vec(), base, layers, ln_f, logits })
}

fn log_softmax_row(logits: &Array2<f64>, row: usize) -> (Vec<f64>, f64) {
    let r = logits.row(row);
    let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = r.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    (r.iter().map(|&v| v - lse).collect(), lse)
}

/// Forward over `prompt ++ output` returning per-output-token log-probs plus
/// the cache for a later backward. An empty prompt is modeled as a single
/// BOS token.
pub fn token_logprobs_cached(
    params: &PolicyParams,
    prompt: &[u32],
    output: &[u32],
) -> Result<(Vec<f64>, Cache), PolicyError> {
    check_context(&params.config, prompt, output)?;
    let mut ids: Vec<u32> = if prompt.is_empty() { vec![BOS] } else { prompt.to_vec() };
    let base = ids.len();
    ids.extend_from_slice(output);
    let cache = forward_with_base(params, &ids, base)?;
    let mut lps = Vec::with_capacity(output.len());
    for (t, &tok) in output.iter().enumerate() {
        let (row_lp, _) = log_softmax_row(&cache.logits, base - 1 + t);
        lps.push(row_lp[tok as usize]);
    }
    Ok((lps, cache))
}

/// Gradient of `sum_t weights[t] * log pi(output[t] | .)` with respect to all
/// parameters, using the cached forward pass.
pub fn backward_weighted(
    params: &PolicyParams,
    cache: &Cache,
    output: &[u32],
    weights: &[f64],
) -> Gradients {
    assert_eq!(output.len(), weights.len());
    let cfg = &params.config;
    let l = cache.ids.len();
    let d = cfg.embed_dim;
    let (nh, dh) = (cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = TensorSet::zeros(cfg);

    // d objective / d logits: w_t * (onehot - softmax) at each scored row.
    let mut dlogits = Array2::zeros((l, cfg.vocab_size));
    for (t, (&tok, &w)) in output.iter().zip(weights).enumerate() {
        let row = cache.base - 1 + t;
        let (row_lp, _) = log_softmax_row(&cache.logits, row);
        for j in 0..cfg.vocab_size {
            dlogits[[row, j]] = -w * row_lp[j].exp();
        }
        dlogits[[row, tok as usize]] += w;
    }

    // Head and final norm.
    grads.w_head = cache.ln_f.y.t().dot(&dlogits);
    let dyf = dlogits.dot(&params.t.w_head.t());
    let mut dx = layernorm_backward(
        &cache.ln_f,
        &params.t.ln_f_g,
        &dyf,
        &mut grads.ln_f_g,
        &mut grads.ln_f_b,
    );

    for (li, lp) in params.t.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // MLP sublayer (residual: dx flows both to the branch and through).
        let h_act = lc.h_pre.mapv(|v| v.max(0.0));
        gl.w_proj = h_act.t().dot(&dx);
        gl.b_proj = dx.sum_axis(Axis(0));
        let mut dhid = dx.dot(&lp.w_proj.t());
        ndarray::Zip::from(&mut dhid).and(&lc.h_pre).for_each(|g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        gl.w_fc = lc.ln2.y.t().dot(&dhid);
        gl.b_fc = dhid.sum_axis(Axis(0));
        let dy2 = dhid.dot(&lp.w_fc.t());
        let dx_mid_branch =
            layernorm_backward(&lc.ln2, &lp.ln2_g, &dy2, &mut gl.ln2_g, &mut gl.ln2_b);
        let dx_mid = &dx + &dx_mid_branch;

        // Attention sublayer.
        gl.w_o = lc.att_out.t().dot(&dx_mid);
        gl.b_o = dx_mid.sum_axis(Axis(0));
        let datt_out = dx_mid.dot(&lp.w_o.t());
        let mut dqkv = Array2::zeros((l, 3 * d));
        for h in 0..nh {
            let q = lc.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = lc.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = lc.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let att = &lc.att[h];
            let dout = datt_out.slice(s![.., h * dh..(h + 1) * dh]);

            let dv = att.t().dot(&dout);
            let datt = dout.dot(&v.t());
            // Softmax backward per row; masked entries have zero probability
            // so their gradient vanishes.
            let mut dscores = Array2::zeros((l, l));
            for i in 0..l {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += datt[[i, j]] * att[[i, j]];
                }
                for j in 0..=i {
                    dscores[[i, j]] = att[[i, j]] * (datt[[i, j]] - dot);
                }
            }
            let dq = dscores.dot(&k).mapv(|x| x * scale);
            let dk = dscores.t().dot(&q).mapv(|x| x * scale);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv
                .slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&dv);
        }
        gl.w_qkv = lc.ln1.y.t().dot(&dqkv);
        gl.b_qkv = dqkv.sum_axis(Axis(0));
        let dy1 = dqkv.dot(&lp.w_qkv.t());
        let dx_in_branch =
            layernorm_backward(&lc.ln1, &lp.ln1_g, &dy1, &mut gl.ln1_g, &mut gl.ln1_b);
        dx = &dx_mid + &dx_in_branch;
    }

    // Embeddings.
    for (i, &id) in cache.ids.iter().enumerate() {
        let mut wte_row = grads.wte.row_mut(id as usize);
        wte_row += &dx.row(i);
        let mut wpe_row = grads.wpe.row_mut(i);
        wpe_row += &dx.row(i);
    }
    grads
}
