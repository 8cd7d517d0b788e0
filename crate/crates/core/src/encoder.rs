//! Small trainable transformer encoder with a masked-language-modeling
//! head and exact manually derived gradients.
//!
//! Pre-layer normalization, learned absolute position embeddings, ReLU
//! feedforward, MLM output projection tied to the token embedding. All
//! parameters live in a flat named-tensor list (see [`tensor_specs`]) so the
//! optimizer, the checkpoint container and the finite-difference oracles can
//! iterate them uniformly.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("window length {0} exceeds max_positions {1}")]
    WindowTooLong(usize, usize),
    #[error("no positions were masked (after one resample)")]
    NothingMasked,
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub feedforward_dim: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_positions() -> usize {
    512
}

impl EncoderConfig {
    /// Desk-scale default used by the test suites: d=64, h=4, L=2.
    pub fn small(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            vocab_size,
            model_dim: 64,
            num_heads: 4,
            num_layers: 2,
            feedforward_dim: 128,
            max_positions: 512,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0
            || self.num_heads == 0
            || self.num_layers == 0
            || self.feedforward_dim == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return Err(EncoderError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// BERT-style masking policy. The three replacement fractions must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_prob: f64,
    pub replace_mask_frac: f64,
    pub replace_random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            mask_prob: 0.15,
            replace_mask_frac: 0.8,
            replace_random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let sum = self.replace_mask_frac + self.replace_random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 || !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(EncoderError::InvalidConfig(
                "mask fractions must sum to 1 and mask_prob must be a probability".into(),
            ));
        }
        Ok(())
    }
}

// Flat tensor layout: tok_emb, pos_emb, 16 tensors per layer, final
// layernorm, MLM bias.
pub const TOK_EMB: usize = 0;
pub const POS_EMB: usize = 1;
const PER_LAYER: usize = 16;
// Relative offsets within a layer block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

fn layer_base(layer: usize) -> usize {
    2 + layer * PER_LAYER
}

/// Named tensor index for the config, in checkpoint payload order.
pub fn tensor_specs(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let ff = cfg.feedforward_dim;
    let mut specs = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.max_positions, d]),
    ];
    for l in 0..cfg.num_layers {
        let layer_specs: [(&str, Vec<usize>); PER_LAYER] = [
            ("ln1_g", vec![d]),
            ("ln1_b", vec![d]),
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln2_g", vec![d]),
            ("ln2_b", vec![d]),
            ("w1", vec![d, ff]),
            ("b1", vec![ff]),
            ("w2", vec![ff, d]),
            ("b2", vec![d]),
        ];
        for (name, shape) in layer_specs {
            specs.push((format!("layer{l}.{name}"), shape));
        }
    }
    specs.push(("lnf_g".to_string(), vec![d]));
    specs.push(("lnf_b".to_string(), vec![d]));
    specs.push(("mlm_bias".to_string(), vec![cfg.vocab_size]));
    specs
}

/// Total trainable parameter count; a pure function of the config.
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    tensor_specs(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<S: Scalar> {
    pub config: EncoderConfig,
    /// One flat buffer per tensor, in `tensor_specs` order.
    pub params: Vec<Vec<S>>,
}

/// Parameter-shaped gradient buffers.
pub type Gradients<S> = Vec<Vec<S>>;

pub fn zero_gradients<S: Scalar>(cfg: &EncoderConfig) -> Gradients<S> {
    tensor_specs(cfg)
        .iter()
        .map(|(_, shape)| vec![S::zero(); shape.iter().product()])
        .collect()
}

impl<S: Scalar> EncoderModel<S> {
    fn t(&self, idx: usize) -> &[S] {
        &self.params[idx]
    }

    fn lt(&self, layer: usize, offset: usize) -> &[S] {
        &self.params[layer_base(layer) + offset]
    }

    fn lnf_g_idx(&self) -> usize {
        2 + self.config.num_layers * PER_LAYER
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|t| t.iter().all(|v| v.to_f64_().is_finite()))
    }
}

/// Deterministic seeded initialization: scaled-uniform matrices and
/// embeddings, zero biases, unit normalization gains.
pub fn init_encoder<S: Scalar>(cfg: &EncoderConfig) -> Result<EncoderModel<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = tensor_specs(cfg)
        .iter()
        .map(|(name, shape)| {
            let size: usize = shape.iter().product();
            let is_gain = name.ends_with("ln1_g") || name.ends_with("ln2_g") || name == "lnf_g";
            if is_gain {
                vec![S::one(); size]
            } else if shape.len() == 1 {
                vec![S::zero(); size]
            } else if name.ends_with("emb") {
                (0..size)
                    .map(|_| S::from_f64(rng.gen_range(-0.1..0.1)))
                    .collect()
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..size)
                    .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            }
        })
        .collect();
    Ok(EncoderModel {
        config: cfg.clone(),
        params,
    })
}

// y[n x dout] = x[n x din] * w[din x dout] + b
fn linear<S: Scalar>(x: &[S], w: &[S], b: &[S], n: usize, din: usize, dout: usize) -> Vec<S> {
    let mut y = vec![S::zero(); n * dout];
    for t in 0..n {
        for j in 0..dout {
            let mut acc = b[j];
            for i in 0..din {
                acc = acc + x[t * din + i] * w[i * dout + j];
            }
            y[t * dout + j] = acc;
        }
    }
    y
}

fn linear_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    n: usize,
    din: usize,
    dout: usize,
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    for t in 0..n {
        for j in 0..dout {
            let g = dy[t * dout + j];
            db[j] = db[j] + g;
            for i in 0..din {
                dw[i * dout + j] = dw[i * dout + j] + x[t * din + i] * g;
                dx[t * din + i] = dx[t * din + i] + w[i * dout + j] * g;
            }
        }
    }
}

struct LayerNormCache<S> {
    out: Vec<S>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm<S: Scalar>(x: &[S], g: &[S], b: &[S], n: usize, d: usize) -> LayerNormCache<S> {
    let mut out = vec![S::zero(); n * d];
    let mut mean = vec![0.0; n];
    let mut inv_std = vec![0.0; n];
    for t in 0..n {
        let row = &x[t * d..(t + 1) * d];
        let mu: f64 = row.iter().map(|v| v.to_f64_()).sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v.to_f64_() - mu).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[t] = mu;
        inv_std[t] = r;
        for i in 0..d {
            let xhat = (row[i].to_f64_() - mu) * r;
            out[t * d + i] = S::from_f64(xhat) * g[i] + b[i];
        }
    }
    LayerNormCache { out, mean, inv_std }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<S: Scalar>(
    x: &[S],
    g: &[S],
    cache: &LayerNormCache<S>,
    dy: &[S],
    n: usize,
    d: usize,
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    for t in 0..n {
        let mu = cache.mean[t];
        let r = cache.inv_std[t];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for i in 0..d {
            xhat[i] = (x[t * d + i].to_f64_() - mu) * r;
            let dyi = dy[t * d + i].to_f64_();
            dxhat[i] = dyi * g[i].to_f64_();
            dg[i] = dg[i] + S::from_f64(dyi * xhat[i]);
            db[i] = db[i] + dy[t * d + i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        for i in 0..d {
            let v = r * (dxhat[i] - sum_dxhat / d as f64 - xhat[i] * sum_dxhat_xhat / d as f64);
            dx[t * d + i] = dx[t * d + i] + S::from_f64(v);
        }
    }
}

struct LayerCache<S> {
    x: Vec<S>,
    ln1: LayerNormCache<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// Softmaxed attention weights, `[heads][n * n]`.
    attn: Vec<Vec<f64>>,
    ctx: Vec<S>,
    drop1: Option<Vec<S>>,
    x2: Vec<S>,
    ln2: LayerNormCache<S>,
    mid: Vec<S>,
    drop2: Option<Vec<S>>,
}

pub struct EncodeCache<S: Scalar> {
    ids: Vec<u32>,
    layers: Vec<LayerCache<S>>,
    pre_lnf: Vec<S>,
    lnf: LayerNormCache<S>,
}

impl<S: Scalar> EncodeCache<S> {
    /// Final per-position representations, `[n * model_dim]`.
    pub fn output(&self) -> &[S] {
        &self.lnf.out
    }
}

fn dropout_mask<S: Scalar>(rate: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<S> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < rate {
                S::zero()
            } else {
                S::from_f64(keep)
            }
        })
        .collect()
}

fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &f) in x.iter_mut().zip(m) {
            *v = *v * f;
        }
    }
}

/// Forward pass with cached intermediates for the backward pass. When `rng`
/// is given and `dropout_rate > 0`, fresh dropout masks are drawn and kept
/// in the cache so the gradients are exact for the evaluated loss.
pub fn encode_with_cache<S: Scalar>(
    model: &EncoderModel<S>,
    ids: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodeCache<S>> {
    let cfg = &model.config;
    let n = ids.len();
    let d = cfg.model_dim;
    let h = cfg.num_heads;
    let dh = d / h;
    let ff = cfg.feedforward_dim;
    if n > cfg.max_positions {
        return Err(EncoderError::WindowTooLong(n, cfg.max_positions));
    }
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let tok = model.t(TOK_EMB);
    let pos = model.t(POS_EMB);
    let mut x = vec![S::zero(); n * d];
    for t in 0..n {
        let id = ids[t] as usize;
        for i in 0..d {
            x[t * d + i] = tok[id * d + i] + pos[t * d + i];
        }
    }

    let use_dropout = cfg.dropout_rate > 0.0 && rng.is_some();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let ln1 = layer_norm(&x, model.lt(l, LN1_G), model.lt(l, LN1_B), n, d);
        let q = linear(&ln1.out, model.lt(l, WQ), model.lt(l, BQ), n, d, d);
        let k = linear(&ln1.out, model.lt(l, WK), model.lt(l, BK), n, d, d);
        let v = linear(&ln1.out, model.lt(l, WV), model.lt(l, BV), n, d, d);

        let mut attn = Vec::with_capacity(h);
        let mut ctx = vec![S::zero(); n * d];
        for head in 0..h {
            let off = head * dh;
            let mut weights = vec![0.0f64; n * n];
            for i in 0..n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let mut dot = S::zero();
                    for c in 0..dh {
                        dot = dot + q[i * d + off + c] * k[j * d + off + c];
                    }
                    let s = (dot * scale).to_f64_();
                    weights[i * n + j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (weights[i * n + j] - max).exp();
                    weights[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    weights[i * n + j] /= sum;
                    let a = S::from_f64(weights[i * n + j]);
                    for c in 0..dh {
                        ctx[i * d + off + c] = ctx[i * d + off + c] + a * v[j * d + off + c];
                    }
                }
            }
            attn.push(weights);
        }

        let mut proj = linear(&ctx, model.lt(l, WO), model.lt(l, BO), n, d, d);
        let drop1 = if use_dropout {
            Some(dropout_mask::<S>(cfg.dropout_rate, n * d, rng.as_deref_mut().unwrap()))
        } else {
            None
        };
        apply_mask(&mut proj, &drop1);
        let mut x2 = x.clone();
        for i in 0..n * d {
            x2[i] = x2[i] + proj[i];
        }

        let ln2 = layer_norm(&x2, model.lt(l, LN2_G), model.lt(l, LN2_B), n, d);
        let mut mid = linear(&ln2.out, model.lt(l, W1), model.lt(l, B1), n, d, ff);
        for v in mid.iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let mut ffn = linear(&mid, model.lt(l, W2), model.lt(l, B2), n, ff, d);
        let drop2 = if use_dropout {
            Some(dropout_mask::<S>(cfg.dropout_rate, n * d, rng.as_deref_mut().unwrap()))
        } else {
            None
        };
        apply_mask(&mut ffn, &drop2);
        let mut out = x2.clone();
        for i in 0..n * d {
            out[i] = out[i] + ffn[i];
        }

        layers.push(LayerCache {
            x: std::mem::replace(&mut x, out),
            ln1,
            q,
            k,
            v,
            attn,
            ctx,
            drop1,
            x2,
            ln2,
            mid,
            drop2,
        });
    }

    let lnf_idx = model.lnf_g_idx();
    let lnf = layer_norm(&x, model.t(lnf_idx), model.t(lnf_idx + 1), n, d);
    Ok(EncodeCache {
        ids: ids.to_vec(),
        layers,
        pre_lnf: x,
        lnf,
    })
}

/// Evaluation-mode encode: one representation per position, deterministic
/// (dropout disabled).
pub fn encode<S: Scalar>(model: &EncoderModel<S>, ids: &[u32]) -> Result<Vec<S>> {
    Ok(encode_with_cache(model, ids, None)?.lnf.out)
}

/// Backpropagates `d_out` (gradient at the final representations) through
/// the cached forward pass, accumulating into `grads`.
pub fn encode_backward<S: Scalar>(
    model: &EncoderModel<S>,
    cache: &EncodeCache<S>,
    d_out: &[S],
    grads: &mut Gradients<S>,
) {
    let cfg = &model.config;
    let n = cache.ids.len();
    let d = cfg.model_dim;
    let h = cfg.num_heads;
    let dh = d / h;
    let ff = cfg.feedforward_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let lnf_idx = model.lnf_g_idx();

    let mut dx = vec![S::zero(); n * d];
    {
        let (left, right) = grads.split_at_mut(lnf_idx + 1);
        layer_norm_backward(
            &cache.pre_lnf,
            model.t(lnf_idx),
            &cache.lnf,
            d_out,
            n,
            d,
            &mut dx,
            &mut left[lnf_idx],
            &mut right[0],
        );
    }

    for l in (0..cfg.num_layers).rev() {
        let lc = &cache.layers[l];
        let base = layer_base(l);

        // out = x2 + drop2(ffn)
        let mut d_ffn = dx.clone();
        apply_mask(&mut d_ffn, &lc.drop2);
        let mut d_mid = vec![S::zero(); n * ff];
        {
            let (a, b) = grads.split_at_mut(base + B2);
            linear_backward(
                &lc.mid,
                model.lt(l, W2),
                &d_ffn,
                n,
                ff,
                d,
                &mut d_mid,
                &mut a[base + W2],
                &mut b[0],
            );
        }
        for i in 0..n * ff {
            if lc.mid[i] <= S::zero() {
                d_mid[i] = S::zero();
            }
        }
        let mut d_ln2 = vec![S::zero(); n * d];
        {
            let (a, b) = grads.split_at_mut(base + B1);
            linear_backward(
                &lc.ln2.out,
                model.lt(l, W1),
                &d_mid,
                n,
                d,
                ff,
                &mut d_ln2,
                &mut a[base + W1],
                &mut b[0],
            );
        }
        let mut d_x2 = dx; // residual path
        {
            let (a, b) = grads.split_at_mut(base + LN2_B);
            layer_norm_backward(
                &lc.x2,
                model.lt(l, LN2_G),
                &lc.ln2,
                &d_ln2,
                n,
                d,
                &mut d_x2,
                &mut a[base + LN2_G],
                &mut b[0],
            );
        }

        // x2 = x + drop1(proj)
        let mut d_proj = d_x2.clone();
        apply_mask(&mut d_proj, &lc.drop1);
        let mut d_ctx = vec![S::zero(); n * d];
        {
            let (a, b) = grads.split_at_mut(base + BO);
            linear_backward(
                &lc.ctx,
                model.lt(l, WO),
                &d_proj,
                n,
                d,
                d,
                &mut d_ctx,
                &mut a[base + WO],
                &mut b[0],
            );
        }

        let mut d_q = vec![S::zero(); n * d];
        let mut d_k = vec![S::zero(); n * d];
        let mut d_v = vec![S::zero(); n * d];
        for head in 0..h {
            let off = head * dh;
            let weights = &lc.attn[head];
            for i in 0..n {
                // d_attn and softmax backward for row i.
                let mut d_a = vec![0.0f64; n];
                for j in 0..n {
                    let mut dot = S::zero();
                    for c in 0..dh {
                        dot = dot + d_ctx[i * d + off + c] * lc.v[j * d + off + c];
                        d_v[j * d + off + c] = d_v[j * d + off + c]
                            + S::from_f64(weights[i * n + j]) * d_ctx[i * d + off + c];
                    }
                    d_a[j] = dot.to_f64_();
                }
                let dot_sum: f64 = (0..n).map(|j| d_a[j] * weights[i * n + j]).sum();
                for j in 0..n {
                    let ds = weights[i * n + j] * (d_a[j] - dot_sum) * scale;
                    let ds = S::from_f64(ds);
                    for c in 0..dh {
                        d_q[i * d + off + c] = d_q[i * d + off + c] + ds * lc.k[j * d + off + c];
                        d_k[j * d + off + c] = d_k[j * d + off + c] + ds * lc.q[i * d + off + c];
                    }
                }
            }
        }

        let mut d_ln1 = vec![S::zero(); n * d];
        {
            let (a, b) = grads.split_at_mut(base + BQ);
            linear_backward(
                &lc.ln1.out,
                model.lt(l, WQ),
                &d_q,
                n,
                d,
                d,
                &mut d_ln1,
                &mut a[base + WQ],
                &mut b[0],
            );
        }
        {
            let (a, b) = grads.split_at_mut(base + BK);
            linear_backward(
                &lc.ln1.out,
                model.lt(l, WK),
                &d_k,
                n,
                d,
                d,
                &mut d_ln1,
                &mut a[base + WK],
                &mut b[0],
            );
        }
        {
            let (a, b) = grads.split_at_mut(base + BV);
            linear_backward(
                &lc.ln1.out,
                model.lt(l, WV),
                &d_v,
                n,
                d,
                d,
                &mut d_ln1,
                &mut a[base + WV],
                &mut b[0],
            );
        }
        let mut d_x = d_x2; // residual path
        {
            let (a, b) = grads.split_at_mut(base + LN1_B);
            layer_norm_backward(
                &lc.x,
                model.lt(l, LN1_G),
                &lc.ln1,
                &d_ln1,
                n,
                d,
                &mut d_x,
                &mut a[base + LN1_G],
                &mut b[0],
            );
        }
        dx = d_x;
    }

    // Embedding gradients.
    for t in 0..n {
        let id = cache.ids[t] as usize;
        for i in 0..d {
            grads[TOK_EMB][id * d + i] = grads[TOK_EMB][id * d + i] + dx[t * d + i];
            grads[POS_EMB][t * d + i] = grads[POS_EMB][t * d + i] + dx[t * d + i];
        }
    }
}

/// One MLM training example: corrupted input ids plus the original ids at
/// the positions the loss is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub inputs: Vec<u32>,
    /// `Some(original_id)` at masked positions.
    pub targets: Vec<Option<u32>>,
}

/// Applies the 80/10/10 masking policy to a batch. If no position was
/// selected, the whole batch is resampled once; a second empty draw is an
/// error.
pub fn apply_mask_policy(
    batch: &[Vec<u32>],
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskedSequence>> {
    policy.validate()?;
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    for attempt in 0..2 {
        let mut out = Vec::with_capacity(batch.len());
        let mut any = false;
        for seq in batch {
            let mut inputs = seq.clone();
            let mut targets = vec![None; seq.len()];
            for (t, &id) in seq.iter().enumerate() {
                if rng.gen_range(0.0..1.0) < policy.mask_prob {
                    any = true;
                    targets[t] = Some(id);
                    let r = rng.gen_range(0.0..1.0);
                    if r < policy.replace_mask_frac {
                        inputs[t] = crate::subword::MASK_ID;
                    } else if r < policy.replace_mask_frac + policy.replace_random_frac {
                        let lo = crate::subword::NUM_SPECIALS as u32;
                        inputs[t] = if vocab_size as u32 > lo {
                            rng.gen_range(lo..vocab_size as u32)
                        } else {
                            rng.gen_range(0..vocab_size as u32)
                        };
                    }
                }
            }
            out.push(MaskedSequence { inputs, targets });
        }
        if any {
            return Ok(out);
        }
        if attempt == 1 {
            break;
        }
    }
    Err(EncoderError::NothingMasked)
}

/// Mean cross-entropy over the masked positions of a batch, with exact
/// parameter gradients (including both tied uses of the token embedding).
pub fn mlm_loss_and_grads<S: Scalar>(
    model: &EncoderModel<S>,
    batch: &[MaskedSequence],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients<S>)> {
    let cfg = &model.config;
    let d = cfg.model_dim;
    let vocab = cfg.vocab_size;
    let total_masked: usize = batch
        .iter()
        .map(|s| s.targets.iter().filter(|t| t.is_some()).count())
        .sum();
    if total_masked == 0 {
        return Err(EncoderError::NothingMasked);
    }
    let inv = 1.0 / total_masked as f64;
    let mut grads = zero_gradients::<S>(cfg);
    let mut loss = 0.0;
    let mut rng = rng;
    let mlm_bias_idx = model.params.len() - 1;
    for seq in batch {
        let cache = encode_with_cache(model, &seq.inputs, rng.as_deref_mut())?;
        let reps = cache.output().to_vec();
        let n = seq.inputs.len();
        let mut d_reps = vec![S::zero(); n * d];
        for t in 0..n {
            let Some(target) = seq.targets[t] else { continue };
            // logits = rep . tok_emb^T + mlm_bias, softmax in f64.
            let tok = model.t(TOK_EMB);
            let bias = model.t(mlm_bias_idx);
            let mut logits = vec![0.0f64; vocab];
            for v in 0..vocab {
                let mut acc = bias[v].to_f64_();
                for i in 0..d {
                    acc += reps[t * d + i].to_f64_() * tok[v * d + i].to_f64_();
                }
                logits[v] = acc;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += (log_sum - logits[target as usize]) * inv;
            for v in 0..vocab {
                let mut p = (logits[v] - max).exp() / (log_sum - max).exp();
                if v == target as usize {
                    p -= 1.0;
                }
                let g = S::from_f64(p * inv);
                grads[mlm_bias_idx][v] = grads[mlm_bias_idx][v] + g;
                for i in 0..d {
                    d_reps[t * d + i] = d_reps[t * d + i] + g * model.t(TOK_EMB)[v * d + i];
                    grads[TOK_EMB][v * d + i] =
                        grads[TOK_EMB][v * d + i] + g * reps[t * d + i];
                }
            }
        }
        encode_backward(model, &cache, &d_reps, &mut grads);
    }
    Ok((loss, grads))
}

/// Draws masks and evaluates one MLM step: `(loss, grads)` for the batch.
pub fn mlm_step<S: Scalar>(
    model: &EncoderModel<S>,
    batch: &[Vec<u32>],
    policy: &MaskPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients<S>)> {
    let masked = apply_mask_policy(batch, policy, model.config.vocab_size, rng)?;
    mlm_loss_and_grads(model, &masked, Some(rng))
}
