//! Latent Transformer over token sequences.
//!
//! `tokens → RMSNorm → Linear → [CLS; ·] → RMSNorm → blocks → RMSNorm → CLS → head`.
//! Each block is pre-norm: GQA attention with rotary positions, then a SwiGLU MLP.
//! Weights are f64 and gradients are computed by hand-written backward passes.

pub mod attention;
pub mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use attention::{gqa_attention, gqa_attention_backward, AttentionOutput, RopeTable, ROPE_BASE};
use layers::{matmul, matmul_backward, rmsnorm, rmsnorm_backward, silu, silu_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadKind {
    /// One raw logit.
    #[default]
    Binary,
    /// One real value.
    Regression,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Binary => "binary",
            HeadKind::Regression => "regression",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "classification" => Ok(HeadKind::Binary),
            "regression" => Ok(HeadKind::Regression),
            other => Err(config_err!("unknown head kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub dim: usize,
    /// Input token dimension.
    pub d_token: usize,
    /// Frames per forward pass during training.
    pub t_frames: usize,
    pub tokens_per_frame: usize,
    pub head: HeadKind,
    /// SwiGLU hidden width as a multiple of `dim`.
    pub mlp_ratio: f64,
    /// Rotary positions on/off. Off makes the encoder permutation-equivariant.
    pub rope: bool,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            heads: 14,
            kv_heads: 2,
            dim: 448,
            d_token: 3072,
            t_frames: 256,
            tokens_per_frame: 27,
            head: HeadKind::Binary,
            mlp_ratio: 4.0,
            rope: true,
            rope_base: ROPE_BASE,
        }
    }
}

impl ModelConfig {
    /// Small model for tests and desk-scale runs.
    pub fn tiny(d_token: usize, tokens_per_frame: usize) -> Self {
        Self { layers: 2, heads: 4, kv_heads: 2, dim: 16, d_token, t_frames: 2, tokens_per_frame, mlp_ratio: 2.0, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (math::round(self.dim as f64 * self.mlp_ratio) as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.d_token == 0 || self.tokens_per_frame == 0 || self.t_frames == 0 {
            return Err(config_err!("layers, dim, d_token, tokens_per_frame and t_frames must be positive"));
        }
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(config_err!("heads ({}) must be a positive multiple of kv_heads ({})", self.heads, self.kv_heads));
        }
        if self.dim % self.heads != 0 {
            return Err(config_err!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return Err(config_err!("rotary dimension {} must be even", self.head_dim()));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || !(self.rope_base > 1.0) {
            return Err(config_err!("mlp_ratio must be positive and rope_base > 1"));
        }
        Ok(())
    }
}

/// A named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name, shape: shape.to_vec(), data }
    }

    /// Matrices get weight decay; vectors (norm scales, biases, CLS) do not.
    pub fn decays(&self) -> bool {
        self.shape.len() >= 2
    }
}

/// Gradient buffers parallel to a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[Param]) -> Self {
        Self { data: params.iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.data.iter().flatten().map(|g| g * g).sum())
    }
}

// Parameter slots inside a block, relative to its base index.
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const MLP_NORM: usize = 5;
const W1: usize = 6;
const W3: usize = 7;
const W2: usize = 8;
const BLOCK_PARAMS: usize = 9;

const INPUT_NORM: usize = 0;
const INPUT_PROJ: usize = 1;
const CLS: usize = 2;
const EMBED_NORM: usize = 3;
const FIRST_BLOCK: usize = 4;

struct BlockTape {
    h_in: Vec<f64>,
    n1: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: AttentionOutput,
    h_mid: Vec<f64>,
    n2: Vec<f64>,
    inv2: Vec<f64>,
    u1: Vec<f64>,
    u3: Vec<f64>,
    gated: Vec<f64>,
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct Tape {
    rows: usize,
    with_cls: bool,
    x: Vec<f64>,
    a0: Vec<f64>,
    inv0: Vec<f64>,
    seq: Vec<f64>,
    inv_seq: Vec<f64>,
    rope: Option<RopeTable>,
    blocks: Vec<BlockTape>,
    h_last: Vec<f64>,
    inv_last: Vec<f64>,
    /// Final normalized hidden states `(L, dim)`.
    pub output: Vec<f64>,
}

impl Tape {
    /// Sequence length including CLS when present.
    pub fn len(&self) -> usize {
        self.rows + self.with_cls as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainTransformer {
    config: ModelConfig,
    params: Vec<Param>,
}

impl BrainTransformer {
    /// Random initialization; the prediction head starts at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        let (d, dt, hd) = (config.dim, config.d_token, config.head_dim());
        let (qd, kvd, hid) = (config.heads * hd, config.kv_heads * hd, config.hidden_dim());
        let residual_scale = 1.0 / math::sqrt(2.0 * config.layers as f64);
        let fan = |n: usize| 1.0 / math::sqrt(n as f64);
        let mut params = vec![
            Param::new("input_norm.weight".into(), &[dt], vec![1.0; dt]),
            Param::new("input_proj.weight".into(), &[dt, d], normal(dt * d, fan(dt))),
            Param::new("cls".into(), &[d], normal(d, 1.0)),
            Param::new("embed_norm.weight".into(), &[d], vec![1.0; d]),
        ];
        for l in 0..config.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            params.push(Param::new(p("attn_norm.weight"), &[d], vec![1.0; d]));
            params.push(Param::new(p("attn.wq"), &[d, qd], normal(d * qd, fan(d))));
            params.push(Param::new(p("attn.wk"), &[d, kvd], normal(d * kvd, fan(d))));
            params.push(Param::new(p("attn.wv"), &[d, kvd], normal(d * kvd, fan(d))));
            params.push(Param::new(p("attn.wo"), &[qd, d], normal(qd * d, fan(qd) * residual_scale)));
            params.push(Param::new(p("mlp_norm.weight"), &[d], vec![1.0; d]));
            params.push(Param::new(p("mlp.w1"), &[d, hid], normal(d * hid, fan(d))));
            params.push(Param::new(p("mlp.w3"), &[d, hid], normal(d * hid, fan(d))));
            params.push(Param::new(p("mlp.w2"), &[hid, d], normal(hid * d, fan(hid) * residual_scale)));
        }
        params.push(Param::new("final_norm.weight".into(), &[d], vec![1.0; d]));
        params.push(Param::new("head.weight".into(), &[d], vec![0.0; d]));
        params.push(Param::new("head.bias".into(), &[1], vec![0.0]));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named parameters (e.g. a checkpoint); names and shapes must match.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(shape_err!("expected {} parameters, got {}", template.params.len(), params.len()));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.shape != p.shape || p.data.len() != t.data.len() {
                return Err(shape_err!("parameter {} {:?} does not match expected {} {:?}", p.name, p.shape, t.name, t.shape));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params)
    }

    /// Copies every parameter except `head.*` from `src`. Returns the copied names.
    pub fn load_encoder_from(&mut self, src: &BrainTransformer) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for p in self.params.iter_mut().filter(|p| !p.name.starts_with("head.")) {
            let s = src.param(&p.name).ok_or_else(|| shape_err!("source model lacks parameter {}", p.name))?;
            if s.shape != p.shape {
                return Err(shape_err!("parameter {} has shape {:?} in source, {:?} here", p.name, s.shape, p.shape));
            }
            p.data.clone_from(&s.data);
            copied.push(p.name.clone());
        }
        Ok(copied)
    }

    fn block(&self, l: usize, slot: usize) -> &[f64] {
        &self.params[FIRST_BLOCK + l * BLOCK_PARAMS + slot].data
    }

    fn tail(&self, k: usize) -> usize {
        FIRST_BLOCK + self.config.layers * BLOCK_PARAMS + k
    }

    fn check_tokens(&self, len: usize) -> Result<usize> {
        let dt = self.config.d_token;
        if len == 0 || len % dt != 0 {
            return Err(shape_err!("token buffer of {len} values is not a positive multiple of d_token {dt}"));
        }
        Ok(len / dt)
    }

    /// Normalized, projected input with the CLS row prepended, before the
    /// post-CLS normalization: `(rows + 1, dim)`.
    pub fn project_input(&self, tokens: &[f64]) -> Result<Vec<f64>> {
        self.check_tokens(tokens.len())?;
        let (a0, _) = rmsnorm(tokens, &self.params[INPUT_NORM].data);
        let e = matmul(&a0, &self.params[INPUT_PROJ].data, self.config.d_token, self.config.dim);
        let mut seq = self.params[CLS].data.clone();
        seq.extend_from_slice(&e);
        Ok(seq)
    }

    /// Embedded sequence fed to the first block: `(rows + 1, dim)`.
    pub fn embed_input(&self, tokens: &[f64]) -> Result<Vec<f64>> {
        let seq = self.project_input(tokens)?;
        Ok(rmsnorm(&seq, &self.params[EMBED_NORM].data).0)
    }

    fn positions(rows: usize, with_cls: bool) -> Vec<f64> {
        // CLS sits at 0 and token row r at r + 1, with or without CLS present.
        let start = if with_cls { 0 } else { 1 };
        (start..=rows).map(|p| p as f64).collect()
    }

    /// Runs the encoder over `rows` tokens (`rows × d_token` values).
    pub fn encoder_forward(&self, tokens: &[f64], with_cls: bool) -> Result<Tape> {
        let rows = self.check_tokens(tokens.len())?;
        let c = &self.config;
        let (d, hd) = (c.dim, c.head_dim());
        let (a0, inv0) = rmsnorm(tokens, &self.params[INPUT_NORM].data);
        let e = matmul(&a0, &self.params[INPUT_PROJ].data, c.d_token, d);
        let seq = if with_cls {
            let mut s = self.params[CLS].data.clone();
            s.extend_from_slice(&e);
            s
        } else {
            e
        };
        let len = seq.len() / d;
        let (mut h, inv_seq) = rmsnorm(&seq, &self.params[EMBED_NORM].data);
        let rope = if c.rope { Some(RopeTable::new(&Self::positions(rows, with_cls), hd, c.rope_base)?) } else { None };
        let mut blocks = Vec::with_capacity(c.layers);
        let (qd, kvd, hid) = (c.heads * hd, c.kv_heads * hd, c.hidden_dim());
        for l in 0..c.layers {
            let (n1, inv1) = rmsnorm(&h, self.block(l, ATTN_NORM));
            let mut q = matmul(&n1, self.block(l, WQ), d, qd);
            let mut k = matmul(&n1, self.block(l, WK), d, kvd);
            let v = matmul(&n1, self.block(l, WV), d, kvd);
            if let Some(r) = &rope {
                r.apply(&mut q, c.heads, false);
                r.apply(&mut k, c.kv_heads, false);
            }
            let attn = gqa_attention(&q, &k, &v, len, c.heads, c.kv_heads, hd)?;
            let a = matmul(&attn.context, self.block(l, WO), qd, d);
            let h_mid: Vec<f64> = h.iter().zip(&a).map(|(x, y)| x + y).collect();
            let (n2, inv2) = rmsnorm(&h_mid, self.block(l, MLP_NORM));
            let u1 = matmul(&n2, self.block(l, W1), d, hid);
            let u3 = matmul(&n2, self.block(l, W3), d, hid);
            let gated: Vec<f64> = u1.iter().zip(&u3).map(|(&a, &b)| silu(a) * b).collect();
            let m = matmul(&gated, self.block(l, W2), hid, d);
            let h_out: Vec<f64> = h_mid.iter().zip(&m).map(|(x, y)| x + y).collect();
            blocks.push(BlockTape { h_in: core::mem::replace(&mut h, h_out), n1, inv1, q, k, v, attn, h_mid, n2, inv2, u1, u3, gated });
        }
        let (output, inv_last) = rmsnorm(&h, &self.params[self.tail(0)].data);
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in encoder output".into()));
        }
        Ok(Tape { rows, with_cls, x: tokens.to_vec(), a0, inv0, seq, inv_seq, rope, blocks, h_last: h, inv_last, output })
    }

    /// Backpropagates `grad_output` (`(L, dim)`, matching `tape.output`) into
    /// `grads` and returns the gradient w.r.t. the input tokens.
    pub fn encoder_backward(&self, tape: &Tape, grad_output: &[f64], grads: &mut Gradients) -> Result<Vec<f64>> {
        let c = &self.config;
        let (d, hd) = (c.dim, c.head_dim());
        let (qd, kvd, hid) = (c.heads * hd, c.kv_heads * hd, c.hidden_dim());
        let len = tape.len();
        if grad_output.len() != len * d {
            return Err(shape_err!("output gradient has {} values, expected {}", grad_output.len(), len * d));
        }
        let fin = self.tail(0);
        let mut gh = rmsnorm_backward(&tape.h_last, &self.params[fin].data, &tape.inv_last, grad_output, &mut grads.data[fin]);
        for l in (0..c.layers).rev() {
            let b = &tape.blocks[l];
            let base = FIRST_BLOCK + l * BLOCK_PARAMS;
            // MLP
            let gg = matmul_backward(&b.gated, self.block(l, W2), &gh, hid, d, &mut grads.data[base + W2]);
            let mut gu1 = vec![0.0; gg.len()];
            let mut gu3 = vec![0.0; gg.len()];
            for i in 0..gg.len() {
                gu1[i] = gg[i] * b.u3[i] * silu_grad(b.u1[i]);
                gu3[i] = gg[i] * silu(b.u1[i]);
            }
            let mut gn2 = matmul_backward(&b.n2, self.block(l, W1), &gu1, d, hid, &mut grads.data[base + W1]);
            let g3 = matmul_backward(&b.n2, self.block(l, W3), &gu3, d, hid, &mut grads.data[base + W3]);
            gn2.iter_mut().zip(&g3).for_each(|(a, b)| *a += b);
            let gm = rmsnorm_backward(&b.h_mid, self.block(l, MLP_NORM), &b.inv2, &gn2, &mut grads.data[base + MLP_NORM]);
            gh.iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
            // attention
            let gctx = matmul_backward(&b.attn.context, self.block(l, WO), &gh, qd, d, &mut grads.data[base + WO]);
            let (mut gq, mut gk, gv) = gqa_attention_backward(&b.q, &b.k, &b.v, &b.attn, &gctx, len, c.heads, c.kv_heads, hd)?;
            if let Some(r) = &tape.rope {
                r.apply(&mut gq, c.heads, true);
                r.apply(&mut gk, c.kv_heads, true);
            }
            let mut gn1 = matmul_backward(&b.n1, self.block(l, WQ), &gq, d, qd, &mut grads.data[base + WQ]);
            for (w, g, slot) in [(WK, &gk, WK), (WV, &gv, WV)] {
                let t = matmul_backward(&b.n1, self.block(l, w), g, d, kvd, &mut grads.data[base + slot]);
                gn1.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
            }
            let ga = rmsnorm_backward(&b.h_in, self.block(l, ATTN_NORM), &b.inv1, &gn1, &mut grads.data[base + ATTN_NORM]);
            gh.iter_mut().zip(&ga).for_each(|(a, b)| *a += b);
        }
        let gseq = rmsnorm_backward(&tape.seq, &self.params[EMBED_NORM].data, &tape.inv_seq, &gh, &mut grads.data[EMBED_NORM]);
        let ge = if tape.with_cls {
            grads.data[CLS].iter_mut().zip(&gseq[..d]).for_each(|(a, b)| *a += b);
            &gseq[d..]
        } else {
            &gseq[..]
        };
        let ga0 = matmul_backward(&tape.a0, &self.params[INPUT_PROJ].data, ge, c.d_token, d, &mut grads.data[INPUT_PROJ]);
        Ok(rmsnorm_backward(&tape.x, &self.params[INPUT_NORM].data, &tape.inv0, &ga0, &mut grads.data[INPUT_NORM]))
    }

    fn head_apply(&self, cls_row: &[f64]) -> f64 {
        math::dot(cls_row, &self.params[self.tail(1)].data) + self.params[self.tail(2)].data[0]
    }

    /// Prediction for one sample of `rows` tokens (any number of frames).
    pub fn forward(&self, tokens: &[f64]) -> Result<f64> {
        let tape = self.encoder_forward(tokens, true)?;
        self.predict_from(&tape)
    }

    /// Converts an f32 token buffer and runs [`Self::forward`].
    pub fn forward_f32(&self, tokens: &[f32]) -> Result<f64> {
        self.forward(&tokens.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }

    fn predict_from(&self, tape: &Tape) -> Result<f64> {
        let y = self.head_apply(&tape.output[..self.config.dim]);
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(y)
    }

    /// Forward pass keeping activations; returns the prediction and the tape.
    pub fn forward_train(&self, tokens: &[f64]) -> Result<(f64, Tape)> {
        let tape = self.encoder_forward(tokens, true)?;
        Ok((self.predict_from(&tape)?, tape))
    }

    /// Accumulates `d(loss)/d(weights)` given `d(loss)/d(prediction)` and returns
    /// the gradient w.r.t. the input tokens.
    pub fn backward(&self, tape: &Tape, grad_pred: f64, grads: &mut Gradients) -> Result<Vec<f64>> {
        let d = self.config.dim;
        let (hw, hb) = (self.tail(1), self.tail(2));
        math::axpy(grad_pred, &tape.output[..d], &mut grads.data[hw]);
        grads.data[hb][0] += grad_pred;
        let mut gout = vec![0.0; tape.len() * d];
        math::axpy(grad_pred, &self.params[hw].data, &mut gout[..d]);
        self.encoder_backward(tape, &gout, grads)
    }
}

#[cfg(test)]
mod tests;
