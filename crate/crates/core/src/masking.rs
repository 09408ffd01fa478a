//! Masked token modeling: tube masks, a token-space mask embedding, a linear
//! reconstruction head and an L1 loss over masked elements only.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use crate::model::layers::{matmul, matmul_backward};
use crate::model::{BrainTransformer, Gradients, Param};

/// One spatial token mask repeated over every frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    per_frame: Vec<bool>,
    frames: usize,
    seed: u64,
}

impl MaskPattern {
    /// Masks `floor(ratio·n)` tokens chosen uniformly without replacement.
    pub fn tube(n: usize, frames: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(config_err!("mask ratio must lie in [0, 1], got {ratio}"));
        }
        let k = (math::floor(ratio * n as f64 + 1e-12) as usize).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_frame = vec![false; n];
        for i in rand::seq::index::sample(&mut rng, n, k) {
            per_frame[i] = true;
        }
        Ok(Self { per_frame, frames, seed })
    }

    pub fn from_frame_mask(per_frame: Vec<bool>, frames: usize) -> Self {
        Self { per_frame, frames, seed: 0 }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.per_frame.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mask of frame `t`; identical for every frame.
    pub fn frame(&self, _t: usize) -> &[bool] {
        &self.per_frame
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.per_frame.len()).filter(|&i| self.per_frame[i]).collect()
    }

    pub fn masked_per_frame(&self) -> usize {
        self.per_frame.iter().filter(|&&m| m).count()
    }

    /// Whether flattened row `r = t·N + n` is masked.
    pub fn is_masked_row(&self, r: usize) -> bool {
        self.per_frame[r % self.per_frame.len()]
    }

    pub fn rows(&self) -> usize {
        self.frames * self.per_frame.len()
    }
}

/// `make_tube_mask` with the default naming.
pub fn make_tube_mask(n: usize, frames: usize, ratio: f64, seed: u64) -> Result<MaskPattern> {
    MaskPattern::tube(n, frames, ratio, seed)
}

fn check_rows(len: usize, d: usize, pattern: &MaskPattern) -> Result<()> {
    if d == 0 || len != pattern.rows() * d {
        return Err(shape_err!("{len} values do not form {} rows of width {d}", pattern.rows()));
    }
    Ok(())
}

/// Replaces masked rows of `(T·N, d)` tokens with `embedding`.
pub fn apply_mask<T: Copy>(tokens: &[T], d: usize, pattern: &MaskPattern, embedding: &[T]) -> Result<Vec<T>> {
    check_rows(tokens.len(), d, pattern)?;
    if embedding.len() != d {
        return Err(shape_err!("mask embedding has {} values, tokens have {d}", embedding.len()));
    }
    let mut out = tokens.to_vec();
    for (r, row) in out.chunks_exact_mut(d).enumerate() {
        if pattern.is_masked_row(r) {
            row.copy_from_slice(embedding);
        }
    }
    Ok(out)
}

/// Mean absolute error over masked elements, and its gradient w.r.t. `pred`
/// (exactly zero on unmasked rows).
pub fn mtm_loss(pred: &[f64], target: &[f64], d: usize, pattern: &MaskPattern) -> Result<(f64, Vec<f64>)> {
    check_rows(pred.len(), d, pattern)?;
    if target.len() != pred.len() {
        return Err(shape_err!("prediction and target differ in length"));
    }
    let omega = (pattern.masked_per_frame() * pattern.frames() * d) as f64;
    if omega == 0.0 {
        return Err(Error::Loss("mask selects no tokens".into()));
    }
    let mut sum = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for r in (0..pattern.rows()).filter(|&r| pattern.is_masked_row(r)) {
        for i in r * d..(r + 1) * d {
            let diff = pred[i] - target[i];
            sum += diff.abs();
            grad[i] = if diff > 0.0 {
                1.0 / omega
            } else if diff < 0.0 {
                -1.0 / omega
            } else {
                0.0
            };
        }
    }
    Ok((sum / omega, grad))
}

/// Reconstruction head and mask embedding used only during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct MtmHead {
    params: Vec<Param>,
    dim: usize,
    d_token: usize,
}

const MASK_EMBEDDING: usize = 0;
const PROJ: usize = 1;
const BIAS: usize = 2;

impl MtmHead {
    pub fn new(dim: usize, d_token: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
        };
        let params = vec![
            Param { name: "mtm.mask_embedding".into(), shape: vec![d_token], data: normal(d_token, 1.0) },
            Param { name: "mtm.proj.weight".into(), shape: vec![dim, d_token], data: normal(dim * d_token, 1.0 / math::sqrt(dim as f64)) },
            Param { name: "mtm.proj.bias".into(), shape: vec![d_token], data: vec![0.0; d_token] },
        ];
        Self { params, dim, d_token }
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        let ok = params.len() == 3
            && params[PROJ].shape.len() == 2
            && params[MASK_EMBEDDING].shape == [params[PROJ].shape[1]]
            && params[BIAS].shape == params[MASK_EMBEDDING].shape;
        if !ok {
            return Err(shape_err!("malformed reconstruction head parameters"));
        }
        let (dim, d_token) = (params[PROJ].shape[0], params[PROJ].shape[1]);
        Ok(Self { params, dim, d_token })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn mask_embedding(&self) -> &[f64] {
        &self.params[MASK_EMBEDDING].data
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params)
    }
}

/// Masked-token loss of one `(T·N, d)` sample; accumulates gradients into
/// `g_model` (encoder) and `g_head`. Returns the loss.
pub fn mtm_forward_backward(
    model: &BrainTransformer,
    head: &MtmHead,
    tokens: &[f64],
    pattern: &MaskPattern,
    g_model: &mut Gradients,
    g_head: &mut Gradients,
) -> Result<f64> {
    let d = head.d_token;
    if model.config().d_token != d || model.config().dim != head.dim {
        return Err(shape_err!("reconstruction head does not match the encoder"));
    }
    let masked = apply_mask(tokens, d, pattern, head.mask_embedding())?;
    // no CLS in pretraining: the loss only concerns token rows
    let tape = model.encoder_forward(&masked, false)?;
    let mut pred = matmul(&tape.output, &head.params[PROJ].data, head.dim, d);
    for row in pred.chunks_exact_mut(d) {
        row.iter_mut().zip(&head.params[BIAS].data).for_each(|(p, b)| *p += b);
    }
    let (loss, gpred) = mtm_loss(&pred, tokens, d, pattern)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite pretraining loss".into()));
    }
    for row in gpred.chunks_exact(d) {
        g_head.data[BIAS].iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let gout = matmul_backward(&tape.output, &head.params[PROJ].data, &gpred, head.dim, d, &mut g_head.data[PROJ]);
    let gx = model.encoder_backward(&tape, &gout, g_model)?;
    for (r, row) in gx.chunks_exact(d).enumerate() {
        if pattern.is_masked_row(r) {
            g_head.data[MASK_EMBEDDING].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    Ok(loss)
}
