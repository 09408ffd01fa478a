//! Integrated Gradients along the straight path from a baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::autoencoder::Autoencoder2D;
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::model::BrainTransformer;
use crate::tokenizer::{tokenize_frame, tokenize_frame_vjp, Scheme};

pub const DEFAULT_IG_STEPS: usize = 64;
/// Minimum predicted-class probability for a scan to enter the averaged map.
pub const CONFIDENCE_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub steps: usize,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl AttributionMap {
    /// `|Σ attributions − (f(x) − f(baseline))|`.
    pub fn completeness_residual(&self) -> f64 {
        (self.values.iter().sum::<f64>() - (self.f_input - self.f_baseline)).abs()
    }

    /// Residual relative to `|f(x) − f(baseline)|`.
    pub fn relative_residual(&self) -> f64 {
        self.completeness_residual() / (self.f_input - self.f_baseline).abs().max(f64::MIN_POSITIVE)
    }
}

/// Midpoint Riemann sum of `(x − b) ⊙ ∫ ∇f(b + α(x − b)) dα`. `f` returns the
/// value and gradient at a point. Returns the attributions, `f(x)` and `f(b)`.
pub fn integrated_gradients<F>(x: &[f64], baseline: &[f64], steps: usize, mut f: F) -> Result<(Vec<f64>, f64, f64)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if x.len() != baseline.len() || steps == 0 {
        return Err(shape_err!("input and baseline differ in length or steps is 0"));
    }
    let delta: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        for i in 0..x.len() {
            point[i] = baseline[i] + alpha * delta[i];
        }
        let (_, g) = f(&point)?;
        if g.len() != x.len() {
            return Err(shape_err!("gradient has {} entries, input {}", g.len(), x.len()));
        }
        math::axpy(1.0, &g, &mut acc);
    }
    let attr = acc.iter().zip(&delta).map(|(g, d)| g * d / steps as f64).collect();
    Ok((attr, f(x)?.0, f(baseline)?.0))
}

/// IG of the model logit w.r.t. the voxels of one frame, with an all-zero
/// baseline. The model sees the frame as a one-frame sequence.
pub fn model_integrated_gradients<A: Autoencoder2D>(
    model: &BrainTransformer,
    ae: &A,
    frame: &[f32],
    dims: [usize; 3],
    scheme: Scheme,
    steps: usize,
) -> Result<AttributionMap> {
    if !ae.differentiable() {
        return Err(Error::Unsupported("the autoencoder backend provides no encoder gradient".into()));
    }
    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let vf: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let tokens = tokenize_frame(&vf, dims, ae, scheme)?;
        let x: Vec<f64> = tokens.data().iter().map(|&t| t as f64).collect();
        let (y, tape) = model.forward_train(&x)?;
        let mut scratch = model.zero_grads();
        let gx = model.backward(&tape, 1.0, &mut scratch)?;
        Ok((y, tokenize_frame_vjp(&vf, dims, ae, scheme, &gx)?))
    };
    let zero_tokens = tokenize_frame(&vec![0.0f32; frame.len()], dims, ae, scheme)?;
    if zero_tokens.data().iter().all(|&v| v == 0.0) {
        log::warn!("the baseline frame encodes to all-zero tokens; the input normalization is singular there and the Riemann sum may not converge");
    }
    let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
    let (values, f_input, f_baseline) = integrated_gradients(&x, &vec![0.0; x.len()], steps, eval)?;
    Ok(AttributionMap { dims, values, steps, f_input, f_baseline })
}

/// Correct prediction whose class probability is at least [`CONFIDENCE_THRESHOLD`].
pub fn confident_correct(logit: f64, label: f64) -> bool {
    let p = math::sigmoid(logit);
    let predicted = p >= 0.5;
    predicted == (label > 0.5) && p.max(1.0 - p) >= CONFIDENCE_THRESHOLD
}

/// Voxel-wise mean of several maps.
pub fn average_maps(maps: &[AttributionMap]) -> Result<Vec<f64>> {
    let first = maps.first().ok_or_else(|| Error::Data("no attribution maps to average".into()))?;
    let mut out = vec![0.0; first.values.len()];
    for m in maps {
        if m.values.len() != out.len() {
            return Err(shape_err!("attribution maps differ in size"));
        }
        math::axpy(1.0 / maps.len() as f64, &m.values, &mut out);
    }
    Ok(out)
}
