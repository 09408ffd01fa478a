//! Rotary position encoding and (grouped-query) scaled dot-product attention.
//!
//! Activations are row-major `(L, heads·head_dim)`. The forward pass streams
//! one query row at a time and keeps only the per-row log-sum-exp, so memory
//! is linear in sequence length; the backward pass recomputes probabilities.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::math;

pub const ROPE_BASE: f64 = 10_000.0;

/// Cos/sin table for a list of positions, `(L, head_dim / 2)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[f64], head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(config_err!("rotary dimension must be even, got {head_dim}"));
        }
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..half).map(|i| math::powf(base, -(2.0 * i as f64) / head_dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &m in positions {
            for &f in &freqs {
                let (s, c) = math::sin_cos(m * f);
                sin.push(s);
                cos.push(c);
            }
        }
        Ok(Self { half, cos, sin })
    }

    /// Rotates every head of every row in place; `inverse` applies the transpose.
    pub fn apply(&self, x: &mut [f64], heads: usize, inverse: bool) {
        let hd = 2 * self.half;
        let width = heads * hd;
        for (r, row) in x.chunks_exact_mut(width).enumerate() {
            let c = &self.cos[r * self.half..(r + 1) * self.half];
            let s = &self.sin[r * self.half..(r + 1) * self.half];
            for head in row.chunks_exact_mut(hd) {
                for i in 0..self.half {
                    let (a, b) = (head[2 * i], head[2 * i + 1]);
                    let sn = if inverse { -s[i] } else { s[i] };
                    head[2 * i] = a * c[i] - b * sn;
                    head[2 * i + 1] = a * sn + b * c[i];
                }
            }
        }
    }
}

/// Rotates one vector at position `m`: pairs `(x[2i], x[2i+1])` turn by `m·base^(-2i/dim)`.
pub fn rope_rotate(x: &[f64], m: f64, base: f64) -> Result<Vec<f64>> {
    let table = RopeTable::new(&[m], x.len(), base)?;
    let mut out = x.to_vec();
    table.apply(&mut out, 1, false);
    Ok(out)
}

/// Strided view of one head inside row-major activations.
#[derive(Clone, Copy)]
struct HeadView<'a> {
    data: &'a [f64],
    stride: usize,
    offset: usize,
    hd: usize,
}

impl<'a> HeadView<'a> {
    #[inline]
    fn row(&self, i: usize) -> &'a [f64] {
        let s = i * self.stride + self.offset;
        &self.data[s..s + self.hd]
    }
}

/// Scores of query row `i` against all keys, in `scores`.
#[inline]
fn head_scores(q: HeadView, k: HeadView, i: usize, len: usize, scale: f64, scores: &mut [f64]) {
    let qi = q.row(i);
    for (j, s) in scores.iter_mut().enumerate().take(len) {
        *s = math::dot(qi, k.row(j)) * scale;
    }
}

/// One attention head; writes context rows into `out` and `lse[i]`.
fn attend_head(q: HeadView, k: HeadView, v: HeadView, len: usize, out: &mut [f64], out_stride: usize, lse: &mut [f64], scores: &mut [f64]) {
    let hd = q.hd;
    let scale = 1.0 / math::sqrt(hd as f64);
    for i in 0..len {
        head_scores(q, k, i, len, scale, scores);
        let m = scores[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores[..len].iter_mut() {
            *s = math::exp(*s - m);
            sum += *s;
        }
        let o = &mut out[i * out_stride + q.offset..i * out_stride + q.offset + hd];
        o.fill(0.0);
        let inv = 1.0 / sum;
        for (j, &p) in scores[..len].iter().enumerate() {
            math::axpy(p * inv, v.row(j), o);
        }
        lse[i] = m + math::ln(sum);
    }
}

fn check_layout(q: &[f64], k: &[f64], v: &[f64], len: usize, heads: usize, kv_heads: usize, hd: usize) -> Result<()> {
    if heads == 0 || kv_heads == 0 || heads % kv_heads != 0 {
        return Err(config_err!("heads ({heads}) must be a positive multiple of kv_heads ({kv_heads})"));
    }
    if q.len() != len * heads * hd || k.len() != len * kv_heads * hd || v.len() != k.len() {
        return Err(shape_err!("attention inputs do not match len {len}, heads {heads}/{kv_heads}, head_dim {hd}"));
    }
    Ok(())
}

/// Output of a forward attention pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Context `(L, heads·head_dim)`.
    pub context: Vec<f64>,
    /// Log-sum-exp of the scaled scores, `(heads, L)`.
    pub lse: Vec<f64>,
}

/// Full (non-causal) grouped-query attention. Query head `h` reads KV head
/// `h / (heads / kv_heads)`.
pub fn gqa_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, heads: usize, kv_heads: usize, hd: usize) -> Result<AttentionOutput> {
    check_layout(q, k, v, len, heads, kv_heads, hd)?;
    let group = heads / kv_heads;
    let mut context = vec![0.0; len * heads * hd];
    let mut lse = vec![0.0; heads * len];
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let g = h / group;
        let qv = HeadView { data: q, stride: heads * hd, offset: h * hd, hd };
        let kv = HeadView { data: k, stride: kv_heads * hd, offset: g * hd, hd };
        let vv = HeadView { data: v, stride: kv_heads * hd, offset: g * hd, hd };
        attend_head(qv, kv, vv, len, &mut context, heads * hd, &mut lse[h * len..(h + 1) * len], &mut scores);
    }
    Ok(AttentionOutput { context, lse })
}

/// Standard multi-head attention: one KV head per query head.
pub fn mha_attention(q: &[f64], k: &[f64], v: &[f64], len: usize, heads: usize, hd: usize) -> Result<Vec<f64>> {
    check_layout(q, k, v, len, heads, heads, hd)?;
    let mut context = vec![0.0; len * heads * hd];
    let mut lse = vec![0.0; len];
    let mut scores = vec![0.0; len];
    for h in 0..heads {
        let view = |data| HeadView { data, stride: heads * hd, offset: h * hd, hd };
        attend_head(view(q), view(k), view(v), len, &mut context, heads * hd, &mut lse, &mut scores);
    }
    Ok(context)
}

/// Explicit attention probabilities `(heads, L, L)`, for inspection.
pub fn attention_probs(q: &[f64], k: &[f64], len: usize, heads: usize, kv_heads: usize, hd: usize) -> Result<Vec<f64>> {
    check_layout(q, k, k, len, heads, kv_heads, hd)?;
    let group = heads / kv_heads;
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut probs = vec![0.0; heads * len * len];
    for h in 0..heads {
        let qv = HeadView { data: q, stride: heads * hd, offset: h * hd, hd };
        let kv = HeadView { data: k, stride: kv_heads * hd, offset: (h / group) * hd, hd };
        for i in 0..len {
            let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
            head_scores(qv, kv, i, len, scale, row);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = math::exp(*p - m);
                sum += *p;
            }
            row.iter_mut().for_each(|p| *p /= sum);
        }
    }
    Ok(probs)
}

/// Gradients of [`gqa_attention`] w.r.t. `q`, `k`, `v`, recomputing the probabilities.
#[allow(clippy::too_many_arguments)]
pub fn gqa_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    fwd: &AttentionOutput,
    grad_context: &[f64],
    len: usize,
    heads: usize,
    kv_heads: usize,
    hd: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_layout(q, k, v, len, heads, kv_heads, hd)?;
    let group = heads / kv_heads;
    let scale = 1.0 / math::sqrt(hd as f64);
    let (qs, ks) = (heads * hd, kv_heads * hd);
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut p = vec![0.0; len];
    for h in 0..heads {
        let g = h / group;
        let qv = HeadView { data: q, stride: qs, offset: h * hd, hd };
        let kv = HeadView { data: k, stride: ks, offset: g * hd, hd };
        let vv = HeadView { data: v, stride: ks, offset: g * hd, hd };
        let ov = HeadView { data: &fwd.context, stride: qs, offset: h * hd, hd };
        let gov = HeadView { data: grad_context, stride: qs, offset: h * hd, hd };
        let lse = &fwd.lse[h * len..(h + 1) * len];
        for i in 0..len {
            let go = gov.row(i);
            let delta = math::dot(go, ov.row(i));
            head_scores(qv, kv, i, len, scale, &mut p);
            let gqi_off = i * qs + h * hd;
            for j in 0..len {
                let pij = math::exp(p[j] - lse[i]);
                let vo = j * ks + g * hd;
                math::axpy(pij, go, &mut gv[vo..vo + hd]);
                let ds = pij * (math::dot(go, vv.row(j)) - delta) * scale;
                math::axpy(ds, kv.row(j), &mut gq[gqi_off..gqi_off + hd]);
                math::axpy(ds, qv.row(i), &mut gk[vo..vo + hd]);
            }
        }
    }
    Ok((gq, gk, gv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rope_zero_position_is_identity_and_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_vec(8, &mut rng);
        assert_eq!(rope_rotate(&x, 0.0, ROPE_BASE).unwrap(), x);
        for m in [1.0, 17.0, 1234.0] {
            let r = rope_rotate(&x, m, ROPE_BASE).unwrap();
            assert!((math::dot(&r, &r) - math::dot(&x, &x)).abs() < 1e-12);
        }
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1.0, ROPE_BASE).is_err());
    }

    #[test]
    fn rope_inverse_undoes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = rand_vec(3 * 2 * 4, &mut rng);
        let orig = x.clone();
        let t = RopeTable::new(&[0.0, 5.0, 9.0], 4, ROPE_BASE).unwrap();
        t.apply(&mut x, 2, false);
        t.apply(&mut x, 2, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_values_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, heads, kv, hd) = (5, 4, 2, 3);
        let q = rand_vec(len * heads * hd, &mut rng);
        let k = rand_vec(len * kv * hd, &mut rng);
        let r = [0.3, -1.2, 0.7];
        let v: Vec<f64> = (0..len * kv).flat_map(|_| r).collect();
        let out = gqa_attention(&q, &k, &v, len, heads, kv, hd).unwrap();
        for row in out.context.chunks(hd) {
            for (a, b) in row.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let z = vec![0.0; 6];
        assert!(gqa_attention(&z, &z, &z, 1, 3, 2, 2).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, heads, kv, hd) = (4, 4, 2, 2);
        let q = rand_vec(len * heads * hd, &mut rng);
        let k = rand_vec(len * kv * hd, &mut rng);
        let v = rand_vec(len * kv * hd, &mut rng);
        let w = rand_vec(len * heads * hd, &mut rng);
        let loss = |q: &[f64], k: &[f64], v: &[f64]| math::dot(&gqa_attention(q, k, v, len, heads, kv, hd).unwrap().context, &w);
        let fwd = gqa_attention(&q, &k, &v, len, heads, kv, hd).unwrap();
        let (gq, gk, gv) = gqa_attention_backward(&q, &k, &v, &fwd, &w, len, heads, kv, hd).unwrap();
        let eps = 1e-6;
        for which in 0..3 {
            let (base, g) = match which {
                0 => (&q, &gq),
                1 => (&k, &gk),
                _ => (&v, &gv),
            };
            for i in 0..base.len() {
                let mut p = base.clone();
                let mut m = base.clone();
                p[i] += eps;
                m[i] -= eps;
                let (lp, lm) = match which {
                    0 => (loss(&p, &k, &v), loss(&m, &k, &v)),
                    1 => (loss(&q, &p, &v), loss(&q, &m, &v)),
                    _ => (loss(&q, &k, &p), loss(&q, &k, &m)),
                };
                let num = (lp - lm) / (2.0 * eps);
                assert!((num - g[i]).abs() < 1e-7, "input {which} index {i}: {num} vs {}", g[i]);
            }
        }
    }
}
