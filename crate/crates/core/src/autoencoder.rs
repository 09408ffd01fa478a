//! The 2D encode/decode contract used by the tokenizer, plus two backends:
//! an exact space-to-channel reference and a linear patch autoencoder that
//! can be fit by PCA on slices. Both are differentiable.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::Array;
use crate::error::{config_err, shape_err, Error, Result};
use crate::math::{self, Square};

/// Spatial compression factor of the slice encoder.
pub const COMPRESSION_FACTOR: usize = 32;

/// Maps a `(3, H, W)` image to a `(C', H/f, W/f)` latent and back.
pub trait Autoencoder2D {
    fn latent_channels(&self) -> usize;

    fn factor(&self) -> usize {
        COMPRESSION_FACTOR
    }

    fn encode(&self, image: &Array<f32>) -> Result<Array<f32>>;

    fn decode(&self, latent: &Array<f32>) -> Result<Array<f32>>;

    /// Encodes a single-channel `(h, w)` slice duplicated across three channels.
    fn encode_gray(&self, slice: &[f32], h: usize, w: usize) -> Result<Array<f32>> {
        self.encode(&triplicate(slice, h, w)?)
    }

    /// Whether [`Autoencoder2D::encode_vjp`] is available.
    fn differentiable(&self) -> bool {
        false
    }

    /// Pulls a latent-space gradient back to image space at `image`.
    fn encode_vjp(&self, _image: &Array<f32>, _grad_latent: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("this autoencoder backend has no differentiable encoder".into()))
    }

    /// Gradient with respect to a gray slice: the channel-duplication adjoint sums channels.
    fn encode_gray_vjp(&self, slice: &[f32], h: usize, w: usize, grad_latent: &[f64]) -> Result<Vec<f64>> {
        let g = self.encode_vjp(&triplicate(slice, h, w)?, grad_latent)?;
        let n = h * w;
        Ok((0..n).map(|i| g[i] + g[n + i] + g[2 * n + i]).collect())
    }
}

impl<A: Autoencoder2D + ?Sized> Autoencoder2D for &A {
    fn latent_channels(&self) -> usize {
        (**self).latent_channels()
    }
    fn factor(&self) -> usize {
        (**self).factor()
    }
    fn encode(&self, image: &Array<f32>) -> Result<Array<f32>> {
        (**self).encode(image)
    }
    fn decode(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        (**self).decode(latent)
    }
    fn encode_gray(&self, slice: &[f32], h: usize, w: usize) -> Result<Array<f32>> {
        (**self).encode_gray(slice, h, w)
    }
    fn differentiable(&self) -> bool {
        (**self).differentiable()
    }
    fn encode_vjp(&self, image: &Array<f32>, grad_latent: &[f64]) -> Result<Vec<f64>> {
        (**self).encode_vjp(image, grad_latent)
    }
    fn encode_gray_vjp(&self, slice: &[f32], h: usize, w: usize, grad_latent: &[f64]) -> Result<Vec<f64>> {
        (**self).encode_gray_vjp(slice, h, w, grad_latent)
    }
}

/// Duplicates a gray slice into a `(3, h, w)` image.
pub fn triplicate(slice: &[f32], h: usize, w: usize) -> Result<Array<f32>> {
    if slice.len() != h * w {
        return Err(shape_err!("slice has {} values, expected {h}x{w}", slice.len()));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(slice);
    }
    Array::from_vec(&[3, h, w], data)
}

fn check_image(image: &Array<f32>, factor: usize) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("expected a (3, H, W) image, got {:?}", s));
    }
    if s[1] % factor != 0 || s[2] % factor != 0 || s[1] == 0 || s[2] == 0 {
        return Err(shape_err!("image extents {}x{} are not positive multiples of {factor}", s[1], s[2]));
    }
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("image contains non-finite values".into()));
    }
    Ok((s[1], s[2]))
}

fn check_latent(latent: &Array<f32>, channels: usize) -> Result<(usize, usize)> {
    let s = latent.shape();
    if s.len() != 3 || s[0] != channels || s[1] == 0 || s[2] == 0 {
        return Err(shape_err!("expected a ({channels}, h, w) latent, got {:?}", s));
    }
    Ok((s[1], s[2]))
}

/// Patch vector index of image element `(c, dy, dx)` inside one `f x f` cell.
#[inline]
fn patch_index(c: usize, dy: usize, dx: usize, f: usize) -> usize {
    (c * f + dy) * f + dx
}

/// Exact space-to-channel rearrangement: `C' = 3 f²` and decode is the inverse permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LosslessAe {
    factor: usize,
}

impl Default for LosslessAe {
    fn default() -> Self {
        Self { factor: COMPRESSION_FACTOR }
    }
}

impl LosslessAe {
    pub fn with_factor(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(config_err!("factor must be positive"));
        }
        Ok(Self { factor })
    }
}

/// `reference_lossless_ae()`: the exact test oracle backend.
pub fn reference_lossless_ae() -> LosslessAe {
    LosslessAe::default()
}

impl Autoencoder2D for LosslessAe {
    fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn encode(&self, image: &Array<f32>) -> Result<Array<f32>> {
        let f = self.factor;
        let (h, w) = check_image(image, f)?;
        let (gh, gw) = (h / f, w / f);
        let cp = self.latent_channels();
        let src = image.data();
        let mut out = vec![0.0f32; cp * gh * gw];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let ch = patch_index(c, y % f, x % f, f);
                    out[(ch * gh + y / f) * gw + x / f] = src[(c * h + y) * w + x];
                }
            }
        }
        Array::from_vec(&[cp, gh, gw], out)
    }

    fn decode(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        let f = self.factor;
        let (gh, gw) = check_latent(latent, self.latent_channels())?;
        let (h, w) = (gh * f, gw * f);
        let src = latent.data();
        let mut out = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let ch = patch_index(c, y % f, x % f, f);
                    out[(c * h + y) * w + x] = src[(ch * gh + y / f) * gw + x / f];
                }
            }
        }
        Array::from_vec(&[3, h, w], out)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn encode_vjp(&self, image: &Array<f32>, grad_latent: &[f64]) -> Result<Vec<f64>> {
        let f = self.factor;
        let (h, w) = check_image(image, f)?;
        let (gh, gw) = (h / f, w / f);
        if grad_latent.len() != self.latent_channels() * gh * gw {
            return Err(shape_err!("latent gradient has wrong length {}", grad_latent.len()));
        }
        let mut out = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let ch = patch_index(c, y % f, x % f, f);
                    out[(c * h + y) * w + x] = grad_latent[(ch * gh + y / f) * gw + x / f];
                }
            }
        }
        Ok(out)
    }
}

/// A per-cell affine codec: each `f x f` cell of the 3-channel image is
/// flattened to a patch vector `p` and encoded as `E p + b_e`; decoding is
/// `D z + b_d`. Equivalent to a convolution with kernel and stride `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPatchAe {
    channels: usize,
    factor: usize,
    /// `C' x 3f²`, row-major.
    encoder: Vec<f32>,
    encoder_bias: Vec<f32>,
    /// `3f² x C'`, row-major.
    decoder: Vec<f32>,
    decoder_bias: Vec<f32>,
    /// Encoder rows summed over the three input channels: `C' x f²`.
    encoder_gray: Vec<f32>,
}

impl LinearPatchAe {
    pub fn from_parts(
        channels: usize,
        factor: usize,
        encoder: Vec<f32>,
        encoder_bias: Vec<f32>,
        decoder: Vec<f32>,
        decoder_bias: Vec<f32>,
    ) -> Result<Self> {
        let p = 3 * factor * factor;
        if channels == 0 || factor == 0 {
            return Err(config_err!("channels and factor must be positive"));
        }
        let lens = [(encoder.len(), channels * p), (encoder_bias.len(), channels), (decoder.len(), p * channels), (decoder_bias.len(), p)];
        if lens.iter().any(|(a, b)| a != b) {
            return Err(shape_err!("linear patch autoencoder parts have inconsistent sizes for C'={channels}, f={factor}"));
        }
        if encoder.iter().chain(&encoder_bias).chain(&decoder).chain(&decoder_bias).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite autoencoder weights".into()));
        }
        let q = factor * factor;
        let mut encoder_gray = vec![0.0f32; channels * q];
        for c in 0..channels {
            for i in 0..q {
                let row = &encoder[c * p..(c + 1) * p];
                encoder_gray[c * q + i] = row[i] + row[q + i] + row[2 * q + i];
            }
        }
        Ok(Self { channels, factor, encoder, encoder_bias, decoder, decoder_bias, encoder_gray })
    }

    /// Orthonormal random projection (decoder = encoder transpose, no bias).
    pub fn random(channels: usize, factor: usize, seed: u64) -> Result<Self> {
        let p = 3 * factor * factor;
        if channels > p {
            return Err(config_err!("cannot have more latent channels ({channels}) than patch entries ({p})"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = (0..channels).map(|_| (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        orthonormalize(&mut basis);
        Self::from_basis(channels, factor, &basis, &vec![0.0; p], &vec![1.0; channels])
    }

    /// Fits a PCA codec on gray slices (each duplicated across channels), using
    /// randomized subspace iteration over up to `max_patches` sampled cells.
    pub fn fit_pca(
        slices: &[(&[f32], usize, usize)],
        channels: usize,
        factor: usize,
        max_patches: usize,
        seed: u64,
    ) -> Result<Self> {
        let q = factor * factor;
        if channels == 0 || channels > q {
            return Err(config_err!("PCA needs 1 <= channels <= {q}, got {channels}"));
        }
        let mut patches: Vec<f64> = Vec::new();
        for &(s, h, w) in slices {
            if h % factor != 0 || w % factor != 0 || s.len() != h * w {
                return Err(shape_err!("training slice {h}x{w} not divisible by {factor}"));
            }
            for gy in 0..h / factor {
                for gx in 0..w / factor {
                    for dy in 0..factor {
                        let row = (gy * factor + dy) * w + gx * factor;
                        patches.extend(s[row..row + factor].iter().map(|&v| v as f64));
                    }
                }
            }
        }
        let n_all = patches.len() / q;
        if n_all < 2 {
            return Err(Error::Data("need at least two patches to fit PCA".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_all.min(max_patches.max(2));
        if n < n_all {
            let picks = rand::seq::index::sample(&mut rng, n_all, n);
            let mut sub = Vec::with_capacity(n * q);
            for i in picks.iter() {
                sub.extend_from_slice(&patches[i * q..(i + 1) * q]);
            }
            patches = sub;
        }
        let mut mean = vec![0.0; q];
        for x in patches.chunks_exact(q) {
            math::axpy(1.0, x, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for x in patches.chunks_exact_mut(q) {
            math::axpy(-1.0, &mean, x);
        }

        let mut basis: Vec<Vec<f64>> = (0..channels).map(|_| (0..q).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        orthonormalize(&mut basis);
        let mut proj = vec![0.0; n * channels];
        for _ in 0..40 {
            for (i, x) in patches.chunks_exact(q).enumerate() {
                for (c, b) in basis.iter().enumerate() {
                    proj[i * channels + c] = math::dot(x, b);
                }
            }
            let mut next = vec![vec![0.0; q]; channels];
            for (i, x) in patches.chunks_exact(q).enumerate() {
                for (c, nb) in next.iter_mut().enumerate() {
                    math::axpy(proj[i * channels + c], x, nb);
                }
            }
            basis = next;
            orthonormalize(&mut basis);
        }
        // order components by captured variance
        let mut var: Vec<(f64, usize)> = basis
            .iter()
            .enumerate()
            .map(|(c, b)| (patches.chunks_exact(q).map(|x| math::dot(x, b).sq()).sum::<f64>(), c))
            .collect();
        var.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let s3 = 1.0 / math::sqrt(3.0);
        let lifted: Vec<Vec<f64>> = var
            .iter()
            .map(|&(_, c)| basis[c].iter().chain(&basis[c]).chain(&basis[c]).map(|v| v * s3).collect())
            .collect();
        let mean3: Vec<f64> = mean.iter().chain(&mean).chain(&mean).copied().collect();
        // unit-variance latents on triplicated slices; a lifted row sees sqrt(3) times the gray projection
        let scale: Vec<f64> = var.iter().map(|&(v, _)| math::sqrt(3.0 * v / n as f64)).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Self::from_basis(channels, factor, &lifted, &mean3, &scale)
    }

    /// Encoder rows = basis / scale, decoder = basisᵀ · scale, centred on `mean`.
    fn from_basis(channels: usize, factor: usize, basis: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Result<Self> {
        let p = 3 * factor * factor;
        let mut encoder = vec![0.0f32; channels * p];
        let mut decoder = vec![0.0f32; p * channels];
        let mut encoder_bias = vec![0.0f32; channels];
        for (c, b) in basis.iter().enumerate() {
            for i in 0..p {
                encoder[c * p + i] = (b[i] / scale[c]) as f32;
                decoder[i * channels + c] = (b[i] * scale[c]) as f32;
            }
            encoder_bias[c] = (-math::dot(b, mean) / scale[c]) as f32;
        }
        let decoder_bias = mean.iter().map(|&m| m as f32).collect();
        Self::from_parts(channels, factor, encoder, encoder_bias, decoder, decoder_bias)
    }

    pub fn encoder(&self) -> &[f32] {
        &self.encoder
    }
    pub fn encoder_bias(&self) -> &[f32] {
        &self.encoder_bias
    }
    pub fn decoder(&self) -> &[f32] {
        &self.decoder
    }
    pub fn decoder_bias(&self) -> &[f32] {
        &self.decoder_bias
    }

    fn encode_cells(&self, h: usize, w: usize, channels_in: usize, src: &[f32], weights: &[f32]) -> Vec<f32> {
        let f = self.factor;
        let (gh, gw) = (h / f, w / f);
        let plen = channels_in * f * f;
        let mut patch = vec![0.0f32; plen];
        let mut out = vec![0.0f32; self.channels * gh * gw];
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..channels_in {
                    for dy in 0..f {
                        let row = (c * h + gy * f + dy) * w + gx * f;
                        patch[(c * f + dy) * f..(c * f + dy + 1) * f].copy_from_slice(&src[row..row + f]);
                    }
                }
                for c in 0..self.channels {
                    let wrow = &weights[c * plen..(c + 1) * plen];
                    let mut acc = [0.0f32; 8];
                    let (a, b) = (wrow.chunks_exact(8), patch.chunks_exact(8));
                    let (ra, rb) = (a.remainder(), b.remainder());
                    for (x, y) in a.zip(b) {
                        for k in 0..8 {
                            acc[k] += x[k] * y[k];
                        }
                    }
                    let mut s = acc.iter().map(|&v| v as f64).sum::<f64>();
                    for (x, y) in ra.iter().zip(rb) {
                        s += (*x * *y) as f64;
                    }
                    out[(c * gh + gy) * gw + gx] = s as f32 + self.encoder_bias[c];
                }
            }
        }
        out
    }
}

impl Autoencoder2D for LinearPatchAe {
    fn latent_channels(&self) -> usize {
        self.channels
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn encode(&self, image: &Array<f32>) -> Result<Array<f32>> {
        let (h, w) = check_image(image, self.factor)?;
        let out = self.encode_cells(h, w, 3, image.data(), &self.encoder);
        Array::from_vec(&[self.channels, h / self.factor, w / self.factor], out)
    }

    fn encode_gray(&self, slice: &[f32], h: usize, w: usize) -> Result<Array<f32>> {
        if slice.len() != h * w {
            return Err(shape_err!("slice has {} values, expected {h}x{w}", slice.len()));
        }
        let f = self.factor;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(shape_err!("slice extents {h}x{w} are not positive multiples of {f}"));
        }
        let out = self.encode_cells(h, w, 1, slice, &self.encoder_gray);
        Array::from_vec(&[self.channels, h / f, w / f], out)
    }

    fn decode(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        let f = self.factor;
        let (gh, gw) = check_latent(latent, self.channels)?;
        let (h, w) = (gh * f, gw * f);
        let p = 3 * f * f;
        let z = latent.data();
        let mut out = vec![0.0f32; 3 * h * w];
        let mut cell = vec![0.0f64; self.channels];
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..self.channels {
                    cell[c] = z[(c * gh + gy) * gw + gx] as f64;
                }
                for i in 0..p {
                    let row = &self.decoder[i * self.channels..(i + 1) * self.channels];
                    let v = row.iter().zip(&cell).map(|(&a, b)| a as f64 * b).sum::<f64>() + self.decoder_bias[i] as f64;
                    let (c, r) = (i / (f * f), i % (f * f));
                    out[(c * h + gy * f + r / f) * w + gx * f + r % f] = v as f32;
                }
            }
        }
        Array::from_vec(&[3, h, w], out)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn encode_vjp(&self, image: &Array<f32>, grad_latent: &[f64]) -> Result<Vec<f64>> {
        let f = self.factor;
        let (h, w) = check_image(image, f)?;
        let (gh, gw) = (h / f, w / f);
        if grad_latent.len() != self.channels * gh * gw {
            return Err(shape_err!("latent gradient has wrong length {}", grad_latent.len()));
        }
        let p = 3 * f * f;
        let mut out = vec![0.0; 3 * h * w];
        let mut patch = vec![0.0f64; p];
        for gy in 0..gh {
            for gx in 0..gw {
                patch.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..self.channels {
                    let g = grad_latent[(c * gh + gy) * gw + gx];
                    for (pv, &e) in patch.iter_mut().zip(&self.encoder[c * p..(c + 1) * p]) {
                        *pv += g * e as f64;
                    }
                }
                for (i, &v) in patch.iter().enumerate() {
                    let (c, r) = (i / (f * f), i % (f * f));
                    out[(c * h + gy * f + r / f) * w + gx * f + r % f] = v;
                }
            }
        }
        Ok(out)
    }
}

/// Modified Gram-Schmidt in place.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let (head, tail) = vs.split_at_mut(i);
            let d = math::dot(&tail[0], &head[j]);
            math::axpy(-d, &head[j], &mut tail[0]);
        }
        let n = math::sqrt(math::dot(&vs[i], &vs[i]));
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        vs[i].iter_mut().for_each(|v| *v *= inv);
    }
}

/// Describes an autoencoder for logs and error messages.
pub fn describe(ae: &dyn Autoencoder2D) -> alloc::string::String {
    format!("C'={} f={}", ae.latent_channels(), ae.factor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn lossless_shapes_and_round_trip() {
        let ae = reference_lossless_ae();
        assert_eq!(ae.latent_channels(), 3072);
        let x = random_image(96, 96, 1);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3072, 3, 3]);
        let y = ae.decode(&z).unwrap();
        assert_eq!(x, y);
        let mut a = x.data().to_vec();
        let mut b = z.data().to_vec();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn lossless_zero_latent_decodes_to_zero() {
        let ae = LosslessAe::default();
        let z = Array::zeros(&[3072, 1, 2]);
        assert!(ae.decode(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lossless_locality() {
        let ae = LosslessAe::default();
        let x = random_image(64, 96, 2);
        let z0 = ae.encode(&x).unwrap();
        let mut x1 = x.clone();
        let (c, y, xx) = (1, 40, 70);
        x1.set(&[c, y, xx], 5.0);
        let z1 = ae.encode(&x1).unwrap();
        let changed: Vec<usize> = (0..z0.len()).filter(|&i| z0.data()[i] != z1.data()[i]).collect();
        assert_eq!(changed.len(), 1);
        let i = changed[0];
        let (cell_i, cell_j) = ((i / 3) % 2, i % 3);
        assert_eq!((cell_i, cell_j), (y / 32, xx / 32));
    }

    #[test]
    fn smallest_grid_and_shape_errors() {
        let ae = LinearPatchAe::random(4, 32, 0).unwrap();
        let z = ae.encode(&random_image(32, 32, 3)).unwrap();
        assert_eq!(z.shape(), &[4, 1, 1]);
        let bad = random_image(48, 32, 3);
        assert!(matches!(ae.encode(&bad), Err(Error::Shape(_))));
        assert!(matches!(LosslessAe::default().encode(&bad), Err(Error::Shape(_))));
        let c32 = LinearPatchAe::random(32, 32, 0).unwrap();
        assert_eq!(c32.encode(&random_image(96, 96, 4)).unwrap().shape(), &[32, 3, 3]);
    }

    #[test]
    fn gray_fast_path_matches_triplicated_encode() {
        let ae = LinearPatchAe::random(6, 8, 5).unwrap();
        let img = random_image(16, 24, 6);
        let slice = &img.data()[..16 * 24];
        let a = ae.encode_gray(slice, 16, 24).unwrap();
        let b = ae.encode(&triplicate(slice, 16, 24).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_vjp_matches_finite_differences() {
        let ae = LinearPatchAe::random(3, 4, 8).unwrap();
        let img = random_image(8, 4, 9);
        let g: Vec<f64> = (0..3 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let vjp = ae.encode_vjp(&img, &g).unwrap();
        // <g, E(x + e_i)> - <g, E x> = (vjp)_i exactly for an affine map
        let base: f64 = ae.encode(&img).unwrap().data().iter().zip(&g).map(|(&z, g)| z as f64 * g).sum();
        for i in [0usize, 17, 50, 95] {
            let mut x = img.clone();
            x.data_mut()[i] += 0.5;
            let v: f64 = ae.encode(&x).unwrap().data().iter().zip(&g).map(|(&z, g)| z as f64 * g).sum();
            assert!(((v - base) / 0.5 - vjp[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn pca_reconstructs_low_rank_slices_exactly() {
        // slices built from 2 fixed patterns -> rank-2 patch space
        let f = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pa: Vec<f32> = (0..f * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pb: Vec<f32> = (0..f * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut slices = Vec::new();
        for _ in 0..20 {
            let (a, b): (f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            slices.push((0..f * f).map(|i| a * pa[i] + b * pb[i] + 0.25).collect::<Vec<f32>>());
        }
        let refs: Vec<(&[f32], usize, usize)> = slices.iter().map(|s| (s.as_slice(), f, f)).collect();
        let ae = LinearPatchAe::fit_pca(&refs, 2, f, 1000, 0).unwrap();
        for s in &slices {
            let img = triplicate(s, f, f).unwrap();
            let rec = ae.decode(&ae.encode(&img).unwrap()).unwrap();
            for (x, y) in img.data().iter().zip(rec.data()) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
        // latents are centred with unit variance over the fitted patches
        let z: Vec<Vec<f32>> = slices.iter().map(|s| ae.encode(&triplicate(s, f, f).unwrap()).unwrap().data().to_vec()).collect();
        for c in 0..2 {
            let mean = z.iter().map(|v| v[c] as f64).sum::<f64>() / 20.0;
            let var = z.iter().map(|v| (v[c] as f64 - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3, "channel {c}: mean {mean}, var {var}");
        }
    }

    #[test]
    fn lossless_not_tied_to_factor_32() {
        let ae = LosslessAe::with_factor(4).unwrap();
        assert_eq!(ae.latent_channels(), 48);
        assert!(LosslessAe::with_factor(0).is_err());
    }

    proptest! {
        #[test]
        fn lossless_bijective(gh in 1usize..4, gw in 1usize..4, seed in 0u64..100) {
            let ae = LosslessAe::with_factor(4).unwrap();
            let x = random_image(4 * gh, 4 * gw, seed);
            let z = ae.encode(&x).unwrap();
            prop_assert_eq!(&ae.decode(&z).unwrap(), &x);
            prop_assert_eq!(ae.encode(&ae.decode(&z).unwrap()).unwrap(), z);
        }
    }
}
