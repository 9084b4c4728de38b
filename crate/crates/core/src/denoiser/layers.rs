//! Graph-level building blocks of the denoiser. Every function records onto
//! the caller's [`Graph`] so gradients flow through it.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Slope of the leaky ReLU used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Added under the square root when demodulating kernels.
pub const DEMOD_EPS: f64 = 1e-8;

/// Added to the variance before normalizing features.
pub const NORM_EPS: f64 = 1e-8;

/// `x W + b` for `x: [r, in]`, `W: [in, out]`, `b: [1, out]`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Convolution plus per-channel bias `b: [out, 1, 1]`.
pub fn conv_bias(g: &mut Graph, x: Var, kernel: Var, b: Var) -> Result<Var> {
    let y = g.conv2d(x, kernel)?;
    g.add(y, b)
}

/// Style-modulated 3x3 convolution.
///
/// `styles: [1, c_in]` scales every input channel of `kernel: [c_out, c_in, 3, 3]`.
/// With `demodulate`, each output filter is then rescaled to unit norm,
/// `d_v = 1 / sqrt(sum_{m,k,l} w'^2 + 1e-8)`.
pub fn modulated_conv(
    g: &mut Graph,
    x: Var,
    styles: Var,
    kernel: Var,
    demodulate: bool,
) -> Result<Var> {
    let ks = g.shape(kernel).to_vec();
    if ks.len() != 4 || g.shape(styles) != [1, ks[1]] {
        return Err(Error::Dimension(format!(
            "styles {:?} do not match kernel {ks:?}",
            g.shape(styles)
        )));
    }
    let s = g.reshape(styles, &[1, ks[1], 1, 1])?;
    let mut w = g.mul(kernel, s)?;
    if demodulate {
        let sq = g.square(w);
        let energy = g.sum_axes(sq, &[1, 2, 3])?;
        let energy = g.add_scalar(energy, DEMOD_EPS);
        let norm = g.sqrt(energy);
        w = g.div(w, norm)?;
    }
    g.conv2d(x, w)
}

/// Image tokens query latent tokens:
/// `softmax(Q(x + pe_img) K(w_l + pe_lat)^T / sqrt(n)) V(w_l)`.
///
/// `tokens: [hw, n]`, `latents: [L, d]`; the projections are `(weight, bias)`
/// pairs. Returns `[hw, d_v]`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    g: &mut Graph,
    tokens: Var,
    pe_img: Var,
    latents: Var,
    pe_lat: Var,
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
) -> Result<Var> {
    let n = g.shape(tokens)[1];
    let xq = g.add(tokens, pe_img)?;
    let queries = dense(g, xq, q.0, q.1)?;
    let lk = g.add(latents, pe_lat)?;
    let keys = dense(g, lk, k.0, k.1)?;
    let values = dense(g, latents, v.0, v.1)?;
    let kt = g.transpose(keys)?;
    let scores = g.matmul(queries, kt)?;
    let scores = g.scale(scores, 1.0 / (n as f64).sqrt());
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, values)
}

/// Normalizes each channel of `x: [n, h, w]` to zero mean and unit variance
/// over space and scales it pixelwise by `alpha(att)`, a dense projection of
/// the attention output `att: [hw, d]` to `n` channels.
pub fn attn_instance_norm(g: &mut Graph, x: Var, att: Var, alpha: (Var, Var)) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || g.shape(att)[0] != xs[1] * xs[2] {
        return Err(Error::Dimension(format!(
            "attention {:?} not aligned with features {xs:?}",
            g.shape(att)
        )));
    }
    let scale = dense(g, att, alpha.0, alpha.1)?;
    let scale = g.transpose(scale)?;
    let scale = g.reshape(scale, &xs)?;

    let mu = g.mean_axes(x, &[1, 2])?;
    let centered = g.sub(x, mu)?;
    let sq = g.square(centered);
    let var = g.mean_axes(sq, &[1, 2])?;
    let var = g.add_scalar(var, NORM_EPS);
    let std = g.sqrt(var);
    let normed = g.div(centered, std)?;
    g.mul(scale, normed)
}

/// `[n, h, w]` feature maps as `[hw, n]` tokens.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Standard sinusoidal encoding of a scalar position into `dim` values.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64 * 2.0;
            let freq = 1.0 / 10000f64.powf(pair / dim as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// Fixed 2D encoding for `h*w` image tokens: the first `n/2` channels encode
/// the row, the rest the column.
pub fn image_positional_encoding(h: usize, w: usize, n: usize) -> Tensor {
    let row_dim = n / 2;
    let col_dim = n - row_dim;
    let mut data = Vec::with_capacity(h * w * n);
    for r in 0..h {
        let re = sinusoid(r as f64, row_dim);
        for c in 0..w {
            data.extend_from_slice(&re);
            data.extend(sinusoid(c as f64, col_dim));
        }
    }
    Tensor::new(&[h * w, n], data).expect("sized encoding")
}
