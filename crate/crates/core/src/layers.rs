//! Forward and backward passes for the layer kinds used by the network:
//! same-padded stride-1 convolution, 2x2 max pooling, 2x nearest-neighbour
//! upsampling, channel concatenation, ReLU and sigmoid.
//!
//! All tensors are `[B, H, W, C]`. Backward functions return exact analytic
//! gradients of their forward map.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Kernel `[k, k, c_in, c_out]` and bias `[c_out]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub biases: Tensor,
}

impl ConvParams {
    pub fn new(kernels: Tensor, biases: Tensor) -> Result<Self> {
        let (kh, kw, _, cout) = kernels.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("kernel must be square and odd, got {kh}x{kw}"));
        }
        if biases.shape() != [cout] {
            return Err(shape_err!(
                "bias shape {:?} does not match {cout} output channels",
                biases.shape()
            ));
        }
        Ok(ConvParams { kernels, biases })
    }

    pub fn zeros(k: usize, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[k, k, c_in, c_out])?, Tensor::zeros(&[c_out])?)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub biases: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Tensor,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

/// `c = a * b + beta * c` for row-major-addressed views described by
/// (row stride, column stride) pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the assertions above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers the `k x k` zero-padded neighbourhood of every pixel of one
/// image into a `[h * w, k * k * c]` matrix.
fn im2col(image: &[f32], h: usize, w: usize, c: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut cols[(y * w + x) * row_len..][..row_len];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                for dx in 0..k {
                    let sx = x as isize + dx as isize - pad;
                    let dst = &mut row[(dy * k + dx) * c..][..c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&image[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column gradients back onto the image.
fn col2im(cols: &[f32], h: usize, w: usize, c: usize, k: usize, image: &mut [f32]) {
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * row_len..][..row_len];
            for dy in 0..k {
                let sy = y as isize + dy as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = x as isize + dx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    for (d, &s) in image[dst..dst + c]
                        .iter_mut()
                        .zip(&row[(dy * k + dx) * c..][..c])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 convolution.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<(Tensor, ConvCache)> {
    let (b, h, w, cin) = input.dims4()?;
    let k = params.kernel_size();
    let cout = params.out_channels();
    if cin != params.in_channels() {
        return Err(shape_err!(
            "conv input has {cin} channels, kernel expects {}",
            params.in_channels()
        ));
    }
    let hw = h * w;
    let row_len = k * k * cin;
    let mut out = vec![0.0f32; b * hw * cout];
    for px in out.chunks_exact_mut(cout) {
        px.copy_from_slice(params.biases.data());
    }
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; hw * row_len] };
    for bi in 0..b {
        let image = &input.data()[bi * hw * cin..][..hw * cin];
        let a: &[f32] = if k == 1 {
            image
        } else {
            im2col(image, h, w, cin, k, &mut cols);
            &cols
        };
        gemm(
            hw,
            row_len,
            cout,
            a,
            (row_len, 1),
            params.kernels.data(),
            (cout, 1),
            1.0,
            &mut out[bi * hw * cout..][..hw * cout],
        );
    }
    let out = Tensor::from_vec(&[b, h, w, cout], out)?;
    Ok((
        out,
        ConvCache {
            input: input.clone(),
        },
    ))
}

pub fn conv2d_backward(cache: &ConvCache, params: &ConvParams, upstream: &Tensor) -> Result<ConvGrads> {
    let (b, h, w, cin) = cache.input.dims4()?;
    let k = params.kernel_size();
    let cout = params.out_channels();
    if upstream.shape() != [b, h, w, cout] {
        return Err(shape_err!(
            "conv upstream {:?} does not match output [{b}, {h}, {w}, {cout}]",
            upstream.shape()
        ));
    }
    let hw = h * w;
    let row_len = k * k * cin;

    let mut bias_acc = vec![0.0f64; cout];
    for px in upstream.data().chunks_exact(cout) {
        for (acc, &g) in bias_acc.iter_mut().zip(px) {
            *acc += g as f64;
        }
    }

    let mut grad_kernels = vec![0.0f32; row_len * cout];
    let mut grad_input = vec![0.0f32; b * hw * cin];
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; hw * row_len] };
    let mut dcols = if k == 1 { Vec::new() } else { vec![0.0; hw * row_len] };
    for bi in 0..b {
        let image = &cache.input.data()[bi * hw * cin..][..hw * cin];
        let up = &upstream.data()[bi * hw * cout..][..hw * cout];
        let a: &[f32] = if k == 1 {
            image
        } else {
            im2col(image, h, w, cin, k, &mut cols);
            &cols
        };
        // dK += cols^T . up
        gemm(row_len, hw, cout, a, (1, row_len), up, (cout, 1), 1.0, &mut grad_kernels);
        // dcols = up . K^T
        let gi = &mut grad_input[bi * hw * cin..][..hw * cin];
        if k == 1 {
            gemm(hw, cout, cin, up, (cout, 1), params.kernels.data(), (1, cout), 0.0, gi);
        } else {
            gemm(hw, cout, row_len, up, (cout, 1), params.kernels.data(), (1, cout), 0.0, &mut dcols);
            col2im(&dcols, h, w, cin, k, gi);
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(&[b, h, w, cin], grad_input)?,
        kernels: Tensor::from_vec(params.kernels.shape(), grad_kernels)?,
        biases: Tensor::from_vec(&[cout], bias_acc.into_iter().map(|v| v as f32).collect())?,
    })
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// scan order of the window.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let (b, h, w, c) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("maxpool needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let base = ((bi * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best_idx = base;
                    let mut best = data[base];
                    for idx in [base + c, base + w * c, base + w * c + c] {
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[b, oh, ow, c], out)?,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(cache: &PoolCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != cache.argmax.len() {
        return Err(shape_err!(
            "maxpool upstream {:?} does not match pooled output",
            upstream.shape()
        ));
    }
    let mut grad = Tensor::zeros(&cache.input_shape)?;
    let g = grad.data_mut();
    for (&idx, &u) in cache.argmax.iter().zip(upstream.data()) {
        g[idx as usize] += u;
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(input: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = input.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0f32; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let s = ((bi * h + oy / 2) * w + ox / 2) * c;
                let d = ((bi * oh + oy) * ow + ox) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::from_vec(&[b, oh, ow, c], out)
}

/// Adjoint of [`upsample2_forward`]: sums each replicated 2x2 block.
pub fn upsample2_backward(upstream: &Tensor) -> Result<Tensor> {
    let (b, oh, ow, c) = upstream.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(shape_err!("upsample upstream must have even dims, got {oh}x{ow}"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let up = upstream.data();
    let mut grad = vec![0.0f32; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let s = ((bi * oh + oy) * ow + ox) * c;
                let d = ((bi * h + oy / 2) * w + ox / 2) * c;
                for (g, &u) in grad[d..d + c].iter_mut().zip(&up[s..s + c]) {
                    *g += u;
                }
            }
        }
    }
    Tensor::from_vec(&[b, h, w, c], grad)
}

/// Concatenates along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ha, wa, ca) = a.dims4()?;
    let (bb, hb, wb, cb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(shape_err!(
            "cannot concat {:?} with {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::from_vec(&[ba, ha, wa, ca + cb], out)
}

/// Inverse of [`concat_channels`]; also its backward pass.
pub fn split_channels(t: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (b, h, w, c) = t.dims4()?;
    if first == 0 || first >= c {
        return Err(shape_err!("cannot split {c} channels at {first}"));
    }
    let mut a = Vec::with_capacity(b * h * w * first);
    let mut rest = Vec::with_capacity(b * h * w * (c - first));
    for px in t.data().chunks_exact(c) {
        a.extend_from_slice(&px[..first]);
        rest.extend_from_slice(&px[first..]);
    }
    Ok((
        Tensor::from_vec(&[b, h, w, first], a)?,
        Tensor::from_vec(&[b, h, w, c - first], rest)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Masks `upstream` where the ReLU output is zero, i.e. where the input was
/// `<= 0`. The derivative at exactly zero is taken as 0.
pub fn relu_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if output.shape() != upstream.shape() {
        return Err(shape_err!("relu upstream shape mismatch"));
    }
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Sigmoid outputs are kept at least this far from 0 and 1 so the network's
/// predictions stay strictly inside the unit interval in `f32`.
pub const SIGMOID_MARGIN: f32 = 1e-7;

fn sigmoid_scalar(x: f32) -> f32 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward(output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if output.shape() != upstream.shape() {
        return Err(shape_err!("sigmoid upstream shape mismatch"));
    }
    let data = output
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(output.shape(), data)
}
