//! Forward/backward compute kernels on raw row-major slices.
//!
//! Every function here is pure and single-writer per output element, so
//! results are bit-identical regardless of the rayon pool size. The tape
//! (`tape.rs`) owns op recording and dispatches into these kernels; keeping
//! them slice-based makes the finite-difference oracles trivial to write
//! against the same code paths.

use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Padding

/// Padding mode for convolutions and patch unfolding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Mirror across the edge without repeating it: [a b c] -> b a [a b c] b a
    Reflect,
    Zero,
}

/// Mirror an out-of-range index back into [0, n). Handles repeated folds.
pub fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Pad each H x W plane of a C-plane tensor. Returns (Hp, Wp) data.
pub fn pad2d(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    mode: PadMode,
) -> Vec<f64> {
    let (hp, wp) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * hp * wp..(ch + 1) * hp * wp];
        for yp in 0..hp {
            let sy = match mode {
                PadMode::Reflect => reflect_index(yp as isize - top as isize, h) as isize,
                PadMode::Zero => yp as isize - top as isize,
            };
            if sy < 0 || sy >= h as isize {
                continue; // zero mode out of range: row stays zero
            }
            let srow = &src[sy as usize * w..sy as usize * w + w];
            let drow = &mut dst[yp * wp..yp * wp + wp];
            for (xp, d) in drow.iter_mut().enumerate() {
                let sx = match mode {
                    PadMode::Reflect => reflect_index(xp as isize - left as isize, w) as isize,
                    PadMode::Zero => xp as isize - left as isize,
                };
                if sx >= 0 && sx < w as isize {
                    *d = srow[sx as usize];
                }
            }
        }
    }
    out
}

/// Adjoint of `pad2d`: fold the gradient of the padded tensor back onto the
/// unpadded one (accumulating where reflection duplicated a source cell).
pub fn pad2d_backward(
    grad_padded: &[f64],
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    mode: PadMode,
) -> Vec<f64> {
    let (hp, wp) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gsrc = &grad_padded[ch * hp * wp..(ch + 1) * hp * wp];
        let gdst = &mut out[ch * h * w..(ch + 1) * h * w];
        for yp in 0..hp {
            let sy = match mode {
                PadMode::Reflect => reflect_index(yp as isize - top as isize, h) as isize,
                PadMode::Zero => yp as isize - top as isize,
            };
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xp in 0..wp {
                let sx = match mode {
                    PadMode::Reflect => reflect_index(xp as isize - left as isize, w) as isize,
                    PadMode::Zero => xp as isize - left as isize,
                };
                if sx >= 0 && sx < w as isize {
                    gdst[sy as usize * w + sx as usize] += gsrc[yp * wp + xp];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution

/// Spatial extent of a convolution output.
pub fn conv_out_extent(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Cross-correlation of one C_in x H x W item with an O x C_in x k x k
/// kernel. Returns O x OH x OW. `bias` has length O.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Vec<f64> {
    let padded = pad2d(input, c_in, h, w, pad, pad, pad, pad, mode);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (oh, ow) = (conv_out_extent(h, k, pad, stride), conv_out_extent(w, k, pad, stride));
    let mut out = vec![0.0; c_out * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, dst)| {
        dst.fill(bias[o]);
        for ci in 0..c_in {
            let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            let wbase = ((o * c_in) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let srow = &plane[(oy * stride + ky) * wp + kx..];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            for (d, s) in drow.iter_mut().zip(&srow[..ow]) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * srow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of `conv2d` w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let padded = pad2d(input, c_in, h, w, pad, pad, pad, pad, mode);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (oh, ow) = (conv_out_extent(h, k, pad, stride), conv_out_extent(w, k, pad, stride));

    // d/d padded input: parallel over input channels (single writer each).
    let mut grad_padded = vec![0.0; c_in * hp * wp];
    grad_padded.par_chunks_mut(hp * wp).enumerate().for_each(|(ci, gplane)| {
        for o in 0..c_out {
            let gout = &grad_out[o * oh * ow..(o + 1) * oh * ow];
            let wbase = ((o * c_in) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let grow = &gout[oy * ow..(oy + 1) * ow];
                        let drow = &mut gplane[(oy * stride + ky) * wp + kx..];
                        if stride == 1 {
                            for (g, d) in grow.iter().zip(drow.iter_mut()) {
                                *d += wv * g;
                            }
                        } else {
                            for (ox, g) in grow.iter().enumerate() {
                                drow[ox * stride] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    });
    let grad_input = pad2d_backward(&grad_padded, c_in, h, w, pad, pad, pad, pad, mode);

    // d/d weight and bias: parallel over output channels.
    let mut grad_weight = vec![0.0; c_out * c_in * k * k];
    let mut grad_bias = vec![0.0; c_out];
    grad_weight
        .par_chunks_mut(c_in * k * k)
        .zip(grad_bias.par_iter_mut())
        .enumerate()
        .for_each(|(o, (gw, gb))| {
            let gout = &grad_out[o * oh * ow..(o + 1) * oh * ow];
            *gb = gout.iter().sum();
            for ci in 0..c_in {
                let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let grow = &gout[oy * ow..(oy + 1) * ow];
                            let srow = &plane[(oy * stride + ky) * wp + kx..];
                            if stride == 1 {
                                for (g, s) in grow.iter().zip(&srow[..ow]) {
                                    acc += g * s;
                                }
                            } else {
                                for (ox, g) in grow.iter().enumerate() {
                                    acc += g * srow[ox * stride];
                                }
                            }
                        }
                        gw[ci * k * k + ky * k + kx] = acc;
                    }
                }
            }
        });
    (grad_input, grad_weight, grad_bias)
}

/// Depthwise convolution: weight C x M x k x k, output channel c*M + j
/// depends only on input channel c. Stride 1.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    mult: usize,
    k: usize,
    pad: usize,
    mode: PadMode,
) -> Vec<f64> {
    let padded = pad2d(input, c, h, w, pad, pad, pad, pad, mode);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (oh, ow) = (conv_out_extent(h, k, pad, 1), conv_out_extent(w, k, pad, 1));
    let mut out = vec![0.0; c * mult * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, dst)| {
        let (ci, j) = (oc / mult, oc % mult);
        dst.fill(bias[oc]);
        let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
        let wbase = (ci * mult + j) * k * k;
        for ky in 0..k {
            for kx in 0..k {
                let wv = weight[wbase + ky * k + kx];
                for oy in 0..oh {
                    let srow = &plane[(oy + ky) * wp + kx..];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (d, s) in drow.iter_mut().zip(&srow[..ow]) {
                        *d += wv * s;
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    mult: usize,
    k: usize,
    pad: usize,
    mode: PadMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let padded = pad2d(input, c, h, w, pad, pad, pad, pad, mode);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let (oh, ow) = (conv_out_extent(h, k, pad, 1), conv_out_extent(w, k, pad, 1));

    let mut grad_padded = vec![0.0; c * hp * wp];
    let mut grad_weight = vec![0.0; c * mult * k * k];
    let mut grad_bias = vec![0.0; c * mult];
    grad_padded
        .par_chunks_mut(hp * wp)
        .zip(grad_weight.par_chunks_mut(mult * k * k))
        .enumerate()
        .for_each(|(ci, (gplane, gw))| {
            let plane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            for j in 0..mult {
                let oc = ci * mult + j;
                let gout = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
                let wbase = oc * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[wbase + ky * k + kx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let grow = &gout[oy * ow..(oy + 1) * ow];
                            let drow = &mut gplane[(oy + ky) * wp + kx..];
                            let srow = &plane[(oy + ky) * wp + kx..];
                            for (ox, g) in grow.iter().enumerate() {
                                drow[ox] += wv * g;
                                acc += g * srow[ox];
                            }
                        }
                        gw[j * k * k + ky * k + kx] = acc;
                    }
                }
            }
        });
    for oc in 0..c * mult {
        grad_bias[oc] = grad_out[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
    }
    let grad_input = pad2d_backward(&grad_padded, c, h, w, pad, pad, pad, pad, mode);
    (grad_input, grad_weight, grad_bias)
}

// ---------------------------------------------------------------------------
// Bilinear interpolation (align_corners = false)

/// Per-output-index source pair and interpolation weight for one axis.
pub fn resize_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|d| {
            let s = (d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let fl = s.floor();
            let f = s - fl;
            let i0 = (fl as isize).clamp(0, n_in as isize - 1) as usize;
            let i1 = (fl as isize + 1).clamp(0, n_in as isize - 1) as usize;
            (i0, i1, f)
        })
        .collect()
}

pub fn bilinear_resize(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                dst[dy * ow + dx] = top + fy * (bot - top);
            }
        }
    }
    out
}

pub fn bilinear_resize_backward(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut grad_in = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = g[dy * ow + dx];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    grad_in
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis, per spatial site

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Returns (output, inv_std per site). gamma/beta have length C.
pub fn layer_norm(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    let mut inv_std = vec![0.0; hw];
    for s in 0..hw {
        let mut mean = 0.0;
        for ch in 0..c {
            mean += input[ch * hw + s];
        }
        mean /= c as f64;
        let mut var = 0.0;
        for ch in 0..c {
            let d = input[ch * hw + s] - mean;
            var += d * d;
        }
        var /= c as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[s] = istd;
        for ch in 0..c {
            let xhat = (input[ch * hw + s] - mean) * istd;
            out[ch * hw + s] = xhat * gamma[ch] + beta[ch];
        }
    }
    (out, inv_std)
}

/// Gradients w.r.t. (input, gamma, beta). `inv_std` comes from the forward.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    grad_out: &[f64],
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    gamma: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let cf = c as f64;
    let mut grad_in = vec![0.0; c * hw];
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for s in 0..hw {
        let istd = inv_std[s];
        let mut mean = 0.0;
        for ch in 0..c {
            mean += input[ch * hw + s];
        }
        mean /= cf;
        // dg = grad_out * gamma; reduce its mean and its x-hat-weighted mean.
        let mut sum_dg = 0.0;
        let mut sum_dg_xhat = 0.0;
        for ch in 0..c {
            let xhat = (input[ch * hw + s] - mean) * istd;
            let dg = grad_out[ch * hw + s] * gamma[ch];
            sum_dg += dg;
            sum_dg_xhat += dg * xhat;
            grad_gamma[ch] += grad_out[ch * hw + s] * xhat;
            grad_beta[ch] += grad_out[ch * hw + s];
        }
        let mean_dg = sum_dg / cf;
        let mean_dg_xhat = sum_dg_xhat / cf;
        for ch in 0..c {
            let xhat = (input[ch * hw + s] - mean) * istd;
            let dg = grad_out[ch * hw + s] * gamma[ch];
            grad_in[ch * hw + s] = istd * (dg - mean_dg - xhat * mean_dg_xhat);
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

// ---------------------------------------------------------------------------
// Pooling

/// Per-channel means: C x H x W -> C (interpreted as C x 1 x 1).
pub fn global_avg_pool(input: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| input[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Per-channel maxima and their first argmax indices.
pub fn global_max_pool(input: &[f64], c: usize, hw: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = Vec::with_capacity(c);
    let mut args = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        let (mut best, mut arg) = (plane[0], 0);
        for (i, &v) in plane.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                arg = i;
            }
        }
        vals.push(best);
        args.push(arg);
    }
    (vals, args)
}

/// Across-channel mean: C x H x W -> H x W (interpreted as 1 x H x W).
pub fn spatial_mean_pool(input: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&input[ch * hw..(ch + 1) * hw]) {
            *o += v;
        }
    }
    let inv = 1.0 / c as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Across-channel max and argmax channel per site.
pub fn spatial_max_pool(input: &[f64], c: usize, hw: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = input[..hw].to_vec();
    let mut args = vec![0usize; hw];
    for ch in 1..c {
        for s in 0..hw {
            let v = input[ch * hw + s];
            if v > vals[s] {
                vals[s] = v;
                args[s] = ch;
            }
        }
    }
    (vals, args)
}

// ---------------------------------------------------------------------------
// Patch unfold / fold

/// Number of patches along one axis.
pub fn patch_count(n: usize, p: usize) -> usize {
    n.div_ceil(p)
}

/// C x H x W -> (C * ceil(H/P) * ceil(W/P)) x P x P, reflection-padding the
/// bottom/right remainder. Patch n = (c * nh + py) * nw + px.
pub fn patch_unfold(input: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (nh, nw) = (patch_count(h, p), patch_count(w, p));
    let (hp, wp) = (nh * p, nw * p);
    let padded = pad2d(input, c, h, w, 0, hp - h, 0, wp - w, PadMode::Reflect);
    let mut out = vec![0.0; c * nh * nw * p * p];
    for ch in 0..c {
        let plane = &padded[ch * hp * wp..(ch + 1) * hp * wp];
        for py in 0..nh {
            for px in 0..nw {
                let n = (ch * nh + py) * nw + px;
                let dst = &mut out[n * p * p..(n + 1) * p * p];
                for y in 0..p {
                    let srow = &plane[(py * p + y) * wp + px * p..];
                    dst[y * p..(y + 1) * p].copy_from_slice(&srow[..p]);
                }
            }
        }
    }
    out
}

pub fn patch_unfold_backward(
    grad_patches: &[f64],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Vec<f64> {
    let (nh, nw) = (patch_count(h, p), patch_count(w, p));
    let (hp, wp) = (nh * p, nw * p);
    let mut grad_padded = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let plane = &mut grad_padded[ch * hp * wp..(ch + 1) * hp * wp];
        for py in 0..nh {
            for px in 0..nw {
                let n = (ch * nh + py) * nw + px;
                let src = &grad_patches[n * p * p..(n + 1) * p * p];
                for y in 0..p {
                    let drow = &mut plane[(py * p + y) * wp + px * p..];
                    for x in 0..p {
                        drow[x] += src[y * p + x];
                    }
                }
            }
        }
    }
    pad2d_backward(&grad_padded, c, h, w, 0, hp - h, 0, wp - w, PadMode::Reflect)
}

/// Exact inverse of `patch_unfold` for the original (c, h, w).
pub fn patch_fold(patches: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (nh, nw) = (patch_count(h, p), patch_count(w, p));
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for py in 0..nh {
            for px in 0..nw {
                let n = (ch * nh + py) * nw + px;
                let src = &patches[n * p * p..(n + 1) * p * p];
                for y in 0..p {
                    let gy = py * p + y;
                    if gy >= h {
                        break;
                    }
                    for x in 0..p {
                        let gx = px * p + x;
                        if gx >= w {
                            break;
                        }
                        dst[gy * w + gx] = src[y * p + x];
                    }
                }
            }
        }
    }
    out
}

pub fn patch_fold_backward(grad_out: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (nh, nw) = (patch_count(h, p), patch_count(w, p));
    let mut grad_patches = vec![0.0; c * nh * nw * p * p];
    for ch in 0..c {
        let g = &grad_out[ch * h * w..(ch + 1) * h * w];
        for py in 0..nh {
            for px in 0..nw {
                let n = (ch * nh + py) * nw + px;
                let dst = &mut grad_patches[n * p * p..(n + 1) * p * p];
                for y in 0..p {
                    let gy = py * p + y;
                    if gy >= h {
                        break;
                    }
                    for x in 0..p {
                        let gx = px * p + x;
                        if gx >= w {
                            break;
                        }
                        dst[y * p + x] = g[gy * w + gx];
                    }
                }
            }
        }
    }
    grad_patches
}

// ---------------------------------------------------------------------------
// Spectral ops on stacks of P x P patches

use super::fft::fft2_raw;

fn fft_patch(src: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = src.to_vec();
    let mut im = vec![0.0; p * p];
    fft2_raw(&mut re, &mut im, p, p, false);
    (re, im)
}

/// Circular cross-correlation via the frequency domain:
/// out = IFFT2(FFT2(q) * conj(FFT2(k))), real part, per patch.
/// Spatially: out[s,t] = sum_{u,v} q[(s+u)%P, (t+v)%P] * k[u,v].
pub fn spectral_corr(q: &[f64], k: &[f64], n: usize, p: usize) -> Vec<f64> {
    let pp = p * p;
    let mut out = vec![0.0; n * pp];
    for i in 0..n {
        let (qr, qi) = fft_patch(&q[i * pp..(i + 1) * pp], p);
        let (kr, ki) = fft_patch(&k[i * pp..(i + 1) * pp], p);
        let mut re = vec![0.0; pp];
        let mut im = vec![0.0; pp];
        for j in 0..pp {
            // q * conj(k)
            re[j] = qr[j] * kr[j] + qi[j] * ki[j];
            im[j] = qi[j] * kr[j] - qr[j] * ki[j];
        }
        fft2_raw(&mut re, &mut im, p, p, true);
        out[i * pp..(i + 1) * pp].copy_from_slice(&re);
    }
    out
}

/// Gradients of `spectral_corr` w.r.t. q and k:
/// grad_q = IFFT2(FFT2(gout) * FFT2(k)) (circular convolution),
/// grad_k = IFFT2(FFT2(q) * conj(FFT2(gout))).
pub fn spectral_corr_backward(
    grad_out: &[f64],
    q: &[f64],
    k: &[f64],
    n: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pp = p * p;
    let mut gq = vec![0.0; n * pp];
    let mut gk = vec![0.0; n * pp];
    for i in 0..n {
        let (ar, ai) = fft_patch(&grad_out[i * pp..(i + 1) * pp], p);
        let (qr, qi) = fft_patch(&q[i * pp..(i + 1) * pp], p);
        let (kr, ki) = fft_patch(&k[i * pp..(i + 1) * pp], p);
        let mut re = vec![0.0; pp];
        let mut im = vec![0.0; pp];
        for j in 0..pp {
            // gout_hat * k_hat
            re[j] = ar[j] * kr[j] - ai[j] * ki[j];
            im[j] = ar[j] * ki[j] + ai[j] * kr[j];
        }
        fft2_raw(&mut re, &mut im, p, p, true);
        gq[i * pp..(i + 1) * pp].copy_from_slice(&re);

        let mut re = vec![0.0; pp];
        let mut im = vec![0.0; pp];
        for j in 0..pp {
            // q_hat * conj(gout_hat)
            re[j] = qr[j] * ar[j] + qi[j] * ai[j];
            im[j] = qi[j] * ar[j] - qr[j] * ai[j];
        }
        fft2_raw(&mut re, &mut im, p, p, true);
        gk[i * pp..(i + 1) * pp].copy_from_slice(&re);
    }
    (gq, gk)
}

/// Per-patch frequency reweighting: out = Re(IFFT2(W ⊙ FFT2(x))) with one
/// real P x P weight matrix shared across all patches.
pub fn spectral_weight(x: &[f64], wmat: &[f64], n: usize, p: usize) -> Vec<f64> {
    let pp = p * p;
    let mut out = vec![0.0; n * pp];
    for i in 0..n {
        let (mut re, mut im) = fft_patch(&x[i * pp..(i + 1) * pp], p);
        for j in 0..pp {
            re[j] *= wmat[j];
            im[j] *= wmat[j];
        }
        fft2_raw(&mut re, &mut im, p, p, true);
        out[i * pp..(i + 1) * pp].copy_from_slice(&re);
    }
    out
}

/// Gradients of `spectral_weight`. The input adjoint reuses the forward
/// operator (it is self-adjoint for real W); the weight adjoint is
/// Re(FFT2(x) * conj(FFT2(gout))) / P^2 accumulated over patches.
pub fn spectral_weight_backward(
    grad_out: &[f64],
    x: &[f64],
    wmat: &[f64],
    n: usize,
    p: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pp = p * p;
    let gx = spectral_weight(grad_out, wmat, n, p);
    let mut gw = vec![0.0; pp];
    let inv = 1.0 / pp as f64;
    for i in 0..n {
        let (xr, xi) = fft_patch(&x[i * pp..(i + 1) * pp], p);
        let (gr, gi) = fft_patch(&grad_out[i * pp..(i + 1) * pp], p);
        for j in 0..pp {
            gw[j] += (xr[j] * gr[j] + xi[j] * gi[j]) * inv;
        }
    }
    (gx, gw)
}

// ---------------------------------------------------------------------------
// Scalar nonlinearities

const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation (fixed for oracle reproducibility).
pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Phase wrapping

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_phase(d: f64) -> f64 {
    d - std::f64::consts::TAU * ((d - std::f64::consts::PI) / std::f64::consts::TAU).ceil()
}

// ---------------------------------------------------------------------------
// Gaussian helpers (loss windows and the degradation pipeline)

/// Normalized 1-D Gaussian taps of the given length.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with reflection boundaries, per channel.
pub fn gaussian_blur(input: &[f64], c: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return input.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let taps = gaussian_taps(2 * radius + 1, sigma);
    let mut tmp = vec![0.0; c * h * w];
    // Horizontal pass.
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let sx = reflect_index(x as isize + t as isize - radius as isize, w);
                    acc += tap * src[y * w + sx];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &tmp[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let sy = reflect_index(y as isize + t as isize - radius as isize, h);
                    acc += tap * src[sy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Thread-pool configuration

/// Cap the rayon pool used by the parallel kernels. Reads SFIM_THREADS when
/// `cap` is None; silently keeps the existing pool if one was already built.
pub fn configure_threads(cap: Option<usize>) {
    let n = cap.or_else(|| {
        std::env::var("SFIM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    /// Six-nested-loop convolution oracle with explicit padding semantics.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_naive(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Vec<f64> {
        let oh = conv_out_extent(h, k, pad, stride);
        let ow = conv_out_extent(w, k, pad, stride);
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = match mode {
                                    PadMode::Reflect => {
                                        input[ci * h * w
                                            + reflect_index(iy, h) * w
                                            + reflect_index(ix, w)]
                                    }
                                    PadMode::Zero => {
                                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize
                                        {
                                            0.0
                                        } else {
                                            input[ci * h * w + iy as usize * w + ix as usize]
                                        }
                                    }
                                };
                                acc += v * weight[((o * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_center_of_ones_is_nine() {
        let input = vec![1.0; 9];
        let weight = vec![1.0; 9];
        let out = conv2d(&input, 1, 3, 3, &weight, &[0.0], 1, 3, 1, 1, PadMode::Zero);
        assert_eq!(out.len(), 9);
        assert_eq!(out[4], 9.0);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let input = rand_vec(&mut rng, 3 * 5 * 4);
        let mut weight = vec![0.0; 3 * 3];
        weight[0] = 1.0;
        weight[4] = 1.0;
        weight[8] = 1.0;
        // 1x1 identity per channel via depthwise instead: use conv with
        // block-diagonal weights.
        let mut w_full = vec![0.0; 3 * 3 * 1 * 1];
        w_full[0] = 1.0; // o0 <- c0
        w_full[4] = 1.0; // o1 <- c1
        w_full[8] = 1.0; // o2 <- c2
        let out = conv2d(&input, 3, 5, 4, &w_full, &[0.0; 3], 3, 1, 1, 0, PadMode::Zero);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_naive_oracle_both_pad_modes() {
        let mut rng = Rng::new(2);
        for &mode in &[PadMode::Zero, PadMode::Reflect] {
            for &(c_in, c_out, h, w, k, stride, pad) in &[
                (3usize, 2usize, 5usize, 5usize, 3usize, 1usize, 1usize),
                (1, 1, 4, 7, 3, 2, 1),
                (2, 4, 6, 5, 1, 1, 0),
                (3, 3, 5, 6, 3, 1, 2),
            ] {
                let input = rand_vec(&mut rng, c_in * h * w);
                let weight = rand_vec(&mut rng, c_out * c_in * k * k);
                let bias = rand_vec(&mut rng, c_out);
                let got = conv2d(&input, c_in, h, w, &weight, &bias, c_out, k, stride, pad, mode);
                let want =
                    conv2d_naive(&input, c_in, h, w, &weight, &bias, c_out, k, stride, pad, mode);
                for (g, e) in got.iter().zip(&want) {
                    assert!((g - e).abs() < 1e-12, "mode {mode:?} mismatch");
                }
            }
        }
    }

    #[test]
    fn depthwise_groups_channels_correctly() {
        let mut rng = Rng::new(3);
        let (c, h, w, mult, k) = (3, 4, 4, 2, 3);
        let input = rand_vec(&mut rng, c * h * w);
        let weight = rand_vec(&mut rng, c * mult * k * k);
        let bias = vec![0.0; c * mult];
        let base = depthwise_conv2d(&input, c, h, w, &weight, &bias, mult, k, 1, PadMode::Zero);
        // Perturb input channel 2; outputs 0..4 must not change.
        let mut input2 = input.clone();
        for v in input2[2 * h * w..3 * h * w].iter_mut() {
            *v += 0.5;
        }
        let out2 = depthwise_conv2d(&input2, c, h, w, &weight, &bias, mult, k, 1, PadMode::Zero);
        assert_eq!(base[..4 * h * w], out2[..4 * h * w]);
        assert_ne!(base[4 * h * w..], out2[4 * h * w..]);
    }

    #[test]
    fn depthwise_identity_kernels_pass_input_through() {
        let mut rng = Rng::new(4);
        let (c, h, w) = (2, 3, 5);
        let input = rand_vec(&mut rng, c * h * w);
        let mut weight = vec![0.0; c * 1 * 9];
        weight[4] = 1.0;
        weight[13] = 1.0;
        let out =
            depthwise_conv2d(&input, c, h, w, &weight, &[0.0; 2], 1, 3, 1, PadMode::Reflect);
        for (a, b) in out.iter().zip(&input) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn depthwise_matches_grouped_naive_loop() {
        let mut rng = Rng::new(5);
        let (c, h, w, mult, k, pad) = (3, 5, 6, 2, 3, 1);
        let input = rand_vec(&mut rng, c * h * w);
        let weight = rand_vec(&mut rng, c * mult * k * k);
        let bias = rand_vec(&mut rng, c * mult);
        let got = depthwise_conv2d(&input, c, h, w, &weight, &bias, mult, k, pad, PadMode::Reflect);
        let (oh, ow) = (h, w);
        for ci in 0..c {
            for j in 0..mult {
                let oc = ci * mult + j;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = reflect_index(oy as isize + ky as isize - pad as isize, h);
                                let ix = reflect_index(ox as isize + kx as isize - pad as isize, w);
                                acc += input[ci * h * w + iy * w + ix]
                                    * weight[(oc * k + ky) * k + kx];
                            }
                        }
                        let g = got[(oc * oh + oy) * ow + ox];
                        assert!((g - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let input = vec![0.7; 3 * 4 * 5];
        for &(oh, ow) in &[(1usize, 1usize), (8, 10), (4, 5), (3, 9)] {
            let out = bilinear_resize(&input, 3, 4, 5, oh, ow);
            for v in out {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_weights() {
        // Source rows (a b / c d); output sample positions land at
        // src = (d+0.5)/2 - 0.5 per axis: -0.25, 0.25, 0.75, 1.25.
        let (a, b, c, d) = (1.0, 2.0, 5.0, 9.0);
        let out = bilinear_resize(&[a, b, c, d], 1, 2, 2, 4, 4);
        // Axis weights: index pairs/(frac): (0,0,.75)->v0, (0,1,.25),
        // (0,1,.75), (1,1,.25)->v1. Hand-computed expectations:
        let wy = [(0usize, 0usize, 0.75f64), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.25)];
        let src = [[a, b], [c, d]];
        for (dy, &(y0, y1, fy)) in wy.iter().enumerate() {
            for (dx, &(x0, x1, fx)) in wy.iter().enumerate() {
                let top = src[y0][x0] + fx * (src[y0][x1] - src[y0][x0]);
                let bot = src[y1][x0] + fx * (src[y1][x1] - src[y1][x0]);
                let want = top + fy * (bot - top);
                let got = out[dy * 4 + dx];
                assert!((got - want).abs() < 1e-12, "({dy},{dx}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn halving_even_extent_is_2x2_mean() {
        let mut rng = Rng::new(6);
        let input = rand_vec(&mut rng, 6 * 8);
        let out = bilinear_resize(&input, 1, 6, 8, 3, 4);
        for y in 0..3 {
            for x in 0..4 {
                let m = (input[(2 * y) * 8 + 2 * x]
                    + input[(2 * y) * 8 + 2 * x + 1]
                    + input[(2 * y + 1) * 8 + 2 * x]
                    + input[(2 * y + 1) * 8 + 2 * x + 1])
                    / 4.0;
                assert!((out[y * 4 + x] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_each_site() {
        let mut rng = Rng::new(7);
        let (c, h, w) = (5, 3, 4);
        // Spread the input well above the 1e-6 epsilon so the output
        // variance sits within 1e-8 of one.
        let input: Vec<f64> = (0..c * h * w).map(|_| rng.uniform(-50.0, 50.0)).collect();
        let gamma = vec![1.0; c];
        let beta = vec![0.0; c];
        let (out, _) = layer_norm(&input, c, h, w, &gamma, &beta);
        for s in 0..h * w {
            let mean: f64 = (0..c).map(|ch| out[ch * h * w + s]).sum::<f64>() / c as f64;
            let var: f64 =
                (0..c).map(|ch| (out[ch * h * w + s] - mean).powi(2)).sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-10, "site {s} mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "site {s} var {var}");
        }
    }

    #[test]
    fn layer_norm_constant_site_gives_zero_before_affine() {
        let input = vec![3.5; 4 * 2 * 2];
        let (out, _) = layer_norm(&input, 4, 2, 2, &[1.0; 4], &[0.0; 4]);
        for v in out {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn pools_on_constant_return_constant() {
        let input = vec![0.3; 3 * 4 * 5];
        let hw = 20;
        assert!(global_avg_pool(&input, 3, hw).iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(global_max_pool(&input, 3, hw).0.iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(spatial_mean_pool(&input, 3, hw).iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(spatial_max_pool(&input, 3, hw).0.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn global_max_finds_single_hot_value() {
        let mut input = vec![0.0; 2 * 3 * 3];
        input[7] = 4.5;
        let (vals, args) = global_max_pool(&input, 2, 9);
        assert_eq!(vals[0], 4.5);
        assert_eq!(args[0], 7);
        assert_eq!(vals[1], 0.0);
    }

    #[test]
    fn pools_match_loop_oracles() {
        let mut rng = Rng::new(8);
        let (c, h, w) = (4, 5, 6);
        let input = rand_vec(&mut rng, c * h * w);
        let hw = h * w;
        let avg = global_avg_pool(&input, c, hw);
        let (mx, _) = global_max_pool(&input, c, hw);
        let smean = spatial_mean_pool(&input, c, hw);
        let (smax, _) = spatial_max_pool(&input, c, hw);
        for ch in 0..c {
            let plane = &input[ch * hw..(ch + 1) * hw];
            let want_avg = plane.iter().sum::<f64>() / hw as f64;
            let want_max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((avg[ch] - want_avg).abs() < 1e-12);
            assert!((mx[ch] - want_max).abs() < 1e-12);
        }
        for s in 0..hw {
            let want_mean = (0..c).map(|ch| input[ch * hw + s]).sum::<f64>() / c as f64;
            let want_max =
                (0..c).map(|ch| input[ch * hw + s]).fold(f64::NEG_INFINITY, f64::max);
            assert!((smean[s] - want_mean).abs() < 1e-12);
            assert!((smax[s] - want_max).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_single_patch_is_reshape() {
        let mut rng = Rng::new(9);
        let input = rand_vec(&mut rng, 2 * 4 * 4);
        let patches = patch_unfold(&input, 2, 4, 4, 4);
        assert_eq!(patches, input);
    }

    #[test]
    fn fold_unfold_roundtrip_on_ragged_shape() {
        let mut rng = Rng::new(10);
        let (c, h, w, p) = (48, 19, 23, 8);
        let input = rand_vec(&mut rng, c * h * w);
        let patches = patch_unfold(&input, c, h, w, p);
        assert_eq!(patches.len(), c * 3 * 3 * p * p);
        let back = patch_fold(&patches, c, h, w, p);
        assert_eq!(back, input);
    }

    #[test]
    fn patch_count_uses_ceiling() {
        assert_eq!(patch_count(16, 8) * patch_count(24, 8), 6);
        assert_eq!(patch_count(17, 8), 3);
        assert_eq!(patch_count(1, 8), 1);
    }

    #[test]
    fn spectral_corr_matches_direct_circular_correlation() {
        let mut rng = Rng::new(11);
        let (n, p) = (3, 8);
        let q = rand_vec(&mut rng, n * p * p);
        let k = rand_vec(&mut rng, n * p * p);
        let got = spectral_corr(&q, &k, n, p);
        for i in 0..n {
            for s in 0..p {
                for t in 0..p {
                    let mut acc = 0.0;
                    for u in 0..p {
                        for v in 0..p {
                            acc += q[i * p * p + ((s + u) % p) * p + (t + v) % p]
                                * k[i * p * p + u * p + v];
                        }
                    }
                    let g = got[i * p * p + s * p + t];
                    assert!((g - acc).abs() < 1e-9, "patch {i} ({s},{t}): {g} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn spectral_corr_of_deltas_is_single_peak() {
        let p = 8;
        let mut q = vec![0.0; p * p];
        let mut k = vec![0.0; p * p];
        q[0] = 1.0;
        k[0] = 1.0;
        let out = spectral_corr(&q, &k, 1, p);
        assert!((out[0] - 1.0).abs() < 1e-12);
        for &v in &out[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_weight_all_ones_is_identity() {
        let mut rng = Rng::new(12);
        let (n, p) = (2, 8);
        let x = rand_vec(&mut rng, n * p * p);
        let out = spectral_weight(&x, &vec![1.0; p * p], n, p);
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_backward_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let (n, p) = (2, 4);
        let q = rand_vec(&mut rng, n * p * p);
        let k = rand_vec(&mut rng, n * p * p);
        let gout = rand_vec(&mut rng, n * p * p);
        let loss = |q: &[f64], k: &[f64]| -> f64 {
            spectral_corr(q, k, n, p).iter().zip(&gout).map(|(a, g)| a * g).sum()
        };
        let (gq, gk) = spectral_corr_backward(&gout, &q, &k, n, p);
        let h = 1e-6;
        for idx in [0usize, 5, 17, 31] {
            let mut qp = q.clone();
            qp[idx] += h;
            let mut qm = q.clone();
            qm[idx] -= h;
            let num = (loss(&qp, &k) - loss(&qm, &k)) / (2.0 * h);
            assert!((gq[idx] - num).abs() < 1e-6, "gq[{idx}]: {} vs {num}", gq[idx]);
            let mut kp = k.clone();
            kp[idx] += h;
            let mut km = k.clone();
            km[idx] -= h;
            let num = (loss(&q, &kp) - loss(&q, &km)) / (2.0 * h);
            assert!((gk[idx] - num).abs() < 1e-6, "gk[{idx}]: {} vs {num}", gk[idx]);
        }

        let wmat = rand_vec(&mut rng, p * p);
        let loss_w = |x: &[f64], w: &[f64]| -> f64 {
            spectral_weight(x, w, n, p).iter().zip(&gout).map(|(a, g)| a * g).sum()
        };
        let (gx, gw) = spectral_weight_backward(&gout, &q, &wmat, n, p);
        for idx in [0usize, 3, 10, 15] {
            let mut wp = wmat.clone();
            wp[idx] += h;
            let mut wm = wmat.clone();
            wm[idx] -= h;
            let num = (loss_w(&q, &wp) - loss_w(&q, &wm)) / (2.0 * h);
            assert!((gw[idx] - num).abs() < 1e-6, "gw[{idx}]: {} vs {num}", gw[idx]);
        }
        for idx in [1usize, 8, 20] {
            let mut xp = q.clone();
            xp[idx] += h;
            let mut xm = q.clone();
            xm[idx] -= h;
            let num = (loss_w(&xp, &wmat) - loss_w(&xm, &wmat)) / (2.0 * h);
            assert!((gx[idx] - num).abs() < 1e-6, "gx[{idx}]: {} vs {num}", gx[idx]);
        }
    }

    #[test]
    fn gelu_and_sigmoid_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
        // Derivative spot-check against finite differences.
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn wrap_phase_lands_in_half_open_interval() {
        use std::f64::consts::PI;
        assert!((wrap_phase(PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!(wrap_phase(0.1).abs() - 0.1 < 1e-12);
        for &d in &[-10.0, -3.2, 0.0, 2.9, 7.1, 100.0] {
            let w = wrap_phase(d);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            // Difference from the input is a multiple of 2 pi.
            let m = (d - w) / std::f64::consts::TAU;
            assert!((m - m.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn reflect_index_handles_edges_and_small_sizes() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-3, 1), 0);
        assert_eq!(reflect_index(2, 2), 0);
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let taps = gaussian_taps(11, 1.5);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((taps[i] - taps[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_mean_of_constant() {
        let input = vec![0.42; 2 * 7 * 9];
        let out = gaussian_blur(&input, 2, 7, 9, 1.3);
        for v in out {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
