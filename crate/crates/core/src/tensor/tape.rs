//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output tensor and enough saved
//! state to replay its adjoint. `backward` seeds the scalar loss with 1.0 and
//! sweeps the tape in reverse, accumulating gradients into per-node buffers;
//! gradients of parameter and leaf nodes are collected into the result. Node
//! values and gradient buffers are released as soon as the sweep retires them,
//! so peak memory stays near the forward pass.
//!
//! Composite frequency-domain ops (patch correlation, spectral reweighting,
//! FFT-based losses) use closed-form adjoints from the kernel layer rather
//! than being traced elementwise; each was validated against finite
//! differences in the kernel tests.

use std::collections::HashMap;

use super::kernels::{self, PadMode};
use super::loss_kernels;
use crate::error::{Result, SfimError};
use crate::params::{PId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(PId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = scale * x + shift, elementwise.
    ScaleShift { x: Var, scale: f64 },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, mode: PadMode },
    DepthwiseConv2d { x: Var, w: Var, b: Option<Var>, pad: usize, mode: PadMode },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64> },
    BilinearResize { x: Var },
    GlobalAvgPool { x: Var },
    GlobalMaxPool { x: Var, arg: Vec<usize> },
    SpatialMeanPool { x: Var },
    SpatialMaxPool { x: Var, arg: Vec<usize> },
    PatchUnfold { x: Var, p: usize },
    PatchFold { x: Var },
    SpectralCorr { q: Var, k: Var },
    SpectralWeight { x: Var, w: Var },
    ChannelSlice { x: Var, from: usize },
    ConcatChannels { parts: Vec<Var> },
    SumAll { x: Var },
    MeanAll { x: Var },
    Charbonnier { x: Var, target: Tensor, eps: f64, per_pixel: bool },
    SsimLoss { x: Var, target: Tensor },
    FftAmpLoss { x: Var, target: Tensor },
    FftPhaseLoss { x: Var, target: Tensor },
    FftComplexL1Loss { x: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    params: HashMap<PId, Vec<f64>>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn wrt_param(&self, id: PId) -> Option<&[f64]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn wrt_leaf(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(|v| v.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (PId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<PId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, context: &str) -> Result<Var> {
        value.assert_finite(context)?;
        Ok(self.push(value, op))
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter node; repeated binds of the same id share one node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, id: PId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip(a, b, |x, y| x + y, "add")?;
        self.push_checked(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip(a, b, |x, y| x - y, "sub")?;
        self.push_checked(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_zip(a, b, |x, y| x * y, "mul")?;
        self.push_checked(value, Op::Mul(a, b), "mul")
    }

    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::ScaleShift { x, scale }, "scale_shift")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Gelu(x), "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Relu(x), "relu")
    }

    // -- convolutions ------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(SfimError::shape(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(SfimError::shape(format!(
                "conv2d weight {ws:?} incompatible with input channels {c_in}"
            )));
        }
        let bias = match b {
            Some(bv) => {
                if self.value(bv).numel() != c_out {
                    return Err(SfimError::shape("conv2d bias length != out channels"));
                }
                self.value(bv).data().to_vec()
            }
            None => vec![0.0; c_out],
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            c_in,
            h,
            wd,
            self.value(w).data(),
            &bias,
            c_out,
            k,
            stride,
            pad,
            mode,
        );
        let oh = kernels::conv_out_extent(h, k, pad, stride);
        let ow = kernels::conv_out_extent(wd, k, pad, stride);
        let value = Tensor::new(vec![c_out, oh, ow], out)?;
        self.push_checked(value, Op::Conv2d { x, w, b, stride, pad, mode }, "conv2d")
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        mode: PadMode,
    ) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [wc, mult, k, k2] = ws[..] else {
            return Err(SfimError::shape(format!(
                "depthwise weight must be rank 4 (c, mult, k, k), got {ws:?}"
            )));
        };
        if wc != c || k != k2 {
            return Err(SfimError::shape(format!(
                "depthwise weight {ws:?} incompatible with input channels {c}"
            )));
        }
        let bias = match b {
            Some(bv) => {
                if self.value(bv).numel() != c * mult {
                    return Err(SfimError::shape("depthwise bias length != c * mult"));
                }
                self.value(bv).data().to_vec()
            }
            None => vec![0.0; c * mult],
        };
        let out = kernels::depthwise_conv2d(
            self.value(x).data(),
            c,
            h,
            wd,
            self.value(w).data(),
            &bias,
            mult,
            k,
            pad,
            mode,
        );
        let oh = kernels::conv_out_extent(h, k, pad, 1);
        let ow = kernels::conv_out_extent(wd, k, pad, 1);
        let value = Tensor::new(vec![c * mult, oh, ow], out)?;
        self.push_checked(value, Op::DepthwiseConv2d { x, w, b, pad, mode }, "depthwise_conv2d")
    }

    // -- normalization and resampling ---------------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(SfimError::shape("layer_norm affine length != channels"));
        }
        let (out, inv_std) = kernels::layer_norm(
            self.value(x).data(),
            c,
            h,
            w,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![c, h, w], out)?;
        self.push_checked(value, Op::LayerNorm { x, gamma, beta, inv_std }, "layer_norm")
    }

    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if oh == 0 || ow == 0 {
            return Err(SfimError::shape("bilinear_resize to zero extent"));
        }
        let out = kernels::bilinear_resize(self.value(x).data(), c, h, w, oh, ow);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push_checked(value, Op::BilinearResize { x }, "bilinear_resize")
    }

    // -- pooling -------------------------------------------------------------

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::global_avg_pool(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![c, 1, 1], out)?;
        self.push_checked(value, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (out, arg) = kernels::global_max_pool(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![c, 1, 1], out)?;
        self.push_checked(value, Op::GlobalMaxPool { x, arg }, "global_max_pool")
    }

    pub fn spatial_mean_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::spatial_mean_pool(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![1, h, w], out)?;
        self.push_checked(value, Op::SpatialMeanPool { x }, "spatial_mean_pool")
    }

    pub fn spatial_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (out, arg) = kernels::spatial_max_pool(self.value(x).data(), c, h * w);
        let value = Tensor::new(vec![1, h, w], out)?;
        self.push_checked(value, Op::SpatialMaxPool { x, arg }, "spatial_max_pool")
    }

    // -- patching and spectral ops -------------------------------------------

    pub fn patch_unfold(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if p == 0 {
            return Err(SfimError::shape("patch size must be positive"));
        }
        let n = c * kernels::patch_count(h, p) * kernels::patch_count(w, p);
        let out = kernels::patch_unfold(self.value(x).data(), c, h, w, p);
        let value = Tensor::new(vec![n, p, p], out)?;
        self.push_checked(value, Op::PatchUnfold { x, p }, "patch_unfold")
    }

    /// Exact inverse of `patch_unfold` for a (c, h, w) target.
    pub fn patch_fold(&mut self, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let (n, p, p2) = self.value(x).dims3()?;
        if p != p2 {
            return Err(SfimError::shape("patch tensor must hold square patches"));
        }
        if n != c * kernels::patch_count(h, p) * kernels::patch_count(w, p) {
            return Err(SfimError::shape(format!(
                "patch count {n} does not tile a {c}x{h}x{w} tensor with p={p}"
            )));
        }
        let out = kernels::patch_fold(self.value(x).data(), c, h, w, p);
        let value = Tensor::new(vec![c, h, w], out)?;
        self.push_checked(value, Op::PatchFold { x }, "patch_fold")
    }

    /// Per-patch circular cross-correlation via the frequency domain.
    pub fn spectral_corr(&mut self, q: Var, k: Var) -> Result<Var> {
        let (n, p, p2) = self.value(q).dims3()?;
        if self.value(k).shape() != self.value(q).shape() || p != p2 {
            return Err(SfimError::shape("spectral_corr operands must be equal patch stacks"));
        }
        let out = kernels::spectral_corr(self.value(q).data(), self.value(k).data(), n, p);
        let value = Tensor::new(vec![n, p, p], out)?;
        self.push_checked(value, Op::SpectralCorr { q, k }, "spectral_corr")
    }

    /// Per-patch frequency reweighting. `w` is either one p x p matrix shared
    /// by all patches or a g x p x p stack of per-group matrices where g
    /// divides the patch count (contiguous groups).
    pub fn spectral_weight(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, p, p2) = self.value(x).dims3()?;
        if p != p2 {
            return Err(SfimError::shape("spectral_weight input must hold square patches"));
        }
        let groups = self.weight_groups(w, n, p)?;
        let pp = p * p;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let per = n / groups;
        let mut out = vec![0.0; n * pp];
        for g in 0..groups {
            let xs = &xv[g * per * pp..(g + 1) * per * pp];
            let res = kernels::spectral_weight(xs, &wv[g * pp..(g + 1) * pp], per, p);
            out[g * per * pp..(g + 1) * per * pp].copy_from_slice(&res);
        }
        let value = Tensor::new(vec![n, p, p], out)?;
        self.push_checked(value, Op::SpectralWeight { x, w }, "spectral_weight")
    }

    fn weight_groups(&self, w: Var, n: usize, p: usize) -> Result<usize> {
        let ws = self.value(w).shape();
        let groups = match ws {
            [wp, wp2] if *wp == p && *wp2 == p => 1,
            [g, wp, wp2] if *wp == p && *wp2 == p => *g,
            _ => {
                return Err(SfimError::shape(format!(
                    "spectral weight shape {ws:?} does not match patch size {p}"
                )))
            }
        };
        if groups == 0 || n % groups != 0 {
            return Err(SfimError::shape(format!(
                "weight groups {groups} must divide patch count {n}"
            )));
        }
        Ok(groups)
    }

    // -- shape plumbing -------------------------------------------------------

    pub fn channel_slice(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if from >= to || to > c {
            return Err(SfimError::shape(format!("channel slice {from}..{to} of {c} channels")));
        }
        let hw = h * w;
        let out = self.value(x).data()[from * hw..to * hw].to_vec();
        let value = Tensor::new(vec![to - from, h, w], out)?;
        self.push_checked(value, Op::ChannelSlice { x, from }, "channel_slice")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SfimError::shape("concat of zero tensors"));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut data = Vec::new();
        let mut c_total = 0;
        for &part in parts {
            let (c, ph, pw) = self.value(part).dims3()?;
            if ph != h || pw != w {
                return Err(SfimError::shape("concat operands must share spatial extents"));
            }
            c_total += c;
            data.extend_from_slice(self.value(part).data());
        }
        let value = Tensor::new(vec![c_total, h, w], data)?;
        self.push_checked(value, Op::ConcatChannels { parts: parts.to_vec() }, "concat_channels")
    }

    // -- reductions and losses ------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_checked(Tensor::scalar(s), Op::SumAll { x }, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(SfimError::shape("mean of empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push_checked(Tensor::scalar(s), Op::MeanAll { x }, "mean_all")
    }

    fn check_loss_pair(&self, x: Var, target: &Tensor, name: &str) -> Result<()> {
        if self.value(x).shape() != target.shape() {
            return Err(SfimError::shape(format!(
                "{name}: prediction shape {:?} != target shape {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        target.assert_finite(name)
    }

    /// Charbonnier penalty against a constant target. Global form is
    /// sqrt(sum(d^2) + eps^2); per-pixel form is mean(sqrt(d^2 + eps^2)).
    pub fn charbonnier(&mut self, x: Var, target: &Tensor, eps: f64, per_pixel: bool) -> Result<Var> {
        self.check_loss_pair(x, target, "charbonnier")?;
        let r = self.value(x).data();
        let v = if per_pixel {
            loss_kernels::charbonnier_per_pixel(r, target.data(), eps)
        } else {
            loss_kernels::charbonnier(r, target.data(), eps)
        };
        self.push_checked(
            Tensor::scalar(v),
            Op::Charbonnier { x, target: target.clone(), eps, per_pixel },
            "charbonnier",
        )
    }

    /// 1 - mean SSIM against a constant target (rank-3 input).
    pub fn ssim_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.check_loss_pair(x, target, "ssim_loss")?;
        let (c, h, w) = self.value(x).dims3()?;
        let s = loss_kernels::ssim_mean(self.value(x).data(), target.data(), c, h, w);
        self.push_checked(
            Tensor::scalar(1.0 - s),
            Op::SsimLoss { x, target: target.clone() },
            "ssim_loss",
        )
    }

    pub fn fft_amp_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.check_loss_pair(x, target, "fft_amp_loss")?;
        let (c, h, w) = self.value(x).dims3()?;
        let v = loss_kernels::fft_amp_loss(self.value(x).data(), target.data(), c, h, w);
        self.push_checked(
            Tensor::scalar(v),
            Op::FftAmpLoss { x, target: target.clone() },
            "fft_amp_loss",
        )
    }

    pub fn fft_phase_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.check_loss_pair(x, target, "fft_phase_loss")?;
        let (c, h, w) = self.value(x).dims3()?;
        let v = loss_kernels::fft_phase_loss(self.value(x).data(), target.data(), c, h, w);
        self.push_checked(
            Tensor::scalar(v),
            Op::FftPhaseLoss { x, target: target.clone() },
            "fft_phase_loss",
        )
    }

    pub fn fft_complex_l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.check_loss_pair(x, target, "fft_complex_l1_loss")?;
        let (c, h, w) = self.value(x).dims3()?;
        let v = loss_kernels::fft_complex_l1_loss(self.value(x).data(), target.data(), c, h, w);
        self.push_checked(
            Tensor::scalar(v),
            Op::FftComplexL1Loss { x, target: target.clone() },
            "fft_complex_l1_loss",
        )
    }

    // -- broadcasting ----------------------------------------------------------

    /// Elementwise combine with limited broadcasting: equal shapes, a
    /// one-element operand, or equal-rank shapes whose axes are equal or 1.
    fn broadcast_zip(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        if bv.numel() == 1 {
            let s = bv.data()[0];
            let data = av.data().iter().map(|&x| f(x, s)).collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        if av.numel() == 1 {
            let s = av.data()[0];
            let data = bv.data().iter().map(|&y| f(s, y)).collect();
            return Tensor::new(bv.shape().to_vec(), data);
        }
        let plan = BcastPlan::new(av.shape(), bv.shape())
            .ok_or_else(|| SfimError::shape(format!(
                "{name}: shapes {:?} and {:?} do not broadcast",
                av.shape(),
                bv.shape()
            )))?;
        let mut data = vec![0.0; plan.numel];
        let (ad, bd) = (av.data(), bv.data());
        plan.for_each(|oi, ai, bi| data[oi] = f(ad[ai], bd[bi]));
        Tensor::new(plan.out_shape.clone(), data)
    }

    /// Gradient of a broadcast result w.r.t. operand `which` (0 = a, 1 = b),
    /// weighted elementwise by `factor(other_operand_value)`.
    fn reduce_grad(
        &self,
        gout: &[f64],
        a: Var,
        b: Var,
        which: usize,
        f: impl Fn(f64) -> f64,
    ) -> Vec<f64> {
        let av = self.value(a);
        let bv = self.value(b);
        let (tv, ov) = if which == 0 { (av, bv) } else { (bv, av) };
        // f maps the co-operand's value to the local partial derivative.
        if av.shape() == bv.shape() {
            return gout.iter().zip(ov.data()).map(|(&g, &o)| g * f(o)).collect();
        }
        if tv.numel() == 1 {
            let acc = if ov.numel() == gout.len() {
                gout.iter().zip(ov.data()).map(|(&g, &o)| g * f(o)).sum()
            } else {
                // co-operand is also broadcast (both smaller than out): only
                // reachable when target is scalar and other defines out shape.
                gout.iter().zip(ov.data().iter().cycle()).map(|(&g, &o)| g * f(o)).sum()
            };
            return vec![acc];
        }
        if ov.numel() == 1 {
            let o = f(ov.data()[0]);
            return gout.iter().map(|&g| g * o).collect();
        }
        let plan = BcastPlan::new(av.shape(), bv.shape()).expect("validated in forward");
        let mut grad = vec![0.0; tv.numel()];
        let od = ov.data();
        plan.for_each(|oi, ai, bi| {
            let (ti, ci) = if which == 0 { (ai, bi) } else { (bi, ai) };
            grad[ti] += gout[oi] * f(od[ci]);
        });
        grad
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape; returns gradients
    /// for every parameter and leaf node reachable from the loss.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SfimError::shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let value = std::mem::take(&mut self.nodes[i].value);
            match &self.nodes[i].op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                    continue;
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.reduce_grad(&g, a, b, 0, |_| 1.0);
                    let gb = self.reduce_grad(&g, a, b, 1, |_| 1.0);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.reduce_grad(&g, a, b, 0, |_| 1.0);
                    let gb = self.reduce_grad(&g, a, b, 1, |_| -1.0);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = self.reduce_grad(&g, a, b, 0, |o| o);
                    let gb = self.reduce_grad(&g, a, b, 1, |o| o);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::ScaleShift { x, scale } => {
                    let gx = g.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Gelu(x) => {
                    let xd = self.nodes[x.0].value.data();
                    let gx = g.iter().zip(xd).map(|(gv, &xv)| gv * kernels::gelu_prime(xv)).collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Sigmoid(x) => {
                    // Own output s gives ds/dx = s (1 - s).
                    let gx = g.iter().zip(value.data()).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Relu(x) => {
                    let xd = self.nodes[x.0].value.data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, gx);
                }
                Op::Conv2d { x, w, b, stride, pad, mode } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (c_in, h, wd) = self.nodes[x.0].value.dims3()?;
                    let c_out = self.nodes[w.0].value.shape()[0];
                    let k = self.nodes[w.0].value.shape()[2];
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &g,
                        self.nodes[x.0].value.data(),
                        c_in,
                        h,
                        wd,
                        self.nodes[w.0].value.data(),
                        c_out,
                        k,
                        *stride,
                        *pad,
                        *mode,
                    );
                    accumulate(&mut grads, x.0, gx);
                    accumulate(&mut grads, w.0, gw);
                    if let Some(bv) = b {
                        accumulate(&mut grads, bv.0, gb);
                    }
                }
                Op::DepthwiseConv2d { x, w, b, pad, mode } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (c, h, wd) = self.nodes[x.0].value.dims3()?;
                    let mult = self.nodes[w.0].value.shape()[1];
                    let k = self.nodes[w.0].value.shape()[2];
                    let (gx, gw, gb) = kernels::depthwise_conv2d_backward(
                        &g,
                        self.nodes[x.0].value.data(),
                        c,
                        h,
                        wd,
                        self.nodes[w.0].value.data(),
                        mult,
                        k,
                        *pad,
                        *mode,
                    );
                    accumulate(&mut grads, x.0, gx);
                    accumulate(&mut grads, w.0, gw);
                    if let Some(bv) = b {
                        accumulate(&mut grads, bv.0, gb);
                    }
                }
                Op::LayerNorm { x, gamma, beta, inv_std } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let (gx, gg, gb) = kernels::layer_norm_backward(
                        &g,
                        self.nodes[x.0].value.data(),
                        c,
                        h,
                        w,
                        self.nodes[gamma.0].value.data(),
                        inv_std,
                    );
                    accumulate(&mut grads, x.0, gx);
                    accumulate(&mut grads, gamma.0, gg);
                    accumulate(&mut grads, beta.0, gb);
                }
                Op::BilinearResize { x } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let (oh, ow) = (value.shape()[1], value.shape()[2]);
                    let gx = kernels::bilinear_resize_backward(&g, c, h, w, oh, ow);
                    accumulate(&mut grads, x.0, gx);
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    for ch in 0..c {
                        let gv = g[ch] / hw as f64;
                        gx[ch * hw..(ch + 1) * hw].fill(gv);
                    }
                    accumulate(&mut grads, x.0, gx);
                }
                Op::GlobalMaxPool { x, arg } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    for ch in 0..c {
                        gx[ch * hw + arg[ch]] += g[ch];
                    }
                    accumulate(&mut grads, x.0, gx);
                }
                Op::SpatialMeanPool { x } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let hw = h * w;
                    let cf = c as f64;
                    let mut gx = vec![0.0; c * hw];
                    for ch in 0..c {
                        for s in 0..hw {
                            gx[ch * hw + s] = g[s] / cf;
                        }
                    }
                    accumulate(&mut grads, x.0, gx);
                }
                Op::SpatialMaxPool { x, arg } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    for s in 0..hw {
                        gx[arg[s] * hw + s] += g[s];
                    }
                    accumulate(&mut grads, x.0, gx);
                }
                Op::PatchUnfold { x, p } => {
                    let (x, p) = (*x, *p);
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let gx = kernels::patch_unfold_backward(&g, c, h, w, p);
                    accumulate(&mut grads, x.0, gx);
                }
                Op::PatchFold { x } => {
                    let x = *x;
                    let p = self.nodes[x.0].value.shape()[1];
                    let (c, h, w) = value.dims3()?;
                    let gx = kernels::patch_fold_backward(&g, c, h, w, p);
                    accumulate(&mut grads, x.0, gx);
                }
                Op::SpectralCorr { q, k } => {
                    let (q, k) = (*q, *k);
                    let (n, p, _) = self.nodes[q.0].value.dims3()?;
                    let (gq, gk) = kernels::spectral_corr_backward(
                        &g,
                        self.nodes[q.0].value.data(),
                        self.nodes[k.0].value.data(),
                        n,
                        p,
                    );
                    accumulate(&mut grads, q.0, gq);
                    accumulate(&mut grads, k.0, gk);
                }
                Op::SpectralWeight { x, w } => {
                    let (x, w) = (*x, *w);
                    let (n, p, _) = self.nodes[x.0].value.dims3()?;
                    let groups = self.weight_groups(w, n, p)?;
                    let per = n / groups;
                    let pp = p * p;
                    let xd = self.nodes[x.0].value.data();
                    let wd = self.nodes[w.0].value.data();
                    let mut gx = vec![0.0; n * pp];
                    let mut gw = vec![0.0; groups * pp];
                    for gi in 0..groups {
                        let span = gi * per * pp..(gi + 1) * per * pp;
                        let (gxs, gws) = kernels::spectral_weight_backward(
                            &g[span.clone()],
                            &xd[span.clone()],
                            &wd[gi * pp..(gi + 1) * pp],
                            per,
                            p,
                        );
                        gx[span].copy_from_slice(&gxs);
                        gw[gi * pp..(gi + 1) * pp].copy_from_slice(&gws);
                    }
                    accumulate(&mut grads, x.0, gx);
                    accumulate(&mut grads, w.0, gw);
                }
                Op::ChannelSlice { x, from } => {
                    let (x, from) = (*x, *from);
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let hw = h * w;
                    let mut gx = vec![0.0; c * hw];
                    gx[from * hw..from * hw + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, x.0, gx);
                }
                Op::ConcatChannels { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for part in parts {
                        let n = self.nodes[part.0].value.numel();
                        accumulate(&mut grads, part.0, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut grads, x.0, vec![g[0]; n]);
                }
                Op::MeanAll { x } => {
                    let x = *x;
                    let n = self.nodes[x.0].value.numel();
                    accumulate(&mut grads, x.0, vec![g[0] / n as f64; n]);
                }
                Op::Charbonnier { x, target, eps, per_pixel } => {
                    let x = *x;
                    let r = self.nodes[x.0].value.data();
                    let gx = if *per_pixel {
                        loss_kernels::charbonnier_per_pixel_backward(r, target.data(), *eps, g[0])
                    } else {
                        loss_kernels::charbonnier_backward(r, target.data(), *eps, g[0])
                    };
                    accumulate(&mut grads, x.0, gx);
                }
                Op::SsimLoss { x, target } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    // Loss is 1 - SSIM, so the SSIM gradient enters negated.
                    let gx = loss_kernels::ssim_mean_backward(
                        self.nodes[x.0].value.data(),
                        target.data(),
                        c,
                        h,
                        w,
                        -g[0],
                    );
                    accumulate(&mut grads, x.0, gx);
                }
                Op::FftAmpLoss { x, target } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let gx = loss_kernels::fft_amp_loss_backward(
                        self.nodes[x.0].value.data(),
                        target.data(),
                        c,
                        h,
                        w,
                        g[0],
                    );
                    accumulate(&mut grads, x.0, gx);
                }
                Op::FftPhaseLoss { x, target } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let gx = loss_kernels::fft_phase_loss_backward(
                        self.nodes[x.0].value.data(),
                        target.data(),
                        c,
                        h,
                        w,
                        g[0],
                    );
                    accumulate(&mut grads, x.0, gx);
                }
                Op::FftComplexL1Loss { x, target } => {
                    let x = *x;
                    let (c, h, w) = self.nodes[x.0].value.dims3()?;
                    let gx = loss_kernels::fft_complex_l1_loss_backward(
                        self.nodes[x.0].value.data(),
                        target.data(),
                        c,
                        h,
                        w,
                        g[0],
                    );
                    accumulate(&mut grads, x.0, gx);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contribution: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

/// Index mapping for equal-rank broadcasting (axes equal or 1).
struct BcastPlan {
    out_shape: Vec<usize>,
    numel: usize,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BcastPlan {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        if a.len() != b.len() {
            return None;
        }
        let mut out = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x == y {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else if y == 1 {
                out.push(x);
            } else {
                return None;
            }
        }
        let strides = |shape: &[usize]| {
            let mut s = vec![0usize; shape.len()];
            let mut acc = 1;
            for i in (0..shape.len()).rev() {
                s[i] = if shape[i] == 1 { 0 } else { acc };
                acc *= shape[i];
            }
            s
        };
        let numel = out.iter().product();
        Some(BcastPlan { a_strides: strides(a), b_strides: strides(b), out_shape: out, numel })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ai, mut bi) = (0usize, 0usize);
        for oi in 0..self.numel {
            f(oi, ai, bi);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ai += self.a_strides[ax];
                bi += self.b_strides[ax];
                if idx[ax] < self.out_shape[ax] {
                    break;
                }
                ai -= self.a_strides[ax] * self.out_shape[ax];
                bi -= self.b_strides[ax] * self.out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
}
