//! Differentiable convolution, normalization, resampling and reshaping ops.

use crate::autodiff::{BackwardCtx, BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{self, ConvGeom};

/// Named axes of a `[n, c, t, f]` activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Time,
    Frequency,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Time => 2,
            Axis::Frequency => 3,
        }
    }
}

/// `(outer, len, inner)` of a row-major shape split at `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// Convolution

struct GroupedConvRule {
    geoms: Vec<ConvGeom>,
    has_bias: bool,
}

impl BackwardRule for GroupedConvRule {
    fn name(&self) -> &'static str {
        "multidilated_conv"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let groups = self.geoms.len();
        let dy = ctx.grad.data();
        let mut out: Vec<Option<Tensor>> = vec![None; ctx.inputs.len()];
        for (i, g) in self.geoms.iter().enumerate() {
            let (x, w) = (&ctx.inputs[i], &ctx.inputs[groups + i]);
            if ctx.needs[i] {
                let mut dx = Tensor::zeros(x.shape());
                kernels::conv2d_backward_input(g, dy, w.data(), dx.data_mut());
                out[i] = Some(dx);
            }
            if ctx.needs[groups + i] {
                let mut dw = Tensor::zeros(w.shape());
                kernels::conv2d_backward_kernel(g, dy, x.data(), dw.data_mut());
                out[groups + i] = Some(dw);
            }
        }
        if self.has_bias && ctx.needs[2 * groups] {
            out[2 * groups] = Some(channel_sums(ctx.grad));
        }
        out
    }
}

/// Per-channel sums of a `[n, c, t, f]` tensor.
fn channel_sums(x: &Tensor) -> Tensor {
    let [n, c, t, f] = x.dims4().expect("4-axis gradient");
    let plane = t * f;
    let mut sums = vec![0.0; c];
    for ni in 0..n {
        for (ci, s) in sums.iter_mut().enumerate() {
            *s += x.data()[(ni * c + ci) * plane..][..plane].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], sums).expect("nonzero channels")
}

impl Tape {
    /// Dilated 2-D convolution with "same" zero padding of `d * (k - 1) / 2` per side.
    pub fn conv2d(&self, x: &Var, kernel: &Var, bias: Option<&Var>, dilation: (usize, usize)) -> Result<Var> {
        self.grouped_conv("conv2d", &[x], &[kernel], &[dilation], bias)
    }

    /// Sum over groups of `conv2d(y_i, k_i, d_i)`: one output feature map set
    /// built from inputs that each carry their own dilation factor.
    pub fn multidilated_conv(
        &self,
        groups: &[&Var],
        kernels: &[&Var],
        dilations: &[(usize, usize)],
        bias: Option<&Var>,
    ) -> Result<Var> {
        self.grouped_conv("multidilated_conv", groups, kernels, dilations, bias)
    }

    fn grouped_conv(
        &self,
        op: &'static str,
        groups: &[&Var],
        kernels: &[&Var],
        dilations: &[(usize, usize)],
        bias: Option<&Var>,
    ) -> Result<Var> {
        if groups.is_empty() || groups.len() != kernels.len() || groups.len() != dilations.len() {
            return Err(Error::invalid(format!(
                "{op}: {} input groups, {} kernels, {} dilations",
                groups.len(),
                kernels.len(),
                dilations.len()
            )));
        }
        let [n, _, t, f] = groups[0].value().dims4()?;
        let kshape = kernels[0].value().dims4()?;
        let (o, kt, kf) = (kshape[0], kshape[2], kshape[3]);
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(Error::invalid(format!(
                "{op}: kernel extents must be odd, got {kt}x{kf}"
            )));
        }
        let mut geoms = Vec::with_capacity(groups.len());
        for ((y, k), &(dt, df)) in groups.iter().zip(kernels).zip(dilations) {
            let [yn, yc, yt, yf] = y.value().dims4()?;
            if (yn, yt, yf) != (n, t, f) {
                return Err(Error::ShapeMismatch {
                    op,
                    left: groups[0].shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
            let [ko, kc, kkt, kkf] = k.value().dims4()?;
            if (ko, kkt, kkf) != (o, kt, kf) {
                return Err(Error::ShapeMismatch {
                    op,
                    left: kernels[0].shape().to_vec(),
                    right: k.shape().to_vec(),
                });
            }
            if kc != yc {
                return Err(Error::ChannelMismatch {
                    op,
                    expected: kc,
                    actual: yc,
                });
            }
            if dt == 0 || df == 0 {
                return Err(Error::invalid(format!("{op}: dilation must be >= 1")));
            }
            geoms.push(ConvGeom {
                n,
                c: yc,
                t,
                f,
                o,
                kt,
                kf,
                dt,
                df,
            });
        }
        let mut out = vec![0.0; n * o * t * f];
        for ((g, y), k) in geoms.iter().zip(groups).zip(kernels) {
            kernels::conv2d_forward(g, y.value().data(), k.value().data(), &mut out);
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op,
                    left: vec![o],
                    right: b.shape().to_vec(),
                });
            }
            add_per_channel(&mut out, [n, o, t, f], b.value().data());
        }
        let mut inputs: Vec<&Var> = groups.to_vec();
        inputs.extend_from_slice(kernels);
        if let Some(b) = bias {
            inputs.push(b);
        }
        let rule = GroupedConvRule {
            geoms,
            has_bias: bias.is_some(),
        };
        Ok(self.record(rule, &inputs, Tensor::new(&[n, o, t, f], out)?))
    }
}

fn add_per_channel(out: &mut [f64], [n, c, t, f]: [usize; 4], b: &[f64]) {
    let plane = t * f;
    for ni in 0..n {
        for (ci, bv) in b.iter().enumerate().take(c) {
            for v in &mut out[(ni * c + ci) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with statistics of the current batch over `(n, t, f)`.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
        eps: f64,
    },
}

/// Batch statistics observed in train mode, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

struct BatchNormRule {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl BackwardRule for BatchNormRule {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [n, c, t, f] = ctx.grad.dims4().expect("4-axis");
        let plane = t * f;
        let m = (n * plane) as f64;
        let gamma = ctx.inputs[1].data();
        let dy = ctx.grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for (g, xh) in dy[off..off + plane].iter().zip(&self.xhat[off..off + plane]) {
                    dbeta[ci] += g;
                    dgamma[ci] += g * xh;
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![0.0; dy.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    let scale = gamma[ci] * self.inv_std[ci];
                    for i in off..off + plane {
                        dx[i] = if self.train {
                            // (1/m) * inv_std * gamma * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                            scale * (dy[i] - dbeta[ci] / m - self.xhat[i] * dgamma[ci] / m)
                        } else {
                            scale * dy[i]
                        };
                    }
                }
            }
            Tensor::new(ctx.grad.shape(), dx).expect("same shape")
        });
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::new(&[c], dgamma).expect("c > 0")),
            ctx.needs[2].then(|| Tensor::new(&[c], dbeta).expect("c > 0")),
        ]
    }
}

impl Tape {
    /// Per-channel batch normalization followed by the affine `gamma * xhat + beta`.
    pub fn batch_norm(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, t, f] = x.value().dims4()?;
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(Error::ChannelMismatch {
                    op: "batch_norm",
                    expected: p.value().numel(),
                    actual: c,
                });
            }
        }
        let plane = t * f;
        let count = n * plane;
        let xs = x.value().data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        mean[ci] += xs[(ni * c + ci) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        var[ci] += xs[(ni * c + ci) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, eps, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::ChannelMismatch {
                        op: "batch_norm",
                        expected: running_mean.len(),
                        actual: c,
                    });
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        if !(eps > 0.0) {
            return Err(Error::invalid("batch_norm: eps must be positive"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in off..off + plane {
                    xhat[i] = (xs[i] - mean[ci]) * inv_std[ci];
                    y[i] = g[ci] * xhat[i] + b[ci];
                }
            }
        }
        let out = self.record(
            BatchNormRule { xhat, inv_std, train },
            &[x, gamma, beta],
            Tensor::new(x.shape(), y)?,
        );
        let stats = train.then_some(BatchStats { mean, var, count });
        Ok((out, stats))
    }
}

// ---------------------------------------------------------------------------
// Resampling

struct AvgPoolRule;

impl BackwardRule for AvgPoolRule {
    fn name(&self) -> &'static str {
        "avg_pool_2x2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [n, c, t, f] = ctx.inputs[0].dims4().expect("4-axis");
        let (t2, f2) = (t / 2, f / 2);
        let dy = ctx.grad.data();
        let mut dx = vec![0.0; n * c * t * f];
        for p in 0..n * c {
            for ti in 0..t {
                for fi in 0..f {
                    dx[(p * t + ti) * f + fi] = 0.25 * dy[(p * t2 + ti / 2) * f2 + fi / 2];
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), dx).expect("same shape"))]
    }
}

struct EdgePadRule {
    pad_t: usize,
    pad_f: usize,
}

impl BackwardRule for EdgePadRule {
    fn name(&self) -> &'static str {
        "edge_pad"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let [n, c, t, f] = ctx.inputs[0].dims4().expect("4-axis");
        let (tp, fp) = (t + self.pad_t, f + self.pad_f);
        let dy = ctx.grad.data();
        let mut dx = vec![0.0; n * c * t * f];
        for p in 0..n * c {
            for ti in 0..tp {
                for fi in 0..fp {
                    dx[(p * t + ti.min(t - 1)) * f + fi.min(f - 1)] += dy[(p * tp + ti) * fp + fi];
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), dx).expect("same shape"))]
    }
}

struct TConvRule {
    out_channels: usize,
}

impl BackwardRule for TConvRule {
    fn name(&self) -> &'static str {
        "transposed_conv_2x2"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (x, w) = (&ctx.inputs[0], &ctx.inputs[1]);
        let dims = x.dims4().expect("4-axis");
        let (dx, dw) = kernels::tconv2x2_backward(dims, self.out_channels, x.data(), w.data(), ctx.grad.data());
        vec![
            ctx.needs[0].then(|| Tensor::new(x.shape(), dx).expect("same shape")),
            ctx.needs[1].then(|| Tensor::new(w.shape(), dw).expect("same shape")),
        ]
    }
}

impl Tape {
    /// 2x2 mean pooling with stride 2; both spatial extents must be even.
    pub fn avg_pool_2x2(&self, x: &Var) -> Result<Var> {
        let [n, c, t, f] = x.value().dims4()?;
        if t % 2 != 0 || f % 2 != 0 {
            return Err(Error::invalid(format!(
                "avg_pool_2x2 needs even spatial extents, got {t}x{f}"
            )));
        }
        let (t2, f2) = (t / 2, f / 2);
        let xs = x.value().data();
        let mut y = vec![0.0; n * c * t2 * f2];
        for p in 0..n * c {
            for ti in 0..t2 {
                for fi in 0..f2 {
                    let r0 = (p * t + 2 * ti) * f + 2 * fi;
                    let r1 = r0 + f;
                    y[(p * t2 + ti) * f2 + fi] = 0.25 * (xs[r0] + xs[r0 + 1] + xs[r1] + xs[r1 + 1]);
                }
            }
        }
        Ok(self.record(AvgPoolRule, &[x], Tensor::new(&[n, c, t2, f2], y)?))
    }

    /// Replicate the last time row / frequency column so both extents become even.
    pub fn pad_edge_to_even(&self, x: &Var) -> Result<Var> {
        let [n, c, t, f] = x.value().dims4()?;
        let (pad_t, pad_f) = (t % 2, f % 2);
        if pad_t == 0 && pad_f == 0 {
            return Ok(x.clone());
        }
        let (tp, fp) = (t + pad_t, f + pad_f);
        let xs = x.value().data();
        let mut y = vec![0.0; n * c * tp * fp];
        for p in 0..n * c {
            for ti in 0..tp {
                for fi in 0..fp {
                    y[(p * tp + ti) * fp + fi] = xs[(p * t + ti.min(t - 1)) * f + fi.min(f - 1)];
                }
            }
        }
        Ok(self.record(EdgePadRule { pad_t, pad_f }, &[x], Tensor::new(&[n, c, tp, fp], y)?))
    }

    /// Stride-2 transposed convolution; `kernel` is `[in_ch, out_ch, 2, 2]`.
    pub fn transposed_conv_2x2(&self, x: &Var, kernel: &Var) -> Result<Var> {
        let [n, c, t, f] = x.value().dims4()?;
        let [kc, o, a, b] = kernel.value().dims4()?;
        if (a, b) != (2, 2) {
            return Err(Error::invalid(format!(
                "transposed_conv_2x2 kernel must be 2x2, got {a}x{b}"
            )));
        }
        if kc != c {
            return Err(Error::ChannelMismatch {
                op: "transposed_conv_2x2",
                expected: kc,
                actual: c,
            });
        }
        let y = kernels::tconv2x2_forward([n, c, t, f], o, x.value().data(), kernel.value().data());
        Ok(self.record(
            TConvRule { out_channels: o },
            &[x, kernel],
            Tensor::new(&[n, o, 2 * t, 2 * f], y)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Per-channel bias

struct ChannelBiasRule;

impl BackwardRule for ChannelBiasRule {
    fn name(&self) -> &'static str {
        "channel_bias"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(ctx.grad.clone()), ctx.needs[1].then(|| channel_sums(ctx.grad))]
    }
}

impl Tape {
    pub fn add_channel_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let dims = x.value().dims4()?;
        if bias.shape() != [dims[1]] {
            return Err(Error::ChannelMismatch {
                op: "add_channel_bias",
                expected: dims[1],
                actual: bias.value().numel(),
            });
        }
        let mut y = x.value().data().to_vec();
        add_per_channel(&mut y, dims, bias.value().data());
        Ok(self.record(ChannelBiasRule, &[x, bias], Tensor::new(x.shape(), y)?))
    }
}

// ---------------------------------------------------------------------------
// Concatenation, slicing and zero padding

struct ConcatRule {
    axis: usize,
}

impl BackwardRule for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let (outer, total, inner) = split_at_axis(ctx.grad.shape(), self.axis);
        let dy = ctx.grad.data();
        let mut start = 0;
        let mut grads = Vec::with_capacity(ctx.inputs.len());
        for (x, need) in ctx.inputs.iter().zip(ctx.needs) {
            let len = x.shape()[self.axis];
            if *need {
                let mut g = Vec::with_capacity(x.numel());
                for o in 0..outer {
                    g.extend_from_slice(&dy[(o * total + start) * inner..][..len * inner]);
                }
                grads.push(Some(Tensor::new(x.shape(), g).expect("same shape")));
            } else {
                grads.push(None);
            }
            start += len;
        }
        grads
    }
}

struct NarrowRule {
    axis: usize,
    start: usize,
}

impl BackwardRule for NarrowRule {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let (outer, total, inner) = split_at_axis(x.shape(), self.axis);
        let len = ctx.grad.shape()[self.axis];
        let mut dx = vec![0.0; x.numel()];
        for o in 0..outer {
            dx[(o * total + self.start) * inner..][..len * inner]
                .copy_from_slice(&ctx.grad.data()[o * len * inner..][..len * inner]);
        }
        vec![Some(Tensor::new(x.shape(), dx).expect("same shape"))]
    }
}

struct PadZerosRule {
    axis: usize,
    before: usize,
}

impl BackwardRule for PadZerosRule {
    fn name(&self) -> &'static str {
        "pad_zeros"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let (outer, len, inner) = split_at_axis(x.shape(), self.axis);
        let total = ctx.grad.shape()[self.axis];
        let mut dx = Vec::with_capacity(x.numel());
        for o in 0..outer {
            dx.extend_from_slice(&ctx.grad.data()[(o * total + self.before) * inner..][..len * inner]);
        }
        vec![Some(Tensor::new(x.shape(), dx).expect("same shape"))]
    }
}

impl Tape {
    /// Contiguous concatenation along `axis`; every other extent must agree.
    pub fn concat(&self, xs: &[&Var], axis: Axis) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(Error::invalid("concat of zero tensors"));
        };
        if xs.len() == 1 {
            return Ok((*first).clone());
        }
        let ax = axis.index();
        let base = first.value().dims4()?;
        let mut total = 0;
        for x in xs {
            let d = x.value().dims4()?;
            if (0..4).any(|i| i != ax && d[i] != base[i]) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            total += d[ax];
        }
        let (outer, _, inner) = split_at_axis(first.shape(), ax);
        let mut shape = base.to_vec();
        shape[ax] = total;
        let mut y = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for x in xs {
                let len = x.shape()[ax] * inner;
                y.extend_from_slice(&x.value().data()[o * len..][..len]);
            }
        }
        Ok(self.record(ConcatRule { axis: ax }, xs, Tensor::new(&shape, y)?))
    }

    /// The sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: &Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let ax = axis.index();
        let d = x.value().dims4()?;
        if len == 0 || start + len > d[ax] {
            return Err(Error::invalid(format!(
                "narrow [{start}, {}) out of range for extent {} on {axis:?}",
                start + len,
                d[ax]
            )));
        }
        if start == 0 && len == d[ax] {
            return Ok(x.clone());
        }
        let (outer, total, inner) = split_at_axis(x.shape(), ax);
        let mut shape = d.to_vec();
        shape[ax] = len;
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&x.value().data()[(o * total + start) * inner..][..len * inner]);
        }
        Ok(self.record(NarrowRule { axis: ax, start }, &[x], Tensor::new(&shape, y)?))
    }

    /// Zero padding of `before` / `after` entries along `axis`.
    pub fn pad_zeros(&self, x: &Var, axis: Axis, before: usize, after: usize) -> Result<Var> {
        if before == 0 && after == 0 {
            return Ok(x.clone());
        }
        let ax = axis.index();
        let d = x.value().dims4()?;
        let (outer, len, inner) = split_at_axis(x.shape(), ax);
        let total = before + len + after;
        let mut shape = d.to_vec();
        shape[ax] = total;
        let mut y = vec![0.0; outer * total * inner];
        for o in 0..outer {
            y[(o * total + before) * inner..][..len * inner]
                .copy_from_slice(&x.value().data()[o * len * inner..][..len * inner]);
        }
        Ok(self.record(PadZerosRule { axis: ax, before }, &[x], Tensor::new(&shape, y)?))
    }
}
