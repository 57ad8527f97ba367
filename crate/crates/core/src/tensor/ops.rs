use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Whether batch-norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients returned by a layer's backward pass. Parameter gradients are
/// keyed by the parameter's local name (`weight`, `bias`, `gamma`, `beta`).
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_input: Tensor,
    pub d_params: Vec<(String, Tensor)>,
}

impl LayerGrads {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.d_params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

// C = alpha * A·B + beta * C for row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!(k == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    debug_assert!((m - 1) * ldc + n - 1 < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // satisfies; all strides index inside the provided slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(g: &ConvGeom, image: &[f32], cols: &mut [f32]) {
    let hw = g.out_hw();
    for ci in 0..g.in_c {
        let plane = &image[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], image: &mut [f32]) {
    let hw = g.out_hw();
    for ci in 0..g.in_c {
        let plane = &mut image[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// State kept by [`conv2d`] for its backward pass.
#[derive(Clone, Debug)]
pub struct Conv2dCtx {
    geom: ConvGeom,
    kernel: Tensor,
    has_bias: bool,
    // im2col buffers, one [patch x out_hw] block per image.
    cols: Vec<f32>,
}

/// 2-d cross-correlation over an NCHW batch with an OIHW kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Conv2dCtx)> {
    let (out, geom, cols) = conv2d_impl(input, kernel, bias, stride, pad)?;
    Ok((
        out,
        Conv2dCtx {
            geom,
            kernel: kernel.clone(),
            has_bias: bias.is_some(),
            cols,
        },
    ))
}

fn conv2d_impl(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom, Vec<f32>)> {
    let [batch, in_c, in_h, in_w] = input.dims4("conv2d input")?;
    let [out_c, k_in, kh, kw] = kernel.dims4("conv2d kernel")?;
    if k_in != in_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (input channels vs kernel in-channels)",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be >= 1"));
    }
    if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d (kernel larger than padded input)",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![out_c],
            });
        }
    }
    let geom = ConvGeom {
        batch,
        in_c,
        in_h,
        in_w,
        out_c,
        kh,
        kw,
        stride,
        pad,
        out_h: (in_h + 2 * pad - kh) / stride + 1,
        out_w: (in_w + 2 * pad - kw) / stride + 1,
    };
    let patch = geom.patch();
    let hw = geom.out_hw();
    let in_stride = in_c * in_h * in_w;
    let mut cols = vec![0.0f32; batch * patch * hw];
    let mut out = vec![0.0f32; batch * out_c * hw];
    for b in 0..batch {
        let col = &mut cols[b * patch * hw..(b + 1) * patch * hw];
        im2col(&geom, &input.data()[b * in_stride..(b + 1) * in_stride], col);
        let dst = &mut out[b * out_c * hw..(b + 1) * out_c * hw];
        gemm(
            out_c,
            patch,
            hw,
            kernel.data(),
            (patch, 1),
            col,
            (hw, 1),
            0.0,
            dst,
            hw,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    let out = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
    Ok((out, geom, cols))
}

impl Conv2dCtx {
    pub fn backward(&self, upstream: &Tensor) -> Result<LayerGrads> {
        let (d_input, d_kernel, d_bias) = self.backward_parts(upstream, true, true)?;
        let mut d_params = vec![("weight".to_string(), d_kernel.expect("requested"))];
        if let Some(db) = d_bias {
            d_params.push(("bias".to_string(), db));
        }
        Ok(LayerGrads {
            d_input: d_input.expect("requested"),
            d_params,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let g = &self.geom;
        [g.batch, g.out_c, g.out_h, g.out_w]
    }

    /// Backward pass computing only what is asked for.
    #[allow(clippy::type_complexity)]
    pub(crate) fn backward_parts(
        &self,
        upstream: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = self.geom;
        if upstream.shape() != self.output_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d backward",
                left: upstream.shape().to_vec(),
                right: self.output_shape().to_vec(),
            });
        }
        let patch = g.patch();
        let hw = g.out_hw();
        let up = upstream.data();
        let mut d_kernel = want_params.then(|| vec![0.0f32; g.out_c * patch]);
        let mut d_bias = (want_params && self.has_bias).then(|| vec![0.0f32; g.out_c]);
        let in_stride = g.in_c * g.in_h * g.in_w;
        let mut d_input = want_input.then(|| vec![0.0f32; g.batch * in_stride]);
        let mut dcols = if want_input {
            vec![0.0f32; patch * hw]
        } else {
            Vec::new()
        };
        for b in 0..g.batch {
            let up_b = &up[b * g.out_c * hw..(b + 1) * g.out_c * hw];
            let col = &self.cols[b * patch * hw..(b + 1) * patch * hw];
            if let Some(dk) = d_kernel.as_mut() {
                // dK += dOut_b · cols_b^T
                gemm(g.out_c, hw, patch, up_b, (hw, 1), col, (1, hw), 1.0, dk, patch);
            }
            if let Some(db) = d_bias.as_mut() {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += up_b[co * hw..(co + 1) * hw].iter().sum::<f32>();
                }
            }
            if let Some(di) = d_input.as_mut() {
                // dcols = K^T · dOut_b
                gemm(
                    patch,
                    g.out_c,
                    hw,
                    self.kernel.data(),
                    (1, patch),
                    up_b,
                    (hw, 1),
                    0.0,
                    &mut dcols,
                    hw,
                );
                col2im(&g, &dcols, &mut di[b * in_stride..(b + 1) * in_stride]);
            }
        }
        Ok((
            d_input
                .map(|d| Tensor::new(vec![g.batch, g.in_c, g.in_h, g.in_w], d))
                .transpose()?,
            d_kernel
                .map(|d| Tensor::new(self.kernel.shape().to_vec(), d))
                .transpose()?,
            d_bias.map(|d| Tensor::new(vec![g.out_c], d)).transpose()?,
        ))
    }
}

/// Per-channel running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        for (r, &m) in self.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.var.data_mut().iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCtx {
    mode: Mode,
    shape: [usize; 4],
    gamma: Vec<f32>,
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    // Batch statistics (mean, unbiased variance) in train mode.
    batch_stats: Option<(Vec<f32>, Vec<f32>)>,
}

/// Batch normalization over the N, H, W axes of an NCHW tensor. In train
/// mode the running statistics are updated with momentum [`BN_MOMENTUM`].
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<(Tensor, BatchNormCtx)> {
    let (out, ctx) = batchnorm2d_impl(input, gamma, beta, stats, mode)?;
    if let Some((m, v)) = &ctx.batch_stats {
        stats.update(m, v);
    }
    Ok((out, ctx))
}

pub(crate) fn batchnorm2d_impl(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    mode: Mode,
) -> Result<(Tensor, BatchNormCtx)> {
    let [n, c, h, w] = input.dims4("batchnorm2d input")?;
    for (what, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &stats.mean),
        ("running var", &stats.var),
    ] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: match what {
                    "gamma" => "batchnorm2d gamma",
                    "beta" => "batchnorm2d beta",
                    "running mean" => "batchnorm2d running mean",
                    _ => "batchnorm2d running var",
                },
                left: t.shape().to_vec(),
                right: vec![c],
            });
        }
    }
    let plane = h * w;
    let count = n * plane;
    if mode == Mode::Train && count == 0 {
        return Err(Error::invalid("batchnorm2d: empty batch in train mode"));
    }
    let x = input.data();
    let mut mean = vec![0.0f32; c];
    let mut var_biased = vec![0.0f32; c];
    let mut batch_stats = None;
    match mode {
        Mode::Train => {
            let mut var_unbiased = vec![0.0f32; c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += x[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sq += x[off..off + plane]
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu as f32;
                var_biased[ch] = (sq / count as f64) as f32;
                var_unbiased[ch] = (sq / (count.max(2) - 1) as f64) as f32;
            }
            batch_stats = Some((mean.clone(), var_unbiased));
        }
        Mode::Eval => {
            mean.copy_from_slice(stats.mean.data());
            var_biased.copy_from_slice(stats.var.data());
        }
    }
    let inv_std: Vec<f32> = var_biased
        .iter()
        .map(|&v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let mut x_hat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCtx {
            mode,
            shape: [n, c, h, w],
            gamma: g.to_vec(),
            x_hat,
            inv_std,
            batch_stats,
        },
    ))
}

impl BatchNormCtx {
    pub fn backward(&self, upstream: &Tensor) -> Result<LayerGrads> {
        let (d_input, d_params) = self.backward_parts(upstream, true, true)?;
        let (dg, db) = d_params.expect("requested");
        Ok(LayerGrads {
            d_input: d_input.expect("requested"),
            d_params: vec![("gamma".to_string(), dg), ("beta".to_string(), db)],
        })
    }

    pub(crate) fn batch_stats(&self) -> Option<&(Vec<f32>, Vec<f32>)> {
        self.batch_stats.as_ref()
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn backward_parts(
        &self,
        upstream: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Option<(Tensor, Tensor)>)> {
        if upstream.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d backward",
                left: upstream.shape().to_vec(),
                right: self.shape.to_vec(),
            });
        }
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let count = (n * plane) as f64;
        let up = upstream.data();
        let mut sum_up = vec![0.0f64; c];
        let mut sum_up_xhat = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (&u, &x) in up[off..off + plane].iter().zip(&self.x_hat[off..off + plane]) {
                    sum_up[ch] += u as f64;
                    sum_up_xhat[ch] += (u * x) as f64;
                }
            }
        }
        let d_input = if want_input {
            let mut dx = vec![0.0f32; up.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let scale = self.gamma[ch] * self.inv_std[ch];
                    match self.mode {
                        Mode::Train => {
                            let mean_up = (sum_up[ch] / count) as f32;
                            let mean_up_xhat = (sum_up_xhat[ch] / count) as f32;
                            for i in off..off + plane {
                                dx[i] = scale * (up[i] - mean_up - self.x_hat[i] * mean_up_xhat);
                            }
                        }
                        Mode::Eval => {
                            for i in off..off + plane {
                                dx[i] = scale * up[i];
                            }
                        }
                    }
                }
            }
            Some(Tensor::new(self.shape.to_vec(), dx)?)
        } else {
            None
        };
        let d_params = want_params.then(|| {
            (
                Tensor::new(vec![c], sum_up_xhat.iter().map(|&v| v as f32).collect())
                    .expect("channel-sized"),
                Tensor::new(vec![c], sum_up.iter().map(|&v| v as f32).collect())
                    .expect("channel-sized"),
            )
        });
        Ok((d_input, d_params))
    }
}

#[derive(Clone, Debug)]
pub struct ReluCtx {
    shape: Vec<usize>,
    mask: Vec<bool>,
}

pub fn relu(input: &Tensor) -> (Tensor, ReluCtx) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    (
        input.map(|v| v.max(0.0)),
        ReluCtx {
            shape: input.shape().to_vec(),
            mask,
        },
    )
}

impl ReluCtx {
    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        if upstream.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "relu backward",
                left: upstream.shape().to_vec(),
                right: self.shape.clone(),
            });
        }
        let data = upstream
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Clone, Debug)]
pub struct GapCtx {
    shape: [usize; 4],
}

/// Spatial mean: `N x C x H x W -> N x C x 1 x 1`.
pub fn global_avg_pool(input: &Tensor) -> Result<(Tensor, GapCtx)> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::invalid("global_avg_pool: empty spatial extent"));
    }
    let out = input
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Ok((
        Tensor::new(vec![n, c, 1, 1], out)?,
        GapCtx {
            shape: [n, c, h, w],
        },
    ))
}

impl GapCtx {
    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if upstream.numel() != n * c {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool backward",
                left: upstream.shape().to_vec(),
                right: vec![n, c, 1, 1],
            });
        }
        let plane = h * w;
        let inv = 1.0 / plane as f32;
        let mut out = Vec::with_capacity(n * c * plane);
        for &g in upstream.data() {
            out.extend(std::iter::repeat_n(g * inv, plane));
        }
        Tensor::new(self.shape.to_vec(), out)
    }
}

#[derive(Clone, Debug)]
pub struct LinearCtx {
    input: Tensor,
    weight: Tensor,
}

/// Affine map `y = x W^T + b` for `x: N x in`, `W: out x in`, `b: out`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, LinearCtx)> {
    let [n, fin] = input.dims2("linear input")?;
    let [fout, w_in] = weight.dims2("linear weight")?;
    if w_in != fin {
        return Err(Error::ShapeMismatch {
            op: "linear (input features vs weight columns)",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [fout] {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            left: bias.shape().to_vec(),
            right: vec![fout],
        });
    }
    let mut out = vec![0.0f32; n * fout];
    for row in out.chunks_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        n,
        fin,
        fout,
        input.data(),
        (fin, 1),
        weight.data(),
        (1, fin),
        1.0,
        &mut out,
        fout,
    );
    Ok((
        Tensor::new(vec![n, fout], out)?,
        LinearCtx {
            input: input.clone(),
            weight: weight.clone(),
        },
    ))
}

impl LinearCtx {
    pub fn backward(&self, upstream: &Tensor) -> Result<LayerGrads> {
        let (d_input, params) = self.backward_parts(upstream, true, true)?;
        let (dw, db) = params.expect("requested");
        Ok(LayerGrads {
            d_input: d_input.expect("requested"),
            d_params: vec![("weight".to_string(), dw), ("bias".to_string(), db)],
        })
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn backward_parts(
        &self,
        upstream: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Option<(Tensor, Tensor)>)> {
        let [n, fin] = self.input.dims2("linear input")?;
        let [fout, _] = self.weight.dims2("linear weight")?;
        if upstream.shape() != [n, fout] {
            return Err(Error::ShapeMismatch {
                op: "linear backward",
                left: upstream.shape().to_vec(),
                right: vec![n, fout],
            });
        }
        let up = upstream.data();
        let d_input = if want_input {
            let mut dx = vec![0.0f32; n * fin];
            gemm(n, fout, fin, up, (fout, 1), self.weight.data(), (fin, 1), 0.0, &mut dx, fin);
            Some(Tensor::new(vec![n, fin], dx)?)
        } else {
            None
        };
        let params = if want_params {
            let mut dw = vec![0.0f32; fout * fin];
            gemm(
                fout,
                n,
                fin,
                up,
                (1, fout),
                self.input.data(),
                (fin, 1),
                0.0,
                &mut dw,
                fin,
            );
            let mut db = vec![0.0f32; fout];
            for row in up.chunks(fout) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            Some((
                Tensor::new(vec![fout, fin], dw)?,
                Tensor::new(vec![fout], db)?,
            ))
        } else {
            None
        };
        Ok((d_input, params))
    }
}

/// Row-wise softmax of an `N x C` tensor, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, c] = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, c] = logits.dims2("softmax_cross_entropy")?;
    if n == 0 {
        return Err(Error::invalid("softmax_cross_entropy: empty batch"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: vec![labels.len()],
            right: vec![n],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = vec![0.0f32; n * c];
    let mut loss = 0.0f64;
    for ((row, g), &label) in logits.data().chunks(c).zip(grad.chunks_mut(c)).zip(labels) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[label] - max) as f64;
        for (j, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (((v - max) as f64).exp() / sum) as f32;
            let target = if j == label { 1.0 } else { 0.0 };
            *gv = (p - target) / n as f32;
        }
    }
    let loss = (loss / n as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}
