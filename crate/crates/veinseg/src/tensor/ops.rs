//! Forward and backward kernels for the layer kinds used by the network.
//!
//! Convolutions go through im2col plus a GEMM; everything else is direct
//! loops. Backward functions take the saved forward inputs instead of a
//! cached im2col buffer, trading a rebuild for a much smaller footprint.

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a convolution-like op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
            groups,
        }
    }

    pub fn conv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * self.padding,
                w + 2 * self.padding
            )));
        }
        Ok((
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        ))
    }

    /// Transposed convolution output rule: output extent = input * stride.
    ///
    /// Valid only when the implied output padding `stride + 2*padding - kernel`
    /// lands in `[0, stride)`; the 3x3/pad-1 deconvs used here satisfy it.
    pub fn conv_transpose_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        for k in [kh, kw] {
            let op = (self.stride + 2 * self.padding) as isize - k as isize;
            if op < 0 || op >= self.stride as isize {
                return Err(Error::InvalidArgument(format!(
                    "conv_transpose kernel {k}, stride {}, padding {} cannot produce output = input * stride",
                    self.stride, self.padding
                )));
            }
        }
        Ok((h * self.stride, w * self.stride))
    }
}

fn check_groups(groups: usize, cin: usize, cout: usize) -> Result<()> {
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "groups {groups} must divide in_channels {cin} and out_channels {cout}"
        )));
    }
    Ok(())
}

/// Gather padded input patches into a `K x (B*Ho*Wo)` column matrix,
/// rows ordered by absolute input channel then kernel position.
fn im2col<T: Element>(
    input: &Tensor<T>,
    geom: &ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let (b, c, h, w) = input.dims4().expect("im2col: 4-D input");
    let (kh, kw) = geom.kernel;
    let n = b * ho * wo;
    debug_assert_eq!(cols.len(), c * kh * kw * n);
    let data = input.data();
    let s = geom.stride as isize;
    let p = geom.padding as isize;

    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for bi in 0..b {
                    let in_base = (bi * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let out_base = row + (bi * ho + oy) * wo;
                        if iy < 0 || iy >= h as isize {
                            cols[out_base..out_base + wo].fill(T::zero());
                            continue;
                        }
                        let in_row = in_base + iy as usize * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            cols[out_base + ox] = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                data[in_row + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into image layout (adjoint of `im2col`).
fn col2im<T: Element>(
    cols: &[T],
    geom: &ConvGeometry,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let n = b * ho * wo;
    debug_assert_eq!(cols.len(), c * kh * kw * n);
    debug_assert_eq!(out.len(), b * c * h * w);
    let s = geom.stride as isize;
    let p = geom.padding as isize;

    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                for bi in 0..b {
                    let out_base = (bi * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let out_row = out_base + iy as usize * w;
                        let col_base = row + (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                out[out_row + ix as usize] += cols[col_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_shape_checks<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
    transpose: bool,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = input.dims4()?;
    let (kh, kw) = geom.kernel;
    let wdims = weight.shape();
    if wdims.len() != 4 || wdims[2] != kh || wdims[3] != kw {
        return Err(Error::ShapeMismatch(format!(
            "weight shape {:?} does not match kernel {}x{}",
            wdims, kh, kw
        )));
    }
    let cout = if transpose {
        // conv_transpose weight: [Cin, Cout/groups, kh, kw]
        if wdims[0] != c {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose weight expects {} input channels, input has {}",
                wdims[0], c
            )));
        }
        wdims[1] * geom.groups
    } else {
        // conv weight: [Cout, Cin/groups, kh, kw]
        if wdims[1] * geom.groups != c {
            return Err(Error::ShapeMismatch(format!(
                "conv weight expects {} input channels ({} groups), input has {}",
                wdims[1] * geom.groups,
                geom.groups,
                c
            )));
        }
        wdims[0]
    };
    check_groups(geom.groups, c, cout)?;
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?}, expected [{}]",
                bias.shape(),
                cout
            )));
        }
    }
    Ok((b, c, h, w, cout))
}

/// 2-D convolution, weight layout `[Cout, Cin/groups, kh, kw]`.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (b, c, h, w, cout) = conv_shape_checks(input, weight, bias, geom, false)?;
    let (ho, wo) = geom.conv_output_hw(h, w)?;
    let (kh, kw) = geom.kernel;
    let g = geom.groups;
    let cin_g = c / g;
    let cout_g = cout / g;
    let kdim = cin_g * kh * kw;
    let n = b * ho * wo;

    let mut cols = vec![T::zero(); c * kh * kw * n];
    im2col(input, geom, ho, wo, &mut cols);

    // buf holds [Cout, B*Ho*Wo]; each group writes its own row block.
    let mut buf = vec![T::zero(); cout * n];
    for gi in 0..g {
        gemm(
            cout_g,
            kdim,
            n,
            T::one(),
            &weight.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
            false,
            &cols[gi * kdim * n..(gi + 1) * kdim * n],
            false,
            T::zero(),
            &mut buf[gi * cout_g * n..(gi + 1) * cout_g * n],
        );
    }

    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    let out_data = out.data_mut();
    let hw = ho * wo;
    for co in 0..cout {
        let bias_v = bias.map_or(T::zero(), |t| t.data()[co]);
        for bi in 0..b {
            let src = &buf[co * n + bi * hw..co * n + (bi + 1) * hw];
            let dst = &mut out_data[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + bias_v;
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward` w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w, cout) = conv_shape_checks(input, weight, None, geom, false)?;
    let (ho, wo) = geom.conv_output_hw(h, w)?;
    let (gb, gc, gh, gw) = grad_out.dims4()?;
    if (gb, gc, gh, gw) != (b, cout, ho, wo) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [b, cout, ho, wo]
        )));
    }
    let (kh, kw) = geom.kernel;
    let g = geom.groups;
    let cin_g = c / g;
    let cout_g = cout / g;
    let kdim = cin_g * kh * kw;
    let n = b * ho * wo;
    let hw = ho * wo;

    // Regroup grad_out into [Cout, B*Ho*Wo].
    let mut gbuf = vec![T::zero(); cout * n];
    let go = grad_out.data();
    for co in 0..cout {
        for bi in 0..b {
            gbuf[co * n + bi * hw..co * n + (bi + 1) * hw]
                .copy_from_slice(&go[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]);
        }
    }

    let mut cols = vec![T::zero(); c * kh * kw * n];
    im2col(input, geom, ho, wo, &mut cols);

    // grad_weight[g] = grad_out[g] @ cols[g]^T
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    for gi in 0..g {
        gemm(
            cout_g,
            n,
            kdim,
            T::one(),
            &gbuf[gi * cout_g * n..(gi + 1) * cout_g * n],
            false,
            &cols[gi * kdim * n..(gi + 1) * kdim * n],
            true,
            T::zero(),
            &mut grad_weight.data_mut()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
        );
    }

    // grad_cols[g] = weight[g]^T @ grad_out[g], then scatter back to image.
    let mut grad_cols = vec![T::zero(); c * kh * kw * n];
    for gi in 0..g {
        gemm(
            kdim,
            cout_g,
            n,
            T::one(),
            &weight.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
            true,
            &gbuf[gi * cout_g * n..(gi + 1) * cout_g * n],
            false,
            T::zero(),
            &mut grad_cols[gi * kdim * n..(gi + 1) * kdim * n],
        );
    }
    let mut grad_input = Tensor::zeros(vec![b, c, h, w]);
    col2im(&grad_cols, geom, b, c, h, w, ho, wo, grad_input.data_mut());

    let mut grad_bias = Tensor::zeros(vec![cout]);
    for co in 0..cout {
        let mut acc = T::zero();
        for v in &gbuf[co * n..(co + 1) * n] {
            acc += *v;
        }
        grad_bias.data_mut()[co] = acc;
    }

    Ok((grad_input, grad_weight, grad_bias))
}

/// Transposed 2-D convolution, weight layout `[Cin, Cout/groups, kh, kw]`.
/// Output spatial extent is `input * stride` (see [`ConvGeometry`]).
pub fn conv_transpose2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (b, c, h, w, cout) = conv_shape_checks(input, weight, bias, geom, true)?;
    let (ho, wo) = geom.conv_transpose_output_hw(h, w)?;
    let (kh, kw) = geom.kernel;
    let g = geom.groups;
    let cin_g = c / g;
    let cout_g = cout / g;
    let kdim = cout_g * kh * kw;
    let hw_in = h * w;

    // The adjoint geometry maps output pixels back onto input pixels: a
    // conv with the same kernel/stride over the *output* grid lands on the
    // input grid exactly when output = input * stride.
    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    let mut cols = vec![T::zero(); g * kdim * hw_in];
    for bi in 0..b {
        // cols[g] = weight[g]^T (kdim x cin_g) @ input[b, g] (cin_g x hw)
        for gi in 0..g {
            gemm(
                kdim,
                cin_g,
                hw_in,
                T::one(),
                &weight.data()[gi * cin_g * kdim..(gi + 1) * cin_g * kdim],
                true,
                &input.data()[(bi * c + gi * cin_g) * hw_in..(bi * c + (gi + 1) * cin_g) * hw_in],
                false,
                T::zero(),
                &mut cols[gi * kdim * hw_in..(gi + 1) * kdim * hw_in],
            );
        }
        // Scatter: out[b, co, oy, ox] += cols[(co,ky,kx), (iy,ix)] at
        // oy = iy*s - p + ky, ox = ix*s - p + kx.
        let out_data = out.data_mut();
        let s = geom.stride as isize;
        let p = geom.padding as isize;
        for co in 0..cout {
            let gi = co / cout_g;
            let co_rel = co % cout_g;
            let out_base = (bi * cout + co) * ho * wo;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (gi * kdim + (co_rel * kh + ky) * kw + kx) * hw_in;
                    for iy in 0..h {
                        let oy = iy as isize * s - p + ky as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let out_row = out_base + oy as usize * wo;
                        let col_row = row + iy * w;
                        for ix in 0..w {
                            let ox = ix as isize * s - p + kx as isize;
                            if ox >= 0 && ox < wo as isize {
                                out_data[out_row + ox as usize] += cols[col_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(bias) = bias {
        let out_data = out.data_mut();
        let hw = ho * wo;
        for bi in 0..b {
            for co in 0..cout {
                let v = bias.data()[co];
                for d in &mut out_data[(bi * cout + co) * hw..(bi * cout + co + 1) * hw] {
                    *d += v;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv_transpose2d_forward` w.r.t. input, weight and bias.
pub fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w, cout) = conv_shape_checks(input, weight, None, geom, true)?;
    let (ho, wo) = geom.conv_transpose_output_hw(h, w)?;
    if grad_out.shape() != [b, cout, ho, wo] {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [b, cout, ho, wo]
        )));
    }
    let (kh, kw) = geom.kernel;
    let g = geom.groups;
    let cin_g = c / g;
    let cout_g = cout / g;
    let kdim = cout_g * kh * kw;
    let hw_in = h * w;

    // The forward scatter is the adjoint of an im2col gather on grad_out,
    // so backward gathers patches of grad_out at the input grid positions.
    let mut grad_input = Tensor::zeros(vec![b, c, h, w]);
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    let mut gcols = vec![T::zero(); g * kdim * hw_in];
    let go = grad_out.data();
    let s = geom.stride as isize;
    let p = geom.padding as isize;

    for bi in 0..b {
        // Gather grad_out patches: gcols[(co,ky,kx),(iy,ix)] = go[b,co,iy*s-p+ky,ix*s-p+kx]
        for co in 0..cout {
            let gi = co / cout_g;
            let co_rel = co % cout_g;
            let go_base = (bi * cout + co) * ho * wo;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (gi * kdim + (co_rel * kh + ky) * kw + kx) * hw_in;
                    for iy in 0..h {
                        let oy = iy as isize * s - p + ky as isize;
                        let col_row = row + iy * w;
                        if oy < 0 || oy >= ho as isize {
                            gcols[col_row..col_row + w].fill(T::zero());
                            continue;
                        }
                        let go_row = go_base + oy as usize * wo;
                        for ix in 0..w {
                            let ox = ix as isize * s - p + kx as isize;
                            gcols[col_row + ix] = if ox >= 0 && ox < wo as isize {
                                go[go_row + ox as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
        // grad_input[b, g] (cin_g x hw) = weight[g] (cin_g x kdim) @ gcols[g] (kdim x hw)
        for gi in 0..g {
            gemm(
                cin_g,
                kdim,
                hw_in,
                T::one(),
                &weight.data()[gi * cin_g * kdim..(gi + 1) * cin_g * kdim],
                false,
                &gcols[gi * kdim * hw_in..(gi + 1) * kdim * hw_in],
                false,
                T::zero(),
                &mut grad_input.data_mut()
                    [(bi * c + gi * cin_g) * hw_in..(bi * c + (gi + 1) * cin_g) * hw_in],
            );
        }
        // grad_weight[g] += input[b, g] (cin_g x hw) @ gcols[g]^T (hw x kdim)
        for gi in 0..g {
            gemm(
                cin_g,
                hw_in,
                kdim,
                T::one(),
                &input.data()[(bi * c + gi * cin_g) * hw_in..(bi * c + (gi + 1) * cin_g) * hw_in],
                false,
                &gcols[gi * kdim * hw_in..(gi + 1) * kdim * hw_in],
                true,
                T::one(),
                &mut grad_weight.data_mut()[gi * cin_g * kdim..(gi + 1) * cin_g * kdim],
            );
        }
    }

    let mut grad_bias = Tensor::zeros(vec![cout]);
    let hw = ho * wo;
    for bi in 0..b {
        for co in 0..cout {
            let mut acc = T::zero();
            for v in &go[(bi * cout + co) * hw..(bi * cout + co + 1) * hw] {
                acc += *v;
            }
            grad_bias.data_mut()[co] += acc;
        }
    }

    Ok((grad_input, grad_weight, grad_bias))
}

/// Max pooling; returns the pooled tensor and per-output argmax indices
/// (flat `iy * w + ix` within each `[b, c]` plane) for the backward pass.
pub fn maxpool2d_forward<T: Element>(
    input: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = input.dims4()?;
    let (ho, wo) = geom.conv_output_hw(h, w)?;
    let (kh, kw) = geom.kernel;
    let s = geom.stride as isize;
    let p = geom.padding as isize;
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let mut argmax = vec![0u32; b * c * ho * wo];
    let data = input.data();
    let out_data = out.data_mut();

    for bc in 0..b * c {
        let in_base = bc * h * w;
        let out_base = bc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..kh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = data[in_base + idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out_data[out_base + oy * wo + ox] = best;
                argmax[out_base + oy * wo + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    let (b, c, ho, wo) = grad_out.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    if argmax.len() != b * c * ho * wo {
        return Err(Error::ShapeMismatch(
            "maxpool backward: argmax length mismatch".into(),
        ));
    }
    let go = grad_out.data();
    let gi = grad_input.data_mut();
    for bc in 0..b * c {
        let in_base = bc * h * w;
        let out_base = bc * ho * wo;
        for o in 0..ho * wo {
            gi[in_base + argmax[out_base + o] as usize] += go[out_base + o];
        }
    }
    Ok(grad_input)
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.require_same_shape(grad_out, "relu backward")?;
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad)
}

/// Per-channel statistics saved by the batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCtx<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

fn bn_param_check<T: Element>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm parameters must be [{}], got {:?} / {:?}",
            c,
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Batch-norm with batch statistics. Returns the output, saved statistics,
/// and the batch mean/var for the caller's running-average update.
#[allow(clippy::type_complexity)]
pub fn batchnorm2d_forward_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnCtx<T>, Vec<T>, Vec<T>)> {
    let (b, c, h, w) = input.dims4()?;
    bn_param_check(c, gamma, beta)?;
    let m = b * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument("batchnorm on empty batch".into()));
    }
    let hw = h * w;
    let data = input.data();
    let eps = T::from_f64(BN_EPS);
    let inv_m = T::one() / T::from_f64(m as f64);

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            for v in &data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                acc += *v;
            }
        }
        let mu = acc * inv_m;
        let mut vacc = T::zero();
        for bi in 0..b {
            for v in &data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                let d = *v - mu;
                vacc += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = vacc * inv_m;
    }

    let mut out = Tensor::zeros(input.shape().to_vec());
    let out_data = out.data_mut();
    let mut inv_std = vec![T::zero(); c];
    for ci in 0..c {
        let istd = T::one() / (var[ci] + eps).sqrt();
        inv_std[ci] = istd;
        let g = gamma.data()[ci];
        let bta = beta.data()[ci];
        let mu = mean[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                out_data[base + i] = g * (data[base + i] - mu) * istd + bta;
            }
        }
    }
    let ctx = BnCtx {
        mean: mean.clone(),
        inv_std,
    };
    Ok((out, ctx, mean, var))
}

/// Batch-norm with running statistics (inference mode).
pub fn batchnorm2d_forward_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    bn_param_check(c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch(
            "batchnorm running stats must be per-channel".into(),
        ));
    }
    let hw = h * w;
    let eps = T::from_f64(BN_EPS);
    let mut out = Tensor::zeros(input.shape().to_vec());
    let data = input.data();
    let out_data = out.data_mut();
    for ci in 0..c {
        let istd = T::one() / (running_var.data()[ci] + eps).sqrt();
        let g = gamma.data()[ci];
        let bta = beta.data()[ci];
        let mu = running_mean.data()[ci];
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                out_data[base + i] = g * (data[base + i] - mu) * istd + bta;
            }
        }
    }
    Ok(out)
}

/// Backward through train-mode batch-norm (batch statistics are themselves
/// functions of the input, so the mean/variance terms appear).
pub fn batchnorm2d_backward_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    ctx: &BnCtx<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = input.dims4()?;
    input.require_same_shape(grad_out, "batchnorm backward")?;
    let hw = h * w;
    let m = T::from_f64((b * h * w) as f64);
    let data = input.data();
    let go = grad_out.data();

    let mut grad_gamma = Tensor::zeros(vec![c]);
    let mut grad_beta = Tensor::zeros(vec![c]);
    let mut grad_input = Tensor::zeros(input.shape().to_vec());

    for ci in 0..c {
        let mu = ctx.mean[ci];
        let istd = ctx.inv_std[ci];
        let g = gamma.data()[ci];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = (data[base + i] - mu) * istd;
                sum_dy += go[base + i];
                sum_dy_xhat += go[base + i] * xhat;
            }
        }
        grad_gamma.data_mut()[ci] = sum_dy_xhat;
        grad_beta.data_mut()[ci] = sum_dy;

        let k1 = sum_dy / m;
        let k2 = sum_dy_xhat / m;
        let gi = grad_input.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = (data[base + i] - mu) * istd;
                gi[base + i] = g * istd * (go[base + i] - k1 - xhat * k2);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// Backward through eval-mode batch-norm (running stats are constants).
pub fn batchnorm2d_backward_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = input.dims4()?;
    input.require_same_shape(grad_out, "batchnorm backward")?;
    let hw = h * w;
    let eps = T::from_f64(BN_EPS);
    let data = input.data();
    let go = grad_out.data();
    let mut grad_gamma = Tensor::zeros(vec![c]);
    let mut grad_beta = Tensor::zeros(vec![c]);
    let mut grad_input = Tensor::zeros(input.shape().to_vec());
    for ci in 0..c {
        let istd = T::one() / (running_var.data()[ci] + eps).sqrt();
        let mu = running_mean.data()[ci];
        let g = gamma.data()[ci];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        let gi = grad_input.data_mut();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let xhat = (data[base + i] - mu) * istd;
                sum_dy += go[base + i];
                sum_dy_xhat += go[base + i] * xhat;
                gi[base + i] = g * istd * go[base + i];
            }
        }
        grad_gamma.data_mut()[ci] = sum_dy_xhat;
        grad_beta.data_mut()[ci] = sum_dy;
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

/// Concatenate along the channel axis; spatial dims and batch must match.
pub fn channel_concat_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "channel_concat: batch/spatial dims differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ha * wa;
    let mut out = Tensor::zeros(vec![ba, ca + cb, ha, wa]);
    let out_data = out.data_mut();
    for bi in 0..ba {
        let dst = &mut out_data[bi * (ca + cb) * hw..(bi + 1) * (ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Ok(out)
}

pub fn channel_concat_backward<T: Element>(
    ca: usize,
    cb: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = grad_out.dims4()?;
    if c != ca + cb {
        return Err(Error::ShapeMismatch(format!(
            "channel_concat backward: grad has {c} channels, expected {}",
            ca + cb
        )));
    }
    let hw = h * w;
    let mut ga = Tensor::zeros(vec![b, ca, h, w]);
    let mut gb = Tensor::zeros(vec![b, cb, h, w]);
    for bi in 0..b {
        let src = &grad_out.data()[bi * c * hw..(bi + 1) * c * hw];
        ga.data_mut()[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
        gb.data_mut()[bi * cb * hw..(bi + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    Ok((ga, gb))
}

/// Softmax over the channel axis, independently at every pixel.
pub fn softmax_channels_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    let hw = h * w;
    let data = input.data();
    let mut out = Tensor::zeros(input.shape().to_vec());
    let out_data = out.data_mut();
    for bi in 0..b {
        for p in 0..hw {
            let mut maxv = T::neg_infinity();
            for ci in 0..c {
                maxv = maxv.max(data[(bi * c + ci) * hw + p]);
            }
            let mut denom = T::zero();
            for ci in 0..c {
                let e = (data[(bi * c + ci) * hw + p] - maxv).exp();
                out_data[(bi * c + ci) * hw + p] = e;
                denom += e;
            }
            for ci in 0..c {
                out_data[(bi * c + ci) * hw + p] /= denom;
            }
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<T: Element>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    output.require_same_shape(grad_out, "softmax backward")?;
    let (b, c, h, w) = output.dims4()?;
    let hw = h * w;
    let y = output.data();
    let go = grad_out.data();
    let mut grad = Tensor::zeros(output.shape().to_vec());
    let gi = grad.data_mut();
    for bi in 0..b {
        for p in 0..hw {
            let mut dot = T::zero();
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                dot += go[idx] * y[idx];
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                gi[idx] = y[idx] * (go[idx] - dot);
            }
        }
    }
    Ok(grad)
}

/// Elementwise sum of two same-shape tensors (residual merge).
pub fn add_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.require_same_shape(b, "add")?;
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += *v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_stride2_halves_spatial_dims() {
        let input = Tensor::<f32>::filled(vec![1, 1, 64, 64], 0.5);
        let weight = Tensor::<f32>::filled(vec![64, 1, 3, 3], 0.1);
        let geom = ConvGeometry::new((3, 3), 2, 1, 1);
        let out = conv2d_forward(&input, &weight, None, &geom).unwrap();
        assert_eq!(out.shape(), [1, 64, 32, 32]);
    }

    #[test]
    fn one_by_one_identity_conv_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(vec![2, 3, 5, 5], &mut rng);
        // identity: weight[o][i] = 1 if o == i, zero bias
        let mut weight = Tensor::zeros(vec![3, 3, 1, 1]);
        for i in 0..3 {
            weight.data_mut()[i * 3 + i] = 1.0;
        }
        let bias = Tensor::zeros(vec![3]);
        let geom = ConvGeometry::new((1, 1), 1, 0, 1);
        let out = conv2d_forward(&input, &weight, Some(&bias), &geom).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn relu_zeroes_negative_tensor() {
        let input = Tensor::<f32>::filled(vec![1, 2, 3, 3], -4.2);
        let out = relu_forward(&input);
        assert_eq!(out.shape(), input.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_on_constant_is_constant_and_halves_dims() {
        let input = Tensor::<f32>::filled(vec![1, 2, 64, 64], 3.5);
        let geom = ConvGeometry::new((3, 3), 2, 1, 1);
        let (out, _) = maxpool2d_forward(&input, &geom).unwrap();
        assert_eq!(out.shape(), [1, 2, 32, 32]);
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn grouped_conv_matches_per_group_loop_oracle() {
        // Depthwise case: groups = in = out channels.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 6;
        let input = rand_tensor(vec![2, c, 7, 7], &mut rng);
        let weight = rand_tensor(vec![c, 1, 3, 3], &mut rng);
        let geom = ConvGeometry::new((3, 3), 1, 1, c);
        let fast = conv2d_forward(&input, &weight, None, &geom).unwrap();

        // Naive per-channel loop.
        let (b, _, h, w) = input.dims4().unwrap();
        let mut naive = Tensor::<f64>::zeros(vec![b, c, h, w]);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[((bi * c + ci) * h + iy as usize) * w
                                    + ix as usize]
                                    * weight.data()[(ci * 9) + ky * 3 + kx];
                            }
                        }
                        naive.data_mut()[((bi * c + ci) * h + oy) * w + ox] = acc;
                    }
                }
            }
        }
        assert!(fast.max_abs_diff(&naive).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_conv_equals_independent_group_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, cin, cout) = (4, 8, 12);
        let input = rand_tensor(vec![1, cin, 6, 6], &mut rng);
        let weight = rand_tensor(vec![cout, cin / g, 3, 3], &mut rng);
        let geom = ConvGeometry::new((3, 3), 1, 1, g);
        let grouped = conv2d_forward(&input, &weight, None, &geom).unwrap();

        let single = ConvGeometry::new((3, 3), 1, 1, 1);
        for gi in 0..g {
            let cin_g = cin / g;
            let cout_g = cout / g;
            let sub_in = Tensor::from_fn(vec![1, cin_g, 6, 6], |i| {
                let (ci, p) = (i / 36, i % 36);
                input.data()[(gi * cin_g + ci) * 36 + p]
            });
            let kdim = cin_g * 9;
            let sub_w = Tensor::from_fn(vec![cout_g, cin_g, 3, 3], |i| {
                weight.data()[gi * cout_g * kdim + i]
            });
            let sub_out = conv2d_forward(&sub_in, &sub_w, None, &single).unwrap();
            for co in 0..cout_g {
                for p in 0..36 {
                    let want = sub_out.data()[co * 36 + p];
                    let got = grouped.data()[(gi * cout_g + co) * 36 + p];
                    assert!((want - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_doubles_spatial_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(vec![1, 4, 8, 8], &mut rng);
        let weight = rand_tensor(vec![4, 2, 3, 3], &mut rng);
        let geom = ConvGeometry::new((3, 3), 2, 1, 1);
        let out = conv_transpose2d_forward(&input, &weight, None, &geom).unwrap();
        assert_eq!(out.shape(), [1, 2, 16, 16]);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> when they share a kernel.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(vec![1, 3, 8, 8], &mut rng);
        let w_conv = rand_tensor(vec![5, 3, 3, 3], &mut rng);
        let geom = ConvGeometry::new((3, 3), 2, 1, 1);
        let cx = conv2d_forward(&x, &w_conv, None, &geom).unwrap();
        let y = rand_tensor(cx.shape().to_vec(), &mut rng);

        // conv_transpose weight layout [Cin=5, Cout=3, kh, kw] lines up with
        // the conv layout [Cout=5, Cin=3, kh, kw] element for element.
        let w_t = Tensor::new(vec![5, 3, 3, 3], w_conv.data().to_vec()).unwrap();
        let ty = conv_transpose2d_forward(&y, &w_t, None, &geom).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn softmax_channels_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(vec![2, 3, 4, 4], &mut rng);
        let y = softmax_channels_forward(&x).unwrap();
        for bi in 0..2 {
            for p in 0..16 {
                let s: f64 = (0..3).map(|c| y.data()[(bi * 3 + c) * 16 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_roundtrip_through_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(vec![2, 3, 4, 4], &mut rng);
        let b = rand_tensor(vec![2, 2, 4, 4], &mut rng);
        let cat = channel_concat_forward(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 5, 4, 4]);
        let (ga, gb) = channel_concat_backward(3, 2, &cat).unwrap();
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }

    #[test]
    fn concat_rejects_mismatched_spatial_dims() {
        let a = Tensor::<f32>::zeros(vec![1, 1, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 1, 5, 4]);
        assert!(channel_concat_forward(&a, &b).is_err());
    }

    #[test]
    fn conv_rejects_groups_not_dividing_channels() {
        let input = Tensor::<f32>::zeros(vec![1, 6, 4, 4]);
        let weight = Tensor::<f32>::zeros(vec![8, 2, 3, 3]);
        let geom = ConvGeometry::new((3, 3), 1, 1, 4);
        assert!(conv2d_forward(&input, &weight, None, &geom).is_err());
    }
}
