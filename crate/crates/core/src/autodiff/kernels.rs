//! Raw forward/backward kernels over flat slices.
//!
//! Convolutions lower to im2col + GEMM. Everything here is single-threaded
//! and visits elements in a fixed order, so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Geometry of a 3D cross-correlation over a `[Cin, T, H, W]` input.
/// 2D convolution is the `t = kt = st = 1, pt = 0` special case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extent per axis, `None` when the window does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    pub fn n_in(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output "lines" `(ot, oh)` per im2col block, chosen so a block of the
/// column matrix stays around 512 KiB.
fn lines_per_block<S: Real>(g: &ConvGeom) -> usize {
    const BLOCK_BYTES: usize = 512 * 1024;
    let line = g.k() * g.output[2] * S::BYTES;
    (BLOCK_BYTES / line.max(1)).clamp(1, g.output[0] * g.output[1])
}

/// Valid output columns `[lo, hi)` of a stride-1 row for kernel tap `dw`.
fn valid_span(w: usize, wo: usize, pw: usize, dw: usize) -> (usize, usize) {
    let lo = pw.saturating_sub(dw).min(wo);
    let hi = (w + pw).saturating_sub(dw).min(wo).max(lo);
    (lo, hi)
}

/// Column matrix for output lines `lines` (flattened `ot * ho + oh`).
/// `col` is `[k, lines.len() * wo]`.
fn im2col<S: Real>(x: &[S], g: &ConvGeom, lines: core::ops::Range<usize>, col: &mut [S]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let n = lines.len() * wo;
    let mut row = 0;
    for c in 0..g.cin {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    row += 1;
                    for (li, l) in lines.clone().enumerate() {
                        let (ot, oh) = (l / ho, l % ho);
                        let line = &mut dst[li * wo..(li + 1) * wo];
                        let it = (ot * st + dt) as isize - pt as isize;
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if it < 0 || it >= t as isize || ih < 0 || ih >= h as isize {
                            line.fill(S::ZERO);
                            continue;
                        }
                        let base = ((c * t + it as usize) * h + ih as usize) * w;
                        if sw == 1 {
                            let (lo, hi) = valid_span(w, wo, pw, dw);
                            line[..lo].fill(S::ZERO);
                            if hi > lo {
                                let src0 = base + lo + dw - pw;
                                line[lo..hi].copy_from_slice(&x[src0..src0 + (hi - lo)]);
                            }
                            line[hi..].fill(S::ZERO);
                        } else {
                            for (ow, v) in line.iter_mut().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                *v = if iw < 0 || iw >= w as isize {
                                    S::ZERO
                                } else {
                                    x[base + iw as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for the same line range.
fn col2im<S: Real>(col: &[S], g: &ConvGeom, lines: core::ops::Range<usize>, dx: &mut [S]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [_, ho, wo] = g.output;
    let n = lines.len() * wo;
    let mut row = 0;
    for c in 0..g.cin {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * n..(row + 1) * n];
                    row += 1;
                    for (li, l) in lines.clone().enumerate() {
                        let (ot, oh) = (l / ho, l % ho);
                        let line = &src[li * wo..(li + 1) * wo];
                        let it = (ot * st + dt) as isize - pt as isize;
                        let ih = (oh * sh + dh) as isize - ph as isize;
                        if it < 0 || it >= t as isize || ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let base = ((c * t + it as usize) * h + ih as usize) * w;
                        if sw == 1 {
                            let (lo, hi) = valid_span(w, wo, pw, dw);
                            if hi == lo {
                                continue;
                            }
                            let dst0 = base + lo + dw - pw;
                            for (d, &s) in dx[dst0..dst0 + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += s;
                            }
                        } else {
                            for (ow, &s) in line.iter().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    dx[base + iw as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major GEMM `c[m, n] = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[S], isize, isize),
    b: (&[S], isize, isize),
    beta: S,
    c: (&mut [S], isize),
) {
    // SAFETY: callers pass slices whose extents cover every strided access
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}

/// Line blocks `[l0, l1)` covering all output lines.
fn blocks<S: Real>(g: &ConvGeom) -> impl Iterator<Item = core::ops::Range<usize>> {
    let total = g.output[0] * g.output[1];
    let step = lines_per_block::<S>(g);
    (0..total).step_by(step).map(move |l0| l0..(l0 + step).min(total))
}

pub fn conv_forward<S: Real>(x: &[S], weight: &[S], bias: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let k = g.k();
    let n = g.n_out();
    let wo = g.output[2];
    let mut out = vec![S::ZERO; g.cout * n];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
    }
    if g.is_pointwise() {
        // out[cout, n] += W[cout, k] * x[k, n]
        gemm(g.cout, k, n, (weight, k as isize, 1), (x, n as isize, 1), S::ONE, (&mut out, n as isize));
        return out;
    }
    let mut col = vec![S::ZERO; k * lines_per_block::<S>(g) * wo];
    for lines in blocks::<S>(g) {
        let nb = lines.len() * wo;
        im2col(x, g, lines.clone(), &mut col[..k * nb]);
        gemm(
            g.cout,
            k,
            nb,
            (weight, k as isize, 1),
            (&col[..k * nb], nb as isize, 1),
            S::ONE,
            (&mut out[lines.start * wo..], n as isize),
        );
    }
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads<S> {
    pub input: Option<Vec<S>>,
    pub weight: Option<Vec<S>>,
    pub bias: Option<Vec<S>>,
}

pub fn conv_backward<S: Real>(
    x: &[S],
    weight: &[S],
    dout: &[S],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads<S> {
    let k = g.k();
    let n = g.n_out();
    let wo = g.output[2];
    let bias = need[2].then(|| dout.chunks(n).map(|row| row.iter().copied().sum()).collect());
    let mut dw = need[1].then(|| vec![S::ZERO; g.cout * k]);
    let mut dx = need[0].then(|| vec![S::ZERO; g.cin * g.n_in()]);

    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            // dW[cout, k] = dOut[cout, n] * x^T[n, k]
            gemm(g.cout, n, k, (dout, n as isize, 1), (x, 1, n as isize), S::ZERO, (dw, k as isize));
        }
        if let Some(dx) = dx.as_mut() {
            // dX[k, n] = W^T[k, cout] * dOut[cout, n]
            gemm(k, g.cout, n, (weight, 1, k as isize), (dout, n as isize, 1), S::ZERO, (dx, n as isize));
        }
    } else if need[0] || need[1] {
        let cap = k * lines_per_block::<S>(g) * wo;
        let mut col = vec![S::ZERO; cap];
        for lines in blocks::<S>(g) {
            let nb = lines.len() * wo;
            let dout_blk = &dout[lines.start * wo..];
            if let Some(dw) = dw.as_mut() {
                im2col(x, g, lines.clone(), &mut col[..k * nb]);
                gemm(
                    g.cout,
                    nb,
                    k,
                    (dout_blk, n as isize, 1),
                    (&col[..k * nb], 1, nb as isize),
                    S::ONE,
                    (dw, k as isize),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    k,
                    g.cout,
                    nb,
                    (weight, 1, k as isize),
                    (dout_blk, n as isize, 1),
                    S::ZERO,
                    (&mut col[..k * nb], nb as isize),
                );
                col2im(&col[..k * nb], g, lines, dx);
            }
        }
    }

    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}

/// Max pooling over `[C, T, H, W]` without padding. Returns the pooled values
/// and, per output element, the flat input index of the selected maximum
/// (first maximum in scan order wins ties).
pub fn maxpool_forward<S: Real>(
    x: &[S],
    channels: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
) -> (Vec<S>, Vec<u32>) {
    let [t, h, w] = input;
    let [to, ho, wo] = output;
    let n_out = channels * to * ho * wo;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for c in 0..channels {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = S::ZERO;
                    let mut best_i = usize::MAX;
                    for dt in 0..kernel[0] {
                        let it = ot * stride[0] + dt;
                        for dh in 0..kernel[1] {
                            let ih = oh * stride[1] + dh;
                            let row = ((c * t + it) * h + ih) * w;
                            for dw in 0..kernel[2] {
                                let i = row + ow * stride[2] + dw;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
        }
    }
    (out, arg)
}

/// Separable two-tap interpolation table for one axis.
#[derive(Clone, Debug, PartialEq)]
struct AxisPlan<S> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<S>,
}

impl<S: Real> AxisPlan<S> {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            // pixel centers at half-integers
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(S::from_f64(src - i0 as f64));
        }
        AxisPlan { lo, hi, frac }
    }
}

/// Bilinear resize of the trailing two axes with `align_corners=false`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan<S> {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: AxisPlan<S>,
    cols: AxisPlan<S>,
}

impl<S: Real> ResizePlan<S> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_hw: (in_h, in_w),
            out_hw: (out_h, out_w),
            rows: AxisPlan::new(in_h, out_h),
            cols: AxisPlan::new(in_w, out_w),
        }
    }

    pub fn forward(&self, x: &[S], out: &mut [S]) {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let planes = x.len() / (ih * iw);
        for p in 0..planes {
            let src = &x[p * ih * iw..(p + 1) * ih * iw];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..oh {
                let (r0, r1, fr) = (self.rows.lo[r], self.rows.hi[r], self.rows.frac[r]);
                for c in 0..ow {
                    let (c0, c1, fc) = (self.cols.lo[c], self.cols.hi[c], self.cols.frac[c]);
                    let top = src[r0 * iw + c0] * (S::ONE - fc) + src[r0 * iw + c1] * fc;
                    let bot = src[r1 * iw + c0] * (S::ONE - fc) + src[r1 * iw + c1] * fc;
                    dst[r * ow + c] = top * (S::ONE - fr) + bot * fr;
                }
            }
        }
    }

    pub fn backward(&self, dout: &[S], dx: &mut [S]) {
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let planes = dout.len() / (oh * ow);
        for p in 0..planes {
            let src = &dout[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut dx[p * ih * iw..(p + 1) * ih * iw];
            for r in 0..oh {
                let (r0, r1, fr) = (self.rows.lo[r], self.rows.hi[r], self.rows.frac[r]);
                for c in 0..ow {
                    let (c0, c1, fc) = (self.cols.lo[c], self.cols.hi[c], self.cols.frac[c]);
                    let g = src[r * ow + c];
                    let gt = g * (S::ONE - fr);
                    let gb = g * fr;
                    dst[r0 * iw + c0] += gt * (S::ONE - fc);
                    dst[r0 * iw + c1] += gt * fc;
                    dst[r1 * iw + c0] += gb * (S::ONE - fc);
                    dst[r1 * iw + c1] += gb * fc;
                }
            }
        }
    }
}

/// Shape resulting from broadcasting two equal-rank shapes, if compatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every element of `out_shape` (row-major), the offset into a tensor of
/// `in_shape` that broadcasts onto it.
pub fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = crate::tensor::strides_of(in_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|i| if in_shape[i] == 1 { 0 } else { in_strides[i] })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}
