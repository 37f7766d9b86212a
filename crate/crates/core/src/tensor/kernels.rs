//! Raw forward and backward kernels shared by the tape and the tape-free
//! inference path.
//!
//! Convolution goes through an im2col buffer so every inner loop is a
//! contiguous multiply-add over output positions. Accumulation order for each
//! output element is fixed: bias first, then input channel, kernel row and
//! kernel column ascending.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Pre-activation bound applied inside [`sigmoid_scalar`].
pub(crate) const SIGMOID_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `k / 2` so the output keeps the input size.
    Same,
    /// No padding, output shrinks by `k - 1`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad_y: usize,
    pad_x: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGeom> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 {
        return Err(Error::dim("conv2d", format!("input must be [N,Cin,H,W], got {is:?}")));
    }
    if ks.len() != 4 {
        return Err(Error::dim(
            "conv2d",
            format!("kernel must be [Cout,Cin,kh,kw], got {ks:?}"),
        ));
    }
    let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if cin != kcin {
        return Err(Error::dim(
            "conv2d",
            format!("Cin mismatch: input axis 1 has {cin}, kernel axis 1 has {kcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel kh/kw must be odd, got {kh}x{kw}")));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(
            "conv2d",
            format!("bias must be [Cout]=[{cout}], got {:?}", bias.shape()),
        ));
    }
    let (pad_y, pad_x, oh, ow) = match padding {
        Padding::Same => (kh / 2, kw / 2, h, w),
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::dim(
                    "conv2d",
                    format!("H/W {h}x{w} smaller than kernel {kh}x{kw} under valid padding"),
                ));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        pad_y,
        pad_x,
        oh,
        ow,
    })
}

/// Columns `[cin*kh*kw, oh*ow]` for one batch item.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * p..(r + 1) * p];
                let (x_lo, x_hi) = valid_x_range(g, kx);
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy + ky) as isize - g.pad_y as isize;
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..x_lo].fill(T::zero());
                    let shift = kx as isize - g.pad_x as isize;
                    let s0 = (x_lo as isize + shift) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    dst[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox + kx - pad_x` is in range.
fn valid_x_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad_x.saturating_sub(kx);
    let hi = (g.w + g.pad_x).saturating_sub(kx).min(g.ow);
    (lo, hi.max(lo))
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[m x n] += A[m x k] * B[k x n]`, where `A[i][l] = a[i*a_rs + l*a_cs]`
/// and `B` is row-major. Each output element accumulates its initial value
/// first and then the `k` products in ascending `l`, whatever the tiling.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], a_rs: usize, a_cs: usize, b: &[T], out: &mut [T]) {
    let mut apack = vec![T::zero(); k * MR];
    let mut i0 = 0;
    while i0 < m {
        let mb = MR.min(m - i0);
        if mb == MR {
            for l in 0..k {
                for i in 0..MR {
                    apack[l * MR + i] = a[(i0 + i) * a_rs + l * a_cs];
                }
            }
        }
        let mut j0 = 0;
        while j0 < n {
            let nb = NR.min(n - j0);
            if mb == MR && nb == NR {
                let mut acc = [[T::zero(); NR]; MR];
                for (i, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR]);
                }
                for (l, ap) in apack.chunks_exact(MR).enumerate() {
                    let ap: &[T; MR] = ap.try_into().unwrap();
                    let brow: [T; NR] = b[l * n + j0..l * n + j0 + NR].try_into().unwrap();
                    for i in 0..MR {
                        let av = ap[i];
                        for j in 0..NR {
                            acc[i][j] = acc[i][j] + av * brow[j];
                        }
                    }
                }
                for (i, row) in acc.iter().enumerate() {
                    out[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for i in i0..i0 + mb {
                    for j in j0..j0 + nb {
                        let mut acc = out[i * n + j];
                        for l in 0..k {
                            acc = acc + a[i * a_rs + l * a_cs] * b[l * n + j];
                        }
                        out[i * n + j] = acc;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernel, bias, padding)?;
    let (r_len, p) = (g.taps(), g.positions());
    let in_item = g.cin * g.h * g.w;
    let mut col = vec![T::zero(); r_len * p];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let k = kernel.data();
    for n in 0..g.n {
        im2col(&input.data()[n * in_item..(n + 1) * in_item], &g, &mut col);
        let dst = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for co in 0..g.cout {
            dst[co * p..(co + 1) * p].fill(bias.data()[co]);
        }
        gemm_acc(g.cout, p, r_len, k, r_len, 1, &col, dst);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let (r_len, p) = (g.taps(), g.positions());
    let in_item = g.cin * g.h * g.w;
    let k = kernel.data();
    let mut col = vec![T::zero(); r_len * p];
    let mut gout_t = vec![T::zero(); p * g.cout];
    // Kernel gradient stored transposed, [r_len, cout].
    let mut gk_t = vec![T::zero(); r_len * g.cout];
    let mut gb = vec![T::zero(); g.cout];
    let mut gin = if need_input {
        Some(vec![T::zero(); g.n * in_item])
    } else {
        None
    };
    let mut gcol = vec![T::zero(); if need_input { r_len * p } else { 0 }];

    for n in 0..g.n {
        let gout = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        for co in 0..g.cout {
            gb[co] = gout[co * p..(co + 1) * p].iter().fold(gb[co], |acc, &v| acc + v);
        }

        im2col(&input.data()[n * in_item..(n + 1) * in_item], g, &mut col);
        for co in 0..g.cout {
            for q in 0..p {
                gout_t[q * g.cout + co] = gout[co * p + q];
            }
        }
        // Kernel gradient: positions accumulate in row-major order.
        gemm_acc(r_len, g.cout, p, &col, p, 1, &gout_t, &mut gk_t);

        if let Some(gin) = gin.as_mut() {
            gcol.fill(T::zero());
            gemm_acc(r_len, p, g.cout, k, 1, r_len, gout, &mut gcol);
            let gplane_all = &mut gin[n * in_item..(n + 1) * in_item];
            for c in 0..g.cin {
                let plane = &mut gplane_all[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let r = (c * g.kh + ky) * g.kw + kx;
                        let (x_lo, x_hi) = valid_x_range(g, kx);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let shift = kx as isize - g.pad_x as isize;
                        for oy in 0..g.oh {
                            let iy = (oy + ky) as isize - g.pad_y as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src = &gcol[r * p + oy * g.ow + x_lo..r * p + oy * g.ow + x_hi];
                            let d0 = iy as usize * g.w + (x_lo as isize + shift) as usize;
                            for (d, &v) in plane[d0..d0 + src.len()].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut gk = vec![T::zero(); g.cout * r_len];
    for r in 0..r_len {
        for co in 0..g.cout {
            gk[co * r_len + r] = gk_t[r * g.cout + co];
        }
    }
    ConvGrads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

pub(crate) fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn require_4d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::dim(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

/// 2x2 windows, stride 2. Ties resolve to the first element in row-major
/// window order.
pub(crate) fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = require_4d("maxpool2", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2", format!("H and W must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub(crate) fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_4d("global_avg_pool", input)?;
    let area = T::from_f64((h * w) as f64);
    let out = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / area)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn global_max_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = require_4d("global_max_pool", input)?;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for (pi, plane) in input.data().chunks(h * w).enumerate() {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        arg.push((pi * h * w + best) as u32);
    }
    Ok((Tensor::from_parts(vec![n, c], out), arg))
}

/// Concatenate along axis 1. All inputs share axis 0 and every axis after 1.
pub(crate) fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
    if first.ndim() < 2 {
        return Err(Error::dim(
            "concat_channels",
            format!("inputs need a channel axis, got {:?}", first.shape()),
        ));
    }
    let n = first.shape()[0];
    let tail = &first.shape()[2..];
    for t in inputs {
        if t.ndim() != first.ndim() || t.shape()[0] != n || &t.shape()[2..] != tail {
            return Err(Error::dim(
                "concat_channels",
                format!("N/trailing axes differ: {:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
    }
    let inner: usize = tail.iter().product();
    let total_c: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total_c * inner);
    for b in 0..n {
        for t in inputs {
            let chunk = t.shape()[1] * inner;
            out.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut shape = vec![n, total_c];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = match *input.shape() {
        [n, f] => (n, f),
        ref s => return Err(Error::dim("linear", format!("input must be [N,in], got {s:?}"))),
    };
    let fout = match *weight.shape() {
        [o, i] if i == fin => o,
        ref s => return Err(Error::dim("linear", format!("weight must be [out,{fin}], got {s:?}"))),
    };
    if bias.shape() != [fout] {
        return Err(Error::dim(
            "linear",
            format!("bias must be [{fout}], got {:?}", bias.shape()),
        ));
    }
    let (x, wd, bd) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * fout);
    for b in 0..n {
        let row = &x[b * fin..(b + 1) * fin];
        for o in 0..fout {
            let wr = &wd[o * fin..(o + 1) * fin];
            out.push(row.iter().zip(wr).fold(bd[o], |acc, (&a, &c)| acc + a * c));
        }
    }
    Ok(Tensor::from_parts(vec![n, fout], out))
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let bound = T::from_f64(SIGMOID_CLAMP);
    let x = x.max(-bound).min(bound);
    T::one() / (T::one() + (-x).exp())
}

/// Log-softmax over the last axis.
pub(crate) fn log_softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let k = *input
        .shape()
        .last()
        .ok_or_else(|| Error::dim("log_softmax", "empty shape"))?;
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let lse = m + s.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}
