//! Forward kernels and their vector-Jacobian products.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to im2col + GEMM
//! one sample at a time. Samples are processed in index order and partial
//! weight gradients are summed in that same order, so results do not depend
//! on how the caller schedules work.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = match *weight.shape() {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight must be Cout x Cin x kh x kw, got {:?}", weight.shape()),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {} channels but weight {:?} expects {}",
                    input.shape(),
                    cin,
                    weight.shape(),
                    wcin
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let (ho, wo) = match (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(w, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} larger than padded input {:?} (padding {})",
                        kh,
                        kw,
                        input.shape(),
                        padding
                    ),
                ))
            }
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution needs no im2col copy.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `ox` in `lo..hi` read input column `ox*stride + k - padding`
/// inside `0..extent`; the rest fall in the padding.
fn valid_span(out: usize, extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride).min(out);
    let hi = if extent + padding <= k {
        0
    } else {
        ((extent + padding - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

fn im2col<T: Element>(sample: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let chan = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.ho, g.h, ki, g.stride, g.padding);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.wo, g.w, kj, g.stride, g.padding);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * g.wo].fill(T::zero());
                dst[yhi * g.wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.padding;
                    let src = &chan[iy * g.w..(iy + 1) * g.w];
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xhi > xlo {
                        let ix0 = xlo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (o, ox) in line[xlo..xhi].iter_mut().zip(0..) {
                                *o = src[ix0 + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, sample: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let chan = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.ho, g.h, ki, g.stride, g.padding);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.wo, g.w, kj, g.stride, g.padding);
                if xhi == xlo {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.padding;
                    let dst = &mut chan[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    let ix0 = xlo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[N,Cin,H,W] * [Cout,Cin,kh,kw] + bias -> [N,Cout,H',W']`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} output channels", b.shape(), g.cout),
            ));
        }
    }
    let plane = g.out_plane();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;
    let mut out = vec![T::zero(); g.n * out_len];
    let cols_len = if g.is_pointwise() { 0 } else { k * plane };
    T::with_scratch(cols_len, 0, |cols, _| {
        for s in 0..g.n {
            let sample = &input.data()[s * in_len..(s + 1) * in_len];
            let dst = &mut out[s * out_len..(s + 1) * out_len];
            if let Some(b) = bias {
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    chunk.fill(b.data()[co]);
                }
            }
            let cols_ref: &[T] = if g.is_pointwise() {
                sample
            } else {
                im2col(sample, &g, cols);
                cols
            };
            T::gemm(
                g.cout,
                k,
                plane,
                weight.data(),
                k,
                1,
                cols_ref,
                plane,
                1,
                dst,
                plane,
                1,
                bias.is_some(),
            );
        }
    });
    Tensor::new([g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its operands.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "gradient {:?} does not match output [{}, {}, {}, {}]",
                grad_out.shape(),
                g.n,
                g.cout,
                g.ho,
                g.wo
            ),
        ));
    }
    let plane = g.out_plane();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * plane;

    let mut bias = vec![T::zero(); g.cout];
    let mut dweight = need_weight.then(|| vec![T::zero(); g.cout * k]);
    let mut dinput = need_input.then(|| vec![T::zero(); input.numel()]);
    let cols_len = if g.is_pointwise() || !need_weight { 0 } else { k * plane };
    let dcols_len = if g.is_pointwise() || !need_input { 0 } else { k * plane };
    T::with_scratch(cols_len, dcols_len, |cols, dcols| {
        for s in 0..g.n {
            let gout = &grad_out.data()[s * out_len..(s + 1) * out_len];
            for (co, chunk) in gout.chunks(plane).enumerate() {
                bias[co] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
            let sample = &input.data()[s * in_len..(s + 1) * in_len];
            if let Some(dw) = dweight.as_mut() {
                let cols_ref: &[T] = if g.is_pointwise() {
                    sample
                } else {
                    im2col(sample, &g, cols);
                    cols
                };
                // dW[Cout, K] += dOut[Cout, P] * cols^T[P, K]
                T::gemm(g.cout, plane, k, gout, plane, 1, cols_ref, 1, plane, dw, k, 1, true);
            }
            if let Some(dx) = dinput.as_mut() {
                let dst = &mut dx[s * in_len..(s + 1) * in_len];
                // dcols[K, P] = W^T[K, Cout] * dOut[Cout, P]
                if g.is_pointwise() {
                    T::gemm(k, g.cout, plane, weight.data(), 1, k, gout, plane, 1, dst, plane, 1, false);
                } else {
                    T::gemm(k, g.cout, plane, weight.data(), 1, k, gout, plane, 1, dcols, plane, 1, false);
                    col2im(dcols, &g, dst);
                }
            }
        }
    });
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        weight: dweight
            .map(|d| Tensor::new(weight.shape().to_vec(), d))
            .transpose()?,
        bias: Tensor::new([g.cout], bias)?,
    })
}

#[derive(Clone, Copy, Debug)]
enum MatmulKind {
    /// `[m,k] x [k,n]`
    Plain { m: usize, k: usize, n: usize },
    /// `[m,k] x [N,k,n] -> [N,m,n]`
    SharedLeft { batch: usize, m: usize, k: usize, n: usize },
    /// `[N,m,k] x [k,n] -> [N,m,n]`
    SharedRight { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatmulKind> {
    let mismatch = || {
        Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a, b),
        )
    };
    match (a, b) {
        (&[m, k], &[k2, n]) => {
            if k != k2 {
                return Err(mismatch());
            }
            Ok(MatmulKind::Plain { m, k, n })
        }
        (&[m, k], &[batch, k2, n]) => {
            if k != k2 {
                return Err(mismatch());
            }
            Ok(MatmulKind::SharedLeft { batch, m, k, n })
        }
        (&[batch, m, k], &[k2, n]) => {
            if k != k2 {
                return Err(mismatch());
            }
            Ok(MatmulKind::SharedRight { batch, m, k, n })
        }
        _ => Err(Error::shape(
            "matmul",
            format!("unsupported operand ranks {:?} x {:?}", a, b),
        )),
    }
}

/// Matrix product. Besides plain 2-D operands, one side may carry a leading
/// batch axis while the other matrix is shared across the batch.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match matmul_kind(a.shape(), b.shape())? {
        MatmulKind::Plain { m, k, n } => {
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, &mut c, n, 1, false);
            Tensor::new([m, n], c)
        }
        MatmulKind::SharedRight { batch, m, k, n } => {
            let mut c = vec![T::zero(); batch * m * n];
            T::gemm(batch * m, k, n, a.data(), k, 1, b.data(), n, 1, &mut c, n, 1, false);
            Tensor::new([batch, m, n], c)
        }
        MatmulKind::SharedLeft { batch, m, k, n } => {
            let mut c = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    a.data(),
                    k,
                    1,
                    &b.data()[s * k * n..(s + 1) * k * n],
                    n,
                    1,
                    &mut c[s * m * n..(s + 1) * m * n],
                    n,
                    1,
                    false,
                );
            }
            Tensor::new([batch, m, n], c)
        }
    }
}

/// Returns `(dA, dB)` for `C = A B`; each is computed only when requested.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let kind = matmul_kind(a.shape(), b.shape())?;
    let gc = grad_out.data();
    let (da, db) = match kind {
        MatmulKind::Plain { .. } | MatmulKind::SharedRight { .. } => {
            // a batched left operand is just a taller matrix
            let (rows, k, n) = match kind {
                MatmulKind::SharedRight { batch, m, k, n } => (batch * m, k, n),
                MatmulKind::Plain { m, k, n } => (m, k, n),
                MatmulKind::SharedLeft { .. } => unreachable!(),
            };
            if gc.len() != rows * n {
                return Err(Error::shape("matmul_backward", "gradient extent mismatch"));
            }
            let da = need_a.then(|| {
                // dA[rows,k] = dC[rows,n] * B^T[n,k]
                let mut da = vec![T::zero(); rows * k];
                T::gemm(rows, n, k, gc, n, 1, b.data(), 1, n, &mut da, k, 1, false);
                da
            });
            let db = need_b.then(|| {
                // dB[k,n] = A^T[k,rows] * dC[rows,n]
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, rows, n, a.data(), 1, k, gc, n, 1, &mut db, n, 1, false);
                db
            });
            (da, db)
        }
        MatmulKind::SharedLeft { batch, m, k, n } => {
            if gc.len() != batch * m * n {
                return Err(Error::shape("matmul_backward", "gradient extent mismatch"));
            }
            let da = need_a.then(|| {
                let mut da = vec![T::zero(); m * k];
                for s in 0..batch {
                    let bs = &b.data()[s * k * n..(s + 1) * k * n];
                    let gs = &gc[s * m * n..(s + 1) * m * n];
                    T::gemm(m, n, k, gs, n, 1, bs, 1, n, &mut da, k, 1, true);
                }
                da
            });
            let db = need_b.then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for s in 0..batch {
                    let gs = &gc[s * m * n..(s + 1) * m * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        1,
                        k,
                        gs,
                        n,
                        1,
                        &mut db[s * k * n..(s + 1) * k * n],
                        n,
                        1,
                        false,
                    );
                }
                db
            });
            (da, db)
        }
    };
    Ok((
        da.map(|d| Tensor::new(a.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
    ))
}

/// Source taps for one output coordinate of a half-pixel-centred upsample.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn upsample_taps<T: Element>(input: usize, scale: usize) -> Vec<Tap<T>> {
    let max = (input - 1) as f64;
    (0..input * scale)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: T::from_f64_lossy(src - lo as f64),
            }
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel-centre convention
/// with border clamping. `scale == 1` returns the input unchanged.
pub fn upsample_bilinear<T: Element>(input: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("bilinear_upsample")?;
    if scale == 0 {
        return Err(Error::shape("bilinear_upsample", "scale must be at least 1"));
    }
    if scale == 1 {
        return Ok(input.clone());
    }
    let (oh, ow) = (h * scale, w * scale);
    if h == 0 || w == 0 {
        return Ok(Tensor::zeros([n, c, oh, ow]));
    }
    let ys = upsample_taps::<T>(h, scale);
    let xs = upsample_taps::<T>(w, scale);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &plane[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &plane[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in xs.iter().enumerate() {
                let top = r0[tx.lo] * (T::one() - tx.frac) + r0[tx.hi] * tx.frac;
                let bot = r1[tx.lo] * (T::one() - tx.frac) + r1[tx.hi] * tx.frac;
                dst[oy * ow + ox] = top * (T::one() - ty.frac) + bot * ty.frac;
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn upsample_bilinear_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    scale: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("bilinear_upsample_backward", "expected 4-D input")),
    };
    if grad_out.shape() != [n, c, h * scale, w * scale] {
        return Err(Error::shape(
            "bilinear_upsample_backward",
            format!("gradient {:?} for input {:?}", grad_out.shape(), input_shape),
        ));
    }
    if scale == 1 {
        return Ok(grad_out.clone());
    }
    let (oh, ow) = (h * scale, w * scale);
    let ys = upsample_taps::<T>(h, scale);
    let xs = upsample_taps::<T>(w, scale);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (dst, g) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (T::one() - ty.frac);
                let bot = v * ty.frac;
                dst[ty.lo * w + tx.lo] += top * (T::one() - tx.frac);
                dst[ty.lo * w + tx.hi] += top * tx.frac;
                dst[ty.hi * w + tx.lo] += bot * (T::one() - tx.frac);
                dst[ty.hi * w + tx.hi] += bot * tx.frac;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c1, h, w) = a.dims4("concat_channels")?;
    let (n2, c2, h2, w2) = b.dims4("concat_channels")?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let (la, lb) = (c1 * h * w, c2 * h * w);
    let mut out = Vec::with_capacity(n * (la + lb));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        out.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    Tensor::new([n, c1 + c2, h, w], out)
}

/// Splits a concatenated gradient back into the two operand gradients.
pub fn split_channels<T: Element>(
    grad: &Tensor<T>,
    c1: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad.dims4("split_channels")?;
    if c1 > c {
        return Err(Error::shape("split_channels", "split point beyond channel count"));
    }
    let c2 = c - c1;
    let (la, lb) = (c1 * h * w, c2 * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for chunk in grad.data().chunks(la + lb) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    Ok((Tensor::new([n, c1, h, w], a)?, Tensor::new([n, c2, h, w], b)?))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid expressed through its output `y`: `g * y * (1 - y)`.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("same shape")
}

pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    x.map(|v| v * factor)
}

pub fn ensure_binary<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t
        .data()
        .iter()
        .all(|&v| v == T::zero() || v == T::one())
    {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{op}: mask values must be 0 or 1")))
    }
}

/// Mean binary cross-entropy on logits, in the stable form
/// `max(z,0) - z*m + ln(1 + exp(-|z|))`.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, masks: &Tensor<T>) -> Result<T> {
    if logits.shape() != masks.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("logits {:?} vs masks {:?}", logits.shape(), masks.shape()),
        ));
    }
    ensure_binary("bce_loss", masks)?;
    if logits.numel() == 0 {
        return Err(Error::shape("bce_loss", "empty input"));
    }
    let total = logits
        .data()
        .iter()
        .zip(masks.data())
        .fold(T::zero(), |acc, (&z, &m)| {
            acc + ((z.max(T::zero()) - z * m) + (-z.abs()).exp().ln_1p())
        });
    Ok(total / T::from_usize(logits.numel()).expect("count fits"))
}

/// Gradient of [`bce_with_logits`]: `(sigmoid(z) - m) / numel`.
pub fn bce_with_logits_backward<T: Element>(logits: &Tensor<T>, masks: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_usize(logits.numel()).expect("count fits");
    let data = logits
        .data()
        .iter()
        .zip(masks.data())
        .map(|(&z, &m)| (sigmoid_scalar(z) - m) * inv)
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_value_through() {
        let x = Tensor::<f32>::new([1, 1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::<f32>::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::<f32>::new([1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn strided_sum_of_ones() {
        let x = Tensor::<f32>::ones([1, 1, 4, 4]);
        let w = Tensor::<f32>::ones([1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros([1]);
        let y = conv2d(&x, &w, Some(&b), 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 2, 3, 3]);
        let msg = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_zero_stride() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
        assert!(conv2d(&x, &w, None, 1, 1).is_ok());
        assert!(conv2d(&x, &w, None, 0, 1).is_err());
    }

    #[test]
    fn matmul_small_product() {
        let a = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let eye = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::from_fn([3, 2], |i| i as f64 - 2.5);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn batched_matmul_matches_per_sample() {
        let a = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.7).cos());
        let b = Tensor::<f64>::from_fn([2, 4, 5], |i| (i as f64 * 0.3).sin());
        let c = matmul(&a, &b).unwrap();
        for s in 0..2 {
            let bs = Tensor::new([4, 5], b.data()[s * 20..(s + 1) * 20].to_vec()).unwrap();
            let cs = matmul(&a, &bs).unwrap();
            assert_eq!(&c.data()[s * 15..(s + 1) * 15], cs.data());
        }
        let r = Tensor::<f64>::from_fn([5, 3], |i| i as f64);
        let d = matmul(&c, &r).unwrap();
        assert_eq!(d.shape(), &[2, 3, 3]);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let x = Tensor::<f32>::full([1, 2, 3, 5], 3.7);
        let y = upsample_bilinear(&x, 4).unwrap();
        assert_eq!(y.shape(), &[1, 2, 12, 20]);
        assert!(y.data().iter().all(|&v| (v - 3.7).abs() < 1e-6));
        let z = Tensor::<f32>::from_fn([1, 1, 3, 3], |i| -(i as f32) * 0.0 - 1.5 * i as f32);
        let same = upsample_bilinear(&z, 1).unwrap();
        assert!(same
            .data()
            .iter()
            .zip(z.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn concat_with_empty_operand() {
        let a = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::zeros([2, 0, 2, 2]);
        assert_eq!(concat_channels(&a, &b).unwrap(), a);
        let c = Tensor::<f32>::zeros([2, 1, 3, 2]);
        assert!(concat_channels(&a, &c).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::<f64>::new([2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(add(&x, &Tensor::zeros([2])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros([3])).is_err());
        assert_eq!(scale(&x, 2.5).data(), &[-2.5, 5.0]);
    }

    #[test]
    fn bce_reference_values() {
        let z = Tensor::<f64>::zeros([1, 6, 4, 4]);
        let m = Tensor::<f64>::from_fn([1, 6, 4, 4], |i| (i % 2) as f64);
        let loss = bce_with_logits(&z, &m).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let z = Tensor::<f64>::full([3], 20.0);
        let m = Tensor::<f64>::ones([3]);
        let loss = bce_with_logits(&z, &m).unwrap();
        // ln(1 + e^-20)
        assert!((loss - 2.061153620314381e-9).abs() < 1e-22, "{loss}");

        let z = Tensor::<f64>::zeros([4]);
        let m = Tensor::<f64>::ones([4]);
        let g = bce_with_logits_backward(&z, &m);
        assert!(g.data().iter().all(|&v| v == -0.5 / 4.0));
    }

    #[test]
    fn bce_rejects_soft_masks() {
        let z = Tensor::<f64>::zeros([2]);
        let m = Tensor::<f64>::new([2], vec![0.5, 1.0]).unwrap();
        assert!(bce_with_logits(&z, &m).is_err());
    }
}
