//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function of tensors. The autograd tape in
//! [`crate::autograd`] records which kernel produced each value and calls the
//! matching `*_backward` function during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.out_hw()).max(1)).clamp(1, self.n)
    }
}

/// Output extent of a sliding window: `floor((len + 2 pad - k) / stride) + 1`.
pub fn window_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::arg("stride must be positive"));
    }
    if k == 0 {
        return Err(Error::arg("kernel extent must be positive"));
    }
    if len + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded input {len}+2*{pad}"
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

pub fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight
        .dims4()
        .map_err(|_| Error::shape(format!("conv weight must be [Cout,Cin,kH,kW], got {:?}", weight.shape())))?;
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv input has {cin} channels but weight expects {wcin}"
        )));
    }
    let oh = window_extent(h, kh, stride, padding)?;
    let ow = window_extent(w, kw, stride, padding)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad: padding,
        oh,
        ow,
    })
}

/// Unrolls images `n0..n0+nb` into a `[Cin*kH*kW, nb*oH*oW]` row-major matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, nb: usize, col: &mut [T]) {
    let hw = g.out_hw();
    let cols = nb * hw;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for i in 0..nb {
                    let img = &x[((n0 + i) * g.cin + c) * plane..][..plane];
                    for oy in 0..g.oh {
                        let dst = &mut dst_row[i * hw + oy * g.ow..][..g.ow];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &img[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into image gradients.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [T]) {
    let hw = g.out_hw();
    let cols = nb * hw;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for i in 0..nb {
                    let img = &mut dx[((n0 + i) * g.cin + c) * plane..][..plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[i * hw + oy * g.ow..][..g.ow];
                        let dst = &mut img[iy as usize * g.w..][..g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of an NCHW batch.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!(
                "conv bias must be [{}], got {:?}",
                g.cout,
                b.shape()
            )));
        }
    }
    let hw = g.out_hw();
    let patch = g.patch();
    let mut out = Tensor::zeros(&[g.n, g.cout, g.oh, g.ow])?;
    let x = input.data();
    let wt = weight.data();
    let chunk = g.chunk();
    let mut col = vec![T::zero(); patch * chunk * hw];
    let mut prod = vec![T::zero(); g.cout * chunk * hw];
    let y = out.data_mut();
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let cols = nb * hw;
        im2col(x, &g, n0, nb, &mut col[..patch * cols]);
        T::gemm(
            g.cout,
            patch,
            cols,
            T::one(),
            wt,
            (patch as isize, 1),
            &col[..patch * cols],
            (cols as isize, 1),
            T::zero(),
            &mut prod[..g.cout * cols],
            (cols as isize, 1),
        );
        for i in 0..nb {
            for co in 0..g.cout {
                let b = bias.map_or(T::zero(), |b| b.data()[co]);
                let src = &prod[co * cols + i * hw..][..hw];
                let dst = &mut y[((n0 + i) * g.cout + co) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        n0 += nb;
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(input, weight, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape("conv output gradient has the wrong shape"));
    }
    let hw = g.out_hw();
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dw = weight.zeros_like();
    let mut db = Tensor::zeros(&[g.cout])?;
    let mut dx = need_input.then(|| input.zeros_like());
    let mut col = vec![T::zero(); patch * chunk * hw];
    let mut dcol = if need_input {
        vec![T::zero(); patch * chunk * hw]
    } else {
        Vec::new()
    };
    let mut dy_mat = vec![T::zero(); g.cout * chunk * hw];
    let dy = grad_out.data();
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let cols = nb * hw;
        for i in 0..nb {
            for co in 0..g.cout {
                let src = &dy[((n0 + i) * g.cout + co) * hw..][..hw];
                dy_mat[co * cols + i * hw..][..hw].copy_from_slice(src);
                let s: T = src.iter().copied().sum();
                db.data_mut()[co] += s;
            }
        }
        im2col(input.data(), &g, n0, nb, &mut col[..patch * cols]);
        // dW += dY * col^T
        T::gemm(
            g.cout,
            cols,
            patch,
            T::one(),
            &dy_mat[..g.cout * cols],
            (cols as isize, 1),
            &col[..patch * cols],
            (1, cols as isize),
            T::one(),
            dw.data_mut(),
            (patch as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dY
            T::gemm(
                patch,
                g.cout,
                cols,
                T::one(),
                weight.data(),
                (1, patch as isize),
                &dy_mat[..g.cout * cols],
                (cols as isize, 1),
                T::zero(),
                &mut dcol[..patch * cols],
                (cols as isize, 1),
            );
            col2im(&dcol[..patch * cols], &g, n0, nb, dx.data_mut());
        }
        n0 += nb;
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Max pooling; padded cells never win. Returns the output and, per output
/// element, the flat input index of the selected maximum.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = window_extent(h, k, stride, padding)?;
    let ow = window_extent(w, k, stride, padding)?;
    if padding >= k {
        return Err(Error::arg(format!("maxpool padding {padding} must be smaller than kernel {k}")));
    }
    let mut out = Tensor::zeros(&[n, c, oh, ow])?;
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// Spatial mean of each channel: N×C×H×W → N×C×1×1.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::cast(hw as f64);
    let data = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hw: usize = input_shape[2] * input_shape[3];
    let inv = T::one() / T::cast(hw as f64);
    let mut dx = Tensor::zeros(input_shape)?;
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

#[inline]
fn logistic<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(logistic)
}

pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(output.data()) {
        *d *= s * (T::one() - s);
    }
    dx
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)
        .map_err(|_| Error::shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())))?;
    Ok(out)
}

fn check_scale_shapes<T: Scalar>(u: &Tensor<T>, s: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = u.dims4()?;
    let ok = match s.shape() {
        [sn, sc] => *sn == n && *sc == c,
        [sn, sc, 1, 1] => *sn == n && *sc == c,
        _ => false,
    };
    if !ok {
        return Err(Error::shape(format!(
            "scale_channels: weights {:?} do not match feature map {:?}",
            s.shape(),
            u.shape()
        )));
    }
    Ok((n, c, h * w))
}

/// `out[n,c,:,:] = s[n,c] * u[n,c,:,:]`; `s` is N×C (or N×C×1×1).
pub fn scale_channels<T: Scalar>(u: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, hw) = check_scale_shapes(u, s)?;
    let mut out = u.clone();
    for (plane, &scale) in out.data_mut().chunks_exact_mut(hw).zip(s.data()) {
        for v in plane {
            *v *= scale;
        }
    }
    Ok(out)
}

pub fn scale_channels_backward<T: Scalar>(
    u: &Tensor<T>,
    s: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, hw) = check_scale_shapes(u, s)?;
    let mut du = grad_out.clone();
    let mut ds = s.zeros_like();
    for (((dplane, uplane), &scale), dsv) in du
        .data_mut()
        .chunks_exact_mut(hw)
        .zip(u.data().chunks_exact(hw))
        .zip(s.data())
        .zip(ds.data_mut())
    {
        let mut acc = T::zero();
        for (d, &x) in dplane.iter_mut().zip(uplane) {
            acc += *d * x;
            *d *= scale;
        }
        *dsv = acc;
    }
    Ok((du, ds))
}

/// Stacks NCHW tensors along the channel axis, in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::arg("concat_channels needs at least one input"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for i in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[i * c * hw..(i + 1) * c * hw]);
        }
    }
    Tensor::new(&[n, total, h, w], data)
}

pub fn concat_channels_backward<T: Scalar>(
    widths: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let (n, total, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let mut grads: Vec<Vec<T>> = widths.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
    let d = grad_out.data();
    for i in 0..n {
        let mut offset = i * total * hw;
        for (g, &c) in grads.iter_mut().zip(widths) {
            g.extend_from_slice(&d[offset..offset + c * hw]);
            offset += c * hw;
        }
    }
    grads
        .into_iter()
        .zip(widths)
        .map(|(g, &c)| Tensor::new(&[n, c, h, w], g))
        .collect()
}

/// `y = x W^T + b` for `x: [N, Fin]`, `W: [Fout, Fin]`, `b: [Fout]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fin) = input.dims2()?;
    let (fout, wfin) = weight.dims2()?;
    if wfin != fin || bias.shape() != [fout] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout])?;
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        fin,
        fout,
        T::one(),
        input.data(),
        (fin as isize, 1),
        weight.data(),
        (1, fin as isize),
        T::one(),
        out.data_mut(),
        (fout as isize, 1),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fin) = input.dims2()?;
    let (fout, _) = weight.dims2()?;
    let mut dx = input.zeros_like();
    let mut dw = weight.zeros_like();
    let mut db = Tensor::zeros(&[fout])?;
    let dy = grad_out.data();
    // dX = dY W
    T::gemm(n, fout, fin, T::one(), dy, (fout as isize, 1), weight.data(), (fin as isize, 1), T::zero(), dx.data_mut(), (fin as isize, 1));
    // dW = dY^T X
    T::gemm(fout, n, fin, T::one(), dy, (1, fout as isize), input.data(), (fin as isize, 1), T::zero(), dw.data_mut(), (fin as isize, 1));
    for row in dy.chunks_exact(fout) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((dx, dw, db))
}

/// Batch-norm result in training mode, with what backward and the running
/// statistic update need.
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance (the one used to normalize).
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

fn check_bn_params<T: Scalar>(c: usize, tensors: &[&Tensor<T>]) -> Result<()> {
    for t in tensors {
        if t.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm parameter {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn batchnorm2d_train<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormTrain<T>> {
    let (n, c, h, w) = input.dims4()?;
    check_bn_params(c, &[scale, shift])?;
    let hw = h * w;
    let count = n * hw;
    let inv_count = 1.0 / count as f64;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            s += x[(i * c + ch) * hw..][..hw].iter().map(|v| v.widen()).sum::<f64>();
        }
        let m = s * inv_count;
        let mut sq = 0.0f64;
        for i in 0..n {
            sq += x[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|v| {
                    let d = v.widen() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = T::cast(m);
        var[ch] = T::cast(sq * inv_count);
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::cast(1.0 / (v.widen() + eps).sqrt()))
        .collect();
    let mut normalized = input.zeros_like();
    let mut output = input.zeros_like();
    {
        let xh = normalized.data_mut();
        let y = output.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                let (m, is, g, b) = (mean[ch], inv_std[ch], scale.data()[ch], shift.data()[ch]);
                for j in off..off + hw {
                    let v = (x[j] - m) * is;
                    xh[j] = v;
                    y[j] = g * v + b;
                }
            }
        }
    }
    Ok(BatchNormTrain {
        output,
        normalized,
        inv_std,
        mean,
        var,
        count,
    })
}

/// Gradients of training-mode batch norm with respect to input, scale, and shift.
pub fn batchnorm2d_train_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = normalized.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = normalized.data();
    let mut dscale = vec![0.0f64; c];
    let mut dshift = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dshift[ch] += dy[j].widen();
                dscale[ch] += (dy[j] * xh[j]).widen();
            }
        }
    }
    let mut dx = normalized.zeros_like();
    let d = dx.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let k = scale.data()[ch] * inv_std[ch] / T::cast(m);
            let sb = T::cast(dshift[ch]);
            let sg = T::cast(dscale[ch]);
            let mm = T::cast(m);
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                d[j] = k * (mm * dy[j] - sb - xh[j] * sg);
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::cast).collect());
    Ok((dx, to_t(dscale)?, to_t(dshift)?))
}

/// Eval-mode batch norm using stored statistics; returns output and the
/// normalized input (needed for the scale gradient).
pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = input.dims4()?;
    check_bn_params(c, &[scale, shift, running_mean, running_var])?;
    let hw = h * w;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::cast(1.0 / (v.widen() + eps).sqrt()))
        .collect();
    let mut normalized = input.zeros_like();
    let mut output = input.zeros_like();
    let x = input.data();
    let xh = normalized.data_mut();
    let y = output.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (m, is, g, b) = (
                running_mean.data()[ch],
                inv_std[ch],
                scale.data()[ch],
                shift.data()[ch],
            );
            for j in off..off + hw {
                let v = (x[j] - m) * is;
                xh[j] = v;
                y[j] = g * v + b;
            }
        }
    }
    Ok((output, normalized, inv_std))
}

pub fn batchnorm2d_eval_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = normalized.dims4()?;
    let hw = h * w;
    let mut dx = grad_out.clone();
    let mut dscale = Tensor::zeros(&[c])?;
    let mut dshift = Tensor::zeros(&[c])?;
    let xh = normalized.data();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let k = scale.data()[ch] * inv_std[ch];
            for j in off..off + hw {
                let g = dx.data()[j];
                dshift.data_mut()[ch] += g;
                dscale.data_mut()[ch] += g * xh[j];
                dx.data_mut()[j] = g * k;
            }
        }
    }
    Ok((dx, dscale, dshift))
}

/// Row-wise softmax of `[N, K]` logits, computed with the max-shift trick.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::arg(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Mean negative log-likelihood; also returns the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    check_labels(n, k, labels)?;
    let probs = softmax(logits)?;
    let mut total = 0.0f64;
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        // -log p_l = logsumexp(x) - x_l
        let max = row.iter().copied().fold(T::neg_infinity(), T::max).widen();
        let lse = row.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[l].widen();
    }
    Ok((T::cast(total / n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Result<Tensor<T>> {
    let (n, k) = probs.dims2()?;
    check_labels(n, k, labels)?;
    let scale = grad_loss / T::cast(n as f64);
    let mut dx = probs.clone();
    for (row, &l) in dx.data_mut().chunks_exact_mut(k).zip(labels) {
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(dx)
}
