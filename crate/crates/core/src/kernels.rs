//! Forward and backward kernels for the fixed layer vocabulary.
//!
//! Layout conventions: feature maps are `[N, C, H, W]`, dense activations are
//! `[N, F]`, convolution weights are `[O, C, KH, KW]` and linear weights are
//! `[O, F]`. Every reduction walks its operands in a fixed order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return Err(Error::InvalidArgument(format!(
                "window {}x{} (pad {}) larger than input {}x{}",
                self.kh, self.kw, self.pad, h, w
            )));
        }
        Ok((
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }
}

fn dims4(t: &Tensor<impl Scalar>, ctx: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape {
            context: format!("{ctx}: expected rank-4 input"),
            expected: vec![0, 0, 0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: &Window,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= h {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        *o = if ix < 0 || ix as usize >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: &Window,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let d = &mut dxc[iy as usize * w + ix as usize];
                        *d = *d + src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_conv(
    x: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    win: &Window,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = dims4(x, "conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != win.kh || ws[3] != win.kw {
        return Err(Error::shape(
            "conv2d weight",
            &[ws.first().copied().unwrap_or(0), c, win.kh, win.kw],
            ws,
        ));
    }
    let (ho, wo) = win.output_hw(h, w)?;
    Ok((n, c, h, w, ws[0], ho, wo))
}

/// Direct convolution through im2col and a GEMM per sample.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: &Window,
) -> Result<Tensor<T>> {
    let (n, c, h, w, o, ho, wo) = check_conv(x, weight, win)?;
    let k = c * win.kh * win.kw;
    let plane = ho * wo;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let mut cols = vec![T::zero(); k * plane];
    let xs = x.data();
    let wd = weight.data();
    for ni in 0..n {
        im2col(
            &xs[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            win,
            ho,
            wo,
            &mut cols,
        );
        let dst = &mut out.data_mut()[ni * o * plane..(ni + 1) * o * plane];
        if let Some(b) = bias {
            for (oi, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oi]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            k,
            plane,
            T::one(),
            wd,
            k as isize,
            1,
            &cols,
            plane as isize,
            1,
            beta,
            dst,
            plane as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of a convolution. Returns `(dx, dweight, dbias)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    win: &Window,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, o, ho, wo) = check_conv(x, weight, win)?;
    if dy.shape() != [n, o, ho, wo] {
        return Err(Error::shape("conv2d dy", &[n, o, ho, wo], dy.shape()));
    }
    let k = c * win.kh * win.kw;
    let plane = ho * wo;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = if need_dx {
        Some(Tensor::zeros(x.shape()))
    } else {
        None
    };
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    for ni in 0..n {
        let dyn_ = &dy.data()[ni * o * plane..(ni + 1) * o * plane];
        for (oi, chunk) in dyn_.chunks(plane).enumerate() {
            let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[oi] = db.data()[oi] + s;
        }
        im2col(
            &x.data()[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            win,
            ho,
            wo,
            &mut cols,
        );
        // dW[o, k] += dY[o, p] * cols[k, p]^T
        T::gemm(
            o,
            plane,
            k,
            T::one(),
            dyn_,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[k, p] = W[o, k]^T * dY[o, p]
            T::gemm(
                k,
                o,
                plane,
                T::one(),
                weight.data(),
                1,
                k as isize,
                dyn_,
                plane as isize,
                1,
                T::zero(),
                &mut dcols,
                plane as isize,
                1,
            );
            col2im(
                &dcols,
                c,
                h,
                w,
                win,
                ho,
                wo,
                &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w],
            );
        }
    }
    Ok((dx, dw, db))
}

/// Input gradient of a convolution only (transposed convolution of `dy`).
pub fn conv2d_backward_input<T: Scalar>(
    x_shape: &[usize],
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    win: &Window,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *x_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("conv2d input", &[0, 0, 0, 0], x_shape)),
    };
    let o = weight.shape()[0];
    let (ho, wo) = win.output_hw(h, w)?;
    let k = c * win.kh * win.kw;
    let plane = ho * wo;
    let mut dx = Tensor::zeros(x_shape);
    let mut dcols = vec![T::zero(); k * plane];
    for ni in 0..n {
        let dyn_ = &dy.data()[ni * o * plane..(ni + 1) * o * plane];
        T::gemm(
            k,
            o,
            plane,
            T::one(),
            weight.data(),
            1,
            k as isize,
            dyn_,
            plane as isize,
            1,
            T::zero(),
            &mut dcols,
            plane as isize,
            1,
        );
        col2im(
            &dcols,
            c,
            h,
            w,
            win,
            ho,
            wo,
            &mut dx.data_mut()[ni * c * h * w..(ni + 1) * c * h * w],
        );
    }
    Ok(dx)
}

/// `y = x @ W^T + b` for `x: [N, F]`, `W: [O, F]`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = x.dim0();
    let f = x.row_len();
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != f {
        return Err(Error::shape(
            "linear weight",
            &[ws.first().copied().unwrap_or(0), f],
            ws,
        ));
    }
    let o = ws[0];
    let mut out = Tensor::zeros(&[n, o]);
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        n,
        f,
        o,
        T::one(),
        x.data(),
        f as isize,
        1,
        weight.data(),
        1,
        f as isize,
        beta,
        out.data_mut(),
        o as isize,
        1,
    );
    Ok(out)
}

/// Returns `(dx, dweight, dbias)` for a linear layer.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let n = x.dim0();
    let f = x.row_len();
    let o = weight.shape()[0];
    if dy.shape() != [n, o] {
        return Err(Error::shape("linear dy", &[n, o], dy.shape()));
    }
    let mut dw = Tensor::zeros(weight.shape());
    T::gemm(
        o,
        n,
        f,
        T::one(),
        dy.data(),
        1,
        o as isize,
        x.data(),
        f as isize,
        1,
        T::zero(),
        dw.data_mut(),
        f as isize,
        1,
    );
    let mut db = Tensor::zeros(&[o]);
    for row in dy.data().chunks(o) {
        for (d, &v) in db.data_mut().iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    let dx = if need_dx {
        Some(linear_backward_input(x.shape(), weight, dy))
    } else {
        None
    };
    Ok((dx, dw, db))
}

pub fn linear_backward_input<T: Scalar>(
    x_shape: &[usize],
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let n = x_shape[0];
    let f: usize = x_shape[1..].iter().product();
    let o = weight.shape()[0];
    let mut dx = Tensor::zeros(x_shape);
    T::gemm(
        n,
        o,
        f,
        T::one(),
        dy.data(),
        o as isize,
        1,
        weight.data(),
        f as isize,
        1,
        T::zero(),
        dx.data_mut(),
        f as isize,
        1,
    );
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `dy` by `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Max pooling without padding. Returns the output and the flat argmax index of every output element.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = dims4(x, "maxpool2d")?;
    let win = Window {
        kh: size,
        kw: size,
        stride,
        pad: 0,
    };
    let (ho, wo) = win.output_hw(h, w)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xs = x.data();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ki in 0..size {
                    for kj in 0..size {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                }
                out.data_mut()[o] = xs[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&a, &g) in argmax.iter().zip(dy.data()) {
        let d = &mut dx.data_mut()[a as usize];
        *d = *d + g;
    }
    dx
}

/// Per-channel statistics cached by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape("batchnorm input", &[0, 0, 0, 0], shape)),
    }
}

/// Visits every element of channel `ci` in `(n, spatial)` order.
fn for_channel(n: usize, c: usize, hw: usize, ci: usize, mut f: impl FnMut(usize)) {
    for ni in 0..n {
        let base = (ni * c + ci) * hw;
        for i in base..base + hw {
            f(i);
        }
    }
}

/// Training-mode batch norm using biased batch variance.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let count = T::from_usize(n * hw).unwrap();
    let xs = x.data();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    let mut inv_stds = Vec::with_capacity(c);
    for ci in 0..c {
        let mut s = T::zero();
        for_channel(n, c, hw, ci, |i| s = s + xs[i]);
        let mean = s / count;
        let mut v = T::zero();
        for_channel(n, c, hw, ci, |i| {
            let d = xs[i] - mean;
            v = v + d * d;
        });
        let var = v / count;
        let inv_std = T::one() / (var + eps).sqrt();
        {
            let xh = xhat.data_mut();
            for_channel(n, c, hw, ci, |i| xh[i] = (xs[i] - mean) * inv_std);
        }
        {
            let xh = xhat.data();
            let yd = y.data_mut();
            for_channel(n, c, hw, ci, |i| yd[i] = gamma[ci] * xh[i] + beta[ci]);
        }
        means.push(mean);
        vars.push(var);
        inv_stds.push(inv_std);
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std: inv_stds,
            mean: means,
            var: vars,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = channel_layout(dy.shape()).expect("shape validated in forward");
    let count = T::from_usize(n * hw).unwrap();
    let xh = cache.xhat.data();
    let dys = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sdy = T::zero();
        let mut sdyx = T::zero();
        for_channel(n, c, hw, ci, |i| {
            sdy = sdy + dys[i];
            sdyx = sdyx + dys[i] * xh[i];
        });
        dgamma[ci] = sdyx;
        dbeta[ci] = sdy;
        // with a = gamma * dy: dx = (a - mean(a) - xhat * mean(a * xhat)) / sigma
        let m1 = gamma[ci] * sdy / count;
        let m2 = gamma[ci] * sdyx / count;
        let k = cache.inv_std[ci];
        let dxd = dx.data_mut();
        for_channel(n, c, hw, ci, |i| {
            dxd[i] = (gamma[ci] * dys[i] - m1 - xh[i] * m2) * k
        });
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch norm: a fixed per-channel affine map.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let xs = x.data();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for ci in 0..c {
        let inv = T::one() / (running_var[ci] + eps).sqrt();
        let xh = xhat.data_mut();
        for_channel(n, c, hw, ci, |i| xh[i] = (xs[i] - running_mean[ci]) * inv);
        let xh = xhat.data();
        let yd = y.data_mut();
        for_channel(n, c, hw, ci, |i| yd[i] = gamma[ci] * xh[i] + beta[ci]);
    }
    Ok((y, xhat))
}

pub fn batchnorm_eval_backward<T: Scalar>(
    xhat: &Tensor<T>,
    gamma: &[T],
    running_var: &[T],
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = channel_layout(dy.shape()).expect("shape validated in forward");
    let xh = xhat.data();
    let dys = dy.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let k = gamma[ci] / (running_var[ci] + eps).sqrt();
        let mut sdy = T::zero();
        let mut sdyx = T::zero();
        let dxd = dx.data_mut();
        for_channel(n, c, hw, ci, |i| {
            sdy = sdy + dys[i];
            sdyx = sdyx + dys[i] * xh[i];
            dxd[i] = dys[i] * k;
        });
        dgamma[ci] = sdyx;
        dbeta[ci] = sdy;
    }
    (dx, dgamma, dbeta)
}

/// Multiplies channel `c` of `x` by `z[c]`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, z: &[T]) -> Result<Tensor<T>> {
    let (n, c, hw) = channel_layout(x.shape())?;
    if z.len() != c {
        return Err(Error::shape("gate", &[c], &[z.len()]));
    }
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for v in &mut y.data_mut()[base..base + hw] {
                *v = *v * z[ci];
            }
        }
    }
    Ok(y)
}

/// Per-sample, per-channel sums of `a * b`, shape `[N, C]`.
pub fn channel_dot_per_sample<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (n, c, hw) = channel_layout(a.shape()).expect("validated by caller");
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut s = T::zero();
            for i in base..base + hw {
                s = s + ad[i] * bd[i];
            }
            out[ni * c + ci] = s;
        }
    }
    out
}

/// Sums `[N, C]` rows over `N` in order.
pub fn sum_over_batch<T: Scalar>(per_sample: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for row in per_sample.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

/// Global average pooling `[N, C, H, W] -> [N, C]`.
pub fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut y = Tensor::zeros(&[n, c]);
    for (o, chunk) in y.data_mut().iter_mut().zip(x.data().chunks(hw)) {
        *o = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv;
    }
    Ok(y)
}

pub fn gap_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(x_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// Adds `src` into `dst`, routing source channel `j` to destination channel `map[j]`.
pub fn add_mapped<T: Scalar>(
    dst: &mut Tensor<T>,
    src: &Tensor<T>,
    map: Option<&[usize]>,
) -> Result<()> {
    match map {
        None => {
            if dst.shape() != src.shape() {
                return Err(Error::shape("add", dst.shape(), src.shape()));
            }
            dst.add_assign(src);
        }
        Some(map) => {
            let (n, cd, hw) = channel_layout(dst.shape())?;
            let (_, cs, _) = channel_layout(src.shape())?;
            if map.len() != cs || map.iter().any(|&m| m >= cd) {
                return Err(Error::Graph("add channel map out of range".into()));
            }
            for ni in 0..n {
                for (j, &m) in map.iter().enumerate() {
                    let s = &src.data()[(ni * cs + j) * hw..(ni * cs + j + 1) * hw];
                    let d = &mut dst.data_mut()[(ni * cd + m) * hw..(ni * cd + m + 1) * hw];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Inverse routing of [`add_mapped`]: picks the mapped channels of `dy`.
pub fn gather_channels<T: Scalar>(
    dy: &Tensor<T>,
    map: Option<&[usize]>,
    src_channels: usize,
) -> Tensor<T> {
    match map {
        None => dy.clone(),
        Some(map) => {
            let (n, cd, hw) = channel_layout(dy.shape()).expect("validated in forward");
            let mut shape = dy.shape().to_vec();
            shape[1] = src_channels;
            let mut out = Tensor::zeros(&shape);
            for ni in 0..n {
                for (j, &m) in map.iter().enumerate() {
                    out.data_mut()[(ni * src_channels + j) * hw..(ni * src_channels + j + 1) * hw]
                        .copy_from_slice(&dy.data()[(ni * cd + m) * hw..(ni * cd + m + 1) * hw]);
                }
            }
            out
        }
    }
}

/// Mean softmax cross-entropy. Returns `(loss, probabilities)`.
pub fn softmax_xent_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let n = logits.dim0();
    let c = logits.row_len();
    if labels.len() != n {
        return Err(Error::shape("labels", &[n], &[labels.len()]));
    }
    let mut probs = Tensor::zeros(&[n, c]);
    let mut total = T::zero();
    for (i, (row, prow)) in logits
        .data()
        .chunks(c)
        .zip(probs.data_mut().chunks_mut(c))
        .enumerate()
    {
        if labels[i] >= c {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                labels[i], c
            )));
        }
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut s = T::zero();
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - m).exp();
            s = s + *p;
        }
        for p in prow.iter_mut() {
            *p = *p / s;
        }
        total = total + (s.ln() + m - row[labels[i]]);
    }
    Ok((total / T::from_usize(n).unwrap(), probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let n = probs.dim0();
    let c = probs.row_len();
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut d = probs.clone();
    for (i, row) in d.data_mut().chunks_mut(c).enumerate() {
        row[labels[i]] = row[labels[i]] - T::one();
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
    d
}

/// Per-sample cross-entropy losses.
pub fn softmax_xent_per_sample<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Vec<T> {
    let c = probs.row_len();
    probs
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| -row[l].ln())
        .collect()
}
