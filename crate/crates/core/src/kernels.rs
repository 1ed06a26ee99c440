//! Raw numeric kernels behind the differentiable ops: im2col convolution,
//! nearest upsampling, pooling and batch normalization.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the full strided extents
    // (checked by the debug asserts below).
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    let s = g.stride as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ky as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kx as isize;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    let s = g.stride as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize * s - pad + kx as isize;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, zero padding. `x: [n, cin, h, w]`, `weight: [cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
    let (n, cin, h, w) = x.dims4();
    let (cout, wcin, k, k2) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
    assert_eq!(k, k2, "only square kernels are supported");
    let g = ConvGeometry { in_channels: cin, height: h, width: w, kernel: k, stride, padding };
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let kdim = g.col_rows();
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    let in_len = cin * h * w;
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(p).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(cout, kdim, p, weight.data(), (kdim as isize, 1), src, (p as isize, 1), beta, ob);
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Gradients of [`conv2d`]; each output is computed only when requested.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (n, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let g = ConvGeometry { in_channels: cin, height: h, width: w, kernel: k, stride, padding };
    let p = g.out_height() * g.out_width();
    let kdim = g.col_rows();
    let in_len = cin * h * w;
    let mut dx = need_input.then(|| vec![0.0; n * in_len]);
    let mut dw = need_weight.then(|| vec![0.0; cout * kdim]);
    let mut db = need_bias.then(|| vec![0.0; cout]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kdim * p }];
    let mut dcols = vec![0.0; if need_input && !g.is_pointwise() { kdim * p } else { 0 }];
    for b in 0..n {
        let gb = &grad_out.data()[b * cout * p..(b + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gb.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            // dW[cout, kdim] += G[cout, p] * cols^T[p, kdim]
            gemm(cout, p, kdim, gb, (p as isize, 1), src, (1, p as isize), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(kdim, cout, p, weight.data(), (1, kdim as isize), gb, (p as isize, 1), 1.0, dxb);
            } else {
                // dcols[kdim, p] = W^T[kdim, cout] * G[cout, p]
                gemm(kdim, cout, p, weight.data(), (1, kdim as isize), gb, (p as isize, 1), 0.0, &mut dcols);
                col2im(&dcols, &g, dxb);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::new(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::new(vec![cout], d)),
    }
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Tensor {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for (src, plane) in grad_out.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for y in 0..oh {
            for xo in 0..ow {
                plane[(y / 2) * w + xo / 2] += src[y * ow + xo];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xo in 0..ow {
                let i = 2 * y * w + 2 * xo;
                dst[y * ow + xo] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let (n, c, oh, ow) = grad_out.dims4();
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut dx = vec![0.0; n * c * h * w];
    for (src, plane) in grad_out.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for y in 0..oh {
            for xo in 0..ow {
                let g = 0.25 * src[y * ow + xo];
                let i = 2 * y * w + 2 * xo;
                plane[i] += g;
                plane[i + 1] += g;
                plane[i + w] += g;
                plane[i + w + 1] += g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Saved statistics of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Batch normalization over (N, H, W) per channel using batch statistics.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, BatchNormCache) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            mean += x.data()[off..off + hw].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            var += x.data()[off..off + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= m;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x.data()[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), out),
        BatchNormCache { xhat: Tensor::new(shape, xhat), inv_std },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(grad_out: &Tensor, gamma: &Tensor, cache: &BatchNormCache) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = grad_out.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let xhat = cache.xhat.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), dx),
        Tensor::new(vec![c], dgamma),
        Tensor::new(vec![c], dbeta),
    )
}

/// `y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (b, inp) = (x.shape()[0], x.shape()[1]);
    let out = weight.shape()[0];
    assert_eq!(weight.shape()[1], inp, "linear input width mismatch");
    let mut y = vec![0.0; b * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias.data());
    }
    gemm(b, inp, out, x.data(), (inp as isize, 1), weight.data(), (1, inp as isize), 1.0, &mut y);
    Tensor::new(vec![b, out], y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, inp) = (x.shape()[0], x.shape()[1]);
    let out = weight.shape()[0];
    let mut dx = vec![0.0; b * inp];
    gemm(b, out, inp, grad_out.data(), (out as isize, 1), weight.data(), (inp as isize, 1), 0.0, &mut dx);
    let mut dw = vec![0.0; out * inp];
    gemm(out, b, inp, grad_out.data(), (1, out as isize), x.data(), (inp as isize, 1), 0.0, &mut dw);
    let mut db = vec![0.0; out];
    for row in grad_out.data().chunks(out) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (
        Tensor::new(vec![b, inp], dx),
        Tensor::new(vec![out, inp], dw),
        Tensor::new(vec![out], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect())
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = ramp(&[2, 3, 7, 6], 1.0);
            let w = ramp(&[4, 3, k, k], 0.7);
            let got = conv2d(&x, &w, None, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_halves_and_averages() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(avg_pool2(&x).data(), &[3.0]);
        let up = upsample_nearest2x(&x);
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert_eq!(up.data()[0..4], [1.0, 1.0, 2.0, 2.0]);
    }
}
