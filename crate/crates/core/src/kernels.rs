//! Raw convolution kernels: im2col lowering onto a dense GEMM.
//!
//! Weight layouts follow the usual conventions: `[K, C, kh, kw]` for
//! convolution and `[C_in, C_out, kh, kw]` for transposed convolution, so a
//! transposed convolution with weight `w` is the adjoint of a convolution with
//! the same `w`.

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index addressed through the
    // given strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of one convolution, seen from its (dense) input side.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(op: &'static str, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape(op, "stride must be at least 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `x`.
fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn lowered<'a>(x: &'a [f64], g: &ConvGeom) -> std::borrow::Cow<'a, [f64]> {
    if g.is_pointwise() {
        std::borrow::Cow::Borrowed(x)
    } else {
        let mut col = vec![0.0; g.rows() * g.cols()];
        im2col(x, g, &mut col);
        std::borrow::Cow::Owned(col)
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, k: usize) -> Result<()> {
    match bias {
        Some(b) if b.numel() != k => Err(Error::shape(op, format!("bias has {} entries, expected {k}", b.numel()))),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(gy: &[f64], n: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; k];
    for item in 0..n {
        for (kk, d) in db.iter_mut().enumerate() {
            let off = (item * k + kk) * plane;
            *d += gy[off..off + plane].iter().sum::<f64>();
        }
    }
    db
}

/// Shape-checks a convolution and returns `(n, geometry, out_channels)`.
pub(crate) fn conv2d_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, ConvGeom, usize)> {
    let [n, c, h, wd] = x.dims4()?;
    let [k, wc, kh, kw] = w.dims4()?;
    if wc != c {
        return Err(Error::shape("conv2d", format!("input has {c} channels, weight expects {wc}")));
    }
    Ok((n, ConvGeom::new("conv2d", c, h, wd, kh, kw, stride, pad)?, k))
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, g, k) = conv2d_geom(x, w, stride, pad)?;
    check_bias("conv2d", bias, k)?;
    let in_len = g.c * g.h * g.w;
    let plane = g.cols();
    let items = map_indexed(n, |item| {
        let col = lowered(&x.data()[item * in_len..(item + 1) * in_len], &g);
        let mut out = vec![0.0; k * plane];
        gemm(false, false, k, plane, g.rows(), 1.0, w.data(), &col, 0.0, &mut out);
        add_bias(&mut out, bias, plane);
        out
    });
    Tensor::new([n, k, g.oh, g.ow], items.concat())
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of a convolution given the output cotangent `gy`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize, need_input: bool) -> Result<ConvGrads> {
    let (n, g, k) = conv2d_geom(x, w, stride, pad)?;
    let in_len = g.c * g.h * g.w;
    let plane = g.cols();
    let rows = g.rows();
    if gy.shape() != [n, k, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", format!("cotangent {:?}", gy.shape())));
    }
    let items = map_indexed(n, |item| {
        let col = lowered(&x.data()[item * in_len..(item + 1) * in_len], &g);
        let gy_n = &gy.data()[item * k * plane..(item + 1) * k * plane];
        let mut dw = vec![0.0; k * rows];
        gemm(false, true, k, rows, plane, 1.0, gy_n, &col, 0.0, &mut dw);
        let dx = need_input.then(|| {
            let mut dcol = vec![0.0; rows * plane];
            gemm(true, false, rows, plane, k, 1.0, w.data(), gy_n, 0.0, &mut dcol);
            if g.is_pointwise() {
                dcol
            } else {
                let mut dx = vec![0.0; in_len];
                col2im(&dcol, &g, &mut dx);
                dx
            }
        });
        (dx, dw)
    });
    let mut dw = vec![0.0; k * rows];
    let mut dx = Vec::with_capacity(if need_input { n * in_len } else { 0 });
    for (dx_n, dw_n) in items {
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a += b);
        if let Some(d) = dx_n {
            dx.extend_from_slice(&d);
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None },
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new([k], bias_grad(gy.data(), n, k, plane))?,
    })
}

/// Geometry of a transposed convolution: the returned `ConvGeom` describes the
/// forward convolution from the (larger) output back to the input.
pub(crate) fn conv_transpose2d_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let [n, c, h, wd] = x.dims4()?;
    let [wc, k, kh, kw] = w.dims4()?;
    if wc != c {
        return Err(Error::shape("conv2d_transposed", format!("input has {c} channels, weight expects {wc}")));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d_transposed", "stride must be at least 1"));
    }
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape("conv2d_transposed", format!("padding {pad} consumes the whole output")));
    }
    let g = ConvGeom::new("conv2d_transposed", k, full_h - 2 * pad, full_w - 2 * pad, kh, kw, stride, pad)?;
    if g.oh != h || g.ow != wd {
        return Err(Error::shape("conv2d_transposed", "geometry is not invertible"));
    }
    Ok((n, g))
}

pub fn conv_transpose2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, g) = conv_transpose2d_geom(x, w, stride, pad)?;
    let cin = x.shape()[1];
    check_bias("conv2d_transposed", bias, g.c)?;
    let in_len = cin * g.oh * g.ow;
    let out_len = g.c * g.h * g.w;
    let items = map_indexed(n, |item| {
        let x_n = &x.data()[item * in_len..(item + 1) * in_len];
        let mut col = vec![0.0; g.rows() * g.cols()];
        gemm(true, false, g.rows(), g.cols(), cin, 1.0, w.data(), x_n, 0.0, &mut col);
        let mut out = vec![0.0; out_len];
        if g.is_pointwise() {
            out.copy_from_slice(&col);
        } else {
            col2im(&col, &g, &mut out);
        }
        add_bias(&mut out, bias, g.h * g.w);
        out
    });
    Tensor::new([n, g.c, g.h, g.w], items.concat())
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let (n, g) = conv_transpose2d_geom(x, w, stride, pad)?;
    let cin = x.shape()[1];
    if gy.shape() != [n, g.c, g.h, g.w] {
        return Err(Error::shape("conv2d_transposed_backward", format!("cotangent {:?}", gy.shape())));
    }
    let in_len = cin * g.oh * g.ow;
    let out_len = g.c * g.h * g.w;
    let rows = g.rows();
    let items = map_indexed(n, |item| {
        let col = lowered(&gy.data()[item * out_len..(item + 1) * out_len], &g);
        let x_n = &x.data()[item * in_len..(item + 1) * in_len];
        let mut dw = vec![0.0; cin * rows];
        gemm(false, true, cin, rows, g.cols(), 1.0, x_n, &col, 0.0, &mut dw);
        let dx = need_input.then(|| {
            let mut dx = vec![0.0; in_len];
            gemm(false, false, cin, g.cols(), rows, 1.0, w.data(), &col, 0.0, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut dw = vec![0.0; cin * rows];
    let mut dx = Vec::new();
    for (dx_n, dw_n) in items {
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a += b);
        if let Some(d) = dx_n {
            dx.extend_from_slice(&d);
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(x.shape().to_vec(), dx)?) } else { None },
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new([g.c], bias_grad(gy.data(), n, g.c, g.h * g.w))?,
    })
}
