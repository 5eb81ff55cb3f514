//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

/// Per-axis bilinear taps for resizing by `factor` with half-pixel centres
/// and clamped borders.
fn resize_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<'g> Var<'g> {
    fn unary(
        self,
        op: &str,
        value: Tensor,
        back: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Result<Var<'g>> {
        self.graph().apply(op, &[self], value, Box::new(move |g, _| Ok(vec![Some(back(g)?)])))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip(&a, &b, |x, y| x + y);
        self.graph().apply("add", &[self, other], out, Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip(&a, &b, |x, y| x - y);
        self.graph().apply("sub", &[self, other], out, Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip(&a, &b, |x, y| x * y);
        self.graph().apply(
            "mul",
            &[self, other],
            out,
            Box::new(move |g, need| {
                Ok(vec![
                    need[0].then(|| zip(g, &b, |g, y| g * y)),
                    need[1].then(|| zip(g, &a, |g, x| g * x)),
                ])
            }),
        )
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let out = zip(&a, &b, |x, y| x / y);
        self.graph().apply(
            "div",
            &[self, other],
            out,
            Box::new(move |g, need| {
                let gb = need[1].then(|| {
                    let t = zip(g, &a, |g, x| g * x);
                    zip(&t, &b, |t, y| -t / (y * y))
                });
                Ok(vec![need[0].then(|| zip(g, &b, |g, y| g / y)), gb])
            }),
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        let out = self.value().map(|v| v * s);
        self.unary("scale", out, move |g| Ok(g.map(|v| v * s)))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        let out = self.value().map(|v| v + s);
        self.unary("add_scalar", out, |g| Ok(g.clone()))
    }

    pub fn square(self) -> Result<Var<'g>> {
        let a = self.value();
        let out = a.map(|v| v * v);
        self.unary("square", out, move |g| Ok(zip(g, &a, |g, x| 2.0 * x * g)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'g>> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let out = Tensor::scalar(a.data().iter().sum());
        self.unary("sum", out, move |g| Ok(Tensor::full(shape.clone(), g.item())))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Elementwise `(x^2 + eps^2)^alpha`.
    pub fn charbonnier(self, epsilon: f64, alpha: f64) -> Result<Var<'g>> {
        let a = self.value();
        let e2 = epsilon * epsilon;
        let out = a.map(|x| (x * x + e2).powf(alpha));
        self.unary("charbonnier", out, move |g| {
            Ok(zip(g, &a, |g, x| g * 2.0 * alpha * x * (x * x + e2).powf(alpha - 1.0)))
        })
    }

    /// Elementwise `max(x, slope * x)` for `slope` in `[0, 1)`.
    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::config("activation_slope", format!("{slope} is outside [0, 1)")));
        }
        let a = self.value();
        let out = a.map(|x| if x > 0.0 { x } else { slope * x });
        self.unary("leaky_relu", out, move |g| Ok(zip(g, &a, |g, x| if x > 0.0 { g } else { slope * g })))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let a = self.value();
        let from = a.shape().to_vec();
        let out = (*a).clone().reshape(shape)?;
        self.unary("reshape", out, move |g| g.clone().reshape(from.clone()))
    }

    /// 2-D convolution with zero padding. `weight` is `[K, C, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&x, &w, b.as_deref(), stride, padding)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph().apply(
            "conv2d",
            &inputs,
            out,
            Box::new(move |g, need| {
                let grads = kernels::conv2d_backward(&x, &w, g, stride, padding, need[0])?;
                let mut v = vec![grads.input, need[1].then_some(grads.weight)];
                if need.len() > 2 {
                    v.push(Some(grads.bias));
                }
                Ok(v)
            }),
        )
    }

    /// Transposed convolution; `weight` is `[C_in, C_out, kh, kw]`.
    pub fn conv2d_transposed(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Result<Var<'g>> {
        if !(1..=2).contains(&stride) {
            return Err(Error::shape("conv2d_transposed", format!("stride {stride} not in {{1, 2}}")));
        }
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = kernels::conv_transpose2d_forward(&x, &w, b.as_deref(), stride, padding)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph().apply(
            "conv2d_transposed",
            &inputs,
            out,
            Box::new(move |g, need| {
                let grads = kernels::conv_transpose2d_backward(&x, &w, g, stride, padding, need[0])?;
                let mut v = vec![grads.input, need[1].then_some(grads.weight)];
                if need.len() > 2 {
                    v.push(Some(grads.bias));
                }
                Ok(v)
            }),
        )
    }

    /// Mean over `k x k` windows placed every `stride` pixels (no padding).
    pub fn avg_pool(self, k: usize, stride: usize) -> Result<Var<'g>> {
        let a = self.value();
        let [n, c, h, w] = a.dims4()?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::shape("avg_pool", format!("window {k} stride {stride} on {h}x{w}")));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let norm = 1.0 / (k * k) as f64;
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = a.data();
        for (p, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..k {
                        let row = base + (oy * stride + i) * w + ox * stride;
                        acc += src[row..row + k].iter().sum::<f64>();
                    }
                    plane[oy * ow + ox] = acc * norm;
                }
            }
        }
        let shape = a.shape().to_vec();
        self.unary("avg_pool", out, move |g| {
            let mut gx = Tensor::zeros(shape.clone());
            let dst = gx.data_mut();
            for (p, plane) in g.data().chunks(oh * ow).enumerate() {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = plane[oy * ow + ox] * norm;
                        for i in 0..k {
                            let row = base + (oy * stride + i) * w + ox * stride;
                            dst[row..row + k].iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
            }
            Ok(gx)
        })
    }

    /// Halves both spatial extents by averaging 2x2 blocks.
    pub fn avg_downsample2x(self) -> Result<Var<'g>> {
        let [_, _, h, w] = self.value().dims4()?;
        for (axis, extent) in [("height", h), ("width", w)] {
            if extent % 2 != 0 {
                return Err(Error::shape("avg_downsample2x", format!("{axis} {extent} is odd")));
            }
        }
        self.avg_pool(2, 2)
    }

    /// Bilinear spatial upsampling by an integer factor with every value
    /// multiplied by the same factor, so pixel displacements stay in the
    /// units of the new resolution.
    pub fn upsample_flow(self, factor: usize) -> Result<Var<'g>> {
        let a = self.value();
        let [n, c, h, w] = a.dims4()?;
        if factor == 0 {
            return Err(Error::shape("upsample_flow", "factor must be positive"));
        }
        let ty = Rc::new(resize_taps(h, factor));
        let tx = Rc::new(resize_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let f = factor as f64;
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = a.data();
        for (p, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = (1.0 - wx) * s[y0 * w + x0] + wx * s[y0 * w + x1];
                    let bot = (1.0 - wx) * s[y1 * w + x0] + wx * s[y1 * w + x1];
                    plane[oy * ow + ox] = f * ((1.0 - wy) * top + wy * bot);
                }
            }
        }
        self.unary("upsample_flow", out, move |g| {
            let mut gx = Tensor::zeros([n, c, h, w]);
            let dst = gx.data_mut();
            for (p, plane) in g.data().chunks(oh * ow).enumerate() {
                let d = &mut dst[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let v = f * plane[oy * ow + ox];
                        d[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                        d[y0 * w + x1] += v * (1.0 - wy) * wx;
                        d[y1 * w + x0] += v * wy * (1.0 - wx);
                        d[y1 * w + x1] += v * wy * wx;
                    }
                }
            }
            Ok(gx)
        })
    }

    pub fn upsample_flow2x(self) -> Result<Var<'g>> {
        self.upsample_flow(2)
    }

    /// Channel slice `start..start+len` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let [n, c, h, w] = a.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("{start}+{len} exceeds {c} channels")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let off = (b * c + start) * plane;
            data.extend_from_slice(&a.data()[off..off + len * plane]);
        }
        let out = Tensor::new([n, len, h, w], data)?;
        self.unary("slice_channels", out, move |g| {
            let mut gx = Tensor::zeros([n, c, h, w]);
            for b in 0..n {
                let off = (b * c + start) * plane;
                gx.data_mut()[off..off + len * plane].copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
            }
            Ok(gx)
        })
    }

    /// Forward difference along width; the last column is zero.
    pub fn diff_x(self) -> Result<Var<'g>> {
        self.forward_difference(false)
    }

    /// Forward difference along height; the last row is zero.
    pub fn diff_y(self) -> Result<Var<'g>> {
        self.forward_difference(true)
    }

    fn forward_difference(self, vertical: bool) -> Result<Var<'g>> {
        let a = self.value();
        let [_, _, h, w] = a.dims4()?;
        let (step, valid): (usize, Box<dyn Fn(usize) -> bool>) = if vertical {
            (w, Box::new(move |i| (i % (h * w)) / w + 1 < h))
        } else {
            (1, Box::new(move |i| i % w + 1 < w))
        };
        let mask: Rc<Vec<bool>> = Rc::new((0..a.numel()).map(valid).collect());
        let src = a.data();
        let out = Tensor::from_fn(a.shape().to_vec(), |i| if mask[i] { src[i + step] - src[i] } else { 0.0 });
        let shape = a.shape().to_vec();
        self.unary(if vertical { "diff_y" } else { "diff_x" }, out, move |g| {
            let mut gx = Tensor::zeros(shape.clone());
            let d = gx.data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                if mask[i] {
                    d[i + step] += gv;
                    d[i] -= gv;
                }
            }
            Ok(gx)
        })
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let a = self.value();
        let [n, c, h, w] = a.dims4()?;
        let plane = h * w;
        let out = Tensor::new([n, c, 1, 1], a.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect())?;
        self.unary("global_avg_pool", out, move |g| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / plane as f64, plane)).collect();
            Tensor::new([n, c, h, w], data)
        })
    }

    /// Mean softmax cross-entropy of `[N, A]` logits against class indices.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (n, classes) = match a.shape() {
            &[n, k] => (n, k),
            s => return Err(Error::shape("cross_entropy", format!("expected [N, A] logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for (row, (logits, p)) in a.data().chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
            for (pi, &l) in p.iter_mut().zip(logits) {
                *pi = (l - max).exp() / z;
            }
            loss += z.ln() + max - logits[labels[row]];
        }
        let labels = labels.to_vec();
        self.unary("cross_entropy", Tensor::scalar(loss / n as f64), move |g| {
            let scale = g.item() / n as f64;
            let mut d = probs.clone();
            for (row, &l) in labels.iter().enumerate() {
                d[row * classes + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            Tensor::new([n, classes], d)
        })
    }
}

/// Concatenates `[N, C_i, H, W]` tensors along channels.
pub fn concat_channels<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let [n, _, h, w] = values[0].dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for v in &values {
        let [vn, vc, vh, vw] = v.dims4()?;
        if (vn, vh, vw) != (n, h, w) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", v.shape(), values[0].shape())));
        }
        channels.push(vc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (v, &c) in values.iter().zip(&channels) {
            data.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let out = Tensor::new([n, total, h, w], data)?;
    first.graph().apply(
        "concat_channels",
        parts,
        out,
        Box::new(move |g, need| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(channels.len());
            for (&c, &needed) in channels.iter().zip(need) {
                grads.push(if needed {
                    let mut d = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let off = (b * total + offset) * plane;
                        d.extend_from_slice(&g.data()[off..off + c * plane]);
                    }
                    Some(Tensor::new([n, c, h, w], d)?)
                } else {
                    None
                });
                offset += c;
            }
            Ok(grads)
        }),
    )
}
