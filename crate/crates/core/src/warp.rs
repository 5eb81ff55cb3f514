//! Differentiable backward warping by bilinear sampling.
//!
//! Flow fields are `[N, 2, H, W]` in pixels of their own resolution:
//! channel 0 is the horizontal displacement (positive samples to the right),
//! channel 1 the vertical displacement (positive samples downward). Output
//! pixel `(row, col)` samples the image at `(row + v_y, col + v_x)`.
//!
//! Outside the image the border pixel is repeated. For the gradient with
//! respect to the flow, an exactly integral sample coordinate uses the cell
//! extending toward the positive side.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Tap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    wy: f64,
    wx: f64,
}

fn tap(x: f64, extent: usize) -> (usize, usize, f64) {
    let base = x.floor();
    let w = x - base;
    let last = extent as f64 - 1.0;
    let a = base.clamp(0.0, last) as usize;
    let b = (base + 1.0).clamp(0.0, last) as usize;
    (a, b, w)
}

/// Reconstructs the first frame as `image` sampled at flow-displaced
/// positions.
pub fn backward_warp<'g>(image: Var<'g>, flow: Var<'g>) -> Result<Var<'g>> {
    let img = image.value();
    let fl = flow.value();
    let [n, c, h, w] = img.dims4()?;
    let [fnum, fc, fh, fw] = fl.dims4()?;
    if fc != 2 || (fnum, fh, fw) != (n, h, w) {
        return Err(Error::shape(
            "backward_warp",
            format!("image {:?} and flow {:?} disagree (flow must be [N, 2, H, W])", img.shape(), fl.shape()),
        ));
    }
    let plane = h * w;
    let mut taps = Vec::with_capacity(n * plane);
    for b in 0..n {
        let vx = &fl.data()[(2 * b) * plane..(2 * b + 1) * plane];
        let vy = &fl.data()[(2 * b + 1) * plane..(2 * b + 2) * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let (x0, x1, wx) = tap(j as f64 + vx[p], w);
                let (y0, y1, wy) = tap(i as f64 + vy[p], h);
                taps.push(Tap { y0, y1, x0, x1, wy, wx });
            }
        }
    }
    let taps = Rc::new(taps);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = &img.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let dst = &mut out.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (p, t) in taps[b * plane..(b + 1) * plane].iter().enumerate() {
                let top = (1.0 - t.wx) * src[t.y0 * w + t.x0] + t.wx * src[t.y0 * w + t.x1];
                let bot = (1.0 - t.wx) * src[t.y1 * w + t.x0] + t.wx * src[t.y1 * w + t.x1];
                dst[p] = (1.0 - t.wy) * top + t.wy * bot;
            }
        }
    }
    image.graph().apply(
        "backward_warp",
        &[image, flow],
        out,
        Box::new(move |g, need| {
            let mut g_img = need[0].then(|| Tensor::zeros([n, c, h, w]));
            let mut g_flow = need[1].then(|| Tensor::zeros([n, 2, h, w]));
            for b in 0..n {
                let cell = &taps[b * plane..(b + 1) * plane];
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let gy = &g.data()[off..off + plane];
                    if let Some(gi) = g_img.as_mut() {
                        let d = &mut gi.data_mut()[off..off + plane];
                        for (p, t) in cell.iter().enumerate() {
                            let v = gy[p];
                            d[t.y0 * w + t.x0] += v * (1.0 - t.wy) * (1.0 - t.wx);
                            d[t.y0 * w + t.x1] += v * (1.0 - t.wy) * t.wx;
                            d[t.y1 * w + t.x0] += v * t.wy * (1.0 - t.wx);
                            d[t.y1 * w + t.x1] += v * t.wy * t.wx;
                        }
                    }
                    if let Some(gf) = g_flow.as_mut() {
                        let src = &img.data()[off..off + plane];
                        let (dx, dy) = gf.data_mut()[2 * b * plane..(2 * b + 2) * plane].split_at_mut(plane);
                        for (p, t) in cell.iter().enumerate() {
                            let (a, bb) = (src[t.y0 * w + t.x0], src[t.y0 * w + t.x1]);
                            let (cc, d) = (src[t.y1 * w + t.x0], src[t.y1 * w + t.x1]);
                            dx[p] += gy[p] * ((1.0 - t.wy) * (bb - a) + t.wy * (d - cc));
                            dy[p] += gy[p] * ((1.0 - t.wx) * (cc - a) + t.wx * (d - bb));
                        }
                    }
                }
            }
            Ok(vec![g_img, g_flow])
        }),
    )
}
