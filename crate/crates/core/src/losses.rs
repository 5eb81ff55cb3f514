//! Unsupervised photometric objectives and the classification loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::backward_warp;

/// Number of flow scales the per-scale weights cover.
pub const MAX_SCALES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_pixel: f64,
    pub lambda_smooth: f64,
    pub lambda_ssim: f64,
    /// Per-scale weights, finest (flow2) first.
    pub delta: [f64; MAX_SCALES],
    pub epsilon: f64,
    pub alpha: f64,
    pub ssim_window: usize,
    pub ssim_stride: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pixel: 1.0,
            lambda_smooth: 1.0,
            lambda_ssim: 0.16,
            delta: [0.32, 0.08, 0.02, 0.01, 0.005],
            epsilon: 0.001,
            alpha: 0.45,
            ssim_window: 8,
            ssim_stride: 8,
            c1: 0.0001,
            c2: 0.001,
        }
    }
}

impl LossConfig {
    /// Checks the weight and constant ranges. `finest_extent` is the smaller
    /// spatial extent of the finest supervised scale, when known.
    pub fn validate(&self, finest_extent: Option<usize>) -> Result<()> {
        let lambdas = [("loss.lambda_pixel", self.lambda_pixel), ("loss.lambda_smooth", self.lambda_smooth), ("loss.lambda_ssim", self.lambda_ssim)];
        for (key, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be a finite non-negative weight")));
            }
        }
        if lambdas.iter().all(|(_, v)| *v == 0.0) {
            return Err(Error::config("loss.lambda_*", "at least one loss weight must be positive"));
        }
        if self.delta.iter().any(|&d| !(d >= 0.0 && d.is_finite())) || self.delta.iter().all(|&d| d == 0.0) {
            return Err(Error::config("loss.delta", "scale weights must be non-negative with at least one positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("loss.alpha", "must lie in (0, 1]"));
        }
        if self.ssim_window == 0 || self.ssim_stride == 0 {
            return Err(Error::config("loss.ssim_window", "window and stride must be positive"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::config("loss.c1", "SSIM constants must be positive"));
        }
        if let Some(extent) = finest_extent {
            if self.ssim_window > extent {
                return Err(Error::config(
                    "loss.ssim_window",
                    format!("window {} exceeds the finest supervised extent {extent}", self.ssim_window),
                ));
            }
        }
        Ok(())
    }

    /// The Charbonnier floor `rho(0) = eps^(2 alpha)`.
    pub fn charbonnier_floor(&self) -> f64 {
        charbonnier_value(0.0, self.epsilon, self.alpha)
    }
}

pub fn charbonnier_value(x: f64, epsilon: f64, alpha: f64) -> f64 {
    (x * x + epsilon * epsilon).powf(alpha)
}

pub fn charbonnier<'g>(x: Var<'g>, epsilon: f64, alpha: f64) -> Result<Var<'g>> {
    if !(epsilon > 0.0) {
        return Err(Error::config("loss.epsilon", "must be positive"));
    }
    x.charbonnier(epsilon, alpha)
}

fn check_pair(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean robust penalty of `i1 - warp(i2, flow)` over pixels, channels and batch.
pub fn pixel_loss<'g>(i1: Var<'g>, i2: Var<'g>, flow: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    check_pair("pixel_loss", &i1, &i2)?;
    let rec = backward_warp(i2, flow)?;
    reconstruction_penalty(i1, rec, cfg)
}

fn reconstruction_penalty<'g>(i1: Var<'g>, rec: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    charbonnier(i1.sub(rec)?, cfg.epsilon, cfg.alpha)?.mean()
}

/// Robust penalty of forward flow differences, averaged per pixel and per
/// flow field (each field contributes four terms per pixel). The last
/// row/column difference is zero.
pub fn smoothness_loss<'g>(flow: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    let [n, c, h, w] = flow.value().dims4()?;
    if c % 2 != 0 {
        return Err(Error::shape("smoothness_loss", format!("{c} flow channels is not a multiple of 2")));
    }
    let dx = charbonnier(flow.diff_x()?, cfg.epsilon, cfg.alpha)?.sum()?;
    let dy = charbonnier(flow.diff_y()?, cfg.epsilon, cfg.alpha)?.sum()?;
    dx.add(dy)?.scale(1.0 / (n * h * w * (c / 2)) as f64)
}

/// SSIM of two equally sized patches with population moments.
pub fn ssim_patch(p1: &Tensor, p2: &Tensor, cfg: &LossConfig) -> Result<f64> {
    if p1.shape() != p2.shape() {
        return Err(Error::shape("ssim_patch", format!("{:?} vs {:?}", p1.shape(), p2.shape())));
    }
    let n = p1.numel() as f64;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / n;
    let (m1, m2) = (mean(p1), mean(p2));
    let moment = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() / n;
    let s11 = moment(p1, p1) - m1 * m1;
    let s22 = moment(p2, p2) - m2 * m2;
    let s12 = moment(p1, p2) - m1 * m2;
    Ok(((2.0 * m1 * m2 + cfg.c1) * (2.0 * s12 + cfg.c2)) / ((m1 * m1 + m2 * m2 + cfg.c1) * (s11 + s22 + cfg.c2)))
}

/// `mean(1 - SSIM)` over `window x window` patches every `stride` pixels,
/// averaged over channels and batch.
pub fn ssim_loss_windowed<'g>(i1: Var<'g>, rec: Var<'g>, window: usize, stride: usize, cfg: &LossConfig) -> Result<Var<'g>> {
    check_pair("ssim_loss", &i1, &rec)?;
    let [_, _, h, w] = i1.value().dims4()?;
    if window > h || window > w {
        return Err(Error::config("loss.ssim_window", format!("window {window} exceeds image {h}x{w}")));
    }
    let pool = |v: Var<'g>| v.avg_pool(window, stride);
    let mu1 = pool(i1)?;
    let mu2 = pool(rec)?;
    let mu11 = mu1.square()?;
    let mu22 = mu2.square()?;
    let mu12 = mu1.mul(mu2)?;
    let s11 = pool(i1.square()?)?.sub(mu11)?;
    let s22 = pool(rec.square()?)?.sub(mu22)?;
    let s12 = pool(i1.mul(rec)?)?.sub(mu12)?;
    let num = mu12.scale(2.0)?.add_scalar(cfg.c1)?.mul(s12.scale(2.0)?.add_scalar(cfg.c2)?)?;
    let den = mu11.add(mu22)?.add_scalar(cfg.c1)?.mul(s11.add(s22)?.add_scalar(cfg.c2)?)?;
    num.div(den)?.mean()?.scale(-1.0)?.add_scalar(1.0)
}

pub fn ssim_loss<'g>(i1: Var<'g>, rec: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    ssim_loss_windowed(i1, rec, cfg.ssim_window, cfg.ssim_stride, cfg)
}

/// Number of patches a `window`/`stride` tiling extracts from `h x w`.
pub fn ssim_patch_count(h: usize, w: usize, window: usize, stride: usize) -> usize {
    ((h - window) / stride + 1) * ((w - window) / stride + 1)
}

/// Unweighted loss components, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub pixel: f64,
    pub smooth: f64,
    pub ssim: f64,
}

impl LossParts {
    fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.pixel += s * other.pixel;
        self.smooth += s * other.smooth;
        self.ssim += s * other.ssim;
    }
}

/// Weighted per-scale objective plus its unweighted components.
pub struct ScaleLoss<'g> {
    pub loss: Var<'g>,
    pub parts: LossParts,
}

/// `lambda_pixel * pixel + lambda_smooth * smooth + lambda_ssim * ssim` for one
/// frame pair. Terms with zero weight are not evaluated. The SSIM window is
/// reduced to the image extent when the image is smaller than it.
pub fn scale_loss<'g>(i1: Var<'g>, i2: Var<'g>, flow: Var<'g>, cfg: &LossConfig) -> Result<ScaleLoss<'g>> {
    check_pair("scale_loss", &i1, &i2)?;
    let graph = i1.graph();
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if cfg.lambda_pixel != 0.0 || cfg.lambda_ssim != 0.0 {
        let rec = backward_warp(i2, flow)?;
        if cfg.lambda_pixel != 0.0 {
            let p = reconstruction_penalty(i1, rec, cfg)?;
            parts.pixel = p.value().item();
            terms.push(p.scale(cfg.lambda_pixel)?);
        }
        if cfg.lambda_ssim != 0.0 {
            let [_, _, h, w] = i1.value().dims4()?;
            let window = cfg.ssim_window.min(h).min(w);
            let s = ssim_loss_windowed(i1, rec, window, cfg.ssim_stride, cfg)?;
            parts.ssim = s.value().item();
            terms.push(s.scale(cfg.lambda_ssim)?);
        }
    }
    if cfg.lambda_smooth != 0.0 {
        let s = smoothness_loss(flow, cfg)?;
        parts.smooth = s.value().item();
        terms.push(s.scale(cfg.lambda_smooth)?);
    }
    let loss = match terms.split_first() {
        None => graph.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => rest.iter().try_fold(*first, |acc, t| acc.add(*t))?,
    };
    Ok(ScaleLoss { loss, parts })
}

/// Per-scale loss of a frame stack `[N, 3F, H, W]` against its `F - 1` flows
/// `[N, 2(F-1), H, W]`: pair `t` warps frame `t+1` towards frame `t`. The
/// pair losses are averaged.
pub fn sequence_scale_loss<'g>(frames: Var<'g>, flows: Var<'g>, cfg: &LossConfig) -> Result<ScaleLoss<'g>> {
    let [_, fc, fh, fw] = frames.value().dims4()?;
    let [_, vc, vh, vw] = flows.value().dims4()?;
    if fc % 3 != 0 || fc < 6 || vc != 2 * (fc / 3 - 1) || (fh, fw) != (vh, vw) {
        return Err(Error::shape(
            "sequence_scale_loss",
            format!("frames {:?} and flows {:?} do not pair up", frames.shape(), flows.shape()),
        ));
    }
    let pairs = fc / 3 - 1;
    if pairs == 1 {
        return scale_loss(frames.slice_channels(0, 3)?, frames.slice_channels(3, 3)?, flows, cfg);
    }
    let mut parts = LossParts::default();
    let mut total: Option<Var<'g>> = None;
    for t in 0..pairs {
        let l = scale_loss(frames.slice_channels(3 * t, 3)?, frames.slice_channels(3 * t + 3, 3)?, flows.slice_channels(2 * t, 2)?, cfg)?;
        parts.add_scaled(&l.parts, 1.0 / pairs as f64);
        total = Some(match total {
            None => l.loss,
            Some(acc) => acc.add(l.loss)?,
        });
    }
    Ok(ScaleLoss { loss: total.expect("pairs >= 1").scale(1.0 / pairs as f64)?, parts })
}

/// Frame stacks downsampled to each supervised scale: level `k` is
/// `1 / 2^(first_scale + k)` of the input.
pub fn image_pyramid<'g>(frames: Var<'g>, first_scale: usize, count: usize) -> Result<Vec<Var<'g>>> {
    let mut current = frames;
    for _ in 0..first_scale {
        current = current.avg_downsample2x()?;
    }
    let mut levels = vec![current];
    for _ in 1..count {
        current = current.avg_downsample2x()?;
        levels.push(current);
    }
    Ok(levels)
}

/// `sum_s delta_s * L_s` over matching flow and image pyramids, finest first.
pub fn total_loss<'g>(flows: &[Var<'g>], images: &[Var<'g>], cfg: &LossConfig) -> Result<ScaleLoss<'g>> {
    if flows.is_empty() || flows.len() != images.len() || flows.len() > MAX_SCALES {
        return Err(Error::config(
            "motionnet.levels",
            format!("{} flow levels against {} image levels (at most {MAX_SCALES})", flows.len(), images.len()),
        ));
    }
    let mut parts = LossParts::default();
    let mut total: Option<Var<'g>> = None;
    for (s, (&flow, &img)) in flows.iter().zip(images).enumerate() {
        let delta = cfg.delta[s];
        if delta == 0.0 {
            continue;
        }
        let l = sequence_scale_loss(img, flow, cfg)?;
        parts.add_scaled(&l.parts, delta);
        let weighted = l.loss.scale(delta)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => acc.add(weighted)?,
        });
    }
    let loss = match total {
        Some(t) => t,
        None => flows[0].graph().constant(Tensor::scalar(0.0)),
    };
    Ok(ScaleLoss { loss, parts })
}

/// Mean softmax cross-entropy of `[N, A]` logits.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    logits.softmax_cross_entropy(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::gradcheck::random_tensor;

    #[test]
    fn charbonnier_reference_values() {
        let floor = charbonnier_value(0.0, 0.001, 0.45);
        assert!((floor - 0.001f64.powf(0.9)).abs() < 1e-15);
        // (1 + 1e-6)^0.45 = exp(0.45 * ln(1 + 1e-6))
        let expected = (0.45 * (1e-6f64).ln_1p()).exp();
        assert!((charbonnier_value(1.0, 0.001, 0.45) - expected).abs() < 1e-15);
        assert!((expected - 1.00000045).abs() < 1e-12);

        let g = Graph::new();
        let x = g.param(Tensor::zeros([1]));
        let y = charbonnier(x, 0.001, 0.45).unwrap().sum().unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn identical_frames_hit_floor() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let img = g.constant(random_tensor([1, 3, 8, 8], 0.0, 1.0, 1));
        let flow = g.constant(Tensor::zeros([1, 2, 8, 8]));
        let l = pixel_loss(img, img, flow, &cfg).unwrap().value().item();
        assert!((l - cfg.charbonnier_floor()).abs() < 1e-15);
    }

    #[test]
    fn smoothness_of_constant_and_ramp_flows() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let c = g.constant(Tensor::full([1, 2, 5, 6], 1.7));
        let l = smoothness_loss(c, &cfg).unwrap().value().item();
        assert!((l - 4.0 * cfg.charbonnier_floor()).abs() < 1e-12);

        let (h, w) = (4, 5);
        let ramp = Tensor::from_fn([1, 2, h, w], |i| if i < h * w { (i % w) as f64 } else { 0.0 });
        let l = smoothness_loss(g.constant(ramp), &cfg).unwrap().value().item();
        let r0 = cfg.charbonnier_floor();
        let r1 = charbonnier_value(1.0, cfg.epsilon, cfg.alpha);
        let interior = (h * (w - 1)) as f64 * (r1 + 3.0 * r0);
        let last_col = h as f64 * 4.0 * r0;
        assert!((l - (interior + last_col) / (h * w) as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_patch_closed_forms() {
        let cfg = LossConfig::default();
        let p = random_tensor([8, 8], 0.0, 1.0, 2);
        assert_eq!(ssim_patch(&p, &p, &cfg).unwrap(), 1.0);

        let (a, b) = (0.3, 0.8);
        let s = ssim_patch(&Tensor::full([8, 8], a), &Tensor::full([8, 8], b), &cfg).unwrap();
        assert!((s - (2.0 * a * b + cfg.c1) / (a * a + b * b + cfg.c1)).abs() < 1e-12);

        let z = random_tensor([8, 8], -1.0, 1.0, 3);
        let m = z.data().iter().sum::<f64>() / 64.0;
        let z = z.map(|v| v - m);
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / 64.0;
        let s = ssim_patch(&z, &z.map(|v| -v), &cfg).unwrap();
        assert!((s - (cfg.c2 - 2.0 * var) / (cfg.c2 + 2.0 * var)).abs() < 1e-9);
        assert!(s < 0.0);
    }

    #[test]
    fn ssim_loss_tiling_and_small_images() {
        assert_eq!(ssim_patch_count(16, 16, 8, 8), 4);
        let cfg = LossConfig::default();
        let g = Graph::new();
        let img = g.constant(random_tensor([1, 3, 16, 16], 0.0, 1.0, 4));
        assert_eq!(ssim_loss(img, img, &cfg).unwrap().value().item(), 0.0);
        let small = g.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(matches!(ssim_loss(small, small, &cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate(Some(16)).is_ok());
        assert!(cfg.validate(Some(4)).is_err());
        cfg.lambda_pixel = 0.0;
        cfg.lambda_smooth = 0.0;
        cfg.lambda_ssim = 0.0;
        assert!(cfg.validate(None).is_err());
    }

    #[test]
    fn zero_weights_give_zero() {
        let cfg = LossConfig { lambda_pixel: 0.0, lambda_smooth: 0.0, lambda_ssim: 0.0, ..Default::default() };
        let g = Graph::new();
        let img = g.constant(random_tensor([1, 3, 8, 8], 0.0, 1.0, 5));
        let flow = g.constant(Tensor::zeros([1, 2, 8, 8]));
        assert_eq!(scale_loss(img, img, flow, &cfg).unwrap().loss.value().item(), 0.0);
    }
}
