#![allow(dead_code)]

use motionflow::autodiff::{Graph, Var};
use motionflow::gradcheck::{check_gradients_with_step, random_tensor, GradCheckReport};
use motionflow::losses::{self, LossConfig};
use motionflow::ops::concat_channels;
use motionflow::stacked::{normalize_flow, normalize_flow_surrogate, NormalizationSpec};
use motionflow::warp::backward_warp;
use motionflow::{Result, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
/// Small enough that the Charbonnier curvature near its minimum does not
/// dominate the central-difference error.
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn r(shape: &[usize], lo: f64, hi: f64, seed: u64, salt: u64) -> Tensor {
    random_tensor(shape.to_vec(), lo, hi, seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

fn smooth_cfg() -> LossConfig {
    LossConfig::default()
}

fn conv(seed: u64) -> Result<GradCheckReport> {
    let x = r(&[2, 3, 6, 5], -1.0, 1.0, seed, 1);
    let w = r(&[4, 3, 3, 3], -0.5, 0.5, seed, 2);
    let b = r(&[4], -0.5, 0.5, seed, 3);
    let stride = 1 + (seed as usize % 2);
    check_gradients_with_step(move |_, v| v[0].conv2d(v[1], Some(v[2]), stride, 1), &[x, w, b], GRAD_TOL, GRAD_STEP)
}

fn conv_transposed(seed: u64) -> Result<GradCheckReport> {
    let x = r(&[2, 3, 4, 3], -1.0, 1.0, seed, 4);
    let w = r(&[3, 2, 4, 4], -0.5, 0.5, seed, 5);
    let b = r(&[2], -0.5, 0.5, seed, 6);
    check_gradients_with_step(|_, v| v[0].conv2d_transposed(v[1], Some(v[2]), 2, 1), &[x, w, b], GRAD_TOL, GRAD_STEP)
}

fn warp(seed: u64) -> Result<GradCheckReport> {
    let img = r(&[2, 3, 6, 7], 0.0, 1.0, seed, 7);
    // keeps sample points inside the image, away from the clamp boundary
    let flow = r(&[2, 2, 6, 7], -0.9, 0.9, seed, 8);
    check_gradients_with_step(|_, v| backward_warp(v[0], v[1]), &[img, flow], GRAD_TOL, GRAD_STEP)
}

fn charbonnier(seed: u64) -> Result<GradCheckReport> {
    let x = r(&[3, 7], -1.0, 1.0, seed, 9);
    check_gradients_with_step(|_, v| losses::charbonnier(v[0], 0.001, 0.45), &[x], GRAD_TOL, GRAD_STEP)
}

fn pixel(seed: u64) -> Result<GradCheckReport> {
    let i1 = r(&[1, 3, 5, 6], 0.0, 1.0, seed, 10);
    let i2 = r(&[1, 3, 5, 6], 0.0, 1.0, seed, 11);
    let flow = r(&[1, 2, 5, 6], -0.8, 0.8, seed, 12);
    let cfg = smooth_cfg();
    check_gradients_with_step(move |_, v| losses::pixel_loss(v[0], v[1], v[2], &cfg), &[i1, i2, flow], GRAD_TOL, GRAD_STEP)
}

fn smoothness(seed: u64) -> Result<GradCheckReport> {
    let flow = r(&[2, 2, 5, 4], -2.0, 2.0, seed, 13);
    let cfg = smooth_cfg();
    check_gradients_with_step(move |_, v| losses::smoothness_loss(v[0], &cfg), &[flow], GRAD_TOL, GRAD_STEP)
}

fn ssim(seed: u64) -> Result<GradCheckReport> {
    let a = r(&[1, 3, 8, 8], 0.0, 1.0, seed, 14);
    let b = r(&[1, 3, 8, 8], 0.0, 1.0, seed, 15);
    let cfg = LossConfig { ssim_window: 4, ssim_stride: 4, ..LossConfig::default() };
    check_gradients_with_step(move |_, v| losses::ssim_loss(v[0], v[1], &cfg), &[a, b], GRAD_TOL, GRAD_STEP)
}

fn multiscale(seed: u64) -> Result<GradCheckReport> {
    let frames = r(&[1, 6, 8, 8], 0.0, 1.0, seed, 16);
    let f0 = r(&[1, 2, 8, 8], -0.8, 0.8, seed, 17);
    let f1 = r(&[1, 2, 4, 4], -0.8, 0.8, seed, 18);
    let cfg = LossConfig { ssim_window: 4, ssim_stride: 4, ..smooth_cfg() };
    check_gradients_with_step(
        move |_, v| {
            let images = losses::image_pyramid(v[0], 0, 2)?;
            Ok(losses::total_loss(&[v[1], v[2]], &images, &cfg)?.loss)
        },
        &[frames, f0, f1],
        GRAD_TOL,
        GRAD_STEP,
    )
}

fn normalization(seed: u64) -> Result<GradCheckReport> {
    // values stay inside the clip range, where the straight-through rule is
    // the derivative of the surrogate
    let flow = r(&[1, 2, 3, 4], -19.0, 19.0, seed, 19);
    let spec = NormalizationSpec::default();
    let report = check_gradients_with_step(move |_, v| normalize_flow_surrogate(v[0], spec), std::slice::from_ref(&flow), GRAD_TOL, GRAD_STEP)?;
    // and the quantized layer must back-propagate exactly that rule
    let g = Graph::new();
    let a = g.param(flow.clone());
    let b = g.param(flow);
    let cot = g.constant(r(&[1, 2, 3, 4], -1.0, 1.0, seed, 20));
    let la = normalize_flow(a, spec)?.mul(cot)?.sum()?;
    let lb = normalize_flow_surrogate(b, spec)?.mul(cot)?.sum()?;
    let total = la.add(lb)?;
    let grads = g.backward(total)?;
    let (ga, gb) = (grads.get_or_zeros(a), grads.get_or_zeros(b));
    let mut report = report;
    if ga != gb {
        report.passed = false;
        report.max_deviation = f64::INFINITY;
    }
    Ok(report)
}

fn cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let logits = r(&[4, 5], -3.0, 3.0, seed, 21);
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 5).collect();
    check_gradients_with_step(move |_, v| losses::cross_entropy(v[0], &labels), &[logits], GRAD_TOL, GRAD_STEP)
}

fn pooling_and_resampling(seed: u64) -> Result<GradCheckReport> {
    let x = r(&[1, 4, 8, 6], -1.0, 1.0, seed, 22);
    fn op<'g>(_: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
        let d = v[0].avg_downsample2x()?;
        let u = d.slice_channels(0, 2)?.upsample_flow2x()?;
        let p = v[0].avg_pool(3, 2)?.sum()?;
        let c = concat_channels(&[u, v[0].slice_channels(2, 2)?])?;
        let dx = c.diff_x()?.square()?.sum()?;
        let dy = c.diff_y()?.leaky_relu(0.1)?.sum()?;
        let gp = c.global_avg_pool()?.square()?.sum()?;
        dx.add(dy)?.add(p)?.add(gp)
    }
    check_gradients_with_step(op, &[x], GRAD_TOL, GRAD_STEP)
}

fn arithmetic(seed: u64) -> Result<GradCheckReport> {
    let a = r(&[3, 4], -1.0, 1.0, seed, 23);
    let b = r(&[3, 4], 0.5, 2.0, seed, 24);
    check_gradients_with_step(|_, v| v[0].mul(v[1])?.div(v[1].add_scalar(1.0)?)?.sub(v[0].scale(0.3)?)?.reshape([12])?.mean(), &[a, b], GRAD_TOL, GRAD_STEP)
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "conv2d", run: conv },
        GradCase { name: "conv2d_transposed", run: conv_transposed },
        GradCase { name: "backward_warp", run: warp },
        GradCase { name: "charbonnier", run: charbonnier },
        GradCase { name: "pixel_loss", run: pixel },
        GradCase { name: "smoothness_loss", run: smoothness },
        GradCase { name: "ssim_loss", run: ssim },
        GradCase { name: "total_loss", run: multiscale },
        GradCase { name: "normalize_flow", run: normalization },
        GradCase { name: "cross_entropy", run: cross_entropy },
        GradCase { name: "pooling_resampling", run: pooling_and_resampling },
        GradCase { name: "arithmetic", run: arithmetic },
    ]
}
