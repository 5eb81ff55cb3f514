//! Encoder-decoder flow network producing a multi-scale flow pyramid.
//!
//! Encoder level `s` runs at `1/2^s` of the input. With small-displacement
//! mode the network opens with two unstrided 3x3 convolutions and then
//! downsamples with strided 3x3 convolutions; otherwise a 7x7 stride-2 layer
//! opens the network. All downsampling is strided convolution.
//!
//! The decoder starts at the coarsest level and climbs back to `1/4`. Each
//! stage concatenates a deconvolution of the previous stage, the encoder
//! skip feature at that resolution and the ×2-upsampled coarser flow, then
//! (with CDC) applies one more 3x3 convolution before its flow head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::concat_channels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Resolution divisor of the finest predicted flow (flow2).
pub const FINEST_SCALE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionNetConfig {
    pub input_frames: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of stride-2 encoder stages; flows are predicted at scales
    /// `2..=levels`.
    pub levels: usize,
    pub use_small_disp: bool,
    pub use_cdc: bool,
    pub use_multiscale: bool,
    pub activation_slope: f64,
}

impl Default for MotionNetConfig {
    fn default() -> Self {
        Self {
            input_frames: 11,
            base_channels: 16,
            max_channels: 128,
            levels: 6,
            use_small_disp: true,
            use_cdc: true,
            use_multiscale: true,
            activation_slope: 0.1,
        }
    }
}

impl MotionNetConfig {
    pub fn input_channels(&self) -> usize {
        3 * self.input_frames
    }

    pub fn flow_channels(&self) -> usize {
        2 * (self.input_frames - 1)
    }

    /// Number of pyramid levels the forward pass returns.
    pub fn output_scales(&self) -> usize {
        if self.use_multiscale {
            self.levels - 1
        } else {
            1
        }
    }

    pub fn required_divisor(&self) -> usize {
        1 << self.levels
    }

    fn channels_at(&self, level: usize) -> usize {
        (self.base_channels << (level - 1)).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames < 2 {
            return Err(Error::config("motionnet.input_frames", "need at least 2 frames"));
        }
        if self.levels < 2 || self.levels > 1 + crate::losses::MAX_SCALES {
            return Err(Error::config("motionnet.levels", format!("{} not in 2..={}", self.levels, 1 + crate::losses::MAX_SCALES)));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("motionnet.base_channels", "channels must be positive and at most max_channels"));
        }
        if !(0.0..1.0).contains(&self.activation_slope) {
            return Err(Error::config("motionnet.activation_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let d = self.required_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::config("data.extent", format!("{h}x{w} input must be divisible by {d} (2^levels)")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct MotionNet {
    cfg: MotionNetConfig,
    params: ParamStore,
    layers: Vec<LayerSpec>,
}

struct Builder<'a> {
    params: ParamStore,
    layers: Vec<LayerSpec>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn layer(&mut self, name: String, kind: LayerKind, kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize, zero: bool) -> usize {
        let shape = match kind {
            LayerKind::Conv => [cout, cin, kernel, kernel],
            LayerKind::Deconv => [cin, cout, kernel, kernel],
        };
        let fan_in = match kind {
            LayerKind::Conv => cin * kernel * kernel,
            LayerKind::Deconv => (cin * kernel * kernel / (stride * stride)).max(1),
        };
        let weight = if zero {
            Tensor::zeros(shape)
        } else {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(self.rng))
        };
        let w = self.params.push(format!("{name}.weight"), weight);
        let b = self.params.push(format!("{name}.bias"), Tensor::zeros([cout]));
        self.layers.push(LayerSpec { name, kind, kernel, stride, padding, in_channels: cin, out_channels: cout, weight: w, bias: b });
        self.layers.len() - 1
    }
}

/// Flow fields finest first; `flows[k]` is at `1 / 2^(2 + k)` of the input.
pub struct FlowPyramid<'g> {
    pub flows: Vec<Var<'g>>,
}

impl<'g> FlowPyramid<'g> {
    pub fn finest(&self) -> Var<'g> {
        self.flows[0]
    }
}

/// Controls how parameters enter the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

impl MotionNet {
    pub fn build(cfg: &MotionNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamStore::new(), layers: Vec::new(), rng: &mut rng };
        let cin = cfg.input_channels();
        let fc = cfg.flow_channels();
        let conv = LayerKind::Conv;

        let mut prev = if cfg.use_small_disp {
            b.layer("conv0a".into(), conv, 3, 1, 1, cin, cfg.base_channels, false);
            b.layer("conv0b".into(), conv, 3, 1, 1, cfg.base_channels, cfg.base_channels, false);
            b.layer("conv1".into(), conv, 3, 2, 1, cfg.base_channels, cfg.channels_at(1), false);
            cfg.channels_at(1)
        } else {
            b.layer("conv1".into(), conv, 7, 2, 3, cin, cfg.channels_at(1), false);
            cfg.channels_at(1)
        };
        for s in 2..=cfg.levels {
            b.layer(format!("conv{s}"), conv, 3, 2, 1, prev, cfg.channels_at(s), false);
            prev = cfg.channels_at(s);
        }

        let coarsest = cfg.levels;
        if cfg.use_multiscale {
            b.layer(format!("flow{coarsest}"), conv, 3, 1, 1, prev, fc, true);
        }
        for s in (FINEST_SCALE..coarsest).rev() {
            let c = cfg.channels_at(s);
            b.layer(format!("deconv{s}"), LayerKind::Deconv, 4, 2, 1, prev, c, false);
            let cat = 2 * c + if cfg.use_multiscale { fc } else { 0 };
            prev = if cfg.use_cdc {
                b.layer(format!("xconv{s}"), conv, 3, 1, 1, cat, c, false);
                c
            } else {
                cat
            };
            if cfg.use_multiscale || s == FINEST_SCALE {
                b.layer(format!("flow{s}"), conv, 3, 1, 1, prev, fc, true);
            }
        }
        if coarsest == FINEST_SCALE && !cfg.use_multiscale {
            b.layer(format!("flow{FINEST_SCALE}"), conv, 3, 1, 1, prev, fc, true);
        }
        let Builder { params, layers, .. } = b;
        Ok(Self { cfg: cfg.clone(), params, layers })
    }

    pub fn config(&self) -> &MotionNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn bind<'g>(&self, graph: &'g Graph, binding: Binding) -> Vec<Var<'g>> {
        self.params.bind(graph, binding == Binding::Trainable)
    }

    fn layer(&self, name: &str) -> &LayerSpec {
        self.layers.iter().find(|l| l.name == name).unwrap_or_else(|| panic!("layer {name} missing"))
    }

    fn run<'g>(&self, name: &str, params: &[Var<'g>], x: Var<'g>, activate: bool) -> Result<Var<'g>> {
        let l = self.layer(name);
        let (w, b) = (params[l.weight], params[l.bias]);
        let wrap = |e: Error| match e {
            Error::NonFinite { context, index } => Error::NonFinite { context: format!("{name}/{context}"), index },
            other => other,
        };
        let y = match l.kind {
            LayerKind::Conv => x.conv2d(w, Some(b), l.stride, l.padding),
            LayerKind::Deconv => x.conv2d_transposed(w, Some(b), l.stride, l.padding),
        }
        .map_err(wrap)?;
        if activate {
            y.leaky_relu(self.cfg.activation_slope).map_err(wrap)
        } else {
            Ok(y)
        }
    }

    /// Runs the network on `[N, 3F, H, W]` frames in `[0, 1]`.
    pub fn forward<'g>(&self, params: &[Var<'g>], frames: Var<'g>) -> Result<FlowPyramid<'g>> {
        let [_, c, h, w] = frames.value().dims4()?;
        if c != self.cfg.input_channels() {
            return Err(Error::shape("motionnet", format!("{c} input channels, model expects {}", self.cfg.input_channels())));
        }
        self.cfg.check_extent(h, w)?;
        let levels = self.cfg.levels;
        let mut x = frames.add_scalar(-0.5)?;
        if self.cfg.use_small_disp {
            x = self.run("conv0a", params, x, true)?;
            x = self.run("conv0b", params, x, true)?;
        }
        // features[s - 1] is the encoder output at 1/2^s
        let mut features = Vec::with_capacity(levels);
        for s in 1..=levels {
            x = self.run(&format!("conv{s}"), params, x, true)?;
            features.push(x);
        }

        let mut flows = Vec::new();
        let mut coarser_flow = None;
        if self.cfg.use_multiscale {
            let f = self.run(&format!("flow{levels}"), params, x, false)?;
            flows.push(f);
            coarser_flow = Some(f);
        }
        for s in (FINEST_SCALE..levels).rev() {
            let up = self.run(&format!("deconv{s}"), params, x, true)?;
            let mut parts = vec![up, features[s - 1]];
            if let Some(f) = coarser_flow {
                parts.push(f.upsample_flow2x()?);
            }
            x = concat_channels(&parts)?;
            if self.cfg.use_cdc {
                x = self.run(&format!("xconv{s}"), params, x, true)?;
            }
            if self.cfg.use_multiscale || s == FINEST_SCALE {
                let f = self.run(&format!("flow{s}"), params, x, false)?;
                flows.push(f);
                coarser_flow = Some(f);
            }
        }
        if flows.is_empty() {
            flows.push(self.run(&format!("flow{FINEST_SCALE}"), params, x, false)?);
        }
        flows.reverse();
        Ok(FlowPyramid { flows })
    }

    /// Pyramid values for frames `[N, 3F, H, W]`, without gradients.
    pub fn predict_pyramid(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        let params = self.bind(&g, Binding::Frozen);
        let p = self.forward(&params, g.constant(frames.clone()))?;
        Ok(p.flows.iter().map(|f| (*f.value()).clone()).collect())
    }

    /// Full-resolution flow `[N, 2(F-1), H, W]`: the finest level upsampled
    /// ×4 with displacements scaled to input pixels.
    pub fn infer_flow(&self, frames: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let params = self.bind(&g, Binding::Frozen);
        Ok((*self.infer_flow_var(&params, g.constant(frames.clone()))?.value()).clone())
    }

    pub fn infer_flow_var<'g>(&self, params: &[Var<'g>], frames: Var<'g>) -> Result<Var<'g>> {
        let p = self.forward(params, frames)?;
        upsample_to_input(p.finest())
    }
}

/// Upsamples a flow2 level to input resolution.
pub fn upsample_to_input(flow2: Var<'_>) -> Result<Var<'_>> {
    flow2.upsample_flow(1 << FINEST_SCALE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(frames: usize) -> MotionNetConfig {
        MotionNetConfig { input_frames: frames, base_channels: 4, max_channels: 16, levels: 4, ..Default::default() }
    }

    #[test]
    fn channel_arithmetic() {
        let pair = MotionNetConfig { input_frames: 2, ..Default::default() };
        assert_eq!((pair.input_channels(), pair.flow_channels()), (6, 2));
        let clip = MotionNetConfig::default();
        assert_eq!((clip.input_channels(), clip.flow_channels()), (33, 20));
    }

    #[test]
    fn default_pyramid_resolutions() {
        let cfg = MotionNetConfig { input_frames: 2, base_channels: 4, max_channels: 16, ..Default::default() };
        let net = MotionNet::build(&cfg, 1).unwrap();
        let flows = net.predict_pyramid(&Tensor::full([1, 6, 64, 64], 0.5)).unwrap();
        let sizes: Vec<_> = flows.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2, 1]);
        assert!(flows.iter().all(|f| f.shape()[1] == 2));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = MotionNet::build(&micro(2), 7).unwrap();
        let b = MotionNet::build(&micro(2), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = MotionNet::build(&micro(2), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn indivisible_extent_names_divisor() {
        let net = MotionNet::build(&micro(2), 1).unwrap();
        let err = net.predict_pyramid(&Tensor::zeros([1, 6, 24, 40])).unwrap_err().to_string();
        assert!(err.contains("divisible by 16"), "{err}");
    }

    #[test]
    fn zero_heads_predict_zero_flow() {
        let net = MotionNet::build(&micro(3), 2).unwrap();
        let flow = net.infer_flow(&Tensor::full([2, 9, 32, 32], 0.3)).unwrap();
        assert_eq!(flow.shape(), &[2, 4, 32, 32]);
        assert!(flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toggles_change_parameter_count() {
        let base = micro(2);
        let full = MotionNet::build(&base, 1).unwrap().parameter_count();
        let no_cdc = MotionNet::build(&MotionNetConfig { use_cdc: false, ..base.clone() }, 1).unwrap().parameter_count();
        assert!(no_cdc < full);
        let big = MotionNet::build(&MotionNetConfig { use_small_disp: false, ..base.clone() }, 1).unwrap();
        assert_eq!(big.layers()[0].kernel, 7);
        assert_eq!(big.layers()[0].stride, 2);
        let small = MotionNet::build(&base, 1).unwrap();
        assert_eq!((small.layers()[0].kernel, small.layers()[0].stride), (3, 1));
        let single = MotionNet::build(&MotionNetConfig { use_multiscale: false, ..base }, 1).unwrap();
        assert_eq!(single.predict_pyramid(&Tensor::zeros([1, 6, 32, 32])).unwrap().len(), 1);
    }
}
