//! Flow normalization, the classifier stacked on the flow network, the three
//! fine-tuning modes and weighted score fusion.
//!
//! The normalization layer clips displacements to `[-clip, clip]` and maps
//! them affinely onto `[out_lo, out_hi]`, rounding half away from zero.
//! Rounding has no useful derivative, so the backward pass is
//! straight-through on the clamp: the incoming gradient passes unchanged
//! inside the clip range (endpoints included) and is zeroed outside.
//! [`normalize_flow_surrogate`] is the bare clamp, whose true derivative is
//! that rule; it shares its backward pass with [`normalize_flow`].

use std::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, image_pyramid, total_loss, LossConfig};
use crate::motionnet::{upsample_to_input, Binding, MotionNet, FINEST_SCALE};
use crate::params::{Adam, ParamStore};
use crate::synth::{gen_clip, ClipSample, ClipSpec};
use crate::tensor::Tensor;
use crate::train::{batch_seeds, stack_inputs};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationSpec {
    pub clip: f64,
    pub out_lo: f64,
    pub out_hi: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self { clip: 20.0, out_lo: 0.0, out_hi: 255.0 }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return Err(Error::config("stacked.clip", "must be positive"));
        }
        if !(self.out_hi > self.out_lo) {
            return Err(Error::config("stacked.out_hi", "output range is empty"));
        }
        Ok(())
    }

    fn gain(&self) -> f64 {
        (self.out_hi - self.out_lo) / (2.0 * self.clip)
    }

    fn unrounded(&self, v: f64) -> f64 {
        self.gain() * (v.clamp(-self.clip, self.clip) + self.clip)
    }

    /// Quantized value of one displacement.
    pub fn apply(&self, v: f64) -> f64 {
        self.out_lo + self.unrounded(v).round()
    }

    /// Displacement whose normalized value is `q` (used to invert the map).
    pub fn inverse(&self, q: f64) -> f64 {
        (q - self.out_lo) / self.gain() - self.clip
    }
}

fn normalization_op<'g>(flow: Var<'g>, spec: NormalizationSpec, round: bool) -> Result<Var<'g>> {
    spec.validate()?;
    let v = flow.value();
    let out = if round { v.map(|x| spec.apply(x)) } else { v.map(|x| x.clamp(-spec.clip, spec.clip)) };
    let name = if round { "normalize_flow" } else { "normalize_flow_surrogate" };
    flow.graph().apply(
        name,
        &[flow],
        out,
        Box::new(move |g, _| {
            let data = g.data().iter().zip(v.data()).map(|(&gv, &x)| if x.abs() <= spec.clip { gv } else { 0.0 }).collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        }),
    )
}

/// Clipped, quantized flow values with a straight-through backward pass.
pub fn normalize_flow<'g>(flow: Var<'g>, spec: NormalizationSpec) -> Result<Var<'g>> {
    normalization_op(flow, spec, true)
}

/// `clamp(v, -clip, clip)`, differentiable counterpart of [`normalize_flow`].
pub fn normalize_flow_surrogate<'g>(flow: Var<'g>, spec: NormalizationSpec) -> Result<Var<'g>> {
    normalization_op(flow, spec, false)
}

/// Interleaves `F-1` fields `[N, 2, H, W]` into `[N, 2(F-1), H, W]` as
/// `[vx_1, vy_1, ..., vx_k, vy_k]`.
pub fn stack_flows(flows: &[Tensor], expected: usize) -> Result<Tensor> {
    if flows.len() != expected || expected == 0 {
        return Err(Error::Input(format!("expected {expected} flow fields, got {}", flows.len())));
    }
    let [n, c, h, w] = flows[0].dims4()?;
    if c != 2 {
        return Err(Error::Input(format!("flow fields must have 2 channels, got {c}")));
    }
    if let Some(bad) = flows.iter().find(|f| f.shape() != flows[0].shape()) {
        return Err(Error::Input(format!("flow field {:?} differs from {:?}", bad.shape(), flows[0].shape())));
    }
    let plane = 2 * h * w;
    let mut data = Vec::with_capacity(n * expected * plane);
    for b in 0..n {
        for f in flows {
            data.extend_from_slice(&f.data()[b * plane..(b + 1) * plane]);
        }
    }
    Tensor::new([n, 2 * expected, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// The flow network is frozen; only the head learns.
    FixedMotionNet,
    /// Both parts learn from the classification loss alone.
    ActionLossOnly,
    /// Both parts learn from classification plus the unsupervised loss.
    JointLoss,
}

impl FineTuneMode {
    pub const ALL: [FineTuneMode; 3] = [FineTuneMode::FixedMotionNet, FineTuneMode::ActionLossOnly, FineTuneMode::JointLoss];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub width: usize,
    pub classes: usize,
    pub activation_slope: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { width: 16, classes: 5, activation_slope: 0.1 }
    }
}

/// Two strided 3x3 convolutions, global average pooling and a linear layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    cfg: HeadConfig,
    norm: NormalizationSpec,
    params: ParamStore,
}

impl ClassifierHead {
    pub fn build(cfg: &HeadConfig, norm: NormalizationSpec, in_channels: usize, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.classes < 2 {
            return Err(Error::config("stacked.head_width", "width must be positive and classes at least 2"));
        }
        norm.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut kaiming = |shape: [usize; 4]| {
            let std = (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        };
        let w = cfg.width;
        params.push("conv_a.weight", kaiming([w, in_channels, 3, 3]));
        params.push("conv_a.bias", Tensor::zeros([w]));
        params.push("conv_b.weight", kaiming([2 * w, w, 3, 3]));
        params.push("conv_b.bias", Tensor::zeros([2 * w]));
        params.push("fc.weight", kaiming([cfg.classes, 2 * w, 1, 1]).map(|v| v * 0.5));
        params.push("fc.bias", Tensor::zeros([cfg.classes]));
        Ok(Self { cfg: cfg.clone(), norm, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn normalization(&self) -> NormalizationSpec {
        self.norm
    }

    /// Logits `[N, A]` from normalized flows in `[out_lo, out_hi]`.
    pub fn forward<'g>(&self, params: &[Var<'g>], normalized: Var<'g>) -> Result<Var<'g>> {
        let mid = 0.5 * (self.norm.out_lo + self.norm.out_hi);
        let half = 0.5 * (self.norm.out_hi - self.norm.out_lo);
        let x = normalized.add_scalar(-mid)?.scale(1.0 / half)?;
        let slope = self.cfg.activation_slope;
        let x = x.conv2d(params[0], Some(params[1]), 2, 1)?.leaky_relu(slope)?;
        let x = x.conv2d(params[2], Some(params[3]), 2, 1)?.leaky_relu(slope)?;
        let x = x.global_avg_pool()?.conv2d(params[4], Some(params[5]), 1, 0)?;
        let n = x.shape()[0];
        x.reshape([n, self.cfg.classes])
    }
}

/// The flow network with the classifier stacked on its full-resolution flow.
#[derive(Clone, Debug)]
pub struct StackedModel {
    pub motion: MotionNet,
    pub head: ClassifierHead,
}

pub struct StackedForward<'g> {
    pub flows: Vec<Var<'g>>,
    pub logits: Var<'g>,
}

impl StackedModel {
    pub fn forward<'g>(&self, motion: &[Var<'g>], head: &[Var<'g>], frames: Var<'g>) -> Result<StackedForward<'g>> {
        let pyramid = self.motion.forward(motion, frames)?;
        let full = upsample_to_input(pyramid.finest())?;
        let logits = self.head.forward(head, normalize_flow(full, self.head.norm)?)?;
        Ok(StackedForward { flows: pyramid.flows, logits })
    }

    pub fn logits(&self, frames: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let m = self.motion.bind(&g, Binding::Frozen);
        let h = self.head.params.bind(&g, false);
        Ok((*self.forward(&m, &h, g.constant(frames.clone()))?.logits.value()).clone())
    }

    pub fn predict_labels(&self, frames: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(frames)?;
        Ok(argmax_rows(&logits))
    }

    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.motion.params().export("motionnet/");
        out.extend(self.head.params.export("head/"));
        out
    }
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let cols = scores.shape()[1];
    scores
        .data()
        .chunks(cols)
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackedTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Step size for the flow network in modes (b) and (c); `learning_rate`
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub action_weight: f64,
    pub unsup_weight: f64,
}

impl Default for StackedTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, learning_rate: 1e-4, motion_learning_rate: None, batch_size: 4, seed: 1, action_weight: 1.0, unsup_weight: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackedRecord {
    pub step: usize,
    pub action_loss: f64,
    pub unsup_loss: f64,
    /// Euclidean norm of the gradient that reached the flow network.
    pub motion_grad_norm: f64,
    pub batch_accuracy: f64,
}

pub struct TrainedStack {
    pub model: StackedModel,
    pub log: Vec<StackedRecord>,
}

/// Labelled clips drawn at `step` (1-based).
pub fn clip_batch(spec: &ClipSpec, frames: usize, seed: u64, step: usize, batch_size: usize) -> Result<Vec<ClipSample>> {
    batch_seeds(seed, step, batch_size).into_iter().map(|s| gen_clip(s, spec, frames)).collect()
}

/// Fine-tunes the stacked model on synthetic clips under `mode`. `on_step`
/// may end training early by returning `ControlFlow::Break`.
pub fn train_stacked(
    model: StackedModel,
    dataset: &ClipSpec,
    mode: FineTuneMode,
    loss: &LossConfig,
    cfg: &StackedTrainConfig,
    mut on_step: impl FnMut(&StackedModel, &StackedRecord) -> Result<ControlFlow<()>>,
) -> Result<TrainedStack> {
    let mut model = model;
    let frames = model.motion.config().input_frames;
    let mut motion_opt = Adam::new(cfg.motion_learning_rate.unwrap_or(cfg.learning_rate), model.motion.params());
    let mut head_opt = Adam::new(cfg.learning_rate, model.head.params());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = clip_batch(dataset, frames, cfg.seed, step, cfg.batch_size)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label.expect("clips are labelled")).collect();
        let input = stack_inputs(&batch)?;

        let g = Graph::new();
        let binding = if mode == FineTuneMode::FixedMotionNet { Binding::Frozen } else { Binding::Trainable };
        let mp = model.motion.bind(&g, binding);
        let hp = model.head.params.bind(&g, true);
        let x = g.constant(input);
        let out = model.forward(&mp, &hp, x)?;
        let ce = cross_entropy(out.logits, &labels)?;
        let images = image_pyramid(x, FINEST_SCALE, out.flows.len())?;
        let unsup = total_loss(&out.flows, &images, loss)?.loss;
        let objective = match mode {
            FineTuneMode::FixedMotionNet | FineTuneMode::ActionLossOnly => ce,
            FineTuneMode::JointLoss => ce.scale(cfg.action_weight)?.add(unsup.scale(cfg.unsup_weight)?)?,
        };
        let value = objective.value().item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("objective is {value}") });
        }
        let grads = g.backward(objective)?;
        let predicted = argmax_rows(&out.logits.value());
        let correct = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();

        let head_grads = ParamStore::collect_grads(&hp, &grads);
        head_opt.update(model.head.params_mut(), &head_grads);
        let mut motion_grad_norm = 0.0;
        if binding == Binding::Trainable {
            let mg = ParamStore::collect_grads(&mp, &grads);
            motion_grad_norm = mg.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
            motion_opt.update(model.motion.params_mut(), &mg);
        }
        let record = StackedRecord {
            step,
            action_loss: ce.value().item(),
            unsup_loss: unsup.value().item(),
            motion_grad_norm,
            batch_accuracy: correct as f64 / labels.len() as f64,
        };
        let flow = on_step(&model, &record)?;
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainedStack { model, log })
}

/// `(w_a * a + w_b * b) / (w_a + w_b)` on raw (pre-softmax) scores.
pub fn fuse_scores(score_a: &Tensor, score_b: &Tensor, weight_a: f64, weight_b: f64) -> Result<Tensor> {
    if score_a.shape() != score_b.shape() {
        return Err(Error::Input(format!("score shapes {:?} and {:?} differ", score_a.shape(), score_b.shape())));
    }
    if !(weight_a >= 0.0 && weight_b >= 0.0) || weight_a + weight_b == 0.0 {
        return Err(Error::Input(format!("fusion weights ({weight_a}, {weight_b}) must be non-negative and not both zero")));
    }
    let total = weight_a + weight_b;
    let data = score_a.data().iter().zip(score_b.data()).map(|(a, b)| (weight_a * a + weight_b * b) / total).collect();
    Tensor::new(score_a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_table() {
        let s = NormalizationSpec::default();
        for (v, q) in [(-25.0, 0.0), (-20.0, 0.0), (0.0, 128.0), (20.0, 255.0), (35.0, 255.0)] {
            assert_eq!(s.apply(v), q, "v = {v}");
        }
    }

    #[test]
    fn straight_through_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::new([4], vec![-30.0, -20.0, 3.3, 21.0]).unwrap());
        let y = normalize_flow(x, NormalizationSpec::default()).unwrap().sum().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn stack_order_and_errors() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 2, 2, 2], 2.0);
        let s = stack_flows(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(s.shape(), &[1, 4, 2, 2]);
        assert_eq!(&s.data()[..8], a.data());
        assert!(stack_flows(&[a.clone()], 2).is_err());
        assert!(stack_flows(&[a, Tensor::zeros([1, 2, 3, 2])], 2).is_err());
    }

    #[test]
    fn fusion_degenerate_weights() {
        let a = Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::new([1, 3], vec![0.0, 4.0, 1.0]).unwrap();
        assert_eq!(fuse_scores(&a, &b, 1.0, 0.0).unwrap(), a);
        assert_eq!(fuse_scores(&a, &a, 1.0, 1.5).unwrap().data(), a.data());
        assert!(fuse_scores(&a, &b, 0.0, 0.0).is_err());
        assert!(fuse_scores(&a, &Tensor::zeros([1, 2]), 1.0, 1.0).is_err());
    }
}
