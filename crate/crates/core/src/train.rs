//! Unsupervised training loop for the flow network.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{image_pyramid, total_loss, LossConfig, LossParts};
use crate::motionnet::{Binding, MotionNet, FINEST_SCALE};
use crate::params::{Adam, ParamStore};
use crate::synth::{sample_seed, ClipSample, FlowDatasetSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (and after the last step).
    pub checkpoint_every: usize,
    pub output_dir: String,
    /// Steps after which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 1,
            checkpoint_every: 1000,
            output_dir: "runs/default".into(),
            lr_milestones: Vec::new(),
            lr_decay: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config("train.lr_decay", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (1-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| step > m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub parts: LossParts,
}

/// Stacks clip frames into one `[B, 3F, H, W]` network input.
pub fn stack_inputs(samples: &[ClipSample]) -> Result<Tensor> {
    Tensor::stack_batch(&samples.iter().map(ClipSample::stacked_frames).collect::<Vec<_>>())
}

/// The batch drawn at `step` (1-based); depends only on `(seed, step)`.
pub fn batch_seeds(seed: u64, step: usize, batch_size: usize) -> Vec<u64> {
    (0..batch_size).map(|i| sample_seed(seed, ((step - 1) * batch_size + i) as u64)).collect()
}

/// Differentiates the multi-scale unsupervised loss on one batch and
/// returns `(record, gradients)`; the weights are left untouched.
pub fn unsupervised_gradients(net: &MotionNet, loss: &LossConfig, frames: &Tensor, step: usize) -> Result<(StepRecord, Vec<Tensor>)> {
    let g = Graph::new();
    let params = net.bind(&g, Binding::Trainable);
    let x = g.constant(frames.clone());
    let pyramid = net.forward(&params, x)?;
    let images = image_pyramid(x, FINEST_SCALE, pyramid.flows.len())?;
    let l = total_loss(&pyramid.flows, &images, loss)?;
    let total = l.loss.value().item();
    if !total.is_finite() {
        return Err(Error::Diverged { step, detail: format!("loss is {total}") });
    }
    let grads = g.backward(l.loss)?;
    let grads = ParamStore::collect_grads(&params, &grads);
    Ok((StepRecord { step, total, parts: l.parts }, grads))
}

pub struct UnsupervisedTrainer {
    pub net: MotionNet,
    pub optimizer: Adam,
    pub loss: LossConfig,
    pub data: FlowDatasetSpec,
    pub train: TrainConfig,
    step: usize,
}

impl UnsupervisedTrainer {
    pub fn new(net: MotionNet, loss: LossConfig, data: FlowDatasetSpec, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let finest = data.scene.height.min(data.scene.width) >> FINEST_SCALE;
        loss.validate(Some(finest))?;
        net.config().check_extent(data.scene.height, data.scene.width)?;
        let optimizer = Adam::new(train.learning_rate, net.params());
        Ok(Self { net, optimizer, loss, data, train, step: 0 })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn batch(&self, step: usize) -> Result<Tensor> {
        let frames = self.net.config().input_frames;
        let samples = batch_seeds(self.train.seed, step, self.train.batch_size)
            .into_iter()
            .map(|s| self.data.sample(s, frames))
            .collect::<Result<Vec<_>>>()?;
        stack_inputs(&samples)
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let frames = self.batch(step)?;
        let (record, grads) = unsupervised_gradients(&self.net, &self.loss, &frames, step)?;
        if grads.iter().any(|g| g.first_non_finite().is_some()) {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        self.optimizer.learning_rate = self.train.learning_rate_at(step);
        self.optimizer.update(self.net.params_mut(), &grads);
        self.step = step;
        Ok(record)
    }

    /// Runs until `train.steps` steps are done, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.train.steps {
            let r = self.step_once()?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.net.params().export("motionnet/");
        out.extend(self.optimizer.export("optim/", self.net.params().names()));
        out.push(("train/step".into(), Tensor::scalar(self.step as f64)));
        out
    }

    pub fn restore(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        self.net.params_mut().load_from(entries, "motionnet/")?;
        let names = self.net.params().names().to_vec();
        self.optimizer.restore(entries, "optim/", &names)?;
        let step = entries
            .iter()
            .find(|(n, _)| n == "train/step")
            .ok_or_else(|| Error::Input("checkpoint lacks `train/step`".into()))?;
        self.step = step.1.item() as usize;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motionnet::MotionNetConfig;
    use crate::synth::SceneSpec;

    fn tiny(steps: usize) -> UnsupervisedTrainer {
        let cfg = MotionNetConfig { input_frames: 2, base_channels: 4, max_channels: 8, levels: 2, ..Default::default() };
        let data = FlowDatasetSpec { scene: SceneSpec { height: 16, width: 16, ..Default::default() }, max_displacement: 2.0, ..Default::default() };
        let train = TrainConfig { steps, learning_rate: 1e-3, batch_size: 2, ..Default::default() };
        let loss = LossConfig { ssim_window: 4, ..Default::default() };
        UnsupervisedTrainer::new(MotionNet::build(&cfg, 5).unwrap(), loss, data, train).unwrap()
    }

    #[test]
    fn milestones_decay_the_rate() {
        let t = TrainConfig { learning_rate: 1.0, lr_milestones: vec![10, 20], lr_decay: 0.5, ..Default::default() };
        assert_eq!([t.learning_rate_at(10), t.learning_rate_at(11), t.learning_rate_at(21)], [1.0, 0.5, 0.25]);
    }

    #[test]
    fn resume_reproduces_the_trajectory() {
        let mut full = tiny(4);
        let mut log = Vec::new();
        full.run(|_, r| {
            log.push(r.total);
            Ok(())
        })
        .unwrap();
        let mut first = tiny(2);
        first.run(|_, _| Ok(())).unwrap();
        let mut resumed = tiny(4);
        resumed.restore(&first.state_entries()).unwrap();
        let mut tail = Vec::new();
        resumed
            .run(|_, r| {
                tail.push(r.total);
                Ok(())
            })
            .unwrap();
        assert_eq!(tail, log[2..]);
        assert_eq!(resumed.net.params().tensors(), full.net.params().tensors());
    }
}
