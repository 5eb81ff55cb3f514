//! Flow-quality metrics and dataset evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow_io::known_mask;
use crate::motionnet::MotionNet;
use crate::parallel::map_indexed;
use crate::stacked::{argmax_rows, StackedModel};
use crate::synth::ClipSample;
use crate::tensor::Tensor;

fn flow_dims(pred: &Tensor, gt: &Tensor) -> Result<[usize; 4]> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input(format!("prediction {:?} and ground truth {:?} differ in shape", pred.shape(), gt.shape())));
    }
    let dims = pred.dims4()?;
    if dims[1] != 2 {
        return Err(Error::Input(format!("flow fields need 2 channels, got {}", dims[1])));
    }
    Ok(dims)
}

/// Per-pixel endpoint errors and ground-truth magnitudes, pixel-major.
fn per_pixel(pred: &Tensor, gt: &Tensor) -> Result<Vec<(f64, f64)>> {
    let [n, _, h, w] = flow_dims(pred, gt)?;
    let plane = h * w;
    let (p, g) = (pred.data(), gt.data());
    Ok((0..n * plane)
        .map(|i| {
            let base = (i / plane) * 2 * plane + i % plane;
            let (gu, gv) = (g[base], g[base + plane]);
            ((p[base] - gu).hypot(p[base + plane] - gv), gu.hypot(gv))
        })
        .collect())
}

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::Input(format!("mask has {} entries for {len} pixels", m.len()))),
        Some(m) if !m.iter().any(|&k| k) => Err(Error::Input("mask selects no pixels".into())),
        _ => Ok(()),
    }
}

/// Mean endpoint error over the pixels selected by `mask` (all when `None`).
/// `mask` holds one entry per pixel of `[N, H, W]`.
pub fn epe(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let px = per_pixel(pred, gt)?;
    check_mask(mask, px.len())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (e, _)) in px.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += e;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Percentage of selected pixels whose endpoint error exceeds both 3 px and
/// 5% of the ground-truth magnitude.
pub fn fl_outliers_masked(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let px = per_pixel(pred, gt)?;
    check_mask(mask, px.len())?;
    let (mut bad, mut count) = (0usize, 0usize);
    for (i, &(e, m)) in px.iter().enumerate() {
        if mask.is_none_or(|k| k[i]) {
            count += 1;
            if e > 3.0 && e > 0.05 * m {
                bad += 1;
            }
        }
    }
    Ok(100.0 * bad as f64 / count as f64)
}

pub fn fl_outliers(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    fl_outliers_masked(pred, gt, None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_epe: f64,
    pub fl_percent: f64,
    pub accuracy: Option<f64>,
    pub sample_count: usize,
}

/// Anything that produces flow `[F-1, 2, H, W]` for a clip.
pub trait FlowPredictor: Sync {
    fn predict_flow(&self, sample: &ClipSample) -> Result<Tensor>;

    /// Predicted class, for predictors that classify.
    fn predict_label(&self, _sample: &ClipSample) -> Result<Option<usize>> {
        Ok(None)
    }
}

fn as_field_stack(flow: Tensor, sample: &ClipSample) -> Result<Tensor> {
    flow.reshape(sample.gt_flows.shape().to_vec())
}

impl FlowPredictor for MotionNet {
    fn predict_flow(&self, sample: &ClipSample) -> Result<Tensor> {
        as_field_stack(self.infer_flow(&sample.stacked_frames())?, sample)
    }
}

impl FlowPredictor for StackedModel {
    fn predict_flow(&self, sample: &ClipSample) -> Result<Tensor> {
        self.motion.predict_flow(sample)
    }

    fn predict_label(&self, sample: &ClipSample) -> Result<Option<usize>> {
        Ok(Some(argmax_rows(&self.logits(&sample.stacked_frames())?)[0]))
    }
}

/// Returns the ground truth (and the true label).
pub struct OraclePredictor;

impl FlowPredictor for OraclePredictor {
    fn predict_flow(&self, sample: &ClipSample) -> Result<Tensor> {
        Ok(sample.gt_flows.clone())
    }

    fn predict_label(&self, sample: &ClipSample) -> Result<Option<usize>> {
        Ok(sample.label)
    }
}

/// Predicts zero motion everywhere.
pub struct ZeroPredictor;

impl FlowPredictor for ZeroPredictor {
    fn predict_flow(&self, sample: &ClipSample) -> Result<Tensor> {
        Ok(Tensor::zeros(sample.gt_flows.shape().to_vec()))
    }
}

/// Metrics of one sample: `(epe, fl, correct)`. Unknown ground truth is
/// excluded.
pub fn evaluate_sample(model: &dyn FlowPredictor, sample: &ClipSample) -> Result<(f64, f64, Option<bool>)> {
    let pred = model.predict_flow(sample)?;
    let mask = known_mask(&sample.gt_flows)?;
    let e = epe(&pred, &sample.gt_flows, Some(&mask))?;
    let fl = fl_outliers_masked(&pred, &sample.gt_flows, Some(&mask))?;
    let correct = match (sample.label, model.predict_label(sample)?) {
        (Some(truth), Some(p)) => Some(truth == p),
        _ => None,
    };
    Ok((e, fl, correct))
}

/// Per-sample metrics averaged in sample order. Accuracy is reported when
/// every sample is labelled and the model classifies.
pub fn evaluate_dataset(model: &dyn FlowPredictor, samples: &[ClipSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let results = map_indexed(samples.len(), |i| evaluate_sample(model, &samples[i]));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mean_epe = results.iter().map(|r| r.0).sum::<f64>() / n;
    let fl_percent = results.iter().map(|r| r.1).sum::<f64>() / n;
    let accuracy = results
        .iter()
        .map(|r| r.2)
        .collect::<Option<Vec<bool>>>()
        .map(|c| c.iter().filter(|&&ok| ok).count() as f64 / n);
    Ok(EvalReport { mean_epe, fl_percent, accuracy, sample_count: samples.len() })
}

/// Variance of the predicted first flow field inside the sample's flat
/// patch, averaged over both components, or `None` without a patch.
pub fn homogeneous_variance(pred: &Tensor, sample: &ClipSample) -> Result<Option<f64>> {
    let [_, _, h, w] = sample.gt_flows.dims4()?;
    let mask = &sample.homogeneous.data()[..h * w];
    let count = mask.iter().filter(|&&m| m > 0.5).count();
    if count < 2 {
        return Ok(None);
    }
    if pred.numel() < 2 * h * w {
        return Err(Error::Input(format!("prediction {:?} is smaller than one {h}x{w} field", pred.shape())));
    }
    let mut total = 0.0;
    for c in 0..2 {
        let plane = &pred.data()[c * h * w..(c + 1) * h * w];
        let vals: Vec<f64> = plane.iter().zip(mask).filter(|(_, &m)| m > 0.5).map(|(v, _)| *v).collect();
        let mean = vals.iter().sum::<f64>() / count as f64;
        total += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    }
    Ok(Some(total / 2.0))
}
