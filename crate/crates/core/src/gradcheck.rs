//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-element relative deviation over all inputs.
    pub max_deviation: f64,
    /// `(input, flat element)` where the largest deviation occurred.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients of `op` against central differences with
/// step `step`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random cotangent so
/// every output element participates. The deviation of element `k` is
/// `|a - n| / max(|a|, |n|, 1e-3 * max|n|, 1e-12)`, where `max|n|` is taken
/// over the same input; entries three orders of magnitude below an input's
/// largest gradient are judged on that input's scale.
pub fn check_gradients_with_step<F>(op: F, inputs: &[Tensor], tolerance: f64, step: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let mut cotangent: Option<Tensor> = None;
    let mut objective = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| graph.param(t.clone())).collect();
        let out = op(&graph, &vars)?;
        let value = out.value();
        let r = cotangent.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
            Tensor::from_fn(value.shape().to_vec(), |_| rng.random_range(-1.0..1.0))
        });
        if r.shape() != value.shape() {
            return Err(Error::shape("check_gradients", "output shape changed between evaluations"));
        }
        let loss = out.mul(graph.constant(r.clone()))?.sum()?;
        let l = loss.value().item();
        if !l.is_finite() {
            return Err(Error::NonFinite { context: "check_gradients objective".into(), index: 0 });
        }
        let grads = if want_grad {
            let g = graph.backward(loss)?;
            vars.iter().map(|&v| g.get_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        Ok((l, grads))
    };

    let (_, analytic) = objective(inputs, true)?;
    let mut report = GradCheckReport { max_deviation: 0.0, worst: (0, 0), tolerance, passed: true };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if let Some(index) = grad.first_non_finite() {
            return Err(Error::NonFinite { context: format!("analytic gradient of input {i}"), index });
        }
        let mut numeric = vec![0.0; grad.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[k];
            probe[i].data_mut()[k] = orig + step;
            let (plus, _) = objective(&probe, false)?;
            probe[i].data_mut()[k] = orig - step;
            let (minus, _) = objective(&probe, false)?;
            probe[i].data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * step);
            if !slot.is_finite() {
                return Err(Error::NonFinite { context: format!("numeric gradient of input {i}"), index: k });
            }
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (k, (&a, &n)) in grad.data().iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12);
            let dev = (a - n).abs() / denom;
            if dev > report.max_deviation {
                report.max_deviation = dev;
                report.worst = (i, k);
            }
        }
    }
    report.passed = report.max_deviation <= tolerance;
    Ok(report)
}

/// [`check_gradients_with_step`] with the default step `1e-4`.
pub fn check_gradients<F>(op: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_gradients_with_step(op, inputs, tolerance, 1e-4)
}

/// Uniform samples in `[lo, hi)` from a seeded generator.
pub fn random_tensor(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
