//! The practice-toggle grid: small-displacement opening, SSIM, extra decoder
//! convolutions, smoothness and multi-scale supervision.

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, homogeneous_variance, FlowPredictor};
use crate::motionnet::MotionNet;
use crate::parallel::map_indexed;
use crate::train::UnsupervisedTrainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Practices {
    pub small_disp: bool,
    pub ssim: bool,
    pub cdc: bool,
    pub smoothness: bool,
    pub multiscale: bool,
}

const NAMES: [&str; 5] = ["small-disp", "ssim", "cdc", "smoothness", "multiscale"];

impl Practices {
    pub const FULL: Practices = Practices { small_disp: true, ssim: true, cdc: true, smoothness: true, multiscale: true };

    fn flags(&self) -> [bool; 5] {
        [self.small_disp, self.ssim, self.cdc, self.smoothness, self.multiscale]
    }

    fn from_flags(f: [bool; 5]) -> Self {
        Self { small_disp: f[0], ssim: f[1], cdc: f[2], smoothness: f[3], multiscale: f[4] }
    }

    /// `full`, or the disabled practices as `no-a+no-b`.
    pub fn name(&self) -> String {
        let off: Vec<String> = self.flags().iter().zip(NAMES).filter(|(on, _)| !**on).map(|(_, n)| format!("no-{n}")).collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.join("+")
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let mut flags = [true; 5];
        if name.trim() == "full" {
            return Ok(Self::FULL);
        }
        for part in name.split('+') {
            let part = part.trim();
            let idx = part
                .strip_prefix("no-")
                .and_then(|p| NAMES.iter().position(|n| *n == p))
                .ok_or_else(|| Error::Input(format!("unknown ablation row `{part}`; expected `full` or no-{{{}}}", NAMES.join(","))))?;
            flags[idx] = false;
        }
        Ok(Self::from_flags(flags))
    }

    /// All 32 combinations, `full` first.
    pub fn grid() -> Vec<Self> {
        (0..32u32).map(|m| Self::from_flags(std::array::from_fn(|i| m & (1 << i) == 0))).collect()
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.motionnet.use_small_disp = self.small_disp;
        cfg.motionnet.use_cdc = self.cdc;
        cfg.motionnet.use_multiscale = self.multiscale;
        if !self.ssim {
            cfg.loss.lambda_ssim = 0.0;
        }
        if !self.smoothness {
            cfg.loss.lambda_smooth = 0.0;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub practices: Practices,
    pub seed: u64,
    pub mean_epe: f64,
    pub fl_percent: f64,
    /// Mean flow variance inside flat patches of the evaluation set.
    pub homogeneous_variance: Option<f64>,
    pub parameters: usize,
}

/// Trains and evaluates `cfg` from scratch with `seed`.
pub fn train_and_evaluate(cfg: &RunConfig, seed: u64, name: &str) -> Result<(MotionNet, AblationRow)> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let net = MotionNet::build(&cfg.motionnet, seed)?;
    let mut trainer = UnsupervisedTrainer::new(net, cfg.loss.clone(), cfg.data.flow.clone(), cfg.train.clone())?;
    trainer.run(|_, _| Ok(()))?;
    let net = trainer.net;
    let eval = cfg.data.flow.generate(cfg.data.eval_seed, cfg.data.eval_samples, cfg.motionnet.input_frames)?;
    let report = evaluate_dataset(&net, &eval)?;
    let variances = map_indexed(eval.len(), |i| net.predict_flow(&eval[i]).and_then(|p| homogeneous_variance(&p, &eval[i])));
    let variances: Vec<f64> = variances.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let homogeneous = (!variances.is_empty()).then(|| variances.iter().sum::<f64>() / variances.len() as f64);
    let row = AblationRow {
        name: name.into(),
        practices: Practices::FULL,
        seed,
        mean_epe: report.mean_epe,
        fl_percent: report.fl_percent,
        homogeneous_variance: homogeneous,
        parameters: net.parameter_count(),
    };
    Ok((net, row))
}

pub fn run_row(base: &RunConfig, practices: Practices, seed: u64) -> Result<AblationRow> {
    let (_, mut row) = train_and_evaluate(&practices.apply(base), seed, &practices.name())?;
    row.practices = practices;
    Ok(row)
}
