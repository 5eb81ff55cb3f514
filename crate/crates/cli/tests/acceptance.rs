//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails. `MOTIONFLOW_ACCEPTANCE=2,3,7` restricts the run
//! to the listed criteria; the default runs all ten (roughly an hour on one
//! core, dominated by criteria 4 to 6).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use motionflow::ablation::{run_row, Practices};
use motionflow::config::RunConfig;
use motionflow::eval::{epe, evaluate_dataset, ZeroPredictor};
use motionflow::flow_io::{decode_flo, encode_flo, FLO_TAG};
use motionflow::gradcheck::random_tensor;
use motionflow::kernels::{conv2d_forward, conv_transpose2d_forward};
use motionflow::losses::{charbonnier_value, smoothness_loss, ssim_loss, ssim_patch, LossConfig};
use motionflow::motionnet::MotionNet;
use motionflow::stacked::{argmax_rows, fuse_scores, normalize_flow, train_stacked, ClassifierHead, FineTuneMode, NormalizationSpec, StackedModel};
use motionflow::synth::{gen_clip, sample_seed, ClipSample, MotionMode};
use motionflow::train::UnsupervisedTrainer;
use motionflow::warp::backward_warp;
use motionflow::{Graph, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lib<T>(r: motionflow::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1

const GRAD_BUDGET_S: f64 = 120.0;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let cases = common::gradient_cases();
    for case in &cases {
        for seed in common::GRAD_SEEDS {
            match (case.run)(seed) {
                Ok(r) => {
                    worst = worst.max(r.max_deviation);
                    if !r.passed {
                        failures.push(format!("{} seed {seed}: {:.2e}", case.name, r.max_deviation));
                    }
                }
                Err(e) => failures.push(format!("{} seed {seed}: {e}", case.name)),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} operations x {} seeds, worst relative error {worst:.2e} (limit {:.0e}), {secs:.1}s (limit {GRAD_BUDGET_S}s){}",
        cases.len(),
        common::GRAD_SEEDS.len(),
        common::GRAD_TOL,
        if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
    );
    check(failures.is_empty() && secs < GRAD_BUDGET_S, detail)
}

// 2

fn closed_form_losses() -> Outcome {
    let cfg = LossConfig::default();
    let floor = cfg.epsilon.powf(2.0 * cfg.alpha);
    let mut errs = Vec::new();

    let c0 = charbonnier_value(0.0, cfg.epsilon, cfg.alpha);
    errs.push(("charbonnier(0)", (c0 - floor).abs()));

    let patch = random_tensor([1, 3, 8, 8], 0.0, 1.0, 3);
    let s = lib(ssim_patch(&patch, &patch, &cfg))?;
    errs.push(("ssim(identical)", (s - 1.0).abs()));
    let g = Graph::new();
    let img = g.constant(random_tensor([2, 3, 16, 16], 0.0, 1.0, 4));
    let l = lib(ssim_loss(img, img, &cfg))?.value().item();
    errs.push(("ssim_loss(identical)", l.abs()));

    let flow = g.constant(Tensor::full([2, 2, 9, 7], 1.7));
    let sm = lib(smoothness_loss(flow, &cfg))?.value().item();
    errs.push(("smoothness(constant)", (sm - 4.0 * floor).abs()));

    let pred = Tensor::from_fn([1, 2, 5, 5], |i| if i < 25 { 3.0 } else { 4.0 });
    let e = lib(epe(&pred, &Tensor::zeros([1, 2, 5, 5]), None))?;
    errs.push(("epe((3,4), 0)", (e - 5.0).abs()));

    let worst = errs.iter().fold(0.0_f64, |m, (_, d)| m.max(*d));
    let detail = errs.iter().map(|(n, d)| format!("{n} off by {d:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst <= 1e-12, detail)
}

// 3

fn warp_identities() -> Outcome {
    let g = Graph::new();
    let img = random_tensor([2, 3, 12, 10], 0.0, 1.0, 5);
    let warped = lib(backward_warp(g.constant(img.clone()), g.constant(Tensor::zeros([2, 2, 12, 10]))))?.value();
    let identity = warped.data() == img.data();

    let (h, w) = (12usize, 10usize);
    let ramp = Tensor::from_fn([1, 3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        x as f64 + 2.0 * y as f64 + 0.5 * c as f64
    });
    let (dx, dy) = (2usize, 1usize);
    let shift = Tensor::from_fn([1, 2, h, w], |i| if i < h * w { dx as f64 } else { dy as f64 });
    let shifted = lib(backward_warp(g.constant(ramp.clone()), g.constant(shift)))?.value();
    let mut shift_exact = true;
    for c in 0..3 {
        for y in 0..h - dy {
            for x in 0..w - dx {
                shift_exact &= shifted.at4(0, c, y, x) == ramp.at4(0, c, y + dy, x + dx);
            }
        }
    }

    // <conv(x, w), y> == <x, conv_t(y, w)>
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let x = random_tensor([2, 3, 8, 8], -1.0, 1.0, 100 + seed);
        let wt = random_tensor([4, 3, 4, 4], -1.0, 1.0, 200 + seed);
        let y = random_tensor([2, 4, 4, 4], -1.0, 1.0, 300 + seed);
        let lhs = lib(conv2d_forward(&x, &wt, None, 2, 1))?.dot(&y);
        let rhs = x.dot(&lib(conv_transpose2d_forward(&y, &wt, None, 2, 1))?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    let detail = format!("zero-flow identity bit-exact: {identity}; integer shift exact: {shift_exact}; adjoint relative gap {worst:.1e} (limit 1e-9)");
    check(identity && shift_exact && worst <= 1e-9, detail)
}

// 4

const FLOW_EPE_LIMIT: f64 = 1.0;
const ZERO_EPE_FLOOR: f64 = 2.5;

/// 64x64 inputs, base 16, two frames, 3000 steps on translation pairs with
/// |d| <= 5 px. The smoothness weight and step size differ from the library
/// defaults; see the README.
fn flow_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.motionnet.input_frames = 2;
    cfg.motionnet.base_channels = 16;
    cfg.data.flow.scene.height = 64;
    cfg.data.flow.scene.width = 64;
    cfg.data.flow.max_displacement = 5.0;
    cfg.data.eval_samples = 64;
    cfg.loss.lambda_smooth = 0.1;
    cfg.train.steps = 3000;
    cfg.train.learning_rate = 1e-3;
    cfg.train.lr_milestones = vec![2000, 2500];
    cfg.train.seed = 1;
    cfg
}

fn train_flow_net(cfg: &RunConfig) -> Result<MotionNet, String> {
    lib(cfg.validate())?;
    let net = lib(MotionNet::build(&cfg.motionnet, cfg.train.seed))?;
    let mut trainer = lib(UnsupervisedTrainer::new(net, cfg.loss.clone(), cfg.data.flow.clone(), cfg.train.clone()))?;
    lib(trainer.run(|_, _| Ok(())))?;
    Ok(trainer.net)
}

fn flow_learning() -> Outcome {
    let start = Instant::now();
    let cfg = flow_config();
    let net = train_flow_net(&cfg)?;
    let train_secs = start.elapsed().as_secs_f64();
    let eval = lib(cfg.data.flow.generate(cfg.data.eval_seed, cfg.data.eval_samples, 2))?;
    let model = lib(evaluate_dataset(&net, &eval))?;
    let zero = lib(evaluate_dataset(&ZeroPredictor, &eval))?;
    let detail = format!(
        "held-out EPE {:.3} px (limit {FLOW_EPE_LIMIT}), zero-flow EPE {:.3} px (floor {ZERO_EPE_FLOOR}), Fl {:.2}%, {} samples, {train_secs:.0}s",
        model.mean_epe, zero.mean_epe, model.fl_percent, model.sample_count
    );
    check(model.mean_epe < FLOW_EPE_LIMIT && zero.mean_epe >= ZERO_EPE_FLOOR, detail)
}

// 5

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

/// 32x32 inputs, half the samples carry a flat patch. At this scale and
/// step budget a smoothness weight of 0.1 still stalls early training, so
/// the grid runs with 0.02.
fn ablation_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.motionnet.input_frames = 2;
    cfg.motionnet.levels = 5;
    cfg.data.flow.scene.height = 32;
    cfg.data.flow.scene.width = 32;
    cfg.data.flow.homogeneous_fraction = 0.5;
    cfg.data.eval_samples = 32;
    cfg.loss.lambda_smooth = 0.02;
    cfg.loss.ssim_window = 8;
    cfg.train.steps = 2000;
    cfg.train.learning_rate = 1e-3;
    cfg
}

fn ablation_direction() -> Outcome {
    let base = ablation_config();
    let mut tried = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut rows = BTreeMap::new();
        for name in ["full", "no-smoothness", "no-ssim"] {
            let p = lib(Practices::parse(name))?;
            rows.insert(name, lib(run_row(&base, p, seed))?);
        }
        let (full, nosm, nossim) = (&rows["full"], &rows["no-smoothness"], &rows["no-ssim"]);
        let var_ok = match (full.homogeneous_variance, nosm.homogeneous_variance) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        };
        let ok = full.mean_epe < nosm.mean_epe && full.mean_epe < nossim.mean_epe && var_ok;
        let line = format!(
            "seed {seed}: EPE full {:.3} / no-smoothness {:.3} / no-ssim {:.3}, flat-patch variance full {:.4} / no-smoothness {:.4}",
            full.mean_epe,
            nosm.mean_epe,
            nossim.mean_epe,
            full.homogeneous_variance.unwrap_or(f64::NAN),
            nosm.homogeneous_variance.unwrap_or(f64::NAN)
        );
        tried.push(line);
        if ok {
            return Ok(tried.join("; "));
        }
    }
    Err(tried.join("; "))
}

// 6

const STACK_ACCURACY: f64 = 0.95;
const STACK_STEP_BUDGET: usize = 2000;
const STACK_EVAL_EVERY: usize = 50;
const STACK_EVAL_CLIPS: usize = 100;

/// The flow network is pretrained like criterion 4 but on independently
/// moving object and background, which covers the object-only motion of the
/// clips. Classes move 3 px (or 0.25 rad) per step; the head trains at 1e-3
/// and the flow network, when trainable, at 1e-4.
fn stacked_config() -> RunConfig {
    let mut cfg = flow_config();
    cfg.data.flow.mode = MotionMode::Independent;
    cfg.data.clips.step = 3.0;
    cfg.data.clips.rotate_step = 0.25;
    cfg.stacked.learning_rate = 1e-3;
    cfg.stacked.motion_learning_rate = Some(1e-4);
    cfg.stacked.steps = STACK_STEP_BUDGET;
    cfg
}

fn held_out_accuracy(model: &StackedModel, clips: &[ClipSample]) -> motionflow::Result<f64> {
    let mut correct = 0;
    for c in clips {
        correct += usize::from(model.predict_labels(&c.stacked_frames())?[0] == c.label.expect("labelled"));
    }
    Ok(correct as f64 / clips.len() as f64)
}

fn stacked_modes() -> Outcome {
    let cfg = stacked_config();
    let start = Instant::now();
    let motion = train_flow_net(&cfg)?;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let clips: Vec<ClipSample> =
        lib((0..STACK_EVAL_CLIPS as u64).map(|i| gen_clip(sample_seed(cfg.data.eval_seed, i), &cfg.data.clips, 2)).collect())?;
    let mut parts = vec![format!("flow network pretrained in {pretrain_secs:.0}s")];
    let mut ok = true;
    for mode in FineTuneMode::ALL {
        let head = lib(ClassifierHead::build(
            &cfg.stacked.head(cfg.motionnet.activation_slope),
            cfg.stacked.normalization(),
            cfg.motionnet.flow_channels(),
            cfg.train.seed + 1,
        ))?;
        let before = motion.params().tensors().to_vec();
        let mut reached = None;
        let mut best = 0.0_f64;
        let trained = lib(train_stacked(
            StackedModel { motion: motion.clone(), head },
            &cfg.data.clips,
            mode,
            &cfg.loss,
            &cfg.stacked.train_config(cfg.train.seed),
            |m, r| {
                if r.step % STACK_EVAL_EVERY == 0 {
                    let acc = held_out_accuracy(m, &clips)?;
                    best = best.max(acc);
                    if acc >= STACK_ACCURACY {
                        reached = Some((r.step, acc));
                        return Ok(ControlFlow::Break(()));
                    }
                }
                Ok(ControlFlow::Continue(()))
            },
        ))?;
        let mut part = match reached {
            Some((step, acc)) => format!("{mode:?} {:.0}% at step {step}", acc * 100.0),
            None => {
                ok = false;
                format!("{mode:?} best {:.0}% within {STACK_STEP_BUDGET} steps", best * 100.0)
            }
        };
        if mode == FineTuneMode::FixedMotionNet {
            let frozen = trained.model.motion.params().tensors() == before.as_slice();
            ok &= frozen;
            part.push_str(&format!(" (flow weights bit-identical: {frozen})"));
        }
        parts.push(part);
    }
    check(ok, parts.join("; "))
}

// 7

fn normalization_layer() -> Outcome {
    let spec = NormalizationSpec::default();
    let table = [(-25.0, 0.0), (-20.0, 0.0), (0.0, 128.0), (20.0, 255.0), (35.0, 255.0)];
    let g = Graph::new();
    let input = Tensor::new([1, 1, 1, 5], table.iter().map(|t| t.0).collect()).expect("5 values");
    let layer = lib(normalize_flow(g.constant(input), spec))?.value();
    let table_ok = table.iter().zip(layer.data()).all(|(&(v, q), &out)| spec.apply(v) == q && out == q);

    let values = random_tensor([10_000], -40.0, 40.0, 7);
    let mut sorted = values.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let mapped: Vec<f64> = sorted.iter().map(|&v| spec.apply(v)).collect();
    let monotone = mapped.windows(2).all(|p| p[0] <= p[1]);
    let in_range = mapped.iter().all(|q| (0.0..=255.0).contains(q) && q.fract() == 0.0);
    check(table_ok && monotone && in_range, format!("table exact: {table_ok}; monotone over 10^4 values: {monotone}; integer outputs in [0, 255]: {in_range}"))
}

// 8

fn flo_interchange() -> Outcome {
    let mut exact = 0;
    for i in 0..100u64 {
        let (h, w) = (1 + (i % 7) as usize, 1 + (i % 11) as usize);
        let field = random_tensor([1, 2, h, w], -30.0, 30.0, 1000 + i).map(|v| v as f32 as f64);
        let bytes = lib(encode_flo(&field))?;
        let back = lib(decode_flo(&bytes))?;
        if back.shape() == field.shape() && back.data() == field.data() && lib(encode_flo(&back))? == bytes {
            exact += 1;
        }
    }

    let mut fixture = Vec::new();
    fixture.extend_from_slice(&FLO_TAG.to_le_bytes());
    fixture.extend_from_slice(&2i32.to_le_bytes());
    fixture.extend_from_slice(&2i32.to_le_bytes());
    for v in [1.0f32, -1.0, 0.5, 0.0, -2.25, 3.0, 0.125, -0.75] {
        fixture.extend_from_slice(&v.to_le_bytes());
    }
    let parsed = lib(decode_flo(&fixture))?;
    // Interleaved (u, v) per pixel in row-major order.
    let fixture_ok = parsed.shape() == [1, 2, 2, 2] && parsed.data() == [1.0, 0.5, -2.25, 0.125, -1.0, 0.0, 3.0, -0.75];

    let mut corrupt = fixture.clone();
    corrupt[0] ^= 0xff;
    let rejected = decode_flo(&corrupt).is_err();
    check(
        exact == 100 && fixture_ok && rejected,
        format!("{exact}/100 random fields bit-exact; 2x2 fixture parsed: {fixture_ok}; corrupt magic rejected: {rejected}"),
    )
}

// 9

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_motionflow")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("motionflow {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Metrics log lines without the wall-clock field.
fn log_without_time(path: &Path) -> Result<Vec<String>, String> {
    let text = String::from_utf8(read(path)?).map_err(|e| e.to_string())?;
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).map_err(|e| e.to_string())?;
            v.as_object_mut().ok_or("log line is not an object")?.remove("wall_time_s");
            Ok(v.to_string())
        })
        .collect()
}

const DETERMINISM_CONFIG: &str = "\
[motionnet]
input_frames = 2
base_channels = 4
max_channels = 8
levels = 3

[loss]
ssim_window = 4

[data.flow.scene]
height = 16
width = 16

[data.flow]
max_displacement = 2.0

[train]
steps = 6
checkpoint_every = 3
batch_size = 2
learning_rate = 0.001
";

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let config = root.join("run.toml");
    fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().expect("utf-8 temp path").to_string();
    let (a, b, c, d) = (root.join("a"), root.join("b"), root.join("c"), root.join("d"));
    run_cli(&["train", "--config", &s(&config), "--out-dir", &s(&a)])?;
    run_cli(&["train", "--config", &s(&config), "--out-dir", &s(&b)])?;
    run_cli(&["train", "--resume", &s(&a.join("checkpoint_000003.ckpt")), "--out-dir", &s(&c)])?;
    run_cli(&["train", "--config", &s(&a.join("resolved_config.toml")), "--out-dir", &s(&d)])?;

    let final_ckpt = "checkpoint_000006.ckpt";
    let log = "metrics.jsonl";
    let reruns = read(&a.join(final_ckpt))? == read(&b.join(final_ckpt))?
        && read(&a.join("checkpoint_000003.ckpt"))? == read(&b.join("checkpoint_000003.ckpt"))?
        && log_without_time(&a.join(log))? == log_without_time(&b.join(log))?;
    let full = log_without_time(&a.join(log))?;
    let resumed = read(&a.join(final_ckpt))? == read(&c.join(final_ckpt))? && log_without_time(&c.join(log))? == full[3..];
    let refed = read(&a.join(final_ckpt))? == read(&d.join(final_ckpt))?;
    check(
        reruns && resumed && refed && full.len() == 6,
        format!("repeat run identical: {reruns}; resume at step 3 matches: {resumed}; resolved config re-fed identical: {refed}"),
    )
}

// 10

fn fusion() -> Outcome {
    let a = random_tensor([6, 5], -3.0, 3.0, 21);
    let b = random_tensor([6, 5], -3.0, 3.0, 22);
    let fused = lib(fuse_scores(&a, &b, 1.0, 1.5))?;
    let worst = fused.data().iter().enumerate().map(|(i, f)| (f - (a.data()[i] + 1.5 * b.data()[i]) / 2.5).abs()).fold(0.0, f64::max);
    let reference = argmax_rows(&fused);
    let mut invariant = true;
    for k in [1e-3, 0.5, 2.0, 7.0, 1e4] {
        invariant &= argmax_rows(&lib(fuse_scores(&a, &b, k, 1.5 * k))?) == reference;
    }
    check(close(worst, 0.0, 1e-12) && invariant, format!("max deviation from hand-computed mean {worst:.1e}; argmax invariant under rescaling: {invariant}"))
}

fn selected() -> Vec<usize> {
    match std::env::var("MOTIONFLOW_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

#[test]
fn acceptance() {
    let names = [
        "gradient suite",
        "closed-form loss values",
        "warp identities",
        "flow learning",
        "ablation direction",
        "stacked classifier",
        "normalization layer",
        ".flo interchange",
        "determinism",
        "score fusion",
    ];
    let mut failed = Vec::new();
    for id in selected() {
        let start = Instant::now();
        let outcome = match id {
            1 => gradient_suite(),
            2 => closed_form_losses(),
            3 => warp_identities(),
            4 => flow_learning(),
            5 => ablation_direction(),
            6 => stacked_modes(),
            7 => normalization_layer(),
            8 => flo_interchange(),
            9 => determinism(),
            10 => fusion(),
            _ => continue,
        };
        let secs = start.elapsed().as_secs_f64();
        let (verdict, d) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(id);
                ("FAIL", d)
            }
        };
        // bypasses the harness capture so the lines show without --nocapture
        let _ = writeln!(std::io::stdout(), "{verdict} criterion {id} ({}): {d} [{secs:.1}s]", names[id - 1]);
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
