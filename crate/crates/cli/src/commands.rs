use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use motionflow::ablation::{run_row, AblationRow, Practices};
use motionflow::config::RunConfig;
use motionflow::eval::{evaluate_dataset, EvalReport, FlowPredictor, OraclePredictor, ZeroPredictor};
use motionflow::flow_io::{flow_to_color, load_frame, read_flo, save_frame_png, save_png, write_flo};
use motionflow::motionnet::MotionNet;
use motionflow::params::Checkpoint;
use motionflow::stacked::{train_stacked, ClassifierHead, StackedModel};
use motionflow::synth::{gen_clip, sample_seed, ClipSample};
use motionflow::train::UnsupervisedTrainer;
use motionflow::{Error, Result, Tensor};
use serde_json::json;

use crate::{AblateArgs, EvalArgs, InferArgs, PredictorKind, TrainArgs, VizArgs};

const RESOLVED_CONFIG: &str = "resolved_config.toml";
const METRICS_LOG: &str = "metrics.jsonl";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_line(out: &mut impl Write, path: &Path, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.ckpt"))
}

fn open_log(dir: &Path, append: bool) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(METRICS_LOG);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

/// The configuration embedded in a checkpoint.
fn checkpoint_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_toml_str(&ckpt.metadata)
}

fn load_motionnet(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<MotionNet> {
    let mut net = MotionNet::build(&cfg.motionnet, cfg.train.seed)?;
    net.params_mut().load_from(&ckpt.tensors, "motionnet/")?;
    Ok(net)
}

fn build_head(cfg: &RunConfig) -> Result<ClassifierHead> {
    ClassifierHead::build(
        &cfg.stacked.head(cfg.motionnet.activation_slope),
        cfg.stacked.normalization(),
        cfg.motionnet.flow_channels(),
        cfg.train.seed.wrapping_add(1),
    )
}

fn has_head(ckpt: &Checkpoint) -> bool {
    ckpt.tensors.iter().any(|(n, _)| n.starts_with("head/"))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = match (&args.config, &args.resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(r)) => checkpoint_config(&Checkpoint::load(r)?)?,
        (None, None) => RunConfig::default(),
    };
    let out = args.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.train.output_dir));
    create_dir(&out)?;
    let resolved = cfg.to_toml();
    write_text(&out.join(RESOLVED_CONFIG), &resolved)?;
    if args.stacked {
        if args.resume.is_some() {
            return Err(Error::Input("--resume applies to flow training only".into()));
        }
        return train_stacked_cmd(&cfg, &resolved, args.init.as_deref(), &out);
    }

    let net = MotionNet::build(&cfg.motionnet, cfg.train.seed)?;
    let mut trainer = UnsupervisedTrainer::new(net, cfg.loss.clone(), cfg.data.flow.clone(), cfg.train.clone())?;
    if let Some(r) = &args.resume {
        trainer.restore(&Checkpoint::load(r)?.tensors)?;
        println!("resumed at step {}", trainer.step());
    }
    let (log_path, mut log) = open_log(&out, args.resume.is_some())?;
    let start = Instant::now();
    let every = cfg.train.checkpoint_every;
    let last = cfg.train.steps;
    trainer.run(|t, r| {
        let line = json!({
            "step": r.step,
            "total": r.total,
            "pixel": r.parts.pixel,
            "smooth": r.parts.smooth,
            "ssim": r.parts.ssim,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        json_line(&mut log, &log_path, &line)?;
        if r.step % every == 0 || r.step == last {
            Checkpoint { metadata: resolved.clone(), tensors: t.state_entries() }.save(checkpoint_path(&out, r.step))?;
        }
        Ok(())
    })?;
    println!("trained {} steps in {:.1}s; output in {}", trainer.step(), start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn train_stacked_cmd(cfg: &RunConfig, resolved: &str, init: Option<&Path>, out: &Path) -> Result<()> {
    let motion = match init {
        Some(p) => load_motionnet(cfg, &Checkpoint::load(p)?)?,
        None => MotionNet::build(&cfg.motionnet, cfg.train.seed)?,
    };
    let model = StackedModel { motion, head: build_head(cfg)? };
    let (log_path, mut log) = open_log(out, false)?;
    let start = Instant::now();
    let tcfg = cfg.stacked.train_config(cfg.train.seed);
    let trained = train_stacked(model, &cfg.data.clips, cfg.stacked.mode, &cfg.loss, &tcfg, |_, r| {
        let line = json!({
            "step": r.step,
            "action_loss": r.action_loss,
            "unsup_loss": r.unsup_loss,
            "motion_grad_norm": r.motion_grad_norm,
            "batch_accuracy": r.batch_accuracy,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        json_line(&mut log, &log_path, &line).map(ControlFlow::Continue)
    })?;
    let path = checkpoint_path(out, tcfg.steps);
    Checkpoint { metadata: resolved.to_string(), tensors: trained.model.state_entries() }.save(&path)?;
    let clips = eval_clips(cfg, cfg.data.eval_samples)?;
    let report = evaluate_dataset(&trained.model, &clips)?;
    println!(
        "fine-tuned {:?} for {} steps in {:.1}s; held-out accuracy {:.3}; checkpoint {}",
        cfg.stacked.mode,
        tcfg.steps,
        start.elapsed().as_secs_f64(),
        report.accuracy.unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn eval_clips(cfg: &RunConfig, count: usize) -> Result<Vec<ClipSample>> {
    (0..count as u64).map(|i| gen_clip(sample_seed(cfg.data.eval_seed, i), &cfg.data.clips, cfg.motionnet.input_frames)).collect()
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint_config(&ckpt)?;
    let net = load_motionnet(&cfg, &ckpt)?;
    let pattern = glob::glob(&args.frames).map_err(|e| Error::Input(format!("bad frame glob `{}`: {e}", args.frames)))?;
    let mut paths: Vec<PathBuf> = pattern.filter_map(|p| p.ok()).filter(|p| p.is_file()).collect();
    paths.sort();
    let f = cfg.motionnet.input_frames;
    if paths.len() < f {
        return Err(Error::Input(format!("{} frames match `{}`; the model needs at least {f}", paths.len(), args.frames)));
    }
    let frames = paths.iter().map(load_frame).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = frames.iter().position(|t| t.shape() != frames[0].shape()) {
        return Err(Error::Input(format!("{} has extent {:?}, expected {:?}", paths[bad].display(), frames[bad].shape(), frames[0].shape())));
    }
    let [_, _, h, w] = frames[0].dims4()?;
    cfg.motionnet.check_extent(h, w)?;

    // windows of F frames overlapping by one, so every consecutive pair is covered once
    let starts: Vec<usize> = (0..).map(|k| k * (f - 1)).take_while(|s| s + f <= frames.len()).collect();
    let inputs = starts
        .iter()
        .map(|&s| Tensor::stack_batch(&frames[s..s + f]).and_then(|t| t.reshape([1, 3 * f, h, w])))
        .collect::<Result<Vec<_>>>()?;
    let flows = inputs.iter().map(|x| net.infer_flow(x)).collect::<Result<Vec<_>>>()?;

    create_dir(&args.out_dir)?;
    let (flo, png) = (args.flo || !args.png, args.png);
    let mut written = 0;
    for (&s, flow) in starts.iter().zip(&flows) {
        for k in 0..f - 1 {
            let field = Tensor::new([1, 2, h, w], flow.data()[2 * k * h * w..2 * (k + 1) * h * w].to_vec())?;
            let stem = args.out_dir.join(format!("flow_{:04}", s + k));
            if flo {
                write_flo(stem.with_extension("flo"), &field)?;
            }
            if png {
                save_png(&flow_to_color(&field, None)?, stem.with_extension("png"))?;
            }
            written += 1;
        }
    }
    if starts.last().map(|s| s + f) != Some(frames.len()) {
        eprintln!("warning: trailing frames after the last full window of {f} were skipped");
    }

    let repeats = args.repeats.max(10);
    let t0 = Instant::now();
    for _ in 0..repeats {
        for x in &inputs {
            std::hint::black_box(net.infer_flow(x)?);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pairs = (repeats * written) as f64;
    println!("wrote {written} flow fields to {}", args.out_dir.display());
    println!("throughput: {:.2} pairs/s over {repeats} repeats ({:.2} frames/s)", pairs / secs, (repeats * starts.len() * f) as f64 / secs);
    Ok(())
}

/// Samples exported by `viz --export`: `frame_*.png`, `flow_*.flo` and an
/// optional `label.txt` per subdirectory.
fn load_sample_dir(root: &Path) -> Result<Vec<ClipSample>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut samples = Vec::new();
    for dir in dirs {
        let sorted = |prefix: &str, ext: &str| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with(prefix) && name.ends_with(ext)
                })
                .collect();
            v.sort();
            Ok(v)
        };
        let frame_paths = sorted("frame_", ".png")?;
        let flow_paths = sorted("flow_", ".flo")?;
        if frame_paths.len() < 2 {
            return Err(Error::Input(format!("{} holds fewer than 2 frames", dir.display())));
        }
        if flow_paths.len() != frame_paths.len() - 1 {
            return Err(Error::Input(format!(
                "{}: missing ground truth ({} frames but {} .flo files)",
                dir.display(),
                frame_paths.len(),
                flow_paths.len()
            )));
        }
        let frames = Tensor::stack_batch(&frame_paths.iter().map(load_frame).collect::<Result<Vec<_>>>()?)?;
        let gt_flows = Tensor::stack_batch(&flow_paths.iter().map(read_flo).collect::<Result<Vec<_>>>()?)?;
        let [f, _, h, w] = frames.dims4()?;
        if gt_flows.shape()[2..] != [h, w] {
            return Err(Error::Input(format!("{}: flow extent differs from the frames", dir.display())));
        }
        let label_path = dir.join("label.txt");
        let label = match fs::read_to_string(&label_path) {
            Ok(text) => Some(text.trim().parse().map_err(|_| Error::Input(format!("{}: not a class index", label_path.display())))?),
            Err(_) => None,
        };
        samples.push(ClipSample {
            frames,
            gt_flows,
            foreground: Tensor::zeros([f, 1, h, w]),
            homogeneous: Tensor::zeros([1, 1, h, w]),
            label,
            seed: 0,
        });
    }
    Ok(samples)
}

fn print_report(report: &EvalReport, json_out: bool) {
    if json_out {
        println!("{}", serde_json::to_string(report).expect("report serializes"));
        return;
    }
    println!("{:<10} {:>12}", "metric", "value");
    println!("{:<10} {:>12.4}", "EPE", report.mean_epe);
    println!("{:<10} {:>11.2}%", "Fl", report.fl_percent);
    if let Some(a) = report.accuracy {
        println!("{:<10} {:>12.4}", "accuracy", a);
    }
    println!("{:<10} {:>12}", "samples", report.sample_count);
    let acc = report.accuracy.map_or("null".to_string(), |a| a.to_string());
    println!("metrics epe={} fl={} accuracy={} samples={}", report.mean_epe, report.fl_percent, acc, report.sample_count);
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = match (&args.config, &ckpt) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => checkpoint_config(c)?,
        (None, None) => RunConfig::default(),
    };
    let count = args.samples.unwrap_or(cfg.data.eval_samples);
    if count == 0 {
        return Err(Error::Input("--samples must be positive".into()));
    }
    let samples = match &args.data_dir {
        Some(dir) => load_sample_dir(dir)?,
        None if args.clips || ckpt.as_ref().is_some_and(has_head) => eval_clips(&cfg, count)?,
        None => cfg.data.flow.generate(cfg.data.eval_seed, count, cfg.motionnet.input_frames)?,
    };
    if samples.is_empty() {
        return Err(Error::Input("the dataset holds no samples".into()));
    }

    let model: Box<dyn FlowPredictor> = match args.predictor {
        PredictorKind::Oracle => Box::new(OraclePredictor),
        PredictorKind::Zero => Box::new(ZeroPredictor),
        PredictorKind::Model => {
            let ckpt = ckpt.as_ref().ok_or_else(|| Error::Input("--predictor model needs --checkpoint".into()))?;
            let motion = load_motionnet(&cfg, ckpt)?;
            if has_head(ckpt) {
                let mut head = build_head(&cfg)?;
                head.params_mut().load_from(&ckpt.tensors, "head/")?;
                Box::new(StackedModel { motion, head })
            } else {
                Box::new(motion)
            }
        }
    };
    let expected = cfg.motionnet.input_frames;
    if args.predictor == PredictorKind::Model {
        if let Some(s) = samples.iter().find(|s| s.frame_count() != expected) {
            return Err(Error::Input(format!("sample has {} frames; the model takes {expected}", s.frame_count())));
        }
    }
    let report = evaluate_dataset(model.as_ref(), &samples)?;
    print_report(&report, args.json);
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Input(format!("bad seed `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Input("no seeds given".into()));
    }
    Ok(seeds)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let base = load_config(args.config.as_deref())?;
    let rows = match &args.subset {
        Some(list) => list.split(',').map(Practices::parse).collect::<Result<Vec<_>>>()?,
        None => Practices::grid(),
    };
    let seeds = parse_seeds(&args.seeds)?;
    let out = args.out_dir.clone().unwrap_or_else(|| PathBuf::from(&base.train.output_dir).join("ablation"));
    create_dir(&out)?;
    write_text(&out.join(RESOLVED_CONFIG), &base.to_toml())?;
    let log_path = out.join("ablation.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut best: Vec<AblationRow> = Vec::new();
    for p in &rows {
        let mut row_best: Option<AblationRow> = None;
        for &seed in &seeds {
            let row = run_row(&base, *p, seed)?;
            json_line(&mut log, &log_path, &serde_json::to_value(&row).expect("row serializes"))?;
            if row_best.as_ref().is_none_or(|b| row.mean_epe < b.mean_epe) {
                row_best = Some(row);
            }
        }
        best.push(row_best.expect("at least one seed"));
    }
    if args.json {
        for r in &best {
            println!("{}", serde_json::to_string(r).expect("row serializes"));
        }
        return Ok(());
    }
    println!(
        "{:<40} {:>10} {:>5} {:>4} {:>6} {:>10} {:>5} {:>9} {:>8} {:>11}",
        "row", "small_disp", "ssim", "cdc", "smooth", "multiscale", "seed", "EPE", "Fl%", "flat_var"
    );
    for r in &best {
        let p = r.practices;
        println!(
            "{:<40} {:>10} {:>5} {:>4} {:>6} {:>10} {:>5} {:>9.4} {:>8.2} {:>11}",
            r.name,
            yes_no(p.small_disp),
            yes_no(p.ssim),
            yes_no(p.cdc),
            yes_no(p.smoothness),
            yes_no(p.multiscale),
            r.seed,
            r.mean_epe,
            r.fl_percent,
            r.homogeneous_variance.map_or("-".to_string(), |v| format!("{v:.3e}")),
        );
    }
    Ok(())
}

pub fn viz(args: &VizArgs) -> Result<()> {
    if let Some(flo) = &args.flo {
        let field = read_flo(flo)?;
        let out = args.out.clone().unwrap_or_else(|| flo.with_extension("png"));
        save_png(&flow_to_color(&field, args.max_mag)?, &out)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let Some(count) = args.export else {
        return Err(Error::Input("give --flo FILE or --export N".into()));
    };
    let cfg = load_config(args.config.as_deref())?;
    let out = args.out_dir.clone().ok_or_else(|| Error::Input("--export needs --out-dir".into()))?;
    let frames = args.frames.unwrap_or(cfg.motionnet.input_frames);
    if frames < 2 {
        return Err(Error::Input("--frames must be at least 2".into()));
    }
    for i in 0..count {
        let seed = sample_seed(cfg.data.eval_seed, i as u64);
        let sample = if args.clips { gen_clip(seed, &cfg.data.clips, frames)? } else { cfg.data.flow.sample(seed, frames)? };
        let dir = out.join(format!("sample_{i:04}"));
        create_dir(&dir)?;
        for t in 0..frames {
            save_frame_png(&sample.frames.narrow_batch(t, 1)?, dir.join(format!("frame_{t:02}.png")))?;
        }
        for t in 0..frames - 1 {
            let field = sample.gt_flows.narrow_batch(t, 1)?;
            write_flo(dir.join(format!("flow_{t:02}.flo")), &field)?;
            save_png(&flow_to_color(&field, args.max_mag)?, dir.join(format!("flow_{t:02}.png")))?;
        }
        if let Some(l) = sample.label {
            write_text(&dir.join("label.txt"), &format!("{l}\n"))?;
        }
    }
    println!("exported {count} samples to {}", out.display());
    Ok(())
}
