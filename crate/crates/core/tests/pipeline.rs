use motionflow::autodiff::{Graph, Var};
use motionflow::eval::{epe, evaluate_dataset, evaluate_sample, OraclePredictor, ZeroPredictor};
use motionflow::flow_io::{flow_to_color, read_flo, write_flo};
use motionflow::gradcheck::{check_gradients_with_step, random_tensor};
use motionflow::losses::{image_pyramid, pixel_loss, total_loss, LossConfig};
use motionflow::motionnet::{MotionNet, MotionNetConfig, FINEST_SCALE};
use motionflow::params::Checkpoint;
use motionflow::synth::{gen_clip, gen_pair, ClipSpec, FlowDatasetSpec, Motion, MotionMode, SceneSpec};
use motionflow::train::{TrainConfig, UnsupervisedTrainer};
use motionflow::warp::backward_warp;
use motionflow::Tensor;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn micro(levels: usize) -> MotionNetConfig {
    MotionNetConfig { input_frames: 2, base_channels: 2, max_channels: 4, levels, ..Default::default() }
}

#[test]
fn clip_classes_are_uniform_over_a_thousand_seeds() {
    let spec = ClipSpec { scene: SceneSpec { height: 16, width: 16, object_size: 0.0, ..Default::default() }, step: 1.0, ..Default::default() };
    let mut counts = [0usize; 5];
    for seed in 0..1000 {
        counts[gen_clip(seed, &spec, 2).unwrap().label.unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1000.0 - 0.2).abs() <= 0.05, "{counts:?}");
    }
}

#[test]
fn warping_the_next_frame_by_ground_truth_reproduces_the_first() {
    for (dx, dy) in [(3.0, 0.0), (-2.0, 1.0), (0.0, -4.0)] {
        let spec = SceneSpec { motion: Motion::Translate { dx, dy }, background_motion: Some([dx, dy]), ..Default::default() };
        let s = gen_pair(9, &spec).unwrap();
        let g = Graph::new();
        let next = g.constant(s.frames.narrow_batch(1, 1).unwrap());
        let rec = backward_warp(next, g.constant(s.gt_flows.clone())).unwrap().value();
        let first = s.frames.narrow_batch(0, 1).unwrap();
        let (h, w) = (64, 64);
        let mut checked = 0;
        for y in 5..h - 5 {
            for x in 5..w - 5 {
                if s.foreground.at4(0, 0, y, x) < 0.5 {
                    continue;
                }
                for c in 0..3 {
                    assert!((rec.at4(0, c, y, x) - first.at4(0, c, y, x)).abs() <= 1e-6, "d=({dx},{dy}) at ({y},{x})");
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}

#[test]
fn correct_flow_on_shifted_ramp_hits_the_floor_inside() {
    let (h, w) = (8, 10);
    let i2 = Tensor::from_fn([1, 1, h, w], |i| (i % w) as f64 * 0.1);
    let i1 = Tensor::from_fn([1, 1, h, w], |i| ((i % w) as f64 + 1.0).min((w - 1) as f64) * 0.1);
    let cfg = LossConfig::default();
    let g = Graph::new();
    let flow = Tensor::from_fn([1, 2, h, w], |i| if i < h * w { 1.0 } else { 0.0 });
    let l = pixel_loss(g.constant(i1), g.constant(i2), g.constant(flow), &cfg).unwrap().value().item();
    assert!((l - cfg.charbonnier_floor()).abs() < 1e-12, "{l}");
}

fn network_loss<'g>(net: &MotionNet, loss: &LossConfig, v: &[Var<'g>]) -> motionflow::Result<Var<'g>> {
    let (params, frames) = v.split_at(v.len() - 1);
    let pyramid = net.forward(params, frames[0])?;
    let images = image_pyramid(frames[0], FINEST_SCALE, pyramid.flows.len())?;
    Ok(total_loss(&pyramid.flows, &images, loss)?.loss)
}

#[test]
fn network_gradient_matches_finite_differences() {
    let cfg = micro(3);
    let mut net = MotionNet::build(&cfg, 4).unwrap();
    for (i, t) in net.params_mut().tensors_mut().iter_mut().enumerate() {
        *t = random_tensor(t.shape().to_vec(), -0.4, 0.4, 50 + i as u64);
    }
    let mut inputs = net.params().tensors().to_vec();
    inputs.push(random_tensor([1, 6, 16, 16], 0.0, 1.0, 3));
    let loss = LossConfig { ssim_window: 4, ..Default::default() };
    let report = check_gradients_with_step(|_, v| network_loss(&net, &loss, v), &inputs, 1e-3, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn static_training_keeps_flow_near_zero() {
    let data = FlowDatasetSpec { scene: SceneSpec { height: 16, width: 16, ..Default::default() }, mode: MotionMode::Static, ..Default::default() };
    let train = TrainConfig { steps: 30, learning_rate: 1e-3, batch_size: 2, ..Default::default() };
    let loss = LossConfig { ssim_window: 4, ..Default::default() };
    let mut t = UnsupervisedTrainer::new(MotionNet::build(&micro(3), 1).unwrap(), loss, data.clone(), train).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let s = data.sample(77, 2).unwrap();
    let f = t.net.infer_flow(&s.stacked_frames()).unwrap();
    let n = f.numel() / 2;
    let mean_mag = (0..n).map(|p| f.data()[p].hypot(f.data()[n + p])).sum::<f64>() / n as f64;
    assert!(mean_mag < 0.1, "{mean_mag}");
}

#[test]
fn zero_predictor_scores_five_on_three_four_translation() {
    let spec = SceneSpec { motion: Motion::Translate { dx: 3.0, dy: 4.0 }, background_motion: Some([3.0, 4.0]), ..Default::default() };
    let samples: Vec<_> = (0..3).map(|s| gen_pair(s, &spec).unwrap()).collect();
    let r = evaluate_dataset(&ZeroPredictor, &samples).unwrap();
    assert!((r.mean_epe - 5.0).abs() < 1e-12);
}

#[test]
fn oracle_is_perfect_and_report_is_the_mean_of_samples() {
    let spec = ClipSpec { scene: SceneSpec { height: 32, width: 32, ..Default::default() }, ..Default::default() };
    let samples: Vec<_> = (0..6).map(|s| gen_clip(s, &spec, 2).unwrap()).collect();
    let oracle = evaluate_dataset(&OraclePredictor, &samples).unwrap();
    assert_eq!((oracle.mean_epe, oracle.fl_percent, oracle.accuracy), (0.0, 0.0, Some(1.0)));

    let report = evaluate_dataset(&ZeroPredictor, &samples).unwrap();
    let per: Vec<_> = samples.iter().map(|s| evaluate_sample(&ZeroPredictor, s).unwrap()).collect();
    let mean_epe = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let mean_fl = per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64;
    assert!((report.mean_epe - mean_epe).abs() < 1e-12);
    assert!((report.fl_percent - mean_fl).abs() < 1e-12);
}

#[test]
fn epe_matches_a_per_pixel_loop() {
    for seed in 0..5 {
        let a = random_tensor([2, 2, 7, 9], -5.0, 5.0, seed);
        let b = random_tensor([2, 2, 7, 9], -5.0, 5.0, seed + 100);
        let mut sum = 0.0;
        for n in 0..2 {
            for y in 0..7 {
                for x in 0..9 {
                    let du = a.at4(n, 0, y, x) - b.at4(n, 0, y, x);
                    let dv = a.at4(n, 1, y, x) - b.at4(n, 1, y, x);
                    sum += (du * du + dv * dv).sqrt();
                }
            }
        }
        assert!((epe(&a, &b, None).unwrap() - sum / 126.0).abs() < 1e-12);
    }
}

fn rotating_field(size: usize) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    Tensor::from_fn([1, 2, size, size], |i| {
        let (ch, y, x) = (i / (size * size), (i / size) % size, i % size);
        let (px, py) = (x as f64 - c, y as f64 - c);
        if ch == 0 {
            -py
        } else {
            px
        }
    })
}

#[test]
fn rotating_field_colour_fixture() {
    let img = flow_to_color(&rotating_field(32), Some(16.0)).unwrap();
    let digest = Sha256::digest(img.as_raw());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, ROTATING_FIELD_SHA256);

    // every eighth of the hue circle shows up along a ring around the centre
    let mut seen = std::collections::HashSet::new();
    for k in 0..64 {
        let a = k as f64 / 64.0 * std::f64::consts::TAU;
        let (x, y) = ((15.5 + 12.0 * a.cos()).round() as u32, (15.5 + 12.0 * a.sin()).round() as u32);
        let p = img.get_pixel(x, y).0;
        seen.insert((p[0] / 64, p[1] / 64, p[2] / 64));
    }
    assert!(seen.len() >= 8, "{seen:?}");
}

// generated once from the renderer and pinned
const ROTATING_FIELD_SHA256: &str = "733cf76a42ce58af4aff5644c98a1f73a8f703c50d3e4e4701a5c261ba81b0c3";

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn pyramid_shapes_follow_the_config(
        frames in 2usize..4,
        levels in 2usize..5,
        base in 2usize..5,
        k in 1usize..3,
        toggles in any::<(bool, bool, bool)>(),
    ) {
        let cfg = MotionNetConfig {
            input_frames: frames,
            base_channels: base,
            max_channels: 8,
            levels,
            use_small_disp: toggles.0,
            use_cdc: toggles.1,
            use_multiscale: toggles.2,
            ..Default::default()
        };
        let net = MotionNet::build(&cfg, 1).unwrap();
        let side = cfg.required_divisor() * k;
        let x = random_tensor([1, 3 * frames, side, side], 0.0, 1.0, 2);
        let pyramid = net.predict_pyramid(&x).unwrap();
        prop_assert_eq!(pyramid.len(), cfg.output_scales());
        for (i, f) in pyramid.iter().enumerate() {
            let s = side >> (FINEST_SCALE + i);
            prop_assert_eq!(f.shape(), &[1, 2 * (frames - 1), s, s][..]);
        }
        let full = net.infer_flow(&x).unwrap();
        prop_assert_eq!(full.shape(), &[1, 2 * (frames - 1), side, side][..]);
    }
}

#[test]
fn flo_and_checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let field = random_tensor([1, 2, 5, 3], -4.0, 4.0, 8).map(|v| v as f32 as f64);
    let path = dir.path().join("f.flo");
    write_flo(&path, &field).unwrap();
    assert_eq!(read_flo(&path).unwrap(), field);

    let net = MotionNet::build(&micro(2), 3).unwrap();
    let ckpt = Checkpoint { metadata: "seed = 3\n".into(), tensors: net.params().export("motionnet/") };
    let path = dir.path().join("net.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.metadata, ckpt.metadata);
    let mut restored = MotionNet::build(&micro(2), 4).unwrap();
    restored.params_mut().load_from(&back.tensors, "motionnet/").unwrap();
    assert_eq!(restored.params().tensors(), net.params().tensors());
}
