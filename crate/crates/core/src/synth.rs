//! Procedural scenes with analytically exact ground-truth flow.
//!
//! A scene is a background texture, optionally holding a flat patch, plus a
//! square foreground object. Textures are continuous functions of the plane,
//! so every frame is point-sampled exactly at any sub-pixel pose and the
//! ground-truth flow follows from the motion model alone.
//!
//! Frame `t+1` relates to frame `t` by `frame_t(p) = frame_{t+1}(p + v_t(p))`
//! wherever the point stays visible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Checker,
    Noise,
    Gradient,
    Flat,
}

/// A continuous RGB texture with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub enum Texture {
    Checker { period: f64, phase: [f64; 2], sharpness: f64, a: [f64; 3], b: [f64; 3] },
    Noise { waves: Vec<[f64; 4]>, bias: [f64; 3] },
    Gradient { dir: [f64; 2], a: [f64; 3], b: [f64; 3], extent: f64 },
    Flat { color: [f64; 3] },
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

impl Texture {
    pub fn random(kind: TextureKind, extent: f64, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            TextureKind::Checker => {
                let a = random_color(rng);
                // keep the two colours well apart so the pattern stays visible
                let b = a.map(|v| if v > 0.5 { v - 0.45 } else { v + 0.45 });
                Texture::Checker {
                    period: rng.random_range(6.0..12.0),
                    phase: [rng.random_range(0.0..12.0), rng.random_range(0.0..12.0)],
                    sharpness: 3.0,
                    a,
                    b,
                }
            }
            TextureKind::Noise => {
                // per channel: 6 plane waves (kx, ky, phase, amplitude)
                let mut waves = Vec::with_capacity(18);
                for _ in 0..3 {
                    for _ in 0..6 {
                        let wavelength: f64 = rng.random_range(7.0..24.0);
                        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                        let k = std::f64::consts::TAU / wavelength;
                        waves.push([k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), 0.07]);
                    }
                }
                Texture::Noise { waves, bias: [0.5; 3] }
            }
            TextureKind::Gradient => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Texture::Gradient { dir: [angle.cos(), angle.sin()], a: random_color(rng), b: random_color(rng), extent }
            }
            TextureKind::Flat => Texture::Flat { color: random_color(rng) },
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mix = |a: &[f64; 3], b: &[f64; 3], t: f64| [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t);
        let v = match self {
            Texture::Checker { period, phase, sharpness, a, b } => {
                let s = (std::f64::consts::PI * (x + phase[0]) / period).sin() * (std::f64::consts::PI * (y + phase[1]) / period).sin();
                mix(a, b, 0.5 + 0.5 * (sharpness * s).tanh())
            }
            Texture::Noise { waves, bias } => {
                let mut out = *bias;
                for (c, chunk) in waves.chunks(waves.len() / 3).enumerate() {
                    out[c] += chunk.iter().map(|w| w[3] * (w[0] * x + w[1] * y + w[2]).sin()).sum::<f64>();
                }
                out
            }
            Texture::Gradient { dir, a, b, extent } => {
                let t = 0.5 + 0.5 * ((dir[0] * x + dir[1] * y) / extent).clamp(-1.0, 1.0);
                mix(a, b, t)
            }
            Texture::Flat { color } => *color,
        };
        v.map(|c| c.clamp(0.0, 1.0))
    }
}

/// Foreground motion per frame step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Translate { dx: f64, dy: f64 },
    /// Rotation about the object centre, radians per step.
    Rotate { theta: f64 },
    /// Isotropic scaling about the object centre, factor per step.
    Zoom { scale: f64 },
}

impl Motion {
    fn translation(&self) -> [f64; 2] {
        match *self {
            Motion::Translate { dx, dy } => [dx, dy],
            _ => [0.0, 0.0],
        }
    }

    /// Linear part applied `t` times (may be negative).
    fn linear_pow(&self, t: f64) -> [[f64; 2]; 2] {
        match *self {
            Motion::Translate { .. } => [[1.0, 0.0], [0.0, 1.0]],
            Motion::Rotate { theta } => {
                let (s, c) = (theta * t).sin_cos();
                [[c, -s], [s, c]]
            }
            Motion::Zoom { scale } => {
                let k = scale.powf(t);
                [[k, 0.0], [0.0, k]]
            }
        }
    }
}

fn apply(m: &[[f64; 2]; 2], v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub texture: TextureKind,
    pub background: TextureKind,
    pub motion: Motion,
    pub background_motion: Option<[f64; 2]>,
    /// Side of the square foreground object as a fraction of the smaller
    /// extent; zero renders no object.
    pub object_size: f64,
    /// Places a flat square patch into the background.
    pub homogeneous_patch: bool,
    /// Standard deviation of additive Gaussian noise; zero disables it.
    pub noise_sigma: f64,
    /// Object centre in the first frame; random when absent.
    pub object_center: Option<[f64; 2]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            texture: TextureKind::Checker,
            background: TextureKind::Noise,
            motion: Motion::Translate { dx: 0.0, dy: 0.0 },
            background_motion: None,
            object_size: 0.4,
            homogeneous_patch: false,
            noise_sigma: 0.0,
            object_center: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    /// `[F, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[F-1, 2, H, W]`, flow from frame `t` to frame `t+1`.
    pub gt_flows: Tensor,
    /// `[F, 1, H, W]`, 1 where the foreground object is visible.
    pub foreground: Tensor,
    /// `[1, 1, H, W]`, 1 on the interior of the flat patch in frame 0.
    pub homogeneous: Tensor,
    pub label: Option<usize>,
    pub seed: u64,
}

impl ClipSample {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Frames as one network input `[1, 3F, H, W]`.
    pub fn stacked_frames(&self) -> Tensor {
        let [f, c, h, w] = self.frames.dims4().expect("4-d frames");
        self.frames.clone().reshape([1, f * c, h, w]).expect("same numel")
    }

    /// Ground-truth flows as `[1, 2(F-1), H, W]`.
    pub fn stacked_flows(&self) -> Tensor {
        let [f, c, h, w] = self.gt_flows.dims4().expect("4-d flows");
        self.gt_flows.clone().reshape([1, f * c, h, w]).expect("same numel")
    }
}

struct Scene {
    fg: Texture,
    bg: Texture,
    patch: Option<([f64; 2], f64, Texture)>,
}

/// Renders `frames` frames of `spec` from `seed`.
pub fn render_clip(seed: u64, spec: &SceneSpec, frames: usize) -> Result<ClipSample> {
    let (h, w) = (spec.height, spec.width);
    if frames < 2 || h < 2 || w < 2 {
        return Err(Error::Input(format!("need at least 2 frames of 2x2, got {frames} of {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = h.min(w) as f64;
    let half = spec.object_size.max(0.0) * extent / 2.0;
    let steps = (frames - 1) as f64;
    let shift = spec.motion.translation();
    let center = match spec.object_center {
        Some(c) => c,
        None if half > 0.0 => {
            // keep the object inside the frame over the whole clip
            let reach = match spec.motion {
                Motion::Translate { .. } => half,
                Motion::Rotate { .. } => half * std::f64::consts::SQRT_2,
                Motion::Zoom { scale } => half * std::f64::consts::SQRT_2 * scale.max(1.0).powf(steps),
            };
            let mut pick = |len: usize, d: f64| -> Result<f64> {
                let lo = reach + 1.0 - (d * steps).min(0.0);
                let hi = len as f64 - 2.0 - reach - (d * steps).max(0.0);
                if lo > hi {
                    return Err(Error::Input(format!("object of half-size {half:.1} with motion {d} leaves the {len}-pixel frame")));
                }
                Ok(if lo == hi { lo } else { rng.random_range(lo..=hi) })
            };
            [pick(w, shift[0])?, pick(h, shift[1])?]
        }
        None => [w as f64 / 2.0, h as f64 / 2.0],
    };
    let fg = Texture::random(spec.texture, extent, &mut rng);
    let bg = Texture::random(spec.background, extent, &mut rng);
    let patch = spec.homogeneous_patch.then(|| {
        let ph = extent / 5.0;
        let c = [rng.random_range(ph..w as f64 - ph), rng.random_range(ph..h as f64 - ph)];
        (c, ph, Texture::random(TextureKind::Flat, extent, &mut rng))
    });
    let scene = Scene { fg, bg, patch };
    let bgm = spec.background_motion.unwrap_or([0.0, 0.0]);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("positive sigma"));

    let plane = h * w;
    let mut frame_data = vec![0.0; frames * 3 * plane];
    let mut fg_data = vec![0.0; frames * plane];
    let mut flow_data = vec![0.0; (frames - 1) * 2 * plane];
    let mut homogeneous = vec![0.0; plane];
    for t in 0..frames {
        let tf = t as f64;
        let inv = spec.motion.linear_pow(-tf);
        let fwd_step = spec.motion.linear_pow(1.0);
        let ct = [center[0] + shift[0] * tf, center[1] + shift[1] * tf];
        for i in 0..h {
            for j in 0..w {
                let p = [j as f64, i as f64];
                let local = apply(&inv, [p[0] - ct[0], p[1] - ct[1]]);
                let inside = half > 0.0 && local[0].abs() <= half && local[1].abs() <= half;
                let (rgb, flow) = if inside {
                    let rel = [p[0] - ct[0], p[1] - ct[1]];
                    let moved = apply(&fwd_step, rel);
                    (scene.fg.sample(local[0], local[1]), [moved[0] - rel[0] + shift[0], moved[1] - rel[1] + shift[1]])
                } else {
                    let q = [p[0] - bgm[0] * tf, p[1] - bgm[1] * tf];
                    let rgb = match &scene.patch {
                        Some((c, ph, tex)) if (q[0] - c[0]).abs() <= *ph && (q[1] - c[1]).abs() <= *ph => {
                            if t == 0 && (q[0] - c[0]).abs() <= ph - 2.0 && (q[1] - c[1]).abs() <= ph - 2.0 {
                                homogeneous[i * w + j] = 1.0;
                            }
                            tex.sample(q[0], q[1])
                        }
                        _ => scene.bg.sample(q[0], q[1]),
                    };
                    (rgb, bgm)
                };
                for c in 0..3 {
                    frame_data[(t * 3 + c) * plane + i * w + j] = rgb[c];
                }
                if inside {
                    fg_data[t * plane + i * w + j] = 1.0;
                }
                if t + 1 < frames {
                    flow_data[(t * 2) * plane + i * w + j] = flow[0];
                    flow_data[(t * 2 + 1) * plane + i * w + j] = flow[1];
                }
            }
        }
    }
    if let Some(n) = noise {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_401e);
        for v in frame_data.iter_mut() {
            *v = (*v + n.sample(&mut noise_rng)).clamp(0.0, 1.0);
        }
    }
    Ok(ClipSample {
        frames: Tensor::new([frames, 3, h, w], frame_data)?,
        gt_flows: Tensor::new([frames - 1, 2, h, w], flow_data)?,
        foreground: Tensor::new([frames, 1, h, w], fg_data)?,
        homogeneous: Tensor::new([1, 1, h, w], homogeneous)?,
        label: None,
        seed,
    })
}

fn check_translation_bound(spec: &SceneSpec, d: [f64; 2]) -> Result<()> {
    let limit = spec.height.min(spec.width) as f64 / 4.0;
    if d[0].abs() > limit || d[1].abs() > limit {
        return Err(Error::Input(format!("displacement ({}, {}) exceeds extent/4 = {limit}", d[0], d[1])));
    }
    Ok(())
}

/// A two-frame sample. Translations are bounded by a quarter of the extent.
pub fn gen_pair(seed: u64, spec: &SceneSpec) -> Result<ClipSample> {
    check_translation_bound(spec, spec.motion.translation())?;
    check_translation_bound(spec, spec.background_motion.unwrap_or([0.0, 0.0]))?;
    render_clip(seed, spec, 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    Left,
    Right,
    Up,
    Down,
    Rotate,
}

impl MotionClass {
    pub const ALL: [MotionClass; 5] = [MotionClass::Left, MotionClass::Right, MotionClass::Up, MotionClass::Down, MotionClass::Rotate];

    pub fn motion(self, step: f64, rotate_step: f64) -> Motion {
        match self {
            MotionClass::Left => Motion::Translate { dx: -step, dy: 0.0 },
            MotionClass::Right => Motion::Translate { dx: step, dy: 0.0 },
            MotionClass::Up => Motion::Translate { dx: 0.0, dy: -step },
            MotionClass::Down => Motion::Translate { dx: 0.0, dy: step },
            MotionClass::Rotate => Motion::Rotate { theta: rotate_step },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipSpec {
    /// Scene template; its `motion` is replaced by the class motion.
    pub scene: SceneSpec,
    /// Per-step displacement of directional classes, pixels.
    pub step: f64,
    /// Per-step angle of the rotation class, radians.
    pub rotate_step: f64,
    pub classes: Vec<MotionClass>,
}

impl Default for ClipSpec {
    fn default() -> Self {
        Self { scene: SceneSpec::default(), step: 2.0, rotate_step: 0.1, classes: MotionClass::ALL.to_vec() }
    }
}

/// A labelled multi-frame clip; the class (an index into `spec.classes`) is
/// drawn uniformly from the seed.
pub fn gen_clip(seed: u64, spec: &ClipSpec, frames: usize) -> Result<ClipSample> {
    if spec.classes.is_empty() {
        return Err(Error::Input("no motion classes".into()));
    }
    let label = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5e5).random_range(0..spec.classes.len());
    gen_clip_with_label(seed, spec, frames, label)
}

pub fn gen_clip_with_label(seed: u64, spec: &ClipSpec, frames: usize, label: usize) -> Result<ClipSample> {
    let class = *spec.classes.get(label).ok_or_else(|| Error::Input(format!("label {label} has no class")))?;
    let scene = SceneSpec { motion: class.motion(spec.step, spec.rotate_step), ..spec.scene.clone() };
    check_translation_bound(&scene, scene.motion.translation())?;
    let mut sample = render_clip(seed, &scene, frames)?;
    sample.label = Some(label);
    Ok(sample)
}

/// Decorrelates per-sample seeds drawn from one base seed.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How motion is drawn for each sample of a flow dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// Object and background translate together.
    Camera,
    /// Only the object translates; the background is static.
    Object,
    /// Object and background translate independently.
    Independent,
    /// Nothing moves.
    Static,
}

/// Random-motion flow dataset definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowDatasetSpec {
    pub scene: SceneSpec,
    pub mode: MotionMode,
    /// Displacements are uniform in `[-max, max]` per axis.
    pub max_displacement: f64,
    /// Fraction of samples that carry a flat, textureless patch.
    pub homogeneous_fraction: f64,
    /// Foreground textures are drawn from this list per sample.
    pub textures: Vec<TextureKind>,
}

impl Default for FlowDatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            mode: MotionMode::Camera,
            max_displacement: 5.0,
            homogeneous_fraction: 0.0,
            textures: vec![TextureKind::Checker, TextureKind::Noise],
        }
    }
}

impl FlowDatasetSpec {
    pub fn sample(&self, seed: u64, frames: usize) -> Result<ClipSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10d_a7a);
        let m = self.max_displacement;
        let mut draw = || if m > 0.0 { [rng.random_range(-m..=m), rng.random_range(-m..=m)] } else { [0.0, 0.0] };
        let (obj, bg) = match self.mode {
            MotionMode::Camera => {
                let d = draw();
                (d, d)
            }
            MotionMode::Object => (draw(), [0.0, 0.0]),
            MotionMode::Independent => (draw(), draw()),
            MotionMode::Static => ([0.0, 0.0], [0.0, 0.0]),
        };
        let texture = if self.textures.is_empty() { self.scene.texture } else { self.textures[rng.random_range(0..self.textures.len())] };
        let homogeneous = self.scene.homogeneous_patch || rng.random_bool(self.homogeneous_fraction.clamp(0.0, 1.0));
        let scene = SceneSpec {
            texture,
            motion: Motion::Translate { dx: obj[0], dy: obj[1] },
            background_motion: Some(bg),
            homogeneous_patch: homogeneous,
            ..self.scene.clone()
        };
        render_clip(seed, &scene, frames)
    }

    /// `count` samples with seeds derived from `base_seed`, in index order.
    pub fn generate(&self, base_seed: u64, count: usize, frames: usize) -> Result<Vec<ClipSample>> {
        map_indexed(count, |i| self.sample(sample_seed(base_seed, i as u64), frames)).into_iter().collect()
    }
}
