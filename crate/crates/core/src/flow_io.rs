//! `.flo` interchange and colour-coded flow rendering.
//!
//! Layout: `f32` tag 202021.25 (bytes "PIEH"), `i32` width, `i32` height,
//! then `height * width` interleaved `(u, v)` pairs as little-endian `f32`,
//! row-major. Values are held as `f64` in memory; every `f32` survives the
//! round trip exactly.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FLO_TAG: f32 = 202021.25;
/// Components above this magnitude mark unknown flow.
pub const UNKNOWN_FLOW: f64 = 1e9;

/// Single-sample flow `[2, H, W]` or `[1, 2, H, W]` as `(h, w)`.
fn single_field(flow: &Tensor) -> Result<(usize, usize)> {
    match *flow.shape() {
        [2, h, w] | [1, 2, h, w] => Ok((h, w)),
        _ => Err(Error::Input(format!("expected a single 2-channel flow field, got {:?}", flow.shape()))),
    }
}

pub fn encode_flo(flow: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = single_field(flow)?;
    let (hi, wi) = (i32::try_from(h), i32::try_from(w));
    let (Ok(hi), Ok(wi)) = (hi, wi) else {
        return Err(Error::Input(format!("{h}x{w} exceeds the .flo size limit")));
    };
    let d = flow.data();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&wi.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for p in 0..h * w {
        out.extend_from_slice(&(d[p] as f32).to_le_bytes());
        out.extend_from_slice(&(d[h * w + p] as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses `.flo` bytes into `[1, 2, H, W]`.
pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    let word = |offset: usize| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::Parse { offset, detail: format!("truncated: file is {} bytes", bytes.len()) })
    };
    let tag = f32::from_le_bytes(word(0)?);
    if tag != FLO_TAG {
        return Err(Error::Parse { offset: 0, detail: format!("bad magic {:?}", &bytes[..4]) });
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 {
        return Err(Error::Parse { offset: 4, detail: format!("width {w} is not positive") });
    }
    if h <= 0 {
        return Err(Error::Parse { offset: 8, detail: format!("height {h} is not positive") });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = (h * w)
        .checked_mul(8)
        .and_then(|n| n.checked_add(12))
        .ok_or(Error::Parse { offset: 4, detail: "dimensions overflow".into() })?;
    if bytes.len() < expected {
        return Err(Error::Parse { offset: bytes.len(), detail: format!("truncated payload: need {expected} bytes for {w}x{h}") });
    }
    if bytes.len() > expected {
        return Err(Error::Parse { offset: expected, detail: format!("{} trailing bytes", bytes.len() - expected) });
    }
    let mut data = vec![0.0; 2 * h * w];
    for p in 0..h * w {
        let at = 12 + 8 * p;
        data[p] = f32::from_le_bytes(word(at)?) as f64;
        data[h * w + p] = f32::from_le_bytes(word(at + 4)?) as f64;
    }
    Tensor::new([1, 2, h, w], data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_flo(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Per-pixel validity: false where either component marks unknown flow.
pub fn known_mask(flow: &Tensor) -> Result<Vec<bool>> {
    let [n, c, h, w] = flow.dims4()?;
    if c != 2 {
        return Err(Error::Input(format!("expected 2 flow channels, got {c}")));
    }
    let plane = h * w;
    let d = flow.data();
    Ok((0..n * plane)
        .map(|i| {
            let (b, p) = (i / plane, i % plane);
            let (u, v) = (d[b * 2 * plane + p], d[b * 2 * plane + plane + p]);
            u.is_finite() && v.is_finite() && u.abs() <= UNKNOWN_FLOW && v.abs() <= UNKNOWN_FLOW
        })
        .collect())
}

/// The 55-entry colour wheel: red, yellow, green, cyan, blue, magenta.
pub fn color_wheel() -> Vec<[u8; 3]> {
    const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];
    let mut wheel = Vec::with_capacity(55);
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    for (s, &n) in SEGMENTS.iter().enumerate() {
        for i in 0..n {
            wheel.push(match s {
                0 => [255, ramp(i, n), 0],
                1 => [255 - ramp(i, n), 255, 0],
                2 => [0, 255, ramp(i, n)],
                3 => [0, 255 - ramp(i, n), 255],
                4 => [ramp(i, n), 0, 255],
                _ => [255, 0, 255 - ramp(i, n)],
            });
        }
    }
    wheel
}

/// Colour of one normalized displacement `(u, v)`; magnitude 1 is full
/// saturation, beyond it the colour is darkened.
pub fn flow_color(u: f64, v: f64, wheel: &[[u8; 3]]) -> [u8; 3] {
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = (1.0 - f) * wheel[k0][c] as f64 / 255.0 + f * wheel[k1][c] as f64 / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        *o = (255.0 * col).floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Nearest-rank 99th percentile of known displacement magnitudes.
fn percentile_magnitude(flow: &Tensor, known: &[bool]) -> f64 {
    let plane = known.len();
    let d = flow.data();
    let mut mags: Vec<f64> = (0..plane).filter(|&p| known[p]).map(|p| d[p].hypot(d[plane + p])).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Renders a single field; unknown pixels are black, zero flow is white.
pub fn flow_to_color(flow: &Tensor, max_mag: Option<f64>) -> Result<RgbImage> {
    let (h, w) = single_field(flow)?;
    let field = flow.clone().reshape([1, 2, h, w])?;
    let known = known_mask(&field)?;
    let scale = max_mag.unwrap_or_else(|| percentile_magnitude(&field, &known));
    let wheel = color_wheel();
    let d = field.data();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let c = if !known[p] {
                [0, 0, 0]
            } else if scale > 0.0 {
                flow_color(d[p] / scale, d[h * w + p] / scale, &wheel)
            } else {
                [255, 255, 255]
            };
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes an RGB frame `[3, H, W]` or `[1, 3, H, W]` in `[0, 1]` as PNG.
pub fn save_frame_png(frame: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = match *frame.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return Err(Error::Input(format!("expected an RGB frame, got {:?}", frame.shape()))),
    };
    let d = frame.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    save_png(&img, path)
}

/// Reads a PNG (or any supported image) as `[1, 3, H, W]` in `[0, 1]`.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([1, 3, h, w], data)
}
