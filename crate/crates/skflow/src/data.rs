//! Synthetic frame-pair generation with ground-truth occlusion masks,
//! Middlebury `.flo` read/write, flow colorization, and dataset manifests.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Result, SkError};
use crate::flow::{FlowField, Resolution};
use crate::rng::SkRng;
use crate::tensor::Tensor4;

pub const FLO_MAGIC: f32 = 202021.25;
const FLO_MAX_DIM: i32 = 99_999;

/// Per-pixel occlusion flags; true marks a pixel of the first frame that has
/// no correspondence in the second (moved out of frame or covered).
#[derive(Debug, Clone)]
pub struct OcclusionMask {
    pub w: usize,
    pub h: usize,
    pub mask: Vec<bool>,
}

impl OcclusionMask {
    pub fn all_visible(w: usize, h: usize) -> Self {
        OcclusionMask { w, h, mask: vec![false; w * h] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// One training/evaluation example: a frame pair with dense ground truth.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub img1: Tensor4,
    pub img2: Tensor4,
    pub gt_flow: FlowField,
    pub occ: OcclusionMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMode {
    /// One translation shared by every pixel.
    Constant,
    /// A foreground rectangle with its own translation over a translating
    /// background; produces covered-pixel occlusions, not just the
    /// out-of-frame band.
    Patch,
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub size: usize,
    pub channels: usize,
    pub max_shift: f64,
    pub mode: MotionMode,
    /// Box-blur passes over the raw noise; 0 keeps pure white noise.
    pub smooth_passes: usize,
    /// Round sampled shifts to whole pixels. Patch mode always does.
    pub integer_shift: bool,
    /// Number of scene textures a training stream cycles through; 0 draws a
    /// fresh texture for every sample. Only `gen_stream_sample` consults this.
    pub texture_pool: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            size: 64,
            channels: 1,
            max_shift: 6.0,
            mode: MotionMode::Constant,
            smooth_passes: 2,
            integer_shift: false,
            texture_pool: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(SkError::Config(format!("sample size must be a positive multiple of 8, got {}", self.size)));
        }
        if self.channels == 0 {
            return Err(SkError::Config("sample needs at least one channel".into()));
        }
        if self.max_shift >= self.size as f64 / 2.0 {
            return Err(SkError::Config(format!(
                "max_shift {} must stay below half the sample size {}",
                self.max_shift, self.size
            )));
        }
        if self.max_shift < 0.0 {
            return Err(SkError::Config("max_shift must be non-negative".into()));
        }
        Ok(())
    }
}

/// Band-limited random texture in [0, 1): white noise smoothed by repeated
/// 3x3 box blurs with clamped borders.
fn texture(rng: &mut SkRng, c: usize, h: usize, w: usize, passes: usize) -> Tensor4 {
    let mut t = Tensor4::zeros(1, c, h, w);
    t.data.iter_mut().for_each(|v| *v = rng.uniform());
    for _ in 0..passes {
        let mut out = Tensor4::zeros(1, c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                            let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                            acc += t.at(0, ch, yy, xx);
                        }
                    }
                    *out.at_mut(0, ch, y, x) = acc / 9.0;
                }
            }
        }
        t = out;
    }
    t
}

/// Bilinear read at a continuous source position; None when any of the four
/// neighbors falls outside the image.
fn sample_at(t: &Tensor4, ch: usize, y: f64, x: f64) -> Option<f64> {
    let (h, w) = (t.shape.h, t.shape.w);
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some(
        t.at(0, ch, y0, x0) * (1.0 - fy) * (1.0 - fx)
            + t.at(0, ch, y0, x1) * (1.0 - fy) * fx
            + t.at(0, ch, y1, x0) * fy * (1.0 - fx)
            + t.at(0, ch, y1, x1) * fy * fx,
    )
}

#[inline]
fn in_frame(y: i64, x: i64, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && y < h as i64 && x < w as i64
}

fn constant_pair(rng: &mut SkRng, cfg: &GenConfig, du: f64, dv: f64) -> Result<FlowSample> {
    let s = cfg.size;
    let img1 = texture(rng, cfg.channels, s, s, cfg.smooth_passes);
    let fill = texture(rng, cfg.channels, s, s, cfg.smooth_passes);
    let mut img2 = Tensor4::zeros(1, cfg.channels, s, s);
    for ch in 0..cfg.channels {
        for y in 0..s {
            for x in 0..s {
                *img2.at_mut(0, ch, y, x) = sample_at(&img1, ch, y as f64 - dv, x as f64 - du)
                    .unwrap_or_else(|| fill.at(0, ch, y, x));
            }
        }
    }
    let mut occ = OcclusionMask::all_visible(s, s);
    for y in 0..s {
        for x in 0..s {
            let ty = (y as f64 + dv).round() as i64;
            let tx = (x as f64 + du).round() as i64;
            occ.mask[y * s + x] = !in_frame(ty, tx, s, s);
        }
    }
    Ok(FlowSample { img1, img2, gt_flow: FlowField::constant(s, s, du, dv, Resolution::Full), occ })
}

struct PatchLayout {
    x0: usize,
    y0: usize,
    pw: usize,
    ph: usize,
    fg_du: i64,
    fg_dv: i64,
    bg_du: i64,
    bg_dv: i64,
}

fn patch_pair(rng: &mut SkRng, cfg: &GenConfig) -> Result<FlowSample> {
    let s = cfg.size;
    let m = cfg.max_shift.floor() as i64;
    let shift = |rng: &mut SkRng| if m == 0 { 0 } else { rng.uniform_usize((2 * m + 1) as usize) as i64 - m };
    let mut lay = PatchLayout {
        pw: s / 4 + rng.uniform_usize(s / 4),
        ph: s / 4 + rng.uniform_usize(s / 4),
        x0: 0,
        y0: 0,
        fg_du: shift(rng),
        fg_dv: shift(rng),
        bg_du: shift(rng),
        bg_dv: shift(rng),
    };
    lay.x0 = rng.uniform_usize(s - lay.pw);
    lay.y0 = rng.uniform_usize(s - lay.ph);
    // distinct motions, otherwise nothing is covered
    while lay.fg_du == lay.bg_du && lay.fg_dv == lay.bg_dv {
        lay.fg_du = shift(rng);
        lay.fg_dv = shift(rng);
    }

    let bg = texture(rng, cfg.channels, s, s, cfg.smooth_passes);
    let fg = texture(rng, cfg.channels, s, s, cfg.smooth_passes);
    let fill = texture(rng, cfg.channels, s, s, cfg.smooth_passes);
    let in_patch = |y: i64, x: i64| {
        y >= lay.y0 as i64 && x >= lay.x0 as i64 && y < (lay.y0 + lay.ph) as i64 && x < (lay.x0 + lay.pw) as i64
    };

    let mut img1 = Tensor4::zeros(1, cfg.channels, s, s);
    let mut img2 = Tensor4::zeros(1, cfg.channels, s, s);
    for ch in 0..cfg.channels {
        for y in 0..s {
            for x in 0..s {
                let (yi, xi) = (y as i64, x as i64);
                *img1.at_mut(0, ch, y, x) =
                    if in_patch(yi, xi) { fg.at(0, ch, y, x) } else { bg.at(0, ch, y, x) };
                let (fy, fx) = (yi - lay.fg_dv, xi - lay.fg_du);
                let (by, bx) = (yi - lay.bg_dv, xi - lay.bg_du);
                *img2.at_mut(0, ch, y, x) = if in_patch(fy, fx) {
                    fg.at(0, ch, fy as usize, fx as usize)
                } else if in_frame(by, bx, s, s) {
                    bg.at(0, ch, by as usize, bx as usize)
                } else {
                    fill.at(0, ch, y, x)
                };
            }
        }
    }

    let mut u = vec![0.0; s * s];
    let mut v = vec![0.0; s * s];
    let mut occ = OcclusionMask::all_visible(s, s);
    for y in 0..s {
        for x in 0..s {
            let (yi, xi) = (y as i64, x as i64);
            let fg_px = in_patch(yi, xi);
            let (du, dv) = if fg_px { (lay.fg_du, lay.fg_dv) } else { (lay.bg_du, lay.bg_dv) };
            u[y * s + x] = du as f64;
            v[y * s + x] = dv as f64;
            let (ty, tx) = (yi + dv, xi + du);
            // the moved patch sits on top: background pixels landing under it
            // are covered, patch pixels only occlude by leaving the frame
            occ.mask[y * s + x] =
                !in_frame(ty, tx, s, s) || (!fg_px && in_patch(ty - lay.fg_dv, tx - lay.fg_du));
        }
    }
    Ok(FlowSample {
        img1,
        img2,
        gt_flow: FlowField::new(s, s, u, v, Resolution::Full)?,
        occ,
    })
}

/// Deterministic sample from a seed: same seed, same bytes.
pub fn gen_translation_pair(seed: u64, cfg: &GenConfig) -> Result<FlowSample> {
    cfg.validate()?;
    let mut rng = SkRng::new(seed);
    match cfg.mode {
        MotionMode::Constant => {
            let mut du = rng.uniform_in(-cfg.max_shift, cfg.max_shift);
            let mut dv = rng.uniform_in(-cfg.max_shift, cfg.max_shift);
            if cfg.integer_shift {
                du = du.round();
                dv = dv.round();
            }
            constant_pair(&mut rng, cfg, du, dv)
        }
        MotionMode::Patch => patch_pair(&mut rng, cfg),
    }
}

/// Deterministic sample `idx` of a training stream rooted at `base_seed`.
///
/// The motion is always drawn per index, while the scene texture comes from a
/// pool of `texture_pool` seeds (`idx % pool`), so a finite set of scenes is
/// observed under the full range of motions — the way real flow datasets
/// reuse scenes across frames. With `texture_pool == 0` every index gets its
/// own texture. Patch mode draws layout and textures together, so the pool
/// does not apply there and each index is independent.
pub fn gen_stream_sample(base_seed: u64, idx: u64, cfg: &GenConfig) -> Result<FlowSample> {
    cfg.validate()?;
    let mut motion_rng = SkRng::new(base_seed).fork(idx);
    match cfg.mode {
        MotionMode::Constant => {
            let mut du = motion_rng.uniform_in(-cfg.max_shift, cfg.max_shift);
            let mut dv = motion_rng.uniform_in(-cfg.max_shift, cfg.max_shift);
            if cfg.integer_shift {
                du = du.round();
                dv = dv.round();
            }
            let scene = if cfg.texture_pool > 0 { idx % cfg.texture_pool as u64 } else { idx };
            let mut tex_rng = SkRng::new(base_seed ^ 0x5ce9_e5ee_d000_0000_u64).fork(scene);
            constant_pair(&mut tex_rng, cfg, du, dv)
        }
        MotionMode::Patch => patch_pair(&mut motion_rng, cfg),
    }
}

/// Constant-motion sample with a caller-chosen shift.
pub fn gen_with_shift(seed: u64, cfg: &GenConfig, du: f64, dv: f64) -> Result<FlowSample> {
    cfg.validate()?;
    if du.abs() >= cfg.size as f64 / 2.0 || dv.abs() >= cfg.size as f64 / 2.0 {
        return Err(SkError::Config(format!("shift ({du}, {dv}) exceeds half the sample size")));
    }
    let mut rng = SkRng::new(seed);
    constant_pair(&mut rng, cfg, du, dv)
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    if flow.w > FLO_MAX_DIM as usize || flow.h > FLO_MAX_DIM as usize {
        return Err(SkError::Invalid(format!("flow {}x{} exceeds the format's dimension limit", flow.w, flow.h)));
    }
    let mut buf = Vec::with_capacity(12 + flow.w * flow.h * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.w as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.h as i32).to_le_bytes());
    for i in 0..flow.w * flow.h {
        buf.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| SkError::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| SkError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| SkError::io(path.display().to_string(), e))?;
    if buf.len() < 12 {
        return Err(SkError::Format(format!("truncated flow file: {} bytes, header needs 12", buf.len())));
    }
    let magic = f32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(SkError::Format(format!("bad flow file magic {magic}")));
    }
    let w = i32::from_le_bytes(buf[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(buf[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > FLO_MAX_DIM || h > FLO_MAX_DIM {
        return Err(SkError::Format(format!("flow file dimensions {w}x{h} out of range")));
    }
    let (w, h) = (w as usize, h as usize);
    let want = 12 + w * h * 8;
    if buf.len() != want {
        return Err(SkError::Format(format!(
            "truncated flow file: {}x{} needs {} bytes, file has {}",
            w,
            h,
            want,
            buf.len()
        )));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let o = 12 + i * 8;
        u.push(f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64);
        v.push(f32::from_le_bytes(buf[o + 4..o + 8].try_into().unwrap()) as f64);
    }
    FlowField::new(w, h, u, v, Resolution::Full)
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h_deg.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Direction-as-hue rendering: hue = atan2(v, u), saturation grows with
/// magnitude relative to `max` (the field's own maximum when None), zero
/// flow is white.
pub fn flow_to_color(flow: &FlowField, max: Option<f64>) -> image::RgbImage {
    let norm = max.unwrap_or_else(|| flow.max_magnitude()).max(1e-12);
    let mut img = image::RgbImage::new(flow.w as u32, flow.h as u32);
    for y in 0..flow.h {
        for x in 0..flow.w {
            let (u, v) = flow.at(y, x);
            let mag = (u * u + v * v).sqrt();
            let hue = v.atan2(u).to_degrees();
            let sat = (mag / norm).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Rgb(hsv_to_rgb(hue, sat, 1.0)));
        }
    }
    img
}

/// Render a (1, c, h, w) tensor in [0, 1] as 8-bit RGB; one channel is
/// replicated to gray, three map directly.
pub fn tensor_to_image(t: &Tensor4) -> Result<image::RgbImage> {
    if t.shape.n != 1 || (t.shape.c != 1 && t.shape.c != 3) {
        return Err(SkError::Invalid(format!("expected a (1, 1|3, h, w) tensor, got {}", t.shape)));
    }
    let mut img = image::RgbImage::new(t.shape.w as u32, t.shape.h as u32);
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..t.shape.h {
        for x in 0..t.shape.w {
            let p = if t.shape.c == 1 {
                let g = px(t.at(0, 0, y, x));
                [g, g, g]
            } else {
                [px(t.at(0, 0, y, x)), px(t.at(0, 1, y, x)), px(t.at(0, 2, y, x))]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    Ok(img)
}

pub fn save_image(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| SkError::Format(format!("{}: {e}", path.display())))
}

/// Write a sample directory: both frames, ground-truth flow, and the
/// occlusion mask (white = occluded).
pub fn save_sample(s: &FlowSample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SkError::io(dir.display().to_string(), e))?;
    save_image(&tensor_to_image(&s.img1)?, &dir.join("frame1.png"))?;
    save_image(&tensor_to_image(&s.img2)?, &dir.join("frame2.png"))?;
    write_flo(&s.gt_flow, &dir.join("flow.flo"))?;
    let mut occ = image::RgbImage::new(s.occ.w as u32, s.occ.h as u32);
    for y in 0..s.occ.h {
        for x in 0..s.occ.w {
            let v = if s.occ.at(y, x) { 255 } else { 0 };
            occ.put_pixel(x as u32, y as u32, image::Rgb([v, v, v]));
        }
    }
    save_image(&occ, &dir.join("occlusion.png"))
}

/// One sample directory per line.
pub fn write_manifest(entries: &[String], path: &Path) -> Result<()> {
    let mut body = entries.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| SkError::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let body = std::fs::read_to_string(path).map_err(|e| SkError::io(path.display().to_string(), e))?;
    Ok(body.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}
