//! All-pairs correlation cost volume, multi-level pyramid, and windowed
//! bilinear lookup around the current flow estimate.
//!
//! Level 0 holds the full (h*w) x (h*w) grid of feature dot products; level l
//! is built by 2x2 average pooling over the target coordinates. Volumes are
//! stored as (n*h*w, 1, h_l, w_l) tensors: one target-grid plane per source
//! pixel.

use crate::error::{Result, SkError};
use crate::flow::FlowField;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone)]
pub struct CorrPyramid {
    pub levels: Vec<Tensor4>,
    pub num_levels: usize,
    pub radius: usize,
    pub feature_dim: usize,
    /// Base (source) grid size.
    pub h: usize,
    pub w: usize,
    pub batch: usize,
}

pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RADIUS: usize = 4;

/// c0(i,j,m,n) = <f1(:,i,j), f2(:,m,n)>, optionally divided by sqrt(D).
pub fn corr_base_forward(f1: &Tensor4, f2: &Tensor4, normalize: bool) -> Result<Tensor4> {
    f1.check_same_shape(f2, "correlation feature maps")?;
    let (n, d, h, w) = f1.shape.as_tuple();
    let hw = h * w;
    let scale = if normalize { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let os = Shape4::new(n * hw, 1, h, w);
    let mut out = vec![0.0f64; os.numel()];
    for ni in 0..n {
        let f1b = &f1.data[ni * d * hw..(ni + 1) * d * hw];
        let f2b = &f2.data[ni * d * hw..(ni + 1) * d * hw];
        for p in 0..hw {
            let orow = &mut out[(ni * hw + p) * hw..(ni * hw + p + 1) * hw];
            for di in 0..d {
                let a = f1b[di * hw + p];
                let f2row = &f2b[di * hw..(di + 1) * hw];
                for (o, x) in orow.iter_mut().zip(f2row.iter()) {
                    *o += a * x;
                }
            }
            if normalize {
                orow.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(Tensor4::new(os, out))
}

pub fn corr_base_backward(
    f1: &Tensor4,
    f2: &Tensor4,
    normalize: bool,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let (n, d, h, w) = f1.shape.as_tuple();
    let hw = h * w;
    let scale = if normalize { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut g1 = vec![0.0f64; f1.shape.numel()];
    let mut g2 = vec![0.0f64; f2.shape.numel()];
    for ni in 0..n {
        let f1b = &f1.data[ni * d * hw..(ni + 1) * d * hw];
        let f2b = &f2.data[ni * d * hw..(ni + 1) * d * hw];
        let g1b = &mut g1[ni * d * hw..(ni + 1) * d * hw];
        let g2b = &mut g2[ni * d * hw..(ni + 1) * d * hw];
        for p in 0..hw {
            let gorow = &grad_out.data[(ni * hw + p) * hw..(ni * hw + p + 1) * hw];
            for di in 0..d {
                let f2row = &f2b[di * hw..(di + 1) * hw];
                let mut acc = 0.0;
                for (g, x) in gorow.iter().zip(f2row.iter()) {
                    acc += g * x;
                }
                g1b[di * hw + p] += scale * acc;
                let a = scale * f1b[di * hw + p];
                let g2row = &mut g2b[di * hw..(di + 1) * hw];
                for (gt, g) in g2row.iter_mut().zip(gorow.iter()) {
                    *gt += a * g;
                }
            }
        }
    }
    (Tensor4::new(f1.shape, g1), Tensor4::new(f2.shape, g2))
}

/// 2x2 average pooling with stride 2 over the spatial dims (floor semantics:
/// a trailing odd row/column is dropped).
pub fn avg_pool2_forward(x: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape.as_tuple();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(SkError::Invalid(format!("cannot pool {h}x{w} below 1x1")));
    }
    let os = Shape4::new(n, c, oh, ow);
    let mut out = vec![0.0f64; os.numel()];
    for nc in 0..n * c {
        let xp = &x.data[nc * h * w..(nc + 1) * h * w];
        let op = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (2 * oy, 2 * ox);
                op[oy * ow + ox] = 0.25
                    * (xp[iy * w + ix]
                        + xp[iy * w + ix + 1]
                        + xp[(iy + 1) * w + ix]
                        + xp[(iy + 1) * w + ix + 1]);
            }
        }
    }
    Ok(Tensor4::new(os, out))
}

pub fn avg_pool2_backward(in_shape: Shape4, grad_out: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = in_shape.as_tuple();
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0f64; in_shape.numel()];
    for nc in 0..n * c {
        let gp = &grad_out.data[nc * oh * ow..(nc + 1) * oh * ow];
        let gxp = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * gp[oy * ow + ox];
                let (iy, ix) = (2 * oy, 2 * ox);
                gxp[iy * w + ix] += g;
                gxp[iy * w + ix + 1] += g;
                gxp[(iy + 1) * w + ix] += g;
                gxp[(iy + 1) * w + ix + 1] += g;
            }
        }
    }
    Tensor4::new(in_shape, gx)
}

#[inline]
fn bilinear_taps(hl: usize, wl: usize, y: f64, x: f64) -> [(usize, usize, f64); 4] {
    // clamp-to-edge sampling
    let y = y.clamp(0.0, (hl - 1) as f64);
    let x = x.clamp(0.0, (wl - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(hl - 1);
    let x1 = (x0 + 1).min(wl - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

/// Sample a (2r+1)^2 window of one pyramid level around the flow-displaced
/// position of each base pixel. `level` has shape (n*h*w, 1, h_l, w_l) and
/// `flow` is (n, 2, h, w) at the base resolution. Out-of-bounds samples clamp
/// to the border. Output channel order is row-major over (dy, dx).
pub fn corr_sample_forward(
    level: &Tensor4,
    flow: &Tensor4,
    level_idx: usize,
    radius: usize,
    base_h: usize,
    base_w: usize,
) -> Result<Tensor4> {
    let (h, w) = (base_h, base_w);
    let n = flow.shape.n;
    if flow.shape.c != 2 || flow.shape.h != h || flow.shape.w != w {
        return Err(SkError::ShapeMismatch {
            left: flow.shape.as_tuple(),
            right: (n, 2, h, w),
            context: "corr lookup flow".into(),
        });
    }
    let (hl, wl) = (level.shape.h, level.shape.w);
    let side = 2 * radius + 1;
    let win2 = side * side;
    let hw = h * w;
    let scale = 1.0 / (1usize << level_idx) as f64;
    let os = Shape4::new(n, win2, h, w);
    let mut out = vec![0.0f64; os.numel()];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let u = flow.data[(ni * 2) * hw + p];
                let v = flow.data[(ni * 2 + 1) * hw + p];
                let cy = (i as f64 + v) * scale;
                let cx = (j as f64 + u) * scale;
                let plane = &level.data[(ni * hw + p) * hl * wl..(ni * hw + p + 1) * hl * wl];
                for dy in 0..side {
                    for dx in 0..side {
                        let sy = cy + dy as f64 - radius as f64;
                        let sx = cx + dx as f64 - radius as f64;
                        let mut acc = 0.0;
                        for (ty, tx, wgt) in bilinear_taps(hl, wl, sy, sx) {
                            acc += wgt * plane[ty * wl + tx];
                        }
                        out[((ni * win2 + dy * side + dx) * h + i) * w + j] = acc;
                    }
                }
            }
        }
    }
    Ok(Tensor4::new(os, out))
}

/// Gradient of `corr_sample_forward` with respect to the level volume. The
/// flow input is treated as a constant: each refinement iteration re-centers
/// the lookup on a detached flow estimate.
pub fn corr_sample_backward(
    level_shape: Shape4,
    flow: &Tensor4,
    level_idx: usize,
    radius: usize,
    base_h: usize,
    base_w: usize,
    grad_out: &Tensor4,
) -> Tensor4 {
    let (h, w) = (base_h, base_w);
    let n = flow.shape.n;
    let (hl, wl) = (level_shape.h, level_shape.w);
    let side = 2 * radius + 1;
    let win2 = side * side;
    let hw = h * w;
    let scale = 1.0 / (1usize << level_idx) as f64;
    let mut gl = vec![0.0f64; level_shape.numel()];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let u = flow.data[(ni * 2) * hw + p];
                let v = flow.data[(ni * 2 + 1) * hw + p];
                let cy = (i as f64 + v) * scale;
                let cx = (j as f64 + u) * scale;
                let gplane = &mut gl[(ni * hw + p) * hl * wl..(ni * hw + p + 1) * hl * wl];
                for dy in 0..side {
                    for dx in 0..side {
                        let g = grad_out.data[((ni * win2 + dy * side + dx) * h + i) * w + j];
                        if g == 0.0 {
                            continue;
                        }
                        let sy = cy + dy as f64 - radius as f64;
                        let sx = cx + dx as f64 - radius as f64;
                        for (ty, tx, wgt) in bilinear_taps(hl, wl, sy, sx) {
                            gplane[ty * wl + tx] += wgt * g;
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(level_shape, gl)
}

/// Build the multi-level all-pairs correlation pyramid.
pub fn build_pyramid(
    f1: &Tensor4,
    f2: &Tensor4,
    num_levels: usize,
    radius: usize,
    normalize: bool,
) -> Result<CorrPyramid> {
    if num_levels == 0 {
        return Err(SkError::Config("num_levels must be at least 1".into()));
    }
    let (n, d, h, w) = f1.shape.as_tuple();
    let base = corr_base_forward(f1, f2, normalize)?;
    let mut levels = vec![base];
    for l in 1..num_levels {
        let prev = levels.last().unwrap();
        if prev.shape.h < 2 || prev.shape.w < 2 {
            return Err(SkError::Config(format!(
                "num_levels {num_levels} would shrink level {l} below 1x1 for a {h}x{w} grid"
            )));
        }
        let next = avg_pool2_forward(prev)?;
        levels.push(next);
    }
    // storage bound: (h*w)^2 * sum 4^-l entries
    let stored: usize = levels.iter().map(|t| t.shape.numel()).sum();
    let bound: f64 = (0..num_levels).map(|l| ((h * w) * (h * w)) as f64 / 4f64.powi(l as i32)).sum();
    assert!(stored as f64 <= n as f64 * bound + 1.0, "pyramid storage exceeds bound");
    Ok(CorrPyramid { levels, num_levels, radius, feature_dim: d, h, w, batch: n })
}

/// Windowed lookup at every base pixel; concatenates the per-level windows
/// into num_levels*(2r+1)^2 output channels (level-major order).
pub fn lookup(p: &CorrPyramid, flow: &FlowField) -> Result<Tensor4> {
    if flow.h != p.h || flow.w != p.w {
        return Err(SkError::Invalid(format!(
            "flow {}x{} does not match pyramid base {}x{}",
            flow.w, flow.h, p.w, p.h
        )));
    }
    let ft = flow.to_tensor();
    lookup_tensor(p, &ft)
}

pub fn lookup_tensor(p: &CorrPyramid, flow: &Tensor4) -> Result<Tensor4> {
    let side = 2 * p.radius + 1;
    let win2 = side * side;
    let n = flow.shape.n;
    let os = Shape4::new(n, p.num_levels * win2, p.h, p.w);
    let mut out = vec![0.0f64; os.numel()];
    let hw = p.h * p.w;
    for (l, level) in p.levels.iter().enumerate() {
        let part = corr_sample_forward(level, flow, l, p.radius, p.h, p.w)?;
        for ni in 0..n {
            let dst = ((ni * p.num_levels + l) * win2) * hw;
            let src = (ni * win2) * hw;
            out[dst..dst + win2 * hw].copy_from_slice(&part.data[src..src + win2 * hw]);
        }
    }
    Ok(Tensor4::new(os, out))
}
