//! x8 flow upsampling: learned convex combination of the coarse 3x3
//! neighborhood, or plain bilinear interpolation. Both multiply displacement
//! magnitudes by 8.

use crate::error::{Result, SkError};
use crate::tensor::{Shape4, Tensor4};

pub const UP: usize = 8;
/// Mask channels: 9 neighbor weights for each of the 8x8 fine offsets.
/// Channel layout: t * 64 + fy * 8 + fx, softmax over t in 0..9.
pub const MASK_CHANNELS: usize = 9 * UP * UP;

#[inline]
fn neighbor(i: usize, j: usize, t: usize, h: usize, w: usize) -> (usize, usize) {
    // replicate padding at the coarse border
    let dy = (t / 3) as isize - 1;
    let dx = (t % 3) as isize - 1;
    let y = (i as isize + dy).clamp(0, h as isize - 1) as usize;
    let x = (j as isize + dx).clamp(0, w as isize - 1) as usize;
    (y, x)
}

fn softmax9(logits: &[f64; 9]) -> [f64; 9] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0f64; 9];
    let mut z = 0.0;
    for t in 0..9 {
        out[t] = (logits[t] - m).exp();
        z += out[t];
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    out
}

fn mask_logits(mask: &Tensor4, ni: usize, i: usize, j: usize, fy: usize, fx: usize) -> [f64; 9] {
    let (h, w) = (mask.shape.h, mask.shape.w);
    let hw = h * w;
    let mut l = [0.0f64; 9];
    for (t, lt) in l.iter_mut().enumerate() {
        let c = t * UP * UP + fy * UP + fx;
        *lt = mask.data[(ni * mask.shape.c + c) * hw + i * w + j];
    }
    l
}

pub fn convex_upsample8_forward(flow: &Tensor4, mask: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = flow.shape.as_tuple();
    if mask.shape.n != n || mask.shape.c != MASK_CHANNELS || mask.shape.h != h || mask.shape.w != w {
        return Err(SkError::ShapeMismatch {
            left: mask.shape.as_tuple(),
            right: (n, MASK_CHANNELS, h, w),
            context: "convex upsampling mask".into(),
        });
    }
    let os = Shape4::new(n, c, h * UP, w * UP);
    let mut out = vec![0.0f64; os.numel()];
    let hw = h * w;
    let (oh, ow) = (h * UP, w * UP);
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for fy in 0..UP {
                    for fx in 0..UP {
                        let wgt = softmax9(&mask_logits(mask, ni, i, j, fy, fx));
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for (t, wt) in wgt.iter().enumerate() {
                                let (y, x) = neighbor(i, j, t, h, w);
                                acc += wt * flow.data[(ni * c + ch) * hw + y * w + x];
                            }
                            out[(ni * c + ch) * oh * ow + (i * UP + fy) * ow + (j * UP + fx)] =
                                8.0 * acc;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor4::new(os, out))
}

pub fn convex_upsample8_backward(
    flow: &Tensor4,
    mask: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let (n, c, h, w) = flow.shape.as_tuple();
    let hw = h * w;
    let (oh, ow) = (h * UP, w * UP);
    let mut gflow = vec![0.0f64; flow.shape.numel()];
    let mut gmask = vec![0.0f64; mask.shape.numel()];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for fy in 0..UP {
                    for fx in 0..UP {
                        let wgt = softmax9(&mask_logits(mask, ni, i, j, fy, fx));
                        // dL/dw_t summed over channels, then softmax jacobian
                        let mut gw = [0.0f64; 9];
                        for ch in 0..c {
                            let g = 8.0
                                * grad_out.data
                                    [(ni * c + ch) * oh * ow + (i * UP + fy) * ow + (j * UP + fx)];
                            if g == 0.0 {
                                continue;
                            }
                            for t in 0..9 {
                                let (y, x) = neighbor(i, j, t, h, w);
                                let fv = flow.data[(ni * c + ch) * hw + y * w + x];
                                gw[t] += g * fv;
                                gflow[(ni * c + ch) * hw + y * w + x] += wgt[t] * g;
                            }
                        }
                        let dot: f64 = (0..9).map(|t| wgt[t] * gw[t]).sum();
                        for t in 0..9 {
                            let cidx = t * UP * UP + fy * UP + fx;
                            gmask[(ni * mask.shape.c + cidx) * hw + i * w + j] +=
                                wgt[t] * (gw[t] - dot);
                        }
                    }
                }
            }
        }
    }
    (Tensor4::new(flow.shape, gflow), Tensor4::new(mask.shape, gmask))
}

#[inline]
fn src_taps(size: usize, dst: usize) -> (usize, usize, f64) {
    // half-pixel-centered mapping, clamped at the border
    let s = (dst as f64 + 0.5) / UP as f64 - 0.5;
    let s = s.clamp(0.0, (size - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, s - i0 as f64)
}

pub fn bilinear_up8_forward(flow: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = flow.shape.as_tuple();
    let (oh, ow) = (h * UP, w * UP);
    let mut out = vec![0.0f64; n * c * oh * ow];
    for nc in 0..n * c {
        let src = &flow.data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = src_taps(h, oy);
            for ox in 0..ow {
                let (x0, x1, fx) = src_taps(w, ox);
                let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                dst[oy * ow + ox] = 8.0 * v;
            }
        }
    }
    Tensor4::new(Shape4::new(n, c, oh, ow), out)
}

pub fn bilinear_up8_backward(in_shape: Shape4, grad_out: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = in_shape.as_tuple();
    let (oh, ow) = (h * UP, w * UP);
    let mut gx = vec![0.0f64; in_shape.numel()];
    for nc in 0..n * c {
        let g = &grad_out.data[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = src_taps(h, oy);
            for ox in 0..ow {
                let (x0, x1, fx) = src_taps(w, ox);
                let gv = 8.0 * g[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                dst[y0 * w + x1] += (1.0 - fy) * fx * gv;
                dst[y1 * w + x0] += fy * (1.0 - fx) * gv;
                dst[y1 * w + x1] += fy * fx * gv;
            }
        }
    }
    Tensor4::new(in_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SkRng;

    #[test]
    fn constant_flow_stays_constant_both_modes() {
        let flow = Tensor4::full(Shape4::new(1, 2, 3, 3), 0.0);
        let mut flow = flow;
        for p in 0..9 {
            flow.data[p] = 1.5; // u = a
            flow.data[9 + p] = -0.25; // v = b
        }
        let mut rng = SkRng::new(1);
        let mask = Tensor4::random_normal(Shape4::new(1, MASK_CHANNELS, 3, 3), &mut rng, 1.0);
        let convex = convex_upsample8_forward(&flow, &mask).unwrap();
        let bilinear = bilinear_up8_forward(&flow);
        for t in [&convex, &bilinear] {
            let hw = 24 * 24;
            for p in 0..hw {
                assert!((t.data[p] - 8.0 * 1.5).abs() < 1e-12);
                assert!((t.data[hw + p] - 8.0 * -0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convex_weights_sum_to_one() {
        let mut rng = SkRng::new(2);
        let mask = Tensor4::random_normal(Shape4::new(1, MASK_CHANNELS, 2, 2), &mut rng, 2.0);
        for i in 0..2 {
            for j in 0..2 {
                for fy in 0..UP {
                    for fx in 0..UP {
                        let wgt = softmax9(&mask_logits(&mask, 0, i, j, fy, fx));
                        let s: f64 = wgt.iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                        assert!(wgt.iter().all(|x| *x >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_reproduces_linear_field_interior() {
        // coarse field f(i, j) = a + b*i + c*j; the closed-form upsampled
        // value at fine pixel (Y, X) is 8 * f evaluated at the source point
        let (a, b, c) = (0.7, 0.2, -0.1);
        let (h, w) = (4usize, 5usize);
        let flow = Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, i, j| {
            a + b * i as f64 + c * j as f64
        });
        let up = bilinear_up8_forward(&flow);
        for oy in 0..h * UP {
            let sy = (oy as f64 + 0.5) / 8.0 - 0.5;
            if sy < 0.0 || sy > (h - 1) as f64 {
                continue; // border extrapolation clamps
            }
            for ox in 0..w * UP {
                let sx = (ox as f64 + 0.5) / 8.0 - 0.5;
                if sx < 0.0 || sx > (w - 1) as f64 {
                    continue;
                }
                let want = 8.0 * (a + b * sy + c * sx);
                assert!((up.at(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convex_requires_mask_shape() {
        let flow = Tensor4::zeros(1, 2, 3, 3);
        let mask = Tensor4::zeros(1, 10, 3, 3);
        assert!(convex_upsample8_forward(&flow, &mask).is_err());
    }
}
