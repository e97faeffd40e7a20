//! 2-D convolutions (depth-wise, point-wise, dense) with "same" zero padding,
//! dilation, optional stride, and exact multiply-accumulate accounting.
//!
//! The implementation is a direct loop (no im2col/FFT); the inner loops are
//! arranged as contiguous row updates so the compiler can vectorize them.
//! All accumulation orders are fixed, so results are bit-reproducible.

use crate::error::{Result, SkError};
use crate::tensor::{Shape4, Tensor4};
use num_rational::Ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Depthwise,
    Pointwise,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn depthwise(c: usize, kernel: usize) -> Self {
        ConvSpec { kind: ConvKind::Depthwise, kernel, dilation: 1, stride: 1, c_in: c, c_out: c, bias: true }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        ConvSpec { kind: ConvKind::Pointwise, kernel: 1, dilation: 1, stride: 1, c_in, c_out, bias: true }
    }

    pub fn dense(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec { kind: ConvKind::Dense, kernel, dilation: 1, stride: 1, c_in, c_out, bias: true }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(SkError::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(SkError::Config("dilation and stride must be positive".into()));
        }
        match self.kind {
            ConvKind::Depthwise => {
                if self.c_out != self.c_in {
                    return Err(SkError::Config(format!(
                        "depthwise requires c_out == c_in, got {} vs {}",
                        self.c_out, self.c_in
                    )));
                }
            }
            ConvKind::Pointwise => {
                if self.kernel != 1 || self.dilation != 1 {
                    return Err(SkError::Config(
                        "pointwise requires kernel == 1 and dilation == 1".into(),
                    ));
                }
            }
            ConvKind::Dense => {}
        }
        Ok(())
    }

    /// Receptive extent along one axis: dilation*(K-1) + 1.
    pub fn receptive_extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Expected weight tensor shape.
    pub fn weight_shape(&self) -> Shape4 {
        match self.kind {
            ConvKind::Depthwise => Shape4::new(self.c_in, 1, self.kernel, self.kernel),
            ConvKind::Pointwise => Shape4::new(self.c_out, self.c_in, 1, 1),
            ConvKind::Dense => Shape4::new(self.c_out, self.c_in, self.kernel, self.kernel),
        }
    }

    pub fn bias_shape(&self) -> Shape4 {
        Shape4::new(1, self.c_out, 1, 1)
    }

    pub fn weight_count(&self) -> u128 {
        let s = self.weight_shape();
        s.numel() as u128
    }

    pub fn param_count(&self) -> u128 {
        self.weight_count() + if self.bias { self.c_out as u128 } else { 0 }
    }

    /// Output spatial size under "same" zero padding.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }
}

/// Multiply count for one convolution over an (n, c_in, h, w) input. Bias adds
/// are excluded: the accounting counts multiplies only.
pub fn count_macs(spec: &ConvSpec, h: usize, w: usize, n: usize) -> u128 {
    let (oh, ow) = spec.out_hw(h, w);
    let spatial = (n * oh * ow) as u128;
    let k2 = (spec.kernel * spec.kernel) as u128;
    match spec.kind {
        ConvKind::Depthwise => spatial * spec.c_in as u128 * k2,
        ConvKind::Pointwise => spatial * spec.c_in as u128 * spec.c_out as u128,
        ConvKind::Dense => spatial * spec.c_in as u128 * spec.c_out as u128 * k2,
    }
}

/// Cost ratio of a super-kernel block against a dense LxL convolution:
///
/// 1/C_out + (1/C_out)(S^2/L^2) + ((1+3a)/L^2)(C_in/C_out) + a/L^2
///
/// evaluated exactly in rational arithmetic.
pub fn cost_ratio(
    l: usize,
    s: usize,
    alpha: Ratio<i128>,
    c_in: usize,
    c_out: usize,
) -> Result<Ratio<i128>> {
    if l == 0 {
        return Err(SkError::Config("L must be positive".into()));
    }
    if s > l || s == 0 {
        return Err(SkError::Config(format!("require L >= S >= 1, got L={l}, S={s}")));
    }
    let l2 = Ratio::from_integer((l * l) as i128);
    let s2 = Ratio::from_integer((s * s) as i128);
    let ci = Ratio::from_integer(c_in as i128);
    let co = Ratio::from_integer(c_out as i128);
    let one = Ratio::from_integer(1);
    let three = Ratio::from_integer(3);
    Ok(one / co + (one / co) * (s2 / l2) + ((one + three * alpha) / l2) * (ci / co) + alpha / l2)
}

/// Per-layer multiply and parameter counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacEntry {
    pub name: String,
    pub macs: u128,
    pub params: u128,
}

#[derive(Debug, Clone, Default)]
pub struct MacReport {
    pub entries: Vec<MacEntry>,
}

impl MacReport {
    pub fn push(&mut self, name: impl Into<String>, macs: u128, params: u128) {
        self.entries.push(MacEntry { name: name.into(), macs, params });
    }

    pub fn push_conv(&mut self, name: impl Into<String>, spec: &ConvSpec, h: usize, w: usize, n: usize) {
        self.push(name, count_macs(spec, h, w, n), spec.param_count());
    }

    pub fn extend(&mut self, other: MacReport) {
        self.entries.extend(other.entries);
    }

    pub fn total_macs(&self) -> u128 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_params(&self) -> u128 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn to_text_table(&self) -> String {
        let name_w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .chain(std::iter::once("layer".len()))
            .max()
            .unwrap_or(5)
            .max("TOTAL".len());
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}  {:>16}  {:>12}\n", "layer", "macs", "params"));
        for e in &self.entries {
            out.push_str(&format!("{:<name_w$}  {:>16}  {:>12}\n", e.name, e.macs, e.params));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>16}  {:>12}\n",
            "TOTAL",
            self.total_macs(),
            self.total_params()
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,macs,params\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.name, e.macs, e.params));
        }
        out.push_str(&format!("TOTAL,{},{}\n", self.total_macs(), self.total_params()));
        out
    }
}

fn check_weight_shapes(spec: &ConvSpec, x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>) -> Result<()> {
    spec.validate()?;
    if x.shape.c != spec.c_in {
        return Err(SkError::ShapeMismatch {
            left: x.shape.as_tuple(),
            right: (x.shape.n, spec.c_in, x.shape.h, x.shape.w),
            context: "conv2d input channels".into(),
        });
    }
    if w.shape != spec.weight_shape() {
        return Err(SkError::ShapeMismatch {
            left: w.shape.as_tuple(),
            right: spec.weight_shape().as_tuple(),
            context: "conv2d weights".into(),
        });
    }
    if let Some(b) = b {
        if b.shape != spec.bias_shape() {
            return Err(SkError::ShapeMismatch {
                left: b.shape.as_tuple(),
                right: spec.bias_shape().as_tuple(),
                context: "conv2d bias".into(),
            });
        }
    }
    if spec.receptive_extent() > x.shape.h.min(x.shape.w) {
        log::warn!(
            "conv receptive extent {} exceeds spatial size {}x{}",
            spec.receptive_extent(),
            x.shape.h,
            x.shape.w
        );
    }
    Ok(())
}

/// Forward convolution with "same" zero padding.
pub fn conv2d_forward(x: &Tensor4, spec: &ConvSpec, w: &Tensor4, b: Option<&Tensor4>) -> Result<Tensor4> {
    check_weight_shapes(spec, x, w, b)?;
    let (n, _, h, win) = x.shape.as_tuple();
    let (oh, ow) = spec.out_hw(h, win);
    let os = Shape4::new(n, spec.c_out, oh, ow);
    let mut out = vec![0.0f64; os.numel()];
    let pad = spec.dilation * (spec.kernel - 1) / 2;
    let hw = h * win;
    let ohw = oh * ow;
    let k = spec.kernel;

    for ni in 0..n {
        for co in 0..spec.c_out {
            let orow = &mut out[(ni * spec.c_out + co) * ohw..(ni * spec.c_out + co + 1) * ohw];
            if let Some(b) = b {
                let bv = b.data[co];
                orow.iter_mut().for_each(|v| *v = bv);
            }
            let (ci_lo, ci_hi) = match spec.kind {
                ConvKind::Depthwise => (co, co + 1),
                _ => (0, spec.c_in),
            };
            for ci in ci_lo..ci_hi {
                let xplane = &x.data[(ni * spec.c_in + ci) * hw..(ni * spec.c_in + ci + 1) * hw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = match spec.kind {
                            ConvKind::Depthwise => w.data[(co * k + ky) * k + kx],
                            _ => w.data[((co * spec.c_in + ci) * k + ky) * k + kx],
                        };
                        let dy = (ky * spec.dilation) as isize - pad as isize;
                        let dx = (kx * spec.dilation) as isize - pad as isize;
                        if spec.stride == 1 {
                            // valid output row range: iy = oy + dy in [0, h)
                            let oy_lo = (-dy).max(0) as usize;
                            let oy_hi = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                            let ox_lo = (-dx).max(0) as usize;
                            let ox_hi = ((win as isize - dx).min(ow as isize)).max(0) as usize;
                            for oy in oy_lo..oy_hi {
                                let iy = (oy as isize + dy) as usize;
                                let xrow = &xplane[iy * win..(iy + 1) * win];
                                let orow2 = &mut orow[oy * ow..(oy + 1) * ow];
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox as isize + dx) as usize;
                                    orow2[ox] += wv * xrow[ix];
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * spec.stride) as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * win..(iy as usize + 1) * win];
                                let orow2 = &mut orow[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * spec.stride) as isize + dx;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    orow2[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor4::new(os, out))
}

/// Gradients of conv2d with respect to input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    spec: &ConvSpec,
    w: &Tensor4,
    grad_out: &Tensor4,
    want_bias: bool,
) -> (Tensor4, Tensor4, Option<Tensor4>) {
    let (n, _, h, win) = x.shape.as_tuple();
    let (oh, ow) = spec.out_hw(h, win);
    debug_assert_eq!(grad_out.shape, Shape4::new(n, spec.c_out, oh, ow));
    let pad = spec.dilation * (spec.kernel - 1) / 2;
    let hw = h * win;
    let ohw = oh * ow;
    let k = spec.kernel;

    let mut gx = vec![0.0f64; x.shape.numel()];
    let mut gw = vec![0.0f64; w.shape.numel()];
    let mut gb = if want_bias { Some(vec![0.0f64; spec.c_out]) } else { None };

    for ni in 0..n {
        for co in 0..spec.c_out {
            let gorow = &grad_out.data[(ni * spec.c_out + co) * ohw..(ni * spec.c_out + co + 1) * ohw];
            if let Some(gb) = gb.as_mut() {
                gb[co] += gorow.iter().sum::<f64>();
            }
            let (ci_lo, ci_hi) = match spec.kind {
                ConvKind::Depthwise => (co, co + 1),
                _ => (0, spec.c_in),
            };
            for ci in ci_lo..ci_hi {
                let xbase = (ni * spec.c_in + ci) * hw;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = match spec.kind {
                            ConvKind::Depthwise => (co * k + ky) * k + kx,
                            _ => ((co * spec.c_in + ci) * k + ky) * k + kx,
                        };
                        let wv = w.data[widx];
                        let dy = (ky * spec.dilation) as isize - pad as isize;
                        let dx = (kx * spec.dilation) as isize - pad as isize;
                        let mut wacc = 0.0f64;
                        if spec.stride == 1 {
                            let oy_lo = (-dy).max(0) as usize;
                            let oy_hi = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                            let ox_lo = (-dx).max(0) as usize;
                            let ox_hi = ((win as isize - dx).min(ow as isize)).max(0) as usize;
                            for oy in oy_lo..oy_hi {
                                let iy = (oy as isize + dy) as usize;
                                let xrow = &x.data[xbase + iy * win..xbase + (iy + 1) * win];
                                let gxrow = &mut gx[xbase + iy * win..xbase + (iy + 1) * win];
                                let gorow2 = &gorow[oy * ow..(oy + 1) * ow];
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox as isize + dx) as usize;
                                    let g = gorow2[ox];
                                    gxrow[ix] += wv * g;
                                    wacc += g * xrow[ix];
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * spec.stride) as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let rowoff = xbase + iy as usize * win;
                                let gorow2 = &gorow[oy * ow..(oy + 1) * ow];
                                for ox in 0..ow {
                                    let ix = (ox * spec.stride) as isize + dx;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    let g = gorow2[ox];
                                    gx[rowoff + ix as usize] += wv * g;
                                    wacc += g * x.data[rowoff + ix as usize];
                                }
                            }
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    let gxt = Tensor4::new(x.shape, gx);
    let gwt = Tensor4::new(w.shape, gw);
    let gbt = gb.map(|v| Tensor4::new(spec.bias_shape(), v));
    (gxt, gwt, gbt)
}
