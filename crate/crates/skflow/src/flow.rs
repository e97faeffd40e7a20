//! Per-pixel displacement fields.

use crate::error::{Result, SkError};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Eighth,
    Full,
}

/// A (u, v) displacement map. `u` is horizontal (columns), `v` vertical
/// (rows), both in pixels at the stated resolution.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub w: usize,
    pub h: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub resolution: Resolution,
}

impl FlowField {
    pub fn new(w: usize, h: usize, u: Vec<f64>, v: Vec<f64>, resolution: Resolution) -> Result<Self> {
        if u.len() != w * h || v.len() != w * h {
            return Err(SkError::Invalid(format!(
                "flow component length {}/{} does not match {}x{}",
                u.len(),
                v.len(),
                w,
                h
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(SkError::Invalid("flow field contains non-finite values".into()));
        }
        Ok(FlowField { w, h, u, v, resolution })
    }

    pub fn zeros(w: usize, h: usize, resolution: Resolution) -> Self {
        FlowField { w, h, u: vec![0.0; w * h], v: vec![0.0; w * h], resolution }
    }

    pub fn constant(w: usize, h: usize, du: f64, dv: f64, resolution: Resolution) -> Self {
        FlowField { w, h, u: vec![du; w * h], v: vec![dv; w * h], resolution }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.u[y * self.w + x], self.v[y * self.w + x])
    }

    /// Pack as a (1, 2, h, w) tensor, channel 0 = u, channel 1 = v.
    pub fn to_tensor(&self) -> Tensor4 {
        let mut data = Vec::with_capacity(2 * self.w * self.h);
        data.extend_from_slice(&self.u);
        data.extend_from_slice(&self.v);
        Tensor4::new(Shape4::new(1, 2, self.h, self.w), data)
    }

    /// Extract sample `n` of a (n, 2, h, w) tensor.
    pub fn from_tensor(t: &Tensor4, n: usize, resolution: Resolution) -> Result<Self> {
        if t.shape.c != 2 || n >= t.shape.n {
            return Err(SkError::Invalid(format!(
                "expected a (n, 2, h, w) flow tensor with n > {}, got {}",
                n, t.shape
            )));
        }
        let (h, w) = (t.shape.h, t.shape.w);
        let hw = h * w;
        let base = n * 2 * hw;
        FlowField::new(
            w,
            h,
            t.data[base..base + hw].to_vec(),
            t.data[base + hw..base + 2 * hw].to_vec(),
            resolution,
        )
    }

    pub fn magnitude(&self, y: usize, x: usize) -> f64 {
        let (u, v) = self.at(y, x);
        (u * u + v * v).sqrt()
    }

    pub fn max_magnitude(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.u.len() {
            m = m.max((self.u[i] * self.u[i] + self.v[i] * self.v[i]).sqrt());
        }
        m
    }
}
