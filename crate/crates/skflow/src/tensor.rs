//! Dense rank-4 tensor (batch, channel, height, width), row-major f64 storage.
//!
//! 64-bit floats are the default so finite-difference gradient checks are
//! meaningful. A 32-bit mode exists in which every operation result is rounded
//! through f32; it is excluded from gradient-check tolerances.

use crate::error::{Result, SkError};
use crate::rng::SkRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Floating point mode. `F32` rounds the result of every operation through
/// f32 precision while keeping f64 storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn quantize(&self, data: &mut [f64]) {
        if let Precision::F32 = self {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor4 {
    pub shape: Shape4,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.numel(),
            "data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor4 { shape, data, grad: None }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        let shape = Shape4::new(n, c, h, w);
        Tensor4 { shape, data: vec![0.0; shape.numel()], grad: None }
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Tensor4 { shape, data: vec![value; shape.numel()], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor4::new(Shape4::new(1, 1, 1, 1), vec![value])
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4::new(shape, data)
    }

    pub fn random_normal(shape: Shape4, rng: &mut SkRng, std: f64) -> Self {
        let data = (0..shape.numel()).map(|_| rng.normal() * std).collect();
        Tensor4::new(shape, data)
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[self.shape.index(n, c, y, x)]
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the batch dimension; every part must share c/h/w.
    pub fn stack_n(parts: &[Tensor4]) -> Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| SkError::Invalid("stack_n needs at least one tensor".into()))?;
        let (_, c, h, w) = first.shape.as_tuple();
        let mut n = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.shape.as_tuple();
            if (pc, ph, pw) != (c, h, w) {
                return Err(SkError::ShapeMismatch {
                    left: first.shape.as_tuple(),
                    right: p.shape.as_tuple(),
                    context: "stack_n".to_string(),
                });
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4::new(Shape4::new(n, c, h, w), data))
    }

    pub fn check_same_shape(&self, other: &Tensor4, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(SkError::ShapeMismatch {
                left: self.shape.as_tuple(),
                right: other.shape.as_tuple(),
                context: context.to_string(),
            });
        }
        Ok(())
    }
}
