//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends one node holding its inputs and the
//! resulting value. `backward` replays the tape in strict reverse execution
//! order exactly once per node, accumulating gradients in a fixed order, so
//! two runs over identical inputs produce bit-identical gradients.

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::corr;
use crate::error::{Result, SkError};
use crate::gma;
use crate::tensor::{Precision, Shape4, Tensor4};
use crate::upsample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Abs(usize),
    /// x * s with s a (1,1,1,1) tensor
    MulScalar(usize, usize),
    ConcatC(Vec<usize>),
    SliceC { x: usize, start: usize, len: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: ConvSpec },
    AvgPool2(usize),
    CorrBase { f1: usize, f2: usize, normalize: bool },
    CorrSample { level: usize, flow: usize, level_idx: usize, radius: usize, base_h: usize, base_w: usize },
    Attention { q: usize, k: usize, v: usize },
    ConvexUpsample { flow: usize, mask: usize },
    BilinearUp8(usize),
    Sum(usize),
    Mean(usize),
    /// Per-sample, per-channel spatial normalization to zero mean and unit
    /// variance (no learned affine).
    InstanceNorm(usize),
}

const INST_NORM_EPS: f64 = 1e-6;

pub struct Tape {
    precision: Precision,
    values: Vec<Tensor4>,
    ops: Vec<Op>,
    trainable: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { precision, values: Vec::new(), ops: Vec::new(), trainable: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, mut value: Tensor4, op: Op, trainable: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            self.precision.quantize(&mut value.data);
        }
        self.values.push(value);
        self.ops.push(op);
        self.trainable.push(trainable);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.values[v.0].shape
    }

    /// Gradient of the last backward pass with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, ctx: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.values[a.0].check_same_shape(&self.values[b.0], ctx)?;
        let data = self.values[a.0]
            .data
            .iter()
            .zip(self.values[b.0].data.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(Tensor4::new(self.values[a.0].shape, data), op, false))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.values[a.0].data.iter().map(|x| f(*x)).collect();
        self.push(Tensor4::new(self.values[a.0].shape, data), op, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_fwd, Op::Gelu(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    /// Multiply by a scalar-shaped tensor (e.g. a learned gain).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.values[s.0].is_scalar() {
            return Err(SkError::Invalid(format!(
                "mul_scalar expects a scalar second operand, got {}",
                self.values[s.0].shape
            )));
        }
        let sv = self.values[s.0].data[0];
        let data = self.values[a.0].data.iter().map(|x| x * sv).collect();
        Ok(self.push(Tensor4::new(self.values[a.0].shape, data), Op::MulScalar(a.0, s.0), false))
    }

    // ---- shape ops ----

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SkError::Invalid("concat of an empty list".into()));
        }
        let first = self.values[parts[0].0].shape;
        let mut c_total = 0;
        for p in parts {
            let s = self.values[p.0].shape;
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(SkError::ShapeMismatch {
                    left: s.as_tuple(),
                    right: first.as_tuple(),
                    context: "concat_channels spatial dims".into(),
                });
            }
            c_total += s.c;
        }
        let os = Shape4::new(first.n, c_total, first.h, first.w);
        let hw = first.h * first.w;
        let mut data = vec![0.0f64; os.numel()];
        for ni in 0..first.n {
            let mut c_off = 0;
            for p in parts {
                let s = self.values[p.0].shape;
                let src = &self.values[p.0].data[ni * s.c * hw..(ni + 1) * s.c * hw];
                let dst_off = (ni * c_total + c_off) * hw;
                data[dst_off..dst_off + s.c * hw].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor4::new(os, data), Op::ConcatC(ids), false))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.values[x.0].shape;
        if start + len > s.c {
            return Err(SkError::Invalid(format!(
                "channel slice {}..{} out of range for {} channels",
                start,
                start + len,
                s.c
            )));
        }
        let hw = s.h * s.w;
        let os = Shape4::new(s.n, len, s.h, s.w);
        let mut data = vec![0.0f64; os.numel()];
        for ni in 0..s.n {
            let src = (ni * s.c + start) * hw;
            let dst = ni * len * hw;
            data[dst..dst + len * hw].copy_from_slice(&self.values[x.0].data[src..src + len * hw]);
        }
        Ok(self.push(Tensor4::new(os, data), Op::SliceC { x: x.0, start, len }, false))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, spec: &ConvSpec, w: Var, b: Option<Var>) -> Result<Var> {
        let out = conv2d_forward(&self.values[x.0], spec, &self.values[w.0], b.map(|b| &self.values[b.0]))?;
        Ok(self.push(out, Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), spec: *spec }, false))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = corr::avg_pool2_forward(&self.values[x.0])?;
        Ok(self.push(out, Op::AvgPool2(x.0), false))
    }

    pub fn corr_base(&mut self, f1: Var, f2: Var, normalize: bool) -> Result<Var> {
        let out = corr::corr_base_forward(&self.values[f1.0], &self.values[f2.0], normalize)?;
        Ok(self.push(out, Op::CorrBase { f1: f1.0, f2: f2.0, normalize }, false))
    }

    /// Windowed bilinear sampling of one pyramid level. The flow argument is
    /// treated as a constant: no gradient flows into the lookup coordinates.
    pub fn corr_sample(
        &mut self,
        level: Var,
        flow: Var,
        level_idx: usize,
        radius: usize,
        base_h: usize,
        base_w: usize,
    ) -> Result<Var> {
        let out = corr::corr_sample_forward(
            &self.values[level.0],
            &self.values[flow.0],
            level_idx,
            radius,
            base_h,
            base_w,
        )?;
        Ok(self.push(
            out,
            Op::CorrSample { level: level.0, flow: flow.0, level_idx, radius, base_h, base_w },
            false,
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let out = gma::attention_forward(&self.values[q.0], &self.values[k.0], &self.values[v.0])?;
        Ok(self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0 }, false))
    }

    pub fn convex_upsample8(&mut self, flow: Var, mask: Var) -> Result<Var> {
        let out = upsample::convex_upsample8_forward(&self.values[flow.0], &self.values[mask.0])?;
        Ok(self.push(out, Op::ConvexUpsample { flow: flow.0, mask: mask.0 }, false))
    }

    pub fn bilinear_up8(&mut self, flow: Var) -> Var {
        let out = upsample::bilinear_up8_forward(&self.values[flow.0]);
        self.push(out, Op::BilinearUp8(flow.0), false)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].data.iter().sum();
        self.push(Tensor4::scalar(s), Op::Sum(a.0), false)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].data.len();
        let s: f64 = self.values[a.0].data.iter().sum();
        self.push(Tensor4::scalar(s / n as f64), Op::Mean(a.0), false)
    }

    /// Normalize each (sample, channel) plane to zero mean and unit variance
    /// over its spatial extent. Puts feature maps from differently scaled
    /// inputs on a common footing before correlation.
    pub fn instance_norm(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let (n, c, h, w) = t.shape.as_tuple();
        let hw = h * w;
        let mut data = vec![0.0f64; t.data.len()];
        for p in 0..n * c {
            let x = &t.data[p * hw..(p + 1) * hw];
            let mu = x.iter().sum::<f64>() / hw as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + INST_NORM_EPS).sqrt();
            for (o, v) in data[p * hw..(p + 1) * hw].iter_mut().zip(x) {
                *o = (v - mu) * inv;
            }
        }
        self.push(Tensor4::new(t.shape, data), Op::InstanceNorm(a.0), false)
    }

    // ---- backward ----

    fn accum(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: impl IntoIterator<Item = f64>, len: usize) {
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse replay. Returns the number of nodes visited (each exactly once).
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.values.is_empty() {
            return Err(SkError::Invalid("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(SkError::Invalid("backward called twice without reset".into()));
        }
        if !self.values[loss.0].is_scalar() {
            return Err(SkError::Invalid(format!(
                "loss must be scalar, got shape {}",
                self.values[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0usize;
        for i in (0..self.values.len()).rev() {
            visited += 1;
            let Some(go) = self.grads[i].clone() else { continue };
            let gout = Tensor4::new(self.values[i].shape, go);
            let grads = &mut self.grads;
            let values = &self.values;
            let numel = |j: usize| values[j].shape.numel();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    Self::accum(grads, *a, gout.data.iter().cloned(), numel(*a));
                    Self::accum(grads, *b, gout.data.iter().cloned(), numel(*b));
                }
                Op::Sub(a, b) => {
                    Self::accum(grads, *a, gout.data.iter().cloned(), numel(*a));
                    Self::accum(grads, *b, gout.data.iter().map(|g| -g), numel(*b));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    Self::accum(grads, a, gout.data.iter().zip(&values[b].data).map(|(g, y)| g * y), numel(a));
                    Self::accum(grads, b, gout.data.iter().zip(&values[a].data).map(|(g, x)| g * x), numel(b));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    Self::accum(grads, *a, gout.data.iter().map(|g| g * s), numel(*a));
                }
                Op::Relu(a) => {
                    let a = *a;
                    Self::accum(
                        grads,
                        a,
                        gout.data.iter().zip(&values[a].data).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                        numel(a),
                    );
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    Self::accum(
                        grads,
                        a,
                        gout.data.iter().zip(&values[i].data).map(|(g, y)| g * y * (1.0 - y)),
                        numel(a),
                    );
                }
                Op::Tanh(a) => {
                    let a = *a;
                    Self::accum(
                        grads,
                        a,
                        gout.data.iter().zip(&values[i].data).map(|(g, y)| g * (1.0 - y * y)),
                        numel(a),
                    );
                }
                Op::Gelu(a) => {
                    let a = *a;
                    Self::accum(
                        grads,
                        a,
                        gout.data.iter().zip(&values[a].data).map(|(g, x)| g * gelu_grad(*x)),
                        numel(a),
                    );
                }
                Op::Abs(a) => {
                    let a = *a;
                    Self::accum(
                        grads,
                        a,
                        gout.data.iter().zip(&values[a].data).map(|(g, x)| g * x.signum() * (*x != 0.0) as i32 as f64),
                        numel(a),
                    );
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let sv = values[s].data[0];
                    Self::accum(grads, a, gout.data.iter().map(|g| g * sv), numel(a));
                    let dot: f64 = gout.data.iter().zip(&values[a].data).map(|(g, x)| g * x).sum();
                    Self::accum(grads, s, std::iter::once(dot), 1);
                }
                Op::ConcatC(parts) => {
                    let parts = parts.clone();
                    let os = values[i].shape;
                    let hw = os.h * os.w;
                    for ni in 0..os.n {
                        let mut c_off = 0usize;
                        for p in &parts {
                            let s = values[*p].shape;
                            let src = (ni * os.c + c_off) * hw;
                            let dst = ni * s.c * hw;
                            let slot = grads[*p].get_or_insert_with(|| vec![0.0; s.numel()]);
                            for q in 0..s.c * hw {
                                slot[dst + q] += gout.data[src + q];
                            }
                            c_off += s.c;
                        }
                    }
                }
                Op::SliceC { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let s = values[x].shape;
                    let hw = s.h * s.w;
                    let slot = grads[x].get_or_insert_with(|| vec![0.0; s.numel()]);
                    for ni in 0..s.n {
                        let dst = (ni * s.c + start) * hw;
                        let src = ni * len * hw;
                        for q in 0..len * hw {
                            slot[dst + q] += gout.data[src + q];
                        }
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (x, w, b, spec) = (*x, *w, *b, *spec);
                    let (gx, gw, gb) = conv2d_backward(&values[x], &spec, &values[w], &gout, b.is_some());
                    Self::accum(grads, x, gx.data, numel(x));
                    Self::accum(grads, w, gw.data, numel(w));
                    if let (Some(b), Some(gb)) = (b, gb) {
                        Self::accum(grads, b, gb.data, numel(b));
                    }
                }
                Op::AvgPool2(x) => {
                    let x = *x;
                    let gx = corr::avg_pool2_backward(values[x].shape, &gout);
                    Self::accum(grads, x, gx.data, numel(x));
                }
                Op::CorrBase { f1, f2, normalize } => {
                    let (f1, f2, normalize) = (*f1, *f2, *normalize);
                    let (g1, g2) = corr::corr_base_backward(&values[f1], &values[f2], normalize, &gout);
                    Self::accum(grads, f1, g1.data, numel(f1));
                    Self::accum(grads, f2, g2.data, numel(f2));
                }
                Op::CorrSample { level, flow, level_idx, radius, base_h, base_w } => {
                    let (level, flow) = (*level, *flow);
                    let gl = corr::corr_sample_backward(
                        values[level].shape,
                        &values[flow],
                        *level_idx,
                        *radius,
                        *base_h,
                        *base_w,
                        &gout,
                    );
                    Self::accum(grads, level, gl.data, numel(level));
                }
                Op::Attention { q, k, v } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (gq, gk, gv) = gma::attention_backward(&values[q], &values[k], &values[v], &gout);
                    Self::accum(grads, q, gq.data, numel(q));
                    Self::accum(grads, k, gk.data, numel(k));
                    Self::accum(grads, v, gv.data, numel(v));
                }
                Op::ConvexUpsample { flow, mask } => {
                    let (flow, mask) = (*flow, *mask);
                    let (gf, gm) = upsample::convex_upsample8_backward(&values[flow], &values[mask], &gout);
                    Self::accum(grads, flow, gf.data, numel(flow));
                    Self::accum(grads, mask, gm.data, numel(mask));
                }
                Op::BilinearUp8(flow) => {
                    let flow = *flow;
                    let gf = upsample::bilinear_up8_backward(values[flow].shape, &gout);
                    Self::accum(grads, flow, gf.data, numel(flow));
                }
                Op::Sum(a) => {
                    let g = gout.data[0];
                    Self::accum(grads, *a, std::iter::repeat(g).take(numel(*a)), numel(*a));
                }
                Op::Mean(a) => {
                    let n = numel(*a);
                    let g = gout.data[0] / n as f64;
                    Self::accum(grads, *a, std::iter::repeat(g).take(n), n);
                }
                Op::InstanceNorm(a) => {
                    let a = *a;
                    let (n, c, h, w) = values[a].shape.as_tuple();
                    let hw = h * w;
                    let y = &values[i];
                    let mut gx = vec![0.0f64; values[a].data.len()];
                    for p in 0..n * c {
                        let x = &values[a].data[p * hw..(p + 1) * hw];
                        let yp = &y.data[p * hw..(p + 1) * hw];
                        let gp = &gout.data[p * hw..(p + 1) * hw];
                        let mu = x.iter().sum::<f64>() / hw as f64;
                        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
                        let inv = 1.0 / (var + INST_NORM_EPS).sqrt();
                        let gmean = gp.iter().sum::<f64>() / hw as f64;
                        let gymean =
                            gp.iter().zip(yp).map(|(g, y)| g * y).sum::<f64>() / hw as f64;
                        for ((o, g), yv) in gx[p * hw..(p + 1) * hw].iter_mut().zip(gp).zip(yp) {
                            *o = inv * (g - gmean - yv * gymean);
                        }
                    }
                    Self::accum(grads, a, gx, numel(a));
                }
            }
        }
        // populate the grad slot of trainable leaves
        for i in 0..self.values.len() {
            if self.trainable[i] && matches!(self.ops[i], Op::Leaf) {
                let g = self.grads[i].clone().unwrap_or_else(|| vec![0.0; self.values[i].shape.numel()]);
                self.values[i].grad = Some(g);
            }
        }
        Ok(visited)
    }
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// The differentiable elementwise operations, enumerable so verification
/// suites can iterate over all of them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemOp {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
}

impl Tape {
    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = |b: Option<Var>| b.ok_or_else(|| SkError::Invalid("binary elementwise op needs two operands".into()));
        match op {
            ElemOp::Add => self.add(a, need_b(b)?),
            ElemOp::Mul => self.mul(a, need_b(b)?),
            ElemOp::Relu => Ok(self.relu(a)),
            ElemOp::Sigmoid => Ok(self.sigmoid(a)),
            ElemOp::Tanh => Ok(self.tanh(a)),
            ElemOp::Scale(s) => Ok(self.scale(a, s)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SkRng;

    #[test]
    fn relu_definition() {
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(Tensor4::new(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]), false);
        let y = t.relu(x);
        assert_eq!(t.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_identity() {
        let mut t = Tape::new(Precision::F64);
        let mut rng = SkRng::new(1);
        let xt = Tensor4::random_normal(Shape4::new(1, 2, 3, 3), &mut rng, 1.0);
        let x = t.leaf(xt.clone(), false);
        let z = t.constant(Tensor4::zeros(1, 2, 3, 3));
        let y = t.add(x, z).unwrap();
        assert_eq!(t.value(y).data, xt.data);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new(Precision::F64);
        let a = t.constant(Tensor4::zeros(1, 2, 3, 3));
        let b = t.constant(Tensor4::zeros(1, 2, 3, 4));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("(1, 2, 3, 3)") && err.contains("(1, 2, 3, 4)"), "{err}");
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(Tensor4::new(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]), true);
        let loss = t.sum(x);
        let visited = t.backward(loss).unwrap();
        assert_eq!(visited, t.len());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.value(x).grad.as_deref().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_gradient() {
        // loss = sum(x^2)/2 at x=[3] -> grad 3
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(Tensor4::scalar(3.0), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn mul_gradient_matches_finite_difference() {
        let run = |av: f64| {
            let mut t = Tape::new(Precision::F64);
            let a = t.leaf(Tensor4::scalar(av), true);
            let b = t.constant(Tensor4::scalar(3.0));
            let m = t.mul(a, b).unwrap();
            let loss = t.sum(m);
            (t.value(loss).data[0], t, a, loss)
        };
        let (_, mut t, a, loss) = run(2.0);
        t.backward(loss).unwrap();
        let analytic = t.grad(a).unwrap()[0];
        let eps = 1e-6;
        let fd = (run(2.0 + eps).0 - run(2.0 - eps).0) / (2.0 * eps);
        assert!(((analytic - fd) / fd).abs() < 1e-6, "analytic {analytic}, fd {fd}");
        assert_eq!(analytic, 3.0);
    }

    #[test]
    fn instance_norm_planes_are_standardized() {
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(
            Tensor4::from_fn(Shape4::new(2, 2, 3, 3), |n, c, y, x| {
                (n * 17 + c * 5) as f64 + (y * 3 + x) as f64 * (c + 1) as f64
            }),
            false,
        );
        let y = t.instance_norm(x);
        let v = t.value(y);
        let hw = 9;
        for p in 0..4 {
            let plane = &v.data[p * hw..(p + 1) * hw];
            let mu = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / hw as f64;
            assert!(mu.abs() < 1e-12, "plane {p} mean {mu}");
            assert!((var - 1.0).abs() < 1e-6, "plane {p} var {var}");
        }
        // a constant plane normalizes to zero, not NaN
        let c = t.leaf(Tensor4::full(Shape4::new(1, 1, 3, 3), 4.2), false);
        let yc = t.instance_norm(c);
        assert!(t.value(yc).data.iter().all(|v| v.abs() < 1e-9 && v.is_finite()));
    }

    #[test]
    fn concat_shapes_and_single_identity() {
        let mut t = Tape::new(Precision::F64);
        let a = t.constant(Tensor4::zeros(1, 2, 4, 4));
        let b = t.constant(Tensor4::zeros(1, 3, 4, 4));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c), Shape4::new(1, 5, 4, 4));

        let mut rng = SkRng::new(2);
        let xt = Tensor4::random_normal(Shape4::new(2, 3, 2, 2), &mut rng, 1.0);
        let x = t.leaf(xt.clone(), false);
        let y = t.concat_channels(&[x]).unwrap();
        assert_eq!(t.value(y).data, xt.data);

        assert!(t.concat_channels(&[]).is_err());
        let bad = t.constant(Tensor4::zeros(1, 1, 3, 4));
        assert!(t.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn concat_backward_routes_slices() {
        let mut t = Tape::new(Precision::F64);
        let a = t.leaf(Tensor4::new(Shape4::new(1, 1, 1, 2), vec![1.0, 2.0]), true);
        let b = t.leaf(Tensor4::new(Shape4::new(1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]), true);
        let c = t.concat_channels(&[a, b]).unwrap();
        // weight channels differently so routing errors are visible
        let wt = t.constant(Tensor4::new(Shape4::new(1, 3, 1, 2), vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0]));
        let m = t.mul(c, wt).unwrap();
        let loss = t.sum(m);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(Tensor4::zeros(1, 1, 2, 2), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn double_backward_rejected() {
        let mut t = Tape::new(Precision::F64);
        let x = t.leaf(Tensor4::scalar(1.0), true);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn empty_tape_rejected() {
        let mut t = Tape::new(Precision::F64);
        assert!(t.backward(Var(0)).is_err());
    }

    #[test]
    fn f32_mode_quantizes_results() {
        let mut t = Tape::new(Precision::F32);
        let a = t.leaf(Tensor4::scalar(0.1), false);
        let b = t.leaf(Tensor4::scalar(0.2), false);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data[0], (0.1f64 + 0.2f64) as f32 as f64);
    }

    #[test]
    fn determinism_bit_identical() {
        let build = || {
            let mut rng = SkRng::new(77);
            let mut t = Tape::new(Precision::F64);
            let x = t.leaf(Tensor4::random_normal(Shape4::new(1, 3, 4, 4), &mut rng, 1.0), true);
            let w = t.leaf(Tensor4::random_normal(Shape4::new(3, 1, 3, 3), &mut rng, 0.5), true);
            let spec = ConvSpec::depthwise(3, 3).no_bias();
            let y = t.conv2d(x, &spec, w, None).unwrap();
            let s = t.sigmoid(y);
            let loss = t.mean(s);
            t.backward(loss).unwrap();
            (t.value(loss).data[0], t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (l1, gx1, gw1) = build();
        let (l2, gx2, gw2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
