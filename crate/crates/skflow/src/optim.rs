//! AdamW optimization, one-cycle learning-rate schedule, the weighted
//! multi-iteration flow loss, and the training loop.

use crate::error::{Result, SkError};
use crate::net::SkFlowNet;
use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// AdamW with decoupled weight decay. Moment buffers follow the parameter
/// store's insertion order.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.shape.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m, v, t: 0 }
    }

    /// One update with gradients in store order, as produced by
    /// [`ParamVars::collect_grads`].
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(SkError::Invalid(format!(
                "optimizer holds {} moment buffers but got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.data.len() {
                return Err(SkError::Invalid(format!(
                    "gradient {} has {} elements, parameter has {}",
                    i,
                    g.len(),
                    p.data.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then linear anneal to zero over the remaining
/// steps.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl OneCycle {
    pub fn new(lr_max: f64, total_steps: usize) -> Self {
        OneCycle { lr_max, total_steps, warmup_frac: 0.05 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warm = ((total as f64 * self.warmup_frac) as usize).max(1);
        if step < warm {
            self.lr_max * (step + 1) as f64 / warm as f64
        } else if step >= total {
            0.0
        } else {
            self.lr_max * (total - step) as f64 / (total - warm) as f64
        }
    }
}

/// Per-prediction weights decay^(n-1-i): the last refinement iteration gets
/// weight 1, earlier ones are discounted.
pub fn loss_weights(n: usize, decay: f64) -> Vec<f64> {
    (0..n).map(|i| decay.powi((n - 1 - i) as i32)).collect()
}

/// Weighted sum over refinement iterations of the mean absolute error
/// against the ground-truth flow.
pub fn sequence_loss(tape: &mut Tape, preds: &[Var], gt: Var, decay: f64) -> Result<Var> {
    if preds.is_empty() {
        return Err(SkError::Invalid("sequence loss needs at least one prediction".into()));
    }
    let ws = loss_weights(preds.len(), decay);
    let mut total: Option<Var> = None;
    for (p, w) in preds.iter().zip(ws) {
        let diff = tape.sub(*p, gt)?;
        let l1 = tape.abs(diff);
        let m = tape.mean(l1);
        let term = tape.scale(m, w);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples stacked along the batch dimension per optimization step.
    pub batch: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub loss_decay: f64,
    pub warmup_frac: f64,
    /// Clip the global gradient norm to this value; 0 disables clipping.
    pub grad_clip: f64,
    pub log_every: usize,
    /// Parameters are snapshotted at this cadence so a non-finite loss can
    /// roll back to the last healthy state.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr_max: 4e-4,
            weight_decay: 1e-5,
            loss_decay: 0.8,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            log_every: 50,
            snapshot_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub history: Vec<StepLog>,
}

/// Run `cfg.steps` optimization steps. `next_sample` is called with a global
/// sample index (`step * batch + i`) and its `(frame1, frame2, flow_gt)`
/// results are stacked along the batch dimension, `cfg.batch` per step.
/// `on_log` fires every `log_every` steps and on the final step. A non-finite
/// loss or gradient aborts, restores the last snapshot into the network, and
/// reports the failing step.
pub fn train_loop(
    net: &mut SkFlowNet,
    cfg: &TrainConfig,
    mut next_sample: impl FnMut(usize) -> Result<(Tensor4, Tensor4, Tensor4)>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainSummary> {
    if cfg.steps == 0 {
        return Err(SkError::Config("training needs at least one step".into()));
    }
    if cfg.batch == 0 {
        return Err(SkError::Config("batch size must be at least 1".into()));
    }
    let schedule = OneCycle { lr_max: cfg.lr_max, total_steps: cfg.steps, warmup_frac: cfg.warmup_frac };
    let mut opt = AdamW::new(&net.params, cfg.weight_decay);
    let mut snapshot = net.params.clone();
    let mut snapshot_step = 0usize;
    let mut history = Vec::new();
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        let mut i1 = Vec::with_capacity(cfg.batch);
        let mut i2 = Vec::with_capacity(cfg.batch);
        let mut gts = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let (a, b, g) = next_sample(step * cfg.batch + i)?;
            i1.push(a);
            i2.push(b);
            gts.push(g);
        }
        let (im1, im2, gt) =
            (Tensor4::stack_n(&i1)?, Tensor4::stack_n(&i2)?, Tensor4::stack_n(&gts)?);
        let mut tape = Tape::new(net.cfg.precision);
        let vars = ParamVars::bind_all(&net.params, &mut tape, true);
        let v1 = tape.constant(im1);
        let v2 = tape.constant(im2);
        let vgt = tape.constant(gt);
        let out = net.forward(&mut tape, &vars, v1, v2, net.cfg.iters_train)?;
        let loss = sequence_loss(&mut tape, &out.flows_full, vgt, cfg.loss_decay)?;
        let loss_val = tape.value(loss).data[0];
        if !loss_val.is_finite() {
            net.params.adopt(&snapshot)?;
            return Err(SkError::Invalid(format!(
                "non-finite loss at step {step}; parameters restored from step {snapshot_step}"
            )));
        }
        tape.backward(loss)?;
        let mut grads = vars.collect_grads(&net.params, &tape)?;
        let norm = global_grad_norm(&grads);
        if !norm.is_finite() {
            net.params.adopt(&snapshot)?;
            return Err(SkError::Invalid(format!(
                "non-finite gradient at step {step}; parameters restored from step {snapshot_step}"
            )));
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for g in grads.iter_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        let lr = schedule.lr_at(step);
        opt.step(&mut net.params, &grads, lr)?;
        final_loss = loss_val;

        if (step + 1) % cfg.snapshot_every == 0 {
            snapshot = net.params.clone();
            snapshot_step = step + 1;
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let entry = StepLog { step, lr, loss: loss_val, grad_norm: norm };
            on_log(&entry);
            history.push(entry);
        }
    }
    Ok(TrainSummary { steps_run: cfg.steps, final_loss, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Precision, Shape4};

    #[test]
    fn weights_discount_earlier_iterations() {
        let w = loss_weights(3, 0.8);
        assert!((w[0] - 0.64).abs() < 1e-12);
        assert!((w[1] - 0.8).abs() < 1e-12);
        assert!((w[2] - 1.0).abs() < 1e-12);
        assert_eq!(loss_weights(1, 0.8), vec![1.0]);
    }

    #[test]
    fn schedule_warms_up_then_anneals_to_zero() {
        let s = OneCycle::new(4e-4, 1000);
        assert!(s.lr_at(0) < s.lr_at(10));
        assert!((s.lr_at(49) - 4e-4).abs() < 1e-12);
        let mut prev = s.lr_at(50);
        for step in (100..1000).step_by(100) {
            let lr = s.lr_at(step);
            assert!(lr < prev);
            prev = lr;
        }
        assert!(s.lr_at(999) > 0.0);
        assert_eq!(s.lr_at(1000), 0.0);
    }

    #[test]
    fn sequence_loss_matches_hand_computation() {
        let mut tape = Tape::new(Precision::F64);
        let gt = tape.constant(Tensor4::full(Shape4::new(1, 2, 2, 2), 1.0));
        let p1 = tape.constant(Tensor4::full(Shape4::new(1, 2, 2, 2), 3.0));
        let p2 = tape.constant(Tensor4::full(Shape4::new(1, 2, 2, 2), 1.5));
        let loss = sequence_loss(&mut tape, &[p1, p2], gt, 0.8).unwrap();
        // 0.8 * mean|3-1| + 1.0 * mean|1.5-1| = 1.6 + 0.5
        assert!((tape.value(loss).data[0] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor4::full(Shape4::new(1, 1, 1, 1), 5.0)).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let x = store.get("x").unwrap().data[0];
            opt.step(&mut store, &[vec![2.0 * x]], 1e-2).unwrap();
        }
        assert!(store.get("x").unwrap().data[0].abs() < 1e-3);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor4::full(Shape4::new(1, 1, 1, 1), 1.0)).unwrap();
        let mut opt = AdamW::new(&store, 0.1);
        for _ in 0..100 {
            opt.step(&mut store, &[vec![0.0]], 1e-2).unwrap();
        }
        let x = store.get("x").unwrap().data[0];
        assert!(x < 1.0 && x > 0.0, "x = {x}");
    }

    #[test]
    fn grad_count_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor4::scalar(0.0)).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        assert!(opt.step(&mut store, &[], 1e-3).is_err());
    }
}
