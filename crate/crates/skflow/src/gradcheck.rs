//! Central finite-difference verification of every differentiable operation
//! and of the full block in all styles and switch combinations.

use num_rational::Ratio;

use crate::block::{sk_forward, sk_register, BlockConfig, BlockStyle};
use crate::conv::ConvSpec;
use crate::error::{Result, SkError};
use crate::params::{ParamStore, ParamVars};
use crate::rng::SkRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Shape4, Tensor4};
use crate::upsample::MASK_CHANNELS;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} ({} partials, max rel err {:.3e})",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err
        )
    }
}

/// Compare analytic gradients of `f` against central differences for every
/// element of every input. The output of `f` is contracted against a fixed
/// random weighting so non-scalar outputs are covered without cancellation.
pub fn fd_check<F>(name: &str, precision: Precision, inputs: &[Tensor4], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if precision == Precision::F32 {
        return Err(SkError::Invalid(
            "finite-difference verification needs 64-bit precision; refusing 32-bit mode".into(),
        ));
    }
    // probe for the output shape
    let out_shape = {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.shape(out)
    };
    let mut wrng = SkRng::new(0xfd ^ name.len() as u64);
    let weight = Tensor4::random_normal(out_shape, &mut wrng, 1.0);

    let eval = |tensors: &[Tensor4]| -> Result<(f64, Tape, Vec<Var>)> {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let wv = tape.constant(weight.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod);
        Ok((tape.value(loss).data[0], tape, vars))
    };

    let (_, mut tape, vars) = eval(inputs)?;
    let loss = Var(tape.len() - 1);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.shape.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor4> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.shape.numel() {
            let orig = t.data[ei];
            let a = analytic[ti][ei];
            let mut rel = f64::INFINITY;
            // retry at smaller steps: a point within FD_STEP of an activation
            // kink straddles it and corrupts the central difference, while a
            // wrong backward rule stays wrong at every step size
            for step in [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0] {
                work[ti].data[ei] = orig + step;
                let (lp, _, _) = eval(&work)?;
                work[ti].data[ei] = orig - step;
                let (lm, _, _) = eval(&work)?;
                work[ti].data[ei] = orig;
                let fd = (lp - lm) / (2.0 * step);
                rel = rel.min((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
                if rel < FD_TOL {
                    break;
                }
                if std::env::var("SKFLOW_FD_DEBUG").is_ok() {
                    eprintln!("  input {ti} elem {ei} step {step:.0e}: analytic {a:.6e} fd {fd:.6e} rel {rel:.3e}");
                }
            }
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: max_rel, checked, pass: max_rel < FD_TOL })
}

fn rnd(shape: Shape4, rng: &mut SkRng) -> Tensor4 {
    Tensor4::random_normal(shape, rng, 1.0)
}

/// Random values bounded away from zero, for kinked ops (relu, abs).
fn rnd_offset(shape: Shape4, rng: &mut SkRng) -> Tensor4 {
    let mut t = Tensor4::zeros(shape.n, shape.c, shape.h, shape.w);
    for v in t.data.iter_mut() {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        *v = sign * rng.uniform_in(0.2, 1.2);
    }
    t
}

fn op_cases(rng: &mut SkRng) -> Vec<(String, Vec<Tensor4>, CaseFn)> {
    type T = Tensor4;
    let s = Shape4::new(1, 3, 4, 4);
    let mut cases: Vec<(String, Vec<T>, CaseFn)> = Vec::new();
    let mut push = |name: &str, inputs: Vec<T>, f: CaseFn| cases.push((name.to_string(), inputs, f));

    push("add", vec![rnd(s, rng), rnd(s, rng)], Box::new(|t, v| t.add(v[0], v[1])));
    push("sub", vec![rnd(s, rng), rnd(s, rng)], Box::new(|t, v| t.sub(v[0], v[1])));
    push("mul", vec![rnd(s, rng), rnd(s, rng)], Box::new(|t, v| t.mul(v[0], v[1])));
    push("scale", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7))));
    push("relu", vec![rnd_offset(s, rng)], Box::new(|t, v| Ok(t.relu(v[0]))));
    push("sigmoid", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.sigmoid(v[0]))));
    push("tanh", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.tanh(v[0]))));
    push("gelu", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.gelu(v[0]))));
    push("abs", vec![rnd_offset(s, rng)], Box::new(|t, v| Ok(t.abs(v[0]))));
    push(
        "mul_scalar",
        vec![rnd(s, rng), rnd(Shape4::new(1, 1, 1, 1), rng)],
        Box::new(|t, v| t.mul_scalar(v[0], v[1])),
    );
    push(
        "concat_channels",
        vec![rnd(Shape4::new(1, 2, 3, 3), rng), rnd(Shape4::new(1, 3, 3, 3), rng)],
        Box::new(|t, v| t.concat_channels(v)),
    );
    push("slice_channels", vec![rnd(s, rng)], Box::new(|t, v| t.slice_channels(v[0], 1, 2)));
    push("mean", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.mean(v[0]))));
    push("instance_norm", vec![rnd(s, rng)], Box::new(|t, v| Ok(t.instance_norm(v[0]))));

    let dw = ConvSpec::depthwise(3, 3);
    push(
        "conv2d_depthwise",
        vec![rnd(s, rng), rnd(dw.weight_shape(), rng), rnd(dw.bias_shape(), rng)],
        Box::new(move |t, v| t.conv2d(v[0], &dw, v[1], Some(v[2]))),
    );
    let pw = ConvSpec::pointwise(3, 4);
    push(
        "conv2d_pointwise",
        vec![rnd(s, rng), rnd(pw.weight_shape(), rng), rnd(pw.bias_shape(), rng)],
        Box::new(move |t, v| t.conv2d(v[0], &pw, v[1], Some(v[2]))),
    );
    let dense = ConvSpec::dense(3, 2, 3);
    push(
        "conv2d_dense",
        vec![rnd(s, rng), rnd(dense.weight_shape(), rng), rnd(dense.bias_shape(), rng)],
        Box::new(move |t, v| t.conv2d(v[0], &dense, v[1], Some(v[2]))),
    );
    let dil = ConvSpec::depthwise(3, 3).with_dilation(2).no_bias();
    push(
        "conv2d_dilated",
        vec![rnd(Shape4::new(1, 3, 7, 7), rng), rnd(dil.weight_shape(), rng)],
        Box::new(move |t, v| t.conv2d(v[0], &dil, v[1], None)),
    );
    let strided = ConvSpec::dense(3, 2, 3).with_stride(2);
    push(
        "conv2d_strided",
        vec![rnd(Shape4::new(1, 3, 6, 6), rng), rnd(strided.weight_shape(), rng), rnd(strided.bias_shape(), rng)],
        Box::new(move |t, v| t.conv2d(v[0], &strided, v[1], Some(v[2]))),
    );
    push("avg_pool2", vec![rnd(Shape4::new(1, 2, 6, 6), rng)], Box::new(|t, v| t.avg_pool2(v[0])));
    push(
        "corr_base",
        vec![rnd(Shape4::new(1, 4, 4, 4), rng), rnd(Shape4::new(1, 4, 4, 4), rng)],
        Box::new(|t, v| t.corr_base(v[0], v[1], false)),
    );
    push(
        "corr_base_normalized",
        vec![rnd(Shape4::new(1, 4, 4, 4), rng), rnd(Shape4::new(1, 4, 4, 4), rng)],
        Box::new(|t, v| t.corr_base(v[0], v[1], true)),
    );
    let flow = {
        let mut f = Tensor4::zeros(1, 2, 4, 4);
        for v in f.data.iter_mut() {
            *v = rng.uniform_in(-0.8, 0.8) + 0.3; // fractional, away from integer grid
        }
        f
    };
    push(
        "corr_sample",
        vec![rnd(Shape4::new(16, 1, 4, 4), rng)],
        Box::new(move |t, v| {
            let fl = t.constant(flow.clone());
            t.corr_sample(v[0], fl, 0, 1, 4, 4)
        }),
    );
    push(
        "attention",
        vec![rnd(Shape4::new(1, 4, 3, 3), rng), rnd(Shape4::new(1, 4, 3, 3), rng), rnd(Shape4::new(1, 5, 3, 3), rng)],
        Box::new(|t, v| t.attention(v[0], v[1], v[2])),
    );
    push(
        "convex_upsample8",
        vec![rnd(Shape4::new(1, 2, 2, 2), rng), rnd(Shape4::new(1, MASK_CHANNELS, 2, 2), rng)],
        Box::new(|t, v| t.convex_upsample8(v[0], v[1])),
    );
    push("bilinear_up8", vec![rnd(Shape4::new(1, 2, 3, 3), rng)], Box::new(|t, v| Ok(t.bilinear_up8(v[0]))));
    cases
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Zero-initialized biases plus a relu upstream can park pre-activations at
/// exactly 0, where the central difference straddles the kink; random biases
/// keep the check on smooth ground.
fn randomize_biases(store: &mut ParamStore, rng: &mut SkRng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") {
            t.data.iter_mut().for_each(|v| *v = rng.uniform_in(-0.5, 0.5));
        }
    }
}

fn block_case(style: BlockStyle, use_residual: bool, use_aux: bool, rng: &mut SkRng) -> Result<(String, Vec<Tensor4>, CaseFn)> {
    let mut cfg = BlockConfig::new(style, 3, 4, 3).with_alpha(Ratio::new(2, 1));
    cfg.use_residual = use_residual;
    cfg.use_aux = use_aux;
    let mut store = ParamStore::new();
    sk_register(&cfg, "b", &mut store, rng, false)?;
    randomize_biases(&mut store, rng);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs: Vec<Tensor4> = vec![rnd(Shape4::new(1, 3, 4, 4), rng)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let name = format!(
        "block_{:?}{}{}",
        style,
        if use_residual { "" } else { "_nores" },
        if use_aux { "" } else { "_noaux" }
    );
    let f: CaseFn = Box::new(move |tape, vars| {
        let mut pv = std::collections::HashMap::new();
        for (i, n) in names.iter().enumerate() {
            pv.insert(n.clone(), vars[i + 1]);
        }
        sk_forward(tape, vars[0], &cfg, "b", &ParamVars::from_map(pv))
    });
    Ok((name, inputs, f))
}

/// Every op and every block style/switch combination on small inputs.
pub fn standard_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SkRng::new(seed);
    let mut results = Vec::new();
    for (name, inputs, f) in op_cases(&mut rng) {
        results.push(fd_check(&name, Precision::F64, &inputs, f)?);
    }
    for style in BlockStyle::ALL {
        for (res, aux) in [(true, true), (true, false), (false, true), (false, false)] {
            let (name, inputs, f) = block_case(style, res, aux, &mut rng)?;
            results.push(fd_check(&name, Precision::F64, &inputs, f)?);
        }
    }
    // one gelu-activated and one dilated block round out the switch coverage
    for (tag, cfg) in [
        ("block_gelu", BlockConfig::new(BlockStyle::Conical, 3, 3, 3).with_activation(crate::tape::Activation::Gelu)),
        ("block_dilated", BlockConfig::new(BlockStyle::Conical, 3, 3, 3).with_dilation(2)),
    ] {
        let mut store = ParamStore::new();
        sk_register(&cfg, "b", &mut store, &mut rng, false)?;
        randomize_biases(&mut store, &mut rng);
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let mut inputs: Vec<Tensor4> = vec![rnd(Shape4::new(1, 3, 6, 6), &mut rng)];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let f: CaseFn = Box::new(move |tape, vars| {
            let mut pv = std::collections::HashMap::new();
            for (i, n) in names.iter().enumerate() {
                pv.insert(n.clone(), vars[i + 1]);
            }
            sk_forward(tape, vars[0], &cfg, "b", &ParamVars::from_map(pv))
        });
        results.push(fd_check(tag, Precision::F64, &inputs, f)?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_f32() {
        let err = fd_check("x", Precision::F32, &[Tensor4::scalar(1.0)], |t, v| Ok(t.relu(v[0])));
        assert!(err.is_err());
    }

    #[test]
    fn tight_agreement_on_smooth_graph() {
        let mut rng = SkRng::new(4);
        let x = rnd(Shape4::new(1, 1, 2, 2), &mut rng);
        let r = fd_check("tanh_scale", Precision::F64, &[x], |t, v| {
            let y = t.tanh(v[0]);
            Ok(t.scale(y, 2.5))
        })
        .unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-8, "{r}");
    }

    #[test]
    fn corrupted_gradient_reported_as_failure() {
        // route half the output through a detached copy of the input: the
        // analytic gradient misses that path, the finite difference sees it
        let mut rng = SkRng::new(5);
        let x = rnd(Shape4::new(1, 1, 2, 2), &mut rng);
        let r = fd_check("detached_path", Precision::F64, &[x], |t, v| {
            let copy = t.value(v[0]).clone();
            let c = t.constant(copy);
            t.add(v[0], c)
        })
        .unwrap();
        assert!(!r.pass, "{r}");
    }

    #[test]
    fn full_suite_passes() {
        for r in standard_suite(2024).unwrap() {
            assert!(r.pass, "{r}");
        }
    }
}
