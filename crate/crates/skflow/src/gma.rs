//! Global motion aggregation: softmax dot-product attention over all spatial
//! positions, with queries/keys projected from the context map and values
//! from the motion map, blended back through a learned scalar gain.

use crate::conv::{conv2d_forward, ConvSpec};
use crate::error::{Result, SkError};
use crate::rng::SkRng;
use crate::tensor::{Shape4, Tensor4};

/// Attention weights for one sample: rows are queries, columns targets.
/// Scaled dot-product with 1/sqrt(d_k), softmax per row.
pub fn attention_weights(q: &Tensor4, k: &Tensor4, ni: usize) -> Vec<f64> {
    let (_, dk, h, w) = q.shape.as_tuple();
    let hw = h * w;
    let scale = 1.0 / (dk as f64).sqrt();
    let qb = &q.data[ni * dk * hw..(ni + 1) * dk * hw];
    let kb = &k.data[ni * dk * hw..(ni + 1) * dk * hw];
    let mut attn = vec![0.0f64; hw * hw];
    for p in 0..hw {
        let row = &mut attn[p * hw..(p + 1) * hw];
        for d in 0..dk {
            let a = qb[d * hw + p] * scale;
            let krow = &kb[d * hw..(d + 1) * hw];
            for (r, x) in row.iter_mut().zip(krow.iter()) {
                *r += a * x;
            }
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        row.iter_mut().for_each(|r| *r /= z);
    }
    attn
}

/// out(:, p) = sum_t attn(p, t) * v(:, t)
pub fn attention_forward(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<Tensor4> {
    q.check_same_shape(k, "attention query/key")?;
    if v.shape.n != q.shape.n || v.shape.h != q.shape.h || v.shape.w != q.shape.w {
        return Err(SkError::ShapeMismatch {
            left: v.shape.as_tuple(),
            right: q.shape.as_tuple(),
            context: "attention value spatial dims".into(),
        });
    }
    let (n, _, h, w) = q.shape.as_tuple();
    let dv = v.shape.c;
    let hw = h * w;
    let mut out = vec![0.0f64; n * dv * hw];
    for ni in 0..n {
        let attn = attention_weights(q, k, ni);
        let vb = &v.data[ni * dv * hw..(ni + 1) * dv * hw];
        let ob = &mut out[ni * dv * hw..(ni + 1) * dv * hw];
        for p in 0..hw {
            let arow = &attn[p * hw..(p + 1) * hw];
            for d in 0..dv {
                let vrow = &vb[d * hw..(d + 1) * hw];
                let mut acc = 0.0;
                for (a, x) in arow.iter().zip(vrow.iter()) {
                    acc += a * x;
                }
                ob[d * hw + p] = acc;
            }
        }
    }
    Ok(Tensor4::new(Shape4::new(n, dv, h, w), out))
}

pub fn attention_backward(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let (n, dk, h, w) = q.shape.as_tuple();
    let dv = v.shape.c;
    let hw = h * w;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = vec![0.0f64; q.shape.numel()];
    let mut gk = vec![0.0f64; k.shape.numel()];
    let mut gv = vec![0.0f64; v.shape.numel()];
    for ni in 0..n {
        let attn = attention_weights(q, k, ni);
        let qb = &q.data[ni * dk * hw..(ni + 1) * dk * hw];
        let kb = &k.data[ni * dk * hw..(ni + 1) * dk * hw];
        let vb = &v.data[ni * dv * hw..(ni + 1) * dv * hw];
        let gob = &grad_out.data[ni * dv * hw..(ni + 1) * dv * hw];
        let gqb = &mut gq[ni * dk * hw..(ni + 1) * dk * hw];
        let gkb = &mut gk[ni * dk * hw..(ni + 1) * dk * hw];
        let gvb = &mut gv[ni * dv * hw..(ni + 1) * dv * hw];
        for p in 0..hw {
            let arow = &attn[p * hw..(p + 1) * hw];
            // dL/da(p, t) = sum_d gout(d, p) v(d, t)
            let mut ga = vec![0.0f64; hw];
            for d in 0..dv {
                let g = gob[d * hw + p];
                if g == 0.0 {
                    continue;
                }
                let vrow = &vb[d * hw..(d + 1) * hw];
                for (gt, x) in ga.iter_mut().zip(vrow.iter()) {
                    *gt += g * x;
                }
                // value grad: gv(d, t) += a(p, t) * gout(d, p)
                let gvrow = &mut gvb[d * hw..(d + 1) * hw];
                for (gt, a) in gvrow.iter_mut().zip(arow.iter()) {
                    *gt += a * g;
                }
            }
            // softmax jacobian: gl(t) = a(t) * (ga(t) - sum_s a(s) ga(s))
            let dot: f64 = arow.iter().zip(ga.iter()).map(|(a, g)| a * g).sum();
            let mut gl = vec![0.0f64; hw];
            for t in 0..hw {
                gl[t] = arow[t] * (ga[t] - dot);
            }
            // logits(p, t) = scale * sum_d q(d, p) k(d, t)
            for d in 0..dk {
                let krow = &kb[d * hw..(d + 1) * hw];
                let mut acc = 0.0;
                for (g, x) in gl.iter().zip(krow.iter()) {
                    acc += g * x;
                }
                gqb[d * hw + p] += scale * acc;
                let a = scale * qb[d * hw + p];
                let gkrow = &mut gkb[d * hw..(d + 1) * hw];
                for (gt, g) in gkrow.iter_mut().zip(gl.iter()) {
                    *gt += a * g;
                }
            }
        }
    }
    (
        Tensor4::new(q.shape, gq),
        Tensor4::new(k.shape, gk),
        Tensor4::new(v.shape, gv),
    )
}

/// Parameters of the aggregation module: 1x1 query/key projections from the
/// context map, a 1x1 value projection from the motion map, and the scalar
/// gain. The gain starts at 0 so an untrained module is an exact pass-through.
#[derive(Debug, Clone)]
pub struct GmaParams {
    pub wq: Tensor4,
    pub wk: Tensor4,
    pub wv: Tensor4,
    pub gamma: f64,
    pub d_k: usize,
}

impl GmaParams {
    pub fn init(context_dim: usize, motion_dim: usize, d_k: usize, rng: &mut SkRng) -> Self {
        let proj = |rng: &mut SkRng, c_in: usize, c_out: usize| {
            let shape = Shape4::new(c_out, c_in, 1, 1);
            let data = (0..shape.numel()).map(|_| rng.he_uniform(c_in)).collect();
            Tensor4::new(shape, data)
        };
        GmaParams {
            wq: proj(rng, context_dim, d_k),
            wk: proj(rng, context_dim, d_k),
            wv: proj(rng, motion_dim, motion_dim),
            gamma: 0.0,
            d_k,
        }
    }
}

/// out = motion + gamma * attention(q(context), k(context), v(motion))
pub fn gma_aggregate(motion: &Tensor4, context: &Tensor4, params: &GmaParams) -> Result<Tensor4> {
    if motion.shape.n != context.shape.n
        || motion.shape.h != context.shape.h
        || motion.shape.w != context.shape.w
    {
        return Err(SkError::ShapeMismatch {
            left: motion.shape.as_tuple(),
            right: context.shape.as_tuple(),
            context: "gma motion/context spatial dims".into(),
        });
    }
    let qspec = ConvSpec::pointwise(context.shape.c, params.d_k).no_bias();
    let vspec = ConvSpec::pointwise(motion.shape.c, motion.shape.c).no_bias();
    let q = conv2d_forward(context, &qspec, &params.wq, None)?;
    let k = conv2d_forward(context, &qspec, &params.wk, None)?;
    let v = conv2d_forward(motion, &vspec, &params.wv, None)?;
    let agg = attention_forward(&q, &k, &v)?;
    let mut out = motion.clone();
    for (o, a) in out.data.iter_mut().zip(agg.data.iter()) {
        *o += params.gamma * a;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: Shape4, seed: u64) -> Tensor4 {
        let mut rng = SkRng::new(seed);
        Tensor4::random_normal(shape, &mut rng, 1.0)
    }

    #[test]
    fn gamma_zero_is_identity() {
        let mut rng = SkRng::new(1);
        let params = GmaParams::init(6, 4, 3, &mut rng);
        assert_eq!(params.gamma, 0.0);
        let motion = rand(Shape4::new(1, 4, 3, 3), 2);
        let context = rand(Shape4::new(1, 6, 3, 3), 3);
        let out = gma_aggregate(&motion, &context, &params).unwrap();
        assert_eq!(out.data, motion.data);
    }

    #[test]
    fn single_pixel_attention_weight_is_one() {
        let mut rng = SkRng::new(5);
        let mut params = GmaParams::init(3, 2, 2, &mut rng);
        params.gamma = 0.7;
        let motion = rand(Shape4::new(1, 2, 1, 1), 6);
        let context = rand(Shape4::new(1, 3, 1, 1), 7);
        let q = conv2d_forward(&context, &ConvSpec::pointwise(3, 2).no_bias(), &params.wq, None).unwrap();
        let k = conv2d_forward(&context, &ConvSpec::pointwise(3, 2).no_bias(), &params.wk, None).unwrap();
        let w = attention_weights(&q, &k, 0);
        assert_eq!(w, vec![1.0]);
        // output = x + gamma * v(x)
        let v = conv2d_forward(&motion, &ConvSpec::pointwise(2, 2).no_bias(), &params.wv, None).unwrap();
        let out = gma_aggregate(&motion, &context, &params).unwrap();
        for c in 0..2 {
            let want = motion.at(0, c, 0, 0) + 0.7 * v.at(0, c, 0, 0);
            assert!((out.at(0, c, 0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_keys_give_uniform_attention() {
        let q = rand(Shape4::new(1, 3, 2, 2), 8);
        let k = Tensor4::full(Shape4::new(1, 3, 2, 2), 0.3);
        let v = rand(Shape4::new(1, 2, 2, 2), 9);
        let attn = attention_weights(&q, &k, 0);
        for a in &attn {
            assert!((a - 0.25).abs() < 1e-12);
        }
        // aggregated value equals the spatial mean of v, by direct averaging
        let out = attention_forward(&q, &k, &v).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|p| v.data[c * 4 + p]).sum::<f64>() / 4.0;
            for p in 0..4 {
                assert!((out.data[c * 4 + p] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let q = rand(Shape4::new(2, 4, 3, 3), 10);
        let k = rand(Shape4::new(2, 4, 3, 3), 11);
        for ni in 0..2 {
            let attn = attention_weights(&q, &k, ni);
            for p in 0..9 {
                let s: f64 = attn[p * 9..(p + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-10);
                assert!(attn[p * 9..(p + 1) * 9].iter().all(|a| *a >= 0.0));
            }
        }
    }

    #[test]
    fn permutation_consistency() {
        // spatially permuting motion and context permutes the output identically
        let mut rng = SkRng::new(12);
        let mut params = GmaParams::init(3, 2, 2, &mut rng);
        params.gamma = 0.5;
        let motion = rand(Shape4::new(1, 2, 4, 4), 13);
        let context = rand(Shape4::new(1, 3, 4, 4), 14);
        // a fixed permutation of the 16 positions
        let mut perm: Vec<usize> = (0..16).collect();
        let mut prng = SkRng::new(99);
        for i in (1..16).rev() {
            let j = prng.uniform_usize(i + 1);
            perm.swap(i, j);
        }
        let permute = |t: &Tensor4| {
            let hw = 16;
            let mut out = t.clone();
            for c in 0..t.shape.c {
                for p in 0..hw {
                    out.data[c * hw + perm[p]] = t.data[c * hw + p];
                }
            }
            out
        };
        let out = gma_aggregate(&motion, &context, &params).unwrap();
        let out_p = gma_aggregate(&permute(&motion), &permute(&context), &params).unwrap();
        let expect = permute(&out);
        for (a, b) in out_p.data.iter().zip(expect.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let mut rng = SkRng::new(15);
        let params = GmaParams::init(3, 2, 2, &mut rng);
        let motion = Tensor4::zeros(1, 2, 4, 4);
        let context = Tensor4::zeros(1, 3, 4, 5);
        assert!(gma_aggregate(&motion, &context, &params).is_err());
    }
}
