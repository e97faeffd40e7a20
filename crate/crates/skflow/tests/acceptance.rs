//! End-to-end acceptance checks. Each test prints one pass/fail line; the
//! training-backed checks share a single pair of toy training runs.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_rational::Ratio;

use skflow::block::{sk_mac_report, BlockConfig, BlockStyle};
use skflow::conv::{cost_ratio, count_macs, ConvSpec};
use skflow::corr::build_pyramid;
use skflow::data::{self, GenConfig, MotionMode};
use skflow::flow::{FlowField, Resolution};
use skflow::gma::{attention_forward, attention_weights, gma_aggregate, GmaParams};
use skflow::gradcheck::standard_suite;
use skflow::metrics::{self, OutlierRule, PixelMask};
use skflow::net::{MotionEncoderStyle, NetworkConfig, SkFlowNet, UpdaterStyle};
use skflow::optim::{loss_weights, train_loop, TrainConfig};
use skflow::rng::SkRng;
use skflow::tensor::{Shape4, Tensor4};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("[{n}/10] {name}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "[{n}/10] {name}: {detail}");
}

#[test]
fn criterion_01_block_cost_ratio_is_exact() {
    let t0 = Instant::now();
    let mut rng = SkRng::new(71);
    let mut checked = 0;
    for _ in 0..12 {
        let l = 2 * rng.uniform_usize(8) + 3; // odd, 3..=17
        let s = 2 * rng.uniform_usize(l / 2 + 1) + 1; // odd, <= l
        let c_in = 8 * (1 + rng.uniform_usize(16));
        let c_out = 8 * (1 + rng.uniform_usize(16));
        let alpha = [Ratio::new(1, 1), Ratio::new(2, 1), Ratio::new(3, 2), Ratio::new(4, 1)]
            [rng.uniform_usize(4)];
        if (alpha * Ratio::from_integer(c_in as i128)).denom() != &1 {
            continue;
        }
        let cfg = BlockConfig::new(BlockStyle::Conical, c_in, c_out, l).with_s(s).with_alpha(alpha);
        let (h, w) = (6, 5);
        let counted = sk_mac_report(&cfg, h, w, 1, "b").unwrap().total_macs();
        let dense = count_macs(&ConvSpec::dense(c_in, c_out, l), h, w, 1);
        let measured = Ratio::new(counted as i128, dense as i128);
        let symbolic = cost_ratio(l, s, alpha, c_in, c_out).unwrap();
        assert_eq!(measured, symbolic, "L={l} S={s} a={alpha} {c_in}->{c_out}");
        checked += 1;
    }
    let ok = checked >= 10 && t0.elapsed() < Duration::from_secs(1);
    report(1, "block cost ratio exactness", ok, &format!("{checked} random configs, zero tolerance, {:?}", t0.elapsed()));
}

#[test]
fn criterion_02_cost_scales_inverse_square_in_kernel_size() {
    let t0 = Instant::now();
    let (s, alpha, c) = (1usize, Ratio::new(2, 1), 128usize);
    let ratios: Vec<Ratio<i128>> =
        [7usize, 15, 31].iter().map(|&l| cost_ratio(l, s, alpha, c, c).unwrap()).collect();
    let monotone = ratios[0] > ratios[1] && ratios[1] > ratios[2];
    // the 1/C_out floor is kernel-independent; what remains must scale as
    // 1/L^2, i.e. L^2 * (ratio - 1/C_out) stays constant
    let floor = Ratio::new(1, c as i128);
    let scaled: Vec<f64> = [7usize, 15, 31]
        .iter()
        .zip(&ratios)
        .map(|(&l, r)| {
            let v = (*r - floor) * Ratio::from_integer((l * l) as i128);
            *v.numer() as f64 / *v.denom() as f64
        })
        .collect();
    let drift = (scaled[2] - scaled[1]).abs() / scaled[1];
    let ok = monotone && drift < 0.05 && t0.elapsed() < Duration::from_secs(1);
    report(
        2,
        "inverse-square kernel cost law",
        ok,
        &format!("ratios decrease ({:.5} > {:.5} > {:.5}), scaled drift {:.2e}",
            *ratios[0].numer() as f64 / *ratios[0].denom() as f64,
            *ratios[1].numer() as f64 / *ratios[1].denom() as f64,
            *ratios[2].numer() as f64 / *ratios[2].denom() as f64,
            drift),
    );
}

#[test]
fn criterion_03_gradient_suite_passes() {
    let t0 = Instant::now();
    let results = standard_suite(2024).unwrap();
    let failures: Vec<String> = results.iter().filter(|r| !r.pass).map(|r| r.to_string()).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    let ok = failures.is_empty() && t0.elapsed() < Duration::from_secs(120);
    report(
        3,
        "finite-difference gradient suite",
        ok,
        &format!("{} checks, worst rel err {:.3e}, {:?} {}", results.len(), worst, t0.elapsed(), failures.join("; ")),
    );
}

#[test]
fn criterion_04_correlation_pyramid_matches_brute_force() {
    let t0 = Instant::now();
    let mut rng = SkRng::new(9);
    let (d, h, w) = (8usize, 8usize, 8usize);
    let f1 = Tensor4::random_normal(Shape4::new(1, d, h, w), &mut rng, 1.0);
    let f2 = Tensor4::random_normal(Shape4::new(1, d, h, w), &mut rng, 1.0);
    let mut max_err = 0.0f64;
    for normalize in [false, true] {
        let p = build_pyramid(&f1, &f2, 3, 2, normalize).unwrap();
        let scale = if normalize { 1.0 / (d as f64).sqrt() } else { 1.0 };
        // brute force: dot product of feature columns, then 2x2 target means
        for (l, level) in p.levels.iter().enumerate() {
            let side = h >> l;
            for i in 0..h {
                for j in 0..w {
                    for m in 0..side {
                        for n_ in 0..side {
                            let mut acc = 0.0;
                            let mut cnt = 0.0;
                            let cell = 1usize << l;
                            for ty in m * cell..(m + 1) * cell {
                                for tx in n_ * cell..(n_ + 1) * cell {
                                    let mut dot = 0.0;
                                    for c in 0..d {
                                        dot += f1.at(0, c, i, j) * f2.at(0, c, ty, tx);
                                    }
                                    acc += dot * scale;
                                    cnt += 1.0;
                                }
                            }
                            let got = level.at(i * w + j, 0, m, n_);
                            max_err = max_err.max((got - acc / cnt).abs());
                        }
                    }
                }
            }
        }
    }
    let ok = max_err < 1e-12 && t0.elapsed() < Duration::from_secs(10);
    report(4, "correlation pyramid vs brute force", ok, &format!("max abs err {max_err:.3e}, {:?}", t0.elapsed()));
}

#[test]
fn criterion_05_attention_aggregation_contracts() {
    let mut rng = SkRng::new(13);
    let (ctx_d, mot_d, dk, h, w) = (6usize, 5usize, 3usize, 4usize, 4usize);
    let motion = Tensor4::random_normal(Shape4::new(1, mot_d, h, w), &mut rng, 1.0);
    let context = Tensor4::random_normal(Shape4::new(1, ctx_d, h, w), &mut rng, 1.0);
    let mut params = GmaParams::init(ctx_d, mot_d, dk, &mut rng);
    params.gamma = 0.0;
    let out = gma_aggregate(&motion, &context, &params).unwrap();
    let identity = out.data.iter().zip(motion.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    let q = Tensor4::random_normal(Shape4::new(1, dk, h, w), &mut rng, 1.0);
    let k = Tensor4::random_normal(Shape4::new(1, dk, h, w), &mut rng, 1.0);
    let attn = attention_weights(&q, &k, 0);
    let hw = h * w;
    let row_err = (0..hw)
        .map(|p| (attn[p * hw..(p + 1) * hw].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);

    // permuting the spatial positions of q, k, v permutes the output rows
    let v = Tensor4::random_normal(Shape4::new(1, mot_d, h, w), &mut rng, 1.0);
    let mut perm: Vec<usize> = (0..hw).collect();
    for i in (1..hw).rev() {
        perm.swap(i, rng.uniform_usize(i + 1));
    }
    let permute = |t: &Tensor4| {
        let mut o = t.clone();
        for c in 0..t.shape.c {
            for p in 0..hw {
                o.data[c * hw + p] = t.data[c * hw + perm[p]];
            }
        }
        o
    };
    let base = attention_forward(&q, &k, &v).unwrap();
    let permuted = attention_forward(&permute(&q), &permute(&k), &permute(&v)).unwrap();
    let perm_err = (0..mot_d * hw)
        .map(|i| {
            let (c, p) = (i / hw, i % hw);
            (permuted.data[c * hw + p] - base.data[c * hw + perm[p]]).abs()
        })
        .fold(0.0f64, f64::max);

    let ok = identity && row_err < 1e-10 && perm_err < 1e-12;
    report(
        5,
        "attention aggregation contracts",
        ok,
        &format!("zero-gain identity exact: {identity}, row-sum err {row_err:.2e}, permutation err {perm_err:.2e}"),
    );
}

#[test]
fn criterion_06_parameter_delta_law() {
    let t0 = Instant::now();
    let cfg = |l: usize| {
        let mut c = NetworkConfig::default();
        c.block.l = l;
        c
    };
    let net_small = SkFlowNet::new(cfg(3), 0).unwrap();
    let net_large = SkFlowNet::new(cfg(15), 0).unwrap();
    let delta = net_large.params.num_params() - net_small.params.num_params();

    // independent walker: the only tensors whose size depends on the large
    // kernel are the big depthwise weights, one per block, each c_in * L^2
    let mut dw_channels = 0usize;
    let mut walker_delta = 0usize;
    for (name, t) in net_large.params.iter() {
        if name.ends_with(".dw_l.w") {
            let small = net_small.params.get(name).unwrap();
            dw_channels += t.shape.n;
            walker_delta += t.shape.numel() - small.shape.numel();
        }
    }
    let law = delta == 216 * dw_channels && delta == walker_delta;
    let gap = delta as f64 / 230_000.0;
    let in_band = (0.7..=1.3).contains(&gap);
    let ok = law && in_band && t0.elapsed() < Duration::from_secs(5);
    report(
        6,
        "kernel-size parameter delta law",
        ok,
        &format!("delta {delta} = 216 x {dw_channels} depthwise channels, {:.0}% of the 0.23M reference gap", gap * 100.0),
    );
}

// ---- shared toy training fixture for the last criteria -------------------

struct Trained {
    sk_net: SkFlowNet,
    sk_epe: f64,
    plain_epe: f64,
    elapsed: Duration,
}

const TOY_SEED: u64 = 7;
const TOY_STEPS: usize = 2000;

fn toy_data_cfg() -> GenConfig {
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

fn toy_net_cfg(sk: bool) -> NetworkConfig {
    let mut c = NetworkConfig {
        hidden_dim: 64,
        context_dim: 64,
        feature_dim: 64,
        iters_train: 3,
        iters_eval: 6,
        num_levels: 2,
        radius: 3,
        input_channels: 1,
        ..NetworkConfig::default()
    };
    c.block.l = 7;
    if !sk {
        c.motion_encoder = MotionEncoderStyle::Plain;
        c.updater = UpdaterStyle::ConvGru;
    }
    c
}

fn train_sample(step: usize, data: &GenConfig) -> skflow::Result<data::FlowSample> {
    data::gen_translation_pair(SkRng::new(TOY_SEED).fork(step as u64).next_u64(), data)
}

fn val_samples(data: &GenConfig, count: usize) -> Vec<data::FlowSample> {
    (0..count)
        .map(|i| {
            data::gen_translation_pair(SkRng::new(TOY_SEED ^ 0xabcd_1234).fork(i as u64).next_u64(), data)
                .unwrap()
        })
        .collect()
}

fn mean_val_epe(net: &SkFlowNet, samples: &[data::FlowSample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let out = net.infer(&s.img1, &s.img2, net.cfg.iters_eval).unwrap();
            let pred = FlowField::from_tensor(&out, 0, Resolution::Full).unwrap();
            metrics::epe(&pred, &s.gt_flow, PixelMask::All).unwrap()
        })
        .sum();
    total / samples.len() as f64
}

fn train_one(sk: bool) -> SkFlowNet {
    let mut net = SkFlowNet::new(toy_net_cfg(sk), TOY_SEED).unwrap();
    let data = toy_data_cfg();
    let tc = TrainConfig { steps: TOY_STEPS, log_every: 200, ..TrainConfig::default() };
    train_loop(
        &mut net,
        &tc,
        |step| {
            let s = train_sample(step, &data)?;
            let gt = s.gt_flow.to_tensor();
            Ok((s.img1, s.img2, gt))
        },
        |l| println!("  [{}] step {:4} loss {:.4}", if sk { "sk" } else { "plain" }, l.step, l.loss),
    )
    .unwrap();
    net
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let t0 = Instant::now();
        let val = val_samples(&toy_data_cfg(), 8);
        let sk_net = train_one(true);
        let sk_epe = mean_val_epe(&sk_net, &val);
        let plain_net = train_one(false);
        let plain_epe = mean_val_epe(&plain_net, &val);
        Trained { sk_net, sk_epe, plain_epe, elapsed: t0.elapsed() }
    })
}

#[test]
fn criterion_07_toy_training_converges() {
    let t = trained();
    let ok = t.sk_epe < 0.5 && t.sk_epe <= t.plain_epe && t.elapsed < Duration::from_secs(45 * 60);
    report(
        7,
        "toy training convergence",
        ok,
        &format!(
            "val EPE {:.4} px (threshold 0.5), plain baseline {:.4} px, both {} steps in {:?}",
            t.sk_epe, t.plain_epe, TOY_STEPS, t.elapsed
        ),
    );
}

#[test]
fn criterion_08_occlusion_split_soundness() {
    let t0 = Instant::now();
    let net = &trained().sk_net;
    let data = GenConfig { mode: MotionMode::Patch, ..toy_data_cfg() };
    let mut reports = Vec::new();
    let mut max_residual = 0.0f64;
    for i in 0..16u64 {
        let s = data::gen_translation_pair(SkRng::new(0x0cc1).fork(i).next_u64(), &data).unwrap();
        let out = net.infer(&s.img1, &s.img2, net.cfg.iters_eval).unwrap();
        let pred = FlowField::from_tensor(&out, 0, Resolution::Full).unwrap();
        let r = metrics::split_eval(&pred, &s.gt_flow, &s.occ, OutlierRule::And).unwrap();
        max_residual = max_residual.max(r.decomposition_residual());
        reports.push(r);
    }
    let agg = metrics::aggregate(&reports).unwrap();
    let (occ, noc) = (agg.epe_occ.unwrap(), agg.epe_noc.unwrap());
    let ok = max_residual < 1e-9 && occ > noc && t0.elapsed() < Duration::from_secs(300);
    report(
        8,
        "occlusion-split soundness",
        ok,
        &format!("max decomposition residual {max_residual:.2e}, epe_occ {occ:.3} > epe_noc {noc:.3}, {:?}", t0.elapsed()),
    );
}

#[test]
fn criterion_09_iteration_loss_weights() {
    let w = loss_weights(3, 0.8);
    let exact = (w[0] - 0.64).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15 && w[2] == 1.0;
    let uniform = loss_weights(3, 1.0) == vec![1.0, 1.0, 1.0];
    let ok = exact && uniform;
    report(
        9,
        "iteration loss weights",
        ok,
        &format!("decay 0.8 gives ({:.2}, {:.1}, {:.0}); decay 1 uniform: {uniform}", w[0], w[1], w[2]),
    );
}

#[test]
fn criterion_10_flow_file_format_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    let mut rng = SkRng::new(1010);
    let mut exact = true;
    for _ in 0..1000 {
        let w = 1 + rng.uniform_usize(10);
        let h = 1 + rng.uniform_usize(10);
        let u: Vec<f64> = (0..w * h).map(|_| (rng.normal() * 30.0) as f32 as f64).collect();
        let v: Vec<f64> = (0..w * h).map(|_| (rng.normal() * 30.0) as f32 as f64).collect();
        let f = FlowField::new(w, h, u, v, Resolution::Full).unwrap();
        data::write_flo(&f, &path).unwrap();
        let g = data::read_flo(&path).unwrap();
        exact &= f.u.iter().zip(&g.u).all(|(a, b)| a.to_bits() == b.to_bits())
            && f.v.iter().zip(&g.v).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let f = FlowField::constant(4, 3, 1.0, 2.0, Resolution::Full);
    data::write_flo(&f, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let magic_err = data::read_flo(&path).unwrap_err().to_string().contains("magic");
    data::write_flo(&f, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    let trunc_err = data::read_flo(&path).unwrap_err().to_string().contains("truncated");

    let ok = exact && magic_err && trunc_err;
    report(
        10,
        "flow file format fidelity",
        ok,
        &format!("1000 round trips bit-exact: {exact}, bad magic detected: {magic_err}, truncation detected: {trunc_err}"),
    );
}
