//! The full flow network: shared feature encoder, context encoder,
//! correlation pyramid, motion encoder, optional global aggregation,
//! iterative updater, and x8 upsampling.

use crate::block::{sk_forward, sk_mac_report, sk_register, BlockConfig, BlockStyle, Init};
use crate::conv::{count_macs, ConvSpec, MacReport};
use crate::error::{Result, SkError};
use crate::params::{ParamStore, ParamVars};
use crate::rng::SkRng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Precision, Tensor4};
use crate::upsample::MASK_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionEncoderStyle {
    Sk,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdaterStyle {
    SkBlock,
    ConvGru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleStyle {
    Convex,
    Bilinear,
}

/// Kernel/switch template for every super-kernel block in the network; the
/// channel counts are filled in per placement site.
#[derive(Debug, Clone, Copy)]
pub struct BlockTemplate {
    pub style: BlockStyle,
    pub l: usize,
    pub s: usize,
    pub alpha: num_rational::Ratio<i128>,
    pub use_residual: bool,
    pub use_aux: bool,
    pub dilation: usize,
    pub activation: Activation,
}

impl Default for BlockTemplate {
    fn default() -> Self {
        BlockTemplate {
            style: BlockStyle::Conical,
            l: 15,
            s: 1,
            alpha: num_rational::Ratio::new(2, 1),
            use_residual: true,
            use_aux: true,
            dilation: 1,
            activation: Activation::Relu,
        }
    }
}

impl BlockTemplate {
    pub fn at(&self, c_in: usize, c_out: usize) -> BlockConfig {
        BlockConfig {
            style: self.style,
            l: self.l,
            s: self.s,
            alpha: self.alpha,
            use_residual: self.use_residual,
            use_aux: self.use_aux,
            dilation: self.dilation,
            c_in,
            c_out,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkConfig {
    pub hidden_dim: usize,
    pub context_dim: usize,
    pub feature_dim: usize,
    pub iters_train: usize,
    pub iters_eval: usize,
    pub motion_encoder: MotionEncoderStyle,
    pub updater: UpdaterStyle,
    pub upsample: UpsampleStyle,
    pub use_gma: bool,
    pub num_levels: usize,
    pub radius: usize,
    pub input_channels: usize,
    pub corr_normalize: bool,
    pub precision: Precision,
    pub block: BlockTemplate,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_dim: 128,
            context_dim: 128,
            feature_dim: 128,
            iters_train: 12,
            iters_eval: 10,
            motion_encoder: MotionEncoderStyle::Sk,
            updater: UpdaterStyle::SkBlock,
            upsample: UpsampleStyle::Convex,
            use_gma: true,
            num_levels: 4,
            radius: 4,
            input_channels: 3,
            corr_normalize: false,
            precision: Precision::F64,
            block: BlockTemplate::default(),
        }
    }
}

/// Channel widths derived from the hidden dimension. The correlation path
/// expands to 2h then narrows to 3h/2; the flow path lifts 2 channels to h
/// then h/2; the merged features leave 2 channels for the raw flow append.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub corr_ch: usize,
    pub c1: usize,
    pub c2: usize,
    pub f1: usize,
    pub f2: usize,
    pub merged: usize,
    pub motion: usize,
    pub upd_in: usize,
    pub d_k: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim % 4 != 0 || self.hidden_dim < 8 {
            return Err(SkError::Config(format!(
                "hidden_dim must be a multiple of 4 and >= 8, got {}",
                self.hidden_dim
            )));
        }
        if self.feature_dim % 2 != 0 || self.feature_dim < 4 {
            return Err(SkError::Config(format!("feature_dim must be even and >= 4, got {}", self.feature_dim)));
        }
        if self.context_dim == 0 || self.input_channels == 0 {
            return Err(SkError::Config("context_dim and input_channels must be >= 1".into()));
        }
        if self.num_levels == 0 || self.radius == 0 {
            return Err(SkError::Config("num_levels and radius must be >= 1".into()));
        }
        if self.iters_train == 0 || self.iters_eval == 0 {
            return Err(SkError::Config("iteration counts must be >= 1".into()));
        }
        self.block.at(self.hidden_dim, self.hidden_dim).validate()
    }

    pub fn dims(&self) -> Dims {
        let h = self.hidden_dim;
        let win = 2 * self.radius + 1;
        let motion = h;
        Dims {
            corr_ch: self.num_levels * win * win,
            c1: 2 * h,
            c2: 3 * h / 2,
            f1: h,
            f2: h / 2,
            merged: h - 2,
            motion,
            upd_in: motion + self.context_dim + if self.use_gma { motion } else { 0 },
            d_k: h / 2,
        }
    }
}

fn reg_conv(store: &mut ParamStore, rng: &mut SkRng, name: &str, spec: &ConvSpec, init: Init) -> Result<()> {
    let fan_in = match spec.kind {
        crate::conv::ConvKind::Depthwise => spec.kernel * spec.kernel,
        _ => spec.c_in * spec.kernel * spec.kernel,
    };
    store.insert(&format!("{name}.w"), crate::block::init_conv(spec.weight_shape(), fan_in, init, rng))?;
    if spec.bias {
        let b = spec.bias_shape();
        store.insert(&format!("{name}.b"), Tensor4::zeros(b.n, b.c, b.h, b.w))?;
    }
    Ok(())
}

pub struct SkFlowNet {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
}

/// Per-iteration outputs: the 1/8-resolution flow and its x8 upsampled form.
pub struct ForwardOut {
    pub flows_full: Vec<Var>,
    pub flows_eighth: Vec<Var>,
}

struct EncSpecs {
    e1: ConvSpec,
    e2: ConvSpec,
    e3: ConvSpec,
}

fn enc_specs(c_in: usize, mid: usize, out: usize) -> EncSpecs {
    EncSpecs {
        e1: ConvSpec::dense(c_in, mid, 7).with_stride(2),
        e2: ConvSpec::dense(mid, mid, 3).with_stride(2),
        e3: ConvSpec::dense(mid, out, 3).with_stride(2),
    }
}

impl SkFlowNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SkRng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.dims();
        let h = cfg.hidden_dim;

        let fe = enc_specs(cfg.input_channels, cfg.feature_dim / 2, cfg.feature_dim);
        reg_conv(&mut store, &mut rng, "fenc.e1", &fe.e1, Init::He)?;
        reg_conv(&mut store, &mut rng, "fenc.e2", &fe.e2, Init::He)?;
        reg_conv(&mut store, &mut rng, "fenc.e3", &fe.e3, Init::Unit)?;
        let ce = enc_specs(cfg.input_channels, cfg.feature_dim / 2, h + cfg.context_dim);
        reg_conv(&mut store, &mut rng, "cenc.e1", &ce.e1, Init::He)?;
        reg_conv(&mut store, &mut rng, "cenc.e2", &ce.e2, Init::He)?;
        reg_conv(&mut store, &mut rng, "cenc.e3", &ce.e3, Init::Unit)?;

        match cfg.motion_encoder {
            MotionEncoderStyle::Sk => {
                sk_register(&cfg.block.at(d.corr_ch, d.c1), "me.c1", &mut store, &mut rng, false)?;
                sk_register(&cfg.block.at(d.c1, d.c2), "me.c2", &mut store, &mut rng, false)?;
                sk_register(&cfg.block.at(2, d.f1), "me.f1", &mut store, &mut rng, false)?;
                sk_register(&cfg.block.at(d.f1, d.f2), "me.f2", &mut store, &mut rng, false)?;
                sk_register(&cfg.block.at(d.c2 + d.f2, d.merged), "me.m", &mut store, &mut rng, false)?;
            }
            MotionEncoderStyle::Plain => {
                reg_conv(&mut store, &mut rng, "me.c1", &ConvSpec::dense(d.corr_ch, d.c1, 3), Init::He)?;
                reg_conv(&mut store, &mut rng, "me.c2", &ConvSpec::dense(d.c1, d.c2, 3), Init::He)?;
                reg_conv(&mut store, &mut rng, "me.f1", &ConvSpec::dense(2, d.f1, 3), Init::He)?;
                reg_conv(&mut store, &mut rng, "me.f2", &ConvSpec::dense(d.f1, d.f2, 3), Init::He)?;
                reg_conv(&mut store, &mut rng, "me.m", &ConvSpec::dense(d.c2 + d.f2, d.merged, 3), Init::He)?;
            }
        }

        if cfg.use_gma {
            reg_conv(&mut store, &mut rng, "gma.q", &ConvSpec::pointwise(cfg.context_dim, d.d_k).no_bias(), Init::Unit)?;
            reg_conv(&mut store, &mut rng, "gma.k", &ConvSpec::pointwise(cfg.context_dim, d.d_k).no_bias(), Init::Unit)?;
            reg_conv(&mut store, &mut rng, "gma.v", &ConvSpec::pointwise(d.motion, d.motion).no_bias(), Init::Unit)?;
            store.insert("gma.gamma", Tensor4::scalar(0.0))?;
        }

        match cfg.updater {
            UpdaterStyle::SkBlock => {
                sk_register(&cfg.block.at(d.upd_in, h), "upd.blk", &mut store, &mut rng, false)?;
            }
            UpdaterStyle::ConvGru => {
                let gin = h + d.upd_in;
                reg_conv(&mut store, &mut rng, "upd.gz", &ConvSpec::dense(gin, h, 3), Init::Unit)?;
                reg_conv(&mut store, &mut rng, "upd.gr", &ConvSpec::dense(gin, h, 3), Init::Unit)?;
                reg_conv(&mut store, &mut rng, "upd.gq", &ConvSpec::dense(gin, h, 3), Init::Unit)?;
            }
        }

        reg_conv(&mut store, &mut rng, "head.f1", &ConvSpec::dense(h, h, 3), Init::He)?;
        reg_conv(&mut store, &mut rng, "head.f2", &ConvSpec::dense(h, 2, 3), Init::Small)?;
        if cfg.upsample == UpsampleStyle::Convex {
            reg_conv(&mut store, &mut rng, "head.m1", &ConvSpec::dense(h, h, 3), Init::He)?;
            reg_conv(&mut store, &mut rng, "head.m2", &ConvSpec::pointwise(h, MASK_CHANNELS), Init::Small)?;
        }

        Ok(SkFlowNet { cfg, params: store })
    }

    fn conv(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        name: &str,
        spec: &ConvSpec,
    ) -> Result<Var> {
        let w = vars.var(&format!("{name}.w"))?;
        let b = if spec.bias { Some(vars.var(&format!("{name}.b"))?) } else { None };
        tape.conv2d(x, spec, w, b)
    }

    fn encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        img: Var,
        prefix: &str,
        specs: &EncSpecs,
    ) -> Result<Var> {
        let a = self.conv(tape, vars, img, &format!("{prefix}.e1"), &specs.e1)?;
        let a = tape.instance_norm(a);
        let a = tape.relu(a);
        let a = self.conv(tape, vars, a, &format!("{prefix}.e2"), &specs.e2)?;
        let a = tape.instance_norm(a);
        let a = tape.relu(a);
        let a = self.conv(tape, vars, a, &format!("{prefix}.e3"), &specs.e3)?;
        Ok(tape.instance_norm(a))
    }

    /// Motion features from correlation lookups and the current flow:
    /// two blocks on the correlation path, two on the flow path, one on the
    /// merged features, with the raw flow appended at the end.
    pub fn motion_encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        corr: Var,
        flow: Var,
    ) -> Result<Var> {
        let d = self.cfg.dims();
        let merged = match self.cfg.motion_encoder {
            MotionEncoderStyle::Sk => {
                let c = sk_forward(tape, corr, &self.cfg.block.at(d.corr_ch, d.c1), "me.c1", vars)?;
                let c = sk_forward(tape, c, &self.cfg.block.at(d.c1, d.c2), "me.c2", vars)?;
                let f = sk_forward(tape, flow, &self.cfg.block.at(2, d.f1), "me.f1", vars)?;
                let f = sk_forward(tape, f, &self.cfg.block.at(d.f1, d.f2), "me.f2", vars)?;
                let cf = tape.concat_channels(&[c, f])?;
                sk_forward(tape, cf, &self.cfg.block.at(d.c2 + d.f2, d.merged), "me.m", vars)?
            }
            MotionEncoderStyle::Plain => {
                let c = self.conv(tape, vars, corr, "me.c1", &ConvSpec::dense(d.corr_ch, d.c1, 3))?;
                let c = tape.relu(c);
                let c = self.conv(tape, vars, c, "me.c2", &ConvSpec::dense(d.c1, d.c2, 3))?;
                let c = tape.relu(c);
                let f = self.conv(tape, vars, flow, "me.f1", &ConvSpec::dense(2, d.f1, 3))?;
                let f = tape.relu(f);
                let f = self.conv(tape, vars, f, "me.f2", &ConvSpec::dense(d.f1, d.f2, 3))?;
                let f = tape.relu(f);
                let cf = tape.concat_channels(&[c, f])?;
                let m = self.conv(tape, vars, cf, "me.m", &ConvSpec::dense(d.c2 + d.f2, d.merged, 3))?;
                tape.relu(m)
            }
        };
        tape.concat_channels(&[merged, flow])
    }

    /// Attention aggregation of motion features with context-derived
    /// queries/keys, gated by a learned scalar starting at zero.
    pub fn gma(&self, tape: &mut Tape, vars: &ParamVars, motion: Var, context: Var) -> Result<Var> {
        let d = self.cfg.dims();
        let q = self.conv(tape, vars, context, "gma.q", &ConvSpec::pointwise(self.cfg.context_dim, d.d_k).no_bias())?;
        let k = self.conv(tape, vars, context, "gma.k", &ConvSpec::pointwise(self.cfg.context_dim, d.d_k).no_bias())?;
        let v = self.conv(tape, vars, motion, "gma.v", &ConvSpec::pointwise(d.motion, d.motion).no_bias())?;
        let agg = tape.attention(q, k, v)?;
        let gamma = vars.var("gma.gamma")?;
        let scaled = tape.mul_scalar(agg, gamma)?;
        tape.add(motion, scaled)
    }

    /// One updater step. ConvGru mode returns the new hidden state; SkBlock
    /// mode is stateless and returns the block output.
    pub fn update_step(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        hidden: Var,
        inputs: Var,
    ) -> Result<Var> {
        let h = self.cfg.hidden_dim;
        let d = self.cfg.dims();
        match self.cfg.updater {
            UpdaterStyle::SkBlock => sk_forward(tape, inputs, &self.cfg.block.at(d.upd_in, h), "upd.blk", vars),
            UpdaterStyle::ConvGru => {
                let gin = h + d.upd_in;
                let hx = tape.concat_channels(&[hidden, inputs])?;
                let z = self.conv(tape, vars, hx, "upd.gz", &ConvSpec::dense(gin, h, 3))?;
                let z = tape.sigmoid(z);
                let r = self.conv(tape, vars, hx, "upd.gr", &ConvSpec::dense(gin, h, 3))?;
                let r = tape.sigmoid(r);
                let rh = tape.mul(r, hidden)?;
                let rhx = tape.concat_channels(&[rh, inputs])?;
                let q = self.conv(tape, vars, rhx, "upd.gq", &ConvSpec::dense(gin, h, 3))?;
                let q = tape.tanh(q);
                // h' = (1 - z) * h + z * q
                let zh = tape.mul(z, hidden)?;
                let keep = tape.sub(hidden, zh)?;
                let zq = tape.mul(z, q)?;
                tape.add(keep, zq)
            }
        }
    }

    fn flow_head(&self, tape: &mut Tape, vars: &ParamVars, state: Var) -> Result<Var> {
        let h = self.cfg.hidden_dim;
        let a = self.conv(tape, vars, state, "head.f1", &ConvSpec::dense(h, h, 3))?;
        let a = tape.relu(a);
        self.conv(tape, vars, a, "head.f2", &ConvSpec::dense(h, 2, 3))
    }

    fn mask_head(&self, tape: &mut Tape, vars: &ParamVars, state: Var) -> Result<Var> {
        let h = self.cfg.hidden_dim;
        let a = self.conv(tape, vars, state, "head.m1", &ConvSpec::dense(h, h, 3))?;
        let a = tape.relu(a);
        self.conv(tape, vars, a, "head.m2", &ConvSpec::pointwise(h, MASK_CHANNELS))
    }

    /// Run the network for `iters` refinement steps. Both images must share
    /// a shape whose height and width are multiples of 8.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        img1: Var,
        img2: Var,
        iters: usize,
    ) -> Result<ForwardOut> {
        let cfg = &self.cfg;
        let s = tape.shape(img1);
        tape.value(img1).check_same_shape(tape.value(img2), "input frame pair")?;
        if s.h % 8 != 0 || s.w % 8 != 0 {
            return Err(SkError::Invalid(format!(
                "input dimensions must be multiples of 8, got {}x{}",
                s.h, s.w
            )));
        }
        if s.c != cfg.input_channels {
            return Err(SkError::ShapeMismatch {
                left: s.as_tuple(),
                right: (s.n, cfg.input_channels, s.h, s.w),
                context: "input channels".into(),
            });
        }
        let (eh, ew) = (s.h / 8, s.w / 8);
        let min_dim = eh.min(ew);
        if min_dim >> (cfg.num_levels - 1) == 0 {
            return Err(SkError::Config(format!(
                "{} correlation levels need at least {} pixels at 1/8 scale, got {}x{}",
                cfg.num_levels,
                1usize << (cfg.num_levels - 1),
                eh,
                ew
            )));
        }

        let fe = enc_specs(cfg.input_channels, cfg.feature_dim / 2, cfg.feature_dim);
        let ce = enc_specs(cfg.input_channels, cfg.feature_dim / 2, cfg.hidden_dim + cfg.context_dim);
        let f1 = self.encode(tape, vars, img1, "fenc", &fe)?;
        let f2 = self.encode(tape, vars, img2, "fenc", &fe)?;
        let cnet = self.encode(tape, vars, img1, "cenc", &ce)?;
        let net0 = tape.slice_channels(cnet, 0, cfg.hidden_dim)?;
        let mut hidden = tape.tanh(net0);
        let inp0 = tape.slice_channels(cnet, cfg.hidden_dim, cfg.context_dim)?;
        let context = tape.relu(inp0);

        let base = tape.corr_base(f1, f2, cfg.corr_normalize)?;
        let mut levels = vec![base];
        for _ in 1..cfg.num_levels {
            let prev = *levels.last().unwrap();
            levels.push(tape.avg_pool2(prev)?);
        }

        let mut flow = tape.constant(Tensor4::zeros(s.n, 2, eh, ew));
        let mut flows_full = Vec::with_capacity(iters);
        let mut flows_eighth = Vec::with_capacity(iters);
        for _ in 0..iters {
            let mut looked = Vec::with_capacity(cfg.num_levels);
            for (l, lv) in levels.iter().enumerate() {
                looked.push(tape.corr_sample(*lv, flow, l, cfg.radius, eh, ew)?);
            }
            let corr = tape.concat_channels(&looked)?;
            let motion = self.motion_encode(tape, vars, corr, flow)?;
            let mut parts = vec![motion, context];
            if cfg.use_gma {
                parts.push(self.gma(tape, vars, motion, context)?);
            }
            let upd_in = tape.concat_channels(&parts)?;
            let state = self.update_step(tape, vars, hidden, upd_in)?;
            if cfg.updater == UpdaterStyle::ConvGru {
                hidden = state;
            }
            let dflow = self.flow_head(tape, vars, state)?;
            flow = tape.add(flow, dflow)?;
            let up = match cfg.upsample {
                UpsampleStyle::Convex => {
                    let mask = self.mask_head(tape, vars, state)?;
                    tape.convex_upsample8(flow, mask)?
                }
                UpsampleStyle::Bilinear => tape.bilinear_up8(flow),
            };
            flows_eighth.push(flow);
            flows_full.push(up);
        }
        Ok(ForwardOut { flows_full, flows_eighth })
    }

    /// Gradient-free forward pass returning the final full-resolution flow
    /// as an (n, 2, h, w) tensor.
    pub fn infer(&self, img1: &Tensor4, img2: &Tensor4, iters: usize) -> Result<Tensor4> {
        let mut tape = Tape::new(self.cfg.precision);
        let vars = ParamVars::bind_all(&self.params, &mut tape, false);
        let v1 = tape.constant(img1.clone());
        let v2 = tape.constant(img2.clone());
        let out = self.forward(&mut tape, &vars, v1, v2, iters)?;
        Ok(tape.value(*out.flows_full.last().unwrap()).clone())
    }
}

/// Exact per-layer operation/parameter accounting for the whole network on an
/// (n, input_channels, h, w) frame pair.
pub fn net_mac_report(cfg: &NetworkConfig, h: usize, w: usize, n: usize) -> Result<MacReport> {
    cfg.validate()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(SkError::Invalid(format!("input dimensions must be multiples of 8, got {h}x{w}")));
    }
    let d = cfg.dims();
    let hd = cfg.hidden_dim;
    let (eh, ew) = (h / 8, w / 8);
    let mut rep = MacReport::default();

    let fe = enc_specs(cfg.input_channels, cfg.feature_dim / 2, cfg.feature_dim);
    // the feature encoder runs on both frames
    rep.push_conv("fenc.e1", &fe.e1, h, w, 2 * n);
    rep.push_conv("fenc.e2", &fe.e2, h / 2, w / 2, 2 * n);
    rep.push_conv("fenc.e3", &fe.e3, h / 4, w / 4, 2 * n);
    let ce = enc_specs(cfg.input_channels, cfg.feature_dim / 2, hd + cfg.context_dim);
    rep.push_conv("cenc.e1", &ce.e1, h, w, n);
    rep.push_conv("cenc.e2", &ce.e2, h / 2, w / 2, n);
    rep.push_conv("cenc.e3", &ce.e3, h / 4, w / 4, n);

    let hw = eh * ew;
    rep.push("corr.base", (n * hw * hw * cfg.feature_dim) as u128, 0);
    let win = 2 * cfg.radius + 1;
    rep.push(
        "corr.lookup",
        (cfg.iters_train * n * hw * cfg.num_levels * win * win * 4) as u128,
        0,
    );

    let t = cfg.iters_train;
    let site = |rep: &mut MacReport, name: &str, c_in: usize, c_out: usize| -> Result<()> {
        match cfg.motion_encoder {
            MotionEncoderStyle::Sk => {
                let mut sub = sk_mac_report(&cfg.block.at(c_in, c_out), eh, ew, n, name)?;
                for e in sub.entries.iter_mut() {
                    e.macs *= t as u128;
                }
                rep.extend(sub);
            }
            MotionEncoderStyle::Plain => {
                let spec = ConvSpec::dense(c_in, c_out, 3);
                rep.push(name.to_string(), t as u128 * count_macs(&spec, eh, ew, n), spec.param_count());
            }
        }
        Ok(())
    };
    site(&mut rep, "me.c1", d.corr_ch, d.c1)?;
    site(&mut rep, "me.c2", d.c1, d.c2)?;
    site(&mut rep, "me.f1", 2, d.f1)?;
    site(&mut rep, "me.f2", d.f1, d.f2)?;
    site(&mut rep, "me.m", d.c2 + d.f2, d.merged)?;

    if cfg.use_gma {
        for (nm, spec) in [
            ("gma.q", ConvSpec::pointwise(cfg.context_dim, d.d_k).no_bias()),
            ("gma.k", ConvSpec::pointwise(cfg.context_dim, d.d_k).no_bias()),
            ("gma.v", ConvSpec::pointwise(d.motion, d.motion).no_bias()),
        ] {
            rep.push(nm, t as u128 * count_macs(&spec, eh, ew, n), spec.param_count());
        }
        rep.push("gma.attn", (t * n * hw * hw * (d.d_k + d.motion)) as u128, 1);
    }

    match cfg.updater {
        UpdaterStyle::SkBlock => {
            let mut sub = sk_mac_report(&cfg.block.at(d.upd_in, hd), eh, ew, n, "upd.blk")?;
            for e in sub.entries.iter_mut() {
                e.macs *= t as u128;
            }
            rep.extend(sub);
        }
        UpdaterStyle::ConvGru => {
            let gin = hd + d.upd_in;
            for nm in ["upd.gz", "upd.gr", "upd.gq"] {
                let spec = ConvSpec::dense(gin, hd, 3);
                rep.push(nm, t as u128 * count_macs(&spec, eh, ew, n), spec.param_count());
            }
        }
    }

    for (nm, spec) in [("head.f1", ConvSpec::dense(hd, hd, 3)), ("head.f2", ConvSpec::dense(hd, 2, 3))] {
        rep.push(nm, t as u128 * count_macs(&spec, eh, ew, n), spec.param_count());
    }
    if cfg.upsample == UpsampleStyle::Convex {
        for (nm, spec) in
            [("head.m1", ConvSpec::dense(hd, hd, 3)), ("head.m2", ConvSpec::pointwise(hd, MASK_CHANNELS))]
        {
            rep.push(nm, t as u128 * count_macs(&spec, eh, ew, n), spec.param_count());
        }
    }
    Ok(rep)
}
