//! The super-kernel block: a large depth-wise convolution paired with a small
//! auxiliary depth-wise convolution, point-wise channel mixing, and two
//! point-wise expansion pairs. Four layer orderings (Direct, Parallel,
//! Funnel, Conical) share the same layer multiset and hence the same cost.

use num_rational::Ratio;

use crate::conv::{count_macs, ConvSpec, MacReport};
use crate::error::{Result, SkError};
use crate::params::{ParamStore, ParamVars};
use crate::rng::SkRng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStyle {
    Direct,
    Parallel,
    Funnel,
    Conical,
}

impl BlockStyle {
    pub const ALL: [BlockStyle; 4] =
        [BlockStyle::Direct, BlockStyle::Parallel, BlockStyle::Funnel, BlockStyle::Conical];
}

/// Complete description of one block. Every ablation axis is a field here:
/// kernel sizes, expansion factor, the residual/aux switches, dilation, and
/// the layer ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub style: BlockStyle,
    /// Large depth-wise kernel size (odd, 1-31).
    pub l: usize,
    /// Auxiliary depth-wise kernel size (odd, <= l).
    pub s: usize,
    /// Expansion factor of the point-wise pairs; alpha * c_in must be integral.
    pub alpha: Ratio<i128>,
    pub use_residual: bool,
    pub use_aux: bool,
    /// Dilation of the large kernel (the 9x9/rate-2 variant sets this to 2).
    pub dilation: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn new(style: BlockStyle, c_in: usize, c_out: usize, l: usize) -> Self {
        BlockConfig {
            style,
            l,
            s: 1,
            alpha: Ratio::new(2, 1),
            use_residual: true,
            use_aux: true,
            dilation: 1,
            c_in,
            c_out,
            activation: Activation::Relu,
        }
    }

    pub fn with_s(mut self, s: usize) -> Self {
        self.s = s;
        self
    }

    pub fn with_alpha(mut self, alpha: Ratio<i128>) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_residual(mut self) -> Self {
        self.use_residual = false;
        self
    }

    pub fn no_aux(mut self) -> Self {
        self.use_aux = false;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l % 2 == 0 || self.l == 0 || self.l > 31 {
            return Err(SkError::Config(format!("large kernel must be odd and in 1-31, got {}", self.l)));
        }
        if self.s % 2 == 0 || self.s == 0 || self.s > self.l {
            return Err(SkError::Config(format!(
                "aux kernel must be odd and <= large kernel, got S={} L={}",
                self.s, self.l
            )));
        }
        if self.alpha <= Ratio::new(0, 1) {
            return Err(SkError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.dilation == 0 {
            return Err(SkError::Config("dilation must be >= 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(SkError::Config("channel counts must be >= 1".into()));
        }
        self.expanded_channels()?;
        Ok(())
    }

    /// alpha * c_in, validated to be a positive integer.
    pub fn expanded_channels(&self) -> Result<usize> {
        let a = self.alpha * Ratio::new(self.c_in as i128, 1);
        if !a.is_integer() || *a.numer() <= 0 {
            return Err(SkError::Config(format!(
                "alpha * c_in must be a positive integer, got {} * {} = {}",
                self.alpha, self.c_in, a
            )));
        }
        Ok(*a.numer() as usize)
    }

    fn dw_l_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.c_in, self.l).with_dilation(self.dilation)
    }

    fn dw_s_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.c_in, self.s)
    }

    fn pw_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c_in, self.c_in)
    }
}

fn pname(prefix: &str, suffix: &str) -> String {
    format!("{prefix}.{suffix}")
}

#[derive(Clone, Copy, PartialEq)]
pub enum Init {
    /// variance 2/fan_in; for convs feeding a rectifier
    He,
    /// variance 1/fan_in; for linear outputs, residual summands, gates
    Unit,
    /// unit scaled by 1e-2; for final prediction heads so the first
    /// forward pass emits a near-zero estimate
    Small,
}

pub(crate) fn init_conv(shape: Shape4, fan_in: usize, init: Init, rng: &mut SkRng) -> Tensor4 {
    let mut t = Tensor4::zeros(shape.n, shape.c, shape.h, shape.w);
    for v in t.data.iter_mut() {
        *v = match init {
            Init::He => rng.he_uniform(fan_in),
            Init::Unit => rng.unit_uniform(fan_in),
            Init::Small => 1e-2 * rng.unit_uniform(fan_in),
        };
    }
    t
}

/// Register every block parameter under `prefix` with fan-in-scaled uniform
/// initialization. `identity_pairs` instead initializes both point-wise
/// pairs to the identity map (requires c_out == c_in and alpha >= 1): the
/// first conv of a pair stacks the identity over zero rows, the second
/// selects it back.
pub fn sk_register(
    cfg: &BlockConfig,
    prefix: &str,
    store: &mut ParamStore,
    rng: &mut SkRng,
    identity_pairs: bool,
) -> Result<()> {
    cfg.validate()?;
    let a = cfg.expanded_channels()?;
    if identity_pairs && (cfg.c_out != cfg.c_in || a < cfg.c_in) {
        return Err(SkError::Config(format!(
            "identity pair initialization needs c_out == c_in and alpha >= 1, got c_in={} c_out={} expanded={}",
            cfg.c_in, cfg.c_out, a
        )));
    }
    let reg = |store: &mut ParamStore, rng: &mut SkRng, name: &str, spec: &ConvSpec, fan_in: usize, init: Init| -> Result<()> {
        store.insert(&pname(prefix, &format!("{name}.w")), init_conv(spec.weight_shape(), fan_in, init, rng))?;
        let b = spec.bias_shape();
        store.insert(&pname(prefix, &format!("{name}.b")), Tensor4::zeros(b.n, b.c, b.h, b.w))
    };
    // residual summands and linear pair outputs get unit gain so stacked
    // blocks stay variance-bounded at initialization
    reg(store, rng, "dw_l", &cfg.dw_l_spec(), cfg.l * cfg.l, Init::Unit)?;
    if cfg.use_aux {
        reg(store, rng, "dw_s", &cfg.dw_s_spec(), cfg.s * cfg.s, Init::Unit)?;
    }
    reg(store, rng, "pw", &cfg.pw_spec(), cfg.c_in, Init::Unit)?;

    let identity_stack = |rows: usize, cols: usize| {
        Tensor4::from_fn(Shape4::new(rows, cols, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 })
    };
    for (pair, last_out) in [("p1", cfg.c_in), ("p2", cfg.c_out)] {
        let up = ConvSpec::pointwise(cfg.c_in, a);
        let down = ConvSpec::pointwise(a, last_out);
        if identity_pairs {
            store.insert(&pname(prefix, &format!("{pair}a.w")), identity_stack(a, cfg.c_in))?;
            store.insert(&pname(prefix, &format!("{pair}a.b")), Tensor4::zeros(1, a, 1, 1))?;
            store.insert(&pname(prefix, &format!("{pair}b.w")), identity_stack(last_out, a))?;
            store.insert(&pname(prefix, &format!("{pair}b.b")), Tensor4::zeros(1, last_out, 1, 1))?;
        } else {
            reg(store, rng, &format!("{pair}a"), &up, cfg.c_in, Init::He)?;
            reg(store, rng, &format!("{pair}b"), &down, a, Init::Unit)?;
        }
    }
    Ok(())
}

/// Run one block on the tape. Layer order per style:
/// Conical applies the aux kernel first, Funnel the large kernel first,
/// Parallel applies both to the same input and sums, Direct has no aux path.
/// Each depth-wise stage is `act(skip + conv)`; the point-wise stage is
/// `d + act(pw(d))`; disabling `use_residual` drops every skip addition.
/// Two point-wise pairs follow: c_in -> alpha*c_in -> c_in, then
/// c_in -> alpha*c_in -> c_out, with the activation after each first conv.
pub fn sk_forward(
    tape: &mut Tape,
    x: Var,
    cfg: &BlockConfig,
    prefix: &str,
    vars: &ParamVars,
) -> Result<Var> {
    cfg.validate()?;
    let xs = tape.shape(x);
    if xs.c != cfg.c_in {
        return Err(SkError::ShapeMismatch {
            left: xs.as_tuple(),
            right: (xs.n, cfg.c_in, xs.h, xs.w),
            context: "block input channels".into(),
        });
    }
    let a = cfg.expanded_channels()?;
    let conv = |tape: &mut Tape, inp: Var, name: &str, spec: &ConvSpec| -> Result<Var> {
        let w = vars.var(&pname(prefix, &format!("{name}.w")))?;
        let b = vars.var(&pname(prefix, &format!("{name}.b")))?;
        tape.conv2d(inp, spec, w, Some(b))
    };
    let act = cfg.activation;
    // act(skip + conv) or act(conv) for one depth-wise stage
    let dw_stage = |tape: &mut Tape, inp: Var, name: &str, spec: &ConvSpec| -> Result<Var> {
        let c = conv(tape, inp, name, spec)?;
        let pre = if cfg.use_residual { tape.add(inp, c)? } else { c };
        Ok(tape.activation(pre, act))
    };

    let d = match cfg.style {
        BlockStyle::Direct => dw_stage(tape, x, "dw_l", &cfg.dw_l_spec())?,
        BlockStyle::Parallel => {
            let mut sum = conv(tape, x, "dw_l", &cfg.dw_l_spec())?;
            if cfg.use_aux {
                let s = conv(tape, x, "dw_s", &cfg.dw_s_spec())?;
                sum = tape.add(sum, s)?;
            }
            if cfg.use_residual {
                sum = tape.add(sum, x)?;
            }
            tape.activation(sum, act)
        }
        BlockStyle::Funnel => {
            let h = dw_stage(tape, x, "dw_l", &cfg.dw_l_spec())?;
            if cfg.use_aux {
                dw_stage(tape, h, "dw_s", &cfg.dw_s_spec())?
            } else {
                h
            }
        }
        BlockStyle::Conical => {
            let h = if cfg.use_aux { dw_stage(tape, x, "dw_s", &cfg.dw_s_spec())? } else { x };
            dw_stage(tape, h, "dw_l", &cfg.dw_l_spec())?
        }
    };

    let p = conv(tape, d, "pw", &cfg.pw_spec())?;
    let ap = tape.activation(p, act);
    let o = if cfg.use_residual { tape.add(d, ap)? } else { ap };

    let mut cur = o;
    for (pair, last_out) in [("p1", cfg.c_in), ("p2", cfg.c_out)] {
        let up = ConvSpec::pointwise(cfg.c_in, a);
        let down = ConvSpec::pointwise(a, last_out);
        let e = conv(tape, cur, &format!("{pair}a"), &up)?;
        let e = tape.activation(e, act);
        cur = conv(tape, e, &format!("{pair}b"), &down)?;
    }
    Ok(cur)
}

/// Per-layer operation/parameter accounting for one block on an (n, h, w)
/// input plane.
pub fn sk_mac_report(cfg: &BlockConfig, h: usize, w: usize, n: usize, prefix: &str) -> Result<MacReport> {
    cfg.validate()?;
    let a = cfg.expanded_channels()?;
    let mut rep = MacReport::default();
    rep.push_conv(pname(prefix, "dw_l"), &cfg.dw_l_spec(), h, w, n);
    if cfg.use_aux {
        rep.push_conv(pname(prefix, "dw_s"), &cfg.dw_s_spec(), h, w, n);
    }
    rep.push_conv(pname(prefix, "pw"), &cfg.pw_spec(), h, w, n);
    rep.push_conv(pname(prefix, "p1a"), &ConvSpec::pointwise(cfg.c_in, a), h, w, n);
    rep.push_conv(pname(prefix, "p1b"), &ConvSpec::pointwise(a, cfg.c_in), h, w, n);
    rep.push_conv(pname(prefix, "p2a"), &ConvSpec::pointwise(cfg.c_in, a), h, w, n);
    rep.push_conv(pname(prefix, "p2b"), &ConvSpec::pointwise(a, cfg.c_out), h, w, n);
    Ok(rep)
}

/// Closed-form parameter total, biases included. Must agree with the summed
/// per-layer report and with the actual registered tensor sizes.
pub fn sk_param_count(cfg: &BlockConfig) -> Result<u128> {
    cfg.validate()?;
    let (ci, co) = (cfg.c_in as u128, cfg.c_out as u128);
    let a = cfg.expanded_channels()? as u128;
    let (l, s) = (cfg.l as u128, cfg.s as u128);
    let mut total = ci * l * l + ci; // large depth-wise + bias
    if cfg.use_aux {
        total += ci * s * s + ci;
    }
    total += ci * ci + ci; // point-wise mixer
    total += (ci * a + a) + (a * ci + ci); // pair 1
    total += (ci * a + a) + (a * co + co); // pair 2
    Ok(total)
}

/// Total MACs of the block divided by those of a dense LxL convolution with
/// the same channel map, both from the measured per-layer counts.
pub fn sk_measured_ratio(cfg: &BlockConfig, h: usize, w: usize, n: usize) -> Result<Ratio<i128>> {
    let block = sk_mac_report(cfg, h, w, n, "blk")?.total_macs();
    let dense = count_macs(&ConvSpec::dense(cfg.c_in, cfg.c_out, cfg.l), h, w, n);
    Ok(Ratio::new(block as i128, dense as i128))
}
