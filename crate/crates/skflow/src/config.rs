//! Plain-text run configuration: `[section]` headers over `key = value`
//! lines, strict unknown-key rejection, command-line overrides, and the
//! run manifest written next to every output.

use std::path::Path;

use num_rational::Ratio;

use crate::data::{GenConfig, MotionMode};
use crate::error::{Result, SkError};
use crate::metrics::OutlierRule;
use crate::net::{MotionEncoderStyle, NetworkConfig, UpdaterStyle, UpsampleStyle};
use crate::optim::TrainConfig;
use crate::tape::Activation;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub outlier_rule: OutlierRule,
    pub samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { outlier_rule: OutlierRule::And, samples: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub eval: EvalSettings,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            data: GenConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn bad_value(key: &str, value: &str, expect: &str) -> SkError {
    SkError::Config(format!("key '{key}': cannot parse '{value}' as {expect}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad_value(key, v, "an unsigned integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad_value(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad_value(key, v, "a boolean")),
    }
}

fn parse_ratio(key: &str, v: &str) -> Result<Ratio<i128>> {
    let parse_int = |s: &str| s.trim().parse::<i128>().map_err(|_| bad_value(key, v, "an integer or p/q ratio"));
    match v.split_once('/') {
        Some((p, q)) => {
            let q = parse_int(q)?;
            if q == 0 {
                return Err(bad_value(key, v, "a ratio with nonzero denominator"));
            }
            Ok(Ratio::new(parse_int(p)?, q))
        }
        None => Ok(Ratio::from_integer(parse_int(v)?)),
    }
}

fn ratio_text(r: Ratio<i128>) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Apply one dotted-path assignment, e.g. `block.l=7`.
pub fn apply_set(cfg: &mut AppConfig, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| SkError::Config(format!("override '{spec}' is not of the form section.key=value")))?;
    let key = key.trim();
    let v = value.trim();
    match key {
        "network.hidden_dim" => cfg.net.hidden_dim = parse_usize(key, v)?,
        "network.context_dim" => cfg.net.context_dim = parse_usize(key, v)?,
        "network.feature_dim" => cfg.net.feature_dim = parse_usize(key, v)?,
        "network.iters_train" => cfg.net.iters_train = parse_usize(key, v)?,
        "network.iters_eval" => cfg.net.iters_eval = parse_usize(key, v)?,
        "network.motion_encoder" => {
            cfg.net.motion_encoder = match v {
                "sk" => MotionEncoderStyle::Sk,
                "plain" => MotionEncoderStyle::Plain,
                _ => return Err(bad_value(key, v, "one of sk, plain")),
            }
        }
        "network.updater" => {
            cfg.net.updater = match v {
                "skblock" => UpdaterStyle::SkBlock,
                "convgru" => UpdaterStyle::ConvGru,
                _ => return Err(bad_value(key, v, "one of skblock, convgru")),
            }
        }
        "network.upsample" => {
            cfg.net.upsample = match v {
                "convex" => UpsampleStyle::Convex,
                "bilinear" => UpsampleStyle::Bilinear,
                _ => return Err(bad_value(key, v, "one of convex, bilinear")),
            }
        }
        "network.use_gma" => cfg.net.use_gma = parse_bool(key, v)?,
        "network.num_levels" => cfg.net.num_levels = parse_usize(key, v)?,
        "network.radius" => cfg.net.radius = parse_usize(key, v)?,
        "network.input_channels" => cfg.net.input_channels = parse_usize(key, v)?,
        "network.corr_normalize" => cfg.net.corr_normalize = parse_bool(key, v)?,
        "network.precision" => {
            cfg.net.precision = match v {
                "f64" => Precision::F64,
                "f32" => Precision::F32,
                _ => return Err(bad_value(key, v, "one of f64, f32")),
            }
        }
        "block.style" => {
            cfg.net.block.style = match v {
                "direct" => crate::block::BlockStyle::Direct,
                "parallel" => crate::block::BlockStyle::Parallel,
                "funnel" => crate::block::BlockStyle::Funnel,
                "conical" => crate::block::BlockStyle::Conical,
                _ => return Err(bad_value(key, v, "one of direct, parallel, funnel, conical")),
            }
        }
        "block.l" => cfg.net.block.l = parse_usize(key, v)?,
        "block.s" => cfg.net.block.s = parse_usize(key, v)?,
        "block.alpha" => cfg.net.block.alpha = parse_ratio(key, v)?,
        "block.residual" => cfg.net.block.use_residual = parse_bool(key, v)?,
        "block.aux" => cfg.net.block.use_aux = parse_bool(key, v)?,
        "block.dilation" => cfg.net.block.dilation = parse_usize(key, v)?,
        "block.activation" => {
            cfg.net.block.activation = match v {
                "relu" => Activation::Relu,
                "gelu" => Activation::Gelu,
                _ => return Err(bad_value(key, v, "one of relu, gelu")),
            }
        }
        "train.steps" => cfg.train.steps = parse_usize(key, v)?,
        "train.batch" => cfg.train.batch = parse_usize(key, v)?.max(1),
        "train.lr_max" => cfg.train.lr_max = parse_f64(key, v)?,
        "train.weight_decay" => cfg.train.weight_decay = parse_f64(key, v)?,
        "train.loss_decay" => cfg.train.loss_decay = parse_f64(key, v)?,
        "train.warmup_frac" => cfg.train.warmup_frac = parse_f64(key, v)?,
        "train.grad_clip" => cfg.train.grad_clip = parse_f64(key, v)?,
        "train.log_every" => cfg.train.log_every = parse_usize(key, v)?.max(1),
        "train.snapshot_every" => cfg.train.snapshot_every = parse_usize(key, v)?.max(1),
        "data.size" => cfg.data.size = parse_usize(key, v)?,
        "data.channels" => cfg.data.channels = parse_usize(key, v)?,
        "data.max_shift" => cfg.data.max_shift = parse_f64(key, v)?,
        "data.mode" => {
            cfg.data.mode = match v {
                "constant" => MotionMode::Constant,
                "patch" => MotionMode::Patch,
                _ => return Err(bad_value(key, v, "one of constant, patch")),
            }
        }
        "data.smooth_passes" => cfg.data.smooth_passes = parse_usize(key, v)?,
        "data.integer_shift" => cfg.data.integer_shift = parse_bool(key, v)?,
        "data.texture_pool" => cfg.data.texture_pool = parse_usize(key, v)?,
        "eval.outlier_rule" => {
            cfg.eval.outlier_rule = match v {
                "and" => OutlierRule::And,
                "or" => OutlierRule::Or,
                _ => return Err(bad_value(key, v, "one of and, or")),
            }
        }
        "eval.samples" => cfg.eval.samples = parse_usize(key, v)?,
        _ => return Err(SkError::Config(format!("unknown configuration key '{key}'"))),
    }
    Ok(())
}

/// Parse a config body on top of the defaults. Lines are `key = value`
/// under `[section]` headers; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !["network", "block", "train", "data", "eval"].contains(&section.as_str()) {
                return Err(SkError::Config(format!("unknown configuration section '[{section}]'")));
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            SkError::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        if section.is_empty() {
            return Err(SkError::Config(format!(
                "line {}: key '{}' appears before any [section] header",
                lineno + 1,
                key.trim()
            )));
        }
        apply_set(&mut cfg, &format!("{section}.{}={}", key.trim(), value.trim()))?;
    }
    Ok(cfg)
}

/// Defaults, optionally overlaid with a file, then with `--set` assignments.
pub fn load(path: Option<&Path>, sets: &[String]) -> Result<AppConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| SkError::io(p.display().to_string(), e))?;
            parse_config(&text)?
        }
        None => AppConfig::default(),
    };
    for s in sets {
        apply_set(&mut cfg, s)?;
    }
    cfg.net.validate()?;
    Ok(cfg)
}

/// Full snapshot in the same format `parse_config` reads.
pub fn to_text(cfg: &AppConfig) -> String {
    let b = &cfg.net.block;
    let net = &cfg.net;
    let style = match b.style {
        crate::block::BlockStyle::Direct => "direct",
        crate::block::BlockStyle::Parallel => "parallel",
        crate::block::BlockStyle::Funnel => "funnel",
        crate::block::BlockStyle::Conical => "conical",
    };
    format!(
        "[network]\n\
         hidden_dim = {}\ncontext_dim = {}\nfeature_dim = {}\n\
         iters_train = {}\niters_eval = {}\n\
         motion_encoder = {}\nupdater = {}\nupsample = {}\nuse_gma = {}\n\
         num_levels = {}\nradius = {}\ninput_channels = {}\ncorr_normalize = {}\nprecision = {}\n\
         \n[block]\nstyle = {}\nl = {}\ns = {}\nalpha = {}\nresidual = {}\naux = {}\ndilation = {}\nactivation = {}\n\
         \n[train]\nsteps = {}\nbatch = {}\nlr_max = {}\nweight_decay = {}\nloss_decay = {}\nwarmup_frac = {}\ngrad_clip = {}\n\
         log_every = {}\nsnapshot_every = {}\n\
         \n[data]\nsize = {}\nchannels = {}\nmax_shift = {}\nmode = {}\nsmooth_passes = {}\ninteger_shift = {}\ntexture_pool = {}\n\
         \n[eval]\noutlier_rule = {}\nsamples = {}\n",
        net.hidden_dim,
        net.context_dim,
        net.feature_dim,
        net.iters_train,
        net.iters_eval,
        match net.motion_encoder {
            MotionEncoderStyle::Sk => "sk",
            MotionEncoderStyle::Plain => "plain",
        },
        match net.updater {
            UpdaterStyle::SkBlock => "skblock",
            UpdaterStyle::ConvGru => "convgru",
        },
        match net.upsample {
            UpsampleStyle::Convex => "convex",
            UpsampleStyle::Bilinear => "bilinear",
        },
        net.use_gma,
        net.num_levels,
        net.radius,
        net.input_channels,
        net.corr_normalize,
        match net.precision {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        },
        style,
        b.l,
        b.s,
        ratio_text(b.alpha),
        b.use_residual,
        b.use_aux,
        b.dilation,
        match b.activation {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        },
        cfg.train.steps,
        cfg.train.batch,
        cfg.train.lr_max,
        cfg.train.weight_decay,
        cfg.train.loss_decay,
        cfg.train.warmup_frac,
        cfg.train.grad_clip,
        cfg.train.log_every,
        cfg.train.snapshot_every,
        cfg.data.size,
        cfg.data.channels,
        cfg.data.max_shift,
        match cfg.data.mode {
            MotionMode::Constant => "constant",
            MotionMode::Patch => "patch",
        },
        cfg.data.smooth_passes,
        cfg.data.integer_shift,
        cfg.data.texture_pool,
        match cfg.eval.outlier_rule {
            OutlierRule::And => "and",
            OutlierRule::Or => "or",
        },
        cfg.eval.samples,
    )
}

/// Record everything needed to rerun: config snapshot, seed, crate version.
pub fn write_run_manifest(dir: &Path, cfg: &AppConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SkError::io(dir.display().to_string(), e))?;
    let body = format!(
        "# run manifest\nversion = {}\nseed = {}\n\n{}",
        env!("CARGO_PKG_VERSION"),
        seed,
        to_text(cfg)
    );
    let path = dir.join("run_manifest.txt");
    std::fs::write(&path, body).map_err(|e| SkError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = AppConfig::default();
        let text = to_text(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = parse_config("[network]\nhiden_dim = 64\n").unwrap_err().to_string();
        assert!(err.contains("hiden_dim"), "{err}");
        let err = apply_set(&mut AppConfig::default(), "train.momentum=0.9").unwrap_err().to_string();
        assert!(err.contains("train.momentum"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let err = parse_config("[trainer]\nsteps = 5\n").unwrap_err().to_string();
        assert!(err.contains("trainer"), "{err}");
    }

    #[test]
    fn key_before_section_rejected() {
        assert!(parse_config("steps = 5\n").is_err());
    }

    #[test]
    fn overrides_and_comments_apply() {
        let text = "# toy setup\n[block]\nl = 7  # small kernel\nalpha = 3/2\n[train]\nsteps = 10\n";
        let mut cfg = parse_config(text).unwrap();
        assert_eq!(cfg.net.block.l, 7);
        assert_eq!(cfg.net.block.alpha, Ratio::new(3, 2));
        assert_eq!(cfg.train.steps, 10);
        apply_set(&mut cfg, "block.l=9").unwrap();
        assert_eq!(cfg.net.block.l, 9);
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = apply_set(&mut AppConfig::default(), "block.alpha=2/0").unwrap_err().to_string();
        assert!(err.contains("block.alpha"), "{err}");
        let err = apply_set(&mut AppConfig::default(), "network.updater=gru").unwrap_err().to_string();
        assert!(err.contains("network.updater"), "{err}");
    }

    #[test]
    fn load_validates_network() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "[network]\nhidden_dim = 6\n").unwrap();
        assert!(load(Some(&p), &[]).is_err());
        let ok = load(None, &["block.l=7".into()]).unwrap();
        assert_eq!(ok.net.block.l, 7);
    }

    #[test]
    fn manifest_written_and_parseable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AppConfig::default();
        write_run_manifest(dir.path(), &cfg, 1234).unwrap();
        let body = std::fs::read_to_string(dir.path().join("run_manifest.txt")).unwrap();
        assert!(body.contains("seed = 1234"));
        // the snapshot section parses back
        let snapshot: String =
            body.lines().skip_while(|l| !l.starts_with('[')).collect::<Vec<_>>().join("\n");
        parse_config(&snapshot).unwrap();
    }
}
