//! Command-line front end: operation accounting, gradient verification,
//! toy training, evaluation, and visualization.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use skflow::config::{self, AppConfig};
use skflow::conv::cost_ratio;
use skflow::data::{self, FlowSample, GenConfig};
use skflow::error::Result as SkResult;
use skflow::flow::{FlowField, Resolution};
use skflow::gradcheck;
use skflow::metrics::{self, EvalReport};
use skflow::net::{net_mac_report, SkFlowNet};
use skflow::optim::{self, StepLog};
use skflow::params::ParamStore;
use skflow::tensor::Precision;
use skflow::viz::{self, Series};
use skflow::block;

#[derive(Parser)]
#[command(name = "skflow", about = "Super-kernel optical flow toolkit", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Configuration file ([section] headers over key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for reports, checkpoints, and images
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a config key, e.g. --set block.l=7 (repeatable)
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer multiply/parameter tables for the block and full network
    BenchMacs,
    /// Finite-difference verification of every operation and block variant
    Gradcheck,
    /// Train on synthetic translation pairs and report validation error
    TrainToy,
    /// Evaluate a checkpoint on synthetic data with occlusion-split metrics
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render flow colorizations and error heat maps
    Viz {
        /// Checkpoint to run on fresh synthetic samples
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Predicted flow file (pairs with --gt, bypasses the model)
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth flow file
        #[arg(long)]
        gt: Option<PathBuf>,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("SKFLOW_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        } else {
            eprintln!("ignoring SKFLOW_THREADS='{v}': not a number");
        }
    }
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn ratio_f64(r: num_rational::Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn cmd_bench_macs(cfg: &AppConfig, out: &Path) -> anyhow::Result<()> {
    let n = 1;
    let size = cfg.data.size;
    let (eh, ew) = (size / 8, size / 8);
    let c = cfg.net.hidden_dim;
    let bcfg = cfg.net.block.at(c, c);

    let block_rep = block::sk_mac_report(&bcfg, eh, ew, n, "block")?;
    let measured = block::sk_measured_ratio(&bcfg, eh, ew, n)?;
    let symbolic = cost_ratio(bcfg.l, bcfg.s, bcfg.alpha, bcfg.c_in, bcfg.c_out)?;

    let mut text = String::new();
    text.push_str(&format!("Block ({c} -> {c} channels, {eh}x{ew} plane):\n"));
    text.push_str(&block_rep.to_text_table());
    text.push_str(&format!(
        "\ncost vs dense {l}x{l} conv:\n  symbolic  {sym} = {symf:.6}\n  counted   {cnt} = {cntf:.6}\n  exact match: {eq}\n",
        l = bcfg.l,
        sym = symbolic,
        symf = ratio_f64(symbolic),
        cnt = measured,
        cntf = ratio_f64(measured),
        eq = symbolic == measured,
    ));

    let net_rep = net_mac_report(&cfg.net, size, size, n)?;
    text.push_str(&format!("\nFull network on a {size}x{size} frame pair:\n"));
    text.push_str(&net_rep.to_text_table());

    print!("{text}");
    write(&out.join("bench_macs.txt"), &text)?;
    write(&out.join("block_macs.csv"), &block_rep.to_csv())?;
    write(&out.join("network_macs.csv"), &net_rep.to_csv())?;
    if symbolic != measured {
        bail!("symbolic and counted cost ratios disagree: {symbolic} vs {measured}");
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &AppConfig, seed: u64, out: &Path) -> anyhow::Result<()> {
    if cfg.net.precision == Precision::F32 {
        bail!("finite-difference verification needs 64-bit precision; rerun with network.precision=f64");
    }
    let results = gradcheck::standard_suite(seed)?;
    let mut text = String::new();
    let mut failures = 0usize;
    for r in &results {
        let line = format!("{r}\n");
        print!("{line}");
        text.push_str(&line);
        if !r.pass {
            failures += 1;
        }
    }
    text.push_str(&format!("\n{} checks, {} failed\n", results.len(), failures));
    println!("\n{} checks, {} failed", results.len(), failures);
    write(&out.join("gradcheck.txt"), &text)?;
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}

fn gen_train_sample(seed: u64, step: u64, data: &GenConfig) -> SkResult<FlowSample> {
    data::gen_stream_sample(seed, step, data)
}

fn val_sample(seed: u64, i: u64, data: &GenConfig) -> SkResult<FlowSample> {
    // disjoint stream from training batches, always on unseen scenes
    let held_out = GenConfig { texture_pool: 0, ..*data };
    data::gen_stream_sample(seed ^ 0x5eed_0fa1_c0de_7e57, i, &held_out)
}

fn predict(net: &SkFlowNet, s: &FlowSample) -> SkResult<FlowField> {
    let flow = net.infer(&s.img1, &s.img2, net.cfg.iters_eval)?;
    FlowField::from_tensor(&flow, 0, Resolution::Full)
}

fn validation_epe(net: &SkFlowNet, seed: u64, data: &GenConfig, samples: usize) -> anyhow::Result<f64> {
    let mut total = 0.0;
    for i in 0..samples {
        let s = val_sample(seed, i as u64, data)?;
        let pred = predict(net, &s)?;
        total += metrics::epe(&pred, &s.gt_flow, metrics::PixelMask::All)?;
    }
    Ok(total / samples as f64)
}

fn cmd_train_toy(cfg: &AppConfig, seed: u64, out: &Path) -> anyhow::Result<()> {
    let mut net = SkFlowNet::new(cfg.net, seed)?;
    println!(
        "training: {} parameters, {} steps, {}x{} samples",
        net.params.num_params(),
        cfg.train.steps,
        cfg.data.size,
        cfg.data.size
    );
    let data_cfg = cfg.data;
    let mut csv = String::from("step,lr,loss,grad_norm\n");
    let logs: std::cell::RefCell<Vec<StepLog>> = std::cell::RefCell::new(Vec::new());
    let summary = optim::train_loop(
        &mut net,
        &cfg.train,
        |step| {
            let s = gen_train_sample(seed, step as u64, &data_cfg)?;
            let gt = s.gt_flow.to_tensor();
            Ok((s.img1, s.img2, gt))
        },
        |l| {
            println!("step {:5}  lr {:.2e}  loss {:.5}  |g| {:.3e}", l.step, l.lr, l.loss, l.grad_norm);
            logs.borrow_mut().push(*l);
        },
    )?;
    for l in logs.borrow().iter() {
        csv.push_str(&format!("{},{:.8e},{:.8e},{:.8e}\n", l.step, l.lr, l.loss, l.grad_norm));
    }
    write(&out.join("train_log.csv"), &csv)?;
    let pts: Vec<(f64, f64)> = logs.borrow().iter().map(|l| (l.step as f64, l.loss)).collect();
    viz::save_chart(&[Series { name: "train_loss", points: &pts }], 640, 480, &out.join("loss.png"))?;

    let ckpt = out.join("model.skfc");
    net.params.save(&ckpt)?;
    println!("checkpoint: {} (final loss {:.5})", ckpt.display(), summary.final_loss);

    let epe = validation_epe(&net, seed, &data_cfg, cfg.eval.samples)?;
    write(&out.join("validation.csv"), &format!("samples,mean_epe\n{},{:.6}\n", cfg.eval.samples, epe))?;
    println!("validation mean end-point error over {} samples: {:.4} px", cfg.eval.samples, epe);
    Ok(())
}

fn load_model(cfg: &AppConfig, seed: u64, checkpoint: &Path) -> anyhow::Result<SkFlowNet> {
    let mut net = SkFlowNet::new(cfg.net, seed)?;
    let stored = ParamStore::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    net.params.adopt(&stored)?;
    Ok(net)
}

fn cmd_eval(cfg: &AppConfig, seed: u64, out: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let net = load_model(cfg, seed, checkpoint)?;
    let rule = cfg.eval.outlier_rule;
    let reports: Vec<(String, EvalReport)> = (0..cfg.eval.samples)
        .into_par_iter()
        .map(|i| -> SkResult<(String, EvalReport)> {
            let s = val_sample(seed, i as u64, &cfg.data)?;
            let pred = predict(&net, &s)?;
            let r = metrics::split_eval(&pred, &s.gt_flow, &s.occ, rule)?;
            Ok((format!("sample_{i:03}"), r))
        })
        .collect::<SkResult<Vec<_>>>()?;

    let mut csv = format!("{}\n", metrics::CSV_HEADER);
    for (id, r) in &reports {
        csv.push_str(&metrics::csv_row(id, r));
        csv.push('\n');
    }
    let agg = metrics::aggregate(&reports.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    csv.push_str(&metrics::csv_row("aggregate", &agg));
    csv.push('\n');
    write(&out.join("metrics.csv"), &csv)?;
    println!(
        "{} samples: epe_all {:.4}, epe_occ {}, epe_noc {}, fl_all {:.2}%",
        reports.len(),
        agg.epe_all,
        agg.epe_occ.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        agg.epe_noc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        agg.fl_all
    );
    Ok(())
}

fn render_pair(pred: &FlowField, gt: &FlowField, dir: &Path, stem: &str) -> anyhow::Result<f64> {
    let max = gt.max_magnitude().max(pred.max_magnitude());
    data::save_image(&data::flow_to_color(pred, Some(max)), &dir.join(format!("{stem}_pred.png")))?;
    data::save_image(&data::flow_to_color(gt, Some(max)), &dir.join(format!("{stem}_gt.png")))?;
    data::save_image(&viz::epe_heatmap(pred, gt, None)?, &dir.join(format!("{stem}_error.png")))?;
    Ok(metrics::epe(pred, gt, metrics::PixelMask::All)?)
}

fn cmd_viz(
    cfg: &AppConfig,
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
    pred: Option<&Path>,
    gt: Option<&Path>,
) -> anyhow::Result<()> {
    match (checkpoint, pred, gt) {
        (None, Some(p), Some(g)) => {
            let pf = data::read_flo(p)?;
            let gf = data::read_flo(g)?;
            let epe = render_pair(&pf, &gf, out, "flo")?;
            println!("end-point error {epe:.4} px; images in {}", out.display());
        }
        (Some(ck), None, None) => {
            let net = load_model(cfg, seed, ck)?;
            for i in 0..cfg.eval.samples {
                let s = val_sample(seed, i as u64, &cfg.data)?;
                let p = predict(&net, &s)?;
                let epe = render_pair(&p, &s.gt_flow, out, &format!("sample_{i:03}"))?;
                println!("sample_{i:03}: end-point error {epe:.4} px");
            }
        }
        _ => bail!("viz needs either --checkpoint, or both --pred and --gt"),
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    init_threads();
    let cli = Cli::parse();
    let cfg = config::load(cli.config.as_deref(), &cli.set)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    config::write_run_manifest(&cli.out, &cfg, cli.seed)?;
    match &cli.cmd {
        Cmd::BenchMacs => cmd_bench_macs(&cfg, &cli.out),
        Cmd::Gradcheck => cmd_gradcheck(&cfg, cli.seed, &cli.out),
        Cmd::TrainToy => cmd_train_toy(&cfg, cli.seed, &cli.out),
        Cmd::Eval { checkpoint } => cmd_eval(&cfg, cli.seed, &cli.out, checkpoint),
        Cmd::Viz { checkpoint, pred, gt } => {
            cmd_viz(&cfg, cli.seed, &cli.out, checkpoint.as_deref(), pred.as_deref(), gt.as_deref())
        }
    }
}
