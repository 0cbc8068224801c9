//! Command-line surface: train, transmit, adapt, sweep, bdrate, diag.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapt::{self, MultiDistortionWeights, Objective, OperatingPoint, RoiFactors, RoiSpec};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{Dataset, EVAL_MULTIPLE};
use crate::eval::{self, BdMethod, DiagModel, Probe, RDCurve};
use crate::image::ImageTensor;
use crate::jscc::{serialize_rate_map, SymbolStream};
use crate::model::{ForwardOptions, NtsccModel};
use crate::training::{self, MetricsLog, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "ntscc",
    version,
    about = "Contextual, versatile, online-adaptive NTSCC image transmission"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command; each overrides the matching config field.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true, env = "NTSCC_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "NTSCC_SEED")]
    pub seed: Option<u64>,
    /// Source quality indicator (Lagrangian λ).
    #[arg(long, global = true, env = "NTSCC_LAMBDA")]
    pub lambda: Option<f64>,
    /// Bandwidth scaling factor η.
    #[arg(long, global = true, env = "NTSCC_ETA")]
    pub eta: Option<f64>,
    /// Channel quality indicator ν in dB.
    #[arg(
        long = "snr-db",
        global = true,
        env = "NTSCC_SNR_DB",
        allow_hyphen_values = true
    )]
    pub snr_db: Option<f64>,
    #[arg(long, global = true, env = "NTSCC_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "NTSCC_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model (base stage, or versatile finetune from --init).
    Train(TrainArgs),
    /// One end-to-end transmission of an image.
    Transmit(TransmitArgs),
    /// Per-image online adaptation before transmission.
    Adapt(AdaptArgs),
    /// Rate-SNR-distortion sweep over a dataset.
    Sweep(SweepArgs),
    /// BD-rate between two RD curves stored as CSV.
    Bdrate(BdrateArgs),
    /// Cosine-similarity matrix between checkpoints.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue an interrupted run from its checkpoint.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Versatile finetune starting from a base checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Iteration budget (overrides train.iterations).
    #[arg(long, env = "NTSCC_STEPS")]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TransmitArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdaptMode {
    Standard,
    Roi,
    Md,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    pub mode: AdaptMode,
    /// 8-bit grayscale quality map aligned with the image (roi mode).
    #[arg(long = "roi-map")]
    pub roi_map: Option<PathBuf>,
    /// Use the map values directly as distortion weights with a single η,
    /// instead of the inside/outside factor blend.
    #[arg(long)]
    pub roi_direct: bool,
    #[arg(long, default_value_t = RoiFactors::reference().eta_in)]
    pub eta_in: f64,
    #[arg(long, default_value_t = RoiFactors::reference().eta_out)]
    pub eta_out: f64,
    #[arg(long, default_value_t = RoiFactors::reference().weight_in)]
    pub weight_in: f64,
    #[arg(long, default_value_t = RoiFactors::reference().weight_out)]
    pub weight_out: f64,
    /// MSE weight (md mode).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_o: f64,
    /// Structural-distortion weight (md mode).
    #[arg(long, default_value_t = 0.0)]
    pub lambda_s: f64,
    /// Update budget T_max (overrides adapt.steps).
    #[arg(long, env = "NTSCC_STEPS")]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image directory (default: data.eval_dir or the synthetic corpus).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// λ values (default: the model's λ grid).
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Test SNRs in dB.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "0,4,10"
    )]
    pub snrs: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct BdrateArgs {
    /// Anchor curve CSV (columns rho/psnr_db or mean_rho/mean_psnr_db).
    #[arg(long)]
    pub anchor: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, default_value = "cubic")]
    pub method: BdMethodArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BdMethodArg {
    Cubic,
    Pchip,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "latent")]
    pub probe: ProbeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Latent,
    Codeword,
}

/// Config file (or defaults), then flag/environment overrides.
pub fn resolve_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.lambda {
        cfg.rate.lambda = v;
    }
    if let Some(v) = c.eta {
        cfg.rate.eta = v;
    }
    if let Some(v) = c.snr_db {
        cfg.rate.snr_db = v;
    }
    if let Some(v) = c.workers {
        cfg.workers = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Train(a) => cmd_train(&mut cfg, &a),
        Command::Transmit(a) => cmd_transmit(&cfg, &a),
        Command::Adapt(a) => cmd_adapt(&mut cfg, &a),
        Command::Sweep(a) => cmd_sweep(&cfg, &a),
        Command::Bdrate(a) => cmd_bdrate(&a),
        Command::Diag(a) => cmd_diag(&cfg, &a),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(p: &Path) -> anyhow::Result<(Checkpoint, NtsccModel)> {
    let ck = checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    let model = NtsccModel::new(&ck.store, &ck.arch)?;
    Ok((ck, model))
}

fn load_image(p: &Path) -> anyhow::Result<ImageTensor> {
    let im = ImageTensor::load(p).with_context(|| format!("loading image {}", p.display()))?;
    Ok(im.center_crop_to_multiple(EVAL_MULTIPLE)?)
}

fn eval_data(cfg: &RunConfig, dir: &Option<PathBuf>) -> anyhow::Result<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::from_dir(d)?.eval_cropped(EVAL_MULTIPLE)?,
        None => cfg.data.eval_set()?,
    })
}

pub fn cmd_train(cfg: &mut RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    if let Some(s) = a.steps {
        cfg.train.iterations = s;
    }
    let data = cfg.data.train_set()?;
    let out = cfg.out_dir.clone();
    cfg.embed(&out)?;
    let ckpt = out.join("checkpoint.safetensors");
    let mut log = MetricsLog::open(out.join("metrics.csv"))?;
    let trainer = if let Some(r) = &a.resume {
        let mut t = Trainer::resume(r, cfg.train.clone(), cfg.channel.clone())?;
        t.run(&data, Some(&mut log), Some(&ckpt))?;
        t
    } else if let Some(init) = &a.init {
        let base = checkpoint::load(init)?;
        training::train_versatile(
            base,
            cfg.train.clone(),
            cfg.channel.clone(),
            &data,
            Some(&mut log),
            Some(&ckpt),
        )?
    } else {
        let mut t = Trainer::new(
            cfg.arch.clone(),
            cfg.train.clone(),
            cfg.channel.clone(),
            cfg.seed,
        )?;
        t.run(&data, Some(&mut log), Some(&ckpt))?;
        t
    };
    println!(
        "trained to iteration {} -> {}",
        trainer.state.iteration,
        ckpt.display()
    );
    Ok(())
}

pub fn cmd_transmit(cfg: &RunConfig, a: &TransmitArgs) -> anyhow::Result<()> {
    let (ck, model) = load_checkpoint(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    let r = &cfg.rate;
    let (out, opts) = eval::transmit(
        &model,
        &img,
        r.lambda,
        r.eta,
        r.snr_db,
        &cfg.channel,
        cfg.seed,
    )?;
    let dir = &cfg.out_dir;
    cfg.embed(dir)?;
    ImageTensor::from_tensor(&out.x_hat.clamp(0.0, 1.0)?)?
        .save_png(dir.join("reconstruction.png"))?;
    let side = serialize_rate_map(&out.maps[0])?;
    std::fs::write(dir.join("rate_map.png"), &side.png)?;
    let stream = SymbolStream {
        q: ck.arch.rate_bits,
        data: out.streams[0].clone(),
    };
    std::fs::write(dir.join("stream.bin"), stream.to_bytes())?;
    let point = eval::rd_point(&image_id(&a.image), &img, &out, &opts, r.eta)?;
    write_json(&dir.join("rd_point.json"), &point)?;
    println!(
        "rho {:.6}  psnr {:.3} dB  side-info {:.2}%",
        point.rho,
        point.psnr_db,
        100.0 * point.sideinfo_frac
    );
    Ok(())
}

fn image_id(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn cmd_adapt(cfg: &mut RunConfig, a: &AdaptArgs) -> anyhow::Result<()> {
    if let Some(s) = a.steps {
        cfg.adapt.steps = s;
    }
    let objective = match a.mode {
        AdaptMode::Standard => Objective::Standard,
        AdaptMode::Roi => {
            let Some(map) = &a.roi_map else {
                bail!("--mode roi requires --roi-map");
            };
            let (m, h, w) = RoiSpec::load_map(map)?;
            let (h0, w0) = (h - h % EVAL_MULTIPLE, w - w % EVAL_MULTIPLE);
            let mm = ImageTensor::new(h, w, m.iter().flat_map(|&v| [v, v, v]).collect())?
                .center_crop_to_multiple(EVAL_MULTIPLE)?;
            let m: Vec<f32> = mm.pixels().iter().step_by(3).copied().collect();
            Objective::Roi(if a.roi_direct {
                RoiSpec::from_map(m, h0, w0, cfg.rate.eta)?
            } else {
                RoiSpec::with_factors(
                    &m,
                    h0,
                    w0,
                    &RoiFactors {
                        eta_in: a.eta_in,
                        eta_out: a.eta_out,
                        weight_in: a.weight_in,
                        weight_out: a.weight_out,
                    },
                )?
            })
        }
        AdaptMode::Md => Objective::MultiDistortion(MultiDistortionWeights {
            lambda_o: a.lambda_o,
            lambda_s: a.lambda_s,
        }),
    };
    let (ck, model) = load_checkpoint(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    let mut op = OperatingPoint::new(cfg.rate.lambda, cfg.rate.eta, cfg.rate.snr_db);
    op.channel = cfg.channel.clone();
    let mut acfg = cfg.adapt.clone();
    acfg.eval_seed = cfg.seed;
    let res = adapt::adapt(&ck.store, &model, &img, &objective, &op, &acfg)?;
    let dir = &cfg.out_dir;
    cfg.embed(dir)?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["step", "loss", "rate", "distortion", "symbols"])?;
    for (i, s) in res.trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.loss.to_string(),
            s.rate.to_string(),
            s.distortion.to_string(),
            s.symbols.to_string(),
        ])?;
    }
    w.flush()?;
    ImageTensor::from_tensor(&res.output.x_hat.clamp(0.0, 1.0)?)?
        .save_png(dir.join("reconstruction.png"))?;
    let mut opts = ForwardOptions::inference(op.lambda, op.eta, op.snr_db);
    opts.channel = op.channel.clone();
    let point = eval::rd_point(&image_id(&a.image), &img, &res.output, &opts, op.eta)?;
    write_json(&dir.join("rd_point.json"), &point)?;
    println!(
        "selected step {} of {}: loss {:.4} -> {:.4}; rho {:.6} psnr {:.3} dB",
        res.selected,
        res.trace.len() - 1,
        res.trace[0].loss,
        res.selected_step().loss,
        point.rho,
        point.psnr_db
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, a: &SweepArgs) -> anyhow::Result<()> {
    let (ck, model) = load_checkpoint(&a.checkpoint)?;
    let data = eval_data(cfg, &a.data)?;
    let lambdas = if a.lambdas.is_empty() {
        ck.arch.lambda_grid.clone()
    } else {
        a.lambdas.clone()
    };
    let surf = eval::rd_sweep(
        &model,
        &data,
        &lambdas,
        &a.snrs,
        cfg.rate.eta,
        &cfg.channel,
        cfg.seed,
        cfg.workers,
    )?;
    cfg.embed(&cfg.out_dir)?;
    surf.write_csv(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("surface.svg"), surf.to_svg())?;
    for c in &surf.cells {
        println!(
            "lambda {:<8} snr {:>5} dB  rho {:.6}  psnr {:.3} dB",
            c.lambda, c.snr_db, c.mean_rho, c.mean_psnr_db
        );
    }
    Ok(())
}

/// Reads an RD curve from CSV with rho/psnr_db (or mean_* variants) columns.
pub fn read_curve(path: &Path) -> anyhow::Result<RDCurve> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.contains(&h.trim()))
            .with_context(|| format!("{}: missing column {}", path.display(), names.join("/")))
    };
    let (ri, qi) = (
        col(&["rho", "mean_rho"])?,
        col(&["psnr_db", "mean_psnr_db"])?,
    );
    let mut pts = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        pts.push((
            rec[ri].trim().parse::<f64>()?,
            rec[qi].trim().parse::<f64>()?,
        ));
    }
    Ok(RDCurve::new(pts)?)
}

pub fn cmd_bdrate(a: &BdrateArgs) -> anyhow::Result<()> {
    let method = match a.method {
        BdMethodArg::Cubic => BdMethod::Cubic,
        BdMethodArg::Pchip => BdMethod::Pchip,
    };
    let bd = eval::bd_rate(&read_curve(&a.anchor)?, &read_curve(&a.test)?, method)?;
    println!("BD-rate {bd:+.3}%");
    Ok(())
}

pub fn cmd_diag(cfg: &RunConfig, a: &DiagArgs) -> anyhow::Result<()> {
    let loaded = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let data = eval_data(cfg, &a.data)?;
    let models: Vec<DiagModel<'_>> = loaded
        .iter()
        .map(|(_, m)| DiagModel {
            model: m,
            lambda: cfg.rate.lambda,
            eta: cfg.rate.eta,
            snr_db: cfg.rate.snr_db,
        })
        .collect();
    let probe = match a.probe {
        ProbeArg::Latent => Probe::Latent,
        ProbeArg::Codeword => Probe::Codeword,
    };
    let s = eval::cosine_similarity_diag(&models, &data, probe, cfg.seed)?;
    cfg.embed(&cfg.out_dir)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("similarity.csv"))?;
    for row in &s {
        w.write_record(row.iter().map(|v| format!("{v:.6}")))?;
        println!(
            "{}",
            row.iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
    w.flush()?;
    Ok(())
}
