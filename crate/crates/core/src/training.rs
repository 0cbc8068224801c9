//! Rate-distortion objective, hyper-parameter sampling and the training
//! loop (base and versatile schedules).

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::checkpoint::{self, TrainState};
use crate::dataset::Dataset;
use crate::entropy;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::{Eta, ForwardOptions, ForwardOutput, NtsccModel};
use crate::params::ParamStore;
use crate::transform::ArchConfig;

/// Distortion weight applied to MSE on [0, 1] pixels so that the published
/// λ grid is in the 8-bit MSE units it was designed for.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    All,
    /// Only the rate and SNR scaling tables and FCNs.
    ScalingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Leading iterations trained as a plain neural codec (no channel), to
    /// warm up the transforms and entropy model before the JSCC is attached.
    pub pretrain_iterations: u64,
    pub batch_size: usize,
    pub crop: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Fraction of the run after which the learning rate drops to `lr_final`.
    pub lr_drop_at: f64,
    pub snr_range_db: [f64; 2],
    pub eta_range: [f64; 2],
    /// Fixed SQI; `None` samples uniformly from the architecture's λ grid.
    pub lambda: Option<f64>,
    pub eta: Option<f64>,
    pub snr_db: Option<f64>,
    pub ste_rate_mask: bool,
    pub anchor_sim: usize,
    pub context_from_simulated: bool,
    pub grad_clip: Option<f64>,
    pub trainable: Trainable,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            pretrain_iterations: 0,
            batch_size: 8,
            crop: 48,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_drop_at: 0.9,
            snr_range_db: [0.0, 14.0],
            eta_range: [0.15, 0.3],
            lambda: None,
            eta: None,
            snr_db: None,
            ste_rate_mask: true,
            anchor_sim: 1,
            context_from_simulated: true,
            grad_clip: Some(1.0),
            trainable: Trainable::All,
            log_every: 100,
            checkpoint_every: 2_000,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule (256px crops, 610k iterations).
    pub fn full() -> Self {
        TrainConfig {
            iterations: 610_000,
            crop: 256,
            grad_clip: None,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.crop == 0 || self.crop % 16 != 0 {
            return bad("batch_size must be positive and crop a positive multiple of 16");
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.snr_range_db[0] > self.snr_range_db[1] || self.eta_range[0] > self.eta_range[1] {
            return bad("ranges must be ordered");
        }
        if self.eta_range[0] <= 0.0 {
            return bad("eta must be positive");
        }
        if self.anchor_sim == 0 {
            return bad("anchor_sim must be >= 1");
        }
        if self.pretrain_iterations > self.iterations {
            return bad("pretrain_iterations exceeds iterations");
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if (iteration as f64) < self.lr_drop_at * self.iterations as f64 {
            self.lr
        } else {
            self.lr_final
        }
    }
}

/// One (λ, η, ν) training operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HParams {
    pub lambda: f64,
    pub eta: f64,
    pub snr_db: f64,
}

/// λ uniform over the grid, η and ν uniform on their ranges (unless fixed).
pub fn sample_hparams<R: Rng>(rng: &mut R, cfg: &TrainConfig, lambda_grid: &[f64]) -> HParams {
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => lambda_grid[rng.random_range(0..lambda_grid.len())],
    };
    let eta = match cfg.eta {
        Some(e) => e,
        None => uniform(rng, cfg.eta_range),
    };
    let snr_db = match cfg.snr_db {
        Some(s) => s,
        None => uniform(rng, cfg.snr_range_db),
    };
    HParams {
        lambda,
        eta,
        snr_db,
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Loss and its parts, as graph tensors (scalars).
pub struct RdTerms {
    pub loss: Tensor,
    /// Channel-symbol budget per pixel (η-weighted bits / pixels).
    pub rate: Tensor,
    /// Weighted MSE on [0, 1] pixels.
    pub distortion: Tensor,
}

/// η·(total bits)/pixels + λ·255²·MSE from raw likelihoods.
pub fn rd_loss(
    x: &Tensor,
    x_hat: &Tensor,
    likelihoods: &Tensor,
    lambda: f64,
    eta: f64,
) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let bits = entropy::position_bits(likelihoods)?.sum_all()?;
    let rate = (bits * (eta / (b * h * w) as f64))?;
    let mse = (x_hat - x)?.sqr()?.mean_all()?;
    Ok((rate + (mse * (lambda * MSE_SCALE))?)?)
}

/// Per-pixel distortion weights (B or 1, 1, H, W), e.g. an ROI quality map.
pub fn weighted_mse(x: &Tensor, x_hat: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    let se = (x_hat - x)?.sqr()?;
    match weights {
        Some(wt) => Ok(se.broadcast_mul(wt)?.mean_all()?),
        None => Ok(se.mean_all()?),
    }
}

/// RD terms of a model output. The rate term is the sum of the unquantized
/// per-position budgets k = η·bits that drive the rate allocation.
pub fn rd_terms(
    x: &Tensor,
    out: &ForwardOutput,
    lambda: f64,
    eta_z: f64,
    weights: Option<&Tensor>,
) -> Result<RdTerms> {
    let (b, _, h, w) = x.dims4()?;
    let pixels = (b * h * w) as f64;
    let mut symbols = out.k.sum_all()?;
    if let Some(zb) = &out.z_bits {
        symbols = (symbols + (zb.sum_all()? * eta_z)?)?;
    }
    let rate = (symbols / pixels)?;
    let distortion = weighted_mse(x, &out.x_hat, weights)?;
    let loss = (&rate + (&distortion * (lambda * MSE_SCALE))?)?;
    Ok(RdTerms {
        loss,
        rate,
        distortion,
    })
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss: f64,
    /// Entropy of the latents in bits per pixel (before η).
    pub rate_bits: f64,
    pub mse: f64,
    pub hparams: HParams,
}

/// Append-only CSV: iteration, loss, rate_bits, mse, lambda, eta, snr_db.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let exists = path.exists()
            && std::fs::metadata(path)
                .map(|m| m.len() > 0)
                .unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !exists {
            writer.write_record([
                "iteration",
                "loss",
                "rate_bits",
                "mse",
                "lambda",
                "eta",
                "snr_db",
            ])?;
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(MetricsLog { writer })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.write_record([
            m.iteration.to_string(),
            m.loss.to_string(),
            m.rate_bits.to_string(),
            m.mse.to_string(),
            m.hparams.lambda.to_string(),
            m.hparams.eta.to_string(),
            m.hparams.snr_db.to_string(),
        ])?;
        self.writer
            .flush()
            .map_err(|e| Error::io(PathBuf::from("metrics log"), e))
    }
}

pub struct Trainer {
    pub store: ParamStore,
    pub model: NtsccModel,
    pub arch: ArchConfig,
    pub cfg: TrainConfig,
    pub channel: ChannelConfig,
    pub state: TrainState,
    vars: Vec<Var>,
    opt: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model initialized from `seed`.
    pub fn new(
        arch: ArchConfig,
        cfg: TrainConfig,
        channel: ChannelConfig,
        seed: u64,
    ) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32);
        let state = TrainState {
            iteration: 0,
            seed,
            stage: "base".into(),
        };
        Trainer::from_store(store, arch, cfg, channel, state)
    }

    /// Continues from existing parameters (resume or finetune).
    pub fn from_store(
        store: ParamStore,
        arch: ArchConfig,
        cfg: TrainConfig,
        channel: ChannelConfig,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        channel.validate()?;
        let model = NtsccModel::new(&store, &arch)?;
        let vars = match cfg.trainable {
            Trainable::All => store.all_vars(),
            Trainable::ScalingOnly => store.vars_with_prefixes(&["rate.", "jscc.snr."]),
        };
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr_at(state.iteration),
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        // the data/hyper-parameter stream depends on where the run resumes
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.iteration);
        Ok(Trainer {
            store,
            model,
            arch,
            cfg,
            channel,
            state,
            vars,
            opt,
            rng,
        })
    }

    pub fn resume(
        path: impl AsRef<Path>,
        cfg: TrainConfig,
        channel: ChannelConfig,
    ) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        Trainer::from_store(ck.store, ck.arch, cfg, channel, ck.state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.store, &self.arch, &self.state)
    }

    pub fn options(&self, hp: &HParams) -> ForwardOptions {
        let mut o = ForwardOptions::training(hp.lambda, hp.eta, hp.snr_db);
        o.channel = self.channel.clone();
        o.ste_rate_mask = self.cfg.ste_rate_mask;
        o.anchor_sim = self.cfg.anchor_sim;
        o.context_from_simulated = self.cfg.context_from_simulated;
        o
    }

    /// One optimizer step on a batch of equally sized crops.
    pub fn step(&mut self, batch: &[ImageTensor]) -> Result<StepMetrics> {
        let hp = sample_hparams(&mut self.rng, &self.cfg, &self.arch.lambda_grid);
        let noise_seed: u64 = self.rng.random();
        let x = ImageTensor::batch_to_tensor(batch, DType::F32)?;
        let (b, _, h, w) = x.dims4()?;
        let (terms, bits) = if self.state.iteration < self.cfg.pretrain_iterations {
            let (x_hat, bits, z_bits) = self.model.ntc_forward(&x, hp.lambda, noise_seed)?;
            let mut total = bits.sum_all()?;
            if let Some(zb) = z_bits {
                total = (total + zb.sum_all()?)?;
            }
            let rate = ((total * hp.eta)? / (b * h * w) as f64)?;
            let distortion = weighted_mse(&x, &x_hat, None)?;
            let loss = (&rate + (&distortion * (hp.lambda * MSE_SCALE))?)?;
            (
                RdTerms {
                    loss,
                    rate,
                    distortion,
                },
                bits,
            )
        } else {
            let opts = self.options(&hp);
            let out = self.model.forward(&x, &opts, noise_seed)?;
            (
                rd_terms(&x, &out, hp.lambda, hp.eta, None)?,
                out.position_bits,
            )
        };
        let loss = scalar_f64(&terms.loss)?;
        let mse = scalar_f64(&terms.distortion)?;
        let rate_bits = scalar_f64(&bits.sum_all()?)? / (b * h * w) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.state.iteration as usize,
                detail: format!("loss {loss}, mse {mse}, rate {rate_bits} at {hp:?}"),
            });
        }
        let mut grads = terms.loss.backward()?;
        if let Some(max) = self.cfg.grad_clip {
            clip_gradients(&mut grads, &self.vars, max)?;
        }
        self.opt
            .set_learning_rate(self.cfg.lr_at(self.state.iteration));
        self.opt.step(&grads)?;
        self.state.iteration += 1;
        Ok(StepMetrics {
            iteration: self.state.iteration,
            loss,
            rate_bits,
            mse,
            hparams: hp,
        })
    }

    /// Runs until `cfg.iterations`, logging and checkpointing along the way.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut log: Option<&mut MetricsLog>,
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while self.state.iteration < self.cfg.iterations {
            let batch = data.random_crops(self.cfg.batch_size, self.cfg.crop, &mut self.rng)?;
            let m = self.step(&batch)?;
            if let Some(l) = log.as_deref_mut() {
                if m.iteration % self.cfg.log_every.max(1) == 0 || m.iteration == 1 {
                    l.append(&m)?;
                }
            }
            if m.iteration % self.cfg.log_every.max(1) == 0 {
                log::info!(
                    "iter {} loss {:.4} bits/px {:.4} mse {:.5}",
                    m.iteration,
                    m.loss,
                    m.rate_bits,
                    m.mse
                );
            }
            if let Some(p) = checkpoint_path {
                if m.iteration % self.cfg.checkpoint_every.max(1) == 0 {
                    self.save(p)?;
                }
            }
            history.push(m);
        }
        if let Some(p) = checkpoint_path {
            self.save(p)?;
        }
        Ok(history)
    }
}

/// Versatile finetuning: continue a base model with λ, η and ν all sampled.
pub fn train_versatile(
    base: checkpoint::Checkpoint,
    mut cfg: TrainConfig,
    channel: ChannelConfig,
    data: &Dataset,
    log: Option<&mut MetricsLog>,
    out: Option<&Path>,
) -> Result<Trainer> {
    cfg.lambda = None;
    cfg.eta = None;
    cfg.snr_db = None;
    let mut state = base.state;
    state.stage = "versatile".into();
    // the finetune budget counts from the base checkpoint's iteration
    cfg.iterations += state.iteration;
    let mut t = Trainer::from_store(base.store, base.arch, cfg, channel, state)?;
    t.run(data, log, out)?;
    Ok(t)
}

/// Rescales gradients so that their global L2 norm is at most `max`.
pub fn clip_gradients(
    grads: &mut candle_core::backprop::GradStore,
    vars: &[Var],
    max: f64,
) -> Result<f64> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar_f64(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if norm > max && norm.is_finite() {
        let s = max / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * s)?);
            }
        }
    }
    Ok(norm)
}

/// Mean RD loss of a model over a fixed validation set at one operating point.
pub fn validation_loss(
    model: &NtsccModel,
    images: &[ImageTensor],
    hp: &HParams,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, im) in images.iter().enumerate() {
        let x = im.to_tensor(model.dtype())?;
        let mut o = ForwardOptions::inference(hp.lambda, hp.eta, hp.snr_db);
        o.channel = channel.clone();
        o.eta = Eta::Uniform(hp.eta);
        let out = model.forward(&x, &o, seed.wrapping_add(i as u64))?;
        let t = rd_terms(&x, &out, hp.lambda, hp.eta, None)?;
        total += scalar_f64(&t.loss)?;
    }
    Ok(total / images.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn rd_loss_examples() {
        let x = Tensor::full(0.5f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 4, 1, 1), DType::F32, &Device::Cpu).unwrap();
        let l = scalar_f64(&rd_loss(&x, &x, &ones, 0.72, 0.2).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        let half = (ones.clone() * 0.5).unwrap();
        let xh = (x.clone() + 0.1).unwrap();
        let pure_rate = scalar_f64(&rd_loss(&x, &xh, &half, 0.0, 0.2).unwrap()).unwrap();
        assert!((pure_rate - 0.2 * 4.0 / 256.0).abs() < 1e-7);
        let both = scalar_f64(&rd_loss(&x, &xh, &half, 0.01, 0.2).unwrap()).unwrap();
        assert!((both - pure_rate - 0.01 * MSE_SCALE * 0.01).abs() < 1e-3);
    }

    #[test]
    fn hparam_sampling() {
        let cfg = TrainConfig::default();
        let grid = crate::transform::LAMBDA_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let hp = sample_hparams(&mut rng, &cfg, &grid);
            let i = grid
                .iter()
                .position(|&g| g == hp.lambda)
                .expect("lambda on grid");
            counts[i] += 1;
            assert!((0.15..0.3).contains(&hp.eta));
            assert!((0.0..14.0).contains(&hp.snr_db));
        }
        assert!(
            counts.iter().all(|&c| (1800..2200).contains(&c)),
            "{counts:?}"
        );
        let a = sample_hparams(&mut ChaCha8Rng::seed_from_u64(1), &cfg, &grid);
        let b = sample_hparams(&mut ChaCha8Rng::seed_from_u64(1), &cfg, &grid);
        assert_eq!(a, b);
    }

    #[test]
    fn lr_schedule_and_validation() {
        let cfg = TrainConfig {
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(95), 1e-5);
        let bad = TrainConfig {
            crop: 50,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn training_steps_are_finite_and_reproducible() {
        let cfg = TrainConfig {
            iterations: 2,
            batch_size: 2,
            crop: 32,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let data = Dataset::synthetic(4, 48, 48, 0);
        let run = || {
            let mut t =
                Trainer::new(ArchConfig::toy(), cfg.clone(), ChannelConfig::awgn(), 5).unwrap();
            t.run(&data, None, None).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a[0].loss.is_finite());
        assert_eq!(
            a.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn metrics_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = StepMetrics {
            iteration: 1,
            loss: 1.0,
            rate_bits: 0.5,
            mse: 0.01,
            hparams: HParams {
                lambda: 0.72,
                eta: 0.2,
                snr_db: 10.0,
            },
        };
        MetricsLog::open(&p).unwrap().append(&m).unwrap();
        MetricsLog::open(&p).unwrap().append(&m).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("iteration,loss,rate_bits,mse,lambda,eta,snr_db"));
    }
}
