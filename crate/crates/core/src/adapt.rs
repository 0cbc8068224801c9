//! Per-image online adaptation: gradient editing of the latents and of the
//! transmitter's JSCC encoder against an instant RD objective (standard,
//! region-of-interest, or mixed MSE / structural distortion).
//!
//! The receiver is never touched, so an adapted transmission decodes with
//! the unmodified model.

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::image::ImageTensor;
use crate::jscc::ENCODER_PREFIXES;
use crate::model::{Eta, ForwardOptions, ForwardOutput, NtsccModel};
use crate::nn;
use crate::params::ParamStore;
use crate::training::{rd_terms, RdTerms, MSE_SCALE};
use crate::transform::DOWNSAMPLING;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr_latent: f64,
    pub lr_encoder: f64,
    /// Channel realizations averaged per gradient estimate.
    pub channel_samples: usize,
    /// Seed of the fixed realization used to score iterates.
    pub eval_seed: u64,
    /// Channel realizations averaged by the transmitter's anchor simulation.
    pub anchor_sim: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 20,
            lr_latent: 5e-3,
            lr_encoder: 1e-4,
            channel_samples: 1,
            eval_seed: 0,
            anchor_sim: 4,
        }
    }
}

/// Where and how the transmission is evaluated.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub lambda: f64,
    pub eta: f64,
    pub snr_db: f64,
    pub channel: ChannelConfig,
}

impl OperatingPoint {
    pub fn new(lambda: f64, eta: f64, snr_db: f64) -> Self {
        OperatingPoint {
            lambda,
            eta,
            snr_db,
            channel: ChannelConfig::awgn(),
        }
    }
}

/// Region-of-interest specification: per-pixel distortion weights and
/// per-latent-position bandwidth factors.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSpec {
    pub height: usize,
    pub width: usize,
    /// Row-major (H·W) distortion weights.
    pub weights: Vec<f32>,
    /// Row-major (H/16 · W/16) bandwidth factors η_i.
    pub eta: Vec<f64>,
}

/// Factor configuration turning a [0, 1] quality map into weights and η_i:
/// inside (m = 1) and outside (m = 0) values, blended linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiFactors {
    pub eta_in: f64,
    pub eta_out: f64,
    pub weight_in: f64,
    pub weight_out: f64,
}

impl RoiFactors {
    /// η₁ = 0.25 with weight 1.25 inside, η₂ = 0.05 with weight 0.25 outside.
    pub fn reference() -> Self {
        RoiFactors {
            eta_in: 0.25,
            eta_out: 0.05,
            weight_in: 1.25,
            weight_out: 0.25,
        }
    }
}

fn check_map(m: &[f32], h: usize, w: usize) -> Result<()> {
    if m.len() != h * w {
        return Err(Error::DimensionMismatch(format!(
            "quality map has {} values, expected {h}x{w}",
            m.len()
        )));
    }
    if h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
        return Err(Error::DimensionMismatch(format!(
            "quality map {h}x{w} is not a multiple of {DOWNSAMPLING}"
        )));
    }
    if let Some(v) = m.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "quality map value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Mean of the map over each 16x16 block.
fn block_means(m: &[f32], h: usize, w: usize) -> Vec<f64> {
    let (lh, lw) = (h / DOWNSAMPLING, w / DOWNSAMPLING);
    let mut out = vec![0.0; lh * lw];
    for r in 0..h {
        for c in 0..w {
            out[(r / DOWNSAMPLING) * lw + c / DOWNSAMPLING] += m[r * w + c] as f64;
        }
    }
    let n = (DOWNSAMPLING * DOWNSAMPLING) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

impl RoiSpec {
    /// Quality map used directly as distortion weights, with a single η.
    pub fn from_map(m: Vec<f32>, h: usize, w: usize, eta: f64) -> Result<Self> {
        check_map(&m, h, w)?;
        if !(eta > 0.0) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        Ok(RoiSpec {
            height: h,
            width: w,
            eta: vec![eta; (h / DOWNSAMPLING) * (w / DOWNSAMPLING)],
            weights: m,
        })
    }

    /// Quality map blended between inside/outside factors; weights may
    /// exceed 1 even though the map itself is bounded.
    pub fn with_factors(m: &[f32], h: usize, w: usize, f: &RoiFactors) -> Result<Self> {
        check_map(m, h, w)?;
        if !(f.eta_in > 0.0 && f.eta_out > 0.0 && f.weight_in >= 0.0 && f.weight_out >= 0.0) {
            return Err(Error::InvalidArgument(
                "ROI factors must be positive".into(),
            ));
        }
        let weights = m
            .iter()
            .map(|&v| (v as f64 * f.weight_in + (1.0 - v as f64) * f.weight_out) as f32)
            .collect();
        let eta = block_means(m, h, w)
            .into_iter()
            .map(|b| b * f.eta_in + (1.0 - b) * f.eta_out)
            .collect();
        Ok(RoiSpec {
            height: h,
            width: w,
            weights,
            eta,
        })
    }

    /// Loads an 8-bit grayscale PNG (any PNG is converted to luma) as a [0, 1] map.
    pub fn load_map(path: impl AsRef<std::path::Path>) -> Result<(Vec<f32>, usize, usize)> {
        let img = ::image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        Ok((
            img.into_raw()
                .into_iter()
                .map(|v| v as f32 / 255.0)
                .collect(),
            h as usize,
            w as usize,
        ))
    }

    fn weight_tensor(&self, dtype: DType) -> Result<Tensor> {
        nn::tensor_from(
            self.weights.iter().map(|&v| v as f64).collect(),
            &[1, 1, self.height, self.width],
            dtype,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiDistortionWeights {
    pub lambda_o: f64,
    pub lambda_s: f64,
}

/// Instant objective minimized per image.
#[derive(Debug, Clone)]
pub enum Objective {
    Standard,
    Roi(RoiSpec),
    MultiDistortion(MultiDistortionWeights),
}

/// One scored iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptStep {
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    /// Σ k̄ of the scored transmission.
    pub symbols: u64,
}

pub struct AdaptResult {
    /// Edited scaled latents y.
    pub latents: Tensor,
    /// Parameter store with the edited encoder (everything else untouched).
    pub store: ParamStore,
    /// Scores of iterates 0..=T under the fixed evaluation realization.
    pub trace: Vec<AdaptStep>,
    pub selected: usize,
    /// Transmission of the selected iterate under the evaluation realization.
    pub output: ForwardOutput,
}

impl AdaptResult {
    pub fn selected_step(&self) -> &AdaptStep {
        &self.trace[self.selected]
    }
}

struct Scored {
    loss: Tensor,
    step: AdaptStep,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Evaluates the objective on a forward output.
fn score(
    x: &Tensor,
    out: &ForwardOutput,
    objective: &Objective,
    op: &OperatingPoint,
) -> Result<Scored> {
    let terms = match objective {
        Objective::Standard => rd_terms(x, out, op.lambda, op.eta, None)?,
        Objective::Roi(roi) => rd_terms(
            x,
            out,
            op.lambda,
            op.eta,
            Some(&roi.weight_tensor(x.dtype())?),
        )?,
        Objective::MultiDistortion(wts) => {
            let t = rd_terms(x, out, wts.lambda_o, op.eta, None)?;
            let proxy = eval::ssim_distortion(x, &out.x_hat)?;
            let distortion =
                ((&t.distortion * (wts.lambda_o * MSE_SCALE))? + (&proxy * wts.lambda_s)?)?;
            RdTerms {
                loss: (&t.rate + &distortion)?,
                rate: t.rate,
                distortion,
            }
        }
    };
    let step = AdaptStep {
        loss: scalar(&terms.loss)?,
        rate: scalar(&terms.rate)?,
        distortion: scalar(&terms.distortion)?,
        symbols: out.maps.iter().map(|m| m.total_symbols()).sum(),
    };
    Ok(Scored {
        loss: terms.loss,
        step,
    })
}

fn options(objective: &Objective, op: &OperatingPoint, cfg: &AdaptConfig) -> ForwardOptions {
    let mut o = ForwardOptions::inference(op.lambda, op.eta, op.snr_db);
    o.channel = op.channel.clone();
    o.anchor_sim = cfg.anchor_sim;
    if let Objective::Roi(roi) = objective {
        o.eta = Eta::PerPosition(roi.eta.clone());
    }
    o
}

/// Edits (y, encoder) of one image. `store`/`model` are the shared trained
/// model; they are cloned, never modified.
pub fn adapt(
    store: &ParamStore,
    model: &NtsccModel,
    image: &ImageTensor,
    objective: &Objective,
    op: &OperatingPoint,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    if let Objective::Roi(roi) = objective {
        if (roi.height, roi.width) != (image.height(), image.width()) {
            return Err(Error::DimensionMismatch(format!(
                "ROI map {}x{} vs image {}x{}",
                roi.height,
                roi.width,
                image.height(),
                image.width()
            )));
        }
    }
    if let Objective::MultiDistortion(w) = objective {
        if w.lambda_o < 0.0 || w.lambda_s < 0.0 || (w.lambda_o == 0.0 && w.lambda_s == 0.0) {
            return Err(Error::InvalidArgument(
                "multi-distortion weights must be non-negative and not both zero".into(),
            ));
        }
    }
    if cfg.channel_samples == 0 {
        return Err(Error::InvalidArgument(
            "channel_samples must be >= 1".into(),
        ));
    }
    let clone = store.deep_clone()?;
    let local = NtsccModel::new(&clone, model.config())?;
    let x = image.to_tensor(store.dtype())?;
    let y0 = local.scaled_latents(&x, op.lambda)?.detach();
    let y = Var::from_tensor(&y0)?;
    let enc_vars = clone.vars_with_prefixes(&ENCODER_PREFIXES);
    let adam = |vars: Vec<Var>, lr: f64| {
        AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )
    };
    let mut opt_y = adam(vec![y.clone()], cfg.lr_latent)?;
    let mut opt_enc = adam(enc_vars.clone(), cfg.lr_encoder)?;

    let eval_opts = options(objective, op, cfg);
    let mut grad_opts = eval_opts.clone();
    grad_opts.ste_rate_mask = true;

    let evaluate = |y: &Tensor| -> Result<(ForwardOutput, AdaptStep)> {
        let out = local.from_latents(y, &eval_opts, cfg.eval_seed, None)?;
        let s = score(&x, &out, objective, op)?;
        Ok((out, s.step))
    };

    let (first_out, first) = evaluate(y.as_tensor())?;
    let mut trace = vec![first];
    let mut best = (0usize, first.loss);
    let mut best_state = (y0.copy()?, clone.snapshot()?);
    let mut best_out = Some(first_out);
    let mut last_finite = best_state.clone();

    for t in 1..=cfg.steps {
        let mut total: Option<Tensor> = None;
        for s in 0..cfg.channel_samples {
            let seed = cfg
                .eval_seed
                .wrapping_add(0x5851_F42D_4C95_7F2D)
                .wrapping_mul(t as u64 + 1)
                .wrapping_add(s as u64);
            let out = local.from_latents(y.as_tensor(), &grad_opts, seed, None)?;
            let l = score(&x, &out, objective, op)?.loss;
            total = Some(match total {
                Some(a) => (a + l)?,
                None => l,
            });
        }
        let loss = (total.expect("channel_samples >= 1") / cfg.channel_samples as f64)?;
        let grads = loss.backward()?;
        opt_y.step(&grads)?;
        opt_enc.step(&grads)?;
        let (out, step) = evaluate(y.as_tensor())?;
        if !step.loss.is_finite() {
            // revert to the last finite iterate and stop
            y.set(&last_finite.0)?;
            clone.restore(&last_finite.1)?;
            break;
        }
        trace.push(step);
        last_finite = (y.as_tensor().copy()?, clone.snapshot()?);
        if step.loss < best.1 {
            best = (t, step.loss);
            best_state = last_finite.clone();
            best_out = Some(out);
        }
    }
    y.set(&best_state.0)?;
    clone.restore(&best_state.1)?;
    let _ = enc_vars;
    Ok(AdaptResult {
        latents: y.as_tensor().detach(),
        store: clone,
        trace,
        selected: best.0,
        output: best_out.expect("step 0 is always scored"),
    })
}

pub fn adapt_standard(
    store: &ParamStore,
    model: &NtsccModel,
    image: &ImageTensor,
    op: &OperatingPoint,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    adapt(store, model, image, &Objective::Standard, op, cfg)
}

pub fn adapt_roi(
    store: &ParamStore,
    model: &NtsccModel,
    image: &ImageTensor,
    roi: RoiSpec,
    op: &OperatingPoint,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    adapt(store, model, image, &Objective::Roi(roi), op, cfg)
}

pub fn adapt_multidistortion(
    store: &ParamStore,
    model: &NtsccModel,
    image: &ImageTensor,
    weights: MultiDistortionWeights,
    op: &OperatingPoint,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    adapt(
        store,
        model,
        image,
        &Objective::MultiDistortion(weights),
        op,
        cfg,
    )
}

/// Instant objective of the unadapted model (step-0 score).
pub fn initial_score(
    model: &NtsccModel,
    image: &ImageTensor,
    objective: &Objective,
    op: &OperatingPoint,
    cfg: &AdaptConfig,
) -> Result<AdaptStep> {
    let x = image.to_tensor(model.dtype())?;
    let out = model.forward(&x, &options(objective, op, cfg), cfg.eval_seed)?;
    Ok(score(&x, &out, objective, op)?.step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_image;
    use crate::transform::ArchConfig;

    fn setup() -> (ParamStore, NtsccModel, ImageTensor) {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(9, DType::F32);
        let model = NtsccModel::new(&store, &cfg).unwrap();
        (store, model, synthetic_image(32, 32, 1))
    }

    #[test]
    fn zero_steps_equal_unadapted_inference() {
        let (store, model, img) = setup();
        let op = OperatingPoint::new(0.18, 0.25, 10.0);
        let cfg = AdaptConfig {
            steps: 0,
            ..AdaptConfig::default()
        };
        let r = adapt_standard(&store, &model, &img, &op, &cfg).unwrap();
        let mut o = ForwardOptions::inference(0.18, 0.25, 10.0);
        o.anchor_sim = cfg.anchor_sim;
        let plain = model
            .forward(&img.to_tensor(DType::F32).unwrap(), &o, cfg.eval_seed)
            .unwrap();
        assert_eq!(
            nn::to_vec_f64(&r.output.x_hat).unwrap(),
            nn::to_vec_f64(&plain.x_hat).unwrap()
        );
        assert_eq!(r.selected, 0);
    }

    #[test]
    fn best_iterate_and_frozen_parameters() {
        let (store, model, img) = setup();
        let op = OperatingPoint::new(0.18, 0.25, 10.0);
        let cfg = AdaptConfig {
            steps: 3,
            lr_encoder: 1e-3,
            ..AdaptConfig::default()
        };
        let r = adapt_standard(&store, &model, &img, &op, &cfg).unwrap();
        assert_eq!(r.trace.len(), 4);
        assert!(r.selected_step().loss <= r.trace[0].loss);
        let min = r.trace.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.selected_step().loss, min);
        let (a, b) = (store.snapshot().unwrap(), r.store.snapshot().unwrap());
        let mut enc_changed = false;
        for (k, t) in &a {
            let same = nn::to_vec_f64(t).unwrap() == nn::to_vec_f64(&b[k]).unwrap();
            if ENCODER_PREFIXES.iter().any(|p| k.starts_with(p)) {
                enc_changed |= !same;
            } else {
                assert!(same, "{k} changed");
            }
        }
        assert!(enc_changed || r.selected == 0);
    }

    #[test]
    fn roi_reduces_to_standard() {
        let (store, model, img) = setup();
        let op = OperatingPoint::new(0.18, 0.25, 10.0);
        let cfg = AdaptConfig {
            steps: 0,
            ..AdaptConfig::default()
        };
        let roi = RoiSpec::from_map(vec![1.0; 32 * 32], 32, 32, 0.25).unwrap();
        let a = initial_score(&model, &img, &Objective::Standard, &op, &cfg).unwrap();
        let b = initial_score(&model, &img, &Objective::Roi(roi), &op, &cfg).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-6 * a.loss.abs());
        let _ = store;
        assert!(RoiSpec::from_map(vec![1.5; 32 * 32], 32, 32, 0.25).is_err());
        let md0 = MultiDistortionWeights {
            lambda_o: 0.0,
            lambda_s: 0.0,
        };
        assert!(adapt_multidistortion(&store, &model, &img, md0, &op, &cfg).is_err());
    }

    #[test]
    fn reference_factors_blend() {
        let mut m = vec![0.0f32; 32 * 32];
        for r in 0..16 {
            for c in 0..16 {
                m[r * 32 + c] = 1.0;
            }
        }
        let roi = RoiSpec::with_factors(&m, 32, 32, &RoiFactors::reference()).unwrap();
        assert_eq!(roi.eta, vec![0.25, 0.05, 0.05, 0.05]);
        assert_eq!(roi.weights[0], 1.25);
        assert_eq!(roi.weights[31], 0.25);
    }
}
