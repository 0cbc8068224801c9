//! Hyperprior and checkerboard context entropy model.
//!
//! Anchors take their Gaussian parameters from the hyper synthesis alone;
//! non-anchors aggregate hyper features with a masked-convolution context
//! over (simulated) decoded anchors.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, conv_with_bias, head_count, Conv2d, ResTb, Upsample};
use crate::params::{Init, ParamPath};
use crate::transform::ArchConfig;

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

/// Which parity class of `(row + col)` holds the anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parity {
    #[default]
    Even,
    Odd,
}

/// Anchor / non-anchor split of a latent grid. The degenerate `all_anchor`
/// form is used by the non-contextual ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckerboardPartition {
    h: usize,
    w: usize,
    parity: Parity,
    all_anchor: bool,
}

impl CheckerboardPartition {
    pub fn new(h: usize, w: usize, parity: Parity) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty latent grid {h}x{w}")));
        }
        Ok(CheckerboardPartition {
            h,
            w,
            parity,
            all_anchor: false,
        })
    }

    /// Every position is an anchor (no context).
    pub fn all_anchor(h: usize, w: usize) -> Result<Self> {
        let mut p = CheckerboardPartition::new(h, w, Parity::Even)?;
        p.all_anchor = true;
        Ok(p)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn is_all_anchor(&self) -> bool {
        self.all_anchor
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_anchor(&self, row: usize, col: usize) -> bool {
        if self.all_anchor {
            return true;
        }
        let p = match self.parity {
            Parity::Even => 0,
            Parity::Odd => 1,
        };
        (row + col) % 2 == p
    }

    /// Row-major anchor flags.
    pub fn anchor_flags(&self) -> Vec<bool> {
        (0..self.h)
            .flat_map(|r| (0..self.w).map(move |c| (r, c)))
            .map(|(r, c)| self.is_anchor(r, c))
            .collect()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_flags().iter().filter(|&&a| a).count()
    }

    /// Transmission order: anchors row-major, then non-anchors row-major.
    pub fn stream_order(&self) -> Vec<usize> {
        let flags = self.anchor_flags();
        let mut order: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        order.extend((0..flags.len()).filter(|&i| !flags[i]));
        order
    }

    /// (1, 1, h, w) u8 mask, 1 at anchors.
    pub fn anchor_mask_u8(&self) -> Result<Tensor> {
        let v: Vec<u8> = self.anchor_flags().iter().map(|&a| a as u8).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.h, self.w), &Device::Cpu)?)
    }

    /// (1, 1, h, w) 0/1 mask in the given dtype.
    pub fn anchor_mask(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.anchor_mask_u8()?.to_dtype(dtype)?)
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        let (_, _, h, w) = t.dims4()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::PartitionMismatch(format!(
                "grid {h}x{w} vs partition {}x{}",
                self.h, self.w
            )));
        }
        Ok(())
    }

    /// Picks `anchor` at anchor positions and `other` elsewhere (NCHW, same shape).
    pub fn select(&self, anchor: &Tensor, other: &Tensor) -> Result<Tensor> {
        self.check(anchor)?;
        let m = self.anchor_mask_u8()?.broadcast_as(anchor.shape())?;
        Ok(m.where_cond(anchor, other)?)
    }

    /// Zeroes every non-anchor position.
    pub fn keep_anchors(&self, t: &Tensor) -> Result<Tensor> {
        self.select(t, &t.zeros_like()?)
    }
}

/// Build a checkerboard partition over an h x w latent grid.
pub fn build_partition(h: usize, w: usize, parity: Parity) -> Result<CheckerboardPartition> {
    CheckerboardPartition::new(h, w, parity)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// P(y) under N(mu, sigma^2) convolved with U(-1/2, 1/2), clamped and floored.
pub fn likelihood_scalar(y: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let r = (y - mu).abs();
    // upper tail form avoids cancellation when |r| is large
    let p = std_normal_cdf((0.5 - r) / s) - std_normal_cdf((-0.5 - r) / s);
    p.max(LIKELIHOOD_FLOOR)
}

fn normal_cdf_tensor(x: &Tensor) -> Result<Tensor> {
    Ok((((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)? * 0.5)?)
}

/// Elementwise likelihood tensor; differentiable in y, mu and sigma.
pub fn likelihood(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let sigma = sigma.clamp(SIGMA_MIN, SIGMA_MAX)?;
    let r = (y - mu)?.abs()?;
    let upper = normal_cdf_tensor(&((r.affine(-1.0, 0.5))? / &sigma)?)?;
    let lower = normal_cdf_tensor(&((r.affine(-1.0, -0.5))? / &sigma)?)?;
    Ok((upper - lower)?.maximum(LIKELIHOOD_FLOOR)?)
}

/// −log2 p summed over channels: (B, C, h, w) -> (B, h, w).
pub fn position_bits(likelihoods: &Tensor) -> Result<Tensor> {
    let bits = (likelihoods.log()? * (-1.0 / std::f64::consts::LN_2))?;
    Ok(bits.sum(1)?)
}

/// z̃ = z + U(−½, ½) from the given generator.
pub fn add_uniform_noise<R: Rng>(z: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = z.elem_count();
    let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let noise = nn::tensor_from(u, z.dims(), z.dtype())?;
    Ok((z + noise)?)
}

/// h_a: latents to hyper-latents, 4x spatial reduction (ceil).
pub struct HyperAnalysis {
    c1: Conv2d,
    c2: Conv2d,
    blocks: Vec<ResTb>,
    c3: Conv2d,
}

impl HyperAnalysis {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let (m, ch) = (cfg.bottleneck, cfg.hyper_channels);
        Ok(HyperAnalysis {
            c1: Conv2d::new(&p.pp("c1"), m, ch, 3, 1)?,
            c2: Conv2d::new(&p.pp("c2"), ch, ch, 3, 2)?,
            blocks: entropy_blocks(p, cfg)?,
            c3: Conv2d::new(&p.pp("c3"), ch, ch, 3, 2)?,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let mut t = self.c1.forward(y)?.gelu()?;
        t = self.c2.forward(&t)?.gelu()?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        self.c3.forward(&t)
    }
}

/// h_s: hyper-latents to (B, 2M, h, w) hyper features, cropped to the latent grid.
pub struct HyperSynthesis {
    c1: Conv2d,
    blocks: Vec<ResTb>,
    up1: Upsample,
    up2: Upsample,
    out: Conv2d,
}

impl HyperSynthesis {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let (m, ch) = (cfg.bottleneck, cfg.hyper_channels);
        Ok(HyperSynthesis {
            c1: Conv2d::new(&p.pp("c1"), ch, ch, 3, 1)?,
            blocks: entropy_blocks(p, cfg)?,
            up1: Upsample::new(&p.pp("up1"), ch, ch)?,
            up2: Upsample::new(&p.pp("up2"), ch, ch)?,
            out: Conv2d::new(&p.pp("out"), ch, 2 * m, 3, 1)?,
        })
    }

    pub fn forward(&self, z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (_, _, zh, zw) = z.dims4()?;
        if zh * 4 < h || zw * 4 < w || zh != h.div_ceil(4) || zw != w.div_ceil(4) {
            return Err(Error::ShapeMismatch {
                expected: format!("hyper grid {}x{}", h.div_ceil(4), w.div_ceil(4)),
                got: format!("{zh}x{zw}"),
            });
        }
        let mut t = self.c1.forward(z)?.gelu()?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        t = self.up1.forward(&t)?.gelu()?;
        t = self.up2.forward(&t)?.gelu()?;
        let t = self.out.forward(&t)?;
        Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }
}

fn entropy_blocks(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Vec<ResTb>> {
    let ch = cfg.hyper_channels;
    (0..cfg.entropy_blocks)
        .map(|i| {
            ResTb::new(
                &p.pp(format!("block{i}")),
                ch,
                cfg.restb_depth,
                head_count(ch, cfg.channels_per_head),
                cfg.entropy_window,
                cfg.mlp_ratio,
            )
        })
        .collect()
}

/// Checkerboard tap mask for a k x k kernel: 1 at taps whose offset from the
/// centre has odd parity, 0 at same-parity taps (centre included).
pub fn checkerboard_kernel_mask(k: usize) -> Vec<f64> {
    let c = (k / 2) as isize;
    let mut m = Vec::with_capacity(k * k);
    for r in 0..k as isize {
        for col in 0..k as isize {
            m.push((((r - c) + (col - c)).rem_euclid(2) == 1) as u8 as f64);
        }
    }
    m
}

/// Masked convolution over anchor latents.
pub struct ContextModel {
    weight: Tensor,
    bias: Tensor,
    mask: Tensor,
    kernel: usize,
}

impl ContextModel {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let (m, k) = (cfg.bottleneck, cfg.context_kernel);
        let mask = nn::tensor_from(checkerboard_kernel_mask(k), &[1, 1, k, k], p.dtype())?;
        Ok(ContextModel {
            weight: p.get("weight", (2 * m, m, k, k), Init::fan_in(m * k * k / 2 + 1))?,
            bias: p.get("bias", 2 * m, Init::Const(0.0))?,
            mask,
            kernel: k,
        })
    }

    /// The kernel actually applied (mask ⊙ weight).
    pub fn effective_kernel(&self) -> Result<Tensor> {
        Ok(self.weight.broadcast_mul(&self.mask)?)
    }

    /// Non-anchor positions of the input are zeroed before the convolution.
    pub fn forward(&self, y_anchor: &Tensor, part: &CheckerboardPartition) -> Result<Tensor> {
        let x = part.keep_anchors(y_anchor)?;
        conv_with_bias(
            &x,
            &self.effective_kernel()?,
            &self.bias,
            self.kernel / 2,
            1,
        )
    }
}

/// g_ep: 1x1 aggregation of hyper and context features.
pub struct ParamAggregation {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl ParamAggregation {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let m = cfg.bottleneck;
        Ok(ParamAggregation {
            c1: Conv2d::new(&p.pp("c1"), 4 * m, 3 * m, 1, 1)?,
            c2: Conv2d::new(&p.pp("c2"), 3 * m, 3 * m, 1, 1)?,
            c3: Conv2d::new(&p.pp("c3"), 3 * m, 2 * m, 1, 1)?,
        })
    }

    pub fn forward(&self, hyper: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[hyper, ctx], 1)?;
        let t = self.c1.forward(&x)?.gelu()?;
        let t = self.c2.forward(&t)?.gelu()?;
        self.c3.forward(&t)
    }
}

/// Per-position Gaussian parameters of the latents.
#[derive(Debug, Clone)]
pub struct EntropyParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn split_params(t: &Tensor) -> Result<EntropyParams> {
    let m = t.dim(1)? / 2;
    let mu = t.narrow(1, 0, m)?;
    let log_sigma = t.narrow(1, m, m)?.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
    Ok(EntropyParams {
        mu,
        sigma: log_sigma.exp()?,
    })
}

/// Fully factorized density for the hyper-latents: a monotone per-channel
/// CDF network.
pub struct FactorizedPrior {
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
    channels: usize,
}

impl FactorizedPrior {
    pub fn new(p: &ParamPath<'_>, channels: usize, filters: &[usize]) -> Result<Self> {
        let init_scale: f64 = 10.0;
        let mut dims = vec![1];
        dims.extend_from_slice(filters);
        dims.push(1);
        let scale = init_scale.powf(1.0 / (dims.len() - 1) as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..dims.len() - 1 {
            let (fin, fout) = (dims[i], dims[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(p.get(
                &format!("matrix{i}"),
                (channels, fout, fin),
                Init::Const(init),
            )?);
            biases.push(p.get(
                &format!("bias{i}"),
                (channels, fout, 1),
                Init::Uniform { lo: -0.5, hi: 0.5 },
            )?);
            if i < dims.len() - 2 {
                factors.push(p.get(
                    &format!("factor{i}"),
                    (channels, fout, 1),
                    Init::Const(0.0),
                )?);
            }
        }
        Ok(FactorizedPrior {
            matrices,
            biases,
            factors,
            channels,
        })
    }

    /// Logits of the CDF for x: (channels, 1, n) -> (channels, 1, n).
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = x.clone();
        for i in 0..self.matrices.len() {
            let m = softplus(&self.matrices[i])?;
            t = m.matmul(&t)?.broadcast_add(&self.biases[i])?;
            if i < self.factors.len() {
                let f = self.factors[i].tanh()?;
                t = (&t + t.tanh()?.broadcast_mul(&f)?)?;
            }
        }
        Ok(t)
    }

    /// c_ψ(x) for x: (B, C, h, w).
    pub fn cdf(&self, x: &Tensor) -> Result<Tensor> {
        let l = self.logits(&to_channel_rows(x, self.channels)?)?;
        from_channel_rows(&candle_nn::ops::sigmoid(&l)?, x.dims())
    }

    /// p(z̃) = c(z̃ + ½) − c(z̃ − ½), evaluated on the side of the median
    /// where the subtraction is well conditioned.
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let rows = to_channel_rows(z, self.channels)?;
        let lo = self.logits(&(&rows - 0.5)?)?;
        let hi = self.logits(&(&rows + 0.5)?)?;
        let sign = (&lo + &hi)?.sign()?.neg()?;
        let p = (candle_nn::ops::sigmoid(&(&sign * &hi)?)?
            - candle_nn::ops::sigmoid(&(&sign * &lo)?)?)?
        .abs()?;
        from_channel_rows(&p.maximum(LIKELIHOOD_FLOOR)?, z.dims())
    }
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn to_channel_rows(x: &Tensor, c: usize) -> Result<Tensor> {
    let (b, xc, h, w) = x.dims4()?;
    if xc != c {
        return Err(Error::ShapeMismatch {
            expected: format!("{c} channels"),
            got: format!("{xc}"),
        });
    }
    Ok(x.permute((1, 0, 2, 3))?
        .reshape((c, 1, b * h * w))?
        .contiguous()?)
}

fn from_channel_rows(t: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let (b, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    Ok(t.reshape((c, b, h, w))?
        .permute((1, 0, 2, 3))?
        .contiguous()?)
}

/// The full entropy model: hyper path, context path and parameter heads.
pub struct EntropyModel {
    ha: HyperAnalysis,
    hs: HyperSynthesis,
    context: Option<(ContextModel, ParamAggregation)>,
    factorized: Option<FactorizedPrior>,
}

impl EntropyModel {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let context = if cfg.contextual {
            Some((
                ContextModel::new(&p.pp("context"), cfg)?,
                ParamAggregation::new(&p.pp("gep"), cfg)?,
            ))
        } else {
            None
        };
        let factorized = if cfg.include_z_rate {
            Some(FactorizedPrior::new(
                &p.pp("factorized"),
                cfg.hyper_channels,
                &cfg.factorized_filters,
            )?)
        } else {
            None
        };
        Ok(EntropyModel {
            ha: HyperAnalysis::new(&p.pp("ha"), cfg)?,
            hs: HyperSynthesis::new(&p.pp("hs"), cfg)?,
            context,
            factorized,
        })
    }

    pub fn hyper_analyze(&self, y: &Tensor) -> Result<Tensor> {
        self.ha.forward(y)
    }

    pub fn hyper_synthesize(&self, z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        self.hs.forward(z, h, w)
    }

    pub fn is_contextual(&self) -> bool {
        self.context.is_some()
    }

    pub fn factorized(&self) -> Option<&FactorizedPrior> {
        self.factorized.as_ref()
    }

    /// Parameters valid at anchor positions (the hyper branch alone).
    pub fn anchor_params(&self, hyper: &Tensor) -> Result<EntropyParams> {
        split_params(hyper)
    }

    pub fn context_features(
        &self,
        y_anchor: &Tensor,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        match &self.context {
            Some((cm, _)) => cm.forward(y_anchor, part),
            None => Err(Error::InvalidArgument(
                "context features requested from a non-contextual model".into(),
            )),
        }
    }

    /// Complete parameters: anchors from the hyper branch, non-anchors from g_ep.
    pub fn entropy_params(
        &self,
        hyper: &Tensor,
        ctx: Option<&Tensor>,
        part: &CheckerboardPartition,
    ) -> Result<EntropyParams> {
        part.check(hyper)?;
        let anchor = split_params(hyper)?;
        if part.is_all_anchor() {
            return Ok(anchor);
        }
        let (ctx, gep) = match (ctx, &self.context) {
            (Some(c), Some((_, gep))) => (c, gep),
            _ => {
                return Err(Error::InvalidArgument(
                    "non-anchor parameters need context features and a context model".into(),
                ))
            }
        };
        if ctx.dims() != hyper.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", hyper.dims()),
                got: format!("{:?}", ctx.dims()),
            });
        }
        let na = split_params(&gep.forward(hyper, ctx)?)?;
        Ok(EntropyParams {
            mu: part.select(&anchor.mu, &na.mu)?,
            sigma: part.select(&anchor.sigma, &na.sigma)?,
        })
    }
}
