//! Semantic analysis/synthesis transforms and the SQI-controlled latent
//! rate scaling (global scalar per lambda times channel-wise anchor /
//! non-anchor vectors).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::entropy::CheckerboardPartition;
use crate::error::{Error, Result};
use crate::jscc::QuantizerVariant;
use crate::nn::{self, head_count, Conv2d, ResTb, Upsample};
use crate::params::{Init, ParamPath};

/// Total spatial downsampling of the analysis transform.
pub const DOWNSAMPLING: usize = 16;

/// Published SQI grid.
pub const LAMBDA_GRID: [f64; 5] = [0.013, 0.0483, 0.18, 0.36, 0.72];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Feature channels N of the first three stages.
    pub stage_channels: usize,
    /// Bottleneck width M (latent channels C).
    pub bottleneck: usize,
    /// Residual transformer blocks per analysis stage; synthesis uses the reverse.
    pub blocks_per_stage: Vec<usize>,
    /// Attention layers inside each residual transformer block.
    pub restb_depth: usize,
    pub transform_window: usize,
    pub entropy_window: usize,
    /// Residual transformer blocks inside the hyper analysis/synthesis.
    pub entropy_blocks: usize,
    pub channels_per_head: usize,
    pub mlp_ratio: usize,
    pub hyper_channels: usize,
    pub context_kernel: usize,
    pub jscc_dim: usize,
    /// Self-attention blocks of the anchor codec.
    pub jscc_anchor_blocks: usize,
    /// Alternating self/cross-attention blocks of the non-anchor codec.
    pub jscc_context_blocks: usize,
    /// Side of the square attention window on the latent grid.
    pub jscc_window: usize,
    pub snr_fcn_hidden: usize,
    /// Side-info bits per latent position (q).
    pub rate_bits: u32,
    /// Checkerboard context model + two-pass JSCC; `false` gives the hyperprior-only ablation.
    pub contextual: bool,
    pub lambda_grid: Vec<f64>,
    pub snr_grid_db: Vec<f64>,
    pub include_z_rate: bool,
    pub factorized_filters: Vec<usize>,
    pub quantizer: QuantizerVariant,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::desk()
    }
}

impl ArchConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        ArchConfig {
            stage_channels: 48,
            bottleneck: 80,
            blocks_per_stage: vec![1, 1, 2, 1],
            restb_depth: 1,
            transform_window: 7,
            entropy_window: 3,
            entropy_blocks: 1,
            channels_per_head: 16,
            mlp_ratio: 2,
            hyper_channels: 48,
            context_kernel: 5,
            jscc_dim: 96,
            jscc_anchor_blocks: 2,
            jscc_context_blocks: 2,
            jscc_window: 7,
            snr_fcn_hidden: 64,
            rate_bits: 4,
            contextual: true,
            lambda_grid: LAMBDA_GRID.to_vec(),
            snr_grid_db: vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0],
            include_z_rate: false,
            factorized_filters: vec![3, 3, 3],
            quantizer: QuantizerVariant::Literal,
        }
    }

    /// Full-size network shapes.
    pub fn full() -> Self {
        ArchConfig {
            stage_channels: 192,
            bottleneck: 320,
            blocks_per_stage: vec![1, 2, 6, 2],
            restb_depth: 2,
            hyper_channels: 192,
            jscc_dim: 256,
            jscc_anchor_blocks: 4,
            jscc_context_blocks: 4,
            snr_fcn_hidden: 128,
            ..ArchConfig::desk()
        }
    }

    /// Small network for minutes-scale experiments and the acceptance runs.
    pub fn toy() -> Self {
        ArchConfig {
            stage_channels: 16,
            bottleneck: 32,
            // attention only on the two coarse stages; full-resolution
            // neighbourhood attention dominates CPU step time
            blocks_per_stage: vec![0, 0, 1, 1],
            restb_depth: 1,
            entropy_blocks: 0,
            hyper_channels: 16,
            jscc_dim: 32,
            jscc_anchor_blocks: 1,
            jscc_context_blocks: 1,
            snr_fcn_hidden: 32,
            ..ArchConfig::desk()
        }
    }

    /// Tiny network used for finite-difference gradient checks.
    pub fn micro() -> Self {
        ArchConfig {
            stage_channels: 4,
            bottleneck: 4,
            blocks_per_stage: vec![1, 0, 0, 0],
            restb_depth: 1,
            entropy_blocks: 0,
            channels_per_head: 4,
            hyper_channels: 4,
            jscc_dim: 8,
            jscc_anchor_blocks: 1,
            jscc_context_blocks: 1,
            snr_fcn_hidden: 4,
            ..ArchConfig::desk()
        }
    }

    /// Maximum codeword length in reals per latent position.
    pub fn d_max(&self) -> usize {
        2 * self.max_rate_index() as usize
    }

    pub fn max_rate_index(&self) -> u32 {
        (1u32 << self.rate_bits) - 1
    }

    pub fn rate_levels(&self) -> usize {
        1usize << self.rate_bits
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.blocks_per_stage.len() != 4 {
            return bad("blocks_per_stage must list four stages");
        }
        if self.stage_channels == 0 || self.bottleneck == 0 || self.hyper_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.rate_bits == 0 || self.rate_bits > 8 {
            return bad("rate_bits must be in 1..=8");
        }
        if self.context_kernel % 2 == 0 {
            return bad("context_kernel must be odd");
        }
        if self.jscc_window == 0 || self.transform_window == 0 || self.entropy_window == 0 {
            return bad("attention windows must be positive");
        }
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && !v.is_empty();
        if !sorted(&self.lambda_grid) || self.lambda_grid.iter().any(|&l| l <= 0.0) {
            return bad("lambda_grid must be positive and strictly increasing");
        }
        if !sorted(&self.snr_grid_db) {
            return bad("snr_grid_db must be strictly increasing");
        }
        Ok(())
    }
}

struct AnalysisStage {
    down: Conv2d,
    blocks: Vec<ResTb>,
}

/// g_a: four stride-2 stages, each followed by residual transformer blocks.
pub struct AnalysisTransform {
    stages: Vec<AnalysisStage>,
}

impl AnalysisTransform {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let n = cfg.stage_channels;
        let m = cfg.bottleneck;
        let chans = [(3, n), (n, n), (n, n), (n, m)];
        let mut stages = Vec::new();
        for (s, &(cin, cout)) in chans.iter().enumerate() {
            let sp = p.pp(format!("stage{s}"));
            let heads = head_count(cout, cfg.channels_per_head);
            let blocks = (0..cfg.blocks_per_stage[s])
                .map(|b| {
                    ResTb::new(
                        &sp.pp(format!("block{b}")),
                        cout,
                        cfg.restb_depth,
                        heads,
                        cfg.transform_window,
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(AnalysisStage {
                down: Conv2d::new(&sp.pp("down"), cin, cout, 3, 2)?,
                blocks,
            });
        }
        Ok(AnalysisTransform { stages })
    }

    /// x: (B, 3, H, W) -> latent ẏ: (B, M, H/16, W/16).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 input channels".into(),
                got: format!("{c}"),
            });
        }
        if h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 || h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!(
                "image {h}x{w} is not a multiple of {DOWNSAMPLING}"
            )));
        }
        // pixels live on [0, 1]; centre them so the zero-initialised biases
        // start at the mid-grey reconstruction
        let mut t = (x - 0.5)?;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            t = stage.down.forward(&t)?;
            if i < last {
                t = t.gelu()?;
            }
            for b in &stage.blocks {
                t = b.forward(&t)?;
            }
        }
        Ok(t)
    }
}

struct SynthesisStage {
    blocks: Vec<ResTb>,
    up: Upsample,
}

/// g_s: mirror of the analysis transform with sub-pixel upsampling.
pub struct SynthesisTransform {
    stages: Vec<SynthesisStage>,
    bottleneck: usize,
}

impl SynthesisTransform {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let n = cfg.stage_channels;
        let m = cfg.bottleneck;
        let chans = [(m, n), (n, n), (n, n), (n, 3)];
        let mut stages = Vec::new();
        for (s, &(cin, cout)) in chans.iter().enumerate() {
            let sp = p.pp(format!("stage{s}"));
            let heads = head_count(cin, cfg.channels_per_head);
            let blocks = (0..cfg.blocks_per_stage[3 - s])
                .map(|b| {
                    ResTb::new(
                        &sp.pp(format!("block{b}")),
                        cin,
                        cfg.restb_depth,
                        heads,
                        cfg.transform_window,
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(SynthesisStage {
                blocks,
                up: Upsample::new(&sp.pp("up"), cin, cout)?,
            });
        }
        Ok(SynthesisTransform {
            stages,
            bottleneck: m,
        })
    }

    /// ŷ̇: (B, M, h, w) -> x̂: (B, 3, 16h, 16w), unclamped.
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let c = y.dim(1)?;
        if c != self.bottleneck {
            return Err(Error::ShapeMismatch {
                expected: format!("{} latent channels", self.bottleneck),
                got: format!("{c}"),
            });
        }
        let mut t = y.clone();
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            for b in &stage.blocks {
                t = b.forward(&t)?;
            }
            t = stage.up.forward(&t)?;
            if i < last {
                t = t.gelu()?;
            }
        }
        Ok((t + 0.5)?)
    }
}

/// How table keys are mapped before linear interpolation of log-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyScale {
    /// Keys interpolated in log domain (SQI lambda).
    Log,
    /// Keys already logarithmic (SNR in dB).
    Linear,
}

/// Positive scalars at discrete keys, interpolated exponentially: the log of
/// the value is linear in the (mapped) key between adjacent table entries.
#[derive(Debug, Clone)]
pub struct InterpTable {
    keys: Vec<f64>,
    scale: KeyScale,
    what: &'static str,
}

impl InterpTable {
    pub fn new(keys: Vec<f64>, scale: KeyScale, what: &'static str) -> Self {
        InterpTable { keys, scale, what }
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    fn map(&self, k: f64) -> f64 {
        match self.scale {
            KeyScale::Log => k.ln(),
            KeyScale::Linear => k,
        }
    }

    /// Bracketing index and interpolation weight toward the upper neighbour.
    pub fn locate(&self, key: f64) -> Result<(usize, f64)> {
        let (lo, hi) = (self.keys[0], *self.keys.last().expect("non-empty"));
        if !(key >= lo && key <= hi) {
            return Err(Error::OutOfRange {
                what: self.what,
                value: key,
                min: lo,
                max: hi,
            });
        }
        if self.keys.len() == 1 {
            return Ok((0, 0.0));
        }
        let i = match self.keys.iter().position(|&k| k >= key) {
            Some(0) => return Ok((0, 0.0)),
            Some(i) => i - 1,
            None => self.keys.len() - 2,
        };
        if key == self.keys[i + 1] {
            return Ok((i + 1, 0.0));
        }
        let (a, b) = (self.map(self.keys[i]), self.map(self.keys[i + 1]));
        Ok((i, (self.map(key) - a) / (b - a)))
    }

    /// Interpolated value from a vector of log-values.
    pub fn value(&self, log_values: &[f64], key: f64) -> Result<f64> {
        let (i, t) = self.locate(key)?;
        let lv = if t == 0.0 {
            log_values[i]
        } else {
            (1.0 - t) * log_values[i] + t * log_values[i + 1]
        };
        Ok(lv.exp())
    }

    /// Differentiable interpolated value from a tensor of log-values, shape (1,).
    pub fn value_tensor(&self, log_values: &Tensor, key: f64) -> Result<Tensor> {
        let (i, t) = self.locate(key)?;
        let lv = if t == 0.0 {
            log_values.narrow(0, i, 1)?
        } else {
            let a = log_values.narrow(0, i, 1)?;
            let b = log_values.narrow(0, i + 1, 1)?;
            ((a * (1.0 - t))? + (b * t)?)?
        };
        Ok(lv.exp()?)
    }
}

/// q_rate parameters: one global scalar per trained lambda plus channel-wise
/// anchor / non-anchor vectors, all stored as logarithms.
pub struct RateScaling {
    table: InterpTable,
    log_global: Tensor,
    /// Fixed offset added to the learned log table: 0.5·ln(λ_max/λ), the
    /// high-rate optimum Δ ∝ λ^(-1/2) for a uniform quantizer under MSE.
    log_prior: Tensor,
    log_r_a: Tensor,
    log_r_na: Tensor,
}

impl RateScaling {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let top = cfg.lambda_grid.iter().cloned().fold(f64::MIN, f64::max);
        let prior: Vec<f64> = cfg
            .lambda_grid
            .iter()
            .map(|l| 0.5 * (top / l).ln())
            .collect();
        let log_global = p.get("log_global", cfg.lambda_grid.len(), Init::Const(0.0))?;
        Ok(RateScaling {
            table: InterpTable::new(cfg.lambda_grid.clone(), KeyScale::Log, "lambda"),
            log_prior: Tensor::from_vec(prior, cfg.lambda_grid.len(), log_global.device())?
                .to_dtype(log_global.dtype())?,
            log_global,
            log_r_a: p.get("log_r_a", cfg.bottleneck, Init::Const(0.0))?,
            log_r_na: p.get("log_r_na", cfg.bottleneck, Init::Const(0.0))?,
        })
    }

    pub fn table(&self) -> &InterpTable {
        &self.table
    }

    /// r_global at an arbitrary lambda in the table hull (no extrapolation).
    pub fn lookup_global_rate_scalar(&self, lambda: f64) -> Result<f64> {
        let lv = nn::to_vec_f64(&(&self.log_global + &self.log_prior)?)?;
        self.table.value(&lv, lambda)
    }

    /// Per-position divisor map q_rate as a (1, C, h, w) tensor.
    pub fn scale_map(
        &self,
        lambda: f64,
        part: &CheckerboardPartition,
        dtype: DType,
    ) -> Result<Tensor> {
        let g = self
            .table
            .value_tensor(&(&self.log_global + &self.log_prior)?, lambda)?;
        let c = self.log_r_a.dim(0)?;
        let ra = self.log_r_a.exp()?.reshape((1, c, 1, 1))?;
        let rna = self.log_r_na.exp()?.reshape((1, c, 1, 1))?;
        let (h, w) = part.dims();
        let mask = part.anchor_mask_u8()?.broadcast_as((1, c, h, w))?;
        let per_pos = mask.where_cond(
            &ra.broadcast_as((1, c, h, w))?,
            &rna.broadcast_as((1, c, h, w))?,
        )?;
        Ok(per_pos
            .broadcast_mul(&g.reshape((1, 1, 1, 1))?)?
            .to_dtype(dtype)?)
    }

    /// y = ẏ ⊘ q_rate.
    pub fn apply(
        &self,
        y_dot: &Tensor,
        lambda: f64,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        check_grid(y_dot, part)?;
        let q = self.scale_map(lambda, part, y_dot.dtype())?;
        Ok(y_dot.broadcast_div(&q)?)
    }

    /// ŷ̇ = ŷ ⊙ q_rate.
    pub fn invert(
        &self,
        y_hat: &Tensor,
        lambda: f64,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        check_grid(y_hat, part)?;
        let q = self.scale_map(lambda, part, y_hat.dtype())?;
        Ok(y_hat.broadcast_mul(&q)?)
    }
}

fn check_grid(y: &Tensor, part: &CheckerboardPartition) -> Result<()> {
    let (_, _, h, w) = y.dims4()?;
    if (h, w) != part.dims() {
        return Err(Error::PartitionMismatch(format!(
            "latent grid {h}x{w} vs partition {:?}",
            part.dims()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::Parity;
    use crate::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn analysis_and_synthesis_shapes() {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(0, DType::F32);
        let ga = AnalysisTransform::new(&store.root().pp("ga"), &cfg).unwrap();
        let gs = SynthesisTransform::new(&store.root().pp("gs"), &cfg).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let y = ga.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, cfg.bottleneck, 4, 4]);
        assert!(nn::to_vec_f64(&y).unwrap().iter().all(|v| v.is_finite()));
        let y2 = ga.forward(&x).unwrap();
        assert_eq!(nn::to_vec_f64(&y).unwrap(), nn::to_vec_f64(&y2).unwrap());
        let xh = gs.forward(&y).unwrap();
        assert_eq!(xh.dims(), &[1, 3, 64, 64]);
        let bad = Tensor::zeros((1, 3, 40, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ga.forward(&bad), Err(Error::DimensionMismatch(_))));
        let bad_lat = Tensor::zeros((1, 5, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(gs.forward(&bad_lat).is_err());
    }

    #[test]
    fn interp_table_is_exponential() {
        let t = InterpTable::new(vec![0.1, 0.4], KeyScale::Log, "lambda");
        let (v1, v2): (f64, f64) = (2.0, 8.0);
        let lv = [v1.ln(), v2.ln()];
        assert!((t.value(&lv, 0.1).unwrap() - 2.0).abs() < 1e-12);
        assert!((t.value(&lv, 0.4).unwrap() - 8.0).abs() < 1e-12);
        // geometric midpoint of keys -> geometric mean of values
        let mid = (0.1f64 * 0.4).sqrt();
        assert!((t.value(&lv, mid).unwrap() - (v1 * v2).sqrt()).abs() < 1e-12);
        assert!(t.value(&lv, 0.5).is_err());
        assert!(t.value(&lv, 0.05).is_err());
    }

    #[test]
    fn rate_scaling_direct_example() {
        // anchor position with q = (2, 1): (2, 2) -> (1, 2)
        let mut cfg = ArchConfig::toy();
        cfg.bottleneck = 2;
        let store = ParamStore::new(0, DType::F64);
        let rs = RateScaling::new(&store.root(), &cfg).unwrap();
        for (name, v) in store.named_vars() {
            if name == "log_r_a" {
                v.set(&Tensor::new(&[2f64.ln(), 0.0], &Device::Cpu).unwrap())
                    .unwrap();
            }
        }
        let part = CheckerboardPartition::new(1, 1, Parity::Even).unwrap();
        let y = Tensor::new(&[2f64, 2.0], &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 1, 1))
            .unwrap();
        // the prior vanishes at the largest lambda
        let out = rs.apply(&y, 0.72, &part).unwrap();
        assert_eq!(nn::to_vec_f64(&out).unwrap(), vec![1.0, 2.0]);
        let back = rs.invert(&out, 0.72, &part).unwrap();
        assert_eq!(nn::to_vec_f64(&back).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(
            rs.apply(&y, 1.0, &part),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn untrained_table_follows_inverse_sqrt_lambda() {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(0, DType::F64);
        let rs = RateScaling::new(&store.root(), &cfg).unwrap();
        for &l in &cfg.lambda_grid {
            let want = (0.72f64 / l).sqrt();
            assert!((rs.lookup_global_rate_scalar(l).unwrap() - want).abs() < 1e-12 * want);
        }
    }
}
