//! The end-to-end transceiver: analysis, rate scaling, entropy model,
//! two-pass contextual JSCC over the simulated channel, and synthesis.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{self, ChannelConfig};
use crate::entropy::{self, CheckerboardPartition, EntropyModel, Parity};
use crate::error::{Error, Result};
use crate::jscc::{
    self, from_tokens, gather_stream, rate_mask, rate_onehot, scatter_stream, select_tokens,
    to_tokens, JsccCodec, RateAllocationMap,
};
use crate::nn;
use crate::params::ParamStore;
use crate::transform::{
    AnalysisTransform, ArchConfig, RateScaling, SynthesisTransform, DOWNSAMPLING,
};

/// Bandwidth scaling factor: one η for the image or one per latent position.
#[derive(Debug, Clone, PartialEq)]
pub enum Eta {
    Uniform(f64),
    /// Row-major (h·w) factors, shared by every image in the batch.
    PerPosition(Vec<f64>),
}

impl Eta {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Eta::Uniform(e) => *e > 0.0,
            Eta::PerPosition(v) => v.iter().all(|&e| e > 0.0),
        };
        if !ok {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        Ok(())
    }

    fn tensor(&self, b: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
        match self {
            Eta::Uniform(e) => {
                Ok(Tensor::full(*e, (b, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
            }
            Eta::PerPosition(v) => {
                if v.len() != h * w {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} eta factors", h * w),
                        got: format!("{}", v.len()),
                    });
                }
                Ok(nn::tensor_from(v.clone(), &[1, h, w], dtype)?
                    .broadcast_as((b, h, w))?
                    .contiguous()?)
            }
        }
    }
}

/// Operating point and mode of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub lambda: f64,
    pub eta: Eta,
    pub snr_db: f64,
    pub channel: ChannelConfig,
    /// Training mode: uniform noise on z and (optionally) the rate-mask surrogate.
    pub training: bool,
    /// Channel realizations averaged when simulating anchor decoding at the transmitter.
    pub anchor_sim: usize,
    /// Straight-through rate-mask surrogate so the distortion reaches the rate budget.
    pub ste_rate_mask: bool,
    /// Feed the context model with simulated decoded anchors (otherwise raw anchors).
    pub context_from_simulated: bool,
    /// Replace the channel by an identity (diagnostics).
    pub noiseless: bool,
}

impl ForwardOptions {
    pub fn inference(lambda: f64, eta: f64, snr_db: f64) -> Self {
        ForwardOptions {
            lambda,
            eta: Eta::Uniform(eta),
            snr_db,
            channel: ChannelConfig::awgn(),
            training: false,
            anchor_sim: 4,
            ste_rate_mask: false,
            context_from_simulated: true,
            noiseless: false,
        }
    }

    pub fn training(lambda: f64, eta: f64, snr_db: f64) -> Self {
        ForwardOptions {
            training: true,
            anchor_sim: 1,
            ste_rate_mask: true,
            ..ForwardOptions::inference(lambda, eta, snr_db)
        }
    }

    fn effective_snr(&self) -> f64 {
        if self.noiseless {
            f64::INFINITY
        } else {
            self.snr_db
        }
    }
}

/// Everything a forward pass produces; tensors keep their autograd graph.
pub struct ForwardOutput {
    /// Unclamped reconstruction (B, 3, H, W).
    pub x_hat: Tensor,
    /// Scaled latents y (B, M, h, w).
    pub y: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub likelihoods: Tensor,
    /// −log2 p summed over channels (B, h, w).
    pub position_bits: Tensor,
    /// Unquantized symbol budget η·bits (B, h, w).
    pub k: Tensor,
    /// −log2 p of z̃ summed per image, when the z-rate term is enabled.
    pub z_bits: Option<Tensor>,
    pub maps: Vec<RateAllocationMap>,
    /// Pre-scaling codewords v̇ (B, L, d_max).
    pub v_dot: Tensor,
    /// Decoded latents ŷ (B, M, h, w).
    pub y_hat: Tensor,
    /// Normalized transmitted symbols per image, in stream order.
    pub streams: Vec<Vec<f32>>,
    pub partition: CheckerboardPartition,
}

/// Independent random streams of one forward pass.
struct Rngs {
    z: ChaCha8Rng,
    sim: ChaCha8Rng,
    channel: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Rngs {
            z: stream(1),
            sim: stream(2),
            channel: stream(3),
        }
    }
}

pub struct NtsccModel {
    cfg: ArchConfig,
    dtype: DType,
    pub ga: AnalysisTransform,
    pub gs: SynthesisTransform,
    pub rate: RateScaling,
    pub entropy: EntropyModel,
    pub jscc: JsccCodec,
}

impl NtsccModel {
    /// Builds the model on a store; missing parameters are created from the
    /// store's seed (fresh stores) or reported (loaded stores).
    pub fn new(store: &ParamStore, cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        Ok(NtsccModel {
            cfg: cfg.clone(),
            dtype: store.dtype(),
            ga: AnalysisTransform::new(&root.pp("ga"), cfg)?,
            gs: SynthesisTransform::new(&root.pp("gs"), cfg)?,
            rate: RateScaling::new(&root.pp("rate"), cfg)?,
            entropy: EntropyModel::new(&root.pp("entropy"), cfg)?,
            jscc: JsccCodec::new(&root.pp("jscc"), cfg)?,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn partition(&self, h: usize, w: usize) -> Result<CheckerboardPartition> {
        if self.cfg.contextual {
            entropy::build_partition(h, w, Parity::Even)
        } else {
            CheckerboardPartition::all_anchor(h, w)
        }
    }

    /// ẏ = g_a(x).
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        self.ga.forward(x)
    }

    /// y = ẏ ⊘ q_rate at SQI λ.
    pub fn scaled_latents(&self, x: &Tensor, lambda: f64) -> Result<Tensor> {
        let y_dot = self.analyze(x)?;
        let (_, _, h, w) = y_dot.dims4()?;
        self.rate.apply(&y_dot, lambda, &self.partition(h, w)?)
    }

    pub fn forward(&self, x: &Tensor, opts: &ForwardOptions, seed: u64) -> Result<ForwardOutput> {
        let y = self.scaled_latents(x, opts.lambda)?;
        self.from_latents(&y, opts, seed, None)
    }

    /// Runs everything after rate scaling. `hyper` overrides the hyper
    /// synthesis output (B, 2M, h, w), pinning the z path.
    pub fn from_latents(
        &self,
        y: &Tensor,
        opts: &ForwardOptions,
        seed: u64,
        hyper: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        opts.eta.validate()?;
        if opts.anchor_sim == 0 {
            return Err(Error::InvalidArgument(
                "anchor simulation needs n >= 1".into(),
            ));
        }
        let mut rngs = Rngs::new(seed);
        let (b, m, h, w) = y.dims4()?;
        if m != self.cfg.bottleneck {
            return Err(Error::ShapeMismatch {
                expected: format!("{} latent channels", self.cfg.bottleneck),
                got: format!("{m}"),
            });
        }
        let part = self.partition(h, w)?;
        let (l, d_max, levels) = (h * w, self.cfg.d_max(), self.cfg.rate_levels());
        let eta = opts.eta.tensor(b, h, w, y.dtype())?;

        // hyper path
        let (hyper, z_bits) = match hyper {
            Some(t) => (t.clone(), None),
            None => {
                let z = self.entropy.hyper_analyze(y)?;
                let z = if opts.training {
                    entropy::add_uniform_noise(&z, &mut rngs.z)?
                } else {
                    z
                };
                let z_bits = match self.entropy.factorized() {
                    Some(fp) => Some(
                        entropy::position_bits(&fp.likelihood(&z)?)?
                            .flatten_from(1)?
                            .sum(1)?,
                    ),
                    None => None,
                };
                (self.entropy.hyper_synthesize(&z, h, w)?, z_bits)
            }
        };

        let y_tok = to_tokens(y)?;

        // anchors: parameters from the hyper branch only
        let anchor_params = self.entropy.anchor_params(&hyper)?;
        let lik_a = entropy::likelihood(y, &anchor_params.mu, &anchor_params.sigma)?;
        let k_a = (entropy::position_bits(&lik_a)? * &eta)?;
        let flags = part.anchor_flags();
        let k_a_vals = nn::to_vec_f64(&k_a)?;
        let maps_a = self.allocate(&k_a_vals, b, h, w, |i| flags[i])?;

        // context from (simulated) decoded anchors
        let (params, y_prime) = if part.is_all_anchor() {
            (anchor_params, None)
        } else {
            let y_prime = if opts.context_from_simulated {
                let oh = rate_onehot(&maps_a, levels, y.dtype())?;
                let mask = rate_mask(&maps_a, d_max, y.dtype())?;
                let mut acc: Option<Tensor> = None;
                for _ in 0..opts.anchor_sim {
                    let (yh, _) = self.anchor_roundtrip(
                        &y_tok,
                        &oh,
                        &mask,
                        &maps_a,
                        &part,
                        opts,
                        &mut rngs.sim,
                    )?;
                    acc = Some(match acc {
                        Some(a) => (a + yh)?,
                        None => yh,
                    });
                }
                (acc.expect("n >= 1") / opts.anchor_sim as f64)?
            } else {
                y_tok.clone()
            };
            let grid = part.keep_anchors(&from_tokens(&y_prime, h, w)?)?;
            let ctx = self.entropy.context_features(&grid, &part)?;
            (
                self.entropy.entropy_params(&hyper, Some(&ctx), &part)?,
                Some(y_prime),
            )
        };

        let likelihoods = entropy::likelihood(y, &params.mu, &params.sigma)?;
        let position_bits = entropy::position_bits(&likelihoods)?;
        let k = (&position_bits * &eta)?;
        let maps = self.allocate(&nn::to_vec_f64(&k)?, b, h, w, |_| true)?;

        // transmission of both segments
        let onehot = rate_onehot(&maps, levels, y.dtype())?;
        let hard = rate_mask(&maps, d_max, y.dtype())?;
        let mask = if opts.ste_rate_mask {
            jscc::ste_rate_mask(&hard, &k.reshape((b, l))?)?
        } else {
            hard
        };
        let v_a = self.jscc.encode_anchor(&y_tok, &onehot, &part)?;
        let v_dot = match &y_prime {
            Some(yp) => select_tokens(
                &part,
                &v_a,
                &self.jscc.encode_nonanchor(&y_tok, yp, &onehot, &part)?,
            )?,
            None => v_a,
        };
        let snr = opts.effective_snr();
        let (v, _) = self
            .jscc
            .apply_snr_scaling(&v_dot, snr_table_key(opts), &part)?;
        let s = self.jscc.matcher.forward(&v, &onehot, &mask)?;
        let s = normalize_segments(&s, &part, &maps)?;
        let noise =
            self.segment_noise(&maps, &part, &opts.channel, snr, &mut rngs.channel, None)?;
        let s_hat = (&s + noise.to_dtype(s.dtype())?)?;
        let streams = self.collect_streams(&s, &maps, &part)?;

        // receiver
        let v_hat = self.jscc.dematcher.forward(&s_hat, &onehot, &mask)?;
        let v_hat_dot = self
            .jscc
            .invert_snr_scaling(&v_hat, snr_table_key(opts), &part, None)?;
        let y_hat_a = self.jscc.decode_anchor(&v_hat_dot, &onehot, &part)?;
        let y_hat_tok = if part.is_all_anchor() {
            y_hat_a
        } else {
            let na = self
                .jscc
                .decode_nonanchor(&v_hat_dot, &y_hat_a, &onehot, &part)?;
            select_tokens(&part, &y_hat_a, &na)?
        };
        let y_hat = from_tokens(&y_hat_tok, h, w)?;
        let y_hat_dot = self.rate.invert(&y_hat, opts.lambda, &part)?;
        let x_hat = self.gs.forward(&y_hat_dot)?;

        Ok(ForwardOutput {
            x_hat,
            y: y.clone(),
            mu: params.mu,
            sigma: params.sigma,
            likelihoods,
            position_bits,
            k,
            z_bits,
            maps,
            v_dot,
            y_hat,
            streams,
            partition: part,
        })
    }

    /// Neural-codec pass without the channel: uniform-noise latents decoded
    /// directly by the synthesis transform. Returns the reconstruction, the
    /// per-position bits of y (B, h, w) and the hyper bits per image.
    pub fn ntc_forward(
        &self,
        x: &Tensor,
        lambda: f64,
        seed: u64,
    ) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let mut rngs = Rngs::new(seed);
        let y = self.scaled_latents(x, lambda)?;
        let (_, _, h, w) = y.dims4()?;
        let part = self.partition(h, w)?;
        let z = entropy::add_uniform_noise(&self.entropy.hyper_analyze(&y)?, &mut rngs.z)?;
        let z_bits = match self.entropy.factorized() {
            Some(fp) => Some(
                entropy::position_bits(&fp.likelihood(&z)?)?
                    .flatten_from(1)?
                    .sum(1)?,
            ),
            None => None,
        };
        let hyper = self.entropy.hyper_synthesize(&z, h, w)?;
        let y_noisy = entropy::add_uniform_noise(&y, &mut rngs.sim)?;
        let params = if part.is_all_anchor() {
            self.entropy.anchor_params(&hyper)?
        } else {
            let ctx = self
                .entropy
                .context_features(&part.keep_anchors(&y_noisy)?, &part)?;
            self.entropy.entropy_params(&hyper, Some(&ctx), &part)?
        };
        let bits =
            entropy::position_bits(&entropy::likelihood(&y_noisy, &params.mu, &params.sigma)?)?;
        let x_hat = self
            .gs
            .forward(&self.rate.invert(&y_noisy, lambda, &part)?)?;
        Ok((x_hat, bits, z_bits))
    }

    /// One anchor-only pass through encoder, channel and anchor decoder.
    /// Returns decoded anchor tokens and the normalized anchor symbols.
    #[allow(clippy::too_many_arguments)]
    fn anchor_roundtrip(
        &self,
        y_tok: &Tensor,
        onehot: &Tensor,
        mask: &Tensor,
        maps: &[RateAllocationMap],
        part: &CheckerboardPartition,
        opts: &ForwardOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let snr = opts.effective_snr();
        let v_dot = self.jscc.encode_anchor(y_tok, onehot, part)?;
        let (v, _) = self
            .jscc
            .apply_snr_scaling(&v_dot, snr_table_key(opts), part)?;
        let s = self.jscc.matcher.forward(&v, onehot, mask)?;
        let s = normalize_segments(&s, part, maps)?;
        let noise = self.segment_noise(maps, part, &opts.channel, snr, rng, Some(true))?;
        let s_hat = (&s + noise.to_dtype(s.dtype())?)?;
        let v_hat = self.jscc.dematcher.forward(&s_hat, onehot, mask)?;
        let v_hat_dot = self
            .jscc
            .invert_snr_scaling(&v_hat, snr_table_key(opts), part, None)?;
        Ok((self.jscc.decode_anchor(&v_hat_dot, onehot, part)?, s))
    }

    /// y′_𝒜: mean of `n` independent simulated anchor decodes (tokens).
    pub fn simulate_anchor_decode(
        &self,
        y: &Tensor,
        maps: &[RateAllocationMap],
        opts: &ForwardOptions,
        n: usize,
        seed: u64,
    ) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "anchor simulation needs n >= 1".into(),
            ));
        }
        let (_, _, h, w) = y.dims4()?;
        let part = self.partition(h, w)?;
        let flags = part.anchor_flags();
        let anchor_maps = maps
            .iter()
            .map(|m| {
                let kb = m
                    .kbar()
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| if flags[i] { k } else { 0 })
                    .collect();
                RateAllocationMap::new(h, w, kb, m.bits())
            })
            .collect::<Result<Vec<_>>>()?;
        let y_tok = to_tokens(y)?;
        let oh = rate_onehot(&anchor_maps, self.cfg.rate_levels(), y.dtype())?;
        let mask = rate_mask(&anchor_maps, self.cfg.d_max(), y.dtype())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc: Option<Tensor> = None;
        for _ in 0..n {
            let (yh, _) =
                self.anchor_roundtrip(&y_tok, &oh, &mask, &anchor_maps, &part, opts, &mut rng)?;
            acc = Some(match acc {
                Some(a) => (a + yh)?,
                None => yh,
            });
        }
        Ok((acc.expect("n >= 1") / n as f64)?)
    }

    /// Quantized allocation per image; positions failing `keep` get k̄ = 0.
    fn allocate(
        &self,
        k: &[f64],
        b: usize,
        h: usize,
        w: usize,
        keep: impl Fn(usize) -> bool,
    ) -> Result<Vec<RateAllocationMap>> {
        let l = h * w;
        (0..b)
            .map(|i| {
                let ks: Vec<f64> = (0..l)
                    .map(|p| if keep(p) { k[i * l + p].max(0.0) } else { 0.0 })
                    .collect();
                jscc::compute_rate_allocation(
                    &ks,
                    h,
                    w,
                    1.0,
                    self.cfg.rate_bits,
                    self.cfg.quantizer,
                )
            })
            .collect()
    }

    /// Equalized channel disturbance laid out like the codeword grid
    /// (B, L, d_max). Per image, anchor noise is drawn before non-anchor
    /// noise; `only` restricts to one segment.
    fn segment_noise(
        &self,
        maps: &[RateAllocationMap],
        part: &CheckerboardPartition,
        cfg: &ChannelConfig,
        snr_db: f64,
        rng: &mut ChaCha8Rng,
        only: Option<bool>,
    ) -> Result<Tensor> {
        let d_max = self.cfg.d_max();
        let l = part.len();
        let flags = part.anchor_flags();
        let order = part.stream_order();
        let mut out = vec![0.0f64; maps.len() * l * d_max];
        for seg in [true, false] {
            if only.is_some_and(|o| o != seg) {
                continue;
            }
            for (bi, map) in maps.iter().enumerate() {
                let positions: Vec<usize> =
                    order.iter().copied().filter(|&p| flags[p] == seg).collect();
                let n: usize = positions.iter().map(|&p| map.kbar()[p] as usize).sum();
                if n == 0 {
                    continue;
                }
                let noise = channel::effective_noise(cfg, n, snr_db, rng);
                let mut off = 0;
                for p in positions {
                    let cnt = 2 * map.kbar()[p] as usize;
                    let base = (bi * l + p) * d_max;
                    out[base..base + cnt].copy_from_slice(&noise[off..off + cnt]);
                    off += cnt;
                }
            }
        }
        nn::tensor_from(out, &[maps.len(), l, d_max], DType::F64)
    }

    fn collect_streams(
        &self,
        s: &Tensor,
        maps: &[RateAllocationMap],
        part: &CheckerboardPartition,
    ) -> Result<Vec<Vec<f32>>> {
        let d_max = self.cfg.d_max();
        let flat: Vec<f32> = s.detach().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let l = part.len();
        maps.iter()
            .enumerate()
            .map(|(b, m)| gather_stream(&flat[b * l * d_max..(b + 1) * l * d_max], d_max, m, part))
            .collect()
    }

    /// Receiver from a received stream and the side-info map alone (one image).
    pub fn decode_stream(
        &self,
        received: &[f32],
        map: &RateAllocationMap,
        lambda: f64,
        snr_db: f64,
    ) -> Result<Tensor> {
        let (h, w) = map.dims();
        let part = self.partition(h, w)?;
        let d_max = self.cfg.d_max();
        let grid = scatter_stream(received, d_max, map, &part)?;
        let s_hat = nn::tensor_from(
            grid.iter().map(|&v| v as f64).collect(),
            &[1, h * w, d_max],
            self.dtype,
        )?;
        let maps = std::slice::from_ref(map);
        let onehot = rate_onehot(maps, self.cfg.rate_levels(), self.dtype)?;
        let mask = rate_mask(maps, d_max, self.dtype)?;
        let v_hat = self.jscc.dematcher.forward(&s_hat, &onehot, &mask)?;
        let v_hat_dot = self.jscc.invert_snr_scaling(&v_hat, snr_db, &part, None)?;
        let y_hat_a = self.jscc.decode_anchor(&v_hat_dot, &onehot, &part)?;
        let y_hat_tok = if part.is_all_anchor() {
            y_hat_a
        } else {
            let na = self
                .jscc
                .decode_nonanchor(&v_hat_dot, &y_hat_a, &onehot, &part)?;
            select_tokens(&part, &y_hat_a, &na)?
        };
        let y_hat = from_tokens(&y_hat_tok, h, w)?;
        let y_hat_dot = self.rate.invert(&y_hat, lambda, &part)?;
        self.gs.forward(&y_hat_dot)
    }
}

/// The SNR scaling tables are keyed by the CQI even when the simulated
/// channel is switched to noiseless.
fn snr_table_key(opts: &ForwardOptions) -> f64 {
    opts.snr_db
}

/// Unit average complex power per image and partition segment. Positions
/// outside the transmission mask are already zero.
pub fn normalize_segments(
    s: &Tensor,
    part: &CheckerboardPartition,
    maps: &[RateAllocationMap],
) -> Result<Tensor> {
    let (b, l, _) = s.dims3()?;
    let flags = part.anchor_flags();
    let mut counts_a = Vec::with_capacity(b);
    let mut counts_na = Vec::with_capacity(b);
    for m in maps {
        let (mut a, mut n) = (0u64, 0u64);
        for (i, &k) in m.kbar().iter().enumerate() {
            if flags[i] {
                a += k as u64;
            } else {
                n += k as u64;
            }
        }
        counts_a.push(a.max(1) as f64);
        counts_na.push(n.max(1) as f64);
    }
    let dtype = s.dtype();
    let amask = part.anchor_mask(dtype)?.reshape((1, l, 1))?;
    let energy = s.sqr()?;
    let e_a = energy.broadcast_mul(&amask)?.sum((1, 2))?;
    let e_na = energy
        .broadcast_mul(&amask.affine(-1.0, 1.0)?)?
        .sum((1, 2))?;
    let p_a = (e_a / nn::tensor_from(counts_a, &[b], dtype)?)?.maximum(1e-12)?;
    let p_na = (e_na / nn::tensor_from(counts_na, &[b], dtype)?)?.maximum(1e-12)?;
    let inv_a = p_a.sqrt()?.recip()?.reshape((b, 1, 1))?;
    let inv_na = p_na.sqrt()?.recip()?.reshape((b, 1, 1))?;
    let scale = amask
        .broadcast_mul(&inv_a)?
        .broadcast_add(&amask.affine(-1.0, 1.0)?.broadcast_mul(&inv_na)?)?;
    Ok(s.broadcast_mul(&scale)?)
}

/// Downsampling contract check for raw image tensors.
pub fn check_image_dims(h: usize, w: usize) -> Result<()> {
    if h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 || h == 0 || w == 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {h}x{w} is not a multiple of {DOWNSAMPLING}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageTensor;

    fn toy_image(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<f32> = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(h, w, px)
            .unwrap()
            .to_tensor(DType::F32)
            .unwrap()
    }

    #[test]
    fn forward_shapes_and_stream_identity() {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(0, DType::F32);
        let model = NtsccModel::new(&store, &cfg).unwrap();
        let x = toy_image(64, 48, 1);
        let out = model
            .forward(&x, &ForwardOptions::inference(0.18, 0.25, 10.0), 7)
            .unwrap();
        assert_eq!(out.x_hat.dims(), &[1, 3, 64, 48]);
        assert_eq!(out.streams[0].len() as u64, 2 * out.maps[0].total_symbols());
        let p: f64 = out.streams[0]
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>();
        if !out.streams[0].is_empty() {
            // each segment has unit power per complex symbol, hence so does the whole stream
            assert!((p / (out.streams[0].len() / 2) as f64 - 1.0).abs() < 1e-4);
        }
        let again = model
            .forward(&x, &ForwardOptions::inference(0.18, 0.25, 10.0), 7)
            .unwrap();
        assert_eq!(
            nn::to_vec_f64(&out.x_hat).unwrap(),
            nn::to_vec_f64(&again.x_hat).unwrap()
        );
    }

    #[test]
    fn noiseless_simulation_collapses_to_deterministic_decode() {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(1, DType::F32);
        let model = NtsccModel::new(&store, &cfg).unwrap();
        let x = toy_image(64, 64, 2);
        let mut opts = ForwardOptions::inference(0.72, 0.3, 10.0);
        opts.noiseless = true;
        let out = model.forward(&x, &opts, 0).unwrap();
        let a = model
            .simulate_anchor_decode(&out.y, &out.maps, &opts, 1, 5)
            .unwrap();
        let b = model
            .simulate_anchor_decode(&out.y, &out.maps, &opts, 3, 9)
            .unwrap();
        let (a, b) = (nn::to_vec_f64(&a).unwrap(), nn::to_vec_f64(&b).unwrap());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5);
        }
        assert!(model
            .simulate_anchor_decode(&out.y, &out.maps, &opts, 0, 5)
            .is_err());
    }

    #[test]
    fn decode_stream_matches_forward_receiver() {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(3, DType::F32);
        let model = NtsccModel::new(&store, &cfg).unwrap();
        let x = toy_image(32, 32, 3);
        let mut opts = ForwardOptions::inference(0.36, 0.3, 10.0);
        opts.noiseless = true;
        let out = model.forward(&x, &opts, 0).unwrap();
        let rec = model
            .decode_stream(&out.streams[0], &out.maps[0], 0.36, 10.0)
            .unwrap();
        let (a, b) = (
            nn::to_vec_f64(&out.x_hat).unwrap(),
            nn::to_vec_f64(&rec).unwrap(),
        );
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-4);
        }
    }
}
