//! Contextual variable-rate JSCC: entropy-driven rate allocation, the
//! two-pass token codecs, SNR scaling, rate matching and the side-info /
//! symbol-stream formats.

use std::io::Cursor;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::entropy::CheckerboardPartition;
use crate::error::{Error, Result};
use crate::nn::{self, head_count, LayerNorm, Linear, TransformerLayer};
use crate::params::{Init, ParamPath};
use crate::transform::{ArchConfig, InterpTable, KeyScale};

/// Default side-info spectral efficiency in bits per complex symbol.
pub const SIDEINFO_BITS_PER_SYMBOL: f64 = 2.667;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerVariant {
    /// Q(k) = min(1, ⌊k/4⌋) for k ≤ 32, ⌊k/16⌋ above.
    #[default]
    Literal,
    /// Same with `max` in place of `min` for k ≤ 32.
    Max,
}

/// Piecewise rate quantizer.
pub fn quantize_rate(k: f64, variant: QuantizerVariant) -> Result<u32> {
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rate k = {k} must be finite and >= 0"
        )));
    }
    let q = if k <= 32.0 {
        let f = (k / 4.0).floor();
        match variant {
            QuantizerVariant::Literal => f.min(1.0),
            QuantizerVariant::Max => f.max(1.0),
        }
    } else {
        (k / 16.0).floor()
    };
    Ok(q.min(u32::MAX as f64) as u32)
}

/// Per-position symbol counts k̄ (complex channel uses), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateAllocationMap {
    h: usize,
    w: usize,
    kbar: Vec<u32>,
    q: u32,
}

impl RateAllocationMap {
    pub fn new(h: usize, w: usize, kbar: Vec<u32>, q: u32) -> Result<Self> {
        if kbar.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", h * w),
                got: format!("{}", kbar.len()),
            });
        }
        let max = (1u32 << q) - 1;
        if let Some(&bad) = kbar.iter().find(|&&k| k > max) {
            return Err(Error::IndexOverflow {
                index: bad,
                bits: q,
            });
        }
        Ok(RateAllocationMap { h, w, kbar, q })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn kbar(&self) -> &[u32] {
        &self.kbar
    }

    pub fn bits(&self) -> u32 {
        self.q
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.kbar[row * self.w + col]
    }

    /// Σ k̄: complex channel uses of the payload.
    pub fn total_symbols(&self) -> u64 {
        self.kbar.iter().map(|&k| k as u64).sum()
    }
}

/// k̄_i = min(Q(η · bits_i), 2^q − 1) from per-position bit totals.
pub fn compute_rate_allocation(
    position_bits: &[f64],
    h: usize,
    w: usize,
    eta: f64,
    q: u32,
    variant: QuantizerVariant,
) -> Result<RateAllocationMap> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eta = {eta} must be positive"
        )));
    }
    let max = (1u32 << q) - 1;
    let kbar = position_bits
        .iter()
        .map(|&b| Ok(quantize_rate(eta * b, variant)?.min(max)))
        .collect::<Result<Vec<_>>>()?;
    RateAllocationMap::new(h, w, kbar, q)
}

/// Aggregates per-element likelihoods laid out (C, h, w) into bits per position,
/// then allocates.
pub fn rate_allocation_from_likelihoods(
    likelihoods: &[f64],
    c: usize,
    h: usize,
    w: usize,
    eta: f64,
    q: u32,
    variant: QuantizerVariant,
) -> Result<RateAllocationMap> {
    if likelihoods.len() != c * h * w {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", c * h * w),
            got: format!("{}", likelihoods.len()),
        });
    }
    let mut bits = vec![0.0; h * w];
    for ch in 0..c {
        for (i, b) in bits.iter_mut().enumerate() {
            *b -= likelihoods[ch * h * w + i].log2();
        }
    }
    compute_rate_allocation(&bits, h, w, eta, q, variant)
}

/// PNG-encoded rate map plus its modelled channel cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SideInfoPacket {
    pub png: Vec<u8>,
}

impl SideInfoPacket {
    pub fn byte_len(&self) -> usize {
        self.png.len()
    }

    /// ⌈8 · bytes / bits_per_symbol⌉ complex channel uses.
    pub fn cost_symbols(&self, bits_per_symbol: f64) -> u64 {
        (8.0 * self.png.len() as f64 / bits_per_symbol).ceil() as u64
    }
}

/// 8-bit grayscale PNG, one pixel per latent position, row-major.
pub fn serialize_rate_map(map: &RateAllocationMap) -> Result<SideInfoPacket> {
    if map.q > 8 {
        return Err(Error::IndexOverflow {
            index: (1u32 << map.q) - 1,
            bits: 8,
        });
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.w as u32, map.h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Best);
        let mut wr = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        let px: Vec<u8> = map.kbar.iter().map(|&k| k as u8).collect();
        wr.write_image_data(&px)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(SideInfoPacket { png: out })
}

pub fn deserialize_rate_map(packet: &SideInfoPacket, q: u32) -> Result<RateAllocationMap> {
    let dec = png::Decoder::new(Cursor::new(&packet.png));
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("side info must be 8-bit grayscale".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let kbar = buf[..w * h].iter().map(|&v| v as u32).collect();
    RateAllocationMap::new(h, w, kbar, q)
}

const STREAM_MAGIC: &[u8; 4] = b"NTSS";
const STREAM_VERSION: u32 = 1;

/// Transmitted real-pair symbols with the bookkeeping needed to read them back.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolStream {
    pub q: u32,
    pub data: Vec<f32>,
}

impl SymbolStream {
    /// Complex channel uses.
    pub fn k(&self) -> usize {
        self.data.len() / 2
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&self.q.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 16 || &b[..4] != STREAM_MAGIC {
            return Err(Error::Format("missing symbol stream header".into()));
        }
        let word = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
        if word(4) != STREAM_VERSION {
            return Err(Error::Format(format!(
                "unsupported stream version {}",
                word(4)
            )));
        }
        let k = word(8) as usize;
        let q = word(12);
        if b.len() != 16 + 8 * k {
            return Err(Error::Format(format!(
                "stream declares {k} symbols but carries {} bytes",
                b.len() - 16
            )));
        }
        let data = b[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(SymbolStream { q, data })
    }
}

/// Concatenates the first 2·k̄_i reals of each position in transmission order.
/// `values` is one image's codeword grid, row-major (L, d_max).
pub fn gather_stream(
    values: &[f32],
    d_max: usize,
    map: &RateAllocationMap,
    part: &CheckerboardPartition,
) -> Result<Vec<f32>> {
    check_map(values.len(), d_max, map, part)?;
    let mut out = Vec::with_capacity(2 * map.total_symbols() as usize);
    for i in part.stream_order() {
        let n = 2 * map.kbar[i] as usize;
        out.extend_from_slice(&values[i * d_max..i * d_max + n]);
    }
    Ok(out)
}

/// Inverse of [`gather_stream`], zero-padding the untransmitted dimensions.
pub fn scatter_stream(
    stream: &[f32],
    d_max: usize,
    map: &RateAllocationMap,
    part: &CheckerboardPartition,
) -> Result<Vec<f32>> {
    let l = part.len();
    check_map(l * d_max, d_max, map, part)?;
    if stream.len() as u64 != 2 * map.total_symbols() {
        return Err(Error::MapMismatch(format!(
            "stream carries {} reals, map expects {}",
            stream.len(),
            2 * map.total_symbols()
        )));
    }
    let mut out = vec![0.0f32; l * d_max];
    let mut off = 0;
    for i in part.stream_order() {
        let n = 2 * map.kbar[i] as usize;
        out[i * d_max..i * d_max + n].copy_from_slice(&stream[off..off + n]);
        off += n;
    }
    Ok(out)
}

fn check_map(
    len: usize,
    d_max: usize,
    map: &RateAllocationMap,
    part: &CheckerboardPartition,
) -> Result<()> {
    if map.dims() != part.dims() || len != part.len() * d_max {
        return Err(Error::MapMismatch(format!(
            "map {:?}, partition {:?}, {len} values for d_max {d_max}",
            map.dims(),
            part.dims()
        )));
    }
    if let Some(&k) = map.kbar.iter().find(|&&k| 2 * k as usize > d_max) {
        return Err(Error::InvalidArgument(format!(
            "k̄ = {k} exceeds d_max/2 = {}",
            d_max / 2
        )));
    }
    Ok(())
}

/// (B, C, h, w) -> (B, h·w, C).
pub fn to_tokens(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// (B, h·w, C) -> (B, C, h, w).
pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// (1, L, 1) u8 anchor mask in token order.
pub fn token_anchor_mask(part: &CheckerboardPartition) -> Result<Tensor> {
    Ok(part
        .anchor_mask_u8()?
        .flatten_all()?
        .reshape((1, part.len(), 1))?)
}

/// Token-level partition select: `anchor` at anchor tokens, `other` elsewhere.
pub fn select_tokens(
    part: &CheckerboardPartition,
    anchor: &Tensor,
    other: &Tensor,
) -> Result<Tensor> {
    let m = token_anchor_mask(part)?.broadcast_as(anchor.shape())?;
    Ok(m.where_cond(anchor, other)?)
}

/// One-hot rate indices (B, L, levels).
pub fn rate_onehot(maps: &[RateAllocationMap], levels: usize, dtype: DType) -> Result<Tensor> {
    let l = maps.first().map(|m| m.kbar.len()).unwrap_or(0);
    let mut v = vec![0.0f64; maps.len() * l * levels];
    for (b, m) in maps.iter().enumerate() {
        for (i, &k) in m.kbar.iter().enumerate() {
            v[(b * l + i) * levels + k as usize] = 1.0;
        }
    }
    nn::tensor_from(v, &[maps.len(), l, levels], dtype)
}

/// Hard transmission mask (B, L, d_max): 1 on the first 2·k̄_i reals.
pub fn rate_mask(maps: &[RateAllocationMap], d_max: usize, dtype: DType) -> Result<Tensor> {
    let l = maps.first().map(|m| m.kbar.len()).unwrap_or(0);
    let mut v = vec![0.0f64; maps.len() * l * d_max];
    for (b, m) in maps.iter().enumerate() {
        for (i, &k) in m.kbar.iter().enumerate() {
            let n = (2 * k as usize).min(d_max);
            for x in &mut v[(b * l + i) * d_max..(b * l + i) * d_max + n] {
                *x = 1.0;
            }
        }
    }
    nn::tensor_from(v, &[maps.len(), l, d_max], dtype)
}

/// Straight-through surrogate: forward value is `hard`, gradient flows into
/// the per-position unquantized rate `k` (B, L) via clamp(k/16 − j, 0, 1)
/// for the j-th complex use.
pub fn ste_rate_mask(hard: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (b, l, d) = hard.dims3()?;
    let j: Vec<f64> = (0..d).map(|i| (i / 2) as f64).collect();
    let j = nn::tensor_from(j, &[1, 1, d], hard.dtype())?;
    let soft = (k.reshape((b, l, 1))? / 16.0)?
        .broadcast_sub(&j)?
        .clamp(0.0, 1.0)?;
    Ok((hard + (&soft - soft.detach())?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeyRule {
    /// Keys of the same partition class as the query.
    SameClass,
    /// Anchor keys only.
    Anchors,
}

/// Relative-position table indices (L·L) and the additive window/partition
/// mask (L·L) for a latent grid.
fn attention_layout(
    part: &CheckerboardPartition,
    window: usize,
    rule: KeyRule,
) -> (Vec<u32>, Vec<f64>) {
    let (h, w) = part.dims();
    let flags = part.anchor_flags();
    let r = (window / 2) as isize;
    let side = 2 * r + 1;
    let l = h * w;
    let mut idx = vec![0u32; l * l];
    let mut mask = vec![-1e9; l * l];
    for qi in 0..l {
        let (qr, qc) = ((qi / w) as isize, (qi % w) as isize);
        for ki in 0..l {
            let (kr, kc) = ((ki / w) as isize, (ki % w) as isize);
            let (dr, dc) = (kr - qr, kc - qc);
            if dr.abs() > r || dc.abs() > r {
                continue;
            }
            let ok = match rule {
                KeyRule::SameClass => flags[ki] == flags[qi],
                KeyRule::Anchors => flags[ki],
            };
            if ok {
                idx[qi * l + ki] = ((dr + r) * side + (dc + r)) as u32;
                mask[qi * l + ki] = 0.0;
            }
        }
    }
    (idx, mask)
}

struct JsccLayer {
    layer: TransformerLayer,
    table: Tensor,
    rule: KeyRule,
    cross: bool,
}

impl JsccLayer {
    fn new(p: &ParamPath<'_>, cfg: &ArchConfig, cross: bool, rule: KeyRule) -> Result<Self> {
        let d = cfg.jscc_dim;
        let heads = head_count(d, cfg.channels_per_head);
        let side = 2 * (cfg.jscc_window / 2) + 1;
        Ok(JsccLayer {
            layer: TransformerLayer::new(p, d, heads, cfg.mlp_ratio, cross)?,
            table: p.get("rel_bias", (heads, side * side), Init::Normal { std: 0.02 })?,
            rule,
            cross,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        part: &CheckerboardPartition,
        window: usize,
    ) -> Result<Tensor> {
        let l = part.len();
        let (idx, mask) = attention_layout(part, window, self.rule);
        let idx = Tensor::from_vec(idx, l * l, &Device::Cpu)?;
        let heads = self.table.dim(0)?;
        let mask = nn::tensor_from(mask, &[1, 1, l, l], x.dtype())?;
        let bias = self
            .table
            .index_select(&idx, 1)?
            .reshape((1, heads, l, l))?
            .broadcast_add(&mask)?;
        let ctx = if self.cross { ctx } else { None };
        self.layer.forward(x, ctx, Some(&bias))
    }
}

/// Token transformer mapping per-position vectors to per-position vectors,
/// conditioned on the rate index and optionally on a context grid.
pub struct TokenCodec {
    input: Linear,
    ctx_in: Option<Linear>,
    rate_emb: Tensor,
    layers: Vec<JsccLayer>,
    norm: LayerNorm,
    out: Linear,
    window: usize,
}

impl TokenCodec {
    fn new(
        p: &ParamPath<'_>,
        cfg: &ArchConfig,
        in_dim: usize,
        out_dim: usize,
        blocks: usize,
        ctx_dim: Option<usize>,
    ) -> Result<Self> {
        let d = cfg.jscc_dim;
        let mut layers = Vec::new();
        for i in 0..blocks {
            layers.push(JsccLayer::new(
                &p.pp(format!("self{i}")),
                cfg,
                false,
                KeyRule::SameClass,
            )?);
            if ctx_dim.is_some() {
                layers.push(JsccLayer::new(
                    &p.pp(format!("cross{i}")),
                    cfg,
                    true,
                    KeyRule::Anchors,
                )?);
            }
        }
        Ok(TokenCodec {
            input: Linear::new(&p.pp("input"), in_dim, d)?,
            ctx_in: match ctx_dim {
                Some(c) => Some(Linear::new(&p.pp("ctx_in"), c, d)?),
                None => None,
            },
            rate_emb: p.get(
                "rate_emb",
                (cfg.rate_levels(), d),
                Init::Normal { std: 0.02 },
            )?,
            layers,
            norm: LayerNorm::new(&p.pp("norm"), d)?,
            out: Linear::new(&p.pp("out"), d, out_dim)?,
            window: cfg.jscc_window,
        })
    }

    /// x: (B, L, in), onehot: (B, L, levels), ctx: (B, L, ctx_dim).
    pub fn forward(
        &self,
        x: &Tensor,
        onehot: &Tensor,
        ctx: Option<&Tensor>,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        if l != part.len() {
            return Err(Error::PartitionMismatch(format!(
                "{l} tokens vs {} grid positions",
                part.len()
            )));
        }
        let emb = onehot.broadcast_matmul(&self.rate_emb)?;
        let mut t = (self.input.forward(x)? + emb)?;
        let c = match (&self.ctx_in, ctx) {
            (Some(lin), Some(c)) => Some(lin.forward(c)?),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "context codec called without context".into(),
                ))
            }
            _ => None,
        };
        for layer in &self.layers {
            t = layer.forward(&t, c.as_ref(), part, self.window)?;
        }
        self.out.forward(&self.norm.forward(&t)?)
    }
}

/// FCN producing strictly positive per-dimension scales from a codeword.
pub struct ScaleNet {
    fc1: Linear,
    fc2: Linear,
}

const SCALE_FLOOR: f64 = 1e-6;

impl ScaleNet {
    fn new(p: &ParamPath<'_>, d_max: usize, hidden: usize) -> Result<Self> {
        Ok(ScaleNet {
            fc1: Linear::new(&p.pp("fc1"), d_max, hidden)?,
            // softplus(ln(e - 1)) = 1
            fc2: Linear::with_bias(
                &p.pp("fc2"),
                hidden,
                d_max,
                (std::f64::consts::E - 1.0).ln(),
            )?,
        })
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let t = self.fc2.forward(&self.fc1.forward(v)?.relu()?)?;
        Ok((softplus(&t)? + SCALE_FLOOR)?)
    }
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Per-rate affine head applied before truncation (encoder) or after
/// zero-padding (decoder), masked to the transmitted dimensions.
pub struct RateHead {
    log_scale: Tensor,
    shift: Tensor,
}

impl RateHead {
    fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let (lv, d) = (cfg.rate_levels(), cfg.d_max());
        Ok(RateHead {
            log_scale: p.get("log_scale", (lv, d), Init::Const(0.0))?,
            shift: p.get("shift", (lv, d), Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, v: &Tensor, onehot: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let scale = onehot.broadcast_matmul(&self.log_scale.exp()?)?;
        let shift = onehot.broadcast_matmul(&self.shift)?;
        Ok(((v * scale)? + shift)?.mul(mask)?)
    }
}

/// The transceiver's JSCC parameters. Encoder-side modules live under
/// `jscc.enc_*` and `jscc.match`; everything else is shared or receiver-side.
pub struct JsccCodec {
    pub enc_a: TokenCodec,
    pub enc_na: Option<TokenCodec>,
    pub dec_a: TokenCodec,
    pub dec_na: Option<TokenCodec>,
    pub fcn_a: ScaleNet,
    pub fcn_na: Option<ScaleNet>,
    pub matcher: RateHead,
    pub dematcher: RateHead,
    snr_table: InterpTable,
    log_c_snr: Tensor,
    d_max: usize,
    levels: usize,
}

/// Parameter prefixes the transmitter may edit per image.
pub const ENCODER_PREFIXES: [&str; 3] = ["jscc.enc_a.", "jscc.enc_na.", "jscc.match."];

impl JsccCodec {
    pub fn new(p: &ParamPath<'_>, cfg: &ArchConfig) -> Result<Self> {
        let (m, d) = (cfg.bottleneck, cfg.d_max());
        let ctx = cfg.contextual;
        Ok(JsccCodec {
            enc_a: TokenCodec::new(&p.pp("enc_a"), cfg, m, d, cfg.jscc_anchor_blocks, None)?,
            enc_na: if ctx {
                Some(TokenCodec::new(
                    &p.pp("enc_na"),
                    cfg,
                    m,
                    d,
                    cfg.jscc_context_blocks,
                    Some(m),
                )?)
            } else {
                None
            },
            dec_a: TokenCodec::new(&p.pp("dec_a"), cfg, d, m, cfg.jscc_anchor_blocks, None)?,
            dec_na: if ctx {
                Some(TokenCodec::new(
                    &p.pp("dec_na"),
                    cfg,
                    d,
                    m,
                    cfg.jscc_context_blocks,
                    Some(m),
                )?)
            } else {
                None
            },
            fcn_a: ScaleNet::new(&p.pp("snr.fcn_a"), d, cfg.snr_fcn_hidden)?,
            fcn_na: if ctx {
                Some(ScaleNet::new(&p.pp("snr.fcn_na"), d, cfg.snr_fcn_hidden)?)
            } else {
                None
            },
            matcher: RateHead::new(&p.pp("match"), cfg)?,
            dematcher: RateHead::new(&p.pp("dematch"), cfg)?,
            snr_table: InterpTable::new(cfg.snr_grid_db.clone(), KeyScale::Linear, "snr_db"),
            log_c_snr: p.get("snr.log_c", cfg.snr_grid_db.len(), Init::Const(0.0))?,
            d_max: d,
            levels: cfg.rate_levels(),
        })
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn snr_table(&self) -> &InterpTable {
        &self.snr_table
    }

    /// c_global,ν.
    pub fn global_snr_scalar(&self, nu_db: f64) -> Result<f64> {
        self.snr_table
            .value(&nn::to_vec_f64(&self.log_c_snr)?, nu_db)
    }

    fn enc_na(&self) -> Result<&TokenCodec> {
        self.enc_na.as_ref().ok_or_else(|| {
            Error::InvalidArgument("non-contextual codec has no non-anchor encoder".into())
        })
    }

    pub fn encode_anchor(
        &self,
        y: &Tensor,
        onehot: &Tensor,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        self.enc_a.forward(y, onehot, None, part)
    }

    /// Cross-attention keys/values come from `y_prime_anchor` only.
    pub fn encode_nonanchor(
        &self,
        y: &Tensor,
        y_prime_anchor: &Tensor,
        onehot: &Tensor,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        self.enc_na()?
            .forward(y, onehot, Some(y_prime_anchor), part)
    }

    pub fn decode_anchor(
        &self,
        v: &Tensor,
        onehot: &Tensor,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        self.dec_a.forward(v, onehot, None, part)
    }

    pub fn decode_nonanchor(
        &self,
        v: &Tensor,
        y_hat_anchor: &Tensor,
        onehot: &Tensor,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        self.dec_na
            .as_ref()
            .ok_or_else(|| {
                Error::InvalidArgument("non-contextual codec has no non-anchor decoder".into())
            })?
            .forward(v, onehot, Some(y_hat_anchor), part)
    }

    /// q_SNR = c_global,ν · FCN(v), per token and dimension.
    pub fn snr_scale(
        &self,
        v: &Tensor,
        nu_db: f64,
        part: &CheckerboardPartition,
    ) -> Result<Tensor> {
        let c = self.snr_table.value_tensor(&self.log_c_snr, nu_db)?;
        let fa = self.fcn_a.forward(v)?;
        let f = match &self.fcn_na {
            Some(fna) if !part.is_all_anchor() => select_tokens(part, &fa, &fna.forward(v)?)?,
            _ => fa,
        };
        Ok(f.broadcast_mul(&c.reshape((1, 1, 1))?)?)
    }

    /// v = v̇ ⊘ q_SNR; returns (v, q_SNR).
    pub fn apply_snr_scaling(
        &self,
        v_dot: &Tensor,
        nu_db: f64,
        part: &CheckerboardPartition,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.snr_scale(v_dot, nu_db, part)?;
        Ok(((v_dot / &q)?, q))
    }

    /// v̂̇ = v̂ ⊙ q_SNR, with q supplied or recomputed from v̂.
    pub fn invert_snr_scaling(
        &self,
        v_hat: &Tensor,
        nu_db: f64,
        part: &CheckerboardPartition,
        q: Option<&Tensor>,
    ) -> Result<Tensor> {
        match q {
            Some(q) => Ok((v_hat * q)?),
            None => Ok((v_hat * self.snr_scale(v_hat, nu_db, part)?)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{build_partition, Parity};
    use crate::params::ParamStore;
    use proptest::prelude::*;

    #[test]
    fn quantizer_table() {
        let q = |k| quantize_rate(k, QuantizerVariant::Literal).unwrap();
        assert_eq!(
            [q(3.0), q(4.0), q(20.0), q(32.0), q(33.0), q(48.0)],
            [0, 1, 1, 1, 2, 3]
        );
        assert!(quantize_rate(-1.0, QuantizerVariant::Literal).is_err());
        assert_eq!(quantize_rate(20.0, QuantizerVariant::Max).unwrap(), 5);
    }

    proptest! {
        #[test]
        fn quantizer_monotone(a in 0.0f64..1e4, b in 0.0f64..1e4) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_rate(lo, QuantizerVariant::Literal).unwrap()
                <= quantize_rate(hi, QuantizerVariant::Literal).unwrap());
        }

        #[test]
        fn allocation_monotone_in_eta(bits in proptest::collection::vec(0.0f64..400.0, 16), e1 in 0.01f64..2.0, de in 0.0f64..2.0) {
            let m1 = compute_rate_allocation(&bits, 4, 4, e1, 4, QuantizerVariant::Literal).unwrap();
            let m2 = compute_rate_allocation(&bits, 4, 4, e1 + de, 4, QuantizerVariant::Literal).unwrap();
            for (a, b) in m1.kbar().iter().zip(m2.kbar()) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn stream_length_identity(kbar in proptest::collection::vec(0u32..16, 12)) {
            let part = build_partition(3, 4, Parity::Even).unwrap();
            let map = RateAllocationMap::new(3, 4, kbar, 4).unwrap();
            let vals: Vec<f32> = (0..12 * 30).map(|i| i as f32).collect();
            let s = gather_stream(&vals, 30, &map, &part).unwrap();
            prop_assert_eq!(s.len() as u64, 2 * map.total_symbols());
            let back = scatter_stream(&s, 30, &map, &part).unwrap();
            for i in 0..12 {
                for j in 0..30 {
                    let expect = if j < 2 * map.kbar()[i] as usize { vals[i * 30 + j] } else { 0.0 };
                    prop_assert_eq!(back[i * 30 + j], expect);
                }
            }
        }

        #[test]
        fn side_info_round_trip(kbar in proptest::collection::vec(0u32..16, 35)) {
            let map = RateAllocationMap::new(5, 7, kbar, 4).unwrap();
            let pkt = serialize_rate_map(&map).unwrap();
            prop_assert_eq!(deserialize_rate_map(&pkt, 4).unwrap(), map);
        }
    }

    #[test]
    fn allocation_examples() {
        let lik = vec![0.5; 4 * 2 * 2];
        let m = rate_allocation_from_likelihoods(&lik, 4, 2, 2, 1.0, 4, QuantizerVariant::Literal)
            .unwrap();
        assert_eq!(m.kbar(), &[1, 1, 1, 1]);
        let ones = vec![1.0; 4 * 2 * 2];
        let m0 =
            rate_allocation_from_likelihoods(&ones, 4, 2, 2, 1.0, 4, QuantizerVariant::Literal)
                .unwrap();
        assert_eq!(m0.total_symbols(), 0);
        // saturation at 2^q - 1
        let big = compute_rate_allocation(&[1e6], 1, 1, 1.0, 4, QuantizerVariant::Literal).unwrap();
        assert_eq!(big.kbar(), &[15]);
        assert!(matches!(
            RateAllocationMap::new(1, 1, vec![16], 4),
            Err(Error::IndexOverflow { .. })
        ));
    }

    #[test]
    fn rate_match_examples() {
        let part = build_partition(2, 2, Parity::Even).unwrap();
        let vals = vec![1.0f32; 4 * 30];
        let zero = RateAllocationMap::new(2, 2, vec![0; 4], 4).unwrap();
        assert!(gather_stream(&vals, 30, &zero, &part).unwrap().is_empty());
        let one = RateAllocationMap::new(2, 2, vec![0, 1, 0, 0], 4).unwrap();
        assert_eq!(gather_stream(&vals, 30, &one, &part).unwrap().len(), 2);
        let too_big = RateAllocationMap::new(2, 2, vec![0, 15, 0, 0], 4).unwrap();
        assert!(gather_stream(&vals[..4 * 20], 20, &too_big, &part).is_err());
        // wrong stream length
        assert!(matches!(
            scatter_stream(&[1.0; 4], 30, &one, &part),
            Err(Error::MapMismatch(_))
        ));
    }

    #[test]
    fn side_info_constant_map_compresses() {
        let map = RateAllocationMap::new(32, 48, vec![3; 32 * 48], 4).unwrap();
        let pkt = serialize_rate_map(&map).unwrap();
        assert!(pkt.byte_len() * 8 < 4 * 32 * 48, "{} bytes", pkt.byte_len());
        assert_eq!(
            pkt.cost_symbols(2.667),
            (8.0 * pkt.byte_len() as f64 / 2.667).ceil() as u64
        );
    }

    #[test]
    fn symbol_stream_bytes_round_trip() {
        let s = SymbolStream {
            q: 4,
            data: vec![0.5, -1.25, 3.0, 0.0],
        };
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(SymbolStream::from_bytes(&b).unwrap(), s);
        assert!(SymbolStream::from_bytes(&b[..20]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(SymbolStream::from_bytes(&bad).is_err());
    }

    fn toy_codec() -> (ParamStore, JsccCodec, ArchConfig) {
        let cfg = ArchConfig::toy();
        let store = ParamStore::new(2, DType::F64);
        let codec = JsccCodec::new(&store.root().pp("jscc"), &cfg).unwrap();
        (store, codec, cfg)
    }

    fn random_tokens(n: usize, l: usize, d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n * l * d)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        nn::tensor_from(v, &[n, l, d], DType::F64).unwrap()
    }

    #[test]
    fn anchor_codewords_ignore_context_and_nonanchor_codewords_use_it() {
        let (_s, codec, cfg) = toy_codec();
        let part = build_partition(4, 4, Parity::Even).unwrap();
        let map = RateAllocationMap::new(4, 4, (0..16).map(|i| i % 4).collect(), 4).unwrap();
        let oh = rate_onehot(std::slice::from_ref(&map), cfg.rate_levels(), DType::F64).unwrap();
        let y = random_tokens(1, 16, cfg.bottleneck, 1);
        let yp = random_tokens(1, 16, cfg.bottleneck, 2);
        let va = codec.encode_anchor(&y, &oh, &part).unwrap();
        assert_eq!(va.dims(), &[1, 16, cfg.d_max()]);
        let vna1 = nn::to_vec_f64(&codec.encode_nonanchor(&y, &yp, &oh, &part).unwrap()).unwrap();
        let vna0 = nn::to_vec_f64(
            &codec
                .encode_nonanchor(&y, &yp.zeros_like().unwrap(), &oh, &part)
                .unwrap(),
        )
        .unwrap();
        let d = cfg.d_max();
        let flags = part.anchor_flags();
        let mut changed = false;
        for i in 0..16 {
            if !flags[i] {
                changed |= vna1[i * d..(i + 1) * d] != vna0[i * d..(i + 1) * d];
            }
        }
        assert!(changed);
        // anchor codewords do not see non-anchor inputs
        let mut yv = nn::to_vec_f64(&y).unwrap();
        for i in 0..16 {
            if !flags[i] {
                for c in 0..cfg.bottleneck {
                    yv[i * cfg.bottleneck + c] += 1.0;
                }
            }
        }
        let y2 = nn::tensor_from(yv, &[1, 16, cfg.bottleneck], DType::F64).unwrap();
        let a1 = nn::to_vec_f64(&va).unwrap();
        let a2 = nn::to_vec_f64(&codec.encode_anchor(&y2, &oh, &part).unwrap()).unwrap();
        for i in 0..16 {
            if flags[i] {
                assert_eq!(a1[i * d..(i + 1) * d], a2[i * d..(i + 1) * d]);
            }
        }
    }

    #[test]
    fn snr_scaling_round_trip_and_identity() {
        let (_s, codec, cfg) = toy_codec();
        let part = build_partition(3, 3, Parity::Even).unwrap();
        let v = random_tokens(2, 9, cfg.d_max(), 5);
        let (scaled, q) = codec.apply_snr_scaling(&v, 7.5, &part).unwrap();
        let back = codec
            .invert_snr_scaling(&scaled, 7.5, &part, Some(&q))
            .unwrap();
        let (a, b) = (nn::to_vec_f64(&v).unwrap(), nn::to_vec_f64(&back).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert!(nn::to_vec_f64(&q).unwrap().iter().all(|&x| x > 0.0));
        assert!(codec.apply_snr_scaling(&v, 20.0, &part).is_err());
        assert!((codec.global_snr_scalar(4.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_layout_rules() {
        let part = build_partition(3, 3, Parity::Even).unwrap();
        let (_, same) = attention_layout(&part, 3, KeyRule::SameClass);
        let (_, anch) = attention_layout(&part, 3, KeyRule::Anchors);
        let flags = part.anchor_flags();
        for q in 0..9 {
            // every query keeps at least one key
            assert!(same[q * 9..q * 9 + 9].iter().any(|&v| v == 0.0));
            assert!(anch[q * 9..q * 9 + 9].iter().any(|&v| v == 0.0));
            for k in 0..9 {
                if anch[q * 9 + k] == 0.0 {
                    assert!(flags[k]);
                }
                if same[q * 9 + k] == 0.0 {
                    assert_eq!(flags[k], flags[q]);
                }
            }
        }
    }
}
