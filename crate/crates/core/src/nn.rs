//! Network building blocks shared by the transforms, the entropy model and
//! the JSCC codec. Image-shaped activations are NCHW; token sequences are
//! (batch, tokens, dim).

use candle_core::{DType, Device, IndexOp, Module, Tensor, D};
use candle_nn::Linear as CLinear;

use crate::error::Result;
use crate::params::{Init, ParamPath};

pub struct Linear {
    inner: CLinear,
}

impl Linear {
    pub fn new(p: &ParamPath<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = p.get("weight", (out_dim, in_dim), Init::fan_in(in_dim))?;
        let b = p.get("bias", out_dim, Init::Const(0.0))?;
        Ok(Linear {
            inner: CLinear::new(w, Some(b)),
        })
    }

    /// Linear layer with an explicit constant bias init (used for positive heads).
    pub fn with_bias(p: &ParamPath<'_>, in_dim: usize, out_dim: usize, bias: f64) -> Result<Self> {
        let w = p.get("weight", (out_dim, in_dim), Init::fan_in(in_dim))?;
        let b = p.get("bias", out_dim, Init::Const(bias))?;
        Ok(Linear {
            inner: CLinear::new(w, Some(b)),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamPath<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = p.get(
            "weight",
            (out_ch, in_ch, kernel, kernel),
            Init::fan_in(in_ch * kernel * kernel),
        )?;
        let bias = p.get("bias", out_ch, Init::Const(0.0))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_with_bias(x, &self.weight, &self.bias, self.padding, self.stride)
    }
}

pub(crate) fn conv_with_bias(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let y = conv2d(x, weight, padding, stride)?;
    let b = bias.reshape((1, bias.dim(0)?, 1, 1))?;
    Ok(y.broadcast_add(&b)?)
}

/// Square-kernel 2-D convolution as im2col + matmul, built from primitive
/// ops. Candle 0.8's fused conv computes wrong weight gradients for batches
/// larger than one (its backward passes a non-contiguous kernel to a CPU
/// routine that assumes contiguity), so the fused op is not used in any
/// differentiated path.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || stride == 0 {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("square kernel over {c} input channels"),
            got: format!("{:?}", weight.dims()),
        });
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(crate::Error::DimensionMismatch(format!(
            "{h}x{w} input smaller than {k}x{k} kernel"
        )));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    if k == 1 && stride == 1 && padding == 0 {
        let y = weight
            .reshape((o, c))?
            .broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        return Ok(y.reshape((b, o, h, w))?);
    }
    // extra bottom/right zeros so that every strided window slice has s*ho rows
    let xp = x
        .pad_with_zeros(2, padding, padding + stride)?
        .pad_with_zeros(3, padding, padding + stride)?;
    let mut cols = Vec::with_capacity(k * k);
    for di in 0..k {
        for dj in 0..k {
            let mut t = xp.narrow(2, di, stride * ho)?.narrow(3, dj, stride * wo)?;
            if stride > 1 {
                t = t
                    .reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?;
            }
            cols.push(t);
        }
    }
    let col = Tensor::stack(&cols, 2)?.reshape((b, c * k * k, ho * wo))?;
    let y = weight.reshape((o, c * k * k))?.broadcast_matmul(&col)?;
    Ok(y.reshape((b, o, ho, wo))?)
}

/// Layer normalisation over the last dimension, composed from primitive ops
/// so that it participates in backpropagation.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamPath<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: p.get("weight", dim, Init::Const(1.0))?,
            bias: p.get("bias", dim, Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(p: &ParamPath<'_>, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&p.pp("fc1"), dim, dim * ratio)?,
            fc2: Linear::new(&p.pp("fc2"), dim * ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Number of heads: one per `channels_per_head` channels, adjusted down to a divisor of `dim`.
pub fn head_count(dim: usize, channels_per_head: usize) -> usize {
    let mut h = (dim / channels_per_head.max(1)).max(1);
    while dim % h != 0 {
        h -= 1;
    }
    h
}

/// Multi-head attention between a query sequence and a key/value sequence,
/// with an optional additive bias broadcastable to (batch, heads, Lq, Lk).
pub struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(p: &ParamPath<'_>, dim: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            kv: Linear::new(&p.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, _) = x.dims3()?;
        let lk = ctx.dim(1)?;
        let hd = self.dim / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, lq, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv = self.kv.forward(ctx)?.reshape((b, lk, 2, self.heads, hd))?;
        let k = kv.i((.., .., 0))?.transpose(1, 2)?.contiguous()?;
        let v = kv.i((.., .., 1))?.transpose(1, 2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, lq, self.dim))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer layer; with a context sequence it becomes a
/// cross-attention layer (queries from `x`, keys/values from `ctx`).
pub struct TransformerLayer {
    norm1: LayerNorm,
    norm_ctx: Option<LayerNorm>,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(
        p: &ParamPath<'_>,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        cross: bool,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            norm_ctx: if cross {
                Some(LayerNorm::new(&p.pp("norm_ctx"), dim)?)
            } else {
                None
            },
            attn: Attention::new(&p.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), dim, mlp_ratio)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        ctx: Option<&Tensor>,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let a = match (ctx, &self.norm_ctx) {
            (Some(c), Some(n)) => self.attn.forward(&h, &n.forward(c)?, bias)?,
            _ => self.attn.forward(&h, &h, bias)?,
        };
        let x = (x + a)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

/// Neighbourhood index table: for every query pixel the `kh*kw` key pixels
/// of a window centred on it, shifted inward at the borders so that every
/// window lies inside the image.
pub fn neighbourhood_indices(h: usize, w: usize, window: usize) -> (Vec<u32>, usize) {
    let kh = window.min(h);
    let kw = window.min(w);
    let mut idx = Vec::with_capacity(h * w * kh * kw);
    for r in 0..h {
        let r0 = r.saturating_sub(kh / 2).min(h - kh);
        for c in 0..w {
            let c0 = c.saturating_sub(kw / 2).min(w - kw);
            for dr in 0..kh {
                for dc in 0..kw {
                    idx.push(((r0 + dr) * w + (c0 + dc)) as u32);
                }
            }
        }
    }
    (idx, kh * kw)
}

/// Sliding-window (neighbourhood) self-attention on an NHWC token grid.
pub struct NeighbourhoodAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
    window: usize,
}

/// Upper bound on gathered key elements per chunk of query rows.
const GATHER_BUDGET: usize = 1 << 22;

impl NeighbourhoodAttention {
    pub fn new(p: &ParamPath<'_>, dim: usize, heads: usize, window: usize) -> Result<Self> {
        Ok(NeighbourhoodAttention {
            qkv: Linear::new(&p.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            heads,
            dim,
            window,
        })
    }

    /// `x`: (B, H*W, C) tokens in row-major order.
    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, l, 3, self.heads, hd))?;
        let q = qkv.i((.., .., 0))?.contiguous()?;
        let k = qkv.i((.., .., 1))?.contiguous()?;
        let v = qkv.i((.., .., 2))?.contiguous()?;
        let (idx, kk) = neighbourhood_indices(h, w, self.window);
        let per_row = w * kk * b * self.dim;
        let rows_per_chunk = (GATHER_BUDGET / per_row.max(1)).clamp(1, h);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::new();
        let mut r = 0;
        while r < h {
            let r1 = (r + rows_per_chunk).min(h);
            let (l0, l1) = (r * w, r1 * w);
            let n = l1 - l0;
            let chunk_idx = Tensor::from_slice(&idx[l0 * kk..l1 * kk], n * kk, x.device())?;
            // (B, n*kk, heads, hd) -> (B, n, kk, heads, hd) -> (B, n, heads, kk, hd)
            let kn = k
                .index_select(&chunk_idx, 1)?
                .reshape((b, n, kk, self.heads, hd))?
                .transpose(2, 3)?
                .contiguous()?
                .reshape((b * n * self.heads, kk, hd))?;
            let vn = v
                .index_select(&chunk_idx, 1)?
                .reshape((b, n, kk, self.heads, hd))?
                .transpose(2, 3)?
                .contiguous()?
                .reshape((b * n * self.heads, kk, hd))?;
            let qn = q
                .narrow(1, l0, n)?
                .contiguous()?
                .reshape((b * n * self.heads, 1, hd))?;
            let scores = (qn.matmul(&kn.t()?)? * scale)?;
            let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let o = attn.matmul(&vn)?.reshape((b, n, self.dim))?;
            outs.push(o);
            r = r1;
        }
        let out = if outs.len() == 1 {
            outs.pop().expect("one chunk")
        } else {
            Tensor::cat(&outs, 1)?
        };
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer layer with neighbourhood self-attention.
pub struct NeighbourhoodLayer {
    norm1: LayerNorm,
    attn: NeighbourhoodAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl NeighbourhoodLayer {
    pub fn new(
        p: &ParamPath<'_>,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(NeighbourhoodLayer {
            norm1: LayerNorm::new(&p.pp("norm1"), dim)?,
            attn: NeighbourhoodAttention::new(&p.pp("attn"), dim, heads, window)?,
            norm2: LayerNorm::new(&p.pp("norm2"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), dim, mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(x)?, h, w)?;
        let x = (x + a)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

/// Residual transformer block: neighbourhood-attention layers followed by a
/// 3x3 convolution, wrapped in a skip connection. Operates on NCHW maps.
pub struct ResTb {
    layers: Vec<NeighbourhoodLayer>,
    conv: Conv2d,
}

impl ResTb {
    pub fn new(
        p: &ParamPath<'_>,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                NeighbourhoodLayer::new(&p.pp(format!("layer{i}")), dim, heads, window, mlp_ratio)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ResTb {
            layers,
            conv: Conv2d::new(&p.pp("conv"), dim, dim, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let mut t = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        for layer in &self.layers {
            t = layer.forward(&t, h, w)?;
        }
        let y = t.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((self.conv.forward(&y)? + x)?)
    }
}

/// Depth-to-space rearrangement: (B, C*r*r, H, W) -> (B, C, H*r, W*r).
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// 2x upsampling: convolution to 4x channels followed by depth-to-space.
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(p: &ParamPath<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Upsample {
            conv: Conv2d::new(&p.pp("conv"), in_ch, out_ch * 4, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        pixel_shuffle(&self.conv.forward(x)?, 2)
    }
}

/// Scalar tensor on the CPU in the given dtype.
pub fn scalar(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Row-major vector to tensor of the given shape and dtype.
pub fn tensor_from(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Flattens any tensor into a `Vec<f64>`.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        d: (usize, usize, usize, usize),
        o: usize,
        k: usize,
        p: usize,
        s: usize,
    ) -> Vec<f64> {
        let (b, c, h, wd) = d;
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut y = vec![0.0; b * o * ho * wo];
        for n in 0..b {
            for oc in 0..o {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let (r, q) = (
                                        (i * s + di) as isize - p as isize,
                                        (j * s + dj) as isize - p as isize,
                                    );
                                    if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((n * c + ic) * h + r as usize) * wd + q as usize]
                                        * w[((oc * c + ic) * k + di) * k + dj];
                                }
                            }
                        }
                        y[((n * o + oc) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_sum_and_weight_gradient() {
        let dev = Device::Cpu;
        let (b, c, h, w, o) = (2, 3, 7, 6, 4);
        let xs: Vec<f64> = (0..b * c * h * w)
            .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
            .collect();
        for &(k, p, s) in &[(3, 1, 1), (5, 2, 2), (1, 0, 1), (3, 0, 2)] {
            let ws: Vec<f64> = (0..o * c * k * k)
                .map(|i| ((i * 13 % 29) as f64 / 14.0) - 1.0)
                .collect();
            let x = Tensor::from_vec(xs.clone(), (b, c, h, w), &dev).unwrap();
            let wv = candle_core::Var::from_tensor(
                &Tensor::from_vec(ws.clone(), (o, c, k, k), &dev).unwrap(),
            )
            .unwrap();
            let y = conv2d(&x, wv.as_tensor(), p, s).unwrap();
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            let want = naive_conv(&xs, &ws, (b, c, h, w), o, k, p, s);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "k{k} p{p} s{s}: {g} vs {e}");
            }
            // loss = sum(y * r) with fixed r; compare dL/dw to finite differences
            let r: Vec<f64> = (0..want.len())
                .map(|i| ((i * 7 % 11) as f64) - 5.0)
                .collect();
            let rt = Tensor::from_vec(r.clone(), y.shape(), &dev).unwrap();
            let g = (y * rt).unwrap().sum_all().unwrap().backward().unwrap();
            let gw: Vec<f64> = g
                .get(&wv)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let loss = |ws: &[f64]| -> f64 {
                naive_conv(&xs, ws, (b, c, h, w), o, k, p, s)
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            for idx in [0, ws.len() / 2, ws.len() - 1] {
                let mut wp = ws.clone();
                wp[idx] += 1e-4;
                let mut wm = ws.clone();
                wm[idx] -= 1e-4;
                let fd = (loss(&wp) - loss(&wm)) / 2e-4;
                assert!(
                    (fd - gw[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "k{k} s{s} idx {idx}: {fd} vs {}",
                    gw[idx]
                );
            }
        }
    }

    #[test]
    fn neighbourhood_windows_stay_inside() {
        let (idx, kk) = neighbourhood_indices(4, 5, 3);
        assert_eq!(kk, 9);
        // corner (0,0) window starts at (0,0)
        assert_eq!(&idx[..3], &[0, 1, 2]);
        // every index valid
        assert!(idx.iter().all(|&i| (i as usize) < 20));
        // window larger than the grid covers the grid exactly
        let (idx, kk) = neighbourhood_indices(2, 2, 7);
        assert_eq!(kk, 4);
        assert_eq!(&idx[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        // 4 channels of a 1x1 map become one 2x2 map in raster order.
        let x = Tensor::new(&[1f32, 2., 3., 4.], &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 1, 1))
            .unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1., 2., 3., 4.]);
    }

    #[test]
    fn neighbourhood_attention_matches_brute_force() {
        let store = ParamStore::new(3, DType::F64);
        let (h, w, dim, heads) = (6usize, 5usize, 8usize, 2usize);
        let att = NeighbourhoodAttention::new(&store.root(), dim, heads, 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, h * w, dim), &Device::Cpu).unwrap();
        let got = to_vec_f64(&att.forward(&x, h, w).unwrap()).unwrap();

        let qkv = to_vec_f64(&att.qkv.forward(&x).unwrap()).unwrap();
        let hd = dim / heads;
        let at = |l: usize, which: usize, head: usize, j: usize| {
            qkv[l * 3 * dim + which * dim + head * hd + j]
        };
        let (idx, kk) = neighbourhood_indices(h, w, 3);
        let mut pre = vec![0.0; h * w * dim];
        for l in 0..h * w {
            for head in 0..heads {
                let nb = &idx[l * kk..(l + 1) * kk];
                let s: Vec<f64> = nb
                    .iter()
                    .map(|&n| {
                        (0..hd)
                            .map(|j| at(l, 0, head, j) * at(n as usize, 1, head, j))
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..hd {
                    pre[l * dim + head * hd + j] = nb
                        .iter()
                        .zip(&e)
                        .map(|(&n, a)| a / z * at(n as usize, 2, head, j))
                        .sum();
                }
            }
        }
        let pre_t = Tensor::from_vec(pre, (1, h * w, dim), &Device::Cpu).unwrap();
        let want = to_vec_f64(&att.proj.forward(&pre_t).unwrap()).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn head_rule() {
        assert_eq!(head_count(48, 16), 3);
        assert_eq!(head_count(80, 16), 5);
        assert_eq!(head_count(8, 16), 1);
        assert_eq!(head_count(40, 16), 2);
    }
}
