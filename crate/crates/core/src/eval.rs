//! Metrics, sweeps and diagnostics: PSNR, CBR accounting, BD-rate,
//! rate-SNR-distortion surfaces and cosine-similarity model comparisons.

use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::jscc::{serialize_rate_map, SIDEINFO_BITS_PER_SYMBOL};
use crate::model::{ForwardOptions, ForwardOutput, NtsccModel};

/// Reported PSNR of identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn check_same(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR on [0, 1] pixels; the reconstruction is clamped first.
pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    check_same(x, x_hat)?;
    let se: f64 = x
        .pixels()
        .iter()
        .zip(x_hat.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - (b as f64).clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / x.pixels().len() as f64))
}

/// PSNR restricted to pixels whose mask value exceeds 0.5.
pub fn masked_psnr(x: &ImageTensor, x_hat: &ImageTensor, mask: &[f32]) -> Result<f64> {
    check_same(x, x_hat)?;
    if mask.len() != x.height() * x.width() {
        return Err(Error::DimensionMismatch("mask does not match image".into()));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m > 0.5 {
            for c in 0..3 {
                let d = x.pixels()[i * 3 + c] as f64
                    - (x_hat.pixels()[i * 3 + c] as f64).clamp(0.0, 1.0);
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

/// ρ = (stream symbols + side-info symbols) / (H·W·3).
pub fn cbr(stream_symbols: u64, sideinfo_symbols: u64, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    Ok((stream_symbols + sideinfo_symbols) as f64 / (height * width * 3) as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Differentiable structural distortion 1 − SSIM (7x7 gaussian window,
/// σ = 1.5, valid filtering, per-channel, averaged). Inputs are (B, 3, H, W)
/// on [0, 1].
pub fn ssim_distortion(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mut k = Vec::with_capacity(c * SSIM_WINDOW * SSIM_WINDOW);
    for _ in 0..c {
        for a in &g {
            for b in &g {
                k.push(a * b);
            }
        }
    }
    let kernel =
        Tensor::from_vec(k, (c, 1, SSIM_WINDOW, SSIM_WINDOW), &Device::Cpu)?.to_dtype(x.dtype())?;
    let filt = |t: &Tensor| t.conv2d(&kernel, 0, 1, 1, c);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mx = filt(x)?;
    let my = filt(y)?;
    let sxx = (filt(&x.sqr()?)? - mx.sqr()?)?;
    let syy = (filt(&y.sqr()?)? - my.sqr()?)?;
    let sxy = (filt(&(x * y)?)? - (&mx * &my)?)?;
    let num = (((&mx * &my)? * 2.0)? + c1)?.mul(&((sxy * 2.0)? + c2)?)?;
    let den = ((mx.sqr()? + my.sqr()?)? + c1)?.mul(&((sxx + syy)? + c2)?)?;
    let ssim = (num / den)?.mean_all()?;
    Ok(ssim.affine(-1.0, 1.0)?)
}

/// SSIM of two images (reconstruction clamped), same filter as the proxy.
pub fn ssim(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    check_same(x, x_hat)?;
    let a = x.to_tensor(DType::F64)?;
    let b = x_hat.to_tensor(DType::F64)?.clamp(0.0, 1.0)?;
    Ok(1.0 - ssim_distortion(&a, &b)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub image_id: String,
    pub lambda: f64,
    pub eta: f64,
    pub snr_db: f64,
    pub rho: f64,
    pub psnr_db: f64,
    /// Side-info share of the channel uses.
    pub sideinfo_frac: f64,
}

/// RD points at fixed test SNR, strictly increasing in ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct RDCurve {
    points: Vec<(f64, f64)>,
}

impl RDCurve {
    /// (ρ, PSNR) pairs; sorted by ρ, which must be strictly increasing and positive.
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points
            .iter()
            .any(|(r, q)| !(r.is_finite() && q.is_finite() && *r > 0.0))
        {
            return Err(Error::InvalidArgument(
                "RD points need finite positive rate".into(),
            ));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(Error::InvalidArgument(
                "RD curve rates must be strictly increasing".into(),
            ));
        }
        Ok(RDCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BdMethod {
    /// Classic Bjøntegaard: cubic least-squares fit of log-rate over quality.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite (monotone) interpolation.
    Pchip,
}

fn polyfit3(xs: &[f64], ys: &[f64]) -> Result<[f64; 4]> {
    let n = xs.len();
    let a = DMatrix::from_fn(n, 4, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidArgument(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn poly_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let p =
        |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    p(hi) - p(lo)
}

/// Fritsch–Carlson monotone slopes.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        return vec![del[0]; 2];
    }
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

fn pchip_integral(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let d = pchip_slopes(x, y);
    let eval = |t: f64| {
        let i = x.partition_point(|&v| v <= t).clamp(1, x.len() - 1) - 1;
        let h = x[i + 1] - x[i];
        let s = (t - x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * y[i]
            + (s3 - 2.0 * s2 + s) * h * d[i]
            + (-2.0 * s3 + 3.0 * s2) * y[i + 1]
            + (s3 - s2) * h * d[i + 1]
    };
    // composite Simpson; the integrand is piecewise cubic
    let n = 4096;
    let step = (hi - lo) / n as f64;
    let mut acc = eval(lo) + eval(hi);
    for k in 1..n {
        acc += eval(lo + k as f64 * step) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * step / 3.0
}

/// Average rate difference of `test` relative to `anchor` over the common
/// quality interval, in percent. Negative means the test curve saves bandwidth.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve, method: BdMethod) -> Result<f64> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::InvalidArgument(
                "BD-rate needs at least 4 points per curve".into(),
            ));
        }
    }
    let split = |c: &RDCurve| {
        let mut p = c.points.clone();
        p.sort_by(|a, b| a.1.total_cmp(&b.1));
        (
            p.iter().map(|v| v.1).collect::<Vec<_>>(),
            p.iter().map(|v| v.0.ln()).collect::<Vec<_>>(),
        )
    };
    let (qa, ra) = split(anchor);
    let (qt, rt) = split(test);
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if !(hi > lo) {
        return Err(Error::InvalidArgument(
            "RD curves have no overlapping quality range".into(),
        ));
    }
    let (ia, it) = match method {
        BdMethod::Cubic => (
            poly_integral(&polyfit3(&qa, &ra)?, lo, hi),
            poly_integral(&polyfit3(&qt, &rt)?, lo, hi),
        ),
        BdMethod::Pchip => {
            if qa.windows(2).any(|w| w[1] <= w[0]) || qt.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(
                    "PCHIP BD-rate needs distinct qualities".into(),
                ));
            }
            (
                pchip_integral(&qa, &ra, lo, hi),
                pchip_integral(&qt, &rt, lo, hi),
            )
        }
    };
    Ok(((it - ia) / (hi - lo)).exp_m1() * 100.0)
}

/// Measures one forward pass of a single image.
pub fn rd_point(
    image_id: &str,
    image: &ImageTensor,
    out: &ForwardOutput,
    opts: &ForwardOptions,
    eta: f64,
) -> Result<RDPoint> {
    let x_hat = ImageTensor::from_tensor(&out.x_hat.clamp(0.0, 1.0)?)?;
    let stream: u64 = out.maps.iter().map(|m| m.total_symbols()).sum();
    let mut side = 0u64;
    for m in &out.maps {
        side += serialize_rate_map(m)?.cost_symbols(SIDEINFO_BITS_PER_SYMBOL);
    }
    let rho = cbr(stream, side, image.height(), image.width())?;
    let total = stream + side;
    Ok(RDPoint {
        image_id: image_id.to_string(),
        lambda: opts.lambda,
        eta,
        snr_db: opts.snr_db,
        rho,
        psnr_db: psnr(image, &x_hat)?,
        sideinfo_frac: if total == 0 {
            0.0
        } else {
            side as f64 / total as f64
        },
    })
}

/// Transmits one image at an operating point.
pub fn transmit(
    model: &NtsccModel,
    image: &ImageTensor,
    lambda: f64,
    eta: f64,
    snr_db: f64,
    channel: &ChannelConfig,
    seed: u64,
) -> Result<(ForwardOutput, ForwardOptions)> {
    let mut o = ForwardOptions::inference(lambda, eta, snr_db);
    o.channel = channel.clone();
    let x = image.to_tensor(model.dtype())?;
    Ok((model.forward(&x, &o, seed)?, o))
}

/// Runs `f` over items on up to `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, c)| {
                s.spawn(move || {
                    c.iter()
                        .enumerate()
                        .map(|(j, t)| f(ci * chunk + j, t))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub lambda: f64,
    pub snr_db: f64,
    pub mean_rho: f64,
    pub mean_psnr_db: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdSurface {
    pub points: Vec<RDPoint>,
    /// One cell per (λ, ν), λ-major.
    pub cells: Vec<SurfaceCell>,
}

impl RdSurface {
    pub fn cell(&self, lambda: f64, snr_db: f64) -> Option<&SurfaceCell> {
        self.cells
            .iter()
            .find(|c| c.lambda == lambda && c.snr_db == snr_db)
    }

    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("rd_points.csv"))?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("surface.csv"))?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    /// PSNR over ρ, one polyline per test SNR.
    pub fn to_svg(&self) -> String {
        let mut snrs: Vec<f64> = self.cells.iter().map(|c| c.snr_db).collect();
        snrs.sort_by(f64::total_cmp);
        snrs.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = snrs
            .iter()
            .map(|&s| {
                let mut pts: Vec<(f64, f64)> = self
                    .cells
                    .iter()
                    .filter(|c| c.snr_db == s)
                    .map(|c| (c.mean_rho, c.mean_psnr_db))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (format!("{s} dB"), pts)
            })
            .collect();
        svg_plot("CBR", "PSNR (dB)", &series)
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Minimal line-plot SVG.
pub fn svg_plot(xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{ylabel}</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.4}</text>"#,
            h - m + 16.0
        );
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.2}</text>"#,
            m - 6.0
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let col = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{col}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{col}"/>"#,
                px(x),
                py(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{col}">{name}</text>"#,
            w - m + 6.0,
            m + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Sweeps every (λ, ν) over a dataset; images fan out over `workers` threads.
#[allow(clippy::too_many_arguments)]
pub fn rd_sweep(
    model: &NtsccModel,
    data: &Dataset,
    lambdas: &[f64],
    snrs_db: &[f64],
    eta: f64,
    channel: &ChannelConfig,
    seed: u64,
    workers: usize,
) -> Result<RdSurface> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation dataset".into()));
    }
    if lambdas.is_empty() || snrs_db.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one lambda and one SNR".into(),
        ));
    }
    let mut points = Vec::new();
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &snr in snrs_db {
            let pts = par_map(data.images(), workers, |i, im| {
                let (out, o) = transmit(
                    model,
                    im,
                    lambda,
                    eta,
                    snr,
                    channel,
                    seed.wrapping_add(i as u64),
                )?;
                rd_point(&data.names()[i], im, &out, &o, eta)
            })?;
            let n = pts.len() as f64;
            cells.push(SurfaceCell {
                lambda,
                snr_db: snr,
                mean_rho: pts.iter().map(|p| p.rho).sum::<f64>() / n,
                mean_psnr_db: pts.iter().map(|p| p.psnr_db).sum::<f64>() / n,
                images: pts.len(),
            });
            points.extend(pts);
        }
    }
    Ok(RdSurface { points, cells })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(
            "cosine of vectors of different length".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// Analysis output ẏ.
    Latent,
    /// JSCC codeword v̇ before SNR scaling.
    Codeword,
}

/// A model evaluated at its own operating point.
pub struct DiagModel<'a> {
    pub model: &'a NtsccModel,
    pub lambda: f64,
    pub eta: f64,
    pub snr_db: f64,
}

/// Pairwise cosine similarity of probes between models, per image on the
/// flattened array, averaged over the dataset.
pub fn cosine_similarity_diag(
    models: &[DiagModel<'_>],
    data: &Dataset,
    probe: Probe,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if data.is_empty() || models.is_empty() {
        return Err(Error::InvalidArgument(
            "diagnostic needs models and images".into(),
        ));
    }
    let n = models.len();
    let mut acc = vec![vec![0.0; n]; n];
    for (i, im) in data.images().iter().enumerate() {
        let probes = models
            .iter()
            .map(|m| {
                let x = im.to_tensor(m.model.dtype())?;
                let t = match probe {
                    Probe::Latent => m.model.analyze(&x)?,
                    Probe::Codeword => {
                        let o = ForwardOptions::inference(m.lambda, m.eta, m.snr_db);
                        m.model.forward(&x, &o, seed.wrapping_add(i as u64))?.v_dot
                    }
                };
                crate::nn::to_vec_f64(&t)
            })
            .collect::<Result<Vec<_>>>()?;
        for a in 0..n {
            for b in 0..n {
                acc[a][b] += cosine(&probes[a], &probes[b])?;
            }
        }
    }
    let k = data.len() as f64;
    Ok(acc
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / k).collect())
        .collect())
}
