//! Wireless channel simulation: power normalization, AWGN and block
//! Rayleigh fading with zero-forcing equalization at the receiver.
//!
//! Symbols are complex channel uses stored as interleaved (re, im) reals.
//! The SNR is defined per complex symbol under unit average power, so each
//! real dimension receives noise of variance σ_n²/2.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    #[default]
    Awgn,
    RayleighBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Complex symbols sharing one fading coefficient.
    pub block_length: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            block_length: 64,
        }
    }
}

impl ChannelConfig {
    pub fn awgn() -> Self {
        ChannelConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_length == 0 {
            return Err(Error::Config("channel block_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Complex gains (one per block), noise power and the CQI they were drawn for.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub h: Vec<(f64, f64)>,
    pub sigma_n2: f64,
    pub nu_db: f64,
}

/// σ_n² = 10^(−ν/10) under unit signal power; zero for ν = +∞.
pub fn noise_power(nu_db: f64) -> f64 {
    if nu_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-nu_db / 10.0)
    }
}

/// Scales a real-pair stream to unit average power per complex symbol.
pub fn normalize_power(s: &[f32]) -> Result<Vec<f32>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "stream of {} reals is not a non-empty sequence of complex symbols",
            s.len()
        )));
    }
    let energy: f64 = s.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if energy == 0.0 {
        return Err(Error::ZeroPower);
    }
    let scale = ((s.len() / 2) as f64 / energy).sqrt();
    Ok(s.iter().map(|&v| (v as f64 * scale) as f32).collect())
}

/// Differentiable version for a flat stream tensor of interleaved reals.
pub fn normalize_power_tensor(s: &Tensor) -> Result<Tensor> {
    let n = s.elem_count();
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("stream of {n} reals")));
    }
    let power = (s.sqr()?.sum_all()? / (n / 2) as f64)?;
    Ok(s.broadcast_div(&power.sqrt()?)?)
}

/// h ~ CN(0, 1) per block (AWGN: h ≡ 1) for a stream of `n_symbols` complex uses.
pub fn sample_fading<R: Rng>(
    cfg: &ChannelConfig,
    n_symbols: usize,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let blocks = n_symbols.div_ceil(cfg.block_length.max(1));
    match cfg.kind {
        ChannelKind::Awgn => vec![(1.0, 0.0); blocks],
        ChannelKind::RayleighBlock => (0..blocks)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                (
                    re * std::f64::consts::FRAC_1_SQRT_2,
                    im * std::f64::consts::FRAC_1_SQRT_2,
                )
            })
            .collect(),
    }
}

/// Draws the channel state for a stream: fading first, then the caller draws noise.
pub fn draw_state<R: Rng>(
    cfg: &ChannelConfig,
    n_symbols: usize,
    nu_db: f64,
    rng: &mut R,
) -> ChannelState {
    ChannelState {
        h: sample_fading(cfg, n_symbols, rng),
        sigma_n2: noise_power(nu_db),
        nu_db,
    }
}

/// Post-equalization additive disturbance n/h for `n_symbols` complex uses,
/// as interleaved reals. With perfect CSI and zero forcing, the receiver
/// output is exactly s + n/h.
pub fn effective_noise<R: Rng>(
    cfg: &ChannelConfig,
    n_symbols: usize,
    nu_db: f64,
    rng: &mut R,
) -> Vec<f64> {
    let state = draw_state(cfg, n_symbols, nu_db, rng);
    let sd = (state.sigma_n2 / 2.0).sqrt();
    let mut out = Vec::with_capacity(2 * n_symbols);
    for t in 0..n_symbols {
        let nr: f64 = StandardNormal.sample(rng);
        let ni: f64 = StandardNormal.sample(rng);
        let (nr, ni) = (nr * sd, ni * sd);
        let (hr, hi) = state.h[t / cfg.block_length.max(1)];
        // (nr + i ni) / (hr + i hi)
        let d = hr * hr + hi * hi;
        out.push((nr * hr + ni * hi) / d);
        out.push((ni * hr - nr * hi) / d);
    }
    out
}

/// ŝ = equalized W(s): AWGN adds noise, block fading applies h, noise and
/// zero-forcing. Input should already be power-normalized.
pub fn transmit<R: Rng>(
    s: &[f32],
    cfg: &ChannelConfig,
    nu_db: f64,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if s.len() % 2 != 0 {
        return Err(Error::InvalidArgument(
            "odd number of reals in stream".into(),
        ));
    }
    let noise = effective_noise(cfg, s.len() / 2, nu_db, rng);
    Ok(s.iter()
        .zip(noise)
        .map(|(&v, n)| (v as f64 + n) as f32)
        .collect())
}

/// 10·log10(signal power / error power) of a received stream.
pub fn empirical_snr_db(s: &[f32], s_hat: &[f32]) -> f64 {
    let (mut ps, mut pn) = (0.0f64, 0.0f64);
    for (&a, &b) in s.iter().zip(s_hat) {
        ps += (a as f64).powi(2);
        pn += (b as f64 - a as f64).powi(2);
    }
    10.0 * (ps / pn).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_power_definition() {
        assert!((noise_power(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(noise_power(f64::INFINITY), 0.0);
    }

    #[test]
    fn normalization_examples() {
        let s = vec![1.0f32, -1.0, -1.0, 1.0];
        let n = normalize_power(&s).unwrap();
        // ±1 reals already carry power 2 per complex symbol: scaled by 1/sqrt(2)
        for (a, b) in s.iter().zip(&n) {
            assert!((a / 2f32.sqrt() - b).abs() < 1e-7);
        }
        let s2: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let n2 = normalize_power(&s2).unwrap();
        let p: f64 = n2.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 500.0;
        assert!((p - 1.0).abs() < 1e-6);
        assert!(matches!(
            normalize_power(&[0.0, 0.0]),
            Err(Error::ZeroPower)
        ));
        assert!(normalize_power(&[]).is_err());
    }

    #[test]
    fn normalization_gradient_matches_finite_differences() {
        let x0 = vec![0.3f64, -1.2, 0.7, 2.0, -0.4, 0.1];
        let w = [0.5f64, -0.3, 1.1, 0.2, 0.9, -0.7];
        let f = |x: &[f64]| {
            let p: f64 = x.iter().map(|v| v * v).sum::<f64>() / 3.0;
            x.iter().zip(&w).map(|(a, b)| a / p.sqrt() * b).sum::<f64>()
        };
        let var = Var::from_vec(x0.clone(), 6, &Device::Cpu).unwrap();
        let wt = Tensor::new(&w, &Device::Cpu).unwrap();
        let out = (normalize_power_tensor(var.as_tensor()).unwrap() * wt)
            .unwrap()
            .sum_all()
            .unwrap();
        let g = out.backward().unwrap();
        let grad: Vec<f64> = g
            .get(&var)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1()
            .unwrap();
        for i in 0..6 {
            let (mut a, mut b) = (x0.clone(), x0.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn infinite_snr_is_noiseless() {
        let s = normalize_power(&[0.5, 1.0, -0.25, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            transmit(&s, &ChannelConfig::awgn(), f64::INFINITY, &mut rng).unwrap(),
            s
        );
    }

    #[test]
    fn seeded_transmission_is_reproducible() {
        let s: Vec<f32> = (0..64).map(|i| (i as f32).cos()).collect();
        let cfg = ChannelConfig {
            kind: ChannelKind::RayleighBlock,
            block_length: 8,
        };
        let a = transmit(&s, &cfg, 5.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = transmit(&s, &cfg, 5.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fading_blocks_are_constant_and_unit_power() {
        let cfg = ChannelConfig {
            kind: ChannelKind::RayleighBlock,
            block_length: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = sample_fading(&cfg, 10, &mut rng);
        assert_eq!(h.len(), 3);
        let many = sample_fading(&cfg, 4 * 200_000, &mut rng);
        let p = many.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / many.len() as f64;
        // |h|^2 ~ Exp(1): standard error 1/sqrt(n)
        assert!((p - 1.0).abs() < 4.0 / (many.len() as f64).sqrt(), "{p}");
        let h2 = sample_fading(&cfg, 10, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(h, h2);
    }
}
