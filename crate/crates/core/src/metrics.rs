//! Latent-noise gap, reconstruction gap, PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Latent, Shape};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    /// `||z_T - z_T*||_2`
    pub d_noi: f64,
    /// mean squared error between reconstruction and source
    pub d_rec: f64,
    pub psnr: f64,
    /// only for image-shaped latents
    pub ssim: Option<f64>,
}

impl GapSummary {
    pub fn compute(
        z_t: &Latent,
        z_t_star: &Latent,
        z_0: &Latent,
        z_hat: &Latent,
        peak: f64,
    ) -> Result<Self> {
        let ssim = match z_0.shape() {
            Shape::Image { .. } => Some(ssim(z_0, z_hat, &SsimParams::for_range(peak))?),
            Shape::Flat(_) => None,
        };
        Ok(Self {
            d_noi: noise_gap(z_t, z_t_star)?,
            d_rec: recon_error(z_0, z_hat)?,
            psnr: psnr(z_0, z_hat, peak)?,
            ssim,
        })
    }
}

pub fn noise_gap(z_t: &Latent, z_t_star: &Latent) -> Result<f64> {
    z_t.check_same_shape(z_t_star)?;
    Ok(z_t
        .as_slice()
        .iter()
        .zip(z_t_star.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Per-dimension RMS of the noise gap, for comparing across latent sizes.
pub fn noise_gap_rms(z_t: &Latent, z_t_star: &Latent) -> Result<f64> {
    Ok(noise_gap(z_t, z_t_star)? / (z_t.len() as f64).sqrt())
}

pub fn recon_error(z_0: &Latent, z_hat: &Latent) -> Result<f64> {
    z_0.check_same_shape(z_hat)?;
    let n = z_0.len() as f64;
    Ok(z_0
        .as_slice()
        .iter()
        .zip(z_hat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP_DB`] when the inputs are identical.
pub fn psnr(z_0: &Latent, z_hat: &Latent, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::param("peak", "must be positive"));
    }
    let mse = recon_error(z_0, z_hat)?;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// Uniform 7x7 window, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
    pub fn for_range(dynamic_range: f64) -> Self {
        Self {
            window: 7,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
        }
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_range(1.0)
    }
}

/// Mean SSIM over every valid placement of a uniform square window.
pub fn ssim(a: &Latent, b: &Latent, params: &SsimParams) -> Result<f64> {
    a.check_same_shape(b)?;
    let Shape::Image { height, width } = a.shape() else {
        return Err(Error::contract("ssim needs image-shaped latents"));
    };
    let win = params.window;
    if win == 0 || height < win || width < win {
        return Err(Error::param(
            "window",
            format!("{win}x{win} window does not fit a {height}x{width} image"),
        ));
    }
    let (xa, xb) = (a.as_slice(), b.as_slice());
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=height - win {
        for left in 0..=width - win {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + win {
                for c in left..left + win {
                    let (p, q) = (xa[r * width + c], xb[r * width + c]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ssim_index(ma, mb, va, vb, cov, params);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn ssim_index(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, p: &SsimParams) -> f64 {
    ((2.0 * ma * mb + p.c1) * (2.0 * cov + p.c2)) / ((ma * ma + mb * mb + p.c1) * (va + vb + p.c2))
}
