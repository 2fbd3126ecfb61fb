//! Quality and rate metrics: PSNR, MS-SSIM, and Bjøntegaard deltas between
//! rate-distortion curves. All functions are pure.

mod bd;
mod msssim;

pub use bd::{bd_psnr, bd_rate, QualityAxis};
pub use msssim::{ms_ssim, ms_ssim_scales, MS_SSIM_DEFAULT_SCALES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::FrameBuffer;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("frame dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("frame too small for {scales} scales: need min dimension >= {min_dim}, got {got}")]
    FrameTooSmall {
        scales: usize,
        min_dim: usize,
        got: usize,
    },
    #[error("rate-distortion curve needs at least 4 points, got {0}")]
    CurveTooShort(usize),
    #[error("curve bpp values must be strictly increasing: {0}")]
    NonMonotonicRate(String),
    #[error("curves do not overlap in {axis}: [{a_lo:.4}, {a_hi:.4}] vs [{b_lo:.4}, {b_hi:.4}]")]
    NonOverlapping {
        axis: &'static str,
        a_lo: f64,
        a_hi: f64,
        b_lo: f64,
        b_hi: f64,
    },
    #[error("invalid rd point: {0}")]
    InvalidPoint(String),
}

/// PSNR cap returned for identical inputs (MSE of zero).
pub const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64, MetricsError> {
    if !a.same_dims(b) {
        return Err(MetricsError::DimMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let n = a.samples().len() as f64;
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB with peak 1.0, over all samples and
/// channels jointly. Identical inputs return the 100 dB cap.
pub fn psnr(a: &FrameBuffer, b: &FrameBuffer) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// One operating point of a codec: container-inclusive bits per pixel plus
/// quality under both metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Rate-distortion curve: at least four points, strictly increasing in bpp.
/// Quality dips along the curve are recorded as warnings, not errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RDCurve {
    points: Vec<RDPoint>,
    warnings: Vec<String>,
}

impl RDCurve {
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self, MetricsError> {
        if points.len() < 4 {
            return Err(MetricsError::CurveTooShort(points.len()));
        }
        for p in &points {
            if !(p.bpp > 0.0) || !p.psnr.is_finite() || !(0.0..=1.0).contains(&p.ms_ssim) {
                return Err(MetricsError::InvalidPoint(format!("{p:?}")));
            }
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite"));
        let mut warnings = Vec::new();
        for w in points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(MetricsError::NonMonotonicRate(format!(
                    "{} then {}",
                    w[0].bpp, w[1].bpp
                )));
            }
            if w[1].psnr < w[0].psnr {
                warnings.push(format!(
                    "psnr dips from {:.3} to {:.3} as bpp rises {:.4} -> {:.4}",
                    w[0].psnr, w[1].psnr, w[0].bpp, w[1].bpp
                ));
            }
        }
        Ok(RDCurve { points, warnings })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}
