//! Bjøntegaard delta metrics: average bitrate difference at equal quality
//! (BD-rate) and average quality difference at equal bitrate (BD-PSNR).
//!
//! Classical method: cubic polynomial fit of log10(rate) against quality (or
//! quality against log10(rate)), difference of the fitted functions averaged
//! over the shared interval by exact polynomial integration.

use super::{MetricsError, RDCurve};

/// Which quality number of an [`super::RDPoint`] the fit uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityAxis {
    Psnr,
    MsSsim,
}

impl QualityAxis {
    fn of(self, p: &super::RDPoint) -> f64 {
        match self {
            QualityAxis::Psnr => p.psnr,
            QualityAxis::MsSsim => p.ms_ssim,
        }
    }
}

/// Least-squares cubic fit of `ys` against `xs - mean(xs)`; returns the four
/// coefficients (constant first) and the centering offset.
fn cubic_fit(xs: &[f64], ys: &[f64]) -> ([f64; 4], f64) {
    let center = xs.iter().sum::<f64>() / xs.len() as f64;
    // normal equations A^T A c = A^T y for the centered Vandermonde matrix
    let mut ata = [[0.0f64; 4]; 4];
    let mut aty = [0.0f64; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let u = x - center;
        let pows = [1.0, u, u * u, u * u * u];
        for i in 0..4 {
            aty[i] += pows[i] * y;
            for j in 0..4 {
                ata[i][j] += pows[i] * pows[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting on the 4x4 system
    let mut m = [[0.0f64; 5]; 4];
    for i in 0..4 {
        m[i][..4].copy_from_slice(&ata[i]);
        m[i][4] = aty[i];
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for row in col + 1..4 {
            let f = m[row][col] / p;
            for k in col..5 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut coeffs = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = m[row][4];
        for k in row + 1..4 {
            acc -= m[row][k] * coeffs[k];
        }
        coeffs[row] = acc / m[row][row];
    }
    (coeffs, center)
}

/// Exact integral of the fitted cubic over `[lo, hi]` in original coordinates.
fn integrate(coeffs: &[f64; 4], center: f64, lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| {
        let u = x - center;
        coeffs[0] * u + coeffs[1] * u * u / 2.0 + coeffs[2] * u * u * u / 3.0
            + coeffs[3] * u * u * u * u / 4.0
    };
    prim(hi) - prim(lo)
}

fn overlap(
    axis: &'static str,
    a: &[f64],
    b: &[f64],
) -> Result<(f64, f64), MetricsError> {
    let a_lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let a_hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let b_lo = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let b_hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = a_lo.max(b_lo);
    let hi = a_hi.min(b_hi);
    if lo >= hi {
        return Err(MetricsError::NonOverlapping {
            axis,
            a_lo,
            a_hi,
            b_lo,
            b_hi,
        });
    }
    Ok((lo, hi))
}

/// Average bitrate difference of `test` against `anchor` at equal quality, in
/// percent. Negative values mean the test codec saves bitrate.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve, axis: QualityAxis) -> Result<f64, MetricsError> {
    let qa: Vec<f64> = anchor.points().iter().map(|p| axis.of(p)).collect();
    let qt: Vec<f64> = test.points().iter().map(|p| axis.of(p)).collect();
    let ra: Vec<f64> = anchor.points().iter().map(|p| p.bpp.log10()).collect();
    let rt: Vec<f64> = test.points().iter().map(|p| p.bpp.log10()).collect();
    let (lo, hi) = overlap("quality", &qa, &qt)?;
    let (ca, za) = cubic_fit(&qa, &ra);
    let (ct, zt) = cubic_fit(&qt, &rt);
    let delta =
        (integrate(&ct, zt, lo, hi) - integrate(&ca, za, lo, hi)) / (hi - lo);
    Ok((10f64.powf(delta) - 1.0) * 100.0)
}

/// Average quality difference of `test` against `anchor` at equal bitrate
/// (positive = test is better), in the units of the chosen quality axis.
pub fn bd_psnr(anchor: &RDCurve, test: &RDCurve, axis: QualityAxis) -> Result<f64, MetricsError> {
    let qa: Vec<f64> = anchor.points().iter().map(|p| axis.of(p)).collect();
    let qt: Vec<f64> = test.points().iter().map(|p| axis.of(p)).collect();
    let ra: Vec<f64> = anchor.points().iter().map(|p| p.bpp.log10()).collect();
    let rt: Vec<f64> = test.points().iter().map(|p| p.bpp.log10()).collect();
    let (lo, hi) = overlap("log-rate", &ra, &rt)?;
    let (ca, za) = cubic_fit(&ra, &qa);
    let (ct, zt) = cubic_fit(&rt, &qt);
    Ok((integrate(&ct, zt, lo, hi) - integrate(&ca, za, lo, hi)) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RDPoint;

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            points
                .iter()
                .map(|&(bpp, psnr)| RDPoint {
                    bpp,
                    psnr,
                    ms_ssim: 1.0 - 1.0 / psnr,
                })
                .collect(),
        )
        .unwrap()
    }

    fn base_curve() -> RDCurve {
        curve(&[(0.10, 30.0), (0.20, 33.0), (0.40, 36.0), (0.80, 39.0)])
    }

    #[test]
    fn identical_curves_give_exact_zero() {
        let c = base_curve();
        assert_eq!(bd_rate(&c, &c, QualityAxis::Psnr).unwrap(), 0.0);
        assert_eq!(bd_psnr(&c, &c, QualityAxis::Psnr).unwrap(), 0.0);
    }

    #[test]
    fn uniform_rate_inflation_is_exact() {
        let anchor = base_curve();
        let test = curve(&[(0.11, 30.0), (0.22, 33.0), (0.44, 36.0), (0.88, 39.0)]);
        let bd = bd_rate(&anchor, &test, QualityAxis::Psnr).unwrap();
        assert!((bd - 10.0).abs() < 0.01, "{bd}");
    }

    #[test]
    fn bd_psnr_is_antisymmetric() {
        let a = base_curve();
        let b = curve(&[(0.12, 30.5), (0.22, 33.8), (0.41, 36.2), (0.83, 39.9)]);
        let ab = bd_psnr(&a, &b, QualityAxis::Psnr).unwrap();
        let ba = bd_psnr(&b, &a, QualityAxis::Psnr).unwrap();
        assert!((ab + ba).abs() < 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn dominated_anchor_gives_negative_bd_rate() {
        let anchor = base_curve();
        // strictly less rate at every quality
        let test = curve(&[(0.08, 30.0), (0.16, 33.0), (0.32, 36.0), (0.64, 39.0)]);
        let bd = bd_rate(&anchor, &test, QualityAxis::Psnr).unwrap();
        assert!(bd < 0.0, "{bd}");
        let gain = bd_psnr(&anchor, &test, QualityAxis::Psnr).unwrap();
        assert!(gain > 0.0, "{gain}");
    }

    #[test]
    fn matches_dense_trapezoid_integration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for trial in 0..10 {
            // random monotone 4-point curves
            let mut mk = |base_q: f64| {
                let mut bpp = rng.gen_range(0.05..0.15);
                let mut q = base_q + rng.gen_range(-1.0..1.0);
                let mut pts = Vec::new();
                for _ in 0..4 {
                    pts.push((bpp, q));
                    bpp *= rng.gen_range(1.6..2.4);
                    q += rng.gen_range(1.5..4.0);
                }
                pts
            };
            let anchor = curve(&mk(30.0));
            let test = curve(&mk(30.5));
            let fast = bd_rate(&anchor, &test, QualityAxis::Psnr).unwrap();

            // oracle: same fits, 1e5-point trapezoid instead of exact integration
            let qa: Vec<f64> = anchor.points().iter().map(|p| p.psnr).collect();
            let qt: Vec<f64> = test.points().iter().map(|p| p.psnr).collect();
            let ra: Vec<f64> = anchor.points().iter().map(|p| p.bpp.log10()).collect();
            let rt: Vec<f64> = test.points().iter().map(|p| p.bpp.log10()).collect();
            let lo = qa
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
                .max(qt.iter().cloned().fold(f64::INFINITY, f64::min));
            let hi = qa
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                .min(qt.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let (ca, za) = cubic_fit(&qa, &ra);
            let (ct, zt) = cubic_fit(&qt, &rt);
            let eval = |c: &[f64; 4], z: f64, x: f64| {
                let u = x - z;
                c[0] + c[1] * u + c[2] * u * u + c[3] * u * u * u
            };
            let n = 100_000;
            let mut acc = 0.0;
            for i in 0..n {
                let x0 = lo + (hi - lo) * i as f64 / n as f64;
                let x1 = lo + (hi - lo) * (i + 1) as f64 / n as f64;
                let d0 = eval(&ct, zt, x0) - eval(&ca, za, x0);
                let d1 = eval(&ct, zt, x1) - eval(&ca, za, x1);
                acc += 0.5 * (d0 + d1) * (x1 - x0);
            }
            let delta = acc / (hi - lo);
            let oracle = (10f64.powf(delta) - 1.0) * 100.0;
            assert!(
                (fast - oracle).abs() < 0.1,
                "trial {trial}: {fast} vs {oracle}"
            );
        }
    }

    #[test]
    fn non_overlapping_curves_error() {
        let a = base_curve();
        let b = curve(&[(0.1, 50.0), (0.2, 53.0), (0.4, 56.0), (0.8, 59.0)]);
        assert!(matches!(
            bd_rate(&a, &b, QualityAxis::Psnr),
            Err(MetricsError::NonOverlapping { .. })
        ));
    }
}
