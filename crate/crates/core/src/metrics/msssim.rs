//! Multi-scale structural similarity.
//!
//! 11x11 Gaussian window (sigma 1.5), valid positions only, standard
//! stability constants, 2x2 average-pool between scales. Contrast-structure
//! terms are taken at every scale, the luminance term at the coarsest one.
//! Weights are the leading entries of the standard five-scale weights,
//! renormalized to sum to one for the scale count in use. At desk-scale frame
//! sizes three scales is the default; five would require >= 176 px.

use crate::codec::FrameBuffer;

use super::MetricsError;

pub const MS_SSIM_DEFAULT_SCALES: usize = 3;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01; // (k1 * L)^2 with L = 1
const C2: f64 = 0.03 * 0.03;
const FIVE_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        total += *v;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Renormalized weights for `scales` scales.
pub fn ms_ssim_scales(scales: usize) -> Vec<f64> {
    let raw = &FIVE_SCALE_WEIGHTS[..scales];
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w / sum).collect()
}

/// Mean luminance and contrast-structure terms of one plane pair at one
/// scale, using separable convolution for the windowed moments.
fn plane_l_cs(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let win = gaussian_window();
    let out_h = h - WINDOW + 1;
    let out_w = w - WINDOW + 1;
    // horizontal pass over rows for each of the five moment maps
    let mut ha = vec![0.0; h * out_w];
    let mut hb = vec![0.0; h * out_w];
    let mut haa = vec![0.0; h * out_w];
    let mut hbb = vec![0.0; h * out_w];
    let mut hab = vec![0.0; h * out_w];
    for y in 0..h {
        for x in 0..out_w {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let va = a[y * w + x + k];
                let vb = b[y * w + x + k];
                sa += wk * va;
                sb += wk * vb;
                saa += wk * va * va;
                sbb += wk * vb * vb;
                sab += wk * va * vb;
            }
            let o = y * out_w + x;
            ha[o] = sa;
            hb[o] = sb;
            haa[o] = saa;
            hbb[o] = sbb;
            hab[o] = sab;
        }
    }
    // vertical pass and per-window statistics
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for y in 0..out_h {
        for x in 0..out_w {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut e_aa = 0.0;
            let mut e_bb = 0.0;
            let mut e_ab = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let o = (y + k) * out_w + x;
                mu_a += wk * ha[o];
                mu_b += wk * hb[o];
                e_aa += wk * haa[o];
                e_bb += wk * hbb[o];
                e_ab += wk * hab[o];
            }
            let var_a = e_aa - mu_a * mu_a;
            let var_b = e_bb - mu_b * mu_b;
            let cov = e_ab - mu_a * mu_b;
            l_sum += (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
            cs_sum += (2.0 * cov + C2) / (var_a + var_b + C2);
        }
    }
    let count = (out_h * out_w) as f64;
    (l_sum / count, cs_sum / count)
}

fn downsample2x(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let o = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (src[o] + src[o + 1] + src[o + w] + src[o + w + 1]);
        }
    }
    (out, oh, ow)
}

/// MS-SSIM over the given number of scales, averaged across channels.
pub fn ms_ssim(a: &FrameBuffer, b: &FrameBuffer, scales: usize) -> Result<f64, MetricsError> {
    if !a.same_dims(b) {
        return Err(MetricsError::DimMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    assert!(scales >= 1 && scales <= 5, "scales must be in 1..=5");
    let min_dim = 16 << (scales - 1);
    let got = a.width().min(a.height());
    if got < min_dim {
        return Err(MetricsError::FrameTooSmall {
            scales,
            min_dim,
            got,
        });
    }
    let weights = ms_ssim_scales(scales);
    let plane = a.width() * a.height();
    let mut total = 0.0;
    for ch in 0..a.channels() {
        let mut pa = a.samples()[ch * plane..(ch + 1) * plane].to_vec();
        let mut pb = b.samples()[ch * plane..(ch + 1) * plane].to_vec();
        let (mut h, mut w) = (a.height(), a.width());
        let mut score = 1.0;
        for (scale, weight) in weights.iter().enumerate() {
            let (l, cs) = plane_l_cs(&pa, &pb, h, w);
            score *= cs.max(0.0).powf(*weight);
            if scale + 1 == scales {
                score *= l.max(0.0).powf(*weight);
            } else {
                let (da, nh, nw) = downsample2x(&pa, h, w);
                let (db, _, _) = downsample2x(&pb, h, w);
                pa = da;
                pb = db;
                h = nh;
                w = nw;
            }
        }
        total += score;
    }
    Ok(total / a.channels() as f64)
}
