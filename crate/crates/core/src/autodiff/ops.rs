//! Forward and backward kernels for the structured ops.
//!
//! Kernels are written so each output element is produced by exactly one work
//! unit with a fixed inner summation order; the `parallel` feature changes
//! scheduling only, never results. The `*_seq` twins always run sequentially
//! and exist for the bench suite.

use crate::par;

use super::tensor::Tensor;
use super::AutodiffError;

/// Output spatial size of a convolution: `floor((in + 2*pad - k) / stride) + 1`.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn conv_checks(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize), AutodiffError> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {cin} channels but weight expects {wcin}"),
        });
    }
    if bias.shape() != [cout] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias shape {:?} != [{cout}]", bias.shape()),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(AutodiffError::Precondition {
            op: "conv2d",
            detail: format!("kernel dims must be odd, got {kh}x{kw}"),
        });
    }
    if stride != 1 && stride != 2 {
        return Err(AutodiffError::Precondition {
            op: "conv2d",
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(AutodiffError::Precondition {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"),
        });
    }
    Ok((n, cin, h, w, cout, kh, kw))
}

#[allow(clippy::too_many_arguments)]
fn conv_fill_plane(
    plane: &mut [f64],
    input: &[f64],
    weight: &[f64],
    bias_v: f64,
    n_idx: usize,
    co: usize,
    dims: (usize, usize, usize, usize, usize, usize, usize, usize),
    stride: usize,
    padding: usize,
) {
    let (cin, h, w, _cout, kh, kw, h_out, w_out) = dims;
    plane.fill(bias_v);
    for ci in 0..cin {
        let in_base = (n_idx * cin + ci) * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = weight[((co * cin + ci) * kh + ky) * kw + kx];
                if wv == 0.0 {
                    continue;
                }
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &input[in_base + iy as usize * w..in_base + (iy as usize + 1) * w];
                    let out_row = &mut plane[oy * w_out..(oy + 1) * w_out];
                    if stride == 1 {
                        let shift = kx as isize - padding as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = (w as isize - shift).min(w_out as isize).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let src = &in_row[(ox_lo as isize + shift) as usize
                            ..(ox_hi as isize + shift) as usize];
                        for (o, s) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward_dispatch(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    sequential: bool,
) -> Result<Tensor, AutodiffError> {
    let (n, cin, h, w, cout, kh, kw) = conv_checks(input, weight, bias, stride, padding)?;
    let h_out = conv_out_dim(h, kh, stride, padding);
    let w_out = conv_out_dim(w, kw, stride, padding);
    let mut out = Tensor::zeros(&[n, cout, h_out, w_out]);
    let dims = (cin, h, w, cout, kh, kw, h_out, w_out);
    let in_d = input.data();
    let w_d = weight.data();
    let b_d = bias.data();
    let fill = |idx: usize, plane: &mut [f64]| {
        let n_idx = idx / cout;
        let co = idx % cout;
        conv_fill_plane(plane, in_d, w_d, b_d[co], n_idx, co, dims, stride, padding);
    };
    if sequential {
        par::for_each_chunk_mut_seq(out.data_mut(), h_out * w_out, fill);
    } else {
        par::for_each_chunk_mut(out.data_mut(), h_out * w_out, fill);
    }
    Ok(out)
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, AutodiffError> {
    conv2d_forward_dispatch(input, weight, bias, stride, padding, false)
}

/// Sequential twin of [`conv2d_forward`] for benchmarking.
pub fn conv2d_forward_seq(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, AutodiffError> {
    conv2d_forward_dispatch(input, weight, bias, stride, padding, true)
}

fn conv2d_backward_dispatch(
    input: &Tensor,
    weight: &Tensor,
    g_out: &Tensor,
    stride: usize,
    padding: usize,
    sequential: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, w) = input.dims4().expect("checked at forward");
    let (cout, _, kh, kw) = weight.dims4().expect("checked at forward");
    let (_, _, h_out, w_out) = g_out.dims4().expect("checked at forward");
    let in_d = input.data();
    let w_d = weight.data();
    let g_d = g_out.data();

    let mut g_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * cout + co) * h_out * w_out;
            for v in &g_d[base..base + h_out * w_out] {
                acc += v;
            }
        }
        g_bias.data_mut()[co] = acc;
    }

    let mut g_weight = Tensor::zeros(&[cout, cin, kh, kw]);
    let wg_chunk = cin * kh * kw;
    let fill_w = |co: usize, chunk: &mut [f64]| {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let g_base = (ni * cout + co) * h_out * w_out;
                        let in_base = (ni * cin + ci) * h * w;
                        for oy in 0..h_out {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g_row = &g_d[g_base + oy * w_out..g_base + (oy + 1) * w_out];
                            let in_row =
                                &in_d[in_base + iy as usize * w..in_base + (iy as usize + 1) * w];
                            if stride == 1 {
                                let shift = kx as isize - padding as isize;
                                let ox_lo = (-shift).max(0) as usize;
                                let ox_hi =
                                    (w as isize - shift).min(w_out as isize).max(0) as usize;
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let src = &in_row[(ox_lo as isize + shift) as usize
                                    ..(ox_hi as isize + shift) as usize];
                                for (g, s) in g_row[ox_lo..ox_hi].iter().zip(src) {
                                    acc += g * s;
                                }
                            } else {
                                for (ox, g) in g_row.iter().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += g * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    chunk[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if sequential {
        par::for_each_chunk_mut_seq(g_weight.data_mut(), wg_chunk, fill_w);
    } else {
        par::for_each_chunk_mut(g_weight.data_mut(), wg_chunk, fill_w);
    }

    let mut g_input = Tensor::zeros(&[n, cin, h, w]);
    let fill_in = |idx: usize, plane: &mut [f64]| {
        let ni = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let g_base = (ni * cout + co) * h_out * w_out;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w_d[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..h_out {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_d[g_base + oy * w_out..g_base + (oy + 1) * w_out];
                        let plane_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            let shift = kx as isize - padding as isize;
                            let ox_lo = (-shift).max(0) as usize;
                            let ox_hi = (w as isize - shift).min(w_out as isize).max(0) as usize;
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let dst = &mut plane_row[(ox_lo as isize + shift) as usize
                                ..(ox_hi as isize + shift) as usize];
                            for (d, g) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                *d += wv * g;
                            }
                        } else {
                            for (ox, g) in g_row.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane_row[ix as usize] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if sequential {
        par::for_each_chunk_mut_seq(g_input.data_mut(), h * w, fill_in);
    } else {
        par::for_each_chunk_mut(g_input.data_mut(), h * w, fill_in);
    }

    (g_input, g_weight, g_bias)
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    conv2d_backward_dispatch(input, weight, g_out, stride, padding, false)
}

/// Sequential twin of [`conv2d_backward`] for benchmarking.
pub fn conv2d_backward_seq(
    input: &Tensor,
    weight: &Tensor,
    g_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    conv2d_backward_dispatch(input, weight, g_out, stride, padding, true)
}

pub fn upsample2x_forward(input: &Tensor) -> Result<Tensor, AutodiffError> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let in_d = input.data();
    par::for_each_chunk_mut(out.data_mut(), 4 * h * w, |plane_idx, plane| {
        let base = plane_idx * h * w;
        for y in 0..h {
            for x in 0..w {
                let v = in_d[base + y * w + x];
                let o = 2 * y * 2 * w + 2 * x;
                plane[o] = v;
                plane[o + 1] = v;
                plane[o + 2 * w] = v;
                plane[o + 2 * w + 1] = v;
            }
        }
    });
    Ok(out)
}

pub fn upsample2x_backward(g_out: &Tensor) -> Tensor {
    let (n, c, h2, w2) = g_out.dims4().expect("rank 4");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g_in = Tensor::zeros(&[n, c, h, w]);
    let g_d = g_out.data();
    par::for_each_chunk_mut(g_in.data_mut(), h * w, |plane_idx, plane| {
        let base = plane_idx * h2 * w2;
        for y in 0..h {
            for x in 0..w {
                let o = base + 2 * y * w2 + 2 * x;
                plane[y * w + x] = g_d[o] + g_d[o + 1] + g_d[o + w2] + g_d[o + w2 + 1];
            }
        }
    });
    g_in
}

/// Bilinear sample of `image` at `(x + flow_x, y + flow_y)` per pixel.
/// Out-of-bounds coordinates clamp to the border.
pub fn warp_forward(image: &Tensor, flow: &Tensor) -> Result<Tensor, AutodiffError> {
    let (n, c, h, w) = image.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || fh != h || fw != w {
        return Err(AutodiffError::ShapeMismatch {
            op: "bilinear_warp",
            detail: format!(
                "flow shape {:?} incompatible with image {:?}",
                flow.shape(),
                image.shape()
            ),
        });
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let img = image.data();
    let fl = flow.data();
    par::for_each_chunk_mut(out.data_mut(), h * w, |plane_idx, plane| {
        let ni = plane_idx / c;
        let ci = plane_idx % c;
        let img_base = (ni * c + ci) * h * w;
        let fx_base = ni * 2 * h * w;
        let fy_base = fx_base + h * w;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = (x as f64 + fl[fx_base + p]).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + fl[fy_base + p]).clamp(0.0, (h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let v00 = img[img_base + y0 * w + x0];
                let v01 = img[img_base + y0 * w + x1];
                let v10 = img[img_base + y1 * w + x0];
                let v11 = img[img_base + y1 * w + x1];
                plane[p] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    });
    Ok(out)
}

/// Gradients of [`warp_forward`] w.r.t. image and flow. Border-clamped
/// samples get zero flow gradient in the clamped direction.
pub fn warp_backward(image: &Tensor, flow: &Tensor, g_out: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = image.dims4().expect("rank 4");
    let mut g_img = Tensor::zeros(&[n, c, h, w]);
    let mut g_flow = Tensor::zeros(&[n, 2, h, w]);
    let img = image.data();
    let fl = flow.data();
    let g = g_out.data();
    for ni in 0..n {
        let fx_base = ni * 2 * h * w;
        let fy_base = fx_base + h * w;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let raw_sx = x as f64 + fl[fx_base + p];
                let raw_sy = y as f64 + fl[fy_base + p];
                let sx = raw_sx.clamp(0.0, (w - 1) as f64);
                let sy = raw_sy.clamp(0.0, (h - 1) as f64);
                let x_clamped = raw_sx != sx;
                let y_clamped = raw_sy != sy;
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let mut acc_dx = 0.0;
                let mut acc_dy = 0.0;
                for ci in 0..c {
                    let img_base = (ni * c + ci) * h * w;
                    let go = g[img_base + p];
                    if go == 0.0 {
                        continue;
                    }
                    let v00 = img[img_base + y0 * w + x0];
                    let v01 = img[img_base + y0 * w + x1];
                    let v10 = img[img_base + y1 * w + x0];
                    let v11 = img[img_base + y1 * w + x1];
                    let gi = g_img.data_mut();
                    gi[img_base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                    gi[img_base + y0 * w + x1] += go * (1.0 - fy) * fx;
                    gi[img_base + y1 * w + x0] += go * fy * (1.0 - fx);
                    gi[img_base + y1 * w + x1] += go * fy * fx;
                    acc_dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    acc_dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                let gf = g_flow.data_mut();
                if !x_clamped {
                    gf[fx_base + p] = acc_dx;
                }
                if !y_clamped {
                    gf[fy_base + p] = acc_dy;
                }
            }
        }
    }
    (g_img, g_flow)
}

/// Floor applied to each integer-bin probability before taking the log, so a
/// symbol can never cost more than 16 bits.
pub const P_MIN: f64 = 1.0 / 65536.0;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scale floor added after softplus so the logistic scale stays positive.
pub const SCALE_EPS: f64 = 1e-6;

/// Probability the logistic location-scale model assigns to the width-1 bin
/// centered on `v`.
pub fn logistic_bin_prob(v: f64, mu: f64, s: f64) -> f64 {
    sigmoid((v + 0.5 - mu) / s) - sigmoid((v - 0.5 - mu) / s)
}

/// Total code length estimate in bits: `sum_i -log2(max(P_c(v_i), P_MIN))`.
pub fn rate_bits_forward(
    latent: &Tensor,
    mu: &Tensor,
    raw_s: &Tensor,
) -> Result<f64, AutodiffError> {
    let (_, c, _, _) = latent.dims4()?;
    if mu.len() != c || raw_s.len() != c {
        return Err(AutodiffError::ShapeMismatch {
            op: "rate_bits",
            detail: format!(
                "latent has {c} channels, entropy model has {}/{}",
                mu.len(),
                raw_s.len()
            ),
        });
    }
    let (n, _, h, w) = latent.dims4()?;
    let plane = h * w;
    let lat = latent.data();
    let mut bits = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            let m = mu.data()[ci];
            let s = softplus(raw_s.data()[ci]) + SCALE_EPS;
            let base = (ni * c + ci) * plane;
            for &v in &lat[base..base + plane] {
                let p = logistic_bin_prob(v, m, s).max(P_MIN);
                bits -= p.log2();
            }
        }
    }
    Ok(bits)
}

/// Gradients of [`rate_bits_forward`] scaled by the upstream scalar `g`.
pub fn rate_bits_backward(
    latent: &Tensor,
    mu: &Tensor,
    raw_s: &Tensor,
    g: f64,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = latent.dims4().expect("rank 4");
    let plane = h * w;
    let lat = latent.data();
    let mut g_lat = Tensor::zeros(latent.shape());
    let mut g_mu = Tensor::zeros(&[c]);
    let mut g_raw = Tensor::zeros(&[c]);
    let ln2 = std::f64::consts::LN_2;
    for ci in 0..c {
        let m = mu.data()[ci];
        let raw = raw_s.data()[ci];
        let s = softplus(raw) + SCALE_EPS;
        let ds_draw = sigmoid(raw);
        let mut acc_mu = 0.0;
        let mut acc_raw = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let v = lat[base + i];
                let z_hi = (v + 0.5 - m) / s;
                let z_lo = (v - 0.5 - m) / s;
                let p = sigmoid(z_hi) - sigmoid(z_lo);
                if p <= P_MIN {
                    continue;
                }
                let d_hi = sigmoid(z_hi) * (1.0 - sigmoid(z_hi));
                let d_lo = sigmoid(z_lo) * (1.0 - sigmoid(z_lo));
                let common = -g / (p * ln2);
                let dp_dv = (d_hi - d_lo) / s;
                let dp_ds = -(d_hi * z_hi - d_lo * z_lo) / s;
                g_lat.data_mut()[base + i] = common * dp_dv;
                acc_mu += common * (-dp_dv);
                acc_raw += common * dp_ds * ds_draw;
            }
        }
        g_mu.data_mut()[ci] = acc_mu;
        g_raw.data_mut()[ci] = acc_raw;
    }
    (g_lat, g_mu, g_raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[n, c, h, w], data).unwrap()
    }

    #[test]
    fn conv_ones_counts_overlap() {
        // 3x3 all-ones input and kernel, pad 1: center sees 9 ones, corner 4.
        let input = t4(1, 1, 3, 3, vec![1.0; 9]);
        let weight = t4(1, 1, 3, 3, vec![1.0; 9]);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[2], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let input = t4(1, 2, 4, 4, (0..32).map(|v| v as f64 * 0.3).collect());
        let weight = Tensor::zeros(&[3, 2, 3, 3]);
        let mut bias = Tensor::zeros(&[3]);
        bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap();
        for co in 0..3 {
            for i in 0..16 {
                assert_eq!(out.data()[co * 16 + i], bias.data()[co]);
            }
        }
    }

    /// Independent naive convolution used as the oracle for the strided case.
    fn conv_naive(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let (n, cin, h, w) = input.dims4().unwrap();
        let (cout, _, kh, kw) = weight.dims4().unwrap();
        let h_out = conv_out_dim(h, kh, stride, padding);
        let w_out = conv_out_dim(w, kw, stride, padding);
        let mut out = Tensor::zeros(&[n, cout, h_out, w_out]);
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let iv = input.data()[((ni * cin + ci) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize];
                                        let wv = weight.data()
                                            [((co * cin + ci) * kh + ky) * kw + kx];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * cout + co) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_strided_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let input = t4(1, 2, 6, 6, (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let weight = t4(3, 2, 3, 3, (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let out = conv2d_forward(&input, &weight, &bias, 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        let oracle = conv_naive(&input, &weight, &bias, 2, 1);
        for (a, b) in out.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_parallel_and_sequential_agree_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let input = t4(2, 3, 8, 8, (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let weight = t4(4, 3, 3, 3, (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let bias = Tensor::from_vec(&[4], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        for stride in [1, 2] {
            let a = conv2d_forward(&input, &weight, &bias, stride, 1).unwrap();
            let b = conv2d_forward_seq(&input, &weight, &bias, stride, 1).unwrap();
            assert_eq!(a, b);
            let g = a.map(|v| v * 0.1 + 0.01);
            let ga = conv2d_backward(&input, &weight, &g, stride, 1);
            let gb = conv2d_backward_seq(&input, &weight, &g, stride, 1);
            assert_eq!(ga.0, gb.0);
            assert_eq!(ga.1, gb.1);
            assert_eq!(ga.2, gb.2);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = t4(1, 2, 4, 4, vec![0.0; 32]);
        let weight = Tensor::zeros(&[3, 1, 3, 3]); // wrong cin
        let bias = Tensor::zeros(&[3]);
        let err = conv2d_forward(&input, &weight, &bias, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
        let weight = Tensor::zeros(&[3, 2, 2, 2]); // even kernel
        assert!(conv2d_forward(&input, &weight, &bias, 1, 1).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let input = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = upsample2x_forward(&input).unwrap();
        assert_eq!(
            out.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = Tensor::full(&[1, 1, 4, 4], 1.0);
        let gi = upsample2x_backward(&g);
        assert_eq!(gi.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = t4(1, 2, 5, 7, (0..70).map(|_| rng.gen_range(0.0..1.0)).collect());
        let flow = Tensor::zeros(&[1, 2, 5, 7]);
        let out = warp_forward(&img, &flow).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn warp_shifts_ramp_by_one_column() {
        // value(x) = x / w; constant flow (+1, 0) samples one column right.
        let (h, w) = (4, 8);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = x as f64 / w as f64;
            }
        }
        let img = t4(1, 1, h, w, data);
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        for i in 0..h * w {
            flow.data_mut()[i] = 1.0;
        }
        let out = warp_forward(&img, &flow).unwrap();
        for y in 0..h {
            for x in 0..w - 1 {
                let got = out.data()[y * w + x];
                let want = (x + 1) as f64 / w as f64;
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    /// Scalar reference for a single warp sample; used to cross-check the
    /// vectorized kernel.
    fn warp_sample_oracle(img: &Tensor, y: usize, x: usize, fx_v: f64, fy_v: f64) -> f64 {
        let (_, _, h, w) = img.dims4().unwrap();
        let sx = (x as f64 + fx_v).clamp(0.0, (w - 1) as f64);
        let sy = (y as f64 + fy_v).clamp(0.0, (h - 1) as f64);
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        let at = |yy: usize, xx: usize| img.data()[yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn warp_matches_scalar_oracle_and_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let img = t4(1, 1, 5, 5, (0..25).map(|_| rng.gen_range(0.0..1.0)).collect());
        // Flows drawn away from integer offsets so finite differences stay
        // clear of interpolation kinks.
        let mut flow = Tensor::zeros(&[1, 2, 5, 5]);
        for v in flow.data_mut() {
            let mut f: f64 = rng.gen_range(-1.5..1.5);
            while (f - f.round()).abs() < 1e-3 {
                f = rng.gen_range(-1.5..1.5);
            }
            *v = f;
        }
        let out = warp_forward(&img, &flow).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let p = y * 5 + x;
                let want = warp_sample_oracle(&img, y, x, flow.data()[p], flow.data()[25 + p]);
                assert!((out.data()[p] - want).abs() < 1e-12);
            }
        }

        // analytic vs central differences on sum(warp)
        let g = Tensor::full(&[1, 1, 5, 5], 1.0);
        let (g_img, g_flow) = warp_backward(&img, &flow, &g);
        let h = 1e-6;
        let loss = |img: &Tensor, flow: &Tensor| -> f64 {
            warp_forward(img, flow).unwrap().data().iter().sum()
        };
        for i in 0..25 {
            let mut ip = img.clone();
            ip.data_mut()[i] += h;
            let mut im = img.clone();
            im.data_mut()[i] -= h;
            let fd = (loss(&ip, &flow) - loss(&im, &flow)) / (2.0 * h);
            let a = g_img.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((a - fd) / denom).abs() < 1e-5,
                "image grad {i}: {a} vs {fd}"
            );
        }
        for i in 0..50 {
            let mut fp = flow.clone();
            fp.data_mut()[i] += h;
            let mut fm = flow.clone();
            fm.data_mut()[i] -= h;
            let fd = (loss(&img, &fp) - loss(&img, &fm)) / (2.0 * h);
            let a = g_flow.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(((a - fd) / denom).abs() < 1e-5, "flow grad {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn rate_bits_half_probability_bin_costs_one_bit() {
        // With mu=0 choose s so P(0) = 2*sigmoid(0.5/s) - 1 = 0.5.
        let s = 0.5 / 3.0_f64.ln();
        let raw = (s - SCALE_EPS).exp_m1().ln(); // softplus inverse
        let latent = Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap();
        let mu = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let raw_s = Tensor::from_vec(&[1], vec![raw]).unwrap();
        let bits = rate_bits_forward(&latent, &mu, &raw_s).unwrap();
        assert!((bits - 1.0).abs() < 1e-9, "bits = {bits}");
    }

    #[test]
    fn rate_bits_capped_at_16_bits_per_symbol() {
        let latent = Tensor::from_vec(&[1, 1, 1, 1], vec![60.0]).unwrap();
        let mu = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let raw_s = Tensor::from_vec(&[1], vec![-5.0]).unwrap(); // tiny scale
        let bits = rate_bits_forward(&latent, &mu, &raw_s).unwrap();
        assert!((bits - 16.0).abs() < 1e-9, "bits = {bits}");
    }

    #[test]
    fn rate_bits_matches_scalar_cdf_difference_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let c = 3;
        let latent = t4(1, c, 4, 4, (0..48).map(|_| rng.gen_range(-6.0..6.0)).collect());
        let mu = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let raw_s = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(-1.0..1.5)).collect())
            .unwrap();
        let bits = rate_bits_forward(&latent, &mu, &raw_s).unwrap();
        // Independent scalar recomputation straight from the CDF difference.
        let mut oracle = 0.0;
        for ci in 0..c {
            let m = mu.data()[ci];
            let raw = raw_s.data()[ci];
            let s = (1.0 + raw.exp()).ln() + 1e-6;
            for i in 0..16 {
                let v = latent.data()[ci * 16 + i];
                let cdf = |z: f64| 1.0 / (1.0 + (-(z - m) / s).exp());
                let p = (cdf(v + 0.5) - cdf(v - 0.5)).max(1.0 / 65536.0);
                oracle += -p.ln() / std::f64::consts::LN_2;
            }
        }
        let rel = ((bits - oracle) / oracle.abs().max(1e-8)).abs();
        assert!(rel < 1e-9, "bits {bits} vs oracle {oracle}");
    }

    #[test]
    fn rate_bits_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let latent = t4(1, 2, 3, 3, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mu = Tensor::from_vec(&[2], vec![0.2, -0.4]).unwrap();
        let raw_s = Tensor::from_vec(&[2], vec![0.3, 0.8]).unwrap();
        let (g_lat, g_mu, g_raw) = rate_bits_backward(&latent, &mu, &raw_s, 1.0);
        let h = 1e-6;
        let check = |a: f64, fd: f64, what: &str| {
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(((a - fd) / denom).abs() < 1e-5, "{what}: {a} vs {fd}");
        };
        for i in 0..latent.len() {
            let mut lp = latent.clone();
            lp.data_mut()[i] += h;
            let mut lm = latent.clone();
            lm.data_mut()[i] -= h;
            let fd = (rate_bits_forward(&lp, &mu, &raw_s).unwrap()
                - rate_bits_forward(&lm, &mu, &raw_s).unwrap())
                / (2.0 * h);
            check(g_lat.data()[i], fd, "latent");
        }
        for i in 0..2 {
            let mut mp = mu.clone();
            mp.data_mut()[i] += h;
            let mut mm = mu.clone();
            mm.data_mut()[i] -= h;
            let fd = (rate_bits_forward(&latent, &mp, &raw_s).unwrap()
                - rate_bits_forward(&latent, &mm, &raw_s).unwrap())
                / (2.0 * h);
            check(g_mu.data()[i], fd, "mu");
            let mut rp = raw_s.clone();
            rp.data_mut()[i] += h;
            let mut rm = raw_s.clone();
            rm.data_mut()[i] -= h;
            let fd = (rate_bits_forward(&latent, &mu, &rp).unwrap()
                - rate_bits_forward(&latent, &mu, &rm).unwrap())
                / (2.0 * h);
            check(g_raw.data()[i], fd, "raw_s");
        }
    }
}
