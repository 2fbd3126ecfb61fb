//! Graph builders for the codec subnets. Encode and decode paths share these
//! so encoder-side and decoder-side reconstructions are the same op sequence.

use crate::autodiff::{AutodiffError, BoundParams, Graph, NodeId};

use super::{CodecConfig, LatentKind};

fn conv_layer(
    g: &mut Graph,
    b: &BoundParams,
    prefix: &str,
    input: NodeId,
    stride: usize,
    leaky: Option<f64>,
) -> Result<NodeId, AutodiffError> {
    let weight = b.node(&format!("{prefix}.weight"))?;
    let bias = b.node(&format!("{prefix}.bias"))?;
    let y = g.conv2d(input, weight, bias, stride, 1)?;
    Ok(match leaky {
        Some(slope) => g.leaky_relu(y, slope),
        None => y,
    })
}

/// Dense displacement field from the current frame and its reference:
/// `[1, 2, H, W]` in pixel units.
pub fn flow_net(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    x: NodeId,
    reference: NodeId,
) -> Result<NodeId, AutodiffError> {
    let s = cfg.leaky_slope;
    let inp = g.concat_channels(&[x, reference])?;
    let h1 = conv_layer(g, b, "flow_net.conv1", inp, 1, Some(s))?;
    let h2 = conv_layer(g, b, "flow_net.conv2", h1, 1, Some(s))?;
    let h3 = conv_layer(g, b, "flow_net.conv3", h2, 1, Some(s))?;
    conv_layer(g, b, "flow_net.conv4", h3, 1, None)
}

/// Flow -> continuous motion latent, downsampled 4x spatially.
pub fn motion_encoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    flow: NodeId,
) -> Result<NodeId, AutodiffError> {
    let h = conv_layer(g, b, "mv_encoder.conv1", flow, 2, Some(cfg.leaky_slope))?;
    conv_layer(g, b, "mv_encoder.conv2", h, 2, None)
}

/// Motion latent -> reconstructed flow `[1, 2, H, W]`.
pub fn motion_decoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    latent: NodeId,
) -> Result<NodeId, AutodiffError> {
    let up1 = g.upsample2x(latent)?;
    let h = conv_layer(g, b, "mv_decoder.conv1", up1, 1, Some(cfg.leaky_slope))?;
    let up2 = g.upsample2x(h)?;
    conv_layer(g, b, "mv_decoder.conv2", up2, 1, None)
}

/// Warp the reference by the decoded flow and refine. Returns
/// `(warped, prediction)`; the prediction is clamped to `[0, 1]`.
pub fn motion_compensation(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    reference: NodeId,
    flow_hat: NodeId,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let warped = g.warp(reference, flow_hat)?;
    let refine_in = g.concat_channels(&[warped, reference, flow_hat])?;
    let h = conv_layer(g, b, "refine_net.conv1", refine_in, 1, Some(cfg.leaky_slope))?;
    let delta = conv_layer(g, b, "refine_net.conv2", h, 1, None)?;
    let summed = g.add(warped, delta)?;
    let prediction = g.clamp01(summed);
    Ok((warped, prediction))
}

pub fn residual_encoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    residual: NodeId,
) -> Result<NodeId, AutodiffError> {
    let h = conv_layer(g, b, "residual_encoder.conv1", residual, 2, Some(cfg.leaky_slope))?;
    conv_layer(g, b, "residual_encoder.conv2", h, 2, None)
}

pub fn residual_decoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    latent: NodeId,
) -> Result<NodeId, AutodiffError> {
    let up1 = g.upsample2x(latent)?;
    let h = conv_layer(g, b, "residual_decoder.conv1", up1, 1, Some(cfg.leaky_slope))?;
    let up2 = g.upsample2x(h)?;
    conv_layer(g, b, "residual_decoder.conv2", up2, 1, None)
}

pub fn intra_encoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    x: NodeId,
) -> Result<NodeId, AutodiffError> {
    let h = conv_layer(g, b, "intra_encoder.conv1", x, 2, Some(cfg.leaky_slope))?;
    conv_layer(g, b, "intra_encoder.conv2", h, 2, None)
}

/// Intra latent -> reconstruction, clamped to `[0, 1]`.
pub fn intra_decoder(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    latent: NodeId,
) -> Result<NodeId, AutodiffError> {
    let up1 = g.upsample2x(latent)?;
    let h = conv_layer(g, b, "intra_decoder.conv1", up1, 1, Some(cfg.leaky_slope))?;
    let up2 = g.upsample2x(h)?;
    let out = conv_layer(g, b, "intra_decoder.conv2", up2, 1, None)?;
    Ok(g.clamp01(out))
}

/// Code-length estimate node for a latent under its entropy model.
pub fn rate_node(
    g: &mut Graph,
    b: &BoundParams,
    kind: LatentKind,
    latent: NodeId,
) -> Result<NodeId, AutodiffError> {
    let prefix = CodecConfig::entropy_prefix(kind);
    let mu = b.node(&format!("{prefix}.mu"))?;
    let raw_s = b.node(&format!("{prefix}.raw_s"))?;
    g.rate_bits(latent, mu, raw_s)
}
