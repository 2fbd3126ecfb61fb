//! Frame-level encode/decode built on the subnet graph builders.
//!
//! The decode-side computation is one shared op sequence consumed by both
//! `encode_frame_*` and `decode_frame_*`, which is what makes encoder-side and
//! decoder-side reconstructions bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::rate_bits_forward;
use crate::autodiff::{BoundParams, Graph, NodeId, ParamSet, Tensor};

use super::nets;
use super::{CodecConfig, CodecError, CodecModel, FrameBuffer, LatentBlock, LatentKind};

/// Seeded uniform(-0.5, 0.5) noise used as the training-time quantization
/// surrogate.
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-0.5..0.5)).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }
}

/// How latents are quantized inside a graph build.
pub enum Quantizer<'a> {
    /// Add uniform(-0.5, 0.5) noise drawn from the stream (training).
    Noise(&'a mut NoiseStream),
    /// Round half away from zero, clamp to the latent bound; gradients pass
    /// straight through (used by latent-space online updating).
    RoundClamp,
}

impl Quantizer<'_> {
    fn apply(&mut self, g: &mut Graph, latent: NodeId, bound: f64) -> NodeId {
        match self {
            Quantizer::Noise(stream) => {
                let noise = stream.tensor(g.value(latent).shape());
                let noise_id = g.input(noise);
                g.add(latent, noise_id).expect("same shape")
            }
            Quantizer::RoundClamp => g.round_ste(latent, bound),
        }
    }
}

/// Inference quantization: round half away from zero, clamp to
/// `[-bound, bound]`, and count how many values the clamp touched.
pub fn quantize_infer(latent: &Tensor, bound: i32) -> (Tensor, u64) {
    let b = bound as f64;
    let mut clamped = 0u64;
    let data = latent
        .data()
        .iter()
        .map(|&v| {
            let r = v.round();
            if r > b || r < -b {
                clamped += 1;
                r.clamp(-b, b)
            } else {
                r
            }
        })
        .collect();
    (Tensor::from_vec(latent.shape(), data).expect("shape"), clamped)
}

/// Eq-style rate-distortion trade-off: `lambda * mse + bits / pixel_count`.
/// Rate is normalized per pixel so lambda is resolution-independent.
pub fn rd_loss(lambda: f64, mse: f64, bits_motion: f64, bits_residual: f64, pixel_count: usize) -> f64 {
    lambda * mse + (bits_motion + bits_residual) / pixel_count as f64
}

/// Node handles for one P-frame coding step inside a larger graph.
pub struct PStepNodes {
    pub flow: NodeId,
    pub motion_latent: NodeId,
    pub motion_q: NodeId,
    pub flow_hat: NodeId,
    pub warped: NodeId,
    pub prediction: NodeId,
    pub residual_latent: NodeId,
    pub residual_q: NodeId,
    pub recon: NodeId,
    pub bits_motion: NodeId,
    pub bits_residual: NodeId,
    pub distortion: NodeId,
    pub loss: NodeId,
}

/// Build the differentiable P-frame coding step:
/// flow -> motion latent -> quantize -> decoded flow -> motion-compensated
/// prediction -> residual latent -> quantize -> reconstruction, with rate
/// nodes and the scalar loss.
pub fn build_p_step(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    x: NodeId,
    reference: NodeId,
    quant: &mut Quantizer,
) -> Result<PStepNodes, CodecError> {
    let (_, _, h, w) = g.value(x).dims4()?;
    let pixels = (h * w) as f64;
    let bound = cfg.latent_bound as f64;

    let flow = nets::flow_net(g, b, cfg, x, reference)?;
    let motion_latent = nets::motion_encoder(g, b, cfg, flow)?;
    let motion_q = quant.apply(g, motion_latent, bound);
    let flow_hat = nets::motion_decoder(g, b, cfg, motion_q)?;
    let (warped, prediction) = nets::motion_compensation(g, b, cfg, reference, flow_hat)?;
    let residual = g.sub(x, prediction)?;
    let residual_latent = nets::residual_encoder(g, b, cfg, residual)?;
    let residual_q = quant.apply(g, residual_latent, bound);
    let r_hat = nets::residual_decoder(g, b, cfg, residual_q)?;
    let summed = g.add(prediction, r_hat)?;
    let recon = g.clamp01(summed);

    let bits_motion = nets::rate_node(g, b, LatentKind::Motion, motion_q)?;
    let bits_residual = nets::rate_node(g, b, LatentKind::Residual, residual_q)?;
    let distortion = g.mse(x, recon)?;
    let weighted = g.scalar_mul(distortion, cfg.lambda);
    let bits = g.add(bits_motion, bits_residual)?;
    let bpp = g.scalar_mul(bits, 1.0 / pixels);
    let loss = g.add(weighted, bpp)?;

    Ok(PStepNodes {
        flow,
        motion_latent,
        motion_q,
        flow_hat,
        warped,
        prediction,
        residual_latent,
        residual_q,
        recon,
        bits_motion,
        bits_residual,
        distortion,
        loss,
    })
}

/// Node handles for one intra coding step.
pub struct IStepNodes {
    pub latent: NodeId,
    pub latent_q: NodeId,
    pub recon: NodeId,
    pub bits: NodeId,
    pub distortion: NodeId,
    pub loss: NodeId,
}

/// Intra autoencoder step with `lambda_intra = intra_lambda_scale * lambda`.
pub fn build_i_step(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    x: NodeId,
    quant: &mut Quantizer,
) -> Result<IStepNodes, CodecError> {
    let (_, _, h, w) = g.value(x).dims4()?;
    let pixels = (h * w) as f64;
    let latent = nets::intra_encoder(g, b, cfg, x)?;
    let latent_q = quant.apply(g, latent, cfg.latent_bound as f64);
    let recon = nets::intra_decoder(g, b, cfg, latent_q)?;
    let bits = nets::rate_node(g, b, LatentKind::Intra, latent_q)?;
    let distortion = g.mse(x, recon)?;
    let weighted = g.scalar_mul(distortion, cfg.lambda_intra());
    let bpp = g.scalar_mul(bits, 1.0 / pixels);
    let loss = g.add(weighted, bpp)?;
    Ok(IStepNodes {
        latent,
        latent_q,
        recon,
        bits,
        distortion,
        loss,
    })
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PFrameStats {
    /// Estimate-based bits per pixel of the motion latent.
    pub bpp_motion: f64,
    /// Estimate-based bits per pixel of the residual latent.
    pub bpp_residual: f64,
    /// PSNR of the motion-compensated prediction against the original.
    pub prediction_psnr: f64,
    /// PSNR of the 8-bit-quantized reconstruction against the original.
    pub final_psnr: f64,
    /// Latent values touched by the support clamp.
    pub clamped_values: u64,
}

#[derive(Clone, Debug)]
pub struct PFrameResult {
    pub motion: LatentBlock,
    pub residual: LatentBlock,
    /// Encoder outputs before quantization; latent-space online updating
    /// starts from these.
    pub continuous_motion: Tensor,
    pub continuous_residual: Tensor,
    pub recon: FrameBuffer,
    pub loss: f64,
    pub distortion_mse: f64,
    pub bits_motion: f64,
    pub bits_residual: f64,
    pub stats: PFrameStats,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct IFrameStats {
    pub bpp: f64,
    pub final_psnr: f64,
    pub clamped_values: u64,
}

#[derive(Clone, Debug)]
pub struct IFrameResult {
    pub latent: LatentBlock,
    pub recon: FrameBuffer,
    pub loss: f64,
    pub distortion_mse: f64,
    pub bits: f64,
    pub stats: IFrameStats,
}

/// Latents of one coded frame, the unit the container format stores.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameLatents {
    Intra {
        latent: LatentBlock,
    },
    Predicted {
        motion: LatentBlock,
        residual: LatentBlock,
    },
}

impl FrameLatents {
    pub fn kind_char(&self) -> char {
        match self {
            FrameLatents::Intra { .. } => 'I',
            FrameLatents::Predicted { .. } => 'P',
        }
    }

    pub fn is_intra(&self) -> bool {
        matches!(self, FrameLatents::Intra { .. })
    }
}

fn tensor_mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Decoder-side motion half: latent -> decoded flow -> motion-compensated
/// prediction. The exact op sequence shared by encoder and decoder.
fn predict_from_motion(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    motion_id: NodeId,
    ref_id: NodeId,
) -> Result<NodeId, CodecError> {
    let flow_hat = nets::motion_decoder(g, b, cfg, motion_id)?;
    let (_warped, prediction) = nets::motion_compensation(g, b, cfg, ref_id, flow_hat)?;
    Ok(prediction)
}

/// Decoder-side residual half: prediction + decoded residual, clamped.
fn reconstruct_from_prediction(
    g: &mut Graph,
    b: &BoundParams,
    cfg: &CodecConfig,
    prediction: NodeId,
    residual_id: NodeId,
) -> Result<NodeId, CodecError> {
    let r_hat = nets::residual_decoder(g, b, cfg, residual_id)?;
    let summed = g.add(prediction, r_hat)?;
    Ok(g.clamp01(summed))
}

fn check_dims(x: &FrameBuffer, reference: &FrameBuffer) -> Result<(), CodecError> {
    if !x.same_dims(reference) {
        return Err(CodecError::DimensionMismatch(format!(
            "frame {}x{}x{} vs reference {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            reference.width(),
            reference.height(),
            reference.channels()
        )));
    }
    Ok(())
}

fn rate_estimate_for(
    model: &CodecModel,
    kind: LatentKind,
    latent: &Tensor,
) -> Result<f64, CodecError> {
    let prefix = CodecConfig::entropy_prefix(kind);
    let mu = model
        .params
        .tensor(&format!("{prefix}.mu"))
        .expect("entropy params");
    let raw = model
        .params
        .tensor(&format!("{prefix}.raw_s"))
        .expect("entropy params");
    Ok(rate_bits_forward(latent, mu, raw)?)
}

#[allow(clippy::too_many_arguments)]
fn assemble_p_result(
    model: &CodecModel,
    x: &FrameBuffer,
    motion_t: Tensor,
    residual_t: Tensor,
    continuous_motion: Tensor,
    continuous_residual: Tensor,
    prediction: FrameBuffer,
    recon: FrameBuffer,
    clamped_values: u64,
) -> Result<PFrameResult, CodecError> {
    let cfg = &model.config;
    let bits_motion = rate_estimate_for(model, LatentKind::Motion, &motion_t)?;
    let bits_residual = rate_estimate_for(model, LatentKind::Residual, &residual_t)?;
    let pixels = x.pixel_count();
    let mse = tensor_mse(&x.to_tensor(), &recon.to_tensor());
    let loss = rd_loss(cfg.lambda, mse, bits_motion, bits_residual, pixels);
    let stats = PFrameStats {
        bpp_motion: bits_motion / pixels as f64,
        bpp_residual: bits_residual / pixels as f64,
        prediction_psnr: crate::metrics::psnr(x, &prediction)?,
        final_psnr: crate::metrics::psnr(x, &recon.display_quantized())?,
        clamped_values,
    };
    Ok(PFrameResult {
        motion: LatentBlock {
            values: motion_t,
            kind: LatentKind::Motion,
        },
        residual: LatentBlock {
            values: residual_t,
            kind: LatentKind::Residual,
        },
        continuous_motion,
        continuous_residual,
        recon,
        loss,
        distortion_mse: mse,
        bits_motion,
        bits_residual,
        stats,
    })
}

/// Inference-time P-frame encode. Quantizes to integers, reconstructs through
/// the shared decode path, and reports estimate-based rate plus quality stats.
pub fn encode_frame_p(
    model: &CodecModel,
    x: &FrameBuffer,
    reference: &FrameBuffer,
) -> Result<PFrameResult, CodecError> {
    check_dims(x, reference)?;
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = g.bind_frozen(&model.params);
    let x_id = g.input(x.to_tensor());
    let ref_id = g.input(reference.to_tensor());

    let flow = nets::flow_net(&mut g, &b, cfg, x_id, ref_id)?;
    let motion_cont = nets::motion_encoder(&mut g, &b, cfg, flow)?;
    let continuous_motion = g.value(motion_cont).clone();
    let (motion_t, clamp_m) = quantize_infer(&continuous_motion, cfg.latent_bound);
    let motion_id = g.input(motion_t.clone());
    let prediction = predict_from_motion(&mut g, &b, cfg, motion_id, ref_id)?;
    let residual = g.sub(x_id, prediction)?;
    let residual_cont = nets::residual_encoder(&mut g, &b, cfg, residual)?;
    let continuous_residual = g.value(residual_cont).clone();
    let (residual_t, clamp_y) = quantize_infer(&continuous_residual, cfg.latent_bound);
    let residual_id = g.input(residual_t.clone());
    let recon_id = reconstruct_from_prediction(&mut g, &b, cfg, prediction, residual_id)?;

    assemble_p_result(
        model,
        x,
        motion_t,
        residual_t,
        continuous_motion,
        continuous_residual,
        FrameBuffer::from_tensor(g.value(prediction))?,
        FrameBuffer::from_tensor(g.value(recon_id))?,
        clamp_m + clamp_y,
    )
}

/// Evaluate explicit integer latents against a frame: decode-path
/// reconstruction, rate estimates, loss, and stats. Used by latent-space
/// online updating and bitstream cross-checks.
pub fn evaluate_p_latents(
    model: &CodecModel,
    x: &FrameBuffer,
    reference: &FrameBuffer,
    motion_t: &Tensor,
    residual_t: &Tensor,
) -> Result<PFrameResult, CodecError> {
    check_dims(x, reference)?;
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = g.bind_frozen(&model.params);
    let ref_id = g.input(reference.to_tensor());
    let motion_id = g.input(motion_t.clone());
    let residual_id = g.input(residual_t.clone());
    let prediction = predict_from_motion(&mut g, &b, cfg, motion_id, ref_id)?;
    let recon_id = reconstruct_from_prediction(&mut g, &b, cfg, prediction, residual_id)?;
    assemble_p_result(
        model,
        x,
        motion_t.clone(),
        residual_t.clone(),
        motion_t.clone(),
        residual_t.clone(),
        FrameBuffer::from_tensor(g.value(prediction))?,
        FrameBuffer::from_tensor(g.value(recon_id))?,
        0,
    )
}

/// Reconstruct a P frame from latents, the reference, and decoder-side
/// parameters only. Bit-identical to the encoder's reconstruction.
pub fn decode_frame_p(
    decoder_params: &ParamSet,
    cfg: &CodecConfig,
    motion: &LatentBlock,
    residual: &LatentBlock,
    reference: &FrameBuffer,
) -> Result<FrameBuffer, CodecError> {
    let mut g = Graph::new();
    let b = g.bind_frozen(decoder_params);
    let ref_id = g.input(reference.to_tensor());
    let motion_id = g.input(motion.values.clone());
    let residual_id = g.input(residual.values.clone());
    let prediction = predict_from_motion(&mut g, &b, cfg, motion_id, ref_id)?;
    let recon = reconstruct_from_prediction(&mut g, &b, cfg, prediction, residual_id)?;
    FrameBuffer::from_tensor(g.value(recon))
}

/// Inference-time intra encode.
pub fn encode_frame_i(model: &CodecModel, x: &FrameBuffer) -> Result<IFrameResult, CodecError> {
    let cfg = &model.config;
    let mut g = Graph::new();
    let b = g.bind_frozen(&model.params);
    let x_id = g.input(x.to_tensor());
    let latent_cont = nets::intra_encoder(&mut g, &b, cfg, x_id)?;
    let (latent_t, clamped) = quantize_infer(g.value(latent_cont), cfg.latent_bound);
    let latent_id = g.input(latent_t.clone());
    let recon_id = nets::intra_decoder(&mut g, &b, cfg, latent_id)?;
    let recon = FrameBuffer::from_tensor(g.value(recon_id))?;

    let (mu, _) = model.entropy_params(LatentKind::Intra);
    let raw = model
        .params
        .tensor("entropy_intra.raw_s")
        .expect("entropy params");
    let mu_t = Tensor::from_vec(&[mu.len()], mu).expect("shape");
    let bits = rate_bits_forward(&latent_t, &mu_t, raw)?;
    let pixels = x.pixel_count();
    let mse = tensor_mse(&x.to_tensor(), &recon.to_tensor());
    let loss = cfg.lambda_intra() * mse + bits / pixels as f64;
    let stats = IFrameStats {
        bpp: bits / pixels as f64,
        final_psnr: crate::metrics::psnr(x, &recon.display_quantized())?,
        clamped_values: clamped,
    };
    Ok(IFrameResult {
        latent: LatentBlock {
            values: latent_t,
            kind: LatentKind::Intra,
        },
        recon,
        loss,
        distortion_mse: mse,
        bits,
        stats,
    })
}

/// Reconstruct an intra frame from its latent and decoder-side parameters.
pub fn decode_frame_i(
    decoder_params: &ParamSet,
    cfg: &CodecConfig,
    latent: &LatentBlock,
) -> Result<FrameBuffer, CodecError> {
    let mut g = Graph::new();
    let b = g.bind_frozen(decoder_params);
    let latent_id = g.input(latent.values.clone());
    let recon_id = nets::intra_decoder(&mut g, &b, cfg, latent_id)?;
    FrameBuffer::from_tensor(g.value(recon_id))
}
