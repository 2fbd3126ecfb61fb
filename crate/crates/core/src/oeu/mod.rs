//! Online encoder updating at inference time.
//!
//! For each P frame, a private copy of the encoder is refined by gradient
//! steps on that frame's rate-distortion loss while the decoder stays frozen;
//! the emitted latents come from the best inference-mode candidate seen. Two
//! reduced variants update only the latent tensors (LFU) or only the final
//! conv layers of the two encoders (LLU).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, AutodiffError, Graph, ParamSet, Side};
use crate::bitstream::{encode_chunks, BitstreamError, ModelCdfs};
use crate::codec::{
    build_p_step, derive_seed, encode_frame_i, encode_frame_p, evaluate_p_latents, rate_node,
    CodecError, CodecModel, FrameBuffer, FrameLatents, LatentKind, NoiseStream, PFrameResult,
    Quantizer,
};
use crate::metrics::{ms_ssim, psnr, MetricsError, MS_SSIM_DEFAULT_SCALES};

#[derive(Debug, Error)]
pub enum OeuError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("decoder-side parameters changed during online updating")]
    DecoderMutated,
}

/// Which parameters the per-frame optimization may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Baseline encode, no updating.
    Off,
    /// Latent features updating: only the two latent tensors move.
    Lfu,
    /// Last layers updating: final conv of the motion and residual encoders.
    Llu,
    /// Full online encoder updating: every encoder-side parameter.
    Oeu,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Off, Variant::Lfu, Variant::Llu, Variant::Oeu];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Off => "off",
            Variant::Lfu => "lfu",
            Variant::Llu => "llu",
            Variant::Oeu => "oeu",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(Variant::Off),
            "lfu" => Ok(Variant::Lfu),
            "llu" => Ok(Variant::Llu),
            "oeu" => Ok(Variant::Oeu),
            other => Err(format!("unknown variant `{other}` (off | lfu | llu | oeu)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub variant: Variant,
    /// Maximum gradient iterations per frame.
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Early stop once `|L_i - L_{i-1}| < epsilon_rel * L_0` for two
    /// consecutive inference-mode evaluations.
    pub epsilon_rel: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            variant: Variant::Oeu,
            max_iterations: 10,
            learning_rate: 1e-4,
            epsilon_rel: 1e-3,
        }
    }
}

impl OnlineConfig {
    pub fn off() -> Self {
        OnlineConfig {
            variant: Variant::Off,
            ..Default::default()
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        OnlineConfig {
            variant,
            ..Default::default()
        }
    }
}

/// Outcome of online updating for one frame.
#[derive(Clone, Debug)]
pub struct OnlineResult {
    /// The best inference-mode candidate (keep-best over all iterations,
    /// including iteration 0 = the baseline encode).
    pub best: PFrameResult,
    /// Total rate estimate of the baseline encode, for before/after telemetry.
    pub initial_bits_estimate: f64,
    /// Gradient iterations actually performed.
    pub iterations: usize,
    /// Inference-mode loss after each iteration: `L_0 ..= L_iterations`.
    pub trajectory: Vec<f64>,
    pub chosen_iteration: usize,
    /// Non-finite loss was encountered; outputs fell back to iteration 0.
    pub reverted: bool,
}

impl OnlineResult {
    pub fn initial_loss(&self) -> f64 {
        self.trajectory[0]
    }

    /// `L_0 - L_best`; non-negative by construction.
    pub fn improvement(&self) -> f64 {
        self.trajectory[0] - self.best.loss
    }
}

/// Parameter names a variant is allowed to update.
pub fn update_set(model: &CodecModel, variant: Variant) -> HashSet<String> {
    match variant {
        Variant::Off | Variant::Lfu => HashSet::new(),
        Variant::Llu => ["mv_encoder.conv2", "residual_encoder.conv2"]
            .iter()
            .flat_map(|p| [format!("{p}.weight"), format!("{p}.bias")])
            .collect(),
        Variant::Oeu => model
            .params
            .iter()
            .filter(|(_, e)| e.side == Side::Encoder)
            .map(|(n, _)| n.clone())
            .collect(),
    }
}

/// Run online updating for one P frame. The persistent model is never
/// mutated; gradient work happens on a private clone (or on the latent
/// tensors for LFU). Candidates are evaluated in inference mode after every
/// iteration and the best one wins.
pub fn online_update(
    model: &CodecModel,
    x: &FrameBuffer,
    reference: &FrameBuffer,
    cfg: &OnlineConfig,
    frame_seed: u64,
) -> Result<OnlineResult, OeuError> {
    let decoder_hash_before = model.params.decoder_hash();
    let baseline = encode_frame_p(model, x, reference)?;
    let result = match cfg.variant {
        Variant::Off => {
            let l0 = baseline.loss;
            let bits0 = baseline.bits_motion + baseline.bits_residual;
            OnlineResult {
                best: baseline,
                initial_bits_estimate: bits0,
                iterations: 0,
                trajectory: vec![l0],
                chosen_iteration: 0,
                reverted: false,
            }
        }
        Variant::Oeu | Variant::Llu => {
            parameter_space_update(model, x, reference, cfg, frame_seed, baseline)?
        }
        Variant::Lfu => latent_space_update(model, x, reference, cfg, baseline)?,
    };
    if model.params.decoder_hash() != decoder_hash_before {
        return Err(OeuError::DecoderMutated);
    }
    Ok(result)
}

/// Shared keep-best iteration loop. `gradient_step` performs one update of
/// whatever state the variant optimizes and returns the new inference-mode
/// candidate, or `None` when a non-finite value calls for a revert.
fn keep_best_loop(
    cfg: &OnlineConfig,
    baseline: PFrameResult,
    mut gradient_step: impl FnMut(usize) -> Result<Option<PFrameResult>, OeuError>,
) -> Result<OnlineResult, OeuError> {
    let l0 = baseline.loss;
    let bits0 = baseline.bits_motion + baseline.bits_residual;
    let eps = cfg.epsilon_rel * l0.abs();
    let mut trajectory = vec![l0];
    let mut best = baseline.clone();
    let mut chosen_iteration = 0;
    let mut iterations = 0;
    let mut reverted = false;
    for i in 1..=cfg.max_iterations {
        // stability check over the two most recent completed evaluations
        if i >= 2 && (trajectory[i - 1] - trajectory[i - 2]).abs() < eps {
            break;
        }
        match gradient_step(i)? {
            Some(candidate) if candidate.loss.is_finite() => {
                trajectory.push(candidate.loss);
                iterations = i;
                if candidate.loss < best.loss {
                    best = candidate;
                    chosen_iteration = i;
                }
            }
            _ => {
                reverted = true;
                break;
            }
        }
    }
    if reverted {
        best = baseline;
        chosen_iteration = 0;
    }
    Ok(OnlineResult {
        best,
        initial_bits_estimate: bits0,
        iterations,
        trajectory,
        chosen_iteration,
        reverted,
    })
}

fn parameter_space_update(
    model: &CodecModel,
    x: &FrameBuffer,
    reference: &FrameBuffer,
    cfg: &OnlineConfig,
    frame_seed: u64,
    baseline: PFrameResult,
) -> Result<OnlineResult, OeuError> {
    let allowed = update_set(model, cfg.variant);
    let mut work = model.clone();
    let mut adam = AdamState::new();
    let x_t = x.to_tensor();
    let ref_t = reference.to_tensor();
    keep_best_loop(cfg, baseline, |i| {
        // gradient from a train-mode forward with fresh seeded noise
        let mut g = Graph::new();
        let bound = g.bind(&work.params)?;
        let x_id = g.input(x_t.clone());
        let ref_id = g.input(ref_t.clone());
        let mut noise = NoiseStream::new(derive_seed(frame_seed, "oeu-noise", &[i as u64]));
        let mut quant = Quantizer::Noise(&mut noise);
        let step = build_p_step(&mut g, &bound, &work.config, x_id, ref_id, &mut quant)?;
        if !g.value(step.loss).scalar_value().is_finite() {
            return Ok(None);
        }
        let mut grads = g.backward(step.loss)?;
        grads.retain(|name| allowed.contains(name));
        if grads.first_non_finite().is_some() {
            return Ok(None);
        }
        adam_step(&mut work.params, &grads, &mut adam, cfg.learning_rate)?;
        Ok(Some(encode_frame_p(&work, x, reference)?))
    })
}

fn latent_space_update(
    model: &CodecModel,
    x: &FrameBuffer,
    reference: &FrameBuffer,
    cfg: &OnlineConfig,
    baseline: PFrameResult,
) -> Result<OnlineResult, OeuError> {
    const MOTION: &str = "online.motion_latent";
    const RESIDUAL: &str = "online.residual_latent";
    let mut latents = ParamSet::new();
    latents
        .insert(MOTION, baseline.continuous_motion.clone(), Side::Encoder)
        .expect("fresh set");
    latents
        .insert(RESIDUAL, baseline.continuous_residual.clone(), Side::Encoder)
        .expect("fresh set");
    let mut adam = AdamState::new();
    let x_t = x.to_tensor();
    let ref_t = reference.to_tensor();
    let ccfg = model.config.clone();
    let bound_val = ccfg.latent_bound as f64;
    let pixels = x.pixel_count() as f64;
    keep_best_loop(cfg, baseline, |_i| {
        // loss graph: model frozen, rounding passed through straight-through,
        // no quantization noise (the latents are already post-encoder)
        let mut g = Graph::new();
        let frozen = g.bind_frozen(&model.params);
        let m_id = g.param(MOTION, latents.tensor(MOTION)?.clone())?;
        let y_id = g.param(RESIDUAL, latents.tensor(RESIDUAL)?.clone())?;
        let x_id = g.input(x_t.clone());
        let ref_id = g.input(ref_t.clone());
        let m_ste = g.round_ste(m_id, bound_val);
        let y_ste = g.round_ste(y_id, bound_val);
        let flow_hat = crate::codec::motion_decoder(&mut g, &frozen, &ccfg, m_ste)?;
        let (_w, prediction) =
            crate::codec::motion_compensation(&mut g, &frozen, &ccfg, ref_id, flow_hat)?;
        let r_hat = crate::codec::residual_decoder(&mut g, &frozen, &ccfg, y_ste)?;
        let summed = g.add(prediction, r_hat)?;
        let recon = g.clamp01(summed);
        let bits_m = rate_node(&mut g, &frozen, LatentKind::Motion, m_ste)?;
        let bits_y = rate_node(&mut g, &frozen, LatentKind::Residual, y_ste)?;
        let d = g.mse(x_id, recon)?;
        let weighted = g.scalar_mul(d, ccfg.lambda);
        let bits = g.add(bits_m, bits_y)?;
        let bpp = g.scalar_mul(bits, 1.0 / pixels);
        let loss = g.add(weighted, bpp)?;
        if !g.value(loss).scalar_value().is_finite() {
            return Ok(None);
        }
        let grads = g.backward(loss)?;
        if grads.first_non_finite().is_some() {
            return Ok(None);
        }
        adam_step(&mut latents, &grads, &mut adam, cfg.learning_rate)?;
        // inference evaluation of the rounded candidates
        let (m_round, _) =
            crate::codec::quantize_infer(latents.tensor(MOTION)?, ccfg.latent_bound);
        let (y_round, _) =
            crate::codec::quantize_infer(latents.tensor(RESIDUAL)?, ccfg.latent_bound);
        Ok(Some(evaluate_p_latents(model, x, reference, &m_round, &y_round)?))
    })
}

/// Per-frame telemetry of an online-updated sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnlineTelemetry {
    pub iterations: usize,
    pub l0: f64,
    pub l_best: f64,
    /// Estimate-based bits per pixel before updating.
    pub bpp_before: f64,
    /// Estimate-based bits per pixel of the emitted candidate.
    pub bpp_after: f64,
    pub chosen_iteration: usize,
    pub reverted: bool,
}

/// One coded frame of a sequence.
#[derive(Clone, Debug)]
pub struct CodedFrame {
    pub index: usize,
    pub kind: char,
    pub latents: FrameLatents,
    pub recon: FrameBuffer,
    pub loss: f64,
    pub distortion_mse: f64,
    pub bits_estimate: f64,
    /// Container bytes this frame occupies (framing included).
    pub chunk_bytes: usize,
    /// PSNR of the 8-bit reconstruction against the original.
    pub psnr: f64,
    /// MS-SSIM at the default scale count; `None` when the frame is too small.
    pub ms_ssim: Option<f64>,
    pub telemetry: Option<OnlineTelemetry>,
}

#[derive(Clone, Debug)]
pub struct CodedSequence {
    pub frames: Vec<CodedFrame>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl CodedSequence {
    pub fn latents(&self) -> Vec<FrameLatents> {
        self.frames.iter().map(|f| f.latents.clone()).collect()
    }

    /// Payload-level bits per pixel (chunk bytes, header excluded).
    pub fn mean_chunk_bpp(&self) -> f64 {
        let bytes: usize = self.frames.iter().map(|f| f.chunk_bytes).sum();
        8.0 * bytes as f64 / (self.width * self.height * self.frames.len()) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.frames.iter().map(|f| f.loss).sum::<f64>() / self.frames.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct SequenceConfig {
    pub gop: usize,
    pub online: OnlineConfig,
    pub seed: u64,
}

impl SequenceConfig {
    pub fn baseline(gop: usize) -> Self {
        SequenceConfig {
            gop,
            online: OnlineConfig::off(),
            seed: 0,
        }
    }
}

/// Code a clip: intra frames at GoP boundaries, predicted frames chained on
/// reconstructions (never on originals), with the configured online-updating
/// variant on P frames.
pub fn code_sequence(
    model: &CodecModel,
    frames: &[FrameBuffer],
    cfg: &SequenceConfig,
) -> Result<CodedSequence, OeuError> {
    assert!(cfg.gop >= 1, "gop must be >= 1");
    assert!(!frames.is_empty(), "empty clip");
    let cdfs = ModelCdfs::for_model(model);
    let mut coded: Vec<CodedFrame> = Vec::with_capacity(frames.len());
    let mut reference: Option<FrameBuffer> = None;
    for (t, frame) in frames.iter().enumerate() {
        let pixels = frame.pixel_count() as f64;
        let (latents, recon, loss, mse, bits, kind, telemetry) = if t % cfg.gop == 0 {
            let enc = encode_frame_i(model, frame)?;
            (
                FrameLatents::Intra { latent: enc.latent },
                enc.recon,
                enc.loss,
                enc.distortion_mse,
                enc.bits,
                'I',
                None,
            )
        } else {
            let reference = reference.as_ref().expect("P frame follows a coded frame");
            let result = online_update(
                model,
                frame,
                reference,
                &cfg.online,
                derive_seed(cfg.seed, "sequence-frame", &[t as u64]),
            )?;
            let best = result.best;
            let bits = best.bits_motion + best.bits_residual;
            let telemetry = OnlineTelemetry {
                iterations: result.iterations,
                l0: result.trajectory[0],
                l_best: best.loss,
                bpp_before: result.initial_bits_estimate / pixels,
                bpp_after: bits / pixels,
                chosen_iteration: result.chosen_iteration,
                reverted: result.reverted,
            };
            (
                FrameLatents::Predicted {
                    motion: best.motion,
                    residual: best.residual,
                },
                best.recon,
                best.loss,
                best.distortion_mse,
                bits,
                'P',
                Some(telemetry),
            )
        };
        let chunk = encode_chunks(std::slice::from_ref(&latents), &cdfs)?;
        let chunk_bytes = chunk[0].container_bytes();
        let quality = recon.display_quantized();
        let frame_psnr = psnr(frame, &quality)?;
        let frame_ssim =
            if frame.width().min(frame.height()) >= 16 << (MS_SSIM_DEFAULT_SCALES - 1) {
                Some(ms_ssim(frame, &quality, MS_SSIM_DEFAULT_SCALES)?)
            } else {
                None
            };
        coded.push(CodedFrame {
            index: t,
            kind,
            latents,
            recon: recon.clone(),
            loss,
            distortion_mse: mse,
            bits_estimate: bits,
            chunk_bytes,
            psnr: frame_psnr,
            ms_ssim: frame_ssim,
            telemetry,
        });
        reference = Some(recon);
    }
    Ok(CodedSequence {
        frames: coded,
        width: frames[0].width(),
        height: frames[0].height(),
        channels: frames[0].channels(),
    })
}

/// Summary of one updating variant over a test set, for ablation tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_loss: f64,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
    pub mean_iterations: f64,
    pub p_frames: usize,
}

/// Run each variant over the same clips with the same frozen model. Clips are
/// coded with `gop` boundaries; means are taken over P frames.
pub fn variant_comparison(
    model: &CodecModel,
    clips: &[&[FrameBuffer]],
    gop: usize,
    variants: &[Variant],
    seed: u64,
) -> Result<Vec<VariantSummary>, OeuError> {
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let per_clip = crate::par::map_indexed(clips.len(), |ci| {
            let cfg = SequenceConfig {
                gop,
                online: OnlineConfig::for_variant(variant),
                seed: derive_seed(seed, "variant-clip", &[ci as u64]),
            };
            code_sequence(model, clips[ci], &cfg)
        });
        let mut loss = 0.0;
        let mut bpp = 0.0;
        let mut quality = 0.0;
        let mut iterations = 0usize;
        let mut p_frames = 0usize;
        for coded in per_clip {
            let coded = coded?;
            for f in &coded.frames {
                if f.kind == 'P' {
                    loss += f.loss;
                    bpp += 8.0 * f.chunk_bytes as f64 / (coded.width * coded.height) as f64;
                    quality += f.psnr;
                    iterations += f.telemetry.as_ref().map(|t| t.iterations).unwrap_or(0);
                    p_frames += 1;
                }
            }
        }
        let n = p_frames.max(1) as f64;
        out.push(VariantSummary {
            variant,
            mean_loss: loss / n,
            mean_bpp: bpp / n,
            mean_psnr: quality / n,
            mean_iterations: iterations as f64 / n,
            p_frames,
        });
    }
    Ok(out)
}
