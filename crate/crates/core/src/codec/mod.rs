//! The miniature hybrid video codec: flow estimation, motion-vector and
//! residual autoencoders, motion compensation, an intra autoencoder for
//! I-frames, per-channel logistic entropy models, and the rate-distortion
//! loss.
//!
//! Encoder-side networks: `flow_net`, `mv_encoder`, `residual_encoder`,
//! `intra_encoder`. Decoder-side: `mv_decoder`, `refine_net`,
//! `residual_decoder`, `intra_decoder`. Entropy model parameters are tagged
//! shared-entropy and ship with the decoder.

mod frame;
mod nets;

pub use frame::{
    build_i_step, build_p_step, decode_frame_i, decode_frame_p, encode_frame_i, encode_frame_p, evaluate_p_latents,
    quantize_infer, rd_loss, FrameLatents, IFrameResult, IFrameStats, IStepNodes, PFrameResult,
    NoiseStream, PFrameStats, PStepNodes, Quantizer,
};
pub use nets::{
    flow_net, intra_decoder, intra_encoder, motion_compensation, motion_decoder, motion_encoder,
    rate_node, residual_decoder, residual_encoder,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamSet, Side, Tensor};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("frame dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

/// A decoded or original video frame: planar samples in `[0, 1]`, laid out
/// channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl FrameBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        samples: Vec<f64>,
    ) -> Result<Self, CodecError> {
        if width % 8 != 0 || height % 8 != 0 {
            return Err(CodecError::InvalidFrame(format!(
                "dimensions {width}x{height} must be divisible by 8"
            )));
        }
        if !(channels == 1 || channels == 3) {
            return Err(CodecError::InvalidFrame(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(CodecError::InvalidFrame(format!(
                "expected {} samples, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CodecError::InvalidFrame(format!(
                "sample {v} outside [0, 1]"
            )));
        }
        Ok(FrameBuffer {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn gray(width: usize, height: usize, value: f64) -> Result<Self, CodecError> {
        FrameBuffer::new(width, height, 1, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.samples.clone(),
        )
        .expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CodecError> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(CodecError::InvalidFrame(format!("batch dim {n} != 1")));
        }
        FrameBuffer::new(w, h, c, t.data().to_vec())
    }

    /// The frame a decoder actually emits: samples quantized to 8 bits.
    /// Reported quality metrics use this so they match what raw-file output
    /// produces bit for bit.
    pub fn display_quantized(&self) -> FrameBuffer {
        FrameBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            samples: self
                .samples
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
                .collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.samples
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(
        width: usize,
        height: usize,
        channels: usize,
        bytes: &[u8],
    ) -> Result<Self, CodecError> {
        FrameBuffer::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    pub fn content_hash(&self) -> [u8; 32] {
        self.to_tensor().content_hash()
    }

    pub fn same_dims(&self, other: &FrameBuffer) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }
}

/// Kind tag for a quantized latent tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    Motion,
    Residual,
    Intra,
}

/// A latent feature block: integer-valued after inference quantization,
/// real-valued during training.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock {
    pub values: Tensor,
    pub kind: LatentKind,
}

impl LatentBlock {
    /// Integer symbols in raster order (channel-major), for entropy coding.
    pub fn symbols(&self) -> Vec<i32> {
        self.values.data().iter().map(|&v| v as i32).collect()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Rate-distortion multiplier for P-frames.
    pub lambda: f64,
    /// `lambda_intra = intra_lambda_scale * lambda`.
    pub intra_lambda_scale: f64,
    pub frame_channels: usize,
    pub flow_hidden: usize,
    pub ae_hidden: usize,
    pub motion_latent_channels: usize,
    pub residual_latent_channels: usize,
    pub intra_latent_channels: usize,
    /// Inference-time latents clamp to `[-latent_bound, latent_bound]`.
    pub latent_bound: i32,
    pub leaky_slope: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            lambda: 512.0,
            intra_lambda_scale: 2.0,
            frame_channels: 1,
            flow_hidden: 16,
            ae_hidden: 32,
            motion_latent_channels: 8,
            residual_latent_channels: 16,
            intra_latent_channels: 16,
            latent_bound: 64,
            leaky_slope: 0.1,
        }
    }
}

impl CodecConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        CodecConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn lambda_intra(&self) -> f64 {
        self.intra_lambda_scale * self.lambda
    }

    pub fn entropy_channels(&self, kind: LatentKind) -> usize {
        match kind {
            LatentKind::Motion => self.motion_latent_channels,
            LatentKind::Residual => self.residual_latent_channels,
            LatentKind::Intra => self.intra_latent_channels,
        }
    }

    pub fn entropy_prefix(kind: LatentKind) -> &'static str {
        match kind {
            LatentKind::Motion => "entropy_motion",
            LatentKind::Residual => "entropy_residual",
            LatentKind::Intra => "entropy_intra",
        }
    }
}

/// Conv layer description used to build the parameter table.
struct LayerSpec {
    prefix: &'static str,
    cin_cout: (usize, usize),
    zero_init: bool,
}

/// The complete model: config plus named, side-tagged parameters.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: CodecConfig,
    pub params: ParamSet,
}

/// Side of a parameter derived from its network prefix.
pub fn side_of(name: &str) -> Side {
    if name.starts_with("entropy_") {
        Side::SharedEntropy
    } else if name.starts_with("mv_decoder")
        || name.starts_with("refine_net")
        || name.starts_with("residual_decoder")
        || name.starts_with("intra_decoder")
    {
        Side::Decoder
    } else {
        Side::Encoder
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Seed for a derived deterministic stream; mixes label and indices into the
/// base seed.
pub fn derive_seed(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = fnv1a64(label.as_bytes()) ^ base.rotate_left(17);
    for &p in parts {
        h ^= p.wrapping_mul(0x9E3779B97F4A7C15);
        h = h.rotate_left(23).wrapping_mul(0x100000001b3);
    }
    h
}

impl CodecModel {
    /// Fresh model with deterministic per-parameter initialization. Final
    /// layers of every subnet start at zero so the untrained codec copies its
    /// reference.
    pub fn new(config: CodecConfig, seed: u64) -> Self {
        Self::init(config, seed, true)
    }

    /// Random initialization without the zero final layers; gradients are
    /// healthy everywhere, which is what gradient checks want.
    pub fn new_dense_init(config: CodecConfig, seed: u64) -> Self {
        Self::init(config, seed, false)
    }

    fn init(config: CodecConfig, seed: u64, zero_finals: bool) -> Self {
        let c = config.frame_channels;
        let layers = [
            LayerSpec { prefix: "flow_net.conv1", cin_cout: (2 * c, config.flow_hidden), zero_init: false },
            LayerSpec { prefix: "flow_net.conv2", cin_cout: (config.flow_hidden, config.flow_hidden), zero_init: false },
            LayerSpec { prefix: "flow_net.conv3", cin_cout: (config.flow_hidden, config.flow_hidden), zero_init: false },
            LayerSpec { prefix: "flow_net.conv4", cin_cout: (config.flow_hidden, 2), zero_init: true },
            LayerSpec { prefix: "mv_encoder.conv1", cin_cout: (2, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "mv_encoder.conv2", cin_cout: (config.ae_hidden, config.motion_latent_channels), zero_init: true },
            LayerSpec { prefix: "mv_decoder.conv1", cin_cout: (config.motion_latent_channels, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "mv_decoder.conv2", cin_cout: (config.ae_hidden, 2), zero_init: true },
            LayerSpec { prefix: "refine_net.conv1", cin_cout: (2 * c + 2, config.flow_hidden), zero_init: false },
            LayerSpec { prefix: "refine_net.conv2", cin_cout: (config.flow_hidden, c), zero_init: true },
            LayerSpec { prefix: "residual_encoder.conv1", cin_cout: (c, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "residual_encoder.conv2", cin_cout: (config.ae_hidden, config.residual_latent_channels), zero_init: true },
            LayerSpec { prefix: "residual_decoder.conv1", cin_cout: (config.residual_latent_channels, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "residual_decoder.conv2", cin_cout: (config.ae_hidden, c), zero_init: true },
            LayerSpec { prefix: "intra_encoder.conv1", cin_cout: (c, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "intra_encoder.conv2", cin_cout: (config.ae_hidden, config.intra_latent_channels), zero_init: true },
            LayerSpec { prefix: "intra_decoder.conv1", cin_cout: (config.intra_latent_channels, config.ae_hidden), zero_init: false },
            LayerSpec { prefix: "intra_decoder.conv2", cin_cout: (config.ae_hidden, c), zero_init: true },
        ];
        let mut params = ParamSet::new();
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        for spec in &layers {
            let (cin, cout) = spec.cin_cout;
            let w_name = format!("{}.weight", spec.prefix);
            let weight = if spec.zero_init && zero_finals {
                Tensor::zeros(&[cout, cin, 3, 3])
            } else {
                let fan_in = (cin * 9) as f64;
                let bound = gain * (3.0 / fan_in).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(w_name.as_bytes()));
                let data = (0..cout * cin * 9)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::from_vec(&[cout, cin, 3, 3], data).expect("shape")
            };
            params
                .insert(&w_name, weight, side_of(spec.prefix))
                .expect("unique layer names");
            params
                .insert(
                    &format!("{}.bias", spec.prefix),
                    Tensor::zeros(&[cout]),
                    side_of(spec.prefix),
                )
                .expect("unique layer names");
        }
        // raw scale chosen so softplus(raw) + eps = 1.0
        let raw_unit_scale = (1.0f64 - crate::autodiff::kernels::SCALE_EPS).exp_m1().ln();
        for kind in [LatentKind::Motion, LatentKind::Residual, LatentKind::Intra] {
            let prefix = CodecConfig::entropy_prefix(kind);
            let ch = config.entropy_channels(kind);
            params
                .insert(&format!("{prefix}.mu"), Tensor::zeros(&[ch]), Side::SharedEntropy)
                .expect("unique");
            params
                .insert(
                    &format!("{prefix}.raw_s"),
                    Tensor::full(&[ch], raw_unit_scale),
                    Side::SharedEntropy,
                )
                .expect("unique");
        }
        CodecModel { config, params }
    }

    /// Hash of everything the decoder needs; written into bitstream headers.
    pub fn decoder_hash(&self) -> [u8; 32] {
        self.params.decoder_hash()
    }

    pub fn decoder_hash8(&self) -> [u8; 8] {
        let h = self.decoder_hash();
        h[..8].try_into().unwrap()
    }

    /// Decoder-side view: decoder plus entropy parameters only.
    pub fn decoder_view(&self) -> ParamSet {
        self.params.filter_sides(&[Side::Decoder, Side::SharedEntropy])
    }

    /// Entropy model parameters `(mu, scale)` for a latent kind, with the
    /// softplus reparameterization applied.
    pub fn entropy_params(&self, kind: LatentKind) -> (Vec<f64>, Vec<f64>) {
        let prefix = CodecConfig::entropy_prefix(kind);
        let mu = self
            .params
            .tensor(&format!("{prefix}.mu"))
            .expect("entropy params present")
            .data()
            .to_vec();
        let s = self
            .params
            .tensor(&format!("{prefix}.raw_s"))
            .expect("entropy params present")
            .data()
            .iter()
            .map(|&r| crate::autodiff::kernels::softplus(r) + crate::autodiff::kernels::SCALE_EPS)
            .collect();
        (mu, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framebuffer_validates() {
        assert!(FrameBuffer::new(8, 8, 1, vec![0.5; 64]).is_ok());
        assert!(FrameBuffer::new(9, 8, 1, vec![0.5; 72]).is_err());
        assert!(FrameBuffer::new(8, 8, 1, vec![0.5; 63]).is_err());
        assert!(FrameBuffer::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(FrameBuffer::new(8, 8, 2, vec![0.5; 128]).is_err());
    }

    #[test]
    fn sides_follow_prefixes() {
        assert_eq!(side_of("flow_net.conv1.weight"), Side::Encoder);
        assert_eq!(side_of("mv_encoder.conv2.bias"), Side::Encoder);
        assert_eq!(side_of("intra_encoder.conv1.weight"), Side::Encoder);
        assert_eq!(side_of("mv_decoder.conv1.weight"), Side::Decoder);
        assert_eq!(side_of("refine_net.conv2.bias"), Side::Decoder);
        assert_eq!(side_of("residual_decoder.conv1.weight"), Side::Decoder);
        assert_eq!(side_of("intra_decoder.conv2.weight"), Side::Decoder);
        assert_eq!(side_of("entropy_motion.mu"), Side::SharedEntropy);
    }

    #[test]
    fn model_init_is_deterministic_and_zero_final() {
        let a = CodecModel::new(CodecConfig::default(), 7);
        let b = CodecModel::new(CodecConfig::default(), 7);
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let c = CodecModel::new(CodecConfig::default(), 8);
        assert_ne!(a.params.to_bytes(), c.params.to_bytes());
        let final_w = a.params.tensor("flow_net.conv4.weight").unwrap();
        assert!(final_w.data().iter().all(|&v| v == 0.0));
        let dense = CodecModel::new_dense_init(CodecConfig::default(), 7);
        let fw = dense.params.tensor("flow_net.conv4.weight").unwrap();
        assert!(fw.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn entropy_scale_starts_at_one() {
        let m = CodecModel::new(CodecConfig::default(), 1);
        let (mu, s) = m.entropy_params(LatentKind::Motion);
        assert_eq!(mu.len(), 8);
        assert!(mu.iter().all(|&v| v == 0.0));
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn display_quantization_is_idempotent() {
        let f = FrameBuffer::new(8, 8, 1, (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
        let q = f.display_quantized();
        assert_eq!(q, q.display_quantized());
        assert_eq!(q.to_u8(), f.to_u8());
    }
}
