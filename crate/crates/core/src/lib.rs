//! Desk-scale learned video compression laboratory.
//!
//! The crate is organized around a miniature hybrid motion-compensated codec:
//!
//! - [`autodiff`] — reverse-mode tape over dense `f64` tensors, Adam, and a
//!   finite-difference gradient checker.
//! - [`codec`] — flow estimation, motion/residual autoencoders, quantization,
//!   logistic entropy models, and the per-frame rate-distortion loss.
//! - [`bitstream`] — a carry-less range coder plus the versioned container
//!   format that turns quantized latents into real decodable files.
//! - [`training`] — single-frame rate-distortion training followed by
//!   error-propagation-aware fine-tuning over unrolled multi-frame clips.
//! - [`oeu`] — per-frame online encoder updating at inference, with the
//!   latent-only (LFU) and last-layers (LLU) ablation variants.
//! - [`metrics`] — PSNR, MS-SSIM and Bjøntegaard rate/quality deltas.
//! - [`data`] — deterministic synthetic clips with known ground-truth motion
//!   and raw planar video ingestion.
//! - [`harness`] — experiment orchestration: RD sweeps, per-frame PSNR decay
//!   traces, GoP sweeps and ablation grids, emitted as CSV/JSON reports.
//!
//! All numeric kernels run data-parallel under the `parallel` feature
//! (enabled by default) and fall back to sequential loops without it; both
//! paths produce bit-identical results.

pub mod autodiff;
pub mod bitstream;
pub mod codec;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod oeu;
pub mod par;
pub mod training;
