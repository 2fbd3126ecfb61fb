//! Versioned sequence container.
//!
//! Layout (little-endian, documented byte-exactly in FORMATS.md):
//!
//! ```text
//! "EPAB"   magic, 4 bytes
//! u16      format version (currently 1)
//! u32      width
//! u32      height
//! u8       channels
//! u32      frame count
//! u32      GoP size
//! u32      lambda
//! [u8; 8]  model hash (decoder-side + entropy parameters)
//! then per frame:
//!   u8     frame type: 0 = I, 1 = P
//!   I: u32 payload length, payload
//!   P: u32 motion length, motion payload, u32 residual length, residual payload
//! ```
//!
//! The file ends exactly after the last chunk; trailing bytes are an error.
//! Headers and chunk lengths parse without the model; payloads decode only
//! with a matching one.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::codec::{
    decode_frame_i, decode_frame_p, CodecConfig, CodecModel, FrameBuffer, FrameLatents,
    LatentBlock, LatentKind,
};

use super::cdf::CdfTable;
use super::range::{RangeDecoder, RangeEncoder};
use super::BitstreamError;

pub const CONTAINER_MAGIC: &[u8; 4] = b"EPAB";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceHeader {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub frame_count: u32,
    pub gop: u32,
    pub lambda: u32,
    pub model_hash: [u8; 8],
}

/// Entropy-coded payloads of one frame, before/after latent coding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RawFrameChunk {
    Intra { payload: Vec<u8> },
    Predicted { motion: Vec<u8>, residual: Vec<u8> },
}

impl RawFrameChunk {
    /// Bytes this chunk occupies in the container, framing included.
    pub fn container_bytes(&self) -> usize {
        match self {
            RawFrameChunk::Intra { payload } => 1 + 4 + payload.len(),
            RawFrameChunk::Predicted { motion, residual } => {
                1 + 4 + motion.len() + 4 + residual.len()
            }
        }
    }
}

/// The CDF tables of one model, built once and reused.
#[derive(Clone, Debug)]
pub struct ModelCdfs {
    pub motion: CdfTable,
    pub residual: CdfTable,
    pub intra: CdfTable,
}

impl ModelCdfs {
    pub fn for_model(model: &CodecModel) -> Self {
        ModelCdfs {
            motion: CdfTable::for_model(model, LatentKind::Motion),
            residual: CdfTable::for_model(model, LatentKind::Residual),
            intra: CdfTable::for_model(model, LatentKind::Intra),
        }
    }

    pub fn of(&self, kind: LatentKind) -> &CdfTable {
        match kind {
            LatentKind::Motion => &self.motion,
            LatentKind::Residual => &self.residual,
            LatentKind::Intra => &self.intra,
        }
    }
}

/// Range-encode one latent block, channel-major raster order.
pub fn encode_latent_payload(
    latent: &LatentBlock,
    cdf: &CdfTable,
) -> Result<Vec<u8>, BitstreamError> {
    let (_, c, h, w) = latent.values.dims4().map_err(crate::codec::CodecError::from)?;
    let plane = h * w;
    let mut enc = RangeEncoder::new();
    for ci in 0..c {
        let table = cdf.channel(ci);
        for i in 0..plane {
            let v = latent.values.data()[ci * plane + i] as i32;
            if v < -cdf.bound() || v > cdf.bound() {
                return Err(BitstreamError::SymbolOutOfSupport {
                    index: (v + cdf.bound()) as usize,
                    count: cdf.symbol_count(),
                });
            }
            table.encode_symbol(&mut enc, cdf.index_of(v))?;
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_latent_payload`] for known latent dimensions.
pub fn decode_latent_payload(
    payload: &[u8],
    cdf: &CdfTable,
    kind: LatentKind,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<LatentBlock, BitstreamError> {
    let plane = h * w;
    let mut dec = RangeDecoder::new(payload);
    let mut data = vec![0.0; channels * plane];
    for ci in 0..channels {
        let table = cdf.channel(ci);
        for i in 0..plane {
            let idx = table.decode_symbol(&mut dec);
            data[ci * plane + i] = cdf.value_of(idx) as f64;
        }
    }
    Ok(LatentBlock {
        values: Tensor::from_vec(&[1, channels, h, w], data)
            .map_err(crate::codec::CodecError::from)?,
        kind,
    })
}

/// Entropy-code every frame's latents into raw chunks.
pub fn encode_chunks(
    latents: &[FrameLatents],
    cdfs: &ModelCdfs,
) -> Result<Vec<RawFrameChunk>, BitstreamError> {
    latents
        .iter()
        .map(|f| match f {
            FrameLatents::Intra { latent } => Ok(RawFrameChunk::Intra {
                payload: encode_latent_payload(latent, &cdfs.intra)?,
            }),
            FrameLatents::Predicted { motion, residual } => Ok(RawFrameChunk::Predicted {
                motion: encode_latent_payload(motion, &cdfs.motion)?,
                residual: encode_latent_payload(residual, &cdfs.residual)?,
            }),
        })
        .collect()
}

pub fn write_container(header: &SequenceHeader, chunks: &[RawFrameChunk]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&header.width.to_le_bytes());
    buf.extend_from_slice(&header.height.to_le_bytes());
    buf.push(header.channels);
    buf.extend_from_slice(&header.frame_count.to_le_bytes());
    buf.extend_from_slice(&header.gop.to_le_bytes());
    buf.extend_from_slice(&header.lambda.to_le_bytes());
    buf.extend_from_slice(&header.model_hash);
    for chunk in chunks {
        match chunk {
            RawFrameChunk::Intra { payload } => {
                buf.push(0);
                buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                buf.extend_from_slice(payload);
            }
            RawFrameChunk::Predicted { motion, residual } => {
                buf.push(1);
                buf.extend_from_slice(&(motion.len() as u32).to_le_bytes());
                buf.extend_from_slice(motion);
                buf.extend_from_slice(&(residual.len() as u32).to_le_bytes());
                buf.extend_from_slice(residual);
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], BitstreamError> {
        if self.pos + n > self.bytes.len() {
            return Err(BitstreamError::Parse {
                offset: self.pos,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, BitstreamError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse the container structure. Needs no model.
pub fn parse_container(
    bytes: &[u8],
) -> Result<(SequenceHeader, Vec<RawFrameChunk>), BitstreamError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(BitstreamError::Parse {
            offset: 0,
            detail: "bad magic bytes (not a sequence container)".into(),
        });
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(BitstreamError::Parse {
            offset: 4,
            detail: format!("unsupported container version {version}"),
        });
    }
    let width = cur.u32("width")?;
    let height = cur.u32("height")?;
    let channels = cur.take(1, "channels")?[0];
    let frame_count = cur.u32("frame count")?;
    let gop = cur.u32("gop")?;
    let lambda = cur.u32("lambda")?;
    let model_hash: [u8; 8] = cur.take(8, "model hash")?.try_into().unwrap();
    let header = SequenceHeader {
        width,
        height,
        channels,
        frame_count,
        gop,
        lambda,
        model_hash,
    };
    let mut chunks = Vec::with_capacity(frame_count as usize);
    for i in 0..frame_count {
        let ty = cur.take(1, "frame type")?[0];
        match ty {
            0 => {
                let len = cur.u32("intra payload length")? as usize;
                let payload = cur.take(len, "intra payload")?.to_vec();
                chunks.push(RawFrameChunk::Intra { payload });
            }
            1 => {
                let mlen = cur.u32("motion payload length")? as usize;
                let motion = cur.take(mlen, "motion payload")?.to_vec();
                let rlen = cur.u32("residual payload length")? as usize;
                let residual = cur.take(rlen, "residual payload")?.to_vec();
                chunks.push(RawFrameChunk::Predicted { motion, residual });
            }
            other => {
                return Err(BitstreamError::Parse {
                    offset: cur.pos - 1,
                    detail: format!("unknown frame type {other} in frame {i}"),
                });
            }
        }
    }
    if cur.pos != bytes.len() {
        return Err(BitstreamError::TrailingBytes {
            extra: bytes.len() - cur.pos,
        });
    }
    Ok((header, chunks))
}

/// Entropy-code a coded sequence's latents into a complete container.
pub fn write_sequence(
    model: &CodecModel,
    latents: &[FrameLatents],
    gop: usize,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Vec<u8>, BitstreamError> {
    let cdfs = ModelCdfs::for_model(model);
    let chunks = encode_chunks(latents, &cdfs)?;
    let header = SequenceHeader {
        width: width as u32,
        height: height as u32,
        channels: channels as u8,
        frame_count: latents.len() as u32,
        gop: gop as u32,
        lambda: model.config.lambda as u32,
        model_hash: model.decoder_hash8(),
    };
    Ok(write_container(&header, &chunks))
}

/// Atomic file write (temp + rename).
pub fn write_sequence_file(path: &Path, bytes: &[u8]) -> Result<(), BitstreamError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Everything decoding needs: decoder-side parameters, config, and the hash
/// the bitstream must match.
pub struct Decoder {
    params: crate::autodiff::ParamSet,
    config: CodecConfig,
    hash8: [u8; 8],
    cdfs: ModelCdfs,
}

impl Decoder {
    pub fn from_model(model: &CodecModel) -> Self {
        Decoder {
            params: model.decoder_view(),
            config: model.config.clone(),
            hash8: model.decoder_hash8(),
            cdfs: ModelCdfs::for_model(model),
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }
}

#[derive(Clone, Debug)]
pub struct DecodedSequence {
    pub header: SequenceHeader,
    pub frames: Vec<FrameBuffer>,
    pub latents: Vec<FrameLatents>,
}

/// Decode a container back to reconstructions bit-identical to the encoder's.
pub fn read_sequence(decoder: &Decoder, bytes: &[u8]) -> Result<DecodedSequence, BitstreamError> {
    let (header, chunks) = parse_container(bytes)?;
    if header.model_hash != decoder.hash8 {
        return Err(BitstreamError::HashMismatch {
            expected: decoder.hash8,
            found: header.model_hash,
        });
    }
    let w = header.width as usize;
    let h = header.height as usize;
    let (lh, lw) = (h / 4, w / 4);
    let cfg = &decoder.config;
    let mut frames: Vec<FrameBuffer> = Vec::with_capacity(chunks.len());
    let mut latents = Vec::with_capacity(chunks.len());
    let mut reference: Option<FrameBuffer> = None;
    for (i, chunk) in chunks.iter().enumerate() {
        let recon = match chunk {
            RawFrameChunk::Intra { payload } => {
                let latent = decode_latent_payload(
                    payload,
                    &decoder.cdfs.intra,
                    LatentKind::Intra,
                    cfg.intra_latent_channels,
                    lh,
                    lw,
                )?;
                let recon = decode_frame_i(&decoder.params, cfg, &latent)?;
                latents.push(FrameLatents::Intra { latent });
                recon
            }
            RawFrameChunk::Predicted { motion, residual } => {
                let reference = reference.as_ref().ok_or(BitstreamError::FirstFrameNotIntra)?;
                let motion = decode_latent_payload(
                    motion,
                    &decoder.cdfs.motion,
                    LatentKind::Motion,
                    cfg.motion_latent_channels,
                    lh,
                    lw,
                )?;
                let residual = decode_latent_payload(
                    residual,
                    &decoder.cdfs.residual,
                    LatentKind::Residual,
                    cfg.residual_latent_channels,
                    lh,
                    lw,
                )?;
                let recon = decode_frame_p(&decoder.params, cfg, &motion, &residual, reference)?;
                latents.push(FrameLatents::Predicted { motion, residual });
                recon
            }
        };
        let _ = i;
        frames.push(recon.clone());
        reference = Some(recon);
    }
    Ok(DecodedSequence {
        header,
        frames,
        latents,
    })
}

/// Container-inclusive bits per pixel of a coded sequence.
pub fn bpp_of(bytes_len: usize, width: usize, height: usize, frames: usize) -> f64 {
    8.0 * bytes_len as f64 / (width as f64 * height as f64 * frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_frame_i, encode_frame_p, CodecConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, w: usize, h: usize) -> FrameBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameBuffer::new(w, h, 1, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn code_clip(model: &CodecModel, frames: &[FrameBuffer]) -> (Vec<FrameLatents>, Vec<FrameBuffer>) {
        let mut latents = Vec::new();
        let mut recons: Vec<FrameBuffer> = Vec::new();
        for (i, f) in frames.iter().enumerate() {
            if i == 0 {
                let enc = encode_frame_i(model, f).unwrap();
                latents.push(FrameLatents::Intra { latent: enc.latent });
                recons.push(enc.recon);
            } else {
                let enc = encode_frame_p(model, f, recons.last().unwrap()).unwrap();
                latents.push(FrameLatents::Predicted {
                    motion: enc.motion,
                    residual: enc.residual,
                });
                recons.push(enc.recon);
            }
        }
        (latents, recons)
    }

    #[test]
    fn sequence_round_trip_is_bit_exact() {
        let model = CodecModel::new_dense_init(CodecConfig::default(), 21);
        let frames: Vec<FrameBuffer> = (0..6).map(|i| random_frame(300 + i, 16, 16)).collect();
        let (latents, recons) = code_clip(&model, &frames);
        let bytes = write_sequence(&model, &latents, 6, 16, 16, 1).unwrap();

        let decoder = Decoder::from_model(&model);
        let decoded = read_sequence(&decoder, &bytes).unwrap();
        assert_eq!(decoded.frames.len(), 6);
        for (a, b) in recons.iter().zip(&decoded.frames) {
            assert_eq!(a.content_hash(), b.content_hash());
        }
        assert_eq!(latents, decoded.latents);
        // determinism: rewriting produces identical bytes
        let again = write_sequence(&model, &latents, 6, 16, 16, 1).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn model_hash_mismatch_is_rejected_before_decoding() {
        let model = CodecModel::new_dense_init(CodecConfig::default(), 22);
        let other = CodecModel::new_dense_init(CodecConfig::default(), 23);
        let frames: Vec<FrameBuffer> = (0..2).map(|i| random_frame(400 + i, 16, 16)).collect();
        let (latents, _) = code_clip(&model, &frames);
        let bytes = write_sequence(&model, &latents, 2, 16, 16, 1).unwrap();
        let decoder = Decoder::from_model(&other);
        assert!(matches!(
            read_sequence(&decoder, &bytes),
            Err(BitstreamError::HashMismatch { .. })
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_parse_errors() {
        let model = CodecModel::new_dense_init(CodecConfig::default(), 24);
        let frames: Vec<FrameBuffer> = (0..2).map(|i| random_frame(500 + i, 16, 16)).collect();
        let (latents, _) = code_clip(&model, &frames);
        let bytes = write_sequence(&model, &latents, 2, 16, 16, 1).unwrap();
        match parse_container(&bytes[..bytes.len() - 3]) {
            Err(BitstreamError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            parse_container(&extra),
            Err(BitstreamError::TrailingBytes { extra: 1 })
        ));
        // header parses without any model
        let (header, chunks) = parse_container(&bytes).unwrap();
        assert_eq!(header.frame_count, 2);
        assert_eq!(chunks.len(), 2);
        assert_eq!(
            bytes.len(),
            35 + chunks.iter().map(|c| c.container_bytes()).sum::<usize>()
        );
    }

    #[test]
    fn payload_byte_flips_change_decoded_output() {
        let model = CodecModel::new_dense_init(CodecConfig::default(), 25);
        let frames: Vec<FrameBuffer> = (0..3).map(|i| random_frame(600 + i, 16, 16)).collect();
        let (latents, _) = code_clip(&model, &frames);
        let bytes = write_sequence(&model, &latents, 3, 16, 16, 1).unwrap();
        let decoder = Decoder::from_model(&model);
        let clean = read_sequence(&decoder, &bytes).unwrap();

        // payload byte ranges, skipping structurally inert bytes: the leading
        // byte (the encoder's initial cache, shifted out of the 32-bit code)
        // and the last 4 flush bytes (read after the final symbol decision)
        let (_, chunks) = parse_container(&bytes).unwrap();
        let mut ranges = Vec::new();
        let mut pos = 35;
        for c in &chunks {
            match c {
                RawFrameChunk::Intra { payload } => {
                    ranges.push((pos + 6, pos + 5 + payload.len().saturating_sub(4)));
                    pos += c.container_bytes();
                }
                RawFrameChunk::Predicted { motion, residual } => {
                    let m0 = pos + 5;
                    ranges.push((m0 + 1, m0 + motion.len().saturating_sub(4)));
                    let r0 = m0 + motion.len() + 4;
                    ranges.push((r0 + 1, r0 + residual.len().saturating_sub(4)));
                    pos += c.container_bytes();
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tested = 0;
        while tested < 100 {
            let (lo, hi) = ranges[rng.gen_range(0..ranges.len())];
            if lo >= hi {
                continue;
            }
            let idx = rng.gen_range(lo..hi);
            let mut corrupted = bytes.clone();
            corrupted[idx] ^= 1 << rng.gen_range(0..8);
            match read_sequence(&decoder, &corrupted) {
                Err(_) => {}
                Ok(out) => {
                    let differs = out
                        .frames
                        .iter()
                        .zip(&clean.frames)
                        .any(|(a, b)| a.content_hash() != b.content_hash());
                    assert!(differs, "flip at byte {idx} went unnoticed");
                }
            }
            tested += 1;
        }
    }
}
