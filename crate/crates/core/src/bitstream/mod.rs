//! Range coding and the decodable container format.
//!
//! Turns quantized latents plus entropy models into real byte streams whose
//! measured lengths validate the code-length estimates.

mod cdf;
mod container;
mod range;

pub use cdf::CdfTable;
pub use container::{
    bpp_of, decode_latent_payload, encode_chunks, encode_latent_payload, parse_container,
    read_sequence, write_container, write_sequence, write_sequence_file, DecodedSequence, Decoder,
    ModelCdfs, RawFrameChunk, SequenceHeader, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use range::{ChannelCdf, RangeDecoder, RangeEncoder, CDF_TOTAL};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BitstreamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("bitstream requires model {}, decoder has {}", hex8(found), hex8(expected))]
    HashMismatch { expected: [u8; 8], found: [u8; 8] },
    #[error("{extra} trailing bytes after the last frame chunk")]
    TrailingBytes { extra: usize },
    #[error("symbol index {index} outside table support of {count} symbols")]
    SymbolOutOfSupport { index: usize, count: usize },
    #[error("predicted frame appears before any intra frame")]
    FirstFrameNotIntra,
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

fn hex8(bytes: &[u8; 8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
