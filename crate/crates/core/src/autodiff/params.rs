//! Named parameter collections and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian throughout):
//!
//! ```text
//! "EPAC"  magic, 4 bytes
//! u16     format version (currently 1)
//! repeated parameter records, sorted by name:
//!     u16      name length
//!     bytes    UTF-8 name
//!     u8       side tag (0 encoder, 1 decoder, 2 shared-entropy)
//!     u8       rank
//!     u32 * r  dims
//!     f64 * n  values
//! u32     CRC-32 (IEEE) of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::tensor::Tensor;
use super::AutodiffError;

/// Which half of the codec a parameter ships with. Entropy model parameters
/// are trained with the encoder but deployed with the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
    SharedEntropy,
}

impl Side {
    fn tag(self) -> u8 {
        match self {
            Side::Encoder => 0,
            Side::Decoder => 1,
            Side::SharedEntropy => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Side> {
        match tag {
            0 => Some(Side::Encoder),
            1 => Some(Side::Decoder),
            2 => Some(Side::SharedEntropy),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub side: Side,
}

/// Named, side-tagged trainable tensors. Iteration is always in name order,
/// which keeps serialization and hashing deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed record at byte {0}: {1}")]
    Malformed(usize, String),
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPAC";
pub const CHECKPOINT_VERSION: u16 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        tensor: Tensor,
        side: Side,
    ) -> Result<(), AutodiffError> {
        if self.entries.contains_key(name) {
            return Err(AutodiffError::DuplicateParam { name: name.into() });
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, side });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| AutodiffError::UnknownParam { name: name.into() })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, AutodiffError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| AutodiffError::UnknownParam { name: name.into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Subset containing only the given sides (cloned).
    pub fn filter_sides(&self, sides: &[Side]) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .filter(|(_, e)| sides.contains(&e.side))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { entries }
    }

    /// SHA-256 over the canonical serialization of the given sides. Used for
    /// the bitstream model hash and decoder-immutability assertions.
    pub fn hash_sides(&self, sides: &[Side]) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if !sides.contains(&e.side) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update([e.side.tag()]);
            h.update((e.tensor.shape().len() as u64).to_le_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Hash of everything the decoder needs: decoder-side plus entropy
    /// parameters.
    pub fn decoder_hash(&self) -> [u8; 32] {
        self.hash_sides(&[Side::Decoder, Side::SharedEntropy])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, e) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(e.side.tag());
            buf.push(e.tensor.shape().len() as u8);
            for &d in e.tensor.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet, CheckpointError> {
        if bytes.len() < 10 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let payload_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        let computed = crc32(&bytes[..payload_end]);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let mut pos = 6;
        let mut entries = BTreeMap::new();
        while pos < payload_end {
            let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
                if *pos + n > payload_end {
                    return Err(CheckpointError::Truncated(*pos));
                }
                let s = &bytes[*pos..*pos + n];
                *pos += n;
                Ok(s)
            };
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| CheckpointError::Malformed(pos, e.to_string()))?;
            let side_tag = take(&mut pos, 1)?[0];
            let side = Side::from_tag(side_tag)
                .ok_or_else(|| CheckpointError::Malformed(pos, format!("side tag {side_tag}")))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|e| CheckpointError::Malformed(pos, e.to_string()))?;
            entries.insert(name, ParamEntry { tensor, side });
        }
        Ok(ParamSet { entries })
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
        let bytes = std::fs::read(path)?;
        ParamSet::from_bytes(&bytes)
    }
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
