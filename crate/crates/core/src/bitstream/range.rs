//! Carry-less range coder: 32-bit state, 8-bit renormalization, 16-bit
//! cumulative frequency precision.

use super::BitstreamError;

pub const CDF_TOTAL: u32 = 1 << 16;
const TOP: u32 = 1 << 24;

/// Carry-aware encoder: 64-bit low accumulates the carry, settled bytes are
/// emitted through a one-byte cache plus a run of pending 0xFF bytes. The
/// range never drops below 2^24, so the per-symbol truncation loss stays
/// under 0.006 bits.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        // the byte now held in `cache` (or counted in `pending`) leaves `low`
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encode one symbol given its cumulative start and frequency out of
    /// [`CDF_TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= CDF_TOTAL);
        let r = self.range / CDF_TOTAL;
        self.low += cum as u64 * r as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Flush the remaining state; the returned buffer is the payload.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        // the first byte is the encoder's initial cache and shifts out
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        // reads past the payload return zeros; a well-formed stream never
        // depends on them
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative-frequency slot of the next symbol, in `[0, CDF_TOTAL)`.
    pub fn decode_freq(&mut self) -> u32 {
        self.range /= CDF_TOTAL;
        (self.code / self.range).min(CDF_TOTAL - 1)
    }

    /// Consume the symbol whose cumulative interval was matched. Must follow
    /// a [`Self::decode_freq`] call for the same symbol.
    pub fn decode_update(&mut self, cum: u32, freq: u32) {
        self.code -= cum * self.range;
        self.range *= freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Cumulative table for one channel: `cum[i]..cum[i+1]` is symbol `i`'s slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    cum: Vec<u32>,
}

impl ChannelCdf {
    /// Build from integer frequencies; they must be positive and sum to
    /// [`CDF_TOTAL`].
    pub fn from_freqs(freqs: &[u32]) -> Self {
        debug_assert!(freqs.iter().all(|&f| f > 0));
        debug_assert_eq!(freqs.iter().sum::<u32>(), CDF_TOTAL);
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            acc += f;
            cum.push(acc);
        }
        ChannelCdf { cum }
    }

    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cum[index + 1] - self.cum[index]
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cum[index]
    }

    /// Symbol whose interval contains the slot value.
    pub fn find(&self, slot: u32) -> usize {
        // binary search for the last cum <= slot
        let mut lo = 0usize;
        let mut hi = self.cum.len() - 1;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= slot {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn encode_symbol(
        &self,
        enc: &mut RangeEncoder,
        index: usize,
    ) -> Result<(), BitstreamError> {
        if index >= self.symbol_count() {
            return Err(BitstreamError::SymbolOutOfSupport {
                index,
                count: self.symbol_count(),
            });
        }
        enc.encode(self.cum(index), self.freq(index));
        Ok(())
    }

    pub fn decode_symbol(&self, dec: &mut RangeDecoder) -> usize {
        let slot = dec.decode_freq();
        let index = self.find(slot);
        dec.decode_update(self.cum(index), self.freq(index));
        index
    }

    /// Ideal code length of symbol `index` in bits under this table.
    pub fn bits_of(&self, index: usize) -> f64 {
        -((self.freq(index) as f64 / CDF_TOTAL as f64).log2())
    }
}
