//! Adaptive binary range coder (LZMA-style: 11-bit probabilities, carry
//! propagation through a cached byte).

use crate::error::{Error, Result};

const PROB_BITS: u32 = 11;
const PROB_ONE: u16 = 1 << PROB_BITS;
const MOVE_BITS: u32 = 5;
const TOP: u32 = 1 << 24;

/// Probability that the next bit is 0, in units of 2^-11.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prob(u16);

impl Default for Prob {
    fn default() -> Self {
        Prob(PROB_ONE / 2)
    }
}

impl Prob {
    fn update(&mut self, bit: bool) {
        if bit {
            self.0 -= self.0 >> MOVE_BITS;
        } else {
            self.0 += (PROB_ONE - self.0) >> MOVE_BITS;
        }
    }
}

/// Context tree over `nbits`-bit symbols (`2^nbits` adaptive nodes).
#[derive(Clone, Debug)]
pub struct BitTree {
    nbits: u32,
    probs: Vec<Prob>,
}

impl BitTree {
    pub fn new(nbits: u32) -> Self {
        BitTree { nbits, probs: vec![Prob::default(); 1 << nbits] }
    }

    pub fn encode(&mut self, enc: &mut Encoder, symbol: u32) {
        debug_assert!(symbol < 1 << self.nbits);
        let mut m = 1usize;
        for i in (0..self.nbits).rev() {
            let bit = (symbol >> i) & 1 == 1;
            enc.encode_bit(&mut self.probs[m], bit);
            m = 2 * m + bit as usize;
        }
    }

    pub fn decode(&mut self, dec: &mut Decoder<'_>) -> Result<u32> {
        let mut m = 1usize;
        for _ in 0..self.nbits {
            let bit = dec.decode_bit(&mut self.probs[m])?;
            m = 2 * m + bit as usize;
        }
        Ok((m - (1 << self.nbits)) as u32)
    }
}

pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, started: false, out: Vec::new() }
    }

    fn emit(&mut self, byte: u8) {
        // The first byte of an LZMA-style stream is always zero; it is implied.
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0);
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode_bit(&mut self, p: &mut Prob, bit: bool) {
        let bound = (self.range >> PROB_BITS) * p.0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        p.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_direct(&mut self, value: u32, nbits: u32) {
        for i in (0..nbits).rev() {
            self.range >>= 1;
            if (value >> i) & 1 == 1 {
                self.low += self.range as u64;
            }
            while self.range < TOP {
                self.range <<= 8;
                self.shift_low();
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct Decoder<'a> {
    data: &'a [u8],
    /// Offset of `data[0]` within the enclosing container, for error reports.
    base: usize,
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8], base: usize) -> Result<Self> {
        let mut dec = Decoder { data, base, pos: 0, range: u32::MAX, code: 0 };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | dec.next_byte()? as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::TruncatedStream { offset: self.base + self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode_bit(&mut self, p: &mut Prob) -> Result<bool> {
        let bound = (self.range >> PROB_BITS) * p.0 as u32;
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        p.update(bit);
        self.normalize()?;
        Ok(bit)
    }

    pub fn decode_direct(&mut self, nbits: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..nbits {
            self.range >>= 1;
            let bit = if self.code >= self.range {
                self.code -= self.range;
                1
            } else {
                0
            };
            v = (v << 1) | bit;
            self.normalize()?;
        }
        Ok(v)
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mixed_streams_round_trip(ops in prop::collection::vec((0u8..3, any::<u32>()), 0..400)) {
            let mut enc = Encoder::new();
            let mut probs = [Prob::default(); 4];
            let mut tree = BitTree::new(6);
            for &(kind, v) in &ops {
                match kind {
                    0 => enc.encode_bit(&mut probs[(v % 4) as usize], v & 16 != 0),
                    1 => enc.encode_direct(v & 0x3FF, 10),
                    _ => tree.encode(&mut enc, v % 64),
                }
            }
            let bytes = enc.finish();
            let mut dec = Decoder::new(&bytes, 0).unwrap();
            let mut probs = [Prob::default(); 4];
            let mut tree = BitTree::new(6);
            for &(kind, v) in &ops {
                match kind {
                    0 => prop_assert_eq!(dec.decode_bit(&mut probs[(v % 4) as usize]).unwrap(), v & 16 != 0),
                    1 => prop_assert_eq!(dec.decode_direct(10).unwrap(), v & 0x3FF),
                    _ => prop_assert_eq!(tree.decode(&mut dec).unwrap(), v % 64),
                }
            }
        }
    }

    #[test]
    fn skewed_source_compresses() {
        let mut enc = Encoder::new();
        let mut p = Prob::default();
        for i in 0..10_000 {
            enc.encode_bit(&mut p, i % 50 == 0);
        }
        let bytes = enc.finish();
        // Entropy of a 2% source is about 0.14 bits per symbol.
        assert!(bytes.len() * 8 < 2000, "{} bytes", bytes.len());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut enc = Encoder::new();
        enc.encode_direct(0xABCDE, 20);
        let bytes = enc.finish();
        let err = Decoder::new(&bytes[..2], 13).err().unwrap();
        assert!(matches!(err, Error::TruncatedStream { offset: 15 }));
    }
}
