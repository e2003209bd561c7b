//! Reference block codec: 8x8 DCT, uniform quantization, zigzag run/level
//! symbols, adaptive binary range coding.
//!
//! Container (little-endian): `SWB1`, u16 height, u16 width, u8 channels,
//! f32 stepsize, then the entropy payload. Channels are coded one after
//! another, blocks in raster order. Each channel has its own adaptive models.

pub mod external;
mod range;

use crate::dct;
use crate::error::{invalid, Error, Result};
use crate::image::PlanarImage;
use crate::tensor::Real;

pub use range::{BitTree, Decoder as RangeDecoder, Encoder as RangeEncoder, Prob};

pub const MAGIC: &[u8; 4] = b"SWB1";
pub const HEADER_BYTES: usize = 13;
/// Level shift applied to pixel data before the transform.
pub const LEVEL_SHIFT: f64 = 128.0;

const CAT_BITS: u32 = 6;
const RUN_BITS: u32 = 4;
const EOB: u32 = 0;
const ZRL: u32 = 15 << CAT_BITS;

/// A coded image: header plus entropy payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitStream {
    pub bytes: Vec<u8>,
}

impl BitStream {
    pub fn payload(&self) -> &[u8] {
        &self.bytes[HEADER_BYTES.min(self.bytes.len())..]
    }

    /// Entropy-coded bits, excluding the fixed header. This is the rate the
    /// proxies are calibrated against.
    pub fn payload_bits(&self) -> u64 {
        8 * self.payload().len() as u64
    }

    pub fn total_bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

fn check_delta(delta: f32) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidStepsize(delta as f64));
    }
    Ok(delta as f64)
}

/// Nearest integer with ties toward zero. Ties within 1e-9 count as exact
/// so transform round-off cannot flip them.
pub fn round_index<T: Real>(t: T) -> T {
    let k = (t.abs() - T::lit(0.5) - T::lit(1e-9)).ceil().max(T::zero());
    if t < T::zero() {
        -k
    } else {
        k
    }
}

/// Quantization indices `round(X / delta)` (see [`round_index`]) in the padded coefficient layout
/// of [`dct::forward`], after subtracting `shift` from every sample.
pub fn quantize_indices(img: &PlanarImage, delta: f32, shift: f64) -> Result<Vec<i64>> {
    let d = check_delta(delta)?;
    let shifted: Vec<f64> = img.data.iter().map(|&v| v - shift).collect();
    let coeffs = dct::forward(&shifted, 1, img.h, img.w, img.c);
    coeffs
        .iter()
        .map(|&x| {
            let q = round_index(x / d);
            if q.abs() >= (1u64 << 50) as f64 || !q.is_finite() {
                Err(invalid(format!("stepsize {delta} too small for coefficient {x}")))
            } else {
                Ok(q as i64)
            }
        })
        .collect()
}

/// Dequantize and inverse-transform indices produced by [`quantize_indices`].
pub fn reconstruct(indices: &[i64], h: usize, w: usize, c: usize, delta: f32, shift: f64) -> Result<PlanarImage> {
    let d = check_delta(delta)?;
    let coeffs: Vec<f64> = indices.iter().map(|&q| q as f64 * d).collect();
    let pixels = dct::inverse(&coeffs, 1, h, w, c);
    PlanarImage::new(h, w, c, pixels.into_iter().map(|v| v + shift).collect())
}

fn category(v: i64) -> u32 {
    64 - v.unsigned_abs().leading_zeros()
}

fn put_value(enc: &mut RangeEncoder, v: i64, cat: u32) {
    enc.encode_direct((v < 0) as u32, 1);
    let mag = v.unsigned_abs();
    let mut remaining = cat - 1;
    while remaining > 0 {
        let chunk = remaining.min(24);
        remaining -= chunk;
        enc.encode_direct(((mag >> remaining) & ((1 << chunk) - 1)) as u32, chunk);
    }
}

fn get_value(dec: &mut RangeDecoder<'_>, cat: u32) -> Result<i64> {
    let negative = dec.decode_direct(1)? == 1;
    let mut mag: u64 = 1;
    let mut remaining = cat - 1;
    while remaining > 0 {
        let chunk = remaining.min(24);
        remaining -= chunk;
        mag = (mag << chunk) | dec.decode_direct(chunk)? as u64;
    }
    Ok(if negative { -(mag as i64) } else { mag as i64 })
}

struct ChannelModels {
    /// Coded-block flag: 0 when every index of the block is zero.
    coded: Prob,
    dc: BitTree,
    ac: BitTree,
}

impl ChannelModels {
    fn new() -> Self {
        ChannelModels { coded: Prob::default(), dc: BitTree::new(CAT_BITS), ac: BitTree::new(RUN_BITS + CAT_BITS) }
    }
}

fn block_offsets(h: usize, w: usize, c: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (ph, pw) = (dct::padded(h), dct::padded(w));
    (0..c).flat_map(move |ch| {
        (0..ph).step_by(dct::BLOCK).flat_map(move |by| (0..pw).step_by(dct::BLOCK).map(move |bx| (ch, by, bx)))
    })
}

fn coeff_index(pw: usize, c: usize, ch: usize, by: usize, bx: usize, k: usize) -> usize {
    ((by + k / dct::BLOCK) * pw + bx + k % dct::BLOCK) * c + ch
}

/// Entropy-code quantization indices.
pub fn encode_indices(indices: &[i64], h: usize, w: usize, c: usize) -> Result<Vec<u8>> {
    let pw = dct::padded(w);
    if indices.len() != dct::padded(h) * pw * c {
        return Err(invalid("index buffer does not match the padded image size"));
    }
    let mut enc = RangeEncoder::new();
    let mut models: Vec<ChannelModels> = (0..c).map(|_| ChannelModels::new()).collect();
    let mut pred = vec![0i64; c];
    for (ch, by, bx) in block_offsets(h, w, c) {
        let m = &mut models[ch];
        let at = |k: usize| indices[coeff_index(pw, c, ch, by, bx, k)];
        let coded = (0..64).any(|k| at(k) != 0);
        enc.encode_bit(&mut m.coded, coded);
        if !coded {
            pred[ch] = 0;
            continue;
        }
        let diff = at(0) - pred[ch];
        pred[ch] = at(0);
        let cat = category(diff);
        if cat >= 1 << CAT_BITS {
            return Err(invalid("DC difference out of range"));
        }
        m.dc.encode(&mut enc, cat);
        if cat > 0 {
            put_value(&mut enc, diff, cat);
        }
        let last = (1..64).rev().find(|&i| at(dct::ZIGZAG[i]) != 0).unwrap_or(0);
        let mut run = 0u32;
        for i in 1..=last {
            let v = at(dct::ZIGZAG[i]);
            if v == 0 {
                run += 1;
                continue;
            }
            while run > 15 {
                m.ac.encode(&mut enc, ZRL);
                run -= 16;
            }
            let cat = category(v);
            if cat >= 1 << CAT_BITS {
                return Err(invalid("AC coefficient out of range"));
            }
            m.ac.encode(&mut enc, (run << CAT_BITS) | cat);
            put_value(&mut enc, v, cat);
            run = 0;
        }
        if last < 63 {
            m.ac.encode(&mut enc, EOB);
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_indices`]. `base` is the payload's offset in the
/// container, used in truncation errors.
pub fn decode_indices(payload: &[u8], h: usize, w: usize, c: usize, base: usize) -> Result<Vec<i64>> {
    let pw = dct::padded(w);
    let mut out = vec![0i64; dct::padded(h) * pw * c];
    let mut dec = RangeDecoder::new(payload, base)?;
    let mut models: Vec<ChannelModels> = (0..c).map(|_| ChannelModels::new()).collect();
    let mut pred = vec![0i64; c];
    for (ch, by, bx) in block_offsets(h, w, c) {
        let m = &mut models[ch];
        if !dec.decode_bit(&mut m.coded)? {
            pred[ch] = 0;
            continue;
        }
        let cat = m.dc.decode(&mut dec)?;
        let diff = if cat > 0 { get_value(&mut dec, cat)? } else { 0 };
        pred[ch] += diff;
        out[coeff_index(pw, c, ch, by, bx, 0)] = pred[ch];
        let mut i = 1;
        while i < 64 {
            let sym = m.ac.decode(&mut dec)?;
            let (run, cat) = (sym >> CAT_BITS, sym & ((1 << CAT_BITS) - 1));
            if cat == 0 {
                match sym {
                    EOB => break,
                    ZRL => {
                        i += 16;
                        continue;
                    }
                    _ => return Err(Error::Malformed(format!("invalid AC symbol {sym:#x}"))),
                }
            }
            i += run as usize;
            if i >= 64 {
                return Err(Error::Malformed("run past end of block".into()));
            }
            out[coeff_index(pw, c, ch, by, bx, dct::ZIGZAG[i])] = get_value(&mut dec, cat)?;
            i += 1;
        }
        if i > 64 {
            return Err(Error::Malformed("zero run past end of block".into()));
        }
    }
    Ok(out)
}

/// Encode with an explicit level shift (0 for signed residual data).
pub fn encode_shifted(img: &PlanarImage, delta: f32, shift: f64) -> Result<BitStream> {
    let h = u16::try_from(img.h).map_err(|_| invalid("height exceeds 65535"))?;
    let w = u16::try_from(img.w).map_err(|_| invalid("width exceeds 65535"))?;
    let c = u8::try_from(img.c).map_err(|_| invalid("more than 255 channels"))?;
    if img.h == 0 || img.w == 0 || img.c == 0 {
        return Err(invalid("cannot encode an empty image"));
    }
    let indices = quantize_indices(img, delta, shift)?;
    let mut bytes = Vec::with_capacity(HEADER_BYTES + img.data.len() / 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&h.to_le_bytes());
    bytes.extend_from_slice(&w.to_le_bytes());
    bytes.push(c);
    bytes.extend_from_slice(&delta.to_le_bytes());
    bytes.extend(encode_indices(&indices, img.h, img.w, img.c)?);
    Ok(BitStream { bytes })
}

pub fn encode(img: &PlanarImage, delta: f32) -> Result<BitStream> {
    encode_shifted(img, delta, LEVEL_SHIFT)
}

/// Payload bits of `encode(img, delta)`.
pub fn payload_bits(img: &PlanarImage, delta: f32) -> Result<u64> {
    Ok(encode(img, delta)?.payload_bits())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub image: PlanarImage,
    pub delta: f32,
    pub indices: Vec<i64>,
}

pub fn decode_shifted(bytes: &[u8], shift: f64) -> Result<Decoded> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::TruncatedStream { offset: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Malformed("bad magic".into()));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let c = bytes[8] as usize;
    let delta = f32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
    check_delta(delta).map_err(|_| Error::Malformed(format!("stepsize {delta} in header")))?;
    let indices = decode_indices(&bytes[HEADER_BYTES..], h, w, c, HEADER_BYTES)?;
    let image = reconstruct(&indices, h, w, c, delta, shift)?;
    Ok(Decoded { image, delta, indices })
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    decode_shifted(bytes, LEVEL_SHIFT)
}

/// What the codec would reconstruct, without entropy coding.
pub fn quantize_dequantize(img: &PlanarImage, delta: f32) -> Result<PlanarImage> {
    let indices = quantize_indices(img, delta, LEVEL_SHIFT)?;
    reconstruct(&indices, img.h, img.w, img.c, delta, LEVEL_SHIFT)
}
