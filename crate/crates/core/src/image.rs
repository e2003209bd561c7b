//! Planar (interleaved H x W x C) real-valued images and PNG interchange.

use std::io::{BufRead, Seek, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Real-valued image with `c` interleaved channels. `bit_depth` declares the
/// nominal range `[0, 2^d - 1]`; values are not forced into it.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub bit_depth: u8,
    pub data: Vec<f64>,
}

impl PlanarImage {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(invalid(format!("{h}x{w}x{c} image needs {} samples, got {}", h * w * c, data.len())));
        }
        Ok(PlanarImage { h, w, c, bit_depth: 8, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        PlanarImage { h, w, c, bit_depth: 8, data: vec![v; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        PlanarImage { h, w, c, bit_depth: 8, data }
    }

    pub fn with_bit_depth(mut self, d: u8) -> Self {
        self.bit_depth = d;
        self
    }

    pub fn max_value(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        PlanarImage { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Round to integers and clamp to `[0, max]`.
    pub fn quantize_to_depth(&self) -> Self {
        let max = self.max_value();
        self.map(|v| v.round().clamp(0.0, max))
    }

    pub fn channel(&self, ch: usize) -> PlanarImage {
        PlanarImage::from_fn(self.h, self.w, 1, |y, x, _| self.at(y, x, ch)).with_bit_depth(self.bit_depth)
    }

    pub fn channels(&self, range: std::ops::Range<usize>) -> PlanarImage {
        let c = range.len();
        PlanarImage::from_fn(self.h, self.w, c, |y, x, k| self.at(y, x, range.start + k)).with_bit_depth(self.bit_depth)
    }

    /// Stack images of equal size along the channel axis.
    pub fn stack(parts: &[PlanarImage]) -> Result<PlanarImage> {
        let first = parts.first().ok_or_else(|| invalid("stack of zero images"))?;
        if parts.iter().any(|p| (p.h, p.w) != (first.h, first.w)) {
            return Err(invalid("stacked images differ in size"));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(first.h * first.w * c);
        for i in 0..first.h * first.w {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.c..(i + 1) * p.c]);
            }
        }
        Ok(PlanarImage { h: first.h, w: first.w, c, bit_depth: first.bit_depth, data })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<PlanarImage> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(invalid(format!("crop {h}x{w}+{y0}+{x0} exceeds {}x{}", self.h, self.w)));
        }
        Ok(PlanarImage::from_fn(h, w, self.c, |y, x, ch| self.at(y0 + y, x0 + x, ch)).with_bit_depth(self.bit_depth))
    }

    /// Single-image tensor (`n = 1`).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(Shape::image(self.h, self.w, self.c), self.data.iter().map(|&v| T::lit(v)).collect())
            .expect("matching size")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(invalid(format!("expected a single image, got batch of {}", s.n)));
        }
        PlanarImage::new(s.h, s.w, s.c, t.data().iter().map(|v| v.f64()).collect())
    }

    pub fn sse(&self, other: &PlanarImage) -> Result<f64> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            return Err(invalid("images differ in shape"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn mse(&self, other: &PlanarImage) -> Result<f64> {
        Ok(self.sse(other)? / self.data.len() as f64)
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

/// Decode an 8- or 16-bit PNG; alpha is dropped, palettes expanded.
pub fn read_png_from(r: impl BufRead + Seek) -> Result<PlanarImage> {
    let mut decoder = png::Decoder::new(r);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (color, depth) = (info.color_type, info.bit_depth);
    let (channels, keep) = match color {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Png("palette was not expanded".into())),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let bits: u8 = match depth {
        png::BitDepth::Sixteen => 16,
        png::BitDepth::Eight => 8,
        other => return Err(Error::Png(format!("unsupported bit depth {other:?}"))),
    };
    let line = info.line_size;
    let mut data = Vec::with_capacity(h * w * keep);
    for y in 0..h {
        let row = &buf[y * line..(y + 1) * line];
        for x in 0..w {
            for ch in 0..keep {
                let i = x * channels + ch;
                let v = if bits == 16 { u16::from_be_bytes([row[2 * i], row[2 * i + 1]]) as f64 } else { row[i] as f64 };
                data.push(v);
            }
        }
    }
    Ok(PlanarImage { h, w, c: keep, bit_depth: bits, data })
}

pub fn read_png(path: &Path) -> Result<PlanarImage> {
    let file = std::fs::File::open(path)?;
    read_png_from(std::io::BufReader::new(file))
}

/// Encode 1- or 3-channel images; values are rounded and clamped to the
/// declared bit depth (8 or 16).
pub fn write_png_to(img: &PlanarImage, w: impl Write) -> Result<()> {
    let color = match img.c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Png(format!("cannot write {c}-channel PNG"))),
    };
    let depth = match img.bit_depth {
        8 => png::BitDepth::Eight,
        16 => png::BitDepth::Sixteen,
        d => return Err(Error::Png(format!("cannot write {d}-bit PNG"))),
    };
    let mut enc = png::Encoder::new(w, img.w as u32, img.h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_err)?;
    let max = img.max_value();
    let bytes: Vec<u8> = if img.bit_depth == 16 {
        img.data.iter().flat_map(|&v| (v.round().clamp(0.0, max) as u16).to_be_bytes()).collect()
    } else {
        img.data.iter().map(|&v| v.round().clamp(0.0, max) as u8).collect()
    };
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

pub fn write_png(img: &PlanarImage, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_png_to(img, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn png_round_trip_8_and_16_bit() {
        for (depth, max) in [(8u8, 255u32), (16, 65535)] {
            let img = PlanarImage::from_fn(5, 7, 3, |y, x, c| ((y * 131 + x * 17 + c * 7919) as u32 % (max + 1)) as f64)
                .with_bit_depth(depth);
            let mut buf = Vec::new();
            write_png_to(&img, &mut buf).unwrap();
            let back = read_png_from(Cursor::new(buf)).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn stack_and_split() {
        let img = PlanarImage::from_fn(2, 3, 3, |y, x, c| (y * 10 + x + 100 * c) as f64);
        let parts = [img.channel(0), img.channels(1..3)];
        assert_eq!(PlanarImage::stack(&parts).unwrap(), img);
    }
}
