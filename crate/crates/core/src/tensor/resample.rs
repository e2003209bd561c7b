//! Fixed linear resampling operators.
//!
//! [`Taps`] describes one axis of a separable filter (each output sample is a
//! weighted sum of input samples). [`PixelMap`] is the non-separable variant
//! used for warping. Both are constant data on the tape; only the image input
//! receives a gradient.

use std::sync::Arc;

use super::{Backward, NodeId, Real, Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// Per-output-sample `(input index, weight)` lists along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

pub type TapsRef = Arc<Taps>;

impl Taps {
    pub fn new(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if let Some(bad) = rows.iter().flatten().find(|(i, _)| *i >= in_len) {
            return Err(crate::error::invalid(format!("tap index {} out of range {in_len}", bad.0)));
        }
        Ok(Taps { in_len, rows })
    }

    pub fn identity(len: usize) -> Self {
        Taps { in_len: len, rows: (0..len).map(|i| vec![(i, 1.0)]).collect() }
    }

    /// 2:1 box average. `len` must be even.
    pub fn mean2(len: usize) -> Self {
        Taps { in_len: len, rows: (0..len / 2).map(|i| vec![(2 * i, 0.5), (2 * i + 1, 0.5)]).collect() }
    }

    /// 1:2 linear interpolation with half-pixel centres and clamped edges.
    pub fn linear2(len: usize) -> Self {
        let last = len.saturating_sub(1);
        let rows = (0..2 * len)
            .map(|o| {
                let i = o / 2;
                let (near, far, w_far) = if o % 2 == 0 {
                    (i, i.saturating_sub(1), 0.25)
                } else {
                    (i, (i + 1).min(last), 0.25)
                };
                vec![(near, 1.0 - w_far), (far, w_far)]
            })
            .collect();
        Taps { in_len: len, rows }
    }

    /// Resampling with an arbitrary symmetric kernel of the given support
    /// (in output-pixel units for upsampling, input units otherwise), with
    /// weights normalised per output sample and edge indices clamped.
    pub fn from_kernel(in_len: usize, out_len: usize, support: f64, kernel: impl Fn(f64) -> f64) -> Self {
        let scale = out_len as f64 / in_len as f64;
        // Downsampling widens the kernel to suppress aliasing.
        let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
        let radius = support * stretch;
        let last = in_len as isize - 1;
        let rows = (0..out_len)
            .map(|o| {
                let centre = (o as f64 + 0.5) / scale - 0.5;
                let lo = (centre - radius).floor() as isize;
                let hi = (centre + radius).ceil() as isize;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                for j in lo..=hi {
                    let w = kernel((j as f64 - centre) / stretch);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, last) as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.iter_mut().for_each(|t| t.1 /= total);
                taps
            })
            .collect();
        Taps { in_len, rows }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn transpose(&self) -> Taps {
        let mut rows = vec![Vec::new(); self.in_len];
        for (o, taps) in self.rows.iter().enumerate() {
            for &(i, w) in taps {
                rows[i].push((o, w));
            }
        }
        Taps { in_len: self.rows.len(), rows }
    }

    fn typed<T: Real>(&self) -> Vec<Vec<(usize, T)>> {
        self.rows.iter().map(|r| r.iter().map(|&(i, w)| (i, T::lit(w))).collect()).collect()
    }
}

/// Apply `rows` along H then `cols` along W of an NHWC buffer.
fn separable<T: Real>(data: &[T], shape: Shape, rows: &Taps, cols: &Taps) -> (Vec<T>, Shape) {
    let (rt, ct) = (rows.typed::<T>(), cols.typed::<T>());
    let (oh, ow, c) = (rows.out_len(), cols.out_len(), shape.c);
    let mut mid = vec![T::zero(); shape.n * oh * shape.w * c];
    let in_row = shape.w * c;
    for n in 0..shape.n {
        let src = &data[n * shape.h * in_row..(n + 1) * shape.h * in_row];
        let dst = &mut mid[n * oh * in_row..(n + 1) * oh * in_row];
        for (y, taps) in rt.iter().enumerate() {
            let out = &mut dst[y * in_row..(y + 1) * in_row];
            for &(i, w) in taps {
                for (o, &s) in out.iter_mut().zip(&src[i * in_row..(i + 1) * in_row]) {
                    *o += w * s;
                }
            }
        }
    }
    let mut out = vec![T::zero(); shape.n * oh * ow * c];
    for r in 0..shape.n * oh {
        let src = &mid[r * in_row..(r + 1) * in_row];
        let dst = &mut out[r * ow * c..(r + 1) * ow * c];
        for (x, taps) in ct.iter().enumerate() {
            let px = &mut dst[x * c..(x + 1) * c];
            for &(i, w) in taps {
                for (o, &s) in px.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += w * s;
                }
            }
        }
    }
    (out, Shape::new(shape.n, oh, ow, c))
}

struct SeparableOp {
    rows_t: Taps,
    cols_t: Taps,
}

impl<T: Real> Backward<T> for SeparableOp {
    fn name(&self) -> &'static str {
        "resample"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(separable(g, out.shape(), &self.rows_t, &self.cols_t).0)]
    }
}

/// Per-output-pixel `(input pixel, weight)` lists applied to every channel.
#[derive(Clone, Debug)]
pub struct PixelMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl PixelMap {
    pub(crate) fn apply<T: Real>(&self, data: &[T], n: usize, c: usize) -> Vec<T> {
        let in_len = self.in_h * self.in_w * c;
        let out_len = self.out_h * self.out_w * c;
        let mut out = vec![T::zero(); n * out_len];
        for b in 0..n {
            let src = &data[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            for (p, taps) in self.taps.iter().enumerate() {
                let px = &mut dst[p * c..(p + 1) * c];
                for &(i, w) in taps {
                    let w = T::lit(w);
                    for (o, &s) in px.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                        *o += w * s;
                    }
                }
            }
        }
        out
    }

    pub(crate) fn transpose(&self) -> PixelMap {
        let mut taps = vec![Vec::new(); self.in_h * self.in_w];
        for (o, t) in self.taps.iter().enumerate() {
            for &(i, w) in t {
                taps[i].push((o, w));
            }
        }
        PixelMap { in_h: self.out_h, in_w: self.out_w, out_h: self.in_h, out_w: self.in_w, taps }
    }
}

struct PixelMapOp {
    map_t: PixelMap,
}

impl<T: Real> Backward<T> for PixelMapOp {
    fn name(&self) -> &'static str {
        "pixel_map"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let s = out.shape();
        vec![Some(self.map_t.apply(g, s.n, s.c))]
    }
}

impl<T: Real> Tape<T> {
    /// Separable linear resampling: `rows` acts on H, `cols` on W.
    pub fn resample(&mut self, x: NodeId, rows: &Taps, cols: &Taps) -> Result<NodeId> {
        let s = self.shape(x);
        if rows.in_len() != s.h {
            return Err(Error::ShapeMismatch { op: "resample", dim: "height", expected: rows.in_len(), found: s.h });
        }
        if cols.in_len() != s.w {
            return Err(Error::ShapeMismatch { op: "resample", dim: "width", expected: cols.in_len(), found: s.w });
        }
        let (out, shape) = separable(self.value(x).data(), s, rows, cols);
        let op = SeparableOp { rows_t: rows.transpose(), cols_t: cols.transpose() };
        Ok(self.push_op(Tensor::from_vec(shape, out)?, vec![x], op))
    }

    pub fn pixel_map(&mut self, x: NodeId, map: &PixelMap) -> Result<NodeId> {
        let s = self.shape(x);
        if (s.h, s.w) != (map.in_h, map.in_w) {
            let dim = if s.h != map.in_h { "height" } else { "width" };
            let (expected, found) = if s.h != map.in_h { (map.in_h, s.h) } else { (map.in_w, s.w) };
            return Err(Error::ShapeMismatch { op: "pixel_map", dim, expected, found });
        }
        let out = map.apply(self.value(x).data(), s.n, s.c);
        let shape = Shape::new(s.n, map.out_h, map.out_w, s.c);
        Ok(self.push_op(Tensor::from_vec(shape, out)?, vec![x], PixelMapOp { map_t: map.transpose() }))
    }

    /// 2x2 mean pooling.
    pub fn avg_downsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::OddDimension { op: "avg_downsample2", h: s.h, w: s.w });
        }
        self.resample(x, &Taps::mean2(s.h), &Taps::mean2(s.w))
    }

    /// Bilinear 2x upsampling with half-pixel alignment.
    pub fn bilinear_upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        self.resample(x, &Taps::linear2(s.h), &Taps::linear2(s.w))
    }
}
