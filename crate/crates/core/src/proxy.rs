//! Differentiable stand-in for the block codec: range clamp, 8x8 DCT,
//! quantizer proxies and a log-magnitude rate proxy calibrated per image
//! against the reference codec.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::dct;
use crate::error::{invalid, Error, Result};
use crate::image::PlanarImage;
use crate::tensor::{Backward, NodeId, Real, Shape, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    /// Hard rounding forward, identity in X, noise term `u` in the stepsize.
    #[default]
    StraightThrough,
    /// `X + delta * U`, `U ~ unif(-1/2, 1/2)`.
    AdditiveNoise,
    /// Cubic smoothstep between neighbouring reproduction levels. Experimental.
    Soft,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// `a` recomputed for every image so the proxy equals the codec's bits.
    #[default]
    Calibrated,
    Fixed { a: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    #[serde(default)]
    pub quantizer: QuantizerKind,
    #[serde(default)]
    pub rate: RateMode,
}

/// Result of coding one image (or frame) through a proxy or a real codec.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodecTrace {
    #[serde(skip)]
    pub reconstruction: PlanarImage,
    pub proxy_rate_bits: f64,
    pub actual_bits: Option<u64>,
    pub stepsize: f64,
}

fn check_delta<T: Real>(tape: &Tape<T>, delta: NodeId) -> Result<T> {
    let s = tape.shape(delta);
    if s.numel() != 1 {
        return Err(Error::ShapeMismatch { op: "stepsize", dim: "scalar elements", expected: 1, found: s.numel() });
    }
    let d = tape.value(delta).item();
    if !(d.is_finite() && d > T::zero()) {
        return Err(Error::InvalidStepsize(d.f64()));
    }
    Ok(d)
}

struct DctOp {
    h: usize,
    w: usize,
}

impl<T: Real> Backward<T> for DctOp {
    fn name(&self) -> &'static str {
        "block_dct8"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let s = out.shape();
        let mut buf = g.to_vec();
        dct::transform_blocks(&mut buf, s.n, s.h, s.w, s.c, true);
        vec![Some(dct::fold_edge(&buf, s.n, self.h, self.w, s.c))]
    }
}

struct IdctOp;

impl<T: Real> Backward<T> for IdctOp {
    fn name(&self) -> &'static str {
        "block_idct8"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let s = out.shape();
        let mut buf = dct::zero_pad(g, s.n, s.h, s.w, s.c);
        dct::transform_blocks(&mut buf, s.n, dct::padded(s.h), dct::padded(s.w), s.c, false);
        vec![Some(buf)]
    }
}

struct QuantizeOp<T> {
    kind: QuantizerKind,
    /// Per-coefficient noise term (straight-through and additive noise).
    noise: Vec<T>,
    /// Replayed floor cells of the soft quantizer.
    cells: Option<Vec<i32>>,
}

fn smoothstep<T: Real>(s: T) -> (T, T) {
    let three = T::lit(3.0);
    let two = T::lit(2.0);
    let six = T::lit(6.0);
    (s * s * (three - two * s), six * s * (T::one() - s))
}

impl<T: Real> Backward<T> for QuantizeOp<T> {
    fn name(&self) -> &'static str {
        "quantize"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let d = inputs[1].item();
        match self.kind {
            QuantizerKind::StraightThrough | QuantizerKind::AdditiveNoise => {
                let gd: T = g.iter().zip(&self.noise).map(|(&g, &u)| g * u).sum();
                vec![Some(g.to_vec()), Some(vec![gd])]
            }
            QuantizerKind::Soft => {
                let mut gx = Vec::with_capacity(x.len());
                let mut gd = T::zero();
                for (i, (&g, &x)) in g.iter().zip(x).enumerate() {
                    let t = x / d;
                    let k = self.cells.as_ref().map_or_else(|| t.floor(), |c| T::lit(c[i] as f64));
                    let (h, dh) = smoothstep(t - k);
                    gx.push(g * dh);
                    gd += g * (k + h - dh * t);
                }
                vec![Some(gx), Some(vec![gd])]
            }
        }
    }
}

struct RateOp<T> {
    /// Per-image gain.
    a: Vec<T>,
    /// Replayed signs of the coefficients.
    signs: Option<Vec<i32>>,
}

impl<T: Real> Backward<T> for RateOp<T> {
    fn name(&self) -> &'static str {
        "rate_proxy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let d = inputs[1].item();
        let per = x.len() / self.a.len();
        let mut gx = Vec::with_capacity(x.len());
        let mut gd = T::zero();
        for (n, (chunk, &a)) in x.chunks(per).zip(&self.a).enumerate() {
            let k = g[0] * a;
            let mut acc = T::zero();
            for (i, &v) in chunk.iter().enumerate() {
                let s = match &self.signs {
                    Some(s) => T::lit(s[n * per + i] as f64),
                    None => sign(v),
                };
                let m = s * v;
                let denom = d + m;
                gx.push(k * s / denom);
                acc += m / (d * denom);
            }
            gd -= k * acc;
        }
        vec![Some(gx), Some(vec![gd])]
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn log_sum<T: Real>(xs: &[T], d: T) -> T {
    xs.iter().map(|&v| (v.abs() / d).ln_1p()).sum()
}

/// Per-image log sums, on replayed signs when given.
fn log_sums<T: Real>(xs: &[T], d: T, per: usize, signs: Option<&[i32]>) -> Vec<T> {
    match signs {
        None => xs.chunks(per).map(|c| log_sum(c, d)).collect(),
        Some(s) => xs
            .chunks(per)
            .zip(s.chunks(per))
            .map(|(c, s)| c.iter().zip(s).map(|(&v, &s)| (T::lit(s as f64) * v / d).ln_1p()).sum())
            .collect(),
    }
}

impl<T: Real> Tape<T> {
    /// Blockwise orthonormal DCT. H and W are edge-padded to multiples of 8;
    /// the output has the padded size.
    pub fn block_dct8(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        let data = dct::forward(self.value(x).data(), s.n, s.h, s.w, s.c);
        let shape = Shape::new(s.n, dct::padded(s.h), dct::padded(s.w), s.c);
        let value = Tensor::from_vec(shape, data).expect("padded size");
        self.push_op(value, vec![x], DctOp { h: s.h, w: s.w })
    }

    /// Inverse of [`Tape::block_dct8`], cropped back to `h x w`.
    pub fn block_idct8(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.h != dct::padded(h) || s.w != dct::padded(w) {
            return Err(Error::ShapeMismatch { op: "block_idct8", dim: "height", expected: dct::padded(h), found: s.h });
        }
        let data = dct::inverse(self.value(x).data(), s.n, h, w, s.c);
        Ok(self.push_op(Tensor::from_vec(Shape::new(s.n, h, w, s.c), data)?, vec![x], IdctOp))
    }

    pub fn quantize(&mut self, x: NodeId, delta: NodeId, kind: QuantizerKind, rng: &mut impl Rng) -> Result<NodeId> {
        let d = check_delta(self, delta)?;
        let shape = self.shape(x);
        let xs = self.value(x).data();
        let (value, noise) = match kind {
            QuantizerKind::StraightThrough => {
                let fresh: Vec<T> = xs.iter().map(|&v| codec::round_index(v / d) - v / d).collect();
                let replay = self.is_replaying();
                let hard: Vec<T> = if replay { Vec::new() } else { xs.iter().map(|&v| d * codec::round_index(v / d)).collect() };
                let u = self.stop_gradient(fresh);
                let xs = self.value(x).data();
                let value = if replay { xs.iter().zip(&u).map(|(&v, &u)| v + d * u).collect() } else { hard };
                (value, u)
            }
            QuantizerKind::AdditiveNoise => {
                let fresh: Vec<T> = xs.iter().map(|_| T::lit(rng.random_range(-0.5..0.5))).collect();
                let u = self.stop_gradient(fresh);
                let value = self.value(x).data().iter().zip(&u).map(|(&v, &u)| v + d * u).collect();
                (value, u)
            }
            QuantizerKind::Soft => {
                let cells = if (self.requires_grad(x) || self.requires_grad(delta)) && self.tracks_kinks() {
                    let fresh: Vec<i32> = xs.iter().map(|&v| (v / d).floor().f64() as i32).collect();
                    self.note_kinks(|| fresh)
                } else {
                    None
                };
                let xs = self.value(x).data();
                let value = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let t = v / d;
                        let k = cells.as_ref().map_or_else(|| t.floor(), |c| T::lit(c[i] as f64));
                        d * (k + smoothstep(t - k).0)
                    })
                    .collect();
                let op = QuantizeOp { kind, noise: Vec::new(), cells };
                return Ok(self.push_op(Tensor::from_vec(shape, value)?, vec![x, delta], op));
            }
        };
        Ok(self.push_op(Tensor::from_vec(shape, value)?, vec![x, delta], QuantizeOp { kind, noise, cells: None }))
    }

    /// `sum_n a_n * sum_i log(1 + |x_i| / delta)` with one gain per image.
    pub fn rate_proxy(&mut self, x: NodeId, delta: NodeId, a: &[T]) -> Result<NodeId> {
        let d = check_delta(self, delta)?;
        let per = self.per_image(x, a.len())?;
        let signs = self.note_abs_kinks(x);
        let sums = log_sums(self.value(x).data(), d, per, signs.as_deref());
        let value: T = sums.iter().zip(a).map(|(&s, &a)| a * s).sum();
        Ok(self.push_op(Tensor::scalar(value), vec![x, delta], RateOp { a: a.to_vec(), signs }))
    }

    /// Rate proxy whose value equals `bits` exactly, with gain
    /// `a_n = bits_n / sum log(1 + |x| / delta)` frozen for the gradient.
    /// Images whose log-sum is zero get `a = 0` and contribute no rate.
    pub fn rate_proxy_calibrated(&mut self, x: NodeId, delta: NodeId, bits: &[u64]) -> Result<NodeId> {
        let d = check_delta(self, delta)?;
        let n = bits.len();
        let per = self.per_image(x, n)?;
        let signs = self.note_abs_kinks(x);
        let sums = log_sums(self.value(x).data(), d, per, signs.as_deref());
        let mut fresh = Vec::with_capacity(3 * n);
        for (&s, &b) in sums.iter().zip(bits) {
            let positive = s > T::zero();
            fresh.push(if positive { T::lit(b as f64) / s } else { T::zero() });
            fresh.push(if positive { T::lit(b as f64) } else { T::zero() });
            fresh.push(s);
        }
        let consts = self.stop_gradient(fresh);
        let a: Vec<T> = consts.chunks(3).map(|c| c[0]).collect();
        let value: T = if self.is_replaying() {
            consts.chunks(3).zip(&sums).map(|(c, &s)| c[1] + c[0] * (s - c[2])).sum()
        } else {
            consts.chunks(3).map(|c| c[1]).sum()
        };
        Ok(self.push_op(Tensor::scalar(value), vec![x, delta], RateOp { a, signs }))
    }

    fn per_image(&self, x: NodeId, n: usize) -> Result<usize> {
        let s = self.shape(x);
        if s.n != n {
            return Err(Error::ShapeMismatch { op: "rate_proxy", dim: "batch", expected: s.n, found: n });
        }
        Ok(s.numel() / n.max(1))
    }

    fn note_abs_kinks(&mut self, x: NodeId) -> Option<Vec<i32>> {
        if self.requires_grad(x) && self.tracks_kinks() {
            let signs: Vec<i32> = self.value(x).data().iter().map(|&v| sign(v).f64() as i32).collect();
            self.note_kinks(|| signs)
        } else {
            None
        }
    }
}

/// Per-image range clamp and level shift in front of the transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Framing {
    pub clamp: Option<(f64, f64)>,
    pub shift: f64,
}

impl Framing {
    /// 8-bit pixel data: clamp to [0, 255], shift by 128.
    pub const PIXELS: Framing = Framing { clamp: Some((0.0, 255.0)), shift: codec::LEVEL_SHIFT };
    /// Signed prediction residuals: no clamp, no shift.
    pub const RESIDUAL: Framing = Framing { clamp: None, shift: 0.0 };
}

pub struct ProxyOutput {
    pub reconstruction: NodeId,
    /// Scalar proxy rate in bits, summed over the batch.
    pub rate: NodeId,
    /// Reference-codec payload bits per image (calibrated mode only).
    pub actual_bits: Option<Vec<u64>>,
}

/// Reference-codec payload bits of every image in an NHWC tensor.
pub fn batch_bits<T: Real>(t: &Tensor<T>, delta: f32, shift: f64) -> Result<Vec<u64>> {
    let s = t.shape();
    let per = s.h * s.w * s.c;
    t.data()
        .chunks(per)
        .map(|c| {
            let img = PlanarImage::new(s.h, s.w, s.c, c.iter().map(|v| v.f64()).collect())?;
            Ok(codec::encode_shifted(&img, delta, shift)?.payload_bits())
        })
        .collect()
}

/// Full proxy: clamp, shift, DCT, quantize, inverse DCT, unshift; plus the
/// rate of the pre-quantization coefficients.
pub fn proxy_forward<T: Real>(
    tape: &mut Tape<T>,
    x: NodeId,
    delta: NodeId,
    cfg: &ProxyConfig,
    framing: Framing,
    rng: &mut impl Rng,
) -> Result<ProxyOutput> {
    let d = check_delta(tape, delta)?;
    let s = tape.shape(x);
    let clamped = match framing.clamp {
        Some((lo, hi)) => tape.clamp_st(x, T::lit(lo), T::lit(hi))?,
        None => x,
    };
    let shifted = if framing.shift != 0.0 { tape.add_const(clamped, T::lit(-framing.shift)) } else { clamped };
    let coeffs = tape.block_dct8(shifted);
    let q = tape.quantize(coeffs, delta, cfg.quantizer, rng)?;
    let (rate, actual_bits) = match cfg.rate {
        RateMode::Fixed { a } => (tape.rate_proxy(coeffs, delta, &vec![T::lit(a); s.n])?, None),
        RateMode::Calibrated => {
            let bits = if tape.is_replaying() {
                vec![0; s.n]
            } else {
                batch_bits(tape.value(clamped), d.f64() as f32, framing.shift)?
            };
            (tape.rate_proxy_calibrated(coeffs, delta, &bits)?, Some(bits))
        }
    };
    let y = tape.block_idct8(q, s.h, s.w)?;
    let reconstruction = if framing.shift != 0.0 { tape.add_const(y, T::lit(framing.shift)) } else { y };
    Ok(ProxyOutput { reconstruction, rate, actual_bits })
}

/// Image proxy on 8-bit-range bottlenecks.
pub fn image_proxy_forward<T: Real>(
    tape: &mut Tape<T>,
    b: NodeId,
    delta: NodeId,
    cfg: &ProxyConfig,
    rng: &mut impl Rng,
) -> Result<ProxyOutput> {
    proxy_forward(tape, b, delta, cfg, Framing::PIXELS, rng)
}

/// Gain that makes the proxy reproduce the codec's bits on `img`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub a: f64,
    pub actual_bits: u64,
    pub log_sum: f64,
}

pub fn calibrate(img: &PlanarImage, delta: f32) -> Result<Calibration> {
    let bits = codec::encode(img, delta)?.payload_bits();
    let clamped: Vec<f64> = img.data.iter().map(|&v| v.clamp(0.0, 255.0) - codec::LEVEL_SHIFT).collect();
    let coeffs = dct::forward(&clamped, 1, img.h, img.w, img.c);
    let s = log_sum(&coeffs, delta as f64);
    let a = if s > 0.0 { bits as f64 / s } else { 0.0 };
    Ok(Calibration { a, actual_bits: bits, log_sum: s })
}

/// Run the straight-through, calibrated proxy on one image in 64-bit.
pub fn proxy_run(img: &PlanarImage, delta: f32) -> Result<CodecTrace> {
    if img.c == 0 {
        return Err(invalid("image has no channels"));
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(img.to_tensor());
    let d = tape.scalar_constant(delta as f64);
    let mut rng = rand::rngs::ThreadRng::default();
    let out = image_proxy_forward(&mut tape, x, d, &ProxyConfig::default(), &mut rng)?;
    Ok(CodecTrace {
        reconstruction: PlanarImage::from_tensor(tape.value(out.reconstruction))?,
        proxy_rate_bits: tape.value(out.rate).item(),
        actual_bits: out.actual_bits.map(|b| b.iter().sum()),
        stepsize: delta as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn coeffs(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::image(1, v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn straight_through_rounds_and_passes_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(coeffs(&[0.6, 0.4, -1.7, 2.5]));
        // Ties go toward zero.
        let d = tape.leaf(Tensor::scalar(1.0));
        let q = tape.quantize(x, d, QuantizerKind::StraightThrough, &mut rng(0)).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 0.0, -2.0, 2.0]);
        let s = tape.sum(q);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        // d/d(delta) = sum of round(x/delta) - x/delta
        let expect = 0.4 - 0.4 - 0.3 - 0.5;
        assert!((tape.grad(d).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_stepsize_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(coeffs(&[1.0]));
        let d = tape.leaf(Tensor::scalar(0.0));
        assert!(matches!(tape.quantize(x, d, QuantizerKind::StraightThrough, &mut rng(0)), Err(Error::InvalidStepsize(_))));
    }

    #[test]
    fn additive_noise_is_unbiased() {
        let n = 1_000_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(coeffs(&vec![0.3; n]));
        let d = tape.constant(Tensor::scalar(2.0));
        let q = tape.quantize(x, d, QuantizerKind::AdditiveNoise, &mut rng(1)).unwrap();
        let mean = tape.value(q).data().iter().map(|v| v - 0.3).sum::<f64>() / n as f64;
        let sigma = 2.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sigma, "{mean}");
        assert!(tape.value(q).data().iter().all(|v| (v - 0.3).abs() <= 1.0));
    }

    #[test]
    fn soft_quantizer_interpolates_levels_and_is_odd() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(coeffs(&[2.0, -2.0, 0.3, -0.3, 1.0, 3.99999]));
        let d = tape.constant(Tensor::scalar(2.0));
        let q = tape.quantize(x, d, QuantizerKind::Soft, &mut rng(0)).unwrap();
        let v = tape.value(q).data();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12);
        assert!((v[2] + v[3]).abs() < 1e-12);
        assert!((v[4] - 1.0).abs() < 1e-12);
        assert!((v[5] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn quantizer_gradients_match_finite_differences() {
        let mut r = rng(2);
        for kind in [QuantizerKind::StraightThrough, QuantizerKind::AdditiveNoise, QuantizerKind::Soft] {
            let x = Tensor::from_fn(Shape::image(4, 4, 2), |_, _, _, _| r.random_range(-20.0..20.0));
            let w = Tensor::from_fn(Shape::image(4, 4, 2), |_, _, _, _| r.random_range(-1.0..1.0));
            let inputs = vec![x, Tensor::scalar(3.0)];
            let noise = rng(3);
            let mut draws = rng(10);
            let report = check_gradients(
                &inputs,
                |tape, ids| {
                    let q = tape.quantize(ids[0], ids[1], kind, &mut noise.clone())?;
                    let wt = tape.constant(w.clone());
                    let p = tape.mul(q, wt)?;
                    Ok(tape.sum(p))
                },
                &GradCheck::default(),
                &mut draws,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn rate_proxy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(coeffs(&[0.0; 5]));
        let d = tape.constant(Tensor::scalar(4.0));
        let r = tape.rate_proxy(z, d, &[3.0]).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);
        let x = tape.constant(coeffs(&[4.0]));
        let r = tape.rate_proxy(x, d, &[3.0]).unwrap();
        assert!((tape.value(r).item() - 3.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rate_proxy_strictly_increasing_in_magnitude() {
        let mut tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::scalar(2.0));
        let mut prev = -1.0;
        for m in [0.0, 0.1, 1.0, 5.0, 100.0] {
            let x = tape.constant(coeffs(&[-m, 1.0]));
            let r = tape.rate_proxy(x, d, &[1.5]).unwrap();
            let v = tape.value(r).item();
            assert!(v > prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn rate_gradients_match_finite_differences() {
        let mut r = rng(4);
        let x = Tensor::from_fn(Shape::new(2, 4, 4, 1), |_, _, _, _| r.random_range(-30.0..30.0));
        let report = check_gradients(
            &[x, Tensor::scalar(5.0)],
            |tape, ids| tape.rate_proxy(ids[0], ids[1], &[1.7, 0.4]),
            &GradCheck::default(),
            &mut r,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn calibration_ratio_and_flat_image() {
        let img = PlanarImage::from_fn(16, 16, 3, |y, x, c| ((x * 13 + y * 7 + c * 50) % 256) as f64);
        let cal = calibrate(&img, 8.0).unwrap();
        assert!((cal.a * cal.log_sum - cal.actual_bits as f64).abs() < 1e-9 * cal.actual_bits as f64);
        let flat = calibrate(&PlanarImage::filled(16, 16, 3, 128.0), 8.0).unwrap();
        assert_eq!((flat.a, flat.log_sum), (0.0, 0.0));
        let trace = proxy_run(&PlanarImage::filled(16, 16, 3, 128.0), 8.0).unwrap();
        assert_eq!(trace.proxy_rate_bits, 0.0);
    }

    #[test]
    fn calibrated_rate_equals_codec_bits() {
        let mut r = rng(5);
        for i in 0..20 {
            let img = PlanarImage::from_fn(24, 16, 3, |_, _, _| r.random_range(-20.0..280.0));
            let delta = [2.0f32, 4.0, 8.0, 16.0, 32.0][i % 5];
            let trace = proxy_run(&img, delta).unwrap();
            let clamped = img.map(|v| v.clamp(0.0, 255.0));
            let bits = codec::payload_bits(&clamped, delta).unwrap();
            assert_eq!(trace.actual_bits, Some(bits));
            assert_eq!(trace.proxy_rate_bits, bits as f64);
        }
    }

    #[test]
    fn straight_through_matches_codec_quantizer() {
        let mut r = rng(6);
        let img = PlanarImage::from_fn(20, 28, 2, |_, _, _| r.random_range(0.0..255.0));
        let trace = proxy_run(&img, 4.0).unwrap();
        assert_eq!(trace.reconstruction, codec::quantize_dequantize(&img, 4.0).unwrap());
    }

    #[test]
    fn tiny_and_huge_stepsizes() {
        let mut r = rng(7);
        let img = PlanarImage::from_fn(16, 16, 1, |_, _, _| r.random_range(-50.0..300.0));
        let clamped = img.map(|v| v.clamp(0.0, 255.0));
        let fine = proxy_run(&img, 1e-6).unwrap();
        for (a, b) in fine.reconstruction.data.iter().zip(&clamped.data) {
            assert!((a - b).abs() < 1e-4);
        }
        let coarse = proxy_run(&img, 1e4).unwrap();
        // Every coefficient rounds to zero: the level-shift value everywhere.
        assert!(coarse.reconstruction.data.iter().all(|v| (v - 128.0).abs() < 1e-9));
    }

    #[test]
    fn composite_gradient_with_active_clamp() {
        let mut r = rng(8);
        // Half the samples sit outside [0, 255].
        let x = Tensor::from_fn(Shape::image(8, 16, 2), |_, _, _, _| r.random_range(-100.0..355.0));
        let target = Tensor::from_fn(Shape::image(8, 16, 2), |_, _, _, _| r.random_range(0.0..255.0));
        let report = check_gradients(
            &[x, Tensor::scalar(6.0f64.ln())],
            |tape, ids| {
                let d = tape.exp(ids[1]);
                let out = image_proxy_forward(tape, ids[0], d, &ProxyConfig::default(), &mut rng(9))?;
                let t = tape.constant(target.clone());
                let dist = tape.mse(out.reconstruction, t)?;
                let rate = tape.scale(out.rate, 0.01);
                tape.add(dist, rate)
            },
            &GradCheck::default(),
            &mut r,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
