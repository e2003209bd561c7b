//! Bottleneck channel formats and the fixed resamplers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Taps;
use crate::tensor::{NodeId, Real, Tape};

/// Channel grouping of the bottleneck. No color conversion is implied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Format {
    #[serde(rename = "4:4:4")]
    Yuv444,
    #[serde(rename = "4:2:0")]
    Yuv420,
    #[serde(rename = "4:0:0")]
    Yuv400,
}

impl Format {
    /// Channels the pre-processor must produce.
    pub fn channels(self) -> usize {
        match self {
            Format::Yuv444 | Format::Yuv420 => 3,
            Format::Yuv400 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Yuv444 => "4:4:4",
            Format::Yuv420 => "4:2:0",
            Format::Yuv400 => "4:0:0",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "4:4:4" | "444" => Ok(Format::Yuv444),
            "4:2:0" | "420" => Ok(Format::Yuv420),
            "4:0:0" | "400" => Ok(Format::Yuv400),
            _ => Err(invalid(format!("unknown format {s:?} (expected 4:4:4, 4:2:0 or 4:0:0)"))),
        }
    }
}

/// Bottleneck images as handed to the codec: one full-resolution image and,
/// for 4:2:0, a separate half-resolution two-channel image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grouped {
    pub full: NodeId,
    pub half: Option<NodeId>,
}

impl Grouped {
    pub fn parts(&self) -> Vec<NodeId> {
        std::iter::once(self.full).chain(self.half).collect()
    }

    pub fn from_parts(parts: &[NodeId]) -> Self {
        Grouped { full: parts[0], half: parts.get(1).copied() }
    }
}

impl<T: Real> Tape<T> {
    pub fn group_channels(&mut self, x: NodeId, format: Format) -> Result<Grouped> {
        let c = self.shape(x).c;
        if c != format.channels() {
            return Err(Error::ChannelMismatch { what: "bottleneck", expected: format.channels(), found: c });
        }
        Ok(match format {
            Format::Yuv444 | Format::Yuv400 => Grouped { full: x, half: None },
            Format::Yuv420 => {
                let luma = self.slice_channels(x, 0, 1)?;
                let chroma = self.slice_channels(x, 1, 2)?;
                Grouped { full: luma, half: Some(self.avg_downsample2(chroma)?) }
            }
        })
    }

    /// Full-resolution channels again; half-resolution ones are bilinearly upsampled.
    pub fn ungroup_channels(&mut self, g: Grouped) -> Result<NodeId> {
        match g.half {
            None => Ok(g.full),
            Some(half) => {
                let up = self.bilinear_upsample2(half)?;
                self.concat_channels(&[g.full, up])
            }
        }
    }

    /// Bicubic (a = -0.5) anti-aliased 2x downsampling.
    pub fn resample_hr_lr(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::OddDimension { op: "resample_hr_lr", h: s.h, w: s.w });
        }
        self.resample(x, &bicubic_down(s.h), &bicubic_down(s.w))
    }

    /// Lanczos3 2x upsampling.
    pub fn resample_lr_hr(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        self.resample(x, &lanczos3_up(s.h), &lanczos3_up(s.w))
    }
}

pub fn bicubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

pub fn lanczos3(x: f64) -> f64 {
    let t = x.abs();
    if t < 1e-12 {
        1.0
    } else if t < 3.0 {
        let p = std::f64::consts::PI * t;
        3.0 * p.sin() * (p / 3.0).sin() / (p * p)
    } else {
        0.0
    }
}

pub fn bicubic_down(len: usize) -> Taps {
    Taps::from_kernel(len, len / 2, 2.0, bicubic)
}

pub fn lanczos3_up(len: usize) -> Taps {
    Taps::from_kernel(len, 2 * len, 3.0, lanczos3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let id = tape.constant(x.clone());
        let y = f(&mut tape, id)?;
        Ok(tape.value(y).clone())
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn grouping_contracts() {
        let x = random(Shape::new(1, 8, 8, 3), 0);
        let err = run(&x, |t, id| Ok(t.group_channels(id, Format::Yuv400)?.full));
        assert!(matches!(err, Err(Error::ChannelMismatch { expected: 1, found: 3, .. })));
        let same = run(&x, |t, id| {
            let g = t.group_channels(id, Format::Yuv444)?;
            t.ungroup_channels(g)
        })
        .unwrap();
        assert_eq!(same, x);
        let flat = Tensor::from_fn(Shape::new(1, 8, 8, 3), |_, y, x, c| if c == 0 { (y * 8 + x) as f64 } else { 40.0 + c as f64 });
        let back = run(&flat, |t, id| {
            let g = t.group_channels(id, Format::Yuv420)?;
            assert_eq!(t.shape(g.half.unwrap()), Shape::new(1, 4, 4, 2));
            t.ungroup_channels(g)
        })
        .unwrap();
        assert_eq!(back, flat);
    }

    #[test]
    fn kernels_are_closed_form() {
        // Independent closed forms.
        let cubic = |x: f64| {
            let t = x.abs();
            if t <= 1.0 {
                1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
            } else if t < 2.0 {
                -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
            } else {
                0.0
            }
        };
        let sinc = |x: f64| if x == 0.0 { 1.0 } else { (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x) };
        let down = bicubic_down(32);
        for o in 3..13 {
            let centre = 2.0 * o as f64 + 0.5;
            let expect: Vec<(usize, f64)> = (0..32).map(|j| (j, cubic((j as f64 - centre) / 2.0))).filter(|t| t.1 != 0.0).collect();
            let total: f64 = expect.iter().map(|t| t.1).sum();
            assert_eq!(down.rows()[o].len(), expect.len());
            for (&(i, w), &(j, e)) in down.rows()[o].iter().zip(&expect) {
                assert_eq!(i, j);
                assert!((w - e / total).abs() < 1e-12);
            }
        }
        let up = lanczos3_up(16);
        for o in 6..26 {
            let centre = (o as f64 + 0.5) / 2.0 - 0.5;
            let expect: Vec<(usize, f64)> =
                (0..16).filter(|&j| (j as f64 - centre).abs() < 3.0).map(|j| (j, sinc(j as f64 - centre) * sinc((j as f64 - centre) / 3.0))).collect();
            let total: f64 = expect.iter().map(|t| t.1).sum();
            assert_eq!(up.rows()[o].len(), expect.len());
            for (&(i, w), &(j, e)) in up.rows()[o].iter().zip(&expect) {
                assert_eq!(i, j);
                assert!((w - e / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resamplers_are_linear_and_keep_constants() {
        let c = Tensor::full(Shape::new(1, 16, 12, 2), 0.37);
        for f in [Tape::resample_hr_lr, Tape::resample_lr_hr] {
            let y = run(&c, f).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
            let (a, b) = (random(Shape::new(1, 16, 12, 2), 1), random(Shape::new(1, 16, 12, 2), 2));
            let sum = Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 3.0 * y).collect()).unwrap();
            let (ya, yb, ys) = (run(&a, f).unwrap(), run(&b, f).unwrap(), run(&sum, f).unwrap());
            for ((p, q), s) in ya.data().iter().zip(yb.data()).zip(ys.data()) {
                assert!((2.0 * p - 3.0 * q - s).abs() < 1e-12);
            }
        }
        assert!(matches!(run(&random(Shape::new(1, 9, 8, 1), 3), Tape::resample_hr_lr), Err(Error::OddDimension { .. })));
    }

    #[test]
    fn resampler_gradients() {
        let x = random(Shape::new(1, 8, 8, 2), 4);
        for f in [Tape::resample_hr_lr, Tape::resample_lr_hr] {
            let report = check_gradients(
                &[x.clone()],
                |tape, ids| {
                    let y = f(tape, ids[0])?;
                    let y2 = tape.mul(y, y)?;
                    Ok(tape.sum(y2))
                },
                &GradCheck::default(),
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{report:?}");
        }
    }
}
