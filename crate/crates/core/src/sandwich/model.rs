//! Pre-processor, codec (proxy or real), post-processor.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::format::{Format, Grouped};
use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::image::PlanarImage;
use crate::networks::{read_checkpoint, write_checkpoint};
use crate::networks::{build_processor, Network, ProcessorSpec};
use crate::proxy::{image_proxy_forward, ProxyConfig};
use crate::tensor::{NodeId, Real, Shape, Tape, Tensor};
use crate::video::{video_proxy_forward, FlowField, VideoConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "rgb_over_400")]
    RgbOver400,
    #[serde(rename = "rgb_over_420")]
    RgbOver420,
    #[serde(rename = "rgb_over_444")]
    RgbOver444,
    #[serde(rename = "hr_over_lr")]
    HrOverLr,
    #[serde(rename = "hdr_over_ldr")]
    HdrOverLdr,
    #[serde(rename = "normals")]
    Normals,
    #[serde(rename = "video_rgb_over_400")]
    VideoRgbOver400,
    #[serde(rename = "video_hr_over_lr")]
    VideoHrOverLr,
}

pub const SCENARIOS: [Scenario; 8] = [
    Scenario::RgbOver400,
    Scenario::RgbOver420,
    Scenario::RgbOver444,
    Scenario::HrOverLr,
    Scenario::HdrOverLdr,
    Scenario::Normals,
    Scenario::VideoRgbOver400,
    Scenario::VideoHrOverLr,
];

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::RgbOver400 => "rgb_over_400",
            Scenario::RgbOver420 => "rgb_over_420",
            Scenario::RgbOver444 => "rgb_over_444",
            Scenario::HrOverLr => "hr_over_lr",
            Scenario::HdrOverLdr => "hdr_over_ldr",
            Scenario::Normals => "normals",
            Scenario::VideoRgbOver400 => "video_rgb_over_400",
            Scenario::VideoHrOverLr => "video_hr_over_lr",
        }
    }

    pub fn default_format(self) -> Format {
        match self {
            Scenario::RgbOver400 | Scenario::VideoRgbOver400 => Format::Yuv400,
            Scenario::RgbOver420 => Format::Yuv420,
            _ => Format::Yuv444,
        }
    }

    /// Whether `format` is a valid bottleneck for this scenario.
    pub fn accepts(self, format: Format) -> bool {
        match self {
            Scenario::RgbOver400 | Scenario::RgbOver420 | Scenario::RgbOver444 | Scenario::VideoRgbOver400 => {
                format == self.default_format()
            }
            Scenario::VideoHrOverLr => format != Format::Yuv420,
            Scenario::HrOverLr | Scenario::HdrOverLdr | Scenario::Normals => true,
        }
    }

    pub fn source_bit_depth(self) -> u8 {
        if self == Scenario::HdrOverLdr {
            16
        } else {
            8
        }
    }

    pub fn is_video(self) -> bool {
        matches!(self, Scenario::VideoRgbOver400 | Scenario::VideoHrOverLr)
    }

    /// Bottleneck at half resolution.
    pub fn is_resampled(self) -> bool {
        matches!(self, Scenario::HrOverLr | Scenario::VideoHrOverLr)
    }

    /// Fixed pre/post stages of the plain codec for this scenario.
    pub fn codec_only(self, format: Format) -> (StageSpec, StageSpec) {
        if format == Format::Yuv400 {
            (StageSpec::Luma, StageSpec::Replicate)
        } else {
            (StageSpec::Identity, StageSpec::Identity)
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SCENARIOS
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown scenario {s:?}")))
    }
}

/// Source samples scaled to `[0, 1]`.
pub fn normalize(img: &PlanarImage) -> PlanarImage {
    let peak = img.max_value();
    img.map(|v| v / peak)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSpec {
    Identity,
    /// Fixed 0.299 / 0.587 / 0.114 weighting of three channels.
    Luma,
    /// One channel copied to three.
    Replicate,
    Network(ProcessorSpec),
}

impl StageSpec {
    pub fn build<T: Real>(&self, rng: &mut impl Rng) -> Result<Stage<T>> {
        Ok(match self {
            StageSpec::Identity => Stage::Identity,
            StageSpec::Luma => Stage::Luma,
            StageSpec::Replicate => Stage::Replicate,
            StageSpec::Network(spec) => Stage::Net(build_processor(spec, rng)?),
        })
    }

    fn io(&self) -> Option<(usize, usize)> {
        match self {
            StageSpec::Identity => None,
            StageSpec::Luma => Some((3, 1)),
            StageSpec::Replicate => Some((1, 3)),
            StageSpec::Network(spec) => Some((spec.cin(), spec.cout())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage<T> {
    Identity,
    Luma,
    Replicate,
    Net(Network<T>),
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl<T: Real> Stage<T> {
    pub fn spec(&self) -> StageSpec {
        match self {
            Stage::Identity => StageSpec::Identity,
            Stage::Luma => StageSpec::Luma,
            Stage::Replicate => StageSpec::Replicate,
            Stage::Net(n) => StageSpec::Network(n.spec.clone()),
        }
    }

    pub fn network(&self) -> Option<&Network<T>> {
        match self {
            Stage::Net(n) => Some(n),
            _ => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut Network<T>> {
        match self {
            Stage::Net(n) => Some(n),
            _ => None,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<NodeId> {
        self.network().map_or_else(Vec::new, |n| n.bind(tape, trainable))
    }

    pub fn forward(&self, tape: &mut Tape<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let c = tape.shape(x).c;
        let need = |n: usize| if c == n { Ok(()) } else { Err(Error::ChannelMismatch { what: "stage input", expected: n, found: c }) };
        match self {
            Stage::Identity => Ok(x),
            Stage::Luma => {
                need(3)?;
                let mut acc = None;
                for (ch, w) in LUMA.iter().enumerate() {
                    let plane = tape.slice_channels(x, ch, 1)?;
                    let term = tape.scale(plane, T::lit(*w));
                    acc = Some(match acc {
                        None => term,
                        Some(a) => tape.add(a, term)?,
                    });
                }
                Ok(acc.expect("three channels"))
            }
            Stage::Replicate => {
                need(1)?;
                tape.concat_channels(&[x, x, x])
            }
            Stage::Net(n) => {
                need(n.spec.cin())?;
                n.forward(tape, params, x)
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Stage<U> {
        match self {
            Stage::Identity => Stage::Identity,
            Stage::Luma => Stage::Luma,
            Stage::Replicate => Stage::Replicate,
            Stage::Net(n) => Stage::Net(n.cast()),
        }
    }
}

/// How the bottleneck is coded in a forward pass.
pub enum CodecPath<'a, R> {
    /// Differentiable proxy.
    Proxy { cfg: ProxyConfig, rng: &'a mut R },
    /// Reference codec on 8-bit rounded bottlenecks; constant for backward.
    Actual,
}

pub struct SandwichOutput {
    /// Reconstructed source, normalized units.
    pub reconstruction: NodeId,
    /// Scalar rate in bits, batch summed.
    pub rate: NodeId,
    /// Reference-codec bits per batch item where known.
    pub bits: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSpec {
    pub scenario: Scenario,
    pub format: Format,
    pub pre: StageSpec,
    pub post: StageSpec,
    pub delta: f64,
    /// Add the codec-only stage of the scenario around each network stage,
    /// so a zero network reproduces the plain codec.
    #[serde(default)]
    pub residual: bool,
}

impl SandwichSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.scenario.accepts(self.format) {
            return Err(invalid(format!("scenario {} cannot use format {}", self.scenario.as_str(), self.format.as_str())));
        }
        let fc = self.format.channels();
        let check = |stage: &StageSpec, cin: usize, cout: usize, what: &'static str| match stage.io() {
            None if cin != cout => Err(Error::ChannelMismatch { what, expected: cout, found: cin }),
            Some((i, o)) if (i, o) != (cin, cout) => {
                Err(invalid(format!("{what} maps {i} -> {o} channels, scenario needs {cin} -> {cout}")))
            }
            _ => Ok(()),
        };
        check(&self.pre, 3, fc, "pre-processor")?;
        check(&self.post, fc, 3, "post-processor")?;
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidStepsize(self.delta));
        }
        Ok(())
    }
}

/// A sandwich with materialized stages and its current stepsize.
#[derive(Clone, Debug, PartialEq)]
pub struct Sandwich<T> {
    pub scenario: Scenario,
    pub format: Format,
    pub pre: Stage<T>,
    pub post: Stage<T>,
    pub delta: f64,
    pub residual: bool,
}

/// Slim processors for a scenario: U-Net([32];[32,32]) plus the pointwise
/// branch, residual around the codec-only stages.
pub fn slim_spec(scenario: Scenario, format: Format, delta: f64) -> SandwichSpec {
    SandwichSpec {
        scenario,
        format,
        pre: StageSpec::Network(ProcessorSpec::slim(3, format.channels())),
        post: StageSpec::Network(ProcessorSpec::slim(format.channels(), 3)),
        delta,
        residual: true,
    }
}

impl<T: Real> Sandwich<T> {
    /// Random weights; with `residual` the output layers start at zero.
    pub fn build(spec: &SandwichSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut model = Sandwich {
            scenario: spec.scenario,
            format: spec.format,
            pre: spec.pre.build(rng)?,
            post: spec.post.build(rng)?,
            delta: spec.delta,
            residual: spec.residual,
        };
        if spec.residual {
            for stage in [&mut model.pre, &mut model.post] {
                if let Some(n) = stage.network_mut() {
                    n.zero_output_layers();
                }
            }
        }
        Ok(model)
    }

    fn skips(&self) -> (Stage<T>, Stage<T>) {
        let (pre, post) = self.scenario.codec_only(self.format);
        let fixed = |s: StageSpec| match s {
            StageSpec::Luma => Stage::Luma,
            StageSpec::Replicate => Stage::Replicate,
            _ => Stage::Identity,
        };
        (fixed(pre), fixed(post))
    }

    fn stage_forward(&self, tape: &mut Tape<T>, stage: &Stage<T>, skip: &Stage<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let y = stage.forward(tape, params, x)?;
        if self.residual && stage.network().is_some() {
            let s = skip.forward(tape, &[], x)?;
            tape.add(y, s)
        } else {
            Ok(y)
        }
    }

    pub fn codec_only(scenario: Scenario, format: Format, delta: f64) -> Result<Self> {
        let (pre, post) = scenario.codec_only(format);
        let spec = SandwichSpec { scenario, format, pre, post, delta, residual: false };
        Self::build(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
    }

    pub fn spec(&self) -> SandwichSpec {
        SandwichSpec {
            scenario: self.scenario,
            format: self.format,
            pre: self.pre.spec(),
            post: self.post.spec(),
            delta: self.delta,
            residual: self.residual,
        }
    }

    pub fn cast<U: Real>(&self) -> Sandwich<U> {
        Sandwich {
            scenario: self.scenario,
            format: self.format,
            pre: self.pre.cast(),
            post: self.post.cast(),
            delta: self.delta,
            residual: self.residual,
        }
    }

    pub fn param_count(&self) -> usize {
        [&self.pre, &self.post].iter().filter_map(|s| s.network()).map(Network::param_count).sum()
    }

    /// Parameter nodes of the pre- and post-processor.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Vec<NodeId>, Vec<NodeId>) {
        (self.pre.bind(tape, trainable), self.post.bind(tape, trainable))
    }

    /// Source (normalized, NHWC) to the bottleneck in pixel units, grouped.
    pub fn encode_side(&self, tape: &mut Tape<T>, pre: &[NodeId], s: NodeId) -> Result<Grouped> {
        let mut b = self.stage_forward(tape, &self.pre, &self.skips().0, pre, s)?;
        if self.scenario.is_resampled() {
            b = tape.resample_hr_lr(b)?;
        }
        let b = tape.scale(b, T::lit(255.0));
        tape.group_channels(b, self.format)
    }

    /// Decoded bottleneck (pixel units, grouped) to the normalized source.
    pub fn decode_side(&self, tape: &mut Tape<T>, post: &[NodeId], g: Grouped) -> Result<NodeId> {
        let u = tape.ungroup_channels(g)?;
        let mut u = tape.scale(u, T::lit(1.0 / 255.0));
        if self.scenario.is_resampled() {
            u = tape.resample_lr_hr(u)?;
        }
        self.stage_forward(tape, &self.post, &self.skips().1, post, u)
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        params: &(Vec<NodeId>, Vec<NodeId>),
        s: NodeId,
        delta: NodeId,
        path: CodecPath<'_, R>,
    ) -> Result<SandwichOutput> {
        let g = self.encode_side(tape, &params.0, s)?;
        let n = tape.shape(s).n;
        let mut decoded = Vec::new();
        let mut rate = None;
        let mut bits = vec![0u64; n];
        let mut known = true;
        let mut path = path;
        for part in g.parts() {
            let (recon, r, b) = match &mut path {
                CodecPath::Proxy { cfg, rng } => {
                    let part = tape.round_st(part)?;
                    let out = image_proxy_forward(tape, part, delta, cfg, *rng)?;
                    (out.reconstruction, out.rate, out.actual_bits)
                }
                CodecPath::Actual => {
                    let d = tape.value(delta).item().f64() as f32;
                    let (recon, b) = code_actual(tape.value(part), d)?;
                    let total = b.iter().sum::<u64>() as f64;
                    (tape.constant(recon), tape.scalar_constant(T::lit(total)), Some(b))
                }
            };
            decoded.push(recon);
            rate = Some(match rate {
                None => r,
                Some(acc) => tape.add(acc, r)?,
            });
            match b {
                Some(b) => bits.iter_mut().zip(b).for_each(|(t, v)| *t += v),
                None => known = false,
            }
        }
        let reconstruction = self.decode_side(tape, &params.1, Grouped::from_parts(&decoded))?;
        Ok(SandwichOutput { reconstruction, rate: rate.expect("at least one part"), bits: known.then_some(bits) })
    }

    /// Video: `frames[t]` batches of normalized sources, `flows[t - 1][n]` at
    /// source resolution. Returns per-frame reconstructions and rates.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_clip(
        &self,
        tape: &mut Tape<T>,
        params: &(Vec<NodeId>, Vec<NodeId>),
        frames: &[NodeId],
        flows: &[Vec<FlowField>],
        delta: NodeId,
        cfg: &VideoConfig,
        filter: Option<&Network<T>>,
        rng: &mut impl Rng,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        if self.format == Format::Yuv420 {
            return Err(invalid("video sandwiches support 4:4:4 and 4:0:0 bottlenecks"));
        }
        let bottlenecks = frames
            .iter()
            .map(|&f| {
                let b = self.encode_side(tape, &params.0, f)?.full;
                tape.round_st(b)
            })
            .collect::<Result<Vec<NodeId>>>()?;
        let flows: Vec<Vec<FlowField>> = if self.scenario.is_resampled() {
            flows.iter().map(|fs| fs.iter().map(FlowField::downsample2).collect()).collect::<Result<_>>()?
        } else {
            flows.to_vec()
        };
        let out = video_proxy_forward(tape, &bottlenecks, &flows, delta, cfg, filter, rng)?;
        out.into_iter()
            .map(|f| {
                let r = self.decode_side(tape, &params.1, Grouped { full: f.reconstruction, half: None })?;
                Ok((r, f.rate))
            })
            .collect()
    }

    /// Bottleneck images (8-bit rounded, pixel units) for one normalized source.
    pub fn bottleneck(&self, s: &PlanarImage) -> Result<Vec<PlanarImage>> {
        let mut tape = Tape::<T>::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(s.to_tensor());
        let g = self.encode_side(&mut tape, &params.0, x)?;
        g.parts().iter().map(|&p| Ok(PlanarImage::from_tensor(tape.value(p))?.quantize_to_depth())).collect()
    }

    /// Code one normalized source with the reference codec at the current
    /// stepsize; returns the normalized reconstruction and payload bits.
    pub fn code(&self, s: &PlanarImage) -> Result<(PlanarImage, u64)> {
        let mut tape = Tape::<T>::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(s.to_tensor());
        let d = tape.scalar_constant(T::lit(self.delta));
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &params, x, d, CodecPath::Actual)?;
        let bits = out.bits.expect("actual path counts bits")[0];
        Ok((PlanarImage::from_tensor(tape.value(out.reconstruction))?, bits))
    }
}

/// Round to 8 bits, code and decode every batch item.
fn code_actual<T: Real>(t: &Tensor<T>, delta: f32) -> Result<(Tensor<T>, Vec<u64>)> {
    let s = t.shape();
    let per = s.h * s.w * s.c;
    let mut out = Vec::with_capacity(t.len());
    let mut bits = Vec::with_capacity(s.n);
    for chunk in t.data().chunks(per) {
        let img = PlanarImage::new(s.h, s.w, s.c, chunk.iter().map(|v| v.f64()).collect())?.quantize_to_depth();
        let stream = codec::encode(&img, delta)?;
        bits.push(stream.payload_bits());
        out.extend(codec::decode(&stream.bytes)?.image.data.iter().map(|&v| T::lit(v)));
    }
    Ok((Tensor::from_vec(Shape::new(s.n, s.h, s.w, s.c), out)?, bits))
}

impl Sandwich<f32> {
    /// Stage specs as a JSON header, then pre- and post-processor parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat: Vec<f32> = Vec::with_capacity(self.param_count());
        for stage in [&self.pre, &self.post] {
            if let Some(n) = stage.network() {
                flat.extend(n.flat_params());
            }
        }
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&mut w, &self.spec(), &flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let (spec, flat): (SandwichSpec, Vec<f32>) = read_checkpoint(&mut std::io::BufReader::new(file))?;
        spec.validate()?;
        let mut model = Sandwich::<f32>::build(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        if flat.len() != model.param_count() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", model.param_count(), flat.len())));
        }
        let mut offset = 0;
        for stage in [&mut model.pre, &mut model.post] {
            if let Some(n) = stage.network_mut() {
                let len = n.param_count();
                n.set_flat_params(&flat[offset..offset + len])?;
                offset += len;
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::calibrate;
    use crate::synthetic::color_dataset;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_validation() {
        assert!(slim_spec(Scenario::RgbOver400, Format::Yuv444, 8.0).validate().is_err());
        assert!(slim_spec(Scenario::Normals, Format::Yuv420, 8.0).validate().is_ok());
        let mut bad = slim_spec(Scenario::RgbOver400, Format::Yuv400, 8.0);
        bad.pre = StageSpec::Identity;
        assert!(matches!(bad.validate(), Err(Error::ChannelMismatch { .. })));
        assert!(Sandwich::<f32>::codec_only(Scenario::RgbOver420, Format::Yuv420, 8.0).is_ok());
    }

    #[test]
    fn identity_sandwich_is_the_bare_codec() {
        for (i, img) in color_dataset(4, 32, 48, 3).iter().enumerate() {
            let delta = [2.0, 5.0, 11.0, 30.0][i];
            let model = Sandwich::<f64>::codec_only(Scenario::RgbOver444, Format::Yuv444, delta).unwrap();
            let (recon, bits) = model.code(&normalize(img)).unwrap();
            let stream = codec::encode(img, delta as f32).unwrap();
            assert_eq!(bits, stream.payload_bits());
            let direct = codec::decode(&stream.bytes).unwrap().image;
            assert!(recon.map(|v| v * 255.0).mse(&direct).unwrap() < 1e-12);
        }
    }

    #[test]
    fn proxy_rate_matches_actual_bits_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Sandwich::<f64>::build(&slim_spec(Scenario::RgbOver420, Format::Yuv420, 6.0), &mut rng).unwrap();
        let img = normalize(&color_dataset(1, 32, 32, 5)[0]);
        let mut tape = Tape::<f64>::new();
        let params = model.bind(&mut tape, false);
        let x = tape.constant(img.to_tensor());
        let d = tape.scalar_constant(6.0);
        let out = model.forward(&mut tape, &params, x, d, CodecPath::Proxy { cfg: ProxyConfig::default(), rng: &mut rng }).unwrap();
        let proxy_bits = tape.value(out.rate).item();
        let parts = model.bottleneck(&img).unwrap();
        let actual: u64 = parts.iter().map(|p| calibrate(p, 6.0).unwrap().actual_bits).sum();
        let (_, coded) = model.code(&img).unwrap();
        assert_eq!(coded, actual);
        assert!((proxy_bits - actual as f64).abs() < 1e-6 * actual as f64);
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Sandwich::<f32>::build(&slim_spec(Scenario::HrOverLr, Format::Yuv444, 7.5), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        assert_eq!(Sandwich::load(&path).unwrap(), model);
    }

    #[test]
    fn sandwich_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SandwichSpec {
            pre: StageSpec::Network(ProcessorSpec { mlp_hidden: Some(vec![4]), ..ProcessorSpec::new(crate::networks::UNetSpec::new(vec![4], vec![4, 4], 3, 1).unwrap()) }),
            post: StageSpec::Replicate,
            ..slim_spec(Scenario::HrOverLr, Format::Yuv400, 4.0)
        };
        let model = Sandwich::<f64>::build(&spec, &mut rng).unwrap();
        let img = normalize(&color_dataset(1, 16, 16, 6)[0]);
        let params = model.pre.network().unwrap().params.clone();
        let report = check_gradients(
            &params,
            |tape, ids| {
                let x = tape.constant(img.to_tensor());
                let d = tape.scalar_constant(4.0);
                let mut noise = ChaCha8Rng::seed_from_u64(0);
                let out = model.forward(tape, &(ids.to_vec(), vec![]), x, d, CodecPath::Proxy { cfg: ProxyConfig::default(), rng: &mut noise })?;
                let target = tape.constant(img.to_tensor());
                let dist = tape.mse(out.reconstruction, target)?;
                let r = tape.scale(out.rate, 1e-4);
                tape.add(dist, r)
            },
            &GradCheck { trials: 20, freeze_kinks: true, ..GradCheck::default() },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }
}
