//! Differentiable video stand-in: image proxy for the I-frame, flow-warped
//! inter prediction, a coarse intra predictor, per-block mode decisions,
//! residual coding through the image proxy and a frozen per-channel loop
//! filter.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::PlanarImage;
use crate::networks::{build_processor, Network, ProcessorSpec, UNetSpec};
use crate::proxy::{proxy_forward, CodecTrace, Framing, ProxyConfig};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Backward, NodeId, PixelMap, Real, Tape, Taps, Tensor};

const FLO_MAGIC: f32 = 202021.25;

/// Dense motion from frame t-1 to frame t on frame t's grid: content at
/// `p - f(p)` in t-1 appears at `p` in t. Interleaved `(dx, dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { h, w, data: vec![0.0; 2 * h * w] }
    }

    pub fn translation(h: usize, w: usize, dy: f64, dx: f64) -> Self {
        FlowField { h, w, data: [dx, dy].repeat(h * w) }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(invalid(format!("crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} flow", self.h, self.w)));
        }
        let mut data = Vec::with_capacity(2 * h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[2 * (y * self.w + x0)..2 * (y * self.w + x0 + w)]);
        }
        Ok(FlowField { h, w, data })
    }

    /// Flow for the 2x-downsampled grid: 2x2 block means, halved.
    pub fn downsample2(&self) -> Result<Self> {
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::OddDimension { op: "flow downsample2", h: self.h, w: self.w });
        }
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(2 * h * w);
        for y in 0..h {
            for x in 0..w {
                let (mut dx, mut dy) = (0.0, 0.0);
                for (yy, xx) in [(2 * y, 2 * x), (2 * y, 2 * x + 1), (2 * y + 1, 2 * x), (2 * y + 1, 2 * x + 1)] {
                    let (a, b) = self.at(yy, xx);
                    dx += a;
                    dy += b;
                }
                data.extend([dx / 8.0, dy / 8.0]);
            }
        }
        Ok(FlowField { h, w, data })
    }

    /// Rigid rotation by `angle` radians about the image centre.
    pub fn rotation(h: usize, w: usize, angle: f64) -> Self {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = angle.sin_cos();
        let mut data = Vec::with_capacity(2 * h * w);
        for y in 0..h {
            for x in 0..w {
                // Source point q with R q = p (about the centre), motion = p - q.
                let (py, px) = (y as f64 - cy, x as f64 - cx);
                let (qx, qy) = (c * px + s * py, -s * px + c * py);
                data.push(px - qx);
                data.push(py - qy);
            }
        }
        FlowField { h, w, data }
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.w + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != 2 * self.h * self.w {
            return Err(invalid(format!("{}x{} flow needs {} values, got {}", self.h, self.w, 2 * self.h * self.w, self.data.len())));
        }
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteFlow(i / 2)),
            None => Ok(()),
        }
    }

    /// Bilinear backward-warp weights with sample positions clamped to the frame.
    pub fn warp_map(&self) -> Result<PixelMap> {
        self.validate()?;
        let (h, w) = (self.h, self.w);
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = self.at(y, x);
                let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
                let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let mut t = Vec::with_capacity(4);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        if wy * wx != 0.0 {
                            t.push((yy * w + xx, wy * wx));
                        }
                    }
                }
                taps.push(t);
            }
        }
        Ok(PixelMap { in_h: h, in_w: w, out_h: h, out_w: w, taps })
    }

    /// Middlebury `.flo`.
    pub fn write_flo(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&FLO_MAGIC.to_le_bytes())?;
        w.write_all(&(self.w as i32).to_le_bytes())?;
        w.write_all(&(self.h as i32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_flo(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if f32::from_le_bytes(word) != FLO_MAGIC {
            return Err(Error::Malformed("not a .flo file (bad magic)".into()));
        }
        let mut dims = [0i32; 2];
        for d in &mut dims {
            r.read_exact(&mut word)?;
            *d = i32::from_le_bytes(word);
        }
        let [w, h] = dims;
        if w <= 0 || h <= 0 {
            return Err(Error::Malformed(format!(".flo dimensions {w}x{h}")));
        }
        let (h, w) = (h as usize, w as usize);
        let mut bytes = vec![0u8; 8 * h * w];
        r.read_exact(&mut bytes).map_err(|_| Error::Malformed(format!(".flo data shorter than {w}x{h}")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let flow = FlowField { h, w, data };
        flow.validate()?;
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_flo(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_flo(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct WarpOp {
    maps_t: Vec<PixelMap>,
}

fn apply_maps<T: Real>(maps: &[PixelMap], data: &[T], c: usize) -> Vec<T> {
    let per = data.len() / maps.len();
    maps.iter().zip(data.chunks(per)).flat_map(|(m, d)| m.apply(d, 1, c)).collect()
}

impl<T: Real> Backward<T> for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(apply_maps(&self.maps_t, g, out.shape().c))]
    }
}

fn binomial_taps(len: usize) -> Taps {
    let last = len - 1;
    let rows = (0..len).map(|i| vec![(i.saturating_sub(1), 0.25), (i, 0.5), ((i + 1).min(last), 0.25)]).collect();
    Taps::new(len, rows).expect("indices in range")
}

/// Inter/intra decision per block of one frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModeMap {
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    pub inter: Vec<bool>,
}

impl ModeMap {
    pub fn all_inter(&self) -> bool {
        self.inter.iter().all(|&b| b)
    }

    pub fn inter_count(&self) -> usize {
        self.inter.iter().filter(|&&b| b).count()
    }
}

impl<T: Real> Tape<T> {
    /// Backward-warp every batch item with its own flow. Linear in `x`; the
    /// flow is constant data.
    pub fn warp(&mut self, x: NodeId, flows: &[FlowField]) -> Result<NodeId> {
        let s = self.shape(x);
        if flows.len() != s.n {
            return Err(Error::ShapeMismatch { op: "warp", dim: "batch", expected: s.n, found: flows.len() });
        }
        let mut maps = Vec::with_capacity(flows.len());
        for f in flows {
            if (f.h, f.w) != (s.h, s.w) {
                let (dim, expected, found) = if f.h != s.h { ("height", s.h, f.h) } else { ("width", s.w, f.w) };
                return Err(Error::ShapeMismatch { op: "warp", dim, expected, found });
            }
            maps.push(f.warp_map()?);
        }
        let out = apply_maps(&maps, self.value(x).data(), s.c);
        let maps_t = maps.iter().map(PixelMap::transpose).collect();
        Ok(self.push_op(Tensor::from_vec(s, out)?, vec![x], WarpOp { maps_t }))
    }

    /// Separable [1, 2, 1] / 4 low-pass with clamped edges.
    pub fn binomial_lowpass(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        self.resample(x, &binomial_taps(s.h), &binomial_taps(s.w))
    }

    /// Per-block choice between two predictions by SSD against `current`
    /// (ties go to inter). The decision is constant for the backward pass.
    pub fn select_modes(
        &mut self,
        current: NodeId,
        inter: NodeId,
        intra: NodeId,
        block: usize,
    ) -> Result<(Vec<ModeMap>, NodeId)> {
        let s = self.shape(current);
        self.shape(inter).expect_eq(&s, "select_modes")?;
        self.shape(intra).expect_eq(&s, "select_modes")?;
        if block == 0 {
            return Err(invalid("mode block size must be positive"));
        }
        let (rows, cols) = (s.h.div_ceil(block), s.w.div_ceil(block));
        let (cur, a, b) = (self.value(current).data(), self.value(inter).data(), self.value(intra).data());
        let mut maps = Vec::with_capacity(s.n);
        let mut mask = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            let mut ssd = vec![(T::zero(), T::zero()); rows * cols];
            for y in 0..s.h {
                for x in 0..s.w {
                    let cell = &mut ssd[(y / block) * cols + x / block];
                    for c in 0..s.c {
                        let i = s.index(n, y, x, c);
                        let (da, db) = (cur[i] - a[i], cur[i] - b[i]);
                        cell.0 += da * da;
                        cell.1 += db * db;
                    }
                }
            }
            let inter: Vec<bool> = ssd.iter().map(|&(ea, eb)| ea <= eb).collect();
            maps.push(ModeMap { block, rows, cols, inter });
        }
        if (self.requires_grad(current) || self.requires_grad(inter) || self.requires_grad(intra)) && self.tracks_kinks() {
            let pattern: Vec<i32> = maps.iter().flat_map(|m| m.inter.iter().map(|&b| b as i32)).collect();
            if let Some(frozen) = self.note_kinks(|| pattern) {
                for (m, p) in maps.iter_mut().zip(frozen.chunks(rows * cols)) {
                    m.inter = p.iter().map(|&b| b == 1).collect();
                }
            }
        }
        for (n, m) in maps.iter().enumerate() {
            let inter = &m.inter;
            for y in 0..s.h {
                for x in 0..s.w {
                    if inter[(y / block) * cols + x / block] {
                        for c in 0..s.c {
                            mask[s.index(n, y, x, c)] = T::one();
                        }
                    }
                }
            }
        }
        let keep: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
        let m_inter = self.constant(Tensor::from_vec(s, mask)?);
        let m_intra = self.constant(Tensor::from_vec(s, keep)?);
        let pa = self.mul(inter, m_inter)?;
        let pb = self.mul(intra, m_intra)?;
        Ok((maps, self.add(pa, pb)?))
    }
}

/// Stepsizes of the four loop-filter rate points.
pub const RATE_POINTS: [f64; 4] = [4.0, 8.0, 16.0, 32.0];

/// Rate point whose stepsize is nearest to `delta` on a log scale.
pub fn rate_point(delta: f64) -> usize {
    let l = delta.max(f64::MIN_POSITIVE).log2();
    (0..RATE_POINTS.len())
        .min_by(|&a, &b| (RATE_POINTS[a].log2() - l).abs().total_cmp(&(RATE_POINTS[b].log2() - l).abs()))
        .expect("non-empty")
}

/// U-Net([8];[8,8]) on one channel, no pointwise branch.
pub fn loop_filter_spec() -> ProcessorSpec {
    ProcessorSpec {
        unet: UNetSpec::new(vec![8], vec![8, 8], 1, 1).expect("valid loop filter spec"),
        mlp_hidden: None,
        output_range: None,
    }
}

/// `x + 255 f(x / 255)`, each channel filtered independently.
pub fn loop_filter<T: Real>(tape: &mut Tape<T>, x: NodeId, net: &Network<T>) -> Result<NodeId> {
    let c = tape.shape(x).c;
    let params = net.bind(tape, false);
    let planes = tape.channels_to_batch(x);
    let scaled = tape.scale(planes, T::lit(1.0 / 255.0));
    let f = net.forward(tape, &params, scaled)?;
    let f = tape.scale(f, T::lit(255.0));
    let f = tape.batch_to_channels(f, c)?;
    tape.add(x, f)
}

/// The four frozen loop filters.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopFilterBank {
    pub filters: Vec<Network<f32>>,
}

impl LoopFilterBank {
    pub fn identity() -> Self {
        let net = Network::zeros(&loop_filter_spec()).expect("valid spec");
        LoopFilterBank { filters: vec![net; RATE_POINTS.len()] }
    }

    pub fn for_delta(&self, delta: f64) -> &Network<f32> {
        &self.filters[rate_point(delta)]
    }

    fn path(dir: &Path, i: usize) -> PathBuf {
        dir.join(format!("loop_filter_{i}.ckpt"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, f) in self.filters.iter().enumerate() {
            f.save(&Self::path(dir, i))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut filters = Vec::with_capacity(RATE_POINTS.len());
        for i in 0..RATE_POINTS.len() {
            let p = Self::path(dir, i);
            if !p.exists() {
                return Err(Error::Checkpoint(format!(
                    "pretrained loop filter {} not found; run `sandwich pretrain-loopfilter --out {}` first",
                    p.display(),
                    dir.display()
                )));
            }
            filters.push(Network::load(&p)?);
        }
        Ok(LoopFilterBank { filters })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    #[serde(default)]
    pub proxy: ProxyConfig,
    /// Intra predictor stepsize multiplier.
    #[serde(default = "default_intra_multiplier")]
    pub intra_multiplier: f64,
    #[serde(default = "default_block")]
    pub block: usize,
}

fn default_intra_multiplier() -> f64 {
    4.0
}

fn default_block() -> usize {
    16
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { proxy: ProxyConfig::default(), intra_multiplier: default_intra_multiplier(), block: default_block() }
    }
}

/// Coarse image-proxy pass of the current frame, then a binomial low-pass.
pub fn intra_predict<T: Real>(
    tape: &mut Tape<T>,
    current: NodeId,
    delta: NodeId,
    cfg: &VideoConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let s = tape.shape(current);
    let coarse = tape.scale(delta, T::lit(cfg.intra_multiplier));
    let clamped = tape.clamp_st(current, T::zero(), T::lit(255.0))?;
    let shifted = tape.add_const(clamped, T::lit(-crate::codec::LEVEL_SHIFT));
    let coeffs = tape.block_dct8(shifted);
    let q = tape.quantize(coeffs, coarse, cfg.proxy.quantizer, rng)?;
    let y = tape.block_idct8(q, s.h, s.w)?;
    let y = tape.add_const(y, T::lit(crate::codec::LEVEL_SHIFT));
    tape.binomial_lowpass(y)
}

pub struct FrameOutput {
    pub reconstruction: NodeId,
    /// Scalar proxy rate of the frame (I-frame or residual), batch summed.
    pub rate: NodeId,
    /// `None` for the I-frame.
    pub modes: Option<Vec<ModeMap>>,
    /// Reference-codec payload bits per batch item, calibrated mode only.
    pub actual_bits: Option<Vec<u64>>,
}

/// Run a group of frames through the video proxy. `frames[t]` is an NHWC
/// batch; `flows[t - 1][n]` carries item `n` from frame t-1 to t. Without
/// a loop filter the reconstruction is left unfiltered.
pub fn video_proxy_forward<T: Real>(
    tape: &mut Tape<T>,
    frames: &[NodeId],
    flows: &[Vec<FlowField>],
    delta: NodeId,
    cfg: &VideoConfig,
    filter: Option<&Network<T>>,
    rng: &mut impl Rng,
) -> Result<Vec<FrameOutput>> {
    if frames.is_empty() {
        return Err(invalid("clip has no frames"));
    }
    if flows.len() + 1 != frames.len() {
        return Err(invalid(format!("{} frames need {} flows, got {}", frames.len(), frames.len() - 1, flows.len())));
    }
    let first = crate::proxy::image_proxy_forward(tape, frames[0], delta, &cfg.proxy, rng)?;
    let mut outputs = vec![FrameOutput {
        reconstruction: first.reconstruction,
        rate: first.rate,
        modes: None,
        actual_bits: first.actual_bits,
    }];
    let mut prev = first.reconstruction;
    for (t, &frame) in frames.iter().enumerate().skip(1) {
        let inter = tape.warp(prev, &flows[t - 1])?;
        let intra = intra_predict(tape, frame, delta, cfg, rng)?;
        let (modes, pred) = tape.select_modes(frame, inter, intra, cfg.block)?;
        let residual = tape.sub(frame, pred)?;
        let coded = proxy_forward(tape, residual, delta, &cfg.proxy, Framing::RESIDUAL, rng)?;
        let mut recon = tape.add(pred, coded.reconstruction)?;
        if let Some(net) = filter {
            recon = loop_filter(tape, recon, net)?;
        }
        outputs.push(FrameOutput { reconstruction: recon, rate: coded.rate, modes: Some(modes), actual_bits: coded.actual_bits });
        prev = recon;
    }
    Ok(outputs)
}

/// Per-frame traces of one clip plus its rate-distortion Lagrangian.
#[derive(Clone, Debug, Serialize)]
pub struct ClipTrace {
    pub frames: Vec<CodecTrace>,
    pub modes: Vec<Option<ModeMap>>,
    pub lagrangian: f64,
}

impl ClipTrace {
    pub fn total_proxy_rate(&self) -> f64 {
        self.frames.iter().map(|f| f.proxy_rate_bits).sum()
    }

    pub fn total_actual_bits(&self) -> Option<u64> {
        self.frames.iter().map(|f| f.actual_bits).sum()
    }
}

/// Code one clip with the straight-through, calibrated proxy in 64-bit.
/// Actual bits are reference-codec payload bits of the I-frame and of each
/// residual, plus one mode flag per block for P-frames. The Lagrangian is
/// `sum_t MSE_t + lambda * R_t` with proxy rates.
pub fn video_run(
    clip: &[PlanarImage],
    flows: &[FlowField],
    delta: f32,
    lambda: f64,
    filter: Option<&Network<f32>>,
    cfg: &VideoConfig,
) -> Result<ClipTrace> {
    let mut tape = Tape::<f64>::new();
    let frames: Vec<NodeId> = clip.iter().map(|f| tape.constant(f.to_tensor())).collect();
    let flows: Vec<Vec<FlowField>> = flows.iter().map(|f| vec![f.clone()]).collect();
    let d = tape.scalar_constant(delta as f64);
    let filter = filter.map(Network::cast::<f64>);
    let mut rng = rand::rngs::ThreadRng::default();
    let cfg = VideoConfig { proxy: ProxyConfig { rate: crate::proxy::RateMode::Calibrated, ..cfg.proxy }, ..*cfg };
    let out = video_proxy_forward(&mut tape, &frames, &flows, d, &cfg, filter.as_ref(), &mut rng)?;
    let mut traces = Vec::with_capacity(out.len());
    let mut modes = Vec::with_capacity(out.len());
    let mut lagrangian = 0.0;
    for (f, src) in out.into_iter().zip(clip) {
        let reconstruction = PlanarImage::from_tensor(tape.value(f.reconstruction))?;
        let rate = tape.value(f.rate).item();
        lagrangian += reconstruction.mse(src)? + lambda * rate;
        let flags = f.modes.as_ref().map_or(0, |m| m.iter().map(|m| m.inter.len() as u64).sum());
        traces.push(CodecTrace {
            reconstruction,
            proxy_rate_bits: rate,
            actual_bits: f.actual_bits.map(|b| b.iter().sum::<u64>() + flags),
            stepsize: delta as f64,
        });
        modes.push(f.modes.map(|mut m| m.remove(0)));
    }
    Ok(ClipTrace { frames: traces, modes, lagrangian })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopFilterTraining {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LoopFilterTraining {
    fn default() -> Self {
        LoopFilterTraining { epochs: 20, lr: 1e-3, seed: 0 }
    }
}

/// Unfiltered proxy reconstructions of every P-frame at `delta`, paired with
/// the source frame.
pub fn loop_filter_pairs(clips: &[(Vec<PlanarImage>, Vec<FlowField>)], delta: f32) -> Result<Vec<(PlanarImage, PlanarImage)>> {
    let mut pairs = Vec::new();
    for (clip, flows) in clips {
        let trace = video_run(clip, flows, delta, 0.0, None, &VideoConfig::default())?;
        for (t, f) in trace.frames.into_iter().enumerate().skip(1) {
            pairs.push((f.reconstruction, clip[t].clone()));
        }
    }
    Ok(pairs)
}

/// Fit one loop filter per rate point to map proxy reconstructions back to
/// the source frames (MSE). The returned filters are meant to stay frozen.
pub fn pretrain_loop_filters(
    clips: &[(Vec<PlanarImage>, Vec<FlowField>)],
    cfg: &LoopFilterTraining,
) -> Result<LoopFilterBank> {
    let mut filters = Vec::with_capacity(RATE_POINTS.len());
    for (i, &delta) in RATE_POINTS.iter().enumerate() {
        let pairs = loop_filter_pairs(clips, delta as f32)?;
        filters.push(fit_loop_filter(&pairs, cfg, cfg.seed.wrapping_add(i as u64))?);
    }
    Ok(LoopFilterBank { filters })
}

pub fn fit_loop_filter(pairs: &[(PlanarImage, PlanarImage)], cfg: &LoopFilterTraining, seed: u64) -> Result<Network<f32>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut net: Network<f32> = build_processor(&loop_filter_spec(), &mut rng)?;
    net.zero_output_layers();
    let sizes = net.params.iter().map(Tensor::len);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, sizes);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &k in &order {
            let (noisy, clean) = &pairs[k];
            let mut tape = Tape::<f32>::new();
            let params = net.bind(&mut tape, true);
            let x = tape.constant(noisy.to_tensor());
            let target = tape.constant(clean.to_tensor());
            let planes = tape.channels_to_batch(x);
            let scaled = tape.scale(planes, 1.0 / 255.0);
            let f = net.forward(&mut tape, &params, scaled)?;
            let f = tape.scale(f, 255.0);
            let f = tape.batch_to_channels(f, noisy.c)?;
            let y = tape.add(x, f)?;
            let loss = tape.mse(y, target)?;
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = params.iter().map(|&p| tape.grad(p).map_or_else(Vec::new, <[f32]>::to_vec)).collect();
            let mut slices: Vec<&mut [f32]> = net.params.iter_mut().map(Tensor::data_mut).collect();
            adam.step(&mut slices, &mut grads);
        }
    }
    Ok(net)
}

/// Apply a frozen loop filter to a standalone image.
pub fn apply_loop_filter(img: &PlanarImage, net: &Network<f32>) -> Result<PlanarImage> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(img.to_tensor());
    let y = loop_filter(&mut tape, x, net)?;
    PlanarImage::from_tensor(tape.value(y))
}
