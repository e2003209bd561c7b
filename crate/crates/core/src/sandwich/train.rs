//! Seeded mini-batch training of a sandwich on `D + lambda R`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{CodecPath, Sandwich};
use crate::error::{invalid, Error, Result};
use crate::image::PlanarImage;
use crate::networks::Network;
use crate::proxy::{ProxyConfig, QuantizerKind, RateMode};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{NodeId, Real, Shape, Tape, Tensor};
use crate::video::{FlowField, VideoConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of `ln(delta)`; 0 freezes the stepsize.
    pub delta_lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub quantizer: QuantizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 200, batch_size: 8, lr: 1e-3, delta_lr: 1e-2, lambda: 0.002, seed: 0, quantizer: QuantizerKind::StraightThrough }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || self.delta_lr < 0.0 {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Epoch means of the loss and its parts; `r` in bits per source pixel,
/// `d` as MSE in normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
    pub d: f64,
    pub r: f64,
    pub delta: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,loss,D,R,delta\n");
    for r in rows {
        out.push_str(&format!("{},{:.9e},{:.9e},{:.9e},{:.9e}\n", r.epoch, r.loss, r.d, r.r, r.delta));
    }
    out
}

/// Stack equally sized images into one NHWC batch.
pub fn batch_tensor<T: Real>(images: &[&PlanarImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("empty batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.h, img.w, img.c) != (first.h, first.w, first.c) {
            return Err(invalid("batch images differ in shape"));
        }
        data.extend(img.data.iter().map(|&v| T::lit(v)));
    }
    Tensor::from_vec(Shape::new(images.len(), first.h, first.w, first.c), data)
}

struct Optimizer {
    nets: Adam<f32>,
    delta: Adam<f32>,
}

impl Optimizer {
    fn new(model: &Sandwich<f32>, cfg: &TrainConfig) -> Self {
        let sizes: Vec<usize> = nets(model).flat_map(|n| n.params.iter().map(Tensor::len)).collect();
        Optimizer {
            nets: Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, sizes),
            delta: Adam::new(AdamConfig { lr: cfg.delta_lr, ..AdamConfig::default() }, [1]),
        }
    }

    fn step(&mut self, model: &mut Sandwich<f32>, tape: &Tape<f32>, ids: &(Vec<NodeId>, Vec<NodeId>), log_delta: NodeId, train_delta: bool) {
        let mut grads: Vec<Vec<f32>> =
            ids.0.iter().chain(&ids.1).map(|&p| tape.grad(p).map_or_else(|| vec![0.0; tape.value(p).len()], <[f32]>::to_vec)).collect();
        let mut slices: Vec<&mut [f32]> = Vec::new();
        for stage in [&mut model.pre, &mut model.post] {
            if let Some(n) = stage.network_mut() {
                slices.extend(n.params.iter_mut().map(Tensor::data_mut));
            }
        }
        if !slices.is_empty() {
            self.nets.step(&mut slices, &mut grads);
        }
        if train_delta {
            let mut theta = [model.delta.ln() as f32];
            let mut g = vec![tape.grad(log_delta).map_or(0.0, |g| g[0])];
            self.delta.step(&mut [&mut theta[..]], std::slice::from_mut(&mut g));
            model.delta = (theta[0] as f64).exp();
        }
    }
}

fn nets(model: &Sandwich<f32>) -> impl Iterator<Item = &Network<f32>> {
    [&model.pre, &model.post].into_iter().filter_map(|s| s.network())
}

fn proxy_cfg(cfg: &TrainConfig) -> ProxyConfig {
    ProxyConfig { quantizer: cfg.quantizer, rate: RateMode::Calibrated }
}

/// Train in place on normalized images. `on_epoch` sees the model after
/// every epoch (for checkpointing). A non-finite loss restores the model of
/// the previous epoch and fails with [`Error::Diverged`].
pub fn train(
    model: &mut Sandwich<f32>,
    data: &[PlanarImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Sandwich<f32>, &LossRow) -> Result<()>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(model, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let good = model.clone();
        order.shuffle(&mut rng);
        let (mut sl, mut sd, mut sr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PlanarImage> = chunk.iter().map(|&i| &data[i]).collect();
            let x = batch_tensor::<f32>(&batch)?;
            let s = x.shape();
            let mut tape = Tape::<f32>::new();
            let ids = model.bind(&mut tape, true);
            let log_delta = tape.leaf(Tensor::scalar(model.delta.ln() as f32));
            let delta = tape.exp(log_delta);
            let src = tape.constant(x);
            let out = model.forward(&mut tape, &ids, src, delta, CodecPath::Proxy { cfg: proxy_cfg(cfg), rng: &mut rng })?;
            let dist = tape.mse(out.reconstruction, src)?;
            let bpp = tape.scale(out.rate, 1.0 / (s.n * s.h * s.w) as f32);
            let weighted = tape.scale(bpp, cfg.lambda as f32);
            let loss = tape.add(dist, weighted)?;
            let (l, d, r) = (tape.value(loss).item() as f64, tape.value(dist).item() as f64, tape.value(bpp).item() as f64);
            if !l.is_finite() {
                *model = good;
                return Err(Error::Diverged { epoch });
            }
            tape.backward(loss)?;
            opt.step(model, &tape, &ids, log_delta, cfg.delta_lr > 0.0);
            let k = chunk.len() as f64;
            sl += l * k;
            sd += d * k;
            sr += r * k;
        }
        let n = data.len() as f64;
        let row = LossRow { epoch, loss: sl / n, d: sd / n, r: sr / n, delta: model.delta };
        on_epoch(model, &row)?;
        log.push(row);
    }
    Ok(log)
}

/// A training clip: normalized frames and the flows between them.
pub type Clip = (Vec<PlanarImage>, Vec<FlowField>);

/// Video training on the total clip Lagrangian (frame-averaged).
pub fn train_video(
    model: &mut Sandwich<f32>,
    clips: &[Clip],
    cfg: &TrainConfig,
    vcfg: &VideoConfig,
    filter: Option<&Network<f32>>,
    mut on_epoch: impl FnMut(&Sandwich<f32>, &LossRow) -> Result<()>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if clips.is_empty() || clips.iter().any(|c| c.0.is_empty() || c.0.len() != clips[0].0.len()) {
        return Err(invalid("video training needs clips of one common, non-zero length"));
    }
    let frames_per_clip = clips[0].0.len();
    let vcfg = VideoConfig { proxy: proxy_cfg(cfg), ..*vcfg };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(model, cfg);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let good = model.clone();
        order.shuffle(&mut rng);
        let (mut sl, mut sd, mut sr) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let ids = model.bind(&mut tape, true);
            let log_delta = tape.leaf(Tensor::scalar(model.delta.ln() as f32));
            let delta = tape.exp(log_delta);
            let mut frames = Vec::with_capacity(frames_per_clip);
            for t in 0..frames_per_clip {
                let batch: Vec<&PlanarImage> = chunk.iter().map(|&i| &clips[i].0[t]).collect();
                frames.push(tape.constant(batch_tensor::<f32>(&batch)?));
            }
            let flows: Vec<Vec<FlowField>> =
                (0..frames_per_clip - 1).map(|t| chunk.iter().map(|&i| clips[i].1[t].clone()).collect()).collect();
            let out = model.forward_clip(&mut tape, &ids, &frames, &flows, delta, &vcfg, filter, &mut rng)?;
            let s = tape.shape(frames[0]);
            let mut dist = None;
            let mut rate = None;
            for (&(recon, r), &src) in out.iter().zip(&frames) {
                let d = tape.mse(recon, src)?;
                dist = Some(match dist {
                    None => d,
                    Some(a) => tape.add(a, d)?,
                });
                rate = Some(match rate {
                    None => r,
                    Some(a) => tape.add(a, r)?,
                });
            }
            let t = frames_per_clip as f32;
            let dist = tape.scale(dist.expect("frames"), 1.0 / t);
            let bpp = tape.scale(rate.expect("frames"), 1.0 / (t * (s.n * s.h * s.w) as f32));
            let weighted = tape.scale(bpp, cfg.lambda as f32);
            let loss = tape.add(dist, weighted)?;
            let (l, d, r) = (tape.value(loss).item() as f64, tape.value(dist).item() as f64, tape.value(bpp).item() as f64);
            if !l.is_finite() {
                *model = good;
                return Err(Error::Diverged { epoch });
            }
            tape.backward(loss)?;
            opt.step(model, &tape, &ids, log_delta, cfg.delta_lr > 0.0);
            let k = chunk.len() as f64;
            sl += l * k;
            sd += d * k;
            sr += r * k;
        }
        let n = clips.len() as f64;
        let row = LossRow { epoch, loss: sl / n, d: sd / n, r: sr / n, delta: model.delta };
        on_epoch(model, &row)?;
        log.push(row);
    }
    Ok(log)
}
