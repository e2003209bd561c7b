//! Actual-codec evaluation, stepsize sweeps and the matched-rate comparison.

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{pareto, psnr_from_sse, Provenance, RdPoint};
use super::model::{normalize, Sandwich};
use crate::error::{invalid, Result};
use crate::image::PlanarImage;
use crate::networks::Network;
use crate::tensor::Tape;
use crate::video::{video_run, FlowField, VideoConfig};

/// Pooled rate and PSNR of `model` at `delta` on source images (not normalized).
pub fn evaluate(model: &Sandwich<f32>, images: &[PlanarImage], delta: f64, lambda: f64) -> Result<RdPoint> {
    if images.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut m = model.cast::<f64>();
    m.delta = delta;
    let per: Vec<(u64, f64)> = images
        .par_iter()
        .map(|img| {
            let (recon, bits) = m.code(&normalize(img))?;
            let peak = img.max_value();
            Ok((bits, recon.map(|v| v * peak).sse(img)?))
        })
        .collect::<Result<_>>()?;
    let bits: u64 = per.iter().map(|p| p.0).sum();
    let sse: f64 = per.iter().map(|p| p.1).sum();
    let pixels: usize = images.iter().map(PlanarImage::pixels).sum();
    let samples: usize = images.iter().map(|i| i.data.len()).sum();
    Ok(RdPoint {
        rate: bits as f64 / pixels as f64,
        psnr: psnr_from_sse(sse, samples, images[0].bit_depth),
        provenance: Provenance::Actual,
        lambda,
        stepsize: delta,
    })
}

/// Every (model, stepsize) point, and their Pareto frontier.
pub fn rd_sweep(models: &[(f64, Sandwich<f32>)], images: &[PlanarImage], stepsizes: &[f64]) -> Result<(Vec<RdPoint>, Vec<RdPoint>)> {
    if models.is_empty() {
        return Err(invalid("rd sweep needs at least one model"));
    }
    let mut points = Vec::with_capacity(models.len() * stepsizes.len());
    for (lambda, model) in models {
        for &d in stepsizes {
            points.push(evaluate(model, images, d, *lambda)?);
        }
    }
    let front = pareto(&points);
    Ok((points, front))
}

/// Stepsizes around a trained operating point, geometric with ratio sqrt(2).
pub fn stepsizes_around(delta: f64, each_side: usize) -> Vec<f64> {
    let k = each_side as i32;
    (-k..=k).map(|i| delta * 2f64.powf(i as f64 / 2.0)).collect()
}

pub fn rd_csv(scenario: &str, points: &[RdPoint]) -> String {
    let mut out = String::from("scenario,lambda,stepsize,bits_per_pixel,psnr_db,provenance\n");
    for p in points {
        out.push_str(&format!("{scenario},{},{},{:.9},{:.9},{}\n", p.lambda, p.stepsize, p.rate, p.psnr, p.provenance.as_str()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchedGain {
    pub sandwich: RdPoint,
    pub baseline: RdPoint,
    pub gain_db: f64,
    /// Baseline operating points tried while matching the rate.
    pub baseline_points: Vec<RdPoint>,
}

/// PSNR gain of `model` at its own stepsize over `baseline` at a stepsize
/// whose actual rate is within `tolerance` (relative) of the sandwich's. The
/// best baseline PSNR among all matching points found is used.
pub fn matched_gain(model: &Sandwich<f32>, baseline: &Sandwich<f32>, images: &[PlanarImage], tolerance: f64) -> Result<MatchedGain> {
    let sandwich = evaluate(model, images, model.delta, 0.0)?;
    let target = sandwich.rate;
    let within = |p: &RdPoint| (p.rate - target).abs() <= tolerance * target;
    let mut tried = Vec::new();
    // Rate falls with the stepsize; bisect ln(delta).
    let (mut lo, mut hi) = (0.25f64.ln(), 1024f64.ln());
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let p = evaluate(baseline, images, mid.exp(), 0.0)?;
        let rate = p.rate;
        tried.push(p);
        if tried.iter().filter(|p| within(p)).count() >= 3 {
            break;
        }
        if rate > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = tried
        .iter()
        .filter(|p| within(p))
        .max_by(|a, b| a.psnr.total_cmp(&b.psnr))
        .cloned()
        .ok_or_else(|| invalid(format!("no baseline stepsize reaches {target:.4} bpp within {:.0}%", tolerance * 100.0)))?;
    Ok(MatchedGain { gain_db: sandwich.psnr - best.psnr, sandwich, baseline: best, baseline_points: tried })
}

/// Video: pooled rate (bits per source pixel per frame) and PSNR over clips
/// of source frames with source-resolution flows.
pub fn evaluate_video(
    model: &Sandwich<f32>,
    clips: &[(Vec<PlanarImage>, Vec<FlowField>)],
    delta: f64,
    lambda: f64,
    filter: Option<&Network<f32>>,
    cfg: &VideoConfig,
) -> Result<RdPoint> {
    if clips.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let m = model.cast::<f64>();
    let (mut bits, mut sse, mut pixels, mut samples) = (0u64, 0.0, 0usize, 0usize);
    let mut depth = 8;
    for (frames, flows) in clips {
        let bottlenecks = frames.iter().map(|f| Ok(m.bottleneck(&normalize(f))?.remove(0))).collect::<Result<Vec<_>>>()?;
        let flows = if m.scenario.is_resampled() {
            flows.iter().map(FlowField::downsample2).collect::<Result<Vec<_>>>()?
        } else {
            flows.clone()
        };
        let trace = video_run(&bottlenecks, &flows, delta as f32, lambda, filter, cfg)?;
        bits += trace.total_actual_bits().ok_or_else(|| invalid("video run did not report actual bits"))?;
        for (f, src) in trace.frames.iter().zip(frames) {
            let mut tape = Tape::<f64>::new();
            let params = m.bind(&mut tape, false);
            let b = tape.constant(f.reconstruction.to_tensor());
            let r = m.decode_side(&mut tape, &params.1, super::format::Grouped { full: b, half: None })?;
            let recon = PlanarImage::from_tensor(tape.value(r))?;
            sse += recon.map(|v| v * src.max_value()).sse(src)?;
            pixels += src.pixels();
            samples += src.data.len();
            depth = src.bit_depth;
        }
    }
    Ok(RdPoint {
        rate: bits as f64 / pixels as f64,
        psnr: psnr_from_sse(sse, samples, depth),
        provenance: Provenance::Actual,
        lambda,
        stepsize: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec;
    use crate::sandwich::{Format, Scenario};
    use crate::synthetic::{color_dataset, translating_clip};
    use rand::SeedableRng;

    #[test]
    fn degenerate_sandwich_points_equal_the_codec() {
        let images = color_dataset(5, 32, 32, 11);
        let model = Sandwich::<f32>::codec_only(Scenario::RgbOver444, Format::Yuv444, 8.0).unwrap();
        for delta in [3.0, 8.0, 20.0] {
            let p = evaluate(&model, &images, delta, 0.0).unwrap();
            let (mut bits, mut sse) = (0u64, 0.0);
            for img in &images {
                let s = codec::encode(img, delta as f32).unwrap();
                bits += s.payload_bits();
                sse += codec::decode(&s.bytes).unwrap().image.sse(img).unwrap();
            }
            assert_eq!(p.rate, bits as f64 / (5 * 32 * 32) as f64);
            assert!((p.psnr - psnr_from_sse(sse, 5 * 32 * 32 * 3, 8)).abs() < 1e-9);
        }
    }

    #[test]
    fn matched_gain_of_a_baseline_against_itself_is_near_zero() {
        let images = color_dataset(3, 32, 32, 12);
        let model = Sandwich::<f32>::codec_only(Scenario::RgbOver444, Format::Yuv444, 8.0).unwrap();
        let g = matched_gain(&model, &model, &images, 0.05).unwrap();
        assert!((g.baseline.rate - g.sandwich.rate).abs() <= 0.05 * g.sandwich.rate);
        assert!(g.gain_db.abs() < 1.0, "{g:?}");
    }

    #[test]
    fn sweep_and_csv() {
        let images = color_dataset(2, 16, 16, 13);
        let model = Sandwich::<f32>::codec_only(Scenario::RgbOver400, Format::Yuv400, 8.0).unwrap();
        let (all, front) = rd_sweep(&[(0.002, model)], &images, &stepsizes_around(8.0, 2)).unwrap();
        assert_eq!(all.len(), 5);
        assert!(!front.is_empty() && front.len() <= 5);
        let csv = rd_csv("rgb_over_400", &front);
        assert!(csv.starts_with("scenario,lambda,stepsize,bits_per_pixel,psnr_db,provenance\n"));
        assert_eq!(csv.lines().count(), front.len() + 1);
    }

    #[test]
    fn video_evaluation_counts_every_frame() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let clip = translating_clip(32, 32, 3, (0, 1), &mut rng);
        let model = Sandwich::<f32>::codec_only(Scenario::VideoHrOverLr, Format::Yuv444, 8.0).unwrap();
        let p = evaluate_video(&model, &[clip], 8.0, 0.0, None, &VideoConfig::default()).unwrap();
        assert!(p.rate > 0.0 && p.psnr > 15.0 && p.psnr < 99.0, "{p:?}");
    }
}
